//! Repeated-trial evaluation of set predictors.
//!
//! The model stays fixed. Each trial draws a calibration subset from the
//! calibration pool (uniformly, without replacement, from a trial-indexed
//! seed), fits the predictor on it and measures coverage and mean set size
//! on the test examples.

use std::fmt;

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{fit_temperature, naive_select, select_topk, topk_select, Temperature, TopKChoice};
use crate::conformal::{calibrate, check_epsilon, ConformalPredictor, NonconformityKind};
use crate::error::{Error, Result};
use crate::eval::metrics::{example_ranks, filtered_rank};
use crate::eval::stats::{mean_sd, spearman};
use crate::kg::{candidates_for, EntityId, FilterIndex, QueryExample};
use crate::models::ModelParams;
use crate::rng::{stream, stream_rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Measure {
    Negscore,
    Minmax,
    Softmax,
    CalibratedSoftmax,
    Rank,
}

impl Measure {
    pub const STANDARD: [Measure; 3] = [Measure::Negscore, Measure::Minmax, Measure::Softmax];

    pub fn name(self) -> &'static str {
        match self {
            Measure::Negscore => "negscore",
            Measure::Minmax => "minmax",
            Measure::Softmax => "softmax",
            Measure::CalibratedSoftmax => "calibrated_softmax",
            Measure::Rank => "rank",
        }
    }
}

/// What to build; fitted per trial into a [`FittedPredictor`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum PredictorSpec {
    Conformal {
        kind: Measure,
        /// Only for `calibrated_softmax`; fitted on the calibration data when absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        temperature: Option<f64>,
    },
    Naive,
    Platt,
    Topk,
    Fixed { k: usize },
}

impl PredictorSpec {
    pub fn conformal(kind: Measure) -> Self {
        PredictorSpec::Conformal { kind, temperature: None }
    }

    /// The six predictors compared in the main experiment.
    pub fn standard_set() -> Vec<Self> {
        vec![
            PredictorSpec::Naive,
            PredictorSpec::Platt,
            PredictorSpec::Topk,
            PredictorSpec::conformal(Measure::Negscore),
            PredictorSpec::conformal(Measure::Softmax),
            PredictorSpec::conformal(Measure::Minmax),
        ]
    }

    pub fn family(&self) -> &'static str {
        match self {
            PredictorSpec::Conformal { .. } => "conformal",
            PredictorSpec::Naive => "naive",
            PredictorSpec::Platt => "platt",
            PredictorSpec::Topk => "topk",
            PredictorSpec::Fixed { .. } => "fixed",
        }
    }

    pub fn is_conformal(&self) -> bool {
        matches!(self, PredictorSpec::Conformal { .. })
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            PredictorSpec::Fixed { k: 0 } => Err(Error::InvalidArgument("fixed predictor needs k >= 1".into())),
            PredictorSpec::Conformal { kind, temperature: Some(t) } => {
                if kind != Measure::CalibratedSoftmax {
                    return Err(Error::InvalidArgument(format!(
                        "temperature only applies to calibrated_softmax, not {}",
                        kind.name()
                    )));
                }
                NonconformityKind::CalibratedSoftmax { temperature: t }.validate()
            }
            _ => Ok(()),
        }
    }

    /// Whether fitting looks at calibration data at all.
    pub fn uses_calibration(&self) -> bool {
        !matches!(self, PredictorSpec::Naive | PredictorSpec::Fixed { .. })
    }
}

impl fmt::Display for PredictorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PredictorSpec::Conformal { kind, .. } => f.write_str(kind.name()),
            PredictorSpec::Fixed { k } => write!(f, "top{k}"),
            other => f.write_str(other.family()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FittedPredictor {
    Conformal(ConformalPredictor),
    Naive { epsilon: f64 },
    Platt { epsilon: f64, temperature: Temperature },
    TopK(TopKChoice),
    Fixed(usize),
}

impl FittedPredictor {
    pub fn fit(
        spec: &PredictorSpec,
        model: &ModelParams,
        calibration: &[QueryExample],
        epsilon: f64,
        filter: Option<&FilterIndex>,
    ) -> Result<Self> {
        spec.validate()?;
        check_epsilon(epsilon)?;
        if spec.uses_calibration() && calibration.is_empty() {
            return Err(Error::InvalidArgument("calibration set is empty".into()));
        }
        Ok(match *spec {
            PredictorSpec::Conformal { kind, temperature } => {
                let measure = match kind {
                    Measure::Negscore => NonconformityKind::NegScore,
                    Measure::Minmax => NonconformityKind::Minmax,
                    Measure::Softmax => NonconformityKind::Softmax,
                    Measure::Rank => NonconformityKind::Rank,
                    Measure::CalibratedSoftmax => NonconformityKind::CalibratedSoftmax {
                        temperature: match temperature {
                            Some(t) => t,
                            None => fit_temperature(model, calibration)?.temperature,
                        },
                    },
                };
                FittedPredictor::Conformal(ConformalPredictor::new(calibrate(model, calibration, measure)?, epsilon)?)
            }
            PredictorSpec::Naive => FittedPredictor::Naive { epsilon },
            PredictorSpec::Platt => FittedPredictor::Platt {
                epsilon,
                temperature: fit_temperature(model, calibration)?,
            },
            PredictorSpec::Topk => FittedPredictor::TopK(select_topk(model, calibration, epsilon, filter)?),
            PredictorSpec::Fixed { k } => FittedPredictor::Fixed(k),
        })
    }

    /// Answer set (sorted ids) from a query's full score vector.
    pub fn select(&self, scores: &[f64], candidates: &[bool]) -> Result<Vec<EntityId>> {
        Ok(match self {
            FittedPredictor::Conformal(p) => p.select(scores, candidates)?,
            FittedPredictor::Naive { epsilon } => naive_select(scores, *epsilon, None, candidates),
            FittedPredictor::Platt { epsilon, temperature } => {
                naive_select(scores, *epsilon, Some(temperature.temperature), candidates)
            }
            FittedPredictor::TopK(choice) => topk_select(scores, choice.k, candidates),
            FittedPredictor::Fixed(k) => topk_select(scores, *k, candidates),
        })
    }
}

/// Answer sets for every example, in input order.
pub fn predict_all(
    predictor: &FittedPredictor,
    model: &ModelParams,
    examples: &[QueryExample],
    filter: Option<&FilterIndex>,
) -> Result<Vec<Vec<EntityId>>> {
    examples
        .par_iter()
        .map(|ex| {
            let mask = candidates_for(filter, ex, model.num_entities);
            predictor.select(&model.score_all(&ex.query), &mask)
        })
        .collect()
}

/// Fraction of examples whose answer is in its set, and mean set size.
pub fn coverage_and_size(sets: &[Vec<EntityId>], examples: &[QueryExample]) -> (f64, f64) {
    let n = examples.len() as f64;
    let hits = sets
        .iter()
        .zip(examples)
        .filter(|(s, ex)| s.binary_search(&ex.answer).is_ok())
        .count();
    let size: usize = sets.iter().map(Vec::len).sum();
    (hits as f64 / n, size as f64 / n)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialConfig {
    pub epsilon: f64,
    pub trials: usize,
    pub seed: u64,
    /// Calibration examples drawn per trial; `None` means 80% of the pool.
    pub calibration_size: Option<usize>,
}

impl TrialConfig {
    pub fn new(epsilon: f64, trials: usize, seed: u64) -> Self {
        Self {
            epsilon,
            trials,
            seed,
            calibration_size: None,
        }
    }

    fn subset_size(&self, pool: usize) -> usize {
        self.calibration_size.unwrap_or_else(|| (pool * 4).div_ceil(5).max(1))
    }
}

pub const DEFAULT_CALIBRATION_FRACTION: f64 = 0.8;

/// One report row: a predictor at one setting, aggregated over trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorRecord {
    pub predictor: String,
    pub kind: String,
    pub epsilon: f64,
    pub coverage_mean: f64,
    pub coverage_sd: Option<f64>,
    pub size_mean: f64,
    pub size_sd: Option<f64>,
    pub mr: Option<f64>,
    pub trials: usize,
}

/// Per-trial outcome, kept for callers that need more than the aggregate.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialOutcome {
    pub predictor: FittedPredictor,
    pub coverage: f64,
    pub mean_size: f64,
}

/// Draws the calibration subset for `trial`, preserving pool order.
pub fn calibration_subset(pool: &[QueryExample], size: usize, seed: u64, trial: usize) -> Result<Vec<QueryExample>> {
    if size > pool.len() {
        return Err(Error::InvalidArgument(format!(
            "calibration size {size} exceeds the {} available examples",
            pool.len()
        )));
    }
    if size == pool.len() {
        return Ok(pool.to_vec());
    }
    let mut rng = stream_rng(seed, stream::TRIAL, trial as u64);
    let mut idx = sample(&mut rng, pool.len(), size).into_vec();
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| pool[i]).collect())
}

pub fn run_trials(
    spec: &PredictorSpec,
    model: &ModelParams,
    pool: &[QueryExample],
    test: &[QueryExample],
    cfg: &TrialConfig,
    filter: Option<&FilterIndex>,
) -> Result<Vec<TrialOutcome>> {
    if test.is_empty() {
        return Err(Error::InvalidArgument("test set is empty".into()));
    }
    if cfg.trials == 0 {
        return Err(Error::InvalidArgument("trials must be at least 1".into()));
    }
    let size = cfg.subset_size(pool.len());
    (0..cfg.trials)
        .map(|trial| {
            let calibration = if spec.uses_calibration() {
                calibration_subset(pool, size, cfg.seed, trial)?
            } else {
                Vec::new()
            };
            let predictor = FittedPredictor::fit(spec, model, &calibration, cfg.epsilon, filter)?;
            let sets = predict_all(&predictor, model, test, filter)?;
            let (coverage, mean_size) = coverage_and_size(&sets, test);
            Ok(TrialOutcome {
                predictor,
                coverage,
                mean_size,
            })
        })
        .collect()
}

pub fn summarize(spec: &PredictorSpec, epsilon: f64, outcomes: &[TrialOutcome], mr: Option<f64>) -> PredictorRecord {
    let cov = mean_sd(&outcomes.iter().map(|o| o.coverage).collect::<Vec<_>>());
    let size = mean_sd(&outcomes.iter().map(|o| o.mean_size).collect::<Vec<_>>());
    PredictorRecord {
        predictor: spec.to_string(),
        kind: spec.family().to_string(),
        epsilon,
        coverage_mean: cov.mean,
        coverage_sd: cov.sd,
        size_mean: size.mean,
        size_sd: size.sd,
        mr,
        trials: outcomes.len(),
    }
}

pub fn evaluate_predictor(
    spec: &PredictorSpec,
    model: &ModelParams,
    pool: &[QueryExample],
    test: &[QueryExample],
    cfg: &TrialConfig,
    filter: Option<&FilterIndex>,
) -> Result<PredictorRecord> {
    let outcomes = run_trials(spec, model, pool, test, cfg, filter)?;
    Ok(summarize(spec, cfg.epsilon, &outcomes, None))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub mr: f64,
    pub epsilon: f64,
    pub filtered: bool,
    pub trials: usize,
    pub records: Vec<PredictorRecord>,
}

/// Experiment 1: every predictor at one error rate.
pub fn evaluate_all(
    specs: &[PredictorSpec],
    model: &ModelParams,
    pool: &[QueryExample],
    test: &[QueryExample],
    cfg: &TrialConfig,
    filter: Option<&FilterIndex>,
) -> Result<EvalReport> {
    let ranks = example_ranks(model, test, filter);
    let mr = ranks.iter().sum::<f64>() / ranks.len().max(1) as f64;
    let records = specs
        .iter()
        .map(|spec| {
            let outcomes = run_trials(spec, model, pool, test, cfg, filter)?;
            Ok(summarize(spec, cfg.epsilon, &outcomes, Some(mr)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        model: model.kind.to_string(),
        mr,
        epsilon: cfg.epsilon,
        filtered: filter.is_some(),
        trials: cfg.trials,
        records,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptivenessBin {
    pub rank_lo: usize,
    pub rank_hi: usize,
    pub count: usize,
    pub mean_size: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptivenessProfile {
    pub bin_width: usize,
    pub max_rank: usize,
    pub bins: Vec<AdaptivenessBin>,
    /// Examples whose rank exceeds `max_rank`.
    pub overflow_count: usize,
    pub overflow_mean_size: Option<f64>,
}

impl AdaptivenessProfile {
    /// Spearman correlation between bin index and mean size over the
    /// populated bins.
    pub fn size_trend(&self) -> Option<f64> {
        let (idx, sizes): (Vec<f64>, Vec<f64>) = self
            .bins
            .iter()
            .enumerate()
            .filter_map(|(i, b)| b.mean_size.map(|s| (i as f64, s)))
            .unzip();
        spearman(&idx, &sizes)
    }

    pub fn populated(&self) -> impl Iterator<Item = &AdaptivenessBin> {
        self.bins.iter().filter(|b| b.count > 0)
    }
}

/// Groups examples by the filtered rank of their true answer into
/// `[1, w], [w + 1, 2w], ...` up to `max_rank` and averages set sizes per bin.
pub fn adaptiveness_from(ranks: &[f64], sizes: &[usize], bin_width: usize, max_rank: usize) -> Result<AdaptivenessProfile> {
    if bin_width == 0 || max_rank == 0 {
        return Err(Error::InvalidArgument("bin_width and max_rank must be positive".into()));
    }
    let nbins = max_rank.div_ceil(bin_width);
    let mut sums = vec![0usize; nbins];
    let mut counts = vec![0usize; nbins];
    let (mut over_sum, mut over_count) = (0usize, 0usize);
    for (&rank, &size) in ranks.iter().zip(sizes) {
        let r = rank.ceil() as usize;
        if r > max_rank {
            over_sum += size;
            over_count += 1;
        } else {
            let b = (r.max(1) - 1) / bin_width;
            sums[b] += size;
            counts[b] += 1;
        }
    }
    let mean = |s: usize, c: usize| (c > 0).then(|| s as f64 / c as f64);
    let bins = (0..nbins)
        .map(|b| AdaptivenessBin {
            rank_lo: b * bin_width + 1,
            rank_hi: ((b + 1) * bin_width).min(max_rank),
            count: counts[b],
            mean_size: mean(sums[b], counts[b]),
        })
        .collect();
    Ok(AdaptivenessProfile {
        bin_width,
        max_rank,
        bins,
        overflow_count: over_count,
        overflow_mean_size: mean(over_sum, over_count),
    })
}

pub fn adaptiveness(
    predictor: &FittedPredictor,
    model: &ModelParams,
    test: &[QueryExample],
    bin_width: usize,
    max_rank: usize,
    filter: Option<&FilterIndex>,
) -> Result<AdaptivenessProfile> {
    let per_example: Vec<(f64, usize)> = test
        .par_iter()
        .map(|ex| {
            let mask = candidates_for(filter, ex, model.num_entities);
            let scores = model.score_all(&ex.query);
            let set = predictor.select(&scores, &mask)?;
            Ok((filtered_rank(&scores, ex.answer, &mask), set.len()))
        })
        .collect::<Result<_>>()?;
    let (ranks, sizes): (Vec<f64>, Vec<usize>) = per_example.into_iter().unzip();
    adaptiveness_from(&ranks, &sizes, bin_width, max_rank)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// Calibration size; `None` for the whole pool.
    pub n_cal: Option<usize>,
    #[serde(flatten)]
    pub record: PredictorRecord,
}

/// Experiment 3: coverage and size for several calibration set sizes, plus
/// one deterministic row calibrated on the whole pool.
#[allow(clippy::too_many_arguments)]
pub fn calibration_size_sweep(
    spec: &PredictorSpec,
    model: &ModelParams,
    pool: &[QueryExample],
    sizes: &[usize],
    trials: usize,
    epsilon: f64,
    test: &[QueryExample],
    seed: u64,
    filter: Option<&FilterIndex>,
) -> Result<Vec<SweepRow>> {
    if let Some(&too_big) = sizes.iter().find(|&&s| s > pool.len()) {
        return Err(Error::InvalidArgument(format!(
            "calibration size {too_big} exceeds the {} available examples",
            pool.len()
        )));
    }
    let mut rows = Vec::with_capacity(sizes.len() + 1);
    for &size in sizes {
        let cfg = TrialConfig {
            epsilon,
            trials,
            seed,
            calibration_size: Some(size),
        };
        rows.push(SweepRow {
            n_cal: Some(size),
            record: evaluate_predictor(spec, model, pool, test, &cfg, filter)?,
        });
    }
    let full = TrialConfig {
        epsilon,
        trials: 1,
        seed,
        calibration_size: Some(pool.len()),
    };
    rows.push(SweepRow {
        n_cal: None,
        record: evaluate_predictor(spec, model, pool, test, &full, filter)?,
    });
    Ok(rows)
}

/// Experiment 4: every predictor at every error rate of the grid. Trials use
/// the same calibration subsets at every grid point.
pub fn epsilon_sweep(
    specs: &[PredictorSpec],
    model: &ModelParams,
    pool: &[QueryExample],
    test: &[QueryExample],
    grid: &[f64],
    cfg: &TrialConfig,
    filter: Option<&FilterIndex>,
) -> Result<Vec<PredictorRecord>> {
    for &eps in grid {
        check_epsilon(eps)?;
    }
    let mut rows = Vec::with_capacity(specs.len() * grid.len());
    for spec in specs {
        for &eps in grid {
            let cfg = TrialConfig {
                epsilon: eps,
                ..cfg.clone()
            };
            rows.push(evaluate_predictor(spec, model, pool, test, &cfg, filter)?);
        }
    }
    Ok(rows)
}
