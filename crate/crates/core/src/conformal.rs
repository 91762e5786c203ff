//! Split conformal answer sets.
//!
//! A nonconformity measure maps a (query, candidate) pair to a real number,
//! lower meaning more typical. Calibration stores the sorted measures of
//! held-out (query, true answer) pairs. For error rate `ε` with `n`
//! calibration scores, the threshold is the `j`-th smallest score with
//! `j = ⌈(n + 1)(1 - ε)⌉`, or `+∞` when `j > n`; a candidate joins the
//! answer set iff its measure is `≤` the threshold. That is the same set as
//! admitting every candidate `α` with `(|{i : α_i ≥ α}| + 1) / (n + 1) > ε`.
//!
//! Normalizing measures (Minmax, Softmax, Rank) always look at the full,
//! unfiltered score vector of a query; filtering only restricts membership.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{EntityId, Query, QueryExample};
use crate::models::ModelParams;
use crate::numeric::{mean_ranks, softmax};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NonconformityKind {
    NegScore,
    Minmax,
    Softmax,
    CalibratedSoftmax { temperature: f64 },
    Rank,
}

impl NonconformityKind {
    pub fn name(&self) -> &'static str {
        match self {
            NonconformityKind::NegScore => "negscore",
            NonconformityKind::Minmax => "minmax",
            NonconformityKind::Softmax => "softmax",
            NonconformityKind::CalibratedSoftmax { .. } => "calibrated_softmax",
            NonconformityKind::Rank => "rank",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            NonconformityKind::CalibratedSoftmax { temperature } if !(temperature > 0.0 && temperature.is_finite()) => {
                Err(Error::InvalidArgument(format!("temperature must be positive, got {temperature}")))
            }
            _ => Ok(()),
        }
    }
}

/// Nonconformity of every candidate entity of one query, given the query's
/// full score vector.
pub fn nonconformity_all(scores: &[f64], kind: NonconformityKind) -> Result<Vec<f64>> {
    kind.validate()?;
    Ok(match kind {
        NonconformityKind::NegScore => scores.iter().map(|s| -s).collect(),
        NonconformityKind::Minmax => {
            let min = scores.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let span = max - min;
            if !(span > 0.0) {
                return Err(Error::DegenerateScores(scores.len()));
            }
            scores.iter().map(|s| -((s - min) / span)).collect()
        }
        NonconformityKind::Softmax => softmax(scores, 1.0).into_iter().map(|p| 1.0 - p).collect(),
        NonconformityKind::CalibratedSoftmax { temperature } => {
            softmax(scores, temperature).into_iter().map(|p| 1.0 - p).collect()
        }
        NonconformityKind::Rank => mean_ranks(scores),
    })
}

pub fn nonconformity(model: &ModelParams, query: &Query, entity: EntityId, kind: NonconformityKind) -> Result<f64> {
    if let NonconformityKind::NegScore = kind {
        return Ok(-model.score(query.materialize(entity)));
    }
    Ok(nonconformity_all(&model.score_all(query), kind)?[entity])
}

/// Sorted calibration nonconformity scores for one measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationProfile {
    #[serde(flatten)]
    pub kind: NonconformityKind,
    pub n_cal: usize,
    pub scores: Vec<f64>,
}

impl CalibrationProfile {
    pub fn from_scores(kind: NonconformityKind, mut scores: Vec<f64>) -> Result<Self> {
        kind.validate()?;
        if scores.is_empty() {
            return Err(Error::InvalidArgument("calibration set is empty".into()));
        }
        if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite calibration score {bad}")));
        }
        scores.sort_by(f64::total_cmp);
        Ok(Self {
            kind,
            n_cal: scores.len(),
            scores,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("profile always serializes")
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let raw: CalibrationProfile = serde_json::from_str(json)?;
        if raw.n_cal != raw.scores.len() {
            return Err(Error::InvalidArgument(format!(
                "n_cal {} does not match {} stored scores",
                raw.n_cal,
                raw.scores.len()
            )));
        }
        Self::from_scores(raw.kind, raw.scores)
    }
}

/// Nonconformity of each example's true answer, in input order.
pub fn calibration_scores(model: &ModelParams, examples: &[QueryExample], kind: NonconformityKind) -> Result<Vec<f64>> {
    kind.validate()?;
    examples
        .par_iter()
        .enumerate()
        .map(|(index, ex)| {
            nonconformity(model, &ex.query, ex.answer, kind).map_err(|e| Error::Calibration {
                index,
                source: Box::new(e),
            })
        })
        .collect()
}

pub fn calibrate(model: &ModelParams, examples: &[QueryExample], kind: NonconformityKind) -> Result<CalibrationProfile> {
    if examples.is_empty() {
        return Err(Error::InvalidArgument("calibration set is empty".into()));
    }
    CalibrationProfile::from_scores(kind, calibration_scores(model, examples, kind)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Threshold {
    Finite(f64),
    /// Every candidate is admitted.
    Infinite,
}

impl Threshold {
    #[inline]
    pub fn admits(&self, alpha: f64) -> bool {
        match *self {
            Threshold::Finite(tau) => alpha <= tau,
            Threshold::Infinite => true,
        }
    }
}

pub fn check_epsilon(epsilon: f64) -> Result<()> {
    if epsilon > 0.0 && epsilon < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("epsilon must lie in (0, 1), got {epsilon}")))
    }
}

/// 1-based index of the calibration order statistic used as threshold,
/// `⌈(n + 1)(1 - ε)⌉`, evaluated as `(n + 1) - ⌊ε (n + 1)⌋` to avoid
/// rounding in `1 - ε`.
pub fn quantile_index(n_cal: usize, epsilon: f64) -> usize {
    let n1 = n_cal + 1;
    n1 - (epsilon * n1 as f64).floor() as usize
}

pub fn threshold(profile: &CalibrationProfile, epsilon: f64) -> Result<Threshold> {
    check_epsilon(epsilon)?;
    let j = quantile_index(profile.n_cal, epsilon);
    Ok(if j > profile.n_cal {
        Threshold::Infinite
    } else {
        Threshold::Finite(profile.scores[j - 1])
    })
}

/// A predicted answer set; `entities` is sorted ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerSet {
    pub query: Query,
    pub entities: Vec<EntityId>,
    pub epsilon: f64,
    pub filtered: bool,
}

impl AnswerSet {
    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn contains(&self, e: EntityId) -> bool {
        self.entities.binary_search(&e).is_ok()
    }
}

/// A calibration profile bound to an error rate.
#[derive(Debug, Clone, PartialEq)]
pub struct ConformalPredictor {
    pub profile: CalibrationProfile,
    pub epsilon: f64,
    pub threshold: Threshold,
}

impl ConformalPredictor {
    pub fn new(profile: CalibrationProfile, epsilon: f64) -> Result<Self> {
        let threshold = threshold(&profile, epsilon)?;
        Ok(Self {
            profile,
            epsilon,
            threshold,
        })
    }

    /// Candidates (by mask) whose nonconformity is within the threshold.
    pub fn select(&self, scores: &[f64], candidates: &[bool]) -> Result<Vec<EntityId>> {
        if let Threshold::Infinite = self.threshold {
            return Ok(mask_to_ids(candidates));
        }
        let alphas = nonconformity_all(scores, self.profile.kind)?;
        Ok(alphas
            .iter()
            .zip(candidates)
            .enumerate()
            .filter(|(_, (&a, &c))| c && self.threshold.admits(a))
            .map(|(e, _)| e)
            .collect())
    }
}

pub fn mask_to_ids(mask: &[bool]) -> Vec<EntityId> {
    mask.iter().enumerate().filter(|(_, &m)| m).map(|(e, _)| e).collect()
}

/// Conformal answer set of `query`. `candidates` is the (possibly filtered)
/// mask of admissible answers; pass all-true for unfiltered prediction.
pub fn predict_set(
    model: &ModelParams,
    query: &Query,
    profile: &CalibrationProfile,
    epsilon: f64,
    candidates: &[bool],
) -> Result<AnswerSet> {
    let predictor = ConformalPredictor::new(profile.clone(), epsilon)?;
    let entities = predictor.select(&model.score_all(query), candidates)?;
    Ok(AnswerSet {
        query: *query,
        entities,
        epsilon,
        filtered: candidates.iter().any(|&c| !c),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::init_model;
    use crate::rng::stream_rng;
    use rand::Rng;

    /// Literal counting rule: admit α iff (#{i: α_i ≥ α} + 1) / (n + 1) > ε.
    fn counting_rule(cal: &[f64], alpha: f64, eps: f64) -> bool {
        let ge = cal.iter().filter(|&&a| a >= alpha).count();
        (ge + 1) as f64 / (cal.len() + 1) as f64 > eps
    }

    fn profile(scores: &[f64]) -> CalibrationProfile {
        CalibrationProfile::from_scores(NonconformityKind::NegScore, scores.to_vec()).unwrap()
    }

    #[test]
    fn minmax_endpoints() {
        let a = nonconformity_all(&[2.0, 4.0, 6.0], NonconformityKind::Minmax).unwrap();
        assert_eq!(a, vec![-0.0, -0.5, -1.0]);
        assert!(matches!(
            nonconformity_all(&[1.0; 3], NonconformityKind::Minmax),
            Err(Error::DegenerateScores(3))
        ));
    }

    #[test]
    fn softmax_and_negscore_values() {
        let a = nonconformity_all(&[0.3; 4], NonconformityKind::Softmax).unwrap();
        assert!(a.iter().all(|&v| v == 0.75));
        assert_eq!(nonconformity_all(&[3.7], NonconformityKind::NegScore).unwrap(), vec![-3.7]);
        let s = [0.1, 2.0, -1.5, 0.7];
        let plain = nonconformity_all(&s, NonconformityKind::Softmax).unwrap();
        let cal = nonconformity_all(&s, NonconformityKind::CalibratedSoftmax { temperature: 1.0 }).unwrap();
        assert_eq!(
            plain.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            cal.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert!(nonconformity_all(&s, NonconformityKind::CalibratedSoftmax { temperature: 0.0 }).is_err());
    }

    #[test]
    fn rank_measure_is_mean_rank() {
        assert_eq!(
            nonconformity_all(&[1.0, 9.0, 5.0, 5.0], NonconformityKind::Rank).unwrap(),
            vec![4.0, 1.0, 2.5, 2.5]
        );
    }

    #[test]
    fn single_entity_nonconformity_matches_vector() {
        let m = init_model(crate::ModelKind::ComplEx, 4, 9, 2, 3).unwrap();
        let q = Query::head(2, 1);
        for kind in [
            NonconformityKind::NegScore,
            NonconformityKind::Minmax,
            NonconformityKind::Softmax,
            NonconformityKind::Rank,
        ] {
            let all = nonconformity_all(&m.score_all(&q), kind).unwrap();
            for e in 0..9 {
                assert_eq!(nonconformity(&m, &q, e, kind).unwrap(), all[e]);
            }
        }
    }

    #[test]
    fn calibration_sorts_and_keeps_duplicates() {
        let p = CalibrationProfile::from_scores(NonconformityKind::Softmax, vec![0.5, 0.1, 0.9, 0.1]).unwrap();
        assert_eq!(p.scores, vec![0.1, 0.1, 0.5, 0.9]);
        assert_eq!(p.n_cal, 4);
        assert!(CalibrationProfile::from_scores(NonconformityKind::Softmax, vec![]).is_err());
    }

    #[test]
    fn calibration_reports_offending_example() {
        // a model with a single entity has a constant score vector
        let m = init_model(crate::ModelKind::DistMult, 2, 1, 1, 0).unwrap();
        let ex = [QueryExample { query: Query::tail(0, 0), answer: 0 }];
        match calibrate(&m, &ex, NonconformityKind::Minmax) {
            Err(Error::Calibration { index: 0, source }) => assert!(matches!(*source, Error::DegenerateScores(1))),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn profile_json_round_trip() {
        let p = CalibrationProfile::from_scores(NonconformityKind::CalibratedSoftmax { temperature: 2.5 }, vec![0.2, 0.1]).unwrap();
        let json = p.to_json();
        assert_eq!(json, r#"{"kind":"calibrated_softmax","temperature":2.5,"n_cal":2,"scores":[0.1,0.2]}"#);
        assert_eq!(CalibrationProfile::from_json(&json).unwrap(), p);
        assert!(CalibrationProfile::from_json(r#"{"kind":"softmax","n_cal":3,"scores":[0.1]}"#).is_err());
    }

    #[test]
    fn threshold_examples() {
        let nine: Vec<f64> = (1..=9).map(f64::from).collect();
        let p = profile(&nine);
        assert_eq!(threshold(&p, 0.1).unwrap(), Threshold::Finite(9.0));
        assert_eq!(threshold(&p, 0.05).unwrap(), Threshold::Infinite);
        let tenths: Vec<f64> = (1..=9).map(|i| i as f64 / 10.0).collect();
        let p = profile(&tenths);
        assert_eq!(threshold(&p, 0.5).unwrap(), Threshold::Finite(0.5));
        assert!(threshold(&p, 0.5).unwrap().admits(0.5));
        assert!(counting_rule(&tenths, 0.5, 0.5));
        assert!(threshold(&p, 0.0).is_err());
        assert!(threshold(&p, 1.0).is_err());
        // the counting oracle agrees on every candidate for these grids
        for eps in [0.05, 0.1, 0.5] {
            for &cal in &[&nine, &tenths] {
                let t = threshold(&profile(cal), eps).unwrap();
                for &alpha in cal.iter().chain(&[0.0, 100.0]) {
                    assert_eq!(t.admits(alpha), counting_rule(cal, alpha, eps));
                }
            }
        }
    }

    #[test]
    fn threshold_matches_counting_rule_randomized() {
        let mut rng = stream_rng(17, 0, 0);
        for _ in 0..2000 {
            let n = rng.gen_range(1..=50);
            // coarse values force ties
            let cal: Vec<f64> = (0..n).map(|_| rng.gen_range(0..20) as f64 / 4.0).collect();
            let eps = rng.gen_range(0.001..0.999);
            let t = threshold(&profile(&cal), eps).unwrap();
            let alpha = rng.gen_range(-1..22) as f64 / 4.0;
            assert_eq!(t.admits(alpha), counting_rule(&cal, alpha, eps), "cal={cal:?} eps={eps} alpha={alpha}");
        }
    }

    #[test]
    fn infinite_threshold_returns_all_candidates() {
        let m = init_model(crate::ModelKind::DistMult, 3, 6, 1, 1).unwrap();
        let p = CalibrationProfile::from_scores(NonconformityKind::Softmax, vec![0.5; 5]).unwrap();
        let mut mask = vec![true; 6];
        mask[2] = false;
        let set = predict_set(&m, &Query::tail(0, 0), &p, 0.01, &mask).unwrap();
        assert_eq!(set.entities, vec![0, 1, 3, 4, 5]);
        assert!(set.filtered);
    }

    #[test]
    fn small_instance_matches_brute_force() {
        let mut rng = stream_rng(5, 0, 0);
        for seed in 0..20 {
            let m = init_model(crate::ModelKind::TransE { norm: 2 }, 3, 6, 2, seed).unwrap();
            let cal: Vec<f64> = (0..5).map(|_| rng.gen_range(0.0..1.0)).collect();
            let p = CalibrationProfile::from_scores(NonconformityKind::Softmax, cal.clone()).unwrap();
            let q = Query::tail(seed as usize % 6, 1);
            for eps in [0.1, 0.2, 0.4, 0.6, 0.9] {
                let set = predict_set(&m, &q, &p, eps, &[true; 6]).unwrap();
                let expect: Vec<usize> = (0..6)
                    .filter(|&e| {
                        let a = nonconformity(&m, &q, e, NonconformityKind::Softmax).unwrap();
                        counting_rule(&cal, a, eps)
                    })
                    .collect();
                assert_eq!(set.entities, expect);
            }
        }
    }

    #[test]
    fn sets_are_nested_in_epsilon() {
        let m = init_model(crate::ModelKind::DistMult, 4, 30, 2, 8).unwrap();
        let ex: Vec<QueryExample> = (0..40)
            .map(|i| QueryExample { query: Query::tail(i % 30, i % 2), answer: (i * 7) % 30 })
            .collect();
        let p = calibrate(&m, &ex, NonconformityKind::Minmax).unwrap();
        let grid: Vec<f64> = (1..=50).map(|i| i as f64 / 100.0).collect();
        let q = Query::head(3, 1);
        let sets: Vec<AnswerSet> = grid
            .iter()
            .map(|&e| predict_set(&m, &q, &p, e, &[true; 30]).unwrap())
            .collect();
        for w in sets.windows(2) {
            assert!(w[1].entities.iter().all(|e| w[0].contains(*e)));
        }
    }

    #[test]
    fn invariance_properties() {
        let mut rng = stream_rng(9, 0, 0);
        for _ in 0..100 {
            let s: Vec<f64> = (0..20).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let c = rng.gen_range(-100.0..100.0);
            let scale = rng.gen_range(0.1..10.0);
            let shifted: Vec<f64> = s.iter().map(|v| v + c).collect();
            let affine: Vec<f64> = s.iter().map(|v| v * scale + c).collect();
            let a = nonconformity_all(&s, NonconformityKind::Softmax).unwrap();
            let b = nonconformity_all(&shifted, NonconformityKind::Softmax).unwrap();
            assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= 1e-10));
            let a = nonconformity_all(&s, NonconformityKind::Minmax).unwrap();
            let b = nonconformity_all(&affine, NonconformityKind::Minmax).unwrap();
            assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= 1e-10));
        }
    }

    #[test]
    fn rank_conformal_is_top_floor_tau() {
        let mut rng = stream_rng(21, 0, 0);
        for _ in 0..50 {
            let scores: Vec<f64> = (0..25).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let cal: Vec<f64> = (0..30).map(|_| rng.gen_range(1..=25) as f64).collect();
            let p = CalibrationProfile::from_scores(NonconformityKind::Rank, cal).unwrap();
            let pred = ConformalPredictor::new(p, 0.2).unwrap();
            let set = pred.select(&scores, &[true; 25]).unwrap();
            let Threshold::Finite(tau) = pred.threshold else { panic!("finite expected") };
            let mut top: Vec<usize> = crate::numeric::descending_order(&scores)
                .into_iter()
                .take(tau.floor() as usize)
                .collect();
            top.sort_unstable();
            assert_eq!(set, top);
        }
    }
}
