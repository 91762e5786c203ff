//! Set predictors without a coverage guarantee.
//!
//! * naive: softmax the scores, walk candidates from most to least probable
//!   and keep each one while the running probability mass stays strictly
//!   below `1 - ε`. The entity that pushes the mass to `1 - ε` is dropped,
//!   so the naive predictor tends to under-cover.
//! * Platt: the naive walk on temperature-scaled scores `s / T`.
//! * top-K: the `K` best candidates, `K` fitted on validation ranks or fixed.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conformal::{check_epsilon, AnswerSet};
use crate::error::{Error, Result};
use crate::eval::metrics::filtered_rank;
use crate::kg::{candidates_for, EntityId, FilterIndex, Query, QueryExample};
use crate::models::ModelParams;
use crate::numeric::{descending_order, log_softmax_at, softmax, RunningSum};

/// Manually chosen sizes of the fixed-size predictor.
pub const FIXED_SIZES: [usize; 4] = [1, 3, 10, 100];

/// Naive accumulation over `candidates`. Probabilities come from the full
/// score vector; ties in probability are visited by ascending id.
pub fn naive_select(scores: &[f64], epsilon: f64, temperature: Option<f64>, candidates: &[bool]) -> Vec<EntityId> {
    let probs = softmax(scores, temperature.unwrap_or(1.0));
    let limit = 1.0 - epsilon;
    let mut mass = RunningSum::default();
    let mut out = Vec::new();
    for e in descending_order(&probs) {
        if !candidates[e] {
            continue;
        }
        mass.add(probs[e]);
        if mass.value() < limit {
            out.push(e);
        } else {
            break;
        }
    }
    out.sort_unstable();
    out
}

pub fn predict_set_naive(
    model: &ModelParams,
    query: &Query,
    epsilon: f64,
    temperature: Option<f64>,
    candidates: &[bool],
) -> Result<AnswerSet> {
    check_epsilon(epsilon)?;
    if let Some(t) = temperature {
        check_temperature(t)?;
    }
    Ok(AnswerSet {
        query: *query,
        entities: naive_select(&model.score_all(query), epsilon, temperature, candidates),
        epsilon,
        filtered: candidates.iter().any(|&c| !c),
    })
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("temperature must be positive, got {t}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Temperature {
    pub temperature: f64,
    /// Mean validation NLL at the fitted temperature.
    pub fit_nll: f64,
}

const LOG10_T_RANGE: (f64, f64) = (-2.0, 2.0);
const GOLDEN_ITERATIONS: usize = 40;

/// Golden-section search of `objective(T)` over `log10 T ∈ [-2, 2]`.
/// Falls back to `T = 1` unless the search found a strictly lower value, so
/// a flat objective yields exactly 1.
pub fn minimize_temperature(objective: impl Fn(f64) -> f64) -> Temperature {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let f = |x: f64| objective(10f64.powf(x));
    let (mut a, mut b) = LOG10_T_RANGE;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..GOLDEN_ITERATIONS {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    let x = (a + b) / 2.0;
    let (fx, f1) = (f(x), objective(1.0));
    if fx < f1 {
        Temperature {
            temperature: 10f64.powf(x),
            fit_nll: fx,
        }
    } else {
        Temperature {
            temperature: 1.0,
            fit_nll: f1,
        }
    }
}

/// Mean per-query cross-entropy of the true answers under `softmax(s / T)`.
pub fn mean_nll(scored: &[(Vec<f64>, EntityId)], temperature: f64) -> f64 {
    let terms: Vec<f64> = scored
        .par_iter()
        .map(|(s, answer)| -log_softmax_at(s, temperature, *answer))
        .collect();
    terms.iter().sum::<f64>() / scored.len() as f64
}

/// Score vectors are materialized when they fit in this many values;
/// larger validation sets are re-scored for every objective evaluation.
const SCORE_CACHE_LIMIT: usize = 1 << 25;

pub fn fit_temperature(model: &ModelParams, validation: &[QueryExample]) -> Result<Temperature> {
    if validation.is_empty() {
        return Err(Error::InvalidArgument("validation set is empty".into()));
    }
    if validation.len().saturating_mul(model.num_entities) <= SCORE_CACHE_LIMIT {
        let scored: Vec<(Vec<f64>, EntityId)> = validation
            .par_iter()
            .map(|ex| (model.score_all(&ex.query), ex.answer))
            .collect();
        Ok(minimize_temperature(|t| mean_nll(&scored, t)))
    } else {
        Ok(minimize_temperature(|t| {
            let terms: Vec<f64> = validation
                .par_iter()
                .map(|ex| -log_softmax_at(&model.score_all(&ex.query), t, ex.answer))
                .collect();
            terms.iter().sum::<f64>() / validation.len() as f64
        }))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TopKChoice {
    pub k: usize,
    pub validation_coverage: f64,
}

/// Smallest `K` whose top-`K` sets cover at least `1 - ε` of the given
/// true-answer ranks: the `⌈(1 - ε) N⌉`-th smallest rank, rounded up to an
/// integer and clamped to `[1, max_k]`.
pub fn select_topk_from_ranks(ranks: &[f64], epsilon: f64, max_k: usize) -> Result<TopKChoice> {
    check_epsilon(epsilon)?;
    if ranks.is_empty() {
        return Err(Error::InvalidArgument("validation set is empty".into()));
    }
    let mut sorted = ranks.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    // ⌈(1 - ε) n⌉ = n - ⌊ε n⌋
    let idx = (n - (epsilon * n as f64).floor() as usize).max(1);
    let k = (sorted[idx - 1].ceil() as usize).clamp(1, max_k.max(1));
    let covered = sorted.iter().filter(|&&r| r <= k as f64).count();
    Ok(TopKChoice {
        k,
        validation_coverage: covered as f64 / n as f64,
    })
}

pub fn select_topk(
    model: &ModelParams,
    validation: &[QueryExample],
    epsilon: f64,
    filter: Option<&FilterIndex>,
) -> Result<TopKChoice> {
    let ranks: Vec<f64> = validation
        .par_iter()
        .map(|ex| {
            let mask = candidates_for(filter, ex, model.num_entities);
            filtered_rank(&model.score_all(&ex.query), ex.answer, &mask)
        })
        .collect();
    select_topk_from_ranks(&ranks, epsilon, model.num_entities)
}

/// The `k` highest-scoring candidates (ties by ascending id), sorted by id.
pub fn topk_select(scores: &[f64], k: usize, candidates: &[bool]) -> Vec<EntityId> {
    let mut out: Vec<EntityId> = descending_order(scores)
        .into_iter()
        .filter(|&e| candidates[e])
        .take(k)
        .collect();
    out.sort_unstable();
    out
}

pub fn predict_set_topk(model: &ModelParams, query: &Query, k: usize, candidates: &[bool]) -> Result<AnswerSet> {
    if k == 0 {
        return Err(Error::InvalidArgument("K must be at least 1".into()));
    }
    Ok(AnswerSet {
        query: *query,
        entities: topk_select(&model.score_all(query), k, candidates),
        epsilon: f64::NAN,
        filtered: candidates.iter().any(|&c| !c),
    })
}

/// Top-`k` with a manually chosen `k`, usually one of [`FIXED_SIZES`].
pub fn predict_set_fixed(model: &ModelParams, query: &Query, k: usize, candidates: &[bool]) -> Result<AnswerSet> {
    predict_set_topk(model, query, k, candidates)
}
