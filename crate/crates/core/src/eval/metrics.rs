//! Filtered rank metrics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{candidates_for, EntityId, FilterIndex, QueryExample};
use crate::models::ModelParams;

/// Rank of `answer` among the masked candidates: one plus the number of
/// candidates scoring strictly higher plus half the number of other
/// candidates tied with it.
pub fn filtered_rank(scores: &[f64], answer: EntityId, candidates: &[bool]) -> f64 {
    let target = scores[answer];
    let mut above = 0usize;
    let mut ties = 0usize;
    for (e, (&s, &c)) in scores.iter().zip(candidates).enumerate() {
        if !c || e == answer {
            continue;
        }
        if s > target {
            above += 1;
        } else if s == target {
            ties += 1;
        }
    }
    1.0 + above as f64 + ties as f64 / 2.0
}

pub const HITS_AT: [usize; 4] = [1, 3, 10, 100];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingMetrics {
    pub mr: f64,
    pub hits_at_1: f64,
    pub hits_at_3: f64,
    pub hits_at_10: f64,
    pub hits_at_100: f64,
    pub count: usize,
}

impl RankingMetrics {
    pub fn from_ranks(ranks: &[f64]) -> Result<Self> {
        if ranks.is_empty() {
            return Err(Error::InvalidArgument("no ranks to summarize".into()));
        }
        let n = ranks.len() as f64;
        let hits = |k: usize| ranks.iter().filter(|&&r| r <= k as f64).count() as f64 / n;
        Ok(Self {
            mr: ranks.iter().sum::<f64>() / n,
            hits_at_1: hits(HITS_AT[0]),
            hits_at_3: hits(HITS_AT[1]),
            hits_at_10: hits(HITS_AT[2]),
            hits_at_100: hits(HITS_AT[3]),
            count: ranks.len(),
        })
    }
}

/// Filtered rank of every example's true answer, in input order.
pub fn example_ranks(model: &ModelParams, examples: &[QueryExample], filter: Option<&FilterIndex>) -> Vec<f64> {
    examples
        .par_iter()
        .map(|ex| {
            let mask = candidates_for(filter, ex, model.num_entities);
            filtered_rank(&model.score_all(&ex.query), ex.answer, &mask)
        })
        .collect()
}

pub fn ranking_metrics(model: &ModelParams, test: &[QueryExample], filter: Option<&FilterIndex>) -> Result<RankingMetrics> {
    RankingMetrics::from_ranks(&example_ranks(model, test, filter))
}
