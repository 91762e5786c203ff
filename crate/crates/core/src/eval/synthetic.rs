//! Synthetic knowledge graphs with a planted DistMult model.
//!
//! Each triple is drawn by picking `(h, r)` uniformly and `t` from the
//! softmax of the planted scores. Training triples are drawn until the
//! requested number of distinct ones exists. Held-out triples are drawn the
//! same way, rejecting anything already seen, and the held-out pool is then
//! shuffled before being cut into validation and test, so the two are
//! exchangeable with each other.

use std::collections::{HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, WeightedIndex};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{Dictionary, KnowledgeGraph, Query, Triple};
use crate::models::{ModelKind, ModelParams};
use crate::numeric::softmax;
use crate::trainer::TrainConfig;
use crate::rng::{stream, stream_rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub num_entities: usize,
    pub num_relations: usize,
    /// Dimension of the planted model.
    pub dim: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub seed: u64,
    /// Standard deviation of the planted logits for a random triple.
    pub logit_scale: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_entities: 200,
            num_relations: 10,
            dim: 16,
            train: 5000,
            valid: 1000,
            test: 2000,
            seed: 0,
            logit_scale: 8.0,
        }
    }
}

/// Training settings used for the reference experiments on the default
/// synthetic graph. The library default penalty overfits at this size.
pub fn reference_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 100,
        l2_penalty: 1e-3,
        seed,
        ..TrainConfig::default()
    }
}

fn check(cfg: &SyntheticConfig) -> Result<()> {
    let (ne, nr, d) = (cfg.num_entities, cfg.num_relations, cfg.dim);
    if ne < 2 || nr == 0 || d == 0 || cfg.train == 0 || cfg.valid == 0 || cfg.test == 0 {
        return Err(Error::InvalidArgument(format!("synthetic graph sizes must be positive: {cfg:?}")));
    }
    if !(cfg.logit_scale > 0.0 && cfg.logit_scale.is_finite()) {
        return Err(Error::InvalidArgument("logit_scale must be positive".into()));
    }
    let capacity = ne * nr * ne;
    if cfg.train + cfg.valid + cfg.test > capacity / 2 {
        return Err(Error::InvalidArgument(format!(
            "requested {} triples but only {capacity} distinct triples exist",
            cfg.train + cfg.valid + cfg.test
        )));
    }
    Ok(())
}

/// The generating DistMult model. Relation vectors carry the logit scale, so
/// its scores are the planted logits.
pub fn planted_model(cfg: &SyntheticConfig) -> Result<ModelParams> {
    check(cfg)?;
    let (ne, nr, d) = (cfg.num_entities, cfg.num_relations, cfg.dim);
    let mut rng = stream_rng(cfg.seed, stream::SYNTHETIC, 0);
    let mut gauss = |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(&mut rng)).collect() };
    let entity = gauss(ne * d);
    let scale = cfg.logit_scale / (d as f64).sqrt();
    let relation = gauss(nr * d).into_iter().map(|x| x * scale).collect();
    Ok(ModelParams {
        kind: ModelKind::DistMult,
        dim: d,
        num_entities: ne,
        num_relations: nr,
        entity,
        relation,
    })
}

pub fn generate_synthetic_kg(cfg: &SyntheticConfig) -> Result<KnowledgeGraph> {
    let planted = planted_model(cfg)?;
    let (ne, nr) = (cfg.num_entities, cfg.num_relations);

    let mut rng = stream_rng(cfg.seed, stream::SYNTHETIC, 1);
    let mut tails: HashMap<(usize, usize), WeightedIndex<f64>> = HashMap::new();
    let mut draw = |rng: &mut rand_chacha::ChaCha8Rng| -> Triple {
        let h = rng.gen_range(0..ne);
        let r = rng.gen_range(0..nr);
        let dist = tails.entry((h, r)).or_insert_with(|| {
            let logits = planted.score_all(&Query::tail(h, r));
            WeightedIndex::new(softmax(&logits, 1.0)).expect("softmax weights are positive")
        });
        Triple::new(h, r, dist.sample(rng))
    };

    let mut seen = HashSet::new();
    let mut take_distinct = |n: usize, rng: &mut rand_chacha::ChaCha8Rng| -> Vec<Triple> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let t = draw(rng);
            if seen.insert(t) {
                out.push(t);
            }
        }
        out
    };
    let train = take_distinct(cfg.train, &mut rng);
    let mut held_out = take_distinct(cfg.valid + cfg.test, &mut rng);
    held_out.shuffle(&mut rng);
    let test = held_out.split_off(cfg.valid);
    let valid = held_out;

    let dict = Dictionary::from_names(
        (0..ne).map(|i| format!("e{i}")).collect(),
        (0..nr).map(|i| format!("r{i}")).collect(),
    )?;
    KnowledgeGraph::new(dict, train, valid, test)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            num_entities: 30,
            num_relations: 3,
            dim: 4,
            train: 200,
            valid: 50,
            test: 60,
            seed: 9,
            logit_scale: 2.0,
        }
    }

    #[test]
    fn deterministic_and_sized() {
        let a = generate_synthetic_kg(&small()).unwrap();
        let b = generate_synthetic_kg(&small()).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.valid, b.valid);
        assert_eq!(a.test, b.test);
        assert_eq!((a.train.len(), a.valid.len(), a.test.len()), (200, 50, 60));
        let c = generate_synthetic_kg(&SyntheticConfig { seed: 10, ..small() }).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn splits_are_disjoint() {
        let kg = generate_synthetic_kg(&small()).unwrap();
        let mut all: Vec<Triple> = kg.train.iter().chain(&kg.valid).chain(&kg.test).copied().collect();
        let n = all.len();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), n);
    }

    #[test]
    fn rejects_impossible_requests() {
        let cfg = SyntheticConfig { num_entities: 3, num_relations: 1, train: 10, ..small() };
        assert!(generate_synthetic_kg(&cfg).is_err());
        assert!(generate_synthetic_kg(&SyntheticConfig { dim: 0, ..small() }).is_err());
    }
}
