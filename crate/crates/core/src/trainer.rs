//! Mini-batch training with negative sampling.
//!
//! Two independent random streams drive training: one shuffles the triple
//! order every epoch, the other draws corruptions. Gradients of a batch are
//! accumulated first and applied afterwards, so results do not depend on
//! evaluation order inside a batch.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{KnowledgeGraph, Triple};
use crate::models::{init_model, wrap_phase, ModelKind, ModelParams};
use crate::rng::{stream, stream_rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum Loss {
    /// `Σ max(0, γ - s(pos) + s(neg))`
    MarginRanking { margin: f64 },
    /// `-log softmax` of the true answer among itself and its corruptions.
    CrossEntropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum Optimizer {
    Sgd,
    Adagrad { eps: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub loss: Loss,
    pub negatives: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub l2_penalty: f64,
    pub seed: u64,
    /// Cross-entropy against every entity instead of sampled corruptions.
    pub full_softmax: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: Loss::CrossEntropy,
            negatives: 16,
            epochs: 200,
            batch_size: 256,
            learning_rate: 0.05,
            optimizer: Optimizer::Adagrad { eps: 1e-10 },
            l2_penalty: 1e-7,
            seed: 0,
            full_softmax: false,
        }
    }
}

/// Full-softmax training materializes `|E|` gradients per example.
pub const FULL_SOFTMAX_MAX_ENTITIES: usize = 2000;

impl TrainConfig {
    pub fn validate(&self, num_entities: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if let Loss::MarginRanking { margin } = self.loss {
            if !(margin > 0.0 && margin.is_finite()) {
                return bad(format!("margin must be positive, got {margin}"));
            }
        }
        if self.negatives == 0 {
            return bad("negatives must be at least 1".into());
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if let Optimizer::Adagrad { eps } = self.optimizer {
            if !(eps > 0.0) {
                return bad(format!("adagrad eps must be positive, got {eps}"));
            }
        }
        if !(self.l2_penalty >= 0.0 && self.l2_penalty.is_finite()) {
            return bad(format!("l2_penalty must be nonnegative, got {}", self.l2_penalty));
        }
        if self.full_softmax && num_entities > FULL_SOFTMAX_MAX_ENTITIES {
            return bad(format!(
                "full_softmax supports at most {FULL_SOFTMAX_MAX_ENTITIES} entities, graph has {num_entities}"
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Head,
    Tail,
}

/// Replaces one side of `t` with a uniformly drawn different entity.
pub fn corrupt(t: Triple, side: Side, num_entities: usize, rng: &mut impl Rng) -> Triple {
    let original = match side {
        Side::Head => t.head,
        Side::Tail => t.tail,
    };
    let mut e = rng.gen_range(0..num_entities - 1);
    if e >= original {
        e += 1;
    }
    match side {
        Side::Head => Triple { head: e, ..t },
        Side::Tail => Triple { tail: e, ..t },
    }
}

/// `k` corruptions of `t`, each on a side chosen by a fair coin.
pub fn sample_negatives(t: Triple, k: usize, num_entities: usize, rng: &mut impl Rng) -> Result<Vec<Triple>> {
    if num_entities < 2 {
        return Err(Error::InvalidArgument(
            "negative sampling needs at least two entities".into(),
        ));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    Ok((0..k)
        .map(|_| {
            let side = if rng.gen_bool(0.5) { Side::Head } else { Side::Tail };
            corrupt(t, side, num_entities, rng)
        })
        .collect())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ModelParams,
    /// Mean data loss per positive triple, one entry per epoch.
    pub loss_trace: Vec<f64>,
}

/// Dense gradient tables plus the list of rows touched in the current batch.
struct GradBuffer {
    entity: Vec<f64>,
    relation: Vec<f64>,
    entity_touched: Vec<bool>,
    relation_touched: Vec<bool>,
    entity_rows: Vec<usize>,
    relation_rows: Vec<usize>,
}

impl GradBuffer {
    fn new(m: &ModelParams) -> Self {
        Self {
            entity: vec![0.0; m.entity.len()],
            relation: vec![0.0; m.relation.len()],
            entity_touched: vec![false; m.num_entities],
            relation_touched: vec![false; m.num_relations],
            entity_rows: Vec::new(),
            relation_rows: Vec::new(),
        }
    }

    fn touch_entity(&mut self, e: usize) {
        if !self.entity_touched[e] {
            self.entity_touched[e] = true;
            self.entity_rows.push(e);
        }
    }

    fn touch_relation(&mut self, r: usize) {
        if !self.relation_touched[r] {
            self.relation_touched[r] = true;
            self.relation_rows.push(r);
        }
    }
}

/// Training state. Exposed so callers can step epochs and inspect the
/// optimizer; [`train`] is the usual entry point.
pub struct Trainer<'a> {
    triples: &'a [Triple],
    model: ModelParams,
    cfg: TrainConfig,
    trainable: Vec<bool>,
    entity_acc: Vec<f64>,
    relation_acc: Vec<f64>,
    order: Vec<usize>,
    shuffle_rng: ChaCha8Rng,
    negative_rng: ChaCha8Rng,
    buf: GradBuffer,
    scratch: [Vec<f64>; 3],
    epoch: usize,
}

impl<'a> Trainer<'a> {
    /// `trainable[e]` marks entities whose rows may change; the rest keep
    /// their initial values.
    pub fn new(triples: &'a [Triple], model: ModelParams, trainable: Vec<bool>, cfg: TrainConfig) -> Result<Self> {
        if triples.is_empty() {
            return Err(Error::InvalidArgument("training split is empty".into()));
        }
        if trainable.len() != model.num_entities {
            return Err(Error::InvalidArgument("trainable mask length differs from |E|".into()));
        }
        if model.num_entities < 2 {
            return Err(Error::InvalidArgument(
                "negative sampling needs at least two entities".into(),
            ));
        }
        cfg.validate(model.num_entities)?;
        let buf = GradBuffer::new(&model);
        let scratch = [
            vec![0.0; model.entity_width()],
            vec![0.0; model.relation_width()],
            vec![0.0; model.entity_width()],
        ];
        Ok(Self {
            triples,
            entity_acc: vec![0.0; model.entity.len()],
            relation_acc: vec![0.0; model.relation.len()],
            order: (0..triples.len()).collect(),
            shuffle_rng: stream_rng(cfg.seed, stream::SHUFFLE, 0),
            negative_rng: stream_rng(cfg.seed, stream::NEGATIVES, 0),
            model,
            cfg,
            trainable,
            buf,
            scratch,
            epoch: 0,
        })
    }

    pub fn model(&self) -> &ModelParams {
        &self.model
    }

    pub fn into_model(self) -> ModelParams {
        self.model
    }

    /// Adagrad squared-gradient accumulators (entity, relation); all zero under SGD.
    pub fn accumulators(&self) -> (&[f64], &[f64]) {
        (&self.entity_acc, &self.relation_acc)
    }

    /// Runs one pass over the shuffled training triples and returns the mean
    /// data loss per positive.
    pub fn run_epoch(&mut self) -> Result<f64> {
        self.order.shuffle(&mut self.shuffle_rng);
        let batch_size = self.cfg.batch_size;
        let mut total = 0.0;
        for (batch_idx, start) in (0..self.order.len()).step_by(batch_size).enumerate() {
            let end = (start + batch_size).min(self.order.len());
            let loss = self.run_batch(start, end);
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch: self.epoch,
                    batch: batch_idx,
                    loss,
                });
            }
            total += loss;
        }
        self.epoch += 1;
        Ok(total / self.order.len() as f64)
    }

    fn run_batch(&mut self, start: usize, end: usize) -> f64 {
        let n = (end - start) as f64;
        let mut loss = 0.0;
        for i in start..end {
            let pos = self.triples[self.order[i]];
            loss += match self.cfg.loss {
                Loss::MarginRanking { margin } => self.margin_example(pos, margin, n),
                Loss::CrossEntropy => {
                    self.cross_entropy_example(pos, Side::Tail, n) + self.cross_entropy_example(pos, Side::Head, n)
                }
            };
        }
        self.apply();
        loss
    }

    /// Adds `scale * ∂score(t)` into the batch buffer.
    fn push_grad(&mut self, t: Triple, scale: f64) {
        let [gh, gr, gt] = &mut self.scratch;
        self.model.grad_into(t, gh, gr, gt);
        let we = self.model.entity_width();
        let wr = self.model.relation_width();
        for (row, g) in [(t.head, &*gh), (t.tail, &*gt)] {
            self.buf.touch_entity(row);
            for (dst, v) in self.buf.entity[row * we..(row + 1) * we].iter_mut().zip(g) {
                *dst += scale * v;
            }
        }
        self.buf.touch_relation(t.relation);
        let r = t.relation;
        for (dst, v) in self.buf.relation[r * wr..(r + 1) * wr].iter_mut().zip(gr.iter()) {
            *dst += scale * v;
        }
    }

    fn margin_example(&mut self, pos: Triple, margin: f64, batch: f64) -> f64 {
        let negatives = sample_negatives(pos, self.cfg.negatives, self.model.num_entities, &mut self.negative_rng)
            .expect("checked in Trainer::new");
        let s_pos = self.model.score(pos);
        let mut loss = 0.0;
        for neg in negatives {
            let violation = margin - s_pos + self.model.score(neg);
            if violation > 0.0 {
                loss += violation;
                self.push_grad(pos, -1.0 / batch);
                self.push_grad(neg, 1.0 / batch);
            }
        }
        loss
    }

    fn cross_entropy_example(&mut self, pos: Triple, side: Side, batch: f64) -> f64 {
        let candidates: Vec<Triple> = if self.cfg.full_softmax {
            (0..self.model.num_entities)
                .map(|e| match side {
                    Side::Head => Triple { head: e, ..pos },
                    Side::Tail => Triple { tail: e, ..pos },
                })
                .collect()
        } else {
            let mut c = Vec::with_capacity(self.cfg.negatives + 1);
            c.push(pos);
            for _ in 0..self.cfg.negatives {
                c.push(corrupt(pos, side, self.model.num_entities, &mut self.negative_rng));
            }
            c
        };
        let true_idx = if self.cfg.full_softmax {
            match side {
                Side::Head => pos.head,
                Side::Tail => pos.tail,
            }
        } else {
            0
        };
        let logits: Vec<f64> = candidates.iter().map(|&t| self.model.score(t)).collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|s| (s - max).exp()).sum();
        let lse = max + z.ln();
        for (i, (&t, &s)) in candidates.iter().zip(&logits).enumerate() {
            let p = (s - lse).exp();
            let dl = p - if i == true_idx { 1.0 } else { 0.0 };
            if dl != 0.0 {
                self.push_grad(t, dl / batch);
            }
        }
        lse - logits[true_idx]
    }

    fn apply(&mut self) {
        let we = self.model.entity_width();
        let wr = self.model.relation_width();
        let lambda = self.cfg.l2_penalty;
        let lr = self.cfg.learning_rate;
        let optimizer = self.cfg.optimizer;
        let rotate = self.model.kind == ModelKind::RotatE;

        let update = |params: &mut [f64], grads: &mut [f64], acc: &mut [f64], phases: bool| {
            for ((p, g), a) in params.iter_mut().zip(grads.iter_mut()).zip(acc.iter_mut()) {
                let grad = *g + 2.0 * lambda * *p;
                *g = 0.0;
                match optimizer {
                    Optimizer::Sgd => *p -= lr * grad,
                    Optimizer::Adagrad { eps } => {
                        *a += grad * grad;
                        *p -= lr * grad / (a.sqrt() + eps);
                    }
                }
                if phases {
                    *p = wrap_phase(*p);
                }
            }
        };

        for &e in &self.buf.entity_rows {
            let range = e * we..(e + 1) * we;
            if self.trainable[e] {
                update(
                    &mut self.model.entity[range.clone()],
                    &mut self.buf.entity[range.clone()],
                    &mut self.entity_acc[range],
                    false,
                );
            } else {
                self.buf.entity[range].fill(0.0);
            }
            self.buf.entity_touched[e] = false;
        }
        for &r in &self.buf.relation_rows {
            let range = r * wr..(r + 1) * wr;
            update(
                &mut self.model.relation[range.clone()],
                &mut self.buf.relation[range.clone()],
                &mut self.relation_acc[range],
                rotate,
            );
            self.buf.relation_touched[r] = false;
        }
        self.buf.entity_rows.clear();
        self.buf.relation_rows.clear();
    }
}

/// Initializes and trains a model on the training split of `kg`.
///
/// Entities that never occur in a training triple keep their initial rows.
pub fn train(kg: &KnowledgeGraph, kind: ModelKind, dim: usize, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if kg.train.is_empty() {
        return Err(Error::InvalidArgument("training split is empty".into()));
    }
    let model = init_model(
        kind,
        dim,
        kg.num_entities(),
        kg.num_relations(),
        crate::rng::derive_seed(cfg.seed, stream::INIT, 0),
    )?;
    let mut trainer = Trainer::new(&kg.train, model, kg.train_entity_mask(), cfg.clone())?;
    let mut loss_trace = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        loss_trace.push(trainer.run_epoch()?);
    }
    Ok(TrainOutcome {
        model: trainer.into_model(),
        loss_trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::Dictionary;
    use crate::rng::stream_rng;

    fn graph(num_entities: usize, train: Vec<Triple>) -> KnowledgeGraph {
        let names = (0..num_entities).map(|i| format!("e{i}")).collect();
        let nr = train.iter().map(|t| t.relation + 1).max().unwrap_or(1);
        let rels = (0..nr).map(|i| format!("r{i}")).collect();
        KnowledgeGraph::new(Dictionary::from_names(names, rels).unwrap(), train, vec![], vec![]).unwrap()
    }

    #[test]
    fn two_entities_force_the_other_tail() {
        let mut rng = stream_rng(1, 0, 0);
        for _ in 0..20 {
            assert_eq!(corrupt(Triple::new(0, 0, 1), Side::Tail, 2, &mut rng), Triple::new(0, 0, 0));
        }
    }

    #[test]
    fn negatives_differ_in_exactly_one_slot() {
        let mut rng = stream_rng(2, 0, 0);
        let pos = Triple::new(3, 1, 7);
        let negs = sample_negatives(pos, 4, 10, &mut rng).unwrap();
        assert_eq!(negs.len(), 4);
        for n in negs {
            assert_eq!(n.relation, pos.relation);
            assert!((n.head != pos.head) ^ (n.tail != pos.tail));
        }
        assert!(sample_negatives(pos, 4, 1, &mut rng).is_err());
    }

    #[test]
    fn side_choice_is_fair() {
        let mut rng = stream_rng(3, 0, 0);
        let pos = Triple::new(0, 0, 1);
        let draws = 100_000;
        let heads = sample_negatives(pos, draws, 50, &mut rng)
            .unwrap()
            .iter()
            .filter(|n| n.head != pos.head)
            .count();
        let freq = heads as f64 / draws as f64;
        assert!((freq - 0.5).abs() <= 0.01, "head frequency {freq}");
    }

    fn small_cfg(loss: Loss, epochs: usize) -> TrainConfig {
        TrainConfig {
            loss,
            negatives: 4,
            epochs,
            batch_size: 8,
            learning_rate: 0.05,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn single_triple_becomes_separable() {
        let kg = graph(2, vec![Triple::new(0, 0, 1)]);
        let out = train(&kg, ModelKind::DistMult, 8, &small_cfg(Loss::CrossEntropy, 200)).unwrap();
        assert!(out.model.score(Triple::new(0, 0, 1)) > out.model.score(Triple::new(0, 0, 0)));

        let out = train(&kg, ModelKind::DistMult, 8, &small_cfg(Loss::MarginRanking { margin: 1.0 }, 200)).unwrap();
        assert_eq!(*out.loss_trace.last().unwrap(), 0.0);
    }

    #[test]
    fn training_is_deterministic() {
        let triples: Vec<Triple> = (0..30).map(|i| Triple::new(i % 10, i % 3, (i * 7 + 1) % 10)).collect();
        let mut uniq = triples.clone();
        uniq.sort();
        uniq.dedup();
        let kg = graph(10, uniq);
        let cfg = small_cfg(Loss::CrossEntropy, 5);
        let a = train(&kg, ModelKind::ComplEx, 4, &cfg).unwrap();
        let b = train(&kg, ModelKind::ComplEx, 4, &cfg).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.loss_trace, b.loss_trace);
    }

    #[test]
    fn l2_penalty_shrinks_parameters() {
        let kg = graph(6, vec![Triple::new(0, 0, 1), Triple::new(2, 0, 3), Triple::new(4, 0, 5)]);
        let norm = |m: &ModelParams| m.entity.iter().chain(&m.relation).map(|v| v * v).sum::<f64>();
        let mut cfg = small_cfg(Loss::CrossEntropy, 20);
        cfg.optimizer = Optimizer::Sgd;
        cfg.l2_penalty = 0.0;
        let plain = train(&kg, ModelKind::DistMult, 4, &cfg).unwrap();
        cfg.l2_penalty = 0.05;
        let decayed = train(&kg, ModelKind::DistMult, 4, &cfg).unwrap();
        assert!(norm(&decayed.model) < norm(&plain.model));
    }

    #[test]
    fn adagrad_accumulator_nondecreasing() {
        let triples: Vec<Triple> = (0..12).map(|i| Triple::new(i, 0, (i + 1) % 12)).collect();
        let model = init_model(ModelKind::RotatE, 4, 12, 1, 5).unwrap();
        let mut t = Trainer::new(&triples, model, vec![true; 12], small_cfg(Loss::CrossEntropy, 1)).unwrap();
        let mut prev = t.accumulators().0.to_vec();
        for _ in 0..5 {
            t.run_epoch().unwrap();
            let (acc, racc) = t.accumulators();
            assert!(acc.iter().chain(racc).all(|&a| a >= 0.0));
            assert!(acc.iter().zip(&prev).all(|(a, p)| a >= p));
            prev = acc.to_vec();
        }
        assert!(t.model().relation.iter().all(|p| p.abs() <= std::f64::consts::PI));
    }

    #[test]
    fn frozen_rows_stay_bitwise_identical() {
        let triples = vec![Triple::new(0, 0, 1), Triple::new(1, 0, 2)];
        let model = init_model(ModelKind::TransE { norm: 1 }, 4, 5, 1, 1).unwrap();
        let before = model.clone();
        let mask = vec![true, true, true, false, false];
        let mut t = Trainer::new(&triples, model, mask, small_cfg(Loss::MarginRanking { margin: 1.0 }, 1)).unwrap();
        for _ in 0..10 {
            t.run_epoch().unwrap();
        }
        assert_eq!(t.model().entity_row(3), before.entity_row(3));
        assert_eq!(t.model().entity_row(4), before.entity_row(4));
        assert_ne!(t.model().entity_row(0), before.entity_row(0));
    }

    #[test]
    fn divergence_is_reported() {
        let triples = vec![Triple::new(0, 0, 1)];
        let mut model = init_model(ModelKind::DistMult, 2, 3, 1, 1).unwrap();
        model.entity[0] = f64::INFINITY;
        let mut t = Trainer::new(&triples, model, vec![true; 3], small_cfg(Loss::CrossEntropy, 1)).unwrap();
        assert!(matches!(t.run_epoch(), Err(Error::Diverged { epoch: 0, batch: 0, .. })));
    }

    #[test]
    fn rejects_bad_config() {
        let kg = graph(3, vec![Triple::new(0, 0, 1)]);
        let mut cfg = small_cfg(Loss::MarginRanking { margin: 0.0 }, 1);
        assert!(train(&kg, ModelKind::DistMult, 2, &cfg).is_err());
        cfg.loss = Loss::CrossEntropy;
        cfg.learning_rate = -1.0;
        assert!(train(&kg, ModelKind::DistMult, 2, &cfg).is_err());
    }

    #[test]
    fn full_softmax_trains() {
        let kg = graph(5, vec![Triple::new(0, 0, 1), Triple::new(2, 0, 3)]);
        let mut cfg = small_cfg(Loss::CrossEntropy, 50);
        cfg.full_softmax = true;
        let out = train(&kg, ModelKind::DistMult, 4, &cfg).unwrap();
        assert!(out.loss_trace.last().unwrap() < out.loss_trace.first().unwrap());
    }
}
