//! Shallow embedding models and their plausibility scores.
//!
//! | model    | entity row       | relation row   | score                          |
//! |----------|------------------|----------------|--------------------------------|
//! | TransE   | `d` reals        | `d` reals      | `-‖h + r - t‖_p`, p ∈ {1, 2}   |
//! | RotatE   | `d` complex      | `d` phases     | `-Σ_k ‖h_k e^{iθ_k} - t_k‖`    |
//! | RESCAL   | `d` reals        | `d×d` matrix   | `hᵀ M_r t`                     |
//! | DistMult | `d` reals        | `d` reals      | `Σ h_k r_k t_k`                |
//! | ComplEx  | `d` complex      | `d` complex    | `Re(Σ h_k r_k conj(t_k))`      |
//!
//! Complex rows are stored interleaved: `[re_0, im_0, re_1, im_1, ...]`.
//! Gradients are of the score (not of a loss) with respect to each parameter.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{Direction, EntityId, Query, Triple};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "name")]
pub enum ModelKind {
    TransE { norm: u8 },
    RotatE,
    Rescal,
    DistMult,
    ComplEx,
}

impl ModelKind {
    pub const ALL: [ModelKind; 6] = [
        ModelKind::TransE { norm: 1 },
        ModelKind::TransE { norm: 2 },
        ModelKind::RotatE,
        ModelKind::Rescal,
        ModelKind::DistMult,
        ModelKind::ComplEx,
    ];

    pub fn entity_width(self, dim: usize) -> usize {
        match self {
            ModelKind::RotatE | ModelKind::ComplEx => 2 * dim,
            _ => dim,
        }
    }

    pub fn relation_width(self, dim: usize) -> usize {
        match self {
            ModelKind::Rescal => dim * dim,
            ModelKind::ComplEx => 2 * dim,
            _ => dim,
        }
    }

    /// Default embedding size; RESCAL is smaller because relations are `d×d`.
    pub fn default_dim(self) -> usize {
        match self {
            ModelKind::Rescal => 32,
            _ => 64,
        }
    }

    /// Stable numeric code used by the checkpoint header.
    pub fn code(self) -> u32 {
        match self {
            ModelKind::TransE { norm: 1 } => 0,
            ModelKind::TransE { .. } => 1,
            ModelKind::RotatE => 2,
            ModelKind::Rescal => 3,
            ModelKind::DistMult => 4,
            ModelKind::ComplEx => 5,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        Some(match code {
            0 => ModelKind::TransE { norm: 1 },
            1 => ModelKind::TransE { norm: 2 },
            2 => ModelKind::RotatE,
            3 => ModelKind::Rescal,
            4 => ModelKind::DistMult,
            5 => ModelKind::ComplEx,
            _ => return None,
        })
    }

    fn validate(self) -> Result<()> {
        match self {
            ModelKind::TransE { norm } if norm != 1 && norm != 2 => Err(Error::InvalidModel(format!(
                "TransE norm must be 1 or 2, got {norm}"
            ))),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelKind::TransE { norm: 1 } => f.write_str("transe"),
            ModelKind::TransE { norm } => write!(f, "transe-l{norm}"),
            ModelKind::RotatE => f.write_str("rotate"),
            ModelKind::Rescal => f.write_str("rescal"),
            ModelKind::DistMult => f.write_str("distmult"),
            ModelKind::ComplEx => f.write_str("complex"),
        }
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "transe" | "transe-l1" => ModelKind::TransE { norm: 1 },
            "transe-l2" => ModelKind::TransE { norm: 2 },
            "rotate" => ModelKind::RotatE,
            "rescal" => ModelKind::Rescal,
            "distmult" => ModelKind::DistMult,
            "complex" => ModelKind::ComplEx,
            other => return Err(Error::InvalidModel(format!("unknown model kind {other:?}"))),
        })
    }
}

/// Embedding tables of one model, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub kind: ModelKind,
    pub dim: usize,
    pub num_entities: usize,
    pub num_relations: usize,
    pub entity: Vec<f64>,
    pub relation: Vec<f64>,
}

/// Uniform initialization in `[-6/√d, 6/√d]`; RotatE phases uniform in `(-π, π]`.
pub fn init_model(
    kind: ModelKind,
    dim: usize,
    num_entities: usize,
    num_relations: usize,
    seed: u64,
) -> Result<ModelParams> {
    kind.validate()?;
    if dim == 0 {
        return Err(Error::InvalidModel("dim must be at least 1".into()));
    }
    if num_entities == 0 || num_relations == 0 {
        return Err(Error::InvalidModel(format!(
            "need at least one entity and relation (got |E|={num_entities}, |R|={num_relations})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = 6.0 / (dim as f64).sqrt();
    let entity = (0..num_entities * kind.entity_width(dim))
        .map(|_| rng.gen_range(-bound..=bound))
        .collect();
    let relation = (0..num_relations * kind.relation_width(dim))
        .map(|_| match kind {
            ModelKind::RotatE => wrap_phase(rng.gen_range(-PI..=PI)),
            _ => rng.gen_range(-bound..=bound),
        })
        .collect();
    Ok(ModelParams {
        kind,
        dim,
        num_entities,
        num_relations,
        entity,
        relation,
    })
}

/// Maps an angle into `(-π, π]`.
pub fn wrap_phase(theta: f64) -> f64 {
    let mut t = theta % (2.0 * PI);
    if t > PI {
        t -= 2.0 * PI;
    } else if t <= -PI {
        t += 2.0 * PI;
    }
    t
}

/// Per-block derivatives of one triple's score.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub triple: Triple,
    pub head: Vec<f64>,
    pub relation: Vec<f64>,
    pub tail: Vec<f64>,
}

impl Gradient {
    /// Adds `scale * ∂score` into dense gradient tables shaped like the model.
    pub fn accumulate_into(&self, scale: f64, entity: &mut [f64], relation: &mut [f64]) {
        let we = self.head.len();
        let wr = self.relation.len();
        let h = self.triple.head * we;
        let t = self.triple.tail * we;
        let r = self.triple.relation * wr;
        for (dst, g) in entity[h..h + we].iter_mut().zip(&self.head) {
            *dst += scale * g;
        }
        for (dst, g) in entity[t..t + we].iter_mut().zip(&self.tail) {
            *dst += scale * g;
        }
        for (dst, g) in relation[r..r + wr].iter_mut().zip(&self.relation) {
            *dst += scale * g;
        }
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl ModelParams {
    pub fn entity_width(&self) -> usize {
        self.kind.entity_width(self.dim)
    }

    pub fn relation_width(&self) -> usize {
        self.kind.relation_width(self.dim)
    }

    #[inline]
    pub fn entity_row(&self, e: EntityId) -> &[f64] {
        let w = self.entity_width();
        &self.entity[e * w..(e + 1) * w]
    }

    #[inline]
    pub fn relation_row(&self, r: usize) -> &[f64] {
        let w = self.relation_width();
        &self.relation[r * w..(r + 1) * w]
    }

    pub fn is_finite(&self) -> bool {
        self.entity.iter().chain(&self.relation).all(|v| v.is_finite())
    }

    fn check_ids(&self, t: &Triple) {
        assert!(
            t.head < self.num_entities && t.tail < self.num_entities && t.relation < self.num_relations,
            "triple {t:?} out of range for model with |E|={}, |R|={}",
            self.num_entities,
            self.num_relations
        );
    }

    pub fn score(&self, t: Triple) -> f64 {
        self.check_ids(&t);
        score_rows(
            self.kind,
            self.dim,
            self.entity_row(t.head),
            self.relation_row(t.relation),
            self.entity_row(t.tail),
        )
    }

    /// Scores of `query` completed with every entity, in id order.
    pub fn score_all(&self, query: &Query) -> Vec<f64> {
        let anchor = self.entity_row(query.anchor);
        let rel = self.relation_row(query.relation);
        (0..self.num_entities)
            .map(|e| {
                let other = self.entity_row(e);
                match query.direction {
                    Direction::TailQuery => score_rows(self.kind, self.dim, anchor, rel, other),
                    Direction::HeadQuery => score_rows(self.kind, self.dim, other, rel, anchor),
                }
            })
            .collect()
    }

    pub fn grad(&self, t: Triple) -> Gradient {
        let mut gh = vec![0.0; self.entity_width()];
        let mut gr = vec![0.0; self.relation_width()];
        let mut gt = vec![0.0; self.entity_width()];
        self.grad_into(t, &mut gh, &mut gr, &mut gt);
        Gradient {
            triple: t,
            head: gh,
            relation: gr,
            tail: gt,
        }
    }

    /// Writes `∂score/∂head`, `∂score/∂relation`, `∂score/∂tail` into the
    /// given buffers, overwriting them. L1 kinks use `sign(0) = 0`.
    pub fn grad_into(&self, t: Triple, gh: &mut [f64], gr: &mut [f64], gt: &mut [f64]) {
        self.check_ids(&t);
        let (h, r, tl) = (
            self.entity_row(t.head),
            self.relation_row(t.relation),
            self.entity_row(t.tail),
        );
        let d = self.dim;
        gh.fill(0.0);
        gr.fill(0.0);
        gt.fill(0.0);
        match self.kind {
            ModelKind::TransE { norm: 1 } => {
                for k in 0..d {
                    let s = sign(h[k] + r[k] - tl[k]);
                    gh[k] = -s;
                    gr[k] = -s;
                    gt[k] = s;
                }
            }
            ModelKind::TransE { .. } => {
                let norm = (0..d).map(|k| (h[k] + r[k] - tl[k]).powi(2)).sum::<f64>().sqrt();
                if norm > 0.0 {
                    for k in 0..d {
                        let g = (h[k] + r[k] - tl[k]) / norm;
                        gh[k] = -g;
                        gr[k] = -g;
                        gt[k] = g;
                    }
                }
            }
            ModelKind::DistMult => {
                for k in 0..d {
                    gh[k] = r[k] * tl[k];
                    gr[k] = h[k] * tl[k];
                    gt[k] = h[k] * r[k];
                }
            }
            ModelKind::ComplEx => {
                for k in 0..d {
                    let (hr, hi) = (h[2 * k], h[2 * k + 1]);
                    let (rr, ri) = (r[2 * k], r[2 * k + 1]);
                    let (tr, ti) = (tl[2 * k], tl[2 * k + 1]);
                    gh[2 * k] = rr * tr + ri * ti;
                    gh[2 * k + 1] = -ri * tr + rr * ti;
                    gr[2 * k] = hr * tr + hi * ti;
                    gr[2 * k + 1] = -hi * tr + hr * ti;
                    gt[2 * k] = hr * rr - hi * ri;
                    gt[2 * k + 1] = hr * ri + hi * rr;
                }
            }
            ModelKind::RotatE => {
                for k in 0..d {
                    let (hr, hi) = (h[2 * k], h[2 * k + 1]);
                    let (tr, ti) = (tl[2 * k], tl[2 * k + 1]);
                    let (sin, cos) = r[k].sin_cos();
                    let u = hr * cos - hi * sin - tr;
                    let v = hr * sin + hi * cos - ti;
                    let m = u.hypot(v);
                    if m == 0.0 {
                        continue;
                    }
                    let (du, dv) = (-u / m, -v / m);
                    gh[2 * k] = du * cos + dv * sin;
                    gh[2 * k + 1] = -du * sin + dv * cos;
                    gt[2 * k] = -du;
                    gt[2 * k + 1] = -dv;
                    gr[k] = du * (-hr * sin - hi * cos) + dv * (hr * cos - hi * sin);
                }
            }
            ModelKind::Rescal => {
                for i in 0..d {
                    let mut mt = 0.0;
                    for j in 0..d {
                        mt += r[i * d + j] * tl[j];
                        gr[i * d + j] = h[i] * tl[j];
                    }
                    gh[i] = mt;
                }
                for j in 0..d {
                    gt[j] = (0..d).map(|i| h[i] * r[i * d + j]).sum();
                }
            }
        }
    }
}

/// Scores a single (head, relation, tail) row triple.
pub fn score_rows(kind: ModelKind, d: usize, h: &[f64], r: &[f64], t: &[f64]) -> f64 {
    match kind {
        ModelKind::TransE { norm: 1 } => -(0..d).map(|k| (h[k] + r[k] - t[k]).abs()).sum::<f64>(),
        ModelKind::TransE { .. } => -(0..d).map(|k| (h[k] + r[k] - t[k]).powi(2)).sum::<f64>().sqrt(),
        ModelKind::DistMult => (0..d).map(|k| h[k] * r[k] * t[k]).sum(),
        ModelKind::ComplEx => (0..d)
            .map(|k| {
                let (hr, hi) = (h[2 * k], h[2 * k + 1]);
                let (rr, ri) = (r[2 * k], r[2 * k + 1]);
                let (tr, ti) = (t[2 * k], t[2 * k + 1]);
                (hr * rr - hi * ri) * tr + (hr * ri + hi * rr) * ti
            })
            .sum(),
        ModelKind::RotatE => -(0..d)
            .map(|k| {
                let (sin, cos) = r[k].sin_cos();
                let u = h[2 * k] * cos - h[2 * k + 1] * sin - t[2 * k];
                let v = h[2 * k] * sin + h[2 * k + 1] * cos - t[2 * k + 1];
                u.hypot(v)
            })
            .sum::<f64>(),
        ModelKind::Rescal => (0..d)
            .map(|i| h[i] * (0..d).map(|j| r[i * d + j] * t[j]).sum::<f64>())
            .sum(),
    }
}
