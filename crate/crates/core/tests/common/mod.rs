//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use std::f64::consts::PI;

use kgcp::kg::Triple;
use kgcp::{ModelKind, ModelParams};
use rand::Rng;

pub const FD_STEP: f64 = 1e-6;
pub const FD_TOLERANCE: f64 = 1e-4;
/// Distance to a non-differentiable point below which a case is redrawn.
pub const KINK: f64 = 1e-5;

pub fn random_model(kind: ModelKind, dim: usize, ne: usize, nr: usize, rng: &mut impl Rng) -> ModelParams {
    let entity = (0..ne * kind.entity_width(dim)).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let relation = (0..nr * kind.relation_width(dim))
        .map(|_| match kind {
            ModelKind::RotatE => rng.gen_range(-PI..PI),
            _ => rng.gen_range(-1.0..1.0),
        })
        .collect();
    ModelParams {
        kind,
        dim,
        num_entities: ne,
        num_relations: nr,
        entity,
        relation,
    }
}

/// Smallest distance of the triple's score to a kink of its norm terms.
pub fn kink_distance(m: &ModelParams, t: Triple) -> f64 {
    let (h, r, tl) = (m.entity_row(t.head), m.relation_row(t.relation), m.entity_row(t.tail));
    let d = m.dim;
    match m.kind {
        ModelKind::TransE { norm: 1 } => (0..d).map(|k| (h[k] + r[k] - tl[k]).abs()).fold(f64::INFINITY, f64::min),
        ModelKind::TransE { .. } => (0..d).map(|k| (h[k] + r[k] - tl[k]).powi(2)).sum::<f64>().sqrt(),
        ModelKind::RotatE => (0..d)
            .map(|k| {
                let (sin, cos) = r[k].sin_cos();
                let u = h[2 * k] * cos - h[2 * k + 1] * sin - tl[2 * k];
                let v = h[2 * k] * sin + h[2 * k + 1] * cos - tl[2 * k + 1];
                u.hypot(v)
            })
            .fold(f64::INFINITY, f64::min),
        _ => f64::INFINITY,
    }
}

#[derive(Debug)]
pub struct GradMismatch {
    pub table: &'static str,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

fn param<'a>(m: &'a mut ModelParams, table: &str, i: usize) -> &'a mut f64 {
    if table == "entity" {
        &mut m.entity[i]
    } else {
        &mut m.relation[i]
    }
}

/// Compares the analytic gradient of one triple's score with central
/// differences over every parameter of the model. Returns the worst entry.
pub fn check_gradient(m: &ModelParams, t: Triple) -> Result<f64, GradMismatch> {
    let mut ge = vec![0.0; m.entity.len()];
    let mut gr = vec![0.0; m.relation.len()];
    m.grad(t).accumulate_into(1.0, &mut ge, &mut gr);
    let mut worst = 0.0f64;
    let mut probe = m.clone();
    for (table, analytic) in [("entity", &ge), ("relation", &gr)] {
        for i in 0..analytic.len() {
            let x = *param(&mut probe, table, i);
            *param(&mut probe, table, i) = x + FD_STEP;
            let up = probe.score(t);
            *param(&mut probe, table, i) = x - FD_STEP;
            let down = probe.score(t);
            *param(&mut probe, table, i) = x;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let err = rel_error(analytic[i], numeric);
            if err > FD_TOLERANCE {
                return Err(GradMismatch {
                    table,
                    index: i,
                    analytic: analytic[i],
                    numeric,
                    rel_error: err,
                });
            }
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Runs `cases` kink-free random gradient checks for one model kind.
pub fn gradcheck_kind(kind: ModelKind, cases: usize, rng: &mut impl Rng) -> Result<f64, (usize, GradMismatch)> {
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < cases {
        let dim = rng.gen_range(1..=6);
        let ne = rng.gen_range(1..=4);
        let nr = rng.gen_range(1..=2);
        let m = random_model(kind, dim, ne, nr, rng);
        let t = Triple::new(rng.gen_range(0..ne), rng.gen_range(0..nr), rng.gen_range(0..ne));
        if kink_distance(&m, t) < KINK {
            continue;
        }
        worst = worst.max(check_gradient(&m, t).map_err(|e| (done, e))?);
        done += 1;
    }
    Ok(worst)
}
