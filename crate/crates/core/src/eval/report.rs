//! CSV and JSON report writers.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::Result;
use crate::eval::harness::{AdaptivenessProfile, EvalReport, PredictorRecord, SweepRow};

fn write_rows<T: Serialize>(rows: impl IntoIterator<Item = T>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row).map_err(|e| std::io::Error::other(e.to_string()))?;
    }
    w.into_inner().map_err(|e| std::io::Error::other(e.to_string()).into())
}

/// Columns: predictor, kind, epsilon, coverage_mean, coverage_sd, size_mean,
/// size_sd, mr, trials. Missing values are empty fields.
pub fn records_csv(records: &[PredictorRecord]) -> Result<Vec<u8>> {
    write_rows(records)
}

pub fn sweep_csv(rows: &[SweepRow]) -> Result<Vec<u8>> {
    #[derive(Serialize)]
    struct Row<'a> {
        n_cal: Option<usize>,
        predictor: &'a str,
        kind: &'a str,
        epsilon: f64,
        coverage_mean: f64,
        coverage_sd: Option<f64>,
        size_mean: f64,
        size_sd: Option<f64>,
        mr: Option<f64>,
        trials: usize,
    }
    write_rows(rows.iter().map(|r| Row {
        n_cal: r.n_cal,
        predictor: &r.record.predictor,
        kind: &r.record.kind,
        epsilon: r.record.epsilon,
        coverage_mean: r.record.coverage_mean,
        coverage_sd: r.record.coverage_sd,
        size_mean: r.record.size_mean,
        size_sd: r.record.size_sd,
        mr: r.record.mr,
        trials: r.record.trials,
    }))
}

/// Columns: rank_lo, rank_hi, count, mean_size.
pub fn adaptiveness_csv(profile: &AdaptivenessProfile) -> Result<Vec<u8>> {
    #[derive(Serialize)]
    struct Row {
        rank_lo: usize,
        rank_hi: usize,
        count: usize,
        mean_size: Option<f64>,
    }
    write_rows(profile.bins.iter().map(|b| Row {
        rank_lo: b.rank_lo,
        rank_hi: b.rank_hi,
        count: b.count,
        mean_size: b.mean_size,
    }))
}

pub fn to_json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(value)?;
    out.push(b'\n');
    Ok(out)
}

pub fn write_report(report: &EvalReport, csv_path: &Path, json_path: &Path) -> Result<()> {
    fs::write(csv_path, records_csv(&report.records)?)?;
    fs::write(json_path, to_json(report)?)?;
    Ok(())
}
