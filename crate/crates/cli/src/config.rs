//! Run configuration: one JSON file, with a few scalars overridable by flags.

use std::fs;
use std::path::{Path, PathBuf};

use kgcp::conformal::check_epsilon;
use kgcp::eval::{PredictorSpec, SyntheticConfig};
use kgcp::kg::Split;
use kgcp::trainer::TrainConfig;
use kgcp::{KnowledgeGraph, ModelKind};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default = "PredictorSpec::standard_set")]
    pub predictors: Vec<PredictorSpec>,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

/// Either three TSV files or a generated synthetic graph.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub train: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub synthetic: Option<SyntheticConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_kind")]
    pub kind: String,
    /// Defaults to the kind's usual size.
    #[serde(default)]
    pub dim: Option<usize>,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_kind() -> String {
    "distmult".into()
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: default_kind(),
            dim: None,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub filtered: bool,
    pub filter_splits: Vec<Split>,
    pub epsilon: f64,
    pub trials: usize,
    pub seed: u64,
    /// Calibration examples per trial; 80% of the validation examples when absent.
    pub calibration_size: Option<usize>,
    pub bin_width: usize,
    pub max_rank: usize,
    pub calibration_sizes: Vec<usize>,
    pub calibration_trials: usize,
    pub epsilon_grid: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            filtered: true,
            filter_splits: vec![Split::Train, Split::Valid],
            epsilon: 0.1,
            trials: 15,
            seed: 0,
            calibration_size: None,
            bin_width: 100,
            max_rank: 3000,
            calibration_sizes: vec![10, 100, 200, 500],
            calibration_trials: 20,
            epsilon_grid: vec![0.05, 0.1, 0.2, 0.3, 0.4, 0.5],
        }
    }
}

/// Flag values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub filtered: Option<bool>,
    pub epsilon: Option<f64>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> CliResult<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            CliError::config(if path.is_empty() || path == "." { "<root>" } else { &path }, e.into_inner())
        })
    }

    /// Reads, overrides and validates a config. Relative dataset paths are
    /// resolved against the config file's directory.
    pub fn load(path: &Path, overrides: &Overrides) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::config("--config", format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.dataset.train, &mut cfg.dataset.valid, &mut cfg.dataset.test].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.model.train.seed = seed;
            self.eval.seed = seed;
        }
        if let Some(dir) = &o.output_dir {
            self.output_dir = dir.clone();
        }
        if let Some(f) = o.filtered {
            self.eval.filtered = f;
        }
        if let Some(eps) = o.epsilon {
            self.eval.epsilon = eps;
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        let d = &self.dataset;
        match (&d.synthetic, &d.train, &d.valid, &d.test) {
            (Some(_), None, None, None) => {}
            (Some(_), ..) => return Err(CliError::config("dataset", "give either synthetic or train/valid/test, not both")),
            (None, ..) => {
                for (field, p) in [("dataset.train", &d.train), ("dataset.valid", &d.valid), ("dataset.test", &d.test)] {
                    match p {
                        None => return Err(CliError::config(field, "missing")),
                        Some(p) if !p.is_file() => {
                            return Err(CliError::config(field, format!("file not found: {}", p.display())))
                        }
                        _ => {}
                    }
                }
            }
        }
        self.model_kind()?;
        if self.model.dim == Some(0) {
            return Err(CliError::config("model.dim", "must be at least 1"));
        }
        self.model
            .train
            .validate(0)
            .map_err(|e| CliError::config("model.train", e))?;
        if self.predictors.is_empty() {
            return Err(CliError::config("predictors", "at least one predictor is required"));
        }
        for (i, p) in self.predictors.iter().enumerate() {
            p.validate().map_err(|e| CliError::config(&format!("predictors[{i}]"), e))?;
        }
        let e = &self.eval;
        check_epsilon(e.epsilon).map_err(|err| CliError::config("eval.epsilon", err))?;
        for (i, &eps) in e.epsilon_grid.iter().enumerate() {
            check_epsilon(eps).map_err(|err| CliError::config(&format!("eval.epsilon_grid[{i}]"), err))?;
        }
        for (field, v) in [
            ("eval.trials", e.trials),
            ("eval.bin_width", e.bin_width),
            ("eval.max_rank", e.max_rank),
            ("eval.calibration_trials", e.calibration_trials),
        ] {
            if v == 0 {
                return Err(CliError::config(field, "must be at least 1"));
            }
        }
        if e.calibration_size == Some(0) {
            return Err(CliError::config("eval.calibration_size", "must be at least 1"));
        }
        if e.filtered && e.filter_splits.is_empty() {
            return Err(CliError::config("eval.filter_splits", "filtered evaluation needs at least one split"));
        }
        Ok(())
    }

    pub fn model_kind(&self) -> CliResult<ModelKind> {
        self.model.kind.parse().map_err(|_| {
            let names: Vec<String> = ModelKind::ALL.iter().map(|k| k.to_string()).collect();
            CliError::config(
                "model.kind",
                format!("unknown model kind {:?}; expected one of {}", self.model.kind, names.join(", ")),
            )
        })
    }

    pub fn dim(&self) -> CliResult<usize> {
        Ok(self.model.dim.unwrap_or(self.model_kind()?.default_dim()))
    }

    pub fn load_graph(&self) -> CliResult<KnowledgeGraph> {
        let d = &self.dataset;
        if let Some(s) = &d.synthetic {
            return kgcp::eval::generate_synthetic_kg(s).map_err(|e| CliError::config("dataset.synthetic", e));
        }
        let valid = d.valid.as_deref().expect("validated");
        KnowledgeGraph::load(d.train.as_deref().expect("validated"), valid, d.test.as_deref().expect("validated")).map_err(
            |e| match e {
                kgcp::Error::EmptyFile(p) if p == valid => {
                    CliError::EmptyCalibration(format!("{} has no triples", p.display()))
                }
                other => other.into(),
            },
        )
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.output_dir.join("model.ckpt")
    }

    pub fn calibration_path(&self) -> PathBuf {
        self.output_dir.join("calibration.json")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic() -> &'static str {
        r#"{"dataset": {"synthetic": {"num_entities": 20, "train": 50, "valid": 10, "test": 10}}}"#
    }

    #[test]
    fn defaults_fill_in() {
        let cfg = RunConfig::from_json(synthetic()).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.predictors.len(), 6);
        assert_eq!(cfg.model.kind, "distmult");
        assert_eq!(cfg.dim().unwrap(), 64);
        assert!(cfg.eval.filtered);
        assert_eq!(cfg.dataset.synthetic.as_ref().unwrap().num_relations, 10);
    }

    #[test]
    fn schema_errors_name_the_field() {
        let bad = r#"{"dataset": {"synthetic": {}}, "model": {"train": {"learning_rate": "fast"}}}"#;
        let err = RunConfig::from_json(bad).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("model.train.learning_rate"), "{err}");

        let bad = r#"{"dataset": {"synthetic": {}}, "predictors": [{"family": "conformal", "kind": "bogus"}]}"#;
        assert!(RunConfig::from_json(bad).unwrap_err().to_string().contains("predictors[0]"));

        let bad = r#"{"dataset": {"synthetic": {}}, "evl": {}}"#;
        assert!(RunConfig::from_json(bad).unwrap_err().to_string().contains("evl"));
    }

    #[test]
    fn semantic_errors_name_the_field() {
        let mut cfg = RunConfig::from_json(synthetic()).unwrap();
        cfg.model.kind = "transx".into();
        assert!(cfg.validate().unwrap_err().to_string().contains("model.kind"));

        let mut cfg = RunConfig::from_json(synthetic()).unwrap();
        cfg.eval.epsilon = 1.5;
        assert!(cfg.validate().unwrap_err().to_string().contains("eval.epsilon"));

        let mut cfg = RunConfig::from_json(synthetic()).unwrap();
        cfg.dataset = DatasetConfig {
            train: Some("/nonexistent/train.tsv".into()),
            ..Default::default()
        };
        assert!(cfg.validate().unwrap_err().to_string().contains("dataset.train"));
    }

    #[test]
    fn overrides_win() {
        let mut cfg = RunConfig::from_json(synthetic()).unwrap();
        cfg.apply(&Overrides {
            seed: Some(7),
            output_dir: Some("elsewhere".into()),
            filtered: Some(false),
            epsilon: Some(0.2),
        });
        assert_eq!((cfg.model.train.seed, cfg.eval.seed), (7, 7));
        assert_eq!(cfg.output_dir, PathBuf::from("elsewhere"));
        assert!(!cfg.eval.filtered);
        assert_eq!(cfg.eval.epsilon, 0.2);
    }
}
