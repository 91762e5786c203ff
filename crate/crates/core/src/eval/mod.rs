//! Experiments: ranking metrics, repeated-trial coverage/size evaluation,
//! adaptiveness profiles, calibration-size and error-rate sweeps.

pub mod harness;
pub mod metrics;
pub mod report;
pub mod stats;
pub mod synthetic;

pub use harness::{
    adaptiveness, calibration_size_sweep, epsilon_sweep, evaluate_all, evaluate_predictor, AdaptivenessProfile,
    EvalReport, FittedPredictor, Measure, PredictorRecord, PredictorSpec, SweepRow, TrialConfig,
};
pub use metrics::{filtered_rank, ranking_metrics, RankingMetrics};
pub use synthetic::{generate_synthetic_kg, planted_model, reference_train_config, SyntheticConfig};
