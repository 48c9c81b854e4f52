//! Experiment runner, metrics and result files.

pub mod checkpoint;
pub mod config;
pub mod experiment;
pub mod metrics;
pub mod report;

pub use checkpoint::{decode_model, encode_model, load_model, save_model, MODEL_MAGIC, MODEL_VERSION};
pub use config::{
    AblationRow, DataConfig, DataSource, ExperimentConfig, GenDataSpec, LongTailSettings, Method, ModelSettings,
    PartitionSettings, RoundSettings,
};
pub use experiment::{prepare_data, run_experiment, run_seed, FedicStage, MetricsReport, PreparedData, RoundRecord, SeedResult};
pub use metrics::{evaluate, evaluate_predictions, group_classes, EvalMetrics, Group, GroupThresholds};
pub use report::{metrics_csv, summarize, summary_json, write_outputs, SeedStat, Summary, CSV_HEADER, METRICS_FILE, SUMMARY_FILE};
