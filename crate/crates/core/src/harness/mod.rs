//! Run configuration, training and evaluation driver, checkpoints, metrics
//! and the gradient-check suite.

pub mod checkpoint;
pub mod config;
pub mod gradsuite;
pub mod metrics;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::{
    parse_config, parse_overrides, DTypeChoice, RunConfig, Split, TaskSpec, KNOWN_KEYS,
};
pub use gradsuite::{gradcheck_suite, SuiteCase};
pub use metrics::{read_metrics, MetricsRecord, MetricsWriter};
pub use train::{
    mean_std, resume_train, run_eval, run_sweep, run_train, seed_dir, summarize, SeedRun,
    SplitScore, Trainer,
};
