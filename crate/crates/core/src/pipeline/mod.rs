//! Experiment configuration and the commands behind the CLI.
//!
//! All commands read and write inside one output directory:
//!
//! | command    | reads                                   | writes |
//! |------------|-----------------------------------------|--------|
//! | simulate   |                                         | `observations_{train,val,test}.csv`, `provenance.toml` |
//! | train      | observation files                       | `pairs_*.csv`, `model.ucom`, `feature_stats.csv`, `train_report.csv`, `accuracy.csv`, base-parameter variants |
//! | evaluate   | model, stats, test observations, pairs  | `subset_observations.csv`, `pair_scores.csv`, `histogram.csv` |
//! | associate  | model, stats, observations              | `candidates.csv`, `recovery.csv`, `recovery_summary.csv` |
//! | saliency   | model, stats, pair list, observations   | `saliency/*.csv`, `saliency/*.pgm` |
//!
//! Each command also writes `metrics_<command>.toml` with its timings.

mod commands;
mod config;
mod metrics;

pub use commands::*;
pub use config::*;
pub use metrics::*;
