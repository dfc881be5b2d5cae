//! Experiment harness: train any method on a bundled model, evaluate the
//! result on a grid, and write the artifacts to disk.
//!
//! Output directory layout:
//!
//! | file                  | written by      | content                                   |
//! |-----------------------|-----------------|-------------------------------------------|
//! | `config.json`         | train           | the resolved config (seed override applied) |
//! | `params.json`         | train           | [`RunState`] snapshot                     |
//! | `metrics.jsonl`       | train           | one [`StepRecord`] per outer step         |
//! | `diagnostics.jsonl`   | train, eval     | one [`Diagnostics`] per eval x            |
//! | `q_x{x}.csv`          | train, eval     | histogram density of q samples            |
//! | `ratio_x{x}.csv`      | train, eval     | `r(x, z)` on the grid (ratio methods)     |
//! | `posterior_x{x}.csv`  | oracle          | normalized grid posterior                 |
//! | `oracle.json`         | oracle          | [`OracleSummary`]                         |
//!
//! [`RunState`]: ivi_core::infer::RunState
//! [`StepRecord`]: ivi_core::infer::StepRecord
//! [`Diagnostics`]: ivi_core::eval::Diagnostics

pub mod config;
mod run;

pub use config::{DataConfig, EvalConfig, ExperimentConfig};
pub use run::{
    evaluate, grid_file_name, load_snapshot, run_eval, run_oracle, run_train, OracleEntry, OracleSummary, RunError,
};
