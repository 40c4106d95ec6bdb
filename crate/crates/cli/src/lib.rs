//! Experiment runner for attack-and-reset unlearning: TOML configs,
//! multi-seed runs over every method, and JSON/CSV reports.

pub mod config;
pub mod report;
pub mod runner;

use std::path::Path;

use aru_core::data::{load_directory_dataset, DatasetBundle};
use aru_core::Result;

use crate::config::ExperimentConfig;

/// A dataset given on the command line: a directory with `labels.csv`, or an
/// experiment config whose `[dataset]` table is used.
pub fn load_dataset_arg(path: &Path) -> Result<DatasetBundle> {
    if path.is_dir() {
        load_directory_dataset(path, None)
    } else {
        ExperimentConfig::load(path)?.dataset.load()
    }
}

/// Process exit status for an error: 1 for bad input, 2 for runtime failures.
pub fn exit_code(e: &aru_core::Error) -> i32 {
    if e.is_config() {
        1
    } else {
        2
    }
}
