//! Datasets, metrics, configuration and experiments for toy-scale runs.

pub mod config;
pub mod data;
pub mod experiments;
pub mod images;
pub mod metrics;

use std::fmt::Write as _;
use std::path::Path;
use std::process::Command;

pub use config::Config;
pub use data::{ToyDataset, ToyKind};
pub use experiments::{run_experiment, Workbench};
pub use metrics::{per_interval_val_loss, sliced_wasserstein, wasserstein1_1d, MetricReport};

use crate::error::Result;

/// `git describe` of the working tree, or `unknown` outside a repository.
pub fn git_describe() -> String {
    Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".to_string())
}

/// Writes `manifest.txt`: command, seed, revision, wall time, then the full
/// configuration as `key=value` lines.
pub fn write_manifest(dir: &Path, command: &str, cfg: &Config, wall_seconds: f64) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut s = String::new();
    let _ = writeln!(s, "# command: {command}");
    let _ = writeln!(s, "# seed: {}", cfg.str("seed"));
    let _ = writeln!(s, "# git: {}", git_describe());
    let _ = writeln!(s, "# wall_seconds: {wall_seconds:.3}");
    s.push_str(&cfg.snapshot());
    std::fs::write(dir.join("manifest.txt"), s)?;
    Ok(())
}
