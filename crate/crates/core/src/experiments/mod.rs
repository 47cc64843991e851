//! Table recipes: each one trains (or reloads) the predictors it needs,
//! builds its datasets, and reports metrics with threshold checks.

pub mod config;
pub mod report;
pub mod runner;
pub mod tables;
pub mod tune;

use serde::{Deserialize, Serialize};

pub use config::{Checks, DetectionPlan, ExperimentConfig, GnnChoice, PredictionPlan, Scale};
pub use report::{CheckOutcome, TableReport, TextTable};
pub use runner::{train_and_evaluate, DetectionOutcome, Runner, TrainedPredictor};
pub use tune::{tune_detector, TuneReport};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TableId {
    MaeNoise,
    Aggregation,
    SampleSize,
    Sliding,
    Cyclic,
    Position,
    NoisyDetection,
    Multiclass,
}

impl TableId {
    pub const ALL: [TableId; 8] = [
        TableId::MaeNoise,
        TableId::Aggregation,
        TableId::SampleSize,
        TableId::Sliding,
        TableId::Cyclic,
        TableId::Position,
        TableId::NoisyDetection,
        TableId::Multiclass,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TableId::MaeNoise => "mae-noise",
            TableId::Aggregation => "aggregation",
            TableId::SampleSize => "sample-size",
            TableId::Sliding => "sliding",
            TableId::Cyclic => "cyclic",
            TableId::Position => "position",
            TableId::NoisyDetection => "noisy-detection",
            TableId::Multiclass => "multiclass",
        }
    }
}

impl std::fmt::Display for TableId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TableId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TableId::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown table `{s}`")))
    }
}

/// Runs one table and writes `<table>.json` and `<table>.txt` into the
/// runner's output directory.
pub fn run_table(runner: &Runner, table: TableId) -> Result<TableReport> {
    runner.log(format!("table {table}"));
    let report = match table {
        TableId::MaeNoise => tables::mae_noise(runner)?,
        TableId::Aggregation => tables::aggregation(runner)?,
        TableId::SampleSize => tables::sample_size(runner)?,
        TableId::Sliding => tables::sliding(runner)?,
        TableId::Cyclic => tables::cyclic(runner)?,
        TableId::Position => tables::position(runner)?,
        TableId::NoisyDetection => tables::noisy_detection(runner)?,
        TableId::Multiclass => tables::multiclass(runner)?,
    };
    let doc = serde_json::json!({
        "table": report.table,
        "seed": report.seed,
        "scale": runner.config.scale,
        "seconds": report.seconds,
        "passed": report.passed(),
        "checks": report.checks,
        "records": report.records,
    });
    runner::write_json(&runner.out_dir.join(format!("{table}.json")), &doc)?;
    std::fs::write(runner.out_dir.join(format!("{table}.txt")), report.render())?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_ids_round_trip() {
        for t in TableId::ALL {
            assert_eq!(t.as_str().parse::<TableId>().unwrap(), t);
            assert_eq!(serde_json::to_value(t).unwrap(), serde_json::Value::String(t.as_str().into()));
        }
        assert!("table-9".parse::<TableId>().is_err());
    }
}
