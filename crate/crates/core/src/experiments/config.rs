use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::predictors::{Aggregation, UpdateOp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Desk,
    Full,
}

impl std::str::FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Scale::Desk),
            "full" => Ok(Scale::Full),
            other => Err(Error::InvalidArgument(format!("unknown scale `{other}`"))),
        }
    }
}

/// Graph-predictor architecture used wherever a single GNN-LSTM is needed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GnnChoice {
    pub aggregation: Aggregation,
    pub update_op: UpdateOp,
    pub rounds: usize,
    pub node_features: usize,
}

impl Default for GnnChoice {
    fn default() -> Self {
        Self { aggregation: Aggregation::Mean, update_op: UpdateOp::Concat, rounds: 1, node_features: 2 }
    }
}

/// State-prediction tables: noise levels, aggregation grid, sample sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictionPlan {
    pub episodes: usize,
    pub sigmas: Vec<f64>,
    pub sample_sizes: Vec<usize>,
    /// Episodes per aggregation-grid model.
    pub aggregation_episodes: usize,
    pub aggregations: Vec<(Aggregation, UpdateOp)>,
    pub window_stride: usize,
    pub test_episodes: usize,
    pub test_stride: usize,
    pub units: usize,
    pub epochs: usize,
    /// Independently seeded models averaged per sample-size cell.
    pub repeats: usize,
    pub gnn: GnnChoice,
}

impl Default for PredictionPlan {
    fn default() -> Self {
        let aggregations = [Aggregation::Mean, Aggregation::Sum, Aggregation::Max]
            .into_iter()
            .flat_map(|a| [(a, UpdateOp::Concat), (a, UpdateOp::Add)])
            .collect();
        Self {
            episodes: 1500,
            sigmas: vec![0.0, 0.001, 0.005],
            sample_sizes: vec![500, 1000, 1500],
            aggregation_episodes: 1000,
            aggregations,
            window_stride: 10,
            test_episodes: 200,
            test_stride: 5,
            units: 25,
            epochs: 25,
            repeats: 1,
            gnn: GnnChoice::default(),
        }
    }
}

/// Detection tables: shared predictors and the attack datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectionPlan {
    pub predictor_episodes: usize,
    pub window_stride: usize,
    pub predictor_epochs: usize,
    /// LSTM-AE widths compared in the sliding and cyclic tables; the first
    /// one backs every other detection table.
    pub lstm_units: Vec<usize>,
    pub gnn_units: usize,
    pub n_benign: usize,
    pub n_adversarial: usize,
    pub attacked_buses: Vec<usize>,
    pub train_fraction: f64,
    pub detector_epochs: usize,
    pub noisy_sigma: f64,
    pub noisy_runs: usize,
    pub multiclass_per_class: usize,
    pub multiclass_m: usize,
}

impl Default for DetectionPlan {
    fn default() -> Self {
        Self {
            predictor_episodes: 1000,
            window_stride: 10,
            predictor_epochs: 25,
            lstm_units: vec![100, 50],
            gnn_units: 25,
            n_benign: 10_000,
            n_adversarial: 10_000,
            attacked_buses: vec![7],
            train_fraction: 0.8,
            detector_epochs: 40,
            noisy_sigma: 0.001,
            noisy_runs: 5,
            multiclass_per_class: 2000,
            multiclass_m: 5,
        }
    }
}

/// Pass/fail thresholds applied under `--check`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Checks {
    pub mae_clean_max: f64,
    /// Noisy-level MAE(theta) must lie in `[lo * sigma, hi * sigma]`.
    pub noise_band: (f64, f64),
    pub max_train_seconds_per_level: f64,
    pub sliding_m0_min: f64,
    pub sliding_m5_min: f64,
    pub monotone_tolerance: f64,
    pub max_sliding_seconds: f64,
    pub cyclic_m5_min: f64,
    pub cyclic_m1_max: f64,
    pub position_first_min: f64,
    pub position_last_max: f64,
    pub coupling_margin: f64,
    pub multiclass_accuracy_min: f64,
    /// Bus whose F1 must be the lowest of all buses.
    pub multiclass_weak_bus: usize,
    /// Bus whose F1 must reach the median bus F1.
    pub multiclass_strong_bus: usize,
    pub baseline_accuracy: f64,
    pub baseline_tolerance: f64,
    /// Largest test-accuracy gap between the tuned and published detector.
    pub tuning_gap_max: f64,
}

impl Default for Checks {
    fn default() -> Self {
        Self {
            mae_clean_max: 1e-3,
            noise_band: (0.5, 2.0),
            max_train_seconds_per_level: 600.0,
            sliding_m0_min: 0.95,
            sliding_m5_min: 0.80,
            monotone_tolerance: 0.03,
            max_sliding_seconds: 900.0,
            cyclic_m5_min: 0.95,
            cyclic_m1_max: 0.85,
            position_first_min: 0.9,
            position_last_max: 0.6,
            coupling_margin: 0.01,
            multiclass_accuracy_min: 0.70,
            multiclass_weak_bus: 9,
            multiclass_strong_bus: 7,
            baseline_accuracy: 0.5,
            baseline_tolerance: 0.05,
            tuning_gap_max: 0.03,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub scale: Scale,
    /// Grid description file; the built-in 10-bus system when absent.
    pub grid: Option<PathBuf>,
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub prediction: PredictionPlan,
    pub detection: DetectionPlan,
    pub checks: Checks,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ExperimentConfig {
    pub fn desk() -> Self {
        Self {
            scale: Scale::Desk,
            grid: None,
            seed: 2024,
            out_dir: None,
            prediction: PredictionPlan::default(),
            detection: DetectionPlan::default(),
            checks: Checks::default(),
        }
    }

    /// Full-size counts: 10,000 episodes at every window position and
    /// 100,000 windows per label.
    pub fn full() -> Self {
        let mut c = Self::desk();
        c.scale = Scale::Full;
        c.prediction.episodes = 10_000;
        c.prediction.sample_sizes = vec![2000, 5000, 10_000];
        c.prediction.aggregation_episodes = 10_000;
        c.prediction.window_stride = 1;
        c.prediction.test_episodes = 1000;
        c.detection.predictor_episodes = 10_000;
        c.detection.window_stride = 1;
        c.detection.n_benign = 100_000;
        c.detection.n_adversarial = 100_000;
        c.detection.multiclass_per_class = 10_000;
        c
    }

    pub fn for_scale(scale: Scale) -> Self {
        match scale {
            Scale::Desk => Self::desk(),
            Scale::Full => Self::full(),
        }
    }

    /// Reads a JSON config. Missing fields take the defaults of the config's
    /// own `scale` (desk unless stated).
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let scale = match value.get("scale") {
            Some(s) => serde_json::from_value(s.clone())?,
            None => Scale::Desk,
        };
        let mut base = serde_json::to_value(Self::for_scale(scale))?;
        merge(&mut base, value);
        let cfg: Self = serde_json::from_value(base)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if let Some(g) = &self.grid {
            if !g.exists() {
                return bad(format!("grid config {} does not exist", g.display()));
            }
        }
        let p = &self.prediction;
        if p.episodes == 0 || p.test_episodes == 0 || p.aggregation_episodes == 0 {
            return bad("episode counts must be positive".into());
        }
        if p.window_stride == 0 || p.test_stride == 0 || p.units == 0 || p.epochs == 0 || p.repeats == 0 {
            return bad("strides, units, epochs and repeats must be positive".into());
        }
        if p.sample_sizes.is_empty() || p.sample_sizes.contains(&0) {
            return bad("sample sizes must be positive".into());
        }
        if p.sigmas.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return bad("noise levels must be finite and non-negative".into());
        }
        let d = &self.detection;
        if d.lstm_units.is_empty() || d.lstm_units.contains(&0) || d.gnn_units == 0 {
            return bad("detection predictor widths must be positive".into());
        }
        if d.n_benign < 10 || d.n_adversarial < 10 || d.multiclass_per_class < 10 {
            return bad("detection datasets need at least 10 windows per label".into());
        }
        if !(d.train_fraction > 0.0 && d.train_fraction < 1.0) {
            return bad("train fraction must lie in (0, 1)".into());
        }
        if d.attacked_buses.is_empty() || d.noisy_runs == 0 || d.detector_epochs == 0 {
            return bad("attacked buses, noisy runs and detector epochs must be non-empty".into());
        }
        if !(1..=crate::dataset::OBS_STEPS).contains(&d.multiclass_m) {
            return bad(format!("multiclass m must lie in 1..={}", crate::dataset::OBS_STEPS));
        }
        Ok(())
    }
}

fn merge(base: &mut serde_json::Value, over: serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = ExperimentConfig::desk();
        assert_eq!(ExperimentConfig::from_json(&c.to_json()).unwrap(), c);
        let f = ExperimentConfig::full();
        assert_eq!(ExperimentConfig::from_json(&f.to_json()).unwrap(), f);
    }

    #[test]
    fn partial_override_keeps_scale_defaults() {
        let c = ExperimentConfig::from_json(r#"{"scale": "full", "detection": {"n_benign": 50}}"#).unwrap();
        assert_eq!(c.detection.n_benign, 50);
        assert_eq!(c.detection.n_adversarial, 100_000);
        assert_eq!(c.prediction.episodes, 10_000);
        let d = ExperimentConfig::from_json(r#"{"checks": {"position_last_max": 0.7}}"#).unwrap();
        assert_eq!(d.checks.position_last_max, 0.7);
        assert_eq!(d.checks.cyclic_m1_max, 0.85);
    }

    #[test]
    fn rejects_missing_grid_and_bad_values() {
        assert!(ExperimentConfig::from_json(r#"{"grid": "/definitely/not/here.grid"}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"prediction": {"sigmas": [-1.0]}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"detection": {"train_fraction": 1.0}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"scale": "huge"}"#).is_err());
    }
}
