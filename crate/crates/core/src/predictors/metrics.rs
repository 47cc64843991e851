use serde::{Deserialize, Serialize};

use super::model::{PredictorConfig, PredictorModel};
use super::train::pack;
use crate::dataset::WindowSample;
use crate::error::{Error, Result};

/// Actual values with magnitude below this are left out of the relative error.
pub const MRE_ZERO: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionMetrics {
    pub mae_theta: f64,
    pub mre_theta: f64,
    pub mae_omega: f64,
    pub mre_omega: f64,
    /// Entries left out of the relative errors for near-zero actual values.
    pub skipped_mre: usize,
    pub n_points: usize,
}

impl PredictionMetrics {
    /// Mean of the angle and frequency absolute errors.
    pub fn mae_mean(&self) -> f64 {
        0.5 * (self.mae_theta + self.mae_omega)
    }
}

/// `(MAE, MRE, skipped)` over paired entries. The relative error divides by
/// `|actual|` and skips near-zero actual values.
pub fn mae_mre(actual: &[f64], predicted: &[f64]) -> Result<(f64, f64, usize)> {
    if actual.len() != predicted.len() {
        return Err(Error::Dimension { what: "predictions", expected: actual.len(), got: predicted.len() });
    }
    if actual.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (mut abs, mut rel, mut kept) = (0.0, 0.0, 0usize);
    for (a, p) in actual.iter().zip(predicted) {
        let d = (a - p).abs();
        abs += d;
        if a.abs() >= MRE_ZERO {
            rel += d / a.abs();
            kept += 1;
        }
    }
    let mre = if kept == 0 { 0.0 } else { rel / kept as f64 };
    Ok((abs / actual.len() as f64, mre, actual.len() - kept))
}

/// Metrics over row-major `points x n_f` blocks laid out `theta..., omega...`.
pub fn prediction_metrics(actual: &[f64], predicted: &[f64], n_f: usize) -> Result<PredictionMetrics> {
    if n_f == 0 || n_f % 2 != 0 || actual.len() % n_f != 0 {
        return Err(Error::Dimension { what: "state width", expected: n_f, got: actual.len() });
    }
    if actual.len() != predicted.len() {
        return Err(Error::Dimension { what: "predictions", expected: actual.len(), got: predicted.len() });
    }
    let half = n_f / 2;
    let split = |x: &[f64]| -> (Vec<f64>, Vec<f64>) {
        let mut th = Vec::with_capacity(x.len() / 2);
        let mut om = Vec::with_capacity(x.len() / 2);
        for row in x.chunks_exact(n_f) {
            th.extend_from_slice(&row[..half]);
            om.extend_from_slice(&row[half..]);
        }
        (th, om)
    };
    let (at, ao) = split(actual);
    let (pt, po) = split(predicted);
    let (mae_theta, mre_theta, st) = mae_mre(&at, &pt)?;
    let (mae_omega, mre_omega, so) = mae_mre(&ao, &po)?;
    Ok(PredictionMetrics { mae_theta, mre_theta, mae_omega, mre_omega, skipped_mre: st + so, n_points: actual.len() / n_f })
}

pub fn evaluate_predictor<'a>(model: &PredictorModel, windows: impl IntoIterator<Item = &'a WindowSample>) -> Result<PredictionMetrics> {
    let (obs, tgt) = pack(windows);
    if tgt.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let pred = model.predict_many(&obs)?;
    prediction_metrics(&tgt, &pred, model.config.n_f)
}

/// JSON record `{config, mae_theta, mre_theta, mae_omega, mre_omega, skipped_mre}`.
pub fn metrics_record(config: &PredictorConfig, m: &PredictionMetrics) -> serde_json::Value {
    serde_json::json!({
        "config": config,
        "mae_theta": m.mae_theta,
        "mre_theta": m.mre_theta,
        "mae_omega": m.mae_omega,
        "mre_omega": m.mre_omega,
        "skipped_mre": m.skipped_mre,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_example() {
        let (mae, mre, skip) = mae_mre(&[1.0, 2.0], &[1.5, 2.5]).unwrap();
        assert_eq!(mae, 0.5);
        assert_eq!(mre, 0.375);
        assert_eq!(skip, 0);
    }

    #[test]
    fn perfect_and_zero_actuals() {
        let x = [0.1, -0.2, 0.0, 0.4];
        let (mae, mre, skip) = mae_mre(&x, &x).unwrap();
        assert_eq!((mae, mre, skip), (0.0, 0.0, 1));
        assert!(mae_mre(&[], &[]).is_err());
    }

    #[test]
    fn groups_split_by_half() {
        let act = [1.0, 1.0, 2.0, 2.0];
        let pred = [1.5, 1.5, 2.0, 2.0];
        let m = prediction_metrics(&act, &pred, 4).unwrap();
        assert_eq!(m.mae_theta, 0.5);
        assert_eq!(m.mae_omega, 0.0);
        assert_eq!(m.n_points, 1);
    }
}
