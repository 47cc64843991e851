use crate::error::{Error, Result};

/// Mean squared error over all entries and its gradient `2 (pred - target) / n`.
pub fn mse_loss(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if pred.len() != target.len() {
        return Err(Error::Dimension { what: "mse target", expected: pred.len(), got: target.len() });
    }
    if pred.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = p - t;
            loss += d * d;
            2.0 * d / n
        })
        .collect();
    Ok((loss / n, grad))
}

const PROB_FLOOR: f64 = 1e-12;

/// Mean binary cross-entropy of probabilities against 0/1 labels.
pub fn binary_cross_entropy(prob: &[f64], labels: &[f64]) -> f64 {
    let n = prob.len().max(1) as f64;
    prob.iter()
        .zip(labels)
        .map(|(p, y)| {
            let p = p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / n
}

/// Mean categorical cross-entropy of row-wise probabilities against class ids.
pub fn categorical_cross_entropy(prob: &[f64], classes: &[usize], width: usize) -> f64 {
    let n = classes.len().max(1) as f64;
    prob.chunks_exact(width)
        .zip(classes)
        .map(|(row, &c)| -row[c].max(PROB_FLOOR).ln())
        .sum::<f64>()
        / n
}
