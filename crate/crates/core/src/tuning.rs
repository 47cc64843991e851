//! Seeded random search over detector hyperparameters.

use std::io::{BufRead, Write};
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub layers: (usize, usize),
    pub units: (usize, usize),
    /// Sampled log-uniformly.
    pub lr: (f64, f64),
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self { layers: (1, 3), units: (10, 150), lr: (1e-4, 1e-1) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialParams {
    /// Units per hidden layer, sampled independently.
    pub hidden: Vec<usize>,
    pub lr: f64,
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        let ok = 1 <= self.layers.0
            && self.layers.0 <= self.layers.1
            && 1 <= self.units.0
            && self.units.0 <= self.units.1
            && 0.0 < self.lr.0
            && self.lr.0 <= self.lr.1;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid search space {self:?}")))
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> TrialParams {
        let n = rng.random_range(self.layers.0..=self.layers.1);
        let hidden = (0..n).map(|_| rng.random_range(self.units.0..=self.units.1)).collect();
        let (lo, hi) = (self.lr.0.ln(), self.lr.1.ln());
        let lr = if hi > lo { rng.random_range(lo..hi).exp() } else { self.lr.0 };
        TrialParams { hidden, lr }
    }

    pub fn contains(&self, p: &TrialParams) -> bool {
        (self.layers.0..=self.layers.1).contains(&p.hidden.len())
            && p.hidden.iter().all(|u| (self.units.0..=self.units.1).contains(u))
            && self.lr.0 <= p.lr
            && p.lr <= self.lr.1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub index: usize,
    pub params: TrialParams,
    /// `None` when the trial diverged or failed.
    pub objective: Option<f64>,
    pub seed: u64,
    pub duration_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub best: Trial,
    pub history: Vec<Trial>,
}

/// Evaluates `n_trials` independent samples in parallel. The objective gets
/// the sampled parameters and a per-trial seed; errors and non-finite values
/// mark the trial as diverged. The best trial is the lowest objective, the
/// earliest on ties.
pub fn random_search<F>(space: &SearchSpace, n_trials: usize, seed: u64, objective: F) -> Result<SearchResult>
where
    F: Fn(&TrialParams, u64) -> Result<f64> + Sync,
{
    space.validate()?;
    if n_trials == 0 {
        return Err(Error::InvalidArgument("need at least one trial".into()));
    }
    let history: Vec<Trial> = (0..n_trials)
        .into_par_iter()
        .map(|index| {
            let trial_seed = derive_seed(seed, Stream::Trial, index as u64);
            let params = space.sample(&mut rng_from_seed(trial_seed));
            let start = Instant::now();
            let objective = objective(&params, trial_seed).ok().filter(|v| v.is_finite());
            Trial { index, params, objective, seed: trial_seed, duration_s: start.elapsed().as_secs_f64() }
        })
        .collect();
    let best = history
        .iter()
        .filter(|t| t.objective.is_some())
        .fold(None::<&Trial>, |best, t| match best {
            Some(b) if b.objective <= t.objective => Some(b),
            _ => Some(t),
        })
        .cloned()
        .ok_or(Error::AllTrialsDiverged(n_trials))?;
    Ok(SearchResult { best, history })
}

pub fn write_history(path: impl AsRef<Path>, trials: &[Trial]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for t in trials {
        writeln!(w, "{}", serde_json::to_string(t)?)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_history(path: impl AsRef<Path>) -> Result<Vec<Trial>> {
    let r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Importance {
    pub n_layers: f64,
    pub n_units: f64,
    pub lr: f64,
}

const BINS: usize = 5;

/// Count-weighted variance of per-bin objective means.
fn between_bin_variance(bins: &[usize], y: &[f64], n_bins: usize) -> f64 {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let mut sum = vec![0.0; n_bins];
    let mut count = vec![0usize; n_bins];
    for (&b, &v) in bins.iter().zip(y) {
        sum[b] += v;
        count[b] += 1;
    }
    (0..n_bins).filter(|&b| count[b] > 0).map(|b| count[b] as f64 * (sum[b] / count[b] as f64 - mean).powi(2)).sum::<f64>() / n
}

fn equal_width(x: &[f64], lo: f64, hi: f64) -> Vec<usize> {
    x.iter()
        .map(|&v| if hi > lo { (((v - lo) / (hi - lo)) * BINS as f64).floor().clamp(0.0, (BINS - 1) as f64) as usize } else { 0 })
        .collect()
}

/// Share of objective variance explained by binning on each hyperparameter
/// (layer count, first-layer units, log learning rate). Scores are
/// non-negative and sum to one; a constant objective gives uniform scores.
pub fn importance_report(history: &[Trial], space: &SearchSpace) -> Result<Importance> {
    let ok: Vec<&Trial> = history.iter().filter(|t| t.objective.is_some()).collect();
    if ok.len() < 10 {
        return Err(Error::InvalidArgument(format!("importance needs at least 10 finished trials, got {}", ok.len())));
    }
    let y: Vec<f64> = ok.iter().map(|t| t.objective.expect("filtered")).collect();
    let layers: Vec<usize> = ok.iter().map(|t| t.params.hidden.len() - space.layers.0).collect();
    let n_layer_bins = space.layers.1 - space.layers.0 + 1;
    let units: Vec<f64> = ok.iter().map(|t| t.params.hidden[0] as f64).collect();
    let lrs: Vec<f64> = ok.iter().map(|t| t.params.lr.ln()).collect();
    let scores = [
        between_bin_variance(&layers, &y, n_layer_bins),
        between_bin_variance(&equal_width(&units, space.units.0 as f64, space.units.1 as f64 + 1.0), &y, BINS),
        between_bin_variance(&equal_width(&lrs, space.lr.0.ln(), space.lr.1.ln()), &y, BINS),
    ];
    let total: f64 = scores.iter().sum();
    if !(total > 1e-300) {
        return Ok(Importance { n_layers: 1.0 / 3.0, n_units: 1.0 / 3.0, lr: 1.0 / 3.0 });
    }
    Ok(Importance { n_layers: scores[0] / total, n_units: scores[1] / total, lr: scores[2] / total })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_trial_is_best() {
        let r = random_search(&SearchSpace::default(), 1, 3, |p, _| Ok(p.lr)).unwrap();
        assert_eq!(r.best, r.history[0]);
    }

    #[test]
    fn finds_learning_rate_minimum() {
        let space = SearchSpace::default();
        let r = random_search(&space, 200, 11, |p, _| Ok((p.lr - 0.01).powi(2))).unwrap();
        assert!((0.003..=0.03).contains(&r.best.params.lr), "{}", r.best.params.lr);
        assert!(r.history.iter().all(|t| space.contains(&t.params)));
        let again = random_search(&space, 200, 11, |p, _| Ok((p.lr - 0.01).powi(2))).unwrap();
        assert_eq!(again.history.iter().map(|t| &t.params).collect::<Vec<_>>(), r.history.iter().map(|t| &t.params).collect::<Vec<_>>());
    }

    #[test]
    fn ties_go_to_earliest_and_divergence_is_reported() {
        let r = random_search(&SearchSpace::default(), 20, 1, |_, _| Ok(1.0)).unwrap();
        assert_eq!(r.best.index, 0);
        let r = random_search(&SearchSpace::default(), 5, 1, |_, _| Ok(f64::NAN));
        assert!(matches!(r, Err(Error::AllTrialsDiverged(5))));
        let r = random_search(&SearchSpace::default(), 5, 1, |p, _| if p.hidden.len() == 1 { Ok(0.0) } else { Err(Error::EmptyDataset) }).unwrap();
        assert!(r.history.iter().any(|t| t.objective.is_none()) || r.history.iter().all(|t| t.params.hidden.len() == 1));
    }

    #[test]
    fn importance_cases() {
        let space = SearchSpace::default();
        let r = random_search(&space, 100, 2, |p, _| Ok(p.lr.ln().powi(2))).unwrap();
        let imp = importance_report(&r.history, &space).unwrap();
        assert!(imp.lr > 0.8, "{imp:?}");
        assert!((imp.lr + imp.n_layers + imp.n_units - 1.0).abs() < 1e-9);
        let flat = random_search(&space, 30, 2, |_, _| Ok(0.5)).unwrap();
        let imp = importance_report(&flat.history, &space).unwrap();
        assert_eq!((imp.n_layers, imp.n_units, imp.lr), (1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0));
        assert!(importance_report(&flat.history[..5], &space).is_err());
    }

    #[test]
    fn history_round_trip() {
        let r = random_search(&SearchSpace::default(), 12, 5, |p, _| Ok(p.lr * p.hidden.len() as f64)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.jsonl");
        write_history(&path, &r.history).unwrap();
        assert_eq!(read_history(&path).unwrap(), r.history);
    }
}
