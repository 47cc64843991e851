//! Episode generation, measurement noise, windowing and dataset persistence.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{simulate_episode, AttackSchedule, Episode, GridModel, SystemState, DT, EPISODE_STEPS};
use crate::rng::{derive_seed, rng_from_seed, Stream};

/// Past steps per observation window.
pub const OBS_STEPS: usize = 5;
/// Default train fraction.
pub const TRAIN_FRACTION: f64 = 0.7;

const MAGIC: &str = "FDIA-DATASET";
const VERSION: u32 = 1;

/// Initial frequency deviations are drawn from `U(0, OMEGA_INIT_MAX)`.
pub const OMEGA_INIT_MAX: f64 = 0.3;
/// Initial angles are drawn from `U(-THETA_INIT_MAX, THETA_INIT_MAX)`.
pub const THETA_INIT_MAX: f64 = 0.03;

/// Additive Gaussian measurement noise, identical for every bus and variable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub sigma: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(sigma: f64, seed: u64) -> Result<Self> {
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(Error::InvalidArgument(format!("noise sigma must be >= 0, got {sigma}")));
        }
        Ok(Self { sigma, seed })
    }

    pub fn none() -> Self {
        Self { sigma: 0.0, seed: 0 }
    }
}

/// One `(observation, next state)` training pair.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    /// Row-major `n_p x n_f` past states, oldest first.
    pub observation: Vec<f64>,
    pub target: Vec<f64>,
    pub episode_id: u64,
    pub start_index: usize,
}

impl WindowSample {
    pub fn n_f(&self) -> usize {
        self.target.len()
    }

    pub fn n_p(&self) -> usize {
        self.observation.len() / self.target.len().max(1)
    }

    pub fn row(&self, t: usize) -> &[f64] {
        let n_f = self.n_f();
        &self.observation[t * n_f..(t + 1) * n_f]
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionDataset {
    pub samples: Vec<WindowSample>,
    pub noise: NoiseSpec,
    pub split: Split,
    /// Seed the episodes were generated from.
    pub seed: u64,
    pub n_p: usize,
    pub n_f: usize,
}

impl PredictionDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn train(&self) -> impl Iterator<Item = &WindowSample> {
        self.split.train.iter().map(|&i| &self.samples[i])
    }

    pub fn validation(&self) -> impl Iterator<Item = &WindowSample> {
        self.split.validation.iter().map(|&i| &self.samples[i])
    }
}

/// Draws `omega_i ~ U(0, 0.3)` and `theta_i ~ U(-0.03, 0.03)` independently per bus.
pub fn sample_initial_state<R: Rng + ?Sized>(rng: &mut R, n_buses: usize) -> SystemState {
    let theta = (0..n_buses).map(|_| rng.random_range(-THETA_INIT_MAX..=THETA_INIT_MAX)).collect();
    let omega = (0..n_buses).map(|_| rng.random_range(0.0..=OMEGA_INIT_MAX)).collect();
    SystemState { theta, omega, time: 0.0 }
}

/// Adds independent `N(0, sigma)` noise to every angle and frequency entry.
pub fn add_noise(episode: &Episode, spec: &NoiseSpec) -> Episode {
    let mut out = episode.clone();
    if spec.sigma == 0.0 {
        return out;
    }
    let normal = Normal::new(0.0, spec.sigma).expect("sigma validated non-negative");
    let mut rng = rng_from_seed(spec.seed);
    for s in &mut out.states {
        for x in s.theta.iter_mut().chain(s.omega.iter_mut()) {
            *x += normal.sample(&mut rng);
        }
    }
    out
}

/// Noise applied in place to flat measurement rows.
pub(crate) fn add_noise_rows(rows: &mut [Vec<f64>], sigma: f64, seed: u64) {
    if sigma == 0.0 {
        return;
    }
    let normal = Normal::new(0.0, sigma).expect("sigma validated non-negative");
    let mut rng = rng_from_seed(seed);
    for x in rows.iter_mut().flatten() {
        *x += normal.sample(&mut rng);
    }
}

/// Every window of an episode: sample `j` observes `[j, j + n_p)` and targets `j + n_p`.
pub fn make_windows(episode: &Episode, n_p: usize) -> Result<Vec<WindowSample>> {
    make_windows_strided(episode, n_p, 1)
}

/// Windows starting at `0, stride, 2 * stride, ...`.
pub fn make_windows_strided(episode: &Episode, n_p: usize, stride: usize) -> Result<Vec<WindowSample>> {
    if n_p == 0 || stride == 0 {
        return Err(Error::InvalidArgument("n_p and stride must be positive".into()));
    }
    if episode.len() <= n_p {
        return Err(Error::EpisodeTooShort { len: episode.len(), needed: n_p });
    }
    let flat: Vec<Vec<f64>> = episode.states.iter().map(SystemState::flatten).collect();
    Ok((0..episode.len() - n_p)
        .step_by(stride)
        .map(|j| WindowSample {
            observation: flat[j..j + n_p].concat(),
            target: flat[j + n_p].clone(),
            episode_id: episode.seed,
            start_index: j,
        })
        .collect())
}

/// Shuffled disjoint train/validation index sets.
pub fn split_dataset(n_samples: usize, ratio: f64, seed: u64) -> Result<Split> {
    if n_samples == 0 {
        return Err(Error::EmptyDataset);
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidArgument(format!("split ratio must be in (0, 1), got {ratio}")));
    }
    let mut idx: Vec<usize> = (0..n_samples).collect();
    idx.shuffle(&mut rng_from_seed(seed));
    let n_train = ((ratio * n_samples as f64).round() as usize).clamp(1, n_samples);
    let validation = idx.split_off(n_train);
    Ok(Split { train: idx, validation, seed })
}

/// Recipe for a simulated state-prediction dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationSpec {
    pub episodes: usize,
    pub steps: usize,
    pub dt: f64,
    pub n_p: usize,
    /// Keep every `stride`-th window of each episode.
    pub window_stride: usize,
    pub sigma: f64,
    pub seed: u64,
    pub train_fraction: f64,
}

impl Default for GenerationSpec {
    fn default() -> Self {
        Self {
            episodes: 100,
            steps: EPISODE_STEPS,
            dt: DT,
            n_p: OBS_STEPS,
            window_stride: 1,
            sigma: 0.0,
            seed: 0,
            train_fraction: TRAIN_FRACTION,
        }
    }
}

/// Seed of episode `index` in a dataset generated from `seed`.
pub fn episode_seed(seed: u64, index: usize) -> u64 {
    derive_seed(seed, Stream::Episode, index as u64)
}

/// Clean (noise-free) episode `index` of the dataset stream `seed`.
pub fn simulate_indexed_episode(grid: &GridModel, seed: u64, index: usize, steps: usize, dt: f64) -> Result<Episode> {
    let ep_seed = episode_seed(seed, index);
    let init = sample_initial_state(&mut rng_from_seed(ep_seed), grid.n_buses());
    simulate_episode(&init, grid, &AttackSchedule::new(), steps, dt, ep_seed)
}

/// Simulates, noise-corrupts, windows and splits. Episodes run in parallel
/// with per-episode seeds, so output is independent of the worker count.
pub fn generate_dataset(grid: &GridModel, spec: &GenerationSpec) -> Result<PredictionDataset> {
    if spec.episodes == 0 {
        return Err(Error::EmptyDataset);
    }
    let noise = NoiseSpec::new(spec.sigma, derive_seed(spec.seed, Stream::Noise, 0))?;
    let per_episode: Vec<Vec<WindowSample>> = (0..spec.episodes)
        .into_par_iter()
        .map(|e| {
            let clean = simulate_indexed_episode(grid, spec.seed, e, spec.steps, spec.dt)?;
            let noisy = add_noise(&clean, &NoiseSpec { sigma: spec.sigma, seed: derive_seed(noise.seed, Stream::Noise, e as u64) });
            make_windows_strided(&noisy, spec.n_p, spec.window_stride)
        })
        .collect::<Result<_>>()?;
    let samples: Vec<WindowSample> = per_episode.into_iter().flatten().collect();
    let split = split_dataset(samples.len(), spec.train_fraction, derive_seed(spec.seed, Stream::Split, 0))?;
    Ok(PredictionDataset {
        samples,
        noise,
        split,
        seed: spec.seed,
        n_p: spec.n_p,
        n_f: 2 * grid.n_buses(),
    })
}

/// Writes the text header plus little-endian binary payload.
pub fn save_dataset(ds: &PredictionDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{MAGIC}")?;
    writeln!(w, "version {VERSION}")?;
    writeln!(w, "n_samples {}", ds.samples.len())?;
    writeln!(w, "n_p {}", ds.n_p)?;
    writeln!(w, "n_f {}", ds.n_f)?;
    writeln!(w, "sigma {}", ds.noise.sigma.to_bits())?;
    writeln!(w, "noise_seed {}", ds.noise.seed)?;
    writeln!(w, "seed {}", ds.seed)?;
    writeln!(w, "split_seed {}", ds.split.seed)?;
    writeln!(w, "n_train {}", ds.split.train.len())?;
    writeln!(w, "n_validation {}", ds.split.validation.len())?;
    writeln!(w, "end")?;
    for s in &ds.samples {
        if s.observation.len() != ds.n_p * ds.n_f || s.target.len() != ds.n_f {
            return Err(Error::Dimension { what: "sample shape", expected: ds.n_p * ds.n_f, got: s.observation.len() });
        }
        w.write_all(&s.episode_id.to_le_bytes())?;
        w.write_all(&(s.start_index as u64).to_le_bytes())?;
        for x in s.observation.iter().chain(&s.target) {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    for &i in ds.split.train.iter().chain(&ds.split.validation) {
        w.write_all(&(i as u64).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<PredictionDataset> {
    let path = path.as_ref();
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let corrupt = |msg: String| Error::Corrupt { path: path.to_path_buf(), msg };

    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim_end() != MAGIC {
        return Err(Error::Format(format!("{} is not a dataset file", path.display())));
    }
    let mut fields = std::collections::HashMap::new();
    loop {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(corrupt("header ended before `end`".into()));
        }
        let l = line.trim_end();
        if l == "end" {
            break;
        }
        let (k, v) = l.split_once(' ').ok_or_else(|| corrupt(format!("bad header line {l:?}")))?;
        let v: u64 = v.parse().map_err(|_| corrupt(format!("bad header value {l:?}")))?;
        fields.insert(k.to_string(), v);
    }
    let get = |k: &str| fields.get(k).copied().ok_or_else(|| corrupt(format!("missing header field {k}")));
    let version = get("version")? as u32;
    if version != VERSION {
        return Err(Error::Version { found: version, expected: VERSION });
    }
    let n = get("n_samples")? as usize;
    let n_p = get("n_p")? as usize;
    let n_f = get("n_f")? as usize;
    let n_train = get("n_train")? as usize;
    let n_val = get("n_validation")? as usize;

    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    let per_sample = 2 + n_p * n_f + n_f;
    let expected = 8 * (n * per_sample + n_train + n_val);
    if payload.len() != expected {
        return Err(corrupt(format!("payload is {} bytes, expected {expected}", payload.len())));
    }
    let mut words = payload.chunks_exact(8).map(|c| <[u8; 8]>::try_from(c).expect("chunk of 8"));
    let mut next = || words.next().expect("length checked");
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let episode_id = u64::from_le_bytes(next());
        let start_index = u64::from_le_bytes(next()) as usize;
        let observation = (0..n_p * n_f).map(|_| f64::from_le_bytes(next())).collect();
        let target = (0..n_f).map(|_| f64::from_le_bytes(next())).collect();
        samples.push(WindowSample { observation, target, episode_id, start_index });
    }
    let mut read_idx = |count: usize| -> Result<Vec<usize>> {
        (0..count)
            .map(|_| {
                let i = u64::from_le_bytes(next()) as usize;
                if i < n {
                    Ok(i)
                } else {
                    Err(corrupt(format!("split index {i} out of range")))
                }
            })
            .collect()
    };
    let train = read_idx(n_train)?;
    let validation = read_idx(n_val)?;
    Ok(PredictionDataset {
        samples,
        noise: NoiseSpec { sigma: f64::from_bits(get("sigma")?), seed: get("noise_seed")? },
        split: Split { train, validation, seed: get("split_seed")? },
        seed: get("seed")?,
        n_p,
        n_f,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::simulate_episode;

    fn episode(len: usize) -> Episode {
        let grid = GridModel::ten_bus_default();
        let init = sample_initial_state(&mut rng_from_seed(5), 10);
        simulate_episode(&init, &grid, &AttackSchedule::new(), len, DT, 5).unwrap()
    }

    #[test]
    fn initial_state_is_deterministic_and_bounded() {
        let a = sample_initial_state(&mut rng_from_seed(9), 10);
        let b = sample_initial_state(&mut rng_from_seed(9), 10);
        assert_eq!(a, b);
        let mut rng = rng_from_seed(1);
        let mut sum = 0.0;
        let draws = 10_000;
        for _ in 0..draws {
            let s = sample_initial_state(&mut rng, 10);
            assert!(s.omega.iter().all(|w| (0.0..=0.3).contains(w)));
            assert!(s.theta.iter().all(|t| (-0.03..=0.03).contains(t)));
            sum += s.omega[0];
        }
        let mean = sum / draws as f64;
        assert!((mean - 0.15).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn noise_statistics() {
        let ep = episode(50);
        assert_eq!(add_noise(&ep, &NoiseSpec::new(0.0, 1).unwrap()), ep);

        let big = episode(EPISODE_STEPS);
        let spec = NoiseSpec::new(0.005, 77).unwrap();
        let noisy = add_noise(&big, &spec);
        assert_eq!(noisy, add_noise(&big, &spec));
        let diffs: Vec<f64> = big
            .states
            .iter()
            .zip(&noisy.states)
            .flat_map(|(a, b)| a.flatten().into_iter().zip(b.flatten()).map(|(x, y)| y - x).collect::<Vec<_>>())
            .collect();
        assert!(diffs.len() >= 10_000);
        let n = diffs.len() as f64;
        let mean = diffs.iter().sum::<f64>() / n;
        let std = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((std - 0.005).abs() < 0.005 * 0.05, "std {std}");
        assert!(NoiseSpec::new(-1.0, 0).is_err());
    }

    #[test]
    fn window_counts_and_indexing() {
        assert_eq!(make_windows(&episode(6), 5).unwrap().len(), 1);
        let ep = episode(EPISODE_STEPS);
        let w = make_windows(&ep, 5).unwrap();
        assert_eq!(w.len(), 495);
        assert_eq!(w[0].target, ep.states[5].flatten());
        assert_eq!(w[3].row(0), ep.states[3].flatten().as_slice());
        assert_eq!(w[3].row(4), ep.states[7].flatten().as_slice());
        assert!(matches!(make_windows(&episode(5), 5), Err(Error::EpisodeTooShort { .. })));
        assert_eq!(make_windows_strided(&ep, 5, 5).unwrap().len(), 99);
    }

    #[test]
    fn split_cases() {
        let s = split_dataset(100, 0.7, 3).unwrap();
        assert_eq!((s.train.len(), s.validation.len()), (70, 30));
        let mut all: Vec<usize> = s.train.iter().chain(&s.validation).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(s, split_dataset(100, 0.7, 3).unwrap());
        let two = split_dataset(2, 0.5, 0).unwrap();
        assert_eq!((two.train.len(), two.validation.len()), (1, 1));
        assert!(matches!(split_dataset(0, 0.7, 0), Err(Error::EmptyDataset)));
        assert!(split_dataset(10, 1.0, 0).is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let grid = GridModel::ten_bus_default();
        let spec = GenerationSpec { episodes: 3, steps: 40, window_stride: 7, sigma: 0.001, seed: 11, ..Default::default() };
        let a = generate_dataset(&grid, &spec).unwrap();
        let b = generate_dataset(&grid, &spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3 * 5);
        assert_eq!(a.n_f, 20);
    }

    #[test]
    fn persistence_round_trip_and_errors() {
        let grid = GridModel::ten_bus_default();
        let spec = GenerationSpec { episodes: 2, steps: 30, window_stride: 4, sigma: 0.005, seed: 2, ..Default::default() };
        let ds = generate_dataset(&grid, &spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.bin");
        save_dataset(&ds, &path).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), ds);

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 13]).unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::Corrupt { .. })));

        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        std::fs::write(&path, &wrong).unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::Format(_))));

        let header_end = bytes.windows(4).position(|w| w == b"end\n").unwrap() + 4;
        let mut patched = String::from_utf8(bytes[..header_end].to_vec()).unwrap().replacen("version 1", "version 9", 1).into_bytes();
        patched.extend_from_slice(&bytes[header_end..]);
        std::fs::write(&path, &patched).unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::Version { found: 9, .. })));

        assert!(matches!(load_dataset(dir.path().join("missing.bin")), Err(Error::Io(_))));
    }
}
