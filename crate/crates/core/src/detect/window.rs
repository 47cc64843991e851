//! Labeled attack windows cut from fresh simulations.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{add_noise_rows, sample_initial_state, OBS_STEPS};
use crate::error::{Error, Result};
use crate::grid::{simulate_tail, AttackSchedule, GridModel, DT, EPISODE_STEPS};
use crate::rng::{derive_seed, rng_from_seed, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeployMode {
    /// The detector runs every step, so an attack always hits the inference step.
    Sliding,
    /// The detector runs at an interval; attacks land only in the observation window.
    Cyclic,
}

impl std::fmt::Display for DeployMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Sliding => "sliding",
            Self::Cyclic => "cyclic",
        })
    }
}

impl std::str::FromStr for DeployMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sliding" => Ok(Self::Sliding),
            "cyclic" => Ok(Self::Cyclic),
            _ => Err(Error::InvalidArgument(format!("unknown deployment mode {s:?}"))),
        }
    }
}

/// One detector input: `n_p` observed states and the state at inference
/// time `t`. Positions are offsets back from `t` (`0` is `t` itself).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionWindow {
    pub observation: Vec<f64>,
    pub inference: Vec<f64>,
    pub adversarial: bool,
    pub attacked_bus: Option<usize>,
    pub positions: BTreeSet<usize>,
    /// Attacked steps inside the observation part.
    pub m: usize,
    /// Inference timestep within its episode.
    pub t: usize,
}

impl DetectionWindow {
    /// Class id for localization: attacked bus, or `n_buses` when benign.
    pub fn class(&self, n_buses: usize) -> usize {
        self.attacked_bus.unwrap_or(n_buses)
    }

    pub fn is_consistent(&self, n_p: usize) -> bool {
        self.adversarial == !self.positions.is_empty()
            && self.adversarial == self.attacked_bus.is_some()
            && self.m == self.positions.iter().filter(|&&k| (1..=n_p).contains(&k)).count()
            && self.positions.iter().all(|&k| k <= n_p)
    }
}

/// How many observation steps each adversarial window perturbs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackPattern {
    /// Uniform over the mode-feasible range of `m`.
    Mixed,
    Fixed(usize),
    /// Exactly these observation offsets.
    Positions(Vec<usize>),
    /// One offset drawn uniformly from the list per window.
    OneOf(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionSpec {
    pub mode: DeployMode,
    pub n_benign: usize,
    pub n_adversarial: usize,
    /// Attacked bus drawn uniformly from this list per adversarial window.
    pub buses: Vec<usize>,
    pub pattern: AttackPattern,
    pub sigma: f64,
    pub seed: u64,
    pub n_p: usize,
    pub steps: usize,
    pub dt: f64,
}

impl DetectionSpec {
    pub fn new(mode: DeployMode, n_benign: usize, n_adversarial: usize, seed: u64) -> Self {
        Self {
            mode,
            n_benign,
            n_adversarial,
            buses: vec![7],
            pattern: AttackPattern::Mixed,
            sigma: 0.0,
            seed,
            n_p: OBS_STEPS,
            steps: EPISODE_STEPS,
            dt: DT,
        }
    }

    fn m_range(&self) -> (usize, usize) {
        match self.mode {
            DeployMode::Sliding => (0, self.n_p),
            DeployMode::Cyclic => (1, self.n_p),
        }
    }

    pub fn validate(&self, n_buses: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.n_benign == 0 || self.n_adversarial == 0 {
            return bad("both window counts must be at least 1".into());
        }
        if self.buses.is_empty() || self.buses.iter().any(|&b| b >= n_buses) {
            return bad(format!("attacked buses must be in 0..{n_buses}"));
        }
        if self.n_p == 0 || self.steps < self.n_p + 2 {
            return bad("episode too short for the observation window".into());
        }
        if !(self.sigma >= 0.0) || !(self.dt > 0.0) {
            return bad("sigma must be non-negative and dt positive".into());
        }
        let (lo, hi) = self.m_range();
        let offsets_ok = |v: &[usize]| v.iter().all(|&k| (1..=self.n_p).contains(&k));
        match &self.pattern {
            AttackPattern::Mixed => Ok(()),
            AttackPattern::Fixed(m) if (lo..=hi).contains(m) => Ok(()),
            AttackPattern::Fixed(m) => bad(format!("m = {m} is infeasible in {} mode (allowed {lo}..={hi})", self.mode)),
            AttackPattern::Positions(v) if offsets_ok(v) && (lo..=hi).contains(&v.len()) => Ok(()),
            AttackPattern::OneOf(v) if !v.is_empty() && offsets_ok(v) => Ok(()),
            _ => bad(format!("attack offsets must lie in 1..={} and satisfy the {} mode", self.n_p, self.mode)),
        }
    }
}

fn draw_positions<R: Rng + ?Sized>(spec: &DetectionSpec, rng: &mut R) -> BTreeSet<usize> {
    let (lo, hi) = spec.m_range();
    let mut pos: BTreeSet<usize> = match &spec.pattern {
        AttackPattern::Mixed => {
            let m = rng.random_range(lo..=hi);
            sample(rng, spec.n_p, m).into_iter().map(|i| i + 1).collect()
        }
        AttackPattern::Fixed(m) => sample(rng, spec.n_p, *m).into_iter().map(|i| i + 1).collect(),
        AttackPattern::Positions(v) => v.iter().copied().collect(),
        AttackPattern::OneOf(v) => [v[rng.random_range(0..v.len())]].into(),
    };
    if spec.mode == DeployMode::Sliding {
        pos.insert(0);
    }
    pos
}

/// Window `index` of the stream: a fresh episode simulated clean up to the
/// window, with the attack schedule flagging only the window's positions.
pub fn simulate_window(grid: &GridModel, spec: &DetectionSpec, index: usize, adversarial: bool) -> Result<DetectionWindow> {
    let seed = derive_seed(spec.seed, Stream::Window, index as u64);
    let mut rng = rng_from_seed(seed);
    let init = sample_initial_state(&mut rng, grid.n_buses());
    let t = rng.random_range(spec.n_p + 1..spec.steps);
    let (positions, bus) = if adversarial {
        let bus = spec.buses[rng.random_range(0..spec.buses.len())];
        (draw_positions(spec, &mut rng), Some(bus))
    } else {
        (BTreeSet::new(), None)
    };
    let schedule = bus.map_or_else(AttackSchedule::new, |b| AttackSchedule::on_bus(b, positions.iter().map(|&k| t - k)));
    let mut rows = simulate_tail(&init, grid, &schedule, t - spec.n_p, t, spec.dt)?;
    add_noise_rows(&mut rows, spec.sigma, derive_seed(seed, Stream::Noise, 0));
    let inference = rows.pop().expect("window has n_p + 1 rows");
    let m = positions.iter().filter(|&&k| k >= 1).count();
    Ok(DetectionWindow { observation: rows.concat(), inference, adversarial, attacked_bus: bus, positions, m, t })
}

/// Benign windows first, then adversarial ones; generated in parallel with
/// per-window seeds.
pub fn build_detection_dataset(grid: &GridModel, spec: &DetectionSpec) -> Result<Vec<DetectionWindow>> {
    spec.validate(grid.n_buses())?;
    let total = spec.n_benign + spec.n_adversarial;
    (0..total).into_par_iter().map(|i| simulate_window(grid, spec, i, i >= spec.n_benign)).collect()
}

/// Inference times at which a detector deployed over an episode runs:
/// every step once the window is full (sliding) or every `interval` steps
/// starting from the first full window (cyclic).
pub fn deployment_schedule(mode: DeployMode, interval: usize, steps: usize, n_p: usize) -> Result<Vec<usize>> {
    if interval < 1 {
        return Err(Error::InvalidArgument("deployment interval must be at least 1".into()));
    }
    let stride = match mode {
        DeployMode::Sliding => 1,
        DeployMode::Cyclic => interval,
    };
    let first = match mode {
        DeployMode::Sliding => n_p,
        DeployMode::Cyclic => n_p + interval - 1,
    };
    Ok((first..steps).step_by(stride).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sliding_windows_always_hit_inference() {
        let grid = GridModel::ten_bus_default();
        let ws = build_detection_dataset(&grid, &DetectionSpec::new(DeployMode::Sliding, 20, 30, 4)).unwrap();
        assert_eq!(ws.len(), 50);
        assert_eq!(ws.iter().filter(|w| w.adversarial).count(), 30);
        for w in &ws {
            assert!(w.is_consistent(5));
            assert_eq!(w.adversarial, w.positions.contains(&0));
            assert_eq!(w.observation.len(), 100);
        }
    }

    #[test]
    fn cyclic_fixed_five() {
        let grid = GridModel::ten_bus_default();
        let mut spec = DetectionSpec::new(DeployMode::Cyclic, 5, 10, 8);
        spec.pattern = AttackPattern::Fixed(5);
        for w in build_detection_dataset(&grid, &spec).unwrap().iter().filter(|w| w.adversarial) {
            assert_eq!(w.positions, (1..=5).collect());
            assert_eq!(w.m, 5);
        }
        spec.pattern = AttackPattern::Fixed(0);
        assert!(build_detection_dataset(&grid, &spec).is_err());
    }

    #[test]
    fn benign_windows_match_clean_simulation() {
        let grid = GridModel::ten_bus_default();
        let spec = DetectionSpec::new(DeployMode::Sliding, 3, 3, 2);
        let ws = build_detection_dataset(&grid, &spec).unwrap();
        for (i, w) in ws.iter().enumerate() {
            let mut rng = rng_from_seed(derive_seed(2, Stream::Window, i as u64));
            let init = sample_initial_state(&mut rng, 10);
            let ep = crate::grid::simulate_episode(&init, &grid, &AttackSchedule::new(), w.t + 1, DT, 0).unwrap();
            let clean = ep.states[w.t].flatten();
            if w.adversarial {
                assert_ne!(clean, w.inference);
            } else {
                assert_eq!(clean, w.inference);
                assert_eq!(ep.states[w.t - 5].flatten(), w.observation[..20]);
            }
        }
    }

    #[test]
    fn schedules() {
        assert_eq!(deployment_schedule(DeployMode::Sliding, 1, 500, 5).unwrap().len(), 495);
        assert_eq!(deployment_schedule(DeployMode::Cyclic, 5, 500, 5).unwrap().len(), 99);
        let every4 = deployment_schedule(DeployMode::Cyclic, 4, 500, 5).unwrap();
        assert!(every4.windows(2).all(|w| w[1] - w[0] == 4));
        assert!(deployment_schedule(DeployMode::Cyclic, 0, 500, 5).is_err());
    }
}
