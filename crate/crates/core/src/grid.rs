//! Droop-controlled swing dynamics on a Kron-reduced generator network.
//!
//! Each bus carries a phase angle `theta_i` and a frequency deviation
//! `omega_i` obeying
//!
//! ```text
//! dtheta_i/dt = omega_i
//! M_i domega_i/dt = p_i - p_e,i - D_i omega_i - k_i omega_i
//! ```
//!
//! with lossless sine coupling `p_e,i = sum_j B_ij sin(theta_i - theta_j)`.
//! An [`AttackSchedule`] replaces `k_i` with a tampered value on selected
//! `(timestep, bus)` pairs.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Default episode length in steps.
pub const EPISODE_STEPS: usize = 500;
/// Default integration step (seconds).
pub const DT: f64 = 0.01;
/// Droop value written by the adversary.
pub const ATTACK_DROOP: f64 = -1.0;

const GRID_FORMAT: &str = "fdia-grid";
const GRID_VERSION: u32 = 1;

/// Immutable physical description of the reduced network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridModel {
    n_buses: usize,
    inertia: Vec<f64>,
    damping: Vec<f64>,
    droop: Vec<f64>,
    net_injection: Vec<f64>,
    /// Row-major `n x n` susceptance matrix.
    coupling: Vec<f64>,
    /// Row-major `n x n` GCN edge weights, `|B_ij|` over the row maximum.
    adjacency: Vec<f64>,
    /// Upper-triangular nonzero couplings `(i, j, B_ij)`.
    #[serde(skip)]
    edges: Vec<(usize, usize, f64)>,
}

impl GridModel {
    pub fn new(
        inertia: Vec<f64>,
        damping: Vec<f64>,
        droop: Vec<f64>,
        net_injection: Vec<f64>,
        coupling: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let n = inertia.len();
        if n == 0 {
            return Err(Error::InvalidGrid("grid has no buses".into()));
        }
        for (name, v) in [("damping", &damping), ("droop", &droop), ("net_injection", &net_injection)] {
            if v.len() != n {
                return Err(Error::InvalidGrid(format!(
                    "{name} has {} entries, expected {n}",
                    v.len()
                )));
            }
        }
        if coupling.len() != n || coupling.iter().any(|row| row.len() != n) {
            return Err(Error::InvalidGrid(format!("coupling must be {n}x{n}")));
        }
        let all = inertia.iter().chain(&damping).chain(&droop).chain(&net_injection);
        if all.clone().any(|x| !x.is_finite()) || coupling.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::InvalidGrid("non-finite parameter".into()));
        }
        if let Some(i) = inertia.iter().position(|&m| m <= 0.0) {
            return Err(Error::InvalidGrid(format!("inertia of bus {i} must be positive")));
        }
        if let Some(i) = damping.iter().position(|&d| d < 0.0) {
            return Err(Error::InvalidGrid(format!("damping of bus {i} must be non-negative")));
        }
        for i in 0..n {
            if coupling[i][i] != 0.0 {
                return Err(Error::InvalidGrid(format!("coupling diagonal at bus {i} must be zero")));
            }
            for j in (i + 1)..n {
                if coupling[i][j] != coupling[j][i] {
                    return Err(Error::InvalidGrid(format!(
                        "coupling is asymmetric at ({i}, {j}): {} vs {}",
                        coupling[i][j], coupling[j][i]
                    )));
                }
            }
        }

        let flat: Vec<f64> = coupling.into_iter().flatten().collect();
        let adjacency = derive_adjacency(n, &flat);
        let mut grid = Self {
            n_buses: n,
            inertia,
            damping,
            droop,
            net_injection,
            coupling: flat,
            adjacency,
            edges: Vec::new(),
        };
        grid.edges = grid.collect_edges();
        Ok(grid)
    }

    /// Ten-bus stand-in for the Kron-reduced New England system.
    ///
    /// Bus `i` plays generator `30 + i`. Inertias follow the relative sizes
    /// of the classic machine data, with bus 9 the large equivalent of the
    /// external system. Net injections carry a small aggregate surplus, so
    /// droop control settles at a steady frequency offset, and bus 7 has the
    /// largest droop-to-inertia ratio.
    pub fn ten_bus_default() -> Self {
        let inertia = vec![0.42, 0.30, 0.36, 0.29, 0.26, 0.35, 0.26, 0.24, 0.35, 2.0];
        let damping = vec![0.15, 0.12, 0.14, 0.10, 0.12, 0.14, 0.10, 0.12, 0.13, 1.00];
        let droop = vec![1.0, 0.9, 1.0, 0.8, 0.9, 1.0, 0.8, 1.6, 1.0, 0.4];
        let net_injection = vec![0.06, 0.05, 0.06, 0.04, 0.04, 0.05, 0.04, 0.06, 0.05, 0.05];
        let edges: [(usize, usize, f64); 16] = [
            (0, 1, 1.8),
            (0, 9, 2.4),
            (1, 2, 2.6),
            (1, 5, 1.2),
            (2, 3, 1.4),
            (2, 5, 2.0),
            (3, 4, 2.2),
            (3, 6, 1.1),
            (4, 5, 1.5),
            (5, 6, 1.9),
            (5, 7, 1.3),
            (6, 7, 2.1),
            (7, 8, 1.0),
            (8, 9, 2.8),
            (1, 9, 0.9),
            (4, 6, 1.6),
        ];
        let mut coupling = vec![vec![0.0; 10]; 10];
        for (i, j, b) in edges {
            coupling[i][j] = b;
            coupling[j][i] = b;
        }
        Self::new(inertia, damping, droop, net_injection, coupling)
            .expect("default grid parameters are valid")
    }

    fn collect_edges(&self) -> Vec<(usize, usize, f64)> {
        let n = self.n_buses;
        let mut edges = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                let b = self.coupling[i * n + j];
                if b != 0.0 {
                    edges.push((i, j, b));
                }
            }
        }
        edges
    }

    pub fn n_buses(&self) -> usize {
        self.n_buses
    }

    pub fn inertia(&self) -> &[f64] {
        &self.inertia
    }

    pub fn damping(&self) -> &[f64] {
        &self.damping
    }

    pub fn droop(&self) -> &[f64] {
        &self.droop
    }

    pub fn net_injection(&self) -> &[f64] {
        &self.net_injection
    }

    pub fn coupling(&self, i: usize, j: usize) -> f64 {
        self.coupling[i * self.n_buses + j]
    }

    pub fn adjacency(&self, i: usize, j: usize) -> f64 {
        self.adjacency[i * self.n_buses + j]
    }

    pub fn adjacency_matrix(&self) -> &[f64] {
        &self.adjacency
    }

    /// Copy with a different droop vector; used by ablations and tests.
    pub fn with_droop(&self, droop: Vec<f64>) -> Result<Self> {
        self.rebuild(|g| g.droop = droop)
    }

    /// Copy with different net injections.
    pub fn with_net_injection(&self, p: Vec<f64>) -> Result<Self> {
        self.rebuild(|g| g.net_injection = p)
    }

    fn rebuild(&self, f: impl FnOnce(&mut Self)) -> Result<Self> {
        let mut g = self.clone();
        f(&mut g);
        let n = g.n_buses;
        let coupling = g.coupling.chunks(n).map(|r| r.to_vec()).collect();
        Self::new(g.inertia, g.damping, g.droop, g.net_injection, coupling)
    }

    /// Swing-equation energy: kinetic plus coupling potential,
    /// `1/2 sum M_i w_i^2 + sum_{i<j} B_ij (1 - cos(theta_i - theta_j))`.
    pub fn energy(&self, state: &SystemState) -> f64 {
        let kinetic: f64 = self
            .inertia
            .iter()
            .zip(&state.omega)
            .map(|(m, w)| 0.5 * m * w * w)
            .sum();
        let potential: f64 = self
            .edges
            .iter()
            .map(|&(i, j, b)| b * (1.0 - (state.theta[i] - state.theta[j]).cos()))
            .sum();
        kinetic + potential
    }

    /// Parses the text grid-config format written by [`GridModel::to_config_string`].
    pub fn parse_config(text: &str) -> Result<Self> {
        let mut n_buses: Option<usize> = None;
        let mut format_seen = false;
        let mut vectors: [Option<Vec<f64>>; 4] = [None, None, None, None];
        let mut coupling: Option<Vec<Vec<f64>>> = None;
        let mut lines = text.lines().enumerate().peekable();

        let parse_row = |line_no: usize, s: &str| -> Result<Vec<f64>> {
            s.split_whitespace()
                .map(|tok| {
                    tok.parse::<f64>().map_err(|e| Error::Parse {
                        line: line_no + 1,
                        msg: format!("bad number {tok:?}: {e}"),
                    })
                })
                .collect()
        };

        while let Some((line_no, raw)) = lines.next() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: line_no + 1,
                msg: format!("expected `key = value`, got {line:?}"),
            })?;
            let key = key.trim();
            let value = value.trim();
            match key {
                "format" => {
                    if value != GRID_FORMAT {
                        return Err(Error::Format(format!("not a grid config: format = {value}")));
                    }
                    format_seen = true;
                }
                "version" => {
                    let v: u32 = value.parse().map_err(|_| Error::Parse {
                        line: line_no + 1,
                        msg: format!("bad version {value:?}"),
                    })?;
                    if v != GRID_VERSION {
                        return Err(Error::Version { found: v, expected: GRID_VERSION });
                    }
                }
                "n_buses" => {
                    n_buses = Some(value.parse().map_err(|_| Error::Parse {
                        line: line_no + 1,
                        msg: format!("bad n_buses {value:?}"),
                    })?);
                }
                "M" | "D" | "k" | "p" => {
                    let slot = match key {
                        "M" => 0,
                        "D" => 1,
                        "k" => 2,
                        _ => 3,
                    };
                    vectors[slot] = Some(parse_row(line_no, value)?);
                }
                "B" => {
                    let n = n_buses.ok_or_else(|| Error::Parse {
                        line: line_no + 1,
                        msg: "n_buses must precede the B block".into(),
                    })?;
                    let mut rows = Vec::with_capacity(n);
                    if !value.is_empty() {
                        rows.push(parse_row(line_no, value)?);
                    }
                    while rows.len() < n {
                        let (row_no, row) = lines.next().ok_or_else(|| Error::Parse {
                            line: line_no + 1,
                            msg: format!("B block ended after {} of {n} rows", rows.len()),
                        })?;
                        let row = row.split('#').next().unwrap_or("").trim();
                        if row.is_empty() {
                            continue;
                        }
                        rows.push(parse_row(row_no, row)?);
                    }
                    coupling = Some(rows);
                }
                other => {
                    return Err(Error::Parse {
                        line: line_no + 1,
                        msg: format!("unknown key {other:?}"),
                    })
                }
            }
        }

        if !format_seen {
            return Err(Error::Format("missing `format = fdia-grid` header".into()));
        }
        let n = n_buses.ok_or_else(|| Error::Parse { line: 0, msg: "missing n_buses".into() })?;
        let [m, d, k, p] = vectors;
        let missing = |name: &str| Error::Parse { line: 0, msg: format!("missing {name}") };
        let m = m.ok_or_else(|| missing("M"))?;
        if m.len() != n {
            return Err(Error::InvalidGrid(format!("M has {} entries, n_buses = {n}", m.len())));
        }
        Self::new(
            m,
            d.ok_or_else(|| missing("D"))?,
            k.ok_or_else(|| missing("k"))?,
            p.ok_or_else(|| missing("p"))?,
            coupling.ok_or_else(|| missing("B"))?,
        )
    }

    pub fn load_config(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse_config(&std::fs::read_to_string(path)?)
    }

    pub fn to_config_string(&self) -> String {
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ");
        let mut out = String::new();
        let _ = writeln!(out, "format = {GRID_FORMAT}");
        let _ = writeln!(out, "version = {GRID_VERSION}");
        let _ = writeln!(out, "n_buses = {}", self.n_buses);
        let _ = writeln!(out, "M = {}", join(&self.inertia));
        let _ = writeln!(out, "D = {}", join(&self.damping));
        let _ = writeln!(out, "k = {}", join(&self.droop));
        let _ = writeln!(out, "p = {}", join(&self.net_injection));
        let _ = writeln!(out, "B =");
        for row in self.coupling.chunks(self.n_buses) {
            let _ = writeln!(out, "  {}", join(row));
        }
        out
    }

    pub fn save_config(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_config_string())?;
        Ok(())
    }
}

fn derive_adjacency(n: usize, coupling: &[f64]) -> Vec<f64> {
    let mut w = vec![0.0; n * n];
    for i in 0..n {
        let row = &coupling[i * n..(i + 1) * n];
        let max = row.iter().fold(0.0f64, |acc, b| acc.max(b.abs()));
        if max > 0.0 {
            for j in 0..n {
                w[i * n + j] = row[j].abs() / max;
            }
        }
    }
    w
}

/// Phase angles and frequency deviations of every bus at one instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemState {
    pub theta: Vec<f64>,
    pub omega: Vec<f64>,
    pub time: f64,
}

impl SystemState {
    pub fn new(theta: Vec<f64>, omega: Vec<f64>, time: f64) -> Result<Self> {
        if theta.len() != omega.len() {
            return Err(Error::Dimension {
                what: "omega length",
                expected: theta.len(),
                got: omega.len(),
            });
        }
        Ok(Self { theta, omega, time })
    }

    pub fn zeros(n: usize) -> Self {
        Self { theta: vec![0.0; n], omega: vec![0.0; n], time: 0.0 }
    }

    pub fn n_buses(&self) -> usize {
        self.theta.len()
    }

    pub fn is_finite(&self) -> bool {
        self.theta.iter().chain(&self.omega).all(|x| x.is_finite())
    }

    /// Feature vector `theta_0..theta_{n-1}, omega_0..omega_{n-1}`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(2 * self.theta.len());
        v.extend_from_slice(&self.theta);
        v.extend_from_slice(&self.omega);
        v
    }

    pub fn from_flat(flat: &[f64], time: f64) -> Result<Self> {
        if flat.len() % 2 != 0 {
            return Err(Error::Dimension { what: "flat state", expected: flat.len() + 1, got: flat.len() });
        }
        let n = flat.len() / 2;
        Ok(Self { theta: flat[..n].to_vec(), omega: flat[n..].to_vec(), time })
    }

    fn check(&self, grid: &GridModel) -> Result<()> {
        let n = grid.n_buses();
        if self.theta.len() != n {
            return Err(Error::Dimension { what: "theta length", expected: n, got: self.theta.len() });
        }
        if self.omega.len() != n {
            return Err(Error::Dimension { what: "omega length", expected: n, got: self.omega.len() });
        }
        Ok(())
    }
}

/// Per-timestep droop tampering. A flag at `(t, i)` replaces `k_i` with
/// `attack_value` for the integration step that produces state `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSchedule {
    tampered: BTreeSet<(usize, usize)>,
    attack_value: f64,
}

impl Default for AttackSchedule {
    fn default() -> Self {
        Self::new()
    }
}

impl AttackSchedule {
    pub fn new() -> Self {
        Self { tampered: BTreeSet::new(), attack_value: ATTACK_DROOP }
    }

    pub fn with_attack_value(mut self, value: f64) -> Self {
        self.attack_value = value;
        self
    }

    /// Tamper `bus` on every step in `steps`.
    pub fn on_bus(bus: usize, steps: impl IntoIterator<Item = usize>) -> Self {
        let mut s = Self::new();
        for t in steps {
            s.tamper(t, bus);
        }
        s
    }

    pub fn tamper(&mut self, timestep: usize, bus: usize) {
        self.tampered.insert((timestep, bus));
    }

    pub fn is_tampered(&self, timestep: usize, bus: usize) -> bool {
        self.tampered.contains(&(timestep, bus))
    }

    pub fn is_empty(&self) -> bool {
        self.tampered.is_empty()
    }

    pub fn len(&self) -> usize {
        self.tampered.len()
    }

    pub fn attack_value(&self) -> f64 {
        self.attack_value
    }

    pub fn entries(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.tampered.iter().copied()
    }

    /// Effective droop vector for the step producing state `timestep`.
    pub fn effective_droop(&self, grid: &GridModel, timestep: usize, out: &mut Vec<f64>) {
        out.clear();
        out.extend_from_slice(grid.droop());
        for &(_, bus) in self.tampered.range((timestep, 0)..(timestep + 1, 0)) {
            out[bus] = self.attack_value;
        }
    }

    fn validate(&self, n_buses: usize, steps: usize) -> Result<()> {
        for &(t, bus) in &self.tampered {
            if bus >= n_buses {
                return Err(Error::InvalidArgument(format!("tampered bus {bus} out of range 0..{n_buses}")));
            }
            if t >= steps {
                return Err(Error::InvalidArgument(format!("tampered timestep {t} beyond episode length {steps}")));
            }
        }
        Ok(())
    }

    /// SHA-256 over the attack value and sorted flags.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.attack_value.to_le_bytes());
        for &(t, bus) in &self.tampered {
            h.update((t as u64).to_le_bytes());
            h.update((bus as u64).to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Integrator {
    #[default]
    Rk4,
    /// Forward Euler, kept for ablations.
    Euler,
}

/// A simulated trajectory of `states.len()` states `dt` apart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub states: Vec<SystemState>,
    pub dt: f64,
    pub schedule: Option<AttackSchedule>,
    pub seed: u64,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn n_buses(&self) -> usize {
        self.states.first().map_or(0, SystemState::n_buses)
    }

    pub fn to_csv_string(&self) -> String {
        let n = self.n_buses();
        let mut out = String::from("t");
        for i in 0..n {
            let _ = write!(out, ",theta_{i}");
        }
        for i in 0..n {
            let _ = write!(out, ",omega_{i}");
        }
        out.push('\n');
        for s in &self.states {
            let _ = write!(out, "{:?}", s.time);
            for x in s.theta.iter().chain(&s.omega) {
                let _ = write!(out, ",{x:?}");
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(self.to_csv_string().as_bytes())?;
        f.flush()?;
        Ok(())
    }

    /// Parses a CSV written by [`Episode::write_csv`]; schedule and seed are not stored there.
    pub fn from_csv_str(text: &str, dt: f64) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Format("empty episode CSV".into()))?;
        let cols = header.split(',').count();
        if cols < 3 || (cols - 1) % 2 != 0 || !header.starts_with("t,theta_0") {
            return Err(Error::Format(format!("bad episode CSV header {header:?}")));
        }
        let n = (cols - 1) / 2;
        let mut states = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .split(',')
                .map(|x| x.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse { line: i + 2, msg: e.to_string() })?;
            if vals.len() != cols {
                return Err(Error::Parse { line: i + 2, msg: format!("expected {cols} columns") });
            }
            states.push(SystemState {
                theta: vals[1..=n].to_vec(),
                omega: vals[n + 1..].to_vec(),
                time: vals[0],
            });
        }
        Ok(Self { states, dt, schedule: None, seed: 0 })
    }
}

/// Generator droop response `k * omega`.
#[inline]
pub fn droop_power(k: f64, omega: f64) -> f64 {
    k * omega
}

/// Electrical power leaving each bus through the lossless coupling.
pub fn electrical_power(state: &SystemState, grid: &GridModel) -> Result<Vec<f64>> {
    state.check(grid)?;
    let mut pe = vec![0.0; grid.n_buses()];
    electrical_power_into(&state.theta, grid, &mut pe);
    Ok(pe)
}

fn electrical_power_into(theta: &[f64], grid: &GridModel, pe: &mut [f64]) {
    pe.iter_mut().for_each(|x| *x = 0.0);
    for &(i, j, b) in &grid.edges {
        let flow = b * (theta[i] - theta[j]).sin();
        pe[i] += flow;
        pe[j] -= flow;
    }
}

/// Time derivative `(dtheta/dt, domega/dt)` under the given effective droop.
pub fn swing_rhs(state: &SystemState, grid: &GridModel, droop: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    state.check(grid)?;
    if droop.len() != grid.n_buses() {
        return Err(Error::Dimension { what: "droop length", expected: grid.n_buses(), got: droop.len() });
    }
    let n = grid.n_buses();
    let mut dtheta = vec![0.0; n];
    let mut domega = vec![0.0; n];
    let mut pe = vec![0.0; n];
    rhs_into(&state.theta, &state.omega, grid, droop, &mut pe, &mut dtheta, &mut domega);
    if let Some(bus) = domega.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFiniteDerivative { bus });
    }
    Ok((dtheta, domega))
}

#[inline]
fn rhs_into(
    theta: &[f64],
    omega: &[f64],
    grid: &GridModel,
    droop: &[f64],
    pe: &mut [f64],
    dtheta: &mut [f64],
    domega: &mut [f64],
) {
    electrical_power_into(theta, grid, pe);
    dtheta.copy_from_slice(omega);
    for i in 0..grid.n_buses {
        let w = omega[i];
        domega[i] = (grid.net_injection[i] - pe[i] - grid.damping[i] * w - droop_power(droop[i], w))
            / grid.inertia[i];
    }
}

/// Reusable buffers so long simulations do not allocate per step.
struct Workspace {
    droop: Vec<f64>,
    pe: Vec<f64>,
    k: [Vec<f64>; 8],
    th: Vec<f64>,
    om: Vec<f64>,
}

impl Workspace {
    fn new(n: usize) -> Self {
        Self {
            droop: Vec::with_capacity(n),
            pe: vec![0.0; n],
            k: std::array::from_fn(|_| vec![0.0; n]),
            th: vec![0.0; n],
            om: vec![0.0; n],
        }
    }

    fn advance(&mut self, state: &mut SystemState, grid: &GridModel, dt: f64, integrator: Integrator) {
        let n = grid.n_buses;
        let Self { droop, pe, k, th, om } = self;
        let [k1t, k1w, k2t, k2w, k3t, k3w, k4t, k4w] = k;
        match integrator {
            Integrator::Euler => {
                rhs_into(&state.theta, &state.omega, grid, droop, pe, k1t, k1w);
                for i in 0..n {
                    state.theta[i] += dt * k1t[i];
                    state.omega[i] += dt * k1w[i];
                }
            }
            Integrator::Rk4 => {
                rhs_into(&state.theta, &state.omega, grid, droop, pe, k1t, k1w);
                for i in 0..n {
                    th[i] = state.theta[i] + 0.5 * dt * k1t[i];
                    om[i] = state.omega[i] + 0.5 * dt * k1w[i];
                }
                rhs_into(th, om, grid, droop, pe, k2t, k2w);
                for i in 0..n {
                    th[i] = state.theta[i] + 0.5 * dt * k2t[i];
                    om[i] = state.omega[i] + 0.5 * dt * k2w[i];
                }
                rhs_into(th, om, grid, droop, pe, k3t, k3w);
                for i in 0..n {
                    th[i] = state.theta[i] + dt * k3t[i];
                    om[i] = state.omega[i] + dt * k3w[i];
                }
                rhs_into(th, om, grid, droop, pe, k4t, k4w);
                let h6 = dt / 6.0;
                for i in 0..n {
                    state.theta[i] += h6 * (k1t[i] + 2.0 * k2t[i] + 2.0 * k3t[i] + k4t[i]);
                    state.omega[i] += h6 * (k1w[i] + 2.0 * k2w[i] + 2.0 * k3w[i] + k4w[i]);
                }
            }
        }
        state.time += dt;
    }
}

/// Advances `state` by `dt`, producing state index `timestep` with droop
/// overridden wherever `schedule` flags `(timestep, bus)`.
pub fn step(
    state: &SystemState,
    grid: &GridModel,
    schedule: &AttackSchedule,
    timestep: usize,
    dt: f64,
) -> Result<SystemState> {
    step_with(state, grid, schedule, timestep, dt, Integrator::Rk4)
}

pub fn step_with(
    state: &SystemState,
    grid: &GridModel,
    schedule: &AttackSchedule,
    timestep: usize,
    dt: f64,
    integrator: Integrator,
) -> Result<SystemState> {
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
    }
    state.check(grid)?;
    let mut ws = Workspace::new(grid.n_buses());
    schedule.effective_droop(grid, timestep, &mut ws.droop);
    let mut next = state.clone();
    ws.advance(&mut next, grid, dt, integrator);
    if !next.is_finite() {
        return Err(Error::Divergence { timestep });
    }
    Ok(next)
}

/// Simulates `steps` states starting from `init` (which is `states[0]`).
/// Simulation is deterministic; `seed` is recorded for provenance.
pub fn simulate_episode(
    init: &SystemState,
    grid: &GridModel,
    schedule: &AttackSchedule,
    steps: usize,
    dt: f64,
    seed: u64,
) -> Result<Episode> {
    simulate_episode_with(init, grid, schedule, steps, dt, seed, Integrator::Rk4)
}

pub fn simulate_episode_with(
    init: &SystemState,
    grid: &GridModel,
    schedule: &AttackSchedule,
    steps: usize,
    dt: f64,
    seed: u64,
    integrator: Integrator,
) -> Result<Episode> {
    if steps < 1 {
        return Err(Error::InvalidArgument("episode needs at least one state".into()));
    }
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
    }
    init.check(grid)?;
    if !init.is_finite() {
        return Err(Error::Divergence { timestep: 0 });
    }
    schedule.validate(grid.n_buses(), steps)?;

    let mut ws = Workspace::new(grid.n_buses());
    let mut states = Vec::with_capacity(steps);
    states.push(init.clone());
    let mut current = init.clone();
    for t in 1..steps {
        schedule.effective_droop(grid, t, &mut ws.droop);
        ws.advance(&mut current, grid, dt, integrator);
        if !current.is_finite() {
            return Err(Error::Divergence { timestep: t });
        }
        states.push(current.clone());
    }
    Ok(Episode {
        states,
        dt,
        schedule: (!schedule.is_empty()).then(|| schedule.clone()),
        seed,
    })
}

/// Simulates states `0..=last` and returns only the flattened states with
/// indices in `from..=last`. Cheaper than [`simulate_episode`] when only a
/// short window at the end is needed.
pub(crate) fn simulate_tail(
    init: &SystemState,
    grid: &GridModel,
    schedule: &AttackSchedule,
    from: usize,
    last: usize,
    dt: f64,
) -> Result<Vec<Vec<f64>>> {
    let mut ws = Workspace::new(grid.n_buses());
    let mut current = init.clone();
    let mut out = Vec::with_capacity(last + 1 - from);
    if from == 0 {
        out.push(current.flatten());
    }
    for t in 1..=last {
        schedule.effective_droop(grid, t, &mut ws.droop);
        ws.advance(&mut current, grid, dt, Integrator::Rk4);
        if !current.is_finite() {
            return Err(Error::Divergence { timestep: t });
        }
        if t >= from {
            out.push(current.flatten());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_bus(m: f64, d: f64, k: f64) -> GridModel {
        GridModel::new(vec![m], vec![d], vec![k], vec![0.0], vec![vec![0.0]]).unwrap()
    }

    #[test]
    fn droop_rule() {
        assert_eq!(droop_power(2.0, 0.0), 0.0);
        assert_eq!(droop_power(1.0, 0.5), 0.5);
        assert_eq!(droop_power(-1.0, 0.5), -0.5);
    }

    #[test]
    fn electrical_power_cases() {
        let grid = GridModel::ten_bus_default();
        let uniform = SystemState::new(vec![0.2; 10], vec![0.0; 10], 0.0).unwrap();
        assert!(electrical_power(&uniform, &grid).unwrap().iter().all(|&x| x == 0.0));

        let two = GridModel::new(
            vec![1.0, 1.0],
            vec![0.0, 0.0],
            vec![1.0, 1.0],
            vec![0.0, 0.0],
            vec![vec![0.0, 1.0], vec![1.0, 0.0]],
        )
        .unwrap();
        let s = SystemState::new(vec![std::f64::consts::FRAC_PI_2, 0.0], vec![0.0, 0.0], 0.0).unwrap();
        let pe = electrical_power(&s, &two).unwrap();
        assert!((pe[0] - 1.0).abs() < 1e-15 && (pe[1] + 1.0).abs() < 1e-15);

        let decoupled = GridModel::new(
            vec![1.0, 1.0],
            vec![0.0, 0.0],
            vec![1.0, 1.0],
            vec![0.0, 0.0],
            vec![vec![0.0; 2]; 2],
        )
        .unwrap();
        assert_eq!(electrical_power(&s, &decoupled).unwrap(), vec![0.0, 0.0]);

        let wrong = SystemState::zeros(3);
        assert!(matches!(electrical_power(&wrong, &two), Err(Error::Dimension { .. })));
    }

    #[test]
    fn rhs_cases() {
        let grid = GridModel::ten_bus_default().with_net_injection(vec![0.0; 10]).unwrap();
        let eq = SystemState::new(vec![0.1; 10], vec![0.0; 10], 0.0).unwrap();
        let (dt, dw) = swing_rhs(&eq, &grid, grid.droop()).unwrap();
        assert!(dt.iter().chain(&dw).all(|&x| x == 0.0));

        let bus = single_bus(1.0, 0.5, 0.5);
        let s = SystemState::new(vec![0.0], vec![1.0], 0.0).unwrap();
        let (_, dw) = swing_rhs(&s, &bus, &[0.5]).unwrap();
        assert_eq!(dw[0], -1.0);
        let (_, dw) = swing_rhs(&s, &bus, &[-1.0]).unwrap();
        assert_eq!(dw[0], 0.5);
    }

    #[test]
    fn rhs_non_finite_is_reported() {
        let bus = single_bus(1.0, 0.5, 0.5);
        let s = SystemState::new(vec![0.0], vec![f64::MAX], 0.0).unwrap();
        assert!(matches!(swing_rhs(&s, &bus, &[f64::MAX]), Err(Error::NonFiniteDerivative { bus: 0 })));
    }

    #[test]
    fn step_on_decoupled_bus_matches_exponential() {
        let bus = single_bus(1.0, 0.4, 0.6);
        let s0 = SystemState::new(vec![0.0], vec![0.3], 0.0).unwrap();
        let s1 = step(&s0, &bus, &AttackSchedule::new(), 1, 0.01).unwrap();
        assert!((s1.omega[0] - 0.3 * (-0.01f64).exp()).abs() < 1e-9);
        assert!((s1.time - 0.01).abs() < 1e-15);

        let ep = simulate_episode(&s0, &bus, &AttackSchedule::new(), 501, 0.01, 0).unwrap();
        let last = ep.states.last().unwrap();
        let exact = 0.3 * (-5.0f64).exp();
        assert!(((last.omega[0] - exact) / exact).abs() < 1e-6);
    }

    #[test]
    fn equilibrium_is_a_fixed_point() {
        let grid = GridModel::ten_bus_default().with_net_injection(vec![0.0; 10]).unwrap();
        let eq = SystemState::zeros(10);
        let next = step(&eq, &grid, &AttackSchedule::new(), 1, DT).unwrap();
        assert_eq!(next.theta, eq.theta);
        assert_eq!(next.omega, eq.omega);
        assert!(next.time > 0.0);

        let ep = simulate_episode(&eq, &grid, &AttackSchedule::new(), 50, DT, 1).unwrap();
        assert!(ep.states.iter().all(|s| s.theta == eq.theta && s.omega == eq.omega));
    }

    #[test]
    fn step_rejects_bad_dt() {
        let bus = single_bus(1.0, 0.5, 0.5);
        assert!(step(&SystemState::zeros(1), &bus, &AttackSchedule::new(), 1, 0.0).is_err());
    }

    #[test]
    fn divergence_reports_timestep() {
        let bus = single_bus(1e-6, 0.0, 0.0).with_droop(vec![-1e6]).unwrap();
        let s0 = SystemState::new(vec![0.0], vec![1.0], 0.0).unwrap();
        match simulate_episode(&s0, &bus, &AttackSchedule::new(), 500, 0.01, 0) {
            Err(Error::Divergence { timestep }) => assert!(timestep > 0),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn bus7_tampering_changes_trajectory() {
        let grid = GridModel::ten_bus_default();
        let init = SystemState::new(vec![0.01; 10], vec![0.1; 10], 0.0).unwrap();
        let clean = simulate_episode(&init, &grid, &AttackSchedule::new(), EPISODE_STEPS, DT, 3).unwrap();
        let attacked =
            simulate_episode(&init, &grid, &AttackSchedule::on_bus(7, 0..EPISODE_STEPS), EPISODE_STEPS, DT, 3)
                .unwrap();
        let gap = clean
            .states
            .iter()
            .zip(&attacked.states)
            .flat_map(|(a, b)| a.omega.iter().zip(&b.omega).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max);
        assert!(gap > 0.0);
        assert_eq!(attacked.states[0], init);
    }

    #[test]
    fn schedule_validation() {
        let grid = GridModel::ten_bus_default();
        let init = SystemState::zeros(10);
        assert!(simulate_episode(&init, &grid, &AttackSchedule::on_bus(10, [1]), 10, DT, 0).is_err());
        assert!(simulate_episode(&init, &grid, &AttackSchedule::on_bus(1, [10]), 10, DT, 0).is_err());
        assert!(simulate_episode(&init, &grid, &AttackSchedule::new(), 0, DT, 0).is_err());
    }

    #[test]
    fn effective_droop_only_on_flagged_step() {
        let grid = GridModel::ten_bus_default();
        let mut s = AttackSchedule::new();
        s.tamper(4, 7);
        s.tamper(5, 2);
        let mut k = Vec::new();
        s.effective_droop(&grid, 4, &mut k);
        assert_eq!(k[7], -1.0);
        assert_eq!(k[2], grid.droop()[2]);
        s.effective_droop(&grid, 3, &mut k);
        assert_eq!(k, grid.droop());
    }

    #[test]
    fn adjacency_follows_coupling() {
        let grid = GridModel::ten_bus_default();
        for i in 0..10 {
            let row_max = (0..10).map(|j| grid.adjacency(i, j)).fold(0.0, f64::max);
            assert!((row_max - 1.0).abs() < 1e-15);
            for j in 0..10 {
                assert_eq!(grid.adjacency(i, j) > 0.0, grid.coupling(i, j) != 0.0);
            }
        }
    }

    #[test]
    fn config_round_trip_and_rejections() {
        let grid = GridModel::ten_bus_default();
        let text = grid.to_config_string();
        assert_eq!(GridModel::parse_config(&text).unwrap(), grid);

        let asym = text.replacen("B =\n  0.0 1.8", "B =\n  0.0 1.9", 1);
        assert!(matches!(GridModel::parse_config(&asym), Err(Error::InvalidGrid(_))));
        assert!(matches!(GridModel::parse_config("n_buses = 2"), Err(Error::Format(_))));
        let bad_version = text.replace("version = 1", "version = 7");
        assert!(matches!(GridModel::parse_config(&bad_version), Err(Error::Version { found: 7, .. })));
    }

    #[test]
    fn csv_header_and_round_trip() {
        let grid = GridModel::ten_bus_default();
        let init = SystemState::new(vec![0.01; 10], vec![0.2; 10], 0.0).unwrap();
        let ep = simulate_episode(&init, &grid, &AttackSchedule::new(), 20, DT, 0).unwrap();
        let csv = ep.to_csv_string();
        let header = csv.lines().next().unwrap();
        let expected: Vec<String> = std::iter::once("t".to_string())
            .chain((0..10).map(|i| format!("theta_{i}")))
            .chain((0..10).map(|i| format!("omega_{i}")))
            .collect();
        assert_eq!(header, expected.join(","));
        let back = Episode::from_csv_str(&csv, DT).unwrap();
        assert_eq!(back.states, ep.states);
    }

    #[test]
    fn schedule_digest_is_order_independent() {
        let mut a = AttackSchedule::new();
        a.tamper(3, 7);
        a.tamper(1, 7);
        let b = AttackSchedule::on_bus(7, [1, 3]);
        assert_eq!(a.digest(), b.digest());
        assert_ne!(a.digest(), AttackSchedule::new().digest());
    }
}
