//! Python module `fdia`: grid simulation, predictor training, attack
//! detection and the experiment tables.

use std::path::PathBuf;

use fdia_core::dataset::{generate_dataset, GenerationSpec};
use fdia_core::detect::{
    build_detection_dataset, train_binary_detector, train_test_split, window_errors, AttackPattern, Confusion, DeployMode,
    DetectionSpec, DetectorHyperparams, DetectorModel, ErrorVector,
};
use fdia_core::experiments::{run_table as run_core_table, ExperimentConfig, Runner, Scale, TableId};
use fdia_core::grid::{simulate_episode, AttackSchedule, GridModel as CoreGrid, SystemState, DT, EPISODE_STEPS};
use fdia_core::predictors::{evaluate_predictor, train_predictor, PredictorConfig, PredictorModel};
use fdia_core::Error;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(_) => PyIOError::new_err(e.to_string()),
        Error::Dimension { .. }
        | Error::InvalidGrid(_)
        | Error::InvalidArgument(_)
        | Error::Parse { .. }
        | Error::Format(_)
        | Error::EmptyDataset
        | Error::EpisodeTooShort { .. }
        | Error::TooFewClasses { .. }
        | Error::ModelMismatch { .. } => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

trait OrPyErr<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPyErr<T> for fdia_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

/// Network parameters; `Grid()` is the ten-bus default.
#[pyclass(module = "fdia", skip_from_py_object)]
#[derive(Clone)]
struct Grid {
    inner: CoreGrid,
}

#[pymethods]
impl Grid {
    #[new]
    fn new() -> Self {
        Self { inner: CoreGrid::ten_bus_default() }
    }

    #[staticmethod]
    fn from_config(text: &str) -> PyResult<Self> {
        Ok(Self { inner: CoreGrid::parse_config(text).py()? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: CoreGrid::load_config(path).py()? })
    }

    fn to_config(&self) -> String {
        self.inner.to_config_string()
    }

    #[getter]
    fn n_buses(&self) -> usize {
        self.inner.n_buses()
    }

    #[getter]
    fn inertia(&self) -> Vec<f64> {
        self.inner.inertia().to_vec()
    }

    #[getter]
    fn damping(&self) -> Vec<f64> {
        self.inner.damping().to_vec()
    }

    #[getter]
    fn droop(&self) -> Vec<f64> {
        self.inner.droop().to_vec()
    }

    fn with_droop(&self, droop: Vec<f64>) -> PyResult<Self> {
        Ok(Self { inner: self.inner.with_droop(droop).py()? })
    }

    /// Swing-system energy of a state.
    fn energy(&self, theta: Vec<f64>, omega: Vec<f64>) -> PyResult<f64> {
        Ok(self.inner.energy(&SystemState::new(theta, omega, 0.0).py()?))
    }

    fn __repr__(&self) -> String {
        format!("Grid(n_buses={})", self.inner.n_buses())
    }
}

/// Integrates one episode and returns its states as rows
/// `[theta_0.., omega_0..]`. With `attack_bus`, the integration steps
/// producing `attack_steps` (default: all) run with that bus's droop at -1.
#[pyfunction]
#[pyo3(signature = (grid, theta, omega, steps = EPISODE_STEPS, dt = DT, attack_bus = None, attack_steps = None))]
fn simulate(
    grid: &Grid,
    theta: Vec<f64>,
    omega: Vec<f64>,
    steps: usize,
    dt: f64,
    attack_bus: Option<usize>,
    attack_steps: Option<Vec<usize>>,
) -> PyResult<Vec<Vec<f64>>> {
    let init = SystemState::new(theta, omega, 0.0).py()?;
    let schedule = match (attack_bus, attack_steps) {
        (Some(b), Some(s)) => AttackSchedule::on_bus(b, s),
        (Some(b), None) => AttackSchedule::on_bus(b, 1..steps),
        (None, Some(_)) => return Err(PyValueError::new_err("attack_steps needs attack_bus")),
        (None, None) => AttackSchedule::new(),
    };
    let ep = simulate_episode(&init, &grid.inner, &schedule, steps, dt, 0).py()?;
    Ok(ep.states.iter().map(SystemState::flatten).collect())
}

/// Windowed prediction dataset: `(observations, targets)` where each
/// observation is a flattened `n_p x n_f` block.
#[pyfunction]
#[pyo3(signature = (grid, episodes, sigma = 0.0, stride = 1, seed = 0))]
fn dataset(grid: &Grid, episodes: usize, sigma: f64, stride: usize, seed: u64) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let spec = GenerationSpec { episodes, sigma, window_stride: stride, seed, ..Default::default() };
    let ds = generate_dataset(&grid.inner, &spec).py()?;
    Ok(ds.samples.into_iter().map(|s| (s.observation, s.target)).unzip())
}

#[pyclass(module = "fdia")]
struct Predictor {
    inner: PredictorModel,
}

#[pymethods]
impl Predictor {
    /// Trains an LSTM autoencoder (`kind="lstm"`) or graph front end
    /// (`kind="gnn"`) on freshly simulated episodes.
    #[staticmethod]
    #[pyo3(signature = (grid, kind = "lstm", units = 25, episodes = 100, epochs = 25, sigma = 0.0, stride = 1, seed = 0, aggregation = "mean", update = "concat"))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        grid: &Grid,
        kind: &str,
        units: usize,
        episodes: usize,
        epochs: usize,
        sigma: f64,
        stride: usize,
        seed: u64,
        aggregation: &str,
        update: &str,
    ) -> PyResult<Self> {
        let cfg = match kind {
            "lstm" => PredictorConfig::lstm_ae(units),
            "gnn" => PredictorConfig::gnn_lstm(units, aggregation.parse().py()?, update.parse().py()?),
            other => return Err(PyValueError::new_err(format!("unknown predictor kind {other:?}"))),
        }
        .with_epochs(epochs)
        .with_seed(seed);
        let spec = GenerationSpec { episodes, sigma, window_stride: stride, seed, ..Default::default() };
        let ds = generate_dataset(&grid.inner, &spec).py()?;
        Ok(Self { inner: train_predictor(&cfg, &ds, &grid.inner).py()? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: PredictorModel::load(path).py()? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).py()
    }

    fn predict(&self, observation: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.predict(&observation).py()
    }

    /// MAE and MRE of theta and omega on fresh episodes.
    #[pyo3(signature = (grid, episodes = 20, sigma = 0.0, seed = 99))]
    fn evaluate(&self, grid: &Grid, episodes: usize, sigma: f64, seed: u64) -> PyResult<(f64, f64, f64, f64)> {
        let spec = GenerationSpec { episodes, sigma, seed, ..Default::default() };
        let ds = generate_dataset(&grid.inner, &spec).py()?;
        let m = evaluate_predictor(&self.inner, &ds.samples).py()?;
        Ok((m.mae_theta, m.mre_theta, m.mae_omega, m.mre_omega))
    }

    #[getter]
    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }

    /// Per-epoch `(train_loss, validation_loss)`.
    #[getter]
    fn history(&self) -> Vec<(f64, Option<f64>)> {
        self.inner.history.epochs.iter().map(|e| (e.train_loss, e.val_loss)).collect()
    }
}

#[pyclass(module = "fdia")]
struct Detector {
    inner: DetectorModel,
    #[pyo3(get)]
    test_accuracy: f64,
    #[pyo3(get)]
    test_f1: f64,
}

#[pymethods]
impl Detector {
    /// Builds seeded benign/attacked windows on `bus`, trains a binary
    /// classifier on 80% of their prediction errors and scores the rest.
    #[staticmethod]
    #[pyo3(signature = (predictor, grid, mode = "sliding", n_benign = 1000, n_adversarial = 1000, bus = 7, m = None, sigma = 0.0, epochs = 40, seed = 0))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        predictor: &Predictor,
        grid: &Grid,
        mode: &str,
        n_benign: usize,
        n_adversarial: usize,
        bus: usize,
        m: Option<usize>,
        sigma: f64,
        epochs: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let mode: DeployMode = mode.parse().py()?;
        let mut spec = DetectionSpec::new(mode, n_benign, n_adversarial, seed);
        spec.buses = vec![bus];
        spec.sigma = sigma;
        if let Some(m) = m {
            spec.pattern = AttackPattern::Fixed(m);
        }
        let windows = build_detection_dataset(&grid.inner, &spec).py()?;
        let errors = window_errors(&predictor.inner, &windows).py()?;
        let (tr, te) = train_test_split(windows.len(), 0.8, seed);
        let mut hp = DetectorHyperparams::published(&predictor.inner.config).with_seed(seed);
        hp.epochs = epochs;
        let pick = |idx: &[usize]| -> (Vec<ErrorVector>, Vec<bool>) {
            (idx.iter().map(|&i| errors[i].clone()).collect(), idx.iter().map(|&i| windows[i].adversarial).collect())
        };
        let (e_tr, l_tr) = pick(&tr);
        let (e_te, l_te) = pick(&te);
        let inner = train_binary_detector(&e_tr, &l_tr, &hp, &predictor.inner.fingerprint()).py()?;
        let pred: Vec<bool> = inner.classify(&e_te).py()?.into_iter().map(|c| c == 1).collect();
        let met = Confusion::from_labels(&pred, &l_te).metrics();
        Ok(Self { inner, test_accuracy: met.accuracy, test_f1: met.f1 })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: DetectorModel::load(path).py()?, test_accuracy: f64::NAN, test_f1: f64::NAN })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).py()
    }

    /// Attack probability for each squared-error vector.
    fn score(&self, errors: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        let e: Vec<ErrorVector> = errors.into_iter().map(ErrorVector).collect();
        self.inner.outputs(&e).py()
    }

    /// Scores the prediction error of `observation` against the observed
    /// `inference` state; the predictor must be the one the detector was
    /// trained with.
    fn detect(&self, predictor: &Predictor, observation: Vec<f64>, inference: Vec<f64>) -> PyResult<(bool, f64)> {
        let id = predictor.inner.fingerprint();
        if id != self.inner.predictor_id {
            return Err(py_err(Error::ModelMismatch { expected: self.inner.predictor_id.clone(), got: id }));
        }
        let pred = predictor.inner.predict(&observation).py()?;
        let e = fdia_core::detect::prediction_error(&pred, &inference).py()?;
        let s = self.inner.score(&e).py()?;
        Ok((self.inner.verdict(s) == fdia_core::detect::Verdict::Adversarial, s))
    }
}

/// Runs one experiment table and returns its JSON report as a string.
/// `config` is a JSON object merged over the defaults of its own `scale`.
#[pyfunction]
#[pyo3(signature = (table, out, scale = None, config = None, seed = None))]
fn run_table(py: Python<'_>, table: &str, out: PathBuf, scale: Option<&str>, config: Option<&str>, seed: Option<u64>) -> PyResult<String> {
    let id: TableId = table.parse().py()?;
    let scale: Option<Scale> = scale.map(str::parse).transpose().py()?;
    let mut cfg = match config {
        Some(text) => ExperimentConfig::from_json(text).py()?,
        None => ExperimentConfig::for_scale(scale.unwrap_or(Scale::Desk)),
    };
    if scale.is_some_and(|s| s != cfg.scale) {
        return Err(PyValueError::new_err("scale conflicts with the config's scale"));
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    py.detach(|| -> fdia_core::Result<String> {
        let runner = Runner::new(cfg, &out)?;
        run_core_table(&runner, id)?;
        Ok(std::fs::read_to_string(out.join(format!("{id}.json")))?)
    })
    .py()
}

#[pymodule]
fn fdia(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Grid>()?;
    m.add_class::<Predictor>()?;
    m.add_class::<Detector>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(dataset, m)?)?;
    m.add_function(wrap_pyfunction!(run_table, m)?)?;
    m.add("DT", DT)?;
    m.add("EPISODE_STEPS", EPISODE_STEPS)?;
    Ok(())
}
