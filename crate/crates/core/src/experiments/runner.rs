use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ExperimentConfig;
use crate::dataset::{generate_dataset, GenerationSpec, WindowSample};
use crate::detect::{
    grouped_metrics, train_binary_detector, train_test_split, window_errors, DeployMode, DetectionSpec, DetectionWindow,
    DetectorHyperparams, DetectorModel, ErrorVector, GroupBy, GroupMetrics,
};
use crate::error::Result;
use crate::grid::GridModel;
use crate::predictors::{train_predictor, PredictorConfig, PredictorKind, PredictorModel};
use crate::rng::{derive_seed, rng_from_seed, Stream};

/// A predictor plus where it came from.
#[derive(Debug, Clone)]
pub struct TrainedPredictor {
    pub model: PredictorModel,
    pub data: GenerationSpec,
    /// Wall time of the original training run, also when loaded from cache.
    pub train_seconds: f64,
    pub cached: bool,
    pub path: PathBuf,
}

impl TrainedPredictor {
    pub fn label(&self) -> String {
        match self.model.config.kind {
            PredictorKind::LstmAe => format!("LSTM({})", self.model.config.units),
            PredictorKind::GnnLstm => format!("GNN-LSTM({})", self.model.config.units),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheMeta {
    config: PredictorConfig,
    data: GenerationSpec,
    train_seconds: f64,
}

/// Shared state of one table run: config, grid, output directory.
#[derive(Debug, Clone)]
pub struct Runner {
    pub config: ExperimentConfig,
    pub grid: GridModel,
    pub out_dir: PathBuf,
    pub verbose: bool,
}

impl Runner {
    pub fn new(config: ExperimentConfig, out_dir: impl Into<PathBuf>) -> Result<Self> {
        config.validate()?;
        let grid = match &config.grid {
            Some(p) => GridModel::load_config(p)?,
            None => GridModel::ten_bus_default(),
        };
        let out_dir = out_dir.into();
        std::fs::create_dir_all(out_dir.join("models"))?;
        Ok(Self { config, grid, out_dir, verbose: false })
    }

    pub fn log(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("[fdia] {}", msg.as_ref());
        }
    }

    pub fn generation_spec(&self, episodes: usize, sigma: f64, stride: usize) -> GenerationSpec {
        GenerationSpec { episodes, sigma, window_stride: stride, seed: self.config.seed, ..Default::default() }
    }

    fn cache_path(&self, cfg: &PredictorConfig, data: &GenerationSpec) -> PathBuf {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(cfg).expect("config serializes"));
        h.update(serde_json::to_vec(data).expect("spec serializes"));
        h.update(self.grid.to_config_string().as_bytes());
        let key = hex::encode(&h.finalize()[..8]);
        self.out_dir.join("models").join(format!("{}-{}-{key}.ckpt", cfg.kind, cfg.units))
    }

    /// Loads the matching checkpoint from the output directory or trains
    /// and stores one.
    pub fn predictor(&self, cfg: &PredictorConfig, data: &GenerationSpec) -> Result<TrainedPredictor> {
        let path = self.cache_path(cfg, data);
        let meta_path = path.with_extension("json");
        if path.exists() && meta_path.exists() {
            let meta: CacheMeta = serde_json::from_str(&std::fs::read_to_string(&meta_path)?)?;
            let model = PredictorModel::load(&path)?;
            if meta.config == *cfg && model.config == *cfg {
                self.log(format!("loaded {}", path.display()));
                return Ok(TrainedPredictor { model, data: data.clone(), train_seconds: meta.train_seconds, cached: true, path });
            }
        }
        self.log(format!("training {} {} on {} episodes (sigma {})", cfg.kind, cfg.units, data.episodes, data.sigma));
        let start = Instant::now();
        let ds = generate_dataset(&self.grid, data)?;
        let model = train_predictor(cfg, &ds, &self.grid)?;
        let train_seconds = start.elapsed().as_secs_f64();
        model.save(&path)?;
        let meta = CacheMeta { config: cfg.clone(), data: data.clone(), train_seconds };
        std::fs::write(&meta_path, serde_json::to_string_pretty(&meta)?)?;
        self.log(format!("trained {} {} in {train_seconds:.1} s", cfg.kind, cfg.units));
        Ok(TrainedPredictor { model, data: data.clone(), train_seconds, cached: false, path })
    }

    pub fn predictor_from(&self, job: (PredictorConfig, GenerationSpec)) -> Result<TrainedPredictor> {
        self.predictor(&job.0, &job.1)
    }

    /// Independent trainings run in parallel.
    pub fn predictors(&self, jobs: &[(PredictorConfig, GenerationSpec)]) -> Result<Vec<TrainedPredictor>> {
        jobs.par_iter().map(|(c, d)| self.predictor(c, d)).collect()
    }

    /// Held-out episodes from a separate seed stream, at the given noise.
    pub fn test_windows(&self, sigma: f64) -> Result<Vec<WindowSample>> {
        let p = &self.config.prediction;
        let spec = GenerationSpec {
            episodes: p.test_episodes,
            sigma,
            window_stride: p.test_stride,
            seed: derive_seed(self.config.seed, Stream::Evaluation, 0),
            ..Default::default()
        };
        Ok(generate_dataset(&self.grid, &spec)?.samples)
    }

    /// Predictor and training data shared by the detection tables.
    pub fn detection_job(&self, cfg: PredictorConfig, sigma: f64) -> (PredictorConfig, GenerationSpec) {
        let d = &self.config.detection;
        (cfg.with_epochs(d.predictor_epochs).with_seed(self.config.seed), self.generation_spec(d.predictor_episodes, sigma, d.window_stride))
    }

    /// Binary detection windows of one table; `run` selects an independent
    /// window stream.
    pub fn detection_spec(&self, mode: DeployMode, run: u64) -> DetectionSpec {
        let d = &self.config.detection;
        let mut s = DetectionSpec::new(mode, d.n_benign, d.n_adversarial, derive_seed(self.config.seed, Stream::Window, run));
        s.buses = d.attacked_buses.clone();
        s
    }

    pub fn detector_hyperparams(&self, predictor: &PredictorConfig, seed: u64) -> DetectorHyperparams {
        let mut hp = DetectorHyperparams::published(predictor).with_seed(seed);
        hp.epochs = self.config.detection.detector_epochs;
        hp
    }
}

/// Result of training and testing one binary detector.
#[derive(Debug, Clone)]
pub struct DetectionOutcome {
    pub groups: Vec<GroupMetrics>,
    pub detector: DetectorModel,
    pub seconds: f64,
}

impl DetectionOutcome {
    pub fn accuracy(&self, group: &str) -> Option<f64> {
        self.groups.iter().find(|g| g.group == group).map(|g| g.metrics.accuracy)
    }
}

/// Trains on a seeded split of precomputed error vectors and reports grouped
/// test metrics. With `shuffle_labels = Some(k)` the training labels go through
/// the `k`-th seeded permutation, which leaves a detector with no information
/// about the attack.
#[allow(clippy::too_many_arguments)]
pub fn train_and_evaluate(
    windows: &[DetectionWindow],
    errors: &[ErrorVector],
    hp: &DetectorHyperparams,
    train_fraction: f64,
    split_seed: u64,
    by: GroupBy,
    shuffle_labels: Option<u64>,
    predictor_id: &str,
) -> Result<DetectionOutcome> {
    use rand::seq::SliceRandom;
    let start = Instant::now();
    let (tr, te) = train_test_split(windows.len(), train_fraction, split_seed);
    let e_tr: Vec<ErrorVector> = tr.iter().map(|&i| errors[i].clone()).collect();
    let mut l_tr: Vec<bool> = tr.iter().map(|&i| windows[i].adversarial).collect();
    if let Some(k) = shuffle_labels {
        l_tr.shuffle(&mut rng_from_seed(derive_seed(split_seed, Stream::Label, k)));
    }
    let detector = train_binary_detector(&e_tr, &l_tr, hp, predictor_id)?;
    let e_te: Vec<ErrorVector> = te.iter().map(|&i| errors[i].clone()).collect();
    let w_te: Vec<DetectionWindow> = te.iter().map(|&i| windows[i].clone()).collect();
    let predicted: Vec<bool> = detector.classify(&e_te)?.into_iter().map(|c| c == 1).collect();
    Ok(DetectionOutcome { groups: grouped_metrics(&w_te, &predicted, by), detector, seconds: start.elapsed().as_secs_f64() })
}

/// Error vectors of `windows` under `predictor`.
pub fn errors_for(predictor: &TrainedPredictor, windows: &[DetectionWindow]) -> Result<Vec<ErrorVector>> {
    window_errors(&predictor.model, windows)
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}
