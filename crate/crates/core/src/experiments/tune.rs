//! Detector hyperparameter search on sliding-mode windows.

use serde::{Deserialize, Serialize};

use super::runner::{errors_for, Runner};
use crate::detect::{
    build_detection_dataset, train_binary_detector, train_test_split, DeployMode, DetectorHyperparams, DetectorModel, ErrorVector,
};
use crate::error::Result;
use crate::predictors::PredictorConfig;
use crate::tuning::{importance_report, random_search, write_history, Importance, SearchResult, SearchSpace};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TuneReport {
    pub predictor: String,
    pub trials: usize,
    pub best_hidden: Vec<usize>,
    pub best_lr: f64,
    pub best_validation_loss: f64,
    pub best_test_accuracy: f64,
    pub published_test_accuracy: f64,
    pub importance: Option<Importance>,
    #[serde(skip)]
    pub search: Option<SearchResult>,
}

fn accuracy(det: &DetectorModel, e: &[ErrorVector], labels: &[bool]) -> Result<f64> {
    let pred = det.classify(e)?;
    Ok(pred.iter().zip(labels).filter(|(p, &l)| (**p == 1) == l).count() as f64 / labels.len().max(1) as f64)
}

/// Random search over hidden layers, widths and learning rate. Each trial
/// trains on 80% of the detector training split and is scored by its
/// cross-entropy on the remaining 20%; the winner and the published setting
/// are then retrained on the whole training split and tested. The trial
/// history is written to `tuning_history.jsonl` in the output directory.
pub fn tune_detector(r: &Runner, space: &SearchSpace, n_trials: usize, epochs: Option<usize>) -> Result<TuneReport> {
    let d = &r.config.detection;
    let pred = r.predictor_from(r.detection_job(PredictorConfig::lstm_ae(d.lstm_units[0]), 0.0))?;
    let spec = r.detection_spec(DeployMode::Sliding, 3);
    let windows = build_detection_dataset(&r.grid, &spec)?;
    let errors = errors_for(&pred, &windows)?;
    let (tr, te) = train_test_split(windows.len(), d.train_fraction, spec.seed);
    let (fit_idx, val_idx) = {
        let (a, b) = train_test_split(tr.len(), 0.8, spec.seed ^ 1);
        (a.into_iter().map(|i| tr[i]).collect::<Vec<_>>(), b.into_iter().map(|i| tr[i]).collect::<Vec<_>>())
    };
    let pick = |idx: &[usize]| -> (Vec<ErrorVector>, Vec<bool>) {
        (idx.iter().map(|&i| errors[i].clone()).collect(), idx.iter().map(|&i| windows[i].adversarial).collect())
    };
    let (e_fit, l_fit) = pick(&fit_idx);
    let (e_val, l_val) = pick(&val_idx);
    let (e_tr, l_tr) = pick(&tr);
    let (e_te, l_te) = pick(&te);
    let id = pred.model.fingerprint();
    let epochs = epochs.unwrap_or(d.detector_epochs);
    let val_labels: Vec<usize> = l_val.iter().map(|&b| b as usize).collect();

    let search = random_search(space, n_trials, r.config.seed, |p, seed| {
        let mut hp = DetectorHyperparams::new(p.hidden.clone(), p.lr).with_seed(seed);
        hp.epochs = epochs;
        let det = train_binary_detector(&e_fit, &l_fit, &hp, &id)?;
        det.loss(&e_val, &val_labels)
    })?;
    write_history(r.out_dir.join("tuning_history.jsonl"), &search.history)?;

    let mut best_hp = DetectorHyperparams::new(search.best.params.hidden.clone(), search.best.params.lr).with_seed(r.config.seed);
    best_hp.epochs = epochs;
    let best = train_binary_detector(&e_tr, &l_tr, &best_hp, &id)?;
    let mut pub_hp = r.detector_hyperparams(&pred.model.config, r.config.seed);
    pub_hp.epochs = epochs;
    let published = train_binary_detector(&e_tr, &l_tr, &pub_hp, &id)?;
    let importance = importance_report(&search.history, space).ok();
    Ok(TuneReport {
        predictor: pred.label(),
        trials: n_trials,
        best_hidden: search.best.params.hidden.clone(),
        best_lr: search.best.params.lr,
        best_validation_loss: search.best.objective.unwrap_or(f64::NAN),
        best_test_accuracy: accuracy(&best, &e_te, &l_te)?,
        published_test_accuracy: accuracy(&published, &e_te, &l_te)?,
        importance,
        search: Some(search),
    })
}
