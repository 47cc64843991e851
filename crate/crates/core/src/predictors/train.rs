use rand::seq::SliceRandom;

use super::gcn::GraphWeights;
use super::model::{EpochRecord, PredictorConfig, PredictorModel, PredictorNet};
use crate::dataset::{PredictionDataset, WindowSample};
use crate::error::{Error, Result};
use crate::grid::GridModel;
use crate::neural::loss::mse_loss;
use crate::neural::{AdamState, Trainable};
use crate::rng::{derive_seed, rng_from_seed, Stream};

/// Concatenated observations and targets of `samples`.
pub fn pack<'a>(samples: impl IntoIterator<Item = &'a WindowSample>) -> (Vec<f64>, Vec<f64>) {
    let (mut obs, mut tgt) = (Vec::new(), Vec::new());
    for s in samples {
        obs.extend_from_slice(&s.observation);
        tgt.extend_from_slice(&s.target);
    }
    (obs, tgt)
}

/// Mean squared error of `model` over packed samples.
pub fn dataset_loss(model: &PredictorModel, obs: &[f64], targets: &[f64]) -> Result<f64> {
    let pred = model.predict_many(obs)?;
    Ok(mse_loss(&pred, targets)?.0)
}

/// Fits a freshly initialized predictor on the dataset's training split and
/// records the validation loss after every epoch.
pub fn train_predictor(config: &PredictorConfig, dataset: &PredictionDataset, grid: &GridModel) -> Result<PredictorModel> {
    if dataset.is_empty() || dataset.split.train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if dataset.n_p != config.n_p || dataset.n_f != config.n_f {
        return Err(Error::Dimension { what: "dataset window shape", expected: config.n_p * config.n_f, got: dataset.n_p * dataset.n_f });
    }
    let model = PredictorModel::new(config.clone(), &GraphWeights::from_grid(grid))?;
    let train: Vec<&WindowSample> = dataset.train().collect();
    let val: Vec<&WindowSample> = dataset.validation().collect();
    fit(model, &train, &val)
}

/// Mini-batch Adam on MSE for `config.epochs` epochs. Batches are reshuffled
/// each epoch from a seed derived from the config seed; the final partial
/// batch is kept. With a validation set, the returned weights are those of
/// the epoch with the lowest validation loss.
pub fn fit(mut model: PredictorModel, train: &[&WindowSample], val: &[&WindowSample]) -> Result<PredictorModel> {
    let cfg = model.config.clone();
    let (n_p, n_f) = (cfg.n_p, cfg.n_f);
    let (train_obs, train_tgt) = pack(train.iter().copied());
    model.history.initial_train_loss = Some(dataset_loss(&model, &train_obs, &train_tgt)?);
    let (val_obs, val_tgt) = pack(val.iter().copied());
    let mut adam = AdamState::new(&model.net, cfg.lr);
    let mut grads = model.net.zeros_like();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let w = n_p * n_f;
    let (mut obs, mut tgt) = (Vec::with_capacity(cfg.batch_size * w), Vec::with_capacity(cfg.batch_size * n_f));
    let mut best: Option<(f64, usize, PredictorNet)> = None;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng_from_seed(derive_seed(cfg.seed, Stream::Shuffle, epoch as u64)));
        let mut total = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            obs.clear();
            tgt.clear();
            for &i in chunk {
                obs.extend_from_slice(&train_obs[i * w..(i + 1) * w]);
                tgt.extend_from_slice(&train_tgt[i * n_f..(i + 1) * n_f]);
            }
            let (pred, trace) = model.net.forward(model.graph.as_ref(), &obs, chunk.len())?;
            let (loss, dpred) = mse_loss(&pred, &tgt)?;
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged { epoch, batch: bi });
            }
            total += loss * chunk.len() as f64;
            grads.zero_params();
            model.net.backward(model.graph.as_ref(), &trace, &dpred, &mut grads);
            adam.update(model.net.params_mut(), grads.params())?;
            if !model.net.all_finite() {
                return Err(Error::TrainingDiverged { epoch, batch: bi });
            }
        }
        let val_loss = if val.is_empty() { None } else { Some(dataset_loss(&model, &val_obs, &val_tgt)?) };
        if let Some(v) = val_loss {
            if best.as_ref().is_none_or(|b| v < b.0) {
                best = Some((v, epoch, model.net.clone()));
            }
        }
        model.history.epochs.push(EpochRecord { epoch, train_loss: total / train.len() as f64, val_loss });
    }
    if let Some((_, epoch, net)) = best {
        model.net = net;
        model.history.best_epoch = Some(epoch);
    }
    Ok(model)
}
