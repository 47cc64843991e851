//! The error classifier: an MLP over standardized (by default log-scaled)
//! squared prediction errors.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::window::DetectionWindow;
use crate::error::{Error, Result};
use crate::neural::checkpoint::{read_checkpoint, write_checkpoint};
use crate::neural::loss::{binary_cross_entropy, categorical_cross_entropy};
use crate::neural::{Activation, AdamState, Mlp, Trainable};
use crate::predictors::{PredictorConfig, PredictorKind, PredictorModel};
use crate::rng::{derive_seed, rng_from_seed, Stream};

pub const THRESHOLD: f64 = 0.5;
/// Added before the logarithm so exact predictions stay finite.
pub const LOG_FLOOR: f64 = 1e-14;

/// Elementwise squared error `(x_hat - x)^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorVector(pub Vec<f64>);

pub fn prediction_error(predicted: &[f64], actual: &[f64]) -> Result<ErrorVector> {
    if predicted.len() != actual.len() {
        return Err(Error::Dimension { what: "inference state", expected: predicted.len(), got: actual.len() });
    }
    Ok(ErrorVector(predicted.iter().zip(actual).map(|(p, a)| (p - a) * (p - a)).collect()))
}

/// Error vectors for many windows, with batched parallel inference.
pub fn window_errors(predictor: &PredictorModel, windows: &[DetectionWindow]) -> Result<Vec<ErrorVector>> {
    let obs: Vec<f64> = windows.iter().flat_map(|w| w.observation.iter().copied()).collect();
    let pred = predictor.predict_many(&obs)?;
    let n_f = predictor.config.n_f;
    windows.iter().zip(pred.chunks_exact(n_f)).map(|(w, p)| prediction_error(p, &w.inference)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorHyperparams {
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub features: FeatureScale,
}

impl DetectorHyperparams {
    pub fn new(hidden: Vec<usize>, lr: f64) -> Self {
        Self { hidden, lr, epochs: 40, batch_size: 32, seed: 0, features: FeatureScale::Log }
    }

    /// Published best settings per predictor: 20 neurons at 0.00376 for the
    /// 50-unit LSTM, 30 neurons at 0.0034 otherwise.
    pub fn published(predictor: &PredictorConfig) -> Self {
        match (predictor.kind, predictor.units) {
            (PredictorKind::LstmAe, 50) => Self::new(vec![20], 0.00376),
            _ => Self::new(vec![30], 0.0034),
        }
    }

    pub fn localizer() -> Self {
        Self::new(vec![100], 0.0005)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_features(mut self, features: FeatureScale) -> Self {
        self.features = features;
        self
    }
}

/// Elementwise transform applied to squared errors before standardization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureScale {
    #[default]
    Log,
    Raw,
}

impl FeatureScale {
    pub fn map(self, x: f64) -> f64 {
        match self {
            FeatureScale::Log => (x + LOG_FLOOR).ln(),
            FeatureScale::Raw => x,
        }
    }
}

impl std::str::FromStr for FeatureScale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "log" => Ok(FeatureScale::Log),
            "raw" => Ok(FeatureScale::Raw),
            other => Err(Error::InvalidArgument(format!("unknown feature scale `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    #[serde(default)]
    pub scale: FeatureScale,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Fits on rows that have already been passed through `scale`.
    pub fn fit(scale: FeatureScale, rows: &[Vec<f64>]) -> Self {
        let d = rows[0].len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            mean.iter_mut().zip(r).for_each(|(m, x)| *m += x / n);
        }
        let mut var = vec![0.0; d];
        for r in rows {
            var.iter_mut().zip(r).zip(&mean).for_each(|((v, x), m)| *v += (x - m) * (x - m) / n);
        }
        let std = var.into_iter().map(|v| if v > 1e-40 { v.sqrt() } else { 1.0 }).collect();
        Self { scale, mean, std }
    }

    pub fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.extend(x.iter().zip(&self.mean).zip(&self.std).map(|((x, m), s)| (self.scale.map(*x) - m) / s));
    }
}

fn scaled_rows(scale: FeatureScale, errors: &[ErrorVector]) -> Vec<Vec<f64>> {
    errors.iter().map(|e| e.0.iter().map(|&x| scale.map(x)).collect()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorHead {
    Binary,
    Multiclass { classes: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorModel {
    pub mlp: Mlp,
    pub scaler: Standardizer,
    pub head: DetectorHead,
    pub threshold: f64,
    pub predictor_id: String,
    pub hyperparams: DetectorHyperparams,
    /// Mean training loss per epoch.
    pub history: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Benign,
    Adversarial,
}

impl DetectorModel {
    fn features(&self, errors: &[ErrorVector]) -> Vec<f64> {
        let mut x = Vec::with_capacity(errors.len() * self.mlp.input_size());
        for e in errors {
            self.scaler.apply(&e.0, &mut x);
        }
        x
    }

    /// Raw head outputs, `rows x outputs`.
    pub fn outputs(&self, errors: &[ErrorVector]) -> Result<Vec<f64>> {
        if let Some(e) = errors.iter().find(|e| e.0.len() != self.mlp.input_size()) {
            return Err(Error::Dimension { what: "error vector", expected: self.mlp.input_size(), got: e.0.len() });
        }
        let x = self.features(errors);
        Ok(self.mlp.forward_batch(&x, errors.len())?.acts.pop().expect("nonempty"))
    }

    /// Attack probability of a binary detector.
    pub fn score(&self, e: &ErrorVector) -> Result<f64> {
        if self.head != DetectorHead::Binary {
            return Err(Error::InvalidArgument("score needs a binary detector".into()));
        }
        Ok(self.outputs(std::slice::from_ref(e))?[0])
    }

    pub fn verdict(&self, score: f64) -> Verdict {
        if score >= self.threshold {
            Verdict::Adversarial
        } else {
            Verdict::Benign
        }
    }

    /// Predicted labels: `0/1` for binary, argmax class otherwise.
    pub fn classify(&self, errors: &[ErrorVector]) -> Result<Vec<usize>> {
        let out = self.outputs(errors)?;
        Ok(match self.head {
            DetectorHead::Binary => out.iter().map(|&s| (self.verdict(s) == Verdict::Adversarial) as usize).collect(),
            DetectorHead::Multiclass { classes } => out
                .chunks_exact(classes)
                .map(|r| r.iter().enumerate().fold(0, |best, (i, &p)| if p > r[best] { i } else { best }))
                .collect(),
        })
    }

    /// Mean cross-entropy of the detector on labeled errors.
    pub fn loss(&self, errors: &[ErrorVector], labels: &[usize]) -> Result<f64> {
        let out = self.outputs(errors)?;
        Ok(match self.head {
            DetectorHead::Binary => binary_cross_entropy(&out, &labels.iter().map(|&l| l as f64).collect::<Vec<_>>()),
            DetectorHead::Multiclass { classes } => categorical_cross_entropy(&out, labels, classes),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut d = serde_json::to_value(self)?;
        d.as_object_mut().expect("struct").remove("mlp");
        d["layers"] = serde_json::json!(self.mlp.layers.iter().map(|l| (l.input_size(), l.output_size(), l.activation)).collect::<Vec<_>>());
        write_checkpoint(path, "detector", &d, &self.mlp.params())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ck = read_checkpoint(path, "detector")?;
        let mut d = ck.descriptor.clone();
        let layers: Vec<(usize, usize, Activation)> = serde_json::from_value(d["layers"].take())?;
        let mlp = Mlp { layers: layers.into_iter().map(|(i, o, a)| crate::neural::Dense::zeros(i, o, a)).collect() };
        let obj = d.as_object_mut().ok_or_else(|| Error::Format("detector descriptor is not an object".into()))?;
        obj.remove("layers");
        obj.insert("mlp".into(), serde_json::to_value(&mlp)?);
        let mut model: DetectorModel = serde_json::from_value(d)?;
        ck.fill(model.mlp.params_mut())?;
        Ok(model)
    }
}

fn train(errors: &[ErrorVector], labels: &[usize], head: DetectorHead, hp: &DetectorHyperparams, predictor_id: &str) -> Result<DetectorModel> {
    if errors.is_empty() || errors.len() != labels.len() {
        return Err(Error::Dimension { what: "labels", expected: errors.len(), got: labels.len() });
    }
    let (outputs, head_act) = match head {
        DetectorHead::Binary => (1, Activation::Sigmoid),
        DetectorHead::Multiclass { classes } => (classes, Activation::Softmax),
    };
    if labels.iter().any(|&l| l >= outputs.max(2)) {
        return Err(Error::InvalidArgument("label outside the class range".into()));
    }
    let distinct = labels.iter().collect::<std::collections::BTreeSet<_>>().len();
    if distinct < 2 {
        return Err(Error::TooFewClasses { needed: 2, found: distinct });
    }
    if hp.batch_size == 0 || !(hp.lr > 0.0) {
        return Err(Error::InvalidArgument("batch size and learning rate must be positive".into()));
    }
    let d = errors[0].0.len();
    let mut rng = rng_from_seed(derive_seed(hp.seed, Stream::Init, 0));
    let mlp = Mlp::new(d, &hp.hidden, outputs, head_act, &mut rng)?;
    let scaler = Standardizer::fit(hp.features, &scaled_rows(hp.features, errors));
    let mut model = DetectorModel {
        mlp,
        scaler,
        head,
        threshold: THRESHOLD,
        predictor_id: predictor_id.to_string(),
        hyperparams: hp.clone(),
        history: Vec::new(),
    };
    let x = model.features(errors);
    let mut adam = AdamState::new(&model.mlp, hp.lr);
    let mut grads = model.mlp.zeros_like();
    let mut order: Vec<usize> = (0..errors.len()).collect();
    let mut xb = Vec::new();
    for epoch in 0..hp.epochs {
        order.shuffle(&mut rng_from_seed(derive_seed(hp.seed, Stream::Shuffle, epoch as u64)));
        let mut total = 0.0;
        for (bi, chunk) in order.chunks(hp.batch_size).enumerate() {
            xb.clear();
            for &i in chunk {
                xb.extend_from_slice(&x[i * d..(i + 1) * d]);
            }
            let trace = model.mlp.forward_batch(&xb, chunk.len())?;
            let out = trace.output();
            let n = chunk.len() as f64;
            let mut dz = out.to_vec();
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let loss = match head {
                DetectorHead::Binary => {
                    dz.iter_mut().zip(&batch_labels).for_each(|(z, &y)| *z = (*z - y as f64) / n);
                    binary_cross_entropy(out, &batch_labels.iter().map(|&l| l as f64).collect::<Vec<_>>())
                }
                DetectorHead::Multiclass { classes } => {
                    for (b, &y) in batch_labels.iter().enumerate() {
                        dz[b * classes + y] -= 1.0;
                    }
                    dz.iter_mut().for_each(|z| *z /= n);
                    categorical_cross_entropy(out, &batch_labels, classes)
                }
            };
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged { epoch, batch: bi });
            }
            total += loss * n;
            grads.zero_params();
            model.mlp.backward_from_logits(&trace, dz, &mut grads);
            adam.update(model.mlp.params_mut(), grads.params())?;
        }
        model.history.push(total / errors.len() as f64);
    }
    Ok(model)
}

/// Sigmoid-output detector trained with binary cross-entropy; labels are
/// `true` for adversarial.
pub fn train_binary_detector(errors: &[ErrorVector], labels: &[bool], hp: &DetectorHyperparams, predictor_id: &str) -> Result<DetectorModel> {
    let l: Vec<usize> = labels.iter().map(|&b| b as usize).collect();
    train(errors, &l, DetectorHead::Binary, hp, predictor_id)
}

/// Softmax localizer over `classes` labels (buses plus one benign class).
pub fn train_multiclass_localizer(
    errors: &[ErrorVector],
    classes: &[usize],
    n_classes: usize,
    hp: &DetectorHyperparams,
    predictor_id: &str,
) -> Result<DetectorModel> {
    train(errors, classes, DetectorHead::Multiclass { classes: n_classes }, hp, predictor_id)
}

/// Composite detection: predictor, squared error, classifier score.
pub fn detect(detector: &DetectorModel, predictor: &PredictorModel, window: &DetectionWindow) -> Result<(Verdict, f64)> {
    let id = predictor.fingerprint();
    if id != detector.predictor_id {
        return Err(Error::ModelMismatch { expected: detector.predictor_id.clone(), got: id });
    }
    let pred = predictor.predict(&window.observation)?;
    let s = detector.score(&prediction_error(&pred, &window.inference)?)?;
    Ok((detector.verdict(s), s))
}

/// Shuffled `(train, test)` index split with `train_fraction` of the rows.
pub fn train_test_split(n: usize, train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_from_seed(derive_seed(seed, Stream::Split, 1)));
    let k = ((n as f64 * train_fraction).round() as usize).min(n);
    let test = idx.split_off(k);
    (idx, test)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize) -> (Vec<ErrorVector>, Vec<bool>) {
        let mut rng = rng_from_seed(5);
        use rand::Rng as _;
        (0..n)
            .map(|i| {
                let adv = i % 2 == 1;
                let scale = if adv { 1e-4 } else { 1e-7 };
                (ErrorVector((0..20).map(|_| scale * rng.random_range(0.5..1.5)).collect()), adv)
            })
            .unzip()
    }

    #[test]
    fn separable_toy_is_learned() {
        let (e, l) = toy(400);
        let det = train_binary_detector(&e[..300], &l[..300], &DetectorHyperparams::new(vec![8], 0.01), "p").unwrap();
        let pred = det.classify(&e[300..]).unwrap();
        assert!(pred.iter().zip(&l[300..]).all(|(&p, &y)| (p == 1) == y));
    }

    #[test]
    fn single_class_rejected() {
        let (e, _) = toy(10);
        let r = train_binary_detector(&e, &[false; 10], &DetectorHyperparams::new(vec![4], 0.01), "p");
        assert!(matches!(r, Err(Error::TooFewClasses { .. })));
    }

    #[test]
    fn threshold_rule() {
        let (e, l) = toy(20);
        let det = train_binary_detector(&e, &l, &DetectorHyperparams::new(vec![4], 0.01), "p").unwrap();
        assert_eq!(det.verdict(0.7), Verdict::Adversarial);
        assert_eq!(det.verdict(0.49), Verdict::Benign);
        assert_eq!(det.verdict(0.5), Verdict::Adversarial);
    }

    #[test]
    fn error_vector_cases() {
        assert_eq!(prediction_error(&[0.3; 4], &[0.3; 4]).unwrap().0, vec![0.0; 4]);
        let mut x = vec![0.0; 20];
        x[0] = 1.0;
        assert_eq!(prediction_error(&x, &[0.0; 20]).unwrap().0, x);
    }

    #[test]
    fn checkpoint_round_trip() {
        let (e, l) = toy(50);
        let det = train_binary_detector(&e, &l, &DetectorHyperparams::new(vec![6, 3], 0.01).with_seed(2), "pid").unwrap();
        let dir = tempfile::tempdir().unwrap();
        det.save(dir.path().join("d.ckpt")).unwrap();
        let back = DetectorModel::load(dir.path().join("d.ckpt")).unwrap();
        assert_eq!(back, det);
        assert_eq!(back.outputs(&e).unwrap(), det.outputs(&e).unwrap());
    }

    #[test]
    fn published_defaults() {
        let h = DetectorHyperparams::published(&PredictorConfig::lstm_ae(100));
        assert_eq!((h.hidden.clone(), h.lr), (vec![30], 0.0034));
        let h = DetectorHyperparams::published(&PredictorConfig::lstm_ae(50));
        assert_eq!((h.hidden.clone(), h.lr), (vec![20], 0.00376));
    }
}
