use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::gcn::{to_feature_major, to_node_major, Aggregation, GcnLayer, GcnTrace, GraphWeights, UpdateOp};
use crate::dataset::OBS_STEPS;
use crate::error::{Error, Result};
use crate::neural::checkpoint::{read_checkpoint, write_checkpoint};
use crate::neural::{Activation, Dense, LstmCell, LstmTrace, Tensor, Trainable};
use crate::rng::rng_from_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorKind {
    LstmAe,
    GnnLstm,
}

impl std::fmt::Display for PredictorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::LstmAe => "lstm_ae",
            Self::GnnLstm => "gnn_lstm",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorConfig {
    pub kind: PredictorKind,
    pub units: usize,
    pub epochs: usize,
    pub n_p: usize,
    pub n_f: usize,
    pub aggregation: Option<Aggregation>,
    pub update_op: Option<UpdateOp>,
    /// Message-passing rounds (graph predictor only).
    pub rounds: usize,
    /// Output features per node of each graph round.
    pub node_features: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl PredictorConfig {
    pub fn lstm_ae(units: usize) -> Self {
        Self {
            kind: PredictorKind::LstmAe,
            units,
            epochs: 25,
            n_p: OBS_STEPS,
            n_f: 20,
            aggregation: None,
            update_op: None,
            rounds: 0,
            node_features: 0,
            batch_size: 32,
            lr: 0.001,
            seed: 0,
        }
    }

    pub fn gnn_lstm(units: usize, aggregation: Aggregation, update_op: UpdateOp) -> Self {
        Self {
            kind: PredictorKind::GnnLstm,
            aggregation: Some(aggregation),
            update_op: Some(update_op),
            rounds: 1,
            node_features: 2,
            ..Self::lstm_ae(units)
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_epochs(mut self, epochs: usize) -> Self {
        self.epochs = epochs;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.units == 0 || self.n_p == 0 || self.n_f == 0 || self.batch_size == 0 {
            return bad("units, n_p, n_f and batch_size must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be positive");
        }
        match self.kind {
            PredictorKind::LstmAe => {
                if self.aggregation.is_some() || self.update_op.is_some() || self.rounds != 0 {
                    return bad("aggregation, update_op and rounds apply only to gnn_lstm");
                }
            }
            PredictorKind::GnnLstm => {
                if self.aggregation.is_none() || self.update_op.is_none() {
                    return bad("gnn_lstm needs aggregation and update_op");
                }
                if self.rounds == 0 || self.node_features == 0 {
                    return bad("gnn_lstm needs at least one round with at least one feature");
                }
            }
        }
        Ok(())
    }

    /// Width of each encoder input step.
    pub fn encoder_input(&self, n_nodes: usize) -> usize {
        match self.kind {
            PredictorKind::LstmAe => self.n_f,
            PredictorKind::GnnLstm => n_nodes * self.node_features,
        }
    }
}

/// Trainable part of a predictor: optional graph rounds, encoder and decoder
/// LSTMs and the output projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorNet {
    pub gcn: Vec<GcnLayer>,
    pub encoder: LstmCell,
    pub decoder: LstmCell,
    pub output: Dense,
}

pub struct ForwardTrace {
    batch: usize,
    gcn: Vec<Vec<GcnTrace>>,
    encoder: LstmTrace,
    decoder: LstmTrace,
}

impl PredictorNet {
    pub fn new<R: Rng + ?Sized>(config: &PredictorConfig, n_nodes: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let gcn = Self::gcn_shapes(config, n_nodes)?
            .into_iter()
            .map(|(fi, fo)| GcnLayer::new(config.aggregation.unwrap(), config.update_op.unwrap(), fi, fo, rng))
            .collect();
        let u = config.units;
        Ok(Self {
            gcn,
            encoder: LstmCell::new(config.encoder_input(n_nodes), u, rng),
            decoder: LstmCell::new(u, u, rng),
            output: Dense::new(u, config.n_f, Activation::Identity, rng),
        })
    }

    pub fn zeros(config: &PredictorConfig, n_nodes: usize) -> Result<Self> {
        config.validate()?;
        let gcn = Self::gcn_shapes(config, n_nodes)?
            .into_iter()
            .map(|(fi, fo)| GcnLayer::zeros(config.aggregation.unwrap(), config.update_op.unwrap(), fi, fo))
            .collect();
        let u = config.units;
        Ok(Self {
            gcn,
            encoder: LstmCell::zeros(config.encoder_input(n_nodes), u),
            decoder: LstmCell::zeros(u, u),
            output: Dense::zeros(u, config.n_f, Activation::Identity),
        })
    }

    fn gcn_shapes(config: &PredictorConfig, n_nodes: usize) -> Result<Vec<(usize, usize)>> {
        if config.kind == PredictorKind::LstmAe {
            return Ok(Vec::new());
        }
        if n_nodes == 0 || config.n_f % n_nodes != 0 {
            return Err(Error::Dimension { what: "features per node", expected: n_nodes, got: config.n_f });
        }
        let mut f = config.n_f / n_nodes;
        Ok((0..config.rounds)
            .map(|_| {
                let s = (f, config.node_features);
                f = config.node_features;
                s
            })
            .collect())
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.zero_params();
        z
    }

    fn n_p_n_f(&self, obs_len: usize, batch: usize) -> Result<(usize, usize)> {
        let n_f = self.output.output_size();
        if batch == 0 || obs_len % (batch * n_f) != 0 {
            return Err(Error::Dimension { what: "observation block", expected: batch * n_f, got: obs_len });
        }
        Ok((obs_len / (batch * n_f), n_f))
    }

    /// Batched forward over row-major `batch x n_p x n_f` observations.
    pub fn forward(&self, graph: Option<&GraphWeights>, obs: &[f64], batch: usize) -> Result<(Vec<f64>, ForwardTrace)> {
        let (n_p, n_f) = self.n_p_n_f(obs.len(), batch)?;
        let mut steps = Vec::with_capacity(n_p);
        let mut gcn_traces = Vec::new();
        let mut nodes = Vec::new();
        for t in 0..n_p {
            let mut x = vec![0.0; batch * n_f];
            for b in 0..batch {
                let src = b * n_p * n_f + t * n_f;
                x[b * n_f..(b + 1) * n_f].copy_from_slice(&obs[src..src + n_f]);
            }
            if !self.gcn.is_empty() {
                let graph = graph.ok_or_else(|| Error::InvalidArgument("graph predictor needs adjacency".into()))?;
                let n = graph.n_nodes();
                to_node_major(&x, batch, n, n_f / n, &mut nodes);
                let mut traces = Vec::with_capacity(self.gcn.len());
                for layer in &self.gcn {
                    let (y, tr) = layer.forward(graph, &nodes, batch);
                    nodes = y;
                    traces.push(tr);
                }
                let fo = self.gcn.last().expect("nonempty").out_features();
                to_feature_major(&nodes, batch, n, fo, &mut x);
                gcn_traces.push(traces);
            }
            if x.len() != batch * self.encoder.input_size {
                return Err(Error::Dimension { what: "encoder input", expected: self.encoder.input_size, got: x.len() / batch });
            }
            steps.push(x);
        }
        let encoder = self.encoder.forward_sequence(steps, batch);
        let summary = encoder.last_hidden().to_vec();
        let decoder = self.decoder.forward_sequence(vec![summary; n_p], batch);
        let pred = self.output.forward_batch(decoder.last_hidden(), batch);
        Ok((pred, ForwardTrace { batch, gcn: gcn_traces, encoder, decoder }))
    }

    /// Backward from the gradient on the prediction; accumulates into `grads`.
    pub fn backward(&self, graph: Option<&GraphWeights>, trace: &ForwardTrace, dpred: &[f64], grads: &mut PredictorNet) {
        let batch = trace.batch;
        let u = self.encoder.units;
        let n_p = trace.encoder.steps();
        let dh_dec = self
            .output
            .backward_from_preact(trace.decoder.last_hidden(), dpred, batch, &mut grads.output, true)
            .expect("dx requested");
        let mut dh = vec![Vec::new(); n_p];
        dh[n_p - 1] = dh_dec;
        let dxs = self.decoder.backward_sequence(&trace.decoder, &dh, &mut grads.decoder, true);
        let mut dh_enc = vec![0.0; batch * u];
        for dx in &dxs {
            dh_enc.iter_mut().zip(dx).for_each(|(a, b)| *a += b);
        }
        let mut dh = vec![Vec::new(); n_p];
        dh[n_p - 1] = dh_enc;
        let dxe = self.encoder.backward_sequence(&trace.encoder, &dh, &mut grads.encoder, !self.gcn.is_empty());
        if let (false, Some(graph)) = (self.gcn.is_empty(), graph) {
            let n = graph.n_nodes();
            let fo = self.gcn.last().expect("nonempty").out_features();
            let mut d = Vec::new();
            for (t, dx) in dxe.iter().enumerate() {
                to_node_major(dx, batch, n, fo, &mut d);
                for r in (0..self.gcn.len()).rev() {
                    d = self.gcn[r].backward(graph, &trace.gcn[t][r], &d, &mut grads.gcn[r]);
                }
            }
        }
    }
}

impl Trainable for PredictorNet {
    fn params(&self) -> Vec<&Tensor> {
        let mut p: Vec<&Tensor> = self.gcn.iter().flat_map(|g| g.params()).collect();
        p.extend(self.encoder.params());
        p.extend(self.decoder.params());
        p.extend(self.output.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p: Vec<&mut Tensor> = self.gcn.iter_mut().flat_map(|g| g.params_mut()).collect();
        p.extend(self.encoder.params_mut());
        p.extend(self.decoder.params_mut());
        p.extend(self.output.params_mut());
        p
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub initial_train_loss: Option<f64>,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose weights were kept (lowest validation loss).
    #[serde(default)]
    pub best_epoch: Option<usize>,
}

/// A trained (or freshly initialized) state predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorModel {
    pub config: PredictorConfig,
    pub net: PredictorNet,
    pub graph: Option<GraphWeights>,
    pub history: TrainingHistory,
}

const INFER_CHUNK: usize = 256;

#[derive(Serialize, Deserialize)]
struct Descriptor {
    config: PredictorConfig,
    n_nodes: usize,
    adjacency: Option<Vec<f64>>,
    history: TrainingHistory,
}

impl PredictorModel {
    pub fn new(config: PredictorConfig, graph: &GraphWeights) -> Result<Self> {
        let net = PredictorNet::new(&config, graph.n_nodes(), &mut rng_from_seed(config.seed))?;
        Ok(Self::from_net(config, net, graph))
    }

    pub fn zeros(config: PredictorConfig, graph: &GraphWeights) -> Result<Self> {
        let net = PredictorNet::zeros(&config, graph.n_nodes())?;
        Ok(Self::from_net(config, net, graph))
    }

    pub fn from_net(config: PredictorConfig, net: PredictorNet, graph: &GraphWeights) -> Self {
        let graph = (config.kind == PredictorKind::GnnLstm).then(|| graph.clone());
        Self { config, net, graph, history: TrainingHistory::default() }
    }

    /// Predicted next state for one `n_p x n_f` observation.
    pub fn predict(&self, observation: &[f64]) -> Result<Vec<f64>> {
        let want = self.config.n_p * self.config.n_f;
        if observation.len() != want {
            return Err(Error::Dimension { what: "observation", expected: want, got: observation.len() });
        }
        Ok(self.net.forward(self.graph.as_ref(), observation, 1)?.0)
    }

    /// Batched inference over concatenated observations, parallel across chunks.
    pub fn predict_many(&self, observations: &[f64]) -> Result<Vec<f64>> {
        let w = self.config.n_p * self.config.n_f;
        if observations.len() % w != 0 {
            return Err(Error::Dimension { what: "observation block", expected: w, got: observations.len() % w });
        }
        let chunks: Vec<Vec<f64>> = observations
            .par_chunks(w * INFER_CHUNK)
            .map(|c| self.net.forward(self.graph.as_ref(), c, c.len() / w).map(|r| r.0))
            .collect::<Result<_>>()?;
        Ok(chunks.concat())
    }

    /// Stable identifier over configuration and weights.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        for t in self.net.params() {
            for x in t.data() {
                h.update(x.to_le_bytes());
            }
        }
        format!("{}-{}", self.config.kind, &hex::encode(h.finalize())[..16])
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let d = Descriptor {
            config: self.config.clone(),
            n_nodes: self.graph.as_ref().map_or(0, GraphWeights::n_nodes),
            adjacency: self.graph.as_ref().map(|g| g.matrix().to_vec()),
            history: self.history.clone(),
        };
        write_checkpoint(path, "predictor", &serde_json::to_value(&d)?, &self.net.params())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ck = read_checkpoint(path, "predictor")?;
        let d: Descriptor = serde_json::from_value(ck.descriptor.clone())?;
        let graph = match &d.adjacency {
            Some(a) => Some(GraphWeights::from_matrix(d.n_nodes, a.clone())?),
            None => None,
        };
        let n_nodes = graph.as_ref().map_or(d.config.n_f / 2, GraphWeights::n_nodes);
        let mut net = PredictorNet::zeros(&d.config, n_nodes)?;
        ck.fill(net.params_mut())?;
        Ok(Self { config: d.config, net, graph, history: d.history })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridModel;

    fn obs(seed: u64) -> Vec<f64> {
        let mut rng = rng_from_seed(seed);
        (0..100).map(|_| rng.random_range(-0.3..0.3)).collect()
    }

    #[test]
    fn zero_models_predict_zero() {
        let g = GraphWeights::from_grid(&GridModel::ten_bus_default());
        for cfg in [PredictorConfig::lstm_ae(8), PredictorConfig::gnn_lstm(8, Aggregation::Max, UpdateOp::Concat)] {
            let m = PredictorModel::zeros(cfg, &g).unwrap();
            let y = m.predict(&obs(1)).unwrap();
            assert_eq!(y, vec![0.0; 20]);
        }
    }

    #[test]
    fn config_validation() {
        let mut c = PredictorConfig::lstm_ae(10);
        c.aggregation = Some(Aggregation::Sum);
        assert!(c.validate().is_err());
        assert!(PredictorConfig::lstm_ae(0).validate().is_err());
        let mut c = PredictorConfig::gnn_lstm(10, Aggregation::Sum, UpdateOp::Add);
        c.update_op = None;
        assert!(c.validate().is_err());
    }

    #[test]
    fn shape_errors() {
        let g = GraphWeights::from_grid(&GridModel::ten_bus_default());
        let m = PredictorModel::new(PredictorConfig::lstm_ae(4), &g).unwrap();
        assert!(m.predict(&[0.0; 99]).is_err());
        assert_eq!(m.predict(&obs(2)).unwrap().len(), 20);
    }

    #[test]
    fn batched_matches_single() {
        let g = GraphWeights::from_grid(&GridModel::ten_bus_default());
        let m = PredictorModel::new(PredictorConfig::gnn_lstm(6, Aggregation::Mean, UpdateOp::Concat).with_seed(5), &g).unwrap();
        let all: Vec<f64> = (0..3).flat_map(obs).collect();
        let many = m.predict_many(&all).unwrap();
        for s in 0..3 {
            let one = m.predict(&obs(s)).unwrap();
            for (a, b) in one.iter().zip(&many[s as usize * 20..]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    fn grad_check_kind(cfg: PredictorConfig, seed: u64) -> crate::neural::GradCheckReport {
        use crate::neural::gradcheck::{grad_check, GradCheckConfig};
        use crate::neural::loss::mse_loss;
        let g = GraphWeights::from_grid(&GridModel::ten_bus_default());
        let net = PredictorNet::new(&cfg, 10, &mut rng_from_seed(seed)).unwrap();
        let x: Vec<f64> = (0..2).flat_map(|k| obs(seed * 7 + k)).collect();
        let y: Vec<f64> = obs(seed * 7 + 3)[..40].to_vec();
        let graph = (cfg.kind == PredictorKind::GnnLstm).then_some(&g);
        let loss = |n: &PredictorNet| mse_loss(&n.forward(graph, &x, 2).unwrap().0, &y).unwrap().0;
        let (pred, tr) = net.forward(graph, &x, 2).unwrap();
        let (_, dpred) = mse_loss(&pred, &y).unwrap();
        let mut grads = net.zeros_like();
        net.backward(graph, &tr, &dpred, &mut grads);
        grad_check(&net, &grads, loss, &GradCheckConfig::default())
    }

    #[test]
    fn end_to_end_gradients() {
        let r = grad_check_kind(PredictorConfig::lstm_ae(4), 11);
        assert!(r.passed, "{r:?}");
        for (agg, up) in [(Aggregation::Mean, UpdateOp::Concat), (Aggregation::Sum, UpdateOp::Add), (Aggregation::Max, UpdateOp::Concat)] {
            let mut cfg = PredictorConfig::gnn_lstm(4, agg, up);
            cfg.rounds = 2;
            let r = grad_check_kind(cfg, 12);
            assert!(r.passed, "{agg:?} {up:?} {r:?}");
        }
    }

    #[test]
    fn zero_adjacency_reduces_to_autoencoder() {
        let empty = GraphWeights::empty(10);
        let cfg = PredictorConfig::gnn_lstm(6, Aggregation::Mean, UpdateOp::Add).with_seed(3);
        let mut gnn = PredictorModel::new(cfg, &empty).unwrap();
        let w = gnn.net.gcn[0].transform.weights.data_mut();
        w.iter_mut().for_each(|v| *v = 0.0);
        w[0] = 1.0;
        w[3] = 1.0;
        let mut ae = PredictorModel::zeros(PredictorConfig::lstm_ae(6), &empty).unwrap();
        ae.net.encoder = gnn.net.encoder.clone();
        ae.net.decoder = gnn.net.decoder.clone();
        ae.net.output = gnn.net.output.clone();
        for s in 0..4 {
            assert_eq!(gnn.predict(&obs(s)).unwrap(), ae.predict(&obs(s)).unwrap());
        }
    }

    #[test]
    fn ring_sum_is_twice_mean() {
        let n = 10;
        let mut w = vec![0.0; n * n];
        for i in 0..n {
            let j = (i + 1) % n;
            w[i * n + j] = 0.7;
            w[j * n + i] = 0.7;
        }
        let ring = GraphWeights::from_matrix(n, w).unwrap();
        let x: Vec<f64> = obs(9)[..2 * n * 2].to_vec();
        let sum = GcnLayer::zeros(Aggregation::Sum, UpdateOp::Add, 2, 2).aggregate(&ring, &x, 2).0;
        let mean = GcnLayer::zeros(Aggregation::Mean, UpdateOp::Add, 2, 2).aggregate(&ring, &x, 2).0;
        for (s, m) in sum.iter().zip(&mean) {
            assert!((s - 2.0 * m).abs() < 1e-15);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let g = GraphWeights::from_grid(&GridModel::ten_bus_default());
        for cfg in [PredictorConfig::lstm_ae(5), PredictorConfig::gnn_lstm(5, Aggregation::Max, UpdateOp::Concat)] {
            let mut m = PredictorModel::new(cfg.with_seed(21), &g).unwrap();
            m.history.initial_train_loss = Some(0.25);
            let path = dir.path().join("p.ckpt");
            m.save(&path).unwrap();
            let back = PredictorModel::load(&path).unwrap();
            assert_eq!(back, m);
            assert_eq!(back.predict(&obs(4)).unwrap(), m.predict(&obs(4)).unwrap());
            assert_eq!(back.fingerprint(), m.fingerprint());
        }
    }
}
