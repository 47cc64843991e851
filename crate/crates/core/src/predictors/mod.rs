//! State predictors: an LSTM autoencoder and a graph-convolution front end
//! feeding the same encoder/decoder.

pub mod gcn;
pub mod metrics;
pub mod model;
pub mod train;

pub use gcn::{Aggregation, GcnLayer, GraphWeights, UpdateOp};
pub use metrics::{evaluate_predictor, mae_mre, metrics_record, prediction_metrics, PredictionMetrics};
pub use model::{PredictorConfig, PredictorKind, PredictorModel, PredictorNet, TrainingHistory};
pub use train::{fit, pack, train_predictor};
