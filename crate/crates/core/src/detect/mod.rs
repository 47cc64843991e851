//! Detection of droop attacks from state-prediction errors.

pub mod classifier;
pub mod eval;
pub mod window;

pub use classifier::{
    detect, prediction_error, train_binary_detector, train_multiclass_localizer, train_test_split, window_errors, DetectorHead,
    DetectorHyperparams, DetectorModel, ErrorVector, Verdict,
};
pub use eval::{
    evaluate_detector, export_error_vectors, grouped_metrics, multiclass_metrics, parse_error_csv, write_error_csv, Confusion,
    DetectionMetrics, GroupBy, GroupMetrics, MulticlassMetrics,
};
pub use window::{build_detection_dataset, deployment_schedule, simulate_window, AttackPattern, DeployMode, DetectionSpec, DetectionWindow};
