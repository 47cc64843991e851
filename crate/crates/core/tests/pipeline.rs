use fdia_core::dataset::{generate_dataset, GenerationSpec};
use fdia_core::detect::{
    build_detection_dataset, detect, train_binary_detector, window_errors, AttackPattern, DeployMode, DetectionSpec,
    DetectorHyperparams, DetectorModel, Verdict,
};
use fdia_core::experiments::{run_table, ExperimentConfig, Runner, TableId};
use fdia_core::grid::GridModel;
use fdia_core::predictors::{train_predictor, PredictorConfig, PredictorModel};
use proptest::prelude::*;

fn tiny_predictor(grid: &GridModel) -> PredictorModel {
    let spec = GenerationSpec { episodes: 12, window_stride: 15, seed: 8, ..Default::default() };
    let ds = generate_dataset(grid, &spec).unwrap();
    train_predictor(&PredictorConfig::lstm_ae(6).with_epochs(2).with_seed(1), &ds, grid).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn windows_carry_consistent_labels(seed in 0u64..1000, cyclic in any::<bool>(), m in 1usize..=5) {
        let grid = GridModel::ten_bus_default();
        let mode = if cyclic { DeployMode::Cyclic } else { DeployMode::Sliding };
        let mut spec = DetectionSpec::new(mode, 6, 6, seed);
        spec.pattern = AttackPattern::Fixed(m);
        spec.buses = vec![3, 7];
        let windows = build_detection_dataset(&grid, &spec).unwrap();
        prop_assert_eq!(windows.len(), 12);
        prop_assert_eq!(windows.iter().filter(|w| w.adversarial).count(), 6);
        for w in &windows {
            prop_assert!(w.is_consistent(5));
            prop_assert!(w.t > 5 && w.t < 500);
            if w.adversarial {
                prop_assert_eq!(w.m, m);
                prop_assert_eq!(w.positions.contains(&0), !cyclic);
                prop_assert!(matches!(w.attacked_bus, Some(3) | Some(7)));
            }
        }
        prop_assert_eq!(build_detection_dataset(&grid, &spec).unwrap(), windows);
    }
}

#[test]
fn checkpoints_round_trip() {
    let grid = GridModel::ten_bus_default();
    let pred = tiny_predictor(&grid);
    let dir = tempfile::tempdir().unwrap();
    pred.save(dir.path().join("p.ckpt")).unwrap();
    let back = PredictorModel::load(dir.path().join("p.ckpt")).unwrap();
    assert_eq!(back.fingerprint(), pred.fingerprint());

    let windows = build_detection_dataset(&grid, &DetectionSpec::new(DeployMode::Sliding, 40, 40, 2)).unwrap();
    let errors = window_errors(&pred, &windows).unwrap();
    assert_eq!(errors, window_errors(&back, &windows).unwrap());
    let labels: Vec<bool> = windows.iter().map(|w| w.adversarial).collect();
    let mut hp = DetectorHyperparams::new(vec![8], 0.003).with_seed(4);
    hp.epochs = 5;
    let det = train_binary_detector(&errors, &labels, &hp, &pred.fingerprint()).unwrap();
    det.save(dir.path().join("d.ckpt")).unwrap();
    let det2 = DetectorModel::load(dir.path().join("d.ckpt")).unwrap();
    assert_eq!(det.outputs(&errors).unwrap(), det2.outputs(&errors).unwrap());

    let (v, s) = detect(&det2, &back, &windows[0]).unwrap();
    assert!((0.0..=1.0).contains(&s));
    assert_eq!(v == Verdict::Adversarial, s >= det2.threshold);
    let other = train_predictor(&PredictorConfig::lstm_ae(6).with_epochs(1).with_seed(9), &generate_dataset(&grid, &GenerationSpec { episodes: 4, window_stride: 30, ..Default::default() }).unwrap(), &grid).unwrap();
    assert!(detect(&det2, &other, &windows[0]).is_err());
}

#[test]
fn table_run_reuses_cached_models() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::desk();
    cfg.prediction.sigmas = vec![0.0, 0.005];
    cfg.prediction.episodes = 8;
    cfg.prediction.epochs = 1;
    cfg.prediction.window_stride = 20;
    cfg.prediction.test_episodes = 2;
    let runner = Runner::new(cfg, dir.path()).unwrap();
    let first = run_table(&runner, TableId::MaeNoise).unwrap();
    let second = run_table(&runner, TableId::MaeNoise).unwrap();
    assert_eq!(first.records.len(), 2);
    assert!(second.records.iter().all(|r| r["cached"] == true));
    assert_eq!(first.records[0]["metrics"], second.records[0]["metrics"]);
    let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("mae-noise.json")).unwrap()).unwrap();
    assert_eq!(doc["checks"].as_array().unwrap().len(), 4);
    assert!(dir.path().join("mae-noise.txt").exists());
}
