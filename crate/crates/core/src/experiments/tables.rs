use std::time::Instant;

use serde_json::json;

use super::report::{fmt_acc, fmt_sci, CheckOutcome, TableReport, TextTable};
use super::runner::{errors_for, train_and_evaluate, DetectionOutcome, Runner, TrainedPredictor};
use super::TableId;
use crate::detect::{
    build_detection_dataset, multiclass_metrics, train_multiclass_localizer, train_test_split, AttackPattern, DeployMode,
    DetectorHyperparams, GroupBy,
};
use crate::error::Result;
use crate::predictors::{evaluate_predictor, PredictionMetrics, PredictorConfig};

const BASELINE_PERMUTATIONS: u64 = 5;

fn report(r: &Runner, table: TableId, records: Vec<serde_json::Value>, text: String, checks: Vec<CheckOutcome>, start: Instant) -> TableReport {
    TableReport { table, seed: r.config.seed, records, checks, seconds: start.elapsed().as_secs_f64(), text }
}

fn metrics_json(m: &PredictionMetrics) -> serde_json::Value {
    json!({
        "mae_theta": m.mae_theta,
        "mre_theta": m.mre_theta,
        "mae_omega": m.mae_omega,
        "mre_omega": m.mre_omega,
        "mae_mean": m.mae_mean(),
        "skipped_mre": m.skipped_mre,
        "n_points": m.n_points,
    })
}

fn gnn_config(r: &Runner, units: usize) -> PredictorConfig {
    let g = r.config.prediction.gnn;
    let mut c = PredictorConfig::gnn_lstm(units, g.aggregation, g.update_op);
    c.rounds = g.rounds;
    c.node_features = g.node_features;
    c
}

pub fn mae_noise(r: &Runner) -> Result<TableReport> {
    let start = Instant::now();
    let p = &r.config.prediction;
    let ck = &r.config.checks;
    let jobs: Vec<_> = p
        .sigmas
        .iter()
        .map(|&s| (PredictorConfig::lstm_ae(p.units).with_epochs(p.epochs).with_seed(r.config.seed), r.generation_spec(p.episodes, s, p.window_stride)))
        .collect();
    let models = r.predictors(&jobs)?;
    let mut table = TextTable::new(&["sigma", "MAE(theta)", "MRE(theta)", "MAE(omega)", "MRE(omega)", "train s"]);
    let (mut records, mut checks) = (Vec::new(), Vec::new());
    for (m, &sigma) in models.iter().zip(&p.sigmas) {
        let met = evaluate_predictor(&m.model, &r.test_windows(sigma)?)?;
        table.row(vec![
            format!("{sigma}"),
            fmt_sci(met.mae_theta),
            fmt_sci(met.mre_theta),
            fmt_sci(met.mae_omega),
            fmt_sci(met.mre_omega),
            format!("{:.1}", m.train_seconds),
        ]);
        records.push(json!({
            "sigma": sigma,
            "predictor": m.label(),
            "episodes": p.episodes,
            "metrics": metrics_json(&met),
            "train_seconds": m.train_seconds,
            "cached": m.cached,
        }));
        if sigma == 0.0 {
            checks.push(CheckOutcome::new(
                "clean MAE(theta)",
                met.mae_theta <= ck.mae_clean_max,
                format!("{:.3e} <= {:.3e}", met.mae_theta, ck.mae_clean_max),
            ));
        } else {
            let (lo, hi) = (ck.noise_band.0 * sigma, ck.noise_band.1 * sigma);
            checks.push(CheckOutcome::new(
                &format!("MAE(theta) tracks sigma={sigma}"),
                (lo..=hi).contains(&met.mae_theta),
                format!("{:.3e} in [{lo:.3e}, {hi:.3e}]", met.mae_theta),
            ));
        }
        checks.push(CheckOutcome::new(
            &format!("training time at sigma={sigma}"),
            m.train_seconds <= ck.max_train_seconds_per_level,
            format!("{:.1} s <= {:.0} s", m.train_seconds, ck.max_train_seconds_per_level),
        ));
    }
    Ok(report(r, TableId::MaeNoise, records, table.render(), checks, start))
}

pub fn aggregation(r: &Runner) -> Result<TableReport> {
    let start = Instant::now();
    let p = &r.config.prediction;
    let data = r.generation_spec(p.aggregation_episodes, 0.0, p.window_stride);
    let mut jobs = vec![(PredictorConfig::lstm_ae(p.units).with_epochs(p.epochs).with_seed(r.config.seed), data.clone())];
    for &(a, u) in &p.aggregations {
        let mut c = gnn_config(r, p.units);
        c.aggregation = Some(a);
        c.update_op = Some(u);
        jobs.push((c.with_epochs(p.epochs).with_seed(r.config.seed), data.clone()));
    }
    let models = r.predictors(&jobs)?;
    let test = r.test_windows(0.0)?;
    let mut table = TextTable::new(&["predictor", "aggregation", "update", "MAE(theta)", "MAE(omega)", "final loss", "train s"]);
    let mut records = Vec::new();
    let mut finite = true;
    for m in &models {
        let met = evaluate_predictor(&m.model, &test)?;
        let c = &m.model.config;
        let last = m.model.history.epochs.last().map_or(f64::NAN, |e| e.train_loss);
        finite &= met.mae_theta.is_finite() && met.mae_omega.is_finite();
        let agg = c.aggregation.map_or("-".to_string(), |a| format!("{a:?}").to_lowercase());
        let upd = c.update_op.map_or("-".to_string(), |u| format!("{u:?}").to_lowercase());
        table.row(vec![m.label(), agg.clone(), upd.clone(), fmt_sci(met.mae_theta), fmt_sci(met.mae_omega), fmt_sci(last), format!("{:.1}", m.train_seconds)]);
        records.push(json!({
            "predictor": m.label(),
            "config": c,
            "aggregation": agg,
            "update": upd,
            "metrics": metrics_json(&met),
            "final_train_loss": last,
            "train_seconds": m.train_seconds,
        }));
    }
    let checks = vec![CheckOutcome::new("all predictors finite", finite, format!("{} models", models.len()))];
    Ok(report(r, TableId::Aggregation, records, table.render(), checks, start))
}

pub fn sample_size(r: &Runner) -> Result<TableReport> {
    let start = Instant::now();
    let p = &r.config.prediction;
    let mut jobs = Vec::new();
    for &n in &p.sample_sizes {
        for rep in 0..p.repeats as u64 {
            let seed = r.config.seed + rep;
            let data = r.generation_spec(n, 0.0, p.window_stride);
            jobs.push((PredictorConfig::lstm_ae(p.units).with_epochs(p.epochs).with_seed(seed), data.clone()));
            jobs.push((gnn_config(r, p.units).with_epochs(p.epochs).with_seed(seed), data));
        }
    }
    let models = r.predictors(&jobs)?;
    let test = r.test_windows(0.0)?;
    let mut table = TextTable::new(&["episodes", "LSTM MAE", "GNN-LSTM MAE", "LSTM MAE(theta)", "GNN MAE(theta)"]);
    let mut records = Vec::new();
    let mut means = Vec::new();
    for (i, &n) in p.sample_sizes.iter().enumerate() {
        let cell = &models[i * 2 * p.repeats..(i + 1) * 2 * p.repeats];
        let mut lstm = Vec::new();
        let mut gnn = Vec::new();
        for pair in cell.chunks(2) {
            lstm.push(evaluate_predictor(&pair[0].model, &test)?);
            gnn.push(evaluate_predictor(&pair[1].model, &test)?);
        }
        let avg = |v: &[PredictionMetrics], f: fn(&PredictionMetrics) -> f64| v.iter().map(f).sum::<f64>() / v.len() as f64;
        let (l, g) = (avg(&lstm, |m| m.mae_mean()), avg(&gnn, |m| m.mae_mean()));
        let (lt, gt) = (avg(&lstm, |m| m.mae_theta), avg(&gnn, |m| m.mae_theta));
        means.push((n, l, g));
        table.row(vec![n.to_string(), fmt_sci(l), fmt_sci(g), fmt_sci(lt), fmt_sci(gt)]);
        records.push(json!({
            "episodes": n,
            "repeats": p.repeats,
            "lstm": {"mae_mean": l, "mae_theta": lt, "runs": lstm.iter().map(metrics_json).collect::<Vec<_>>()},
            "gnn_lstm": {"mae_mean": g, "mae_theta": gt, "runs": gnn.iter().map(metrics_json).collect::<Vec<_>>()},
            "train_seconds": cell.iter().map(|m| m.train_seconds).sum::<f64>(),
        }));
    }
    let mut checks = Vec::new();
    for &(n, l, g) in &means {
        checks.push(CheckOutcome::new(&format!("GNN-LSTM below LSTM at {n} episodes"), g < l, format!("{g:.3e} < {l:.3e}")));
    }
    let decreasing = means.windows(2).all(|w| w[1].2 < w[0].2);
    let trail: Vec<String> = means.iter().map(|m| format!("{:.3e}", m.2)).collect();
    checks.push(CheckOutcome::new("GNN-LSTM MAE decreases with sample size", decreasing, trail.join(" > ")));
    Ok(report(r, TableId::SampleSize, records, table.render(), checks, start))
}

fn detection_predictors(r: &Runner) -> Vec<(PredictorConfig, crate::dataset::GenerationSpec)> {
    let d = &r.config.detection;
    let mut jobs: Vec<_> = d.lstm_units.iter().map(|&u| r.detection_job(PredictorConfig::lstm_ae(u), 0.0)).collect();
    jobs.push(r.detection_job(gnn_config(r, d.gnn_units), 0.0));
    jobs
}

fn group_row(pred: &TrainedPredictor, out: &DetectionOutcome, table: &mut TextTable, records: &mut Vec<serde_json::Value>, extra: serde_json::Value) {
    for g in &out.groups {
        let m = &g.metrics;
        table.row(vec![pred.label(), g.group.clone(), fmt_acc(m.accuracy), fmt_acc(m.f1), fmt_acc(m.precision), fmt_acc(m.recall)]);
        let mut rec = json!({
            "predictor": pred.label(),
            "group": g.group,
            "accuracy": m.accuracy,
            "f1": m.f1,
            "precision": m.precision,
            "recall": m.recall,
            "counts": m.counts,
        });
        if let (Some(o), Some(e)) = (rec.as_object_mut(), extra.as_object()) {
            o.extend(e.clone());
        }
        records.push(rec);
    }
}

/// Mean accuracy over the per-m groups.
fn mean_over_m(out: &DetectionOutcome) -> f64 {
    let v: Vec<f64> = out.groups.iter().filter(|g| g.group != "all").map(|g| g.metrics.accuracy).collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn monotone(out: &DetectionOutcome, ms: std::ops::RangeInclusive<usize>, rising: bool, tol: f64) -> (bool, String) {
    let acc: Vec<(usize, f64)> = ms.filter_map(|m| out.accuracy(&m.to_string()).map(|a| (m, a))).collect();
    let ok = acc.windows(2).all(|w| if rising { w[1].1 >= w[0].1 - tol } else { w[1].1 <= w[0].1 + tol });
    (ok, acc.iter().map(|(m, a)| format!("m={m}:{a:.4}")).collect::<Vec<_>>().join(" "))
}

fn mode_table(r: &Runner, mode: DeployMode) -> Result<TableReport> {
    let start = Instant::now();
    let d = &r.config.detection;
    let ck = &r.config.checks;
    let n_p = crate::dataset::OBS_STEPS;
    let preds = r.predictors(&detection_predictors(r))?;
    let spec = r.detection_spec(mode, 0);
    let t_windows = Instant::now();
    let windows = build_detection_dataset(&r.grid, &spec)?;
    let window_seconds = t_windows.elapsed().as_secs_f64();
    let mut table = TextTable::new(&["predictor", "m", "accuracy", "F1", "precision", "recall"]);
    let mut records = Vec::new();
    let mut outcomes = Vec::new();
    for (i, p) in preds.iter().enumerate() {
        let t0 = Instant::now();
        let errors = errors_for(p, &windows)?;
        let hp = r.detector_hyperparams(&p.model.config, r.config.seed);
        let out = train_and_evaluate(&windows, &errors, &hp, d.train_fraction, spec.seed, GroupBy::M, None, &p.model.fingerprint())?;
        let seconds = t0.elapsed().as_secs_f64();
        group_row(p, &out, &mut table, &mut records, json!({"shuffled": false}));
        if i == 0 && mode == DeployMode::Sliding {
            let mut runs = Vec::new();
            for k in 0..BASELINE_PERMUTATIONS {
                let base = train_and_evaluate(&windows, &errors, &hp, d.train_fraction, spec.seed, GroupBy::M, Some(k), &p.model.fingerprint())?;
                runs.push(base.accuracy("all").unwrap_or(f64::NAN));
            }
            let acc = mean_std(&runs).0;
            table.row(vec![format!("{} shuffled", p.label()), "all".into(), fmt_acc(acc), String::new(), String::new(), String::new()]);
            records.push(json!({"predictor": p.label(), "group": "all", "accuracy": acc, "shuffled": true, "permutations": runs}));
            outcomes.push((out, seconds, Some(acc)));
        } else {
            outcomes.push((out, seconds, None));
        }
    }
    let primary = &outcomes[0].0;
    let label = preds[0].label();
    let acc = |m: usize| primary.accuracy(&m.to_string()).unwrap_or(f64::NAN);
    let mut checks = Vec::new();
    match mode {
        DeployMode::Sliding => {
            checks.push(CheckOutcome::new(&format!("{label} m=0 accuracy"), acc(0) >= ck.sliding_m0_min, format!("{:.4} >= {}", acc(0), ck.sliding_m0_min)));
            checks.push(CheckOutcome::new(&format!("{label} m={n_p} accuracy"), acc(n_p) >= ck.sliding_m5_min, format!("{:.4} >= {}", acc(n_p), ck.sliding_m5_min)));
            let (ok, trail) = monotone(primary, 0..=n_p, false, ck.monotone_tolerance);
            checks.push(CheckOutcome::new("accuracy non-increasing in m", ok, trail));
            let total = preds[0].train_seconds + window_seconds + outcomes[0].1;
            records.push(json!({"kind": "runtime", "predictor": label, "seconds": total, "window_seconds": window_seconds}));
            checks.push(CheckOutcome::new(
                &format!("{label} runtime including training"),
                total <= ck.max_sliding_seconds,
                format!("{total:.1} s <= {:.0} s", ck.max_sliding_seconds),
            ));
            if let Some(b) = outcomes[0].2 {
                checks.push(CheckOutcome::new(
                    "shuffled-label baseline",
                    (b - ck.baseline_accuracy).abs() <= ck.baseline_tolerance,
                    format!("{b:.4} within {} of {}", ck.baseline_tolerance, ck.baseline_accuracy),
                ));
            }
        }
        DeployMode::Cyclic => {
            checks.push(CheckOutcome::new(&format!("{label} m={n_p} accuracy"), acc(n_p) >= ck.cyclic_m5_min, format!("{:.4} >= {}", acc(n_p), ck.cyclic_m5_min)));
            checks.push(CheckOutcome::new(&format!("{label} m=1 accuracy"), acc(1) <= ck.cyclic_m1_max, format!("{:.4} <= {}", acc(1), ck.cyclic_m1_max)));
            let (ok, trail) = monotone(primary, 1..=n_p, true, ck.monotone_tolerance);
            checks.push(CheckOutcome::new("accuracy non-decreasing in m", ok, trail));
        }
    }
    if d.lstm_units.len() >= 2 {
        let (a, b) = (mean_over_m(primary), mean_over_m(&outcomes[1].0));
        checks.push(CheckOutcome::new(
            &format!("{label} at least {} over m", preds[1].label()),
            a >= b - ck.coupling_margin,
            format!("{a:.4} >= {b:.4} - {}", ck.coupling_margin),
        ));
    }
    let id = if mode == DeployMode::Sliding { TableId::Sliding } else { TableId::Cyclic };
    Ok(report(r, id, records, table.render(), checks, start))
}

pub fn sliding(r: &Runner) -> Result<TableReport> {
    mode_table(r, DeployMode::Sliding)
}

pub fn cyclic(r: &Runner) -> Result<TableReport> {
    mode_table(r, DeployMode::Cyclic)
}

pub fn position(r: &Runner) -> Result<TableReport> {
    let start = Instant::now();
    let d = &r.config.detection;
    let ck = &r.config.checks;
    let n_p = crate::dataset::OBS_STEPS;
    let pred = r.predictor_from(r.detection_job(PredictorConfig::lstm_ae(d.lstm_units[0]), 0.0))?;
    let mut spec = r.detection_spec(DeployMode::Cyclic, 1);
    spec.pattern = AttackPattern::OneOf((1..=n_p).collect());
    let windows = build_detection_dataset(&r.grid, &spec)?;
    let errors = errors_for(&pred, &windows)?;
    let hp = r.detector_hyperparams(&pred.model.config, r.config.seed);
    let out = train_and_evaluate(&windows, &errors, &hp, d.train_fraction, spec.seed, GroupBy::Position, None, &pred.model.fingerprint())?;
    let mut table = TextTable::new(&["predictor", "position", "accuracy", "F1", "precision", "recall"]);
    let mut records = Vec::new();
    group_row(&pred, &out, &mut table, &mut records, json!({}));
    let acc = |k: usize| out.accuracy(&format!("t-{k}")).unwrap_or(f64::NAN);
    let mid = n_p.div_ceil(2);
    let checks = vec![
        CheckOutcome::new("accuracy at t-1", acc(1) >= ck.position_first_min, format!("{:.4} >= {}", acc(1), ck.position_first_min)),
        CheckOutcome::new(&format!("accuracy at t-{n_p}"), acc(n_p) <= ck.position_last_max, format!("{:.4} <= {}", acc(n_p), ck.position_last_max)),
        CheckOutcome::new(
            &format!("strictly decreasing over t-1, t-{mid}, t-{n_p}"),
            acc(1) > acc(mid) && acc(mid) > acc(n_p),
            format!("{:.4} > {:.4} > {:.4}", acc(1), acc(mid), acc(n_p)),
        ),
    ];
    Ok(report(r, TableId::Position, records, table.render(), checks, start))
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

pub fn noisy_detection(r: &Runner) -> Result<TableReport> {
    let start = Instant::now();
    let d = &r.config.detection;
    let units = d.lstm_units[0];
    let preds = r.predictors(&[r.detection_job(PredictorConfig::lstm_ae(units), 0.0), r.detection_job(PredictorConfig::lstm_ae(units), d.noisy_sigma)])?;
    let mut table = TextTable::new(&["mode", "sigma", "mean accuracy", "std", "runs"]);
    let mut records = Vec::new();
    let mut checks = Vec::new();
    for mode in [DeployMode::Sliding, DeployMode::Cyclic] {
        let mut summary = Vec::new();
        for (pred, sigma) in preds.iter().zip([0.0, d.noisy_sigma]) {
            let mut accs = Vec::new();
            for run in 0..d.noisy_runs as u64 {
                let mut spec = r.detection_spec(mode, 100 + run);
                spec.sigma = sigma;
                let windows = build_detection_dataset(&r.grid, &spec)?;
                let errors = errors_for(pred, &windows)?;
                let hp = r.detector_hyperparams(&pred.model.config, r.config.seed + run);
                let out = train_and_evaluate(&windows, &errors, &hp, d.train_fraction, spec.seed, GroupBy::M, None, &pred.model.fingerprint())?;
                accs.push(out.accuracy("all").unwrap_or(f64::NAN));
            }
            let (mean, std) = mean_std(&accs);
            table.row(vec![mode.to_string(), format!("{sigma}"), fmt_acc(mean), fmt_acc(std), accs.len().to_string()]);
            records.push(json!({"mode": mode.to_string(), "sigma": sigma, "predictor": pred.label(), "accuracies": accs, "mean": mean, "std": std}));
            summary.push((mean, std));
        }
        let ((cm, cs), (nm, ns)) = (summary[0], summary[1]);
        checks.push(CheckOutcome::new(&format!("{mode}: noisy mean below clean"), nm < cm, format!("{nm:.4} < {cm:.4}")));
        checks.push(CheckOutcome::new(&format!("{mode}: noisy std above clean"), ns > cs, format!("{ns:.4} > {cs:.4}")));
    }
    Ok(report(r, TableId::NoisyDetection, records, table.render(), checks, start))
}

pub fn multiclass(r: &Runner) -> Result<TableReport> {
    let start = Instant::now();
    let d = &r.config.detection;
    let ck = &r.config.checks;
    let n = r.grid.n_buses();
    let pred = r.predictor_from(r.detection_job(PredictorConfig::lstm_ae(d.lstm_units[0]), 0.0))?;
    let mut spec = r.detection_spec(DeployMode::Cyclic, 2);
    spec.n_benign = d.multiclass_per_class;
    spec.n_adversarial = d.multiclass_per_class * n;
    spec.buses = (0..n).collect();
    spec.pattern = AttackPattern::Fixed(d.multiclass_m);
    let windows = build_detection_dataset(&r.grid, &spec)?;
    let errors = errors_for(&pred, &windows)?;
    let classes: Vec<usize> = windows.iter().map(|w| w.class(n)).collect();
    let (tr, te) = train_test_split(windows.len(), d.train_fraction, spec.seed);
    let mut hp = DetectorHyperparams::localizer().with_seed(r.config.seed);
    hp.epochs = d.detector_epochs;
    let e_tr: Vec<_> = tr.iter().map(|&i| errors[i].clone()).collect();
    let c_tr: Vec<_> = tr.iter().map(|&i| classes[i]).collect();
    let det = train_multiclass_localizer(&e_tr, &c_tr, n + 1, &hp, &pred.model.fingerprint())?;
    let e_te: Vec<_> = te.iter().map(|&i| errors[i].clone()).collect();
    let c_te: Vec<_> = te.iter().map(|&i| classes[i]).collect();
    let mm = multiclass_metrics(&det.classify(&e_te)?, &c_te, n + 1);
    let mut table = TextTable::new(&["class", "F1", "precision", "recall"]);
    let mut records = Vec::new();
    for (c, m) in mm.per_class.iter().enumerate() {
        let name = if c == n { "benign".to_string() } else { format!("bus {c}") };
        table.row(vec![name.clone(), fmt_acc(m.f1), fmt_acc(m.precision), fmt_acc(m.recall)]);
        records.push(json!({"class": name, "f1": m.f1, "precision": m.precision, "recall": m.recall, "counts": m.counts}));
    }
    table.row(vec!["overall accuracy".into(), fmt_acc(mm.accuracy), String::new(), String::new()]);
    records.push(json!({"class": "overall", "accuracy": mm.accuracy, "confusion": mm.confusion}));
    let bus_f1: Vec<f64> = mm.per_class[..n].iter().map(|m| m.f1).collect();
    let mut sorted = bus_f1.clone();
    sorted.sort_by(f64::total_cmp);
    let median = if n % 2 == 1 { sorted[n / 2] } else { 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]) };
    let (weak, strong) = (ck.multiclass_weak_bus, ck.multiclass_strong_bus);
    let min = sorted[0];
    let checks = vec![
        CheckOutcome::new("overall accuracy", mm.accuracy >= ck.multiclass_accuracy_min, format!("{:.4} >= {}", mm.accuracy, ck.multiclass_accuracy_min)),
        CheckOutcome::new(
            &format!("bus {weak} has the lowest F1"),
            bus_f1.get(weak).is_some_and(|&f| f <= min),
            format!("{:.4} vs min {min:.4}", bus_f1.get(weak).copied().unwrap_or(f64::NAN)),
        ),
        CheckOutcome::new(
            &format!("bus {strong} F1 at least the median"),
            bus_f1.get(strong).is_some_and(|&f| f >= median),
            format!("{:.4} >= {median:.4}", bus_f1.get(strong).copied().unwrap_or(f64::NAN)),
        ),
    ];
    Ok(report(r, TableId::Multiclass, records, table.render(), checks, start))
}
