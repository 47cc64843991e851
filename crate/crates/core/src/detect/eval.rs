use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::classifier::{window_errors, DetectorHead, DetectorModel, ErrorVector};
use super::window::DetectionWindow;
use crate::error::{Error, Result};
use crate::predictors::PredictorModel;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub accuracy: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub counts: Confusion,
}

impl Confusion {
    pub fn from_labels(predicted: &[bool], actual: &[bool]) -> Self {
        let mut c = Self::default();
        for (&p, &a) in predicted.iter().zip(actual) {
            match (p, a) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Empty denominators: precision and recall are 1 when there is nothing
    /// to get wrong (no positive calls and no positives), else 0.
    pub fn metrics(&self) -> DetectionMetrics {
        let ratio = |num: usize, den: usize, clean: bool| {
            if den > 0 {
                num as f64 / den as f64
            } else if clean {
                1.0
            } else {
                0.0
            }
        };
        let precision = ratio(self.tp, self.tp + self.fp, self.fn_ == 0);
        let recall = ratio(self.tp, self.tp + self.fn_, self.fp == 0);
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        let accuracy = ratio(self.tp + self.tn, self.total(), true);
        DetectionMetrics { accuracy, f1, precision, recall, counts: *self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupBy {
    /// Adversarial windows by attacked observation steps, each with all benign windows.
    M,
    /// Single-position adversarial windows by offset, each with all benign windows.
    Position,
    /// Adversarial windows by attacked bus, each with all benign windows.
    Bus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub group: String,
    pub metrics: DetectionMetrics,
}

fn group_key(w: &DetectionWindow, by: GroupBy) -> Option<String> {
    if !w.adversarial {
        return None;
    }
    match by {
        GroupBy::M => Some(w.m.to_string()),
        GroupBy::Position => {
            let obs: Vec<usize> = w.positions.iter().copied().filter(|&k| k >= 1).collect();
            (obs.len() == 1).then(|| format!("t-{}", obs[0]))
        }
        GroupBy::Bus => w.attacked_bus.map(|b| b.to_string()),
    }
}

/// Binary metrics overall (`"all"`) and per group from predicted labels.
pub fn grouped_metrics(windows: &[DetectionWindow], predicted: &[bool], by: GroupBy) -> Vec<GroupMetrics> {
    let actual: Vec<bool> = windows.iter().map(|w| w.adversarial).collect();
    let mut benign = Confusion::default();
    let mut groups: BTreeMap<(usize, String), Confusion> = BTreeMap::new();
    for (w, &p) in windows.iter().zip(predicted) {
        if !w.adversarial {
            if p {
                benign.fp += 1;
            } else {
                benign.tn += 1;
            }
        } else if let Some(k) = group_key(w, by) {
            let c = groups.entry((k.len(), k)).or_default();
            if p {
                c.tp += 1;
            } else {
                c.fn_ += 1;
            }
        }
    }
    let mut out = vec![GroupMetrics { group: "all".into(), metrics: Confusion::from_labels(predicted, &actual).metrics() }];
    for ((_, k), mut c) in groups {
        c.fp += benign.fp;
        c.tn += benign.tn;
        out.push(GroupMetrics { group: k, metrics: c.metrics() });
    }
    out
}

/// Runs the composite detector over `windows` and reports grouped metrics.
pub fn evaluate_detector(
    detector: &DetectorModel,
    predictor: &PredictorModel,
    windows: &[DetectionWindow],
    by: GroupBy,
) -> Result<Vec<GroupMetrics>> {
    if windows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if detector.head != DetectorHead::Binary {
        return Err(Error::InvalidArgument("grouped binary evaluation needs a binary detector".into()));
    }
    let id = predictor.fingerprint();
    if id != detector.predictor_id {
        return Err(Error::ModelMismatch { expected: detector.predictor_id.clone(), got: id });
    }
    let errors = window_errors(predictor, windows)?;
    let predicted: Vec<bool> = detector.classify(&errors)?.into_iter().map(|c| c == 1).collect();
    Ok(grouped_metrics(windows, &predicted, by))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MulticlassMetrics {
    pub accuracy: f64,
    /// One-vs-rest metrics per class id.
    pub per_class: Vec<DetectionMetrics>,
    /// `confusion[actual][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

pub fn multiclass_metrics(predicted: &[usize], actual: &[usize], n_classes: usize) -> MulticlassMetrics {
    let mut confusion = vec![vec![0usize; n_classes]; n_classes];
    for (&p, &a) in predicted.iter().zip(actual) {
        confusion[a][p] += 1;
    }
    let total = predicted.len();
    let correct: usize = (0..n_classes).map(|c| confusion[c][c]).sum();
    let per_class = (0..n_classes)
        .map(|c| {
            let tp = confusion[c][c];
            let fn_ = confusion[c].iter().sum::<usize>() - tp;
            let fp = (0..n_classes).map(|a| confusion[a][c]).sum::<usize>() - tp;
            Confusion { tp, fp, fn_, tn: total - tp - fp - fn_ }.metrics()
        })
        .collect();
    MulticlassMetrics { accuracy: if total == 0 { 1.0 } else { correct as f64 / total as f64 }, per_class, confusion }
}

fn positions_field(w: &DetectionWindow) -> String {
    w.positions.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(";")
}

/// CSV rows `label,m,positions,e_0..e_{d-1}`; positions are `;`-separated
/// offsets back from the inference step.
pub fn write_error_csv<W: Write>(mut w: W, windows: &[DetectionWindow], errors: &[ErrorVector]) -> Result<()> {
    let d = errors.first().map_or(0, |e| e.0.len());
    let header: Vec<String> = ["label", "m", "positions"].iter().map(|s| s.to_string()).chain((0..d).map(|i| format!("e_{i}"))).collect();
    writeln!(w, "{}", header.join(","))?;
    for (win, e) in windows.iter().zip(errors) {
        let label = if win.adversarial { "adversarial" } else { "benign" };
        write!(w, "{label},{},{}", win.m, positions_field(win))?;
        for x in &e.0 {
            write!(w, ",{x:?}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn export_error_vectors(windows: &[DetectionWindow], predictor: &PredictorModel, path: impl AsRef<Path>) -> Result<()> {
    let errors = window_errors(predictor, windows)?;
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_error_csv(f, windows, &errors)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorRow {
    pub adversarial: bool,
    pub m: usize,
    pub positions: Vec<usize>,
    pub error: ErrorVector,
}

pub fn parse_error_csv(text: &str) -> Result<Vec<ErrorRow>> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::Parse { line: 1, msg: "missing header".into() })?;
    if !header.starts_with("label,m,positions") {
        return Err(Error::Parse { line: 1, msg: "unexpected header".into() });
    }
    lines
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let err = |msg: &str| Error::Parse { line: i + 1, msg: msg.to_string() };
            let mut f = l.split(',');
            let adversarial = match f.next() {
                Some("adversarial") => true,
                Some("benign") => false,
                _ => return Err(err("bad label")),
            };
            let m = f.next().and_then(|s| s.parse().ok()).ok_or_else(|| err("bad m"))?;
            let pos = f.next().ok_or_else(|| err("missing positions"))?;
            let positions =
                if pos.is_empty() { Ok(Vec::new()) } else { pos.split(';').map(|p| p.parse().map_err(|_| err("bad position"))).collect() }?;
            let e = f.map(|s| s.parse::<f64>().map_err(|_| err("bad error value"))).collect::<Result<Vec<_>>>()?;
            Ok(ErrorRow { adversarial, m, positions, error: ErrorVector(e) })
        })
        .collect()
}
