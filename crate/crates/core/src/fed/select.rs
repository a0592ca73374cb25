//! Private per-client validation log and checkpoint selection.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use thiserror::Error;
use ucfed_autograd::Element;

use super::sharable::{weights_sharable, Sharable};
use super::train::TrainConfig;
use crate::exam::Exam;
use crate::losses::TERM_NAMES;
use crate::metrics::{evaluate, EvalReport};
use crate::ucnet::ModelParams;

pub const DEFAULT_SELECT_METRIC: &str = "accuracy";

/// Columns of every metrics CSV, in order.
pub const METRIC_COLUMNS: [&str; 11] = [
    "round",
    "split",
    "region_classifier",
    "ggmap_hist",
    "ggmap",
    "segmentation",
    "total",
    "iou",
    "accuracy",
    "tnr",
    "tpr",
];

#[derive(Debug, Error)]
pub enum LogError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("evaluation failed: {0}")]
    Eval(#[from] crate::losses::LossError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationLogEntry {
    pub round: u32,
    pub client_id: u32,
    /// Metric name → value; NaN marks a metric with nothing to evaluate.
    pub metrics: BTreeMap<String, f64>,
}

/// Metric values of one evaluation, keyed by the metrics CSV column names.
pub fn report_metrics(report: &EvalReport) -> BTreeMap<String, f64> {
    let mut m = BTreeMap::new();
    for (name, v) in TERM_NAMES.iter().zip(report.loss.terms()) {
        m.insert(name.to_string(), v);
    }
    m.insert("total".into(), report.loss.total);
    m.insert("iou".into(), report.iou());
    m.insert("accuracy".into(), report.confusion.accuracy().unwrap_or(f64::NAN));
    m.insert("tnr".into(), report.confusion.tnr().unwrap_or(f64::NAN));
    m.insert("tpr".into(), report.confusion.tpr().unwrap_or(f64::NAN));
    m
}

/// One CSV record in [`METRIC_COLUMNS`] order.
pub fn metrics_record(round: u32, split: &str, metrics: &BTreeMap<String, f64>) -> Vec<String> {
    let mut rec = vec![round.to_string(), split.to_string()];
    for col in &METRIC_COLUMNS[2..] {
        let v = metrics.get(*col).copied().unwrap_or(f64::NAN);
        rec.push(if v.is_nan() { String::new() } else { format!("{v:.6}") });
    }
    rec
}

/// Append-only CSV writer; the header is written once per file.
pub fn append_metrics_csv(path: &Path, rows: &[Vec<String>]) -> Result<(), LogError> {
    let io = |source| LogError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io)?;
    }
    let fresh = !path.exists();
    let file = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
    let mut w = csv::Writer::from_writer(file);
    if fresh {
        w.write_record(METRIC_COLUMNS)?;
    }
    for r in rows {
        w.write_record(r)?;
    }
    w.flush().map_err(io)?;
    Ok(())
}

fn lower_is_better(metric: &str) -> bool {
    metric == "total" || TERM_NAMES.contains(&metric)
}

/// Round with the best value of `metric`; ties go to the earliest round.
/// Loss metrics are minimized, everything else maximized. Entries where the
/// metric is missing or NaN are ignored.
pub fn select_checkpoint(entries: &[ValidationLogEntry], metric: &str) -> Option<u32> {
    let sign = if lower_is_better(metric) { -1.0 } else { 1.0 };
    let mut best: Option<(u32, f64)> = None;
    for e in entries {
        let Some(v) = e.metrics.get(metric).copied().filter(|v| !v.is_nan()) else {
            continue;
        };
        let score = sign * v;
        let better = match best {
            None => true,
            Some((r, b)) => score > b || (score == b && e.round < r),
        };
        if better {
            best = Some((e.round, score));
        }
    }
    best.map(|(r, _)| r)
}

/// Runs private validation on a schedule, keeps the log and the best
/// candidate weights so far.
#[derive(Debug, Clone)]
pub struct Validator {
    pub client_id: u32,
    pub every: u32,
    pub metric: String,
    pub train: TrainConfig,
    val: Arc<Vec<Exam>>,
    private_dir: Option<PathBuf>,
    log: Vec<ValidationLogEntry>,
    best: Option<(u32, Sharable)>,
}

impl Validator {
    pub fn new(client_id: u32, val: Arc<Vec<Exam>>, every: u32, train: TrainConfig, private_dir: Option<PathBuf>) -> Self {
        Validator {
            client_id,
            every,
            metric: DEFAULT_SELECT_METRIC.into(),
            train,
            val,
            private_dir,
            log: Vec::new(),
            best: None,
        }
    }

    pub fn due(&self, round: u32) -> bool {
        self.every > 0 && round > 0 && round % self.every == 0 && !self.val.is_empty()
    }

    /// Validates `model` (the global model after `round` updates) when due.
    pub fn observe<T: Element>(&mut self, round: u32, model: &ModelParams<T>) -> Result<Option<&ValidationLogEntry>, LogError> {
        if !self.due(round) || self.log.last().is_some_and(|e| e.round >= round) {
            return Ok(None);
        }
        let report = evaluate(model, &self.val, &self.train)?;
        let entry = ValidationLogEntry {
            round,
            client_id: self.client_id,
            metrics: report_metrics(&report),
        };
        let weights = weights_sharable(model, round);
        if let Some(dir) = &self.private_dir {
            append_metrics_csv(&dir.join("validation.csv"), &[metrics_record(round, "val", &entry.metrics)])?;
            let cand = dir.join("candidates").join(format!("round-{round:05}.fltc"));
            let io = |source| LogError::Io {
                path: cand.clone(),
                source,
            };
            fs::create_dir_all(cand.parent().expect("has parent")).map_err(io)?;
            fs::File::create(&cand)
                .and_then(|mut f| f.write_all(&weights.encode()))
                .map_err(io)?;
        }
        self.log.push(entry);
        if select_checkpoint(&self.log, &self.metric) == Some(round) {
            self.best = Some((round, weights));
        }
        Ok(self.log.last())
    }

    pub fn log(&self) -> &[ValidationLogEntry] {
        &self.log
    }

    pub fn selected_round(&self) -> Option<u32> {
        select_checkpoint(&self.log, &self.metric)
    }

    /// Weights of the selected round.
    pub fn best(&self) -> Option<&(u32, Sharable)> {
        self.best.as_ref()
    }
}
