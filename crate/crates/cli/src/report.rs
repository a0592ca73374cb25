//! Evaluation outputs: per-(model, site) CSV, the model × site grid,
//! per-region predictions, and per-round metric series.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ucfed_core::exam::Exam;
use ucfed_core::fed::checkpoint::{latest_checkpoint, list_checkpoints};
use ucfed_core::fed::select::{metrics_record, report_metrics, METRIC_COLUMNS};
use ucfed_core::fed::{load_checkpoint, TrainConfig};
use ucfed_core::losses::TERM_NAMES;
use ucfed_core::metrics::{evaluate, EvalReport};
use ucfed_core::ucnet::ModelParams;

/// A checkpointed model in whichever precision it was saved.
pub enum AnyModel {
    F32(ModelParams<f32>),
    F64(ModelParams<f64>),
}

impl AnyModel {
    pub fn evaluate(&self, exams: &[Exam], cfg: &TrainConfig) -> Result<EvalReport> {
        Ok(match self {
            AnyModel::F32(m) => evaluate(m, exams, cfg)?,
            AnyModel::F64(m) => evaluate(m, exams, cfg)?,
        })
    }
}

/// Loads a checkpoint file, or the latest checkpoint when `path` is a directory.
pub fn load_any(path: &Path) -> Result<(u32, AnyModel)> {
    let file = if path.is_dir() {
        latest_checkpoint(path)
            .with_context(|| format!("no checkpoints in {}", path.display()))?
            .1
    } else {
        path.to_path_buf()
    };
    match load_checkpoint::<f32>(&file) {
        Ok(rec) => Ok((rec.round, AnyModel::F32(rec.model))),
        Err(first) => match load_checkpoint::<f64>(&file) {
            Ok(rec) => Ok((rec.round, AnyModel::F64(rec.model))),
            Err(_) => Err(first).with_context(|| format!("loading {}", file.display())),
        },
    }
}

pub struct EvalRow {
    pub model: String,
    pub site: String,
    pub split: String,
    pub report: EvalReport,
}

fn num(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v:.6}")
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, num)
}

fn writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))
}

pub fn write_eval_csv(path: &Path, rows: &[EvalRow]) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = vec!["model", "site", "split", "exams", "tp", "tn", "fp", "fn", "accuracy", "tnr", "tpr", "iou"];
    header.extend(TERM_NAMES);
    header.extend(["total", "summary"]);
    w.write_record(&header)?;
    for r in rows {
        let c = &r.report.confusion;
        let mut rec = vec![
            r.model.clone(),
            r.site.clone(),
            r.split.clone(),
            r.report.exams.len().to_string(),
            c.tp.to_string(),
            c.tn.to_string(),
            c.fp.to_string(),
            c.fn_.to_string(),
            opt(c.accuracy()),
            opt(c.tnr()),
            opt(c.tpr()),
            num(r.report.iou()),
        ];
        rec.extend(r.report.loss.terms().iter().map(|&v| num(v)));
        rec.push(num(r.report.loss.total));
        rec.push(c.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Rows are models, columns are test sites; cells read like "68.0% [0.74, 0.63]".
pub fn write_grid_csv(path: &Path, rows: &[EvalRow], models: &[String], sites: &[String]) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = vec!["model".to_string()];
    header.extend(sites.iter().cloned());
    w.write_record(&header)?;
    for m in models {
        let mut rec = vec![m.clone()];
        for s in sites {
            let cell = rows
                .iter()
                .find(|r| &r.model == m && &r.site == s)
                .map_or_else(String::new, |r| r.report.confusion.to_string());
            rec.push(cell);
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_predictions_csv(path: &Path, rows: &[EvalRow]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["model", "site", "exam", "region", "truth_grade", "predicted", "zhat"])?;
    for r in rows {
        for e in &r.report.exams {
            for p in &e.predictions {
                let zhat: Vec<String> = p.zhat.iter().map(|v| format!("{v:.6}")).collect();
                w.write_record([
                    r.model.clone(),
                    r.site.clone(),
                    e.exam_id.clone(),
                    p.region.to_string(),
                    p.truth_grade.to_string(),
                    u8::from(p.predicted).to_string(),
                    zhat.join(" "),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Evaluates every checkpoint in `dir` on `exams`, one metrics row per round.
pub fn write_series(path: &Path, dir: &Path, exams: &[Exam], split: &str, cfg: &TrainConfig) -> Result<usize> {
    let checkpoints = list_checkpoints(dir);
    if checkpoints.is_empty() {
        bail!("no checkpoints in {}", dir.display());
    }
    let mut w = writer(path)?;
    w.write_record(METRIC_COLUMNS)?;
    for (round, file) in &checkpoints {
        let (_, model) = load_any(file)?;
        let report = model.evaluate(exams, cfg)?;
        w.write_record(metrics_record(*round, split, &report_metrics(&report)))?;
    }
    w.flush()?;
    Ok(checkpoints.len())
}

/// A gnuplot script drawing accuracy and IoU against round for each series.
pub fn write_plot_script(path: &Path, series: &[PathBuf]) -> Result<()> {
    let acc = METRIC_COLUMNS.iter().position(|c| *c == "accuracy").expect("column") + 1;
    let iou = METRIC_COLUMNS.iter().position(|c| *c == "iou").expect("column") + 1;
    let mut s = String::from(
        "set datafile separator ','\nset key outside\nset xlabel 'round'\nset terminal pngcairo size 1000,500\n",
    );
    s.push_str("set output 'metrics.png'\nset multiplot layout 1,2\n");
    for (col, label) in [(acc, "region accuracy"), (iou, "lesion IoU")] {
        let plots: Vec<String> = series
            .iter()
            .map(|p| {
                let name = p.file_name().unwrap_or_default().to_string_lossy();
                format!("'{name}' using 1:{col} with lines title '{}'", name.trim_end_matches(".csv"))
            })
            .collect();
        s.push_str(&format!("set title '{label}'\nplot {}\n", plots.join(", ")));
    }
    s.push_str("unset multiplot\n");
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}
