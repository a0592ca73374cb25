//! Segmentation overlap and region-wise significant-cancer classification.

use std::fmt;

use rayon::prelude::*;
use ucfed_autograd::{Element, Graph};

use crate::exam::Exam;
use crate::fed::train::TrainConfig;
use crate::losses::{multitask_loss, LossBreakdown, LossError};
use crate::supervision::{grade_class, significant_class, SupervisionMatrix, SIGNAL_LESION};
use crate::ucnet::{forward, region_classify, region_histograms, ModelError, ModelParams};

pub const SEG_THRESHOLD: f64 = 0.5;

/// Intersection and union voxel counts of a binarized prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Overlap {
    pub intersection: u64,
    pub union: u64,
}

impl Overlap {
    pub fn measure(pred: &[f64], truth: &[u8], threshold: f64) -> Self {
        assert_eq!(pred.len(), truth.len(), "prediction and truth differ in size");
        let mut o = Overlap::default();
        for (&p, &t) in pred.iter().zip(truth) {
            let (p, t) = (p > threshold, t != 0);
            o.intersection += u64::from(p && t);
            o.union += u64::from(p || t);
        }
        o
    }

    pub fn add(&mut self, other: Overlap) {
        self.intersection += other.intersection;
        self.union += other.union;
    }

    /// 1 when both masks are empty.
    pub fn iou(&self) -> f64 {
        if self.union == 0 {
            1.0
        } else {
            self.intersection as f64 / self.union as f64
        }
    }
}

/// `|pred > threshold ∩ truth| / |pred > threshold ∪ truth|`.
pub fn iou(pred: &[f64], truth: &[u8], threshold: f64) -> f64 {
    Overlap::measure(pred, truth, threshold).iou()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Confusion {
    pub fn record(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (false, false) => self.tn += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
        }
    }

    pub fn add(&mut self, o: Confusion) {
        self.tp += o.tp;
        self.tn += o.tn;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    fn ratio(num: u64, den: u64) -> Option<f64> {
        (den > 0).then(|| num as f64 / den as f64)
    }

    pub fn accuracy(&self) -> Option<f64> {
        Self::ratio(self.tp + self.tn, self.total())
    }

    pub fn tnr(&self) -> Option<f64> {
        Self::ratio(self.tn, self.tn + self.fp)
    }

    pub fn tpr(&self) -> Option<f64> {
        Self::ratio(self.tp, self.tp + self.fn_)
    }
}

/// `68.0% [0.74, 0.63]`, or `n/a` with nothing to evaluate.
impl fmt::Display for Confusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rate = |r: Option<f64>| r.map_or("n/a".to_string(), |v| format!("{v:.2}"));
        match self.accuracy() {
            None => write!(f, "n/a"),
            Some(acc) => write!(f, "{:.1}% [{}, {}]", acc * 100.0, rate(self.tnr()), rate(self.tpr())),
        }
    }
}

/// A region is called significant when any bin at or above the significant
/// class fires.
pub fn region_decision(zhat: &[f64]) -> bool {
    let k = zhat.len();
    zhat[significant_class(k)..].iter().any(|&z| z > 0.0)
}

/// Confusion counts over graded lesion regions. `decisions[r]` is `None` for
/// regions the model did not score.
pub fn region_accuracy(decisions: &[Option<bool>], grades: &[i8], sup: &SupervisionMatrix, classes: usize) -> Confusion {
    let sig = significant_class(classes);
    let mut c = Confusion::default();
    for (r, row) in sup.rows().iter().enumerate() {
        if row.signal != SIGNAL_LESION {
            continue;
        }
        if let (Some(pred), Some(class)) = (decisions[r], grade_class(grades[r], classes)) {
            c.record(pred, class >= sig);
        }
    }
    c
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionPrediction {
    pub region: usize,
    pub zhat: Vec<f64>,
    pub predicted: bool,
    pub truth_grade: i8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExamEval {
    pub exam_id: String,
    /// `None` when the exam carries no usable supervision.
    pub breakdown: Option<LossBreakdown>,
    pub overlap: Overlap,
    pub confusion: Confusion,
    pub predictions: Vec<RegionPrediction>,
}

/// Forward pass, loss terms, segmentation overlap and lesion decisions for one
/// exam. Lesions are scored against the exam's true grades.
pub fn evaluate_exam<T: Element>(model: &ModelParams<T>, exam: &Exam, cfg: &TrainConfig) -> Result<ExamEval, LossError> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let x = g.constant(exam.image_as::<T>());
    let out = forward(&mut g, &bound, model.config(), x)?;
    let targets = exam.targets();
    let breakdown = match multitask_loss(&mut g, &out, &bound, &targets, &cfg.weights, &cfg.loss) {
        Ok((_, bd)) => Some(bd),
        Err(LossError::NoSupervision) | Err(LossError::Model(ModelError::NoSupervisedRegion)) => None,
        Err(e) => return Err(e),
    };
    let seg: Vec<f64> = g.value(out.seg).data().iter().map(|&v| Element::to_f64(v)).collect();
    let truth_seg = &targets.seg_target;
    let overlap = Overlap::measure(&seg, truth_seg.data(), SEG_THRESHOLD);

    let mut decisions = vec![None; exam.regions()];
    let mut predictions = Vec::new();
    match region_histograms(&mut g, out.gg, &targets.voxels, &exam.supervision) {
        Ok(hist) => {
            let z = region_classify(&mut g, &hist, &bound)?;
            for (&r, &zv) in hist.region_ids.iter().zip(&z) {
                let zhat: Vec<f64> = g.value(zv).data().iter().map(|&v| Element::to_f64(v)).collect();
                let predicted = region_decision(&zhat);
                decisions[r] = Some(predicted);
                if exam.supervision.get(r).signal == SIGNAL_LESION {
                    predictions.push(RegionPrediction {
                        region: r,
                        zhat,
                        predicted,
                        truth_grade: exam.truth[r],
                    });
                }
            }
        }
        Err(ModelError::NoSupervisedRegion) => {}
        Err(e) => return Err(e.into()),
    }
    let confusion = region_accuracy(&decisions, &exam.truth, &exam.supervision, exam.classes());
    Ok(ExamEval {
        exam_id: exam.id().to_string(),
        breakdown,
        overlap,
        confusion,
        predictions,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub exams: Vec<ExamEval>,
    pub overlap: Overlap,
    pub confusion: Confusion,
    /// Mean loss terms over supervised exams.
    pub loss: LossBreakdown,
}

impl EvalReport {
    pub fn iou(&self) -> f64 {
        self.overlap.iou()
    }

    pub fn accuracy(&self) -> Option<f64> {
        self.confusion.accuracy()
    }
}

/// Evaluates a split; exams run in parallel and results keep input order.
pub fn evaluate<T: Element>(model: &ModelParams<T>, exams: &[Exam], cfg: &TrainConfig) -> Result<EvalReport, LossError> {
    let evals: Vec<ExamEval> = exams
        .par_iter()
        .map(|e| evaluate_exam(model, e, cfg))
        .collect::<Result<_, _>>()?;
    let mut overlap = Overlap::default();
    let mut confusion = Confusion::default();
    let mut bds = Vec::new();
    for e in &evals {
        overlap.add(e.overlap);
        confusion.add(e.confusion);
        bds.extend(e.breakdown);
    }
    Ok(EvalReport {
        loss: crate::fed::train::mean_breakdown(&bds),
        exams: evals,
        overlap,
        confusion,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_cases() {
        assert_eq!(iou(&[0.9, 0.9, 0.1], &[1, 1, 0], 0.5), 1.0);
        assert_eq!(iou(&[0.9, 0.0], &[0, 1], 0.5), 0.0);
        assert!((iou(&[0.9, 0.9, 0.0, 0.0], &[0, 1, 1, 0], 0.5) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(iou(&[0.1, 0.2], &[0, 0], 0.5), 1.0);
    }

    #[test]
    fn confusion_formatting() {
        let c = Confusion { tp: 2, fn_: 1, tn: 3, fp: 0 };
        assert_eq!(c.to_string(), "83.3% [1.00, 0.67]");
        let all = Confusion { tp: 3, tn: 2, fp: 0, fn_: 0 };
        assert_eq!(all.to_string(), "100.0% [1.00, 1.00]");
        assert_eq!(Confusion::default().to_string(), "n/a");
    }

    #[test]
    fn all_negative_signature() {
        let sup = SupervisionMatrix::from_i32(&[1, 0, 1, 3, 1, 4, 2, 4]).unwrap();
        let c = region_accuracy(&[Some(false); 4], &[0, 3, 4, 4], &sup, 2);
        assert_eq!((c.tnr(), c.tpr()), (Some(1.0), Some(0.0)));
        assert_eq!(c.total(), 3);
    }

    #[test]
    fn decision_uses_significant_bins() {
        assert!(region_decision(&[0.0, 0.2]));
        assert!(!region_decision(&[0.4, 0.0]));
        assert!(!region_decision(&[0.3, 0.3, 0.0, 0.0]));
        assert!(region_decision(&[0.0, 0.0, 0.0, 0.1]));
    }
}
