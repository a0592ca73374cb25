//! Finite-difference audit of every loss on randomized exams.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use ucfed_autograd::{grad_check_stencil, AutogradError, Dense, GradCheckReport, Graph, Stencil, Var};

use crate::exam::{Exam, ExamMeta};
use crate::losses::{
    balanced_bce, dice_loss, ggmap_loss, hist_high_loss, hist_strong_loss, multitask_loss, region_classifier_loss,
    LossConfig, LossError, MultiTaskWeights,
};
use crate::rng::stream;
use crate::supervision::{GradeOneHot, RegionSupervision, SupervisionMatrix, UNKNOWN_GRADE};
use crate::ucnet::{self, BoundParams, ModelParams, UCNetConfig, REGION_BIAS, REGION_WEIGHT};

pub const LOSS_NAMES: [&str; 7] = [
    "dice",
    "balanced_bce",
    "ggmap",
    "hist_strong",
    "hist_high",
    "region_classifier",
    "multitask",
];
pub const AUDIT_EXTENT: [usize; 3] = [8, 8, 4];
/// Step for the smooth head losses, used with a five-point stencil.
pub const HEAD_STEP: f64 = 1e-3;
/// Step for the end-to-end network check. Its ReLU kinks make the objective
/// only piecewise smooth; steps that straddle one are reported, not scored.
pub const MODEL_STEP: f64 = 1e-5;
/// Model coordinates sampled per exam for the end-to-end network check.
pub const MODEL_COORDS: usize = 24;

#[derive(Debug, Clone, PartialEq)]
pub struct AuditRow {
    pub loss: &'static str,
    pub classes: usize,
    pub exams: usize,
    pub max_rel_error: f64,
    pub checked: usize,
    pub zero_gradient: usize,
    /// Coordinates skipped because the step straddled a ReLU or clamp kink.
    pub kinks: usize,
}

fn flatten(e: LossError) -> AutogradError {
    match e {
        LossError::Graph(g) => g,
        other => AutogradError::Shape(other.to_string()),
    }
}

/// Random blobs for masks, random supervision with at least one graded
/// lesion and one graded max-grade region below the top class.
pub fn random_exam<R: Rng>(rng: &mut R, extent: [usize; 3], classes: usize) -> Exam {
    let n: usize = extent.iter().product();
    let regions = rng.gen_range(3..=6);
    let mut rows = Vec::with_capacity(regions);
    for r in 0..regions {
        let row = match r {
            0 => RegionSupervision::lesion(rng.gen_range(0..=5)),
            1 => RegionSupervision::max_grade(rng.gen_range(0..=1)),
            _ => {
                let signal = rng.gen_range(0..=2);
                let grade = if rng.gen_bool(0.25) { UNKNOWN_GRADE } else { rng.gen_range(0..=5) };
                RegionSupervision { signal, grade }
            }
        };
        rows.push(row);
    }
    let mut masks = vec![0u8; regions * n];
    for r in 0..regions {
        let p = rng.gen_range(0.05..0.4);
        let m = &mut masks[r * n..(r + 1) * n];
        for v in m.iter_mut() {
            *v = u8::from(rng.gen_bool(p));
        }
        if m.iter().all(|&v| v == 0) {
            m[rng.gen_range(0..n)] = 1;
        }
    }
    let supervision = SupervisionMatrix::new(rows).expect("rows in range");
    let [x, y, z] = extent;
    Exam {
        meta: ExamMeta {
            exam_id: "audit".into(),
            profile: "audit".into(),
            spacing: [1.0; 3],
        },
        image: Dense::from_vec(vec![3, x, y, z], (0..3 * n).map(|_| rng.gen_range(-2.0..2.0)).collect()),
        gland: Dense::from_vec(vec![x, y, z], vec![1; n]),
        masks: Dense::from_vec(vec![regions, x, y, z], masks),
        grades: GradeOneHot::from_supervision(&supervision, classes),
        truth: supervision.rows().iter().map(|r| r.grade).collect(),
        supervision,
    }
}

fn bound_region(g: &mut Graph<f64>, bias: Var, classes: usize) -> BoundParams {
    let eye = Dense::from_vec(
        vec![classes, classes],
        (0..classes * classes)
            .map(|i| if i / classes == i % classes { 1.0 } else { 0.0 })
            .collect(),
    );
    let w = g.constant(eye);
    BoundParams::from_vars(BTreeMap::from([(REGION_WEIGHT.to_string(), w), (REGION_BIAS.to_string(), bias)]))
}

fn all_coords(params: &[Dense<f64>], which: &[usize]) -> Vec<(usize, usize)> {
    which
        .iter()
        .flat_map(|&p| (0..params[p].len()).map(move |i| (p, i)))
        .collect()
}

/// Checks one loss on one exam against free head inputs: lesion logits, grade
/// logits and the classifier bias. The network below the heads is covered by
/// [`check_network`].
pub fn check_loss<R: Rng>(loss: &str, exam: &Exam, rng: &mut R) -> Result<GradCheckReport, AutogradError> {
    let cfg = LossConfig::default();
    let targets = exam.targets();
    let k = exam.classes();
    let n = exam.gland.len();
    let [x, y, z] = exam.extent();
    let seg_logits = Dense::from_vec(vec![1, x, y, z], (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect());
    let gg_logits = Dense::from_vec(vec![k, x, y, z], (0..k * n).map(|_| rng.gen_range(-2.0..2.0)).collect());
    let bias = Dense::from_vec(vec![k], (0..k).map(|_| rng.gen_range(0.05..0.2)).collect());
    let params = [seg_logits, gg_logits, bias];
    let which: &[usize] = match loss {
        "dice" | "balanced_bce" => &[0],
        "ggmap" | "hist_strong" | "hist_high" => &[1],
        "region_classifier" => &[1, 2],
        "multitask" => &[0, 1, 2],
        other => return Err(AutogradError::Shape(format!("unknown loss {other}"))),
    };
    let coords = all_coords(&params, which);
    let voxels = &targets.voxels;
    let f = |g: &mut Graph<f64>, v: &[Var]| -> Result<Var, AutogradError> {
        let seg = g.sigmoid(v[0]);
        let gg = g.softmax_channels(v[1])?;
        let out = match loss {
            "multitask" => {
                let bp = bound_region(g, v[2], k);
                let outputs = ucnet::ModelOutputs { seg, gg };
                multitask_loss(g, &outputs, &bp, &targets, &MultiTaskWeights::default(), &cfg).map(|(l, _)| l)
            }
            "dice" => dice_loss(g, &targets.seg_target, seg, &cfg),
            "balanced_bce" => balanced_bce(g, &targets.seg_target, seg, &cfg),
            "ggmap" => ggmap_loss(g, gg, &targets, &cfg).map(|t| t.var),
            _ => {
                let hist = ucnet::region_histograms(g, gg, voxels, &targets.supervision).map_err(|e| flatten(e.into()))?;
                match loss {
                    "hist_strong" => hist_strong_loss(g, &hist, &targets, &cfg).map(|t| t.var),
                    "hist_high" => hist_high_loss(g, &hist, &targets, &cfg).map(|t| t.var),
                    _ => {
                        let bp = bound_region(g, v[2], k);
                        let z = ucnet::region_classify(g, &hist, &bp).map_err(|e| flatten(e.into()))?;
                        region_classifier_loss(g, &z, &hist, &targets, &cfg).map(|t| t.var)
                    }
                }
            }
        };
        out.map_err(flatten)
    };
    grad_check_stencil(f, &params, HEAD_STEP, &coords, Stencil::FivePoint)
}

/// Multi-task loss through a small full network, on sampled coordinates.
pub fn check_network<R: Rng>(exam: &Exam, rng: &mut R) -> Result<GradCheckReport, AutogradError> {
    let targets = exam.targets();
    let config = UCNetConfig {
        classes: exam.classes(),
        base_channels: 2,
        levels: 2,
        seed: rng.gen(),
        ..UCNetConfig::default()
    };
    let mut model = ModelParams::<f64>::build(config).map_err(|e| AutogradError::Shape(e.to_string()))?;
    let bias = Dense::from_vec(vec![config.classes], (0..config.classes).map(|_| rng.gen_range(0.05..0.2)).collect());
    model.set(REGION_BIAS, bias).expect("bias shape");
    let names = model.trainable_names();
    let params: Vec<Dense<f64>> = names.iter().map(|n| model.get(n).expect("trainable").clone()).collect();
    let mut coords: Vec<(usize, usize)> = (0..MODEL_COORDS)
        .map(|_| {
            let p = rng.gen_range(0..params.len());
            (p, rng.gen_range(0..params[p].len()))
        })
        .collect();
    coords.shuffle(rng);
    let frozen = model.get(REGION_WEIGHT).expect("frozen weight").clone();
    let image = exam.image_as::<f64>();
    let weights = MultiTaskWeights::default();
    let cfg = LossConfig::default();
    let f = |g: &mut Graph<f64>, v: &[Var]| -> Result<Var, AutogradError> {
        let mut vars: BTreeMap<String, Var> = names.iter().cloned().zip(v.iter().copied()).collect();
        vars.insert(REGION_WEIGHT.into(), g.constant(frozen.clone()));
        let bp = BoundParams::from_vars(vars);
        let x = g.constant(image.clone());
        let out = ucnet::forward(g, &bp, &config, x).map_err(|e| flatten(e.into()))?;
        multitask_loss(g, &out, &bp, &targets, &weights, &cfg)
            .map(|(l, _)| l)
            .map_err(flatten)
    };
    grad_check_stencil(f, &params, MODEL_STEP, &coords, Stencil::Central)
}

/// Audits every loss on `exams` random exams per class count. Exams run in
/// parallel; each has its own seeded stream.
pub fn audit_losses(seed: u64, exams: usize, classes: &[usize]) -> Result<Vec<AuditRow>, AutogradError> {
    let mut rows = Vec::new();
    for &k in classes {
        for (li, loss) in LOSS_NAMES.iter().enumerate() {
            let reports: Vec<GradCheckReport> = (0..exams)
                .into_par_iter()
                .map(|i| {
                    let mut rng = stream(seed, &[k as u64, i as u64]);
                    let exam = random_exam(&mut rng, AUDIT_EXTENT, k);
                    let mut rng = stream(seed, &[k as u64, i as u64, li as u64]);
                    check_loss(loss, &exam, &mut rng)
                })
                .collect::<Result<_, _>>()?;
            rows.push(AuditRow {
                loss,
                classes: k,
                exams,
                max_rel_error: reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max),
                checked: reports.iter().map(|r| r.checked).sum(),
                zero_gradient: reports.iter().map(|r| r.zero_gradient.len()).sum(),
                kinks: reports.iter().map(|r| r.kinks.len()).sum(),
            });
        }
    }
    Ok(rows)
}
