//! Supervision losses for heterogeneous labels and their availability-gated
//! multi-task combination.
//!
//! Every loss is a negative log-likelihood (or 1 − overlap) so the optimum is
//! a minimum. Region sets used below:
//! - R⁺ / Rα: targeted lesions (signal 1) with a known grade
//! - Rβ: max-grade rows (signal 2) with a known grade
//! - R*: any supervised row (signal ≥ 1) with a known grade

use thiserror::Error;
use ucfed_autograd::{AutogradError, Dense, Element, Graph, Var};

use crate::supervision::{GradeOneHot, SupervisionMatrix, SIGNAL_LESION, SIGNAL_MAX_GRADE};
use crate::ucnet::{self, BoundParams, ModelError, ModelOutputs, RegionHistograms};

pub const DEFAULT_EPSILON: f64 = 1e-7;
pub const DEFAULT_LAMBDA: [f64; 4] = [1.0, 0.5, 1.0, 1.0];

/// Short names of the four weighted terms, in weight order.
pub const TERM_NAMES: [&str; 4] = ["region_classifier", "ggmap_hist", "ggmap", "segmentation"];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("exam contributes no supervision")]
    NoSupervision,
    #[error("epsilon must be positive, got {0}")]
    BadEpsilon(f64),
    #[error(transparent)]
    Graph(#[from] AutogradError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl LossConfig {
    pub fn new(epsilon: f64) -> Result<Self, LossError> {
        if epsilon > 0.0 && epsilon < 0.5 {
            Ok(LossConfig { epsilon })
        } else {
            Err(LossError::BadEpsilon(epsilon))
        }
    }
}

/// λ weights and the policy mask that is ANDed with per-exam availability.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MultiTaskWeights {
    pub lambda: [f64; 4],
    pub policy: [bool; 4],
}

impl Default for MultiTaskWeights {
    fn default() -> Self {
        MultiTaskWeights {
            lambda: DEFAULT_LAMBDA,
            policy: [true; 4],
        }
    }
}

impl MultiTaskWeights {
    /// α for one exam: a term is on when the policy allows it and the exam
    /// carries the groundtruth it needs.
    pub fn alpha(&self, targets: &ExamTargets) -> [bool; 4] {
        let avail = availability(&targets.supervision);
        std::array::from_fn(|i| avail[i] && self.policy[i])
    }
}

/// Which groundtruth kinds an exam carries, in term order.
pub fn availability(sup: &SupervisionMatrix) -> [bool; 4] {
    let rows = sup.rows();
    let r_star = rows.iter().any(|r| r.signal >= SIGNAL_LESION && r.grade_known());
    let r_alpha = rows.iter().any(|r| r.signal == SIGNAL_LESION && r.grade_known());
    let r_beta = rows.iter().any(|r| r.signal == SIGNAL_MAX_GRADE && r.grade_known());
    let annotated = rows.iter().any(|r| r.signal >= SIGNAL_LESION);
    [r_star, r_alpha || r_beta, r_alpha, annotated]
}

/// Voxel-wise max of the signal-1 region masks, shaped `1×X×Y×Z`.
pub fn build_seg_target(masks: &Dense<u8>, sup: &SupervisionMatrix) -> Dense<u8> {
    let shape = masks.shape();
    let n: usize = shape[1..].iter().product();
    let mut out = vec![0u8; n];
    for (r, row) in sup.rows().iter().enumerate() {
        if row.signal != SIGNAL_LESION {
            continue;
        }
        for (o, &m) in out.iter_mut().zip(&masks.data()[r * n..(r + 1) * n]) {
            *o = (*o).max(u8::from(m != 0));
        }
    }
    let mut s = vec![1];
    s.extend_from_slice(&shape[1..]);
    Dense::from_vec(s, out)
}

/// Per-exam targets with region voxel indices precomputed.
#[derive(Debug, Clone, PartialEq)]
pub struct ExamTargets {
    pub supervision: SupervisionMatrix,
    pub grades: GradeOneHot,
    pub voxels: Vec<Vec<usize>>,
    pub seg_target: Dense<u8>,
}

impl ExamTargets {
    pub fn new(masks: &Dense<u8>, supervision: SupervisionMatrix, classes: usize) -> Self {
        let grades = GradeOneHot::from_supervision(&supervision, classes);
        ExamTargets {
            voxels: ucnet::region_voxels(masks),
            seg_target: build_seg_target(masks, &supervision),
            supervision,
            grades,
        }
    }

    pub fn classes(&self) -> usize {
        self.grades.k()
    }
}

/// A loss node plus bookkeeping about which regions fed it.
#[derive(Debug, Clone)]
pub struct TermOutput {
    pub var: Var,
    /// False when the term's region set was empty and `var` is a constant 0.
    pub contributed: bool,
    /// Regions that qualified but had an empty mask.
    pub skipped: Vec<usize>,
}

fn constant_vec<T: Element>(g: &mut Graph<T>, values: &[f64]) -> Var {
    g.constant(Dense::from_vec(
        vec![values.len()],
        values.iter().map(|&v| T::from_f64(v)).collect(),
    ))
}

fn dot_const<T: Element>(g: &mut Graph<T>, x: Var, weights: &[f64]) -> Result<Var, LossError> {
    let w = constant_vec(g, weights);
    let p = g.mul(x, w)?;
    Ok(g.sum(p))
}

fn sum_all<T: Element>(g: &mut Graph<T>, vars: &[Var]) -> Result<Option<Var>, LossError> {
    let mut iter = vars.iter().copied();
    let Some(mut acc) = iter.next() else {
        return Ok(None);
    };
    for v in iter {
        acc = g.add(acc, v)?;
    }
    Ok(Some(acc))
}

/// `scale · Σ vars`, or a constant zero when `vars` is empty.
fn scaled_sum<T: Element>(g: &mut Graph<T>, vars: &[Var], scale: f64) -> Result<TermOutput, LossError> {
    Ok(match sum_all(g, vars)? {
        Some(s) => TermOutput {
            var: g.affine(s, scale, 0.0),
            contributed: true,
            skipped: Vec::new(),
        },
        None => TermOutput {
            var: g.scalar(0.0),
            contributed: false,
            skipped: Vec::new(),
        },
    })
}

fn to_float<T: Element>(g: &mut Graph<T>, y: &Dense<u8>) -> Var {
    g.constant(Dense::from_vec(
        y.shape().to_vec(),
        y.data().iter().map(|&v| if v != 0 { T::one() } else { T::zero() }).collect(),
    ))
}

/// Soft Dice loss `1 − 2Σ(y·ŷ) / (Σy + Σŷ + ε)`.
pub fn dice_loss<T: Element>(
    g: &mut Graph<T>,
    y: &Dense<u8>,
    yhat: Var,
    cfg: &LossConfig,
) -> Result<Var, LossError> {
    let yt = to_float(g, y);
    let inter = g.mul(yt, yhat)?;
    let inter = g.sum(inter);
    let sum_y = y.data().iter().filter(|&&v| v != 0).count() as f64;
    let sum_hat = g.sum(yhat);
    let den = g.affine(sum_hat, 1.0, sum_y + cfg.epsilon);
    let num = g.affine(inter, 2.0, 0.0);
    let ratio = g.div(num, den)?;
    Ok(g.affine(ratio, -1.0, 1.0))
}

/// Class-balanced BCE: mean BCE over positives and over negatives, averaged
/// over the classes that are present.
pub fn balanced_bce<T: Element>(
    g: &mut Graph<T>,
    y: &Dense<u8>,
    yhat: Var,
    cfg: &LossConfig,
) -> Result<Var, LossError> {
    let n = y.len();
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for (i, &v) in y.data().iter().enumerate() {
        if v != 0 {
            pos.push(i)
        } else {
            neg.push(i)
        }
    }
    let c = g.clamp(yhat, cfg.epsilon, 1.0 - cfg.epsilon);
    let mut parts = Vec::new();
    if !pos.is_empty() {
        let lp = g.log(c);
        parts.push(g.masked_mean_indices(lp, n, pos)?);
    }
    if !neg.is_empty() {
        let one_minus = g.affine(c, -1.0, 1.0);
        let ln = g.log(one_minus);
        parts.push(g.masked_mean_indices(ln, n, neg)?);
    }
    let classes = parts.len() as f64;
    let s = sum_all(g, &parts)?.expect("a volume has at least one voxel");
    let s = g.sum(s);
    Ok(g.affine(s, -1.0 / classes, 0.0))
}

/// Voxel-wise categorical cross-entropy of the grade map inside each R⁺
/// region, averaged per region and then over regions.
pub fn ggmap_loss<T: Element>(
    g: &mut Graph<T>,
    gg: Var,
    targets: &ExamTargets,
    cfg: &LossConfig,
) -> Result<TermOutput, LossError> {
    let n = g.value(gg).len() / g.shape(gg)[0];
    let mut logmap = None;
    let mut terms = Vec::new();
    let mut skipped = Vec::new();
    for (r, row) in targets.supervision.rows().iter().enumerate() {
        if row.signal != SIGNAL_LESION || !row.grade_known() {
            continue;
        }
        if targets.voxels[r].is_empty() {
            skipped.push(r);
            continue;
        }
        let lm = *logmap.get_or_insert_with(|| {
            let c = g.clamp(gg, cfg.epsilon, 1.0);
            g.log(c)
        });
        let mean = g.masked_mean_indices(lm, n, targets.voxels[r].clone())?;
        terms.push(dot_const(g, mean, &targets.grades.row(r))?);
    }
    let scale = -1.0 / terms.len().max(1) as f64;
    let mut out = scaled_sum(g, &terms, scale)?;
    out.skipped = skipped;
    Ok(out)
}

/// Negative log of the true-class histogram bin, averaged over Rα.
pub fn hist_strong_loss<T: Element>(
    g: &mut Graph<T>,
    hist: &RegionHistograms,
    targets: &ExamTargets,
    cfg: &LossConfig,
) -> Result<TermOutput, LossError> {
    let mut terms = Vec::new();
    for (&r, &h) in hist.region_ids.iter().zip(&hist.rows) {
        let row = targets.supervision.get(r);
        if row.signal != SIGNAL_LESION || !row.grade_known() {
            continue;
        }
        let c = g.clamp(h, cfg.epsilon, 1.0);
        let l = g.log(c);
        terms.push(dot_const(g, l, &targets.grades.row(r))?);
    }
    let scale = -1.0 / terms.len().max(1) as f64;
    scaled_sum(g, &terms, scale)
}

/// Suppresses histogram mass in bins above each Rβ region's max-grade class.
pub fn hist_high_loss<T: Element>(
    g: &mut Graph<T>,
    hist: &RegionHistograms,
    targets: &ExamTargets,
    cfg: &LossConfig,
) -> Result<TermOutput, LossError> {
    let k = targets.classes();
    let mut terms = Vec::new();
    let mut count = 0usize;
    for (&r, &h) in hist.region_ids.iter().zip(&hist.rows) {
        let row = targets.supervision.get(r);
        if row.signal != SIGNAL_MAX_GRADE {
            continue;
        }
        let Some(top) = targets.grades.class(r) else {
            continue;
        };
        count += 1;
        if top + 1 >= k {
            continue;
        }
        let c = g.clamp(h, 0.0, 1.0 - cfg.epsilon);
        let rest = g.affine(c, -1.0, 1.0);
        let l = g.log(rest);
        let above: Vec<f64> = (0..k).map(|i| if i > top { 1.0 } else { 0.0 }).collect();
        terms.push(dot_const(g, l, &above)?);
    }
    let mut out = scaled_sum(g, &terms, -1.0 / count.max(1) as f64)?;
    out.contributed = count > 0;
    Ok(out)
}

/// Per-bin BCE between the clamped classifier output and the one-hot target,
/// averaged over R* and the K bins. `zhat` is aligned with `hist.region_ids`.
pub fn region_classifier_loss<T: Element>(
    g: &mut Graph<T>,
    zhat: &[Var],
    hist: &RegionHistograms,
    targets: &ExamTargets,
    cfg: &LossConfig,
) -> Result<TermOutput, LossError> {
    let k = targets.classes();
    let mut terms = Vec::new();
    for (&r, &z) in hist.region_ids.iter().zip(zhat) {
        if !targets.supervision.get(r).grade_known() {
            continue;
        }
        let y = targets.grades.row(r);
        let not_y: Vec<f64> = y.iter().map(|v| 1.0 - v).collect();
        let c = g.clamp(z, cfg.epsilon, 1.0 - cfg.epsilon);
        let lc = g.log(c);
        let one_minus = g.affine(c, -1.0, 1.0);
        let l1c = g.log(one_minus);
        let a = dot_const(g, lc, &y)?;
        let b = dot_const(g, l1c, &not_y)?;
        terms.push(g.add(a, b)?);
    }
    scaled_sum(g, &terms, -1.0 / (terms.len().max(1) * k) as f64)
}

/// Unweighted term values and the α mask used for one exam.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub region_classifier: f64,
    pub hist_strong: f64,
    pub hist_high: f64,
    pub ggmap: f64,
    pub dice: f64,
    pub bce: f64,
    pub alpha: [bool; 4],
    pub lambda: [f64; 4],
    pub total: f64,
}

impl LossBreakdown {
    /// The four weighted-term inputs in weight order.
    pub fn terms(&self) -> [f64; 4] {
        [
            self.region_classifier,
            self.hist_strong + self.hist_high,
            self.ggmap,
            self.dice + self.bce,
        ]
    }

    /// `α_i λ_i L_i`.
    pub fn contribution(&self, i: usize) -> f64 {
        if self.alpha[i] {
            self.lambda[i] * self.terms()[i]
        } else {
            0.0
        }
    }
}

/// Builds the whole multi-task objective for one exam on `g`.
pub fn multitask_loss<T: Element>(
    g: &mut Graph<T>,
    outputs: &ModelOutputs,
    params: &BoundParams,
    targets: &ExamTargets,
    weights: &MultiTaskWeights,
    cfg: &LossConfig,
) -> Result<(Var, LossBreakdown), LossError> {
    let alpha = weights.alpha(targets);
    if !alpha.iter().any(|&a| a) {
        return Err(LossError::NoSupervision);
    }
    let mut bd = LossBreakdown {
        alpha,
        lambda: weights.lambda,
        ..LossBreakdown::default()
    };
    let val = |g: &Graph<T>, v: Var| Element::to_f64(g.value(v).item());
    let mut weighted: Vec<Var> = Vec::new();

    if alpha[0] || alpha[1] {
        let hist = ucnet::region_histograms(g, outputs.gg, &targets.voxels, &targets.supervision)?;
        if alpha[0] {
            let z = ucnet::region_classify(g, &hist, params)?;
            let t = region_classifier_loss(g, &z, &hist, targets, cfg)?;
            bd.region_classifier = val(g, t.var);
            weighted.push(g.affine(t.var, weights.lambda[0], 0.0));
        }
        if alpha[1] {
            let s = hist_strong_loss(g, &hist, targets, cfg)?;
            let h = hist_high_loss(g, &hist, targets, cfg)?;
            bd.hist_strong = val(g, s.var);
            bd.hist_high = val(g, h.var);
            let pair = g.add(s.var, h.var)?;
            weighted.push(g.affine(pair, weights.lambda[1], 0.0));
        }
    }
    if alpha[2] {
        let t = ggmap_loss(g, outputs.gg, targets, cfg)?;
        bd.ggmap = val(g, t.var);
        weighted.push(g.affine(t.var, weights.lambda[2], 0.0));
    }
    if alpha[3] {
        let d = dice_loss(g, &targets.seg_target, outputs.seg, cfg)?;
        let b = balanced_bce(g, &targets.seg_target, outputs.seg, cfg)?;
        bd.dice = val(g, d);
        bd.bce = val(g, b);
        let seg = g.add(d, b)?;
        weighted.push(g.affine(seg, weights.lambda[3], 0.0));
    }
    let total = sum_all(g, &weighted)?.expect("at least one alpha is set");
    bd.total = val(g, total);
    Ok((total, bd))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ucnet::region_voxels;

    fn vol(values: &[f64]) -> Dense<f64> {
        Dense::from_vec(vec![1, values.len(), 1, 1], values.to_vec())
    }

    fn mask(values: &[u8]) -> Dense<u8> {
        Dense::from_vec(vec![1, values.len(), 1, 1], values.to_vec())
    }

    fn scalar(g: &Graph<f64>, v: Var) -> f64 {
        g.value(v).item()
    }

    #[test]
    fn seg_target_is_union_of_lesions() {
        let masks = Dense::from_vec(vec![3, 4, 1, 1], vec![1, 1, 0, 0, 0, 1, 1, 0, 1, 1, 1, 1]);
        let sup = SupervisionMatrix::from_i32(&[1, 2, 1, -1, 2, 3]).unwrap();
        assert_eq!(build_seg_target(&masks, &sup).data(), &[1, 1, 1, 0]);
        let sextants_only = SupervisionMatrix::from_i32(&[0, 0, 0, 0, 2, 3]).unwrap();
        assert_eq!(build_seg_target(&masks, &sextants_only).data(), &[0, 0, 0, 0]);
    }

    #[test]
    fn dice_hand_values() {
        let cfg = LossConfig::default();
        let mut g = Graph::new();
        let yhat = g.param(vol(&[0.5, 0.5]));
        let d = dice_loss(&mut g, &mask(&[1, 0]), yhat, &cfg).unwrap();
        assert!((scalar(&g, d) - (1.0 - 1.0 / (2.0 + 1e-7))).abs() < 1e-12);

        let ones = g.param(vol(&[1.0; 6]));
        let d = dice_loss(&mut g, &mask(&[1; 6]), ones, &cfg).unwrap();
        assert!(scalar(&g, d).abs() <= 1e-7 / 12.0 + 1e-15);

        let zeros = g.param(vol(&[0.0; 3]));
        let d = dice_loss(&mut g, &mask(&[0; 3]), zeros, &cfg).unwrap();
        assert_eq!(scalar(&g, d), 1.0);
    }

    #[test]
    fn balanced_bce_hand_values() {
        let cfg = LossConfig::default();
        let mut g = Graph::new();
        let yhat = g.param(vol(&[0.9, 0.1]));
        let b = balanced_bce(&mut g, &mask(&[1, 0]), yhat, &cfg).unwrap();
        assert!((scalar(&g, b) - 0.105_360_515_657_826_3).abs() < 1e-12);

        let neg = g.param(vol(&[0.2, 0.4]));
        let b = balanced_bce(&mut g, &mask(&[0, 0]), neg, &cfg).unwrap();
        let expect = -(0.8f64.ln() + 0.6f64.ln()) / 2.0;
        assert!((scalar(&g, b) - expect).abs() < 1e-12);

        let exact = g.param(vol(&[1.0, 0.0, 1.0]));
        let b = balanced_bce(&mut g, &mask(&[1, 0, 1]), exact, &cfg).unwrap();
        assert!(scalar(&g, b) < 1e-6);
    }

    #[test]
    fn ggmap_half_probability() {
        let masks = Dense::from_vec(vec![1, 4, 1, 1], vec![1; 4]);
        let t = ExamTargets::new(&masks, SupervisionMatrix::from_i32(&[1, 3]).unwrap(), 2);
        let mut g = Graph::new();
        let gg = g.param(Dense::filled(vec![2, 4, 1, 1], 0.5));
        let out = ggmap_loss(&mut g, gg, &t, &LossConfig::default()).unwrap();
        assert!(out.contributed);
        assert!((scalar(&g, out.var) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ggmap_unknown_grades_flagged() {
        let masks = Dense::from_vec(vec![2, 2, 1, 1], vec![1, 0, 1, 1]);
        let t = ExamTargets::new(&masks, SupervisionMatrix::from_i32(&[1, -1, 2, 3]).unwrap(), 2);
        let mut g = Graph::new();
        let gg = g.param(Dense::filled(vec![2, 2, 1, 1], 0.5));
        let out = ggmap_loss(&mut g, gg, &t, &LossConfig::default()).unwrap();
        assert!(!out.contributed);
        assert_eq!(scalar(&g, out.var), 0.0);
        assert_eq!(availability(&t.supervision), [true, true, false, true]);
    }

    fn hist_setup(rows: &[f64], sup: &[i32], k: usize) -> (Graph<f64>, RegionHistograms, ExamTargets) {
        let r = sup.len() / 2;
        let mut g = Graph::new();
        let gg = g.param(Dense::from_vec(vec![k, r, 1, 1], {
            let mut v = vec![0.0; k * r];
            for i in 0..r {
                for c in 0..k {
                    v[c * r + i] = rows[i * k + c];
                }
            }
            v
        }));
        let masks = Dense::from_vec(
            vec![r, r, 1, 1],
            (0..r * r).map(|i| u8::from(i / r == i % r)).collect(),
        );
        let t = ExamTargets::new(&masks, SupervisionMatrix::from_i32(sup).unwrap(), k);
        let h = ucnet::region_histograms(&mut g, gg, &region_voxels(&masks), &t.supervision).unwrap();
        (g, h, t)
    }

    #[test]
    fn hist_strong_hand_value() {
        let (mut g, h, t) = hist_setup(&[0.3, 0.7], &[1, 4], 2);
        let out = hist_strong_loss(&mut g, &h, &t, &LossConfig::default()).unwrap();
        assert!((scalar(&g, out.var) - (-(0.7f64.ln()))).abs() < 1e-12);
    }

    #[test]
    fn hist_high_hand_value_and_vacuous_top() {
        let (mut g, h, t) = hist_setup(&[0.6, 0.4], &[2, 0], 2);
        let out = hist_high_loss(&mut g, &h, &t, &LossConfig::default()).unwrap();
        assert!((scalar(&g, out.var) - (-(0.6f64.ln()))).abs() < 1e-12);

        let (mut g, h, t) = hist_setup(&[0.6, 0.4], &[2, 4], 2);
        let out = hist_high_loss(&mut g, &h, &t, &LossConfig::default()).unwrap();
        assert_eq!(scalar(&g, out.var), 0.0);
        assert!(out.contributed);
    }

    #[test]
    fn region_classifier_hand_value() {
        let cfg = LossConfig::default();
        let (mut g, h, t) = hist_setup(&[0.5, 0.5], &[1, 3], 2);
        let z = g.constant(Dense::from_vec(vec![2], vec![0.0, 0.3]));
        let out = region_classifier_loss(&mut g, &[z], &h, &t, &cfg).unwrap();
        let expect = (-(1.0f64 - 1e-7).ln() - 0.3f64.ln()) / 2.0;
        assert!((scalar(&g, out.var) - expect).abs() < 1e-12);
    }

    #[test]
    fn region_classifier_excludes_unknown_grades() {
        let cfg = LossConfig::default();
        let (mut g, h, t) = hist_setup(&[0.5, 0.5], &[1, -1], 2);
        let z = g.constant(Dense::from_vec(vec![2], vec![0.2, 0.3]));
        let out = region_classifier_loss(&mut g, &[z], &h, &t, &cfg).unwrap();
        assert!(!out.contributed);
    }

    #[test]
    fn all_alpha_zero_is_an_error() {
        let m = crate::ucnet::ModelParams::<f64>::build(crate::ucnet::UCNetConfig {
            base_channels: 2,
            levels: 1,
            ..Default::default()
        })
        .unwrap();
        let mut g = Graph::new();
        let p = m.bind(&mut g);
        let x = g.constant(Dense::zeros(vec![3, 2, 2, 2]));
        let out = ucnet::forward(&mut g, &p, m.config(), x).unwrap();
        let masks = Dense::from_vec(vec![1, 2, 2, 2], vec![1; 8]);
        let t = ExamTargets::new(&masks, SupervisionMatrix::from_i32(&[0, 2]).unwrap(), 2);
        let r = multitask_loss(&mut g, &out, &p, &t, &MultiTaskWeights::default(), &LossConfig::default());
        assert!(matches!(r, Err(LossError::NoSupervision)));
    }
}
