//! Finite-difference audit of tape gradients.

use crate::{AutogradError, Dense, Graph, Result, Var};

/// Below this magnitude both gradients are treated as exactly zero: the
/// coordinate is reported in [`GradCheckReport::zero_gradient`] instead of
/// contributing a meaningless relative error.
pub const ZERO_GRADIENT_FLOOR: f64 = 1e-9;

/// Relative disagreement between two difference quotients of the same
/// coordinate above which the step straddles a kink (ReLU, clamp) and the
/// objective has no derivative to compare against. On smooth objectives the
/// quotients differ by O(h) (central) or O(h²) (five-point).
pub const KINK_THRESHOLD: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max |analytic - numeric| / max(|analytic|, |numeric|, 1e-12)
    pub max_rel_error: f64,
    /// `(param index, element index)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// Coordinates where both gradients vanish (dead ReLU, clamped inputs).
    pub zero_gradient: Vec<(usize, usize)>,
    /// Coordinates whose difference quotients disagree by more than
    /// [`KINK_THRESHOLD`]: forward vs backward for the central stencil, step
    /// h vs 2h for the five-point one.
    pub kinks: Vec<(usize, usize)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

fn evaluate<F>(f: &F, params: &[Dense<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out);
    if v.len() != 1 {
        return Err(AutogradError::NonScalarRoot(v.shape().to_vec()));
    }
    Ok(v.item())
}

fn disagree(a: f64, b: f64, rounding: f64) -> bool {
    (a - b).abs() > KINK_THRESHOLD * a.abs().max(b.abs()) + rounding
}

/// Finite-difference formula.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Stencil {
    /// `(f(x+h) − f(x−h)) / 2h`, error O(h²).
    #[default]
    Central,
    /// `(−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h`, error O(h⁴). Lets
    /// smooth objectives use a larger step, which cuts rounding error.
    FivePoint,
}

/// Checks every coordinate of every parameter.
pub fn grad_check<F>(f: F, params: &[Dense<f64>], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(p, t)| (0..t.len()).map(move |i| (p, i)))
        .collect();
    grad_check_coords(f, params, h, &coords)
}

/// Checks only the listed `(param, element)` coordinates; for large models.
pub fn grad_check_coords<F>(
    f: F,
    params: &[Dense<f64>],
    h: f64,
    coords: &[(usize, usize)],
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    grad_check_stencil(f, params, h, coords, Stencil::Central)
}

/// [`grad_check_coords`] with an explicit stencil.
pub fn grad_check_stencil<F>(
    f: F,
    params: &[Dense<f64>],
    h: f64,
    coords: &[(usize, usize)],
    stencil: Stencil,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let root = f(&mut g, &vars)?;
    let grads = g.backward(root)?;
    let analytic: Vec<Dense<f64>> = vars.iter().map(|&v| grads.wrt(&g, v)).collect();
    drop(g);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        zero_gradient: Vec::new(),
        kinks: Vec::new(),
    };
    let base = evaluate(&f, params)?;
    let mut work: Vec<Dense<f64>> = params.to_vec();
    for &(p, i) in coords {
        let orig = work[p].data()[i];
        let mut at = |offset: f64| -> Result<f64> {
            work[p].data_mut()[i] = orig + offset;
            let v = evaluate(&f, &work)?;
            if !v.is_finite() {
                return Err(AutogradError::NonFinite(format!("perturbed objective at param {p}[{i}]")));
            }
            Ok(v)
        };
        let (numeric, kink) = match stencil {
            Stencil::Central => {
                let (up, down) = (at(h)?, at(-h)?);
                let rounding = 8.0 * f64::EPSILON * (up.abs() + base.abs() + down.abs()) / h;
                let (fwd, bwd) = ((up - base) / h, (base - down) / h);
                ((up - down) / (2.0 * h), disagree(fwd, bwd, rounding))
            }
            Stencil::FivePoint => {
                let (up, down, up2, down2) = (at(h)?, at(-h)?, at(2.0 * h)?, at(-2.0 * h)?);
                let rounding = 8.0 * f64::EPSILON * (up.abs() + down.abs()) / h;
                let (near, far) = ((up - down) / (2.0 * h), (up2 - down2) / (4.0 * h));
                ((4.0 * near - far) / 3.0, disagree(near, far, rounding))
            }
        };
        work[p].data_mut()[i] = orig;
        let a = analytic[p].data()[i];
        report.checked += 1;
        if kink {
            report.kinks.push((p, i));
            continue;
        }
        if a.abs().max(numeric.abs()) < ZERO_GRADIENT_FLOOR {
            report.zero_gradient.push((p, i));
            continue;
        }
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst = Some((p, i));
        }
    }
    Ok(report)
}
