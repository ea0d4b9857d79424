//! Central finite-difference audit of tape gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::par::Execution;

pub const DEFAULT_STEP: f64 = 1e-5;

/// `|a − b| / max(|a|, |b|, 1e-8)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// `(parameter index, element index, analytic, numeric)` of the worst
    /// element.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// Compares the tape gradient of `f` against central differences
/// `(f(θ + h) − f(θ − h)) / 2h` for every parameter element.
///
/// `f` must be deterministic. Parameters that reach the loss only through
/// `stop_gradient` have a zero tape gradient by definition, so audit those
/// paths separately rather than through this checker.
pub fn finite_diff_check<F>(
    f: F,
    params: &[Tensor<f64>],
    step: f64,
    exec: Execution,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + Sync,
{
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::invalid(format!("finite-difference step must be positive, got {step}")));
    }
    let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.len() != 1 {
            return Err(Error::invalid("checked function must return a scalar"));
        }
        let x = v.item();
        if !x.is_finite() {
            return Err(Error::NonFinite(format!("function value {x}")));
        }
        Ok(x)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.wrt(v)).collect();
    if let Some(bad) = analytic.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("analytic gradient of parameter {bad}")));
    }

    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(p, t)| (0..t.len()).map(move |i| (p, i)))
        .collect();
    let numeric = exec.map_slice(&coords, |&(p, i)| -> Result<f64> {
        let mut ps = params.to_vec();
        let x0 = ps[p].data()[i];
        ps[p].data_mut()[i] = x0 + step;
        let up = eval(&ps)?;
        ps[p].data_mut()[i] = x0 - step;
        let down = eval(&ps)?;
        Ok((up - down) / (2.0 * step))
    });

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: coords.len(),
        worst: None,
    };
    for (&(p, i), num) in coords.iter().zip(numeric) {
        let num = num?;
        let ana = analytic[p].data()[i];
        let err = relative_error(ana, num);
        if report.worst.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some((p, i, ana, num));
        }
    }
    Ok(report)
}
