//! Central finite-difference gradient checks.

use super::params::{Ctx, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Outcome of comparing analytic and numeric gradients.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub checked: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tol
    }
}

/// Gradients smaller than this are compared in absolute terms; below it the
/// central difference is dominated by round-off in `f`.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Checks `analytic` against `(f(x+h) - f(x-h)) / 2h` for every coordinate
/// (or a strided subset when `max_coords` is smaller than `params.len()`).
pub fn finite_diff_check(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    params: &[f64],
    analytic: &[f64],
    step: f64,
    tol: f64,
    max_coords: usize,
) -> Result<GradCheckReport> {
    if params.len() != analytic.len() {
        return Err(Error::invalid(
            "gradient length differs from parameter length",
        ));
    }
    let stride = params.len().div_ceil(max_coords.max(1)).max(1);
    let mut x = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        checked: 0,
        tol,
    };
    for i in (0..params.len()).step_by(stride) {
        let orig = x[i];
        x[i] = orig + step;
        let fp = f(&x)?;
        x[i] = orig - step;
        let fm = f(&x)?;
        x[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite {
                op: format!("finite difference at coordinate {i}"),
            });
        }
        let numeric = (fp - fm) / (2.0 * step);
        let err = rel_error(analytic[i], numeric);
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = i;
        }
        report.checked += 1;
    }
    Ok(report)
}

/// Gradient check of a tape-built scalar function of one input tensor.
pub fn check_fn<F>(input: &Tensor, build: F, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Var<'t>,
{
    let tape = Tape::new();
    let x = tape.leaf(input.clone(), true);
    let y = build(&tape, x);
    let grads = tape.backward(y)?;
    let analytic = grads.wrt(x).expect("input requires grad").data().to_vec();
    let shape = input.shape().to_vec();
    let f = |v: &[f64]| -> Result<f64> {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(shape.clone(), v.to_vec())?, false);
        let y = build(&tape, x);
        tape.check_finite()?;
        Ok(y.item())
    };
    finite_diff_check(f, input.data(), &analytic, step, tol, usize::MAX)
}

/// Gradient check of a loss with respect to the named parameters of a store.
/// At most `max_coords` coordinates per parameter are probed.
pub fn check_params<F>(
    store: &ParamStore,
    names: &[&str],
    loss: F,
    step: f64,
    tol: f64,
    max_coords: usize,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&Ctx<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let cx = Ctx::new(&tape, store);
    let y = loss(&cx)?;
    let grads = tape.backward(y)?;
    let mut worst = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        checked: 0,
        tol,
    };
    for (pi, name) in names.iter().enumerate() {
        let value = store.get(name)?;
        let analytic = grads
            .param(name)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; value.len()]);
        let f = |v: &[f64]| -> Result<f64> {
            let mut s = store.clone();
            *s.get_mut(name)? = Tensor::new(value.shape().to_vec(), v.to_vec())?;
            let tape = Tape::new();
            let cx = Ctx::new(&tape, &s);
            let y = loss(&cx)?;
            tape.check_finite()?;
            Ok(y.item())
        };
        let r = finite_diff_check(f, value.data(), &analytic, step, tol, max_coords)?;
        worst.checked += r.checked;
        if r.max_rel_error >= worst.max_rel_error {
            worst.max_rel_error = r.max_rel_error;
            worst.worst_index = pi;
        }
    }
    Ok(worst)
}
