//! Central finite-difference check of tape gradients.

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::Result;

/// Denominator floor for the relative error, so that near-zero gradients
/// are compared on an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_abs_error: f64,
    pub max_rel_error: f64,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares backward-pass gradients of `loss` against `(L(w+h) - L(w-h)) / 2h`
/// for every parameter scalar, or an evenly strided sample of at most
/// `max_per_param` scalars per tensor. The loss is evaluated on eval tapes.
pub fn check_gradients<F>(store: &ParamStore, h: f64, max_per_param: Option<usize>, loss: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::eval(store);
        let l = loss(&mut tape)?;
        tape.backward(l)?
    };
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::eval(s);
        let l = loss(&mut tape)?;
        Ok(tape.scalar(l))
    };

    let mut probe = store.clone();
    let mut report = GradCheckReport {
        checked: 0,
        max_abs_error: 0.0,
        max_rel_error: 0.0,
    };
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let n = store.get(id).numel();
        let stride = match max_per_param {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        for i in (0..n).step_by(stride) {
            let orig = store.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + h;
            let up = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig - h;
            let down = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig;

            let numeric = (up - down) / (2.0 * h);
            let a = analytic.get(id).map_or(0.0, |g| g[i]);
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            report.max_rel_error = report.max_rel_error.max(relative_error(a, numeric));
        }
    }
    Ok(report)
}
