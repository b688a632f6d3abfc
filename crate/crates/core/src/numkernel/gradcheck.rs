// SPDX-License-Identifier: Apache-2.0

//! Central finite-difference verification of tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Max over coordinates of `|analytic - fd| / max(1, |analytic|)` where `fd`
/// is the central difference of `f` at `point` with the given step.
pub fn compare_with_fd<F>(analytic: &Tensor, f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    if step <= 0.0 || !step.is_finite() {
        return Err(Error::Config(format!("finite-difference step must be > 0, got {step}")));
    }
    analytic.expect_same_shape(point)?;
    let mut probe = point.clone();
    let mut worst: f64 = 0.0;
    for i in 0..point.len() {
        let orig = point.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        let fd = (up - down) / (2.0 * step);
        let a = analytic.data()[i];
        let err = (a - fd).abs() / a.abs().max(1.0);
        if !err.is_finite() {
            return Err(Error::Domain(format!("non-finite gradient at coordinate {i}")));
        }
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Checks the tape gradient of a scalar graph built by `build` from a single
/// tracked input against central differences of the same graph.
pub fn grad_check<F>(build: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone());
    let out = build(&mut tape, x)?;
    let analytic = tape.backward(out)?.wrt(x);
    compare_with_fd(
        &analytic,
        |p| {
            let mut t = Tape::new();
            let x = t.constant(p.clone());
            let out = build(&mut t, x)?;
            t.value(out).item()
        },
        point,
        step,
    )
}
