//! Finite-difference verification of analytic gradients.
//!
//! The checker is deliberately independent of the tape internals: it only
//! calls the function under test through its public closure interface, so a
//! bug in an op's backward rule cannot hide inside the check itself.

use super::{Array, Context, Tensor};
use crate::error::{Error, Result};

/// Outcome of a gradient check, kept for diagnostics and assertions.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// max_i |analytic_i − numeric_i| / max(1, |analytic_i|)
    pub max_rel_error: f64,
    /// Flat index attaining the maximum.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Compare the analytic gradient of `f` at `x0` against central finite
/// differences with step `eps`.
///
/// `f` must build a scalar from a single differentiable leaf and must be
/// deterministic: it is evaluated twice at `x0` and the two values must agree
/// bit-for-bit before any derivative is trusted.
pub fn grad_check<F>(f: F, x0: &Array, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&Context, &Tensor) -> Result<Tensor>,
{
    if !(eps > 0.0) {
        return Err(Error::domain("grad_check", format!("step must be positive, got {eps}")));
    }

    let eval = |arr: &Array| -> Result<f64> {
        let ctx = Context::new();
        let leaf = ctx.leaf(arr);
        f(&ctx, &leaf)?.value()
    };

    // Determinism gate: two independent forward evaluations must agree
    // exactly, otherwise finite differences measure noise, not slope.
    let v1 = eval(x0)?;
    let v2 = eval(x0)?;
    if v1.to_bits() != v2.to_bits() {
        return Err(Error::NonDeterministicFunction);
    }

    // Analytic gradient at x0.
    let analytic = {
        let ctx = Context::new();
        let leaf = ctx.leaf(x0);
        let out = f(&ctx, &leaf)?;
        out.backward()?;
        leaf.grad().unwrap_or_else(|| vec![0.0; x0.len()])
    };

    // Central differences, one coordinate at a time.
    let mut numeric = vec![0.0; x0.len()];
    let mut probe = x0.clone();
    for i in 0..x0.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        numeric[i] = (plus - minus) / (2.0 * eps);
    }

    let mut max_rel_error = 0.0;
    let mut worst_index = 0;
    for i in 0..analytic.len() {
        let denom = analytic[i].abs().max(1.0);
        let rel = (analytic[i] - numeric[i]).abs() / denom;
        if rel > max_rel_error {
            max_rel_error = rel;
            worst_index = i;
        }
    }
    Ok(GradCheckReport {
        max_rel_error,
        worst_index,
        analytic,
        numeric,
    })
}

/// [`grad_check`] with the conventional step 1e-5.
pub fn grad_check_default_eps<F>(f: F, x0: &Array) -> Result<GradCheckReport>
where
    F: Fn(&Context, &Tensor) -> Result<Tensor>,
{
    grad_check(f, x0, 1e-5)
}
