//! Central-difference gradient verification.
//!
//! `grad_check` compares reverse-mode gradients of a scalar-valued function
//! against `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate and
//! reports the worst relative error `|analytic - numeric| / max(1,
//! |analytic|)`. Differences are computed in `f64` regardless of the working
//! scalar type.

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-6;

/// Worst relative error between two gradient vectors.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert!(
        analytic.len() == numeric.len(),
        "max_rel_err: {} analytic vs {} numeric entries",
        analytic.len(),
        numeric.len()
    );
    let mut worst = 0.0f64;
    for (&a, &n) in analytic.iter().zip(numeric) {
        let rel = (a - n).abs() / a.abs().max(1.0);
        if rel > worst {
            worst = rel;
        }
    }
    worst
}

/// Checks the reverse-mode gradient of `f` at `x` with step `h`; returns the
/// worst per-coordinate relative error. `f` must return a single-element
/// tensor. Errors if any evaluation is non-finite.
pub fn grad_check<S: Scalar, F>(f: F, x: &Tensor<S>, h: f64) -> Result<f64>
where
    F: Fn(&Tensor<S>) -> Tensor<S>,
{
    assert!(h > 0.0, "grad_check: step must be positive, got {}", h);
    let probe = Tensor::variable(x.shape(), x.data().to_vec());
    let loss = f(&probe);
    if loss.numel() != 1 {
        return Err(Error::Contract(format!(
            "grad_check function returned shape {:?}, expected a scalar",
            loss.shape()
        )));
    }
    if !loss.value().is_finite() {
        return Err(Error::NonFinite(format!(
            "grad_check: f(x) = {}",
            loss.value()
        )));
    }
    let analytic: Vec<f64> = if loss.requires_grad() {
        loss.backward()?;
        probe
            .grad()
            .unwrap_or_else(|| vec![S::zero(); probe.numel()])
            .iter()
            .map(|v| v.to_f())
            .collect()
    } else {
        vec![0.0; probe.numel()]
    };

    let base: Vec<f64> = x.data().iter().map(|v| v.to_f()).collect();
    let mut numeric = vec![0.0f64; base.len()];
    for i in 0..base.len() {
        let eval = |v: f64| -> Result<f64> {
            let mut d = base.clone();
            d[i] = v;
            let t = Tensor::constant(x.shape(), d.iter().map(|&u| S::from_f(u)).collect());
            let out = f(&t);
            assert!(
                out.numel() == 1,
                "grad_check function changed output shape to {:?}",
                out.shape()
            );
            let val = out.value().to_f();
            if !val.is_finite() {
                return Err(Error::NonFinite(format!(
                    "grad_check: perturbing coordinate {} by {:+e} gave {}",
                    i,
                    v - base[i],
                    val
                )));
            }
            Ok(val)
        };
        let up = eval(base[i] + h)?;
        let down = eval(base[i] - h)?;
        numeric[i] = (up - down) / (2.0 * h);
    }
    Ok(max_rel_err(&analytic, &numeric))
}

/// `grad_check` with the default step.
pub fn grad_check_default<S: Scalar, F>(f: F, x: &Tensor<S>) -> Result<f64>
where
    F: Fn(&Tensor<S>) -> Tensor<S>,
{
    grad_check(f, x, DEFAULT_STEP)
}
