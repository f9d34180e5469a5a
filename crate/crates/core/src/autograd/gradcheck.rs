//! Central finite-difference comparison against the analytic backward pass.
//! Runs in f64; the engine being generic means the checked code paths are the
//! same ones training uses in f32.

use crate::error::{Error, Result};

use super::{backward, Tensor};

/// Outcome of one [`grad_check`] call.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Max relative error per checked input, in input order.
    pub per_input: Vec<f64>,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err < self.tol
    }
}

/// Relative error with an absolute floor: tiny gradients are compared
/// absolutely against the floor instead of blowing up the ratio.
fn rel_err(a: f64, n: f64) -> f64 {
    let denom = a.abs().max(n.abs()).max(1e-3);
    (a - n).abs() / denom
}

/// Checks the analytic gradient of the scalar-valued `f` with respect to
/// every element of every input, using central differences of step `eps`.
///
/// Each input must be a `requires_grad` leaf; `f` must be deterministic.
/// Failures are carried in the report, not returned as errors.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    for t in inputs {
        if !t.requires_grad() {
            return Err(Error::InvalidParameter(
                "grad_check inputs must require gradients".into(),
            ));
        }
        t.zero_grad();
    }

    let loss = f(inputs)?;
    if loss.numel() != 1 {
        return Err(Error::NonScalarLoss(loss.shape().to_vec()));
    }
    backward(&loss)?;
    let analytic: Vec<Vec<f64>> = inputs
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let mut per_input = Vec::with_capacity(inputs.len());
    for (t, grads) in inputs.iter().zip(&analytic) {
        let mut worst = 0.0f64;
        let base = t.to_vec();
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus[i] += eps;
            t.set_data(plus)?;
            let f_plus = f(inputs)?.item();

            let mut minus = base.clone();
            minus[i] -= eps;
            t.set_data(minus)?;
            let f_minus = f(inputs)?.item();

            let numeric = (f_plus - f_minus) / (2.0 * eps);
            worst = worst.max(rel_err(grads[i], numeric));
        }
        t.set_data(base)?;
        per_input.push(worst);
    }

    for t in inputs {
        t.zero_grad();
    }

    let max_rel_err = per_input.iter().cloned().fold(0.0, f64::max);
    Ok(GradCheckReport {
        per_input,
        max_rel_err,
        tol,
    })
}
