//! Central-difference gradient oracle.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{invalid, Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1, |analytic|, |numeric|)` over every
    /// coordinate of every input.
    pub max_rel_error: f64,
    /// (input, flat coordinate) where the maximum occurred.
    pub worst: (usize, usize),
    pub passed: bool,
}

/// Compares the tape gradient of the scalar `f` against central differences
/// with step `eps`, perturbing every coordinate of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    grad_check_strided(f, inputs, eps, tol, usize::MAX)
}

/// Like [`grad_check`] but probes at most `max_coords` evenly spaced
/// coordinates per input, for large parameter tensors.
pub fn grad_check_strided<F>(
    f: F,
    inputs: &[Tensor],
    eps: f64,
    tol: f64,
    max_coords: usize,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(invalid(format!(
            "grad_check: eps {eps} outside [1e-7, 1e-3]"
        )));
    }
    let eval = |ts: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ts.iter().map(|t| tape.leaf(t)).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.len() != 1 {
            return Err(Error::NonScalarLoss(v.shape().to_vec()));
        }
        let v = v.data()[0];
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("grad_check forward value {v}")));
        }
        Ok(v)
    };

    let leaves: Vec<Tensor> = inputs.iter().map(|t| t.clone().with_grad()).collect();
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t)).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::NonScalarLoss(v.shape().to_vec()));
    }
    if !v.data()[0].is_finite() {
        return Err(Error::NonFinite(format!(
            "grad_check forward value {}",
            v.data()[0]
        )));
    }
    let grads = tape.backward(out)?;

    let mut max_rel = 0.0f64;
    let mut worst = (0, 0);
    let mut probe = leaves.clone();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; leaves[i].len()]);
        let n = leaves[i].len();
        let step = n.div_ceil(max_coords.max(1)).max(1);
        for j in (0..n).step_by(step) {
            let orig = leaves[i].data()[j];
            probe[i].data_mut()[j] = orig + eps;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] = orig - eps;
            let down = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[j];
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            if rel > max_rel {
                max_rel = rel;
                worst = (i, j);
            }
        }
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        worst,
        passed: max_rel <= tol,
    })
}
