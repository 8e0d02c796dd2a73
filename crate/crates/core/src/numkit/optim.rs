use crate::error::{Error, Result};

use super::dense::{DenseMatrix, Scalar};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Adam moment estimates for an ordered list of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    first: Vec<DenseMatrix<T>>,
    second: Vec<DenseMatrix<T>>,
    step: u64,
}

impl<T: Scalar> AdamState<T> {
    /// Zero moments shaped like `shapes`.
    pub fn new(shapes: &[(usize, usize)]) -> Self {
        let zeros: Vec<_> = shapes.iter().map(|&(r, c)| DenseMatrix::zeros(r, c)).collect();
        AdamState {
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update. `params` pairs each tensor with a name
/// used in error messages. Nothing is modified if any gradient is non-finite.
pub fn adam_step<T: Scalar, S: AsRef<str>>(
    params: &mut [(S, &mut DenseMatrix<T>)],
    grads: &[DenseMatrix<T>],
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::InvalidInput(format!("learning rate must be positive, got {lr}")));
    }
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(Error::InvalidInput(format!(
            "adam: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.first.len()
        )));
    }
    for ((name, p), g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::shape("adam_step", p.shape(), g.shape()));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of {}", name.as_ref())));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::of(BETA1), T::of(BETA2));
    let c1 = T::of(1.0 - BETA1.powi(t));
    let c2 = T::of(1.0 - BETA2.powi(t));
    let (lr, eps) = (T::of(lr), T::of(EPSILON));

    for (k, ((_, p), g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.first[k].as_mut_slice();
        let v = state.second[k].as_mut_slice();
        for (((x, &gi), mi), vi) in p.as_mut_slice().iter_mut().zip(g.as_slice()).zip(m).zip(v) {
            *mi = b1 * *mi + (T::one() - b1) * gi;
            *vi = b2 * *vi + (T::one() - b2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *x = *x - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
