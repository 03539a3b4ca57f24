use super::array::{Array, Real};
use crate::error::{Error, Result};

pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPS: f64 = 1e-8;

/// First/second moment estimates for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Array<T>,
    pub v: Array<T>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Real> AdamState<T> {
    pub fn new(shape: &[usize]) -> Self {
        Self::with_hyper(shape, DEFAULT_BETA1, DEFAULT_BETA2, DEFAULT_EPS)
    }

    pub fn with_hyper(shape: &[usize], beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamState {
            m: Array::zeros(shape),
            v: Array::zeros(shape),
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step<T: Real>(
    param: &mut Array<T>,
    grad: &Array<T>,
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    if param.shape() != grad.shape()
        || param.shape() != state.m.shape()
        || param.shape() != state.v.shape()
    {
        return Err(Error::shape(
            "adam_step",
            format!(
                "param {:?}, grad {:?}, m {:?}, v {:?}",
                param.shape(),
                grad.shape(),
                state.m.shape(),
                state.v.shape()
            ),
        ));
    }
    state.t += 1;
    let t = state.t as i32;
    let b1 = T::of(state.beta1);
    let b2 = T::of(state.beta2);
    let c1 = T::of(1.0 - state.beta1.powi(t));
    let c2 = T::of(1.0 - state.beta2.powi(t));
    let eps = T::of(state.eps);
    let lr = T::of(lr);
    let one = T::one();

    let m = state.m.data_mut();
    let v = state.v.data_mut();
    for (((p, &g), mi), vi) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(m.iter_mut())
        .zip(v.iter_mut())
    {
        *mi = b1 * *mi + (one - b1) * g;
        *vi = b2 * *vi + (one - b2) * g * g;
        let m_hat = *mi / c1;
        let v_hat = *vi / c2;
        *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
    }
    if !param.is_finite() {
        return Err(Error::NonFinite { op: "adam_step" });
    }
    Ok(())
}
