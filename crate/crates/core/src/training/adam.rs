use ndarray::{Array2, Zip};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::scalar::Scalar;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moments per parameter, in parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Array2<T>>,
    pub v: Vec<Array2<T>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        let zeros = || params.iter().map(|(_, p)| Array2::zeros(p.raw_dim())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
            beta1: BETA1,
            beta2: BETA2,
            eps: EPSILON,
        }
    }
}

/// One bias-corrected Adam update. Weight decay is added to the gradient
/// (`g + wd·p`) before the moment updates.
pub fn adam_step<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &[Array2<T>],
    state: &mut AdamState<T>,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Contract(format!(
            "{} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::of(state.beta1), T::of(state.beta2));
    let (one, lr, wd, eps) = (T::one(), T::of(lr), T::of(weight_decay), T::of(state.eps));
    let c1 = one - T::of(state.beta1.powi(t));
    let c2 = one - T::of(state.beta2.powi(t));
    for (i, (name, p)) in params.iter_mut().enumerate() {
        let g = &grads[i];
        if g.dim() != p.dim() {
            return Err(Error::Contract(format!("gradient of `{name}` has shape {:?}", g.dim())));
        }
        Zip::from(p)
            .and(g)
            .and(&mut state.m[i])
            .and(&mut state.v[i])
            .for_each(|p, &g, m, v| {
                let g = g + wd * *p;
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
            });
    }
    Ok(())
}
