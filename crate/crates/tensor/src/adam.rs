use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::real::Real;

/// Adam moments for every parameter of one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub step_count: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamStore<T>, lr: f64) -> Self {
        let zeros = || params.iter().map(|(_, _, t)| vec![T::zero(); t.numel()]).collect();
        AdamState {
            step_count: 0,
            m: zeros(),
            v: zeros(),
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One bias-corrected Adam update from the gradients stored on `params`.
/// Parameters without a gradient are treated as having a zero gradient.
pub fn adam_step<T: Real>(params: &mut ParamStore<T>, state: &mut AdamState<T>) -> Result<()> {
    if state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(TensorError::config("adam", "state does not track this parameter set"));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for ((p, m), v) in params.tensors_mut().zip(&mut state.m).zip(&mut state.v) {
        if m.len() != p.numel() || v.len() != p.numel() {
            return Err(TensorError::config("adam", "moment shapes do not match parameter"));
        }
        let grad = p.grad.take();
        let data = p.data_mut();
        for i in 0..data.len() {
            let g = grad.as_ref().map_or(0.0, |g| g[i].as_f64());
            let mi = b1 * m[i].as_f64() + (1.0 - b1) * g;
            let vi = b2 * v[i].as_f64() + (1.0 - b2) * g * g;
            m[i] = T::from_f64_lossy(mi);
            v[i] = T::from_f64_lossy(vi);
            let step = state.lr * (mi / c1) / ((vi / c2).sqrt() + state.epsilon);
            data[i] = T::from_f64_lossy(data[i].as_f64() - step);
        }
        p.grad = grad;
    }
    Ok(())
}
