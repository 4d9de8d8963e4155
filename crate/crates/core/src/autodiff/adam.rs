use indexmap::IndexMap;

use super::{AutodiffError, Tensor};

/// Adam with bias correction and decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    pub step: u64,
    pub first_moment: IndexMap<String, Vec<f32>>,
    pub second_moment: IndexMap<String, Vec<f32>>,
}

impl AdamState {
    pub fn new(lr: f32, weight_decay: f32) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            first_moment: IndexMap::new(),
            second_moment: IndexMap::new(),
        }
    }
}

/// One optimizer step over every parameter named in `grads`.
///
/// Each parameter first decays as `p -= lr * wd * p`, then takes the
/// bias-corrected Adam update.
pub fn adam_step(
    params: &mut IndexMap<String, Tensor>,
    grads: &IndexMap<String, Tensor>,
    state: &mut AdamState,
) -> Result<(), AutodiffError> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - (state.beta1 as f64).powi(t);
    let bc2 = 1.0 - (state.beta2 as f64).powi(t);
    for (name, g) in grads {
        let p = params
            .get_mut(name)
            .ok_or_else(|| AutodiffError::shape(format!("gradient for unknown parameter {name}")))?;
        if p.dims() != g.dims() {
            return Err(AutodiffError::shape(format!(
                "parameter {name} {:?} vs gradient {:?}",
                p.dims(),
                g.dims()
            )));
        }
        let m = state.first_moment.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        let v = state.second_moment.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        if m.len() != g.len() || v.len() != g.len() {
            return Err(AutodiffError::shape(format!("moment buffers for {name} have the wrong size")));
        }
        let decay = state.lr * state.weight_decay;
        for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *p -= decay * *p;
            *m = state.beta1 * *m + (1.0 - state.beta1) * g;
            *v = state.beta2 * *v + (1.0 - state.beta2) * g * g;
            let m_hat = *m as f64 / bc1;
            let v_hat = *v as f64 / bc2;
            *p -= (state.lr as f64 * m_hat / (v_hat.sqrt() + state.eps as f64)) as f32;
        }
    }
    Ok(())
}
