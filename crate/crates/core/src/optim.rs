//! Adam with bias correction and the inverse-square-root warmup schedule.

use crate::tensor::TensorError;

/// Inverse-square-root warmup: rises linearly-ish to a peak at `warmup`
/// steps, then decays as step^-1/2. `step` counts from 1.
pub fn warmup_lr(step: u64, base_lr: f64, warmup: u64) -> f64 {
    let s = step as f64;
    let w = warmup as f64;
    base_lr * (s.powf(-0.5)).min(s * w.powf(-1.5))
}

struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam state for one parameter group, with its own base learning rate
/// and warmup horizon. Parameters are registered once, in a fixed order,
/// and must be passed to every step in that same order.
pub struct OptimizerState {
    pub step_count: u64,
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    moments: Vec<Moments>,
}

impl OptimizerState {
    pub fn new(base_lr: f64, warmup_steps: u64) -> Self {
        OptimizerState {
            step_count: 0,
            base_lr,
            warmup_steps,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-9,
            moments: Vec::new(),
        }
    }

    /// Reserves moment buffers for one parameter; returns its slot index.
    pub fn register(&mut self, numel: usize) -> usize {
        self.moments.push(Moments {
            m: vec![0.0; numel],
            v: vec![0.0; numel],
        });
        self.moments.len() - 1
    }

    pub fn registered(&self) -> usize {
        self.moments.len()
    }

    /// Learning rate the next call to [`adam_step`] will use.
    pub fn next_lr(&self) -> f64 {
        warmup_lr(self.step_count + 1, self.base_lr, self.warmup_steps)
    }
}

/// One (values, grad) pair for [`adam_step`].
pub struct AdamParam<'a> {
    pub values: &'a mut [f64],
    pub grad: &'a [f64],
}

/// Standard Adam update with bias correction. `params` must match the
/// registration order and shapes of `state`.
pub fn adam_step(
    params: &mut [AdamParam<'_>],
    state: &mut OptimizerState,
    lr: f64,
) -> Result<(), TensorError> {
    if params.len() != state.moments.len() {
        return Err(TensorError::Invalid {
            op: "adam_step",
            msg: format!(
                "{} params passed, {} registered",
                params.len(),
                state.moments.len()
            ),
        });
    }
    state.step_count += 1;
    let t = state.step_count as f64;
    let bc1 = 1.0 - state.beta1.powf(t);
    let bc2 = 1.0 - state.beta2.powf(t);
    for (slot, p) in params.iter_mut().enumerate() {
        let mom = &mut state.moments[slot];
        if p.values.len() != mom.m.len() || p.grad.len() != mom.m.len() {
            return Err(TensorError::ShapeMismatch {
                op: "adam_step",
                lhs: vec![p.values.len()],
                rhs: vec![mom.m.len()],
            });
        }
        for i in 0..p.values.len() {
            let g = p.grad[i];
            mom.m[i] = state.beta1 * mom.m[i] + (1.0 - state.beta1) * g;
            mom.v[i] = state.beta2 * mom.v[i] + (1.0 - state.beta2) * g * g;
            let m_hat = mom.m[i] / bc1;
            let v_hat = mom.v[i] / bc2;
            p.values[i] -= lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}
