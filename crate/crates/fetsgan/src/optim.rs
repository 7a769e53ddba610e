//! Adam optimizer and the epoch-indexed learning-rate schedule.

use crate::nn::Net;
use crate::scalar::Scalar;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("non-finite gradient for parameter `{param}`")]
    NonFiniteGrad { param: String },
    #[error("gradient shape mismatch for parameter `{param}`")]
    GradShape { param: String },
    #[error("epoch {epoch} outside schedule range 0..={total}")]
    EpochOutOfRange { epoch: usize, total: usize },
}

/// Per-parameter first/second moment estimates plus the shared step counter.
#[derive(Debug, Clone)]
pub struct AdamState<F> {
    pub m: Vec<Vec<F>>,
    pub v: Vec<Vec<F>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(param_sizes: &[usize]) -> Self {
        AdamState {
            m: param_sizes.iter().map(|&n| vec![F::zero(); n]).collect(),
            v: param_sizes.iter().map(|&n| vec![F::zero(); n]).collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn for_net(net: &Net<F>) -> Self {
        let sizes: Vec<usize> = net.entries.iter().map(|e| e.data.len()).collect();
        Self::new(&sizes)
    }
}

/// One Adam update with bias correction over a network's parameters.
///
/// `grads` is aligned with `net.entries`; a `None` entry leaves that
/// parameter (and its moments) untouched. A non-finite gradient aborts the
/// whole step before anything is modified.
pub fn adam_step<F: Scalar>(
    net: &mut Net<F>,
    grads: &[Option<Vec<F>>],
    state: &mut AdamState<F>,
    rate: f64,
) -> Result<(), OptimError> {
    assert_eq!(grads.len(), net.entries.len(), "gradient list length");
    for (entry, grad) in net.entries.iter().zip(grads) {
        if let Some(g) = grad {
            if g.len() != entry.data.len() {
                return Err(OptimError::GradShape {
                    param: entry.name.clone(),
                });
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(OptimError::NonFiniteGrad {
                    param: entry.name.clone(),
                });
            }
        }
    }
    state.t += 1;
    let b1 = F::from_f64(state.beta1);
    let b2 = F::from_f64(state.beta2);
    let one = F::one();
    let bc1 = F::from_f64(1.0 - state.beta1.powi(state.t as i32));
    let bc2 = F::from_f64(1.0 - state.beta2.powi(state.t as i32));
    let eps = F::from_f64(state.eps);
    let lr = F::from_f64(rate);
    for (i, grad) in grads.iter().enumerate() {
        let Some(g) = grad else { continue };
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        let p = &mut net.entries[i].data;
        for j in 0..g.len() {
            m[j] = b1 * m[j] + (one - b1) * g[j];
            v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] = p[j] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Scale `grads` in place so their global L2 norm does not exceed `max_norm`.
pub fn clip_global_norm<F: Scalar>(grads: &mut [Option<Vec<F>>], max_norm: f64) {
    let mut sq = 0.0f64;
    for g in grads.iter().flatten() {
        for &v in g {
            sq += v.to_f64() * v.to_f64();
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = F::from_f64(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            for v in g.iter_mut() {
                *v = *v * s;
            }
        }
    }
}

/// Constant learning rate that decays geometrically over the tail of the
/// epoch range: flat at `base_rate` until `(1 - decay_fraction) * total`,
/// then exponential interpolation down to `base_rate * final_ratio` at the
/// final epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub base_rate: f64,
    pub total_epochs: usize,
    pub decay_fraction: f64,
    pub final_ratio: f64,
}

impl LrSchedule {
    pub fn new(base_rate: f64, total_epochs: usize) -> Self {
        LrSchedule {
            base_rate,
            total_epochs,
            decay_fraction: 0.1,
            final_ratio: 0.1,
        }
    }

    pub fn rate_at(&self, epoch: usize) -> Result<f64, OptimError> {
        if epoch > self.total_epochs {
            return Err(OptimError::EpochOutOfRange {
                epoch,
                total: self.total_epochs,
            });
        }
        let total = self.total_epochs as f64;
        let window_start = (1.0 - self.decay_fraction) * total;
        let e = epoch as f64;
        if e < window_start || total <= window_start {
            return Ok(self.base_rate);
        }
        let frac = (e - window_start) / (total - window_start);
        Ok(self.base_rate * self.final_ratio.powf(frac))
    }
}
