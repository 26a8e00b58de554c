use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::tensor::Tensor;

/// Linear warmup from 0 to `base_lr`, then cosine decay to `min_lr`.
///
/// ```
/// use clever::train::lr_schedule;
///
/// assert_eq!(lr_schedule(10, 110, 10, 0.1, 0.001), 0.1);
/// assert!((lr_schedule(60, 110, 10, 0.1, 0.001) - 0.0505).abs() < 1e-15);
/// ```
pub fn lr_schedule(step: usize, total_steps: usize, warmup_steps: usize, base_lr: f64, min_lr: f64) -> f64 {
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(warmup_steps).max(1);
    let progress = ((step - warmup_steps) as f64 / span as f64).min(1.0);
    min_lr + 0.5 * (base_lr - min_lr) * (1.0 + (PI * progress).cos())
}

/// Cosine interpolation from `start` to `end` over `[0, total_steps)`.
pub fn cosine_ramp(step: usize, total_steps: usize, start: f64, end: f64) -> f64 {
    let progress = if total_steps <= 1 {
        1.0
    } else {
        (step as f64 / (total_steps - 1) as f64).min(1.0)
    };
    end + 0.5 * (start - end) * (1.0 + (PI * progress).cos())
}

/// SGD with momentum and L2 weight decay folded into the velocity:
/// `v <- m v + g + wd p`, `p <- p - lr v`. Parameters and velocity are
/// stored at f32 precision after every step.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub velocity: Vec<Tensor>,
    pub strict: bool,
}

impl Sgd {
    pub fn new(params: &ParamStore, momentum: f64) -> Self {
        Sgd {
            momentum,
            velocity: params.values().iter().map(|p| Tensor::zeros(p.shape())).collect(),
            strict: true,
        }
    }

    /// `grads[i]` of `None` means a zero gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<&Tensor>], lr: f64, weight_decay: f64) -> Result<()> {
        if grads.len() != params.len() || self.velocity.len() != params.len() {
            return Err(Error::Contract(format!(
                "{} gradients and {} velocity slots for {} parameters",
                grads.len(),
                self.velocity.len(),
                params.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if self.strict {
                if let Some(g) = g {
                    if !g.is_finite() {
                        return Err(Error::Numeric(format!(
                            "non-finite gradient for parameter {}",
                            params.name(i)
                        )));
                    }
                }
            }
            let p = params.get(i);
            let v = &self.velocity[i];
            let n = p.len();
            let mut nv = Vec::with_capacity(n);
            let mut np = Vec::with_capacity(n);
            for j in 0..n {
                let gj = g.map_or(0.0, |g| g.data()[j]);
                let vj = (self.momentum * v.data()[j] + gj + weight_decay * p.data()[j]) as f32 as f64;
                nv.push(vj);
                np.push((p.data()[j] - lr * vj) as f32 as f64);
            }
            self.velocity[i] = Tensor::from_vec(p.shape().to_vec(), nv)?;
            params.set(i, Tensor::from_vec(p.shape().to_vec(), np)?)?;
        }
        Ok(())
    }
}
