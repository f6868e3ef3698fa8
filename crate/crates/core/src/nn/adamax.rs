use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamaxConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Coupled L2: added to the gradient before the moment updates.
    pub weight_decay: f64,
}

impl Default for AdamaxConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-3,
        }
    }
}

/// Adamax (infinity-norm Adam) state for a fixed list of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamaxState {
    pub config: AdamaxConfig,
    pub step: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub inf_norm: Vec<Vec<f64>>,
}

impl AdamaxState {
    pub fn new<'a>(config: AdamaxConfig, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let lens: Vec<usize> = params.into_iter().map(Tensor::len).collect();
        Self {
            config,
            step: 0,
            first_moment: lens.iter().map(|&n| vec![0.0; n]).collect(),
            inf_norm: lens.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Applies one update to every parameter using its accumulated gradient
    /// (a missing gradient counts as zero).
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Tensor>) -> Result<()> {
        self.step += 1;
        let mut count = 0;
        for (k, p) in params.into_iter().enumerate() {
            if k >= self.first_moment.len() || self.first_moment[k].len() != p.len() {
                return Err(Error::Contract(format!(
                    "parameter {k} does not match the optimizer state"
                )));
            }
            let grad = p.grad().map(<[f64]>::to_vec);
            let zeros;
            let g = match &grad {
                Some(g) => g.as_slice(),
                None => {
                    zeros = vec![0.0; p.len()];
                    &zeros
                }
            };
            adamax_update(
                p.data_mut(),
                g,
                &mut self.first_moment[k],
                &mut self.inf_norm[k],
                self.step,
                &self.config,
            );
            count += 1;
        }
        if count != self.first_moment.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} parameters, got {count}",
                self.first_moment.len()
            )));
        }
        Ok(())
    }
}

/// One Adamax step on a flat parameter slice at (1-based) step `t`.
pub fn adamax_update(
    theta: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    u: &mut [f64],
    t: u64,
    cfg: &AdamaxConfig,
) {
    let step = cfg.lr / (1.0 - cfg.beta1.powi(t as i32));
    for i in 0..theta.len() {
        let g = grad[i] + cfg.weight_decay * theta[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        u[i] = (cfg.beta2 * u[i]).max(g.abs());
        if step != 0.0 {
            theta[i] -= step * m[i] / (u[i] + cfg.eps);
        }
    }
}
