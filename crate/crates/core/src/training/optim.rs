use candle_core::{Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};

use crate::Result;

/// AdamW (β = 0.9, 0.999) with global gradient-norm clipping.
pub struct ClippedAdamW {
    opt: AdamW,
    vars: Vec<Var>,
    max_norm: f64,
}

impl ClippedAdamW {
    pub fn new(vars: Vec<Var>, lr: f64, weight_decay: f64, max_norm: f64) -> Result<Self> {
        let params = ParamsAdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        };
        Ok(Self {
            opt: AdamW::new(vars.clone(), params)?,
            vars,
            max_norm,
        })
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.opt.set_learning_rate(lr);
    }

    /// Backpropagate `loss`, clip, and update. Returns the pre-clip gradient norm.
    pub fn backward_step(&mut self, loss: &Tensor) -> Result<f64> {
        let mut grads = loss.backward()?;
        let mut sq = 0f64;
        for v in &self.vars {
            if let Some(g) = grads.get(v.as_tensor()) {
                sq += f64::from(
                    g.sqr()?
                        .sum_all()?
                        .to_dtype(candle_core::DType::F32)?
                        .to_scalar::<f32>()?,
                );
            }
        }
        let norm = sq.sqrt();
        if self.max_norm > 0.0 && norm > self.max_norm {
            let s = self.max_norm / (norm + 1e-6);
            for v in &self.vars {
                if let Some(g) = grads.get(v.as_tensor()) {
                    let clipped = (g * s)?;
                    grads.insert(v.as_tensor(), clipped);
                }
            }
        }
        self.opt.step(&grads)?;
        Ok(norm)
    }
}
