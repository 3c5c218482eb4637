//! Variance-preserving forward diffusion.

use candle_core::Tensor;

use super::LatentVideo;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alphas_cumprod: Vec<f64>,
}

impl DiffusionSchedule {
    /// Betas spaced linearly from `beta_start` to `beta_end` over `steps` timesteps.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::Config(format!("schedule needs at least 2 steps, got {steps}")));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let betas = (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect::<Vec<_>>();
        let mut acc = 1.0;
        let alphas_cumprod = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self { betas, alphas_cumprod })
    }

    pub fn num_timesteps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas_cumprod(&self) -> &[f64] {
        &self.alphas_cumprod
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alphas_cumprod.get(t).copied().ok_or(Error::TimestepOutOfRange {
            t,
            max: self.num_timesteps(),
        })
    }

    /// `z_t = sqrt(ab_t) z0 + sqrt(1 - ab_t) eps` for a single timestep.
    pub fn add_noise(&self, z0: &LatentVideo, t: usize, eps: &Tensor) -> Result<LatentVideo> {
        if z0.timestep.is_some() {
            return Err(Error::Shape("add_noise expects clean latents".into()));
        }
        let ab = self.alpha_bar(t)?;
        let latents = mix(&z0.latents, eps, ab.sqrt(), (1.0 - ab).sqrt())?;
        Ok(LatentVideo {
            latents,
            timestep: Some(t),
        })
    }

    /// Batched q-sample: `ts[i]` applies to batch element `i` of a `[b, ...]` tensor.
    pub fn add_noise_batch(&self, z0: &Tensor, ts: &[usize], eps: &Tensor) -> Result<Tensor> {
        if z0.dims() != eps.dims() {
            return Err(Error::Shape(format!(
                "noise shape {:?} differs from latent shape {:?}",
                eps.dims(),
                z0.dims()
            )));
        }
        let b = z0.dim(0)?;
        if ts.len() != b {
            return Err(Error::Shape(format!("{} timesteps for batch of {b}", ts.len())));
        }
        let mut signal = Vec::with_capacity(b);
        let mut noise = Vec::with_capacity(b);
        for &t in ts {
            let ab = self.alpha_bar(t)?;
            signal.push(ab.sqrt() as f32);
            noise.push((1.0 - ab).sqrt() as f32);
        }
        let mut shape = vec![1usize; z0.rank()];
        shape[0] = b;
        let signal = Tensor::from_vec(signal, shape.as_slice(), z0.device())?;
        let noise = Tensor::from_vec(noise, shape.as_slice(), z0.device())?;
        Ok((z0.broadcast_mul(&signal)? + eps.broadcast_mul(&noise)?)?)
    }
}

fn mix(a: &Tensor, b: &Tensor, wa: f64, wb: f64) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "noise shape {:?} differs from latent shape {:?}",
            b.dims(),
            a.dims()
        )));
    }
    Ok(((a * wa)? + (b * wb)?)?)
}
