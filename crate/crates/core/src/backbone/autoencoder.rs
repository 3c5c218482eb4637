//! Fixed frame autoencoder.
//!
//! Each `down x down` RGB patch (a vector of `3 * down^2` values) is mapped
//! linearly to `channels` latent values. The encoder rows are orthonormal:
//! the first three are the per-colour patch means, the remaining ones are
//! seeded random directions orthogonalised against the others. The decoder is
//! the transpose, so patches of uniform colour round-trip exactly and every
//! other patch is reconstructed by its orthogonal projection onto the row space.
//!
//! Latents are `scale * W (x - 0.5)`, i.e. `W x` plus a bias of `-0.5 * scale * W 1`.

use candle_core::{Device, Tensor};

use super::{LatentVideo, VideoClip};
use crate::{rng, Error, Result};

#[derive(Debug, Clone)]
pub struct FrameAutoencoder {
    down: usize,
    channels: usize,
    scale: f32,
    /// `[channels, 3 * down^2]`, patch layout `(dy, dx, rgb)`.
    basis: Tensor,
    bias: Tensor,
}

impl FrameAutoencoder {
    /// Round-trip bound: RMS per-pixel error on uniform-noise clips.
    /// Patch-constant clips round-trip exactly.
    pub const NOISE_RMS_BOUND: f64 = 0.29;

    pub fn new(down: usize, channels: usize, seed: u64, device: &Device) -> Result<Self> {
        let patch = 3 * down * down;
        if channels < 3 || channels > patch {
            return Err(Error::Config(format!(
                "autoencoder needs 3 <= channels <= {patch}, got {channels}"
            )));
        }
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(channels);
        let norm = 1.0 / ((down * down) as f64).sqrt();
        for c in 0..3 {
            rows.push((0..patch).map(|i| if i % 3 == c { norm } else { 0.0 }).collect());
        }
        let mut r = rng::seeded(rng::derive_seed(seed, "autoencoder"));
        while rows.len() < channels {
            let mut v: Vec<f64> = rng::normal_vec(&mut r, patch, 1.0).into_iter().map(f64::from).collect();
            for row in &rows {
                let dot: f64 = row.iter().zip(&v).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(row).for_each(|(x, a)| *x -= dot * a);
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-6 {
                rows.push(v.into_iter().map(|x| x / n).collect());
            }
        }
        let scale = 0.5f32;
        let flat: Vec<f32> = rows.iter().flatten().map(|v| *v as f32).collect();
        let basis = Tensor::from_vec(flat, (channels, patch), device)?;
        let bias = (basis.sum(1)? * f64::from(-0.5 * scale))?;
        Ok(Self {
            down,
            channels,
            scale,
            basis,
            bias,
        })
    }

    pub fn downsampling(&self) -> usize {
        self.down
    }

    pub fn latent_channels(&self) -> usize {
        self.channels
    }

    /// Per-channel encoder bias, i.e. the latent of an all-zero patch.
    pub fn encoder_bias(&self) -> Result<Vec<f32>> {
        Ok(self.bias.to_vec1()?)
    }

    /// Encode one clip into `[1, f, h, w, c]` latents.
    pub fn encode(&self, clip: &VideoClip) -> Result<LatentVideo> {
        let (h, w) = (clip.height(), clip.width());
        if h % self.down != 0 || w % self.down != 0 {
            return Err(Error::DimensionMismatch(format!(
                "{w}x{h} frames are not divisible by the downsampling factor {}",
                self.down
            )));
        }
        let x = clip.to_tensor(self.basis.device())?;
        let latents = self.encode_pixels(&x)?.unsqueeze(0)?;
        Ok(LatentVideo::clean(latents))
    }

    /// `[f, H, W, 3]` pixels to `[f, h, w, c]` latents.
    pub fn encode_pixels(&self, x: &Tensor) -> Result<Tensor> {
        let (f, hh, ww, _) = x.dims4()?;
        let d = self.down;
        let (h, w) = (hh / d, ww / d);
        let patches = x
            .reshape((f, h, d, w, d, 3))?
            .permute((0, 1, 3, 2, 4, 5))?
            .contiguous()?
            .reshape((f * h * w, 3 * d * d))?;
        let z = patches
            .matmul(&self.basis.t()?)?
            .affine(f64::from(self.scale), 0.0)?
            .broadcast_add(&self.bias)?;
        Ok(z.reshape((f, h, w, self.channels))?)
    }

    /// Decode `[1, f, h, w, c]` clean latents into a clip clamped to `[0, 1]`.
    pub fn decode(&self, latents: &LatentVideo, fps: f32) -> Result<VideoClip> {
        if latents.timestep.is_some() {
            return Err(Error::Shape("decode expects clean latents".into()));
        }
        let z = &latents.latents;
        let dims = z.dims();
        if dims.len() != 5 || dims[0] != 1 {
            return Err(Error::Shape(format!("expected [1, f, h, w, c] latents, got {dims:?}")));
        }
        let pixels = self.decode_latents(&z.squeeze(0)?)?;
        VideoClip::from_tensor(&pixels, fps)
    }

    /// `[f, h, w, c]` latents to clamped `[f, H, W, 3]` pixels.
    pub fn decode_latents(&self, z: &Tensor) -> Result<Tensor> {
        let (f, h, w, c) = z.dims4()?;
        if c != self.channels {
            return Err(Error::Shape(format!(
                "expected {} latent channels, got {c}",
                self.channels
            )));
        }
        let d = self.down;
        let centred = z
            .reshape((f * h * w, c))?
            .broadcast_sub(&self.bias)?
            .affine(1.0 / f64::from(self.scale), 0.0)?;
        let patches = centred.matmul(&self.basis)?;
        let x = patches
            .reshape((f, h, w, d, d, 3))?
            .permute((0, 1, 3, 2, 4, 5))?
            .contiguous()?
            .reshape((f, h * d, w * d, 3))?;
        Ok(x.clamp(0f32, 1f32)?)
    }
}
