//! Miniature text-conditioned latent video diffusion backbone.
//!
//! The noise predictor is a two-level UNet of transformer blocks. Every block
//! runs a residual MLP conditioned on the timestep, a spatial transformer
//! (self-attention over the `h * w` positions of each frame, cross-attention
//! to the text tokens, FFN) and a temporal transformer (self-attention over the
//! frame axis at each spatial position, FFN). Single-frame inputs skip the
//! temporal transformers, since there is no frame axis to model.

mod autoencoder;
mod schedule;
mod text;
mod unet;
mod video;
mod weights;

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

pub use autoencoder::FrameAutoencoder;
pub use schedule::DiffusionSchedule;
pub use text::{tokenize, ConditionEmbedding, TextEncoder};
pub use unet::{ActivationTrace, ForwardOptions};
pub use video::{Frame, VideoClip};
pub use weights::{BaseWeights, PretrainRecord};

use crate::adapters::AdapterKind;
use crate::archive::TensorArchive;
use crate::{Error, Result};

pub const BACKBONE_ARCHIVE_KIND: &str = "backbone";
pub const BACKBONE_ARCHIVE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub latent_channels: usize,
    pub downsampling: usize,
    pub model_width: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    /// Number of down (and up) blocks.
    pub levels: usize,
    pub text_dim: usize,
    pub max_tokens: usize,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            frames: 8,
            latent_channels: 4,
            downsampling: 4,
            model_width: 64,
            heads: 4,
            ffn_mult: 2,
            levels: 2,
            text_dim: 64,
            max_tokens: 24,
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn latent_height(&self) -> usize {
        self.height / self.downsampling
    }

    pub fn latent_width(&self) -> usize {
        self.width / self.downsampling
    }

    /// Block prefixes in forward order, e.g. `down.0 down.1 up.1 up.0`.
    pub fn block_names(&self) -> Vec<String> {
        let down = (0..self.levels).map(|l| format!("down.{l}"));
        let up = (0..self.levels).rev().map(|l| format!("up.{l}"));
        down.chain(up).collect()
    }

    /// Channel width of each block in [`BackboneConfig::block_names`] order.
    pub fn block_widths(&self) -> Vec<usize> {
        vec![self.model_width; 2 * self.levels]
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::Config("backbone needs at least one level".into()));
        }
        let side = self.downsampling << (self.levels - 1);
        if self.height % side != 0 || self.width % side != 0 {
            return Err(Error::Config(format!(
                "{}x{} frames cannot be reduced through {} levels with downsampling {}",
                self.width, self.height, self.levels, self.downsampling
            )));
        }
        if self.model_width % self.heads != 0 {
            return Err(Error::Config("model width must be divisible by heads".into()));
        }
        Ok(())
    }
}

/// Clean (`timestep == None`) or noised latents shaped `[b, f, h, w, c]`.
#[derive(Debug, Clone)]
pub struct LatentVideo {
    pub latents: Tensor,
    pub timestep: Option<usize>,
}

impl LatentVideo {
    pub fn clean(latents: Tensor) -> Self {
        Self {
            latents,
            timestep: None,
        }
    }

    pub fn frames(&self) -> usize {
        self.latents.dims()[1]
    }
}

/// `[(b*f), h*w, c]` spatial layout to `[(b*h*w), f, c]` temporal layout.
pub fn to_temporal_layout(x: &Tensor, batch: usize, frames: usize) -> Result<Tensor> {
    let (bf, hw, c) = x.dims3()?;
    if bf != batch * frames {
        return Err(Error::Shape(format!("{bf} rows is not {batch} x {frames}")));
    }
    Ok(x.reshape((batch, frames, hw, c))?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((batch * hw, frames, c))?)
}

/// Inverse of [`to_temporal_layout`].
pub fn to_spatial_layout(x: &Tensor, batch: usize, frames: usize) -> Result<Tensor> {
    let (bhw, f, c) = x.dims3()?;
    if f != frames || bhw % batch != 0 {
        return Err(Error::Shape(format!("{bhw}x{f} rows is not a batch of {batch}")));
    }
    let hw = bhw / batch;
    Ok(x.reshape((batch, hw, frames, c))?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((batch * frames, hw, c))?)
}

/// The frozen base model: noise predictor weights, text encoder,
/// frame autoencoder and noise schedule.
#[derive(Debug, Clone)]
pub struct Backbone {
    config: BackboneConfig,
    weights: BaseWeights,
    text: TextEncoder,
    autoencoder: FrameAutoencoder,
    schedule: DiffusionSchedule,
    device: Device,
}

impl Backbone {
    /// Seeded initial weights, without any pretraining.
    pub fn seeded(config: BackboneConfig, device: &Device) -> Result<Self> {
        let weights = BaseWeights::init(&config, device)?;
        Self::from_parts(config, weights, device)
    }

    pub fn from_parts(config: BackboneConfig, weights: BaseWeights, device: &Device) -> Result<Self> {
        config.validate()?;
        weights.check_layout(&config)?;
        Ok(Self {
            text: TextEncoder::new(config.seed, config.text_dim, config.max_tokens, device),
            autoencoder: FrameAutoencoder::new(config.downsampling, config.latent_channels, config.seed, device)?,
            schedule: DiffusionSchedule::linear(config.timesteps, config.beta_start, config.beta_end)?,
            config,
            weights,
            device: device.clone(),
        })
    }

    /// Same architecture with different noise-predictor weights.
    pub fn with_weights(&self, weights: BaseWeights) -> Result<Self> {
        weights.check_layout(&self.config)?;
        Ok(Self {
            weights,
            ..self.clone()
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn weights(&self) -> &BaseWeights {
        &self.weights
    }

    pub fn text_encoder(&self) -> &TextEncoder {
        &self.text
    }

    pub fn autoencoder(&self) -> &FrameAutoencoder {
        &self.autoencoder
    }

    pub fn schedule(&self) -> &DiffusionSchedule {
        &self.schedule
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn encode_frames(&self, clip: &VideoClip) -> Result<LatentVideo> {
        self.autoencoder.encode(clip)
    }

    pub fn decode_latents(&self, latents: &LatentVideo, fps: f32) -> Result<VideoClip> {
        self.autoencoder.decode(latents, fps)
    }

    pub fn add_noise(&self, z0: &LatentVideo, t: usize, eps: &Tensor) -> Result<LatentVideo> {
        self.schedule.add_noise(z0, t, eps)
    }

    /// `(path, d_in, d_out)` of every projection eligible for `kind` adapters.
    pub fn lora_targets(&self, kind: AdapterKind) -> Vec<(String, usize, usize)> {
        let c = self.config.model_width;
        let hidden = c * self.config.ffn_mult;
        let (group, attn) = match kind {
            AdapterKind::Spatial => ("spatial", "attn1"),
            AdapterKind::Temporal => ("temporal", "attn"),
        };
        let mut out = Vec::new();
        for block in self.config.block_names() {
            for proj in ["to_q", "to_k", "to_v", "to_out"] {
                out.push((format!("{block}.{group}.{attn}.{proj}"), c, c));
            }
            out.push((format!("{block}.{group}.ff.fc1"), c, hidden));
            out.push((format!("{block}.{group}.ff.fc2"), hidden, c));
        }
        out
    }

    pub fn to_archive(&self) -> Result<TensorArchive> {
        let mut a = TensorArchive::new(BACKBONE_ARCHIVE_KIND, BACKBONE_ARCHIVE_VERSION);
        a.set_json("config", &self.config)?;
        a.set_field("seed", self.config.seed.to_string());
        a.set_json("pretrain", &self.weights.pretrain)?;
        for (k, t) in self.weights.iter() {
            a.insert(k.clone(), t.clone());
        }
        Ok(a)
    }

    pub fn from_archive(a: &TensorArchive, device: &Device) -> Result<Self> {
        a.expect(BACKBONE_ARCHIVE_KIND, BACKBONE_ARCHIVE_VERSION)?;
        let config: BackboneConfig = a.json("config")?;
        let pretrain: Option<PretrainRecord> = a.json("pretrain")?;
        let params: BTreeMap<String, Tensor> = a.tensors.clone();
        Self::from_parts(config, BaseWeights::from_map(params, pretrain), device)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<String> {
        self.to_archive()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>, device: &Device) -> Result<Self> {
        Self::from_archive(&TensorArchive::load(path, device)?, device)
    }
}
