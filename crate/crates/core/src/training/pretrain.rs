use candle_core::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::optim::ClippedAdamW;
use crate::backbone::{Backbone, ForwardOptions, PretrainRecord, VideoClip};
use crate::rng;
use crate::{Error, Result};

/// Base-model pretraining on a captioned clip corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub null_prompt_probability: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    /// Frames per video sample.
    pub frames: usize,
    /// Probability that a batch holds single frames instead of clips.
    pub image_probability: f64,
    /// Decay of the weight average that is returned. 0 returns the raw weights.
    pub ema_decay: f64,
    /// Anneal the learning rate to zero along a cosine.
    pub cosine_decay: bool,
    /// Recorded in the weights' provenance.
    pub corpus: String,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 4,
            learning_rate: 1e-3,
            seed: 0,
            null_prompt_probability: 0.1,
            weight_decay: 1e-2,
            grad_clip: 1.0,
            frames: 8,
            image_probability: 0.25,
            ema_decay: 0.999,
            cosine_decay: true,
            corpus: "synthetic".into(),
        }
    }
}

/// Trains every base weight with the plain noise-prediction loss and returns
/// the pretrained backbone. `on_step(step, loss)` is called after each update.
pub fn pretrain_backbone(
    model: &Backbone,
    corpus: &[(VideoClip, String)],
    cfg: &PretrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<Backbone> {
    if corpus.is_empty() {
        return Err(Error::DatasetEmpty);
    }
    if cfg.steps == 0 || cfg.batch_size == 0 || cfg.frames == 0 {
        return Err(Error::Config("steps, batch_size and frames must be >= 1".into()));
    }
    if !(0.0..1.0).contains(&cfg.ema_decay) {
        return Err(Error::Config("ema_decay must be in [0, 1)".into()));
    }
    let (weights, vars) = model.weights().to_vars()?;
    let live = model.with_weights(weights)?;
    let text = live.text_encoder();
    let empty = text.encode_empty()?.token_embeddings;
    let mut latents = Vec::with_capacity(corpus.len());
    let mut contexts = Vec::with_capacity(corpus.len());
    for (clip, prompt) in corpus {
        latents.push(live.encode_frames(clip)?.latents);
        contexts.push(text.encode(prompt)?.token_embeddings);
    }
    let mut ema: Vec<Tensor> = vars
        .iter()
        .map(|v| v.as_tensor().detach().copy())
        .collect::<candle_core::Result<_>>()?;
    let mut opt = ClippedAdamW::new(vars.clone(), cfg.learning_rate, cfg.weight_decay, cfg.grad_clip)?;
    let mut r = rng::seeded(rng::derive_seed(cfg.seed, "pretrain"));
    let schedule = live.schedule();
    let mut last = f64::NAN;
    for step in 1..=cfg.steps {
        let image = r.random::<f64>() < cfg.image_probability;
        let mut zs = Vec::with_capacity(cfg.batch_size);
        let mut ctx = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let ci = r.random_range(0..corpus.len());
            let total = latents[ci].dim(1)?;
            let f = if image { 1 } else { cfg.frames.min(total) };
            let start = r.random_range(0..=total - f);
            zs.push(latents[ci].narrow(1, start, f)?);
            let drop = r.random::<f64>() < cfg.null_prompt_probability;
            ctx.push(if drop { &empty } else { &contexts[ci] }.clone());
        }
        let z0 = Tensor::cat(&zs, 0)?;
        let ts: Vec<usize> = (0..cfg.batch_size)
            .map(|_| r.random_range(0..schedule.num_timesteps()))
            .collect();
        let eps = rng::randn(&mut r, z0.dims(), z0.device())?;
        let z_t = schedule.add_noise_batch(&z0, &ts, &eps)?;
        let pred = live.forward(&z_t, &ts, &Tensor::stack(&ctx, 0)?, &ForwardOptions::default())?;
        let loss = (pred - eps)?.sqr()?.mean_all()?;
        if cfg.cosine_decay {
            let progress = (step - 1) as f64 / cfg.steps as f64;
            opt.set_learning_rate(cfg.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
        }
        opt.backward_step(&loss)?;
        if cfg.ema_decay > 0.0 {
            // Warm-up keeps early averages from being dominated by the init.
            let d = cfg.ema_decay.min((1 + step) as f64 / (10 + step) as f64);
            for (e, v) in ema.iter_mut().zip(&vars) {
                *e = ((&*e * d)? + (v.as_tensor().detach() * (1.0 - d))?)?;
            }
        }
        last = f64::from(loss.to_scalar::<f32>()?);
        on_step(step, last);
    }
    if cfg.ema_decay > 0.0 {
        for (e, v) in ema.iter().zip(&vars) {
            v.set(e)?;
        }
    }
    let mut out = live.weights().detached()?;
    out.pretrain = Some(PretrainRecord {
        corpus: cfg.corpus.clone(),
        corpus_seed: cfg.seed,
        steps: cfg.steps,
        batch_size: cfg.batch_size,
        learning_rate: cfg.learning_rate,
        final_loss: last,
    });
    model.with_weights(out)
}
