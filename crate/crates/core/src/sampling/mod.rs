//! DDIM generation with classifier-free guidance.

mod output;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::adapters::AdapterSet;
use crate::backbone::{
    tokenize, ActivationTrace, Backbone, ConditionEmbedding, DiffusionSchedule, ForwardOptions, LatentVideo, VideoClip,
};
use crate::motion_enhancer::{enhance_condition, locate_verb, RuleTagger};
use crate::rng;
use crate::training::{MotionCheckpoint, NoisePredictor, SpatialCheckpoint};
use crate::{Error, Result};

pub use output::{read_generation, write_generation, GenerationRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub num_steps: usize,
    pub guidance_scale: f64,
    pub eta: f64,
    pub frames: usize,
    pub fps: f32,
    pub seed: u64,
    /// Verb position in the prompt tokens; located automatically when unset.
    pub verb_index: Option<usize>,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            num_steps: 30,
            guidance_scale: 12.0,
            eta: 0.0,
            frames: 8,
            fps: 8.0,
            seed: 0,
            verb_index: None,
        }
    }
}

impl SampleConfig {
    pub fn validate(&self, num_timesteps: usize) -> Result<()> {
        let mut bad = Vec::new();
        if self.num_steps == 0 || self.num_steps > num_timesteps {
            bad.push(format!(
                "num_steps must be in 1..={num_timesteps}, got {}",
                self.num_steps
            ));
        }
        if !(self.guidance_scale >= 0.0) {
            bad.push(format!("guidance_scale must be >= 0, got {}", self.guidance_scale));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            bad.push(format!("eta must be in [0, 1], got {}", self.eta));
        }
        if self.frames == 0 {
            bad.push("frames must be >= 1".into());
        }
        if !(self.fps > 0.0) {
            bad.push(format!("fps must be > 0, got {}", self.fps));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }
}

/// `eps_u + s * (eps_c - eps_u)`.
pub fn cfg_combine(eps_uncond: &Tensor, eps_cond: &Tensor, s: f64) -> Result<Tensor> {
    if eps_uncond.dims() != eps_cond.dims() {
        return Err(Error::Shape(format!(
            "guidance inputs {:?} and {:?}",
            eps_uncond.dims(),
            eps_cond.dims()
        )));
    }
    Ok((eps_uncond + ((eps_cond - eps_uncond)? * s)?)?)
}

/// Descending timesteps `(n-1)k, ..., k, 0` with stride `k = T / n`.
pub fn timesteps(num_timesteps: usize, num_steps: usize) -> Vec<usize> {
    let stride = (num_timesteps / num_steps.max(1)).max(1);
    (0..num_steps).rev().map(|i| i * stride).collect()
}

/// One DDIM update from `t` to `t_prev`; `None` means the clean end point
/// (`alpha_bar = 1`). `noise` is required when `eta > 0`.
///
/// Runs in the dtype of `z_t`.
pub fn ddim_step(
    schedule: &DiffusionSchedule,
    z_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    t_prev: Option<usize>,
    eta: f64,
    noise: Option<&Tensor>,
) -> Result<Tensor> {
    if let Some(tp) = t_prev {
        if tp >= t {
            return Err(Error::NonMonotoneTimesteps { t, t_prev: tp });
        }
    }
    let ab = schedule.alpha_bar(t)?;
    let ab_prev = match t_prev {
        Some(tp) => schedule.alpha_bar(tp)?,
        None => 1.0,
    };
    let eps_hat = eps_hat.to_dtype(z_t.dtype())?;
    let z0 = ((z_t - (&eps_hat * (1.0 - ab).sqrt())?)? / ab.sqrt())?;
    let sigma = eta * ((1.0 - ab_prev) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_prev).sqrt();
    let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    let mut out = ((&z0 * ab_prev.sqrt())? + (&eps_hat * dir)?)?;
    if sigma > 0.0 {
        let n = noise.ok_or_else(|| Error::Config("eta > 0 needs a noise tensor".into()))?;
        out = (out + (n.to_dtype(z_t.dtype())? * sigma)?)?;
    }
    Ok(out)
}

/// Conditional and unconditional embeddings for one prompt.
pub struct Conditioning {
    pub cond: ConditionEmbedding,
    pub uncond: ConditionEmbedding,
}

/// Encodes `prompt`, placing the cached residual on the verb row when a
/// motion checkpoint is given.
pub fn build_conditioning(
    model: &Backbone,
    prompt: &str,
    motion: Option<&MotionCheckpoint>,
    verb_index: Option<usize>,
) -> Result<Conditioning> {
    let text = model.text_encoder();
    let mut cond = text.encode(prompt)?;
    if let Some(m) = motion {
        let i = match verb_index {
            Some(i) => i,
            None => locate_verb(&tokenize(prompt), &RuleTagger::default().with_verbs([m.verb.clone()]))?,
        };
        cond = cond.with_verb_index(i)?;
        let e_r = m.residual.to_tensor(model.device())?;
        cond = enhance_condition(&cond, &e_r)?;
    } else if let Some(i) = verb_index {
        cond = cond.with_verb_index(i)?;
    }
    Ok(Conditioning {
        cond,
        uncond: text.encode_empty()?,
    })
}

fn check_compatible(
    model: &Backbone,
    motion: Option<&MotionCheckpoint>,
    subject: Option<&SpatialCheckpoint>,
) -> Result<()> {
    let sum = model.weights().checksum()?;
    if motion.is_some_and(|m| m.backbone_checksum != sum) {
        return Err(Error::Config(
            "motion checkpoint was trained on a different backbone".into(),
        ));
    }
    if subject.is_some_and(|s| s.backbone_checksum != sum) {
        return Err(Error::Config(
            "subject checkpoint was trained on a different backbone".into(),
        ));
    }
    Ok(())
}

/// Runs the guided DDIM loop from seeded Gaussian latents. `trace`, when
/// given, records the activations of every forward pass in order.
pub fn denoise(
    model: &Backbone,
    conditioning: &Conditioning,
    adapters: &[&AdapterSet],
    cfg: &SampleConfig,
    trace: Option<&ActivationTrace>,
) -> Result<LatentVideo> {
    let c = model.config();
    let shape = [1, cfg.frames, c.latent_height(), c.latent_width(), c.latent_channels];
    let opts = ForwardOptions {
        adapters,
        trace,
        ..ForwardOptions::default()
    };
    denoise_with(model, model.schedule(), &shape, conditioning, &opts, cfg)
}

/// [`denoise`] over any noise predictor; `shape` is `[1, f, h, w, c]`.
pub fn denoise_with(
    predictor: &dyn NoisePredictor,
    schedule: &DiffusionSchedule,
    shape: &[usize],
    conditioning: &Conditioning,
    opts: &ForwardOptions,
    cfg: &SampleConfig,
) -> Result<LatentVideo> {
    cfg.validate(schedule.num_timesteps())?;
    let dev = conditioning.cond.token_embeddings.device().clone();
    let mut r = rng::seeded(rng::derive_seed(cfg.seed, "sample"));
    let mut z = rng::randn(&mut r, shape, &dev)?;
    let context = Tensor::stack(
        &[
            &conditioning.uncond.token_embeddings,
            &conditioning.cond.token_embeddings,
        ],
        0,
    )?
    .to_dtype(DType::F32)?;
    let ts = timesteps(schedule.num_timesteps(), cfg.num_steps);
    for (k, &t) in ts.iter().enumerate() {
        let zz = Tensor::cat(&[&z, &z], 0)?;
        let eps = predictor.predict_noise(&zz, &[t, t], &context, opts)?;
        let guided = cfg_combine(
            &eps.get(0)?.unsqueeze(0)?,
            &eps.get(1)?.unsqueeze(0)?,
            cfg.guidance_scale,
        )?;
        let noise = if cfg.eta > 0.0 {
            Some(rng::randn(&mut r, shape, &dev)?)
        } else {
            None
        };
        z = ddim_step(
            schedule,
            &z,
            &guided,
            t,
            ts.get(k + 1).copied(),
            cfg.eta,
            noise.as_ref(),
        )?;
    }
    Ok(LatentVideo::clean(z))
}

/// Generates a clip for `prompt`. The motion checkpoint contributes its
/// temporal adapters and cached residual; the subject checkpoint its spatial
/// adapters. With neither, this samples the base model.
pub fn generate(
    model: &Backbone,
    prompt: &str,
    motion: Option<&MotionCheckpoint>,
    subject: Option<&SpatialCheckpoint>,
    cfg: &SampleConfig,
) -> Result<VideoClip> {
    check_compatible(model, motion, subject)?;
    let conditioning = build_conditioning(model, prompt, motion, cfg.verb_index)?;
    let mut adapters: Vec<&AdapterSet> = Vec::new();
    if let Some(s) = subject {
        adapters.push(&s.adapters);
    }
    if let Some(m) = motion {
        adapters.push(&m.temporal);
    }
    let z0 = denoise(model, &conditioning, &adapters, cfg, None)?;
    model.decode_latents(&z0, cfg.fps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{attach_adapters, AdapterKind, LoraConfig};
    use crate::appearance::InjectorWeights;
    use crate::backbone::BackboneConfig;
    use crate::motion_enhancer::{EnhancerMlp, ResidualEmbedding};
    use crate::training::TrainConfig;
    use candle_core::Device;

    fn tiny() -> BackboneConfig {
        BackboneConfig::default()
    }

    fn fake_motion(model: &Backbone, residual_scale: f32) -> MotionCheckpoint {
        let dev = model.device();
        let c = model.config();
        let temporal = attach_adapters(model, &[], AdapterKind::Temporal, &LoraConfig::default(), 3)
            .unwrap()
            .frozen_copy()
            .unwrap();
        let mut r = rng::seeded(9);
        MotionCheckpoint {
            temporal,
            mlp: EnhancerMlp::new(10, c.text_dim, 1, dev).unwrap(),
            residual: ResidualEmbedding {
                vector: rng::normal_vec(&mut r, c.text_dim, residual_scale),
                source_motion_id: "circling".into(),
            },
            injector: InjectorWeights::zeros(&c.block_widths(), 10, dev).unwrap(),
            verb: "circling".into(),
            motion_id: "circling".into(),
            config: TrainConfig::default(),
            image_provider: "palette".into(),
            backbone_checksum: model.weights().checksum().unwrap(),
            spatial_checksum: String::new(),
        }
    }

    #[test]
    fn guidance_endpoints() {
        let dev = Device::Cpu;
        let u = Tensor::new(&[1f32, 2.0], &dev).unwrap();
        let c = Tensor::new(&[3f32, -1.0], &dev).unwrap();
        assert_eq!(
            cfg_combine(&u, &c, 1.0).unwrap().to_vec1::<f32>().unwrap(),
            vec![3.0, -1.0]
        );
        assert_eq!(
            cfg_combine(&u, &c, 0.0).unwrap().to_vec1::<f32>().unwrap(),
            vec![1.0, 2.0]
        );
        assert_eq!(
            cfg_combine(&u, &c, 12.0).unwrap().to_vec1::<f32>().unwrap(),
            vec![25.0, -34.0]
        );
    }

    #[test]
    fn timestep_grid() {
        let ts = timesteps(1000, 30);
        assert_eq!(ts.len(), 30);
        assert_eq!(ts[0], 957);
        assert_eq!(*ts.last().unwrap(), 0);
        assert!(ts.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn ddim_rejects_non_monotone_and_keeps_consistent_state() {
        let dev = Device::Cpu;
        let s = DiffusionSchedule::linear(1000, 1e-4, 2e-2).unwrap();
        let z = Tensor::ones(4, DType::F64, &dev).unwrap();
        assert!(matches!(
            ddim_step(&s, &z, &z, 10, Some(10), 0.0, None),
            Err(Error::NonMonotoneTimesteps { .. })
        ));
        // A clean latent at t = 0 with zero predicted noise stays put once
        // scaled back to alpha_bar = 1.
        let ab = s.alpha_bar(0).unwrap();
        let zt = (&z * ab.sqrt()).unwrap();
        let eps = Tensor::zeros(4, DType::F64, &dev).unwrap();
        let out = ddim_step(&s, &zt, &eps, 0, None, 0.0, None).unwrap();
        for v in out.to_vec1::<f64>().unwrap() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sample_config_defaults_and_validation() {
        let c = SampleConfig::default();
        assert_eq!((c.num_steps, c.guidance_scale, c.eta, c.fps), (30, 12.0, 0.0, 8.0));
        assert!(c.validate(1000).is_ok());
        assert!(SampleConfig {
            num_steps: 1001,
            ..c.clone()
        }
        .validate(1000)
        .is_err());
        assert!(SampleConfig { eta: 1.5, ..c.clone() }.validate(1000).is_err());
        assert!(SampleConfig {
            guidance_scale: -1.0,
            ..c
        }
        .validate(1000)
        .is_err());
    }

    #[test]
    fn zero_residual_and_fresh_adapters_reproduce_the_base_model() {
        let dev = Device::Cpu;
        let m = Backbone::seeded(tiny(), &dev).unwrap();
        let mut motion = fake_motion(&m, 0.5).without_residual();
        motion.residual = ResidualEmbedding::zeros(m.config().text_dim, "circling");
        let cfg = SampleConfig {
            num_steps: 3,
            frames: 4,
            seed: 5,
            ..Default::default()
        };
        let base = generate(&m, "a red square is circling", None, None, &cfg).unwrap();
        let with = generate(&m, "a red square is circling", Some(&motion), None, &cfg).unwrap();
        assert_eq!(base, with);
    }

    #[test]
    fn checkpoint_changes_only_the_verb_row_at_first_spatial_input() {
        let dev = Device::Cpu;
        let m = Backbone::seeded(tiny(), &dev).unwrap();
        let motion = fake_motion(&m, 0.5);
        let cfg = SampleConfig {
            num_steps: 1,
            frames: 4,
            seed: 2,
            ..Default::default()
        };
        let prompt = "a blue triangle is circling";
        let base_c = build_conditioning(&m, prompt, None, None).unwrap();
        let mot_c = build_conditioning(&m, prompt, Some(&motion), None).unwrap();
        let diff: Vec<f32> = (&mot_c.cond.token_embeddings - &base_c.cond.token_embeddings)
            .unwrap()
            .abs()
            .unwrap()
            .sum(1)
            .unwrap()
            .to_vec1()
            .unwrap();
        let verb = tokenize(prompt).iter().position(|t| t == "circling").unwrap();
        for (i, d) in diff.iter().enumerate() {
            assert_eq!(*d > 0.0, i == verb, "row {i}");
        }
        let (ta, tb) = (ActivationTrace::new(), ActivationTrace::new());
        denoise(&m, &base_c, &[], &cfg, Some(&ta)).unwrap();
        denoise(&m, &mot_c, &[&motion.temporal], &cfg, Some(&tb)).unwrap();
        let a = ta.get("down.0.spatial.in").unwrap();
        let b = tb.get("down.0.spatial.in").unwrap();
        assert_eq!(
            a.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            b.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
    }

    #[test]
    fn exact_noise_oracle_denoises_to_its_target() {
        use crate::training::TrueNoiseOracle;
        let dev = Device::Cpu;
        let m = Backbone::seeded(tiny(), &dev).unwrap();
        let mut r = rng::seeded(4);
        let z0 = rng::randn(&mut r, &[1, 2, 8, 8, 4], &dev).unwrap();
        let oracle = TrueNoiseOracle {
            z0: Tensor::cat(&[&z0, &z0], 0).unwrap(),
            schedule: m.schedule().clone(),
        };
        let conditioning = build_conditioning(&m, "a cat", None, None).unwrap();
        for (steps, g) in [(30, 12.0), (7, 1.0)] {
            let cfg = SampleConfig {
                num_steps: steps,
                guidance_scale: g,
                frames: 2,
                ..Default::default()
            };
            let out = denoise_with(
                &oracle,
                m.schedule(),
                &[1, 2, 8, 8, 4],
                &conditioning,
                &ForwardOptions::default(),
                &cfg,
            )
            .unwrap();
            let err: f32 = (out.latents - &z0)
                .unwrap()
                .abs()
                .unwrap()
                .max_all()
                .unwrap()
                .to_scalar()
                .unwrap();
            assert!(err < 1e-3, "{steps} steps: {err}");
        }
    }

    #[test]
    fn generation_is_deterministic_and_shaped() {
        let dev = Device::Cpu;
        let m = Backbone::seeded(tiny(), &dev).unwrap();
        let motion = fake_motion(&m, 0.1);
        let cfg = SampleConfig {
            num_steps: 2,
            frames: 3,
            seed: 11,
            ..Default::default()
        };
        let a = generate(&m, "a cat is circling", Some(&motion), None, &cfg).unwrap();
        let b = generate(&m, "a cat is circling", Some(&motion), None, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.frame_count(), 3);
        assert!(matches!(
            generate(&m, "a cat sits", Some(&motion), None, &cfg),
            Err(Error::NoVerbFound(_))
        ));
    }
}
