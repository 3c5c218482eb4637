use candle_core::Tensor;
use rand::Rng;

use crate::adapters::{AdapterKind, AdapterSet};
use crate::appearance::{Injection, InjectorWeights};
use crate::backbone::{Backbone, ConditionEmbedding, DiffusionSchedule, ForwardOptions};
use crate::motion_enhancer::{enhance_condition, reg_loss, EnhancerMlp};
use crate::rng::{self, SeededRng};
use crate::{Error, Result};

/// Anything that predicts the noise in `z_t`.
pub trait NoisePredictor {
    fn predict_noise(&self, z_t: &Tensor, ts: &[usize], context: &Tensor, opts: &ForwardOptions) -> Result<Tensor>;
}

impl NoisePredictor for Backbone {
    fn predict_noise(&self, z_t: &Tensor, ts: &[usize], context: &Tensor, opts: &ForwardOptions) -> Result<Tensor> {
        self.forward(z_t, ts, context, opts)
    }
}

/// Test predictor that knows the clean latents and returns the exact noise.
pub struct TrueNoiseOracle {
    pub z0: Tensor,
    pub schedule: DiffusionSchedule,
}

impl NoisePredictor for TrueNoiseOracle {
    fn predict_noise(&self, z_t: &Tensor, ts: &[usize], _: &Tensor, _: &ForwardOptions) -> Result<Tensor> {
        let b = z_t.dim(0)?;
        let mut out = Vec::with_capacity(b);
        for (i, &t) in ts.iter().enumerate() {
            let ab = self.schedule.alpha_bar(t)?;
            let zt = z_t.get(i)?;
            let z0 = self.z0.get(i)?;
            out.push(((zt - (z0 * ab.sqrt())?)? / (1.0 - ab).sqrt())?);
        }
        Ok(Tensor::stack(&out, 0)?)
    }
}

fn sample_noise(
    schedule: &DiffusionSchedule,
    z0: &Tensor,
    rng: &mut SeededRng,
) -> Result<(Vec<usize>, Tensor, Tensor)> {
    let b = z0.dim(0)?;
    let t_max = schedule.num_timesteps();
    let ts: Vec<usize> = (0..b).map(|_| rng.random_range(0..t_max)).collect();
    let eps = rng::randn(rng, z0.dims(), z0.device())?;
    let z_t = schedule.add_noise_batch(z0, &ts, &eps)?;
    Ok((ts, eps, z_t))
}

fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((a - b)?.sqr()?.mean_all()?)
}

/// Single-frame latents and their (recaptioned, possibly dropped) conditions.
pub struct Stage1Batch {
    /// `[b, 1, h, w, c]`.
    pub latents: Tensor,
    /// `[b, tokens, d_text]`.
    pub contexts: Tensor,
}

/// Appearance-stage loss `MSE(eps, eps_theta(z_t, c_r, t))` with `t ~ U[0, T)`.
///
/// `spatial` must be the only trainable set; `frozen` may hold further
/// sets, which must all be frozen.
pub fn stage1_step(
    model: &dyn NoisePredictor,
    schedule: &DiffusionSchedule,
    batch: &Stage1Batch,
    spatial: &AdapterSet,
    frozen: &[&AdapterSet],
    rng: &mut SeededRng,
) -> Result<Tensor> {
    if spatial.kind != AdapterKind::Spatial || !spatial.trainable {
        return Err(Error::Config("stage 1 trains a trainable spatial adapter set".into()));
    }
    if let Some(s) = frozen.iter().find(|s| s.trainable) {
        return Err(Error::Config(format!(
            "{} adapters must be frozen during stage 1",
            s.kind.as_str()
        )));
    }
    let f = batch.latents.dim(1)?;
    if f != 1 {
        return Err(Error::Shape(format!("stage 1 expects single frames, got {f}")));
    }
    let (ts, eps, z_t) = sample_noise(schedule, &batch.latents, rng)?;
    let mut sets: Vec<&AdapterSet> = vec![spatial];
    sets.extend_from_slice(frozen);
    let opts = ForwardOptions::with_adapters(&sets);
    let pred = model.predict_noise(&z_t, &ts, &batch.contexts, &opts)?;
    mse(&pred, &eps)
}

/// Clip latents, base conditions and the per-element appearance inputs.
pub struct Stage2Batch {
    /// `[b, f, h, w, c]` with `f >= 2`.
    pub latents: Tensor,
    /// Base-prompt conditions with their verb index set.
    pub conditions: Vec<ConditionEmbedding>,
    /// Elements whose condition is replaced by the empty prompt.
    pub dropped: Vec<bool>,
    /// The empty-prompt condition.
    pub empty: ConditionEmbedding,
    /// Mean frame embedding of each element's clip, `[b, d_img]`.
    pub pooled: Tensor,
    /// Embedding of one randomly chosen frame per element, `[b, d_img]`.
    pub injected: Tensor,
}

pub struct Stage2Loss {
    pub loss: Tensor,
    pub l_t: Tensor,
    pub l_reg: Tensor,
    /// `[b, d_text]`.
    pub e_r: Tensor,
}

/// Motion-stage loss `L_t + lambda * L_reg`, where `L_reg` is the batch mean
/// of `||E_r||^2`.
#[allow(clippy::too_many_arguments)]
pub fn stage2_step(
    model: &dyn NoisePredictor,
    schedule: &DiffusionSchedule,
    batch: &Stage2Batch,
    spatial: &AdapterSet,
    temporal: &AdapterSet,
    mlp: &EnhancerMlp,
    injector: &InjectorWeights,
    lambda: f64,
    rng: &mut SeededRng,
) -> Result<Stage2Loss> {
    if spatial.trainable {
        return Err(Error::Config("spatial adapters must be frozen during stage 2".into()));
    }
    if spatial.kind != AdapterKind::Spatial || temporal.kind != AdapterKind::Temporal {
        return Err(Error::Config(
            "stage 2 takes a spatial and a temporal adapter set".into(),
        ));
    }
    if !temporal.trainable {
        return Err(Error::Config("stage 2 trains the temporal adapter set".into()));
    }
    let (b, f) = (batch.latents.dim(0)?, batch.latents.dim(1)?);
    if f < 2 {
        return Err(Error::Shape(format!(
            "stage 2 expects clips of at least 2 frames, got {f}"
        )));
    }
    if batch.conditions.len() != b || batch.dropped.len() != b {
        return Err(Error::Shape(format!(
            "{} conditions and {} dropout flags for a batch of {b}",
            batch.conditions.len(),
            batch.dropped.len()
        )));
    }
    let e_b = batch
        .conditions
        .iter()
        .map(|c| c.row(c.verb_index.ok_or(Error::MissingVerbIndex)?))
        .collect::<Result<Vec<_>>>()?;
    let e_b = Tensor::stack(&e_b, 0)?;
    let e_r = mlp.forward(&batch.pooled, &e_b)?;
    let contexts = batch
        .conditions
        .iter()
        .zip(&batch.dropped)
        .enumerate()
        .map(|(i, (c, &drop))| {
            if drop {
                Ok(batch.empty.token_embeddings.clone())
            } else {
                Ok(enhance_condition(c, &e_r.get(i)?)?.token_embeddings)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let contexts = Tensor::stack(&contexts, 0)?;

    let (ts, eps, z_t) = sample_noise(schedule, &batch.latents, rng)?;
    let injection = Injection::new(batch.injected.clone(), injector, true);
    let sets = [spatial, temporal];
    let opts = ForwardOptions {
        adapters: &sets,
        injection: Some(&injection),
        ..ForwardOptions::default()
    };
    let pred = model.predict_noise(&z_t, &ts, &contexts, &opts)?;
    let l_t = mse(&pred, &eps)?;
    let l_reg = (reg_loss(&e_r)? / b as f64)?;
    let loss = (&l_t + (&l_reg * lambda)?)?;
    Ok(Stage2Loss { loss, l_t, l_reg, e_r })
}
