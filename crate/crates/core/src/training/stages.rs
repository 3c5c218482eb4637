use std::time::Instant;

use candle_core::Tensor;
use rand::Rng;

use super::optim::ClippedAdamW;
use super::steps::{stage1_step, stage2_step, Stage1Batch, Stage2Batch};
use super::{LogRecord, MotionCheckpoint, SpatialCheckpoint, TrainConfig, TrainLog};
use crate::adapters::{attach_adapters, AdapterKind, AdapterSet};
use crate::appearance::{
    embed_frame, recaption_or_fallback, FrameEmbedding, ImageEmbedder, InjectorWeights, PromptSpec, RecaptionOutcome,
    Recaptioner,
};
use crate::backbone::{tokenize, Backbone, ConditionEmbedding};
use crate::data::MotionDataset;
use crate::motion_enhancer::{locate_verb, pool_video_embedding, EnhancerMlp, ResidualEmbedding, RuleTagger};
use crate::rng::{self, SeededRng};
use crate::{Error, Result};

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(f64::from(t.to_dtype(candle_core::DType::F32)?.to_scalar::<f32>()?))
}

/// Verb index in prompt `i`: the dataset's verb token, else the tagger.
fn verb_index(ds: &MotionDataset, i: usize) -> Result<usize> {
    match ds.verb_index(i) {
        Some(v) => Ok(v),
        None => locate_verb(&tokenize(&ds.base_prompts[i]), &RuleTagger::default()),
    }
}

/// Recaptions every clip of `dataset` from one seeded random frame.
pub fn recaption_dataset(
    dataset: &MotionDataset,
    recaptioner: &dyn Recaptioner,
    seed: u64,
) -> Result<Vec<(PromptSpec, RecaptionOutcome)>> {
    let mut r = rng::seeded(rng::derive_seed(seed, "recaption"));
    let mut out = Vec::with_capacity(dataset.len());
    for (i, clip) in dataset.clips.iter().enumerate() {
        let frame = &clip.frames()[r.random_range(0..clip.frame_count())];
        let base = PromptSpec::new(dataset.base_prompts[i].clone()).with_verb_index(verb_index(dataset, i)?);
        out.push(recaption_or_fallback(&base, frame, recaptioner)?);
    }
    Ok(out)
}

/// Appearance stage with an in-memory log.
pub fn train_appearance(
    model: &Backbone,
    dataset: &MotionDataset,
    cfg: &TrainConfig,
    recaptioner: &dyn Recaptioner,
) -> Result<SpatialCheckpoint> {
    train_appearance_logged(model, dataset, cfg, recaptioner, &mut TrainLog::in_memory())
}

/// Trains spatial adapters on single frames paired with recaptioned prompts.
pub fn train_appearance_logged(
    model: &Backbone,
    dataset: &MotionDataset,
    cfg: &TrainConfig,
    recaptioner: &dyn Recaptioner,
    log: &mut TrainLog,
) -> Result<SpatialCheckpoint> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::DatasetEmpty);
    }
    let recaptions: Vec<PromptSpec> = recaption_dataset(dataset, recaptioner, cfg.seed)?
        .into_iter()
        .map(|(p, _)| p)
        .collect();
    let text = model.text_encoder();
    let conds = recaptions
        .iter()
        .map(|p| text.encode(p.training_prompt()))
        .collect::<Result<Vec<_>>>()?;
    let empty = text.encode_empty()?;
    let latents = dataset
        .clips
        .iter()
        .map(|c| Ok(model.encode_frames(c)?.latents))
        .collect::<Result<Vec<_>>>()?;

    let spatial = initial_spatial(model, cfg)?;
    let mut opt = ClippedAdamW::new(spatial.vars(), cfg.learning_rate, cfg.weight_decay, cfg.grad_clip)?;
    let mut r = rng::seeded(rng::derive_seed(cfg.seed, "stage1"));
    let start = Instant::now();
    for step in 1..=cfg.max_steps {
        let mut zs = Vec::with_capacity(cfg.batch_size);
        let mut ctx = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let ci = r.random_range(0..dataset.len());
            let fi = r.random_range(0..dataset.clips[ci].frame_count());
            let drop = r.random::<f64>() < cfg.null_prompt_probability;
            zs.push(latents[ci].narrow(1, fi, 1)?);
            ctx.push(if drop { &empty } else { &conds[ci] }.token_embeddings.clone());
        }
        let batch = Stage1Batch {
            latents: Tensor::cat(&zs, 0)?,
            contexts: Tensor::stack(&ctx, 0)?,
        };
        let loss = stage1_step(model, model.schedule(), &batch, &spatial, &[], &mut r)?;
        let grad_norm = opt.backward_step(&loss)?;
        let l = scalar(&loss)?;
        log.push(LogRecord {
            step,
            loss: l,
            l_t: l,
            l_reg: 0.0,
            e_r_norm: 0.0,
            grad_norm,
            wallclock: start.elapsed().as_secs_f64(),
        })?;
    }
    Ok(SpatialCheckpoint {
        adapters: spatial.frozen_copy()?,
        recaptions,
        config: cfg.clone(),
        backbone_checksum: model.weights().checksum()?,
    })
}

/// Trainable state of the motion stage.
pub struct MotionState {
    pub temporal: AdapterSet,
    pub mlp: EnhancerMlp,
    pub injector: InjectorWeights,
}

/// The spatial adapters the appearance stage starts from.
pub fn initial_spatial(model: &Backbone, cfg: &TrainConfig) -> Result<AdapterSet> {
    attach_adapters(
        model,
        &[],
        AdapterKind::Spatial,
        &cfg.lora(),
        rng::derive_seed(cfg.seed, "spatial-init"),
    )
}

/// The state the motion stage starts from, for image embeddings of width `d_img`.
pub fn initial_motion_state(
    model: &Backbone,
    spatial: &AdapterSet,
    cfg: &TrainConfig,
    d_img: usize,
) -> Result<MotionState> {
    let dev = model.device();
    Ok(MotionState {
        temporal: attach_adapters(
            model,
            &[spatial],
            AdapterKind::Temporal,
            &cfg.lora(),
            rng::derive_seed(cfg.seed, "temporal-init"),
        )?,
        mlp: EnhancerMlp::new(
            d_img,
            model.config().text_dim,
            rng::derive_seed(cfg.seed, "enhancer"),
            dev,
        )?,
        injector: InjectorWeights::zeros(&model.config().block_widths(), d_img, dev)?,
    })
}

/// Per-clip inputs of the motion stage that do not change between steps.
pub struct MotionInputs {
    pub latents: Vec<Tensor>,
    pub conditions: Vec<ConditionEmbedding>,
    pub frame_embeddings: Vec<Vec<FrameEmbedding>>,
    pub pooled: Vec<Vec<f32>>,
}

impl MotionInputs {
    pub fn prepare(model: &Backbone, dataset: &MotionDataset, provider: &dyn ImageEmbedder) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::DatasetEmpty);
        }
        let mut out = Self {
            latents: Vec::new(),
            conditions: Vec::new(),
            frame_embeddings: Vec::new(),
            pooled: Vec::new(),
        };
        for (i, clip) in dataset.clips.iter().enumerate() {
            if clip.frame_count() < 2 {
                return Err(Error::InvalidClip(format!("clip {i} has a single frame")));
            }
            out.latents.push(model.encode_frames(clip)?.latents);
            let cond = model
                .text_encoder()
                .encode(&dataset.base_prompts[i])?
                .with_verb_index(verb_index(dataset, i)?)?;
            out.conditions.push(cond);
            let embs = clip
                .frames()
                .iter()
                .enumerate()
                .map(|(k, f)| embed_frame(f, k, provider))
                .collect::<Result<Vec<_>>>()?;
            out.pooled.push(pool_video_embedding(&embs)?);
            out.frame_embeddings.push(embs);
        }
        Ok(out)
    }

    /// Mean pooled embedding and mean verb embedding over all clips.
    pub fn reference_inputs(&self) -> Result<(Vec<f32>, Vec<f32>)> {
        let n = self.pooled.len() as f32;
        let d_img = self.pooled[0].len();
        let mut pooled = vec![0f32; d_img];
        for p in &self.pooled {
            pooled.iter_mut().zip(p).for_each(|(a, v)| *a += v / n);
        }
        let mut e_b: Option<Vec<f32>> = None;
        for c in &self.conditions {
            let row: Vec<f32> = c.row(c.verb_index.ok_or(Error::MissingVerbIndex)?)?.to_vec1()?;
            match &mut e_b {
                None => e_b = Some(row.iter().map(|v| v / n).collect()),
                Some(acc) => acc.iter_mut().zip(&row).for_each(|(a, v)| *a += v / n),
            }
        }
        Ok((pooled, e_b.expect("non-empty dataset")))
    }
}

/// `E_r` over the whole reference set: the enhancer applied to the mean
/// pooled embedding and the mean verb embedding.
pub fn reference_residual(mlp: &EnhancerMlp, inputs: &MotionInputs, motion_id: &str) -> Result<ResidualEmbedding> {
    let (pooled, e_b) = inputs.reference_inputs()?;
    crate::motion_enhancer::compute_residual(&pooled, &e_b, mlp, motion_id)
}

pub fn train_motion(
    model: &Backbone,
    dataset: &MotionDataset,
    spatial: &SpatialCheckpoint,
    cfg: &TrainConfig,
    provider: &dyn ImageEmbedder,
) -> Result<MotionCheckpoint> {
    train_motion_logged(model, dataset, spatial, cfg, provider, &mut TrainLog::in_memory())
}

fn stage2_batch(
    inputs: &MotionInputs,
    empty: &ConditionEmbedding,
    cfg: &TrainConfig,
    r: &mut SeededRng,
) -> Result<Stage2Batch> {
    let n = inputs.latents.len();
    let dev = inputs.latents[0].device().clone();
    let (mut zs, mut conds, mut dropped, mut pooled, mut injected) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for _ in 0..cfg.batch_size {
        let ci = r.random_range(0..n);
        let total = inputs.latents[ci].dim(1)?;
        let f = cfg.frames_per_sample.min(total);
        let start = r.random_range(0..=total - f);
        let fi = start + r.random_range(0..f);
        dropped.push(r.random::<f64>() < cfg.null_prompt_probability);
        zs.push(inputs.latents[ci].narrow(1, start, f)?);
        conds.push(inputs.conditions[ci].clone());
        pooled.push(Tensor::from_slice(&inputs.pooled[ci], inputs.pooled[ci].len(), &dev)?);
        let e = &inputs.frame_embeddings[ci][fi].vector;
        injected.push(Tensor::from_slice(e, e.len(), &dev)?);
    }
    Ok(Stage2Batch {
        latents: Tensor::cat(&zs, 0)?,
        conditions: conds,
        dropped,
        empty: empty.clone(),
        pooled: Tensor::stack(&pooled, 0)?,
        injected: Tensor::stack(&injected, 0)?,
    })
}

/// Trains temporal adapters, the enhancer and the injector on full clips
/// with base prompts, the stage-1 spatial adapters frozen.
pub fn train_motion_logged(
    model: &Backbone,
    dataset: &MotionDataset,
    spatial: &SpatialCheckpoint,
    cfg: &TrainConfig,
    provider: &dyn ImageEmbedder,
    log: &mut TrainLog,
) -> Result<MotionCheckpoint> {
    cfg.validate()?;
    let checksum = model.weights().checksum()?;
    if spatial.backbone_checksum != checksum {
        return Err(Error::Config(
            "spatial checkpoint was trained on a different backbone".into(),
        ));
    }
    let inputs = MotionInputs::prepare(model, dataset, provider)?;
    let frozen_spatial = spatial.adapters.frozen_copy()?;
    let MotionState {
        temporal,
        mlp,
        injector,
    } = initial_motion_state(model, &frozen_spatial, cfg, provider.dim())?;
    let empty = model.text_encoder().encode_empty()?;

    let mut vars = temporal.vars();
    vars.extend(mlp.vars());
    vars.extend(injector.vars());
    let mut opt = ClippedAdamW::new(vars, cfg.learning_rate, cfg.weight_decay, cfg.grad_clip)?;
    let mut r = rng::seeded(rng::derive_seed(cfg.seed, "stage2"));
    let start = Instant::now();
    for step in 1..=cfg.max_steps {
        let batch = stage2_batch(&inputs, &empty, cfg, &mut r)?;
        let out = stage2_step(
            model,
            model.schedule(),
            &batch,
            &frozen_spatial,
            &temporal,
            &mlp,
            &injector,
            cfg.lambda_reg,
            &mut r,
        )?;
        let grad_norm = opt.backward_step(&out.loss)?;
        let e_r = reference_residual(&mlp, &inputs, &dataset.motion_id)?;
        log.push(LogRecord {
            step,
            loss: scalar(&out.loss)?,
            l_t: scalar(&out.l_t)?,
            l_reg: scalar(&out.l_reg)?,
            e_r_norm: e_r.norm(),
            grad_norm,
            wallclock: start.elapsed().as_secs_f64(),
        })?;
    }
    let residual = reference_residual(&mlp, &inputs, &dataset.motion_id)?;
    let snapshot = EnhancerMlp::from_tensors(&mlp.w1.as_tensor().copy()?, &mlp.w2.as_tensor().copy()?)?;
    let injector_copy = InjectorWeights::from_tensors(
        &injector
            .tensors()
            .iter()
            .map(|t| t.copy())
            .collect::<candle_core::Result<Vec<_>>>()?,
    )?;
    Ok(MotionCheckpoint {
        temporal: temporal.frozen_copy()?,
        mlp: snapshot,
        residual,
        injector: injector_copy,
        verb: dataset.verb.clone(),
        motion_id: dataset.motion_id.clone(),
        config: cfg.clone(),
        image_provider: provider.name().to_string(),
        backbone_checksum: checksum,
        spatial_checksum: spatial.adapters_checksum()?,
    })
}
