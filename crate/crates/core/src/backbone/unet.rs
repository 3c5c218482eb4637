use std::cell::RefCell;

use candle_core::{Device, Tensor, D};

use super::{to_spatial_layout, to_temporal_layout, Backbone, ConditionEmbedding, LatentVideo};
use crate::adapters::{low_rank_update, AdapterSet};
use crate::appearance::Injection;
use crate::{Error, Result};

/// Records named intermediate activations during a forward pass.
#[derive(Debug, Default)]
pub struct ActivationTrace {
    entries: RefCell<Vec<(String, Tensor)>>,
}

impl ActivationTrace {
    pub fn new() -> Self {
        Self::default()
    }

    fn record(&self, name: String, t: &Tensor) {
        self.entries.borrow_mut().push((name, t.detach()));
    }

    pub fn get(&self, name: &str) -> Option<Tensor> {
        self.entries
            .borrow()
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.clone())
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.borrow().iter().map(|(n, _)| n.clone()).collect()
    }
}

#[derive(Default, Clone, Copy)]
pub struct ForwardOptions<'a> {
    pub adapters: &'a [&'a AdapterSet],
    pub injection: Option<&'a Injection<'a>>,
    /// Skip every temporal transformer (ablation).
    pub bypass_temporal: bool,
    pub trace: Option<&'a ActivationTrace>,
}

impl<'a> ForwardOptions<'a> {
    pub fn with_adapters(adapters: &'a [&'a AdapterSet]) -> Self {
        Self {
            adapters,
            ..Self::default()
        }
    }
}

struct Ctx<'a> {
    model: &'a Backbone,
    opts: &'a ForwardOptions<'a>,
    batch: usize,
    frames: usize,
}

impl Ctx<'_> {
    fn w(&self, name: &str) -> Result<&Tensor> {
        self.model.weights.require(name)
    }

    fn linear(&self, path: &str, x: &Tensor) -> Result<Tensor> {
        let w = self.w(&format!("{path}.weight"))?;
        let lead = x.dims()[..x.rank() - 1].to_vec();
        let x2 = x.flatten_to(x.rank() - 2)?;
        let mut y = x2.matmul(&w.t()?)?;
        if let Some(b) = self.model.weights.get(&format!("{path}.bias")) {
            y = y.broadcast_add(b)?;
        }
        for set in self.opts.adapters {
            if let Some(pair) = set.get(path) {
                y = low_rank_update(&x2, &y, pair, set.trainable)?;
            }
        }
        let mut shape = lead;
        shape.push(w.dim(0)?);
        Ok(y.reshape(shape)?)
    }

    fn norm(&self, path: &str, x: &Tensor) -> Result<Tensor> {
        layer_norm(x, self.w(&format!("{path}.weight"))?, self.w(&format!("{path}.bias"))?)
    }

    fn heads(&self) -> usize {
        self.model.config.heads
    }

    fn self_attention(&self, path: &str, x: &Tensor, qk_bias: Option<&Tensor>) -> Result<Tensor> {
        let qk_in = match qk_bias {
            Some(p) => x.broadcast_add(p)?,
            None => x.clone(),
        };
        let q = self.linear(&format!("{path}.to_q"), &qk_in)?;
        let k = self.linear(&format!("{path}.to_k"), &qk_in)?;
        let v = self.linear(&format!("{path}.to_v"), x)?;
        let out = attention(&q, &k, &v, self.heads())?;
        self.linear(&format!("{path}.to_out"), &out)
    }

    fn cross_attention(&self, path: &str, x: &Tensor, context: &Tensor) -> Result<Tensor> {
        let q = self.linear(&format!("{path}.to_q"), x)?;
        let k = self.linear(&format!("{path}.to_k"), context)?;
        let v = self.linear(&format!("{path}.to_v"), context)?;
        let out = attention(&q, &k, &v, self.heads())?;
        self.linear(&format!("{path}.to_out"), &out)
    }

    fn ffn(&self, path: &str, x: &Tensor) -> Result<Tensor> {
        let h = self.linear(&format!("{path}.fc1"), x)?.gelu_erf()?;
        self.linear(&format!("{path}.fc2"), &h)
    }

    fn trace(&self, name: impl FnOnce() -> String, t: &Tensor) {
        if let Some(tr) = self.opts.trace {
            tr.record(name(), t);
        }
    }

    /// One UNet block on spatial-layout hidden states `[(b*f), h*w, c]`.
    fn block(&self, index: usize, prefix: &str, x: &Tensor, temb: &Tensor, context: &Tensor) -> Result<Tensor> {
        let p = |n: &str| format!("{prefix}.{n}");

        let h = self.norm(&p("res.norm"), x)?;
        let h = h.broadcast_add(&self.linear(&p("res.temb"), &temb.silu()?)?)?;
        let h = self.linear(&p("res.fc1"), &h)?.silu()?;
        let x = (x + self.linear(&p("res.fc2"), &h)?)?;

        self.trace(|| p("spatial.in"), &x);
        let x = (&x + self.self_attention(&p("spatial.attn1"), &self.norm(&p("spatial.norm1"), &x)?, None)?)?;
        let x = (&x + self.cross_attention(&p("spatial.attn2"), &self.norm(&p("spatial.norm2"), &x)?, context)?)?;
        let x = (&x + self.ffn(&p("spatial.ff"), &self.norm(&p("spatial.norm3"), &x)?)?)?;

        if self.frames == 1 || self.opts.bypass_temporal {
            return Ok(x);
        }
        let mut xt = to_temporal_layout(&x, self.batch, self.frames)?;
        if let Some(inj) = self.opts.injection {
            xt = inj.apply(&xt, index, self.batch)?;
        }
        self.trace(|| p("temporal.in"), &xt);
        let c = xt.dim(2)?;
        let pe = sinusoidal_table(self.frames, c, xt.device())?;
        let n = self.norm(&p("temporal.norm1"), &xt)?;
        let xt = (&xt + self.self_attention(&p("temporal.attn"), &n, Some(&pe))?)?;
        let xt = (&xt + self.ffn(&p("temporal.ff"), &self.norm(&p("temporal.norm2"), &xt)?)?)?;
        to_spatial_layout(&xt, self.batch, self.frames)
    }
}

fn layer_norm(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let xc = x.broadcast_sub(&mean)?;
    let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
    let xn = xc.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
    Ok(xn.broadcast_mul(weight)?.broadcast_add(bias)?)
}

/// Multi-head scaled dot-product attention on `[B, N, C]` inputs.
fn attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<Tensor> {
    let (b, n, c) = q.dims3()?;
    let m = k.dim(1)?;
    let dh = c / heads;
    let split = |t: &Tensor, len: usize| -> Result<Tensor> {
        Ok(t.reshape((b, len, heads, dh))?.transpose(1, 2)?.contiguous()?)
    };
    let (q, k, v) = (split(q, n)?, split(k, m)?, split(v, m)?);
    let scores = (q.matmul(&k.t()?)? * (1.0 / (dh as f64).sqrt()))?;
    let weights = candle_nn::ops::softmax(&scores, D::Minus1)?;
    let out = weights.matmul(&v)?;
    Ok(out.transpose(1, 2)?.contiguous()?.reshape((b, n, c))?)
}

fn sinusoid(pos: f32, k: usize, dim: usize) -> f32 {
    let half = (dim / 2).max(1);
    let i = k % half;
    let freq = (-(10000f32).ln() * i as f32 / half as f32).exp();
    if k < half {
        (pos * freq).sin()
    } else {
        (pos * freq).cos()
    }
}

/// `[n, dim]` table of sinusoidal codes for positions `0..n`.
fn sinusoidal_table(n: usize, dim: usize, device: &Device) -> Result<Tensor> {
    let data: Vec<f32> = (0..n)
        .flat_map(|p| (0..dim).map(move |k| sinusoid(p as f32, k, dim)))
        .collect();
    Ok(Tensor::from_vec(data, (n, dim), device)?)
}

/// `[h*w, dim]` codes: the first half of the channels encode the row, the rest the column.
fn grid_table(h: usize, w: usize, dim: usize, device: &Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(h * w * dim);
    for y in 0..h {
        for x in 0..w {
            data.extend((0..half).map(|k| sinusoid(y as f32, k, half)));
            data.extend((0..dim - half).map(|k| sinusoid(x as f32, k, dim - half)));
        }
    }
    Ok(Tensor::from_vec(data, (h * w, dim), device)?)
}

fn timestep_table(ts: &[usize], dim: usize, device: &Device) -> Result<Tensor> {
    let data: Vec<f32> = ts
        .iter()
        .flat_map(|&t| (0..dim).map(move |k| sinusoid(t as f32, k, dim)))
        .collect();
    Ok(Tensor::from_vec(data, (ts.len(), dim), device)?)
}

/// `[B, h*w, c]` to `[B, h*w/4, 4c]` by merging 2x2 neighbourhoods.
fn merge_2x2(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, _, c) = x.dims3()?;
    Ok(x.reshape((b, h / 2, 2, w / 2, 2, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((b, (h / 2) * (w / 2), 4 * c))?)
}

/// Inverse of [`merge_2x2`]: `[B, h*w/4, 4c]` to `[B, h*w, c]`.
fn split_2x2(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, _, c4) = x.dims3()?;
    let c = c4 / 4;
    Ok(x.reshape((b, h / 2, w / 2, 2, 2, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((b, h * w, c))?)
}

impl Backbone {
    /// Noise prediction for `z_t: [b, f, h, w, c]` at per-element timesteps
    /// `ts`, conditioned on `context: [b, tokens, d_text]`.
    pub fn forward(&self, z_t: &Tensor, ts: &[usize], context: &Tensor, opts: &ForwardOptions) -> Result<Tensor> {
        let cfg = &self.config;
        let (b, f, h, w, c) = z_t.dims5()?;
        if (h, w, c) != (cfg.latent_height(), cfg.latent_width(), cfg.latent_channels) {
            return Err(Error::Shape(format!(
                "latents are {h}x{w}x{c}, model expects {}x{}x{}",
                cfg.latent_height(),
                cfg.latent_width(),
                cfg.latent_channels
            )));
        }
        if ts.len() != b {
            return Err(Error::Shape(format!("{} timesteps for a batch of {b}", ts.len())));
        }
        if let Some(t) = ts.iter().find(|t| **t >= cfg.timesteps) {
            return Err(Error::TimestepOutOfRange {
                t: *t,
                max: cfg.timesteps,
            });
        }
        let (cb, tokens, d) = context.dims3()?;
        if cb != b || d != cfg.text_dim || tokens > cfg.max_tokens {
            return Err(Error::Shape(format!(
                "context {:?} does not fit batch {b}, {} tokens of width {}",
                context.dims(),
                cfg.max_tokens,
                cfg.text_dim
            )));
        }
        for set in opts.adapters {
            set.validate_for(self)?;
        }
        let ctx = Ctx {
            model: self,
            opts,
            batch: b,
            frames: f,
        };
        let width = cfg.model_width;
        let dev = z_t.device();

        let temb = timestep_table(ts, width, dev)?;
        let temb = ctx.linear("time.fc1", &temb)?.silu()?;
        let temb = ctx.linear("time.fc2", &temb)?;
        let temb = temb
            .unsqueeze(1)?
            .broadcast_as((b, f, width))?
            .reshape((b * f, 1, width))?;
        let context = context
            .unsqueeze(1)?
            .broadcast_as((b, f, tokens, d))?
            .reshape((b * f, tokens, d))?;
        if let Some(tr) = opts.trace {
            tr.record("context".into(), &context);
        }

        let mut x = ctx.linear("conv_in", &z_t.reshape((b * f, h * w, c))?)?;
        x = x.broadcast_add(&grid_table(h, w, width, dev)?)?;

        let names = cfg.block_names();
        let mut skips = Vec::with_capacity(cfg.levels);
        let (mut lh, mut lw) = (h, w);
        for level in 0..cfg.levels {
            x = ctx.block(level, &names[level], &x, &temb, &context)?;
            skips.push(x.clone());
            if level + 1 < cfg.levels {
                x = ctx.linear(&format!("down.{level}.downsample"), &merge_2x2(&x, lh, lw)?)?;
                lh /= 2;
                lw /= 2;
                x = x.broadcast_add(&grid_table(lh, lw, width, dev)?)?;
            }
        }
        for level in (0..cfg.levels).rev() {
            if level + 1 < cfg.levels {
                lh *= 2;
                lw *= 2;
                x = split_2x2(&ctx.linear(&format!("up.{level}.upsample"), &x)?, lh, lw)?;
            }
            let skip = &skips[level];
            x = ctx.linear(&format!("up.{level}.skip_proj"), &Tensor::cat(&[&x, skip], 2)?)?;
            let index = 2 * cfg.levels - 1 - level;
            x = ctx.block(index, &names[index], &x, &temb, &context)?;
        }
        let x = ctx.linear("out.proj", &ctx.norm("out.norm", &x)?)?;
        Ok(x.reshape((b, f, h, w, c))?)
    }

    /// Single-sample forward: `[1, f, h, w, c]` noised latents and one condition.
    pub fn unet_forward(
        &self,
        z_t: &LatentVideo,
        cond: &ConditionEmbedding,
        adapters: &[&AdapterSet],
        injection: Option<&Injection>,
    ) -> Result<Tensor> {
        let t = z_t
            .timestep
            .ok_or_else(|| Error::Shape("unet_forward expects noised latents with a timestep".into()))?;
        let b = z_t.latents.dim(0)?;
        let context = cond.token_embeddings.unsqueeze(0)?.repeat((b, 1, 1))?;
        let opts = ForwardOptions {
            adapters,
            injection,
            ..ForwardOptions::default()
        };
        self.forward(&z_t.latents, &vec![t; b], &context, &opts)
    }
}
