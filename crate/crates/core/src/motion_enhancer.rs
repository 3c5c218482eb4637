//! Verb-residual motion embeddings.
//!
//! The motion verb's text embedding `E_b` is corrected by a residual
//! `E_r = W2 · GELU(W1 · [pool(psi(V)), E_b])` computed from the reference
//! video's frame embeddings, kept small by an L2 penalty.

use std::collections::BTreeSet;

use candle_core::{DType, Device, Tensor, Var, D};
use serde::{Deserialize, Serialize};

use crate::appearance::FrameEmbedding;
use crate::backbone::ConditionEmbedding;
use crate::{rng, Error, Result};

/// Finds the main motion verb in a tokenized prompt.
pub trait VerbTagger {
    fn root_verb(&self, tokens: &[String]) -> Option<usize>;
}

/// Hermetic rule-based tagger.
///
/// In priority order:
/// 1. the first token after an auxiliary (`is`, `are`, `was`, `were`, `am`,
///    `be`, `been`, `being`), skipping one `-ly` adverb, that ends in `-ing`
///    or whose stem is in the verb lexicon;
/// 2. the first `-ing` token that is not in the noun stoplist and does not
///    directly follow a determiner;
/// 3. the first token whose stem is in the verb lexicon and which does not
///    directly follow a determiner.
///
/// Stems are the token itself, the token minus a trailing `s` and the token
/// minus `ing` with an optional restored `e` or undoubled final consonant.
#[derive(Debug, Clone)]
pub struct RuleTagger {
    lexicon: BTreeSet<String>,
}

const AUXILIARIES: [&str; 8] = ["is", "are", "was", "were", "am", "be", "been", "being"];
const DETERMINERS: [&str; 12] = [
    "a", "an", "the", "this", "that", "these", "those", "my", "his", "her", "their", "its",
];
const ING_NOUNS: [&str; 22] = [
    "painting",
    "building",
    "ceiling",
    "morning",
    "evening",
    "wedding",
    "clothing",
    "thing",
    "something",
    "nothing",
    "anything",
    "everything",
    "king",
    "ring",
    "string",
    "wing",
    "spring",
    "sibling",
    "pudding",
    "living",
    "swing",
    "ping",
];
const VERBS: [&str; 40] = [
    "circle",
    "bounce",
    "sweep",
    "lift",
    "skateboard",
    "run",
    "walk",
    "jump",
    "dance",
    "swim",
    "ride",
    "spin",
    "fly",
    "roll",
    "wave",
    "play",
    "climb",
    "ski",
    "surf",
    "move",
    "turn",
    "rotate",
    "slide",
    "fall",
    "rise",
    "push",
    "pull",
    "throw",
    "kick",
    "drive",
    "orbit",
    "sway",
    "shake",
    "nod",
    "clap",
    "box",
    "row",
    "skate",
    "hop",
    "drift",
];

impl Default for RuleTagger {
    fn default() -> Self {
        Self {
            lexicon: VERBS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl RuleTagger {
    pub fn with_verbs<I: IntoIterator<Item = S>, S: Into<String>>(mut self, verbs: I) -> Self {
        self.lexicon.extend(verbs.into_iter().map(Into::into));
        self
    }

    fn stems(tok: &str) -> Vec<String> {
        let mut out = vec![tok.to_string()];
        if let Some(s) = tok.strip_suffix('s') {
            out.push(s.to_string());
        }
        if let Some(s) = tok.strip_suffix("ing") {
            out.push(s.to_string());
            out.push(format!("{s}e"));
            let b = s.as_bytes();
            if b.len() >= 2 && b[b.len() - 1] == b[b.len() - 2] {
                out.push(s[..s.len() - 1].to_string());
            }
        }
        out
    }

    fn in_lexicon(&self, tok: &str) -> bool {
        Self::stems(tok).iter().any(|s| self.lexicon.contains(s))
    }

    fn is_ing_verb(tok: &str) -> bool {
        tok.len() > 4 && tok.ends_with("ing") && !ING_NOUNS.contains(&tok)
    }
}

impl VerbTagger for RuleTagger {
    fn root_verb(&self, tokens: &[String]) -> Option<usize> {
        let after_det = |i: usize| i > 0 && DETERMINERS.contains(&tokens[i - 1].as_str());
        for (i, t) in tokens.iter().enumerate() {
            if !AUXILIARIES.contains(&t.as_str()) {
                continue;
            }
            let mut j = i + 1;
            if tokens.get(j).is_some_and(|n| n.ends_with("ly")) {
                j += 1;
            }
            if let Some(n) = tokens.get(j) {
                if Self::is_ing_verb(n) || self.in_lexicon(n) {
                    return Some(j);
                }
            }
        }
        (0..tokens.len())
            .find(|&i| Self::is_ing_verb(&tokens[i]) && !after_det(i))
            .or_else(|| (0..tokens.len()).find(|&i| self.in_lexicon(&tokens[i]) && !after_det(i)))
    }
}

/// Index of the motion verb in `tokens`.
pub fn locate_verb(tokens: &[String], tagger: &dyn VerbTagger) -> Result<usize> {
    if tokens.is_empty() {
        return Err(Error::Empty("prompt tokens"));
    }
    tagger
        .root_verb(tokens)
        .ok_or_else(|| Error::NoVerbFound(tokens.join(" ")))
}

/// Mean of frame embeddings over the frame axis.
pub fn pool_video_embedding(frames: &[FrameEmbedding]) -> Result<Vec<f32>> {
    let first = frames.first().ok_or(Error::Empty("frame embeddings"))?;
    let d = first.dim();
    let mut acc = vec![0f64; d];
    for f in frames {
        if f.dim() != d {
            return Err(Error::DimensionMismatch(format!(
                "frame embeddings of width {d} and {}",
                f.dim()
            )));
        }
        acc.iter_mut().zip(&f.vector).for_each(|(a, v)| *a += f64::from(*v));
    }
    let n = frames.len() as f64;
    Ok(acc.into_iter().map(|a| (a / n) as f32).collect())
}

/// Two-layer GELU MLP, `W1: [d_hidden, d_img + d_text]`, `W2: [d_text, d_hidden]`, no biases.
#[derive(Debug, Clone)]
pub struct EnhancerMlp {
    pub w1: Var,
    pub w2: Var,
}

impl EnhancerMlp {
    pub const W1_STD: f32 = 0.02;

    /// `W1 ~ N(0, 0.02^2)`, `W2 = 0`, `d_hidden = d_text`.
    pub fn new(d_img: usize, d_text: usize, seed: u64, device: &Device) -> Result<Self> {
        let mut r = rng::seeded(rng::derive_seed(seed, "enhancer.w1"));
        let w1 = Tensor::from_vec(
            rng::normal_vec(&mut r, d_text * (d_img + d_text), Self::W1_STD),
            (d_text, d_img + d_text),
            device,
        )?;
        let w2 = Tensor::zeros((d_text, d_text), DType::F32, device)?;
        Ok(Self {
            w1: Var::from_tensor(&w1)?,
            w2: Var::from_tensor(&w2)?,
        })
    }

    pub fn from_tensors(w1: &Tensor, w2: &Tensor) -> Result<Self> {
        let (h, _) = w1.dims2()?;
        let (_, h2) = w2.dims2()?;
        if h != h2 {
            return Err(Error::DimensionMismatch(format!(
                "W1 has {h} hidden rows, W2 has {h2} hidden columns"
            )));
        }
        Ok(Self {
            w1: Var::from_tensor(w1)?,
            w2: Var::from_tensor(w2)?,
        })
    }

    pub fn d_in(&self) -> usize {
        self.w1.dims()[1]
    }

    pub fn d_text(&self) -> usize {
        self.w2.dims()[0]
    }

    pub fn d_img(&self) -> usize {
        self.d_in() - self.d_text()
    }

    pub fn vars(&self) -> Vec<Var> {
        vec![self.w1.clone(), self.w2.clone()]
    }

    /// Batched residuals: `pooled: [n, d_img]`, `e_b: [n, d_text]` -> `[n, d_text]`.
    pub fn forward(&self, pooled: &Tensor, e_b: &Tensor) -> Result<Tensor> {
        let (n, di) = pooled.dims2()?;
        let (n2, dt) = e_b.dims2()?;
        if n != n2 || di != self.d_img() || dt != self.d_text() {
            return Err(Error::DimensionMismatch(format!(
                "enhancer expects [{}] + [{}], got [{n}, {di}] + [{n2}, {dt}]",
                self.d_img(),
                self.d_text()
            )));
        }
        let x = Tensor::cat(&[pooled, e_b], D::Minus1)?;
        let h = gelu(&x.matmul(&self.w1.as_tensor().t()?)?)?;
        Ok(h.matmul(&self.w2.as_tensor().t()?)?)
    }
}

// `Tensor::gelu_erf` backpropagates through a 6-digit constant; composing
// from `erf` keeps the gradient exact in f64.
fn gelu(x: &Tensor) -> Result<Tensor> {
    let cdf = ((x / std::f64::consts::SQRT_2)?.erf()? + 1.0)?;
    Ok((x * cdf)?.affine(0.5, 0.0)?)
}

/// Residual for one motion concept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualEmbedding {
    pub vector: Vec<f32>,
    pub source_motion_id: String,
}

impl ResidualEmbedding {
    pub fn zeros(d: usize, motion_id: impl Into<String>) -> Self {
        Self {
            vector: vec![0.0; d],
            source_motion_id: motion_id.into(),
        }
    }

    pub fn norm(&self) -> f64 {
        self.vector.iter().map(|v| f64::from(*v).powi(2)).sum::<f64>().sqrt()
    }

    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.vector, self.vector.len(), device)?)
    }
}

pub fn compute_residual(pooled: &[f32], e_b: &[f32], mlp: &EnhancerMlp, motion_id: &str) -> Result<ResidualEmbedding> {
    let dev = mlp.w1.device();
    let p = Tensor::from_slice(pooled, (1, pooled.len()), dev)?;
    let e = Tensor::from_slice(e_b, (1, e_b.len()), dev)?;
    let r = mlp.forward(&p, &e)?.squeeze(0)?.to_dtype(DType::F32)?.to_vec1()?;
    if r.iter().any(|v: &f32| !v.is_finite()) {
        return Err(Error::Shape("residual embedding is not finite".into()));
    }
    Ok(ResidualEmbedding {
        vector: r,
        source_motion_id: motion_id.to_string(),
    })
}

/// Replace the verb row by `E_b + E_r`. `e_r` is a `[d_text]` tensor and may
/// carry gradients.
pub fn enhance_condition(cond: &ConditionEmbedding, e_r: &Tensor) -> Result<ConditionEmbedding> {
    let i = cond.verb_index.ok_or(Error::MissingVerbIndex)?;
    if cond.enhanced {
        return Err(Error::AlreadyEnhanced);
    }
    let (n, d) = cond.token_embeddings.dims2()?;
    if e_r.dims() != [d] {
        return Err(Error::DimensionMismatch(format!(
            "residual {:?} for embeddings of width {d}",
            e_r.dims()
        )));
    }
    let dev = e_r.device();
    let dt = e_r.dtype();
    let mut parts = Vec::with_capacity(3);
    if i > 0 {
        parts.push(Tensor::zeros((i, d), dt, dev)?);
    }
    parts.push(e_r.unsqueeze(0)?);
    if i + 1 < n {
        parts.push(Tensor::zeros((n - i - 1, d), dt, dev)?);
    }
    let delta = Tensor::cat(&parts, 0)?;
    Ok(ConditionEmbedding {
        token_embeddings: (cond.token_embeddings.to_dtype(dt)? + delta)?,
        token_count: cond.token_count,
        verb_index: cond.verb_index,
        enhanced: true,
    })
}

/// `||E_r||^2` for a `[d]` or `[n, d]` tensor (summed over all entries).
pub fn reg_loss(e_r: &Tensor) -> Result<Tensor> {
    Ok(e_r.sqr()?.sum_all()?)
}
