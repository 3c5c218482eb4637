//! Frozen toy text encoder.
//!
//! A word's base vector is a standard-normal draw seeded by hashing the word,
//! so the vocabulary is open. Rows are contextualised: every real token also
//! receives a fixed linear mix of the prompt's mean word vector, and every row
//! carries a sinusoidal position code. Prompts are padded to `max_tokens`.

use candle_core::{Device, Tensor};

use crate::{rng, Error, Result};

const PAD: &str = "<pad>";
const POSITION_WEIGHT: f32 = 0.3;
const CONTEXT_WEIGHT: f32 = 0.3;

/// Lower-cased whitespace tokens with surrounding punctuation stripped.
pub fn tokenize(prompt: &str) -> Vec<String> {
    prompt
        .split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

/// Per-token text embeddings for one prompt.
#[derive(Debug, Clone)]
pub struct ConditionEmbedding {
    /// `[max_tokens, d_text]`.
    pub token_embeddings: Tensor,
    /// Number of real (non-padding) tokens.
    pub token_count: usize,
    pub verb_index: Option<usize>,
    pub enhanced: bool,
}

impl ConditionEmbedding {
    pub fn with_verb_index(mut self, index: usize) -> Result<Self> {
        if index >= self.token_count {
            return Err(Error::Config(format!(
                "verb index {index} outside the {} prompt tokens",
                self.token_count
            )));
        }
        self.verb_index = Some(index);
        Ok(self)
    }

    /// Row `i` as a vector.
    pub fn row(&self, i: usize) -> Result<Tensor> {
        Ok(self.token_embeddings.get(i)?)
    }
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    seed: u64,
    dim: usize,
    max_tokens: usize,
    /// `[dim, dim]`, scaled by `1 / sqrt(dim)`.
    context_mix: Vec<f32>,
    device: Device,
}

impl TextEncoder {
    pub fn new(seed: u64, dim: usize, max_tokens: usize, device: &Device) -> Self {
        let mut r = rng::seeded(rng::derive_seed(seed, "text-context"));
        let context_mix = rng::normal_vec(&mut r, dim * dim, 1.0 / (dim as f32).sqrt());
        Self {
            seed,
            dim,
            max_tokens,
            context_mix,
            device: device.clone(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn max_tokens(&self) -> usize {
        self.max_tokens
    }

    fn word_vector(&self, word: &str) -> Vec<f32> {
        let mut r = rng::seeded(rng::derive_seed(self.seed, word));
        rng::normal_vec(&mut r, self.dim, 1.0)
    }

    fn position(&self, i: usize) -> impl Iterator<Item = f32> + '_ {
        (0..self.dim).map(move |k| {
            let freq = 1.0 / 100f32.powf((2 * (k / 2)) as f32 / self.dim as f32);
            let a = i as f32 * freq;
            (if k % 2 == 0 { a.sin() } else { a.cos() }) * POSITION_WEIGHT
        })
    }

    pub fn encode(&self, prompt: &str) -> Result<ConditionEmbedding> {
        let tokens = tokenize(prompt);
        self.encode_tokens(&tokens)
    }

    /// The empty prompt, used for the unconditional branch.
    pub fn encode_empty(&self) -> Result<ConditionEmbedding> {
        self.encode_tokens(&[])
    }

    pub fn encode_tokens(&self, tokens: &[String]) -> Result<ConditionEmbedding> {
        if tokens.len() > self.max_tokens {
            return Err(Error::Config(format!(
                "prompt has {} tokens, encoder maximum is {}",
                tokens.len(),
                self.max_tokens
            )));
        }
        let d = self.dim;
        let words: Vec<Vec<f32>> = tokens.iter().map(|t| self.word_vector(t)).collect();
        let mut mean = vec![0f32; d];
        for w in &words {
            mean.iter_mut().zip(w).for_each(|(m, v)| *m += v / words.len() as f32);
        }
        let context: Vec<f32> = (0..d)
            .map(|i| {
                let row = &self.context_mix[i * d..(i + 1) * d];
                CONTEXT_WEIGHT * row.iter().zip(&mean).map(|(a, b)| a * b).sum::<f32>()
            })
            .collect();
        let pad = self.word_vector(PAD);
        let mut data = Vec::with_capacity(self.max_tokens * d);
        for i in 0..self.max_tokens {
            let pos = self.position(i);
            match words.get(i) {
                Some(w) => data.extend(w.iter().zip(&context).zip(pos).map(|((a, c), p)| a + c + p)),
                None => data.extend(pad.iter().zip(pos).map(|(a, p)| a + p)),
            }
        }
        Ok(ConditionEmbedding {
            token_embeddings: Tensor::from_vec(data, (self.max_tokens, d), &self.device)?,
            token_count: tokens.len(),
            verb_index: None,
            enhanced: false,
        })
    }
}
