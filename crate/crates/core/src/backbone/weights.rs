use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::BackboneConfig;
use crate::{archive, rng, Error, Result};

/// Provenance of pretrained base weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainRecord {
    pub corpus: String,
    pub corpus_seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Normal(f32),
    Zeros,
    Ones,
}

/// Named noise-predictor tensors. Linear weights are `[d_out, d_in]`.
#[derive(Debug, Clone)]
pub struct BaseWeights {
    params: BTreeMap<String, Tensor>,
    pub pretrain: Option<PretrainRecord>,
}

fn linear(specs: &mut Vec<(String, Vec<usize>, Init)>, name: &str, d_in: usize, d_out: usize, bias: bool) {
    let std = 1.0 / (d_in as f32).sqrt();
    specs.push((format!("{name}.weight"), vec![d_out, d_in], Init::Normal(std)));
    if bias {
        specs.push((format!("{name}.bias"), vec![d_out], Init::Zeros));
    }
}

fn norm(specs: &mut Vec<(String, Vec<usize>, Init)>, name: &str, c: usize) {
    specs.push((format!("{name}.weight"), vec![c], Init::Ones));
    specs.push((format!("{name}.bias"), vec![c], Init::Zeros));
}

fn param_specs(cfg: &BackboneConfig) -> Vec<(String, Vec<usize>, Init)> {
    let c = cfg.model_width;
    let hidden = c * cfg.ffn_mult;
    let d = cfg.text_dim;
    let mut s = Vec::new();
    linear(&mut s, "time.fc1", c, c, true);
    linear(&mut s, "time.fc2", c, c, true);
    linear(&mut s, "conv_in", cfg.latent_channels, c, true);
    for block in cfg.block_names() {
        let p = |n: &str| format!("{block}.{n}");
        norm(&mut s, &p("res.norm"), c);
        linear(&mut s, &p("res.temb"), c, c, true);
        linear(&mut s, &p("res.fc1"), c, c, true);
        linear(&mut s, &p("res.fc2"), c, c, true);

        norm(&mut s, &p("spatial.norm1"), c);
        for q in ["to_q", "to_k", "to_v"] {
            linear(&mut s, &p(&format!("spatial.attn1.{q}")), c, c, false);
        }
        linear(&mut s, &p("spatial.attn1.to_out"), c, c, true);
        norm(&mut s, &p("spatial.norm2"), c);
        linear(&mut s, &p("spatial.attn2.to_q"), c, c, false);
        linear(&mut s, &p("spatial.attn2.to_k"), d, c, false);
        linear(&mut s, &p("spatial.attn2.to_v"), d, c, false);
        linear(&mut s, &p("spatial.attn2.to_out"), c, c, true);
        norm(&mut s, &p("spatial.norm3"), c);
        linear(&mut s, &p("spatial.ff.fc1"), c, hidden, true);
        linear(&mut s, &p("spatial.ff.fc2"), hidden, c, true);

        norm(&mut s, &p("temporal.norm1"), c);
        for q in ["to_q", "to_k", "to_v"] {
            linear(&mut s, &p(&format!("temporal.attn.{q}")), c, c, false);
        }
        linear(&mut s, &p("temporal.attn.to_out"), c, c, true);
        norm(&mut s, &p("temporal.norm2"), c);
        linear(&mut s, &p("temporal.ff.fc1"), c, hidden, true);
        linear(&mut s, &p("temporal.ff.fc2"), hidden, c, true);
    }
    for l in 0..cfg.levels - 1 {
        linear(&mut s, &format!("down.{l}.downsample"), 4 * c, c, true);
        linear(&mut s, &format!("up.{l}.upsample"), c, 4 * c, true);
    }
    for l in 0..cfg.levels {
        linear(&mut s, &format!("up.{l}.skip_proj"), 2 * c, c, true);
    }
    norm(&mut s, "out.norm", c);
    linear(&mut s, "out.proj", c, cfg.latent_channels, true);
    s
}

impl BaseWeights {
    /// Seeded initialisation. Each tensor's stream is derived from its name.
    pub fn init(cfg: &BackboneConfig, device: &Device) -> Result<Self> {
        let mut params = BTreeMap::new();
        for (name, shape, init) in param_specs(cfg) {
            let n: usize = shape.iter().product();
            let t = match init {
                Init::Normal(std) => {
                    let mut r = rng::seeded(rng::derive_seed(cfg.seed, &name));
                    Tensor::from_vec(rng::normal_vec(&mut r, n, std), shape.as_slice(), device)?
                }
                Init::Zeros => Tensor::zeros(shape.as_slice(), DType::F32, device)?,
                Init::Ones => Tensor::ones(shape.as_slice(), DType::F32, device)?,
            };
            params.insert(name, t);
        }
        Ok(Self { params, pretrain: None })
    }

    pub fn from_map(params: BTreeMap<String, Tensor>, pretrain: Option<PretrainRecord>) -> Self {
        Self { params, pretrain }
    }

    pub(crate) fn check_layout(&self, cfg: &BackboneConfig) -> Result<()> {
        let specs = param_specs(cfg);
        let mut problems = Vec::new();
        for (name, shape, _) in &specs {
            match self.params.get(name) {
                Some(t) if t.dims() == shape.as_slice() => {}
                Some(t) => problems.push(format!("{name}: {:?} != {:?}", t.dims(), shape)),
                None => problems.push(format!("{name}: missing")),
            }
        }
        if self.params.len() != specs.len() {
            problems.push(format!("{} tensors, layout has {}", self.params.len(), specs.len()));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Archive(format!(
                "weight layout mismatch: {}",
                problems.join(", ")
            )))
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub(crate) fn require(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Placement(format!("no base weight {name:?}")))
    }

    pub fn insert(&mut self, name: String, t: Tensor) {
        self.params.insert(name, t);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// SHA-256 over names and values.
    pub fn checksum(&self) -> Result<String> {
        archive::tensors_sha256(self.params.iter())
    }

    /// Wrap every tensor in a trainable variable (pretraining only).
    pub(crate) fn to_vars(&self) -> Result<(Self, Vec<Var>)> {
        let mut params = BTreeMap::new();
        let mut vars = Vec::new();
        for (k, t) in &self.params {
            let v = Var::from_tensor(t)?;
            params.insert(k.clone(), v.as_tensor().clone());
            vars.push(v);
        }
        Ok((
            Self {
                params,
                pretrain: self.pretrain.clone(),
            },
            vars,
        ))
    }

    /// Copies with no autograd linkage.
    pub(crate) fn detached(&self) -> Result<Self> {
        let params = self
            .params
            .iter()
            .map(|(k, t)| Ok((k.clone(), t.detach().copy()?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            params,
            pretrain: self.pretrain.clone(),
        })
    }
}
