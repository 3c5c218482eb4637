//! Low-rank adapters on the backbone's linear projections.
//!
//! Spatial sets target the spatial self-attention (`attn1`) and FFN
//! projections; temporal sets target the temporal self-attention and FFN
//! projections. Cross-attention projections are never eligible.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::archive::TensorArchive;
use crate::backbone::{Backbone, BaseWeights};
use crate::{rng, Error, Result};

pub const ADAPTER_ARCHIVE_KIND: &str = "adapter-set";
pub const ADAPTER_ARCHIVE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterKind {
    Spatial,
    Temporal,
}

impl AdapterKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AdapterKind::Spatial => "spatial",
            AdapterKind::Temporal => "temporal",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    /// Net scale is `alpha / rank`; `None` means `alpha = rank`.
    pub alpha: Option<f64>,
    pub init_std: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 32,
            alpha: None,
            init_std: 0.01,
        }
    }
}

impl LoraConfig {
    pub fn with_rank(rank: usize) -> Self {
        Self {
            rank,
            ..Self::default()
        }
    }

    pub fn scale(&self) -> f64 {
        self.alpha.unwrap_or(self.rank as f64) / self.rank as f64
    }
}

/// `W + scale * up * down` with `down: [r, d_in]` and `up: [d_out, r]`.
#[derive(Debug, Clone)]
pub struct LoraPair {
    pub down: Var,
    pub up: Var,
    pub scale: f64,
}

impl LoraPair {
    /// Gaussian down-projection, zero up-projection.
    pub fn new(d_in: usize, d_out: usize, cfg: &LoraConfig, rng: &mut rng::SeededRng, device: &Device) -> Result<Self> {
        if cfg.rank == 0 || cfg.rank > d_in.min(d_out) {
            return Err(Error::Config(format!(
                "LoRA rank {} must be in [1, {}] for a {d_out}x{d_in} projection",
                cfg.rank,
                d_in.min(d_out)
            )));
        }
        let down = Tensor::from_vec(
            rng::normal_vec(rng, cfg.rank * d_in, cfg.init_std as f32),
            (cfg.rank, d_in),
            device,
        )?;
        let up = Tensor::zeros((d_out, cfg.rank), DType::F32, device)?;
        Ok(Self {
            down: Var::from_tensor(&down)?,
            up: Var::from_tensor(&up)?,
            scale: cfg.scale(),
        })
    }

    pub fn from_tensors(down: &Tensor, up: &Tensor, scale: f64) -> Result<Self> {
        let (r, _) = down.dims2()?;
        let (_, r2) = up.dims2()?;
        if r != r2 {
            return Err(Error::Shape(format!("down rank {r} != up rank {r2}")));
        }
        Ok(Self {
            down: Var::from_tensor(down)?,
            up: Var::from_tensor(up)?,
            scale,
        })
    }

    pub fn rank(&self) -> usize {
        self.down.dims()[0]
    }

    pub fn d_in(&self) -> usize {
        self.down.dims()[1]
    }

    pub fn d_out(&self) -> usize {
        self.up.dims()[0]
    }

    /// The dense update `scale * up * down`, shaped like the base weight.
    pub fn delta(&self) -> Result<Tensor> {
        Ok((self.up.as_tensor().matmul(self.down.as_tensor())? * self.scale)?)
    }
}

/// `base_out + scale * up (down x)` for row-major activations `x: [n, d_in]`.
pub fn adapted_projection(x: &Tensor, base_out: &Tensor, lora: &LoraPair) -> Result<Tensor> {
    low_rank_update(x, base_out, lora, true)
}

pub(crate) fn low_rank_update(x: &Tensor, base_out: &Tensor, lora: &LoraPair, trainable: bool) -> Result<Tensor> {
    let (down, up) = if trainable {
        (lora.down.as_tensor().clone(), lora.up.as_tensor().clone())
    } else {
        (lora.down.as_tensor().detach(), lora.up.as_tensor().detach())
    };
    let lead = x.dims()[..x.rank() - 1].to_vec();
    let x2 = x.flatten_to(x.rank().saturating_sub(2))?;
    if x2.dim(1)? != lora.d_in() {
        return Err(Error::Shape(format!(
            "activations have width {}, adapter expects {}",
            x2.dim(1)?,
            lora.d_in()
        )));
    }
    let delta = x2.matmul(&down.t()?)?.matmul(&up.t()?)?;
    let mut shape = lead;
    shape.push(lora.d_out());
    let delta = (delta.reshape(shape)? * lora.scale)?;
    if delta.dims() != base_out.dims() {
        return Err(Error::Shape(format!(
            "adapter output {:?} does not match base output {:?}",
            delta.dims(),
            base_out.dims()
        )));
    }
    Ok((base_out + delta)?)
}

#[derive(Debug, Clone)]
pub struct AdapterSet {
    pub kind: AdapterKind,
    pub trainable: bool,
    pub placement: BTreeMap<String, LoraPair>,
}

impl AdapterSet {
    pub fn empty(kind: AdapterKind) -> Self {
        Self {
            kind,
            trainable: false,
            placement: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.placement.len()
    }

    pub fn is_empty(&self) -> bool {
        self.placement.is_empty()
    }

    pub fn get(&self, path: &str) -> Option<&LoraPair> {
        self.placement.get(path)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.placement
            .values()
            .flat_map(|p| [p.down.clone(), p.up.clone()])
            .collect()
    }

    /// Named tensors `{path}.down` / `{path}.up`.
    pub fn named_tensors(&self) -> BTreeMap<String, Tensor> {
        self.placement
            .iter()
            .flat_map(|(path, p)| {
                [
                    (format!("{path}.down"), p.down.as_tensor().clone()),
                    (format!("{path}.up"), p.up.as_tensor().clone()),
                ]
            })
            .collect()
    }

    /// A frozen deep copy whose tensors do not alias this set's variables.
    pub fn frozen_copy(&self) -> Result<Self> {
        let placement = self
            .placement
            .iter()
            .map(|(k, p)| {
                let down = p.down.as_tensor().copy()?;
                let up = p.up.as_tensor().copy()?;
                Ok((k.clone(), LoraPair::from_tensors(&down, &up, p.scale)?))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            kind: self.kind,
            trainable: false,
            placement,
        })
    }

    /// Check every entry against the backbone's eligible projections.
    pub fn validate_for(&self, model: &Backbone) -> Result<()> {
        for (path, pair) in &self.placement {
            let Some((_, d_in, d_out)) = model.lora_targets(self.kind).into_iter().find(|(p, _, _)| p == path) else {
                return Err(Error::Placement(format!(
                    "{} adapter targets {path:?}, which is not an eligible projection",
                    self.kind.as_str()
                )));
            };
            if pair.d_in() != d_in || pair.d_out() != d_out {
                return Err(Error::Placement(format!(
                    "adapter at {path:?} is {}x{}, layer is {d_out}x{d_in}",
                    pair.d_out(),
                    pair.d_in()
                )));
            }
        }
        Ok(())
    }

    pub fn to_archive(&self) -> Result<TensorArchive> {
        let mut a = TensorArchive::new(ADAPTER_ARCHIVE_KIND, ADAPTER_ARCHIVE_VERSION);
        self.write_into(&mut a, "")?;
        Ok(a)
    }

    /// Store under `prefix` inside a larger archive.
    pub fn write_into(&self, a: &mut TensorArchive, prefix: &str) -> Result<()> {
        let entries: BTreeMap<String, EntryMeta> = self
            .placement
            .iter()
            .map(|(path, p)| {
                (
                    path.clone(),
                    EntryMeta {
                        kind: self.kind,
                        rank: p.rank(),
                        scale: p.scale,
                    },
                )
            })
            .collect();
        a.set_json(&format!("{prefix}adapters"), &entries)?;
        a.set_field(&format!("{prefix}adapter_kind"), self.kind.as_str());
        for (name, t) in self.named_tensors() {
            a.insert(format!("{prefix}lora.{name}"), t);
        }
        Ok(())
    }

    pub fn from_archive(a: &TensorArchive) -> Result<Self> {
        a.expect(ADAPTER_ARCHIVE_KIND, ADAPTER_ARCHIVE_VERSION)?;
        Self::read_from(a, "")
    }

    pub fn read_from(a: &TensorArchive, prefix: &str) -> Result<Self> {
        let kind: AdapterKind = serde_json::from_value(serde_json::Value::String(
            a.field(&format!("{prefix}adapter_kind"))?.to_string(),
        ))?;
        let entries: BTreeMap<String, EntryMeta> = a.json(&format!("{prefix}adapters"))?;
        let mut placement = BTreeMap::new();
        for (path, meta) in entries {
            if meta.kind != kind {
                return Err(Error::Archive(format!(
                    "entry {path:?} has kind {:?} in a {:?} set",
                    meta.kind, kind
                )));
            }
            let down = a.tensor(&format!("{prefix}lora.{path}.down"))?;
            let up = a.tensor(&format!("{prefix}lora.{path}.up"))?;
            let pair = LoraPair::from_tensors(down, up, meta.scale)?;
            if pair.rank() != meta.rank {
                return Err(Error::Archive(format!("entry {path:?} rank mismatch")));
            }
            placement.insert(path, pair);
        }
        Ok(Self {
            kind,
            trainable: false,
            placement,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EntryMeta {
    kind: AdapterKind,
    rank: usize,
    scale: f64,
}

/// Attach one fresh adapter to every eligible projection of `kind`.
///
/// `attached` lists sets already in use on the model; attaching a second set
/// of the same kind onto any of their layers is an error.
pub fn attach_adapters(
    model: &Backbone,
    attached: &[&AdapterSet],
    kind: AdapterKind,
    cfg: &LoraConfig,
    seed: u64,
) -> Result<AdapterSet> {
    let targets = model.lora_targets(kind);
    for set in attached.iter().filter(|s| s.kind == kind) {
        if let Some((path, _, _)) = targets.iter().find(|(p, _, _)| set.placement.contains_key(p)) {
            return Err(Error::DoubleAttach(path.clone()));
        }
    }
    let mut r = rng::seeded(rng::derive_seed(seed, kind.as_str()));
    let mut placement = BTreeMap::new();
    for (path, d_in, d_out) in targets {
        placement.insert(path, LoraPair::new(d_in, d_out, cfg, &mut r, model.device())?);
    }
    Ok(AdapterSet {
        kind,
        trainable: true,
        placement,
    })
}

/// Fold adapter deltas into a copy of the base weights.
pub fn merge_adapters(base: &BaseWeights, sets: &[&AdapterSet]) -> Result<BaseWeights> {
    apply_deltas(base, sets, 1.0)
}

/// Subtract previously merged adapter deltas.
pub fn unmerge_adapters(merged: &BaseWeights, sets: &[&AdapterSet]) -> Result<BaseWeights> {
    apply_deltas(merged, sets, -1.0)
}

fn apply_deltas(base: &BaseWeights, sets: &[&AdapterSet], sign: f64) -> Result<BaseWeights> {
    let mut out = base.clone();
    let mut seen: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for set in sets {
        for (path, pair) in &set.placement {
            let shape = (pair.d_out(), pair.d_in());
            if let Some(prev) = seen.insert(path, shape) {
                if prev != shape {
                    return Err(Error::MergeConflict(path.clone()));
                }
            }
            let key = format!("{path}.weight");
            let w = out
                .get(&key)
                .ok_or_else(|| Error::Placement(format!("no base weight {key:?}")))?;
            if w.dims2()? != shape {
                return Err(Error::MergeConflict(path.clone()));
            }
            let updated = (w + (pair.delta()?.detach() * sign)?)?;
            out.insert(key, updated);
        }
    }
    Ok(out)
}
