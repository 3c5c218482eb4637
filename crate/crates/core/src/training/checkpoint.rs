use std::path::Path;

use candle_core::{Device, Tensor};

use super::TrainConfig;
use crate::adapters::{AdapterKind, AdapterSet};
use crate::appearance::{InjectorWeights, PromptSpec};
use crate::archive::{self, TensorArchive};
use crate::motion_enhancer::{EnhancerMlp, ResidualEmbedding};
use crate::{Error, Result};

pub const SPATIAL_CHECKPOINT_KIND: &str = "spatial-checkpoint";
pub const SPATIAL_CHECKPOINT_VERSION: u32 = 1;
pub const MOTION_CHECKPOINT_KIND: &str = "motion-checkpoint";
pub const MOTION_CHECKPOINT_VERSION: u32 = 1;

/// Result of the appearance stage.
#[derive(Debug, Clone)]
pub struct SpatialCheckpoint {
    pub adapters: AdapterSet,
    /// Recaptioned prompt per training clip.
    pub recaptions: Vec<PromptSpec>,
    pub config: TrainConfig,
    pub backbone_checksum: String,
}

impl SpatialCheckpoint {
    pub fn to_archive(&self) -> Result<TensorArchive> {
        let mut a = TensorArchive::new(SPATIAL_CHECKPOINT_KIND, SPATIAL_CHECKPOINT_VERSION);
        self.adapters.write_into(&mut a, "spatial.")?;
        a.set_json("recaptions", &self.recaptions)?;
        a.set_json("config", &self.config)?;
        a.set_field("backbone_checksum", self.backbone_checksum.clone());
        Ok(a)
    }

    pub fn from_archive(a: &TensorArchive) -> Result<Self> {
        a.expect(SPATIAL_CHECKPOINT_KIND, SPATIAL_CHECKPOINT_VERSION)?;
        let adapters = AdapterSet::read_from(a, "spatial.")?;
        if adapters.kind != AdapterKind::Spatial {
            return Err(Error::Archive("spatial checkpoint holds temporal adapters".into()));
        }
        Ok(Self {
            adapters,
            recaptions: a.json("recaptions")?,
            config: a.json("config")?,
            backbone_checksum: a.field("backbone_checksum")?.to_string(),
        })
    }

    /// Writes the archive and returns its SHA-256.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<String> {
        self.to_archive()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>, device: &Device) -> Result<Self> {
        Self::from_archive(&TensorArchive::load(path, device)?)
    }

    /// SHA-256 of the serialized archive; equals the hash returned by `save`.
    pub fn checksum(&self) -> Result<String> {
        Ok(archive::sha256_hex(&self.to_archive()?.to_bytes()?))
    }

    pub fn adapters_checksum(&self) -> Result<String> {
        archive::tensors_sha256(self.adapters.named_tensors().iter())
    }
}

/// Result of the motion stage: everything needed to generate the motion
/// without the reference clips.
#[derive(Debug, Clone)]
pub struct MotionCheckpoint {
    pub temporal: AdapterSet,
    pub mlp: EnhancerMlp,
    /// Cached `E_r` over the full reference set.
    pub residual: ResidualEmbedding,
    /// Kept only to resume training; not used at inference.
    pub injector: InjectorWeights,
    pub verb: String,
    pub motion_id: String,
    pub config: TrainConfig,
    pub image_provider: String,
    pub backbone_checksum: String,
    pub spatial_checksum: String,
}

impl MotionCheckpoint {
    pub fn to_archive(&self) -> Result<TensorArchive> {
        let mut a = TensorArchive::new(MOTION_CHECKPOINT_KIND, MOTION_CHECKPOINT_VERSION);
        self.temporal.write_into(&mut a, "temporal.")?;
        a.insert("enhancer.w1", self.mlp.w1.as_tensor().clone());
        a.insert("enhancer.w2", self.mlp.w2.as_tensor().clone());
        let dev = self.mlp.w1.device();
        a.insert("residual", self.residual.to_tensor(dev)?);
        for (i, t) in self.injector.tensors().into_iter().enumerate() {
            a.insert(format!("injector.{i}"), t);
        }
        a.set_field("injector_blocks", self.injector.blocks().to_string());
        a.set_field("verb", self.verb.clone());
        a.set_field("motion_id", self.motion_id.clone());
        a.set_json("config", &self.config)?;
        a.set_field("image_provider", self.image_provider.clone());
        a.set_field("backbone_checksum", self.backbone_checksum.clone());
        a.set_field("spatial_checksum", self.spatial_checksum.clone());
        Ok(a)
    }

    pub fn from_archive(a: &TensorArchive) -> Result<Self> {
        a.expect(MOTION_CHECKPOINT_KIND, MOTION_CHECKPOINT_VERSION)?;
        let temporal = AdapterSet::read_from(a, "temporal.")?;
        if temporal.kind != AdapterKind::Temporal {
            return Err(Error::Archive("motion checkpoint holds spatial adapters".into()));
        }
        let blocks: usize = a
            .field("injector_blocks")?
            .parse()
            .map_err(|_| Error::Archive("bad injector_blocks".into()))?;
        let maps = (0..blocks)
            .map(|i| a.tensor(&format!("injector.{i}")).cloned())
            .collect::<Result<Vec<Tensor>>>()?;
        let motion_id = a.field("motion_id")?.to_string();
        Ok(Self {
            temporal,
            mlp: EnhancerMlp::from_tensors(a.tensor("enhancer.w1")?, a.tensor("enhancer.w2")?)?,
            residual: ResidualEmbedding {
                vector: a.tensor("residual")?.to_vec1()?,
                source_motion_id: motion_id.clone(),
            },
            injector: InjectorWeights::from_tensors(&maps)?,
            verb: a.field("verb")?.to_string(),
            motion_id,
            config: a.json("config")?,
            image_provider: a.field("image_provider")?.to_string(),
            backbone_checksum: a.field("backbone_checksum")?.to_string(),
            spatial_checksum: a.field("spatial_checksum")?.to_string(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<String> {
        self.to_archive()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>, device: &Device) -> Result<Self> {
        Self::from_archive(&TensorArchive::load(path, device)?)
    }

    pub fn checksum(&self) -> Result<String> {
        Ok(archive::sha256_hex(&self.to_archive()?.to_bytes()?))
    }

    /// The same checkpoint with a zero residual (ablation).
    pub fn without_residual(&self) -> Self {
        let mut c = self.clone();
        c.residual = ResidualEmbedding::zeros(self.residual.vector.len(), self.motion_id.clone());
        c
    }
}
