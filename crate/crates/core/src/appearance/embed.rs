use std::collections::BTreeMap;
use std::sync::Arc;

use crate::backbone::Frame;
use crate::palette::{self, PALETTE};
use crate::{Error, Result};

/// Image-embedding provider. `space` names the embedding space; image and
/// text providers can only be compared when their spaces match.
pub trait ImageEmbedder: Send + Sync {
    fn name(&self) -> &str;
    fn space(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed_image(&self, frame: &Frame) -> Result<Vec<f32>>;
}

pub trait TextEmbedder: Send + Sync {
    fn name(&self) -> &str;
    fn space(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed_text(&self, text: &str) -> Result<Vec<f32>>;
}

/// A unit-norm image embedding of one video frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameEmbedding {
    pub vector: Vec<f32>,
    pub source_frame_index: usize,
}

impl FrameEmbedding {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

pub fn embed_frame(frame: &Frame, source_frame_index: usize, provider: &dyn ImageEmbedder) -> Result<FrameEmbedding> {
    let v = provider.embed_image(frame)?;
    if v.len() != provider.dim() {
        return Err(Error::Provider(format!(
            "{} returned {} values, reports dimension {}",
            provider.name(),
            v.len(),
            provider.dim()
        )));
    }
    let norm = v.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(Error::Provider(format!(
            "{} returned a vector of norm {norm}",
            provider.name()
        )));
    }
    Ok(FrameEmbedding {
        vector: v.iter().map(|x| (f64::from(*x) / norm) as f32).collect(),
        source_frame_index,
    })
}

/// Toy joint image/text embedder over the named palette.
///
/// Images map to the square root of their soft palette histogram, which keeps
/// small foreground objects visible next to the background. Text maps to the
/// counts of palette colour words it mentions.
#[derive(Debug, Clone, Copy, Default)]
pub struct PaletteEmbedder;

impl PaletteEmbedder {
    pub const SPACE: &'static str = "palette-v1";
}

impl ImageEmbedder for PaletteEmbedder {
    fn name(&self) -> &str {
        "palette"
    }

    fn space(&self) -> &str {
        Self::SPACE
    }

    fn dim(&self) -> usize {
        PALETTE.len()
    }

    fn embed_image(&self, frame: &Frame) -> Result<Vec<f32>> {
        Ok(palette::histogram(frame).iter().map(|h| h.sqrt()).collect())
    }
}

impl TextEmbedder for PaletteEmbedder {
    fn name(&self) -> &str {
        "palette"
    }

    fn space(&self) -> &str {
        Self::SPACE
    }

    fn dim(&self) -> usize {
        PALETTE.len()
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f32>> {
        let mut v = vec![0f32; PALETTE.len()];
        for tok in crate::backbone::tokenize(text) {
            if let Some(i) = palette::index(&tok) {
                v[i] += 1.0;
            }
        }
        Ok(v)
    }
}

/// Embedding providers keyed by name, as referenced from run configs.
#[derive(Clone, Default)]
pub struct ProviderRegistry {
    image: BTreeMap<String, Arc<dyn ImageEmbedder>>,
    text: BTreeMap<String, Arc<dyn TextEmbedder>>,
}

impl ProviderRegistry {
    /// Registry holding the bundled `palette` providers.
    pub fn with_defaults() -> Self {
        let mut r = Self::default();
        r.register_image(Arc::new(PaletteEmbedder));
        r.register_text(Arc::new(PaletteEmbedder));
        r
    }

    pub fn register_image(&mut self, p: Arc<dyn ImageEmbedder>) {
        self.image.insert(p.name().to_string(), p);
    }

    pub fn register_text(&mut self, p: Arc<dyn TextEmbedder>) {
        self.text.insert(p.name().to_string(), p);
    }

    pub fn image(&self, name: &str) -> Result<Arc<dyn ImageEmbedder>> {
        self.image
            .get(name)
            .cloned()
            .ok_or_else(|| Error::Config(format!("no image provider named {name:?}")))
    }

    pub fn text(&self, name: &str) -> Result<Arc<dyn TextEmbedder>> {
        self.text
            .get(name)
            .cloned()
            .ok_or_else(|| Error::Config(format!("no text provider named {name:?}")))
    }
}
