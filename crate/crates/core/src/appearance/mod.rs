//! Appearance priors: prompt recaptioning (text) and frame-embedding
//! injection ahead of the temporal transformers (vision).

mod embed;
mod injector;
mod recaption;

use serde::{Deserialize, Serialize};

pub use embed::{embed_frame, FrameEmbedding, ImageEmbedder, PaletteEmbedder, ProviderRegistry, TextEmbedder};
pub use injector::{inject_appearance, injected_term, Injection, InjectorWeights};
pub use recaption::{
    recaption, recaption_or_fallback, recaption_with, HttpRecaptioner, MockRecaptioner, RecaptionOutcome,
    RecaptionRequest, Recaptioner, DEFAULT_INSTRUCTION,
};

/// A base prompt and, once recaptioned, its appearance-rich expansion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub base_prompt: String,
    pub recaptioned_prompt: Option<String>,
    /// Index of the motion verb in the base prompt's tokens.
    pub verb_index: Option<usize>,
}

impl PromptSpec {
    pub fn new(base: impl Into<String>) -> Self {
        Self {
            base_prompt: base.into(),
            recaptioned_prompt: None,
            verb_index: None,
        }
    }

    pub fn with_verb_index(mut self, i: usize) -> Self {
        self.verb_index = Some(i);
        self
    }

    /// The recaptioned prompt when present, else the base prompt.
    pub fn training_prompt(&self) -> &str {
        self.recaptioned_prompt.as_deref().unwrap_or(&self.base_prompt)
    }
}
