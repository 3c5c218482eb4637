//! Customized motion transfer for a desk-scale text-to-video latent diffusion
//! model.
//!
//! Motion is learned from a handful of reference clips in two stages. Spatial
//! low-rank adapters first absorb the clips' appearance from single frames
//! and appearance-rich prompts. Temporal adapters then learn the motion while
//! the appearance is fed to them directly, and a residual correction is
//! learned for the motion verb's text embedding.

pub mod adapters;
pub mod appearance;
pub mod archive;
pub mod backbone;
pub mod cli;
pub mod data;
mod error;
pub mod eval;
pub mod motion_enhancer;
pub mod palette;
pub mod rng;
pub mod sampling;
pub mod training;

pub use error::{Error, Result};

// The guide's snippets run as doc-tests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/backbone.md")]
    mod backbone {}
    #[doc = include_str!("../../../book/src/adapters.md")]
    mod adapters {}
    #[doc = include_str!("../../../book/src/appearance.md")]
    mod appearance {}
    #[doc = include_str!("../../../book/src/motion.md")]
    mod motion {}
    #[doc = include_str!("../../../book/src/sampling.md")]
    mod sampling {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
