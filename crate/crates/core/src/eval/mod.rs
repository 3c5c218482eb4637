//! Text alignment, entity alignment, temporal consistency and motion
//! fidelity over generated clips.

mod report;
mod trajectory;

use std::collections::BTreeMap;

use rand::Rng;

use crate::appearance::{ImageEmbedder, TextEmbedder};
use crate::backbone::VideoClip;
use crate::palette;
use crate::rng;
use crate::{Error, Result};

pub use report::{evaluate_benchmark, score_clips, BenchmarkMotion, EvalReport, EvalRow, AGGREGATE};
pub use trajectory::{border_background, foreground_centroid, TrajectoryEmbedder, VideoEmbedder};

/// Cosine similarity in f64; `0` when either side is the zero vector.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let (mut ab, mut aa, mut bb) = (0f64, 0f64, 0f64);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (f64::from(*x), f64::from(*y));
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        0.0
    } else {
        (ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0)
    }
}

/// Mean cosine between each frame embedding and `target`.
pub fn mean_alignment(frames: &[Vec<f32>], target: &[f32]) -> Result<f64> {
    if frames.is_empty() {
        return Err(Error::Empty("frame embeddings"));
    }
    Ok(frames.iter().map(|f| cosine(f, target)).sum::<f64>() / frames.len() as f64)
}

/// Mean cosine over consecutive pairs.
pub fn consecutive_consistency(frames: &[Vec<f32>]) -> Result<f64> {
    if frames.len() < 2 {
        return Err(Error::InvalidClip(format!(
            "temporal consistency needs at least 2 frames, got {}",
            frames.len()
        )));
    }
    let n = frames.len() - 1;
    Ok(frames.windows(2).map(|w| cosine(&w[0], &w[1])).sum::<f64>() / n as f64)
}

fn check_spaces(image: &dyn ImageEmbedder, text: &dyn TextEmbedder) -> Result<()> {
    if image.space() != text.space() {
        return Err(Error::ProviderMismatch {
            image: image.space().to_string(),
            text: text.space().to_string(),
        });
    }
    Ok(())
}

fn frame_embeddings(clip: &VideoClip, image: &dyn ImageEmbedder) -> Result<Vec<Vec<f32>>> {
    clip.frames().iter().map(|f| image.embed_image(f)).collect()
}

/// Mean frame-to-prompt cosine.
pub fn clip_t(clip: &VideoClip, prompt: &str, image: &dyn ImageEmbedder, text: &dyn TextEmbedder) -> Result<f64> {
    check_spaces(image, text)?;
    mean_alignment(&frame_embeddings(clip, image)?, &text.embed_text(prompt)?)
}

/// [`clip_t`] against an entity-only prompt such as `"a panda"`.
pub fn clip_e(
    clip: &VideoClip,
    entity_prompt: &str,
    image: &dyn ImageEmbedder,
    text: &dyn TextEmbedder,
) -> Result<f64> {
    clip_t(clip, entity_prompt, image, text)
}

/// Mean cosine of consecutive frame embeddings.
pub fn temp_cons(clip: &VideoClip, image: &dyn ImageEmbedder) -> Result<f64> {
    consecutive_consistency(&frame_embeddings(clip, image)?)
}

/// Motion fidelity from embeddings: per motion, the mean cosine between the
/// reference embedding and each generated embedding; then the mean over
/// motions.
pub fn motion_fidelity_embeddings(per_motion: &[(Vec<f32>, Vec<Vec<f32>>)]) -> Result<f64> {
    if per_motion.is_empty() {
        return Err(Error::Empty("motions"));
    }
    let mut total = 0.0;
    for (reference, generated) in per_motion {
        if generated.is_empty() {
            return Err(Error::Empty("generated clips for a motion"));
        }
        total += generated.iter().map(|g| cosine(reference, g)).sum::<f64>() / generated.len() as f64;
    }
    Ok(total / per_motion.len() as f64)
}

/// Seeded uniform choice of one reference clip per motion.
pub fn select_references(references: &BTreeMap<String, Vec<VideoClip>>, seed: u64) -> Result<BTreeMap<String, usize>> {
    let mut r = rng::seeded(rng::derive_seed(seed, "mofid-reference"));
    references
        .iter()
        .map(|(m, clips)| {
            if clips.is_empty() {
                return Err(Error::Empty("reference clips for a motion"));
            }
            Ok((m.clone(), r.random_range(0..clips.len())))
        })
        .collect()
}

/// Motion fidelity over clips. Every motion in `generated` needs references;
/// both sides are embedded with `embedder`. Returns the score and the chosen
/// reference index per motion.
pub fn motion_fidelity(
    generated: &BTreeMap<String, Vec<VideoClip>>,
    references: &BTreeMap<String, Vec<VideoClip>>,
    embedder: &dyn VideoEmbedder,
    seed: u64,
) -> Result<(f64, BTreeMap<String, usize>)> {
    let chosen = select_references(references, seed)?;
    let mut per_motion = Vec::with_capacity(generated.len());
    for (m, clips) in generated {
        let idx = *chosen.get(m).ok_or_else(|| Error::MissingCheckpoint(m.clone()))?;
        let reference = embedder.embed_video(&references[m][idx])?;
        let gens = clips
            .iter()
            .map(|c| embedder.embed_video(c))
            .collect::<Result<Vec<_>>>()?;
        per_motion.push((reference, gens));
    }
    Ok((motion_fidelity_embeddings(&per_motion)?, chosen))
}

/// Fraction of frames whose palette histogram is closer (L1) to colour `a`
/// than to colour `b`.
pub fn fraction_closer_to(clip: &VideoClip, a: &str, b: &str) -> Result<f64> {
    let (ia, ib) = match (palette::index(a), palette::index(b)) {
        (Some(x), Some(y)) => (x, y),
        _ => return Err(Error::Config(format!("unknown palette colour in {a:?}/{b:?}"))),
    };
    let onehot = |i: usize| {
        let mut v = vec![0f32; palette::PALETTE.len()];
        v[i] = 1.0;
        v
    };
    let (oa, ob) = (onehot(ia), onehot(ib));
    let closer = clip
        .frames()
        .iter()
        .filter(|f| {
            let h = palette::histogram(f);
            palette::l1(&h, &oa) < palette::l1(&h, &ob)
        })
        .count();
    Ok(closer as f64 / clip.frame_count() as f64)
}
