use std::f64::consts::PI;

use crate::backbone::{Frame, VideoClip};
use crate::palette;
use crate::Result;

/// Whole-clip embedding used by motion fidelity.
pub trait VideoEmbedder: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed_video(&self, clip: &VideoClip) -> Result<Vec<f32>>;
}

const BINS: usize = 8;

/// Hermetic motion embedder built from the foreground centroid track.
///
/// Layout (17 values, L2-normalised as a whole):
/// - 8 direction bins of the per-step displacement, weighted by speed;
/// - 8 bins of the signed turning angle between consecutive moving steps;
/// - the fraction of steps below `still_threshold` pixels.
///
/// Each group is L1-normalised before concatenation. Angles are split
/// linearly between the two nearest bin centres (multiples of 45 degrees),
/// so the features vary continuously with the motion. Turning angles make
/// the embedding independent of where on its path a clip starts.
#[derive(Debug, Clone, Copy)]
pub struct TrajectoryEmbedder {
    /// Pixels further than this (RGB Euclidean) from the backdrop count as
    /// foreground.
    pub foreground_threshold: f32,
    pub still_threshold: f64,
}

impl Default for TrajectoryEmbedder {
    fn default() -> Self {
        Self {
            foreground_threshold: 0.15,
            still_threshold: 0.25,
        }
    }
}

fn median(mut v: Vec<f32>) -> f32 {
    v.sort_by(f32::total_cmp);
    v[v.len() / 2]
}

/// Per-channel median of the border pixels.
pub fn border_background(frame: &Frame) -> [f32; 3] {
    let (w, h) = (frame.width(), frame.height());
    let mut border = Vec::new();
    for x in 0..w {
        border.push(frame.get(x, 0));
        border.push(frame.get(x, h - 1));
    }
    for y in 1..h.saturating_sub(1) {
        border.push(frame.get(0, y));
        border.push(frame.get(w - 1, y));
    }
    [0, 1, 2].map(|k| median(border.iter().map(|p| p[k]).collect()))
}

/// Distance-weighted centroid of the pixels that differ from the border
/// backdrop by more than `threshold`.
pub fn foreground_centroid(frame: &Frame, threshold: f32) -> Option<(f64, f64)> {
    let bg = border_background(frame);
    let (mut sx, mut sy, mut sw) = (0.0, 0.0, 0.0);
    for y in 0..frame.height() {
        for x in 0..frame.width() {
            let d = palette::dist2(frame.get(x, y), bg).sqrt();
            if d > threshold {
                let wgt = f64::from(d);
                sx += wgt * (x as f64 + 0.5);
                sy += wgt * (y as f64 + 0.5);
                sw += wgt;
            }
        }
    }
    (sw > 0.0).then(|| (sx / sw, sy / sw))
}

/// Adds `weight` to the two bins around `angle` (radians, any range).
fn soft_bin(hist: &mut [f64; BINS], angle: f64, weight: f64) {
    let pos = angle.rem_euclid(2.0 * PI) / (2.0 * PI / BINS as f64);
    let lo = pos.floor() as usize % BINS;
    let frac = pos - pos.floor();
    hist[lo] += weight * (1.0 - frac);
    hist[(lo + 1) % BINS] += weight * frac;
}

fn l1_normalise(v: &mut [f64]) {
    let s: f64 = v.iter().sum();
    if s > 0.0 {
        v.iter_mut().for_each(|x| *x /= s);
    }
}

impl TrajectoryEmbedder {
    /// Feature vector of a centroid track; frames without foreground break
    /// the track and contribute nothing.
    pub fn embed_track(&self, track: &[Option<(f64, f64)>]) -> Vec<f32> {
        let mut dir = [0f64; BINS];
        let mut turn = [0f64; BINS];
        let (mut still, mut steps) = (0usize, 0usize);
        let mut prev_move: Option<(f64, f64)> = None;
        for w in track.windows(2) {
            let (Some(a), Some(b)) = (w[0], w[1]) else {
                prev_move = None;
                continue;
            };
            steps += 1;
            let v = (b.0 - a.0, b.1 - a.1);
            let speed = v.0.hypot(v.1);
            if speed < self.still_threshold {
                still += 1;
                prev_move = None;
                continue;
            }
            soft_bin(&mut dir, v.1.atan2(v.0), speed);
            if let Some(p) = prev_move {
                let cross = p.0 * v.1 - p.1 * v.0;
                let dot = p.0 * v.0 + p.1 * v.1;
                soft_bin(&mut turn, cross.atan2(dot), 1.0);
            }
            prev_move = Some(v);
        }
        l1_normalise(&mut dir);
        l1_normalise(&mut turn);
        let mut out: Vec<f64> = dir.into_iter().chain(turn).collect();
        out.push(if steps > 0 { still as f64 / steps as f64 } else { 0.0 });
        let n = out.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            out.iter_mut().for_each(|x| *x /= n);
        }
        out.into_iter().map(|x| x as f32).collect()
    }

    pub fn track(&self, clip: &VideoClip) -> Vec<Option<(f64, f64)>> {
        clip.frames()
            .iter()
            .map(|f| foreground_centroid(f, self.foreground_threshold))
            .collect()
    }
}

impl VideoEmbedder for TrajectoryEmbedder {
    fn name(&self) -> &str {
        "trajectory"
    }

    fn dim(&self) -> usize {
        2 * BINS + 1
    }

    fn embed_video(&self, clip: &VideoClip) -> Result<Vec<f32>> {
        Ok(self.embed_track(&self.track(clip)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_motion_video, Shape, SynthSpec, Trajectory};
    use crate::eval::cosine;

    fn clip(shape: Shape, color: &str, t: Trajectory, seed: u64) -> VideoClip {
        synth_motion_video(&SynthSpec::new(shape, color, t, "white", seed).unwrap(), 8).unwrap()
    }

    #[test]
    fn deterministic_and_reversal_sensitive() {
        let e = TrajectoryEmbedder::default();
        let c = clip(Shape::Square, "red", Trajectory::Circle, 1);
        let a = e.embed_video(&c).unwrap();
        assert_eq!(a, e.embed_video(&c).unwrap());
        assert_eq!(a.len(), e.dim());
        let r = e.embed_video(&c.reversed()).unwrap();
        assert_ne!(a, r);
        assert!(cosine(&a, &r) < 0.9);
    }

    #[test]
    fn same_motion_different_appearance_and_phase_agree() {
        let e = TrajectoryEmbedder::default();
        let a = e
            .embed_video(&clip(Shape::Square, "red", Trajectory::Circle, 1))
            .unwrap();
        let b = e
            .embed_video(&clip(Shape::Triangle, "blue", Trajectory::Circle, 7))
            .unwrap();
        let s = e
            .embed_video(&clip(Shape::Square, "red", Trajectory::Sweep, 1))
            .unwrap();
        let bo = e
            .embed_video(&clip(Shape::Square, "red", Trajectory::Bounce, 1))
            .unwrap();
        assert!(cosine(&a, &b) > 0.9, "{}", cosine(&a, &b));
        assert!(cosine(&a, &s) < 0.6, "{}", cosine(&a, &s));
        assert!(cosine(&a, &bo) < 0.6, "{}", cosine(&a, &bo));
    }

    #[test]
    fn centroid_tracks_the_rendered_square() {
        let spec = SynthSpec::new(Shape::Square, "red", Trajectory::Sweep, "white", 3).unwrap();
        let c = synth_motion_video(&spec, 8).unwrap();
        let t = TrajectoryEmbedder::default().track(&c);
        for (i, p) in t.iter().enumerate() {
            let (x, y) = p.unwrap();
            let (ex, ey) = spec.centroid_at(i, 8);
            assert!(
                (x - ex).abs() < 0.3 && (y - ey).abs() < 0.3,
                "frame {i}: {x},{y} vs {ex},{ey}"
            );
        }
    }

    #[test]
    fn still_clip_is_all_still_bin() {
        let e = TrajectoryEmbedder::default();
        let v = e
            .embed_video(&clip(Shape::Disk, "green", Trajectory::Still, 2))
            .unwrap();
        assert_eq!(v[16], 1.0);
        assert!(v[..16].iter().all(|x| *x == 0.0));
    }
}
