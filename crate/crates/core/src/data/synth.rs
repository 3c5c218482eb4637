use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Frame, VideoClip};
use crate::{palette, rng, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    Triangle,
    Disk,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Triangle, Shape::Disk];

    pub fn as_str(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Disk => "disk",
        }
    }

    /// Whether the point `(dx, dy)` relative to the shape's centroid is inside.
    fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            Shape::Square => dx.abs() <= r && dy.abs() <= r,
            Shape::Disk => dx * dx + dy * dy <= r * r,
            // Apex up, base down, centroid at the origin: vertices at
            // (0, -4r/3), (-r, 2r/3) and (r, 2r/3).
            Shape::Triangle => {
                let y = dy + 4.0 * r / 3.0;
                (0.0..=2.0 * r).contains(&y) && dx.abs() <= y / 2.0
            }
        }
    }

    /// Largest distance from the centroid to the shape's edge.
    fn extent(self, r: f64) -> f64 {
        match self {
            Shape::Square => r * 2f64.sqrt(),
            Shape::Disk => r,
            Shape::Triangle => 4.0 * r / 3.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Trajectory {
    /// One clockwise revolution (image coordinates) per clip.
    Circle,
    /// Two vertical bounces off a floor.
    Bounce,
    /// Left to right at constant speed.
    Sweep,
    /// Bottom to top at constant speed.
    Lift,
    Still,
}

impl Trajectory {
    pub const ALL: [Trajectory; 5] = [
        Trajectory::Circle,
        Trajectory::Bounce,
        Trajectory::Sweep,
        Trajectory::Lift,
        Trajectory::Still,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Trajectory::Circle => "circle",
            Trajectory::Bounce => "bounce",
            Trajectory::Sweep => "sweep",
            Trajectory::Lift => "lift",
            Trajectory::Still => "still",
        }
    }

    /// Verb used in synthetic prompts.
    pub fn verb(self) -> &'static str {
        match self {
            Trajectory::Circle => "circling",
            Trajectory::Bounce => "bouncing",
            Trajectory::Sweep => "sweeping",
            Trajectory::Lift => "lifting",
            Trajectory::Still => "resting",
        }
    }
}

/// One procedurally rendered clip: a flat shape moving over a flat backdrop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub shape: Shape,
    pub color: [f32; 3],
    pub trajectory: Trajectory,
    pub background: [f32; 3],
    /// Seeds the path's phase and offset; there is no per-frame noise.
    pub jitter_seed: u64,
    pub width: usize,
    pub height: usize,
    /// Half side for squares, radius for disks, half base for triangles.
    pub size: f64,
    pub fps: f32,
}

impl SynthSpec {
    pub fn new(shape: Shape, color: &str, trajectory: Trajectory, background: &str, seed: u64) -> Result<Self> {
        let c = palette::rgb(color).ok_or_else(|| Error::Config(format!("unknown colour {color:?}")))?;
        let b = palette::rgb(background).ok_or_else(|| Error::Config(format!("unknown colour {background:?}")))?;
        Ok(Self {
            shape,
            color: c,
            trajectory,
            background: b,
            jitter_seed: seed,
            width: 32,
            height: 32,
            size: 6.0,
            fps: 8.0,
        })
    }

    /// `"a red square is circling on a white background"`.
    pub fn prompt(&self) -> String {
        format!(
            "a {} {} is {} on a {} background",
            palette::nearest(self.color),
            self.shape.as_str(),
            self.trajectory.verb(),
            palette::nearest(self.background)
        )
    }

    fn jitter(&self) -> (f64, f64, f64) {
        let mut r = rng::seeded(rng::derive_seed(self.jitter_seed, "synth-jitter"));
        let phase = r.random_range(0.0..2.0 * PI);
        let dx = r.random_range(-1.5..1.5);
        let dy = r.random_range(-1.5..1.5);
        (phase, dx, dy)
    }

    /// Centroid position in pixel coordinates at frame `i` of `n`.
    pub fn centroid_at(&self, i: usize, n: usize) -> (f64, f64) {
        let (phase, dx, dy) = self.jitter();
        let (w, h) = (self.width as f64, self.height as f64);
        let (cx, cy) = (w / 2.0 + dx, h / 2.0 + dy);
        let u = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
        let span_x = w / 2.0 - self.shape.extent(self.size) - 2.0;
        let span_y = h / 2.0 - self.shape.extent(self.size) - 2.0;
        match self.trajectory {
            Trajectory::Circle => {
                let a = phase + 2.0 * PI * i as f64 / n as f64;
                let r = span_x.min(span_y) * 0.9;
                (cx + r * a.cos(), cy + r * a.sin())
            }
            Trajectory::Bounce => {
                let floor = cy + span_y * 0.8;
                let hop = (2.0 * PI * u).sin().abs();
                (cx, floor - 1.6 * span_y * hop)
            }
            Trajectory::Sweep => (cx - span_x * 0.8 + 1.6 * span_x * u, cy),
            Trajectory::Lift => (cx, cy + span_y * 0.8 - 1.6 * span_y * u),
            Trajectory::Still => (cx, cy),
        }
    }
}

const SUPERSAMPLE: usize = 8;

fn coverage(shape: Shape, cx: f64, cy: f64, r: f64, px: usize, py: usize) -> f64 {
    if shape == Shape::Square {
        // Exact box overlap.
        let ox = ((px as f64 + 1.0).min(cx + r) - (px as f64).max(cx - r)).max(0.0);
        let oy = ((py as f64 + 1.0).min(cy + r) - (py as f64).max(cy - r)).max(0.0);
        return ox * oy;
    }
    let mut hits = 0usize;
    for sy in 0..SUPERSAMPLE {
        for sx in 0..SUPERSAMPLE {
            let x = px as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64;
            let y = py as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64;
            if shape.contains(x - cx, y - cy, r) {
                hits += 1;
            }
        }
    }
    hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64
}

/// Render `spec` for `frames` frames with anti-aliased coverage.
pub fn synth_motion_video(spec: &SynthSpec, frames: usize) -> Result<VideoClip> {
    if frames == 0 {
        return Err(Error::InvalidClip("clip needs at least one frame".into()));
    }
    let e = spec.shape.extent(spec.size);
    let mut out = Vec::with_capacity(frames);
    for i in 0..frames {
        let (cx, cy) = spec.centroid_at(i, frames);
        if cx - e < 0.0 || cy - e < 0.0 || cx + e > spec.width as f64 || cy + e > spec.height as f64 {
            return Err(Error::TrajectoryOutOfFrame(i));
        }
        let mut f = Frame::filled(spec.width, spec.height, spec.background);
        let x0 = (cx - e).floor().max(0.0) as usize;
        let y0 = (cy - e).floor().max(0.0) as usize;
        let x1 = ((cx + e).ceil() as usize).min(spec.width);
        let y1 = ((cy + e).ceil() as usize).min(spec.height);
        for py in y0..y1 {
            for px in x0..x1 {
                let a = coverage(spec.shape, cx, cy, spec.size, px, py) as f32;
                if a > 0.0 {
                    let c = [0, 1, 2].map(|k| a * spec.color[k] + (1.0 - a) * spec.background[k]);
                    f.set(px, py, c);
                }
            }
        }
        out.push(f);
    }
    VideoClip::new(out, spec.fps)
}

/// Coverage-weighted foreground centroid of `frame`, recovering coverage by
/// projecting each pixel onto the `background -> color` segment.
pub fn measured_centroid(frame: &Frame, color: [f32; 3], background: [f32; 3]) -> Option<(f64, f64)> {
    let d: Vec<f64> = (0..3).map(|k| f64::from(color[k] - background[k])).collect();
    let dd: f64 = d.iter().map(|v| v * v).sum();
    if dd == 0.0 {
        return None;
    }
    let (mut sx, mut sy, mut sw) = (0.0, 0.0, 0.0);
    for y in 0..frame.height() {
        for x in 0..frame.width() {
            let p = frame.get(x, y);
            let a: f64 = (0..3).map(|k| f64::from(p[k] - background[k]) * d[k]).sum::<f64>() / dd;
            if a > 0.0 {
                sx += a * (x as f64 + 0.5);
                sy += a * (y as f64 + 0.5);
                sw += a;
            }
        }
    }
    (sw > 0.0).then(|| (sx / sw, sy / sw))
}

/// Clips for pretraining the base model: random shapes, colours and
/// backdrops over every trajectory except `excluded`.
pub fn pretrain_corpus(
    seed: u64,
    count: usize,
    frames: usize,
    excluded: &[Trajectory],
) -> Result<Vec<(VideoClip, String)>> {
    let mut r = rng::seeded(rng::derive_seed(seed, "pretrain-corpus"));
    let trajectories: Vec<Trajectory> = Trajectory::ALL.into_iter().filter(|t| !excluded.contains(t)).collect();
    let colours: Vec<&str> = palette::PALETTE.iter().map(|(n, _)| *n).collect();
    let backdrops = ["white", "black", "gray"];
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let shape = Shape::ALL[r.random_range(0..Shape::ALL.len())];
        let traj = trajectories[r.random_range(0..trajectories.len())];
        let bg = backdrops[r.random_range(0..backdrops.len())];
        let fg = loop {
            let c = colours[r.random_range(0..colours.len())];
            if c != bg {
                break c;
            }
        };
        let spec = SynthSpec::new(shape, fg, traj, bg, rng::derive_seed(seed, &format!("clip{i}")))?;
        out.push((synth_motion_video(&spec, frames)?, spec.prompt()));
    }
    Ok(out)
}
