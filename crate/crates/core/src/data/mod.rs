//! Motion datasets on disk and the procedural clip generator.
//!
//! Directory layout, with `NNNN` a zero-padded four-digit frame index:
//!
//! ```text
//! <dir>/meta.toml                      motion_id, verb, format = 1, [fps] table
//! <dir>/prompts.txt                    one "<clip_id>\t<base prompt>" per line
//! <dir>/clips/<clip_id>.frames/frame_NNNN.png
//! ```
//!
//! `[fps]` maps every clip id to its frame rate. Frames are 8-bit RGB PNGs.

mod prompts;
mod synth;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{tokenize, Frame, VideoClip};
use crate::{Error, Result};

pub use prompts::{build_eval_prompts, entity_prompt, EVAL_TEMPLATE};
pub use synth::{measured_centroid, pretrain_corpus, synth_motion_video, Shape, SynthSpec, Trajectory};

pub const DATASET_FORMAT: u32 = 1;

/// Reference clips of one motion concept.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionDataset {
    pub motion_id: String,
    /// The verb token every base prompt contains.
    pub verb: String,
    pub clip_ids: Vec<String>,
    pub clips: Vec<VideoClip>,
    pub base_prompts: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    motion_id: String,
    verb: String,
    format: u32,
    fps: BTreeMap<String, f32>,
}

impl MotionDataset {
    /// Validated dataset; every violation is reported at once.
    pub fn new(
        motion_id: impl Into<String>,
        verb: impl Into<String>,
        clip_ids: Vec<String>,
        clips: Vec<VideoClip>,
        base_prompts: Vec<String>,
    ) -> Result<Self> {
        let ds = Self {
            motion_id: motion_id.into(),
            verb: verb.into(),
            clip_ids,
            clips,
            base_prompts,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Dataset with ids `clip_000`, `clip_001`, ...
    pub fn from_clips(
        motion_id: impl Into<String>,
        verb: impl Into<String>,
        clips: Vec<VideoClip>,
        base_prompts: Vec<String>,
    ) -> Result<Self> {
        let ids = (0..clips.len()).map(|i| format!("clip_{i:03}")).collect();
        Self::new(motion_id, verb, ids, clips, base_prompts)
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    fn validate(&self) -> Result<()> {
        if self.clips.is_empty() {
            return Err(Error::DatasetEmpty);
        }
        let mut bad = Vec::new();
        if self.clip_ids.len() != self.clips.len() {
            bad.push(format!(
                "{} clip ids for {} clips",
                self.clip_ids.len(),
                self.clips.len()
            ));
        }
        if self.base_prompts.len() != self.clips.len() {
            bad.push(format!(
                "{} prompts for {} clips",
                self.base_prompts.len(),
                self.clips.len()
            ));
        }
        let first = &self.clips[0];
        for (i, c) in self.clips.iter().enumerate() {
            let id = self.clip_ids.get(i).map_or("?", String::as_str);
            if c.fps() != first.fps() {
                bad.push(format!("clip {id} has fps {}, clip 0 has {}", c.fps(), first.fps()));
            }
            if (c.width(), c.height()) != (first.width(), first.height()) {
                bad.push(format!(
                    "clip {id} is {}x{}, clip 0 is {}x{}",
                    c.width(),
                    c.height(),
                    first.width(),
                    first.height()
                ));
            }
        }
        for (i, p) in self.base_prompts.iter().enumerate() {
            if !tokenize(p).contains(&self.verb) {
                bad.push(format!("prompt {i} {p:?} lacks the verb {:?}", self.verb));
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidDataset(bad))
        }
    }

    /// Position of the verb token in prompt `i`.
    pub fn verb_index(&self, i: usize) -> Option<usize> {
        tokenize(&self.base_prompts[i]).iter().position(|t| *t == self.verb)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let clips_dir = dir.join("clips");
        fs::create_dir_all(&clips_dir).map_err(|e| Error::io(&clips_dir, e))?;
        let meta = Meta {
            motion_id: self.motion_id.clone(),
            verb: self.verb.clone(),
            format: DATASET_FORMAT,
            fps: self
                .clip_ids
                .iter()
                .zip(&self.clips)
                .map(|(id, c)| (id.clone(), c.fps()))
                .collect(),
        };
        let meta_path = dir.join("meta.toml");
        let meta_text = toml::to_string(&meta).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(&meta_path, meta_text).map_err(|e| Error::io(&meta_path, e))?;
        let mut prompts = String::new();
        for (id, p) in self.clip_ids.iter().zip(&self.base_prompts) {
            prompts.push_str(&format!("{id}\t{p}\n"));
        }
        let prompts_path = dir.join("prompts.txt");
        fs::write(&prompts_path, prompts).map_err(|e| Error::io(&prompts_path, e))?;
        for (id, clip) in self.clip_ids.iter().zip(&self.clips) {
            write_frames(clip, clips_dir.join(format!("{id}.frames")))?;
        }
        Ok(())
    }
}

/// Write `frame_0000.png`, `frame_0001.png`, ... into `dir`.
pub fn write_frames(clip: &VideoClip, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, f) in clip.frames().iter().enumerate() {
        f.to_rgb8().save(dir.join(format!("frame_{i:04}.png")))?;
    }
    Ok(())
}

/// Read a `<id>.frames` directory written by [`write_frames`].
pub fn read_frames(dir: impl AsRef<Path>, fps: f32) -> Result<VideoClip> {
    let dir = dir.as_ref();
    let mut names: Vec<String> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("frame_") && n.ends_with(".png"))
        .collect();
    names.sort();
    for (i, n) in names.iter().enumerate() {
        if *n != format!("frame_{i:04}.png") {
            return Err(Error::InvalidClip(format!(
                "{}: expected frame_{i:04}.png, found {n}",
                dir.display()
            )));
        }
    }
    let frames = names
        .iter()
        .map(|n| Ok(Frame::from_rgb8(&image::open(dir.join(n))?.into_rgb8())))
        .collect::<Result<Vec<_>>>()?;
    VideoClip::new(frames, fps)
}

/// Load and validate a dataset directory.
pub fn load_motion_dataset(dir: impl AsRef<Path>) -> Result<MotionDataset> {
    let dir = dir.as_ref();
    let meta_path = dir.join("meta.toml");
    let meta_text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: Meta = toml::from_str(&meta_text).map_err(|e| Error::Config(format!("{}: {e}", meta_path.display())))?;
    if meta.format != DATASET_FORMAT {
        return Err(Error::VersionMismatch {
            kind: "dataset".into(),
            found: meta.format,
            expected: DATASET_FORMAT,
        });
    }
    let prompts_path = dir.join("prompts.txt");
    let prompts_text = fs::read_to_string(&prompts_path).map_err(|e| Error::io(&prompts_path, e))?;
    let mut prompts: BTreeMap<String, String> = BTreeMap::new();
    let mut bad = Vec::new();
    for (n, line) in prompts_text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match line.split_once('\t') {
            Some((id, p)) => {
                prompts.insert(id.trim().to_string(), p.trim().to_string());
            }
            None => bad.push(format!("prompts.txt line {}: missing tab separator", n + 1)),
        }
    }
    let clips_dir = dir.join("clips");
    let mut ids: Vec<String> = match fs::read_dir(&clips_dir) {
        Ok(rd) => rd
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                e.file_name()
                    .to_string_lossy()
                    .strip_suffix(".frames")
                    .map(String::from)
            })
            .collect(),
        Err(_) => Vec::new(),
    };
    ids.sort();
    if ids.is_empty() {
        return Err(Error::DatasetEmpty);
    }
    let mut clips = Vec::new();
    let mut base_prompts = Vec::new();
    let mut kept = Vec::new();
    for id in &ids {
        let Some(p) = prompts.get(id) else {
            bad.push(format!("clip {id} has no prompt"));
            continue;
        };
        let Some(&fps) = meta.fps.get(id) else {
            bad.push(format!("clip {id} has no fps entry in meta.toml"));
            continue;
        };
        match read_frames(clips_dir.join(format!("{id}.frames")), fps) {
            Ok(c) => {
                clips.push(c);
                base_prompts.push(p.clone());
                kept.push(id.clone());
            }
            Err(e) => bad.push(format!("clip {id}: {e}")),
        }
    }
    for id in prompts.keys().filter(|k| !ids.contains(k)) {
        bad.push(format!("prompt for unknown clip {id}"));
    }
    let ds = MotionDataset {
        motion_id: meta.motion_id,
        verb: meta.verb,
        clip_ids: kept,
        clips,
        base_prompts,
    };
    match (ds.validate(), bad.is_empty()) {
        (Ok(()), true) => Ok(ds),
        (Ok(()), false) => Err(Error::InvalidDataset(bad)),
        (Err(Error::InvalidDataset(more)), _) => {
            bad.extend(more);
            Err(Error::InvalidDataset(bad))
        }
        (Err(e), true) => Err(e),
        (Err(e), false) => {
            bad.push(e.to_string());
            Err(Error::InvalidDataset(bad))
        }
    }
}

/// `count` clips of one shape/colour/trajectory with distinct jitter seeds.
pub fn synth_dataset(
    shape: Shape,
    color: &str,
    trajectory: Trajectory,
    background: &str,
    count: usize,
    frames: usize,
    seed: u64,
) -> Result<MotionDataset> {
    let mut clips = Vec::with_capacity(count);
    let mut prompts = Vec::with_capacity(count);
    for i in 0..count {
        let spec = SynthSpec::new(
            shape,
            color,
            trajectory,
            background,
            crate::rng::derive_seed(seed, &format!("clip{i}")),
        )?;
        clips.push(synth_motion_video(&spec, frames)?);
        prompts.push(spec.prompt());
    }
    MotionDataset::from_clips(trajectory.verb(), trajectory.verb(), clips, prompts)
}
