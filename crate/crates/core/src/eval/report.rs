use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::{clip_e, clip_t, cosine, select_references, temp_cons, VideoEmbedder};
use crate::appearance::{ImageEmbedder, PromptSpec, TextEmbedder};
use crate::backbone::{Backbone, VideoClip};
use crate::data::entity_prompt;
use crate::rng;
use crate::sampling::{generate, SampleConfig};
use crate::training::MotionCheckpoint;
use crate::{Error, Result};

/// Motion label of the aggregate row.
pub const AGGREGATE: &str = "mean";

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub motion: String,
    /// Template index within the motion's prompt list.
    pub template: usize,
    pub prompt: String,
    pub clip_t: f64,
    pub clip_e: f64,
    pub temp_cons: f64,
    pub mofid: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub aggregate: EvalRow,
    pub metadata: BTreeMap<String, String>,
}

/// One motion of a benchmark: its references and evaluation prompts.
#[derive(Debug, Clone)]
pub struct BenchmarkMotion {
    pub motion_id: String,
    pub references: Vec<VideoClip>,
    pub prompts: Vec<PromptSpec>,
}

const HEADER: &str = "motion\ttemplate\tprompt\tclip_t\tclip_e\ttemp_cons\tmofid";

impl EvalReport {
    /// Report over `rows` with the arithmetic-mean aggregate row.
    pub fn from_rows(rows: Vec<EvalRow>, metadata: BTreeMap<String, String>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Empty("report rows"));
        }
        let n = rows.len() as f64;
        let mean = |f: fn(&EvalRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
        let aggregate = EvalRow {
            motion: AGGREGATE.into(),
            template: 0,
            prompt: String::new(),
            clip_t: mean(|r| r.clip_t),
            clip_e: mean(|r| r.clip_e),
            temp_cons: mean(|r| r.temp_cons),
            mofid: mean(|r| r.mofid),
        };
        Ok(Self {
            rows,
            aggregate,
            metadata,
        })
    }

    /// `# key=value` metadata lines, a header, one row per (motion,
    /// template) and the aggregate row.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.metadata {
            writeln!(s, "# {k}={v}").unwrap();
        }
        writeln!(s, "{HEADER}").unwrap();
        for r in self.rows.iter().chain(std::iter::once(&self.aggregate)) {
            writeln!(
                s,
                "{}\t{}\t{}\t{:.10}\t{:.10}\t{:.10}\t{:.10}",
                r.motion,
                r.template,
                r.prompt.replace('\t', " "),
                r.clip_t,
                r.clip_e,
                r.temp_cons,
                r.mofid
            )
            .unwrap();
        }
        s
    }

    pub fn from_tsv(s: &str) -> Result<Self> {
        let bad = |m: String| Error::Config(format!("report: {m}"));
        let mut metadata = BTreeMap::new();
        let mut rows = Vec::new();
        let mut seen_header = false;
        for line in s.lines() {
            if let Some(kv) = line.strip_prefix("# ") {
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| bad(format!("bad metadata line {line:?}")))?;
                metadata.insert(k.to_string(), v.to_string());
                continue;
            }
            if line == HEADER {
                seen_header = true;
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 7 {
                return Err(bad(format!("expected 7 fields in {line:?}")));
            }
            let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad(format!("bad number {:?}", f[i])));
            rows.push(EvalRow {
                motion: f[0].to_string(),
                template: f[1].parse().map_err(|_| bad(format!("bad template {:?}", f[1])))?,
                prompt: f[2].to_string(),
                clip_t: num(3)?,
                clip_e: num(4)?,
                temp_cons: num(5)?,
                mofid: num(6)?,
            });
        }
        if !seen_header {
            return Err(bad("missing header".into()));
        }
        let aggregate = rows
            .pop()
            .filter(|r| r.motion == AGGREGATE)
            .ok_or_else(|| bad("missing aggregate row".into()))?;
        Ok(Self {
            rows,
            aggregate,
            metadata,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }
}

/// Scores already generated clips of one motion against one reference.
pub fn score_clips(
    motion_id: &str,
    clips: &[(PromptSpec, VideoClip)],
    reference: &VideoClip,
    image: &dyn ImageEmbedder,
    text: &dyn TextEmbedder,
    embedder: &dyn VideoEmbedder,
) -> Result<Vec<EvalRow>> {
    let r = embedder.embed_video(reference)?;
    clips
        .iter()
        .enumerate()
        .map(|(k, (p, clip))| {
            Ok(EvalRow {
                motion: motion_id.to_string(),
                template: k,
                prompt: p.base_prompt.clone(),
                clip_t: clip_t(clip, &p.base_prompt, image, text)?,
                clip_e: clip_e(clip, &entity_prompt(p), image, text)?,
                temp_cons: temp_cons(clip, image)?,
                mofid: cosine(&r, &embedder.embed_video(clip)?),
            })
        })
        .collect()
}

/// Generates one clip per (motion, prompt) and scores it. The reference for
/// each motion is a seeded uniform choice; the seed goes into the metadata.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_benchmark(
    model: &Backbone,
    checkpoints: &BTreeMap<String, MotionCheckpoint>,
    motions: &[BenchmarkMotion],
    image: &dyn ImageEmbedder,
    text: &dyn TextEmbedder,
    embedder: &dyn VideoEmbedder,
    sample: &SampleConfig,
    seed: u64,
) -> Result<EvalReport> {
    let references: BTreeMap<String, Vec<VideoClip>> = motions
        .iter()
        .map(|m| (m.motion_id.clone(), m.references.clone()))
        .collect();
    let chosen = select_references(&references, seed)?;
    let mut rows = Vec::new();
    for m in motions {
        let ckpt = checkpoints
            .get(&m.motion_id)
            .ok_or_else(|| Error::MissingCheckpoint(m.motion_id.clone()))?;
        let mut clips = Vec::with_capacity(m.prompts.len());
        for (k, p) in m.prompts.iter().enumerate() {
            let cfg = SampleConfig {
                seed: rng::derive_seed(sample.seed, &format!("{}/{k}", m.motion_id)),
                verb_index: p.verb_index,
                ..sample.clone()
            };
            clips.push((p.clone(), generate(model, &p.base_prompt, Some(ckpt), None, &cfg)?));
        }
        rows.extend(score_clips(
            &m.motion_id,
            &clips,
            &m.references[chosen[&m.motion_id]],
            image,
            text,
            embedder,
        )?);
    }
    let mut metadata = BTreeMap::new();
    metadata.insert("image_provider".into(), image.name().to_string());
    metadata.insert("text_provider".into(), text.name().to_string());
    metadata.insert("motion_embedder".into(), embedder.name().to_string());
    metadata.insert("reference_seed".into(), seed.to_string());
    metadata.insert("sample_seed".into(), sample.seed.to_string());
    for (m, i) in &chosen {
        metadata.insert(format!("reference.{m}"), i.to_string());
    }
    EvalReport::from_rows(rows, metadata)
}
