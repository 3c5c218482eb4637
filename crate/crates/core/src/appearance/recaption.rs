use std::io::Cursor;
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};

use super::PromptSpec;
use crate::backbone::{tokenize, Frame};
use crate::motion_enhancer::{locate_verb, RuleTagger};
use crate::palette;
use crate::{Error, Result};

/// Instruction sent with every recaption request.
pub const DEFAULT_INSTRUCTION: &str = include_str!("../../assets/recaption_instruction.txt");

/// One recaption request: the instruction, the base prompt and a single frame.
#[derive(Debug, Clone)]
pub struct RecaptionRequest<'a> {
    pub instruction: &'a str,
    pub prompt: &'a str,
    pub frame: &'a Frame,
}

pub trait Recaptioner: Send + Sync {
    fn name(&self) -> &str;
    /// Raw expanded prompt. Validation happens in [`recaption`].
    fn expand(&self, req: &RecaptionRequest<'_>) -> Result<String>;
}

/// Offline recaptioner whose output is a pure function of frame colours.
///
/// The backdrop colour is the palette colour nearest the per-channel median
/// of the border pixels. Foreground pixels are those farther than 0.15 (RGB
/// distance) from the backdrop; their mean colour names the object and their
/// centroid names the region on a 3×3 grid (`upper left`, `top`, ...,
/// `center`, ..., `lower right`). The output is
///
/// `"{base}, {fg} object in the {region}, {bg} backdrop"`
///
/// and the base prompt is returned unchanged when the frame has no foreground.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockRecaptioner;

const FG_THRESHOLD: f32 = 0.15;

impl MockRecaptioner {
    pub fn describe(frame: &Frame) -> Option<String> {
        let bg = border_median(frame);
        let (w, h) = (frame.width(), frame.height());
        let mut sum = [0f64; 3];
        let (mut sx, mut sy, mut n) = (0f64, 0f64, 0usize);
        for y in 0..h {
            for x in 0..w {
                let p = frame.get(x, y);
                if palette::dist2(p, bg).sqrt() > FG_THRESHOLD {
                    sum.iter_mut().zip(p).for_each(|(s, v)| *s += f64::from(v));
                    sx += x as f64 + 0.5;
                    sy += y as f64 + 0.5;
                    n += 1;
                }
            }
        }
        if n == 0 {
            return None;
        }
        let nf = n as f64;
        let fg = sum.map(|s| (s / nf) as f32);
        let col = third(sx / nf, w as f64);
        let row = third(sy / nf, h as f64);
        let region = match (row, col) {
            (0, 0) => "upper left",
            (0, 1) => "top",
            (0, _) => "upper right",
            (1, 0) => "left",
            (1, 1) => "center",
            (1, _) => "right",
            (_, 0) => "lower left",
            (_, 1) => "bottom",
            _ => "lower right",
        };
        Some(format!(
            "{} object in the {region}, {} backdrop",
            palette::nearest(fg),
            palette::nearest(bg)
        ))
    }
}

fn third(v: f64, extent: f64) -> u8 {
    ((3.0 * v / extent).floor() as u8).min(2)
}

fn border_median(frame: &Frame) -> [f32; 3] {
    let (w, h) = (frame.width(), frame.height());
    let mut ch: [Vec<f32>; 3] = Default::default();
    for y in 0..h {
        for x in 0..w {
            if x == 0 || y == 0 || x + 1 == w || y + 1 == h {
                let p = frame.get(x, y);
                (0..3).for_each(|c| ch[c].push(p[c]));
            }
        }
    }
    ch.map(|mut v| {
        v.sort_by(f32::total_cmp);
        v[v.len() / 2]
    })
}

impl Recaptioner for MockRecaptioner {
    fn name(&self) -> &str {
        "mock"
    }

    fn expand(&self, req: &RecaptionRequest<'_>) -> Result<String> {
        Ok(match Self::describe(req.frame) {
            Some(d) => format!("{}, {d}", req.prompt.trim_end_matches(['.', ' '])),
            None => req.prompt.to_string(),
        })
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    instruction: &'a str,
    prompt: &'a str,
    /// Base64-encoded PNG.
    image: String,
}

#[derive(Deserialize)]
struct WireResponse {
    text: String,
}

/// JSON-over-HTTP recaptioner. POSTs `{instruction, prompt, image}` and
/// expects `{text}` back; timeouts are retried `retries` times.
#[derive(Debug, Clone)]
pub struct HttpRecaptioner {
    endpoint: String,
    timeout: Duration,
    retries: usize,
    agent: ureq::Agent,
}

impl HttpRecaptioner {
    pub fn new(endpoint: impl Into<String>, timeout: Duration, retries: usize) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self {
            endpoint: endpoint.into(),
            timeout,
            retries,
            agent,
        }
    }

    pub fn timeout(&self) -> Duration {
        self.timeout
    }

    fn encode_png(frame: &Frame) -> Result<String> {
        let mut buf = Cursor::new(Vec::new());
        frame.to_rgb8().write_to(&mut buf, image::ImageFormat::Png)?;
        Ok(base64::engine::general_purpose::STANDARD.encode(buf.into_inner()))
    }
}

impl Recaptioner for HttpRecaptioner {
    fn name(&self) -> &str {
        "http"
    }

    fn expand(&self, req: &RecaptionRequest<'_>) -> Result<String> {
        let body = WireRequest {
            instruction: req.instruction,
            prompt: req.prompt,
            image: Self::encode_png(req.frame)?,
        };
        let mut attempt = 0;
        loop {
            match self.agent.post(&self.endpoint).send_json(&body) {
                Ok(mut resp) => {
                    let r: WireResponse = resp
                        .body_mut()
                        .read_json()
                        .map_err(|e| Error::Client(format!("bad response body: {e}")))?;
                    return Ok(r.text);
                }
                Err(ureq::Error::Timeout(_)) if attempt < self.retries => {
                    attempt += 1;
                    log::warn!("recaptioner timeout, retry {attempt}/{}", self.retries);
                }
                Err(ureq::Error::Timeout(_)) => return Err(Error::ClientTimeout { retries: attempt }),
                Err(e) => return Err(Error::Client(e.to_string())),
            }
        }
    }
}

/// Expand `base` from one frame. The result must keep the base prompt's
/// subject tokens (those before the verb, in order) and its verb token.
pub fn recaption(base: &PromptSpec, frame: &Frame, client: &dyn Recaptioner) -> Result<PromptSpec> {
    recaption_with(base, frame, client, DEFAULT_INSTRUCTION)
}

pub fn recaption_with(
    base: &PromptSpec,
    frame: &Frame,
    client: &dyn Recaptioner,
    instruction: &str,
) -> Result<PromptSpec> {
    let req = RecaptionRequest {
        instruction,
        prompt: &base.base_prompt,
        frame,
    };
    let text = client.expand(&req)?;
    let text = text.trim();
    let mut out = base.clone();
    if text.is_empty() {
        out.recaptioned_prompt = Some(base.base_prompt.clone());
        return Ok(out);
    }
    validate(base, text)?;
    out.recaptioned_prompt = Some(text.to_string());
    Ok(out)
}

fn validate(base: &PromptSpec, text: &str) -> Result<()> {
    let base_tokens = tokenize(&base.base_prompt);
    let verb = match base.verb_index {
        Some(i) => i,
        None => locate_verb(&base_tokens, &RuleTagger::default())?,
    };
    let verb_tok = base_tokens
        .get(verb)
        .ok_or_else(|| Error::RecaptionValidation(format!("verb index {verb} out of range")))?;
    let out_tokens = tokenize(text);
    // Subject and verb must appear in order.
    let mut it = out_tokens.iter();
    for want in &base_tokens[..=verb] {
        if !it.any(|t| t == want) {
            let what = if want == verb_tok { "verb" } else { "subject token" };
            return Err(Error::RecaptionValidation(format!(
                "{what} {want:?} missing from {text:?}"
            )));
        }
    }
    Ok(())
}

/// Outcome of [`recaption_or_fallback`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RecaptionOutcome {
    Expanded,
    /// The client output was rejected and the base prompt is used instead.
    FellBack(String),
}

/// [`recaption`], falling back to the base prompt on validation errors.
/// Client failures (timeouts, transport) still propagate.
pub fn recaption_or_fallback(
    base: &PromptSpec,
    frame: &Frame,
    client: &dyn Recaptioner,
) -> Result<(PromptSpec, RecaptionOutcome)> {
    match recaption(base, frame, client) {
        Ok(p) => Ok((p, RecaptionOutcome::Expanded)),
        Err(Error::RecaptionValidation(msg)) => {
            log::warn!("recaption of {:?} rejected: {msg}", base.base_prompt);
            let mut p = base.clone();
            p.recaptioned_prompt = Some(base.base_prompt.clone());
            Ok((p, RecaptionOutcome::FellBack(msg)))
        }
        Err(e) => Err(e),
    }
}
