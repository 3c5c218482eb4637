use std::fs::{self, File};
use std::path::Path;

use image::codecs::gif::{GifEncoder, Repeat};
use image::{Delay, RgbaImage};
use serde::{Deserialize, Serialize};

use super::SampleConfig;
use crate::backbone::VideoClip;
use crate::data::{read_frames, write_frames};
use crate::{Error, Result};

/// `metadata.json` of a generation directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub prompt: String,
    pub fps: f32,
    pub seed: u64,
    pub config: SampleConfig,
    pub backbone_checksum: String,
    pub motion_checksum: Option<String>,
    pub subject_checksum: Option<String>,
}

/// Writes `frames/frame_NNNN.png`, `metadata.json` and, if `preview`,
/// an animated `preview.gif` into `dir`.
pub fn write_generation(
    dir: impl AsRef<Path>,
    clip: &VideoClip,
    record: &GenerationRecord,
    preview: bool,
) -> Result<()> {
    let dir = dir.as_ref();
    write_frames(clip, dir.join("frames"))?;
    let meta = dir.join("metadata.json");
    fs::write(&meta, serde_json::to_string_pretty(record)?).map_err(|e| Error::io(&meta, e))?;
    if preview {
        let path = dir.join("preview.gif");
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut enc = GifEncoder::new(file);
        enc.set_repeat(Repeat::Infinite)?;
        let delay = Delay::from_numer_denom_ms(1000, clip.fps().round().max(1.0) as u32);
        for f in clip.frames() {
            let rgba: RgbaImage = image::DynamicImage::ImageRgb8(f.to_rgb8()).into_rgba8();
            enc.encode_frame(image::Frame::from_parts(rgba, 0, 0, delay))?;
        }
    }
    Ok(())
}

pub fn read_generation(dir: impl AsRef<Path>) -> Result<(VideoClip, GenerationRecord)> {
    let dir = dir.as_ref();
    let meta = dir.join("metadata.json");
    let s = fs::read_to_string(&meta).map_err(|e| Error::io(&meta, e))?;
    let record: GenerationRecord = serde_json::from_str(&s)?;
    Ok((read_frames(dir.join("frames"), record.fps)?, record))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Frame;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let clip = VideoClip::new(
            vec![
                Frame::filled(4, 4, [1.0, 0.0, 0.0]),
                Frame::filled(4, 4, [0.0, 0.0, 1.0]),
            ],
            8.0,
        )
        .unwrap();
        let rec = GenerationRecord {
            prompt: "a red square".into(),
            fps: 8.0,
            seed: 3,
            config: SampleConfig::default(),
            backbone_checksum: "abc".into(),
            motion_checksum: None,
            subject_checksum: None,
        };
        write_generation(dir.path(), &clip, &rec, true).unwrap();
        assert!(dir.path().join("preview.gif").exists());
        let (c, r) = read_generation(dir.path()).unwrap();
        assert_eq!(c, clip);
        assert_eq!(r, rec);
    }
}
