use candle_core::{Device, Tensor};

use crate::{Error, Result};

/// One RGB frame stored row-major as `[height][width][3]` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    width: usize,
    height: usize,
    pixels: Vec<f32>,
}

impl Frame {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidClip("frame has zero extent".into()));
        }
        if pixels.len() != width * height * 3 {
            return Err(Error::InvalidClip(format!(
                "expected {} values for a {width}x{height} frame, got {}",
                width * height * 3,
                pixels.len()
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidClip(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let pixels = (0..width * height).flat_map(|_| rgb).collect();
        Self { width, height, pixels }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        for (c, v) in rgb.into_iter().enumerate() {
            self.pixels[i + c] = v.clamp(0.0, 1.0);
        }
    }

    pub fn iter_pixels(&self) -> impl Iterator<Item = [f32; 3]> + '_ {
        self.pixels.chunks_exact(3).map(|p| [p[0], p[1], p[2]])
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let bytes = self
            .pixels
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer length matches frame extent")
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        Self {
            width: img.width() as usize,
            height: img.height() as usize,
            pixels: img.as_raw().iter().map(|b| f32::from(*b) / 255.0).collect(),
        }
    }
}

/// A pixel-space clip of `frame_count` equally sized frames.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    frames: Vec<Frame>,
    fps: f32,
}

impl VideoClip {
    pub fn new(frames: Vec<Frame>, fps: f32) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::InvalidClip("clip has no frames".into()))?;
        let (w, h) = (first.width, first.height);
        if let Some(i) = frames.iter().position(|f| f.width != w || f.height != h) {
            return Err(Error::InvalidClip(format!(
                "frame {i} is {}x{}, frame 0 is {w}x{h}",
                frames[i].width, frames[i].height
            )));
        }
        if !(fps > 0.0) {
            return Err(Error::InvalidClip(format!("fps must be positive, got {fps}")));
        }
        Ok(Self { frames, fps })
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn fps(&self) -> f32 {
        self.fps
    }

    pub fn width(&self) -> usize {
        self.frames[0].width
    }

    pub fn height(&self) -> usize {
        self.frames[0].height
    }

    pub fn reversed(&self) -> Self {
        let mut frames = self.frames.clone();
        frames.reverse();
        Self { frames, fps: self.fps }
    }

    /// Pixels as a `[f, H, W, 3]` tensor.
    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        let data: Vec<f32> = self.frames.iter().flat_map(|f| f.pixels.iter().copied()).collect();
        Ok(Tensor::from_vec(
            data,
            (self.frame_count(), self.height(), self.width(), 3),
            device,
        )?)
    }

    /// Inverse of [`VideoClip::to_tensor`]; values are clamped into `[0, 1]`.
    pub fn from_tensor(t: &Tensor, fps: f32) -> Result<Self> {
        let (f, h, w, c) = t.dims4()?;
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 colour channels, got {c}")));
        }
        let data = t.flatten_all()?.to_vec1::<f32>()?;
        let frames = data
            .chunks_exact(h * w * 3)
            .map(|chunk| Frame {
                width: w,
                height: h,
                pixels: chunk.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
            })
            .collect::<Vec<_>>();
        debug_assert_eq!(frames.len(), f);
        Self::new(frames, fps)
    }
}
