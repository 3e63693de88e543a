use candle_core::{DType, Device, Tensor};

use crate::conditioning::Frame;
use crate::error::{Error, Result};
use crate::synthdata::ClipRecord;

/// Pixel-space clip, `F×3×H×W` row-major, values nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl VideoClip {
    pub fn new(frames: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != frames * 3 * height * width {
            return Err(Error::Shape(format!(
                "{} values for a {frames}×3×{height}×{width} clip",
                data.len()
            )));
        }
        Ok(Self {
            frames,
            height,
            width,
            data,
        })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (f, c, h, w) = t.dims4()?;
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {c}")));
        }
        let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Self::new(f, h, w, data)
    }

    pub fn from_record(r: &ClipRecord) -> Self {
        Self {
            frames: r.frames,
            height: r.height,
            width: r.width,
            data: r.pixels.iter().map(|&p| p as f32 / 255.0).collect(),
        }
    }

    pub fn tensor(&self) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.data, (self.frames, 3, self.height, self.width), &Device::Cpu)?)
    }

    pub fn frame_len(&self) -> usize {
        3 * self.height * self.width
    }

    pub fn frame_data(&self, k: usize) -> &[f32] {
        let n = self.frame_len();
        &self.data[k * n..(k + 1) * n]
    }

    pub fn frame(&self, k: usize) -> Result<Frame> {
        Frame::new(Tensor::from_slice(self.frame_data(k), (3, self.height, self.width), &Device::Cpu)?)
    }

    /// `len` frames starting at `start`, as a new clip.
    pub fn slice(&self, start: usize, len: usize) -> Self {
        let n = self.frame_len();
        Self {
            frames: len,
            height: self.height,
            width: self.width,
            data: self.data[start * n..(start + len) * n].to_vec(),
        }
    }

    pub fn clamped(mut self) -> Self {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
        self
    }

    /// `(r, g, b)` at pixel `(x, y)` of frame `k`.
    pub fn rgb(&self, k: usize, y: usize, x: usize) -> [f32; 3] {
        let plane = self.height * self.width;
        let base = k * 3 * plane + y * self.width + x;
        [self.data[base], self.data[base + plane], self.data[base + 2 * plane]]
    }
}
