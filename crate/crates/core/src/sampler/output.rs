use std::collections::BTreeMap;
use std::path::Path;

use image::codecs::gif::{GifEncoder, Repeat};
use image::{Delay, ImageFormat, Rgba, RgbaImage};
use serde::Serialize;

use crate::archive;
use crate::error::{Error, Result};
use crate::video::VideoClip;

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn frame_image(clip: &VideoClip, k: usize, scale: u32) -> RgbaImage {
    let (h, w) = (clip.height as u32, clip.width as u32);
    RgbaImage::from_fn(w * scale, h * scale, |x, y| {
        let [r, g, b] = clip.rgb(k, (y / scale) as usize, (x / scale) as usize);
        Rgba([to_u8(r), to_u8(g), to_u8(b), 255])
    })
}

/// Animated GIF, 4 fps, nearest-neighbour upscaled by `scale`.
pub fn write_gif(path: &Path, clip: &VideoClip, scale: u32) -> Result<()> {
    let mut bytes = Vec::new();
    {
        let mut enc = GifEncoder::new_with_speed(&mut bytes, 10);
        enc.set_repeat(Repeat::Infinite).map_err(image_err)?;
        for k in 0..clip.frames {
            let frame = image::Frame::from_parts(frame_image(clip, k, scale), 0, 0, Delay::from_numer_denom_ms(250, 1));
            enc.encode_frame(frame).map_err(image_err)?;
        }
    }
    archive::write_atomic(path, &bytes)
}

/// Frames tiled row-major into a grid (`4×4` for 16 frames) with a
/// one-pixel gap.
pub fn write_grid_png(path: &Path, clip: &VideoClip, scale: u32) -> Result<()> {
    let cols = (clip.frames as f64).sqrt().ceil().max(1.0) as u32;
    let rows = (clip.frames as u32).div_ceil(cols);
    let (fw, fh) = (clip.width as u32 * scale, clip.height as u32 * scale);
    let mut grid = RgbaImage::from_pixel(cols * (fw + 1) - 1, rows * (fh + 1) - 1, Rgba([255, 255, 255, 255]));
    for k in 0..clip.frames {
        let (c, r) = (k as u32 % cols, k as u32 / cols);
        image::imageops::replace(&mut grid, &frame_image(clip, k, scale), (c * (fw + 1)) as i64, (r * (fh + 1)) as i64);
    }
    let mut bytes = std::io::Cursor::new(Vec::new());
    grid.write_to(&mut bytes, ImageFormat::Png).map_err(image_err)?;
    archive::write_atomic(path, bytes.get_ref())
}

/// Raw clip as a single `clip` tensor `(F, 3, H, W)` in the checkpoint
/// archive format.
pub fn write_clip_archive(path: &Path, clip: &VideoClip, meta: &serde_json::Value) -> Result<()> {
    let mut tensors = BTreeMap::new();
    tensors.insert("clip".to_string(), clip.tensor()?);
    archive::write(path, meta, &tensors)
}

pub fn write_log_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    archive::write_atomic(path, serde_json::to_string_pretty(value)?.as_bytes())
}

fn image_err(e: image::ImageError) -> Error {
    Error::Io(std::io::Error::other(e))
}
