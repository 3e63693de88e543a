use candle_core::{Device, Tensor};

use super::caption::caption_of;
use super::scene::{Camera, SceneSpec, Shape, ShapeKind};
use crate::error::Result;

/// One rendered clip with its caption and ground-truth centroids.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipRecord {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// `F×3×H×W` quantized pixels.
    pub pixels: Vec<u8>,
    pub caption: Vec<u32>,
    /// Number of trajectory slots: shapes of the first scene, then shapes of
    /// the post-cut scene.
    pub tracks: usize,
    /// `F × tracks × (x, y)` analytic screen-space centroids; NaN while a
    /// slot's shape is not on screen (before or after a cut).
    pub trajectory: Vec<f32>,
}

impl ClipRecord {
    /// Pixels as an `(F, 3, H, W)` float tensor in `[0, 1]`.
    pub fn video(&self) -> Result<Tensor> {
        let v: Vec<f32> = self.pixels.iter().map(|&p| p as f32 / 255.0).collect();
        Ok(Tensor::from_vec(v, (self.frames, 3, self.height, self.width), &Device::Cpu)?)
    }

    pub fn centroid(&self, frame: usize, track: usize) -> Option<[f32; 2]> {
        let i = (frame * self.tracks + track) * 2;
        let (x, y) = (self.trajectory[i], self.trajectory[i + 1]);
        (!x.is_nan()).then_some([x, y])
    }
}

const SUPERSAMPLE: usize = 4;
const SQUARE_HALF_SIDE: f64 = 0.85;
const TRIANGLE_CIRCUMRADIUS: f64 = 1.2;

struct Placed {
    kind: ShapeKind,
    rgb: [f64; 3],
    center: [f64; 2],
    radius: f64,
}

impl Placed {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.center[0], y - self.center[1]);
        let r = self.radius;
        match self.kind {
            ShapeKind::Circle => dx * dx + dy * dy <= r * r,
            ShapeKind::Square => dx.abs() <= SQUARE_HALF_SIDE * r && dy.abs() <= SQUARE_HALF_SIDE * r,
            ShapeKind::Triangle => {
                // upward-pointing equilateral triangle centred on its centroid
                let big = TRIANGLE_CIRCUMRADIUS * r;
                let inradius = big / 2.0;
                let s3 = 3f64.sqrt() / 2.0;
                dy <= inradius && (s3 * dx - 0.5 * dy) <= inradius && (-s3 * dx - 0.5 * dy) <= inradius
            }
        }
    }

    fn reach(&self) -> f64 {
        self.radius * TRIANGLE_CIRCUMRADIUS.max(SQUARE_HALF_SIDE * 2f64.sqrt()) + 1.0
    }
}

fn place(shape: &Shape, k: usize, camera: Camera, width: usize, height: usize) -> Placed {
    let world = shape.centroid_at(k, width, height);
    let (cx, cy) = (width as f64 / 2.0, height as f64 / 2.0);
    let s = camera.scale(k);
    Placed {
        kind: shape.kind,
        rgb: shape.color.rgb(),
        center: [cx + s * (world[0] - cx) + camera.shift(k), cy + s * (world[1] - cy)],
        radius: s * shape.radius,
    }
}

fn rasterize(background: f64, shapes: &[Placed], width: usize, height: usize, out: &mut [f64]) {
    let plane = width * height;
    for c in 0..3 {
        out[c * plane..(c + 1) * plane].fill(background);
    }
    let n = (SUPERSAMPLE * SUPERSAMPLE) as f64;
    for sh in shapes {
        let reach = sh.reach();
        let x0 = (sh.center[0] - reach).floor().max(0.0) as usize;
        let x1 = ((sh.center[0] + reach).ceil().max(0.0) as usize).min(width);
        let y0 = (sh.center[1] - reach).floor().max(0.0) as usize;
        let y1 = ((sh.center[1] + reach).ceil().max(0.0) as usize).min(height);
        for y in y0..y1 {
            for x in x0..x1 {
                let mut hits = 0usize;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let px = x as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64;
                        let py = y as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64;
                        hits += sh.contains(px, py) as usize;
                    }
                }
                if hits == 0 {
                    continue;
                }
                let a = hits as f64 / n;
                for c in 0..3 {
                    let v = &mut out[c * plane + y * width + x];
                    *v = *v * (1.0 - a) + sh.rgb[c] * a;
                }
            }
        }
    }
}

/// Rasterizes `scene` into an anti-aliased clip. Centroids in the
/// trajectory are analytic (never re-measured), including for shapes that
/// have left the canvas.
pub fn render_clip(scene: &SceneSpec, frames: usize, height: usize, width: usize) -> ClipRecord {
    let second = scene.cut.as_ref();
    let n_first = scene.shapes.len();
    let tracks = n_first + second.map_or(0, |c| c.scene.shapes.len());
    let plane = 3 * height * width;
    let mut pixels = Vec::with_capacity(frames * plane);
    let mut trajectory = vec![f32::NAN; frames * tracks * 2];
    let mut buf = vec![0.0; plane];
    for k in 0..frames {
        let (active, local, offset) = match second {
            Some(c) if k >= c.frame => (&c.scene, k - c.frame, n_first),
            _ => (scene, k, 0),
        };
        let placed: Vec<Placed> = active
            .shapes
            .iter()
            .map(|s| place(s, local, active.camera, width, height))
            .collect();
        for (i, p) in placed.iter().enumerate() {
            let at = (k * tracks + offset + i) * 2;
            trajectory[at] = p.center[0] as f32;
            trajectory[at + 1] = p.center[1] as f32;
        }
        rasterize(active.background, &placed, width, height, &mut buf);
        pixels.extend(buf.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    ClipRecord {
        frames,
        height,
        width,
        pixels,
        caption: caption_of(scene),
        tracks,
        trajectory,
    }
}

/// `F × tracks` flags marking shapes that are fully on the canvas and do
/// not touch any other shape in that frame.
pub fn isolated_tracks(scene: &SceneSpec, frames: usize, height: usize, width: usize) -> Vec<Vec<bool>> {
    let n_first = scene.shapes.len();
    let tracks = n_first + scene.cut.as_ref().map_or(0, |c| c.scene.shapes.len());
    (0..frames)
        .map(|k| {
            let (active, local, offset) = match scene.cut.as_ref() {
                Some(c) if k >= c.frame => (&c.scene, k - c.frame, n_first),
                _ => (scene, k, 0),
            };
            let placed: Vec<Placed> = active
                .shapes
                .iter()
                .map(|s| place(s, local, active.camera, width, height))
                .collect();
            let mut row = vec![false; tracks];
            for (i, p) in placed.iter().enumerate() {
                let (r, [x, y]) = (p.reach(), p.center);
                let inside = x - r >= 0.0 && y - r >= 0.0 && x + r <= width as f64 && y + r <= height as f64;
                let apart = placed.iter().enumerate().all(|(j, q)| {
                    j == i || (q.center[0] - x).hypot(q.center[1] - y) > r + q.reach()
                });
                row[offset + i] = inside && apart;
            }
            row
        })
        .collect()
}
