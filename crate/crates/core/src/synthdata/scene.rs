use rand::seq::IndexedRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::noise::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Yellow => [1.0, 1.0, 0.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Program {
    /// Constant velocity; may leave the canvas (drawn clipped).
    Linear,
    /// Constant speed, reflecting off the canvas walls.
    Bounce,
    /// Starts against the wall behind it and moves into the canvas.
    Enter,
    /// Starts near the wall ahead of it and leaves the canvas.
    Exit,
}

impl Program {
    pub const ALL: [Program; 4] = [Program::Linear, Program::Bounce, Program::Enter, Program::Exit];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Camera {
    None,
    ZoomIn,
    ZoomOut,
    PanLeft,
    PanRight,
}

impl Camera {
    pub const MOVING: [Camera; 4] = [Camera::ZoomIn, Camera::ZoomOut, Camera::PanLeft, Camera::PanRight];

    /// Zoom factor about the canvas centre at frame `k`.
    pub fn scale(self, k: usize) -> f64 {
        match self {
            Camera::ZoomIn => 1.0 + 0.03 * k as f64,
            Camera::ZoomOut => 1.0 / (1.0 + 0.03 * k as f64),
            _ => 1.0,
        }
    }

    /// Horizontal content shift at frame `k` (a camera panning left moves
    /// the content right).
    pub fn shift(self, k: usize) -> f64 {
        match self {
            Camera::PanLeft => 0.5 * k as f64,
            Camera::PanRight => -0.5 * k as f64,
            _ => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub kind: ShapeKind,
    pub color: Color,
    pub radius: f64,
    /// Centroid at frame 0, pixel units (pixel `(x, y)` spans `[x, x+1)`).
    pub position: [f64; 2],
    /// Pixels per frame; `y` grows downward.
    pub velocity: [f64; 2],
    pub program: Program,
}

impl Shape {
    /// World-space centroid at local frame `k` on a `width×height` canvas.
    pub fn centroid_at(&self, k: usize, width: usize, height: usize) -> [f64; 2] {
        let mut p = [0.0; 2];
        let extent = [width as f64, height as f64];
        for a in 0..2 {
            let free = self.position[a] + self.velocity[a] * k as f64;
            p[a] = match self.program {
                Program::Bounce => reflect(free, self.radius, extent[a] - self.radius),
                _ => free,
            };
        }
        p
    }
}

fn reflect(x: f64, lo: f64, hi: f64) -> f64 {
    let span = hi - lo;
    if span <= 0.0 {
        return lo;
    }
    let m = (x - lo).rem_euclid(2.0 * span);
    lo + if m <= span { m } else { 2.0 * span - m }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cut {
    pub frame: usize,
    pub scene: SceneSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub shapes: Vec<Shape>,
    pub camera: Camera,
    pub background: f64,
    pub cut: Option<Box<Cut>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrammarConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub max_shapes: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    pub speeds: Vec<f64>,
    /// Probability that a shape is static.
    pub static_prob: f64,
    pub camera_prob: f64,
    pub cut_prob: f64,
    pub background_min: f64,
    pub background_max: f64,
}

impl Default for GrammarConfig {
    fn default() -> Self {
        Self {
            frames: 16,
            height: 32,
            width: 32,
            max_shapes: 2,
            radius_min: 3.0,
            radius_max: 6.0,
            speeds: vec![1.0, 1.5, 2.0],
            static_prob: 0.1,
            camera_prob: 0.2,
            cut_prob: 0.1,
            background_min: 0.2,
            background_max: 0.6,
        }
    }
}

impl GrammarConfig {
    /// Subset with only static shapes, no camera motion and no cuts.
    pub fn static_only(self) -> Self {
        Self {
            static_prob: 1.0,
            camera_prob: 0.0,
            cut_prob: 0.0,
            ..self
        }
    }

    pub fn validate(&self) -> crate::Result<()> {
        let bad = |m: &str| Err(crate::Error::Config(m.to_string()));
        if self.frames < 8 && self.cut_prob > 0.0 {
            return bad("cuts need at least 8 frames");
        }
        if self.frames < 4 {
            return bad("clips need at least 4 frames");
        }
        if self.max_shapes == 0 || self.max_shapes > 2 {
            return bad("max_shapes must be 1 or 2");
        }
        if !(self.radius_min > 0.0 && self.radius_min <= self.radius_max) {
            return bad("radius range must be positive and ordered");
        }
        if 2.0 * self.radius_max >= self.width.min(self.height) as f64 {
            return bad("shapes must fit inside the canvas");
        }
        if self.speeds.is_empty() || self.speeds.iter().any(|s| *s <= 0.0) {
            return bad("speeds must be positive");
        }
        for p in [self.static_prob, self.camera_prob, self.cut_prob] {
            if !(0.0..=1.0).contains(&p) {
                return bad("probabilities must lie in [0, 1]");
            }
        }
        if !(0.0 <= self.background_min && self.background_min <= self.background_max && self.background_max <= 1.0) {
            return bad("background range must lie in [0, 1]");
        }
        Ok(())
    }
}

const DIRECTIONS: [[f64; 2]; 4] = [[1.0, 0.0], [-1.0, 0.0], [0.0, -1.0], [0.0, 1.0]];

fn sample_shape(rng: &mut Rng, cfg: &GrammarConfig, color: Color) -> Shape {
    let kind = ShapeKind::ALL[rng.random_range(0..3)];
    let radius = rng.random_range(cfg.radius_min..=cfg.radius_max);
    let moving = rng.random::<f64>() >= cfg.static_prob;
    let (dir, speed) = if moving {
        (DIRECTIONS[rng.random_range(0..4)], *cfg.speeds.choose(rng).expect("nonempty speeds"))
    } else {
        ([0.0, 0.0], 0.0)
    };
    let program = if moving { Program::ALL[rng.random_range(0..4)] } else { Program::Linear };
    let extent = [cfg.width as f64, cfg.height as f64];
    let mut position = [0.0; 2];
    for a in 0..2 {
        let (lo, hi) = (radius, extent[a] - radius);
        position[a] = if dir[a] == 0.0 {
            rng.random_range(lo..=hi)
        } else {
            match program {
                Program::Enter => if dir[a] > 0.0 { lo } else { hi },
                Program::Exit => {
                    let lead = speed * rng.random_range(0.0..=cfg.frames as f64 / 3.0);
                    if dir[a] > 0.0 { (hi - lead).max(lo) } else { (lo + lead).min(hi) }
                }
                Program::Bounce => {
                    // no wall contact during the first quarter, so early
                    // motion agrees with the caption
                    let clear = (speed * cfg.frames.div_ceil(4) as f64).min(hi - lo);
                    if dir[a] > 0.0 {
                        rng.random_range(lo..=hi - clear)
                    } else {
                        rng.random_range(lo + clear..=hi)
                    }
                }
                Program::Linear => rng.random_range(lo..=hi),
            }
        };
    }
    Shape {
        kind,
        color,
        radius,
        position,
        velocity: [dir[0] * speed, dir[1] * speed],
        program,
    }
}

fn sample_shapes(rng: &mut Rng, cfg: &GrammarConfig) -> Vec<Shape> {
    let count = rng.random_range(1..=cfg.max_shapes);
    let mut palette = Color::ALL.to_vec();
    let mut shapes: Vec<Shape> = Vec::with_capacity(count);
    for _ in 0..count {
        let color = palette.remove(rng.random_range(0..palette.len()));
        // keep shapes apart over the first quarter so neither hides the other
        let placed = (0..SEPARATION_ATTEMPTS)
            .map(|_| sample_shape(rng, cfg, color))
            .find(|s| shapes.iter().all(|o| separated(s, o, cfg)));
        match placed {
            Some(s) => shapes.push(s),
            None => break,
        }
    }
    shapes
}

const SEPARATION_ATTEMPTS: usize = 64;

fn separated(a: &Shape, b: &Shape, cfg: &GrammarConfig) -> bool {
    // triangles reach 1.2 r from their centroid
    let gap = 1.2 * (a.radius + b.radius) + 1.0;
    (0..=cfg.frames.div_ceil(4)).all(|k| {
        let (p, q) = (a.centroid_at(k, cfg.width, cfg.height), b.centroid_at(k, cfg.width, cfg.height));
        (p[0] - q[0]).hypot(p[1] - q[1]) > gap
    })
}

/// Draws a well-formed scene. Deterministic in the rng state.
pub fn sample_scene(rng: &mut Rng, cfg: &GrammarConfig) -> SceneSpec {
    let shapes = sample_shapes(rng, cfg);
    let camera = if rng.random::<f64>() < cfg.camera_prob {
        Camera::MOVING[rng.random_range(0..4)]
    } else {
        Camera::None
    };
    let background = rng.random_range(cfg.background_min..=cfg.background_max);
    let cut = if rng.random::<f64>() < cfg.cut_prob {
        let frame = rng.random_range(4..=cfg.frames - 4);
        let second = SceneSpec {
            shapes: sample_shapes(rng, cfg),
            camera: Camera::None,
            background: rng.random_range(cfg.background_min..=cfg.background_max),
            cut: None,
        };
        Some(Box::new(Cut { frame, scene: second }))
    } else {
        None
    };
    SceneSpec {
        shapes,
        camera,
        background,
        cut,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise;

    #[test]
    fn fixed_seed_is_reproducible() {
        let cfg = GrammarConfig::default();
        let a = sample_scene(&mut noise::seeded(5), &cfg);
        let b = sample_scene(&mut noise::seeded(5), &cfg);
        assert_eq!(a, b);
    }

    #[test]
    fn scenes_are_well_formed() {
        let cfg = GrammarConfig::default();
        let mut rng = noise::seeded(1);
        for _ in 0..2000 {
            let s = sample_scene(&mut rng, &cfg);
            assert!(!s.shapes.is_empty() && s.shapes.len() <= 2);
            for sh in &s.shapes {
                for a in 0..2 {
                    let ext = if a == 0 { cfg.width } else { cfg.height } as f64;
                    assert!(sh.position[a] >= sh.radius - 1e-9 && sh.position[a] <= ext - sh.radius + 1e-9);
                }
                assert!(sh.velocity[0] == 0.0 || sh.velocity[1] == 0.0);
            }
            if let [a, b] = &s.shapes[..] {
                assert_ne!(a.color, b.color);
                assert!(separated(a, b, &cfg));
            }
            if let Some(c) = &s.cut {
                assert!(c.frame >= 4 && c.frame <= cfg.frames - 4);
                assert!(c.scene.cut.is_none());
            }
        }
    }

    #[test]
    fn static_subset_has_no_motion() {
        let cfg = GrammarConfig::default().static_only();
        let mut rng = noise::seeded(2);
        for _ in 0..500 {
            let s = sample_scene(&mut rng, &cfg);
            assert!(s.shapes.iter().all(|sh| sh.velocity == [0.0, 0.0]));
            assert_eq!(s.camera, Camera::None);
            assert!(s.cut.is_none());
        }
    }

    #[test]
    fn bounce_stays_inside() {
        let sh = Shape {
            kind: ShapeKind::Circle,
            color: Color::Red,
            radius: 4.0,
            position: [20.0, 10.0],
            velocity: [2.0, 0.0],
            program: Program::Bounce,
        };
        let xs: Vec<f64> = (0..40).map(|k| sh.centroid_at(k, 32, 32)[0]).collect();
        assert!(xs.iter().all(|&x| (4.0..=28.0).contains(&x)));
        assert_eq!(xs[4], 28.0);
        assert_eq!(xs[5], 26.0);
    }

    #[test]
    fn config_validation() {
        assert!(GrammarConfig::default().validate().is_ok());
        let c = GrammarConfig { radius_max: 20.0, ..Default::default() };
        assert!(c.validate().is_err());
        let c = GrammarConfig { max_shapes: 3, ..Default::default() };
        assert!(c.validate().is_err());
    }
}
