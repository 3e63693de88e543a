use super::scene::{Camera, Color, SceneSpec, Shape, ShapeKind};
use crate::conditioning::Vocab;
use crate::error::Result;

/// Every word the caption grammar can emit (the null token is added by
/// [`Vocab::builtin`]).
pub const VOCAB_WORDS: &[&str] = &[
    "red", "green", "blue", "yellow", "circle", "square", "triangle", "moves", "stays", "right", "left", "up",
    "down", "and", "camera", "zoom", "in", "out", "pan", "then", "cuts", "to",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    Right,
    Left,
    Up,
    Down,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::Right, Direction::Left, Direction::Up, Direction::Down];

    /// Dominant-axis direction of a displacement (`y` grows downward).
    pub fn of(dx: f64, dy: f64) -> Option<Self> {
        if dx == 0.0 && dy == 0.0 {
            return None;
        }
        Some(if dx.abs() >= dy.abs() {
            if dx > 0.0 { Direction::Right } else { Direction::Left }
        } else if dy > 0.0 {
            Direction::Down
        } else {
            Direction::Up
        })
    }

    pub fn word(self) -> &'static str {
        match self {
            Direction::Right => "right",
            Direction::Left => "left",
            Direction::Up => "up",
            Direction::Down => "down",
        }
    }

    pub fn from_word(w: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|d| d.word() == w)
    }
}

pub fn direction_word(velocity: [f64; 2]) -> Option<&'static str> {
    Direction::of(velocity[0], velocity[1]).map(Direction::word)
}

pub fn color_word(c: Color) -> &'static str {
    match c {
        Color::Red => "red",
        Color::Green => "green",
        Color::Blue => "blue",
        Color::Yellow => "yellow",
    }
}

pub fn color_from_word(w: &str) -> Option<Color> {
    Color::ALL.into_iter().find(|c| color_word(*c) == w)
}

fn kind_word(k: ShapeKind) -> &'static str {
    match k {
        ShapeKind::Circle => "circle",
        ShapeKind::Square => "square",
        ShapeKind::Triangle => "triangle",
    }
}

fn describe(shape: &Shape, out: &mut Vec<&'static str>) {
    out.push(color_word(shape.color));
    out.push(kind_word(shape.kind));
    match direction_word(shape.velocity) {
        Some(d) => out.extend(["moves", d]),
        None => out.push("stays"),
    }
}

/// Template caption as words:
/// `<color> <shape> moves <direction>` (or `stays`) per shape joined by
/// `and`, then `camera <program>`, then `then cuts to <color> <shape> ...`.
pub fn caption_words(scene: &SceneSpec) -> Vec<&'static str> {
    let mut out = Vec::new();
    for (i, s) in scene.shapes.iter().enumerate() {
        if i > 0 {
            out.push("and");
        }
        describe(s, &mut out);
    }
    match scene.camera {
        Camera::None => {}
        Camera::ZoomIn => out.extend(["camera", "zoom", "in"]),
        Camera::ZoomOut => out.extend(["camera", "zoom", "out"]),
        Camera::PanLeft => out.extend(["camera", "pan", "left"]),
        Camera::PanRight => out.extend(["camera", "pan", "right"]),
    }
    if let Some(cut) = &scene.cut {
        out.extend(["then", "cuts", "to"]);
        for (i, s) in cut.scene.shapes.iter().enumerate() {
            if i > 0 {
                out.push("and");
            }
            out.push(color_word(s.color));
            out.push(kind_word(s.kind));
        }
    }
    out
}

pub fn caption_of(scene: &SceneSpec) -> Vec<u32> {
    let vocab = Vocab::builtin();
    caption_words(scene)
        .into_iter()
        .map(|w| vocab.id(w).expect("caption words are in the vocabulary"))
        .collect()
}

/// First `(color, direction)` claim of a caption, if it has one.
pub fn motion_claim(vocab: &Vocab, caption: &[u32]) -> Result<Option<(Color, Direction)>> {
    let words: Vec<&str> = caption.iter().map(|&t| vocab.word(t)).collect::<Result<_>>()?;
    if words.len() >= 4 && words[2] == "moves" {
        if let (Some(c), Some(d)) = (color_from_word(words[0]), Direction::from_word(words[3])) {
            return Ok(Some((c, d)));
        }
    }
    Ok(None)
}
