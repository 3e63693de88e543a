//! Procedural moving-shapes video corpus with template captions and
//! analytic trajectory annotations.

mod caption;
mod render;
mod scene;
mod shard;

pub use caption::{caption_of, caption_words, color_from_word, color_word, direction_word, motion_claim, Direction, VOCAB_WORDS};
pub use render::{isolated_tracks, render_clip, ClipRecord};
pub use scene::{sample_scene, Camera, Color, Cut, GrammarConfig, Program, SceneSpec, Shape, ShapeKind};
pub use shard::{decode_shard, encode_shard, read_shard, write_shard};

use crate::noise;

/// Renders `count` clips; record `i` uses the rng stream `(seed, i)`, so the
/// output depends only on `(seed, cfg)`, not on thread scheduling.
pub fn generate(cfg: &GrammarConfig, seed: u64, count: usize) -> Vec<ClipRecord> {
    let one = |i: usize| {
        let mut rng = noise::seeded(noise::derive_seed(seed, i as u64));
        let scene = sample_scene(&mut rng, cfg);
        render_clip(&scene, cfg.frames, cfg.height, cfg.width)
    };
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(count.max(1));
    if workers <= 1 {
        return (0..count).map(one).collect();
    }
    let chunk = count.div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let one = &one;
                s.spawn(move || (w * chunk..((w + 1) * chunk).min(count)).map(one).collect::<Vec<_>>())
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("render worker panicked")).collect()
    })
}
