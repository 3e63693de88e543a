//! Desk-scale measurement: a color tracker, fidelity metrics, a Fréchet
//! distance over toy clip features, and sweep reports.

mod features;
mod metrics;
mod sweep;
mod track;

pub use features::{clip_features, FEATURE_DIM, FEATURE_VERSION};
pub use metrics::{clip_psnr, frechet, gaussian_stats, mse, psnr, spearman, FrechetDistance, GaussianStats};
pub use sweep::{
    chain_drift, feature_stats, first_frame_adherence, generate_set, tau_sweep, toy_frechet, write_tau_sweep, ChainDrift, TauRow,
    TauSweep,
};
pub use track::{color_occupancy, color_response, dominant_color, largest_component, track_centroids};

use serde::Serialize;

use crate::conditioning::Vocab;
use crate::error::{arg, Result};
use crate::synthdata::{motion_claim, Direction};
use crate::video::VideoClip;

/// Direction of the tracked `color` blob over the first quarter of the
/// clip, from the first to the last frame in that window where it is
/// found. `None` when it is found in fewer than two frames or does not
/// move.
pub fn early_direction(video: &VideoClip, color: crate::synthdata::Color) -> Option<Direction> {
    let end = (video.frames / 4).saturating_sub(1).max(1).min(video.frames - 1);
    let track = track_centroids(&video.slice(0, end + 1), color);
    let found: Vec<[f64; 2]> = track.into_iter().flatten().collect();
    if found.len() < 2 {
        return None;
    }
    let (a, b) = (found[0], found[found.len() - 1]);
    Direction::of(b[0] - a[0], b[1] - a[1])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MotionReport {
    pub accuracy: f64,
    pub correct: usize,
    pub evaluated: usize,
    /// Clips whose caption makes no motion claim.
    pub excluded: usize,
}

/// Fraction of clips whose tracked early motion matches the direction the
/// caption claims for its first shape. A clip whose claimed shape cannot
/// be tracked counts as a miss.
pub fn motion_accuracy(clips: &[(VideoClip, Vec<u32>)], vocab: &Vocab) -> Result<MotionReport> {
    if clips.is_empty() {
        return arg("motion accuracy over an empty set");
    }
    let (mut correct, mut evaluated, mut excluded) = (0, 0, 0);
    for (video, caption) in clips {
        match motion_claim(vocab, caption)? {
            None => excluded += 1,
            Some((color, dir)) => {
                evaluated += 1;
                correct += (early_direction(video, color) == Some(dir)) as usize;
            }
        }
    }
    if evaluated == 0 {
        return arg("no clip makes a motion claim");
    }
    Ok(MotionReport {
        accuracy: correct as f64 / evaluated as f64,
        correct,
        evaluated,
        excluded,
    })
}
