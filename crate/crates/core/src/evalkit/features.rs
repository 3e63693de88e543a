//! Deterministic, training-free clip features (d = 64) for the toy
//! Fréchet distance.

use super::track::{color_occupancy, track_centroids};
use crate::synthdata::Color;
use crate::video::VideoClip;

pub const FEATURE_DIM: usize = 64;
/// Bumped whenever the feature map changes; echoed into reports.
pub const FEATURE_VERSION: u32 = 1;

const BINS: usize = 8;

fn histogram(values: impl Iterator<Item = f32>, out: &mut Vec<f64>) {
    let mut h = [0.0; BINS];
    let mut n = 0.0;
    for v in values {
        h[((v.clamp(0.0, 1.0) * BINS as f32) as usize).min(BINS - 1)] += 1.0;
        n += 1.0;
    }
    out.extend(h.iter().map(|c| c / f64::max(n, 1.0)));
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len().max(1) as f64;
    let m = values.iter().sum::<f64>() / n;
    let v = values.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, v.sqrt())
}

/// Feature layout:
/// 24 per-channel intensity histograms over the clip,
/// 16 color occupancies (4 colors × 4 temporal quarters),
/// 8 temporal-difference statistics,
/// 16 motion and intensity statistics (per-color displacement and
/// presence, global brightness).
pub fn clip_features(video: &VideoClip) -> Vec<f64> {
    let (f, h, w) = (video.frames, video.height, video.width);
    let plane = h * w;
    let mut out = Vec::with_capacity(FEATURE_DIM);

    for c in 0..3 {
        histogram((0..f).flat_map(|k| video.data[(k * 3 + c) * plane..(k * 3 + c + 1) * plane].iter().copied()), &mut out);
    }

    for q in 0..4 {
        let (a, b) = (q * f / 4, ((q + 1) * f / 4).max(q * f / 4 + 1).min(f));
        out.extend(color_occupancy(video, a..b));
    }

    let n = video.frame_len();
    let mut per_channel = [0.0f64; 3];
    let mut diffs = Vec::with_capacity((f.saturating_sub(1)) * n);
    let mut frame_means = Vec::with_capacity(f);
    for k in 1..f {
        let (prev, cur) = (video.frame_data(k - 1), video.frame_data(k));
        let mut s = 0.0;
        for (i, (p, c)) in prev.iter().zip(cur).enumerate() {
            let d = (*c - *p).abs() as f64;
            per_channel[i / plane] += d;
            s += d;
            diffs.push(d);
        }
        frame_means.push(s / n as f64);
    }
    let steps = (f.saturating_sub(1) * plane).max(1) as f64;
    out.extend(per_channel.iter().map(|s| s / steps));
    let (_, dstd) = mean_std(&diffs);
    let total = diffs.len().max(1) as f64;
    out.push(dstd);
    out.push(diffs.iter().filter(|d| **d > 0.1).count() as f64 / total);
    out.push(diffs.iter().filter(|d| **d > 0.3).count() as f64 / total);
    out.push(mse_f64(video.frame_data(0), video.frame_data(f - 1)).sqrt());
    out.push(frame_means.iter().copied().fold(0.0, f64::max));

    for color in Color::ALL {
        let track = track_centroids(video, color);
        let found: Vec<(usize, [f64; 2])> = track.iter().enumerate().filter_map(|(k, c)| c.map(|c| (k, c))).collect();
        let (dx, dy) = match (found.first(), found.last()) {
            (Some((k0, a)), Some((k1, b))) if k1 > k0 => ((b[0] - a[0]) / (k1 - k0) as f64, (b[1] - a[1]) / (k1 - k0) as f64),
            _ => (0.0, 0.0),
        };
        out.extend([dx / w as f64 * 4.0, dy / h as f64 * 4.0, found.len() as f64 / f as f64]);
    }
    let all: Vec<f64> = video.data.iter().map(|v| *v as f64).collect();
    let (m, s) = mean_std(&all);
    let first = video.frame_data(0).iter().map(|v| *v as f64).sum::<f64>() / n as f64;
    let last = video.frame_data(f - 1).iter().map(|v| *v as f64).sum::<f64>() / n as f64;
    out.extend([m, s, first, last]);

    debug_assert_eq!(out.len(), FEATURE_DIM);
    out
}

fn mse_f64(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>() / a.len().max(1) as f64
}
