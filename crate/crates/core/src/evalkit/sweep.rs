use std::path::Path;

use image::{Rgba, RgbaImage};
use serde::Serialize;

use super::features::{clip_features, FEATURE_VERSION};
use super::metrics::{frechet, gaussian_stats, mse, psnr, spearman, FrechetDistance, GaussianStats};
use crate::archive::write_atomic;
use crate::diffusion::NoiseSchedule;
use crate::error::{arg, Result};
use crate::model::Model;
use crate::noise;
use crate::sampler::{chain_clips, generate_clip, instructions_from_frames, ChainEntry, SamplerConfig};
use crate::synthdata::ClipRecord;
use crate::video::VideoClip;

pub fn feature_stats(clips: &[VideoClip]) -> Result<GaussianStats> {
    let feats: Vec<Vec<f64>> = clips.iter().map(clip_features).collect();
    gaussian_stats(&feats)
}

pub fn toy_frechet(a: &[VideoClip], b: &[VideoClip]) -> Result<FrechetDistance> {
    frechet(&feature_stats(a)?, &feature_stats(b)?)
}

/// Generates one clip per sample from the endpoints and caption of
/// `eval[i % len]`, with seed `derive_seed(cfg.seed, i)`.
fn generate_from(model: &Model, sched: &NoiseSchedule, r: &ClipRecord, cfg: &SamplerConfig, i: usize) -> Result<VideoClip> {
    let v = VideoClip::from_record(r);
    let last = (cfg.tau > 0).then(|| v.frame(v.frames - 1)).transpose()?;
    let ins = instructions_from_frames(model, r.caption.clone(), &v.frame(0)?, last.as_ref())?;
    let cfg = SamplerConfig {
        seed: noise::derive_seed(cfg.seed, i as u64),
        ..cfg.clone()
    };
    Ok(generate_clip(model, &ins, &cfg, sched)?.clip)
}

/// Generations for the first `samples` eval records (cycling).
pub fn generate_set(model: &Model, sched: &NoiseSchedule, eval: &[ClipRecord], samples: usize, cfg: &SamplerConfig) -> Result<Vec<VideoClip>> {
    if eval.is_empty() {
        return arg("empty evaluation set");
    }
    (0..samples).map(|i| generate_from(model, sched, &eval[i % eval.len()], cfg, i)).collect()
}

/// Per-sample PSNR between generated and instructed first frames.
pub fn first_frame_adherence(generated: &[VideoClip], eval: &[ClipRecord]) -> Result<Vec<f64>> {
    generated
        .iter()
        .enumerate()
        .map(|(i, g)| psnr(g.frame_data(0), VideoClip::from_record(&eval[i % eval.len()]).frame_data(0)))
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct TauRow {
    pub tau: usize,
    pub last_frame_mse: f64,
    pub first_frame_psnr: f64,
    pub toy_frechet: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TauSweep {
    pub rows: Vec<TauRow>,
    /// `samples × taus` paired last-frame errors.
    pub paired_mse: Vec<Vec<f64>>,
    /// Spearman correlation of τ against the mean last-frame error.
    pub spearman_of_means: f64,
    /// Mean over samples of the per-sample Spearman correlation (samples
    /// with constant error are skipped).
    pub mean_paired_spearman: f64,
    pub samples: usize,
    pub steps: usize,
    pub feature_version: u32,
    pub frechet_regularized: bool,
}

/// Samples every eval instruction at each τ with shared seeds, so rows are
/// paired. The reference set for the Fréchet column is `eval` itself.
pub fn tau_sweep(
    model: &Model,
    sched: &NoiseSchedule,
    eval: &[ClipRecord],
    taus: &[usize],
    base: &SamplerConfig,
    samples: usize,
) -> Result<TauSweep> {
    if taus.is_empty() || samples == 0 || eval.is_empty() {
        return arg("tau sweep needs taus, samples and an evaluation set");
    }
    let reference: Vec<VideoClip> = eval.iter().map(VideoClip::from_record).collect();
    let ref_stats = feature_stats(&reference)?;
    let mut rows = Vec::with_capacity(taus.len());
    let mut paired = vec![vec![0.0; taus.len()]; samples];
    let mut regularized = ref_stats.regularized;
    for (j, &tau) in taus.iter().enumerate() {
        let cfg = SamplerConfig { tau, ..base.clone() };
        let clips = generate_set(model, sched, eval, samples, &cfg)?;
        let mut psnrs = Vec::with_capacity(samples);
        for (i, g) in clips.iter().enumerate() {
            let truth = &reference[i % reference.len()];
            paired[i][j] = mse(g.frame_data(g.frames - 1), truth.frame_data(truth.frames - 1));
            psnrs.push(psnr(g.frame_data(0), truth.frame_data(0))?);
        }
        let fd = if clips.len() >= 2 {
            let d = frechet(&feature_stats(&clips)?, &ref_stats)?;
            regularized |= d.regularized;
            d.value
        } else {
            f64::NAN
        };
        rows.push(TauRow {
            tau,
            last_frame_mse: paired.iter().map(|r| r[j]).sum::<f64>() / samples as f64,
            first_frame_psnr: psnrs.iter().sum::<f64>() / samples as f64,
            toy_frechet: fd,
        });
    }
    let tau_axis: Vec<f64> = taus.iter().map(|&t| t as f64).collect();
    let (spearman_of_means, mean_paired_spearman) = if taus.len() >= 2 {
        let means: Vec<f64> = rows.iter().map(|r| r.last_frame_mse).collect();
        let per: Vec<f64> = paired
            .iter()
            .map(|r| spearman(&tau_axis, r))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .filter(|v| v.is_finite())
            .collect();
        (spearman(&tau_axis, &means)?, per.iter().sum::<f64>() / per.len().max(1) as f64)
    } else {
        (f64::NAN, f64::NAN)
    };
    Ok(TauSweep {
        rows,
        paired_mse: paired,
        spearman_of_means,
        mean_paired_spearman,
        samples,
        steps: base.steps,
        feature_version: FEATURE_VERSION,
        frechet_regularized: regularized,
    })
}

fn plot_line(values: &[(f64, f64)]) -> RgbaImage {
    let (w, h, pad) = (320u32, 240u32, 20.0);
    let mut img = RgbaImage::from_pixel(w, h, Rgba([255, 255, 255, 255]));
    let finite: Vec<(f64, f64)> = values.iter().copied().filter(|(x, y)| x.is_finite() && y.is_finite()).collect();
    if finite.is_empty() {
        return img;
    }
    let (x0, x1) = finite.iter().fold((f64::MAX, f64::MIN), |(a, b), (x, _)| (a.min(*x), b.max(*x)));
    let (y0, y1) = finite.iter().fold((f64::MAX, f64::MIN), |(a, b), (_, y)| (a.min(*y), b.max(*y)));
    let sx = |x: f64| pad + (x - x0) / (x1 - x0).max(1e-12) * (w as f64 - 2.0 * pad);
    let sy = |y: f64| h as f64 - pad - (y - y0) / (y1 - y0).max(1e-12) * (h as f64 - 2.0 * pad);
    for x in pad as u32..w - pad as u32 {
        img.put_pixel(x, h - pad as u32, Rgba([0, 0, 0, 255]));
    }
    for y in pad as u32..h - pad as u32 {
        img.put_pixel(pad as u32, y, Rgba([0, 0, 0, 255]));
    }
    for pair in finite.windows(2) {
        let (a, b) = ((sx(pair[0].0), sy(pair[0].1)), (sx(pair[1].0), sy(pair[1].1)));
        let n = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
        for s in 0..=n {
            let u = s as f64 / n as f64;
            let (x, y) = (a.0 + u * (b.0 - a.0), a.1 + u * (b.1 - a.1));
            img.put_pixel((x as u32).min(w - 1), (y as u32).min(h - 1), Rgba([200, 30, 30, 255]));
        }
    }
    for (x, y) in &finite {
        for dy in -2i32..=2 {
            for dx in -2i32..=2 {
                let (px, py) = (sx(*x) as i32 + dx, sy(*y) as i32 + dy);
                if px >= 0 && py >= 0 && (px as u32) < w && (py as u32) < h {
                    img.put_pixel(px as u32, py as u32, Rgba([30, 30, 200, 255]));
                }
            }
        }
    }
    img
}

/// Writes `tau_sweep.json`, `tau_sweep.csv` and `tau_sweep_mse.png`
/// (last-frame error against τ) into `dir`.
pub fn write_tau_sweep(dir: &Path, sweep: &TauSweep) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_atomic(&dir.join("tau_sweep.json"), serde_json::to_string_pretty(sweep)?.as_bytes())?;
    let mut csv = String::from("tau,last_frame_mse,first_frame_psnr,toy_frechet\n");
    for r in &sweep.rows {
        csv.push_str(&format!("{},{},{},{}\n", r.tau, r.last_frame_mse, r.first_frame_psnr, r.toy_frechet));
    }
    write_atomic(&dir.join("tau_sweep.csv"), csv.as_bytes())?;
    let pts: Vec<(f64, f64)> = sweep.rows.iter().map(|r| (r.tau as f64, r.last_frame_mse)).collect();
    let mut png = std::io::Cursor::new(Vec::new());
    plot_line(&pts)
        .write_to(&mut png, image::ImageFormat::Png)
        .map_err(|e| crate::Error::Io(std::io::Error::other(e)))?;
    write_atomic(&dir.join("tau_sweep_mse.png"), png.get_ref())
}

#[derive(Debug, Clone, Serialize)]
pub struct ChainDrift {
    pub chains: usize,
    pub clips_per_chain: usize,
    pub frames_per_chain: usize,
    /// Toy-Fréchet of clip position `k` (across chains) against the
    /// evaluation set.
    pub per_clip_frechet: Vec<f64>,
    /// Mean absolute pixel difference between clip `k` and the chain's
    /// starting frame.
    pub per_clip_pixel_drift: Vec<f64>,
    pub growth: f64,
    pub boundaries_exact: bool,
    pub regularized: bool,
}

/// Runs `chains` chains of `clips_per_chain` clips, each starting from an
/// eval record's first frame and reusing its caption (τ = 0).
pub fn chain_drift(
    model: &Model,
    sched: &NoiseSchedule,
    eval: &[ClipRecord],
    chains: usize,
    clips_per_chain: usize,
    base: &SamplerConfig,
) -> Result<ChainDrift> {
    if eval.is_empty() || chains < 2 || clips_per_chain == 0 {
        return arg("chain drift needs an evaluation set, at least two chains and one clip each");
    }
    let reference: Vec<VideoClip> = eval.iter().map(VideoClip::from_record).collect();
    let ref_stats = feature_stats(&reference)?;
    let mut by_position: Vec<Vec<VideoClip>> = vec![Vec::with_capacity(chains); clips_per_chain];
    let mut drift = vec![0.0; clips_per_chain];
    let mut exact = true;
    let mut frames_per_chain = 0;
    for c in 0..chains {
        let r = &reference[c % reference.len()];
        let start = r.frame(0)?;
        let script: Vec<ChainEntry> = (0..clips_per_chain)
            .map(|k| ChainEntry {
                caption: eval[c % eval.len()].caption.clone(),
                last: None,
                sampler: SamplerConfig {
                    tau: 0,
                    seed: noise::derive_seed(noise::derive_seed(base.seed, c as u64), k as u64),
                    ..base.clone()
                },
            })
            .collect();
        let chain = chain_clips(model, &start, &script, sched)?;
        frames_per_chain = chain.video.frames;
        let mut at = 0;
        for (k, g) in chain.clips.iter().enumerate() {
            if k > 0 {
                // the boundary frame and its round trip through the codec
                // (what the next clip was conditioned on) must both match
                let prev = &chain.clips[k - 1].clip;
                let boundary = prev.frame(prev.frames - 1)?;
                let codec = model.codec();
                let seen = codec.decode_frame(&codec.encode_frame(&boundary)?)?;
                let seen = seen.flatten_all()?.to_vec1::<f32>()?;
                exact &= chain.video.frame_data(at) == prev.frame_data(prev.frames - 1) && seen == prev.frame_data(prev.frames - 1);
            }
            let start_px = r.frame_data(0);
            let d: f64 = (0..g.clip.frames)
                .map(|f| g.clip.frame_data(f).iter().zip(start_px).map(|(a, b)| (a - b).abs() as f64).sum::<f64>())
                .sum::<f64>()
                / (g.clip.frames * g.clip.frame_len()) as f64;
            drift[k] += d / chains as f64;
            at += g.clip.frames - 1;
            by_position[k].push(g.clip.clone());
        }
    }
    let mut regularized = ref_stats.regularized;
    let mut per_clip = Vec::with_capacity(clips_per_chain);
    for clips in &by_position {
        let d = frechet(&feature_stats(clips)?, &ref_stats)?;
        regularized |= d.regularized;
        per_clip.push(d.value);
    }
    Ok(ChainDrift {
        chains,
        clips_per_chain,
        frames_per_chain,
        growth: per_clip[clips_per_chain - 1] / per_clip[0],
        per_clip_frechet: per_clip,
        per_clip_pixel_drift: drift,
        boundaries_exact: exact,
        regularized,
    })
}
