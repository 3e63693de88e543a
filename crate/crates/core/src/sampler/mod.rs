//! Inference: classifier-free guidance over text, the τ-staged last-frame
//! schedule, autoregressive chaining and endpoint-frame editing.

mod output;

pub use output::{write_clip_archive, write_gif, write_grid_png, write_log_json};

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::conditioning::{compose_image_condition, Frame, FrameLatent, InstructionSet, NULL_TOKEN};
use crate::denoiser::Mode;
use crate::diffusion::{ddpm_ancestral_step, perturb_instruction, NoiseSchedule};
use crate::error::{arg, Error, Result};
use crate::model::Model;
use crate::noise;
use crate::video::VideoClip;

/// Which sampling iterations see the last-frame instruction.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TauMode {
    /// Iterations `1..=τ`, i.e. the highest-noise steps.
    #[default]
    First,
    /// Debug alternative: the last τ iterations (lowest noise).
    Last,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub steps: usize,
    pub tau: usize,
    pub guidance: f64,
    pub perturb_instructions: bool,
    pub t_pert: usize,
    pub seed: u64,
    pub tau_mode: TauMode,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            tau: 25,
            guidance: 5.0,
            perturb_instructions: true,
            t_pert: 100,
            seed: 0,
            tau_mode: TauMode::First,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, train_steps: usize) -> Result<()> {
        if self.steps == 0 || self.steps > train_steps {
            return arg(format!("sampling steps must lie in [1, {train_steps}], got {}", self.steps));
        }
        if self.tau > self.steps {
            return arg(format!("tau {} exceeds the {} sampling steps", self.tau, self.steps));
        }
        if !(self.guidance >= 0.0 && self.guidance.is_finite()) {
            return arg("guidance scale must be finite and nonnegative");
        }
        if self.perturb_instructions && (self.t_pert == 0 || self.t_pert > train_steps) {
            return arg(format!("t_pert must lie in [1, {train_steps}]"));
        }
        Ok(())
    }

    /// Whether iteration `k` (1-based, highest noise first) conditions on
    /// the last frame.
    pub fn last_active(&self, k: usize) -> bool {
        match self.tau_mode {
            TauMode::First => k <= self.tau,
            TauMode::Last => k > self.steps - self.tau,
        }
    }
}

/// `uncond + w·(cond − uncond)`; `w = 0` and `w = 1` return the respective
/// branch unchanged.
pub fn cfg_combine(eps_cond: &Tensor, eps_uncond: &Tensor, w: f64) -> Result<Tensor> {
    if eps_cond.dims() != eps_uncond.dims() {
        return arg(format!("cfg branches differ in shape: {:?} vs {:?}", eps_cond.dims(), eps_uncond.dims()));
    }
    if w == 1.0 {
        return Ok(eps_cond.clone());
    }
    if w == 0.0 {
        return Ok(eps_uncond.clone());
    }
    Ok((eps_uncond + (eps_cond - eps_uncond)?.affine(w, 0.0)?)?)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Sampling iteration, 1 = highest noise.
    pub iteration: usize,
    /// Training-schedule step the denoiser was evaluated at.
    pub step: usize,
    pub first_slot_active: bool,
    pub last_slot_active: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditioningLog {
    pub tau: usize,
    pub steps: usize,
    pub guidance: f64,
    pub seed: u64,
    pub entries: Vec<StepRecord>,
}

impl ConditioningLog {
    pub fn last_slot_pattern(&self) -> Vec<bool> {
        self.entries.iter().map(|e| e.last_slot_active).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Generated {
    pub clip: VideoClip,
    pub log: ConditioningLog,
}

/// Encodes endpoint frames into an instruction set.
pub fn instructions_from_frames(
    model: &Model,
    text_tokens: Vec<u32>,
    first: &Frame,
    last: Option<&Frame>,
) -> Result<InstructionSet> {
    let (h, w) = model.config().canvas();
    for f in std::iter::once(first).chain(last) {
        if (f.height(), f.width()) != (h, w) {
            return Err(Error::Shape(format!("frame is {}×{}, model canvas is {h}×{w}", f.height(), f.width())));
        }
    }
    Ok(InstructionSet {
        text_tokens,
        f_first: model.codec().encode_frame(first)?,
        f_last: last.map(|f| model.codec().encode_frame(f)).transpose()?,
    })
}

/// Samples one clip. `sched` is the training schedule; it is respaced to
/// `cfg.steps` iterations internally.
pub fn generate_clip(model: &Model, instructions: &InstructionSet, cfg: &SamplerConfig, sched: &NoiseSchedule) -> Result<Generated> {
    cfg.validate(sched.len())?;
    if cfg.tau > 0 && instructions.f_last.is_none() {
        return arg("tau > 0 needs a last-frame instruction");
    }
    let frames = model.frames();
    let sub = sched.respaced(cfg.steps)?;
    let dtype = model.dtype();
    let dev = Device::Cpu;
    let mut rng = noise::seeded(cfg.seed);

    let to_diff = |l: &FrameLatent| model.latent_to_diffusion(l);
    let first = to_diff(&instructions.f_first)?;
    let last = instructions.f_last.as_ref().map(to_diff).transpose()?;
    let with_last = compose_image_condition(&first, last.as_ref(), frames)?;
    let without_last = with_last.without_last()?;

    let dc = model.config().denoiser.clone();
    let latent_shape = (1, frames, dc.latent_channels, dc.latent_height, dc.latent_width);
    let mut z = noise::gaussian(&mut rng, latent_shape, dtype, &dev)?;

    let (with_last, without_last) = if cfg.perturb_instructions {
        let pn = noise::gaussian(&mut rng, with_last.tensor().dims(), dtype, &dev)?;
        (
            perturb_instruction(&with_last, sched, cfg.t_pert, &pn, &with_last.occupied_slots())?,
            perturb_instruction(&without_last, sched, cfg.t_pert, &pn, &[0])?,
        )
    } else {
        (with_last, without_last)
    };

    let text = model.text_context(&[instructions.text_tokens.clone(), vec![NULL_TOKEN]])?;
    let mut entries = Vec::with_capacity(cfg.steps);
    for k in 1..=cfg.steps {
        let t = cfg.steps - k + 1;
        let step = sub.model_step(t)?;
        let active = cfg.last_active(k);
        let cond = if active { &with_last } else { &without_last };
        let zc = Tensor::cat(&[&z, &cond.tensor().unsqueeze(0)?], 2)?;
        let eps = model.denoise(&Tensor::cat(&[&zc, &zc], 0)?, &[step, step], &text, Mode::Video)?;
        let eps = cfg_combine(&eps.narrow(0, 0, 1)?, &eps.narrow(0, 1, 1)?, cfg.guidance)?;
        let step_noise = if t > 1 { Some(noise::gaussian(&mut rng, latent_shape, dtype, &dev)?) } else { None };
        z = ddpm_ancestral_step(&z, &eps, t, &sub, step_noise.as_ref())?;
        entries.push(StepRecord {
            iteration: k,
            step,
            first_slot_active: true,
            last_slot_active: active,
        });
    }
    let pixels = model.decode_pixels(&z.squeeze(0)?)?;
    let clip = VideoClip::from_tensor(&pixels)?.clamped();
    if clip.data.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite(format!("sampled clip contains NaN (seed {})", cfg.seed)));
    }
    Ok(Generated {
        clip,
        log: ConditioningLog {
            tau: cfg.tau,
            steps: cfg.steps,
            guidance: cfg.guidance,
            seed: cfg.seed,
            entries,
        },
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainEntry {
    pub caption: Vec<u32>,
    #[serde(skip)]
    pub last: Option<Frame>,
    pub sampler: SamplerConfig,
}

#[derive(Debug, Clone)]
pub struct Chain {
    pub clips: Vec<Generated>,
    /// All clips joined; each boundary frame appears once.
    pub video: VideoClip,
}

/// Generates clips back to back, each starting from the final frame of
/// its predecessor. In the joined video the boundary frame is the
/// predecessor's final frame.
pub fn chain_clips(model: &Model, first_frame: &Frame, script: &[ChainEntry], sched: &NoiseSchedule) -> Result<Chain> {
    if script.is_empty() {
        return arg("chain script is empty");
    }
    let mut clips: Vec<Generated> = Vec::with_capacity(script.len());
    let mut data = Vec::new();
    let mut first = first_frame.clone();
    for (i, entry) in script.iter().enumerate() {
        let ins = instructions_from_frames(model, entry.caption.clone(), &first, entry.last.as_ref())?;
        let g = generate_clip(model, &ins, &entry.sampler, sched)?;
        let skip = if i == 0 { 0 } else { 1 };
        data.extend_from_slice(&g.clip.data[skip * g.clip.frame_len()..]);
        first = g.clip.frame(g.clip.frames - 1)?;
        clips.push(g);
    }
    let c0 = &clips[0].clip;
    let total = 1 + clips.iter().map(|g| g.clip.frames - 1).sum::<usize>();
    let video = VideoClip::new(total, c0.height, c0.width, data)?;
    Ok(Chain { clips, video })
}

/// Zero-shot editing: regenerates from edited endpoint frames and the
/// source caption. The source pixels are only used for a shape check.
pub fn edit_video(
    model: &Model,
    source: &VideoClip,
    caption: &[u32],
    edited_first: &Frame,
    edited_last: &Frame,
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
) -> Result<Generated> {
    for f in [edited_first, edited_last] {
        if (f.height(), f.width()) != (source.height, source.width) {
            return Err(Error::Shape("edited frames must match the source canvas".into()));
        }
    }
    let ins = instructions_from_frames(model, caption.to_vec(), edited_first, Some(edited_last))?;
    generate_clip(model, &ins, cfg, sched)
}
