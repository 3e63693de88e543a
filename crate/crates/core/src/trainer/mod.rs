//! Training loop: instruction sampling, perturbation, channel
//! concatenation, ε-loss, joint image/video batches and checkpointing.

pub mod optim;

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::{Rng as _, RngCore};
use serde::{Deserialize, Serialize};

use crate::archive;
use crate::conditioning::{compose_image_condition, sample_training_instructions, Codec, CodecKind, ImageCondition, LearnedCodec, NULL_TOKEN};
use crate::denoiser::Mode;
use crate::diffusion::{eps_loss, forward_diffuse_batch, make_schedule, perturb_instruction, BetaKind, NoiseSchedule};
use crate::error::{arg, Error, Result};
use crate::model::{Model, ModelConfig};
use crate::noise::{self, Rng, RngState};
use crate::synthdata::{read_shard, ClipRecord};
use optim::{AdamW, AdamWConfig};

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Video,
    Image,
}

/// Image batches on every `period`-th iteration (1-based), video otherwise.
pub fn modality_for_iteration(i: u64, period: u64) -> Result<Modality> {
    if period == 0 {
        return Err(Error::Config("image_mix_period must be at least 1".into()));
    }
    if i == 0 {
        return arg("iterations are counted from 1");
    }
    Ok(if i % period == 0 { Modality::Image } else { Modality::Video })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.steps, self.beta_start, self.beta_end, BetaKind::Linear)
    }
}

/// Arms of the instruction ablation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    None,
    /// Last-frame slot always zero.
    NoLastFrame,
    /// Null text always.
    NoText,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Samples per forward/backward pass; gradients of the micro-batches
    /// are accumulated into one update per batch.
    pub micro_batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub total_iterations: u64,
    pub eta: f64,
    pub text_drop: f64,
    pub t_pert: usize,
    pub perturb_instructions: bool,
    pub image_mix_period: u64,
    pub checkpoint_every: u64,
    pub seed: u64,
    pub ablation: Ablation,
    /// Frames used to fit a learned codec before training (ignored for the
    /// analytic codec).
    pub codec_frames: usize,
    pub train_shard: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            micro_batch: 2,
            lr: 1e-4,
            weight_decay: 0.01,
            total_iterations: 20_000,
            eta: 0.25,
            text_drop: 0.1,
            t_pert: 100,
            perturb_instructions: true,
            image_mix_period: 8,
            checkpoint_every: 1000,
            seed: 0,
            ablation: Ablation::None,
            codec_frames: 1024,
            train_shard: PathBuf::from("data/train.fdsh"),
            out_dir: PathBuf::from("runs/train"),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, schedule_steps: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.image_mix_period == 0 {
            return bad("image_mix_period must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.eta) || !(0.0..=1.0).contains(&self.text_drop) {
            return bad("eta and text_drop must lie in [0, 1]".into());
        }
        if self.batch_size == 0 || self.micro_batch == 0 {
            return bad("batch_size and micro_batch must be positive".into());
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be positive".into());
        }
        if self.t_pert == 0 || self.t_pert > schedule_steps {
            return bad(format!("t_pert must lie in [1, {schedule_steps}]"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive".into());
        }
        Ok(())
    }

    fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..Default::default()
        }
    }
}

pub struct TrainState {
    pub model: Model,
    pub optimizer: AdamW,
    pub iteration: u64,
    pub rng: Rng,
    pub sched: NoiseSchedule,
    pub config: TrainConfig,
    pub schedule: ScheduleConfig,
}

impl TrainState {
    pub fn new(model: Model, config: TrainConfig, schedule: ScheduleConfig) -> Result<Self> {
        let sched = schedule.build()?;
        config.validate(sched.len())?;
        let optimizer = AdamW::new(model.params(), config.optimizer())?;
        Ok(Self {
            rng: noise::seeded(noise::derive_seed(config.seed, 2)),
            model,
            optimizer,
            iteration: 0,
            sched,
            config,
            schedule,
        })
    }
}

/// A training batch: clips `(B, F, 3, H, W)` for video iterations, single
/// frames `(B, 1, 3, H, W)` for image iterations.
#[derive(Debug, Clone)]
pub struct Batch {
    pub modality: Modality,
    pub pixels: Tensor,
    pub captions: Vec<Vec<u32>>,
    /// Seed of the rng that drew this batch and its noise.
    pub seed: u64,
}

fn record_pixels(r: &ClipRecord, frame: Option<usize>) -> Vec<f32> {
    let n = 3 * r.height * r.width;
    let src = match frame {
        Some(k) => &r.pixels[k * n..(k + 1) * n],
        None => &r.pixels[..],
    };
    src.iter().map(|&p| p as f32 / 255.0).collect()
}

/// Draws a batch of the given modality. Image batches take one random frame
/// of a random clip with the clip's caption.
pub fn draw_batch(records: &[ClipRecord], modality: Modality, batch_size: usize, seed: u64) -> Result<Batch> {
    if records.is_empty() {
        return arg("no training records");
    }
    let mut rng = noise::seeded(seed);
    let r0 = &records[0];
    let mut data = Vec::new();
    let mut captions = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let r = &records[rng.random_range(0..records.len())];
        if (r.frames, r.height, r.width) != (r0.frames, r0.height, r0.width) {
            return Err(Error::Shape("records in a shard must share dimensions".into()));
        }
        let frame = match modality {
            Modality::Video => None,
            Modality::Image => Some(rng.random_range(0..r.frames)),
        };
        data.extend(record_pixels(r, frame));
        captions.push(r.caption.clone());
    }
    let frames = if modality == Modality::Video { r0.frames } else { 1 };
    Ok(Batch {
        modality,
        pixels: Tensor::from_vec(data, (batch_size, frames, 3, r0.height, r0.width), &Device::Cpu)?,
        captions,
        seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub iteration: u64,
    pub loss: f64,
    pub modality: Modality,
    pub lr: f64,
    pub steps: Vec<usize>,
    pub last_dropped: usize,
    pub text_dropped: usize,
    pub batch_seed: u64,
}

/// Everything the denoiser sees for one batch, before the forward pass.
struct Prepared {
    input: Tensor,
    eps: Tensor,
    steps: Vec<usize>,
    tokens: Vec<Vec<u32>>,
    last_dropped: usize,
    text_dropped: usize,
}

fn prepare(state: &TrainState, batch: &Batch, hook: &mut dyn FnMut(&ImageCondition)) -> Result<Prepared> {
    let model = &state.model;
    let cfg = &state.config;
    let (b, f, _, h, w) = batch.pixels.dims5()?;
    let dtype = model.dtype();
    let dev = Device::Cpu;
    let mut rng = noise::seeded(batch.seed);
    let z0 = model.encode_pixels(&batch.pixels.reshape((b * f, 3, h, w))?)?;
    let (c, lh, lw) = (z0.dim(1)?, z0.dim(2)?, z0.dim(3)?);
    let z0 = z0.reshape((b, f, c, lh, lw))?;
    let t_max = state.sched.len();
    let steps: Vec<usize> = (0..b).map(|_| rng.random_range(1..=t_max)).collect();
    let eps = noise::gaussian(&mut rng, z0.dims(), dtype, &dev)?;
    let zt = forward_diffuse_batch(&z0, &steps, &eps, &state.sched)?;

    let eta = if cfg.ablation == Ablation::NoLastFrame { 1.0 } else { cfg.eta };
    let text_drop = if cfg.ablation == Ablation::NoText { 1.0 } else { cfg.text_drop };
    let mut conds = Vec::with_capacity(b);
    let mut tokens = Vec::with_capacity(b);
    let (mut last_dropped, mut text_dropped) = (0, 0);
    for i in 0..b {
        let (cond, toks) = match batch.modality {
            Modality::Video => {
                let (ins, draw) = sample_training_instructions(
                    &batch.pixels.get(i)?,
                    &batch.captions[i],
                    model.codec(),
                    &mut rng,
                    eta,
                    text_drop,
                )?;
                last_dropped += draw.last_dropped as usize;
                text_dropped += draw.text_dropped as usize;
                let first = model.latent_to_diffusion(&ins.f_first)?;
                let last = ins.f_last.as_ref().map(|l| model.latent_to_diffusion(l)).transpose()?;
                (compose_image_condition(&first, last.as_ref(), f)?, ins.text_tokens)
            }
            Modality::Image => {
                let dropped = rng.random::<f64>() < text_drop;
                text_dropped += dropped as usize;
                let frame = crate::conditioning::FrameLatent::new(z0.get(i)?.get(0)?)?;
                let toks = if dropped { vec![NULL_TOKEN] } else { batch.captions[i].clone() };
                (ImageCondition::single(&frame)?, toks)
            }
        };
        let cond = if cfg.perturb_instructions {
            let pn = noise::gaussian(&mut rng, cond.tensor().dims(), dtype, &dev)?;
            perturb_instruction(&cond, &state.sched, cfg.t_pert, &pn, &cond.occupied_slots())?
        } else {
            cond
        };
        hook(&cond);
        conds.push(cond.tensor().clone());
        tokens.push(toks);
    }
    let input = Tensor::cat(&[&zt, &Tensor::stack(&conds, 0)?], 2)?;
    if input.dim(2)? != 2 * c {
        return Err(Error::Shape(format!("denoiser input has {} channels, expected {}", input.dim(2)?, 2 * c)));
    }
    Ok(Prepared {
        input,
        eps,
        steps,
        tokens,
        last_dropped,
        text_dropped,
    })
}

/// Batch loss and its gradient, accumulated over micro-batches.
fn batch_gradients(
    state: &TrainState,
    batch: &Batch,
    hook: &mut dyn FnMut(&ImageCondition),
) -> Result<(f64, BTreeMap<String, Tensor>, Prepared)> {
    let p = prepare(state, batch, hook)?;
    let mode = match batch.modality {
        Modality::Video => Mode::Video,
        Modality::Image => Mode::Image,
    };
    let b = p.steps.len();
    let params = state.model.params();
    let mut total = 0.0;
    let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
    for start in (0..b).step_by(state.config.micro_batch) {
        let n = state.config.micro_batch.min(b - start);
        let text = state.model.text_context(&p.tokens[start..start + n])?;
        let eps_hat = state.model.denoise(&p.input.narrow(0, start, n)?, &p.steps[start..start + n], &text, mode)?;
        // chunk means weighted by their share give the full-batch mean
        let loss = eps_loss(&eps_hat, &p.eps.narrow(0, start, n)?)?.affine(n as f64 / b as f64, 0.0)?;
        total += loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        for (name, g) in AdamW::gradients(params, &loss.backward()?) {
            let sum = match grads.remove(&name) {
                Some(acc) => (acc + g)?,
                None => g,
            };
            grads.insert(name, sum);
        }
    }
    Ok((total, grads, p))
}

/// One optimizer update on `batch`, which must have the modality scheduled
/// for the next iteration. `hook` sees every composed (and perturbed)
/// image condition.
pub fn train_step(state: &mut TrainState, batch: &Batch, hook: &mut dyn FnMut(&ImageCondition)) -> Result<StepMetrics> {
    let iteration = state.iteration + 1;
    let expected = modality_for_iteration(iteration, state.config.image_mix_period)?;
    if batch.modality != expected {
        return arg(format!("iteration {iteration} expects a {expected:?} batch, got {:?}", batch.modality));
    }
    let (value, grads, p) = batch_gradients(state, batch, hook)?;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss {value} at iteration {iteration} (batch seed {}, steps {:?})",
            batch.seed, p.steps
        )));
    }
    state.optimizer.apply(state.model.params(), &grads)?;
    state.iteration = iteration;
    Ok(StepMetrics {
        iteration,
        loss: value,
        modality: batch.modality,
        lr: state.config.lr,
        steps: p.steps,
        last_dropped: p.last_dropped,
        text_dropped: p.text_dropped,
        batch_seed: batch.seed,
    })
}

/// Draws the next scheduled batch from the state's rng and trains on it.
pub fn advance(state: &mut TrainState, records: &[ClipRecord], hook: &mut dyn FnMut(&ImageCondition)) -> Result<StepMetrics> {
    let modality = modality_for_iteration(state.iteration + 1, state.config.image_mix_period)?;
    let seed = state.rng.next_u64();
    let batch = draw_batch(records, modality, state.config.batch_size, seed)?;
    train_step(state, &batch, hook)
}

/// Summed gradient norms per parameter over `iterations` scheduled batches,
/// without updating anything.
pub fn accumulated_grad_norms(state: &mut TrainState, records: &[ClipRecord], iterations: u64) -> Result<BTreeMap<String, f64>> {
    let mut norms: BTreeMap<String, f64> = state.model.params().iter().map(|(k, _)| (k.clone(), 0.0)).collect();
    let start = state.iteration;
    for i in 1..=iterations {
        let modality = modality_for_iteration(start + i, state.config.image_mix_period)?;
        let batch = draw_batch(records, modality, state.config.batch_size, state.rng.next_u64())?;
        let (_, grads, _) = batch_gradients(state, &batch, &mut |_| {})?;
        for (name, g) in grads {
            let n = g.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?.sqrt();
            *norms.get_mut(&name).expect("known parameter") += n;
        }
    }
    Ok(norms)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    kind: String,
    version: u32,
    iteration: u64,
    optimizer_steps: u64,
    rng: RngState,
    model: ModelConfig,
    train: TrainConfig,
    schedule: ScheduleConfig,
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let meta = CheckpointMeta {
        kind: "checkpoint".into(),
        version: CHECKPOINT_VERSION,
        iteration: state.iteration,
        optimizer_steps: state.optimizer.steps(),
        rng: RngState::capture(&state.rng),
        model: state.model.config().clone(),
        train: state.config.clone(),
        schedule: state.schedule.clone(),
    };
    let mut tensors = state.model.params().snapshot()?;
    tensors.extend(state.model.codec_tensors()?);
    for (k, v) in state.optimizer.state() {
        tensors.insert(format!("adam.{k}"), v);
    }
    archive::write(path, &serde_json::to_value(&meta)?, &tensors)
}

/// Restores a full training state. Parameters must be finite and match the
/// recorded configuration exactly.
pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let ar = archive::read(path)?;
    let meta: CheckpointMeta = serde_json::from_value(ar.meta.clone())?;
    if meta.kind != "checkpoint" || meta.version != CHECKPOINT_VERSION {
        return Err(Error::Format {
            offset: 0,
            msg: format!("not a version {CHECKPOINT_VERSION} checkpoint"),
        });
    }
    let mut model = Model::init(&meta.model, DType::F32, 0)?;
    model.load_tensors(&ar.tensors)?;
    if !model.params().all_finite()? {
        return Err(Error::NonFinite(format!("checkpoint {} holds non-finite weights", path.display())));
    }
    let mut state = TrainState::new(model, meta.train, meta.schedule)?;
    let moments: BTreeMap<String, Tensor> = ar
        .tensors
        .iter()
        .filter_map(|(k, v)| k.strip_prefix("adam.").map(|n| (n.to_string(), v.clone())))
        .collect();
    state.optimizer.restore(meta.optimizer_steps, &moments)?;
    state.iteration = meta.iteration;
    state.rng = meta.rng.restore()?;
    Ok(state)
}

/// Loads only the model from a checkpoint.
pub fn load_model(path: &Path) -> Result<(Model, NoiseSchedule)> {
    let ar = archive::read(path)?;
    let meta: CheckpointMeta = serde_json::from_value(ar.meta)?;
    let mut model = Model::init(&meta.model, DType::F32, 0)?;
    model.load_tensors(&ar.tensors)?;
    Ok((model, meta.schedule.build()?))
}

pub fn checkpoint_path(dir: &Path, iteration: u64) -> PathBuf {
    dir.join(format!("ckpt-{iteration:06}.kfd"))
}

fn fit_codec(model: Model, cfg: &TrainConfig, records: &[ClipRecord]) -> Result<Model> {
    if model.config().codec != CodecKind::Learned {
        return Ok(model);
    }
    let codec_cfg = model.config().learned_codec.clone().unwrap_or_default();
    let mut rng = noise::seeded(noise::derive_seed(cfg.seed, 3));
    let r0 = &records[0];
    let mut data = Vec::new();
    for _ in 0..cfg.codec_frames.max(1) {
        let r = &records[rng.random_range(0..records.len())];
        data.extend(record_pixels(r, Some(rng.random_range(0..r.frames))));
    }
    let frames = Tensor::from_vec(data, (cfg.codec_frames.max(1), 3, r0.height, r0.width), &Device::Cpu)?;
    let (codec, _) = LearnedCodec::train(&codec_cfg, &frames)?;
    model.with_codec(Codec::Learned(codec))
}

pub struct RunOutcome {
    pub checkpoint: PathBuf,
    pub metrics: Vec<StepMetrics>,
}

/// Runs (or resumes) training, writing checkpoints every
/// `checkpoint_every` iterations and at the end, and appending one JSON
/// line per iteration to `metrics.jsonl`.
pub fn run_training(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    schedule: &ScheduleConfig,
    resume: Option<&Path>,
) -> Result<RunOutcome> {
    model_cfg.validate()?;
    let sched = schedule.build()?;
    cfg.validate(sched.len())?;
    if !cfg.train_shard.is_file() {
        return Err(Error::Config(format!("training shard {} does not exist", cfg.train_shard.display())));
    }
    let records = read_shard(&cfg.train_shard)?;
    if records.is_empty() {
        return Err(Error::Config("training shard holds no records".into()));
    }
    let (canvas_h, canvas_w) = model_cfg.canvas();
    if (records[0].height, records[0].width, records[0].frames) != (canvas_h, canvas_w, model_cfg.denoiser.frame_count) {
        return Err(Error::Config("shard clips do not match the model's frame count and canvas".into()));
    }
    std::fs::create_dir_all(&cfg.out_dir)?;

    let mut state = match resume {
        Some(p) => {
            let mut s = load_checkpoint(p)?;
            // the resumed run may extend the horizon or move outputs
            s.config.total_iterations = cfg.total_iterations;
            s.config.out_dir = cfg.out_dir.clone();
            s.config.checkpoint_every = cfg.checkpoint_every;
            s
        }
        None => {
            let model = Model::init(model_cfg, DType::F32, noise::derive_seed(cfg.seed, 1))?;
            let model = fit_codec(model, cfg, &records)?;
            TrainState::new(model, cfg.clone(), schedule.clone())?
        }
    };

    let mut last = checkpoint_path(&cfg.out_dir, state.iteration);
    if resume.is_none() {
        save_checkpoint(&state, &last)?;
    }
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(cfg.out_dir.join("metrics.jsonl"))?;
    let mut metrics = Vec::new();
    while state.iteration < cfg.total_iterations {
        let m = advance(&mut state, &records, &mut |_| {})?;
        writeln!(log, "{}", serde_json::to_string(&m)?)?;
        if m.iteration % cfg.checkpoint_every == 0 || m.iteration == cfg.total_iterations {
            last = checkpoint_path(&cfg.out_dir, m.iteration);
            save_checkpoint(&state, &last)?;
        }
        metrics.push(m);
    }
    log.flush()?;
    Ok(RunOutcome { checkpoint: last, metrics })
}
