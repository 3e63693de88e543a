//! Command-line entry point: `make-data`, `train`, `sample`, `chain`,
//! `edit` and `eval`.
//!
//! Exit codes: 0 on success, 1 on a runtime failure (a `.failed` marker is
//! left in the output directory), 2 on an argument or configuration error
//! detected before any file is written.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::archive;
use crate::conditioning::{Frame, Vocab};
use crate::error::{Error, Result};
use crate::evalkit;
use crate::model::ModelConfig;
use crate::sampler::{self, ChainEntry, SamplerConfig};
use crate::synthdata::{self, read_shard, write_shard, ClipRecord, GrammarConfig};
use crate::trainer::{self, ScheduleConfig, TrainConfig};
use crate::video::VideoClip;

/// Output root used when `--out` is absent.
pub const OUT_ENV: &str = "KFDIFF_OUT";
const FAILED_MARKER: &str = ".failed";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub seed: u64,
    pub train_count: usize,
    pub eval_count: usize,
    pub grammar: GrammarConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train_count: 2000,
            eval_count: 200,
            grammar: GrammarConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub eval_shard: PathBuf,
    pub samples: usize,
    /// τ values as fractions of the sampling steps.
    pub tau_fractions: Vec<f64>,
    pub chains: usize,
    pub chain_length: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            eval_shard: PathBuf::from("data/eval.fdsh"),
            samples: 64,
            tau_fractions: vec![0.0, 0.25, 0.5, 1.0],
            chains: 8,
            chain_length: 64,
        }
    }
}

/// Everything a run can be configured with; one TOML file with a section
/// per part.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

#[derive(Debug, Parser)]
#[command(name = "kfdiff", version, about = "Keyframe-instructed video diffusion on synthetic shapes")]
struct Cli {
    /// Output directory (defaults to $KFDIFF_OUT, then `runs`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set train.lr=3e-4`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render train and eval shards.
    MakeData {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        train_count: Option<usize>,
        #[arg(long)]
        eval_count: Option<usize>,
    },
    /// Train (or resume) a model.
    Train {
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Sample one clip.
    Sample(SampleArgs),
    /// Generate a chain of clips from a script.
    Chain {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        script: PathBuf,
    },
    /// Regenerate a clip from edited endpoint frames.
    Edit {
        #[arg(long)]
        ckpt: PathBuf,
        /// Source clip: a clip archive, or `SHARD#INDEX`.
        #[arg(long)]
        source: String,
        #[arg(long)]
        first: PathBuf,
        #[arg(long)]
        last: PathBuf,
        /// Caption; defaults to the source record's caption.
        #[arg(long)]
        caption: Option<String>,
        #[command(flatten)]
        sampling: SamplingFlags,
    },
    /// Run an evaluation suite.
    Eval {
        /// Checkpoint(s); the ablation suite takes several.
        #[arg(long, required = true)]
        ckpt: Vec<PathBuf>,
        #[arg(long, value_enum)]
        suite: Suite,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Suite {
    Adherence,
    TauSweep,
    Ablation,
    ChainDrift,
}

#[derive(Debug, Args)]
struct SamplingFlags {
    #[arg(long)]
    tau: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    guidance: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct SampleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    caption: Option<String>,
    /// First-frame instruction: a PNG, or `SHARD#INDEX` for a record's frame 0.
    #[arg(long)]
    first_frame: String,
    /// Last-frame instruction: a PNG, or `SHARD#INDEX` for a record's final frame.
    #[arg(long)]
    last_frame: Option<String>,
    #[command(flatten)]
    sampling: SamplingFlags,
    #[arg(long)]
    gif: Option<PathBuf>,
    #[arg(long)]
    grid: Option<PathBuf>,
}

/// A run whose arguments and configuration have been checked; nothing has
/// touched the filesystem yet.
struct Plan {
    out: PathBuf,
    config: RunConfig,
    command: Command,
}

fn set_dotted(root: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut parts: Vec<&str> = key.split('.').collect();
    let leaf = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::Config(format!("bad override key `{key}`")))?;
    let mut table = root;
    for p in parts {
        table = table
            .entry(p)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    table.insert(leaf.to_string(), value);
    Ok(())
}

/// Reads the config file (if any) and applies `KEY=VALUE` overrides on top.
pub fn resolve_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
            text.parse::<toml::Table>().map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| Error::Config(format!("override `{o}` is not KEY=VALUE")))?;
        set_dotted(&mut table, k.trim(), v.trim())?;
    }
    toml::Value::Table(table)
        .try_into::<RunConfig>()
        .map_err(|e| Error::Config(format!("invalid configuration: {e}")))
}

fn apply_sampling(cfg: &mut SamplerConfig, f: &SamplingFlags) {
    if let Some(v) = f.tau {
        cfg.tau = v;
    }
    if let Some(v) = f.steps {
        cfg.steps = v;
    }
    if let Some(v) = f.guidance {
        cfg.guidance = v;
    }
    if let Some(v) = f.seed {
        cfg.seed = v;
    }
}

fn plan(cli: Cli) -> Result<Plan> {
    let out = cli
        .out
        .clone()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"));
    let mut config = resolve_config(cli.config.as_deref(), &cli.overrides)?;
    match &cli.command {
        Command::MakeData {
            seed,
            train_count,
            eval_count,
        } => {
            let d = &mut config.data;
            d.seed = seed.unwrap_or(d.seed);
            d.train_count = train_count.unwrap_or(d.train_count);
            d.eval_count = eval_count.unwrap_or(d.eval_count);
            d.grammar.validate()?;
        }
        Command::Train { resume } => {
            config.model.validate()?;
            config.train.out_dir = out.clone();
            config.train.validate(config.schedule.steps)?;
            config.schedule.build()?;
            if let Some(r) = resume {
                if !r.is_file() {
                    return Err(Error::Argument(format!("checkpoint {} does not exist", r.display())));
                }
            }
        }
        Command::Sample(a) => {
            apply_sampling(&mut config.sampler, &a.sampling);
            if a.last_frame.is_none() {
                if a.sampling.tau.is_some_and(|t| t > 0) {
                    return Err(Error::Argument("--tau > 0 needs --last-frame".into()));
                }
                config.sampler.tau = 0;
            }
            config.sampler.validate(config.schedule.steps)?;
            if let Some(c) = &a.caption {
                Vocab::builtin().encode(c)?;
            }
        }
        Command::Edit { sampling, caption, .. } => {
            apply_sampling(&mut config.sampler, sampling);
            config.sampler.validate(config.schedule.steps)?;
            if let Some(c) = caption {
                Vocab::builtin().encode(c)?;
            }
        }
        Command::Chain { script, .. } => {
            config.sampler.validate(config.schedule.steps)?;
            read_script(script)?;
        }
        Command::Eval { suite, ckpt } => {
            config.sampler.validate(config.schedule.steps)?;
            if *suite != Suite::Ablation && ckpt.len() != 1 {
                return Err(Error::Argument("this suite takes exactly one --ckpt".into()));
            }
            if config.eval.samples == 0 {
                return Err(Error::Config("eval.samples must be positive".into()));
            }
            if *suite == Suite::ChainDrift && (config.eval.chains < 2 || config.eval.chain_length == 0) {
                return Err(Error::Config("chain drift needs eval.chains >= 2 and eval.chain_length >= 1".into()));
            }
        }
    }
    Ok(Plan {
        out,
        config,
        command: cli.command,
    })
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn dispatch(args: Vec<OsString>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let plan = match plan(cli) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    let marker = plan.out.join(FAILED_MARKER);
    let result = std::fs::create_dir_all(&plan.out)
        .map_err(Error::from)
        .and_then(|_| {
            let _ = std::fs::remove_file(&marker);
            execute(&plan)
        });
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            let _ = std::fs::write(&marker, format!("{e}\n"));
            1
        }
    }
}

fn echo_config(plan: &Plan, name: &str) -> Result<()> {
    let text = toml::to_string_pretty(&plan.config).map_err(|e| Error::Config(e.to_string()))?;
    archive::write_atomic(&plan.out.join(format!("{name}.resolved.toml")), text.as_bytes())
}

fn execute(plan: &Plan) -> Result<()> {
    let cfg = &plan.config;
    match &plan.command {
        Command::MakeData { .. } => {
            echo_config(plan, "make-data")?;
            let d = &cfg.data;
            let train = synthdata::generate(&d.grammar, crate::noise::derive_seed(d.seed, 0), d.train_count);
            write_shard(&train, &plan.out.join("train.fdsh"))?;
            let eval = synthdata::generate(&d.grammar, crate::noise::derive_seed(d.seed, 1), d.eval_count);
            write_shard(&eval, &plan.out.join("eval.fdsh"))?;
            archive::write_atomic(&plan.out.join("vocab.txt"), Vocab::builtin().to_text().as_bytes())?;
            println!("wrote {} train and {} eval clips to {}", train.len(), eval.len(), plan.out.display());
        }
        Command::Train { resume } => {
            echo_config(plan, "train")?;
            let outcome = trainer::run_training(&cfg.model, &cfg.train, &cfg.schedule, resume.as_deref())?;
            if let (Some(a), Some(b)) = (outcome.metrics.first(), outcome.metrics.last()) {
                println!("loss {:.5} -> {:.5} over {} iterations", a.loss, b.loss, outcome.metrics.len());
            }
            println!("checkpoint {}", outcome.checkpoint.display());
        }
        Command::Sample(a) => {
            echo_config(plan, "sample")?;
            let (model, sched) = trainer::load_model(&a.ckpt)?;
            let (first, rec_caption) = read_frame(&a.first_frame, FrameEnd::First)?;
            let last = a.last_frame.as_deref().map(|s| read_frame(s, FrameEnd::Last)).transpose()?;
            let tokens = match (&a.caption, rec_caption) {
                (Some(c), _) => Vocab::builtin().encode(c)?,
                (None, Some(c)) => c,
                (None, None) => vec![crate::conditioning::NULL_TOKEN],
            };
            let ins = sampler::instructions_from_frames(&model, tokens, &first, last.as_ref().map(|l| &l.0))?;
            let g = sampler::generate_clip(&model, &ins, &cfg.sampler, &sched)?;
            write_outputs(&plan.out, "sample", &g.clip, a.gif.as_deref(), a.grid.as_deref())?;
            sampler::write_log_json(&plan.out.join("conditioning_log.json"), &g.log)?;
        }
        Command::Chain { ckpt, script } => {
            echo_config(plan, "chain")?;
            let (model, sched) = trainer::load_model(ckpt)?;
            let s = read_script(script)?;
            let base = script.parent().unwrap_or(Path::new("."));
            let (first, _) = read_frame(&resolve_rel(base, &s.first_frame), FrameEnd::First)?;
            let vocab = Vocab::builtin();
            let mut entries = Vec::with_capacity(s.clip.len());
            for (i, c) in s.clip.iter().enumerate() {
                let last = c.last_frame.as_ref().map(|p| read_frame(&resolve_rel(base, p), FrameEnd::Last)).transpose()?;
                let mut sc = cfg.sampler.clone();
                sc.tau = c.tau.unwrap_or(if last.is_some() { sc.tau } else { 0 });
                sc.seed = c.seed.unwrap_or_else(|| crate::noise::derive_seed(cfg.sampler.seed, i as u64));
                entries.push(ChainEntry {
                    caption: vocab.encode(&c.caption)?,
                    last: last.map(|l| l.0),
                    sampler: sc,
                });
            }
            let chain = sampler::chain_clips(&model, &first, &entries, &sched)?;
            write_outputs(&plan.out, "chain", &chain.video, None, None)?;
            let logs: Vec<_> = chain.clips.iter().map(|g| &g.log).collect();
            sampler::write_log_json(&plan.out.join("chain_log.json"), &logs)?;
            println!("chain of {} clips, {} frames", chain.clips.len(), chain.video.frames);
        }
        Command::Edit {
            ckpt,
            source,
            first,
            last,
            caption,
            ..
        } => {
            echo_config(plan, "edit")?;
            let (model, sched) = trainer::load_model(ckpt)?;
            let (src, src_caption) = read_source(source)?;
            let tokens = match (caption, src_caption) {
                (Some(c), _) => Vocab::builtin().encode(c)?,
                (None, Some(c)) => c,
                (None, None) => return Err(Error::Argument("--caption is required for archive sources".into())),
            };
            let f = read_png(first)?;
            let l = read_png(last)?;
            let g = sampler::edit_video(&model, &src, &tokens, &f, &l, &cfg.sampler, &sched)?;
            write_outputs(&plan.out, "edit", &g.clip, None, None)?;
            sampler::write_log_json(&plan.out.join("conditioning_log.json"), &g.log)?;
        }
        Command::Eval { ckpt, suite } => {
            echo_config(plan, "eval")?;
            run_eval(plan, ckpt, *suite)?;
        }
    }
    Ok(())
}

fn write_outputs(out: &Path, stem: &str, clip: &VideoClip, gif: Option<&Path>, grid: Option<&Path>) -> Result<()> {
    let gif = gif.map(Path::to_path_buf).unwrap_or_else(|| out.join(format!("{stem}.gif")));
    let grid = grid.map(Path::to_path_buf).unwrap_or_else(|| out.join(format!("{stem}_grid.png")));
    sampler::write_gif(&gif, clip, 4)?;
    sampler::write_grid_png(&grid, clip, 2)?;
    sampler::write_clip_archive(&out.join(format!("{stem}.kfd")), clip, &serde_json::json!({ "kind": "clip" }))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ChainScript {
    first_frame: String,
    clip: Vec<ScriptClip>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScriptClip {
    caption: String,
    last_frame: Option<String>,
    tau: Option<usize>,
    seed: Option<u64>,
}

fn read_script(path: &Path) -> Result<ChainScript> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Argument(format!("cannot read script {}: {e}", path.display())))?;
    let s: ChainScript = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if s.clip.is_empty() {
        return Err(Error::Config("chain script lists no clips".into()));
    }
    let vocab = Vocab::builtin();
    for c in &s.clip {
        vocab.encode(&c.caption)?;
        if c.tau.is_some_and(|t| t > 0) && c.last_frame.is_none() {
            return Err(Error::Config("a clip with tau > 0 needs last_frame".into()));
        }
    }
    Ok(s)
}

fn resolve_rel(base: &Path, p: &str) -> String {
    if Path::new(p).is_absolute() || p.contains('#') && !Path::new(p.split('#').next().unwrap_or("")).is_relative() {
        p.to_string()
    } else {
        base.join(p).to_string_lossy().into_owned()
    }
}

#[derive(Clone, Copy)]
enum FrameEnd {
    First,
    Last,
}

fn split_record(spec: &str) -> Option<(&str, usize)> {
    let (path, idx) = spec.rsplit_once('#')?;
    Some((path, idx.parse().ok()?))
}

fn shard_record(path: &str, index: usize) -> Result<ClipRecord> {
    let mut recs = read_shard(Path::new(path))?;
    if index >= recs.len() {
        return Err(Error::Argument(format!("{path} has {} records, asked for #{index}", recs.len())));
    }
    Ok(recs.swap_remove(index))
}

/// A PNG frame, or an endpoint frame of a shard record (`SHARD#INDEX`),
/// with that record's caption.
fn read_frame(spec: &str, end: FrameEnd) -> Result<(Frame, Option<Vec<u32>>)> {
    match split_record(spec) {
        Some((path, index)) => {
            let r = shard_record(path, index)?;
            let v = VideoClip::from_record(&r);
            let k = match end {
                FrameEnd::First => 0,
                FrameEnd::Last => v.frames - 1,
            };
            Ok((v.frame(k)?, Some(r.caption)))
        }
        None => Ok((read_png(Path::new(spec))?, None)),
    }
}

fn read_png(path: &Path) -> Result<Frame> {
    let img = image::open(path)
        .map_err(|e| Error::Argument(format!("cannot read image {}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0f32; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = p.0[c] as f32 / 255.0;
        }
    }
    Frame::new(candle_core::Tensor::from_vec(data, (3, h, w), &candle_core::Device::Cpu)?)
}

fn read_source(spec: &str) -> Result<(VideoClip, Option<Vec<u32>>)> {
    match split_record(spec) {
        Some((path, index)) => {
            let r = shard_record(path, index)?;
            Ok((VideoClip::from_record(&r), Some(r.caption)))
        }
        None => {
            let ar = archive::read(Path::new(spec))?;
            let t = ar
                .tensors
                .get("clip")
                .ok_or_else(|| Error::Argument(format!("{spec} holds no `clip` tensor")))?;
            Ok((VideoClip::from_tensor(t)?, None))
        }
    }
}

#[derive(Serialize)]
struct AdherenceReport {
    samples: usize,
    first_frame_psnr_mean: f64,
    first_frame_psnr_min: f64,
    motion: evalkit::MotionReport,
    toy_frechet: evalkit::FrechetDistance,
    feature_version: u32,
}

#[derive(Serialize)]
struct AblationArm {
    checkpoint: PathBuf,
    ablation: trainer::Ablation,
    toy_frechet: evalkit::FrechetDistance,
}

fn run_eval(plan: &Plan, ckpts: &[PathBuf], suite: Suite) -> Result<()> {
    let cfg = &plan.config;
    let eval = read_shard(&cfg.eval.eval_shard)?;
    if eval.is_empty() {
        return Err(Error::Config("evaluation shard holds no records".into()));
    }
    let reference: Vec<VideoClip> = eval.iter().map(VideoClip::from_record).collect();
    let n = cfg.eval.samples;
    let report_path = plan.out.join(format!("eval_{}.json", suite.to_possible_value().expect("named").get_name()));
    let json = match suite {
        Suite::Adherence => {
            let (model, sched) = trainer::load_model(&ckpts[0])?;
            // text-only motion: no last-frame instruction
            let sc = SamplerConfig { tau: 0, ..cfg.sampler.clone() };
            let clips = evalkit::generate_set(&model, &sched, &eval, n, &sc)?;
            let psnrs = evalkit::first_frame_adherence(&clips, &eval)?;
            let pairs: Vec<_> = clips.iter().enumerate().map(|(i, c)| (c.clone(), eval[i % eval.len()].caption.clone())).collect();
            let motion = evalkit::motion_accuracy(&pairs, &Vocab::builtin())?;
            let rep = AdherenceReport {
                samples: n,
                first_frame_psnr_mean: psnrs.iter().sum::<f64>() / n as f64,
                first_frame_psnr_min: psnrs.iter().copied().fold(f64::INFINITY, f64::min),
                motion,
                toy_frechet: evalkit::toy_frechet(&clips, &reference)?,
                feature_version: evalkit::FEATURE_VERSION,
            };
            println!(
                "first-frame PSNR {:.2} dB, motion accuracy {:.3} ({} excluded)",
                rep.first_frame_psnr_mean, rep.motion.accuracy, rep.motion.excluded
            );
            serde_json::to_value(&rep)?
        }
        Suite::TauSweep => {
            let (model, sched) = trainer::load_model(&ckpts[0])?;
            let s = cfg.sampler.steps;
            let mut taus: Vec<usize> = cfg.eval.tau_fractions.iter().map(|f| ((f * s as f64).round() as usize).min(s)).collect();
            taus.dedup();
            let sweep = evalkit::tau_sweep(&model, &sched, &eval, &taus, &cfg.sampler, n)?;
            evalkit::write_tau_sweep(&plan.out, &sweep)?;
            println!("spearman(tau, last-frame mse) = {:.3}", sweep.spearman_of_means);
            serde_json::to_value(&sweep)?
        }
        Suite::Ablation => {
            let mut arms = Vec::with_capacity(ckpts.len());
            for p in ckpts {
                let meta = archive::read(p)?.meta;
                let ablation: trainer::Ablation = serde_json::from_value(meta["train"]["ablation"].clone())?;
                let (model, sched) = trainer::load_model(p)?;
                let clips = evalkit::generate_set(&model, &sched, &eval, eval.len(), &cfg.sampler)?;
                let fd = evalkit::toy_frechet(&clips, &reference)?;
                println!("{ablation:?}: toy-frechet {:.4}", fd.value);
                arms.push(AblationArm {
                    checkpoint: p.clone(),
                    ablation,
                    toy_frechet: fd,
                });
            }
            serde_json::to_value(&arms)?
        }
        Suite::ChainDrift => {
            let (model, sched) = trainer::load_model(&ckpts[0])?;
            let d = evalkit::chain_drift(&model, &sched, &eval, cfg.eval.chains, cfg.eval.chain_length, &cfg.sampler)?;
            println!("toy-frechet growth first->last clip: {:.3}", d.growth);
            serde_json::to_value(&d)?
        }
    };
    archive::write_atomic(&report_path, serde_json::to_string_pretty(&json)?.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_take_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "[train]\nlr = 0.5\nbatch_size = 4\n").unwrap();
        let c = resolve_config(Some(&p), &["train.lr=3e-4".into(), "sampler.tau=7".into()]).unwrap();
        assert_eq!(c.train.lr, 3e-4);
        assert_eq!(c.train.batch_size, 4);
        assert_eq!(c.sampler.tau, 7);
        assert!(resolve_config(None, &["train.nonsense=1".into()]).is_err());
        assert!(resolve_config(None, &["train.lr".into()]).is_err());
    }

    #[test]
    fn string_overrides_fall_back_to_text() {
        let c = resolve_config(None, &["eval.eval_shard=some/where.fdsh".into()]).unwrap();
        assert_eq!(c.eval.eval_shard, PathBuf::from("some/where.fdsh"));
    }

    #[test]
    fn default_config_roundtrips_through_toml() {
        let c = RunConfig::default();
        let text = toml::to_string_pretty(&c).unwrap();
        assert_eq!(toml::from_str::<RunConfig>(&text).unwrap(), c);
    }
}
