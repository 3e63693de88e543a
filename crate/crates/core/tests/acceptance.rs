//! Acceptance criteria 1–9. Each criterion prints one line:
//! `[PASS]`, `[FAIL]` or `[NOT RUN]` followed by its measurements.
//!
//! Runs without the libtest harness so the lines always reach stdout.
//! Criteria 5, 6 and the drift part of 7 need the full desk training run
//! and only run when asked for (`cargo test --release --test acceptance
//! -- --ignored`, or `--include-ignored` for everything). Set
//! `KFDIFF_DESK_DIR` to keep the trained checkpoints between invocations.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::Rng as _;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use kfdiff::conditioning::{compose_image_condition, sample_training_instructions, Codec, Frame, FrameLatent, TextContext, Vocab};
use kfdiff::denoiser::{Denoiser, DenoiserConfig, Mode};
use kfdiff::diffusion::{ddpm_ancestral_step, forward_diffuse, make_schedule, BetaKind, NoiseSchedule};
use kfdiff::evalkit::{self, frechet, GaussianStats};
use kfdiff::model::{Model, ModelConfig};
use kfdiff::noise;
use kfdiff::sampler::{self, cfg_combine, ChainEntry, SamplerConfig};
use kfdiff::synthdata::{self, encode_shard, isolated_tracks, read_shard, render_clip, sample_scene, write_shard, GrammarConfig};
use kfdiff::trainer::{self, Ablation, ScheduleConfig, TrainConfig};
use kfdiff::video::VideoClip;

/// Collected checks for one criterion.
struct Criterion {
    id: u8,
    name: &'static str,
    checks: Vec<(String, bool)>,
}

impl Criterion {
    fn new(id: u8, name: &'static str) -> Self {
        Self { id, name, checks: Vec::new() }
    }

    fn check(&mut self, what: impl Into<String>, ok: bool) {
        self.checks.push((what.into(), ok));
    }

    fn passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|(_, ok)| *ok)
    }

    fn details(&self) -> String {
        self.checks
            .iter()
            .map(|(w, ok)| if *ok { w.clone() } else { format!("FAILED {w}") })
            .collect::<Vec<_>>()
            .join("; ")
    }

    fn report(&self) -> bool {
        let tag = if self.passed() { "PASS" } else { "FAIL" };
        println!("[{tag}] criterion {} {}: {}", self.id, self.name, self.details());
        self.passed()
    }
}

fn schedule() -> NoiseSchedule {
    make_schedule(1000, 1e-4, 0.02, BetaKind::Linear).unwrap()
}

fn values(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    values(a).iter().zip(values(b)).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn flat_frame(level: f32, h: usize, w: usize) -> Frame {
    let data: Vec<f32> = (0..3 * h * w).map(|i| (level + 0.013 * (i % 11) as f32).min(1.0)).collect();
    Frame::new(Tensor::from_vec(data, (3, h, w), &Device::Cpu).unwrap()).unwrap()
}

fn exact_math() -> Criterion {
    let mut c = Criterion::new(1, "exact math");
    let dev = Device::Cpu;
    let s = schedule();

    let mut prod = 1.0;
    let mut worst: f64 = 0.0;
    for t in 1..=1000 {
        prod *= 1.0 - s.beta(t).unwrap();
        worst = worst.max((s.alpha_bar(t).unwrap() - prod).abs() / prod);
    }
    let ends = (s.beta(1).unwrap() - 1e-4).abs() < 1e-15 && (s.beta(1000).unwrap() - 0.02).abs() < 1e-15;
    let r = s.respaced(50).unwrap();
    let kept: Vec<usize> = (1..=50).map(|k| r.model_step(k).unwrap()).collect();
    let kept_ok = kept == (0..50).map(|i| 1 + 20 * i).collect::<Vec<_>>();
    let respaced_ab = (1..=50).all(|k| (r.alpha_bar(k).unwrap() - s.alpha_bar(kept[k - 1]).unwrap()).abs() <= 1e-12 * s.alpha_bar(kept[k - 1]).unwrap());
    c.check(format!("schedule cumulative product rel err {worst:.1e}"), worst < 1e-12 && ends);
    c.check("respaced to 50 keeps steps 1, 21, …, 981 with equal alpha-bar", kept_ok && respaced_ab);

    let mut rng = noise::seeded(100);
    let g = |rng: &mut noise::Rng| noise::gaussian(rng, (3, 4, 4), DType::F64, &dev).unwrap();
    let (x0, x1, n0, n1) = (g(&mut rng), g(&mut rng), g(&mut rng), g(&mut rng));
    let (a, b) = (0.7, -1.3);
    let mut lin: f64 = 0.0;
    for t in [1, 250, 1000] {
        let mix_x = (x0.affine(a, 0.0).unwrap() + x1.affine(b, 0.0).unwrap()).unwrap();
        let mix_n = (n0.affine(a, 0.0).unwrap() + n1.affine(b, 0.0).unwrap()).unwrap();
        let lhs = forward_diffuse(&mix_x, t, &mix_n, &s).unwrap();
        let rhs = (forward_diffuse(&x0, t, &n0, &s).unwrap().affine(a, 0.0).unwrap()
            + forward_diffuse(&x1, t, &n1, &s).unwrap().affine(b, 0.0).unwrap())
        .unwrap();
        lin = lin.max(max_abs_diff(&lhs, &rhs));
    }
    c.check(format!("forward-diffuse linearity max err {lin:.1e}"), lin < 1e-6);

    let xt = forward_diffuse(&x0, 1, &n0, &s).unwrap();
    let rec = ddpm_ancestral_step(&xt, &n0, 1, &s, None).unwrap();
    let rec_err = max_abs_diff(&rec, &x0);
    c.check(format!("t=1 recovery max err {rec_err:.1e}"), rec_err < 1e-6);

    let first = FrameLatent::new(g(&mut rng)).unwrap();
    let last = FrameLatent::new(g(&mut rng)).unwrap();
    let cond = compose_image_condition(&first, Some(&last), 16).unwrap();
    let t = cond.tensor();
    let zero_middle = (1..15).all(|k| values(&t.get(k).unwrap()).iter().all(|v| *v == 0.0));
    let layout = values(&t.get(0).unwrap()) == values(first.tensor()) && values(&t.get(15).unwrap()) == values(last.tensor()) && zero_middle;
    let no_last = compose_image_condition(&first, None, 16).unwrap();
    let empty_last = values(&no_last.tensor().get(15).unwrap()).iter().all(|v| *v == 0.0);
    c.check("slot layout [first, 0…, last] and zero last slot when absent", layout && empty_last);

    let cond_eps = g(&mut rng);
    let uncond_eps = g(&mut rng);
    let w1 = values(&cfg_combine(&cond_eps, &uncond_eps, 1.0).unwrap()) == values(&cond_eps);
    let w0 = values(&cfg_combine(&cond_eps, &uncond_eps, 0.0).unwrap()) == values(&uncond_eps);
    let model = Model::init(&ModelConfig::compact(4, 8), DType::F32, 3).unwrap();
    let vocab = Vocab::builtin();
    let gen = |caption: &str, w: f64| {
        let ins = sampler::instructions_from_frames(&model, vocab.encode(caption).unwrap(), &flat_frame(0.3, 8, 8), None).unwrap();
        let cfg = SamplerConfig { steps: 5, tau: 0, guidance: w, seed: 4, ..Default::default() };
        sampler::generate_clip(&model, &ins, &cfg, &s).unwrap().clip.data
    };
    let caption_free = gen("red circle moves up", 0.0) == gen("blue square stays", 0.0);
    c.check("CFG w=1 returns the conditional branch, w=0 the unconditional (also through the sampler)", w1 && w0 && caption_free);

    let px: Vec<f32> = (0..2 * 3 * 32 * 32).map(|_| rng.random_range(0u8..=255) as f32 / 255.0).collect();
    let frames = Tensor::from_vec(px.clone(), (2, 3, 32, 32), &dev).unwrap();
    let codec = Codec::space_to_depth(2);
    let back = codec.decode_frames(&codec.encode_frames(&frames).unwrap()).unwrap();
    c.check("space-to-depth roundtrip bit-exact", back.flatten_all().unwrap().to_vec1::<f32>().unwrap() == px);

    let ins = sampler::instructions_from_frames(&model, vocab.encode("green triangle moves left").unwrap(), &flat_frame(0.2, 8, 8), Some(&flat_frame(0.8, 8, 8))).unwrap();
    let mut patterns = true;
    for tau in [0, 13, 25, 50] {
        let cfg = SamplerConfig { steps: 50, tau, seed: 9, ..Default::default() };
        let log = sampler::generate_clip(&model, &ins, &cfg, &s).unwrap().log;
        let expect: Vec<bool> = (1..=50).map(|k| k <= tau).collect();
        patterns &= log.last_slot_pattern() == expect;
    }
    c.check("conditioning log [active]^τ [inactive]^(S−τ) for τ ∈ {0, 13, 25, 50}, S=50", patterns);
    c
}

fn statistics() -> Criterion {
    let mut c = Criterion::new(2, "statistical units");
    let dev = Device::Cpu;
    let s = schedule();
    let n = 10_000;
    let mut rng = noise::seeded(200);
    let mut moments = true;
    let mut worst_z: f64 = 0.0;
    for t in [1, 100, 500, 1000] {
        let x0 = Tensor::full(0.7f64, n, &dev).unwrap();
        let eps = noise::gaussian(&mut rng, n, DType::F64, &dev).unwrap();
        let xt = values(&forward_diffuse(&x0, t, &eps, &s).unwrap());
        let ab = s.alpha_bar(t).unwrap();
        let mean = xt.iter().sum::<f64>() / n as f64;
        let var = xt.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let z_mean = (mean - ab.sqrt() * 0.7).abs() / ((1.0 - ab) / n as f64).sqrt();
        let z_var = (var - (1.0 - ab)).abs() / ((1.0 - ab) * (2.0 / (n - 1) as f64).sqrt());
        worst_z = worst_z.max(z_mean).max(z_var);
        moments &= z_mean < 4.0 && z_var < 4.0;
    }
    c.check(format!("forward moments N=1e4 worst |z| {worst_z:.2} < 4"), moments);

    // frame k is filled with k/16 so the chosen last frame is identifiable
    let frames = 16;
    let data: Vec<f32> = (0..frames).flat_map(|k| std::iter::repeat_n(k as f32 / 16.0, 3 * 16)).collect();
    let clip = Tensor::from_vec(data, (frames, 3, 4, 4), &dev).unwrap();
    let codec = Codec::space_to_depth(2);
    let draws = 10_000;
    let mut rng = noise::seeded(noise::derive_seed(200, 1));
    let mut last_counts = [0usize; 3];
    let mut dropped = 0usize;
    let mut content_ok = true;
    for _ in 0..draws {
        let (ins, d) = sample_training_instructions(&clip, &[1, 2], &codec, &mut rng, 0.25, 0.0).unwrap();
        last_counts[d.last_index - (frames - 3)] += 1;
        if let Some(l) = &ins.f_last {
            content_ok &= values(l.tensor()).iter().all(|v| (*v - d.last_index as f64 / 16.0).abs() < 1e-7);
        }
        content_ok &= ins.f_last.is_none() == d.last_dropped;
    }
    let mut rng = noise::seeded(noise::derive_seed(200, 2));
    for _ in 0..draws {
        let (_, d) = sample_training_instructions(&clip, &[1, 2], &codec, &mut rng, 0.25, 0.0).unwrap();
        dropped += d.last_dropped as usize;
    }
    let chi = |obs: &[usize], p: &[f64]| obs.iter().zip(p).map(|(&o, &p)| (o as f64 - p * draws as f64).powi(2) / (p * draws as f64)).sum::<f64>();
    let crit = |df: f64| ChiSquared::new(df).unwrap().inverse_cdf(0.99);
    let chi_last = chi(&last_counts, &[1.0 / 3.0; 3]);
    let chi_drop = chi(&[dropped, draws - dropped], &[0.25, 0.75]);
    c.check(format!("last-of-3 counts {last_counts:?} chi2 {chi_last:.2} < {:.2}", crit(2.0)), chi_last < crit(2.0) && content_ok);
    c.check(format!("eta drop {dropped}/{draws} chi2 {chi_drop:.2} < {:.2}", crit(1.0)), chi_drop < crit(1.0));

    let cfg = GrammarConfig::default();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for i in 0..200u64 {
        let scene = sample_scene(&mut noise::seeded(noise::derive_seed(201, i)), &cfg);
        let r = render_clip(&scene, cfg.frames, cfg.height, cfg.width);
        let v = VideoClip::from_record(&r);
        let mut shapes: Vec<_> = scene.shapes.iter().collect();
        if let Some(cut) = &scene.cut {
            shapes.extend(cut.scene.shapes.iter());
        }
        let isolated = isolated_tracks(&scene, cfg.frames, cfg.height, cfg.width);
        for (t, sh) in shapes.iter().enumerate() {
            let tr = evalkit::track_centroids(&v, sh.color);
            for k in 0..r.frames {
                if !isolated[k][t] {
                    continue;
                }
                let [ax, ay] = r.centroid(k, t).unwrap();
                let err = match tr[k] {
                    Some([mx, my]) => (mx - ax as f64).hypot(my - ay as f64),
                    None => f64::INFINITY,
                };
                worst = worst.max(err);
                checked += 1;
            }
        }
    }
    c.check(format!("tracker vs renderer centroid max err {worst:.3} px over {checked} observations"), worst < 0.5 && checked > 1000);
    c
}

fn tiny_denoiser() -> DenoiserConfig {
    DenoiserConfig {
        latent_channels: 3,
        frame_count: 4,
        latent_height: 4,
        latent_width: 4,
        base_width: 8,
        depth: 2,
        attention_heads: 2,
        text_dim: 6,
        temporal_pos_embed: true,
    }
}

fn gradient_check() -> Criterion {
    let mut c = Criterion::new(3, "gradient check");
    let dev = Device::Cpu;
    let d = Denoiser::init(&tiny_denoiser(), DType::F64, 300).unwrap();
    let mut rng = noise::seeded(301);
    // move the zero-initialized temporal outputs off zero so every path carries gradient
    for name in d.temporal_output_param_names() {
        let v = d.params().get(&name).unwrap();
        v.set(&noise::gaussian(&mut rng, v.dims(), DType::F64, &dev).unwrap().affine(0.2, 0.0).unwrap()).unwrap();
    }
    let z = noise::gaussian(&mut rng, (1, 4, 6, 4, 4), DType::F64, &dev).unwrap();
    let probe = noise::gaussian(&mut rng, (1, 4, 3, 4, 4), DType::F64, &dev).unwrap();
    let ctx = TextContext::new(noise::gaussian(&mut rng, (1, 3, 6), DType::F64, &dev).unwrap(), None).unwrap();
    let loss = || (d.denoise(&z, &[417], &ctx, Mode::Video).unwrap() * &probe).unwrap().sum_all().unwrap();
    let grads = loss().backward().unwrap();
    let names: Vec<String> = d.params().iter().map(|(k, _)| k.clone()).collect();
    let h = 1e-3;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut attempts = 0;
    while checked < 20 && attempts < 1000 {
        attempts += 1;
        let name = &names[rng.random_range(0..names.len())];
        let var = d.params().get(name).unwrap();
        let Some(g) = grads.get(var.as_tensor()) else { continue };
        let g = values(g);
        let idx = rng.random_range(0..g.len());
        if g[idx].abs() < 1e-4 {
            continue;
        }
        let orig = values(var.as_tensor());
        let at = |delta: f64| {
            let mut w = orig.clone();
            w[idx] += delta;
            var.set(&Tensor::from_vec(w, var.dims(), &dev).unwrap()).unwrap();
            loss().to_scalar::<f64>().unwrap()
        };
        let numeric = (at(h) - at(-h)) / (2.0 * h);
        var.set(&Tensor::from_vec(orig, var.dims(), &dev).unwrap()).unwrap();
        worst = worst.max((numeric - g[idx]).abs() / numeric.abs().max(g[idx].abs()));
        checked += 1;
    }
    c.check(format!("{checked} weights, f64, h=1e-3, worst relative error {worst:.1e} < 1e-3"), checked == 20 && worst < 1e-3);
    c
}

fn identity_gap(dtype: DType) -> (f64, usize) {
    let dev = Device::Cpu;
    let cfg = DenoiserConfig::default();
    let d = Denoiser::init(&cfg, dtype, 400).unwrap();
    let mut rng = noise::seeded(401);
    let z = noise::gaussian(&mut rng, (1, cfg.frame_count, 2 * cfg.latent_channels, cfg.latent_height, cfg.latent_width), dtype, &dev).unwrap();
    let ctx = TextContext::new(noise::gaussian(&mut rng, (1, 5, cfg.text_dim), dtype, &dev).unwrap(), None).unwrap();
    let video = d.denoise(&z, &[613], &ctx, Mode::Video).unwrap();
    let mut worst: f64 = 0.0;
    for f in 0..cfg.frame_count {
        let image = d.denoise(&z.narrow(1, f, 1).unwrap(), &[613], &ctx, Mode::Image).unwrap();
        worst = worst.max(max_abs_diff(&video.narrow(1, f, 1).unwrap(), &image));
    }
    (worst, d.num_params())
}

fn zero_init_identity() -> Criterion {
    let mut c = Criterion::new(4, "zero-init identity");
    let (worst, params) = identity_gap(DType::F64);
    let (worst_f32, _) = identity_gap(DType::F32);
    c.check(
        format!("desk denoiser ({params} params) f64 video vs per-frame image max diff {worst:.1e} < 1e-6 (f32 rounding gap {worst_f32:.1e})"),
        worst < 1e-6,
    );
    c
}

fn frechet_oracle() -> Criterion {
    let mut c = Criterion::new(8, "Fréchet oracle");
    let stats = |mean: Vec<f64>, cov: Vec<f64>| {
        let n = mean.len();
        GaussianStats {
            mean: nalgebra::DVector::from_vec(mean),
            cov: nalgebra::DMatrix::from_row_slice(n, n, &cov),
            regularized: false,
        }
    };
    let a = stats(vec![0.3, -1.0, 2.0], vec![2.0, 0.5, 0.1, 0.5, 1.0, 0.2, 0.1, 0.2, 0.7]);
    let same = frechet(&a, &a).unwrap().value;
    let one = frechet(&stats(vec![0.0], vec![1.0]), &stats(vec![1.0], vec![1.0])).unwrap().value;
    c.check(format!("identical stats {same:.1e} < 1e-6"), same.abs() < 1e-6);
    c.check(format!("N(0,1) vs N(1,1) = {one:.9}"), (one - 1.0).abs() < 1e-6);
    c
}

fn small_grammar() -> GrammarConfig {
    GrammarConfig {
        frames: 4,
        height: 8,
        width: 8,
        radius_min: 1.5,
        radius_max: 2.5,
        speeds: vec![1.0],
        cut_prob: 0.0,
        ..Default::default()
    }
}

fn loss_trace(records: &[synthdata::ClipRecord]) -> Vec<f64> {
    let model = Model::init(&ModelConfig::compact(4, 8), DType::F32, 900).unwrap();
    let cfg = TrainConfig { batch_size: 3, image_mix_period: 3, seed: 901, ..Default::default() };
    let mut state = trainer::TrainState::new(model, cfg, ScheduleConfig::default()).unwrap();
    (0..4).map(|_| trainer::advance(&mut state, records, &mut |_| {}).unwrap().loss).collect()
}

fn determinism() -> Criterion {
    let mut c = Criterion::new(9, "determinism");
    let shard = |seed| encode_shard(&synthdata::generate(&GrammarConfig::default(), seed, 40)).unwrap();
    c.check("shards bit-identical for a fixed seed", shard(902) == shard(902) && shard(902) != shard(903));

    let records = synthdata::generate(&small_grammar(), 904, 16);
    let (a, b) = (loss_trace(&records), loss_trace(&records));
    c.check(format!("loss traces bit-identical {a:.4?}"), a == b);

    let model = Model::init(&ModelConfig::compact(4, 8), DType::F32, 905).unwrap();
    let ins = sampler::instructions_from_frames(&model, Vocab::builtin().encode("red circle moves right").unwrap(), &flat_frame(0.1, 8, 8), Some(&flat_frame(0.6, 8, 8))).unwrap();
    let cfg = SamplerConfig { steps: 10, tau: 5, seed: 906, ..Default::default() };
    let s = schedule();
    let x = sampler::generate_clip(&model, &ins, &cfg, &s).unwrap().clip.data;
    let y = sampler::generate_clip(&model, &ins, &cfg, &s).unwrap().clip.data;
    c.check("sampled clips bit-identical", x == y);
    c
}

/// Runs the chain structure checks of criterion 7 (length and exact
/// boundaries) on an untrained model at the desk clip geometry.
fn chain_structure(model: &Model, start: &Frame, clips: usize, steps: usize) -> (usize, bool) {
    let s = schedule();
    let vocab = Vocab::builtin();
    let script: Vec<ChainEntry> = (0..clips)
        .map(|k| ChainEntry {
            caption: vocab.encode("yellow circle moves right").unwrap(),
            last: None,
            sampler: SamplerConfig { steps, tau: 0, seed: noise::derive_seed(700, k as u64), ..Default::default() },
        })
        .collect();
    let chain = sampler::chain_clips(model, start, &script, &s).unwrap();
    let codec = model.codec();
    let mut exact = true;
    let mut at = 0;
    for (k, g) in chain.clips.iter().enumerate() {
        if k > 0 {
            let prev = &chain.clips[k - 1].clip;
            let boundary = prev.frame(prev.frames - 1).unwrap();
            let seen = codec.decode_frame(&codec.encode_frame(&boundary).unwrap()).unwrap();
            exact &= chain.video.frame_data(at) == prev.frame_data(prev.frames - 1);
            exact &= seen.flatten_all().unwrap().to_vec1::<f32>().unwrap() == prev.frame_data(prev.frames - 1);
        }
        at += g.clip.frames - 1;
    }
    (chain.video.frames, exact)
}

fn core_criteria() -> bool {
    let mut all = true;
    all &= exact_math().report();
    all &= statistics().report();
    all &= gradient_check().report();
    all &= zero_init_identity().report();

    println!("[NOT RUN] criterion 5 desk training run: needs the 20k-iteration desk run (run with `--ignored`)");
    println!("[NOT RUN] criterion 6 desk ablation: needs three desk-trained arms (run with `--ignored`)");

    let model = Model::init(&ModelConfig::compact(16, 32), DType::F32, 701).unwrap();
    let (frames, exact) = chain_structure(&model, &flat_frame(0.4, 32, 32), 64, 4);
    let structure_ok = frames == 1 + 64 * 15 && exact;
    if structure_ok {
        println!(
            "[NOT RUN] criterion 7 chain stability: untrained 64-clip chain gave {frames} frames with bit-equal boundaries; \
             drift growth needs the desk checkpoint (run with `--ignored`)"
        );
    } else {
        println!("[FAIL] criterion 7 chain stability: {frames} frames, boundaries exact = {exact}");
    }
    all &= structure_ok;

    all &= frechet_oracle().report();
    all &= determinism().report();
    all
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance_criteria: test");
        for name in ["desk_training_run", "desk_ablation", "desk_chain_stability"] {
            println!("{name}: test");
        }
        return;
    }
    let desk_only = args.iter().any(|a| a == "--ignored");
    let desk = desk_only || args.iter().any(|a| a == "--include-ignored");
    let mut all = true;
    if !desk_only {
        all &= core_criteria();
    }
    if desk {
        all &= desk_training_run();
        all &= desk_ablation();
        all &= desk_chain_stability();
    }
    if !all {
        eprintln!("some acceptance criteria failed; see the lines above");
        std::process::exit(1);
    }
}

// Desk-scale runs. These follow the stated desk budget exactly: the default
// model (~2.4M parameters), 32×32×16 clips, batch 16, 20k iterations.

const DESK_ITERATIONS: u64 = 20_000;

fn desk_dir() -> PathBuf {
    std::env::var_os("KFDIFF_DESK_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("kfdiff-desk"))
}

fn desk_data() -> (PathBuf, Vec<synthdata::ClipRecord>) {
    let dir = desk_dir().join("data");
    let (train, eval) = (dir.join("train.fdsh"), dir.join("eval.fdsh"));
    let grammar = GrammarConfig::default();
    if !train.is_file() || !eval.is_file() {
        std::fs::create_dir_all(&dir).unwrap();
        write_shard(&synthdata::generate(&grammar, noise::derive_seed(0, 0), 2000), &train).unwrap();
        write_shard(&synthdata::generate(&grammar, noise::derive_seed(0, 1), 200), &eval).unwrap();
    }
    (train, read_shard(&eval).unwrap())
}

fn latest_checkpoint(dir: &Path) -> Option<PathBuf> {
    let mut found: Vec<PathBuf> = std::fs::read_dir(dir)
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "kfd"))
        .collect();
    found.sort();
    found.pop()
}

/// Trains (or finishes training) one arm and returns its final checkpoint
/// and the full metrics log.
fn desk_arm(ablation: Ablation) -> (PathBuf, Vec<trainer::StepMetrics>) {
    let (train_shard, _) = desk_data();
    let out = desk_dir().join(format!("{ablation:?}").to_lowercase());
    let final_ckpt = trainer::checkpoint_path(&out, DESK_ITERATIONS);
    if !final_ckpt.is_file() {
        let cfg = TrainConfig {
            total_iterations: DESK_ITERATIONS,
            ablation,
            train_shard,
            out_dir: out.clone(),
            ..Default::default()
        };
        let resume = latest_checkpoint(&out);
        trainer::run_training(&ModelConfig::default(), &cfg, &ScheduleConfig::default(), resume.as_deref()).unwrap();
    }
    let text = std::fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    let metrics = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    (final_ckpt, metrics)
}

/// About a minute per iteration on one CPU core.
fn desk_training_run() -> bool {
    let (ckpt, metrics) = desk_arm(Ablation::None);
    let (_, eval) = desk_data();
    let (model, sched) = trainer::load_model(&ckpt).unwrap();
    let mut c = Criterion::new(5, "desk training run");

    let window = 50;
    let mean = |m: &[trainer::StepMetrics]| m.iter().map(|x| x.loss).sum::<f64>() / m.len() as f64;
    let (first, last) = (mean(&metrics[..window]), mean(&metrics[metrics.len() - window..]));
    c.check(format!("loss (mean of {window}) {first:.4} -> {last:.4}, need < 1/3"), metrics.len() as u64 == DESK_ITERATIONS && last < first / 3.0);

    let base = SamplerConfig::default();
    let first_only = SamplerConfig { tau: 0, ..base.clone() };
    let clips = evalkit::generate_set(&model, &sched, &eval, 64, &first_only).unwrap();
    let psnr = evalkit::first_frame_adherence(&clips, &eval).unwrap();
    let psnr_mean = psnr.iter().sum::<f64>() / psnr.len() as f64;
    c.check(format!("first-frame PSNR {psnr_mean:.2} dB >= 25 over 64"), psnr_mean >= 25.0);

    let pairs: Vec<_> = clips.iter().cloned().zip(eval.iter().map(|r| r.caption.clone())).collect();
    let motion = evalkit::motion_accuracy(&pairs, &Vocab::builtin()).unwrap();
    c.check(format!("motion accuracy {:.3} >= 0.8 ({} claims)", motion.accuracy, motion.evaluated), motion.accuracy >= 0.8);

    let taus: Vec<usize> = [0.0, 0.25, 0.5, 1.0].iter().map(|f: &f64| (f * base.steps as f64).round() as usize).collect();
    let sweep = evalkit::tau_sweep(&model, &sched, &eval, &taus, &base, 64).unwrap();
    let means: Vec<f64> = sweep.rows.iter().map(|r| r.last_frame_mse).collect();
    c.check(
        format!("tau {taus:?} last-frame MSE {means:.5?} spearman {:.3} <= -0.8 (mean paired {:.3})", sweep.spearman_of_means, sweep.mean_paired_spearman),
        sweep.spearman_of_means <= -0.8,
    );
    c.report()
}

/// Three desk training runs.
fn desk_ablation() -> bool {
    let (_, eval) = desk_data();
    let reference: Vec<VideoClip> = eval.iter().map(VideoClip::from_record).collect();
    let mut scores = Vec::new();
    for arm in [Ablation::None, Ablation::NoText, Ablation::NoLastFrame] {
        let (ckpt, _) = desk_arm(arm);
        let (model, sched) = trainer::load_model(&ckpt).unwrap();
        let clips = evalkit::generate_set(&model, &sched, &eval, eval.len(), &SamplerConfig::default()).unwrap();
        scores.push(evalkit::toy_frechet(&clips, &reference).unwrap().value);
    }
    let mut c = Criterion::new(6, "desk ablation");
    c.check(format!("toy-Fréchet full {:.4} < w/o text {:.4}", scores[0], scores[1]), scores[0] < scores[1]);
    c.check(format!("toy-Fréchet full {:.4} < w/o last frame {:.4}", scores[0], scores[2]), scores[0] < scores[2]);
    c.report()
}

fn desk_chain_stability() -> bool {
    let (ckpt, _) = desk_arm(Ablation::None);
    let (_, eval) = desk_data();
    let (model, sched) = trainer::load_model(&ckpt).unwrap();
    let d = evalkit::chain_drift(&model, &sched, &eval, 8, 64, &SamplerConfig::default()).unwrap();
    let mut c = Criterion::new(7, "chain stability");
    c.check(format!("{} frames per chain", d.frames_per_chain), d.frames_per_chain == 1 + 64 * 15);
    c.check("boundary frames bit-equal", d.boundaries_exact);
    c.check(
        format!("toy-Fréchet clip 1 {:.4} -> clip 64 {:.4}, growth {:.3} < 2", d.per_clip_frechet[0], d.per_clip_frechet[63], d.growth),
        d.growth < 2.0,
    );
    c.report()
}
