use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn kfdiff(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kfdiff"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env_remove("KFDIFF_OUT")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn entries(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = match std::fs::read_dir(dir) {
        Ok(rd) => rd.map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect(),
        Err(_) => Vec::new(),
    };
    names.sort();
    names
}

#[test]
fn unknown_flag_exits_2_without_writing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = kfdiff(&out, &["make-data", "--bogus", "3"]);
    assert_eq!(code(&o), 2);
    assert!(!out.exists());
}

#[test]
fn invalid_configuration_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[train]\nbatch_size = 0\n").unwrap();
    let o = kfdiff(&out, &["--config", cfg.to_str().unwrap(), "train"]);
    assert_eq!(code(&o), 2);
    let o = kfdiff(&out, &["--set", "train.no_such_key=1", "train"]);
    assert_eq!(code(&o), 2);
    let o = kfdiff(&out, &["--set", "data.grammar.height=0", "make-data"]);
    assert_eq!(code(&o), 2);
    let o = kfdiff(&out, &["--set", "eval.chains=1", "eval", "--ckpt", "x.kfd", "--suite", "chain-drift"]);
    assert_eq!(code(&o), 2);
    assert!(!out.exists());
}

#[test]
fn make_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = kfdiff(out, &["make-data", "--seed", "17", "--train-count", "6", "--eval-count", "3"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["train.fdsh", "eval.fdsh", "vocab.txt"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn runtime_failure_exits_1_with_marker() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let missing = dir.path().join("missing.fdsh");
    let o = kfdiff(&out, &["--set", &format!("train.train_shard={}", missing.display()), "train"]);
    assert_eq!(code(&o), 1);
    assert!(out.join(".failed").is_file());
}

fn tiny_config(dir: &Path, data: &Path) -> PathBuf {
    let text = format!(
        r#"
[model.denoiser]
latent_channels = 12
frame_count = 4
latent_height = 4
latent_width = 4
base_width = 8
depth = 2
attention_heads = 2
text_dim = 8

[model.text]
dim = 8
heads = 2

[train]
batch_size = 2
micro_batch = 2
total_iterations = 2
checkpoint_every = 1
train_shard = "{train}"

[sampler]
steps = 3
tau = 1

[data.grammar]
frames = 4
height = 8
width = 8
max_shapes = 1
radius_min = 1.5
radius_max = 2.5
speeds = [0.5]
cut_prob = 0.0

[eval]
eval_shard = "{eval}"
samples = 2
tau_fractions = [0.0, 1.0]
chains = 2
chain_length = 2
"#,
        train = data.join("train.fdsh").display(),
        eval = data.join("eval.fdsh").display(),
    );
    let p = dir.join("tiny.toml");
    std::fs::write(&p, text).unwrap();
    p
}

fn write_png(path: &Path, rgb: [u8; 3]) {
    image::RgbImage::from_pixel(8, 8, image::Rgb(rgb)).save(path).unwrap();
}

#[test]
fn end_to_end_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    let cfg = tiny_config(root, &data);
    let cfg = cfg.to_str().unwrap();
    let run = |out: &Path, args: &[&str]| {
        let mut full = vec!["--config", cfg];
        full.extend_from_slice(args);
        let o = kfdiff(out, &full);
        assert_eq!(code(&o), 0, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    };

    run(&data, &["make-data", "--train-count", "4", "--eval-count", "2"]);
    let train = root.join("train");
    run(&train, &["train"]);
    let ckpt = train.join("ckpt-000002.kfd");
    assert!(ckpt.is_file(), "{:?}", entries(&train));
    let ckpt = ckpt.to_str().unwrap();
    let eval_shard = data.join("eval.fdsh");

    let sample = root.join("sample");
    let first = format!("{}#0", eval_shard.display());
    let last = format!("{}#1", eval_shard.display());
    run(&sample, &["sample", "--ckpt", ckpt, "--first-frame", &first, "--last-frame", &last]);
    for f in ["sample.gif", "sample_grid.png", "sample.kfd", "conditioning_log.json", "sample.resolved.toml"] {
        assert!(sample.join(f).is_file(), "missing {f}");
    }
    let log: serde_json::Value = serde_json::from_slice(&std::fs::read(sample.join("conditioning_log.json")).unwrap()).unwrap();
    assert!(log.is_array() || log.is_object());

    write_png(&root.join("a.png"), [200, 40, 40]);
    write_png(&root.join("b.png"), [40, 40, 200]);
    let script = root.join("chain.toml");
    std::fs::write(
        &script,
        "first_frame = \"a.png\"\n\n[[clip]]\ncaption = \"red circle moves right\"\nlast_frame = \"b.png\"\ntau = 1\n\n[[clip]]\ncaption = \"red circle stays\"\n",
    )
    .unwrap();
    let chain = root.join("chain");
    run(&chain, &["chain", "--ckpt", ckpt, "--script", script.to_str().unwrap()]);
    assert!(!entries(&chain).is_empty());

    let edit = root.join("edit");
    let (a, b) = (root.join("a.png"), root.join("b.png"));
    run(&edit, &["edit", "--ckpt", ckpt, "--source", &first, "--first", a.to_str().unwrap(), "--last", b.to_str().unwrap()]);
    assert!(edit.join("edit.kfd").is_file());

    let eval = root.join("eval");
    run(&eval, &["eval", "--ckpt", ckpt, "--suite", "adherence"]);
    run(&eval, &["eval", "--ckpt", ckpt, "--suite", "tau-sweep"]);
    run(&eval, &["eval", "--ckpt", ckpt, "--suite", "chain-drift"]);
    for f in ["eval_adherence.json", "eval_tau-sweep.json", "eval_chain-drift.json"] {
        assert!(eval.join(f).is_file(), "missing {f}: {:?}", entries(&eval));
    }
    assert!(!eval.join(".failed").exists());
}
