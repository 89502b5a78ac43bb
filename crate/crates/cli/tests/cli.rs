use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
layer_selection = 2

[data]
train = 6
heldout = 3

[model]
frames = 5
height = 16
width = 16
width_d = 8
heads = 2
blocks = 2
ffn_mult = 2
vocab = 8
null_token = 7
time_freqs = 4
query_dim = 8
query_heads = 2
query_layers = 2

[stage0]
steps = 2
batch = 2

[stage1]
steps = 2
batch = 2

[stage2]
steps = 2
batch = 2

[sample]
steps = 3

[eval]
batch = 2
"#;

fn dualmotion(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dualmotion"))
        .args(args)
        .arg("--out")
        .arg(dir)
        .output()
        .expect("binary runs")
}

fn tiny_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    dir
}

fn config(dir: &Path) -> String {
    dir.join("tiny.toml").display().to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn outputs_hash(o: &Output) -> String {
    stdout(o)
        .lines()
        .find_map(|l| l.strip_prefix("outputs "))
        .expect("hash line")
        .to_string()
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = dualmotion(dir.path(), &["sample", "--bogus"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
    let o = dualmotion(dir.path(), &["no-such-command"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn help_exits_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let o = dualmotion(dir.path(), &["--help"]);
    assert_eq!(o.status.code(), Some(0));
    for cmd in ["gen-data", "train-stage2", "ablate"] {
        assert!(stdout(&o).contains(cmd));
    }
}

#[test]
fn decoding_a_background_frame_reports_no_coverage() {
    let dir = tempfile::tempdir().unwrap();
    let png = dir.path().join("black.png");
    dualmotion::imageio::write_rgb_png(&png, 8, 8, &[0.0f64; 8 * 8 * 3]).unwrap();
    let o = dualmotion(dir.path(), &["decode", png.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("coverage 0.00%"), "{}", stdout(&o));
}

#[test]
fn encode_then_decode_recovers_coverage() {
    let dir = tempfile::tempdir().unwrap();
    let o = dualmotion(dir.path(), &["encode"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let reported = stdout(&o).lines().next().unwrap().to_string();
    let png = dir.path().join("motion.png");
    let o = dualmotion(dir.path(), &["decode", png.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).starts_with(&reported), "{reported} vs {}", stdout(&o));
    assert!(!reported.contains(" 0.00%"));
}

#[test]
fn stage2_without_stage1_checkpoint_is_a_data_error() {
    let dir = tiny_dir();
    let cfg = config(dir.path());
    assert!(dualmotion(dir.path(), &["gen-data", "--config", &cfg]).status.success());
    let o = dualmotion(dir.path(), &["train-stage2", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("stage-1"), "{}", stderr(&o));
}

#[test]
fn bad_config_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "layer_selection = 0\n").unwrap();
    let o = dualmotion(dir.path(), &["gen-data", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn diverging_training_is_a_numeric_failure() {
    let dir = tiny_dir();
    let cfg = dir.path().join("hot.toml");
    let text = TINY.replace("[stage0]\nsteps = 2", "[stage0]\nsteps = 2\noptim = { lr = 1e30, warmup_steps = 0, max_grad_norm = 1e30 }");
    std::fs::write(&cfg, text).unwrap();
    let cfg = cfg.to_str().unwrap();
    assert!(dualmotion(dir.path(), &["gen-data", "--config", cfg]).status.success());
    let o = dualmotion(dir.path(), &["pretrain", "--config", cfg]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn full_chain_is_reproducible() {
    let dir = tiny_dir();
    let cfg = config(dir.path());
    for cmd in ["gen-data", "pretrain", "train-stage1", "train-stage2"] {
        let o = dualmotion(dir.path(), &[cmd, "--config", &cfg]);
        assert!(o.status.success(), "{cmd}: {}", stderr(&o));
    }
    let a = dualmotion(dir.path(), &["sample", "--config", &cfg, "--seed", "42", "--records", "0,2"]);
    assert!(a.status.success(), "{}", stderr(&a));
    let b = dualmotion(dir.path(), &["sample", "--config", &cfg, "--seed", "42", "--records", "0,2"]);
    assert_eq!(outputs_hash(&a), outputs_hash(&b));
    let c = dualmotion(dir.path(), &["sample", "--config", &cfg, "--seed", "43", "--records", "0,2"]);
    assert_ne!(outputs_hash(&a), outputs_hash(&c));
    assert!(dir.path().join("sample0002/motion004.png").exists());

    let e = dualmotion(dir.path(), &["eval", "--config", &cfg]);
    assert!(e.status.success(), "{}", stderr(&e));
    assert!(stdout(&e).contains("MPJPE"));
    let metrics = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    assert!(metrics.lines().last().unwrap().contains("summary"));

    let manifest = std::fs::read_to_string(dir.path().join("manifest.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = manifest.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 8);
    assert_eq!(lines[4]["command"], "sample");
    assert_eq!(lines[4]["seed"], 42);
    assert_eq!(lines[4]["outputs_hash"], lines[5]["outputs_hash"]);
    assert_eq!(lines[0]["config_hash"], lines[1]["config_hash"]);
    assert_ne!(lines[4]["config_hash"], lines[6]["config_hash"]);
}

#[test]
fn resumed_pretraining_matches_a_straight_run() {
    let dir = tiny_dir();
    let cfg = config(dir.path());
    assert!(dualmotion(dir.path(), &["gen-data", "--config", &cfg]).status.success());
    let straight = dualmotion(dir.path(), &["pretrain", "--config", &cfg]);
    assert!(straight.status.success());
    let ckpt = dir.path().join("stage0.ckpt");
    let resumed = dualmotion(dir.path(), &["pretrain", "--config", &cfg, "--resume", ckpt.to_str().unwrap()]);
    assert!(resumed.status.success(), "{}", stderr(&resumed));
    assert_eq!(outputs_hash(&straight), outputs_hash(&resumed));
}
