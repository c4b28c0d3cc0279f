use std::fs;
use std::path::Path;
use std::process::Command;

use hero_cli::{run, EXIT_USAGE};

const TINY: &str = r#"
[world]
frames = 4
grid = [3, 3]
feature_dim = 8
min_objects = 2
max_objects = 2
min_span = 1
max_span = 2

[model]
proposal_scales = [2]

[model.encoder]
encoder_layers = 1
decoder_layers = 1
queries_per_frame = 2
num_heads = 2
model_dim = 8
ffn_dim = 8

[train]
train_episodes = 6
max_steps = 6
learning_rate = 0.001

[eval]
episodes = 5
"#;

fn call(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("hero").chain(args.iter().copied());
    let code = run(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn write_tiny(dir: &Path) -> String {
    let p = dir.join("tiny.toml");
    fs::write(&p, TINY).unwrap();
    p.to_str().unwrap().to_string()
}

fn train_tiny(dir: &Path) -> String {
    let cfg = write_tiny(dir);
    let ckpt = dir.join("model.ckpt");
    let ckpt = ckpt.to_str().unwrap();
    let (code, out, err) = call(&["train", "--config", &cfg, "--out", ckpt]);
    assert_eq!(code, 0, "{out}{err}");
    assert!(out.contains("after 6 steps"), "{out}");
    ckpt.to_string()
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let (code, _, err) = call(&["eval", "--no-such-flag"]);
    assert_eq!(code, EXIT_USAGE);
    assert!(err.contains("--no-such-flag"), "{err}");
    let (code, _, _) = call(&["frobnicate"]);
    assert_eq!(code, EXIT_USAGE);
}

#[test]
fn help_exits_zero() {
    let (code, out, _) = call(&["--help"]);
    assert_eq!(code, 0);
    for sub in ["train", "eval", "gradcheck", "ablate", "gen-data"] {
        assert!(out.contains(sub), "{sub} missing from help:\n{out}");
    }
}

#[test]
fn malformed_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    let out = dir.path().join("m.ckpt");
    let out = out.to_str().unwrap();
    for text in ["[train\nlearning_rate = 0.1", "[train]\nno_such_key = 1", "[world]\nframes = 0"] {
        fs::write(&bad, text).unwrap();
        let (code, _, err) = call(&["train", "--config", bad.to_str().unwrap(), "--out", out]);
        assert_eq!(code, EXIT_USAGE, "{text}: {err}");
    }
    let (code, _, _) = call(&["train", "--config", "/definitely/not/here.toml", "--out", out]);
    assert_eq!(code, EXIT_USAGE);
    assert!(!Path::new(out).exists());
}

#[test]
fn missing_checkpoint_is_a_runtime_failure() {
    let (code, _, err) = call(&["eval", "--checkpoint", "/definitely/not/here.ckpt"]);
    assert_eq!(code, 1);
    assert!(err.starts_with("error:"), "{err}");
}

#[test]
fn gradcheck_passes_and_fails_on_tolerance() {
    let (code, out, err) = call(&["gradcheck"]);
    assert_eq!(code, 0, "{out}{err}");
    assert!(out.contains("end_to_end_loss"), "{out}");
    assert!(out.contains("max relative error"), "{out}");
    let (code, _, err) = call(&["gradcheck", "--tolerance", "0"]);
    assert_eq!(code, 1);
    assert!(err.contains("gradient check failed"), "{err}");
}

#[test]
fn eval_twice_gives_byte_identical_reports() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_tiny(dir.path());
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    let (c1, out1, _) = call(&["eval", "--checkpoint", &ckpt, "--out", a.to_str().unwrap()]);
    let (c2, out2, _) = call(&["eval", "--checkpoint", &ckpt, "--out", b.to_str().unwrap()]);
    assert_eq!((c1, c2), (0, 0));
    assert_eq!(out1, out2);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert!(out1.contains("0.4") && out1.contains("Avg") && out1.contains("HERO"), "{out1}");
    assert!(out1.contains("retrieval frame"), "{out1}");

    let report: serde_json::Value = serde_json::from_slice(&fs::read(&a).unwrap()).unwrap();
    assert_eq!(report["episodes"], 5);
    assert_eq!(report["records"].as_array().unwrap().len(), 5);
    assert_eq!(report["thresholds"], serde_json::json!([0.4, 0.5, 0.6]));
}

#[test]
fn eval_reads_a_generated_dump_and_the_no_text_mode() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_tiny(dir.path());
    let cfg = write_tiny(dir.path());
    let dump = dir.path().join("dump");
    let dump = dump.to_str().unwrap();
    let (code, out, err) = call(&["gen-data", "--config", &cfg, "--out", dump, "--count", "3"]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("wrote 3 episodes"), "{out}");

    let (code, out, err) = call(&["eval", "--checkpoint", &ckpt, "--episodes", dump]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("episodes 3"), "{out}");

    let (code, out, _) = call(&["eval", "--checkpoint", &ckpt, "--episodes", dump, "--no-text"]);
    assert_eq!(code, 0);
    assert!(out.contains("no text") && !out.contains("retrieval frame"), "{out}");

    let other = dir.path().join("other");
    let (code, _, _) = call(&[
        "gen-data",
        "--config",
        &cfg,
        "--set",
        "world.frames=5",
        "--out",
        other.to_str().unwrap(),
        "--count",
        "2",
    ]);
    assert_eq!(code, 0);
    let (code, _, err) = call(&["eval", "--checkpoint", &ckpt, "--episodes", other.to_str().unwrap()]);
    assert_eq!(code, EXIT_USAGE, "{err}");
}

#[test]
fn seed_flag_and_env_var_change_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let c = dir.path().join("c");
    for (p, seed) in [(&a, "3"), (&b, "3"), (&c, "4")] {
        let (code, _, _) = call(&["gen-data", "--config", &cfg, "--seed", seed, "--split", "train", "--out", p.to_str().unwrap()]);
        assert_eq!(code, 0);
    }
    let read = |p: &Path| {
        let mut files: Vec<_> = fs::read_dir(p).unwrap().map(|e| e.unwrap().path()).collect();
        files.sort();
        files.iter().map(|f| fs::read(f).unwrap()).collect::<Vec<_>>()
    };
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));

    let d = dir.path().join("d");
    let status = Command::new(env!("CARGO_BIN_EXE_hero"))
        .args(["gen-data", "--config", &cfg, "--split", "train", "--out", d.to_str().unwrap()])
        .env("HERO_SEED", "3")
        .output()
        .unwrap();
    assert!(status.status.success());
    assert_eq!(read(&a), read(&d));
}

#[test]
fn binary_reports_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_hero");
    let out = Command::new(bin).arg("--bogus").output().unwrap();
    assert_eq!(out.status.code(), Some(EXIT_USAGE));
    let out = Command::new(bin).args(["gradcheck", "--tolerance", "1e-4"]).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn ablate_prints_one_row_per_variant() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny(dir.path());
    let json = dir.path().join("ablate.json");
    let (code, out, err) = call(&[
        "ablate",
        "--config",
        &cfg,
        "--variants",
        "full,no-retr,no-hier",
        "--seeds",
        "0,1",
        "--steps",
        "3",
        "--out",
        json.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 4, "{out}");
    assert!(lines[1].starts_with("full"));
    assert!(lines[2].starts_with("w/o retrieval"));
    assert!(lines[3].starts_with("w/o hierarchy"));
    let rows: serde_json::Value = serde_json::from_slice(&fs::read(&json).unwrap()).unwrap();
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0]["variant"], "full");
    assert_eq!(rows[0]["per_seed"].as_array().unwrap().len(), 2);

    let (code, _, _) = call(&["ablate", "--variants", "no-such-variant"]);
    assert_eq!(code, EXIT_USAGE);
}
