//! End-to-end runs of the `promptvqa` binary on a tiny configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = "\
lm_dim = 16
n_heads = 2
lm_ffn_hidden = 32
train_images = 20
val_images = 2
test_images = 4
warmup_steps = 5
stage1_steps = 5
stage2_steps = 5
batch_size = 2
stage2_batch_size = 2
tto_iters = 5
";

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_promptvqa"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    let out = bin().current_dir(dir).args(args).output().unwrap();
    if !out.status.success() {
        eprintln!("{}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn setup(extra: &str) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, format!("{TINY}{extra}")).unwrap();
    (dir, cfg)
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn pipeline_writes_every_artifact() {
    let (dir, cfg) = setup("");
    let d = dir.path();
    let c = cfg.to_str().unwrap();
    assert_eq!(code(&run(d, &["--config", c, "--out", "o", "gen-data"])), 0);
    assert_eq!(code(&run(d, &["--config", c, "--out", "o", "pretrain"])), 0);
    assert_eq!(
        code(&run(d, &["--config", c, "--out", "o", "--resume", "o/checkpoint.bin", "finetune"])),
        0
    );
    let o = d.join("o");
    for f in [
        "config.txt",
        "data/dataset.jsonl",
        "data/captions.jsonl",
        "loss_warmup.csv",
        "loss_stage1.csv",
        "loss_stage2.csv",
        "checkpoint.bin",
        "frozen_checksum.log",
        "vocabulary.jsonl",
    ] {
        assert!(o.join(f).is_file(), "missing {f}");
    }
    // The frozen LM checksum is logged after pretraining and after
    // finetuning, and the two agree.
    let log = fs::read_to_string(o.join("frozen_checksum.log")).unwrap();
    let sums: Vec<&str> = log.lines().filter_map(|l| l.split_whitespace().last()).collect();
    assert!(sums.len() >= 2, "{log}");
    assert!(sums.windows(2).all(|w| w[0] == w[1]), "{log}");

    for (flag, file) in [
        (Some("--ap-only"), "eval_ap.json"),
        (Some("--no-tto"), "eval_ap_tp.json"),
        (None, "eval_ap_tp_tto.json"),
    ] {
        let mut args = vec!["--config", c, "--out", "o", "--resume", "o/checkpoint.bin"];
        args.extend(flag);
        args.push("eval");
        let out = run(d, &args);
        assert_eq!(code(&out), 0);
        let report = json(&o.join(file));
        let closed = report["overall"]["closed_exact"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&closed));
        let printed: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
        assert_eq!(printed, report);
    }

    let image = fs::read_dir(o.join("data/images"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.to_string_lossy().contains("test-"))
        .unwrap();
    let args = [
        "--config",
        c,
        "--out",
        "o",
        "--resume",
        "o/checkpoint.bin",
        "infer",
        image.to_str().unwrap(),
        "is the image quality sufficient",
    ];
    assert_eq!(code(&run(d, &args)), 0);
    let first = json(&o.join("infer.json"));
    assert_eq!(first["tto"]["loss_trace"].as_array().unwrap().len(), 6);
    assert_eq!(code(&run(d, &args)), 0);
    assert_eq!(json(&o.join("infer.json")), first);
}

#[test]
fn gen_data_is_deterministic() {
    let (dir, cfg) = setup("");
    let c = cfg.to_str().unwrap();
    for out in ["a", "b"] {
        assert_eq!(code(&run(dir.path(), &["--config", c, "--out", out, "gen-data"])), 0);
    }
    for f in ["dataset.jsonl", "captions.jsonl"] {
        let a = fs::read(dir.path().join("a/data").join(f)).unwrap();
        let b = fs::read(dir.path().join("b/data").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
}

#[test]
fn oracle_eval_scores_one() {
    let (dir, cfg) = setup("eval_oracle = true\n");
    let c = cfg.to_str().unwrap();
    assert_eq!(code(&run(dir.path(), &["--config", c, "--out", "o", "--no-tto", "eval"])), 0);
    let r = json(&dir.path().join("o/eval_ap_tp.json"));
    assert_eq!(r["overall"]["closed_exact"].as_f64(), Some(1.0));
    assert_eq!(r["overall"]["open_recall"].as_f64(), Some(1.0));
}

#[test]
fn gradcheck_passes_and_reports_injected_faults() {
    let (dir, cfg) = setup("");
    let c = cfg.to_str().unwrap();
    let ok = run(dir.path(), &["--config", c, "--out", "o", "gradcheck"]);
    assert_eq!(code(&ok), 0);
    let report = json(&dir.path().join("o/gradcheck.json"));
    assert!(report["injected_fault"].is_null());
    assert!(report["rows"].as_array().unwrap().iter().all(|r| r["passed"] == true));

    let (dir, cfg) = setup("gradcheck_inject_fault = layer_norm\n");
    let bad = run(dir.path(), &["--config", cfg.to_str().unwrap(), "--out", "o", "gradcheck"]);
    assert_eq!(code(&bad), 5);
    let report = json(&dir.path().join("o/gradcheck.json"));
    assert_eq!(report["injected_fault"], "layer_norm");
    assert!(report["rows"].as_array().unwrap().iter().any(|r| r["passed"] == false));
}

#[test]
fn exit_codes_follow_the_error_class() {
    // Unknown config key.
    let (dir, cfg) = setup("lm_dimz = 3\n");
    let out = run(dir.path(), &["--config", cfg.to_str().unwrap(), "--out", "o", "gen-data"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("lm_dimz"));

    let (dir, cfg) = setup("");
    let d = dir.path();
    let c = cfg.to_str().unwrap();
    // Finetune without a checkpoint, and with a missing one.
    assert_eq!(code(&run(d, &["--config", c, "--out", "o", "finetune"])), 3);
    assert_eq!(
        code(&run(d, &["--config", c, "--out", "o", "--resume", "nope.bin", "finetune"])),
        3
    );

    // A checkpoint from a different configuration.
    assert_eq!(code(&run(d, &["--config", c, "--out", "o", "pretrain"])), 0);
    let other = d.join("other.cfg");
    fs::write(&other, format!("{TINY}lm_dim = 32\n")).unwrap();
    let o = other.to_str().unwrap();
    assert_eq!(
        code(&run(d, &["--config", o, "--out", "p", "--resume", "o/checkpoint.bin", "finetune"])),
        3
    );

    // Missing image and a truncated image.
    let infer = |img: &str| {
        code(&run(
            d,
            &["--config", c, "--out", "o", "--resume", "o/checkpoint.bin", "--no-tto", "infer", img, "is the image quality sufficient"],
        ))
    };
    assert_eq!(infer("missing.f32"), 4);
    fs::write(d.join("short.f32"), [0u8; 7]).unwrap();
    assert_eq!(infer("short.f32"), 4);
}
