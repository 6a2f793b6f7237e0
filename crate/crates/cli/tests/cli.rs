//! Binary-level tests: exit codes, the synth/train/edit/analyze round
//! trip, and output formats.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_scaledit"))
}

fn write_config(dir: &Path, steps: usize) -> std::path::PathBuf {
    let out_dir = dir.join("run");
    let text = format!(
        r#"
seed = 5
out_dir = "{}"
strategy = "sar"

[schedule]
resolution = 64
grids = [[1, 1], [2, 2], [4, 4]]

[model]
width = 32
layers = 2
heads = 2
codebook_size = 24
codebook_dim = 4
text_width = 16
text_vocab = 64

[sampler]
cfg = 2.0
temperature = 0.0

[corpus]
count = 120
holdout = 8
ops = {{ recolor = 0.6, remove = 0.4 }}

[train]
steps = {steps}
batch_size = 4
lr = 2e-3
warmup_steps = 5
codec_steps = 50
codec_batch = 4
checkpoint_every = 10
"#,
        out_dir.display()
    );
    let path = dir.join("config.toml");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn invalid_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "seed = 1\nmystery = true\n").unwrap();
    let out = bin().args(["train", "--config"]).arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(2), "{out:?}");
}

#[test]
fn missing_checkpoint_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 5);
    let out = bin()
        .args(["eval", "--ckpt"])
        .arg(dir.path().join("nope.vare"))
        .args(["--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "{out:?}");
}

#[test]
fn analyze_cost_prints_strategy_table() {
    let out = bin()
        .args(["analyze", "cost", "--resolution", "256", "--layers", "2"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("full"), "{text}");
    assert!(text.contains("finest"));
    assert!(text.contains("sar"));
    assert!(text.contains("1043"));
    assert!(text.contains("778"));
}

#[test]
fn full_cli_roundtrip_train_edit_eval_analyze() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), 12);
    let run_dir = dir.path().join("run");

    let out = bin().args(["train", "--config"]).arg(&cfg_path).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = run_dir.join("ckpt_latest.vare");
    assert!(ckpt.exists());

    // Synth a corpus directory too.
    let out = bin().args(["synth", "--config"]).arg(&cfg_path).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run_dir.join("corpus/manifest.tsv").exists());

    // Edit one of the corpus images with the documented flag set.
    let manifest = std::fs::read_to_string(run_dir.join("corpus/manifest.tsv")).unwrap();
    let first = manifest.lines().next().unwrap();
    let src_rel = first.split('\t').nth(1).unwrap();
    let input = run_dir.join("corpus").join(src_rel);
    let edited = dir.path().join("edited.png");
    let trace = dir.path().join("edit.trace");
    let out = bin()
        .args(["edit", "--input"])
        .arg(&input)
        .args(["--instruction", "change the red square to blue", "--ckpt"])
        .arg(&ckpt)
        .args(["--cfg", "4", "--temp", "0.5", "--seed", "3", "--out"])
        .arg(&edited)
        .args(["--trace"])
        .arg(&trace)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let img = scaledit_core::img::Rgb8::load_png(&edited).unwrap();
    assert_eq!((img.width, img.height), (64, 64));
    let trace_text = std::fs::read_to_string(&trace).unwrap();
    assert!(trace_text.contains("scale1"), "{trace_text}");
    assert!(trace_text.contains("decode"));

    // Determinism: the same edit twice is byte-identical.
    let edited2 = dir.path().join("edited2.png");
    let out = bin()
        .args(["edit", "--input"])
        .arg(&input)
        .args(["--instruction", "change the red square to blue", "--ckpt"])
        .arg(&ckpt)
        .args(["--cfg", "4", "--temp", "0.5", "--seed", "3", "--out"])
        .arg(&edited2)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(
        std::fs::read(&edited).unwrap(),
        std::fs::read(&edited2).unwrap()
    );

    // Eval writes reports.
    let out = bin()
        .args(["eval", "--ckpt"])
        .arg(&ckpt)
        .args(["--config"])
        .arg(&cfg_path)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8(out.stdout).unwrap().contains("overall"));
    assert!(run_dir.join("eval/report.tsv").exists());

    // Attention analysis writes one matrix per layer.
    let out = bin()
        .args(["analyze", "attention", "--ckpt"])
        .arg(&ckpt)
        .args(["--config"])
        .arg(&cfg_path)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run_dir.join("attention/attn_L1.mat").exists());
    assert!(run_dir.join("attention/attn_L2.mat").exists());

    // Resume training two more steps.
    let longer = std::fs::read_to_string(&cfg_path)
        .unwrap()
        .replace("steps = 12", "steps = 14");
    std::fs::write(&cfg_path, longer).unwrap();
    let out = bin()
        .args(["train", "--config"])
        .arg(&cfg_path)
        .args(["--resume"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
