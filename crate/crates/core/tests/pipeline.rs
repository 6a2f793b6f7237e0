//! End-to-end pipeline tests: training progress, resume, corpus roundtrip,
//! evaluation, ablation reproducibility, and attention analysis.

use scaledit_core::checkpoint::Checkpoint;
use scaledit_core::pipeline::{
    ablate_cmd, analyze_attention_cmd, eval_cmd, synth_cmd, train_cmd, CorpusHandle,
};
use scaledit_core::runcfg::RunConfig;
use std::path::Path;

fn micro_config(out_dir: &Path, steps: usize, seed: u64) -> RunConfig {
    let text = format!(
        r#"
seed = {seed}
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
count = 160
holdout = 12
ops = {{ recolor = 0.6, remove = 0.4 }}

[train]
steps = {steps}
batch_size = 4
lr = 2e-3
warmup_steps = 5
codec_steps = 60
codec_batch = 4
checkpoint_every = 10
"#,
        out_dir.display()
    );
    RunConfig::parse(&text).unwrap()
}

#[test]
fn training_reduces_loss_and_logs_every_step() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = micro_config(&dir.path().join("run"), 40, 7);
    let outcome = train_cmd(&cfg, false).unwrap();
    assert_eq!(outcome.losses.len(), 40);
    let first = outcome.losses[0].1;
    let last5: f64 = outcome.losses[35..].iter().map(|(_, l)| l).sum::<f64>() / 5.0;
    assert!(
        last5 < first,
        "loss did not improve: first {first}, last-5 mean {last5}"
    );
    // Loss log: one step\tloss\tlr\telapsed_ms line per step.
    let log = std::fs::read_to_string(cfg.out_dir.join("loss.log")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 40);
    for (i, line) in lines.iter().enumerate() {
        let fields: Vec<&str> = line.split('\t').collect();
        assert_eq!(fields.len(), 4, "{line}");
        assert_eq!(fields[0].parse::<usize>().unwrap(), i + 1);
        fields[1].parse::<f64>().unwrap();
        fields[2].parse::<f64>().unwrap();
        fields[3].parse::<f64>().unwrap();
    }
    // Config echoed for provenance.
    assert!(cfg.out_dir.join("config_echo.toml").exists());
    assert!(cfg.out_dir.join("ckpt_latest.vare").exists());
    assert!(cfg.out_dir.join("ckpt_step40.vare").exists());
}

#[test]
fn resume_continues_the_loss_curve() {
    let dir = tempfile::tempdir().unwrap();
    // Uninterrupted 24 steps.
    let full_cfg = micro_config(&dir.path().join("full"), 24, 9);
    let full = train_cmd(&full_cfg, false).unwrap();
    // Same config interrupted after 12 steps (latest checkpoint is at 10),
    // then resumed to completion with identical seeds and step count.
    let half_cfg = micro_config(&dir.path().join("half"), 24, 9);
    scaledit_core::pipeline::train_cmd_limited(&half_cfg, false, Some(12)).unwrap();
    let resumed = train_cmd(&half_cfg, true).unwrap();
    assert_eq!(resumed.steps_run, 14); // resumes from the step-10 checkpoint
    // Steps 11..=24 of both runs agree within f32 checkpoint rounding.
    let full_tail: Vec<(usize, f64)> = full.losses[10..].to_vec();
    assert_eq!(resumed.losses.len(), full_tail.len());
    for ((sa, a), (sb, b)) in full_tail.iter().zip(&resumed.losses) {
        assert_eq!(sa, sb);
        assert!(
            (a - b).abs() < 0.02 * a.abs().max(1.0),
            "resume diverged at step {sa}: {a} vs {b}"
        );
    }
    // Resume against a different config is refused.
    let mut other = micro_config(&dir.path().join("half"), 30, 9);
    other.model.width = 16;
    assert!(train_cmd(&other, true).is_err());
}

#[test]
fn resume_without_checkpoint_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = micro_config(&dir.path().join("none"), 5, 1);
    assert!(train_cmd(&cfg, true).is_err());
}

#[test]
fn synth_corpus_roundtrip_trains_identically() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = micro_config(&dir.path().join("mem"), 6, 11);
    cfg.train.codec_steps = 20;
    let corpus_dir = dir.path().join("corpus");
    synth_cmd(&cfg, &corpus_dir).unwrap();
    // Same seed, same samples: training from the written corpus matches
    // training from in-memory synthesis bit for bit.
    let mem = train_cmd(&cfg, false).unwrap();
    let mut disk_cfg = micro_config(&dir.path().join("disk"), 6, 11);
    disk_cfg.train.codec_steps = 20;
    disk_cfg.corpus.dir = Some(corpus_dir);
    let disk = train_cmd(&disk_cfg, false).unwrap();
    for ((sa, la), (sb, lb)) in mem.losses.iter().zip(&disk.losses) {
        assert_eq!(sa, sb);
        assert_eq!(la, lb, "loss curves diverge at step {sa}");
    }
}

#[test]
fn eval_produces_reports_per_category() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = micro_config(&dir.path().join("run"), 12, 13);
    let outcome = train_cmd(&cfg, false).unwrap();
    let ck = Checkpoint::load(&outcome.ckpt_path).unwrap();
    let report = eval_cmd(&ck, &cfg, &cfg.out_dir).unwrap();
    assert_eq!(report.overall.count, 12);
    assert!(!report.categories.is_empty());
    let table = std::fs::read_to_string(cfg.out_dir.join("report.txt")).unwrap();
    assert!(table.contains("overall"));
    let tsv = std::fs::read_to_string(cfg.out_dir.join("report.tsv")).unwrap();
    assert!(tsv.lines().count() >= 2);
}

#[test]
fn ablation_reports_three_rows_and_reproduces_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = micro_config(&dir.path().join("ab1"), 8, 17);
    cfg.corpus.count = 60;
    cfg.corpus.holdout = 6;
    cfg.train.codec_steps = 25;
    let a = ablate_cmd(&cfg).unwrap();
    assert_eq!(a.rows.len(), 3);
    for name in ["full", "finest", "sar"] {
        assert!(a.report_text.contains(name), "{}", a.report_text);
    }
    // Cost columns present: full layout is longer than finest.
    let full = a.rows.iter().find(|r| r.strategy.name() == "full").unwrap();
    let finest = a.rows.iter().find(|r| r.strategy.name() == "finest").unwrap();
    assert!(full.seq_len > finest.seq_len);
    assert!(full.attn_pairs > finest.attn_pairs);

    let mut cfg2 = micro_config(&dir.path().join("ab2"), 8, 17);
    cfg2.corpus.count = 60;
    cfg2.corpus.holdout = 6;
    cfg2.train.codec_steps = 25;
    let b = ablate_cmd(&cfg2).unwrap();
    assert_eq!(a.report_text, b.report_text);
}

#[test]
fn attention_analysis_writes_heatmaps_and_entropies() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = micro_config(&dir.path().join("run"), 10, 19);
    cfg.strategy = scaledit_core::schedule::Strategy::Full;
    let outcome = train_cmd(&cfg, false).unwrap();
    let ck = Checkpoint::load(&outcome.ckpt_path).unwrap();
    let out = cfg.out_dir.join("attn");
    let analysis = analyze_attention_cmd(&ck, &cfg, &out, 0).unwrap();
    assert_eq!(analysis.heatmaps.len(), 2);
    assert_eq!(analysis.entropies.len(), 2);
    for l in 1..=2 {
        assert!(out.join(format!("attn_L{l}.mat")).exists());
    }
    assert!(out.join("entropy_summary.txt").exists());
    // Heatmap rows are normalized distributions.
    for hm in &analysis.heatmaps {
        for row in hm.rows.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn corpus_handle_validates() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = micro_config(&dir.path().join("x"), 5, 1);
    cfg.corpus.dir = Some(dir.path().join("missing"));
    assert!(CorpusHandle::open(&cfg).is_err());
}
