//! End-to-end runs: corpus synthesis, codec + transformer training with
//! checkpointing and resume, held-out evaluation, the three-strategy
//! ablation, and attention analysis. Every run is deterministic under its
//! seed: sample selection, dropout, and samplers draw from named streams
//! keyed by step or sample id, never from shared sequential state.

use crate::attention::{dump_attention, LayerHeatmap};
use crate::checkpoint::{Checkpoint, OptState};
use crate::codec::{quantize, Codebook, CodecParams, CodecTrainer};
use crate::datagen::{filter, read_manifest, write_corpus, EditSample, ManifestEntry, MockJudge, Synthesizer};
use crate::error::{Error, Result};
use crate::evalkit::{aggregate as aggregate_scores, synthetic_scores, Report};
use crate::inference::{generate, SamplerConfig};
use crate::model::{capture_heatmaps, forward_cached, Model, TrainItem};
use crate::rng::indexed_stream;
use crate::runcfg::RunConfig;
use crate::schedule::{attention_cost, layout_sequence, Strategy};
use crate::train::{lr_at, AdamW};
use rand::Rng;
use rayon::prelude::*;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Where training and evaluation samples come from.
pub enum CorpusHandle {
    Synth {
        synth: Synthesizer,
        count: u64,
        holdout: u64,
    },
    Dir {
        dir: PathBuf,
        entries: Vec<ManifestEntry>,
        holdout: u64,
    },
}

impl CorpusHandle {
    pub fn open(cfg: &RunConfig) -> Result<CorpusHandle> {
        match &cfg.corpus.dir {
            Some(dir) => {
                let entries = read_manifest(dir)?;
                if (entries.len() as u64) < cfg.corpus.holdout + 1 {
                    return Err(Error::Data(format!(
                        "corpus at {} has {} entries, fewer than holdout {} + 1",
                        dir.display(),
                        entries.len(),
                        cfg.corpus.holdout
                    )));
                }
                Ok(CorpusHandle::Dir {
                    dir: dir.clone(),
                    entries,
                    holdout: cfg.corpus.holdout,
                })
            }
            None => Ok(CorpusHandle::Synth {
                synth: Synthesizer::new(cfg.schedule.resolution, cfg.seed, &cfg.corpus.ops)?,
                count: cfg.corpus.count,
                holdout: cfg.corpus.holdout,
            }),
        }
    }

    pub fn train_count(&self) -> u64 {
        match self {
            CorpusHandle::Synth { count, .. } => *count,
            CorpusHandle::Dir { entries, holdout, .. } => entries.len() as u64 - holdout,
        }
    }

    pub fn holdout_ids(&self) -> Vec<u64> {
        match self {
            CorpusHandle::Synth { count, holdout, .. } => (*count..count + holdout).collect(),
            CorpusHandle::Dir { entries, holdout, .. } => {
                let n = entries.len() as u64;
                (n - holdout..n).collect()
            }
        }
    }

    pub fn get(&self, id: u64) -> Result<EditSample> {
        match self {
            CorpusHandle::Synth { synth, .. } => Ok(synth.sample(id)),
            CorpusHandle::Dir { dir, entries, .. } => entries
                .get(id as usize)
                .ok_or_else(|| Error::Data(format!("corpus id {id} out of range")))?
                .load(dir),
        }
    }
}

/// Quantize one sample into a teacher-forced item.
pub fn item_of(
    codec: &CodecParams,
    codebook: &Codebook,
    schedule: &crate::schedule::ScaleSchedule,
    sample: &EditSample,
    drop_text: bool,
) -> Result<TrainItem> {
    let src = quantize(&codec.encode(&sample.source.to_float())?, codebook, schedule)?;
    let tgt = quantize(&codec.encode(&sample.target.to_float())?, codebook, schedule)?;
    Ok(TrainItem {
        src_stack: src,
        tgt_stack: tgt,
        instruction: sample.instruction.clone(),
        drop_text,
    })
}

/// Synthesize the configured corpus (train + holdout), run it through the
/// quality filter, and write images plus manifest under `dir`.
pub fn synth_cmd(cfg: &RunConfig, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    cfg.echo(dir)?;
    let synth = Synthesizer::new(cfg.schedule.resolution, cfg.seed, &cfg.corpus.ops)?;
    let total = cfg.corpus.count + cfg.corpus.holdout;
    let samples: Vec<EditSample> = (0..total)
        .into_par_iter()
        .map(|id| synth.sample(id))
        .collect();
    let (kept, dropped) = filter(samples, &MockJudge);
    let manifest = write_corpus(dir, &kept)?;
    let mut report = format!(
        "synthesized {total} samples at {}px: kept {}, dropped {}\n",
        cfg.schedule.resolution,
        kept.len(),
        dropped.len()
    );
    for (s, reason) in &dropped {
        report.push_str(&format!("dropped {}: {reason}\n", s.id));
    }
    let report_path = dir.join("synth_report.txt");
    std::fs::write(&report_path, report).map_err(|e| Error::io(&report_path, e))?;
    Ok(manifest)
}

pub struct TrainOutcome {
    pub ckpt_path: PathBuf,
    pub steps_run: usize,
    pub losses: Vec<(usize, f64)>,
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    use std::io::Write;
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Train the codec, then the transformer, under `cfg`, writing checkpoints
/// and a per-step loss log into `cfg.out_dir`. With `resume` the latest
/// checkpoint in the output directory is extended to the configured step
/// count.
pub fn train_cmd(cfg: &RunConfig, resume: bool) -> Result<TrainOutcome> {
    train_cmd_limited(cfg, resume, None)
}

/// [`train_cmd`] that optionally stops after `stop_after` steps without
/// touching the learning-rate schedule, simulating an interrupted run.
pub fn train_cmd_limited(
    cfg: &RunConfig,
    resume: bool,
    stop_after: Option<usize>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let out_dir = &cfg.out_dir;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    cfg.echo(out_dir)?;
    let corpus = CorpusHandle::open(cfg)?;
    let schedule = cfg.schedule.to_schedule()?;
    let model_config = cfg.model_config()?;
    let hyper = &cfg.train;
    let latest_path = out_dir.join("ckpt_latest.vare");

    let (mut model, codec, codebook, mut opt, start_step) = if resume {
        let ck = Checkpoint::load(&latest_path)?;
        if ck.config != model_config {
            return Err(Error::Config(
                "checkpoint configuration does not match this run config; refusing to resume"
                    .into(),
            ));
        }
        let mut model = Model::init(model_config.clone())?;
        model.params = ck.model;
        let opt = match ck.opt {
            Some(state) => AdamW::resume(state),
            None => AdamW::new(model.params.num_params()),
        };
        (model, ck.codec, ck.codebook, opt, ck.step as usize)
    } else {
        // Codec phase: joint autoencoder + codebook training on corpus
        // images, then frozen for the transformer phase.
        let codec = CodecParams::init(model_config.codebook_dim, cfg.seed);
        let codebook = Codebook::init(
            model_config.codebook_size,
            model_config.codebook_dim,
            cfg.seed,
        )?;
        let mut trainer =
            CodecTrainer::new(codec, codebook, schedule.clone(), hyper.codec_lr, cfg.seed)
                .with_schedule(hyper.codec_steps);
        let codec_log = out_dir.join("codec_loss.log");
        let train_count = corpus.train_count();
        for step in 1..=hyper.codec_steps {
            let mut stream = indexed_stream(cfg.seed, "codec-order", step as u64);
            let ids: Vec<u64> = (0..hyper.codec_batch)
                .map(|_| stream.gen_range(0..train_count))
                .collect();
            let mut batch = Vec::with_capacity(ids.len() * 2);
            for id in ids {
                let sample = corpus.get(id)?;
                batch.push(sample.source.to_float());
                batch.push(sample.target.to_float());
            }
            let loss = trainer.step(&batch)?;
            append_line(
                &codec_log,
                &format!(
                    "{step}\t{:.6}\t{:.6}\t{:.6}\n",
                    loss.reconstruction, loss.codebook, loss.commitment
                ),
            )?;
        }
        let model = Model::init(model_config.clone())?;
        let opt = AdamW::new(model.params.num_params());
        (model, trainer.params, trainer.codebook, opt, 0usize)
    };

    let loss_log = out_dir.join("loss.log");
    let train_count = corpus.train_count();
    let mut losses = Vec::new();
    let mut last_ckpt = latest_path.clone();
    let end_step = stop_after.map_or(hyper.steps, |s| s.min(hyper.steps));
    for step in start_step + 1..=end_step {
        let t0 = Instant::now();
        let mut order = indexed_stream(cfg.seed, "order", step as u64);
        let ids: Vec<u64> = (0..hyper.batch_size)
            .map(|_| order.gen_range(0..train_count))
            .collect();
        let mut dropout = indexed_stream(cfg.seed, "dropout", step as u64);
        let drops: Vec<bool> = (0..hyper.batch_size)
            .map(|_| dropout.gen_range(0.0..1.0) < hyper.cfg_dropout)
            .collect();
        let jobs: Vec<(u64, bool)> = ids.into_iter().zip(drops).collect();
        let results: Vec<Result<(f64, crate::model::ModelParams)>> = jobs
            .par_iter()
            .map(|&(id, drop)| {
                let sample = corpus.get(id)?;
                let item = item_of(&codec, &codebook, &schedule, &sample, drop)?;
                model.train_grads(&codebook, &item)
            })
            .collect();
        let mut grad_acc = model.zeros_like();
        let mut loss_acc = 0.0;
        for r in results {
            let (loss, grads) = r?;
            loss_acc += loss;
            grad_acc.add_scaled(&grads, 1.0 / hyper.batch_size as f64);
        }
        let loss = loss_acc / hyper.batch_size as f64;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss at step {step}")));
        }
        let lr = lr_at(step, hyper);
        opt.step(&mut model.params, &grad_acc, lr, hyper.weight_decay);
        if !model.params.is_finite() {
            return Err(Error::Numeric(format!("non-finite parameters at step {step}")));
        }
        let elapsed_ms = t0.elapsed().as_secs_f64() * 1e3;
        append_line(
            &loss_log,
            &format!("{step}\t{loss:.6}\t{lr:.8}\t{elapsed_ms:.1}\n"),
        )?;
        losses.push((step, loss));

        if step % hyper.checkpoint_every == 0 || step == hyper.steps {
            let ck = Checkpoint {
                config: model_config.clone(),
                step: step as u64,
                model: model.params.clone(),
                codec: codec.clone(),
                codebook: codebook.clone(),
                opt: Some(OptState {
                    step: opt.state.step,
                    m: opt.state.m.clone(),
                    v: opt.state.v.clone(),
                }),
            };
            let step_path = out_dir.join(format!("ckpt_step{step}.vare"));
            ck.save(&step_path)?;
            ck.save(&latest_path)?;
            last_ckpt = step_path;
        }
    }
    Ok(TrainOutcome {
        ckpt_path: last_ckpt,
        steps_run: end_step.saturating_sub(start_step),
        losses,
    })
}

/// Evaluate a checkpoint on the held-out slice: generate an edit for every
/// sample, score it against the exact synthetic metrics, and aggregate per
/// op kind. Writes `report.txt` and `report.tsv` under `out_dir`.
pub fn eval_cmd(ck: &Checkpoint, cfg: &RunConfig, out_dir: &Path) -> Result<Report> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let corpus = CorpusHandle::open(cfg)?;
    let mut model = Model::init(ck.config.clone())?;
    model.params = ck.model.clone();
    let ids = corpus.holdout_ids();
    if ids.is_empty() {
        return Err(Error::Config("holdout is empty; nothing to evaluate".into()));
    }
    let scored: Vec<Result<(String, crate::evalkit::SampleScores)>> = ids
        .par_iter()
        .map(|&id| {
            let sample = corpus.get(id)?;
            let mut seed_stream = indexed_stream(cfg.seed, "eval-sampler", id);
            let sampler = SamplerConfig {
                cfg: cfg.sampler.cfg,
                temperature: cfg.sampler.temperature,
                seed: seed_stream.gen(),
            };
            let gen = generate(
                &model,
                &ck.codec,
                &ck.codebook,
                &sample.source,
                &sample.instruction,
                &sampler,
            )?;
            let scores = synthetic_scores(&sample, &gen.image)?;
            Ok((sample.op.name().to_string(), scores))
        })
        .collect();
    let mut rows = Vec::with_capacity(scored.len());
    for r in scored {
        rows.push(r?);
    }
    let report = aggregate_scores(&rows)?;
    let table_path = out_dir.join("report.txt");
    std::fs::write(&table_path, report.table()).map_err(|e| Error::io(&table_path, e))?;
    let tsv_path = out_dir.join("report.tsv");
    std::fs::write(&tsv_path, report.machine_lines()).map_err(|e| Error::io(&tsv_path, e))?;
    Ok(report)
}

pub struct StrategyRow {
    pub strategy: Strategy,
    pub report: Report,
    pub seq_len: usize,
    pub attn_pairs: u128,
    pub ckpt_path: PathBuf,
}

pub struct AblateOutcome {
    pub rows: Vec<StrategyRow>,
    pub params_per_model: usize,
    pub balance_ordering_ok: bool,
    pub overedit_ordering_ok: bool,
    pub report_text: String,
}

/// Train and evaluate all three conditioning strategies with shared seeds
/// and corpus, then emit the comparison table with the analytic sequence
/// and attention-cost columns.
pub fn ablate_cmd(cfg: &RunConfig) -> Result<AblateOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    cfg.echo(&cfg.out_dir)?;
    let schedule = cfg.schedule.to_schedule()?;
    let mut rows = Vec::new();
    let mut params_per_model = 0;
    let mut failures: Vec<String> = Vec::new();
    for strategy in Strategy::ALL {
        let sub = cfg.with_strategy(strategy, cfg.out_dir.join(strategy.name()));
        let run = || -> Result<StrategyRow> {
            let outcome = train_cmd(&sub, false)?;
            let ck = Checkpoint::load(&outcome.ckpt_path)?;
            let report = eval_cmd(&ck, &sub, &sub.out_dir)?;
            let layout = layout_sequence(&schedule, strategy);
            Ok(StrategyRow {
                strategy,
                report,
                seq_len: layout.total_len,
                attn_pairs: attention_cost(&layout, sub.model.layers),
                ckpt_path: outcome.ckpt_path,
            })
        };
        match run() {
            Ok(row) => {
                if params_per_model == 0 {
                    let model = Model::init(sub.model_config()?)?;
                    params_per_model = model.params.num_params();
                }
                rows.push(row);
            }
            Err(e) => failures.push(format!("{strategy:?}: {e}")),
        }
    }

    let find = |s: Strategy| rows.iter().find(|r| r.strategy == s);
    let (mut balance_ok, mut overedit_ok) = (false, false);
    if let (Some(full), Some(finest), Some(sar)) =
        (find(Strategy::Full), find(Strategy::Finest), find(Strategy::Sar))
    {
        balance_ok = sar.report.overall.balance >= finest.report.overall.balance
            && finest.report.overall.balance >= full.report.overall.balance - 0.5;
        overedit_ok = sar.report.overall.overedit >= finest.report.overall.overedit;
    }

    let mut text = String::from("conditioning-strategy ablation (shared seed and corpus)\n");
    text.push_str(&format!("params per model: {params_per_model}\n"));
    text.push_str(&format!(
        "{:<8} {:>7} {:>7} {:>7} {:>9} {:>14}\n",
        "setting", "Suc.", "Over.", "Bal.", "seq_len", "attn_pairs"
    ));
    for row in &rows {
        text.push_str(&format!(
            "{:<8} {:>7.3} {:>7.3} {:>7.3} {:>9} {:>14}\n",
            row.strategy.name(),
            row.report.overall.success,
            row.report.overall.overedit,
            row.report.overall.balance,
            row.seq_len,
            row.attn_pairs
        ));
    }
    for f in &failures {
        text.push_str(&format!("FAILED {f}\n"));
    }
    text.push_str(&format!(
        "balance ordering (sar >= finest >= full - 0.5): {}\n",
        if balance_ok { "PASS" } else { "FLAGGED" }
    ));
    text.push_str(&format!(
        "overedit ordering (sar >= finest): {}\n",
        if overedit_ok { "PASS" } else { "FLAGGED" }
    ));
    let path = cfg.out_dir.join("ablate_report.txt");
    std::fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
    Ok(AblateOutcome {
        rows,
        params_per_model,
        balance_ordering_ok: balance_ok,
        overedit_ordering_ok: overedit_ok,
        report_text: text,
    })
}

pub struct AttentionAnalysis {
    pub heatmaps: Vec<LayerHeatmap>,
    pub entropies: Vec<(usize, f64)>,
    pub files: Vec<PathBuf>,
}

/// Teacher-forced pass over one held-out sample, dumping per-layer
/// block-averaged heatmaps and the per-layer entropy of attention over
/// source-conditioning blocks.
pub fn analyze_attention_cmd(
    ck: &Checkpoint,
    cfg: &RunConfig,
    out_dir: &Path,
    sample_index: u64,
) -> Result<AttentionAnalysis> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let corpus = CorpusHandle::open(cfg)?;
    let ids = corpus.holdout_ids();
    let id = *ids
        .get(sample_index as usize)
        .ok_or_else(|| Error::Config(format!("sample index {sample_index} beyond holdout")))?;
    let sample = corpus.get(id)?;
    let mut model = Model::init(ck.config.clone())?;
    model.params = ck.model.clone();
    let item = item_of(&ck.codec, &ck.codebook, &ck.config.schedule, &sample, false)?;
    let text = model.text_condition(&item.instruction, false);
    let source = crate::model::source_features(&item.src_stack, &ck.codebook, ck.config.strategy)?;
    let seq = model.embed_inputs(&source, &item.tgt_stack, &ck.codebook, &text)?;
    let cache = forward_cached(&model, seq)?;
    let heatmaps = capture_heatmaps(&cache);
    let files = dump_attention(out_dir, &heatmaps)?;
    let entropies: Vec<(usize, f64)> = heatmaps
        .iter()
        .map(|hm| (hm.layer, hm.source_entropy()))
        .collect();
    let mut summary = String::from("layer\tsource_entropy\n");
    for (layer, h) in &entropies {
        summary.push_str(&format!("{layer}\t{h:.6}\n"));
    }
    let path = out_dir.join("entropy_summary.txt");
    std::fs::write(&path, summary).map_err(|e| Error::io(&path, e))?;
    Ok(AttentionAnalysis {
        heatmaps,
        entropies,
        files,
    })
}
