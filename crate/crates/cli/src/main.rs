//! Command-line entry points for the scaledit toolkit: corpus synthesis,
//! training, editing, the strategy ablation, attention and cost analysis,
//! and held-out evaluation.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
//! failure.

use clap::{Args, Parser, Subcommand};
use scaledit_core::checkpoint::Checkpoint;
use scaledit_core::error::Error;
use scaledit_core::img::Rgb8;
use scaledit_core::inference::{generate, SamplerConfig};
use scaledit_core::model::Model;
use scaledit_core::pipeline;
use scaledit_core::runcfg::RunConfig;
use scaledit_core::schedule::{cost_report, ScaleSchedule};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "scaledit",
    about = "Next-scale-prediction image editing at desk scale",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the instruction-edit corpus and write it with a manifest.
    Synth(SynthArgs),
    /// Train the codec and transformer under a run config.
    Train(TrainArgs),
    /// Apply an instruction to one image with a trained checkpoint.
    Edit(EditArgs),
    /// Train and evaluate all three conditioning strategies.
    Ablate(ConfigOnly),
    /// Attention and cost analysis tools.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
    /// Evaluate a checkpoint on the held-out corpus slice.
    Eval(EvalArgs),
}

#[derive(Args)]
struct ConfigOnly {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output corpus directory; defaults to <out_dir>/corpus.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Continue from the latest checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct EditArgs {
    /// Source image (PNG, side matching the checkpoint's resolution).
    #[arg(long)]
    input: PathBuf,
    /// Editing instruction text.
    #[arg(long)]
    instruction: String,
    /// Trained checkpoint.
    #[arg(long)]
    ckpt: PathBuf,
    /// Classifier-free guidance strength.
    #[arg(long, default_value_t = 4.0)]
    cfg: f64,
    /// Logits temperature (0 = argmax).
    #[arg(long, default_value_t = 0.5)]
    temp: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output image path.
    #[arg(long)]
    out: PathBuf,
    /// Optionally write the per-scale generation trace here.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Subcommand)]
enum AnalyzeCommand {
    /// Print the analytic attention-cost table for a schedule.
    Cost(CostArgs),
    /// Dump per-layer attention heatmaps and a source-entropy summary for
    /// a trained checkpoint on one held-out sample.
    Attention(AttentionArgs),
}

#[derive(Args)]
struct CostArgs {
    /// Run configuration supplying the schedule and layer count.
    #[arg(long, conflicts_with = "resolution")]
    config: Option<PathBuf>,
    /// Built-in schedule resolution (256 or 512) instead of a config.
    #[arg(long)]
    resolution: Option<usize>,
    /// Transformer depth for the per-layer cost sum.
    #[arg(long)]
    layers: Option<usize>,
}

#[derive(Args)]
struct AttentionArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to <out_dir>/attention.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Held-out sample index to analyze.
    #[arg(long, default_value_t = 0)]
    sample: u64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to <out_dir>/eval.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run(cli: Cli) -> scaledit_core::Result<()> {
    match cli.command {
        Command::Synth(args) => {
            let cfg = RunConfig::load(&args.config)?;
            let dir = args.out.unwrap_or_else(|| cfg.out_dir.join("corpus"));
            let manifest = pipeline::synth_cmd(&cfg, &dir)?;
            println!("corpus written: {}", manifest.display());
        }
        Command::Train(args) => {
            let cfg = RunConfig::load(&args.config)?;
            let outcome = pipeline::train_cmd(&cfg, args.resume)?;
            let last = outcome.losses.last().map(|(_, l)| *l).unwrap_or(f64::NAN);
            println!(
                "trained {} steps, final loss {:.4}, checkpoint {}",
                outcome.steps_run,
                last,
                outcome.ckpt_path.display()
            );
        }
        Command::Edit(args) => {
            let ck = Checkpoint::load(&args.ckpt)?;
            let mut model = Model::init(ck.config.clone())?;
            model.params = ck.model.clone();
            let source = Rgb8::load_png(&args.input)?;
            let sampler = SamplerConfig {
                cfg: args.cfg,
                temperature: args.temp,
                seed: args.seed,
            };
            let out = generate(
                &model,
                &ck.codec,
                &ck.codebook,
                &source,
                &args.instruction,
                &sampler,
            )?;
            out.image.save_png(&args.out)?;
            if let Some(trace_path) = args.trace {
                std::fs::write(&trace_path, out.trace.render())
                    .map_err(|e| Error::io(&trace_path, e))?;
            }
            println!("edited image written: {}", args.out.display());
        }
        Command::Ablate(args) => {
            let cfg = RunConfig::load(&args.config)?;
            let outcome = pipeline::ablate_cmd(&cfg)?;
            print!("{}", outcome.report_text);
            println!(
                "report written: {}",
                cfg.out_dir.join("ablate_report.txt").display()
            );
        }
        Command::Analyze(AnalyzeCommand::Cost(args)) => {
            let (schedule, layers) = match (&args.config, args.resolution) {
                (Some(path), _) => {
                    let cfg = RunConfig::load(path)?;
                    (
                        cfg.schedule.to_schedule()?,
                        args.layers.unwrap_or(cfg.model.layers),
                    )
                }
                (None, Some(res)) => (
                    ScaleSchedule::for_resolution(res)?,
                    args.layers.unwrap_or(1),
                ),
                (None, None) => {
                    return Err(Error::Config(
                        "analyze cost needs --config or --resolution".into(),
                    ))
                }
            };
            print!("{}", cost_report(&schedule, layers));
        }
        Command::Analyze(AnalyzeCommand::Attention(args)) => {
            let cfg = RunConfig::load(&args.config)?;
            let ck = Checkpoint::load(&args.ckpt)?;
            let dir = args.out.unwrap_or_else(|| cfg.out_dir.join("attention"));
            let analysis = pipeline::analyze_attention_cmd(&ck, &cfg, &dir, args.sample)?;
            println!("layer\tsource_entropy");
            for (layer, h) in &analysis.entropies {
                println!("{layer}\t{h:.6}");
            }
            println!("heatmaps written under {}", dir.display());
        }
        Command::Eval(args) => {
            let cfg = RunConfig::load(&args.config)?;
            let ck = Checkpoint::load(&args.ckpt)?;
            let dir = args.out.unwrap_or_else(|| cfg.out_dir.join("eval"));
            let report = pipeline::eval_cmd(&ck, &cfg, &dir)?;
            print!("{}", report.table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
