//! Command-line driver for the condensation pipeline.
//!
//! Every subcommand reads a flat `key = value` config (optional), applies
//! `--set` overrides and `--seed`, and works inside the `--out` directory.
//! Failures print one `error: kind=<kind> code=<n> message=<text>` line to
//! stderr and exit with the error's code.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use moe_condense::pipeline::{self, render_text, RunConfig};
use moe_condense::{Error, Result};

#[derive(Parser)]
#[command(name = "moe-condense", version, about = "Condense routed MoE layers into small dense layers")]
struct Cli {
    /// Run configuration (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Artifact directory.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a fresh model on the synthetic corpus.
    Pretrain,
    /// Draw the calibration set and record routing statistics.
    Calibrate,
    /// Choose kept experts for every routed layer.
    SelectExperts,
    /// Choose which layers to condense.
    SelectLayers,
    /// Write the condensed checkpoint.
    Condense,
    /// Fine-tune the condensed layers.
    Sft,
    /// Held-out perplexity and cost of a checkpoint.
    Eval {
        /// Checkpoint directory; defaults to the latest one under `--out`.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Per-layer divergence sweep.
    Sweep,
    /// Collect all artifacts into report.json and report.txt.
    Report,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let text = cli.overrides.join("\n");
    let mut errs = cfg.apply_text(&text);
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if errs.is_empty() {
        errs = cfg.validation_errors();
    }
    if errs.is_empty() {
        Ok(cfg)
    } else {
        Err(Error::Config(errs))
    }
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let out: &Path = &cli.out;
    match &cli.command {
        Command::Pretrain => {
            pipeline::pretrain(&cfg, out)?;
            println!("wrote {}", out.join(pipeline::PRETRAINED_DIR).display());
        }
        Command::Calibrate => {
            let cal = pipeline::calibrate(&cfg, out)?;
            println!("calibration {} ({} sequences)", cal.fingerprint(), cal.sequences.len());
        }
        Command::SelectExperts => {
            let rec = pipeline::select_experts(&cfg, out)?;
            for (b, keep) in rec.plan.keep.iter().enumerate() {
                println!("block {b}: keep {keep:?}");
            }
        }
        Command::SelectLayers => {
            let rec = pipeline::select_layers(&cfg, out)?;
            println!("condense layers {:?}", rec.chosen);
        }
        Command::Condense => {
            let model = pipeline::condense(&cfg, out)?;
            println!(
                "{} with condensed layers {:?}",
                pipeline::variant_label(&model),
                pipeline::condensed_blocks(&model)
            );
        }
        Command::Sft => {
            pipeline::sft(&cfg, out)?;
            println!("wrote {}", out.join(pipeline::SFT_DIR).display());
        }
        Command::Eval { model } => {
            let r = pipeline::eval(&cfg, out, model.as_deref())?;
            println!(
                "{} perplexity {:.4} memory_ratio {:.4} speedup_estimate {:.4}",
                r.variant, r.perplexity, r.cost.memory_ratio, r.cost.speedup_estimate
            );
        }
        Command::Sweep => {
            for row in pipeline::sweep(&cfg, out)? {
                println!("layer {} js {:.6} kl {:.6} ppl_delta {:.6}", row.layer_index, row.js, row.kl, row.ppl_delta);
            }
        }
        Command::Report => {
            print!("{}", render_text(&pipeline::report(&cfg, out)?));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = e.to_string().replace('\n', " ");
            eprintln!("error: kind={} code={} message={}", e.kind(), e.exit_code(), message);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
