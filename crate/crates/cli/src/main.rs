//! `glied`: synthesize data, train, evaluate, caption, inspect attention
//! and audit parameter counts.

mod commands;
mod manifest;
mod report;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "glied", version, about = "GLIED cross-modal caption decoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PhaseArg {
    Xe,
    Scst,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene dataset.
    SynthData {
        #[arg(long, env = "GLIED_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2000)]
        n_train: usize,
        #[arg(long, default_value_t = 200)]
        n_val: usize,
        #[arg(long, default_value_t = 200)]
        n_test: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model with cross-entropy or self-critical sequence training.
    Train {
        /// Directory with train.jsonl and optionally val.jsonl.
        #[arg(long)]
        data: PathBuf,
        /// Variant name: base, base+gvd, base+gad, base+gd, base+local, glied.
        #[arg(long, default_value = "glied")]
        model: String,
        #[arg(long, value_enum, default_value = "xe")]
        phase: PhaseArg,
        /// JSON file overriding `model`, `xe`, `scst` and `min_count`.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Starting checkpoint; required for SCST.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Overrides every seed in the configuration.
        #[arg(long, env = "GLIED_SEED")]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score beam-search captions against the references.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 3)]
        beam: usize,
        /// Scene file for structured scores; defaults to scenes.jsonl next
        /// to the data when present.
        #[arg(long)]
        scenes: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
    },
    /// Caption every image of a JSONL feature file.
    Caption {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 3)]
        beam: usize,
        /// Output JSONL; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump one image's attention distributions as JSON and SVG.
    InspectAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        image_id: String,
        #[arg(long, default_value_t = 3)]
        beam: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Print the parameter breakdown and the base-vs-GLIED comparison.
    Params {
        #[arg(long, default_value = "glied")]
        model: String,
        /// JSON object overriding fields of the full-scale configuration.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::SynthData {
            seed,
            n_train,
            n_val,
            n_test,
            noise,
            out,
        } => commands::synth_data(seed, n_train, n_val, n_test, noise, &out),
        Command::Train {
            data,
            model,
            phase,
            config,
            init,
            seed,
            out,
        } => commands::train(&data, &model, phase, config.as_deref(), init.as_deref(), seed, &out),
        Command::Evaluate {
            checkpoint,
            data,
            beam,
            scenes,
            report,
        } => commands::evaluate(&checkpoint, &data, beam, scenes.as_deref(), &report),
        Command::Caption {
            checkpoint,
            input,
            beam,
            out,
        } => commands::caption(&checkpoint, &input, beam, out.as_deref()),
        Command::InspectAttention {
            checkpoint,
            data,
            image_id,
            beam,
            out_dir,
        } => commands::inspect_attention(&checkpoint, &data, &image_id, beam, &out_dir),
        Command::Params { model, config } => commands::params(&model, config.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
