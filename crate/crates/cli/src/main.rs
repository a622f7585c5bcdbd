mod commands;
mod config;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};
use ppgnas::eval::{Objective, Stage, DEFAULT_CUTOFF_COEF};

use config::ConfigArgs;

#[derive(Parser)]
#[command(
    name = "ppgnas",
    version,
    about = "Search, prune and quantize 1D CNNs for PPG-based blood pressure estimation"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum ObjectiveArg {
    Sbp,
    Dbp,
    Both,
}

impl From<ObjectiveArg> for Objective {
    fn from(o: ObjectiveArg) -> Self {
        match o {
            ObjectiveArg::Sbp => Objective::Sbp,
            ObjectiveArg::Dbp => Objective::Dbp,
            ObjectiveArg::Both => Objective::Both,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic cohort as per-subject `time,ppg,abp` CSVs.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        subjects: usize,
        #[arg(long, default_value_t = 120.0)]
        seconds: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Std of a per-subject pressure offset invisible in the PPG, mmHg.
        #[arg(long, default_value_t = 0.0)]
        offset_sd: f64,
    },
    /// Align, window and screen records; write windows and subject folds.
    Preprocess {
        /// Directory of per-subject CSV records.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "windows.json")]
        windows: PathBuf,
        #[arg(long, default_value = "splits.json")]
        splits: PathBuf,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        #[arg(long, default_value_t = 0.2)]
        val_frac: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// JSON overriding the plausibility thresholds.
        #[arg(long)]
        preprocess_config: Option<PathBuf>,
    },
    /// Train the seed, then sweep the architecture search over its lambda grid.
    Nas(ConfigArgs),
    /// Structured pruning sweep on the models picked from earlier fronts.
    Prune(ConfigArgs),
    /// Mixed-precision search sweep on the models picked from earlier fronts.
    Mps(ConfigArgs),
    /// Per-subject fine-tuning of a trained model on test-fold subjects.
    Finetune {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Model directory, e.g. `runs/mps/nas_lam03/lam02`.
        #[arg(long)]
        model: PathBuf,
        /// Only this subject (default: every test subject of the fold).
        #[arg(long)]
        subject: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Test-fold MAE, per-subject statistics and the AAMI check.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export a quantized model directory to the integer container.
    Export {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Integer-only inference on a window file.
    RunInt {
        /// Directory written by `export`.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        windows: PathBuf,
        #[arg(long)]
        subject: Vec<String>,
        #[arg(long, default_value_t = DEFAULT_CUTOFF_COEF)]
        cutoff_coef: f64,
        #[arg(long, default_value = "predictions.csv")]
        out: PathBuf,
    },
    /// Per-layer tables and cost listings for every stored model.
    Summarize {
        #[arg(long, default_value = "runs")]
        out_dir: PathBuf,
    },
    /// Combined cost/error front over all stages as CSV and SVG.
    Pareto {
        #[arg(long, default_value = "runs")]
        out_dir: PathBuf,
        #[arg(long, value_enum, default_value = "both")]
        objective: ObjectiveArg,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().cmd {
        Cmd::SynthData {
            out,
            subjects,
            seconds,
            seed,
            offset_sd,
        } => commands::synth_data(&out, subjects, seconds, seed, offset_sd),
        Cmd::Preprocess {
            input,
            windows,
            splits,
            folds,
            val_frac,
            seed,
            preprocess_config,
        } => commands::preprocess(&commands::PreprocessArgs {
            input: &input,
            windows: &windows,
            splits: &splits,
            folds,
            val_frac,
            seed,
            preprocess_config: preprocess_config.as_deref(),
        }),
        Cmd::Nas(c) => commands::stage(&c, Stage::Nas),
        Cmd::Prune(c) => commands::stage(&c, Stage::Pit),
        Cmd::Mps(c) => commands::stage(&c, Stage::Mps),
        Cmd::Finetune {
            cfg,
            model,
            subject,
            out,
        } => commands::finetune(&cfg, &model, subject.as_deref(), out.as_deref()),
        Cmd::Eval { cfg, model, out } => commands::eval(&cfg, &model, out.as_deref()),
        Cmd::Export { model, out } => commands::export(&model, &out),
        Cmd::RunInt {
            model,
            windows,
            subject,
            cutoff_coef,
            out,
        } => commands::run_int(&model, &windows, &subject, cutoff_coef, &out),
        Cmd::Summarize { out_dir } => commands::summarize_cmd(&out_dir),
        Cmd::Pareto { out_dir, objective } => commands::pareto(&out_dir, objective.into()),
    }
}
