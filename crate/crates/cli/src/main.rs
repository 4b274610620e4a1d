//! `spectre` command-line tool.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "spectre", version, about = "Masked spectral pre-training for multi-channel EMG")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
pub struct ConfigArgs {
    /// JSON run configuration.
    #[arg(short = 'c', long = "config")]
    pub config: Option<PathBuf>,
    /// Override a configuration value, e.g. `--set model.d=32`. Repeatable;
    /// later values win.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate, preprocess and write the synthetic train and test sets.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Training set path; the test set goes to `paths.test_data`.
        #[arg(short = 'o', long)]
        out: Option<PathBuf>,
    },
    /// Fit the K-means codebook on the training set.
    Codebook {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(short = 'o', long)]
        out: Option<PathBuf>,
        /// Number of clusters (sets `model.codebook_size`).
        #[arg(long)]
        k: Option<usize>,
        /// K-means seed (sets `seeds.data`).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Masked pseudo-label pre-training.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Kinematics fine-tuning, from the pre-trained checkpoint unless
    /// `pretrain_target` is `none`.
    Finetune {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate the fine-tuned checkpoint on the test set.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Position encoding × pre-training target grid.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Summarise a dataset, codebook or checkpoint file.
    Inspect { path: PathBuf },
    /// Print the rotary frequency table of the configured model.
    InspectRope {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth { cfg, out } => commands::synth(cfg.with("paths.train_data", out)),
        Command::Codebook { cfg, data, out, k, seed } => commands::codebook(
            cfg.with("paths.train_data", data)
                .with("paths.codebook", out)
                .with("model.codebook_size", k)
                .with("seeds.data", seed),
        ),
        Command::Pretrain { cfg } => commands::pretrain(cfg),
        Command::Finetune { cfg } => commands::finetune(cfg),
        Command::Eval { cfg } => commands::eval(cfg),
        Command::Ablate { cfg } => commands::ablate(cfg),
        Command::Inspect { path } => commands::inspect(&path),
        Command::InspectRope { cfg } => commands::inspect_rope(cfg),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

impl ConfigArgs {
    /// Convenience flags become `--set` entries placed before the explicit ones.
    fn with<T: serde::Serialize>(mut self, key: &str, value: Option<T>) -> Self {
        if let Some(v) = value {
            let v = serde_json::to_string(&v).expect("flag value serialises");
            self.set.insert(0, format!("{key}={v}"));
        }
        self
    }
}
