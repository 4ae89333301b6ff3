mod commands;
mod config;
mod failure;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use egospk::eval::{PeftKind, TestSource, TrainSource};

use crate::commands::FinetuneArgs;
use crate::config::RunConfig;

#[derive(Parser)]
#[command(name = "egospk", version, about = "Child/adult speaker classification on egocentric recordings")]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic two-device session corpus.
    GenCorpus {
        #[arg(long)]
        sessions: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Also write this many unlabeled utterances into `<out>/pretrain`.
        #[arg(long)]
        pretrain_utterances: Option<usize>,
    },
    /// Detect speech regions in a WAV file or a directory of WAV files.
    Vad {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Drop whole recordings shorter than this.
        #[arg(long)]
        min_duration_s: Option<f64>,
    },
    /// Self-supervised pre-training of a backbone.
    Pretrain {
        /// Utterance directory, or a corpus containing `pretrain/`.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-validated fine-tuning of one experiment.
    Finetune {
        #[arg(long)]
        corpus: PathBuf,
        /// `scratch` or a pre-trained backbone checkpoint.
        #[arg(long, default_value = "scratch")]
        backbone: String,
        #[arg(long, default_value = "both")]
        train_source: TrainSource,
        #[arg(long, default_value = "child")]
        test_source: TestSource,
        #[arg(long, default_value = "none")]
        peft: PeftKind,
        #[arg(long, default_value_t = 1.0)]
        ratio: f64,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a fine-tuning output directory or a single classifier checkpoint.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        folds: Option<usize>,
        /// Channel(s) to test on when `--model` is a single checkpoint.
        #[arg(long, default_value = "child")]
        test_source: TestSource,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the experiment matrix and write its reports.
    Reproduce {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Pre-trained backbone; pre-trains one when absent.
        #[arg(long)]
        backbone: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated subset of table1,table2,fig5,fig6,table3.
        #[arg(long, value_delimiter = ',')]
        experiments: Option<Vec<String>>,
    },
    /// Print the resolved configuration as TOML.
    Config,
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::GenCorpus { sessions, seed, out, pretrain_utterances } => {
            if let Some(n) = sessions {
                cfg.corpus.sessions = n;
            }
            if let Some(s) = seed {
                cfg.corpus.seed = s;
            }
            cfg.corpus.pretrain_utterances = pretrain_utterances.unwrap_or(0);
            commands::gen_corpus(&cfg, &out)
        }
        Command::Vad { input, out, min_duration_s } => commands::vad(&cfg, &input, &out, min_duration_s),
        Command::Pretrain { corpus, epochs, lr, seed, out } => {
            if let Some(e) = epochs {
                cfg.pretrain.epochs = e;
            }
            if let Some(l) = lr {
                cfg.pretrain.lr = l;
            }
            if let Some(s) = seed {
                cfg.run.seed = s;
            }
            commands::pretrain_cmd(&cfg, &corpus, &out)
        }
        Command::Finetune { corpus, backbone, train_source, test_source, peft, ratio, lr, seed, out } => {
            let args = FinetuneArgs { backbone, train_source, test_source, peft, ratio, lr, seed };
            commands::finetune_cmd(&cfg, &corpus, &args, &out)
        }
        Command::Evaluate { model, corpus, folds, test_source, out } => {
            commands::evaluate_cmd(&cfg, &model, &corpus, folds, test_source, &out)
        }
        Command::Reproduce { corpus, out, backbone, seed, experiments } => {
            if let Some(s) = seed {
                cfg.run.seed = s;
            }
            if let Some(e) = experiments {
                cfg.reproduce.experiments = e;
            }
            commands::reproduce_cmd(&cfg, &corpus, backbone.as_deref(), &out)
        }
        Command::Config => {
            print!("{}", cfg.to_toml()?);
            Ok(())
        }
    }
}

/// Keeps freed memory in the process heap. Training allocates and frees many
/// large tape buffers per step; with glibc's defaults they are returned to
/// the kernel and faulted back in on every step.
#[cfg(all(target_os = "linux", target_env = "gnu"))]
fn tune_allocator() {
    // SAFETY: mallopt only adjusts allocator parameters; it runs before any
    // other thread exists.
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TOP_PAD, 256 << 20);
    }
}

#[cfg(not(all(target_os = "linux", target_env = "gnu")))]
fn tune_allocator() {}

fn main() -> ExitCode {
    tune_allocator();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = failure::classify(&e);
            log::error!("{e:#}");
            eprintln!("{}", failure::error_line(&e, kind));
            ExitCode::from(kind.exit_code() as u8)
        }
    }
}
