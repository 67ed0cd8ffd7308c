use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ccprompt::analysis::Mode;
use ccprompt::commands::{self, Overrides};
use ccprompt::config::parse_seeds;
use ccprompt::encoder::AdapterRegistry;
use ccprompt::{Ablations, Error, Result};

#[derive(Parser)]
#[command(
    name = "ccprompt",
    version,
    about = "Contrastive-attribute prompt tuning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train over the configured learning rates and seeds.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "K")]
        k: Option<usize>,
        /// Comma-separated seeds.
        #[arg(long)]
        seeds: Option<String>,
        /// Comma-separated: no_conatt, no_prototypes, no_lcon, no_siamese.
        #[arg(long)]
        ablation: Option<String>,
    },
    /// Score a checkpoint on a split and print metrics JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// train, dev, test, or a JSONL path.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Write K-shot episode manifests.
    SampleEpisodes {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "train")]
        split: String,
        /// Comma-separated K values.
        #[arg(long = "K", default_value = "1,2,4,8,16,32")]
        k: String,
        #[arg(long, default_value = "13,21,42,87,100")]
        seeds: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Counterfact frequency table and token highlighting report.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value = "fact")]
        mode: String,
        #[arg(long, default_value_t = 5)]
        cases: usize,
        /// Defaults to the checkpoint's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn seeds(key: &str, s: &str) -> Result<Vec<u64>> {
    parse_seeds(s).map_err(|_| Error::config(key, format!("bad seed list {s:?}")))
}

fn run(cli: Cli) -> Result<()> {
    let registry = AdapterRegistry::default();
    match cli.command {
        Command::Train {
            config,
            k,
            seeds: s,
            ablation,
        } => {
            let overrides = Overrides {
                k,
                seeds: s.map(|s| seeds("seeds", &s)).transpose()?,
                ablations: ablation.map(|a| Ablations::parse_list(&a)).transpose()?,
            };
            let out = commands::cmd_train(&config, &overrides, &registry)?;
            println!("{}", serde_json::to_string_pretty(&out.metrics)?);
            eprintln!("checkpoint: {}", out.checkpoint.display());
        }
        Command::Eval { checkpoint, split } => {
            let m = commands::cmd_eval(&checkpoint, &split, &registry)?;
            println!("{}", serde_json::to_string_pretty(&m)?);
        }
        Command::SampleEpisodes {
            config,
            split,
            k,
            seeds: s,
            out,
        } => {
            let ks = k
                .split(',')
                .map(|v| {
                    v.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::config("K", format!("bad K {v:?}")))
                })
                .collect::<Result<Vec<_>>>()?;
            for p in commands::cmd_sample_episodes(
                &config,
                &split,
                &ks,
                &seeds("seeds", &s)?,
                out.as_deref(),
            )? {
                println!("{}", p.display());
            }
        }
        Command::Analyze {
            checkpoint,
            split,
            mode,
            cases,
            out,
        } => {
            let mode: Mode = mode.parse()?;
            let out = out.unwrap_or_else(|| {
                checkpoint
                    .parent()
                    .map_or_else(|| PathBuf::from("."), |p| p.to_path_buf())
            });
            let a = commands::cmd_analyze(&checkpoint, &split, mode, cases, &out, &registry)?;
            print!("{}", a.report);
            eprintln!("report: {}", a.markdown.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
