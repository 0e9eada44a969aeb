use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mada::cli::{self, EvalRequest, RunConfig};
use mada::gradcheck::GradCheckConfig;
use mada::ProbeConfig;

#[derive(Parser, Debug)]
#[command(name = "mada", version, about = "Multi-adversarial domain adaptation runs")]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the configured dataset as CSV files.
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one model per seed and write metrics, checkpoints and a summary.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated seeds, overriding the config.
        #[arg(long, value_delimiter = ',')]
        seed: Option<Vec<u64>>,
    },
    /// Evaluate a checkpoint on feature CSVs.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Feature CSV (repeatable); rows are split by their domain column.
        #[arg(long, required = true)]
        data: Vec<PathBuf>,
        /// Ground-truth labels of the target rows.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Also compute the proxy A-distance between source and target features.
        #[arg(long)]
        adist: bool,
        /// Write bottleneck embeddings to this CSV.
        #[arg(long)]
        export: Option<PathBuf>,
        /// Optional run config; its `[train.probe]` table configures `--adist`.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write the report as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Check analytic gradients of every objective against finite differences.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        seed: Option<Vec<u64>>,
    },
}

fn load_config(path: &PathBuf) -> Result<RunConfig, ExitCode> {
    RunConfig::load(path).map_err(|e| {
        eprintln!("error: {e}");
        ExitCode::from(2)
    })
}

fn fail(e: mada::Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(cli::exit_code(&e) as u8)
}

fn print_json<T: serde::Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn run(args: Args) -> Result<ExitCode, ExitCode> {
    match args.command {
        Command::Gen { config, out } => {
            let cfg = load_config(&config)?;
            let out = out.unwrap_or_else(|| cfg.out_dir.clone());
            let summary = cli::cmd_gen(&cfg, &out).map_err(fail)?;
            print_json(&summary);
            Ok(ExitCode::SUCCESS)
        }
        Command::Train { config, out, seed } => {
            let mut cfg = load_config(&config)?;
            if let Some(seeds) = seed {
                cfg.seeds = seeds;
            }
            let out = out.unwrap_or_else(|| cfg.out_dir.clone());
            let summary = cli::cmd_train(&cfg, &out).map_err(fail)?;
            print_json(&summary);
            Ok(if summary.failed() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            })
        }
        Command::Eval {
            checkpoint,
            data,
            truth,
            adist,
            export,
            config,
            out,
            seed,
        } => {
            let mut probe = match &config {
                Some(p) => load_config(p)?.train.probe,
                None => ProbeConfig::default(),
            };
            if let Some(s) = seed {
                probe.seed = s;
            }
            let req = EvalRequest {
                checkpoint,
                data,
                target_truth: truth,
                adist,
                export,
                probe,
            };
            let report = cli::cmd_eval(&req).map_err(fail)?;
            print_json(&report);
            if let Some(path) = out {
                let text = serde_json::to_string_pretty(&report).expect("serializable") + "\n";
                std::fs::write(&path, text).map_err(|e| {
                    eprintln!("error: writing {}: {e}", path.display());
                    ExitCode::from(1)
                })?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck { config, seed } => {
            let mut cfg = match &config {
                Some(p) => load_config(p)?.gradcheck,
                None => GradCheckConfig::default(),
            };
            if let Some(seeds) = seed {
                cfg.seeds = seeds;
            }
            let report = cli::cmd_gradcheck(&cfg).map_err(fail)?;
            for r in &report.records {
                for g in &r.groups {
                    println!(
                        "{:<12} seed {:<4} {:<18} max rel err {:.3e}",
                        r.algorithm, r.seed, g.group, g.max_relative_error
                    );
                }
            }
            if let Some(d) = report.k1_mada_dann_max_diff {
                println!("K=1 mada vs dann max gradient gap {d:.3e}");
            }
            println!(
                "{} (tolerance {:.0e})",
                if report.passed { "PASS" } else { "FAIL" },
                report.tolerance
            );
            Ok(if report.passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            })
        }
    }
}

fn main() -> ExitCode {
    match run(Args::parse()) {
        Ok(c) | Err(c) => c,
    }
}
