use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use mfm_cli::commands;
use mfm_cli::config::{CostConfig, CouplerConfig, CouplerName, SourceConfig};
use mfm_cli::{CliError, ExperimentConfig};

#[derive(Parser)]
#[command(name = "mfm", version, about = "Minibatch-coupled flow matching experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn load(&self) -> Result<ExperimentConfig, CliError> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a flow with the joint flow-matching loss.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Train every configured learning rate and keep the best.
        #[arg(long)]
        sweep_lr: bool,
    },
    /// Train a static map on coupled pairs.
    TrainStatic {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        sweep_lr: bool,
    },
    /// Evaluate a trained checkpoint.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Evaluate the static map instead of the flow.
        #[arg(long = "static")]
        static_map: bool,
    },
    /// Couple two CSV batches.
    Couple {
        #[arg(long)]
        x0: PathBuf,
        #[arg(long)]
        x1: PathBuf,
        #[arg(long, default_value = "batch_ot")]
        coupler: String,
        #[arg(long, default_value = "sqeuclidean")]
        cost: String,
        /// Relative entropic strength for batch_eot.
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        weight_seed: Option<u64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Coupling cost (and optionally flow cost) against the coupling batch size.
    SweepK {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Write samples from a synthetic distribution to CSV.
    GenData {
        /// checkerboard | standard_normal | gmm
        #[arg(long)]
        kind: String,
        #[arg(long, default_value_t = 2)]
        dim: usize,
        #[arg(long, default_value_t = 8)]
        centers: usize,
        #[arg(long, default_value_t = 4.0)]
        spread: f64,
        #[arg(long, default_value_t = 0.5)]
        std: f64,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train { run, sweep_lr } => {
            let cfg = run.load()?;
            let s = commands::cmd_train(&cfg, sweep_lr)?;
            println!("run_dir={} final_loss={}", s.run_dir.display(), s.outcome.final_loss());
        }
        Command::TrainStatic { run, sweep_lr } => {
            let cfg = run.load()?;
            let s = commands::cmd_train_static(&cfg, sweep_lr)?;
            println!("run_dir={} final_loss={}", s.run_dir.display(), s.outcome.final_loss());
        }
        Command::Eval {
            run,
            checkpoint,
            static_map,
        } => {
            let cfg = run.load()?;
            let s = commands::cmd_eval(&cfg, checkpoint.as_deref(), static_map)?;
            for r in &s.reports {
                println!("{} {} {} {}", r.name, r.value, r.stderr, r.n);
            }
        }
        Command::Couple {
            x0,
            x1,
            coupler,
            cost,
            epsilon,
            weight_seed,
            seed,
            out,
        } => {
            let coupler = CouplerConfig {
                epsilon,
                ..CouplerConfig::named(CouplerName::parse(&coupler)?)
            };
            let cost = CostConfig {
                weight_seed,
                ..CostConfig::named(&cost)
            };
            let s = commands::cmd_couple(&x0, &x1, &coupler, &cost, seed, &out)?;
            println!("{}", serde_json::to_string(&s.diagnostics)?);
        }
        Command::SweepK { run } => {
            let cfg = run.load()?;
            for r in commands::cmd_sweep_k(&cfg)? {
                println!("{} {} {} {}", r.k, r.kind, r.mean, r.stderr);
            }
        }
        Command::GenData {
            kind,
            dim,
            centers,
            spread,
            std,
            n,
            seed,
            out,
        } => {
            let source = match kind.as_str() {
                "checkerboard" => SourceConfig::Checkerboard,
                "standard_normal" => SourceConfig::StandardNormal { dim },
                "gmm" => SourceConfig::RandomGmm {
                    dim,
                    centers,
                    spread,
                    std,
                    seed,
                },
                other => return Err(CliError::Usage(format!("unknown data kind {other:?}")).into()),
            };
            commands::cmd_gen_data(&source, n, seed, &out)
                .with_context(|| format!("writing {}", out.display()))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("error kind=usage code=1: {}", first.trim_start_matches("error: "));
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.downcast_ref::<CliError>().map_or(1, CliError::exit_code);
            let kind = match code {
                2 => "numerical",
                3 => "io",
                _ => "usage",
            };
            // our error types already embed their source in Display
            let mut msg = String::new();
            for cause in e.chain() {
                let s = cause.to_string();
                if !msg.contains(&s) {
                    if !msg.is_empty() {
                        msg.push_str(": ");
                    }
                    msg.push_str(&s);
                }
            }
            let msg = msg.replace('\n', " ");
            eprintln!("error kind={kind} code={code}: {msg}");
            ExitCode::from(code as u8)
        }
    }
}
