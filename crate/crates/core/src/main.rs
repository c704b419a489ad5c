use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cvrlab::graph::Variant;
use cvrlab::harness::{
    cmd_eval, cmd_eval_oracle, cmd_gen, cmd_gradcheck, cmd_oracle_check, cmd_report, cmd_run,
    cmd_train, DatasetPaths, ExperimentConfig, HarnessError,
};

#[derive(Parser)]
#[command(name = "cvrlab", version, about = "Entire-space CVR modeling experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/test logs and manifests.
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory (default: <output_dir>/data).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one variant with one seed.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        variant: Variant,
        #[arg(long)]
        seed: u64,
        /// Dataset directory (default: <output_dir>/data).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint, or the ground-truth scorer, on the test log.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        /// Score with the generator's exact targets instead of a model.
        #[arg(long, conflicts_with = "checkpoint")]
        oracle: bool,
        /// Test log (default: <output_dir>/data/test.csv).
        #[arg(long)]
        test: Option<PathBuf>,
        /// Where metric files go (default: next to the checkpoint).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate per-run metrics into the comparison table.
    Report {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Generate, train and evaluate every variant and seed, then report.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Check closed-form composition against path enumeration.
    OracleCheck {
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Finite-difference check of the training gradients.
    Gradcheck {
        /// Variant to check (default: all).
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

fn load(path: Option<&Path>) -> Result<ExperimentConfig, HarnessError> {
    let config = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::desk_s(),
    };
    let config = config.with_env_override();
    config.validate()?;
    Ok(config)
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Gen { config, out } => {
            let config = load(config.as_deref())?;
            let dir = out.unwrap_or_else(|| config.data_dir());
            let s = cmd_gen(&config, &dir)?;
            for (name, m) in [("train", &s.train), ("test", &s.test)] {
                println!(
                    "{name}: {} impressions, {} clicks, {} dmi, {} dma, {} purchases",
                    m.record_count, m.clicks, m.dmi, m.dma, m.purchases
                );
            }
            println!("written to {}", s.paths.dir.display());
        }
        Command::Train {
            config,
            variant,
            seed,
            data,
        } => {
            let config = load(config.as_deref())?;
            let data = data.unwrap_or_else(|| config.data_dir());
            let out = cmd_train(&config, variant, seed, &data, &config.run_dir(variant, seed))?;
            println!(
                "{variant} seed {seed}: {} steps, loss {:.5} -> {:.5}",
                out.steps, out.initial_loss, out.final_loss
            );
            println!("checkpoint {}", out.checkpoint.display());
        }
        Command::Eval {
            config,
            checkpoint,
            oracle,
            test,
            out,
        } => {
            let config = load(config.as_deref())?;
            let test = test.unwrap_or_else(|| DatasetPaths::new(&config.data_dir()).test);
            let report = if oracle {
                let dir = out.unwrap_or_else(|| config.oracle_dir());
                cmd_eval_oracle(&config, &test, &dir)?
            } else {
                let ck = checkpoint.expect("required unless --oracle");
                let dir = out.unwrap_or_else(|| {
                    ck.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf)
                });
                cmd_eval(&ck, &test, config.training.precision, &dir)?
            };
            print!("{}", report.to_table());
        }
        Command::Report { config } => {
            let config = load(config.as_deref())?;
            print!("{}", cmd_report(&config)?.to_table());
        }
        Command::Run { config } => {
            let config = load(config.as_deref())?;
            let record = cmd_run(&config)?;
            let report = std::fs::read_to_string(config.output_dir.join("report.txt"))
                .unwrap_or_default();
            print!("{report}");
            println!(
                "{} runs in {:.1} s; config hash {}",
                record.runs.len(),
                record.wall_clock_seconds,
                record.config_hash
            );
        }
        Command::OracleCheck { samples, seed } => {
            let r = cmd_oracle_check(samples, seed)?;
            println!(
                "oracle-check: {} cases, max abs error {:e}: pass",
                r.cases, r.max_abs_error
            );
        }
        Command::Gradcheck {
            variant,
            batch,
            seed,
        } => {
            let variants = variant.map_or_else(|| Variant::ALL.to_vec(), |v| vec![v]);
            let reports = cmd_gradcheck(&variants, batch, seed)?;
            for (v, r) in reports {
                println!("gradcheck {v}: {r}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // usage errors are validation errors
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
