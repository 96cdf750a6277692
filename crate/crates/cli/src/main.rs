use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use cram_cli::compare::{check_order, load_rows, parse_order, table_text, write_csv};
use cram_cli::sweep::{summary_csv, summary_text, sweep};
use cram_cli::{execute, load_config, resolve_output_dir, CliError, CliResult, EXIT_CONFIG};
use cram_core::protocol::StrategyKind;

#[derive(Parser)]
#[command(name = "cram", version, about = "Continual learning over video with a refreshed compressed rehearsal buffer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute one configured run and write its ledger and metrics.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override a config key, e.g. `--set epochs.classifier=5`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Tabulate finished runs; optionally require a strategy ordering.
    Compare {
        #[arg(required = true, num_args = 2..)]
        dirs: Vec<PathBuf>,
        /// e.g. `cram>stale_cv>naive_sgd`; exits 4 when violated.
        #[arg(long)]
        assert_order: Option<String>,
        /// Minimum per-seed gap in accuracy points for `--assert-order`.
        #[arg(long, default_value_t = 0.0)]
        margin: f64,
        /// Also write the table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Run every seed x strategy pair and summarize per strategy.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long, value_delimiter = ',', required = true)]
        strategies: Vec<String>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
}

fn main() -> ExitCode {
    match dispatch(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(u8::try_from(e.code).unwrap_or(1))
        }
    }
}

fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::Run {
            config,
            set,
            strategy,
            seed,
        } => {
            let cfg = load_config(&config, &set, strategy.as_deref(), seed)?;
            let dir = resolve_output_dir(&cfg.output_dir);
            let m = execute(&cfg, &dir)?;
            println!(
                "{} seed {}: eval {:.2}  train {:.2}  avgf {}  -> {}",
                m.strategy,
                m.seed,
                m.final_avg_eval_acc,
                m.final_avg_train_acc,
                m.avgf_max.map_or_else(|| "n/a".into(), |f| format!("{f:.2}")),
                dir.display()
            );
            Ok(())
        }
        Command::Compare {
            dirs,
            assert_order,
            margin,
            csv,
        } => {
            let rows = load_rows(&dirs)?;
            print!("{}", table_text(&rows));
            if let Some(path) = csv {
                write_csv(&path, &rows)?;
            }
            if let Some(spec) = assert_order {
                check_order(&rows, &parse_order(&spec)?, margin)?;
                println!("order holds: {spec}");
            }
            Ok(())
        }
        Command::Sweep {
            config,
            seeds,
            strategies,
            jobs,
            set,
        } => {
            let cfg = load_config(&config, &set, None, None)?;
            let kinds = strategies
                .iter()
                .map(|s| StrategyKind::parse(s))
                .collect::<Result<Vec<_>, _>>()?;
            if seeds.is_empty() || kinds.is_empty() {
                return Err(CliError::new(EXIT_CONFIG, "sweep needs at least one seed and one strategy"));
            }
            let root = resolve_output_dir(&cfg.output_dir);
            let (summary, _) = sweep(&cfg, &seeds, &kinds, jobs, &root)?;
            let path = root.join("summary.csv");
            std::fs::write(&path, summary_csv(&summary)).map_err(|e| CliError::io(&path, e))?;
            print!("{}", summary_text(&summary));
            Ok(())
        }
    }
}
