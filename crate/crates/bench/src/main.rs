use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use saea_bench::commands::{self, EvolveFile, FitBenchConfig};
use saea_bench::report::{self, FitTime};
use saea_bench::{resolve_data_dir, BenchError, DATA_DIR_ENV};
use saea_core::{Schema, SplitSpec, SurrogateKind};

#[derive(Parser)]
#[command(name = "saea", version, about = "Surrogate-assisted neuroevolution benchmarks")]
struct Cli {
    /// Directory holding the raw UCI files [default: data/raw]
    #[arg(long, global = true, env = DATA_DIR_ENV)]
    data_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Binarize, split and normalize a dataset; print its phenotype length.
    Prepare {
        /// Dataset name, or `all`
        #[arg(long)]
        dataset: String,
        /// Split seed
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "data/prepared")]
        out: PathBuf,
    },
    /// Time a surrogate fit on an initial population of trained networks.
    FitBench {
        #[arg(long)]
        dataset: String,
        #[arg(long)]
        surrogate: SurrogateKind,
        #[arg(long, default_value_t = 100)]
        samples: usize,
        #[arg(long, default_value_t = 2)]
        pls_components: usize,
        #[arg(long, default_value_t = commands::DEFAULT_BUDGET_SECS)]
        budget_secs: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Training epochs per network
        #[arg(long)]
        epochs: Option<usize>,
        /// Report CSV to append to
        #[arg(long, default_value = "bench.csv")]
        out: PathBuf,
    },
    /// Run the surrogate-assisted evolution described by a TOML config.
    Evolve {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `evolution.seed`
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from a checkpoint written by an earlier run
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Tabulate fit-bench reports by dataset and surrogate.
    Report {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        /// Also write a long-form CSV for plotting
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                BenchError::Usage(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}

fn execute(cli: Cli) -> Result<ExitCode, BenchError> {
    let data_dir = resolve_data_dir(cli.data_dir.as_deref());
    match cli.command {
        Command::Prepare { dataset, seed, out } => {
            let names: Vec<String> = if dataset == "all" {
                Schema::builtin_names().map(String::from).collect()
            } else {
                vec![dataset]
            };
            let split = SplitSpec {
                seed,
                ..SplitSpec::default()
            };
            for name in names {
                let s = commands::prepare(&data_dir, &name, &split, &out)?;
                println!(
                    "{}: {} train / {} test instances, {} classes, d = {}",
                    s.dataset, s.n_train, s.n_test, s.n_classes, s.d
                );
            }
        }
        Command::FitBench {
            dataset,
            surrogate,
            samples,
            pls_components,
            budget_secs,
            seed,
            epochs,
            out,
        } => {
            let mut cfg = FitBenchConfig::new(&dataset, surrogate);
            cfg.samples = samples;
            cfg.pls_components = pls_components;
            cfg.budget_secs = Some(budget_secs);
            cfg.seed = seed;
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            let result = commands::fit_bench(&data_dir, &cfg)?;
            commands::record(&out, &result)?;
            let r = &result.row;
            let fit = match r.fit {
                FitTime::Seconds(s) => format!("fit {s:.3} s"),
                FitTime::Timeout => format!("TIMEOUT after {budget_secs} s"),
            };
            println!(
                "{} {} d = {} m = {}: {fit}, training {:.3} s, {} likelihood evaluations",
                r.dataset, r.surrogate, r.d, r.m, r.train_seconds, result.meta.evaluations
            );
        }
        Command::Evolve {
            config,
            seed,
            resume,
            out,
        } => {
            let mut file = EvolveFile::load(&config)?;
            if let Some(s) = seed {
                file.evolution.seed = s;
            }
            let result = commands::evolve(&data_dir, &file, &out, resume.as_deref())?;
            if let Some(last) = result.log.generations.last() {
                println!(
                    "generation {}: best {:.4}, archive {}",
                    last.generation, last.best_fitness, last.archive_size
                );
            }
            match &result.error {
                None => {}
                Some(e) if result.timed_out() => println!("TIMEOUT: run aborted: {e}"),
                Some(e) => {
                    eprintln!("error: run aborted: {e}");
                    return Ok(ExitCode::FAILURE);
                }
            }
            println!("logs written to {}", out.display());
        }
        Command::Report { files, out } => {
            let rows = commands::load_reports(&files)?;
            print!("{}", report::render_table(&rows));
            if let Some(path) = out {
                std::fs::write(&path, report::plot_csv(&rows)).map_err(|e| BenchError::File {
                    path: path.clone(),
                    message: e.to_string(),
                })?;
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
