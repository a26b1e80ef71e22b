use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use zeroslide::cli::{self, CliError, RunOptions};

/// Lifelong-learning benchmark over bagged slide embeddings.
#[derive(Parser)]
#[command(name = "zeroslide", version)]
struct Args {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Write synthetic embeddings and prototypes described by a config.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every configured method, seed and fold.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to the config's output_dir.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Reuse completed jobs whose recorded files are intact.
        #[arg(long)]
        resume: bool,
    },
    /// Summarize a run directory and draw confidence boxplots.
    Report {
        /// Run directory holding results.csv.
        dir: PathBuf,
        /// Defaults to the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check binary files or a run directory's manifest.
    Validate {
        #[arg(required = true)]
        paths: Vec<PathBuf>,
    },
}

fn run(verb: Verb) -> Result<u8, CliError> {
    match verb {
        Verb::Generate { config, out } => {
            let plan = cli::parse_config(&config)?;
            for path in cli::generate(&plan, &out)? {
                println!("wrote {}", path.display());
            }
            Ok(0)
        }
        Verb::Run {
            config,
            out,
            workers,
            resume,
        } => {
            if workers == 0 {
                return Err(CliError::Usage("--workers must be at least 1".into()));
            }
            let plan = cli::parse_config(&config)?;
            let out = out.unwrap_or_else(|| plan.output_dir.clone());
            let summary = cli::run_experiment(&plan, &RunOptions { out, workers, resume })?;
            println!(
                "{} jobs computed, {} reused, {} failed",
                summary.computed,
                summary.skipped,
                summary.failed.len()
            );
            for (id, err) in &summary.failed {
                eprintln!("{id}: {err}");
            }
            Ok(if summary.failed.is_empty() { 0 } else { 2 })
        }
        Verb::Report { dir, out } => {
            let out = out.unwrap_or_else(|| dir.clone());
            let report = cli::emit_report(&dir, &out)?;
            print!("{}", report.text);
            for f in &report.files {
                println!("wrote {}", f.display());
            }
            Ok(0)
        }
        Verb::Validate { paths } => {
            let mut first_error = None;
            for path in paths {
                match cli::validate_file(&path) {
                    Ok(kind) => println!("{}: ok, {kind}", path.display()),
                    Err(e) => {
                        eprintln!("{}: {e}", path.display());
                        first_error.get_or_insert(e);
                    }
                }
            }
            match first_error {
                Some(e) => Err(e),
                None => Ok(0),
            }
        }
    }
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(3);
        }
    };
    match run(args.verb) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
