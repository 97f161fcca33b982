//! Command-line entry point.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};

use crate::ablation::{report_failures, run_ablation, threads_from_env, AblationOptions, AblationSpec};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::gradsuite::{run_gradient_suite, SUITE_INSTANCES};
use crate::model::Model;
use crate::synth::{generate_dataset, read_dataset, ShiftParams, ShiftSpec, Splits};
use crate::toy2d::{run_toy2d, write_toy2d_csv, Toy2dConfig};
use crate::trainer::{run_experiment_to_dir, write_json, ExperimentConfig};

#[derive(Debug, Parser)]
#[command(name = "tia", version, about = "Inconsistency-alignment domain adaptation lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate source/target train/test splits.
    Gen {
        /// Shift spec JSON file, inline JSON, or `default`.
        #[arg(long)]
        spec: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one experiment; writes metrics.csv, model.json and eval.json.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a saved model on a split CSV or a directory of splits.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an ablation spec and write the results table.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check every op and loss gradient against central differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = SUITE_INSTANCES)]
        instances: usize,
    },
    /// Per-classifier decisions on a 2-D problem, as CSV.
    Toy2d {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        iterations: Option<usize>,
    },
}

fn load_spec(arg: &str) -> Result<ShiftSpec> {
    if arg == "default" {
        ShiftSpec::build(&ShiftParams::default())
    } else if arg.trim_start().starts_with('{') {
        ShiftSpec::from_json(arg)
    } else {
        ShiftSpec::load(Path::new(arg))
    }
}

fn ablation_cell_dir(out: &Path) -> PathBuf {
    let stem = out.file_stem().map_or_else(|| "ablation".into(), |s| s.to_string_lossy().into_owned());
    out.with_file_name(format!("{stem}_cells"))
}

fn run(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Gen { spec, seed, out } => {
            let spec = load_spec(&spec)?;
            let splits = generate_dataset(&spec, seed)?;
            splits.write_dir(&out)?;
            let path = out.join("spec.json");
            std::fs::write(&path, spec.to_json()).map_err(|e| Error::io(&path, e))?;
            eprintln!("wrote 4 splits to {}", out.display());
        }
        Command::Train { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let start = Instant::now();
            let r = run_experiment_to_dir(&cfg, &out)?;
            eprintln!(
                "{} seed {}: target acc {:.4}, loc mse {:.4} ({:.1}s)",
                cfg.mode,
                cfg.seed,
                r.final_eval.target.accuracy,
                r.final_eval.target.loc_mse,
                start.elapsed().as_secs_f64()
            );
        }
        Command::Eval { model, data, out } => {
            let model = Model::load(&model)?;
            if data.is_dir() {
                let splits = Splits::read_dir(&data)?;
                let report = EvalReport {
                    source: evaluate(&model, &splits.source_test)?,
                    target: evaluate(&model, &splits.target_test)?,
                };
                write_json(&out, &report)?;
            } else {
                write_json(&out, &evaluate(&model, &read_dataset(&data)?)?)?;
            }
        }
        Command::Ablate { config, out } => {
            let spec = AblationSpec::load(&config)?;
            let splits = spec.base.load_data()?;
            let options = AblationOptions {
                threads: threads_from_env()?,
                cell_dir: Some(ablation_cell_dir(&out)),
            };
            let table = run_ablation(&spec, &splits, &options)?;
            table.write_csv(&out)?;
            let _ = report_failures(&table, &mut std::io::stderr());
        }
        Command::Gradcheck { seed, instances } => {
            if instances == 0 {
                return Err(Error::invalid("--instances must be positive"));
            }
            let start = Instant::now();
            let report = run_gradient_suite(seed, instances)?;
            let mut stdout = std::io::stdout().lock();
            for c in &report.cases {
                let status = if c.passed() { "ok" } else { "FAIL" };
                let _ = writeln!(
                    stdout,
                    "{:<4} {:<20} {:>4} instances, {} failed, max rel error {:.2e}",
                    status, c.name, c.instances, c.failures, c.max_rel_error
                );
            }
            eprintln!("gradient suite finished in {:.1}s", start.elapsed().as_secs_f64());
            if !report.passed() {
                eprintln!("gradient suite failed at tolerance {:e}", report.tolerance);
                return Ok(2);
            }
        }
        Command::Toy2d { out, seed, iterations } => {
            let mut cfg = Toy2dConfig::default();
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(i) = iterations {
                cfg.iterations = i;
            }
            let r = run_toy2d(&cfg)?;
            write_toy2d_csv(&r, &out)?;
        }
    }
    Ok(0)
}

/// Parses `argv` (including the program name) and runs the command.
/// Returns 0 on success, 1 on invalid input, 2 on a runtime failure.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_1() {
        assert_eq!(cli_main(["tia"]), 1);
        assert_eq!(cli_main(["tia", "bogus"]), 1);
        assert_eq!(cli_main(["tia", "train", "--config", "/nonexistent/cfg.json", "--out", "/tmp/x"]), 1);
        assert_eq!(cli_main(["tia", "gen", "--spec", "{not json", "--out", "/tmp/x"]), 1);
    }

    #[test]
    fn help_exits_0() {
        assert_eq!(cli_main(["tia", "--help"]), 0);
    }

    #[test]
    fn cell_dir_next_to_table() {
        assert_eq!(ablation_cell_dir(Path::new("/a/b/t4.csv")), PathBuf::from("/a/b/t4_cells"));
    }
}
