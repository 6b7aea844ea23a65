//! Command-line interface: prepare datasets, train, evaluate, verify
//! derivatives, export generated filters, and eyeball images as ASCII.

use clap::{Args, Parser, Subcommand};
use ctxconv::config::{Overrides, RunConfig};
use ctxconv::error::{Error, Result};
use ctxconv::{data, gradsuite, runner};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "ctxconv",
    version,
    about = "Transformation-invariant digit classification with input-conditioned convolution filters"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file (flat key = value lines).
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the config's master seed.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Overrides the run directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Overrides the number of transformation branches.
    #[arg(long, value_name = "N")]
    channels: Option<usize>,
    /// Overrides the number of training epochs.
    #[arg(long, value_name = "N")]
    epochs: Option<u64>,
    /// Stratified subset size applied to both train and test sets.
    #[arg(long, value_name = "N")]
    subset: Option<usize>,
    /// Read amat pixel rows as column-major planes.
    #[arg(long)]
    transpose_amat: bool,
}

impl Common {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        cfg.apply_overrides(&Overrides {
            seed: self.seed,
            out: self.out.clone(),
            channels: self.channels,
            epochs: self.epochs,
            subset: self.subset,
            transpose_amat: self.transpose_amat,
        });
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Materialize the configured datasets (synthesis included) into
    /// the run directory as reusable containers.
    Prepare {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model, or resume it if the run directory already holds a
    /// checkpoint. Logs one JSON record per epoch.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate the run's checkpoint on the configured test set.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Evaluate even if the config's transformation set differs
        /// from the one the checkpoint was trained with.
        #[arg(long)]
        allow_phi_mismatch: bool,
    },
    /// Compare every derivative against central finite differences and
    /// run a deliberately corrupted control check.
    Gradcheck,
    /// Run the trained filter generator over test samples and export
    /// the flattened banks as CSV, reporting centroid separability.
    ExportFilters {
        #[command(flatten)]
        common: Common,
        /// Samples drawn per class.
        #[arg(long, value_name = "N", default_value_t = 200)]
        per_class: usize,
    },
    /// Print dataset images as ASCII art to verify orientation.
    DumpAscii {
        #[command(flatten)]
        common: Common,
        /// Amat text file or prepared container to read directly
        /// (otherwise the config's training set is shown).
        #[arg(value_name = "FILE")]
        file: Option<PathBuf>,
        /// How many images to print.
        #[arg(long, value_name = "N", default_value_t = 3)]
        count: usize,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version are not failures; everything else is usage.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(i32::from(e.exit_code()));
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare { common } => {
            let cfg = common.config()?;
            let (train, test) = runner::prepare(&cfg)?;
            println!("wrote {}", train.display());
            println!("wrote {}", test.display());
        }
        Command::Train { common } => {
            let cfg = common.config()?;
            let (train, test) = runner::load_datasets(&cfg)?;
            println!(
                "training on {} samples ({}), testing on {} ({})",
                train.len(),
                train.meta(),
                test.len(),
                test.meta()
            );
            let report = runner::train_run(&cfg, &train, &test, |line| println!("{line}"))?;
            if let Some(epoch) = report.resumed_from {
                println!("resumed from epoch {epoch}");
            }
            match report.final_test_error {
                Some(err) => println!("final test error: {err:.2}%"),
                None => println!("run was already complete; checkpoint untouched"),
            }
            println!("checkpoint: {}", report.checkpoint.display());
        }
        Command::Eval {
            common,
            allow_phi_mismatch,
        } => {
            let cfg = common.config()?;
            let report = runner::eval_checkpoint(&cfg, allow_phi_mismatch)?;
            println!(
                "error: {:.2}% ({} samples, {})",
                report.error_percent, report.samples, report.dataset
            );
            println!("wrote {}", runner::run_paths(&cfg.out).eval.display());
        }
        Command::Gradcheck => {
            let reports = gradsuite::full_suite()?;
            let mut all_ok = true;
            for r in &reports {
                let ok = r.passes(gradsuite::TOLERANCE);
                all_ok &= ok;
                println!("{} {r}", if ok { "pass" } else { "FAIL" });
            }
            let control = gradsuite::negative_control()?;
            let caught = !control.passes(gradsuite::TOLERANCE);
            println!(
                "{} {control}",
                if caught { "pass (detected)" } else { "FAIL (missed)" }
            );
            if !all_ok || !caught {
                return Err(Error::Numeric(
                    "derivative verification failed; see the lines above".into(),
                ));
            }
            println!("all {} checks passed, control detected", reports.len());
        }
        Command::ExportFilters { common, per_class } => {
            let cfg = common.config()?;
            let report = runner::export_filters_csv(&cfg, per_class)?;
            for (class, available) in &report.shortfalls {
                eprintln!("note: class {class} has only {available} samples");
            }
            println!(
                "exported {} filter vectors to {}",
                report.rows,
                report.csv.display()
            );
            println!(
                "centroid accuracy: {:.2}%",
                report.centroid_accuracy_percent
            );
        }
        Command::DumpAscii {
            common,
            file,
            count,
        } => {
            let ds = match &file {
                Some(path) => load_for_dump(path, common.transpose_amat)?,
                None => runner::load_datasets(&common.config()?)?.0,
            };
            println!("{} samples ({})", ds.len(), ds.meta());
            for i in 0..count.min(ds.len()) {
                println!("{}", data::ascii_plane(&ds, i)?);
            }
        }
    }
    Ok(())
}

/// Reads a standalone file for `dump-ascii`: a prepared container
/// (recognized by magic) or otherwise amat text.
fn load_for_dump(path: &PathBuf, transpose: bool) -> Result<data::Dataset> {
    let mut magic = [0u8; 8];
    {
        use std::io::Read;
        let mut f = std::fs::File::open(path)?;
        let _ = f.read(&mut magic)?;
    }
    if &magic == b"CTXCONV\0" {
        data::Dataset::load(path)
    } else {
        data::load_amat(path, transpose)
    }
}
