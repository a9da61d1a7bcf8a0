//! `lwdistill`: train teachers, distill students and run seed sweeps from a
//! TOML run config.
//!
//! Exit codes: 0 on success, 1 when the config is invalid or unreadable,
//! 2 when a run fails (diverged training, malformed files, I/O).

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lwdistill::checkpoint::load_checkpoint;
use lwdistill::config::RunConfig;
use lwdistill::engine::evaluate;
use lwdistill::experiment;
use lwdistill::metrics::{read_metrics, write_long_format};
use lwdistill::{Error, Result};

#[derive(Parser)]
#[command(name = "lwdistill", version, about = "Knowledge distillation with layer-wise learning-rate adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured teacher and save it to the checkpoint directory.
    TrainTeacher { config: PathBuf },
    /// Distill the configured student, writing metrics and a student checkpoint.
    /// The teacher checkpoint is reused if present, otherwise trained first.
    Distill { config: PathBuf },
    /// Report train and test loss/accuracy of a saved model.
    Eval { checkpoint: PathBuf, config: PathBuf },
    /// Run every method × scheduler mode over the given seeds and print
    /// mean and standard deviation of final test accuracy.
    Sweep {
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        /// Write the summary here instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Convert a metrics CSV to long format (epoch,split,metric,value).
    PlotData {
        metrics: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn sink(path: Option<&PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainTeacher { config } => {
            let cfg = RunConfig::load(&config)?;
            let data = cfg.load_dataset()?;
            let (_, results) = experiment::train_teacher_from_config(&cfg, &data)?;
            if let Some(last) = results.last() {
                println!("teacher test accuracy {:.4} after {} epochs", last.test_accuracy, last.epoch);
            }
            println!("saved {}", experiment::teacher_checkpoint_path(&cfg).display());
        }
        Command::Distill { config } => {
            let cfg = RunConfig::load(&config)?;
            let data = cfg.load_dataset()?;
            let teacher = experiment::obtain_teacher(&cfg, &data)?;
            let outcome = experiment::distill_and_save(&cfg, &data, &teacher)?;
            if let Some(last) = outcome.results.last() {
                println!(
                    "student test accuracy {:.4} (teacher {:.4})",
                    last.test_accuracy, outcome.teacher_test_accuracy
                );
            }
            println!("wrote {}", cfg.metrics_path().display());
        }
        Command::Eval { checkpoint, config } => {
            let cfg = RunConfig::load(&config)?;
            let data = cfg.load_dataset()?;
            let model = load_checkpoint(&checkpoint)?;
            let mut out = io::stdout().lock();
            writeln!(out, "split,loss,accuracy")?;
            for (name, indices) in [("train", &data.train), ("test", &data.test)] {
                let (loss, acc) = evaluate(&model, &data, indices)?;
                writeln!(out, "{name},{loss},{acc}")?;
            }
        }
        Command::Sweep { config, seeds, output } => {
            let cfg = RunConfig::load(&config)?;
            let data = cfg.load_dataset()?;
            let teacher = experiment::obtain_teacher(&cfg, &data)?;
            let rows = experiment::sweep(&cfg, &data, &teacher, &seeds)?;
            experiment::write_sweep_summary(sink(output.as_ref())?, &rows)?;
        }
        Command::PlotData { metrics, output } => {
            let records = read_metrics(File::open(&metrics)?)?;
            write_long_format(sink(output.as_ref())?, &records)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::Diverged { .. } = e {
                eprintln!("hint: lower the learning rate or alpha_max");
            }
            ExitCode::from(if e.is_config() { 1 } else { 2 })
        }
    }
}
