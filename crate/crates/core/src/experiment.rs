//! Config-driven runs shared by the command-line tool and the acceptance
//! suite: teacher training with checkpoint reuse, single distillation runs
//! and the seed sweep over every method and scheduler mode.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::data::Dataset;
use crate::engine::{evaluate, run_distillation, train_teacher, DistillationRun, EpochResult};
use crate::error::{Error, Result};
use crate::maps::MapKind;
use crate::metrics::{records_from_results, write_metrics};
use crate::network::{LayerPairing, Model};
use crate::scheduler::SchedulerMode;

pub const TEACHER_CHECKPOINT: &str = "teacher.lwdl";
pub const STUDENT_CHECKPOINT: &str = "student.lwdl";
pub const TEACHER_METRICS: &str = "teacher_metrics.csv";

pub fn teacher_checkpoint_path(cfg: &RunConfig) -> PathBuf {
    cfg.checkpoint_dir().join(TEACHER_CHECKPOINT)
}

/// Trains the configured teacher, then writes its checkpoint and metrics
/// into the checkpoint directory.
pub fn train_teacher_from_config(cfg: &RunConfig, data: &Dataset) -> Result<(Model, Vec<EpochResult>)> {
    let (teacher, results) = train_teacher(cfg.teacher.spec(), data, &cfg.teacher_settings())?;
    let dir = cfg.checkpoint_dir();
    std::fs::create_dir_all(&dir)?;
    save_checkpoint(&dir.join(TEACHER_CHECKPOINT), &teacher)?;
    write_metrics(BufWriter::new(File::create(dir.join(TEACHER_METRICS))?), &records_from_results(&results))?;
    Ok((teacher, results))
}

/// Loads the teacher checkpoint if one exists for the configured spec,
/// otherwise trains (and saves) it.
pub fn obtain_teacher(cfg: &RunConfig, data: &Dataset) -> Result<Model> {
    let path = teacher_checkpoint_path(cfg);
    if path.exists() {
        let teacher = load_checkpoint(&path)?;
        if teacher.spec() != &cfg.teacher.spec() {
            return Err(Error::config(
                "teacher",
                format!("checkpoint {} was trained from a different spec", path.display()),
            ));
        }
        return Ok(teacher);
    }
    train_teacher_from_config(cfg, data).map(|(t, _)| t)
}

#[derive(Clone, Debug)]
pub struct DistillOutcome {
    pub student: Model,
    pub pairing: LayerPairing,
    pub results: Vec<EpochResult>,
    pub teacher_test_accuracy: f64,
}

/// One distillation run as configured, without touching the filesystem.
pub fn distill(cfg: &RunConfig, data: &Dataset, teacher: &Model) -> Result<DistillOutcome> {
    let (_, teacher_test_accuracy) = evaluate(teacher, data, &data.test)?;
    let student = Model::build(cfg.student.clone())?;
    let mut run = DistillationRun::new(
        student,
        teacher.clone(),
        cfg.method.kind,
        cfg.scheduler.clone(),
        cfg.distill_options(),
        data,
    )?;
    let results = run_distillation(&mut run, data)?;
    Ok(DistillOutcome {
        student: run.student,
        pairing: run.pairing,
        results,
        teacher_test_accuracy,
    })
}

/// [`distill`] followed by writing the metrics CSV and student checkpoint.
pub fn distill_and_save(cfg: &RunConfig, data: &Dataset, teacher: &Model) -> Result<DistillOutcome> {
    let outcome = distill(cfg, data, teacher)?;
    let metrics = cfg.metrics_path();
    if let Some(parent) = metrics.parent() {
        std::fs::create_dir_all(parent)?;
    }
    write_metrics(BufWriter::new(File::create(&metrics)?), &records_from_results(&outcome.results))?;
    let dir = cfg.checkpoint_dir();
    std::fs::create_dir_all(&dir)?;
    save_checkpoint(&dir.join(STUDENT_CHECKPOINT), &outcome.student)?;
    Ok(outcome)
}

/// `cfg` with the student initialization and training shuffles reseeded.
pub fn with_seed(cfg: &RunConfig, seed: u64) -> RunConfig {
    let mut c = cfg.clone();
    c.student.seed = seed;
    c.training.seed = seed;
    c
}

/// Final test accuracies of one method × scheduler cell over the seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub kind: MapKind,
    pub mode: SchedulerMode,
    pub accuracies: Vec<f64>,
}

impl SweepRow {
    pub fn mean(&self) -> f64 {
        self.accuracies.iter().sum::<f64>() / self.accuracies.len() as f64
    }

    /// Sample standard deviation (0 for a single seed).
    pub fn std(&self) -> f64 {
        let n = self.accuracies.len();
        if n < 2 {
            return 0.0;
        }
        let m = self.mean();
        (self.accuracies.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    }
}

/// Runs every (kind, mode) cell for the given kinds, modes and seeds.
pub fn sweep_cells(
    cfg: &RunConfig,
    data: &Dataset,
    teacher: &Model,
    kinds: &[MapKind],
    modes: &[SchedulerMode],
    seeds: &[u64],
) -> Result<Vec<SweepRow>> {
    if seeds.is_empty() {
        return Err(Error::config("seeds", "at least one seed is required"));
    }
    let mut rows = Vec::with_capacity(kinds.len() * modes.len());
    for &kind in kinds {
        for &mode in modes {
            let mut accuracies = Vec::with_capacity(seeds.len());
            for &seed in seeds {
                let mut c = with_seed(cfg, seed);
                c.method.kind = kind;
                c.scheduler.mode = mode;
                let outcome = distill(&c, data, teacher)?;
                accuracies.push(outcome.results.last().map_or(0.0, |r| r.test_accuracy));
            }
            rows.push(SweepRow { kind, mode, accuracies });
        }
    }
    Ok(rows)
}

/// Every method × scheduler mode.
pub fn sweep(cfg: &RunConfig, data: &Dataset, teacher: &Model, seeds: &[u64]) -> Result<Vec<SweepRow>> {
    sweep_cells(cfg, data, teacher, &MapKind::ALL, &SchedulerMode::ALL, seeds)
}

/// Summary CSV: `method,scheduler,seeds,mean_accuracy,std_accuracy`.
pub fn write_sweep_summary<W: Write>(mut out: W, rows: &[SweepRow]) -> Result<()> {
    writeln!(out, "method,scheduler,seeds,mean_accuracy,std_accuracy")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.kind.name(),
            r.mode.name(),
            r.accuracies.len(),
            r.mean(),
            r.std()
        )?;
    }
    out.flush()?;
    Ok(())
}
