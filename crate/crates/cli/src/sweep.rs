//! One-axis hyperparameter sweeps: re-run a single incremental stage for
//! each grid value and report CER increments against the pre-trained
//! model on the original and new tasks.

use std::path::PathBuf;

use crate::config::{Method, StageSpec};
use crate::error::CliError;
use crate::io;
use crate::train::{evaluate_checkpoint, train_stage};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Temperature,
    Beta,
    Gamma,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Result<Self, CliError> {
        Ok(match s {
            "T" => SweepAxis::Temperature,
            "beta" => SweepAxis::Beta,
            "gamma" => SweepAxis::Gamma,
            other => {
                return Err(CliError::config(format!(
                    "invalid sweep axis {other:?}; expected T, beta or gamma"
                )))
            }
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::Temperature => "T",
            SweepAxis::Beta => "beta",
            SweepAxis::Gamma => "gamma",
        }
    }

    /// The reference grids swept when no explicit values are given.
    pub fn default_grid(&self) -> Vec<f64> {
        match self {
            SweepAxis::Temperature => vec![1.0, 2.0, 3.0, 4.0, 5.0],
            SweepAxis::Beta => vec![0.01, 0.02, 0.03, 0.04, 0.05],
            SweepAxis::Gamma => vec![100.0, 200.0, 500.0, 1000.0, 2000.0],
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub value: f64,
    /// Mean corpus CER over the original test sets (all but the last).
    pub original_cer: f64,
    pub original_increment: f64,
    /// Corpus CER on the last-listed test set (the new task).
    pub new_cer: f64,
    pub new_increment: f64,
}

pub struct SweepResult {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
    pub baseline_original_cer: f64,
    pub baseline_new_cer: f64,
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "axis,value,original_cer_percent,original_increment_percent,new_cer_percent,new_increment_percent\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:.2},{:.2},{:.2},{:.2}\n",
                self.axis.name(),
                r.value,
                r.original_cer * 100.0,
                r.original_increment * 100.0,
                r.new_cer * 100.0,
                r.new_increment * 100.0
            ));
        }
        out
    }
}

/// Mean corpus CER of a checkpoint over a set of test files; the last
/// path is treated as the new task, the rest as original tasks.
fn split_cers(
    ckpt: &ilctc_core::model::Checkpoint,
    test_paths: &[PathBuf],
    stage: u32,
    method: &str,
    seed: u64,
) -> Result<(f64, f64), CliError> {
    assert!(test_paths.len() >= 2, "validated by the sweep entry point");
    let mut originals = Vec::new();
    let mut new_task = 0.0;
    for (i, path) in test_paths.iter().enumerate() {
        let ds = io::read_dataset(path)?;
        let report = evaluate_checkpoint(ckpt, &ds, stage, method, seed, None)?;
        if i + 1 == test_paths.len() {
            new_task = report.corpus_cer;
        } else {
            originals.push(report.corpus_cer);
        }
    }
    let original = originals.iter().sum::<f64>() / originals.len() as f64;
    Ok((original, new_task))
}

/// Runs `base` once per grid value, varying only the chosen weight.
/// The base must be an ebkd_rbkd stage (the axes are its knobs) and its
/// test list must name at least one original task before the new task.
pub fn run_sweep(
    base: &StageSpec,
    axis: SweepAxis,
    values: &[f64],
) -> Result<SweepResult, CliError> {
    if base.method != Method::EbkdRbkd {
        return Err(CliError::config(
            "sweeps vary T/beta/gamma and need method = \"ebkd_rbkd\"",
        ));
    }
    if base.test_paths.len() < 2 {
        return Err(CliError::config(
            "sweeps need at least two test sets: the original task(s) then the new task (listed last)",
        ));
    }
    if values.is_empty() || values.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(CliError::config("sweep values must be positive and finite"));
    }

    // pre-trained reference point
    let teacher_path = base.teacher_path.clone().expect("validated by config");
    let teacher = io::read_checkpoint(&teacher_path)?;
    let (baseline_original, baseline_new) = split_cers(
        &teacher,
        &base.test_paths,
        base.stage,
        "pretrained",
        base.seed,
    )?;

    let mut rows = Vec::with_capacity(values.len());
    for &value in values {
        let mut spec = base.clone();
        match axis {
            SweepAxis::Temperature => spec.weights.temperature = value,
            SweepAxis::Beta => spec.weights.beta = value,
            SweepAxis::Gamma => spec.weights.gamma = value,
        }
        let tag = format!("{}_{}", axis.name(), value);
        spec.out_dir = base.out_dir.join(&tag);
        spec.out_ckpt = spec.out_dir.join("checkpoint.ilck");
        spec.snapshot_toml = format!(
            "{}\n# sweep override: {} = {}\n",
            base.snapshot_toml,
            axis.name(),
            value
        );
        let outcome = train_stage(&spec)?;
        let (original, new_task) = split_cers(
            &outcome.checkpoint,
            &base.test_paths,
            base.stage,
            base.method.name(),
            base.seed,
        )?;
        rows.push(SweepRow {
            value,
            original_cer: original,
            original_increment: original - baseline_original,
            new_cer: new_task,
            new_increment: new_task - baseline_new,
        });
    }

    let result = SweepResult {
        axis,
        rows,
        baseline_original_cer: baseline_original,
        baseline_new_cer: baseline_new,
    };
    io::write_text(
        &base.out_dir.join(format!("sweep_{}.csv", axis.name())),
        &result.to_csv(),
    )?;
    Ok(result)
}
