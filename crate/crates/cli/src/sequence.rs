//! Multi-stage sequential training: one shared pretrain stage, then each
//! method's own chain over the remaining tasks, with a method-by-task CER
//! matrix and per-stage averages at the end.
//!
//! Chain rules:
//! - Stage 1 is always CTC pretraining on the first task; every method
//!   shares that checkpoint.
//! - Incremental methods (finetune, rbkd, rbkd_ewc, ebkd_rbkd) feed each
//!   stage the previous stage's output as the frozen teacher and only the
//!   current task's training set.
//! - Joint training retrains from scratch at every stage on the union of
//!   all tasks seen so far; it is the target-reference method, not an
//!   incremental one.

use std::path::{Path, PathBuf};

use ilctc_core::decode::EvalReport;

use crate::config::{Manifest, Method, StageSpec};
use crate::error::CliError;
use crate::io;
use crate::train::{train_stage, StageOutcome};

#[derive(Debug, Clone)]
pub struct StageEval {
    pub stage: u32,
    /// (task name, corpus CER ratio) for every task visited so far.
    pub task_cers: Vec<(String, f64)>,
}

impl StageEval {
    /// Mean CER over the original tasks (all but the newest).
    pub fn avg_original(&self) -> Option<f64> {
        let n = self.task_cers.len();
        if n < 2 {
            return None;
        }
        Some(self.task_cers[..n - 1].iter().map(|(_, c)| c).sum::<f64>() / (n - 1) as f64)
    }

    pub fn new_task(&self) -> f64 {
        self.task_cers.last().map(|(_, c)| *c).unwrap_or(f64::NAN)
    }
}

#[derive(Debug, Clone)]
pub struct MethodResult {
    pub method: Method,
    pub stages: Vec<StageEval>,
}

pub struct SequenceResult {
    pub config_hash: String,
    pub methods: Vec<MethodResult>,
    pub out_dir: PathBuf,
}

fn stage_spec_for(
    manifest: &Manifest,
    method: Method,
    stage_index: usize, // 0-based task index
    teacher: Option<PathBuf>,
    out_dir: &Path,
) -> StageSpec {
    let file = &manifest.file;
    let stage = (stage_index + 1) as u32;
    let (train_paths, total_steps): (Vec<PathBuf>, usize) = match method {
        Method::Pretrain => (
            vec![PathBuf::from(&file.stages[0].train)],
            file.optimizer.pretrain_steps,
        ),
        Method::Joint => (
            file.stages[..=stage_index]
                .iter()
                .map(|s| PathBuf::from(&s.train))
                .collect(),
            file.optimizer.pretrain_steps,
        ),
        _ => (
            vec![PathBuf::from(&file.stages[stage_index].train)],
            file.optimizer.incr_steps,
        ),
    };
    let test_paths = file.stages[..=stage_index]
        .iter()
        .map(|s| PathBuf::from(&s.test))
        .collect();
    let stage_dir = out_dir.join(format!("{}_stage{stage}", method.name()));
    let weights = manifest.weights_for(method);
    let spec_model = method.from_scratch().then(|| manifest.model.clone());
    let snapshot = format!(
        "# derived from the run manifest (hash {})\nstage = {stage}\nmethod = \"{}\"\n",
        manifest.config_hash,
        method.name()
    );
    StageSpec {
        stage,
        method,
        train_paths,
        test_paths,
        teacher_path: teacher,
        out_ckpt: stage_dir.join("checkpoint.ilck"),
        out_dir: stage_dir,
        seed: manifest.file.seed,
        weights,
        optimizer: manifest
            .file
            .optimizer
            .stage_settings(total_steps),
        model: spec_model,
        snapshot_toml: snapshot,
    }
}

fn evals_of(outcome: &StageOutcome, manifest: &Manifest, stage: u32) -> StageEval {
    let task_cers = outcome
        .reports
        .iter()
        .enumerate()
        .map(|(i, (_, report)): (usize, &(PathBuf, EvalReport))| {
            (manifest.file.stages[i].task_name(i), report.corpus_cer)
        })
        .collect();
    StageEval { stage, task_cers }
}

/// Executes the whole manifest. Stage failures halt with the stage index
/// and cause.
pub fn run_sequence(manifest: &Manifest) -> Result<SequenceResult, CliError> {
    let out_dir = PathBuf::from(&manifest.file.out_dir);
    io::write_text(&out_dir.join("resolved_manifest.toml"), &manifest.snapshot_toml)?;

    let fail_at = |stage: u32, method: Method, e: CliError| match e {
        CliError::Numerical { step, detail } => CliError::Numerical {
            step,
            detail: format!("[{method} stage {stage}] {detail}"),
        },
        other => CliError::data(format!("[{method} stage {stage}] {other}")),
    };

    // shared stage 1: plain CTC pretraining on the first task
    let pretrain_spec = stage_spec_for(manifest, Method::Pretrain, 0, None, &out_dir);
    let pretrain = train_stage(&pretrain_spec).map_err(|e| fail_at(1, Method::Pretrain, e))?;
    let pretrain_ckpt_path = pretrain_spec.out_ckpt.clone();
    let pretrain_eval = evals_of(&pretrain, manifest, 1);

    let mut methods = Vec::new();
    for &method in &manifest.methods {
        let mut stages = vec![StageEval {
            stage: 1,
            task_cers: pretrain_eval.task_cers.clone(),
        }];
        let mut previous_ckpt = pretrain_ckpt_path.clone();
        for stage_index in 1..manifest.file.stages.len() {
            let stage = (stage_index + 1) as u32;
            let teacher = (!method.from_scratch()).then(|| previous_ckpt.clone());
            let spec = stage_spec_for(manifest, method, stage_index, teacher, &out_dir);
            let outcome = train_stage(&spec).map_err(|e| fail_at(stage, method, e))?;
            stages.push(evals_of(&outcome, manifest, stage));
            previous_ckpt = spec.out_ckpt.clone();
        }
        methods.push(MethodResult { method, stages });
    }

    let result = SequenceResult {
        config_hash: manifest.config_hash.clone(),
        methods,
        out_dir: out_dir.clone(),
    };
    io::write_text(&out_dir.join("cer_matrix.csv"), &result.matrix_csv())?;
    io::write_text(&out_dir.join("cer_matrix.txt"), &result.matrix_table())?;
    io::write_text(&out_dir.join("stage_summary.csv"), &result.stage_summary_csv())?;
    io::write_text(&out_dir.join("run_record.toml"), &result.run_record())?;
    Ok(result)
}

impl SequenceResult {
    /// Long-form CER matrix: method, stage, task, CER percent.
    pub fn matrix_csv(&self) -> String {
        let mut out = String::from("method,stage,task,cer_percent\n");
        for m in &self.methods {
            for stage in &m.stages {
                for (task, cer) in &stage.task_cers {
                    out.push_str(&format!(
                        "{},{},{},{:.2}\n",
                        m.method.name(),
                        stage.stage,
                        task,
                        cer * 100.0
                    ));
                }
            }
        }
        out
    }

    /// Human-readable matrix: methods as rows, (stage, task) as columns.
    pub fn matrix_table(&self) -> String {
        let Some(first) = self.methods.first() else {
            return String::new();
        };
        let mut header = vec!["method".to_string()];
        for stage in &first.stages {
            for (task, _) in &stage.task_cers {
                header.push(format!("s{}:{}", stage.stage, task));
            }
        }
        let mut rows = vec![header.join("\t")];
        for m in &self.methods {
            let mut row = vec![m.method.name().to_string()];
            for stage in &m.stages {
                for (_, cer) in &stage.task_cers {
                    row.push(format!("{:.2}", cer * 100.0));
                }
            }
            rows.push(row.join("\t"));
        }
        rows.join("\n") + "\n"
    }

    /// Per-stage averages: original-task mean CER and new-task CER.
    pub fn stage_summary_csv(&self) -> String {
        let mut out = String::from("method,stage,avg_original_cer_percent,new_task_cer_percent\n");
        for m in &self.methods {
            for stage in &m.stages {
                if stage.stage == 1 {
                    continue;
                }
                out.push_str(&format!(
                    "{},{},{:.2},{:.2}\n",
                    m.method.name(),
                    stage.stage,
                    stage.avg_original().unwrap_or(f64::NAN) * 100.0,
                    stage.new_task() * 100.0
                ));
            }
        }
        out
    }

    pub fn run_record(&self) -> String {
        let mut out = format!("config_hash = \"{}\"\n", self.config_hash);
        for m in &self.methods {
            out.push_str(&format!(
                "\n[[chain]]\nmethod = \"{}\"\nstages = {}\n",
                m.method.name(),
                m.stages.len()
            ));
        }
        out
    }
}
