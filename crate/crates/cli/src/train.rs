//! One training stage: teacher-student setup, the batch loop, end-of-stage
//! evaluation and EWC state capture.
//!
//! Determinism rules:
//! - Batch order derives from (seed, stage index) only, never from the
//!   method, so a distillation run with all extra weights at zero takes
//!   bit-identical steps to plain fine-tuning.
//! - Zero-weighted loss terms are skipped structurally (no teacher
//!   forward, no zero-valued graph nodes), for the same reason.
//! - The Fisher/EWC capture at the end of a stage uses a (seed, stage)
//!   stream as well.

use std::path::{Path, PathBuf};

use ilctc_core::decode::{edit_distance, greedy_decode, EvalReport, SampleEval};
use ilctc_core::losses::{
    aggregate_loss, ctc_loss, ebkd_loss, ewc_penalty, fisher_estimate, importance_map, rbkd_loss,
    LossWeights,
};
use ilctc_core::model::{
    init_model, BoundModel, Checkpoint, EwcState, StageMeta, BLANK_ID,
};
use ilctc_core::optim::{Adam, OptimizerSettings};
use ilctc_core::rng::{mix_seed, SeededRng};
use ilctc_core::synth::{Dataset, Sample};
use ilctc_core::tensor::{backward, Tensor};

use crate::config::{Method, StageSpec};
use crate::error::CliError;
use crate::io;

const STREAM_BATCH: u64 = 0x0b17c4;
const STREAM_FISHER: u64 = 0xf15e4;

pub struct StageOutcome {
    pub checkpoint: Checkpoint,
    /// One report per test set, in config order.
    pub reports: Vec<(PathBuf, EvalReport)>,
    /// Every dataset file the stage opened for training (the data-access
    /// contract: incremental methods must list exactly the current stage's
    /// training set here).
    pub opened_for_training: Vec<PathBuf>,
    pub final_loss: Option<LossBreakdown>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub ctc: f64,
    pub rbkd: f64,
    pub ebkd: f64,
    pub ewc: f64,
}

impl LossBreakdown {
    fn is_finite(&self) -> bool {
        self.total.is_finite()
            && self.ctc.is_finite()
            && self.rbkd.is_finite()
            && self.ebkd.is_finite()
            && self.ewc.is_finite()
    }
}

/// Deterministic epoch-reshuffled batch order.
struct BatchSchedule {
    rng: SeededRng,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchSchedule {
    fn new(n: usize, seed: u64) -> Self {
        let mut s = BatchSchedule {
            rng: SeededRng::new(seed),
            order: (0..n).collect(),
            cursor: 0,
        };
        s.rng.shuffle(&mut s.order);
        s
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut batch = Vec::with_capacity(size);
        for _ in 0..size {
            if self.cursor == self.order.len() {
                self.rng.shuffle(&mut self.order);
                self.cursor = 0;
            }
            batch.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        batch
    }
}

/// Rescales the whole gradient so its global L2 norm is at most `clip`.
fn clip_global_norm(grads: &mut std::collections::BTreeMap<String, Vec<f64>>, clip: f64) {
    let sq: f64 = grads.values().flatten().map(|g| g * g).sum();
    let norm = sq.sqrt();
    if norm > clip {
        let scale = clip / norm;
        for g in grads.values_mut().flatten() {
            *g *= scale;
        }
    }
}

fn merge_datasets(datasets: Vec<Dataset>) -> Result<Dataset, CliError> {
    let mut iter = datasets.into_iter();
    let mut merged = iter
        .next()
        .ok_or_else(|| CliError::config("no training data"))?;
    for ds in iter {
        if ds.input_dim != merged.input_dim || ds.alphabet_size != merged.alphabet_size {
            return Err(CliError::data(format!(
                "training datasets disagree on dimensions: F={}/M={} vs F={}/M={}",
                merged.input_dim, merged.alphabet_size, ds.input_dim, ds.alphabet_size
            )));
        }
        merged.samples.extend(ds.samples);
    }
    Ok(merged)
}

/// Runs one stage to completion: trains, evaluates every test set,
/// captures the end-of-stage EWC state, writes the checkpoint, reports
/// and the resolved-config snapshot.
pub fn train_stage(spec: &StageSpec) -> Result<StageOutcome, CliError> {
    let mut opened_for_training = Vec::new();
    let mut train_sets = Vec::with_capacity(spec.train_paths.len());
    for path in &spec.train_paths {
        opened_for_training.push(path.clone());
        train_sets.push(io::read_dataset(path)?);
    }
    let train_data = merge_datasets(train_sets)?;
    if train_data.is_empty() {
        return Err(CliError::data("training dataset is empty"));
    }

    // student initialization and the frozen teacher
    let (mut student_ckpt, teacher_ckpt) = if spec.method.from_scratch() {
        let config = spec
            .model
            .clone()
            .ok_or_else(|| CliError::config("missing model config for a from-scratch run"))?;
        (init_model(&config, spec.seed)?, None)
    } else {
        let teacher = io::read_checkpoint(spec.teacher_path.as_ref().expect("validated"))?;
        (teacher.clone(), Some(teacher))
    };
    if student_ckpt.config.input_dim != train_data.input_dim {
        return Err(CliError::data(format!(
            "model expects input_dim {}, dataset has {}",
            student_ckpt.config.input_dim, train_data.input_dim
        )));
    }
    if student_ckpt.config.alphabet_size() != train_data.alphabet_size {
        return Err(CliError::data(format!(
            "model alphabet is {}, dataset says {}",
            student_ckpt.config.alphabet_size(),
            train_data.alphabet_size
        )));
    }

    let needs_teacher_forward = spec.weights.beta > 0.0 || spec.weights.gamma > 0.0;
    let teacher_model = match (&teacher_ckpt, needs_teacher_forward) {
        (Some(ckpt), true) => Some(BoundModel::bind(ckpt, false)?),
        _ => None,
    };
    let ewc_state = if spec.method == Method::RbkdEwc {
        let state = teacher_ckpt
            .as_ref()
            .and_then(|t| t.ewc.clone())
            .ok_or_else(|| {
                CliError::data(
                    "method rbkd_ewc needs an input checkpoint carrying EWC state \
                     (reference parameters and Fisher diagonal)",
                )
            })?;
        Some(state)
    } else {
        None
    };

    let mut adam = Adam::new(OptimizerSettings {
        peak_lr: spec.optimizer.peak_lr,
        warmup_steps: spec.optimizer.warmup_steps,
    })?;
    let mut schedule = BatchSchedule::new(
        train_data.len(),
        mix_seed(mix_seed(spec.seed, STREAM_BATCH), spec.stage as u64),
    );

    let mut final_loss = None;
    let report_every = (spec.optimizer.total_steps / 10).max(1);
    for step in 1..=spec.optimizer.total_steps {
        let batch = schedule.next_batch(spec.optimizer.batch_size);
        let student = BoundModel::bind(&student_ckpt, true)?;
        let breakdown = batch_loss(
            &student,
            teacher_model.as_ref(),
            ewc_state.as_ref(),
            &train_data,
            &batch,
            &spec.weights,
        )?;
        let (total, parts) = breakdown;
        if !parts.is_finite() {
            return Err(CliError::Numerical {
                step,
                detail: format!(
                    "non-finite loss: total {} (ctc {}, rbkd {}, ebkd {}, ewc {})",
                    parts.total, parts.ctc, parts.rbkd, parts.ebkd, parts.ewc
                ),
            });
        }
        student.zero_grads(); // drop importance-map backward residue
        backward(&total).map_err(|e| CliError::data(e.to_string()))?;
        let mut grads = student.grads();
        clip_global_norm(&mut grads, spec.optimizer.grad_clip);
        adam.step(&mut student_ckpt.params, &grads)?;
        if step % report_every == 0 || step == spec.optimizer.total_steps {
            println!(
                "[{} stage {}] step {step}/{}: loss {:.5} (ctc {:.5} rbkd {:.5} ebkd {:.5} ewc {:.5})",
                spec.method,
                spec.stage,
                spec.optimizer.total_steps,
                parts.total,
                parts.ctc,
                parts.rbkd,
                parts.ebkd,
                parts.ewc
            );
        }
        final_loss = Some(parts);
    }

    student_ckpt.meta = StageMeta {
        stage: spec.stage,
        method: spec.method.name().to_string(),
    };
    // end-of-stage EWC state over this stage's training data, so later
    // stages can anchor to it without touching this stage's files
    let fisher = fisher_estimate(
        &student_ckpt,
        &train_data,
        spec.optimizer.fisher_samples,
        mix_seed(mix_seed(spec.seed, STREAM_FISHER), spec.stage as u64),
    )?;
    student_ckpt.ewc = Some(EwcState {
        reference: student_ckpt.params.clone(),
        fisher,
    });

    let mut reports = Vec::new();
    for path in &spec.test_paths {
        let test = io::read_dataset(path)?;
        let report = evaluate_checkpoint(
            &student_ckpt,
            &test,
            spec.stage,
            spec.method.name(),
            spec.seed,
            None,
        )?;
        reports.push((path.clone(), report));
    }

    io::write_checkpoint(&spec.out_ckpt, &student_ckpt)?;
    io::write_text(&spec.out_dir.join("resolved_config.toml"), &spec.snapshot_toml)?;
    for (path, report) in &reports {
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "test".into());
        io::write_text(&spec.out_dir.join(format!("eval_{stem}.csv")), &report.to_csv())?;
        io::write_text(
            &spec.out_dir.join(format!("eval_{stem}.summary.txt")),
            &report.summary_text(),
        )?;
    }

    Ok(StageOutcome {
        checkpoint: student_ckpt,
        reports,
        opened_for_training,
        final_loss,
    })
}

/// Mean-of-samples batch objective. Returns the live loss tensor and the
/// component values for reporting.
fn batch_loss(
    student: &BoundModel,
    teacher: Option<&BoundModel>,
    ewc_state: Option<&EwcState>,
    data: &Dataset,
    batch: &[usize],
    weights: &LossWeights,
) -> Result<(Tensor, LossBreakdown), CliError> {
    let inv = 1.0 / batch.len() as f64;
    let mut ctc_mean: Option<Tensor> = None;
    let mut rbkd_mean: Option<Tensor> = None;
    let mut ebkd_mean: Option<Tensor> = None;
    let add_into = |slot: &mut Option<Tensor>, term: Tensor| -> Result<(), CliError> {
        let scaled = term.scale(inv);
        *slot = Some(match slot.take() {
            None => scaled,
            Some(acc) => acc.add(&scaled).map_err(|e| CliError::data(e.to_string()))?,
        });
        Ok(())
    };

    for &index in batch {
        let sample: &Sample = &data.samples[index];
        let student_out = student.forward(&sample.features, sample.frames, None)?;
        // the student importance map runs a backward pass; it must happen
        // before the main loss backward, whose caller zeroes leaf grads
        let student_attention = if weights.gamma > 0.0 {
            Some(importance_map(&student_out, false)?)
        } else {
            None
        };
        let ctc = ctc_loss(&student_out.posteriors, &sample.labels, BLANK_ID)?;
        add_into(&mut ctc_mean, ctc)?;

        if weights.beta > 0.0 || weights.gamma > 0.0 {
            let teacher = teacher.expect("teacher bound when distilling");
            let teacher_out = teacher.forward(&sample.features, sample.frames, None)?;
            if weights.beta > 0.0 {
                let rbkd = rbkd_loss(
                    &teacher_out.posteriors,
                    &student_out.posteriors,
                    weights.temperature,
                )?;
                add_into(&mut rbkd_mean, rbkd)?;
            }
            if weights.gamma > 0.0 {
                let teacher_art = importance_map(&teacher_out, true)?;
                let student_art = student_attention.expect("computed above");
                let ebkd = ebkd_loss(
                    &teacher_art.attention,
                    &student_art.attention,
                    &student_out.mask,
                )?;
                add_into(&mut ebkd_mean, ebkd)?;
            }
        }
    }

    let ewc = match ewc_state {
        Some(state) if weights.lambda_ewc > 0.0 => {
            Some(ewc_penalty(&student.params, &state.reference, &state.fisher)?)
        }
        _ => None,
    };

    let ctc_mean = ctc_mean.expect("non-empty batch");
    let total = aggregate_loss(
        &ctc_mean,
        rbkd_mean.as_ref(),
        ebkd_mean.as_ref(),
        ewc.as_ref(),
        weights,
    )?;
    let parts = LossBreakdown {
        total: total.item(),
        ctc: ctc_mean.item(),
        rbkd: rbkd_mean.as_ref().map_or(0.0, Tensor::item),
        ebkd: ebkd_mean.as_ref().map_or(0.0, Tensor::item),
        ewc: ewc.as_ref().map_or(0.0, Tensor::item),
    };
    Ok((total, parts))
}

/// Greedy-decode evaluation of a checkpoint on a test set. When a teacher
/// is supplied, the per-sample attention-map distance to it is recorded
/// alongside each CER.
pub fn evaluate_checkpoint(
    checkpoint: &Checkpoint,
    test: &Dataset,
    stage: u32,
    method: &str,
    seed: u64,
    teacher: Option<&Checkpoint>,
) -> Result<EvalReport, CliError> {
    let model = BoundModel::bind(checkpoint, false)?;
    let teacher_model = teacher.map(|t| BoundModel::bind(t, false)).transpose()?;
    let mut samples = Vec::with_capacity(test.len());
    for (sample_id, sample) in test.samples.iter().enumerate() {
        let out = model.forward(&sample.features, sample.frames, None)?;
        let decoded = greedy_decode(&out.posteriors, BLANK_ID);
        let edits = edit_distance(&sample.labels, &decoded.0);
        let ref_len = sample.labels.len();
        let ebkd = match &teacher_model {
            None => None,
            Some(tm) => {
                let t_out = tm.forward(&sample.features, sample.frames, None)?;
                let t_art = importance_map(&t_out, true)?;
                let s_art = importance_map(&out, true)?;
                Some(ebkd_loss(&t_art.attention, &s_art.attention, &out.mask)?.item())
            }
        };
        samples.push(SampleEval {
            sample_id,
            ref_len,
            edits,
            cer: edits as f64 / ref_len.max(1) as f64,
            ebkd_loss: ebkd,
        });
    }
    Ok(EvalReport::build(samples, stage, method.to_string(), seed)?)
}

/// Hash of a file's bytes; used by tests to pin teacher immutability.
pub fn file_digest(path: &Path) -> Result<String, CliError> {
    use sha2::{Digest, Sha256};
    let bytes = std::fs::read(path).map_err(|e| CliError::io(&path.to_path_buf(), e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
