//! Configuration file schemas and validation.
//!
//! Three TOML file kinds exist; every key is documented in the README:
//! - task generation specs (`gen-data --spec`),
//! - stage configs (`pretrain` / `incr-train` / `sweep --config`),
//! - run manifests (`run-seq --manifest`).
//!
//! Validation enforces the per-method weight contract (a method that does
//! not use a term rejects a non-zero weight for it rather than silently
//! ignoring it) and the data-access contract: non-joint methods reference
//! exactly one training dataset.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use ilctc_core::losses::LossWeights;
use ilctc_core::model::{ConvSpec, ModelConfig};
use ilctc_core::synth::{derive_accent_task, derive_newwords_task, TaskSpec};

use crate::error::CliError;

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// Task generation specs
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpecFile {
    #[serde(default = "default_task_id")]
    pub task_id: u32,
    #[serde(default = "default_input_dim")]
    pub input_dim: usize,
    #[serde(default = "default_proto_len")]
    pub proto_len: usize,
    #[serde(default = "default_alphabet")]
    pub alphabet_size: usize,
    #[serde(default = "default_symbols")]
    pub symbols: Vec<usize>,
    #[serde(default = "default_noise")]
    pub noise_std: f64,
    #[serde(default = "default_u_min")]
    pub u_min: usize,
    #[serde(default = "default_u_max")]
    pub u_max: usize,
    #[serde(default = "default_num_samples")]
    pub num_samples: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub derive: Option<DeriveSection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeriveSection {
    /// "accent" or "new-words".
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rotation_strength: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub new_symbols: Option<Vec<usize>>,
    pub seed: u64,
}

fn default_task_id() -> u32 { 1 }
fn default_input_dim() -> usize { 16 }
fn default_proto_len() -> usize { 8 }
fn default_alphabet() -> usize { 13 }
fn default_symbols() -> Vec<usize> { (1..=8).collect() }
fn default_noise() -> f64 { 0.3 }
fn default_u_min() -> usize { 2 }
fn default_u_max() -> usize { 6 }
fn default_num_samples() -> usize { 2000 }

impl TaskSpecFile {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        read_toml(path)
    }

    /// Builds the concrete task spec, applying the optional derivation.
    pub fn resolve(&self) -> Result<TaskSpec, CliError> {
        let base = TaskSpec::seeded_base(
            self.task_id,
            self.input_dim,
            self.proto_len,
            self.alphabet_size,
            self.symbols.clone(),
            self.noise_std,
            (self.u_min, self.u_max),
            self.num_samples,
            self.seed,
        )?;
        let Some(derive) = &self.derive else {
            return Ok(base);
        };
        match derive.kind.as_str() {
            "accent" => {
                let strength = derive.rotation_strength.ok_or_else(|| {
                    CliError::config("derive.kind = \"accent\" needs derive.rotation_strength")
                })?;
                Ok(derive_accent_task(&base, strength, derive.seed)?)
            }
            "new-words" => {
                let symbols = derive.new_symbols.clone().ok_or_else(|| {
                    CliError::config("derive.kind = \"new-words\" needs derive.new_symbols")
                })?;
                Ok(derive_newwords_task(&base, &symbols, derive.seed)?)
            }
            other => Err(CliError::config(format!(
                "derive.kind must be \"accent\" or \"new-words\", got {other:?}"
            ))),
        }
    }
}

// ---------------------------------------------------------------------------
// Methods
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Pretrain,
    Finetune,
    Joint,
    Rbkd,
    RbkdEwc,
    EbkdRbkd,
}

impl Method {
    pub fn parse(name: &str) -> Result<Method, CliError> {
        Ok(match name {
            "pretrain" => Method::Pretrain,
            "finetune" => Method::Finetune,
            "joint" => Method::Joint,
            "rbkd" => Method::Rbkd,
            "rbkd_ewc" => Method::RbkdEwc,
            "ebkd_rbkd" => Method::EbkdRbkd,
            other => {
                return Err(CliError::config(format!(
                    "unknown method {other:?}; expected pretrain|finetune|joint|rbkd|rbkd_ewc|ebkd_rbkd"
                )))
            }
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Method::Pretrain => "pretrain",
            Method::Finetune => "finetune",
            Method::Joint => "joint",
            Method::Rbkd => "rbkd",
            Method::RbkdEwc => "rbkd_ewc",
            Method::EbkdRbkd => "ebkd_rbkd",
        }
    }

    /// Trains from scratch rather than from an input checkpoint.
    pub fn from_scratch(&self) -> bool {
        matches!(self, Method::Pretrain | Method::Joint)
    }

    /// Rejects weights the method does not use; keeps configs honest.
    pub fn check_weights(&self, w: &LossWeights) -> Result<(), CliError> {
        let fail = |what: &str| {
            Err(CliError::config(format!(
                "method {} does not use {what}; set it to 0 instead of relying on it being ignored",
                self.name()
            )))
        };
        match self {
            Method::Pretrain | Method::Finetune | Method::Joint => {
                if w.beta != 0.0 {
                    return fail("beta (RBKD weight)");
                }
                if w.gamma != 0.0 {
                    return fail("gamma (EBKD weight)");
                }
                if w.lambda_ewc != 0.0 {
                    return fail("lambda_ewc");
                }
            }
            Method::Rbkd => {
                if w.gamma != 0.0 {
                    return fail("gamma (EBKD weight)");
                }
                if w.lambda_ewc != 0.0 {
                    return fail("lambda_ewc");
                }
            }
            Method::RbkdEwc => {
                if w.gamma != 0.0 {
                    return fail("gamma (EBKD weight)");
                }
                if w.lambda_ewc <= 0.0 {
                    return Err(CliError::config(
                        "method rbkd_ewc needs lambda_ewc > 0".to_string(),
                    ));
                }
            }
            Method::EbkdRbkd => {
                if w.lambda_ewc != 0.0 {
                    return fail("lambda_ewc");
                }
            }
        }
        Ok(())
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

// ---------------------------------------------------------------------------
// Shared sections
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsSection {
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub beta: f64,
    #[serde(default)]
    pub gamma: f64,
    #[serde(default)]
    pub lambda_ewc: f64,
}

fn default_temperature() -> f64 { 1.0 }

impl Default for WeightsSection {
    fn default() -> Self {
        WeightsSection { temperature: 1.0, beta: 0.0, gamma: 0.0, lambda_ewc: 0.0 }
    }
}

impl From<WeightsSection> for LossWeights {
    fn from(w: WeightsSection) -> LossWeights {
        LossWeights {
            temperature: w.temperature,
            beta: w.beta,
            gamma: w.gamma,
            lambda_ewc: w.lambda_ewc,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    #[serde(default = "default_peak_lr")]
    pub peak_lr: f64,
    #[serde(default = "default_warmup")]
    pub warmup_steps: usize,
    #[serde(default = "default_total_steps")]
    pub total_steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_fisher_samples")]
    pub fisher_samples: usize,
    /// Global L2 gradient-norm clip applied before each update. The
    /// normalized attention-map loss can spike when a student frame's map
    /// norm shrinks; clipping keeps large-gamma runs anchored instead of
    /// random-walking.
    #[serde(default = "default_grad_clip")]
    pub grad_clip: f64,
}

fn default_peak_lr() -> f64 { 3e-3 }
fn default_warmup() -> usize { 100 }
fn default_total_steps() -> usize { 1000 }
fn default_batch() -> usize { 32 }
fn default_fisher_samples() -> usize { 128 }
fn default_grad_clip() -> f64 { 5.0 }

impl Default for OptimizerSection {
    fn default() -> Self {
        OptimizerSection {
            peak_lr: default_peak_lr(),
            warmup_steps: default_warmup(),
            total_steps: default_total_steps(),
            batch_size: default_batch(),
            fisher_samples: default_fisher_samples(),
            grad_clip: default_grad_clip(),
        }
    }
}

impl OptimizerSection {
    fn validate(&self) -> Result<(), CliError> {
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(CliError::config("optimizer.peak_lr must be positive"));
        }
        if self.warmup_steps == 0 {
            return Err(CliError::config("optimizer.warmup_steps must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(CliError::config("optimizer.batch_size must be >= 1"));
        }
        if !(self.grad_clip > 0.0 && self.grad_clip.is_finite()) {
            return Err(CliError::config("optimizer.grad_clip must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_input_dim")]
    pub input_dim: usize,
    /// Conv layers as [channels, kernel, stride] triples.
    #[serde(default = "default_conv")]
    pub conv: Vec<[usize; 3]>,
    #[serde(default = "default_num_sabs")]
    pub num_sabs: usize,
    #[serde(default = "default_d_h")]
    pub d_h: usize,
    #[serde(default = "default_heads")]
    pub num_heads: usize,
    #[serde(default = "default_fc_dims")]
    pub fc_dims: Vec<usize>,
}

fn default_conv() -> Vec<[usize; 3]> { vec![[32, 3, 2], [32, 3, 2]] }
fn default_num_sabs() -> usize { 2 }
fn default_d_h() -> usize { 32 }
fn default_heads() -> usize { 4 }
fn default_fc_dims() -> Vec<usize> { vec![64, 13] }

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            input_dim: default_input_dim(),
            conv: default_conv(),
            num_sabs: default_num_sabs(),
            d_h: default_d_h(),
            num_heads: default_heads(),
            fc_dims: default_fc_dims(),
        }
    }
}

impl ModelSection {
    pub fn to_config(&self) -> Result<ModelConfig, CliError> {
        let config = ModelConfig {
            input_dim: self.input_dim,
            conv_layers: self
                .conv
                .iter()
                .map(|&[channels, kernel, stride]| ConvSpec { channels, kernel, stride })
                .collect(),
            num_sabs: self.num_sabs,
            d_h: self.d_h,
            num_heads: self.num_heads,
            fc_dims: self.fc_dims.clone(),
        };
        config.validate()?;
        Ok(config)
    }
}

// ---------------------------------------------------------------------------
// Stage configs
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfigFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<u32>,
    pub method: String,
    pub train: Vec<String>,
    pub test: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher: Option<String>,
    pub out_ckpt: String,
    pub out_dir: String,
    pub seed: u64,
    #[serde(default)]
    pub weights: WeightsSection,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelSection>,
}

/// A validated stage ready to train.
#[derive(Debug, Clone)]
pub struct StageSpec {
    pub stage: u32,
    pub method: Method,
    pub train_paths: Vec<PathBuf>,
    pub test_paths: Vec<PathBuf>,
    pub teacher_path: Option<PathBuf>,
    pub out_ckpt: PathBuf,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub weights: LossWeights,
    pub optimizer: OptimizerSection,
    pub model: Option<ModelConfig>,
    /// Resolved snapshot, written beside the stage outputs.
    pub snapshot_toml: String,
}

impl StageConfigFile {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        read_toml(path)
    }

    pub fn resolve(&self) -> Result<StageSpec, CliError> {
        let method = Method::parse(&self.method)?;
        let weights: LossWeights = self.weights.into();
        weights
            .validate()
            .map_err(|e| CliError::config(e.to_string()))?;
        method.check_weights(&weights)?;
        self.optimizer.validate()?;

        if self.train.is_empty() {
            return Err(CliError::config("at least one training dataset is required"));
        }
        if method != Method::Joint && self.train.len() != 1 {
            return Err(CliError::config(format!(
                "method {} must reference exactly one training dataset (the current stage's); got {}. \
                 Accumulated datasets are only legal for joint training",
                method,
                self.train.len()
            )));
        }
        if self.test.is_empty() {
            return Err(CliError::config("at least one test dataset is required"));
        }

        if method.from_scratch() {
            if self.teacher.is_some() {
                return Err(CliError::config(format!(
                    "method {method} trains from scratch and forbids an input checkpoint"
                )));
            }
        } else if self.teacher.is_none() {
            return Err(CliError::config(format!(
                "method {method} needs an input checkpoint (teacher = \"...\")"
            )));
        }

        if method.from_scratch() && self.model.is_none() {
            return Err(CliError::config(format!(
                "method {method} needs a [model] section"
            )));
        }
        if !method.from_scratch() && self.model.is_some() {
            return Err(CliError::config(format!(
                "method {method} takes its model config from the input checkpoint; remove [model]"
            )));
        }

        let stage = match self.stage {
            Some(s) => s,
            None if method == Method::Pretrain => 1,
            None => {
                return Err(CliError::config(
                    "stage index is required for non-pretrain methods",
                ))
            }
        };

        let model = self.model.as_ref().map(|m| m.to_config()).transpose()?;
        let snapshot_toml =
            toml::to_string_pretty(self).map_err(|e| CliError::config(e.to_string()))?;
        Ok(StageSpec {
            stage,
            method,
            train_paths: self.train.iter().map(PathBuf::from).collect(),
            test_paths: self.test.iter().map(PathBuf::from).collect(),
            teacher_path: self.teacher.as_ref().map(PathBuf::from),
            out_ckpt: PathBuf::from(&self.out_ckpt),
            out_dir: PathBuf::from(&self.out_dir),
            seed: self.seed,
            weights,
            optimizer: self.optimizer,
            model,
            snapshot_toml,
        })
    }
}

// ---------------------------------------------------------------------------
// Run manifests
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestOptimizerSection {
    #[serde(default = "default_peak_lr")]
    pub peak_lr: f64,
    #[serde(default = "default_warmup")]
    pub warmup_steps: usize,
    #[serde(default = "default_pretrain_steps")]
    pub pretrain_steps: usize,
    #[serde(default = "default_incr_steps")]
    pub incr_steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_fisher_samples")]
    pub fisher_samples: usize,
    #[serde(default = "default_grad_clip")]
    pub grad_clip: f64,
}

fn default_pretrain_steps() -> usize { 3000 }
fn default_incr_steps() -> usize { 1000 }

impl Default for ManifestOptimizerSection {
    fn default() -> Self {
        ManifestOptimizerSection {
            peak_lr: default_peak_lr(),
            warmup_steps: default_warmup(),
            pretrain_steps: default_pretrain_steps(),
            incr_steps: default_incr_steps(),
            batch_size: default_batch(),
            fisher_samples: default_fisher_samples(),
            grad_clip: default_grad_clip(),
        }
    }
}

impl ManifestOptimizerSection {
    pub fn stage_settings(&self, total_steps: usize) -> OptimizerSection {
        OptimizerSection {
            peak_lr: self.peak_lr,
            warmup_steps: self.warmup_steps,
            total_steps,
            batch_size: self.batch_size,
            fisher_samples: self.fisher_samples,
            grad_clip: self.grad_clip,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestStage {
    pub train: String,
    pub test: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
}

impl ManifestStage {
    pub fn task_name(&self, index: usize) -> String {
        self.name.clone().unwrap_or_else(|| {
            Path::new(&self.train)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| format!("task{}", index + 1))
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestFile {
    pub seed: u64,
    pub out_dir: String,
    pub methods: Vec<String>,
    #[serde(default)]
    pub weights: WeightsSection,
    #[serde(default)]
    pub optimizer: ManifestOptimizerSection,
    #[serde(default)]
    pub model: ModelSection,
    pub stages: Vec<ManifestStage>,
}

/// A validated manifest plus its canonical serialization and hash.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub file: ManifestFile,
    pub methods: Vec<Method>,
    pub model: ModelConfig,
    pub snapshot_toml: String,
    pub config_hash: String,
}

impl ManifestFile {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        read_toml(path)
    }

    pub fn resolve(&self) -> Result<Manifest, CliError> {
        if self.stages.is_empty() {
            return Err(CliError::config("a manifest needs at least one stage"));
        }
        let methods: Vec<Method> = self
            .methods
            .iter()
            .map(|m| Method::parse(m))
            .collect::<Result<_, _>>()?;
        if methods.is_empty() {
            return Err(CliError::config("a manifest needs at least one method"));
        }
        if self.stages.len() == 1 {
            if methods != [Method::Pretrain] {
                return Err(CliError::config(
                    "a single-stage manifest only supports methods = [\"pretrain\"]",
                ));
            }
        } else if methods.contains(&Method::Pretrain) {
            return Err(CliError::config(
                "multi-stage manifests run the shared pretrain implicitly; \
                 list only incremental methods and/or joint",
            ));
        }
        let mut seen = std::collections::HashSet::new();
        for m in &methods {
            if !seen.insert(*m) {
                return Err(CliError::config(format!("method {m} listed twice")));
            }
        }
        let weights: LossWeights = self.weights.into();
        weights
            .validate()
            .map_err(|e| CliError::config(e.to_string()))?;
        let model = self.model.to_config()?;
        let snapshot_toml =
            toml::to_string_pretty(self).map_err(|e| CliError::config(e.to_string()))?;
        let config_hash = hex::encode(Sha256::digest(snapshot_toml.as_bytes()));
        Ok(Manifest {
            file: self.clone(),
            methods,
            model,
            snapshot_toml,
            config_hash,
        })
    }
}

impl Manifest {
    /// Per-method weights: terms a method does not use are zeroed, so the
    /// derived stage configs always pass the method contract.
    pub fn weights_for(&self, method: Method) -> LossWeights {
        let shared: LossWeights = self.file.weights.into();
        match method {
            Method::Pretrain | Method::Finetune | Method::Joint => LossWeights {
                temperature: shared.temperature,
                beta: 0.0,
                gamma: 0.0,
                lambda_ewc: 0.0,
            },
            Method::Rbkd => LossWeights {
                temperature: shared.temperature,
                beta: shared.beta,
                gamma: 0.0,
                lambda_ewc: 0.0,
            },
            Method::RbkdEwc => LossWeights {
                temperature: shared.temperature,
                beta: shared.beta,
                gamma: 0.0,
                lambda_ewc: shared.lambda_ewc,
            },
            Method::EbkdRbkd => LossWeights {
                temperature: shared.temperature,
                beta: shared.beta,
                gamma: shared.gamma,
                lambda_ewc: 0.0,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_stage(method: &str) -> StageConfigFile {
        StageConfigFile {
            stage: Some(2),
            method: method.to_string(),
            train: vec!["train.ild".into()],
            test: vec!["test.ild".into()],
            teacher: Some("teacher.ilck".into()),
            out_ckpt: "out.ilck".into(),
            out_dir: "out".into(),
            seed: 1,
            weights: WeightsSection::default(),
            optimizer: OptimizerSection::default(),
            model: None,
        }
    }

    #[test]
    fn finetune_rejects_distillation_weights() {
        let mut cfg = minimal_stage("finetune");
        cfg.weights.beta = 0.03;
        let err = cfg.resolve().unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("beta"), "{err}");
    }

    #[test]
    fn pretrain_forbids_teacher_and_needs_model() {
        let mut cfg = minimal_stage("pretrain");
        cfg.stage = None;
        let err = cfg.resolve().unwrap_err();
        assert!(err.to_string().contains("forbids"), "{err}");
        cfg.teacher = None;
        let err = cfg.resolve().unwrap_err();
        assert!(err.to_string().contains("[model]"), "{err}");
        cfg.model = Some(ModelSection::default());
        let spec = cfg.resolve().unwrap();
        assert_eq!(spec.stage, 1);
        assert_eq!(spec.method, Method::Pretrain);
    }

    #[test]
    fn incremental_methods_need_a_teacher_and_one_train_set() {
        let mut cfg = minimal_stage("rbkd");
        cfg.teacher = None;
        assert!(cfg.resolve().is_err());
        let mut cfg = minimal_stage("rbkd");
        cfg.train = vec!["a.ild".into(), "b.ild".into()];
        let err = cfg.resolve().unwrap_err();
        assert!(err.to_string().contains("exactly one"), "{err}");
    }

    #[test]
    fn rbkd_ewc_needs_positive_lambda_and_no_gamma() {
        let mut cfg = minimal_stage("rbkd_ewc");
        cfg.weights.beta = 0.03;
        assert!(cfg.resolve().is_err()); // lambda defaults to 0
        cfg.weights.lambda_ewc = 1.0;
        assert!(cfg.resolve().is_ok());
        cfg.weights.gamma = 10.0;
        assert!(cfg.resolve().is_err());
    }

    #[test]
    fn ebkd_rbkd_allows_zero_weights_for_degeneracy_runs() {
        let cfg = minimal_stage("ebkd_rbkd");
        let spec = cfg.resolve().unwrap();
        assert_eq!(spec.weights.beta, 0.0);
        assert_eq!(spec.weights.gamma, 0.0);
    }

    #[test]
    fn manifest_rules() {
        let manifest = ManifestFile {
            seed: 1,
            out_dir: "runs".into(),
            methods: vec!["finetune".into(), "ebkd_rbkd".into()],
            weights: WeightsSection { temperature: 3.0, beta: 0.03, gamma: 500.0, lambda_ewc: 1.0 },
            optimizer: ManifestOptimizerSection::default(),
            model: ModelSection::default(),
            stages: vec![
                ManifestStage { train: "a.ild".into(), test: "at.ild".into(), name: None },
                ManifestStage { train: "b.ild".into(), test: "bt.ild".into(), name: None },
            ],
        };
        let resolved = manifest.resolve().unwrap();
        assert_eq!(resolved.config_hash.len(), 64);
        let ft = resolved.weights_for(Method::Finetune);
        assert_eq!((ft.beta, ft.gamma, ft.lambda_ewc), (0.0, 0.0, 0.0));
        let ours = resolved.weights_for(Method::EbkdRbkd);
        assert_eq!((ours.beta, ours.gamma, ours.lambda_ewc), (0.03, 500.0, 0.0));

        let mut bad = manifest.clone();
        bad.methods = vec!["pretrain".into(), "rbkd".into()];
        assert!(bad.resolve().is_err());
        let mut single = manifest;
        single.stages.truncate(1);
        single.methods = vec!["pretrain".into()];
        assert!(single.resolve().is_ok());
    }
}
