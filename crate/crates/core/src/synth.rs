//! Deterministic synthetic task families.
//!
//! A task draws label strings over a symbol inventory, renders each label
//! as a fixed per-symbol feature prototype, optionally pushes the
//! prototypes through a linear "accent" transform, and adds Gaussian
//! noise. Everything is a pure function of the spec, including its seed:
//! per-sample RNG streams are derived as `mix(seed, sample_index)`, so
//! generation order (or parallelism) cannot change the output.
//!
//! Two derivations mirror the practical adaptation scenarios:
//! - an accent shift keeps the inventory and perturbs the acoustics with
//!   a seeded rotation-like mixing map;
//! - a new-words task extends the inventory with freshly seeded
//!   prototypes while the global alphabet (and so the model head) stays
//!   fixed.
//!
//! Keep `proto_len >= 2 * total conv stride` so every label string has a
//! feasible CTC alignment after downsampling, and keep `noise_std` at or
//! below roughly 0.5 for tasks a desk-scale model can learn to under 5%
//! character error (see the learnability checks in the harness tests).

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::rng::{mix_seed, SeededRng};

const STREAM_SAMPLES: u64 = 0;
const STREAM_PROTOTYPES: u64 = 1;
const STREAM_TRANSFORM: u64 = 2;

fn stream(seed: u64, tag: u64, index: u64) -> u64 {
    mix_seed(mix_seed(seed, tag), index)
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SynthError {
    #[error("invalid task spec: {0}")]
    InvalidSpec(String),
    #[error("symbol {symbol} is outside the label range [1, {max}]")]
    SymbolOutOfRange { symbol: usize, max: usize },
    #[error("new symbols overlap the base inventory: {0:?}")]
    OverlappingSymbols(Vec<usize>),
}

/// Feature-space linear map `x -> matrix * x + bias` applied to prototype
/// columns.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearTransform {
    pub dim: usize,
    /// Row-major `dim x dim`.
    pub matrix: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearTransform {
    pub fn identity(dim: usize) -> Self {
        let mut matrix = vec![0.0; dim * dim];
        for i in 0..dim {
            matrix[i * dim + i] = 1.0;
        }
        LinearTransform { dim, matrix, bias: vec![0.0; dim] }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity(self.dim)
    }

    fn apply(&self, column: &[f64], out: &mut [f64]) {
        for i in 0..self.dim {
            let mut acc = self.bias[i];
            for j in 0..self.dim {
                acc += self.matrix[i * self.dim + j] * column[j];
            }
            out[i] = acc;
        }
    }

    /// Spectral norm of `matrix - I`, by power iteration. Quantifies how
    /// far an accent map is from leaving the acoustics unchanged.
    pub fn operator_distance_from_identity(&self) -> f64 {
        let d = self.dim;
        let mut delta = self.matrix.clone();
        for i in 0..d {
            delta[i * d + i] -= 1.0;
        }
        // power iteration on delta^T delta
        let mut v = vec![1.0 / libm::sqrt(d as f64); d];
        let mut value = 0.0;
        for _ in 0..200 {
            let mut dv = vec![0.0; d];
            for i in 0..d {
                for j in 0..d {
                    dv[i] += delta[i * d + j] * v[j];
                }
            }
            let mut dtdv = vec![0.0; d];
            for i in 0..d {
                for j in 0..d {
                    dtdv[j] += delta[i * d + j] * dv[i];
                }
            }
            let norm = libm::sqrt(dtdv.iter().map(|x| x * x).sum::<f64>());
            if norm == 0.0 {
                return 0.0;
            }
            for (vi, di) in v.iter_mut().zip(&dtdv) {
                *vi = di / norm;
            }
            value = norm;
        }
        libm::sqrt(value)
    }
}

/// Declarative description of one synthetic task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub task_id: u32,
    /// M: alphabet size including the blank at index 0.
    pub alphabet_size: usize,
    /// Symbols this task draws from, each in [1, M-1], sorted.
    pub inventory: Vec<usize>,
    /// Per-symbol `input_dim x proto_len` feature prototypes, row-major.
    pub prototypes: BTreeMap<usize, Vec<f64>>,
    pub input_dim: usize,
    pub proto_len: usize,
    pub transform: Option<LinearTransform>,
    pub noise_std: f64,
    /// Inclusive range of label-sequence lengths.
    pub len_range: (usize, usize),
    pub num_samples: usize,
    pub seed: u64,
}

impl TaskSpec {
    /// A fresh base task with seeded unit-Gaussian prototypes.
    #[allow(clippy::too_many_arguments)]
    pub fn seeded_base(
        task_id: u32,
        input_dim: usize,
        proto_len: usize,
        alphabet_size: usize,
        inventory: Vec<usize>,
        noise_std: f64,
        len_range: (usize, usize),
        num_samples: usize,
        seed: u64,
    ) -> Result<TaskSpec, SynthError> {
        let mut prototypes = BTreeMap::new();
        for &sym in &inventory {
            prototypes.insert(sym, seeded_prototype(seed, sym, input_dim, proto_len));
        }
        let spec = TaskSpec {
            task_id,
            alphabet_size,
            inventory,
            prototypes,
            input_dim,
            proto_len,
            transform: None,
            noise_std,
            len_range,
            num_samples,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.inventory.is_empty() {
            return Err(SynthError::InvalidSpec("inventory must be non-empty".into()));
        }
        if self.alphabet_size < 2 {
            return Err(SynthError::InvalidSpec("alphabet must hold blank plus one symbol".into()));
        }
        let mut sorted = self.inventory.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted != self.inventory {
            return Err(SynthError::InvalidSpec("inventory must be sorted and unique".into()));
        }
        for &sym in &self.inventory {
            if sym == 0 || sym >= self.alphabet_size {
                return Err(SynthError::SymbolOutOfRange { symbol: sym, max: self.alphabet_size - 1 });
            }
            let proto = self.prototypes.get(&sym).ok_or_else(|| {
                SynthError::InvalidSpec(format!("missing prototype for symbol {sym}"))
            })?;
            if proto.len() != self.input_dim * self.proto_len {
                return Err(SynthError::InvalidSpec(format!(
                    "prototype for symbol {sym} has {} values, expected {}",
                    proto.len(),
                    self.input_dim * self.proto_len
                )));
            }
            if proto.iter().any(|v| !v.is_finite()) {
                return Err(SynthError::InvalidSpec(format!(
                    "prototype for symbol {sym} contains non-finite values"
                )));
            }
        }
        if self.input_dim == 0 || self.proto_len == 0 {
            return Err(SynthError::InvalidSpec("input_dim and proto_len must be positive".into()));
        }
        if self.len_range.0 < 1 || self.len_range.0 > self.len_range.1 {
            return Err(SynthError::InvalidSpec(format!(
                "bad utterance length range {:?}",
                self.len_range
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(SynthError::InvalidSpec("noise_std must be finite and >= 0".into()));
        }
        if let Some(t) = &self.transform {
            if t.dim != self.input_dim
                || t.matrix.len() != self.input_dim * self.input_dim
                || t.bias.len() != self.input_dim
            {
                return Err(SynthError::InvalidSpec(
                    "transform dimensions do not match input_dim".into(),
                ));
            }
        }
        Ok(())
    }
}

fn seeded_prototype(seed: u64, symbol: usize, input_dim: usize, proto_len: usize) -> Vec<f64> {
    let mut rng = SeededRng::new(stream(seed, STREAM_PROTOTYPES, symbol as u64));
    (0..input_dim * proto_len).map(|_| rng.gaussian()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Provenance {
    pub task_id: u32,
    pub index: u32,
}

/// One labeled utterance: `input_dim x frames` features plus its label
/// string.
#[derive(Debug, Clone)]
pub struct Sample {
    /// Row-major `input_dim x frames`.
    pub features: Vec<f64>,
    pub frames: usize,
    pub labels: Vec<usize>,
    /// Not persisted by the dataset file format.
    pub provenance: Option<Provenance>,
}

// Equality is over the persisted content; provenance is bookkeeping that
// the file format intentionally drops.
impl PartialEq for Sample {
    fn eq(&self, other: &Self) -> bool {
        self.frames == other.frames
            && self.labels == other.labels
            && self.features == other.features
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub input_dim: usize,
    pub alphabet_size: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Renders `spec.num_samples` utterances. Fully determined by the spec.
pub fn generate_task(spec: &TaskSpec) -> Result<Dataset, SynthError> {
    spec.validate()?;
    let f = spec.input_dim;
    let sp = spec.proto_len;
    let mut samples = Vec::with_capacity(spec.num_samples);
    let mut transformed: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (&sym, proto) in &spec.prototypes {
        let rendered = match &spec.transform {
            None => proto.clone(),
            Some(t) => {
                let mut out = vec![0.0; f * sp];
                let mut col = vec![0.0; f];
                let mut mapped = vec![0.0; f];
                for j in 0..sp {
                    for i in 0..f {
                        col[i] = proto[i * sp + j];
                    }
                    t.apply(&col, &mut mapped);
                    for i in 0..f {
                        out[i * sp + j] = mapped[i];
                    }
                }
                out
            }
        };
        transformed.insert(sym, rendered);
    }
    for index in 0..spec.num_samples {
        let mut rng = SeededRng::new(stream(spec.seed, STREAM_SAMPLES, index as u64));
        let u = rng.range_inclusive(spec.len_range.0, spec.len_range.1);
        let labels: Vec<usize> = (0..u)
            .map(|_| spec.inventory[rng.below(spec.inventory.len())])
            .collect();
        let frames = u * sp;
        let mut features = vec![0.0; f * frames];
        for (pos, &label) in labels.iter().enumerate() {
            let proto = &transformed[&label];
            for i in 0..f {
                for j in 0..sp {
                    features[i * frames + pos * sp + j] = proto[i * sp + j];
                }
            }
        }
        if spec.noise_std > 0.0 {
            for v in features.iter_mut() {
                *v += spec.noise_std * rng.gaussian();
            }
        }
        samples.push(Sample {
            features,
            frames,
            labels,
            provenance: Some(Provenance { task_id: spec.task_id, index: index as u32 }),
        });
    }
    Ok(Dataset {
        input_dim: f,
        alphabet_size: spec.alphabet_size,
        samples,
    })
}

/// Same inventory, shifted acoustics: the transform becomes a seeded
/// mixing map (a product of random plane rotations) interpolated toward
/// identity by `1 - rotation_strength`, plus a small bias. Same "words",
/// shifted "pronunciation".
pub fn derive_accent_task(
    base: &TaskSpec,
    rotation_strength: f64,
    seed: u64,
) -> Result<TaskSpec, SynthError> {
    if !(0.0..=1.0).contains(&rotation_strength) {
        return Err(SynthError::InvalidSpec(format!(
            "rotation_strength {rotation_strength} must be in [0, 1]"
        )));
    }
    let f = base.input_dim;
    let mut rng = SeededRng::new(stream(seed, STREAM_TRANSFORM, 0));
    let mut rotation = LinearTransform::identity(f).matrix;
    if f >= 2 {
        for _ in 0..f {
            let i = rng.below(f);
            let mut j = rng.below(f - 1);
            if j >= i {
                j += 1;
            }
            let theta = rng.uniform_in(-core::f64::consts::PI, core::f64::consts::PI);
            let (s, c) = (libm::sin(theta), libm::cos(theta));
            for col in 0..f {
                let a = rotation[i * f + col];
                let b = rotation[j * f + col];
                rotation[i * f + col] = c * a - s * b;
                rotation[j * f + col] = s * a + c * b;
            }
        }
    }
    let identity = LinearTransform::identity(f).matrix;
    let matrix: Vec<f64> = identity
        .iter()
        .zip(&rotation)
        .map(|(id, rot)| (1.0 - rotation_strength) * id + rotation_strength * rot)
        .collect();
    let bias: Vec<f64> = (0..f)
        .map(|_| rotation_strength * 0.1 * rng.gaussian())
        .collect();
    let mut derived = base.clone();
    derived.transform = Some(LinearTransform { dim: f, matrix, bias });
    derived.validate()?;
    Ok(derived)
}

/// Extends the inventory with fresh seeded prototypes for `new_symbols`;
/// acoustics of existing symbols are untouched (identity transform).
pub fn derive_newwords_task(
    base: &TaskSpec,
    new_symbols: &[usize],
    seed: u64,
) -> Result<TaskSpec, SynthError> {
    let overlap: Vec<usize> = new_symbols
        .iter()
        .copied()
        .filter(|s| base.inventory.contains(s))
        .collect();
    if !overlap.is_empty() {
        return Err(SynthError::OverlappingSymbols(overlap));
    }
    for &sym in new_symbols {
        if sym == 0 || sym >= base.alphabet_size {
            return Err(SynthError::SymbolOutOfRange { symbol: sym, max: base.alphabet_size - 1 });
        }
    }
    let mut derived = base.clone();
    derived.transform = None;
    for &sym in new_symbols {
        derived
            .prototypes
            .insert(sym, seeded_prototype(seed, sym, base.input_dim, base.proto_len));
        derived.inventory.push(sym);
    }
    derived.inventory.sort_unstable();
    derived.validate()?;
    Ok(derived)
}
