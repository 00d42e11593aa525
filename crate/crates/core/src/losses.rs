//! Training objectives: CTC, response-based distillation (RBKD),
//! attention-map distillation (EBKD), the EWC baseline penalty and the
//! weighted aggregate.
//!
//! Conventions that matter and are easy to get wrong:
//!
//! - All loss functions consume frame log-probabilities through the
//!   numerically safe log-softmax path; masked frames contribute nothing.
//! - The importance map is DETACHED from the differentiation graph before
//!   the attention map is formed, for the teacher and the student alike.
//!   Gradients of the EBKD loss reach student parameters only through the
//!   live feature map. Differentiating through the importance map itself
//!   would need second-order derivatives; this engine is first-order, and
//!   the detach convention matches standard gradient-based attention
//!   transfer. This is the most consequential convention in the crate.
//! - Frame vectors whose L2 norm falls below `NORM_EPS` normalize to the
//!   zero vector, and the gradient of the distance at exactly zero
//!   difference is zero, so self-distillation sits at an exact, finite
//!   fixed point.
//! - RBKD log arguments are floored at `LOG_FLOOR` (ln 1e-12) so a
//!   student that starves a symbol the teacher cares about produces a
//!   large finite loss, never NaN.
//! - Each loss is per sample; mini-batch reduction (a mean) happens in
//!   the harness so loss magnitudes do not depend on batch size.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::model::{BoundModel, Checkpoint, EncoderOutput, ParamData, ParamMap, Posteriors};
use crate::rng::SeededRng;
use crate::synth::Dataset;
use crate::tensor::{apply_custom_op, backward, CustomOp, Tensor, TensorError};

/// Guard for Eq.-5-style normalization: frame vectors with a smaller L2
/// norm are treated as exactly zero.
pub const NORM_EPS: f64 = 1e-8;
/// Floor for RBKD log arguments, as a log-probability.
pub const LOG_FLOOR: f64 = -27.631021115928547; // ln(1e-12)

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LossError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: frame masks differ between teacher and student")]
    MaskMismatch { op: &'static str },
    #[error("temperature must be a positive finite number, got {0}")]
    BadTemperature(f64),
    #[error("invalid loss weights: {0}")]
    BadWeights(String),
    #[error("label {label} at position {position} is outside [1, {max}] (0 is the blank)")]
    BadLabel {
        label: usize,
        position: usize,
        max: usize,
    },
    #[error("infeasible alignment: {frames} usable frames cannot carry {required} symbols (labels plus separating blanks)")]
    InfeasibleAlignment { frames: usize, required: usize },
    #[error("instance too large for brute-force enumeration: M^K = {m}^{k} exceeds {bound} paths")]
    TooLargeToEnumerate { m: usize, k: usize, bound: usize },
    #[error("importance map: the forward graph is gone or never recorded; re-run forward and call this before the graph is dropped")]
    GraphConsumed,
    #[error("{op}: weight is non-zero but the component loss was not provided")]
    MissingComponent { op: &'static str },
    #[error("EWC: parameter sets differ at {0}")]
    EwcParamMismatch(String),
    #[error("fisher_estimate: dataset is empty")]
    EmptyDataset,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("model error in loss evaluation: {0}")]
    Model(String),
}

impl From<crate::model::ModelError> for LossError {
    fn from(e: crate::model::ModelError) -> Self {
        LossError::Model(alloc::format!("{e}"))
    }
}

/// Balance knobs of the aggregated objective. Defaults are the reference
/// operating point (T = 3, beta = 0.03, gamma = 500) with a unit EWC
/// weight for the baseline that uses it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub temperature: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda_ewc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            temperature: 3.0,
            beta: 0.03,
            gamma: 500.0,
            lambda_ewc: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(LossError::BadTemperature(self.temperature));
        }
        for (name, v) in [
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("lambda_ewc", self.lambda_ewc),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(LossError::BadWeights(alloc::format!("{name} = {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// CTC
// ---------------------------------------------------------------------------

fn validate_labels(labels: &[usize], alphabet: usize, blank: usize) -> Result<(), LossError> {
    for (position, &label) in labels.iter().enumerate() {
        if label == blank || label >= alphabet {
            return Err(LossError::BadLabel {
                label,
                position,
                max: alphabet - 1,
            });
        }
    }
    Ok(())
}

/// Minimum frames needed: one per label plus one blank between repeats.
fn min_alignment_frames(labels: &[usize]) -> usize {
    let repeats = labels.windows(2).filter(|w| w[0] == w[1]).count();
    labels.len() + repeats
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + libm::log1p(libm::exp(lo - hi))
}

/// Forward dynamic program over the blank-interleaved label sequence.
/// Returns per-time alpha rows and the total log-likelihood.
fn ctc_alphas(
    log_probs: &[f64],
    alphabet: usize,
    frames: &[usize],
    interleaved: &[usize],
    blank: usize,
) -> (Vec<Vec<f64>>, f64) {
    let s_len = interleaved.len();
    let t_len = frames.len();
    let lp = |t: usize, m: usize| log_probs[frames[t] * alphabet + m];
    let mut alphas = vec![vec![f64::NEG_INFINITY; s_len]; t_len];
    alphas[0][0] = lp(0, interleaved[0]);
    if s_len > 1 {
        alphas[0][1] = lp(0, interleaved[1]);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut acc = alphas[t - 1][s];
            if s >= 1 {
                acc = log_add(acc, alphas[t - 1][s - 1]);
            }
            if s >= 2 && interleaved[s] != blank && interleaved[s] != interleaved[s - 2] {
                acc = log_add(acc, alphas[t - 1][s - 2]);
            }
            alphas[t][s] = acc + lp(t, interleaved[s]);
        }
    }
    let mut total = alphas[t_len - 1][s_len - 1];
    if s_len > 1 {
        total = log_add(total, alphas[t_len - 1][s_len - 2]);
    }
    (alphas, total)
}

struct CtcOp {
    /// Blank-interleaved label sequence.
    interleaved: Vec<usize>,
    /// Row indices of the unmasked frames, in time order.
    frames: Vec<usize>,
    alphabet: usize,
    blank: usize,
}

impl CustomOp for CtcOp {
    fn name(&self) -> &'static str {
        "ctc_nll"
    }

    fn backward(&self, out_grad: &[f64], inputs: &[Tensor]) -> Vec<Option<Vec<f64>>> {
        let log_probs = inputs[0].data();
        let s_len = self.interleaved.len();
        let t_len = self.frames.len();
        let lp = |t: usize, m: usize| log_probs[self.frames[t] * self.alphabet + m];
        let (alphas, total) = ctc_alphas(
            log_probs,
            self.alphabet,
            &self.frames,
            &self.interleaved,
            self.blank,
        );
        // betas exclude the emission at their own (t, s)
        let mut beta_next = vec![f64::NEG_INFINITY; s_len];
        let mut grad = vec![0.0; inputs[0].numel()];
        for t in (0..t_len).rev() {
            let mut beta = vec![f64::NEG_INFINITY; s_len];
            if t == t_len - 1 {
                beta[s_len - 1] = 0.0;
                if s_len > 1 {
                    beta[s_len - 2] = 0.0;
                }
            } else {
                for s in 0..s_len {
                    let mut acc = beta_next[s] + lp(t + 1, self.interleaved[s]);
                    if s + 1 < s_len {
                        acc = log_add(acc, beta_next[s + 1] + lp(t + 1, self.interleaved[s + 1]));
                    }
                    if s + 2 < s_len
                        && self.interleaved[s + 2] != self.blank
                        && self.interleaved[s + 2] != self.interleaved[s]
                    {
                        acc = log_add(acc, beta_next[s + 2] + lp(t + 1, self.interleaved[s + 2]));
                    }
                    beta[s] = acc;
                }
            }
            // d(-logZ)/d lp(t, m) = -sum_{s: l'_s = m} exp(alpha + beta - logZ)
            for s in 0..s_len {
                let occupancy = alphas[t][s] + beta[s] - total;
                if occupancy > f64::NEG_INFINITY {
                    let m = self.interleaved[s];
                    grad[self.frames[t] * self.alphabet + m] -= libm::exp(occupancy) * out_grad[0];
                }
            }
            beta_next = beta;
        }
        vec![Some(grad)]
    }
}

/// Negative log-likelihood of the label sequence under the posterior
/// frames, marginalized over all blank/repeat alignments by the standard
/// forward dynamic program in log space. Differentiable with respect to
/// the posteriors (through their log-probabilities).
pub fn ctc_loss(
    posteriors: &Posteriors,
    labels: &[usize],
    blank: usize,
) -> Result<Tensor, LossError> {
    let alphabet = posteriors.alphabet_size();
    validate_labels(labels, alphabet, blank)?;
    let frames = posteriors.mask.valid_indices();
    let required = min_alignment_frames(labels);
    if frames.is_empty() || frames.len() < required {
        return Err(LossError::InfeasibleAlignment {
            frames: frames.len(),
            required,
        });
    }
    let mut interleaved = Vec::with_capacity(2 * labels.len() + 1);
    interleaved.push(blank);
    for &l in labels {
        interleaved.push(l);
        interleaved.push(blank);
    }
    let (_, total) = ctc_alphas(
        posteriors.log_probs.data(),
        alphabet,
        &frames,
        &interleaved,
        blank,
    );
    let op = CtcOp {
        interleaved,
        frames,
        alphabet,
        blank,
    };
    Ok(apply_custom_op(
        vec![posteriors.log_probs.clone()],
        vec![1],
        vec![-total],
        Box::new(op),
    ))
}

/// Exact CTC loss by literal enumeration of every length-K path that
/// collapses (merge repeats, then drop blanks) to the labels. Test oracle;
/// refuses instances with more than `MAX_ENUM_PATHS` paths.
pub const MAX_ENUM_PATHS: usize = 65536;

pub fn ctc_loss_bruteforce(
    posteriors: &Posteriors,
    labels: &[usize],
    blank: usize,
) -> Result<f64, LossError> {
    let alphabet = posteriors.alphabet_size();
    validate_labels(labels, alphabet, blank)?;
    let frames = posteriors.mask.valid_indices();
    let k = frames.len();
    let paths = alphabet.checked_pow(k as u32).filter(|&p| p <= MAX_ENUM_PATHS);
    let Some(_) = paths else {
        return Err(LossError::TooLargeToEnumerate {
            m: alphabet,
            k,
            bound: MAX_ENUM_PATHS,
        });
    };
    let required = min_alignment_frames(labels);
    if k == 0 || k < required {
        return Err(LossError::InfeasibleAlignment {
            frames: k,
            required,
        });
    }
    let rows = posteriors.prob_rows();
    let mut total = 0.0;
    let mut path = vec![0usize; k];
    loop {
        // collapse: merge adjacent repeats, then remove blanks
        let mut collapsed = Vec::with_capacity(k);
        let mut prev = usize::MAX;
        for &c in &path {
            if c != prev {
                if c != blank {
                    collapsed.push(c);
                }
                prev = c;
            }
        }
        if collapsed == labels {
            let mut p = 1.0;
            for (t, &c) in path.iter().enumerate() {
                p *= rows[frames[t]][c];
            }
            total += p;
        }
        // next path in lexicographic order
        let mut pos = k;
        loop {
            if pos == 0 {
                return Ok(-libm::log(total));
            }
            pos -= 1;
            path[pos] += 1;
            if path[pos] < alphabet {
                break;
            }
            path[pos] = 0;
        }
    }
}

// ---------------------------------------------------------------------------
// Softening and RBKD
// ---------------------------------------------------------------------------

/// Temperature softening: p = pi^(1/T) / sum pi^(1/T), computed in log
/// space as log-softmax of `log pi / T`. T = 1 is the identity.
pub fn soften(posteriors: &Posteriors, temperature: f64) -> Result<Posteriors, LossError> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(LossError::BadTemperature(temperature));
    }
    let log_probs = posteriors
        .log_probs
        .scale(1.0 / temperature)
        .row_log_softmax()?;
    Ok(Posteriors {
        log_probs,
        mask: posteriors.mask.clone(),
    })
}

/// Softened teacher probabilities as plain rows (no graph).
fn softened_rows(posteriors: &Posteriors, temperature: f64) -> Vec<Vec<f64>> {
    let m = posteriors.alphabet_size();
    let mut rows = Vec::with_capacity(posteriors.num_frames());
    for k in 0..posteriors.num_frames() {
        let row = &posteriors.log_probs.data()[k * m..(k + 1) * m];
        let scaled: Vec<f64> = row.iter().map(|&v| v / temperature).collect();
        let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut exps: Vec<f64> = scaled.iter().map(|&v| libm::exp(v - max)).collect();
        let sum: f64 = exps.iter().sum();
        for e in exps.iter_mut() {
            *e /= sum;
        }
        rows.push(exps);
    }
    rows
}

/// Shannon entropy of the unmasked posterior rows (sum over frames).
pub fn entropy(posteriors: &Posteriors) -> f64 {
    let rows = posteriors.prob_rows();
    let mut h = 0.0;
    for (k, row) in rows.iter().enumerate() {
        if !posteriors.mask.0[k] {
            continue;
        }
        for &p in row {
            if p > 0.0 {
                h -= p * libm::log(p);
            }
        }
    }
    h
}

/// Response-based distillation: cross-entropy from the softened teacher
/// to the softened student, summed over unmasked frames. The teacher
/// side carries no gradient.
pub fn rbkd_loss(
    teacher: &Posteriors,
    student: &Posteriors,
    temperature: f64,
) -> Result<Tensor, LossError> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(LossError::BadTemperature(temperature));
    }
    if teacher.log_probs.shape() != student.log_probs.shape() {
        return Err(LossError::ShapeMismatch {
            op: "rbkd_loss",
            lhs: teacher.log_probs.shape().to_vec(),
            rhs: student.log_probs.shape().to_vec(),
        });
    }
    if teacher.mask != student.mask {
        return Err(LossError::MaskMismatch { op: "rbkd_loss" });
    }
    let k = student.num_frames();
    let m = student.alphabet_size();
    let teacher_soft = softened_rows(teacher, temperature);
    // teacher probabilities, zeroed on masked frames, as constants
    let mut weights = vec![0.0; k * m];
    for (i, row) in teacher_soft.iter().enumerate() {
        if student.mask.0[i] {
            weights[i * m..(i + 1) * m].copy_from_slice(row);
        }
    }
    let weights = Tensor::constant(&[k, m], weights);
    let student_soft = student
        .log_probs
        .scale(1.0 / temperature)
        .row_log_softmax()?
        .clamp_min(LOG_FLOOR);
    Ok(student_soft.mul(&weights)?.sum().scale(-1.0))
}

// ---------------------------------------------------------------------------
// Greedy prediction probability and importance maps
// ---------------------------------------------------------------------------

/// Log of the greedy prediction probability: the sum over unmasked frames
/// of the per-frame maximum log-probability. The max is realized by an
/// argmax gather, so gradients flow only to the selected entries.
pub fn greedy_log_prob(posteriors: &Posteriors) -> Result<Tensor, LossError> {
    let maxima = posteriors.log_probs.row_max()?;
    Ok(maxima.mul(&posteriors.mask.weights())?.sum())
}

/// Importance and attention maps for one encoder output.
#[derive(Debug, Clone)]
pub struct ImportanceArtifacts {
    /// Gradient of the greedy log-probability with respect to the feature
    /// map, detached. `d_h x K`.
    pub alpha: Tensor,
    /// ReLU(alpha . feature_map). Live on the student graph when
    /// `detach_attention` was false, detached otherwise.
    pub attention: Tensor,
    pub log_p_greedy: f64,
}

/// Computes the importance map (the gradient of the greedy prediction
/// log-probability with respect to the feature map) and the gated
/// attention map.
///
/// `detach_attention = true` severs the attention map from the graph
/// (teacher side); with `false` the attention map stays differentiable
/// through the live feature map (student side) while the importance map
/// is detached either way.
///
/// Call once per forward pass, before the main loss backward: this runs a
/// backward pass of its own, so leaf gradients it touches are stale until
/// the harness zeroes them.
pub fn importance_map(
    output: &EncoderOutput,
    detach_attention: bool,
) -> Result<ImportanceArtifacts, LossError> {
    let log_p = greedy_log_prob(&output.posteriors)?;
    if !log_p.requires_grad() || !output.feature_map.requires_grad() {
        return Err(LossError::GraphConsumed);
    }
    output.feature_map.zero_grad();
    backward(&log_p).map_err(|_| LossError::GraphConsumed)?;
    let alpha_data = output.feature_map.grad().ok_or(LossError::GraphConsumed)?;
    let alpha = Tensor::constant(output.feature_map.shape(), alpha_data);
    let map_input = if detach_attention {
        output.feature_map.detach()
    } else {
        output.feature_map.clone()
    };
    let attention = alpha.mul(&map_input)?.relu();
    Ok(ImportanceArtifacts {
        alpha,
        attention,
        log_p_greedy: log_p.item(),
    })
}

// ---------------------------------------------------------------------------
// EBKD
// ---------------------------------------------------------------------------

struct EbkdOp {
    teacher_units: Vec<f64>,
    mask: Vec<bool>,
    d_h: usize,
    k: usize,
}

impl EbkdOp {
    /// Frame-normalized columns; vectors under the norm guard become zero.
    fn unit_columns(data: &[f64], d_h: usize, k: usize) -> (Vec<f64>, Vec<f64>) {
        let mut units = vec![0.0; d_h * k];
        let mut norms = vec![0.0; k];
        for col in 0..k {
            let mut sq = 0.0;
            for i in 0..d_h {
                let v = data[i * k + col];
                sq += v * v;
            }
            let norm = libm::sqrt(sq);
            norms[col] = norm;
            if norm >= NORM_EPS {
                for i in 0..d_h {
                    units[i * k + col] = data[i * k + col] / norm;
                }
            }
        }
        (units, norms)
    }

    fn frame_distances(&self, student: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>, f64) {
        let (units, norms) = Self::unit_columns(student, self.d_h, self.k);
        let mut distances = vec![0.0; self.k];
        let mut total = 0.0;
        let mut valid = 0usize;
        for col in 0..self.k {
            if !self.mask[col] {
                continue;
            }
            valid += 1;
            let mut sq = 0.0;
            for i in 0..self.d_h {
                let d = units[i * self.k + col] - self.teacher_units[i * self.k + col];
                sq += d * d;
            }
            distances[col] = libm::sqrt(sq);
            total += distances[col];
        }
        (units, norms, distances, total / valid as f64)
    }
}

impl CustomOp for EbkdOp {
    fn name(&self) -> &'static str {
        "ebkd_distance"
    }

    fn backward(&self, out_grad: &[f64], inputs: &[Tensor]) -> Vec<Option<Vec<f64>>> {
        let student = inputs[0].data();
        let (units, norms, distances, _) = self.frame_distances(student);
        let valid = self.mask.iter().filter(|&&b| b).count() as f64;
        let mut grad = vec![0.0; student.len()];
        for col in 0..self.k {
            // zero-normalized frames are constants; zero distance has a
            // defined zero gradient
            if !self.mask[col] || norms[col] < NORM_EPS || distances[col] == 0.0 {
                continue;
            }
            // d ||u - v|| / dq = (u (u.v) - v) / (n * d)
            let mut u_dot_v = 0.0;
            for i in 0..self.d_h {
                u_dot_v += units[i * self.k + col] * self.teacher_units[i * self.k + col];
            }
            let scale = out_grad[0] / (valid * norms[col] * distances[col]);
            for i in 0..self.d_h {
                let u = units[i * self.k + col];
                let v = self.teacher_units[i * self.k + col];
                grad[i * self.k + col] = scale * (u * u_dot_v - v);
            }
        }
        vec![Some(grad)]
    }
}

/// Attention-map distillation distance: the mean over unmasked frames of
/// the L2 distance between frame-normalized attention columns. Value in
/// [0, 2]; differentiable with respect to the student map only.
pub fn ebkd_loss(
    teacher_attention: &Tensor,
    student_attention: &Tensor,
    mask: &crate::model::FrameMask,
) -> Result<Tensor, LossError> {
    if teacher_attention.shape() != student_attention.shape() {
        return Err(LossError::ShapeMismatch {
            op: "ebkd_loss",
            lhs: teacher_attention.shape().to_vec(),
            rhs: student_attention.shape().to_vec(),
        });
    }
    let [d_h, k] = *student_attention.shape() else {
        return Err(LossError::Tensor(TensorError::BadRank {
            op: "ebkd_loss",
            expected: 2,
            shape: student_attention.shape().to_vec(),
        }));
    };
    if mask.len() != k || mask.num_valid() == 0 {
        return Err(LossError::ShapeMismatch {
            op: "ebkd_loss",
            lhs: vec![d_h, k],
            rhs: vec![mask.num_valid(), mask.len()],
        });
    }
    let (teacher_units, _) = EbkdOp::unit_columns(teacher_attention.data(), d_h, k);
    let op = EbkdOp {
        teacher_units,
        mask: mask.0.clone(),
        d_h,
        k,
    };
    let (_, _, _, mean) = op.frame_distances(student_attention.data());
    Ok(apply_custom_op(
        vec![student_attention.clone()],
        vec![1],
        vec![mean],
        Box::new(op),
    ))
}

// ---------------------------------------------------------------------------
// EWC
// ---------------------------------------------------------------------------

/// Diagonal quadratic anchor: sum_j F_j (theta_j - theta*_j)^2 over all
/// parameters. Zero iff the student equals the reference wherever the
/// Fisher diagonal is positive.
pub fn ewc_penalty(
    student_params: &BTreeMap<String, Tensor>,
    reference: &ParamMap,
    fisher: &ParamMap,
) -> Result<Tensor, LossError> {
    if student_params.len() != reference.len() || student_params.len() != fisher.len() {
        return Err(LossError::EwcParamMismatch(alloc::format!(
            "{} student / {} reference / {} fisher entries",
            student_params.len(),
            reference.len(),
            fisher.len()
        )));
    }
    let mut total = Tensor::scalar(0.0);
    for (name, theta) in student_params {
        let (Some(anchor), Some(weight)) = (reference.get(name), fisher.get(name)) else {
            return Err(LossError::EwcParamMismatch(name.clone()));
        };
        if anchor.shape != theta.shape() || weight.shape != theta.shape() {
            return Err(LossError::EwcParamMismatch(name.clone()));
        }
        let anchor = Tensor::constant(&anchor.shape, anchor.data.clone());
        let weight = Tensor::constant(&weight.shape, weight.data.clone());
        let diff = theta.sub(&anchor)?;
        let term = diff.mul(&diff)?.mul(&weight)?.sum();
        total = total.add(&term.reshape(&[1])?)?;
    }
    Ok(total)
}

/// Empirical diagonal Fisher: the mean squared gradient of the CTC loss
/// over sampled utterances. Deterministic given the seed; uses the whole
/// dataset in order when `num_samples >= len`.
pub fn fisher_estimate(
    checkpoint: &Checkpoint,
    dataset: &Dataset,
    num_samples: usize,
    seed: u64,
) -> Result<ParamMap, LossError> {
    if dataset.is_empty() {
        return Err(LossError::EmptyDataset);
    }
    let indices: Vec<usize> = if num_samples >= dataset.len() {
        (0..dataset.len()).collect()
    } else {
        SeededRng::new(seed).sample_indices(dataset.len(), num_samples)
    };
    let model = BoundModel::bind(checkpoint, true)?;
    let mut acc: BTreeMap<String, Vec<f64>> = model
        .params
        .iter()
        .map(|(name, t)| (name.clone(), vec![0.0; t.numel()]))
        .collect();
    for &i in &indices {
        let sample = &dataset.samples[i];
        model.zero_grads();
        let out = model.forward(&sample.features, sample.frames, None)?;
        let loss = ctc_loss(&out.posteriors, &sample.labels, crate::model::BLANK_ID)?;
        backward(&loss)?;
        for (name, grads) in model.grads() {
            let slot = acc.get_mut(&name).expect("parameter set is fixed");
            for (a, g) in slot.iter_mut().zip(&grads) {
                *a += g * g;
            }
        }
    }
    let n = indices.len() as f64;
    Ok(acc
        .into_iter()
        .map(|(name, mut data)| {
            for v in data.iter_mut() {
                *v /= n;
            }
            let shape = checkpoint.params[&name].shape.clone();
            (name, ParamData { shape, data })
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Parameter-level gradient checking
// ---------------------------------------------------------------------------

/// Checks the analytic gradient of `loss` with respect to every model
/// parameter against central finite differences. Returns the max over all
/// parameter elements of `|analytic - numeric| / max(1, |analytic|)`.
///
/// `loss` must be deterministic; it is re-evaluated on perturbed copies of
/// the checkpoint.
pub fn param_gradient_max_rel_error<F>(
    checkpoint: &Checkpoint,
    loss: F,
    h: f64,
) -> Result<f64, LossError>
where
    F: Fn(&BoundModel) -> Result<Tensor, LossError>,
{
    let model = BoundModel::bind(checkpoint, true)?;
    let value = loss(&model)?;
    backward(&value)?;
    let analytic = model.grads();
    let mut working = checkpoint.clone();
    let mut worst: f64 = 0.0;
    let names: Vec<String> = checkpoint.params.keys().cloned().collect();
    for name in names {
        let n = checkpoint.params[&name].data.len();
        for i in 0..n {
            let original = checkpoint.params[&name].data[i];
            working.params.get_mut(&name).unwrap().data[i] = original + h;
            let plus = loss(&BoundModel::bind(&working, false)?)?.item();
            working.params.get_mut(&name).unwrap().data[i] = original - h;
            let minus = loss(&BoundModel::bind(&working, false)?)?.item();
            working.params.get_mut(&name).unwrap().data[i] = original;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[&name][i];
            let denom = if libm::fabs(a) > 1.0 { libm::fabs(a) } else { 1.0 };
            let err = libm::fabs(a - numeric) / denom;
            if err > worst {
                worst = err;
            }
        }
    }
    Ok(worst)
}

// ---------------------------------------------------------------------------
// Aggregation
// ---------------------------------------------------------------------------

/// L = L_CTC + beta L_RBKD + gamma L_EBKD (+ lambda L_EWC for the EWC
/// baseline). Zero-weighted terms are skipped entirely so degenerate
/// configurations reproduce the plain CTC path bit for bit.
pub fn aggregate_loss(
    ctc: &Tensor,
    rbkd: Option<&Tensor>,
    ebkd: Option<&Tensor>,
    ewc: Option<&Tensor>,
    weights: &LossWeights,
) -> Result<Tensor, LossError> {
    weights.validate()?;
    let mut total = ctc.clone();
    if weights.beta > 0.0 {
        let rbkd = rbkd.ok_or(LossError::MissingComponent { op: "rbkd" })?;
        total = total.add(&rbkd.scale(weights.beta))?;
    }
    if weights.gamma > 0.0 {
        let ebkd = ebkd.ok_or(LossError::MissingComponent { op: "ebkd" })?;
        total = total.add(&ebkd.scale(weights.gamma))?;
    }
    // the EWC anchor participates only when the method supplies one
    if weights.lambda_ewc > 0.0 {
        if let Some(ewc) = ewc {
            total = total.add(&ewc.scale(weights.lambda_ewc))?;
        }
    }
    Ok(total)
}
