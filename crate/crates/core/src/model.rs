//! A scaled-down end-to-end CTC encoder: strided 1-D convolutions over
//! time, a stack of pre-norm self-attention blocks, a fully connected
//! head and a frame-wise softmax.
//!
//! Conventions (the architecture shape is standard; these pin the points
//! it leaves open):
//! - Self-attention blocks are pre-norm (LayerNorm before attention and
//!   before the feed-forward), each sub-layer wrapped in a residual
//!   connection; a final LayerNorm follows the last block.
//! - The feature map handed to the distillation losses is the last
//!   block's output after that final residual-and-normalization step,
//!   exposed as a `d_h x K` tensor.
//! - Sinusoidal positional encoding is added right after the conv
//!   front-end.
//! - Convolution over the frequency axis is folded into channel mixing:
//!   the front-end is a 1-D conv over time on `F`-channel input, and the
//!   last conv layer's channel count must equal `d_h`.
//! - The blank symbol is index 0 everywhere.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::rng::SeededRng;
use crate::tensor::{strided_output_len, Tensor, TensorError};

pub const BLANK_ID: usize = 0;
const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("input has {got} rows, expected input_dim {expected}")]
    WrongInputDim { expected: usize, got: usize },
    #[error("input too short: {got} frames, need at least {min} for one output frame")]
    InputTooShort { min: usize, got: usize },
    #[error("feature data length {got} does not match input_dim x frames = {expected}")]
    WrongDataLen { expected: usize, got: usize },
    #[error("checkpoint is missing parameter {0}")]
    MissingParam(String),
    #[error("parameter {name} has shape {got:?}, expected {expected:?}")]
    WrongParamShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    /// F: rows of the input feature sequence.
    pub input_dim: usize,
    pub conv_layers: Vec<ConvSpec>,
    pub num_sabs: usize,
    /// Hidden width of the attention blocks.
    pub d_h: usize,
    pub num_heads: usize,
    /// Fully connected head sizes; the last entry is M (alphabet + blank).
    pub fc_dims: Vec<usize>,
}

impl ModelConfig {
    /// Desk-scale default sized for CPU minutes.
    pub fn desk_default(alphabet_size: usize) -> Self {
        ModelConfig {
            input_dim: 16,
            conv_layers: vec![
                ConvSpec { channels: 32, kernel: 3, stride: 2 },
                ConvSpec { channels: 32, kernel: 3, stride: 2 },
            ],
            num_sabs: 2,
            d_h: 32,
            num_heads: 4,
            fc_dims: vec![64, alphabet_size],
        }
    }

    /// Tiny configuration used by the gradient suites (d_h=8, 2 SABs, 2 heads).
    pub fn tiny(alphabet_size: usize) -> Self {
        ModelConfig {
            input_dim: 4,
            conv_layers: vec![ConvSpec { channels: 8, kernel: 3, stride: 2 }],
            num_sabs: 2,
            d_h: 8,
            num_heads: 2,
            fc_dims: vec![8, alphabet_size],
        }
    }

    /// M: alphabet size including the blank symbol.
    pub fn alphabet_size(&self) -> usize {
        *self.fc_dims.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |what: String| Err(ModelError::InvalidConfig(what));
        if self.input_dim == 0 {
            return fail("input_dim must be positive".into());
        }
        if self.conv_layers.is_empty() {
            return fail("at least one conv layer is required".into());
        }
        for (i, c) in self.conv_layers.iter().enumerate() {
            if c.channels == 0 || c.kernel == 0 || c.stride == 0 {
                return fail(format!("conv layer {i} has a zero channels/kernel/stride field"));
            }
        }
        if self.num_sabs == 0 {
            return fail("num_sabs must be positive".into());
        }
        if self.d_h == 0 || self.num_heads == 0 || self.d_h % self.num_heads != 0 {
            return fail(format!(
                "d_h ({}) must be a positive multiple of num_heads ({})",
                self.d_h, self.num_heads
            ));
        }
        let last_channels = self.conv_layers.last().unwrap().channels;
        if last_channels != self.d_h {
            return fail(format!(
                "last conv layer channels ({last_channels}) must equal d_h ({})",
                self.d_h
            ));
        }
        if self.fc_dims.is_empty() {
            return fail("fc_dims must end in the alphabet size M".into());
        }
        if self.alphabet_size() < 2 {
            return fail(format!(
                "alphabet size M = {} must be at least 2 (one symbol plus blank)",
                self.alphabet_size()
            ));
        }
        if self.fc_dims.iter().any(|&d| d == 0) {
            return fail("fc_dims entries must be positive".into());
        }
        Ok(())
    }

    /// Number of output frames after the strided conv front-end:
    /// the composition of per-layer `ceil(len / stride)` rules.
    pub fn downsampled_length(&self, frames: usize) -> usize {
        self.conv_layers
            .iter()
            .fold(frames, |len, c| strided_output_len(len, c.stride))
    }

    /// Canonical (name, shape) list of every parameter.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut c_in = self.input_dim;
        for (i, c) in self.conv_layers.iter().enumerate() {
            out.push((format!("conv{i}.weight"), vec![c.channels, c_in, c.kernel]));
            out.push((format!("conv{i}.bias"), vec![c.channels]));
            c_in = c.channels;
        }
        let d = self.d_h;
        let ff = 2 * d;
        for s in 0..self.num_sabs {
            out.push((format!("sab{s}.ln1.gain"), vec![d]));
            out.push((format!("sab{s}.ln1.bias"), vec![d]));
            for proj in ["wq", "wk", "wv", "wo"] {
                out.push((format!("sab{s}.attn.{proj}"), vec![d, d]));
                out.push((format!("sab{s}.attn.{proj}_bias"), vec![d]));
            }
            out.push((format!("sab{s}.ln2.gain"), vec![d]));
            out.push((format!("sab{s}.ln2.bias"), vec![d]));
            out.push((format!("sab{s}.ffn.w1"), vec![d, ff]));
            out.push((format!("sab{s}.ffn.b1"), vec![ff]));
            out.push((format!("sab{s}.ffn.w2"), vec![ff, d]));
            out.push((format!("sab{s}.ffn.b2"), vec![d]));
        }
        out.push(("enc_ln.gain".to_string(), vec![d]));
        out.push(("enc_ln.bias".to_string(), vec![d]));
        let mut prev = d;
        for (i, &dim) in self.fc_dims.iter().enumerate() {
            out.push((format!("fc{i}.weight"), vec![prev, dim]));
            out.push((format!("fc{i}.bias"), vec![dim]));
            prev = dim;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamData {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub type ParamMap = BTreeMap<String, ParamData>;

/// Reference parameters and diagonal Fisher information captured at the
/// end of a stage, for the EWC baseline of later stages.
#[derive(Debug, Clone, PartialEq)]
pub struct EwcState {
    pub reference: ParamMap,
    pub fisher: ParamMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageMeta {
    pub stage: u32,
    pub method: String,
}

/// Named parameter set with its config and provenance. Checkpoints are
/// plain immutable data; binding one produces graph leaves for a forward
/// pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamMap,
    pub meta: StageMeta,
    pub ewc: Option<EwcState>,
}

impl Checkpoint {
    pub fn params_equal(&self, other: &Checkpoint) -> bool {
        self.params == other.params
    }
}

/// Deterministic scaled-uniform initialization (Xavier limits, gain 1.0):
/// weights uniform in [-a, a] with a = sqrt(6 / (fan_in + fan_out)),
/// biases and LayerNorm offsets zero, LayerNorm gains one.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<Checkpoint, ModelError> {
    config.validate()?;
    let mut rng = SeededRng::new(seed);
    let mut params = ParamMap::new();
    for (name, shape) in config.param_layout() {
        let n: usize = shape.iter().product();
        let data = if name.ends_with(".gain") {
            vec![1.0; n]
        } else if name.ends_with("bias") || name.ends_with(".b1") || name.ends_with(".b2") {
            vec![0.0; n]
        } else {
            let (fan_in, fan_out) = match shape.as_slice() {
                [c_out, c_in, k] => (c_in * k, c_out * k),
                [rows, cols] => (*rows, *cols),
                other => (other.iter().product(), 1),
            };
            let limit = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
            (0..n).map(|_| rng.uniform_in(-limit, limit)).collect()
        };
        params.insert(name, ParamData { shape, data });
    }
    Ok(Checkpoint {
        config: config.clone(),
        params,
        meta: StageMeta { stage: 0, method: "init".to_string() },
        ewc: None,
    })
}

/// Frame validity for padded inputs: `true` entries carry probability
/// mass, `false` entries are padding and are excluded from every loss.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameMask(pub Vec<bool>);

impl FrameMask {
    pub fn all_valid(len: usize) -> Self {
        FrameMask(vec![true; len])
    }

    pub fn prefix(len: usize, valid: usize) -> Self {
        FrameMask((0..len).map(|i| i < valid).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn num_valid(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn valid_indices(&self) -> Vec<usize> {
        (0..self.0.len()).filter(|&i| self.0[i]).collect()
    }

    /// 0/1 weights as an `[len]` constant tensor.
    pub fn weights(&self) -> Tensor {
        Tensor::constant(
            &[self.0.len()],
            self.0.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
    }
}

/// Per-frame probability mass over the alphabet-plus-blank.
///
/// `log_probs` (`[K, M]`) is the canonical, graph-connected value; the
/// probabilities themselves are `exp` of it.
#[derive(Debug, Clone)]
pub struct Posteriors {
    pub log_probs: Tensor,
    pub mask: FrameMask,
}

impl Posteriors {
    pub fn num_frames(&self) -> usize {
        self.log_probs.shape()[0]
    }

    pub fn alphabet_size(&self) -> usize {
        self.log_probs.shape()[1]
    }

    /// Probabilities as a graph-connected tensor.
    pub fn probs(&self) -> Tensor {
        self.log_probs.exp()
    }

    /// Probability rows as plain data.
    pub fn prob_rows(&self) -> Vec<Vec<f64>> {
        let m = self.alphabet_size();
        (0..self.num_frames())
            .map(|k| {
                self.log_probs.data()[k * m..(k + 1) * m]
                    .iter()
                    .map(|&v| libm::exp(v))
                    .collect()
            })
            .collect()
    }

    /// Build from probability rows (validates each row sums to 1).
    pub fn from_prob_rows(rows: &[Vec<f64>], mask: FrameMask) -> Result<Self, ModelError> {
        let k = rows.len();
        assert!(k > 0, "posteriors need at least one frame");
        let m = rows[0].len();
        let mut log_data = Vec::with_capacity(k * m);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != m {
                return Err(ModelError::InvalidConfig(format!(
                    "posterior row {i} has {} entries, expected {m}",
                    row.len()
                )));
            }
            let sum: f64 = row.iter().sum();
            if libm::fabs(sum - 1.0) > 1e-9 || row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(ModelError::InvalidConfig(format!(
                    "posterior row {i} is not a probability mass (sum {sum})"
                )));
            }
            for &p in row {
                log_data.push(if p > 0.0 { libm::log(p) } else { f64::NEG_INFINITY });
            }
        }
        if mask.len() != k {
            return Err(ModelError::InvalidConfig(format!(
                "mask length {} does not match {k} frames",
                mask.len()
            )));
        }
        Ok(Posteriors {
            log_probs: Tensor::constant(&[k, m], log_data),
            mask,
        })
    }
}

/// Output of one encoder forward pass.
///
/// `feature_map` is the `d_h x K` tap used by the attention-map losses;
/// it participates in the recorded graph, so its grad after a backward
/// pass is the importance map.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub posteriors: Posteriors,
    pub feature_map: Tensor,
    pub mask: FrameMask,
}

/// A checkpoint bound to graph leaves for forward passes. Bind once per
/// optimization step for a trainable model (gradients accumulate on the
/// leaves), or once per stage for a frozen one.
pub struct BoundModel {
    pub config: ModelConfig,
    pub params: BTreeMap<String, Tensor>,
}

impl BoundModel {
    pub fn bind(ckpt: &Checkpoint, trainable: bool) -> Result<Self, ModelError> {
        ckpt.config.validate()?;
        let mut params = BTreeMap::new();
        for (name, expected_shape) in ckpt.config.param_layout() {
            let p = ckpt
                .params
                .get(&name)
                .ok_or_else(|| ModelError::MissingParam(name.clone()))?;
            if p.shape != expected_shape {
                return Err(ModelError::WrongParamShape {
                    name,
                    expected: expected_shape,
                    got: p.shape.clone(),
                });
            }
            let t = if trainable {
                Tensor::parameter(&p.shape, p.data.clone())
            } else {
                Tensor::constant(&p.shape, p.data.clone())
            };
            params.insert(name, t);
        }
        Ok(BoundModel { config: ckpt.config.clone(), params })
    }

    fn param(&self, name: &str) -> &Tensor {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("bound model has no parameter {name}"))
    }

    /// Gradients accumulated on the bound leaves, zeros where untouched.
    pub fn grads(&self) -> BTreeMap<String, Vec<f64>> {
        self.params
            .iter()
            .map(|(name, t)| (name.clone(), t.grad().unwrap_or_else(|| vec![0.0; t.numel()])))
            .collect()
    }

    pub fn zero_grads(&self) {
        for t in self.params.values() {
            t.zero_grad();
        }
    }

    /// Full encoder pass over an `input_dim x frames` feature sequence
    /// (row-major). `valid_frames` marks the unpadded prefix length; pass
    /// `None` when nothing is padded.
    pub fn forward(
        &self,
        features: &[f64],
        frames: usize,
        valid_frames: Option<usize>,
    ) -> Result<EncoderOutput, ModelError> {
        let f = self.config.input_dim;
        if frames == 0 {
            return Err(ModelError::InputTooShort { min: 1, got: 0 });
        }
        if features.len() != f * frames {
            return Err(ModelError::WrongDataLen { expected: f * frames, got: features.len() });
        }
        let valid = valid_frames.unwrap_or(frames);
        if valid == 0 || valid > frames {
            return Err(ModelError::InputTooShort { min: 1, got: valid });
        }

        // conv front-end over time, channels-first
        let mut cur = Tensor::constant(&[f, frames], features.to_vec());
        for i in 0..self.config.conv_layers.len() {
            let spec = &self.config.conv_layers[i];
            cur = cur
                .conv1d(
                    self.param(&format!("conv{i}.weight")),
                    self.param(&format!("conv{i}.bias")),
                    spec.stride,
                )?
                .relu();
        }
        let k = cur.shape()[1];
        let k_valid = self.config.downsampled_length(valid);
        let mask = FrameMask::prefix(k, k_valid);

        // time-major with sinusoidal positions
        let mut x = cur.transpose()?; // [K, d_h]
        x = x.add(&positional_encoding(k, self.config.d_h))?;

        for s in 0..self.config.num_sabs {
            x = self.sab(&x, s, &mask)?;
        }
        let encoded =
            x.layer_norm(self.param("enc_ln.gain"), self.param("enc_ln.bias"), LAYER_NORM_EPS)?;

        // expose the feature map in d_h x K orientation and run the head
        // through it so its gradient is exactly the importance map
        let feature_map = encoded.transpose()?.retain();
        let posteriors = self.head(&feature_map, &mask)?;
        Ok(EncoderOutput { posteriors, feature_map, mask })
    }

    /// The fully connected head from a `d_h x K` feature map to frame
    /// posteriors. Exposed so importance maps can be checked by
    /// perturbing the feature map directly.
    pub fn forward_from_feature_map(
        &self,
        feature_map: &Tensor,
        mask: &FrameMask,
    ) -> Result<Posteriors, ModelError> {
        self.head(feature_map, mask)
    }

    fn head(&self, feature_map: &Tensor, mask: &FrameMask) -> Result<Posteriors, ModelError> {
        let mut h = feature_map.transpose()?; // [K, d_h]
        let n_fc = self.config.fc_dims.len();
        for i in 0..n_fc {
            h = h
                .matmul(self.param(&format!("fc{i}.weight")))?
                .add_bias(self.param(&format!("fc{i}.bias")))?;
            if i + 1 < n_fc {
                h = h.relu();
            }
        }
        let log_probs = h.row_log_softmax()?;
        Ok(Posteriors { log_probs, mask: mask.clone() })
    }

    fn sab(&self, x: &Tensor, index: usize, mask: &FrameMask) -> Result<Tensor, ModelError> {
        let p = |suffix: &str| self.param(&format!("sab{index}.{suffix}"));
        let normed = x.layer_norm(p("ln1.gain"), p("ln1.bias"), LAYER_NORM_EPS)?;
        let attn = self.attention(&normed, index, mask)?;
        let x = x.add(&attn)?;
        let normed = x.layer_norm(p("ln2.gain"), p("ln2.bias"), LAYER_NORM_EPS)?;
        let ff = normed
            .matmul(p("ffn.w1"))?
            .add_bias(p("ffn.b1"))?
            .relu()
            .matmul(p("ffn.w2"))?
            .add_bias(p("ffn.b2"))?;
        Ok(x.add(&ff)?)
    }

    fn attention(&self, x: &Tensor, index: usize, mask: &FrameMask) -> Result<Tensor, ModelError> {
        let p = |suffix: &str| self.param(&format!("sab{index}.attn.{suffix}"));
        let q = x.matmul(p("wq"))?.add_bias(p("wq_bias"))?;
        let k = x.matmul(p("wk"))?.add_bias(p("wk_bias"))?;
        let v = x.matmul(p("wv"))?.add_bias(p("wv_bias"))?;
        let heads = self.config.num_heads;
        let head_dim = self.config.d_h / heads;
        let scale = 1.0 / libm::sqrt(head_dim as f64);
        let mut contexts = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = q.slice_cols(h * head_dim, head_dim)?;
            let kh = k.slice_cols(h * head_dim, head_dim)?;
            let vh = v.slice_cols(h * head_dim, head_dim)?;
            let scores = qh.matmul(&kh.transpose()?)?.scale(scale);
            // padded frames never act as keys
            let weights = scores.row_softmax(Some(&mask.0))?;
            contexts.push(weights.matmul(&vh)?);
        }
        let merged = Tensor::concat_cols(&contexts)?;
        Ok(merged.matmul(p("wo"))?.add_bias(p("wo_bias"))?)
    }
}

/// Standard sinusoidal positional encoding, `[frames, dim]`.
fn positional_encoding(frames: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; frames * dim];
    for k in 0..frames {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let rate = libm::exp(-libm::log(10000.0) * 2.0 * pair / dim as f64);
            let angle = k as f64 * rate;
            data[k * dim + i] = if i % 2 == 0 { libm::sin(angle) } else { libm::cos(angle) };
        }
    }
    Tensor::constant(&[frames, dim], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn downsampled_length_rules() {
        let mut cfg = ModelConfig::desk_default(13);
        assert_eq!(cfg.downsampled_length(16), 4); // strides [2, 2]
        cfg.conv_layers = vec![ConvSpec { channels: 32, kernel: 3, stride: 1 }];
        assert_eq!(cfg.downsampled_length(7), 7);
        cfg.conv_layers = vec![ConvSpec { channels: 32, kernel: 3, stride: 2 }];
        assert_eq!(cfg.downsampled_length(7), 4); // ceil(7 / 2)
    }

    #[test]
    fn downsampled_length_monotone() {
        let cfg = ModelConfig::desk_default(13);
        let mut prev = 0;
        for s in 1..200 {
            let k = cfg.downsampled_length(s);
            assert!(k >= prev, "not monotone at {s}");
            prev = k;
        }
    }

    #[test]
    fn config_validation_errors() {
        let mut cfg = ModelConfig::desk_default(13);
        cfg.fc_dims = vec![64, 1];
        assert!(matches!(cfg.validate(), Err(ModelError::InvalidConfig(_))));
        let mut cfg = ModelConfig::desk_default(13);
        cfg.num_heads = 5;
        let msg = format!("{}", cfg.validate().unwrap_err());
        assert!(msg.contains("num_heads"), "{msg}");
        let mut cfg = ModelConfig::desk_default(13);
        cfg.conv_layers[1].stride = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::desk_default(13);
        cfg.conv_layers[1].channels = 16;
        let msg = format!("{}", cfg.validate().unwrap_err());
        assert!(msg.contains("d_h"), "{msg}");
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let cfg = ModelConfig::tiny(4);
        let a = init_model(&cfg, 3).unwrap();
        let b = init_model(&cfg, 3).unwrap();
        assert!(a.params_equal(&b));
        let c = init_model(&cfg, 4).unwrap();
        assert!(!a.params_equal(&c));
    }
}
