//! Forward implementations of the recorded primitives.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::{Tensor, TensorError};

/// Backward rule supplied by ops defined outside this module (the CTC
/// dynamic program and the attention-map distance implement this).
pub trait CustomOp {
    fn name(&self) -> &'static str;
    /// Gradient of the root with respect to each input, given the gradient
    /// at this op's output. Return `None` for inputs that take no gradient.
    fn backward(&self, out_grad: &[f64], inputs: &[Tensor]) -> Vec<Option<Vec<f64>>>;
}

pub(crate) enum Op {
    Leaf,
    Retain(Tensor),
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Scale(Tensor, f64),
    AddBias(Tensor, Tensor),
    MatMul(Tensor, Tensor),
    Transpose(Tensor),
    Reshape(Tensor),
    Relu(Tensor),
    Exp(Tensor),
    Ln(Tensor),
    ClampMin(Tensor, f64),
    // The column mask is not stored: masked outputs are exactly zero, so
    // the softmax gradient formula already routes no gradient to them.
    RowSoftmax {
        input: Tensor,
    },
    RowLogSoftmax(Tensor),
    LayerNorm {
        input: Tensor,
        gain: Tensor,
        bias: Tensor,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Conv1d {
        input: Tensor,
        weight: Tensor,
        bias: Tensor,
        stride: usize,
    },
    RowMax {
        input: Tensor,
        argmax: Vec<usize>,
    },
    Sum(Tensor),
    SliceCols {
        input: Tensor,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<Tensor>),
    Custom {
        inputs: Vec<Tensor>,
        rule: Box<dyn CustomOp>,
    },
}

fn rank2(t: &Tensor, op: &'static str) -> Result<(usize, usize), TensorError> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(TensorError::BadRank {
            op,
            expected: 2,
            shape: s.to_vec(),
        }),
    }
}

fn same_shape(a: &Tensor, b: &Tensor, op: &'static str) -> Result<(), TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn any_grad(inputs: &[&Tensor]) -> bool {
    inputs.iter().any(|t| t.requires_grad())
}

/// Output length of a strided window scan: `ceil(len / stride)`.
/// The input is implicitly right-padded with zeros to `(out-1)*stride + kernel`.
pub fn strided_output_len(len: usize, stride: usize) -> usize {
    len.div_ceil(stride)
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        same_shape(self, other, "add")?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor::new_node(
            self.shape().to_vec(),
            data,
            any_grad(&[self, other]),
            Op::Add(self.clone(), other.clone()),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        same_shape(self, other, "sub")?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a - b)
            .collect();
        Ok(Tensor::new_node(
            self.shape().to_vec(),
            data,
            any_grad(&[self, other]),
            Op::Sub(self.clone(), other.clone()),
        ))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        same_shape(self, other, "mul")?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a * b)
            .collect();
        Ok(Tensor::new_node(
            self.shape().to_vec(),
            data,
            any_grad(&[self, other]),
            Op::Mul(self.clone(), other.clone()),
        ))
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        let data = self.data().iter().map(|a| a * factor).collect();
        Tensor::new_node(
            self.shape().to_vec(),
            data,
            self.requires_grad(),
            Op::Scale(self.clone(), factor),
        )
    }

    /// `[r, c] + [c]`, broadcasting the bias over rows.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor, TensorError> {
        let (r, c) = rank2(self, "add_bias")?;
        if bias.shape() != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: self.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                data.push(self.data()[i * c + j] + bias.data()[j]);
            }
        }
        Ok(Tensor::new_node(
            vec![r, c],
            data,
            any_grad(&[self, bias]),
            Op::AddBias(self.clone(), bias.clone()),
        ))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        let (m, k) = rank2(self, "matmul")?;
        let (k2, n) = rank2(other, "matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let a = self.data();
        let b = other.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = a[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
        Ok(Tensor::new_node(
            vec![m, n],
            out,
            any_grad(&[self, other]),
            Op::MatMul(self.clone(), other.clone()),
        ))
    }

    pub fn transpose(&self) -> Result<Tensor, TensorError> {
        let (r, c) = rank2(self, "transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data()[i * c + j];
            }
        }
        Ok(Tensor::new_node(
            vec![c, r],
            out,
            self.requires_grad(),
            Op::Transpose(self.clone()),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor, TensorError> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(TensorError::BadAttribute {
                op: "reshape",
                what: format!("cannot reshape {:?} into {:?}", self.shape(), shape),
            });
        }
        Ok(Tensor::new_node(
            shape.to_vec(),
            self.data().to_vec(),
            self.requires_grad(),
            Op::Reshape(self.clone()),
        ))
    }

    /// Elementwise max(x, 0). The subgradient at exactly 0 is 0.
    pub fn relu(&self) -> Tensor {
        let data = self.data().iter().map(|&a| if a > 0.0 { a } else { 0.0 }).collect();
        Tensor::new_node(
            self.shape().to_vec(),
            data,
            self.requires_grad(),
            Op::Relu(self.clone()),
        )
    }

    pub fn exp(&self) -> Tensor {
        let data = self.data().iter().map(|&a| libm::exp(a)).collect();
        Tensor::new_node(
            self.shape().to_vec(),
            data,
            self.requires_grad(),
            Op::Exp(self.clone()),
        )
    }

    /// Natural log. Errors on any non-positive element; probability-like
    /// quantities should come from [`Tensor::row_log_softmax`] instead.
    pub fn ln(&self) -> Result<Tensor, TensorError> {
        if let Some((index, &value)) = self.data().iter().enumerate().find(|(_, v)| **v <= 0.0) {
            return Err(TensorError::NonPositiveLog { value, index });
        }
        let data = self.data().iter().map(|&a| libm::log(a)).collect();
        Ok(Tensor::new_node(
            self.shape().to_vec(),
            data,
            self.requires_grad(),
            Op::Ln(self.clone()),
        ))
    }

    /// Elementwise max(x, floor). Gradient passes only where x > floor.
    pub fn clamp_min(&self, floor: f64) -> Tensor {
        let data = self.data().iter().map(|&a| if a > floor { a } else { floor }).collect();
        Tensor::new_node(
            self.shape().to_vec(),
            data,
            self.requires_grad(),
            Op::ClampMin(self.clone(), floor),
        )
    }

    /// Row-wise softmax of a `[r, c]` tensor with max-subtraction.
    /// When `col_mask` is given, masked columns get probability exactly 0
    /// and are excluded from the normalization.
    pub fn row_softmax(&self, col_mask: Option<&[bool]>) -> Result<Tensor, TensorError> {
        let (r, c) = rank2(self, "row_softmax")?;
        if let Some(mask) = col_mask {
            if mask.len() != c {
                return Err(TensorError::BadAttribute {
                    op: "row_softmax",
                    what: format!("column mask length {} does not match {} columns", mask.len(), c),
                });
            }
            if !mask.iter().any(|&m| m) {
                return Err(TensorError::BadAttribute {
                    op: "row_softmax",
                    what: "column mask excludes every column".into(),
                });
            }
        }
        let valid = |j: usize| col_mask.map_or(true, |m| m[j]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &self.data()[i * c..(i + 1) * c];
            let mut max = f64::NEG_INFINITY;
            for j in 0..c {
                if valid(j) && row[j] > max {
                    max = row[j];
                }
            }
            let mut sum = 0.0;
            for j in 0..c {
                if valid(j) {
                    let e = libm::exp(row[j] - max);
                    out[i * c + j] = e;
                    sum += e;
                }
            }
            for j in 0..c {
                out[i * c + j] /= sum;
            }
        }
        Ok(Tensor::new_node(
            vec![r, c],
            out,
            self.requires_grad(),
            Op::RowSoftmax {
                input: self.clone(),
            },
        ))
    }

    /// Row-wise log-softmax via the max-subtracted log-sum-exp form.
    /// Never produces NaN for finite inputs.
    pub fn row_log_softmax(&self) -> Result<Tensor, TensorError> {
        let (r, c) = rank2(self, "row_log_softmax")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &self.data()[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for &v in row {
                sum += libm::exp(v - max);
            }
            let lse = max + libm::log(sum);
            for j in 0..c {
                out[i * c + j] = row[j] - lse;
            }
        }
        Ok(Tensor::new_node(
            vec![r, c],
            out,
            self.requires_grad(),
            Op::RowLogSoftmax(self.clone()),
        ))
    }

    /// Row-wise layer normalization of `[r, c]` with per-column gain and
    /// bias vectors of length `c`.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor, TensorError> {
        let (r, c) = rank2(self, "layer_norm")?;
        if gain.shape() != [c] || bias.shape() != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape().to_vec(),
                rhs: if gain.shape() != [c] {
                    gain.shape().to_vec()
                } else {
                    bias.shape().to_vec()
                },
            });
        }
        let mut out = vec![0.0; r * c];
        let mut normalized = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        for i in 0..r {
            let row = &self.data()[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / libm::sqrt(var + eps);
            inv_std[i] = is;
            for j in 0..c {
                let xhat = (row[j] - mean) * is;
                normalized[i * c + j] = xhat;
                out[i * c + j] = xhat * gain.data()[j] + bias.data()[j];
            }
        }
        Ok(Tensor::new_node(
            vec![r, c],
            out,
            any_grad(&[self, gain, bias]),
            Op::LayerNorm {
                input: self.clone(),
                gain: gain.clone(),
                bias: bias.clone(),
                normalized,
                inv_std,
            },
        ))
    }

    /// Strided 1-D convolution over time.
    ///
    /// `self` is `[c_in, len]`, `weight` is `[c_out, c_in, kernel]`, `bias`
    /// is `[c_out]`. The input is right-padded with zeros so the output
    /// length is `ceil(len / stride)`.
    pub fn conv1d(&self, weight: &Tensor, bias: &Tensor, stride: usize) -> Result<Tensor, TensorError> {
        let (c_in, len) = rank2(self, "conv1d")?;
        let (c_out, w_cin, kernel) = match weight.shape() {
            [a, b, k] => (*a, *b, *k),
            s => {
                return Err(TensorError::BadRank {
                    op: "conv1d",
                    expected: 3,
                    shape: s.to_vec(),
                })
            }
        };
        if w_cin != c_in {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d",
                lhs: self.shape().to_vec(),
                rhs: weight.shape().to_vec(),
            });
        }
        if bias.shape() != [c_out] {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d",
                lhs: weight.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        if stride == 0 {
            return Err(TensorError::BadAttribute {
                op: "conv1d",
                what: "stride must be >= 1".into(),
            });
        }
        if len == 0 {
            return Err(TensorError::BadAttribute {
                op: "conv1d",
                what: "input length must be >= 1".into(),
            });
        }
        let out_len = strided_output_len(len, stride);
        let x = self.data();
        let w = weight.data();
        let mut out = vec![0.0; c_out * out_len];
        for o in 0..c_out {
            for t in 0..out_len {
                let mut acc = bias.data()[o];
                for ci in 0..c_in {
                    for j in 0..kernel {
                        let p = t * stride + j;
                        if p < len {
                            acc += w[(o * c_in + ci) * kernel + j] * x[ci * len + p];
                        }
                    }
                }
                out[o * out_len + t] = acc;
            }
        }
        Ok(Tensor::new_node(
            vec![c_out, out_len],
            out,
            any_grad(&[self, weight, bias]),
            Op::Conv1d {
                input: self.clone(),
                weight: weight.clone(),
                bias: bias.clone(),
                stride,
            },
        ))
    }

    /// Per-row maximum of a `[r, c]` tensor, output `[r]`. The gradient
    /// flows only to the selected entries; ties pick the lowest column.
    pub fn row_max(&self) -> Result<Tensor, TensorError> {
        let (r, c) = rank2(self, "row_max")?;
        if c == 0 {
            return Err(TensorError::BadAttribute {
                op: "row_max",
                what: "rows must be non-empty".into(),
            });
        }
        let mut out = Vec::with_capacity(r);
        let mut argmax = Vec::with_capacity(r);
        for i in 0..r {
            let row = &self.data()[i * c..(i + 1) * c];
            let mut best = 0;
            for j in 1..c {
                if row[j] > row[best] {
                    best = j;
                }
            }
            out.push(row[best]);
            argmax.push(best);
        }
        Ok(Tensor::new_node(
            vec![r],
            out,
            self.requires_grad(),
            Op::RowMax {
                input: self.clone(),
                argmax,
            },
        ))
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum(&self) -> Tensor {
        let total = self.data().iter().sum();
        Tensor::new_node(vec![1], vec![total], self.requires_grad(), Op::Sum(self.clone()))
    }

    /// Columns `[start, start+len)` of a `[r, c]` tensor.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor, TensorError> {
        let (r, c) = rank2(self, "slice_cols")?;
        if start + len > c || len == 0 {
            return Err(TensorError::BadAttribute {
                op: "slice_cols",
                what: format!("slice [{start}, {}) out of {c} columns", start + len),
            });
        }
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&self.data()[i * c + start..i * c + start + len]);
        }
        Ok(Tensor::new_node(
            vec![r, len],
            out,
            self.requires_grad(),
            Op::SliceCols {
                input: self.clone(),
                start,
                len,
            },
        ))
    }

    /// Concatenate matrices with equal row counts along columns.
    pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor, TensorError> {
        assert!(!parts.is_empty(), "concat_cols of zero tensors");
        let (r, _) = rank2(&parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (pr, pc) = rank2(p, "concat_cols")?;
            if pr != r {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: parts[0].shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&p.data()[i * w..(i + 1) * w]);
            }
        }
        let requires = parts.iter().any(|p| p.requires_grad());
        Ok(Tensor::new_node(
            vec![r, total],
            out,
            requires,
            Op::ConcatCols(parts.to_vec()),
        ))
    }
}

/// Record a custom operation. The caller supplies the forward output and a
/// [`CustomOp`] backward rule over the given inputs.
pub fn apply_custom_op(
    inputs: Vec<Tensor>,
    out_shape: Vec<usize>,
    out_data: Vec<f64>,
    rule: Box<dyn CustomOp>,
) -> Tensor {
    let requires = inputs.iter().any(|t| t.requires_grad());
    Tensor::new_node(out_shape, out_data, requires, Op::Custom { inputs, rule })
}
