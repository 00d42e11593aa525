//! Reverse-mode gradient propagation.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec;
use alloc::vec::Vec;

use super::op::Op;
use super::{Tensor, TensorError};

/// Per-call gradient scratch keyed by node address. Gradients are staged
/// here during traversal and only merged into each tensor's persistent
/// grad buffer at the end, so stale buffers from earlier backward calls
/// can never contaminate a later propagation.
struct Scratch {
    grads: BTreeMap<usize, Vec<f64>>,
}

impl Scratch {
    fn add(&mut self, t: &Tensor, delta: Vec<f64>) {
        match self.grads.get_mut(&t.ptr_id()) {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(&delta) {
                    *gi += di;
                }
            }
            None => {
                self.grads.insert(t.ptr_id(), delta);
            }
        }
    }
}

/// Inputs of a node that participate in differentiation.
fn grad_inputs(op: &Op) -> Vec<Tensor> {
    let mut out = Vec::new();
    let mut push = |t: &Tensor| {
        if t.requires_grad() {
            out.push(t.clone());
        }
    };
    match op {
        Op::Leaf => {}
        Op::Retain(a)
        | Op::Scale(a, _)
        | Op::Transpose(a)
        | Op::Reshape(a)
        | Op::Relu(a)
        | Op::Exp(a)
        | Op::Ln(a)
        | Op::ClampMin(a, _)
        | Op::RowLogSoftmax(a)
        | Op::Sum(a) => push(a),
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddBias(a, b) | Op::MatMul(a, b) => {
            push(a);
            push(b);
        }
        Op::RowSoftmax { input, .. } => push(input),
        Op::LayerNorm {
            input, gain, bias, ..
        } => {
            push(input);
            push(gain);
            push(bias);
        }
        Op::Conv1d {
            input, weight, bias, ..
        } => {
            push(input);
            push(weight);
            push(bias);
        }
        Op::RowMax { input, .. } => push(input),
        Op::SliceCols { input, .. } => push(input),
        Op::ConcatCols(parts) => parts.iter().for_each(|p| push(p)),
        Op::Custom { inputs, .. } => inputs.iter().for_each(|p| push(p)),
    }
    out
}

/// Post-order over the recorded graph from `root`, following only edges
/// into tensors that require gradients. Reversing the result yields a
/// topological order with every consumer before its inputs.
fn post_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited = BTreeSet::new();
    // (node, expanded) iterative DFS
    let mut stack = vec![(root.clone(), false)];
    while let Some((node, expanded)) = stack.pop() {
        if expanded {
            order.push(node);
            continue;
        }
        if !visited.insert(node.ptr_id()) {
            continue;
        }
        let children = grad_inputs(&node.node.op);
        stack.push((node, true));
        for c in children {
            if !visited.contains(&c.ptr_id()) {
                stack.push((c, false));
            }
        }
    }
    order
}

/// Populates `grad` on every tensor with `requires_grad` reachable from
/// `root` with the derivative of `root` with respect to that tensor.
/// Repeated calls accumulate until grads are zeroed.
pub fn backward(root: &Tensor) -> Result<(), TensorError> {
    if root.numel() != 1 {
        return Err(TensorError::NonScalarRoot {
            shape: root.shape().to_vec(),
        });
    }
    if !root.requires_grad() {
        return Err(TensorError::DetachedGraph);
    }
    let order = post_order(root);
    let mut scratch = Scratch {
        grads: BTreeMap::new(),
    };
    scratch.grads.insert(root.ptr_id(), vec![1.0]);
    for node in order.iter().rev() {
        let Some(out_grad) = scratch.grads.remove(&node.ptr_id()) else {
            continue;
        };
        propagate(node, &out_grad, &mut scratch);
        node.accumulate_grad(&out_grad);
    }
    Ok(())
}

fn propagate(node: &Tensor, g: &[f64], scratch: &mut Scratch) {
    match &node.node.op {
        Op::Leaf => {}
        Op::Retain(a) => {
            if a.requires_grad() {
                scratch.add(a, g.to_vec());
            }
        }
        Op::Add(a, b) => {
            if a.requires_grad() {
                scratch.add(a, g.to_vec());
            }
            if b.requires_grad() {
                scratch.add(b, g.to_vec());
            }
        }
        Op::Sub(a, b) => {
            if a.requires_grad() {
                scratch.add(a, g.to_vec());
            }
            if b.requires_grad() {
                scratch.add(b, g.iter().map(|v| -v).collect());
            }
        }
        Op::Mul(a, b) => {
            if a.requires_grad() {
                scratch.add(a, g.iter().zip(b.data()).map(|(gv, bv)| gv * bv).collect());
            }
            if b.requires_grad() {
                scratch.add(b, g.iter().zip(a.data()).map(|(gv, av)| gv * av).collect());
            }
        }
        Op::Scale(a, factor) => {
            if a.requires_grad() {
                scratch.add(a, g.iter().map(|v| v * factor).collect());
            }
        }
        Op::AddBias(a, b) => {
            let [r, c] = *a.shape() else { unreachable!() };
            if a.requires_grad() {
                scratch.add(a, g.to_vec());
            }
            if b.requires_grad() {
                let mut db = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        db[j] += g[i * c + j];
                    }
                }
                scratch.add(b, db);
            }
        }
        Op::MatMul(a, b) => {
            let [m, k] = *a.shape() else { unreachable!() };
            let [_, n] = *b.shape() else { unreachable!() };
            if a.requires_grad() {
                // dA = G . B^T
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for p in 0..k {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += g[i * n + j] * b.data()[p * n + j];
                        }
                        da[i * k + p] = acc;
                    }
                }
                scratch.add(a, da);
            }
            if b.requires_grad() {
                // dB = A^T . G
                let mut db = vec![0.0; k * n];
                for p in 0..k {
                    for i in 0..m {
                        let av = a.data()[i * k + p];
                        if av == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            db[p * n + j] += av * g[i * n + j];
                        }
                    }
                }
                scratch.add(b, db);
            }
        }
        Op::Transpose(a) => {
            if a.requires_grad() {
                let [r, c] = *a.shape() else { unreachable!() };
                // node is [c, r]; transpose g back to [r, c]
                let mut da = vec![0.0; r * c];
                for i in 0..c {
                    for j in 0..r {
                        da[j * c + i] = g[i * r + j];
                    }
                }
                scratch.add(a, da);
            }
        }
        Op::Reshape(a) => {
            if a.requires_grad() {
                scratch.add(a, g.to_vec());
            }
        }
        Op::Relu(a) => {
            if a.requires_grad() {
                scratch.add(
                    a,
                    g.iter()
                        .zip(a.data())
                        .map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 })
                        .collect(),
                );
            }
        }
        Op::Exp(a) => {
            if a.requires_grad() {
                scratch.add(a, g.iter().zip(node.data()).map(|(gv, y)| gv * y).collect());
            }
        }
        Op::Ln(a) => {
            if a.requires_grad() {
                scratch.add(a, g.iter().zip(a.data()).map(|(gv, x)| gv / x).collect());
            }
        }
        Op::ClampMin(a, floor) => {
            if a.requires_grad() {
                scratch.add(
                    a,
                    g.iter()
                        .zip(a.data())
                        .map(|(gv, &x)| if x > *floor { *gv } else { 0.0 })
                        .collect(),
                );
            }
        }
        Op::RowSoftmax { input, .. } => {
            if input.requires_grad() {
                let [r, c] = *input.shape() else { unreachable!() };
                let y = node.data();
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let mut dot = 0.0;
                    for j in 0..c {
                        dot += g[i * c + j] * y[i * c + j];
                    }
                    for j in 0..c {
                        dx[i * c + j] = y[i * c + j] * (g[i * c + j] - dot);
                    }
                }
                scratch.add(input, dx);
            }
        }
        Op::RowLogSoftmax(a) => {
            if a.requires_grad() {
                let [r, c] = *a.shape() else { unreachable!() };
                let y = node.data();
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let gsum: f64 = g[i * c..(i + 1) * c].iter().sum();
                    for j in 0..c {
                        dx[i * c + j] = g[i * c + j] - libm::exp(y[i * c + j]) * gsum;
                    }
                }
                scratch.add(a, dx);
            }
        }
        Op::LayerNorm {
            input,
            gain,
            bias,
            normalized,
            inv_std,
        } => {
            let [r, c] = *input.shape() else { unreachable!() };
            if gain.requires_grad() {
                let mut dg = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        dg[j] += g[i * c + j] * normalized[i * c + j];
                    }
                }
                scratch.add(gain, dg);
            }
            if bias.requires_grad() {
                let mut db = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        db[j] += g[i * c + j];
                    }
                }
                scratch.add(bias, db);
            }
            if input.requires_grad() {
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let mut mean_gh = 0.0;
                    let mut mean_gh_xhat = 0.0;
                    for j in 0..c {
                        let gh = g[i * c + j] * gain.data()[j];
                        mean_gh += gh;
                        mean_gh_xhat += gh * normalized[i * c + j];
                    }
                    mean_gh /= c as f64;
                    mean_gh_xhat /= c as f64;
                    for j in 0..c {
                        let gh = g[i * c + j] * gain.data()[j];
                        dx[i * c + j] =
                            inv_std[i] * (gh - mean_gh - normalized[i * c + j] * mean_gh_xhat);
                    }
                }
                scratch.add(input, dx);
            }
        }
        Op::Conv1d {
            input,
            weight,
            bias,
            stride,
        } => {
            let [c_in, len] = *input.shape() else { unreachable!() };
            let [c_out, _, kernel] = *weight.shape() else { unreachable!() };
            let out_len = node.shape()[1];
            if bias.requires_grad() {
                let mut db = vec![0.0; c_out];
                for o in 0..c_out {
                    for t in 0..out_len {
                        db[o] += g[o * out_len + t];
                    }
                }
                scratch.add(bias, db);
            }
            if weight.requires_grad() {
                let mut dw = vec![0.0; c_out * c_in * kernel];
                for o in 0..c_out {
                    for t in 0..out_len {
                        let gv = g[o * out_len + t];
                        if gv == 0.0 {
                            continue;
                        }
                        for ci in 0..c_in {
                            for j in 0..kernel {
                                let p = t * stride + j;
                                if p < len {
                                    dw[(o * c_in + ci) * kernel + j] +=
                                        gv * input.data()[ci * len + p];
                                }
                            }
                        }
                    }
                }
                scratch.add(weight, dw);
            }
            if input.requires_grad() {
                let mut dx = vec![0.0; c_in * len];
                for o in 0..c_out {
                    for t in 0..out_len {
                        let gv = g[o * out_len + t];
                        if gv == 0.0 {
                            continue;
                        }
                        for ci in 0..c_in {
                            for j in 0..kernel {
                                let p = t * stride + j;
                                if p < len {
                                    dx[ci * len + p] +=
                                        gv * weight.data()[(o * c_in + ci) * kernel + j];
                                }
                            }
                        }
                    }
                }
                scratch.add(input, dx);
            }
        }
        Op::RowMax { input, argmax } => {
            if input.requires_grad() {
                let [r, c] = *input.shape() else { unreachable!() };
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    dx[i * c + argmax[i]] = g[i];
                }
                scratch.add(input, dx);
            }
        }
        Op::Sum(a) => {
            if a.requires_grad() {
                scratch.add(a, vec![g[0]; a.numel()]);
            }
        }
        Op::SliceCols { input, start, len } => {
            if input.requires_grad() {
                let [r, c] = *input.shape() else { unreachable!() };
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..*len {
                        dx[i * c + start + j] = g[i * len + j];
                    }
                }
                scratch.add(input, dx);
            }
        }
        Op::ConcatCols(parts) => {
            let total = node.shape()[1];
            let r = node.shape()[0];
            let mut offset = 0;
            for p in parts {
                let w = p.shape()[1];
                if p.requires_grad() {
                    let mut dp = vec![0.0; r * w];
                    for i in 0..r {
                        dp[i * w..(i + 1) * w]
                            .copy_from_slice(&g[i * total + offset..i * total + offset + w]);
                    }
                    scratch.add(p, dp);
                }
                offset += w;
            }
        }
        Op::Custom { inputs, rule } => {
            let grads = rule.backward(g, inputs);
            debug_assert_eq!(grads.len(), inputs.len(), "{} backward arity", rule.name());
            for (input, grad) in inputs.iter().zip(grads) {
                if let Some(grad) = grad {
                    if input.requires_grad() {
                        debug_assert_eq!(grad.len(), input.numel(), "{} grad size", rule.name());
                        scratch.add(input, grad);
                    }
                }
            }
        }
    }
}

/// Compares the analytic gradient of `f` at `x` against central finite
/// differences with step `h`. Returns the max over elements of
/// `|analytic - numeric| / max(1, |analytic|)`.
///
/// `f` must be a deterministic scalar-valued function of its input.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64, TensorError>
where
    F: Fn(&Tensor) -> Result<Tensor, TensorError>,
{
    assert!(h > 0.0, "finite difference step must be positive");
    let leaf = Tensor::parameter(x.shape(), x.data().to_vec());
    let y = f(&leaf)?;
    if y.numel() != 1 {
        return Err(TensorError::NonScalarRoot {
            shape: y.shape().to_vec(),
        });
    }
    backward(&y)?;
    let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; leaf.numel()]);
    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let mut plus = x.data().to_vec();
        plus[i] += h;
        let mut minus = x.data().to_vec();
        minus[i] -= h;
        let fp = f(&Tensor::constant(x.shape(), plus))?.item();
        let fm = f(&Tensor::constant(x.shape(), minus))?.item();
        let numeric = (fp - fm) / (2.0 * h);
        let denom = if libm::fabs(analytic[i]) > 1.0 {
            libm::fabs(analytic[i])
        } else {
            1.0
        };
        let err = libm::fabs(analytic[i] - numeric) / denom;
        if err > worst {
            worst = err;
        }
    }
    Ok(worst)
}
