//! Recording tape for reverse-mode differentiation.
//!
//! Every forward computation — inference included — is expressed as nodes on
//! a [`Graph`]. A node stores its value, the op that produced it, and whether
//! anything upstream is trainable; [`Graph::backward`] walks the tape once in
//! reverse and accumulates gradients for the `param` leaves. Ops validate
//! shapes on entry so a malformed wiring fails at build time, not inside the
//! backward pass.

use std::collections::HashMap;

use crate::masks::AttentionMask;

use super::{gelu_grad_scalar, rope_rotate, Tensor, TensorError, TensorResult, COSINE_EPS};

/// Handle to a node on a [`Graph`] tape.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Const,
    Param,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddRow { x: NodeId, row: NodeId },
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    Concat { axis: usize, parts: Vec<NodeId> },
    Slice { x: NodeId, axis: usize, start: usize, len: usize },
    SoftmaxMasked { x: NodeId },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, eps: f64 },
    Gelu(NodeId),
    Embedding { table: NodeId, ids: Vec<usize> },
    Rope { x: NodeId, positions: Vec<usize> },
    Mse(NodeId, NodeId),
    CosineSimilarity(NodeId, NodeId),
    Sum(NodeId),
    BceWithLogits { logits: NodeId, targets: Vec<f64> },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients of one scalar loss with respect to the tape's `param` nodes.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    by_param: HashMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.by_param.get(&id)
    }

    /// Gradient for a param, or zeros when the loss never touched it.
    pub fn get_or_zeros(&self, id: NodeId, shape: &[usize]) -> Tensor {
        self.by_param
            .get(&id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Tensor)> {
        self.by_param.iter().map(|(k, v)| (*k, v))
    }

    /// Global L2 norm across every stored gradient.
    pub fn global_norm(&self) -> f64 {
        self.by_param
            .values()
            .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

/// A Wengert-style tape of tensor ops.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Graph {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value of a node, by reference.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Owned (cheap) clone of a node's value.
    pub fn tensor(&self, id: NodeId) -> Tensor {
        self.nodes[id.0].value.clone()
    }

    /// A leaf the backward pass treats as fixed data.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Const, false)
    }

    /// A trainable leaf; [`Graph::backward`] reports its gradient.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Param, true)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> TensorResult<NodeId> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push_dep(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> TensorResult<NodeId> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push_dep(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> TensorResult<NodeId> {
        let value = self.value(a).mul(self.value(b))?;
        Ok(self.push_dep(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let value = self.value(a).scale(s);
        self.push_dep(value, Op::Scale(a, s), &[a])
    }

    /// Broadcast-add a `[n]`-length row to every row of a `[m, n]` tensor.
    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> TensorResult<NodeId> {
        let value = self.value(x).add_row(self.value(row))?;
        Ok(self.push_dep(value, Op::AddRow { x, row }, &[x, row]))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> TensorResult<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push_dep(value, Op::Matmul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: NodeId) -> TensorResult<NodeId> {
        let value = self.value(a).transpose()?;
        Ok(self.push_dep(value, Op::Transpose(a), &[a]))
    }

    pub fn concat(&mut self, axis: usize, parts: &[NodeId]) -> TensorResult<NodeId> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat(axis, &tensors)?;
        Ok(self.push_dep(
            value,
            Op::Concat {
                axis,
                parts: parts.to_vec(),
            },
            parts,
        ))
    }

    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> TensorResult<NodeId> {
        let value = self.value(x).slice(axis, start, len)?;
        Ok(self.push_dep(value, Op::Slice { x, axis, start, len }, &[x]))
    }

    pub fn softmax_masked(&mut self, x: NodeId, mask: &AttentionMask) -> TensorResult<NodeId> {
        let value = self.value(x).softmax_masked(mask)?;
        Ok(self.push_dep(value, Op::SoftmaxMasked { x }, &[x]))
    }

    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    ) -> TensorResult<NodeId> {
        let value = self
            .value(x)
            .layer_norm(self.value(gain), self.value(bias), eps)?;
        Ok(self.push_dep(value, Op::LayerNorm { x, gain, bias, eps }, &[x, gain, bias]))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).gelu();
        self.push_dep(value, Op::Gelu(x), &[x])
    }

    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> TensorResult<NodeId> {
        let value = self.value(table).embedding_lookup(ids)?;
        Ok(self.push_dep(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Rotary rotation at explicit absolute positions, one per row.
    pub fn rope(&mut self, x: NodeId, positions: &[usize]) -> TensorResult<NodeId> {
        let value = self.value(x).rope(positions)?;
        Ok(self.push_dep(
            value,
            Op::Rope {
                x,
                positions: positions.to_vec(),
            },
            &[x],
        ))
    }

    pub fn mse(&mut self, a: NodeId, b: NodeId) -> TensorResult<NodeId> {
        let value = self.value(a).mse(self.value(b))?;
        Ok(self.push_dep(value, Op::Mse(a, b), &[a, b]))
    }

    pub fn cosine_similarity(&mut self, a: NodeId, b: NodeId) -> TensorResult<NodeId> {
        let value = self.value(a).cosine_similarity(self.value(b))?;
        Ok(self.push_dep(value, Op::CosineSimilarity(a, b), &[a, b]))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(a).sum());
        self.push_dep(value, Op::Sum(a), &[a])
    }

    /// Mean binary cross-entropy of per-element logits against fixed 0/1
    /// targets, computed in the numerically stable fused form
    /// `max(z,0) − z·y + ln(1+e^{−|z|})`. Scalar output.
    pub fn bce_with_logits(&mut self, logits: NodeId, targets: &[f64]) -> TensorResult<NodeId> {
        let z = self.value(logits);
        if z.len() != targets.len() {
            return Err(TensorError::DimMismatch {
                op: "bce_with_logits",
                left: z.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let loss = z
            .data()
            .iter()
            .zip(targets)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / targets.len() as f64;
        Ok(self.push_dep(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
            &[logits],
        ))
    }

    /// Reverse sweep from a scalar loss. Returns gradients for every `param`
    /// node the loss depends on; params outside the loss's cone are absent.
    pub fn backward(&self, loss: NodeId) -> TensorResult<Gradients> {
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: loss_value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if grads[idx].is_none() || !self.nodes[idx].needs_grad {
                continue;
            }
            let grad = grads[idx].take().unwrap();
            let node = &self.nodes[idx];
            match &node.op {
                Op::Const | Op::Param => {
                    grads[idx] = Some(grad); // leaves keep their accumulation
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, &grad);
                    self.accumulate(&mut grads, *b, &grad);
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut grads, *a, &grad);
                    let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
                    self.accumulate(&mut grads, *b, &neg);
                }
                Op::Mul(a, b) => {
                    let av = self.value(*a).data();
                    let bv = self.value(*b).data();
                    let da: Vec<f64> = grad.iter().zip(bv).map(|(g, b)| g * b).collect();
                    let db: Vec<f64> = grad.iter().zip(av).map(|(g, a)| g * a).collect();
                    self.accumulate(&mut grads, *a, &da);
                    self.accumulate(&mut grads, *b, &db);
                }
                Op::Scale(a, s) => {
                    let da: Vec<f64> = grad.iter().map(|g| g * s).collect();
                    self.accumulate(&mut grads, *a, &da);
                }
                Op::AddRow { x, row } => {
                    self.accumulate(&mut grads, *x, &grad);
                    let n = self.value(*row).len();
                    let mut drow = vec![0.0; n];
                    for (i, g) in grad.iter().enumerate() {
                        drow[i % n] += g;
                    }
                    self.accumulate(&mut grads, *row, &drow);
                }
                Op::Matmul(a, b) => {
                    // dA = dC·Bᵀ, dB = Aᵀ·dC
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let (m, k) = (av.shape()[0], av.shape()[1]);
                    let n = bv.shape()[1];
                    let dc = Tensor::from_op(vec![m, n], grad);
                    let da = dc.matmul(&bv.transpose().unwrap()).unwrap();
                    let db = av.transpose().unwrap().matmul(&dc).unwrap();
                    debug_assert_eq!(da.shape(), &[m, k]);
                    self.accumulate(&mut grads, *a, da.data());
                    self.accumulate(&mut grads, *b, db.data());
                }
                Op::Transpose(a) => {
                    let out_shape = node.value.shape();
                    let (m, n) = (out_shape[0], out_shape[1]);
                    let mut da = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            da[j * m + i] = grad[i * n + j];
                        }
                    }
                    self.accumulate(&mut grads, *a, &da);
                }
                Op::Concat { axis, parts } => match axis {
                    0 => {
                        let mut offset = 0;
                        for &p in parts {
                            let n = self.value(p).len();
                            self.accumulate(&mut grads, p, &grad[offset..offset + n]);
                            offset += n;
                        }
                    }
                    _ => {
                        let rows = node.value.shape()[0];
                        let total = node.value.shape()[1];
                        let mut offset = 0;
                        for &p in parts {
                            let w = self.value(p).shape()[1];
                            let mut dp = Vec::with_capacity(rows * w);
                            for i in 0..rows {
                                dp.extend_from_slice(&grad[i * total + offset..i * total + offset + w]);
                            }
                            self.accumulate(&mut grads, p, &dp);
                            offset += w;
                        }
                    }
                },
                Op::Slice { x, axis, start, len } => {
                    let xv = self.value(*x);
                    let mut dx = vec![0.0; xv.len()];
                    match axis {
                        0 => {
                            let stride: usize = xv.shape()[1..].iter().product();
                            dx[start * stride..(start + len) * stride].copy_from_slice(&grad);
                        }
                        _ => {
                            let n = xv.shape()[1];
                            let rows = xv.shape()[0];
                            for i in 0..rows {
                                for j in 0..*len {
                                    dx[i * n + start + j] = grad[i * len + j];
                                }
                            }
                        }
                    }
                    self.accumulate(&mut grads, *x, &dx);
                }
                Op::SoftmaxMasked { x, .. } => {
                    // dx_ij = y_ij (g_ij − Σ_k g_ik y_ik); masked entries have
                    // y = 0 so they contribute and receive nothing.
                    let y = node.value.data();
                    let (rows, n) = (node.value.shape()[0], node.value.shape()[1]);
                    let mut dx = vec![0.0; rows * n];
                    for i in 0..rows {
                        let yr = &y[i * n..(i + 1) * n];
                        let gr = &grad[i * n..(i + 1) * n];
                        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for j in 0..n {
                            dx[i * n + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    self.accumulate(&mut grads, *x, &dx);
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let xv = self.value(*x);
                    let g = self.value(*gain).data();
                    let (rows, n) = (xv.shape()[0], xv.shape()[1]);
                    let nf = n as f64;
                    let mut dx = vec![0.0; rows * n];
                    let mut dgain = vec![0.0; n];
                    let mut dbias = vec![0.0; n];
                    for i in 0..rows {
                        let row = &xv.data()[i * n..(i + 1) * n];
                        let gr = &grad[i * n..(i + 1) * n];
                        let mean = row.iter().sum::<f64>() / nf;
                        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nf;
                        let inv = 1.0 / (var + eps).sqrt();
                        // x̂ and the two row means the standard formula needs
                        let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                        let dxhat: Vec<f64> = gr.iter().zip(g).map(|(gr, g)| gr * g).collect();
                        let mean_dxhat = dxhat.iter().sum::<f64>() / nf;
                        let mean_dxhat_xhat =
                            dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / nf;
                        for j in 0..n {
                            dx[i * n + j] =
                                inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                            dgain[j] += gr[j] * xhat[j];
                            dbias[j] += gr[j];
                        }
                    }
                    self.accumulate(&mut grads, *x, &dx);
                    self.accumulate(&mut grads, *gain, &dgain);
                    self.accumulate(&mut grads, *bias, &dbias);
                }
                Op::Gelu(a) => {
                    let av = self.value(*a).data();
                    let da: Vec<f64> = grad
                        .iter()
                        .zip(av)
                        .map(|(g, &x)| g * gelu_grad_scalar(x))
                        .collect();
                    self.accumulate(&mut grads, *a, &da);
                }
                Op::Embedding { table, ids } => {
                    let tv = self.value(*table);
                    let d = tv.shape()[1];
                    let mut dt = vec![0.0; tv.len()];
                    for (row, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[id * d + j] += grad[row * d + j];
                        }
                    }
                    self.accumulate(&mut grads, *table, &dt);
                }
                Op::Rope { x, positions } => {
                    // the rotation is orthogonal, so the adjoint is its inverse
                    let d = node.value.shape()[1];
                    let mut dx = grad.clone();
                    rope_rotate(&mut dx, d, positions, -1.0);
                    self.accumulate(&mut grads, *x, &dx);
                }
                Op::Mse(a, b) => {
                    let av = self.value(*a).data();
                    let bv = self.value(*b).data();
                    let scale = 2.0 * grad[0] / av.len() as f64;
                    let da: Vec<f64> = av.iter().zip(bv).map(|(a, b)| scale * (a - b)).collect();
                    let db: Vec<f64> = da.iter().map(|v| -v).collect();
                    self.accumulate(&mut grads, *a, &da);
                    self.accumulate(&mut grads, *b, &db);
                }
                Op::CosineSimilarity(a, b) => {
                    let av = self.value(*a).data();
                    let bv = self.value(*b).data();
                    let dot: f64 = av.iter().zip(bv).map(|(a, b)| a * b).sum();
                    let na = av.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let nb = bv.iter().map(|v| v * v).sum::<f64>().sqrt();
                    // mirror the forward's clamp: below it the denominator is
                    // a constant, so it contributes no gradient
                    let clamped = na * nb <= COSINE_EPS;
                    let denom = (na * nb).max(COSINE_EPS);
                    let g = grad[0];
                    // d/da_i [dot/denom] with ‖a‖ entering through denom
                    let da: Vec<f64> = av
                        .iter()
                        .zip(bv)
                        .map(|(&a, &b)| {
                            let d_denom = if clamped { 0.0 } else { nb * a / na };
                            g * (b / denom - dot * d_denom / (denom * denom))
                        })
                        .collect();
                    let db: Vec<f64> = bv
                        .iter()
                        .zip(av)
                        .map(|(&b, &a)| {
                            let d_denom = if clamped { 0.0 } else { na * b / nb };
                            g * (a / denom - dot * d_denom / (denom * denom))
                        })
                        .collect();
                    self.accumulate(&mut grads, *a, &da);
                    self.accumulate(&mut grads, *b, &db);
                }
                Op::Sum(a) => {
                    let n = self.value(*a).len();
                    let da = vec![grad[0]; n];
                    self.accumulate(&mut grads, *a, &da);
                }
                Op::BceWithLogits { logits, targets } => {
                    // d/dz of the stable form is σ(z) − y
                    let z = self.value(*logits).data();
                    let scale = grad[0] / targets.len() as f64;
                    let dz: Vec<f64> = z
                        .iter()
                        .zip(targets)
                        .map(|(&z, &y)| scale * (sigmoid(z) - y))
                        .collect();
                    self.accumulate(&mut grads, *logits, &dz);
                }
            }
        }

        let mut by_param = HashMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Param) {
                if let Some(g) = grads[idx].take() {
                    by_param.insert(NodeId(idx), Tensor::from_op(node.value.shape().to_vec(), g));
                }
            }
        }
        Ok(Gradients { by_param })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], id: NodeId, delta: &[f64]) {
        if !self.nodes[id.0].needs_grad {
            return; // constant cone: gradient is never consumed
        }
        match &mut grads[id.0] {
            Some(buf) => {
                for (b, d) in buf.iter_mut().zip(delta) {
                    *b += d;
                }
            }
            slot => *slot = Some(delta.to_vec()),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push_dep(&mut self, value: Tensor, op: Op, inputs: &[NodeId]) -> NodeId {
        let needs = inputs.iter().any(|&i| self.nodes[i.0].needs_grad);
        self.push(value, op, needs)
    }
}

/// Logistic function; also used outside the tape for discriminator readouts.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masks::AttentionMask;
    use crate::rng;

    /// Central finite difference of `f` at `x`, one entry at a time.
    fn finite_diff(x: &Tensor, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
        let eps = 1e-6;
        let mut out = vec![0.0; x.len()];
        for i in 0..x.len() {
            let mut plus = x.data().to_vec();
            let mut minus = x.data().to_vec();
            plus[i] += eps;
            minus[i] -= eps;
            let fp = f(&Tensor::from_op(x.shape().to_vec(), plus));
            let fm = f(&Tensor::from_op(x.shape().to_vec(), minus));
            out[i] = (fp - fm) / (2.0 * eps);
        }
        Tensor::from_op(x.shape().to_vec(), out)
    }

    fn assert_close(got: &Tensor, want: &Tensor, tol: f64, what: &str) {
        assert_eq!(got.shape(), want.shape(), "{what}: shape");
        for (i, (g, w)) in got.data().iter().zip(want.data()).enumerate() {
            let denom = w.abs().max(1.0);
            assert!(
                (g - w).abs() / denom < tol,
                "{what}: entry {i} analytic {g} vs numeric {w}"
            );
        }
    }

    /// Exercises one op end-to-end: builds `loss = Σ (op(x, extras))²`-style
    /// scalars via the provided closure, then checks the tape gradient of the
    /// chosen leaf against finite differences.
    fn check_grad(
        seed: u64,
        shape: &[usize],
        build: impl Fn(&mut Graph, NodeId) -> NodeId,
    ) {
        let mut r = rng::substream(seed, "gradcheck");
        let x = rng::uniform_tensor(&mut r, shape, -1.5, 1.5);
        let mut g = Graph::new();
        let xid = g.param(x.clone());
        let loss = build(&mut g, xid);
        let grads = g.backward(loss).unwrap();
        let analytic = grads.get(xid).expect("leaf gradient");

        let numeric = finite_diff(&x, |xt| {
            let mut g = Graph::new();
            let xid = g.param(xt.clone());
            let loss = build(&mut g, xid);
            g.value(loss).item()
        });
        assert_close(analytic, &numeric, 1e-5, "grad");
    }

    #[test]
    fn grad_matmul_chain() {
        check_grad(1, &[3, 4], |g, x| {
            let mut r = rng::substream(99, "w");
            let w = g.constant(rng::uniform_tensor(&mut r, &[4, 2], -1.0, 1.0));
            let y = g.matmul(x, w).unwrap();
            let y2 = g.mul(y, y).unwrap();
            g.sum(y2)
        });
    }

    #[test]
    fn grad_softmax_masked() {
        let mask = AttentionMask::from_fn(3, 5, |i, j| j <= i + 2).unwrap();
        check_grad(2, &[3, 5], move |g, x| {
            let y = g.softmax_masked(x, &mask).unwrap();
            let y2 = g.mul(y, y).unwrap();
            g.sum(y2)
        });
    }

    #[test]
    fn grad_layer_norm_all_three_leaves() {
        let mut r = rng::substream(7, "ln");
        let x = rng::uniform_tensor(&mut r, &[4, 6], -2.0, 2.0);
        let gain0 = rng::uniform_tensor(&mut r, &[6], 0.5, 1.5);
        let bias0 = rng::uniform_tensor(&mut r, &[6], -0.5, 0.5);

        let run = |x: &Tensor, gain: &Tensor, bias: &Tensor| -> (f64, Option<[Tensor; 3]>) {
            let mut g = Graph::new();
            let xid = g.param(x.clone());
            let gid = g.param(gain.clone());
            let bid = g.param(bias.clone());
            let y = g.layer_norm(xid, gid, bid, 1e-6).unwrap();
            let y2 = g.mul(y, y).unwrap();
            let loss = g.sum(y2);
            let grads = g.backward(loss).unwrap();
            let out = [
                grads.get(xid).unwrap().clone(),
                grads.get(gid).unwrap().clone(),
                grads.get(bid).unwrap().clone(),
            ];
            (g.value(loss).item(), Some(out))
        };

        let (_, grads) = run(&x, &gain0, &bias0);
        let [dx, dg, db] = grads.unwrap();

        let ndx = finite_diff(&x, |xt| run(xt, &gain0, &bias0).0);
        let ndg = finite_diff(&gain0, |gt| run(&x, gt, &bias0).0);
        let ndb = finite_diff(&bias0, |bt| run(&x, &gain0, bt).0);
        assert_close(&dx, &ndx, 1e-5, "layer_norm/x");
        assert_close(&dg, &ndg, 1e-5, "layer_norm/gain");
        assert_close(&db, &ndb, 1e-5, "layer_norm/bias");
    }

    #[test]
    fn grad_gelu() {
        check_grad(3, &[2, 5], |g, x| {
            let y = g.gelu(x);
            let y2 = g.mul(y, y).unwrap();
            g.sum(y2)
        });
    }

    #[test]
    fn grad_rope_is_inverse_rotation() {
        check_grad(4, &[3, 8], |g, x| {
            let y = g.rope(x, &[0, 5, 17]).unwrap();
            let y2 = g.mul(y, y).unwrap();
            g.sum(y2)
        });
    }

    #[test]
    fn grad_mse_and_cosine() {
        let mut r = rng::substream(5, "target");
        let target = rng::uniform_tensor(&mut r, &[3, 4], -1.0, 1.0);
        let t2 = target.clone();
        check_grad(5, &[3, 4], move |g, x| {
            let t = g.constant(target.clone());
            g.mse(x, t).unwrap()
        });
        check_grad(6, &[3, 4], move |g, x| {
            let t = g.constant(t2.clone());
            g.cosine_similarity(x, t).unwrap()
        });
    }

    #[test]
    fn grad_concat_slice_transpose() {
        check_grad(8, &[4, 4], |g, x| {
            let left = g.slice(x, 1, 0, 2).unwrap();
            let right = g.slice(x, 1, 2, 2).unwrap();
            let swapped = g.concat(1, &[right, left]).unwrap();
            let t = g.transpose(swapped).unwrap();
            let y = g.matmul(t, swapped).unwrap();
            let y2 = g.mul(y, y).unwrap();
            g.sum(y2)
        });
    }

    #[test]
    fn grad_embedding_scatters_to_rows() {
        let mut r = rng::substream(9, "emb");
        let table = rng::uniform_tensor(&mut r, &[6, 3], -1.0, 1.0);
        let ids = [2usize, 2, 5, 0];
        let mut g = Graph::new();
        let tid = g.param(table.clone());
        let e = g.embedding(tid, &ids).unwrap();
        let e2 = g.mul(e, e).unwrap();
        let loss = g.sum(e2);
        let grads = g.backward(loss).unwrap();
        let dt = grads.get(tid).unwrap();

        let ndt = finite_diff(&table, |tt| {
            let mut g = Graph::new();
            let tid = g.param(tt.clone());
            let e = g.embedding(tid, &ids).unwrap();
            let e2 = g.mul(e, e).unwrap();
            let s = g.sum(e2);
            g.value(s).item()
        });
        assert_close(dt, &ndt, 1e-5, "embedding/table");
        // rows 1, 3, 4 were never looked up
        for row in [1, 3, 4] {
            for j in 0..3 {
                assert_eq!(dt.get2(row, j), 0.0);
            }
        }
    }

    #[test]
    fn grad_add_row_bias() {
        let mut r = rng::substream(10, "bias");
        let bias = rng::uniform_tensor(&mut r, &[4], -1.0, 1.0);
        check_grad(10, &[3, 4], move |g, x| {
            let b = g.constant(bias.clone());
            let y = g.add_row(x, b).unwrap();
            let y2 = g.mul(y, y).unwrap();
            g.sum(y2)
        });
        // and the gradient w.r.t. the bias itself sums over rows
        let mut g = Graph::new();
        let x = g.constant(Tensor::filled(&[3, 2], 1.0));
        let b = g.param(Tensor::zeros(&[2]));
        let y = g.add_row(x, b).unwrap();
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(b).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn grad_bce_with_logits() {
        let targets = [1.0, 0.0, 1.0, 0.0, 1.0, 0.0];
        check_grad(12, &[6], move |g, x| g.bce_with_logits(x, &targets).unwrap());
        // value check against the naive formula at moderate logits
        let mut g = Graph::new();
        let z = g.constant(Tensor::new(vec![2], vec![0.3, -1.2]).unwrap());
        let loss = g.bce_with_logits(z, &[1.0, 0.0]).unwrap();
        let naive = (-(sigmoid(0.3)).ln() - (1.0 - sigmoid(-1.2)).ln()) / 2.0;
        assert!((g.value(loss).item() - naive).abs() < 1e-12);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2, 2]));
        assert!(matches!(
            g.backward(x),
            Err(TensorError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn params_off_the_loss_cone_get_no_gradient() {
        let mut g = Graph::new();
        let used = g.param(Tensor::scalar(2.0));
        let unused = g.param(Tensor::scalar(3.0));
        let loss = g.mul(used, used).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(used).is_some());
        assert!(grads.get(unused).is_none());
        assert_eq!(grads.get_or_zeros(unused, &[1]).data(), &[0.0]);
    }

    #[test]
    fn gradient_accumulates_over_reused_nodes() {
        // loss = x·x + x ⇒ dloss/dx = 2x + 1
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let sq = g.mul(x, x).unwrap();
        let loss = g.add(sq, x).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!((grads.get(x).unwrap().item() - 7.0).abs() < 1e-12);
    }
}
