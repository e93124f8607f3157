//! Reverse-mode automatic differentiation on a define-by-run tape.
//!
//! A [`Tape`] records every operation of one forward pass; [`Tape::backward`]
//! replays the record in reverse to accumulate gradients. The graph is
//! rebuilt per forward pass, which keeps the implementation small and makes
//! every pass independent. The op set is exactly what the transformer
//! classifier needs; there is no general broadcasting.
//!
//! Shape mismatches are programming errors and panic. Producing a non-finite
//! value is a hard error as well: with the stabilized softmax and the
//! eps-guarded layer norm, finite inputs always yield finite outputs, so a
//! NaN/Inf here means the invariant was broken upstream.

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    AddRowBias(NodeId, NodeId),
    Gelu(NodeId),
    Relu(NodeId),
    Softmax { x: NodeId, axis: usize },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, eps: f64 },
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SelectRow { x: NodeId, row: usize },
    Sum(NodeId),
    Mean(NodeId),
    CrossEntropy { logits: NodeId, targets: Vec<usize> },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Vec<f64>,
    op: Op,
}

/// Gradient tape for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        assert!(
            data.iter().all(|v| v.is_finite()),
            "non-finite value produced by {op:?}"
        );
        let grad = vec![0.0; data.len()];
        self.nodes.push(Node { shape, data, grad, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Inserts a tensor as a leaf. Every node gets a gradient buffer;
    /// whether anyone reads it is the caller's business (the [`Tensor`]
    /// `requires_grad` flag marks which leaves are parameters).
    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf)
    }

    /// Leaf from raw parts (inputs, constants).
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> NodeId {
        self.push(shape, data, Op::Leaf)
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn grad(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].grad
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(
            self.nodes[a.0].shape, self.nodes[b.0].shape,
            "add: shape mismatch"
        );
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        self.push(self.nodes[a.0].shape.clone(), data, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(
            self.nodes[a.0].shape, self.nodes[b.0].shape,
            "mul: shape mismatch"
        );
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        self.push(self.nodes[a.0].shape.clone(), data, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let data = self.nodes[a.0].data.iter().map(|x| x * c).collect();
        self.push(self.nodes[a.0].shape.clone(), data, Op::Scale(a, c))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        assert!(sa.len() == 2 && sb.len() == 2, "matmul: rank-2 only");
        assert_eq!(sa[1], sb[0], "matmul: inner dimensions disagree");
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_raw(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n);
        self.push(vec![m, n], data, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let s = &self.nodes[a.0].shape;
        assert_eq!(s.len(), 2, "transpose: rank-2 only");
        let (r, c) = (s[0], s[1]);
        let src = &self.nodes[a.0].data;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        self.push(vec![c, r], data, Op::Transpose(a))
    }

    /// `[n, d] + [d]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let (sx, sb) = (&self.nodes[x.0].shape, &self.nodes[bias.0].shape);
        assert!(sx.len() == 2 && sb.len() == 1 && sb[0] == sx[1], "add_row_bias: shapes");
        let (n, d) = (sx[0], sx[1]);
        let mut data = self.nodes[x.0].data.clone();
        for i in 0..n {
            for j in 0..d {
                data[i * d + j] += self.nodes[bias.0].data[j];
            }
        }
        self.push(vec![n, d], data, Op::AddRowBias(x, bias))
    }

    // ---- nonlinearities ----

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let data = self.nodes[a.0].data.iter().map(|&x| gelu_scalar(x)).collect();
        self.push(self.nodes[a.0].shape.clone(), data, Op::Gelu(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let data = self.nodes[a.0].data.iter().map(|&x| x.max(0.0)).collect();
        self.push(self.nodes[a.0].shape.clone(), data, Op::Relu(a))
    }

    /// Max-subtracted softmax along `axis`. Rows sum to one; entries stay in
    /// (0, 1) even for inputs like `[1000, 0]`.
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> NodeId {
        let shape = self.nodes[x.0].shape.clone();
        assert!(axis < shape.len(), "softmax: axis out of range");
        let data = softmax_raw(&self.nodes[x.0].data, &shape, axis);
        self.push(shape, data, Op::Softmax { x, axis })
    }

    /// Per-row normalization over the last axis followed by the affine
    /// `gain * xhat + bias`. `eps` guards zero variance.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> NodeId {
        let shape = self.nodes[x.0].shape.clone();
        let d = *shape.last().expect("layer_norm: rank >= 1");
        assert_eq!(self.nodes[gain.0].shape, vec![d], "layer_norm: gain shape");
        assert_eq!(self.nodes[bias.0].shape, vec![d], "layer_norm: bias shape");
        let xd = &self.nodes[x.0].data;
        let g = &self.nodes[gain.0].data;
        let b = &self.nodes[bias.0].data;
        let mut data = vec![0.0; xd.len()];
        for row in 0..xd.len() / d {
            let s = row * d;
            let (mean, var) = row_mean_var(&xd[s..s + d]);
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                data[s + j] = (xd[s + j] - mean) * inv * g[j] + b[j];
            }
        }
        self.push(shape, data, Op::LayerNorm { x, gain, bias, eps })
    }

    // ---- shape plumbing ----

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let d = self.nodes[parts[0].0].shape[1];
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let s = &self.nodes[p.0].shape;
            assert!(s.len() == 2 && s[1] == d, "concat_rows: column mismatch");
            rows += s[0];
            data.extend_from_slice(&self.nodes[p.0].data);
        }
        self.push(vec![rows, d], data, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let n = self.nodes[parts[0].0].shape[0];
        let total: usize = parts.iter().map(|p| self.nodes[p.0].shape[1]).collect::<Vec<_>>().iter().sum();
        for &p in parts {
            assert!(
                self.nodes[p.0].shape.len() == 2 && self.nodes[p.0].shape[0] == n,
                "concat_cols: row mismatch"
            );
        }
        let mut data = vec![0.0; n * total];
        let mut off = 0;
        for &p in parts {
            let w = self.nodes[p.0].shape[1];
            for i in 0..n {
                data[i * total + off..i * total + off + w]
                    .copy_from_slice(&self.nodes[p.0].data[i * w..(i + 1) * w]);
            }
            off += w;
        }
        self.push(vec![n, total], data, Op::ConcatCols(parts.to_vec()))
    }

    /// Extracts one row of a rank-2 node as a `[1, d]` node.
    pub fn select_row(&mut self, x: NodeId, row: usize) -> NodeId {
        let s = &self.nodes[x.0].shape;
        assert!(s.len() == 2 && row < s[0], "select_row: out of range");
        let d = s[1];
        let data = self.nodes[x.0].data[row * d..(row + 1) * d].to_vec();
        self.push(vec![1, d], data, Op::SelectRow { x, row })
    }

    // ---- reductions / loss ----

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.nodes[a.0].data.iter().sum();
        self.push(vec![1], vec![s], Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.nodes[a.0].data.len() as f64;
        let s: f64 = self.nodes[a.0].data.iter().sum();
        self.push(vec![1], vec![s / n], Op::Mean(a))
    }

    /// Mean cross-entropy of `[n, k]` logits against `n` class indices,
    /// fused with a log-sum-exp for stability.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> NodeId {
        let s = &self.nodes[logits.0].shape;
        assert!(s.len() == 2 && s[0] == targets.len(), "cross_entropy: shapes");
        let k = s[1];
        let d = &self.nodes[logits.0].data;
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            assert!(t < k, "cross_entropy: target out of range");
            let row = &d[i * k..(i + 1) * k];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            loss -= row[t] - lse;
        }
        loss /= targets.len() as f64;
        self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy { logits, targets: targets.to_vec() },
        )
    }

    // ---- backward ----

    /// Accumulates gradients of a scalar `loss` into every reachable node.
    /// Nodes that do not feed the loss keep zero gradients. The tape is
    /// append-only, so reverse id order is a reverse topological order.
    pub fn backward(&mut self, loss: NodeId) {
        assert_eq!(
            self.nodes[loss.0].data.len(),
            1,
            "backward: loss must be scalar"
        );
        self.nodes[loss.0].grad[0] = 1.0;
        for i in (0..=loss.0).rev() {
            let op = self.nodes[i].op.clone();
            let grad = std::mem::take(&mut self.nodes[i].grad);
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    axpy(&mut self.nodes[a.0].grad, &grad, 1.0);
                    axpy(&mut self.nodes[b.0].grad, &grad, 1.0);
                }
                Op::Mul(a, b) => {
                    for j in 0..grad.len() {
                        let (av, bv) = (self.nodes[a.0].data[j], self.nodes[b.0].data[j]);
                        self.nodes[a.0].grad[j] += grad[j] * bv;
                        self.nodes[b.0].grad[j] += grad[j] * av;
                    }
                }
                Op::Scale(a, c) => axpy(&mut self.nodes[a.0].grad, &grad, c),
                Op::MatMul(a, b) => {
                    let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let n = self.nodes[b.0].shape[1];
                    // dA = dC * B^T
                    let bt = transpose_raw(&self.nodes[b.0].data, k, n);
                    let da = matmul_raw(&grad, &bt, m, n, k);
                    // dB = A^T * dC
                    let at = transpose_raw(&self.nodes[a.0].data, m, k);
                    let db = matmul_raw(&at, &grad, k, m, n);
                    axpy(&mut self.nodes[a.0].grad, &da, 1.0);
                    axpy(&mut self.nodes[b.0].grad, &db, 1.0);
                }
                Op::Transpose(a) => {
                    let (r, c) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                    let gt = transpose_raw(&grad, r, c);
                    axpy(&mut self.nodes[a.0].grad, &gt, 1.0);
                }
                Op::AddRowBias(x, bias) => {
                    axpy(&mut self.nodes[x.0].grad, &grad, 1.0);
                    let d = self.nodes[bias.0].shape[0];
                    for (j, g) in grad.iter().enumerate() {
                        self.nodes[bias.0].grad[j % d] += g;
                    }
                }
                Op::Gelu(a) => {
                    for j in 0..grad.len() {
                        self.nodes[a.0].grad[j] +=
                            grad[j] * gelu_grad_scalar(self.nodes[a.0].data[j]);
                    }
                }
                Op::Relu(a) => {
                    for j in 0..grad.len() {
                        if self.nodes[a.0].data[j] > 0.0 {
                            self.nodes[a.0].grad[j] += grad[j];
                        }
                    }
                }
                Op::Softmax { x, axis } => {
                    let shape = self.nodes[i].shape.clone();
                    let out = &self.nodes[i].data;
                    let axis_len = shape[axis];
                    let inner: usize = shape[axis + 1..].iter().product();
                    let outer: usize = shape[..axis].iter().product();
                    let mut dx = vec![0.0; grad.len()];
                    for o in 0..outer {
                        for c in 0..inner {
                            let mut dot = 0.0;
                            for a in 0..axis_len {
                                let f = (o * axis_len + a) * inner + c;
                                dot += grad[f] * out[f];
                            }
                            for a in 0..axis_len {
                                let f = (o * axis_len + a) * inner + c;
                                dx[f] = out[f] * (grad[f] - dot);
                            }
                        }
                    }
                    axpy(&mut self.nodes[x.0].grad, &dx, 1.0);
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let d = *self.nodes[i].shape.last().unwrap();
                    let xd = self.nodes[x.0].data.clone();
                    let g = self.nodes[gain.0].data.clone();
                    for row in 0..xd.len() / d {
                        let s = row * d;
                        let (mean, var) = row_mean_var(&xd[s..s + d]);
                        let inv = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f64> =
                            (0..d).map(|j| (xd[s + j] - mean) * inv).collect();
                        let dy = &grad[s..s + d];
                        let mut dxhat = vec![0.0; d];
                        for j in 0..d {
                            self.nodes[gain.0].grad[j] += dy[j] * xhat[j];
                            self.nodes[bias.0].grad[j] += dy[j];
                            dxhat[j] = dy[j] * g[j];
                        }
                        let sum_dxhat: f64 = dxhat.iter().sum();
                        let sum_dxhat_xhat: f64 =
                            dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                        let df = d as f64;
                        for j in 0..d {
                            self.nodes[x.0].grad[s + j] += inv / df
                                * (df * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                        }
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let len = self.nodes[p.0].data.len();
                        axpy(&mut self.nodes[p.0].grad, &grad[off..off + len], 1.0);
                        off += len;
                    }
                }
                Op::ConcatCols(parts) => {
                    let n = self.nodes[i].shape[0];
                    let total = self.nodes[i].shape[1];
                    let mut off = 0;
                    for p in parts {
                        let w = self.nodes[p.0].shape[1];
                        for r in 0..n {
                            for j in 0..w {
                                self.nodes[p.0].grad[r * w + j] += grad[r * total + off + j];
                            }
                        }
                        off += w;
                    }
                }
                Op::SelectRow { x, row } => {
                    let d = self.nodes[i].shape[1];
                    for j in 0..d {
                        self.nodes[x.0].grad[row * d + j] += grad[j];
                    }
                }
                Op::Sum(a) => {
                    axpy_scalar(&mut self.nodes[a.0].grad, grad[0]);
                }
                Op::Mean(a) => {
                    let n = self.nodes[a.0].data.len() as f64;
                    axpy_scalar(&mut self.nodes[a.0].grad, grad[0] / n);
                }
                Op::CrossEntropy { logits, targets } => {
                    let k = self.nodes[logits.0].shape[1];
                    let n = targets.len();
                    let d = self.nodes[logits.0].data.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        let row = &d[r * k..(r + 1) * k];
                        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let exps: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
                        let z: f64 = exps.iter().sum();
                        for c in 0..k {
                            let softmax = exps[c] / z;
                            let onehot = if c == t { 1.0 } else { 0.0 };
                            self.nodes[logits.0].grad[r * k + c] +=
                                grad[0] * (softmax - onehot) / n as f64;
                        }
                    }
                }
            }
            self.nodes[i].grad = grad;
        }
    }
}

// ---- raw kernels ----

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            let (crow, brow) = (&mut c[i * n..(i + 1) * n], &b[p * n..(p + 1) * n]);
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

fn softmax_raw(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let axis_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for c in 0..inner {
            let at = |a: usize| (o * axis_len + a) * inner + c;
            let m = (0..axis_len)
                .map(|a| x[at(a)])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for a in 0..axis_len {
                let e = (x[at(a)] - m).exp();
                out[at(a)] = e;
                z += e;
            }
            for a in 0..axis_len {
                out[at(a)] /= z;
            }
        }
    }
    out
}

fn row_mean_var(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

fn gelu_scalar(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn axpy(dst: &mut [f64], src: &[f64], c: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}

fn axpy_scalar(dst: &mut [f64], v: f64) {
    for d in dst.iter_mut() {
        *d += v;
    }
}

// ---- optimizer ----

/// Adam state: per-parameter first/second moment accumulators and the shared
/// step counter. Accumulator shapes always match the parameter shapes.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(learning_rate: f64) -> Self {
        assert!(learning_rate > 0.0, "adam: learning rate must be positive");
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update over a parameter list. Gradients are
    /// given as flat buffers parallel to `params`.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Vec<f64>]) {
        let mut refs: Vec<&mut Tensor> = params.iter_mut().collect();
        self.step_refs(&mut refs, grads);
    }

    /// [`AdamState::step`] over borrowed parameters.
    pub fn step_refs(&mut self, params: &mut [&mut Tensor], grads: &[Vec<f64>]) {
        assert_eq!(params.len(), grads.len(), "adam: param/grad count mismatch");
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.second = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (idx, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            assert_eq!(p.numel(), g.len(), "adam: accumulator shape mismatch");
            let (m, v) = (&mut self.first[idx], &mut self.second[idx]);
            for (j, (pv, gv)) in p.data_mut().iter_mut().zip(g).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gv;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gv * gv;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *pv -= self.learning_rate * mhat / (vhat.sqrt() + self.epsilon);
            }
        }
    }
}

/// Central-difference gradient of `f` at `x`. Purely numeric; shares nothing
/// with [`Tape::backward`], which is exactly why the tests trust it.
pub fn central_difference_gradient<F>(mut f: F, x: &[f64], step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let up = f(&probe);
        probe[i] = x[i] - step;
        let down = f(&probe);
        probe[i] = x[i];
        grad[i] = (up - down) / (2.0 * step);
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            assert!(
                (x - y).abs() <= tol,
                "element {i}: {x} vs {y} (tol {tol})"
            );
        }
    }

    #[test]
    fn mul_matches_arithmetic() {
        let mut t = Tape::new();
        let a = t.constant(vec![2], vec![1.0, 2.0]);
        let b = t.constant(vec![2], vec![3.0, 4.0]);
        let c = t.mul(a, b);
        assert_eq!(t.value(c), &[3.0, 8.0]);
    }

    #[test]
    fn mul_identity_and_annihilator() {
        let mut t = Tape::new();
        let x = t.constant(vec![3], vec![-1.5, 0.25, 7.0]);
        let ones = t.constant(vec![3], vec![1.0; 3]);
        let zeros = t.constant(vec![3], vec![0.0; 3]);
        let id = t.mul(x, ones);
        let ann = t.mul(x, zeros);
        assert_eq!(t.value(id), t.value(x));
        assert_eq!(t.value(ann), &[0.0, 0.0, 0.0]);
    }

    #[test]
    #[should_panic(expected = "shape mismatch")]
    fn mul_rejects_shape_mismatch() {
        let mut t = Tape::new();
        let a = t.constant(vec![2], vec![1.0, 2.0]);
        let b = t.constant(vec![3], vec![1.0, 2.0, 3.0]);
        t.mul(a, b);
    }

    #[test]
    fn matmul_identity_and_small_case() {
        let mut t = Tape::new();
        let eye = t.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let a = t.constant(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]);
        let ia = t.matmul(eye, a);
        assert_eq!(t.value(ia), t.value(a));

        let r = t.constant(vec![1, 2], vec![1.0, 2.0]);
        let c = t.constant(vec![2, 1], vec![3.0, 4.0]);
        let p = t.matmul(r, c);
        assert_eq!(t.value(p), &[11.0]);
    }

    /// Brute-force triple loop; deliberately the dumbest possible version.
    fn matmul_oracle(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        // integer-valued so the comparison is exact
        let a: Vec<f64> = (0..12).map(|_| rng.gen_range(-4..5) as f64).collect();
        let b: Vec<f64> = (0..8).map(|_| rng.gen_range(-4..5) as f64).collect();
        let mut t = Tape::new();
        let na = t.constant(vec![3, 4], a.clone());
        let nb = t.constant(vec![4, 2], b.clone());
        let nc = t.matmul(na, nb);
        assert_eq!(t.value(nc), matmul_oracle(&a, &b, 3, 4, 2).as_slice());
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let mut t = Tape::new();
        let x = t.constant(vec![3], vec![0.0, 0.0, 0.0]);
        let s = t.softmax(x, 0);
        assert_close(t.value(s), &[1.0 / 3.0; 3], 1e-12);

        let big = t.constant(vec![2], vec![1000.0, 0.0]);
        let sb = t.softmax(big, 0);
        assert!(t.value(sb)[0] > 1.0 - 1e-12 && t.value(sb)[1] < 1e-12);
        assert!(t.value(sb).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x: Vec<f64> = (0..6).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let z: f64 = x.iter().map(|v| v.exp()).sum();
        let oracle: Vec<f64> = x.iter().map(|v| v.exp() / z).collect();
        let mut t = Tape::new();
        let n = t.constant(vec![6], x);
        let s = t.softmax(n, 0);
        assert_close(t.value(s), &oracle, 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..20).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let mut t = Tape::new();
        let n = t.constant(vec![4, 5], x);
        let s = t.softmax(n, 1);
        for r in 0..4 {
            let row = &t.value(s)[r * 5..(r + 1) * 5];
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn layer_norm_two_point_and_constant_rows() {
        let mut t = Tape::new();
        let gain = t.constant(vec![2], vec![1.0, 1.0]);
        let bias = t.constant(vec![2], vec![0.0, 0.0]);

        let x = t.constant(vec![1, 2], vec![1.0, 3.0]);
        let y = t.layer_norm(x, gain, bias, 1e-12);
        assert_close(t.value(y), &[-1.0, 1.0], 1e-5);

        let c = t.constant(vec![1, 2], vec![5.0, 5.0]);
        let yc = t.layer_norm(c, gain, bias, 1e-5);
        assert_close(t.value(yc), &[0.0, 0.0], 1e-9);
    }

    #[test]
    fn layer_norm_output_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let d = 16;
        let x: Vec<f64> = (0..3 * d).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let mut t = Tape::new();
        let n = t.constant(vec![3, d], x);
        let gain = t.constant(vec![d], vec![1.0; d]);
        let bias = t.constant(vec![d], vec![0.0; d]);
        let y = t.layer_norm(n, gain, bias, 1e-12);
        for r in 0..3 {
            let row = &t.value(y)[r * d..(r + 1) * d];
            let (mean, var) = super::row_mean_var(row);
            assert!(mean.abs() < 1e-9, "row mean {mean}");
            assert!((var - 1.0).abs() < 1e-6, "row var {var}");
        }
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut t = Tape::new();
        let x = Tensor::from_vec(vec![3], vec![1.0, -2.0, 0.5]).unwrap().with_grad();
        let n = t.leaf(&x);
        let loss = t.sum(n);
        t.backward(loss);
        assert_eq!(t.grad(n), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_quadratic_gives_two_x() {
        let mut t = Tape::new();
        let x = Tensor::from_vec(vec![3], vec![1.0, -2.0, 0.5]).unwrap().with_grad();
        let n = t.leaf(&x);
        let sq = t.mul(n, n);
        let loss = t.sum(sq);
        t.backward(loss);
        assert_close(t.grad(n), &[2.0, -4.0, 1.0], 1e-12);
    }

    #[test]
    #[should_panic(expected = "loss must be scalar")]
    fn backward_rejects_non_scalar_loss() {
        let mut t = Tape::new();
        let x = t.constant(vec![2], vec![1.0, 2.0]);
        t.backward(x);
    }

    #[test]
    fn unused_parameters_keep_zero_gradient() {
        let mut t = Tape::new();
        let used = Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap().with_grad();
        let unused = Tensor::from_vec(vec![2], vec![3.0, 4.0]).unwrap().with_grad();
        let a = t.leaf(&used);
        let b = t.leaf(&unused);
        let loss = t.sum(a);
        t.backward(loss);
        assert_eq!(t.grad(b), &[0.0, 0.0]);
    }

    /// Runs one op through the tape twice: analytically and by central
    /// differences on a scalar readout.
    fn gradcheck<F>(build: F, x0: &[f64], tol: f64)
    where
        F: Fn(&mut Tape, NodeId) -> NodeId,
    {
        let forward = |x: &[f64]| {
            let mut t = Tape::new();
            let n = t.constant(vec![x.len()], x.to_vec());
            let out = build(&mut t, n);
            t.value(out)[0]
        };
        let numeric = central_difference_gradient(forward, x0, 1e-5);

        let mut t = Tape::new();
        let leaf = Tensor::from_vec(vec![x0.len()], x0.to_vec()).unwrap().with_grad();
        let n = t.leaf(&leaf);
        let out = build(&mut t, n);
        t.backward(out);
        let analytic = t.grad(n);

        let denom = analytic
            .iter()
            .chain(&numeric)
            .fold(1e-8_f64, |m, v| m.max(v.abs()));
        for (a, g) in analytic.iter().zip(&numeric) {
            assert!((a - g).abs() / denom < tol, "{a} vs {g}");
        }
    }

    #[test]
    fn per_op_gradients_match_finite_differences() {
        let x0: Vec<f64> = vec![0.3, -1.2, 0.7, 2.1, -0.4, 0.05];

        gradcheck(
            |t, n| {
                let s = t.softmax(n, 0);
                let w = t.constant(vec![6], vec![0.1, -0.7, 0.4, 1.3, -0.2, 0.6]);
                let p = t.mul(s, w);
                t.sum(p)
            },
            &x0,
            1e-4,
        );
        gradcheck(
            |t, n| {
                let g = t.gelu(n);
                t.sum(g)
            },
            &x0,
            1e-4,
        );
        gradcheck(
            |t, n| {
                let sq = t.mul(n, n);
                t.mean(sq)
            },
            &x0,
            1e-4,
        );
    }

    #[test]
    fn matmul_layernorm_chain_gradient() {
        let x0: Vec<f64> = vec![0.5, -0.3, 0.8, 0.1, -0.9, 0.25];
        let w: Vec<f64> = vec![0.2, -0.5, 0.7, 0.3, -0.1, 0.9];

        let forward = |x: &[f64]| {
            let mut t = Tape::new();
            let n = t.constant(vec![2, 3], x.to_vec());
            let wn = t.constant(vec![3, 3], {
                let mut v = w.clone();
                v.extend_from_slice(&[0.4, -0.6, 0.2]);
                v
            });
            let gain = t.constant(vec![3], vec![1.1, 0.9, 1.0]);
            let bias = t.constant(vec![3], vec![0.0, 0.1, -0.1]);
            let y = t.matmul(n, wn);
            let ln = t.layer_norm(y, gain, bias, 1e-6);
            let s = t.sum(ln);
            t.value(s)[0]
        };
        let numeric = central_difference_gradient(forward, &x0, 1e-5);

        let mut t = Tape::new();
        let leaf = Tensor::from_vec(vec![2, 3], x0.clone()).unwrap().with_grad();
        let n = t.leaf(&leaf);
        let wn = t.constant(vec![3, 3], {
            let mut v = w.clone();
            v.extend_from_slice(&[0.4, -0.6, 0.2]);
            v
        });
        let gain = t.constant(vec![3], vec![1.1, 0.9, 1.0]);
        let bias = t.constant(vec![3], vec![0.0, 0.1, -0.1]);
        let y = t.matmul(n, wn);
        let ln = t.layer_norm(y, gain, bias, 1e-6);
        let s = t.sum(ln);
        t.backward(s);
        for (a, g) in t.grad(n).iter().zip(&numeric) {
            assert!((a - g).abs() < 1e-4, "{a} vs {g}");
        }
    }

    #[test]
    fn adam_zero_gradient_leaves_parameters_unchanged() {
        let mut params = vec![Tensor::from_vec(vec![2], vec![1.0, -2.0]).unwrap()];
        let grads = vec![vec![0.0, 0.0]];
        let mut adam = AdamState::new(0.1);
        adam.step(&mut params, &grads);
        assert_eq!(params[0].data(), &[1.0, -2.0]);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn adam_descends_against_gradient_sign() {
        let mut params = vec![Tensor::from_vec(vec![1], vec![0.0]).unwrap()];
        let mut adam = AdamState::new(0.01);
        for _ in 0..50 {
            adam.step(&mut params, &[vec![1.0]]);
        }
        assert!(params[0].data()[0] < -0.1, "constant +grad must move param down");
    }

    #[test]
    fn adam_single_step_matches_hand_formula() {
        // Hand-computed update rule on one element, independent of the
        // implementation: m=(1-b1)g, v=(1-b2)g^2, mhat=m/(1-b1),
        // vhat=v/(1-b2), p -= lr*mhat/(sqrt(vhat)+eps).
        let (lr, b1, b2, eps, g, p0) = (0.1, 0.9, 0.999, 1e-8, 0.5_f64, 1.0_f64);
        let mhat = ((1.0 - b1) * g) / (1.0 - b1);
        let vhat = ((1.0 - b2) * g * g) / (1.0 - b2);
        let expected = p0 - lr * mhat / (vhat.sqrt() + eps);

        let mut params = vec![Tensor::from_vec(vec![1], vec![p0]).unwrap()];
        let mut adam = AdamState::new(lr);
        adam.step(&mut params, &[vec![g]]);
        assert!((params[0].data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    #[should_panic(expected = "non-finite")]
    fn non_finite_result_is_a_hard_error() {
        let mut t = Tape::new();
        let a = t.constant(vec![1], vec![1e308]);
        let b = t.constant(vec![1], vec![1e308]);
        t.add(a, b); // overflows to +inf
    }
}
