use std::collections::BTreeMap;

use super::linalg::{gemm, Trans};
use super::params::{ParamId, ParamKind, ParamStore};
use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel normalization statistics captured at forward time.
pub(crate) enum BnStats {
    /// Normalized with batch statistics; full batch-norm backward.
    Batch { inv_std: Vec<f64> },
    /// Normalized with fixed statistics (running stats or pass-through);
    /// backward is per-channel affine.
    Fixed { inv_std: Vec<f64> },
}

enum Op {
    Leaf,
    Param(ParamId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// y = a * x + b
    Affine { x: NodeId, a: f64, b: f64 },
    /// y = x * mask (dropout and similar fixed element-wise scaling)
    MulConst { x: NodeId, mask: Tensor },
    /// (m,k) @ (k,n)
    Matmul { a: NodeId, b: NodeId },
    /// (B,F) + (F,)
    AddBias { x: NodeId, b: NodeId },
    Relu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    },
    MaxPool {
        x: NodeId,
        k: usize,
        stride: usize,
        pad: usize,
        argmax: Vec<usize>,
    },
    AvgPool {
        x: NodeId,
        k: usize,
        stride: usize,
    },
    /// Global average pool (B,C,H,W) -> (B,C)
    Gap { x: NodeId },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        x_hat: Tensor,
        stats: BnStats,
    },
    /// Concatenation along axis 1.
    Concat { xs: Vec<NodeId>, sizes: Vec<usize> },
    /// Mean over all elements -> scalar.
    MeanAll(NodeId),
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Gradients keyed by parameter id after a backward pass.
#[derive(Default)]
pub struct Grads {
    map: BTreeMap<usize, Tensor>,
}

impl Grads {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.map.get(&id.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.map.iter().map(|(&i, t)| (ParamId(i), t))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Eagerly-evaluated tape: every op computes its value on insertion and
/// records what `backward` needs.
pub struct Graph {
    nodes: Vec<Node>,
    param_nodes: BTreeMap<usize, NodeId>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            param_nodes: BTreeMap::new(),
        }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        debug_assert!(value.all_finite() || matches!(op, Op::Leaf), "non-finite op output");
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            needs_grad,
        });
        id
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Inserts (or reuses) the leaf node for a parameter. Reuse makes
    /// gradients accumulate when a parameter participates several times in
    /// one forward pass (shared extractors in the sequence model).
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&id.0) {
            return n;
        }
        let needs = store.kind(id) == ParamKind::Trainable;
        let node = self.push(store.value(id).clone(), Op::Param(id), needs);
        self.param_nodes.insert(id.0, node);
        node
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shape");
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::from_vec(self.value(a).shape(), data);
        let needs = self.needs(a) || self.needs(b);
        self.push(t, Op::Add(a, b), needs)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "sub shape");
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let t = Tensor::from_vec(self.value(a).shape(), data);
        let needs = self.needs(a) || self.needs(b);
        self.push(t, Op::Sub(a, b), needs)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "mul shape");
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::from_vec(self.value(a).shape(), data);
        let needs = self.needs(a) || self.needs(b);
        self.push(t, Op::Mul(a, b), needs)
    }

    /// y = a*x + b, elementwise with scalars a, b.
    pub fn affine(&mut self, x: NodeId, a: f64, b: f64) -> NodeId {
        let t = self.value(x).map(|v| a * v + b);
        let needs = self.needs(x);
        self.push(t, Op::Affine { x, a, b }, needs)
    }

    pub fn mul_const(&mut self, x: NodeId, mask: Tensor) -> NodeId {
        assert_eq!(self.value(x).shape(), mask.shape(), "mul_const shape");
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(mask.data())
            .map(|(x, m)| x * m)
            .collect();
        let t = Tensor::from_vec(mask.shape(), data);
        let needs = self.needs(x);
        self.push(t, Op::MulConst { x, mask }, needs)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.rank(), 2, "matmul lhs rank");
        assert_eq!(bv.rank(), 2, "matmul rhs rank");
        let (m, k) = (av.dim(0), av.dim(1));
        let (k2, n) = (bv.dim(0), bv.dim(1));
        assert_eq!(k, k2, "matmul inner dim: {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        gemm(Trans::N, Trans::N, m, k, n, 1.0, av.data(), bv.data(), 0.0, &mut out);
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::from_vec(&[m, n], out), Op::Matmul { a, b }, needs)
    }

    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let (xv, bv) = (self.value(x), self.value(b));
        assert_eq!(xv.rank(), 2, "add_bias lhs rank");
        assert_eq!(bv.rank(), 1, "add_bias bias rank");
        let (rows, cols) = (xv.dim(0), xv.dim(1));
        assert_eq!(cols, bv.dim(0), "add_bias width");
        let mut data = xv.data().to_vec();
        for r in 0..rows {
            for c in 0..cols {
                data[r * cols + c] += bv.data()[c];
            }
        }
        let needs = self.needs(x) || self.needs(b);
        self.push(Tensor::from_vec(&[rows, cols], data), Op::AddBias { x, b }, needs)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x).map(|v| v.max(0.0));
        let needs = self.needs(x);
        self.push(t, Op::Relu(x), needs)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x).map(|v| 1.0 / (1.0 + (-v).exp()));
        let needs = self.needs(x);
        self.push(t, Op::Sigmoid(x), needs)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x).map(f64::tanh);
        let needs = self.needs(x);
        self.push(t, Op::Tanh(x), needs)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let n = v.len() as f64;
        let t = Tensor::scalar(v.data().iter().sum::<f64>() / n);
        let needs = self.needs(x);
        self.push(t, Op::MeanAll(x), needs)
    }

    pub fn concat(&mut self, xs: &[NodeId]) -> NodeId {
        assert!(!xs.is_empty(), "concat of zero tensors");
        let rank = self.value(xs[0]).rank();
        assert!(rank >= 2, "concat expects batched tensors");
        let batch = self.value(xs[0]).dim(0);
        let inner: usize = self.value(xs[0]).shape()[2..].iter().product();
        let mut sizes = Vec::with_capacity(xs.len());
        let mut total_c = 0;
        for &x in xs {
            let v = self.value(x);
            assert_eq!(v.dim(0), batch, "concat batch");
            assert_eq!(
                v.shape()[2..].iter().product::<usize>(),
                inner,
                "concat trailing dims"
            );
            sizes.push(v.dim(1));
            total_c += v.dim(1);
        }
        let mut shape = self.value(xs[0]).shape().to_vec();
        shape[1] = total_c;
        let mut data = vec![0.0; batch * total_c * inner];
        for b in 0..batch {
            let mut offset = 0;
            for (&x, &c) in xs.iter().zip(&sizes) {
                let block = c * inner;
                let src = &self.value(x).data()[b * block..(b + 1) * block];
                data[b * total_c * inner + offset..b * total_c * inner + offset + block]
                    .copy_from_slice(src);
                offset += block;
            }
        }
        let needs = xs.iter().any(|&x| self.needs(x));
        self.push(
            Tensor::from_vec(&shape, data),
            Op::Concat {
                xs: xs.to_vec(),
                sizes,
            },
            needs,
        )
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> NodeId {
        let (xv, wv) = (self.value(x), self.value(w));
        assert_eq!(xv.rank(), 4, "conv2d input rank");
        assert_eq!(wv.rank(), 4, "conv2d weight rank");
        let (batch, c_in, h, wd) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
        let (c_out, c_in_w, kh, kw) = (wv.dim(0), wv.dim(1), wv.dim(2), wv.dim(3));
        assert_eq!(c_in, c_in_w, "conv2d channels: input {c_in}, weight {c_in_w}");
        assert_eq!(kh, kw, "square kernels only");
        let k = kh;
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let ck = c_in * k * k;
        let mut out = vec![0.0; batch * c_out * oh * ow];
        let mut col = vec![0.0; ck * oh * ow];
        for s in 0..batch {
            let xs = &xv.data()[s * c_in * h * wd..(s + 1) * c_in * h * wd];
            im2col(xs, c_in, h, wd, k, stride, pad, oh, ow, &mut col);
            let dst = &mut out[s * c_out * oh * ow..(s + 1) * c_out * oh * ow];
            gemm(
                Trans::N,
                Trans::N,
                c_out,
                ck,
                oh * ow,
                1.0,
                wv.data(),
                &col,
                0.0,
                dst,
            );
        }
        if let Some(bid) = b {
            let bv = self.value(bid);
            assert_eq!(bv.shape(), &[c_out], "conv2d bias shape");
            let plane = oh * ow;
            for s in 0..batch {
                for c in 0..c_out {
                    let base = (s * c_out + c) * plane;
                    let bias = bv.data()[c];
                    for v in &mut out[base..base + plane] {
                        *v += bias;
                    }
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || b.map(|b| self.needs(b)).unwrap_or(false);
        self.push(
            Tensor::from_vec(&[batch, c_out, oh, ow], out),
            Op::Conv2d { x, w, b, stride, pad },
            needs,
        )
    }

    pub fn maxpool2d(&mut self, x: NodeId, k: usize, stride: usize, pad: usize) -> NodeId {
        let xv = self.value(x);
        assert_eq!(xv.rank(), 4, "maxpool input rank");
        let (batch, c, h, w) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0; batch * c * oh * ow];
        let mut argmax = vec![0usize; batch * c * oh * ow];
        for s in 0..batch {
            for ch in 0..c {
                let base = (s * c + ch) * h * w;
                for i in 0..oh {
                    for j in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0;
                        for di in 0..k {
                            for dj in 0..k {
                                let hi = (i * stride + di) as isize - pad as isize;
                                let wj = (j * stride + dj) as isize - pad as isize;
                                if hi < 0 || wj < 0 || hi >= h as isize || wj >= w as isize {
                                    continue;
                                }
                                let idx = base + hi as usize * w + wj as usize;
                                if xv.data()[idx] > best {
                                    best = xv.data()[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        let o = (s * c + ch) * oh * ow + i * ow + j;
                        out[o] = best;
                        argmax[o] = best_idx;
                    }
                }
            }
        }
        let needs = self.needs(x);
        self.push(
            Tensor::from_vec(&[batch, c, oh, ow], out),
            Op::MaxPool {
                x,
                k,
                stride,
                pad,
                argmax,
            },
            needs,
        )
    }

    pub fn avgpool2d(&mut self, x: NodeId, k: usize, stride: usize) -> NodeId {
        let xv = self.value(x);
        assert_eq!(xv.rank(), 4, "avgpool input rank");
        let (batch, c, h, w) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
        let oh = (h - k) / stride + 1;
        let ow = (w - k) / stride + 1;
        let norm = 1.0 / (k * k) as f64;
        let mut out = vec![0.0; batch * c * oh * ow];
        for s in 0..batch {
            for ch in 0..c {
                let base = (s * c + ch) * h * w;
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = 0.0;
                        for di in 0..k {
                            for dj in 0..k {
                                acc += xv.data()[base + (i * stride + di) * w + j * stride + dj];
                            }
                        }
                        out[(s * c + ch) * oh * ow + i * ow + j] = acc * norm;
                    }
                }
            }
        }
        let needs = self.needs(x);
        self.push(
            Tensor::from_vec(&[batch, c, oh, ow], out),
            Op::AvgPool { x, k, stride },
            needs,
        )
    }

    pub fn gap(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        assert_eq!(xv.rank(), 4, "gap input rank");
        let (batch, c, h, w) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
        let plane = h * w;
        let norm = 1.0 / plane as f64;
        let mut out = vec![0.0; batch * c];
        for s in 0..batch {
            for ch in 0..c {
                let base = (s * c + ch) * plane;
                out[s * c + ch] = xv.data()[base..base + plane].iter().sum::<f64>() * norm;
            }
        }
        let needs = self.needs(x);
        self.push(Tensor::from_vec(&[batch, c], out), Op::Gap { x }, needs)
    }

    /// Batch normalization over the channel axis (axis 1). `fixed_stats`
    /// carries (mean, var) when normalizing with running or pass-through
    /// statistics; `None` computes batch statistics and returns them
    /// (biased variance) so the caller can update its running buffers.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
        fixed_stats: Option<(Vec<f64>, Vec<f64>)>,
    ) -> (NodeId, Option<(Vec<f64>, Vec<f64>)>) {
        let xv = self.value(x);
        assert!(xv.rank() >= 2, "batch_norm input rank");
        let batch = xv.dim(0);
        let c = xv.dim(1);
        let inner: usize = xv.shape()[2..].iter().product();
        let n = batch * inner;
        assert_eq!(self.value(gamma).shape(), &[c], "gamma shape");
        assert_eq!(self.value(beta).shape(), &[c], "beta shape");

        let (mean, var, batch_stats) = match &fixed_stats {
            Some((m, v)) => {
                assert_eq!(m.len(), c);
                assert_eq!(v.len(), c);
                (m.clone(), v.clone(), None)
            }
            None => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut acc = 0.0;
                    for b in 0..batch {
                        let base = (b * c + ch) * inner;
                        acc += xv.data()[base..base + inner].iter().sum::<f64>();
                    }
                    mean[ch] = acc / n as f64;
                    let mut acc2 = 0.0;
                    for b in 0..batch {
                        let base = (b * c + ch) * inner;
                        for &v in &xv.data()[base..base + inner] {
                            let d = v - mean[ch];
                            acc2 += d * d;
                        }
                    }
                    var[ch] = acc2 / n as f64;
                }
                let stats = Some((mean.clone(), var.clone()));
                (mean, var, stats)
            }
        };

        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data().to_vec();
        let mut x_hat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for b in 0..batch {
            for ch in 0..c {
                let base = (b * c + ch) * inner;
                for i in 0..inner {
                    let xh = (xv.data()[base + i] - mean[ch]) * inv_std[ch];
                    x_hat[base + i] = xh;
                    out[base + i] = gv[ch] * xh + bv[ch];
                }
            }
        }
        let stats = match batch_stats {
            Some(_) => BnStats::Batch {
                inv_std: inv_std.clone(),
            },
            None => BnStats::Fixed {
                inv_std: inv_std.clone(),
            },
        };
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let node = self.push(
            Tensor::from_vec(xv.shape(), out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                x_hat: Tensor::from_vec(self.value(x).shape(), x_hat),
                stats,
            },
            needs,
        );
        (node, batch_stats)
    }

    fn accumulate(&mut self, id: NodeId, delta: &[f64]) {
        let node = &mut self.nodes[id.0];
        let grad = node
            .grad
            .get_or_insert_with(|| Tensor::zeros(node.value.shape()));
        debug_assert_eq!(grad.len(), delta.len());
        for (g, d) in grad.data_mut().iter_mut().zip(delta) {
            *g += d;
        }
    }

    /// Reverse pass from a scalar loss. Returns gradients for every
    /// trainable parameter that participated in the graph.
    pub fn backward(&mut self, loss: NodeId, store: &ParamStore) -> Grads {
        assert_eq!(self.value(loss).len(), 1, "backward expects a scalar loss");
        self.nodes[loss.0].grad = Some(Tensor::scalar(1.0));

        for idx in (0..self.nodes.len()).rev() {
            if self.nodes[idx].grad.is_none() || !self.nodes[idx].needs_grad {
                continue;
            }
            self.step_backward(NodeId(idx));
        }

        let mut grads = Grads::default();
        for (&pid, &node) in &self.param_nodes {
            if store.kind(ParamId(pid)) != ParamKind::Trainable {
                continue;
            }
            if let Some(g) = self.nodes[node.0].grad.take() {
                grads.map.insert(pid, g);
            }
        }
        grads
    }

    fn step_backward(&mut self, id: NodeId) {
        // Take the gradient out to appease the borrow checker; ops only
        // accumulate into *other* (earlier) nodes.
        let g = self.nodes[id.0].grad.take().expect("grad present");
        let gd = g.data();
        // Swap the op out temporarily for the same reason.
        let op = std::mem::replace(&mut self.nodes[id.0].op, Op::Leaf);
        match &op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                if self.needs(*a) {
                    self.accumulate(*a, gd);
                }
                if self.needs(*b) {
                    self.accumulate(*b, gd);
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    self.accumulate(*a, gd);
                }
                if self.needs(*b) {
                    let neg: Vec<f64> = gd.iter().map(|v| -v).collect();
                    self.accumulate(*b, &neg);
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let d: Vec<f64> = gd
                        .iter()
                        .zip(self.value(*b).data())
                        .map(|(g, y)| g * y)
                        .collect();
                    self.accumulate(*a, &d);
                }
                if self.needs(*b) {
                    let d: Vec<f64> = gd
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(g, x)| g * x)
                        .collect();
                    self.accumulate(*b, &d);
                }
            }
            Op::Affine { x, a, .. } => {
                if self.needs(*x) {
                    let d: Vec<f64> = gd.iter().map(|g| g * a).collect();
                    self.accumulate(*x, &d);
                }
            }
            Op::MulConst { x, mask } => {
                if self.needs(*x) {
                    let d: Vec<f64> = gd.iter().zip(mask.data()).map(|(g, m)| g * m).collect();
                    self.accumulate(*x, &d);
                }
            }
            Op::Matmul { a, b } => {
                let (m, k) = (self.value(*a).dim(0), self.value(*a).dim(1));
                let n = self.value(*b).dim(1);
                if self.needs(*a) {
                    // dA = G @ B^T : (m,n) x (n,k)
                    let mut da = vec![0.0; m * k];
                    gemm(
                        Trans::N,
                        Trans::T,
                        m,
                        n,
                        k,
                        1.0,
                        gd,
                        self.value(*b).data(),
                        0.0,
                        &mut da,
                    );
                    self.accumulate(*a, &da);
                }
                if self.needs(*b) {
                    // dB = A^T @ G : (k,m) x (m,n)
                    let mut db = vec![0.0; k * n];
                    gemm(
                        Trans::T,
                        Trans::N,
                        k,
                        m,
                        n,
                        1.0,
                        self.value(*a).data(),
                        gd,
                        0.0,
                        &mut db,
                    );
                    self.accumulate(*b, &db);
                }
            }
            Op::AddBias { x, b } => {
                let cols = self.value(*b).dim(0);
                if self.needs(*x) {
                    self.accumulate(*x, gd);
                }
                if self.needs(*b) {
                    let rows = gd.len() / cols;
                    let mut db = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            db[c] += gd[r * cols + c];
                        }
                    }
                    self.accumulate(*b, &db);
                }
            }
            Op::Relu(x) => {
                if self.needs(*x) {
                    let d: Vec<f64> = gd
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                        .collect();
                    self.accumulate(*x, &d);
                }
            }
            Op::Sigmoid(x) => {
                if self.needs(*x) {
                    let d: Vec<f64> = gd
                        .iter()
                        .zip(self.nodes[id.0].value.data())
                        .map(|(g, y)| g * y * (1.0 - y))
                        .collect();
                    self.accumulate(*x, &d);
                }
            }
            Op::Tanh(x) => {
                if self.needs(*x) {
                    let d: Vec<f64> = gd
                        .iter()
                        .zip(self.nodes[id.0].value.data())
                        .map(|(g, y)| g * (1.0 - y * y))
                        .collect();
                    self.accumulate(*x, &d);
                }
            }
            Op::MeanAll(x) => {
                if self.needs(*x) {
                    let n = self.value(*x).len();
                    let k = gd[0] / n as f64;
                    let d = vec![k; n];
                    self.accumulate(*x, &d);
                }
            }
            Op::Concat { xs, sizes } => {
                let batch = self.nodes[id.0].value.dim(0);
                let total_c = self.nodes[id.0].value.dim(1);
                let inner: usize = self.nodes[id.0].value.shape()[2..].iter().product();
                let mut offset = 0;
                for (&x, &c) in xs.iter().zip(sizes) {
                    let block = c * inner;
                    if self.needs(x) {
                        let mut d = vec![0.0; batch * block];
                        for b in 0..batch {
                            let src = b * total_c * inner + offset;
                            d[b * block..(b + 1) * block]
                                .copy_from_slice(&gd[src..src + block]);
                        }
                        self.accumulate(x, &d);
                    }
                    offset += block;
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                self.conv2d_backward(id, gd, *x, *w, *b, *stride, *pad);
            }
            Op::MaxPool { x, argmax, .. } => {
                if self.needs(*x) {
                    let mut d = vec![0.0; self.value(*x).len()];
                    for (o, &src) in argmax.iter().enumerate() {
                        d[src] += gd[o];
                    }
                    self.accumulate(*x, &d);
                }
            }
            Op::AvgPool { x, k, stride } => {
                if self.needs(*x) {
                    let xv = self.value(*x);
                    let (batch, c, h, w) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
                    let ov = &self.nodes[id.0].value;
                    let (oh, ow) = (ov.dim(2), ov.dim(3));
                    let norm = 1.0 / (k * k) as f64;
                    let mut d = vec![0.0; xv.len()];
                    for s in 0..batch {
                        for ch in 0..c {
                            let ibase = (s * c + ch) * h * w;
                            let obase = (s * c + ch) * oh * ow;
                            for i in 0..oh {
                                for j in 0..ow {
                                    let gval = gd[obase + i * ow + j] * norm;
                                    for di in 0..*k {
                                        for dj in 0..*k {
                                            d[ibase + (i * stride + di) * w + j * stride + dj] +=
                                                gval;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    self.accumulate(*x, &d);
                }
            }
            Op::Gap { x } => {
                if self.needs(*x) {
                    let xv = self.value(*x);
                    let (batch, c, h, w) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
                    let plane = h * w;
                    let norm = 1.0 / plane as f64;
                    let mut d = vec![0.0; xv.len()];
                    for s in 0..batch {
                        for ch in 0..c {
                            let gval = gd[s * c + ch] * norm;
                            let base = (s * c + ch) * plane;
                            for v in &mut d[base..base + plane] {
                                *v = gval;
                            }
                        }
                    }
                    self.accumulate(*x, &d);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                x_hat,
                stats,
            } => {
                let c = self.value(*gamma).dim(0);
                let batch = x_hat.dim(0);
                let inner: usize = x_hat.shape()[2..].iter().product();
                let n = (batch * inner) as f64;
                let gv = self.value(*gamma).data().to_vec();

                if self.needs(*beta) {
                    let mut db = vec![0.0; c];
                    for b in 0..batch {
                        for ch in 0..c {
                            let base = (b * c + ch) * inner;
                            db[ch] += gd[base..base + inner].iter().sum::<f64>();
                        }
                    }
                    self.accumulate(*beta, &db);
                }
                if self.needs(*gamma) {
                    let mut dg = vec![0.0; c];
                    for b in 0..batch {
                        for ch in 0..c {
                            let base = (b * c + ch) * inner;
                            for i in 0..inner {
                                dg[ch] += gd[base + i] * x_hat.data()[base + i];
                            }
                        }
                    }
                    self.accumulate(*gamma, &dg);
                }
                if self.needs(*x) {
                    match stats {
                        BnStats::Fixed { inv_std } => {
                            let mut d = vec![0.0; x_hat.len()];
                            for b in 0..batch {
                                for ch in 0..c {
                                    let scale = gv[ch] * inv_std[ch];
                                    let base = (b * c + ch) * inner;
                                    for i in 0..inner {
                                        d[base + i] = gd[base + i] * scale;
                                    }
                                }
                            }
                            self.accumulate(*x, &d);
                        }
                        BnStats::Batch { inv_std } => {
                            // dx = inv/N * gamma * (N*g - sum(g) - x_hat * sum(g*x_hat))
                            let mut sum_g = vec![0.0; c];
                            let mut sum_gx = vec![0.0; c];
                            for b in 0..batch {
                                for ch in 0..c {
                                    let base = (b * c + ch) * inner;
                                    for i in 0..inner {
                                        sum_g[ch] += gd[base + i];
                                        sum_gx[ch] += gd[base + i] * x_hat.data()[base + i];
                                    }
                                }
                            }
                            let mut d = vec![0.0; x_hat.len()];
                            for b in 0..batch {
                                for ch in 0..c {
                                    let k = gv[ch] * inv_std[ch] / n;
                                    let base = (b * c + ch) * inner;
                                    for i in 0..inner {
                                        d[base + i] = k
                                            * (n * gd[base + i]
                                                - sum_g[ch]
                                                - x_hat.data()[base + i] * sum_gx[ch]);
                                    }
                                }
                            }
                            self.accumulate(*x, &d);
                        }
                    }
                }
            }
        }
        self.nodes[id.0].op = op;
        self.nodes[id.0].grad = Some(g);
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &mut self,
        id: NodeId,
        gd: &[f64],
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) {
        let xv = self.value(x);
        let wv = self.value(w);
        let (batch, c_in, h, wd) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
        let (c_out, _, k, _) = (wv.dim(0), wv.dim(1), wv.dim(2), wv.dim(3));
        let ov = &self.nodes[id.0].value;
        let (oh, ow) = (ov.dim(2), ov.dim(3));
        let ck = c_in * k * k;
        let plane = oh * ow;

        let needs_b = b.map(|bid| self.needs(bid)).unwrap_or(false);
        let db = if needs_b {
            let mut db = vec![0.0; c_out];
            for s in 0..batch {
                for c in 0..c_out {
                    let base = (s * c_out + c) * plane;
                    db[c] += gd[base..base + plane].iter().sum::<f64>();
                }
            }
            db
        } else {
            Vec::new()
        };

        let needs_w = self.needs(w);
        let needs_x = self.needs(x);
        if !needs_w && !needs_x {
            if needs_b {
                self.accumulate(b.unwrap(), &db);
            }
            return;
        }

        let mut dw = if needs_w { vec![0.0; c_out * ck] } else { Vec::new() };
        let mut dx = if needs_x {
            vec![0.0; batch * c_in * h * wd]
        } else {
            Vec::new()
        };
        let mut col = vec![0.0; ck * plane];
        let mut dcol = vec![0.0; ck * plane];
        for s in 0..batch {
            let g_s = &gd[s * c_out * plane..(s + 1) * c_out * plane];
            if needs_w {
                let xs = &xv.data()[s * c_in * h * wd..(s + 1) * c_in * h * wd];
                im2col(xs, c_in, h, wd, k, stride, pad, oh, ow, &mut col);
                // dW += G_s @ col^T : (c_out, plane) x (plane, ck)
                gemm(Trans::N, Trans::T, c_out, plane, ck, 1.0, g_s, &col, 1.0, &mut dw);
            }
            if needs_x {
                // dcol = W^T @ G_s : (ck, c_out) x (c_out, plane)
                gemm(
                    Trans::T,
                    Trans::N,
                    ck,
                    c_out,
                    plane,
                    1.0,
                    wv.data(),
                    g_s,
                    0.0,
                    &mut dcol,
                );
                let dst = &mut dx[s * c_in * h * wd..(s + 1) * c_in * h * wd];
                col2im(&dcol, c_in, h, wd, k, stride, pad, oh, ow, dst);
            }
        }
        if needs_b {
            self.accumulate(b.unwrap(), &db);
        }
        if needs_w {
            self.accumulate(w, &dw);
        }
        if needs_x {
            self.accumulate(x, &dx);
        }
    }
}

/// Unrolls conv patches: `col[(c,ki,kj), (i,j)] = x[c, i*s+ki-p, j*s+kj-p]`
/// with zero padding.
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    col: &mut [f64],
) {
    debug_assert_eq!(col.len(), c_in * k * k * oh * ow);
    let plane = oh * ow;
    for c in 0..c_in {
        for ki in 0..k {
            for kj in 0..k {
                let row = ((c * k + ki) * k + kj) * plane;
                for i in 0..oh {
                    let hi = (i * stride + ki) as isize - pad as isize;
                    let dst = row + i * ow;
                    if hi < 0 || hi >= h as isize {
                        col[dst..dst + ow].fill(0.0);
                        continue;
                    }
                    let src_row = c * h * w + hi as usize * w;
                    for j in 0..ow {
                        let wj = (j * stride + kj) as isize - pad as isize;
                        col[dst + j] = if wj < 0 || wj >= w as isize {
                            0.0
                        } else {
                            x[src_row + wj as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Transpose of `im2col`: accumulates column gradients back into the image.
#[allow(clippy::too_many_arguments)]
fn col2im(
    col: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    x: &mut [f64],
) {
    let plane = oh * ow;
    for c in 0..c_in {
        for ki in 0..k {
            for kj in 0..k {
                let row = ((c * k + ki) * k + kj) * plane;
                for i in 0..oh {
                    let hi = (i * stride + ki) as isize - pad as isize;
                    if hi < 0 || hi >= h as isize {
                        continue;
                    }
                    let dst_row = c * h * w + hi as usize * w;
                    for j in 0..ow {
                        let wj = (j * stride + kj) as isize - pad as isize;
                        if wj < 0 || wj >= w as isize {
                            continue;
                        }
                        x[dst_row + wj as usize] += col[row + i * ow + j];
                    }
                }
            }
        }
    }
}
