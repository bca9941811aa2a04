//! Reverse-mode tape.
//!
//! A `Graph` is an append-only arena of nodes recorded during the forward
//! pass. Appending preserves topological order (inputs always precede
//! their consumers), so `backward` is a single reverse sweep that visits
//! each node exactly once. Saved intermediates (dropout masks,
//! normalization statistics) live inside the recorded op.

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::scalar::{normal_cdf, normal_pdf, Real};
use crate::tensor::{matmul_raw, transpose_raw, Tensor};

/// Handle to a node in one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op<T> {
    Leaf,
    Matmul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    /// a[m,n] + bias[n] broadcast over rows.
    AddRow { a: NodeId, bias: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: T },
    Transpose { a: NodeId },
    SliceCols { a: NodeId, start: usize, len: usize },
    ConcatCols { parts: Vec<NodeId> },
    Gelu { a: NodeId },
    SoftmaxRows { a: NodeId },
    LayerNorm { a: NodeId, gamma: NodeId, beta: NodeId, mean: Vec<T>, inv_std: Vec<T> },
    GroupNorm { a: NodeId, gamma: NodeId, beta: NodeId, groups: usize, mean: Vec<T>, inv_std: Vec<T> },
    Conv1d { x: NodeId, w: NodeId, b: NodeId },
    Dropout { a: NodeId, mask: Vec<T> },
    SumAll { a: NodeId },
    MeanAll { a: NodeId },
}

struct Node<T> {
    tensor: Tensor<T>,
    op: Op<T>,
}

/// Recording tape plus value arena for one forward/backward pair.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, tensor: Tensor<T>, op: Op<T>) -> NodeId {
        debug_assert!(
            tensor.data().iter().all(|v| v.is_finite()),
            "non-finite value produced by forward op at node {}",
            self.nodes.len()
        );
        self.nodes.push(Node { tensor, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Register a non-trainable leaf (input data, positional encoding, ...).
    pub fn input(&mut self, mut tensor: Tensor<T>) -> NodeId {
        tensor.requires_grad = false;
        tensor.grad = None;
        self.push(tensor, Op::Leaf)
    }

    /// Register a trainable leaf; `backward` will populate its grad slot.
    pub fn param(&mut self, mut tensor: Tensor<T>) -> NodeId {
        tensor.requires_grad = true;
        tensor.grad = None;
        self.push(tensor, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].tensor
    }

    /// Gradient of a leaf after [`Graph::backward`] ran.
    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.nodes[id.0].tensor.grad.as_deref()
    }

    // ── forward ops ─────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul: lhs {:?} vs rhs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let t = Tensor::from_vec(vec![m, n], out)?;
        Ok(self.push(t, Op::Matmul { a, b }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let t = Tensor::from_vec(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x - y);
        let t = Tensor::from_vec(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let t = Tensor::from_vec(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, Op::Mul { a, b }))
    }

    /// Broadcast-add a bias row vector to every row of a matrix.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (m, n) = self.value(a).dims2()?;
        if self.value(bias).shape() != [n] {
            return Err(Error::Shape(format!(
                "add_row: matrix {:?} vs bias {:?}",
                self.value(a).shape(),
                self.value(bias).shape()
            )));
        }
        let bias_data = self.value(bias).data().to_vec();
        let mut data = self.value(a).data().to_vec();
        for r in 0..m {
            for c in 0..n {
                data[r * n + c] = data[r * n + c] + bias_data[c];
            }
        }
        let t = Tensor::from_vec(vec![m, n], data)?;
        Ok(self.push(t, Op::AddRow { a, bias }))
    }

    /// x * W + b for row-major x[m,in], W[in,out], b[out].
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> Result<NodeId> {
        let data = self.value(a).data().iter().map(|&x| x * c).collect();
        let t = Tensor::from_vec(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, Op::Scale { a, c }))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = self.value(a).dims2()?;
        let data = transpose_raw(self.value(a).data(), m, n);
        let t = Tensor::from_vec(vec![n, m], data)?;
        Ok(self.push(t, Op::Transpose { a }))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (m, n) = self.value(a).dims2()?;
        if start + len > n || len == 0 {
            return Err(Error::Shape(format!(
                "slice_cols [{start}, {}) out of {n} columns",
                start + len
            )));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&src[r * n + start..r * n + start + len]);
        }
        let t = Tensor::from_vec(vec![m, len], data)?;
        Ok(self.push(t, Op::SliceCols { a, start, len }))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols: empty part list".into()));
        }
        let m = self.value(parts[0]).dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.value(p).dims2()?;
            if pm != m {
                return Err(Error::Shape(format!(
                    "concat_cols: row count {pm} != {m}"
                )));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for (idx, &p) in parts.iter().enumerate() {
                let n = widths[idx];
                let src = self.value(p).data();
                data.extend_from_slice(&src[r * n..(r + 1) * n]);
            }
        }
        let t = Tensor::from_vec(vec![m, total], data)?;
        Ok(self.push(t, Op::ConcatCols { parts: parts.to_vec() }))
    }

    /// Exact GELU: x * Phi(x) with Phi the standard normal CDF (erf form).
    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|&x| x * T::of(normal_cdf(x.to_f64())))
            .collect();
        let t = Tensor::from_vec(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, Op::Gelu { a }))
    }

    /// Max-subtracted softmax along `axis` of a 1-D or 2-D tensor.
    /// For 2-D input, axis 1 normalizes each row, axis 0 each column.
    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        match (self.value(a).shape().len(), axis) {
            (1, 0) | (2, 1) => self.softmax_rows(a),
            (2, 0) => {
                let t = self.transpose(a)?;
                let sm = self.softmax_rows(t)?;
                self.transpose(sm)
            }
            (ndim, axis) => Err(Error::Shape(format!(
                "softmax: axis {axis} invalid for {ndim}-D tensor"
            ))),
        }
    }

    fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = rows_cols(self.value(a))?;
        let src = self.value(a).data();
        let mut data = vec![T::zero(); m * n];
        for r in 0..m {
            let row = &src[r * n..(r + 1) * n];
            let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for (o, &x) in data[r * n..(r + 1) * n].iter_mut().zip(row) {
                let e = (x - max).exp();
                *o = e;
                sum = sum + e;
            }
            let inv = T::one() / sum;
            for o in data[r * n..(r + 1) * n].iter_mut() {
                *o = *o * inv;
            }
        }
        let t = Tensor::from_vec(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, Op::SoftmaxRows { a }))
    }

    /// Per-position normalization over the last axis of x[rows, d],
    /// then affine with gamma[d], beta[d].
    pub fn layer_norm(&mut self, a: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let (m, d) = self.value(a).dims2()?;
        if self.value(gamma).shape() != [d] || self.value(beta).shape() != [d] {
            return Err(Error::Shape(format!(
                "layer_norm: x {:?}, gamma {:?}, beta {:?}",
                self.value(a).shape(),
                self.value(gamma).shape(),
                self.value(beta).shape()
            )));
        }
        let eps = T::of(eps);
        let src = self.value(a).data();
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let inv_d = T::one() / T::of(d as f64);
        let mut data = vec![T::zero(); m * d];
        let mut means = vec![T::zero(); m];
        let mut inv_stds = vec![T::zero(); m];
        for r in 0..m {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().fold(T::zero(), |s, &x| s + x) * inv_d;
            let var = row
                .iter()
                .fold(T::zero(), |s, &x| s + (x - mean) * (x - mean))
                * inv_d;
            let inv_std = T::one() / (var + eps).sqrt();
            means[r] = mean;
            inv_stds[r] = inv_std;
            for c in 0..d {
                let xhat = (row[c] - mean) * inv_std;
                data[r * d + c] = g[c] * xhat + b[c];
            }
        }
        let t = Tensor::from_vec(vec![m, d], data)?;
        Ok(self.push(
            t,
            Op::LayerNorm { a, gamma, beta, mean: means, inv_std: inv_stds },
        ))
    }

    /// Group normalization of x[channels, time]: statistics over
    /// (channels-in-group x time) per group, then per-channel affine.
    pub fn group_norm(
        &mut self,
        a: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
        eps: f64,
    ) -> Result<NodeId> {
        let (ch, time) = self.value(a).dims2()?;
        if groups == 0 || ch % groups != 0 {
            return Err(Error::Config(format!(
                "group_norm: {ch} channels not divisible by {groups} groups"
            )));
        }
        if self.value(gamma).shape() != [ch] || self.value(beta).shape() != [ch] {
            return Err(Error::Shape(format!(
                "group_norm: x {:?}, gamma {:?}, beta {:?}",
                self.value(a).shape(),
                self.value(gamma).shape(),
                self.value(beta).shape()
            )));
        }
        let eps = T::of(eps);
        let cg = ch / groups;
        let group_len = cg * time;
        let inv_n = T::one() / T::of(group_len as f64);
        let src = self.value(a).data();
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let mut data = vec![T::zero(); ch * time];
        let mut means = vec![T::zero(); groups];
        let mut inv_stds = vec![T::zero(); groups];
        for grp in 0..groups {
            let c0 = grp * cg;
            let block = &src[c0 * time..(c0 + cg) * time];
            let mean = block.iter().fold(T::zero(), |s, &x| s + x) * inv_n;
            let var = block
                .iter()
                .fold(T::zero(), |s, &x| s + (x - mean) * (x - mean))
                * inv_n;
            let inv_std = T::one() / (var + eps).sqrt();
            means[grp] = mean;
            inv_stds[grp] = inv_std;
            for c in c0..c0 + cg {
                for t_idx in 0..time {
                    let xhat = (src[c * time + t_idx] - mean) * inv_std;
                    data[c * time + t_idx] = g[c] * xhat + b[c];
                }
            }
        }
        let t = Tensor::from_vec(vec![ch, time], data)?;
        Ok(self.push(
            t,
            Op::GroupNorm { a, gamma, beta, groups, mean: means, inv_std: inv_stds },
        ))
    }

    /// Same-padded stride-1 cross-correlation of x[in_ch, T] with
    /// w[out_ch, in_ch, k] plus bias b[out_ch]. k must be odd.
    pub fn conv1d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (in_ch, time) = self.value(x).dims2()?;
        let wshape = self.value(w).shape().to_vec();
        if wshape.len() != 3 || wshape[1] != in_ch {
            return Err(Error::Shape(format!(
                "conv1d: x {:?} vs kernel {:?}",
                self.value(x).shape(),
                wshape
            )));
        }
        let (out_ch, k) = (wshape[0], wshape[2]);
        if k % 2 == 0 {
            return Err(Error::Config(format!("conv1d: kernel size {k} must be odd")));
        }
        if self.value(b).shape() != [out_ch] {
            return Err(Error::Shape(format!(
                "conv1d: bias {:?} vs out channels {out_ch}",
                self.value(b).shape()
            )));
        }
        let pad = (k - 1) / 2;
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        let bs = self.value(b).data();
        let mut data = vec![T::zero(); out_ch * time];
        for o in 0..out_ch {
            for t_idx in 0..time {
                let mut acc = bs[o];
                for i in 0..in_ch {
                    let w_base = (o * in_ch + i) * k;
                    for q in 0..k {
                        let s = t_idx + q;
                        if s >= pad && s - pad < time {
                            acc = acc + ws[w_base + q] * xs[i * time + (s - pad)];
                        }
                    }
                }
                data[o * time + t_idx] = acc;
            }
        }
        let t = Tensor::from_vec(vec![out_ch, time], data)?;
        Ok(self.push(t, Op::Conv1d { x, w, b }))
    }

    /// Inverted dropout: in training mode kept values are scaled by
    /// 1/(1-rate); in eval mode (or rate 0) this is the identity and
    /// nothing is recorded.
    pub fn dropout(
        &mut self,
        a: NodeId,
        rate: f64,
        training: bool,
        rng: &mut RngState,
    ) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} not in [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(a);
        }
        let keep_scale = T::of(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(a).numel())
            .map(|_| if rng.next_f64() >= rate { keep_scale } else { T::zero() })
            .collect();
        let data = zip_map(self.value(a).data(), &mask, |x, m| x * m);
        let t = Tensor::from_vec(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, Op::Dropout { a, mask }))
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).data().iter().fold(T::zero(), |acc, &x| acc + x);
        Ok(self.push(Tensor::scalar(s), Op::SumAll { a }))
    }

    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.value(a).numel();
        let s = self.value(a).data().iter().fold(T::zero(), |acc, &x| acc + x);
        let t = Tensor::scalar(s / T::of(n as f64));
        Ok(self.push(t, Op::MeanAll { a }))
    }

    /// Mean over all elements of the squared difference.
    pub fn mse(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        let diff = self.sub(pred, target)?;
        let sq = self.mul(diff, diff)?;
        self.mean_all(sq)
    }

    fn same_shape(&self, op: &str, a: NodeId, b: NodeId) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "{op}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Afterwards every
    /// `requires_grad` leaf holds dLoss/dLeaf in its grad slot
    /// (zeros if the leaf did not participate).
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..n).rev() {
            let Some(gout) = grads[i].take() else { continue };
            self.backward_node(i, &gout, &mut grads);
            // Re-store for leaves so the final collection below sees it.
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(gout);
            }
        }

        for (i, node) in self.nodes.iter_mut().enumerate() {
            if node.tensor.requires_grad && matches!(node.op, Op::Leaf) {
                let g = grads[i]
                    .take()
                    .unwrap_or_else(|| vec![T::zero(); node.tensor.numel()]);
                node.tensor.grad = Some(g);
            }
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, gout: &[T], grads: &mut Vec<Option<Vec<T>>>) {
        let accumulate = |grads: &mut Vec<Option<Vec<T>>>, id: NodeId, contrib: Vec<T>| {
            match &mut grads[id.0] {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(&contrib) {
                        *e = *e + *c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };

        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let n = self.value(*b).shape()[1];
                let bt = transpose_raw(self.value(*b).data(), k, n);
                let mut da = vec![T::zero(); m * k];
                matmul_raw(gout, &bt, m, n, k, &mut da);
                let at = transpose_raw(self.value(*a).data(), m, k);
                let mut db = vec![T::zero(); k * n];
                matmul_raw(&at, gout, k, m, n, &mut db);
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::Add { a, b } => {
                accumulate(grads, *a, gout.to_vec());
                accumulate(grads, *b, gout.to_vec());
            }
            Op::AddRow { a, bias } => {
                accumulate(grads, *a, gout.to_vec());
                let (m, n) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let mut db = vec![T::zero(); n];
                for r in 0..m {
                    for c in 0..n {
                        db[c] = db[c] + gout[r * n + c];
                    }
                }
                accumulate(grads, *bias, db);
            }
            Op::Sub { a, b } => {
                accumulate(grads, *a, gout.to_vec());
                accumulate(grads, *b, gout.iter().map(|&g| -g).collect());
            }
            Op::Mul { a, b } => {
                let da = zip_map(gout, self.value(*b).data(), |g, y| g * y);
                let db = zip_map(gout, self.value(*a).data(), |g, x| g * x);
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::Scale { a, c } => {
                accumulate(grads, *a, gout.iter().map(|&g| g * *c).collect());
            }
            Op::Transpose { a } => {
                let (m, n) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                accumulate(grads, *a, transpose_raw(gout, n, m));
            }
            Op::SliceCols { a, start, len } => {
                let (m, n) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let mut da = vec![T::zero(); m * n];
                for r in 0..m {
                    for c in 0..*len {
                        da[r * n + start + c] = gout[r * len + c];
                    }
                }
                accumulate(grads, *a, da);
            }
            Op::ConcatCols { parts } => {
                let total: usize = parts
                    .iter()
                    .map(|&p| self.value(p).shape()[1])
                    .sum();
                let m = self.value(parts[0]).shape()[0];
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).shape()[1];
                    let mut dp = vec![T::zero(); m * w];
                    for r in 0..m {
                        dp[r * w..(r + 1) * w]
                            .copy_from_slice(&gout[r * total + offset..r * total + offset + w]);
                    }
                    accumulate(grads, p, dp);
                    offset += w;
                }
            }
            Op::Gelu { a } => {
                let da = zip_map(gout, self.value(*a).data(), |g, x| {
                    let xf = x.to_f64();
                    g * T::of(normal_cdf(xf) + xf * normal_pdf(xf))
                });
                accumulate(grads, *a, da);
            }
            Op::SoftmaxRows { a } => {
                let (m, n) = rows_cols(self.value(*a)).expect("checked at record time");
                let y = self.nodes[i].tensor.data();
                let mut da = vec![T::zero(); m * n];
                for r in 0..m {
                    let yr = &y[r * n..(r + 1) * n];
                    let gr = &gout[r * n..(r + 1) * n];
                    let dot = yr
                        .iter()
                        .zip(gr)
                        .fold(T::zero(), |s, (&yv, &gv)| s + yv * gv);
                    for c in 0..n {
                        da[r * n + c] = yr[c] * (gr[c] - dot);
                    }
                }
                accumulate(grads, *a, da);
            }
            Op::LayerNorm { a, gamma, beta, mean, inv_std } => {
                let (m, d) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let xs = self.value(*a).data();
                let gs = self.value(*gamma).data();
                let inv_d = T::one() / T::of(d as f64);
                let mut da = vec![T::zero(); m * d];
                let mut dgamma = vec![T::zero(); d];
                let mut dbeta = vec![T::zero(); d];
                for r in 0..m {
                    let istd = inv_std[r];
                    let mu = mean[r];
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for c in 0..d {
                        let xhat = (xs[r * d + c] - mu) * istd;
                        let h = gout[r * d + c] * gs[c];
                        m1 = m1 + h;
                        m2 = m2 + h * xhat;
                        dgamma[c] = dgamma[c] + gout[r * d + c] * xhat;
                        dbeta[c] = dbeta[c] + gout[r * d + c];
                    }
                    m1 = m1 * inv_d;
                    m2 = m2 * inv_d;
                    for c in 0..d {
                        let xhat = (xs[r * d + c] - mu) * istd;
                        let h = gout[r * d + c] * gs[c];
                        da[r * d + c] = (h - m1 - xhat * m2) * istd;
                    }
                }
                accumulate(grads, *a, da);
                accumulate(grads, *gamma, dgamma);
                accumulate(grads, *beta, dbeta);
            }
            Op::GroupNorm { a, gamma, beta, groups, mean, inv_std } => {
                let (ch, time) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let cg = ch / groups;
                let inv_n = T::one() / T::of((cg * time) as f64);
                let xs = self.value(*a).data();
                let gs = self.value(*gamma).data();
                let mut da = vec![T::zero(); ch * time];
                let mut dgamma = vec![T::zero(); ch];
                let mut dbeta = vec![T::zero(); ch];
                for grp in 0..*groups {
                    let istd = inv_std[grp];
                    let mu = mean[grp];
                    let c0 = grp * cg;
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for c in c0..c0 + cg {
                        for t_idx in 0..time {
                            let idx = c * time + t_idx;
                            let xhat = (xs[idx] - mu) * istd;
                            let h = gout[idx] * gs[c];
                            m1 = m1 + h;
                            m2 = m2 + h * xhat;
                            dgamma[c] = dgamma[c] + gout[idx] * xhat;
                            dbeta[c] = dbeta[c] + gout[idx];
                        }
                    }
                    m1 = m1 * inv_n;
                    m2 = m2 * inv_n;
                    for c in c0..c0 + cg {
                        for t_idx in 0..time {
                            let idx = c * time + t_idx;
                            let xhat = (xs[idx] - mu) * istd;
                            let h = gout[idx] * gs[c];
                            da[idx] = (h - m1 - xhat * m2) * istd;
                        }
                    }
                }
                accumulate(grads, *a, da);
                accumulate(grads, *gamma, dgamma);
                accumulate(grads, *beta, dbeta);
            }
            Op::Conv1d { x, w, b } => {
                let (in_ch, time) = (self.value(*x).shape()[0], self.value(*x).shape()[1]);
                let wshape = self.value(*w).shape();
                let (out_ch, k) = (wshape[0], wshape[2]);
                let pad = (k - 1) / 2;
                let xs = self.value(*x).data();
                let ws = self.value(*w).data();
                let mut dx = vec![T::zero(); in_ch * time];
                let mut dw = vec![T::zero(); out_ch * in_ch * k];
                let mut db = vec![T::zero(); out_ch];
                for o in 0..out_ch {
                    for t_idx in 0..time {
                        let g = gout[o * time + t_idx];
                        db[o] = db[o] + g;
                        for i_ch in 0..in_ch {
                            let w_base = (o * in_ch + i_ch) * k;
                            for q in 0..k {
                                let s = t_idx + q;
                                if s >= pad && s - pad < time {
                                    let xi = i_ch * time + (s - pad);
                                    dw[w_base + q] = dw[w_base + q] + g * xs[xi];
                                    dx[xi] = dx[xi] + g * ws[w_base + q];
                                }
                            }
                        }
                    }
                }
                accumulate(grads, *x, dx);
                accumulate(grads, *w, dw);
                accumulate(grads, *b, db);
            }
            Op::Dropout { a, mask } => {
                accumulate(grads, *a, zip_map(gout, mask, |g, m| g * m));
            }
            Op::SumAll { a } => {
                let g = gout[0];
                accumulate(grads, *a, vec![g; self.value(*a).numel()]);
            }
            Op::MeanAll { a } => {
                let n = self.value(*a).numel();
                let g = gout[0] / T::of(n as f64);
                accumulate(grads, *a, vec![g; n]);
            }
        }
    }
}

fn zip_map<T: Real>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// (rows, cols) treating a 1-D tensor as a single row.
fn rows_cols<T: Real>(t: &Tensor<T>) -> Result<(usize, usize)> {
    match t.shape() {
        [n] => Ok((1, *n)),
        [m, n] => Ok((*m, *n)),
        other => Err(Error::Shape(format!("expected 1-D or 2-D, got {other:?}"))),
    }
}
