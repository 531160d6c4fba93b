use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::ops::{ConvGeom, PoolGeom};
use super::{ParamId, ParamStore, Scalar, Tensor};
use crate::error::{bail, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op<T> {
    Input,
    Param(ParamId),
    Conv { x: NodeId, w: NodeId, b: Option<NodeId>, geom: ConvGeom },
    BatchNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Vec<T>, inv_std: Vec<T>, batch_stats: bool },
    Elu { x: NodeId },
    Square { x: NodeId },
    LogFloor { x: NodeId, floor: T },
    AvgPool { x: NodeId, geom: PoolGeom },
    MaxPool { x: NodeId, argmax: Vec<usize> },
    Dropout { x: NodeId, mask: Vec<T> },
    Reshape { x: NodeId },
    Linear { x: NodeId, w: NodeId, b: NodeId },
    Concat { xs: Vec<NodeId> },
    Sum { x: NodeId },
    WeightedCe { scores: NodeId, probs: Vec<T>, labels: Vec<usize>, weights: Vec<T>, norm: T },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Batch statistics produced by a training-mode batch-norm node.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased variance (the one used for normalization).
    pub var: Vec<T>,
    /// Number of values each statistic was computed over.
    pub count: usize,
}

/// One recorded forward pass.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn take_value(&mut self, id: NodeId) -> Tensor<T> {
        core::mem::replace(&mut self.nodes[id.0].value, Tensor::scalar(T::zero()))
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn grad_flag(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|i| self.nodes[i.0].needs_grad)
    }

    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Input, false)
    }

    /// Brings a parameter into the graph as a leaf.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> NodeId {
        let p = store.get(id);
        self.push(p.value.clone(), Op::Param(id), p.requires_grad)
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: (usize, usize),
        pad: (usize, usize, usize, usize),
        groups: usize,
    ) -> Result<NodeId> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), stride, pad, groups)?;
        if let Some(b) = b {
            if self.shape(b) != [geom.cout] {
                bail!(Shape, "conv bias shape {:?} != [{}]", self.shape(b), geom.cout);
            }
        }
        let mut out = Tensor::zeros(&geom.out_shape());
        geom.forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            out.data_mut(),
        );
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.grad_flag(&deps);
        Ok(self.push(out, Op::Conv { x, w, b, geom }, ng))
    }

    /// Batch normalization over (N, H, W) per channel using batch statistics.
    pub fn batch_norm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: T,
    ) -> Result<(NodeId, BatchStats<T>)> {
        let (n, c, hw) = self.nchw(x, "batch norm")?;
        self.check_channel_vec(gamma, c)?;
        self.check_channel_vec(beta, c)?;
        let count = n * hw;
        let xv = self.value(x).data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for s in 0..n {
            for ch in 0..c {
                mean[ch] += xv[(s * c + ch) * hw..][..hw].iter().copied().sum::<T>();
            }
        }
        let cnt = T::of(count as f64);
        mean.iter_mut().for_each(|m| *m /= cnt);
        for s in 0..n {
            for ch in 0..c {
                let m = mean[ch];
                var[ch] += xv[(s * c + ch) * hw..][..hw].iter().map(|&v| (v - m) * (v - m)).sum::<T>();
            }
        }
        var.iter_mut().for_each(|v| *v /= cnt);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = Tensor::zeros(self.shape(x));
        {
            let o = out.data_mut();
            for s in 0..n {
                for ch in 0..c {
                    let base = (s * c + ch) * hw;
                    for i in base..base + hw {
                        let h = (xv[i] - mean[ch]) * inv_std[ch];
                        xhat[i] = h;
                        o[i] = h * g[ch] + b[ch];
                    }
                }
            }
        }
        let ng = self.grad_flag(&[x, gamma, beta]);
        let id = self.push(out, Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats: true }, ng);
        Ok((id, BatchStats { mean, var, count }))
    }

    /// Batch normalization with fixed statistics: an affine map of the input.
    pub fn batch_norm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Result<NodeId> {
        let (n, c, hw) = self.nchw(x, "batch norm")?;
        self.check_channel_vec(gamma, c)?;
        self.check_channel_vec(beta, c)?;
        if running_mean.len() != c || running_var.len() != c {
            bail!(Shape, "running statistics have {} / {} channels, expected {c}", running_mean.len(), running_var.len());
        }
        let inv_std: Vec<T> = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = Tensor::zeros(self.shape(x));
        {
            let o = out.data_mut();
            for s in 0..n {
                for ch in 0..c {
                    let base = (s * c + ch) * hw;
                    for i in base..base + hw {
                        let h = (xv[i] - running_mean[ch]) * inv_std[ch];
                        xhat[i] = h;
                        o[i] = h * g[ch] + b[ch];
                    }
                }
            }
        }
        let ng = self.grad_flag(&[x, gamma, beta]);
        Ok(self.push(out, Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats: false }, ng))
    }

    pub fn elu(&mut self, x: NodeId) -> NodeId {
        let v = self.map(x, |v| if v > T::zero() { v } else { v.exp_m1() });
        let ng = self.grad_flag(&[x]);
        self.push(v, Op::Elu { x }, ng)
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        let v = self.map(x, |v| v * v);
        let ng = self.grad_flag(&[x]);
        self.push(v, Op::Square { x }, ng)
    }

    /// `ln(max(x, floor))`. A non-positive floor is rejected whenever the input
    /// has a non-positive entry.
    pub fn log_floor(&mut self, x: NodeId, floor: T) -> Result<NodeId> {
        if floor <= T::zero() && self.value(x).data().iter().any(|&v| v <= T::zero()) {
            bail!(InvalidArgument, "log of non-positive value without a positive floor");
        }
        let v = self.map(x, |v| if v > floor || v.is_nan() { v.ln() } else { floor.ln() });
        let ng = self.grad_flag(&[x]);
        Ok(self.push(v, Op::LogFloor { x, floor }, ng))
    }

    pub fn avg_pool(&mut self, x: NodeId, kernel: (usize, usize), stride: (usize, usize)) -> Result<NodeId> {
        let geom = PoolGeom::new(self.shape(x), kernel, stride)?;
        let mut out = Tensor::zeros(&geom.out_shape());
        {
            let xv = self.value(x).data();
            let o = out.data_mut();
            geom.for_each(|oi, ii| o[oi] += xv[ii]);
            let scale = T::one() / T::of(geom.window() as f64);
            o.iter_mut().for_each(|v| *v *= scale);
        }
        let ng = self.grad_flag(&[x]);
        Ok(self.push(out, Op::AvgPool { x, geom }, ng))
    }

    pub fn max_pool(&mut self, x: NodeId, kernel: (usize, usize), stride: (usize, usize)) -> Result<NodeId> {
        let geom = PoolGeom::new(self.shape(x), kernel, stride)?;
        let mut out = Tensor::full(&geom.out_shape(), T::neg_infinity());
        let mut argmax = vec![0usize; out.len()];
        {
            let xv = self.value(x).data();
            let o = out.data_mut();
            geom.for_each(|oi, ii| {
                if xv[ii] > o[oi] {
                    o[oi] = xv[ii];
                    argmax[oi] = ii;
                }
            });
        }
        let ng = self.grad_flag(&[x]);
        Ok(self.push(out, Op::MaxPool { x, argmax }, ng))
    }

    /// Inverted dropout: kept units are scaled by `1 / (1 - p)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: NodeId, p: f64, rng: &mut R) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            bail!(InvalidArgument, "dropout probability {p} outside [0, 1)");
        }
        let keep = T::of(1.0 / (1.0 - p));
        let mask: Vec<T> =
            (0..self.value(x).len()).map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep }).collect();
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().zip(&mask).for_each(|(v, &m)| *v *= m);
        let ng = self.grad_flag(&[x]);
        Ok(self.push(out, Op::Dropout { x, mask }, ng))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(x).clone().reshape(shape)?;
        let ng = self.grad_flag(&[x]);
        Ok(self.push(v, Op::Reshape { x }, ng))
    }

    /// Flattens everything after the leading (batch) axis.
    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x);
        let n = s[0];
        let rest = s[1..].iter().product::<usize>();
        self.reshape(x, &[n, rest])
    }

    /// `x @ w^T + b` for `x: [n, d]`, `w: [o, d]`, `b: [o]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || bs != [ws[0]] {
            bail!(Shape, "linear: input {:?}, weight {:?}, bias {:?}", xs, ws, bs);
        }
        let (n, d, o) = (xs[0], xs[1], ws[0]);
        let mut out = Tensor::zeros(&[n, o]);
        {
            let od = out.data_mut();
            let bd = self.value(b).data();
            for r in 0..n {
                od[r * o..][..o].copy_from_slice(bd);
            }
            T::gemm(n, d, o, T::one(), self.value(x).data(), d, 1, self.value(w).data(), 1, d, T::one(), od, o, 1);
        }
        let ng = self.grad_flag(&[x, w, b]);
        Ok(self.push(out, Op::Linear { x, w, b }, ng))
    }

    /// Concatenates NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let Some(&first) = xs.first() else { bail!(Shape, "concat of nothing") };
        let s0 = self.shape(first).to_vec();
        if s0.len() != 4 {
            bail!(Shape, "concat expects 4-d tensors");
        }
        let mut c = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != 4 || s[0] != s0[0] || s[2] != s0[2] || s[3] != s0[3] {
                bail!(Shape, "concat shape mismatch {:?} vs {:?}", s, s0);
            }
            c += s[1];
        }
        let hw = s0[2] * s0[3];
        let mut data = Vec::with_capacity(s0[0] * c * hw);
        for n in 0..s0[0] {
            for &x in xs {
                let ci = self.shape(x)[1];
                data.extend_from_slice(&self.value(x).data()[n * ci * hw..][..ci * hw]);
            }
        }
        let out = Tensor::from_vec(&[s0[0], c, s0[2], s0[3]], data)?;
        let ng = self.grad_flag(xs);
        Ok(self.push(out, Op::Concat { xs: xs.to_vec() }, ng))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let ng = self.grad_flag(&[x]);
        self.push(Tensor::scalar(s), Op::Sum { x }, ng)
    }

    /// Class-weighted cross-entropy of `scores: [n, k]`, normalized by the sum
    /// of the weights applied to the batch.
    pub fn weighted_cross_entropy(&mut self, scores: NodeId, labels: &[usize], weights: &[T]) -> Result<NodeId> {
        let s = self.shape(scores);
        if s.len() != 2 || s[0] != labels.len() || s[1] != weights.len() {
            bail!(Shape, "cross-entropy: scores {:?}, {} labels, {} class weights", s, labels.len(), weights.len());
        }
        let (n, k) = (s[0], s[1]);
        if n == 0 {
            bail!(EmptySplit, "cross-entropy over an empty batch");
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            bail!(InvalidArgument, "label {bad} out of range for {k} classes");
        }
        let sv = self.value(scores).data();
        let mut probs = vec![T::zero(); n * k];
        let mut total = T::zero();
        let mut norm = T::zero();
        for (i, &y) in labels.iter().enumerate() {
            let row = &sv[i * k..][..k];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - mx).exp()).sum();
            let lse = mx + z.ln();
            for j in 0..k {
                probs[i * k + j] = (row[j] - lse).exp();
            }
            total += weights[y] * (lse - row[y]);
            norm += weights[y];
        }
        if norm <= T::zero() {
            bail!(InvalidArgument, "class weights of the batch sum to zero");
        }
        let ng = self.grad_flag(&[scores]);
        Ok(self.push(
            Tensor::scalar(total / norm),
            Op::WeightedCe { scores, probs, labels: labels.to_vec(), weights: weights.to_vec(), norm },
            ng,
        ))
    }

    fn map(&self, x: NodeId, f: impl Fn(T) -> T) -> Tensor<T> {
        let mut v = self.value(x).clone();
        v.data_mut().iter_mut().for_each(|e| *e = f(*e));
        v
    }

    fn nchw(&self, x: NodeId, what: &str) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if s.len() != 4 {
            bail!(Shape, "{what} expects NCHW input, got {:?}", s);
        }
        Ok((s[0], s[1], s[2] * s[3]))
    }

    fn check_channel_vec(&self, id: NodeId, c: usize) -> Result<()> {
        if self.shape(id) != [c] {
            bail!(Shape, "per-channel parameter shape {:?} != [{c}]", self.shape(id));
        }
        Ok(())
    }

    /// Back-propagates from scalar `loss`, accumulating into the gradients of
    /// every parameter leaf that requires them. Existing gradients in `store`
    /// are added to, not overwritten.
    pub fn backward(&self, loss: NodeId, store: &mut ParamStore<T>) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            bail!(Graph, "backward from a node that was never recorded");
        }
        if self.value(loss).len() != 1 {
            bail!(Graph, "backward needs a scalar loss, got shape {:?}", self.shape(loss));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads, store)?;
        }
        Ok(())
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], id: NodeId) -> Option<&'g mut Vec<T>> {
        if !self.nodes[id.0].needs_grad {
            return None;
        }
        let len = self.nodes[id.0].value.len();
        Some(grads[id.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn propagate(
        &self,
        node: &Node<T>,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
        store: &mut ParamStore<T>,
    ) -> Result<()> {
        match &node.op {
            Op::Input => {}
            Op::Param(pid) => {
                let p = store.get_mut(*pid);
                if p.grad.len() != g.len() {
                    bail!(Shape, "parameter {} changed shape since forward", p.name);
                }
                p.grad.data_mut().iter_mut().zip(g).for_each(|(a, &b)| *a += b);
            }
            Op::Conv { x, w, b, geom } => {
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let mut dx = self.slot(grads, *x).map(core::mem::take);
                let mut dw = self.slot(grads, *w).map(core::mem::take);
                let mut db = b.and_then(|b| self.slot(grads, b).map(core::mem::take));
                geom.backward(xv, wv, g, dx.as_deref_mut(), dw.as_deref_mut(), db.as_deref_mut());
                if let Some(d) = dx {
                    grads[x.0] = Some(d);
                }
                if let Some(d) = dw {
                    grads[w.0] = Some(d);
                }
                if let (Some(d), Some(b)) = (db, b) {
                    grads[b.0] = Some(d);
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let s = self.shape(*x);
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                let gv = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for sn in 0..n {
                    for ch in 0..c {
                        let base = (sn * c + ch) * hw;
                        for i in base..base + hw {
                            dgamma[ch] += g[i] * xhat[i];
                            dbeta[ch] += g[i];
                        }
                    }
                }
                if let Some(dx) = self.slot(grads, *x) {
                    let cnt = T::of((n * hw) as f64);
                    for sn in 0..n {
                        for ch in 0..c {
                            let base = (sn * c + ch) * hw;
                            let k = gv[ch] * inv_std[ch];
                            for i in base..base + hw {
                                dx[i] += if *batch_stats {
                                    k * (g[i] - dbeta[ch] / cnt - xhat[i] * dgamma[ch] / cnt)
                                } else {
                                    k * g[i]
                                };
                            }
                        }
                    }
                }
                if let Some(d) = self.slot(grads, *gamma) {
                    d.iter_mut().zip(&dgamma).for_each(|(a, &b)| *a += b);
                }
                if let Some(d) = self.slot(grads, *beta) {
                    d.iter_mut().zip(&dbeta).for_each(|(a, &b)| *a += b);
                }
            }
            Op::Elu { x } => {
                let xv = self.value(*x).data();
                if let Some(d) = self.slot(grads, *x) {
                    for ((d, &gi), &v) in d.iter_mut().zip(g).zip(xv) {
                        *d += if v > T::zero() { gi } else { gi * v.exp() };
                    }
                }
            }
            Op::Square { x } => {
                let xv = self.value(*x).data();
                if let Some(d) = self.slot(grads, *x) {
                    let two = T::of(2.0);
                    for ((d, &gi), &v) in d.iter_mut().zip(g).zip(xv) {
                        *d += two * v * gi;
                    }
                }
            }
            Op::LogFloor { x, floor } => {
                let xv = self.value(*x).data();
                if let Some(d) = self.slot(grads, *x) {
                    for ((d, &gi), &v) in d.iter_mut().zip(g).zip(xv) {
                        if v > *floor {
                            *d += gi / v;
                        }
                    }
                }
            }
            Op::AvgPool { x, geom } => {
                if let Some(d) = self.slot(grads, *x) {
                    let scale = T::one() / T::of(geom.window() as f64);
                    geom.for_each(|oi, ii| d[ii] += g[oi] * scale);
                }
            }
            Op::MaxPool { x, argmax } => {
                if let Some(d) = self.slot(grads, *x) {
                    for (&gi, &ii) in g.iter().zip(argmax) {
                        d[ii] += gi;
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(d) = self.slot(grads, *x) {
                    for ((d, &gi), &m) in d.iter_mut().zip(g).zip(mask) {
                        *d += gi * m;
                    }
                }
            }
            Op::Reshape { x } => {
                if let Some(d) = self.slot(grads, *x) {
                    d.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
                }
            }
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x);
                let (n, dd) = (xs[0], xs[1]);
                let o = self.shape(*w)[0];
                if let Some(dx) = self.slot(grads, *x) {
                    T::gemm(n, o, dd, T::one(), g, o, 1, self.value(*w).data(), dd, 1, T::one(), dx, dd, 1);
                }
                if let Some(dw) = self.slot(grads, *w) {
                    T::gemm(o, n, dd, T::one(), g, 1, o, self.value(*x).data(), dd, 1, T::one(), dw, dd, 1);
                }
                if let Some(db) = self.slot(grads, *b) {
                    for r in 0..n {
                        db.iter_mut().zip(&g[r * o..][..o]).for_each(|(a, &b)| *a += b);
                    }
                }
            }
            Op::Concat { xs } => {
                let s = self.shape(xs[0]);
                let (n, hw) = (s[0], s[2] * s[3]);
                let ctot: usize = xs.iter().map(|&x| self.shape(x)[1]).sum();
                let mut off = 0;
                for &x in xs {
                    let ci = self.shape(x)[1];
                    if let Some(d) = self.slot(grads, x) {
                        for sn in 0..n {
                            let src = &g[(sn * ctot + off) * hw..][..ci * hw];
                            d[sn * ci * hw..][..ci * hw].iter_mut().zip(src).for_each(|(a, &b)| *a += b);
                        }
                    }
                    off += ci;
                }
            }
            Op::Sum { x } => {
                if let Some(d) = self.slot(grads, *x) {
                    d.iter_mut().for_each(|a| *a += g[0]);
                }
            }
            Op::WeightedCe { scores, probs, labels, weights, norm } => {
                let k = weights.len();
                if let Some(d) = self.slot(grads, *scores) {
                    for (i, &y) in labels.iter().enumerate() {
                        let c = g[0] * weights[y] / *norm;
                        for j in 0..k {
                            let onehot = if j == y { T::one() } else { T::zero() };
                            d[i * k + j] += c * (probs[i * k + j] - onehot);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
