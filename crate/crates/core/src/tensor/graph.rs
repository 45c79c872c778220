//! Operation tape and reverse-mode differentiation.
//!
//! Every forward op appends a node holding its output plus whatever the
//! backward pass needs. Nodes only reference earlier nodes, so walking the
//! tape backwards visits a valid topological order; gradients accumulate
//! additively when a node feeds several consumers.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};

use super::conv::{self, ConvDims, ConvSpec};
use super::{debug_check_finite, Element, Tensor};

/// Handle to a node in one specific [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// How a batch-norm application resolves its statistics and gradient flow.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize by batch statistics; running stats get an update.
    Train,
    /// Normalize by running statistics; no update.
    Eval,
    /// Eval statistics, and gradient flow into gamma/beta is blocked while
    /// input gradients still pass. Running stats never change.
    Frozen,
}

/// Fresh running statistics produced by a train-mode batch norm.
#[derive(Clone, Debug)]
pub struct BnStatUpdate<E: Element> {
    pub mean: Vec<E>,
    pub var: Vec<E>,
}

struct Node<E: Element> {
    shape: Vec<usize>,
    data: Arc<Vec<E>>,
    requires_grad: bool,
    op: Op<E>,
}

enum Op<E: Element> {
    Leaf,
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        spec: ConvSpec,
        dims: ConvDims,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mode: BnMode,
        mean: Vec<E>,
        inv_std: Vec<E>,
    },
    Relu {
        x: NodeId,
    },
    MaxPool {
        x: NodeId,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        x: NodeId,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    SoftmaxCrossEntropy {
        logits: NodeId,
        probs: Vec<E>,
        labels: Vec<usize>,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sum {
        x: NodeId,
    },
    Dot {
        x: NodeId,
        coeffs: Vec<E>,
    },
}

/// Per-leaf gradients produced by [`Graph::backward`].
pub struct Gradients<E: Element> {
    by_node: HashMap<usize, Vec<E>>,
}

impl<E: Element> Gradients<E> {
    pub fn get(&self, id: NodeId) -> Option<&[E]> {
        self.by_node.get(&id.0).map(|v| v.as_slice())
    }

    pub fn len(&self) -> usize {
        self.by_node.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_node.is_empty()
    }
}

/// Recorded forward computation over one set of inputs.
#[derive(Default)]
pub struct Graph<E: Element> {
    nodes: Vec<Node<E>>,
}

impl<E: Element> Graph<E> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    /// Imports a tensor as an input node; its `requires_grad` flag decides
    /// whether [`Graph::backward`] reports a gradient for it.
    pub fn leaf(&mut self, t: &Tensor<E>) -> NodeId {
        self.push(t.shape().to_vec(), t.share_data(), t.requires_grad(), Op::Leaf)
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn numel(&self, id: NodeId) -> usize {
        self.nodes[id.0].data.len()
    }

    pub fn data(&self, id: NodeId) -> &[E] {
        &self.nodes[id.0].data
    }

    /// Value of a single-element node.
    pub fn scalar_value(&self, id: NodeId) -> E {
        assert_eq!(self.numel(id), 1, "scalar_value on non-scalar node");
        self.nodes[id.0].data[0]
    }

    /// Copies a node out into a standalone tensor.
    pub fn tensor(&self, id: NodeId) -> Tensor<E> {
        Tensor::new(self.shape(id).to_vec(), self.data(id).to_vec()).expect("node tensor")
    }

    fn push(&mut self, shape: Vec<usize>, data: Arc<Vec<E>>, requires_grad: bool, op: Op<E>) -> NodeId {
        self.nodes.push(Node {
            shape,
            data,
            requires_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn req(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        spec: &ConvSpec,
    ) -> Result<NodeId> {
        if let Some(bid) = b {
            if self.shape(bid).len() != 1 {
                return Err(Error::invalid(format!(
                    "conv2d bias must be 1-D, got shape {:?}",
                    self.shape(bid)
                )));
            }
        }
        let dims = conv::resolve_conv(
            self.shape(x),
            self.shape(w),
            b.map(|bid| self.numel(bid)),
            spec,
        )?;
        let out = conv::conv2d_forward(
            self.data(x),
            self.data(w),
            b.map(|bid| self.data(bid)),
            &dims,
            spec,
        );
        debug_check_finite("conv2d", &out);
        let req = self.req(x) || self.req(w) || b.map_or(false, |bid| self.req(bid));
        let shape = vec![dims.n, dims.cout, dims.oh, dims.ow];
        Ok(self.push(shape, Arc::new(out), req, Op::Conv2d { x, w, b, spec: *spec, dims }))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &[E],
        running_var: &[E],
        mode: BnMode,
        eps: f64,
        momentum: f64,
    ) -> Result<(NodeId, Option<BnStatUpdate<E>>)> {
        if eps <= 0.0 {
            return Err(Error::invalid(format!("batch_norm eps must be positive, got {eps}")));
        }
        let xs = self.shape(x).to_vec();
        let [n, c, h, w] = match xs.as_slice() {
            &[a, b, c2, d] => [a, b, c2, d],
            other => {
                return Err(Error::invalid(format!(
                    "batch_norm input must be 4-D, got shape {other:?}"
                )))
            }
        };
        for (name, len) in [
            ("gamma", self.numel(gamma)),
            ("beta", self.numel(beta)),
            ("running_mean", running_mean.len()),
            ("running_var", running_var.len()),
        ] {
            if len != c {
                return Err(Error::invalid(format!(
                    "batch_norm {name} length {len} != channel count {c}"
                )));
            }
        }
        let eps_e = E::from_f64(eps);
        let plane = h * w;
        let m = (n * plane) as f64;
        let xd = self.nodes[x.0].data.clone();

        let (mean, var, update) = match mode {
            BnMode::Train => {
                let mut mean = vec![E::zero(); c];
                let mut var = vec![E::zero(); c];
                for ci in 0..c {
                    let mut s = E::zero();
                    for ni in 0..n {
                        let row = &xd[(ni * c + ci) * plane..][..plane];
                        s += row.iter().copied().sum::<E>();
                    }
                    let mu = s / E::from_f64(m);
                    let mut v = E::zero();
                    for ni in 0..n {
                        let row = &xd[(ni * c + ci) * plane..][..plane];
                        for &xv in row {
                            let d = xv - mu;
                            v += d * d;
                        }
                    }
                    mean[ci] = mu;
                    var[ci] = v / E::from_f64(m);
                }
                // Biased batch variance feeds both normalization and the
                // running estimate: new = (1-momentum)*old + momentum*batch.
                let mom = E::from_f64(momentum);
                let keep = E::one() - mom;
                let new_mean: Vec<E> = running_mean
                    .iter()
                    .zip(&mean)
                    .map(|(&o, &b)| keep * o + mom * b)
                    .collect();
                let new_var: Vec<E> = running_var
                    .iter()
                    .zip(&var)
                    .map(|(&o, &b)| keep * o + mom * b)
                    .collect();
                (mean, var, Some(BnStatUpdate { mean: new_mean, var: new_var }))
            }
            BnMode::Eval | BnMode::Frozen => (running_mean.to_vec(), running_var.to_vec(), None),
        };
        let inv_std: Vec<E> = var.iter().map(|&v| E::one() / (v + eps_e).sqrt()).collect();

        let gd = &self.nodes[gamma.0].data;
        let bd = &self.nodes[beta.0].data;
        let mut out = vec![E::zero(); xd.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * plane;
                let (mu, istd, ga, be) = (mean[ci], inv_std[ci], gd[ci], bd[ci]);
                for (o, &xv) in out[base..][..plane].iter_mut().zip(&xd[base..][..plane]) {
                    *o = ga * (xv - mu) * istd + be;
                }
            }
        }
        debug_check_finite("batch_norm", &out);
        let req = match mode {
            BnMode::Frozen => self.req(x),
            _ => self.req(x) || self.req(gamma) || self.req(beta),
        };
        let id = self.push(
            xs,
            Arc::new(out),
            req,
            Op::BatchNorm { x, gamma, beta, mode, mean, inv_std },
        );
        Ok((id, update))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out: Vec<E> = self.data(x)
            .iter()
            .map(|&v| if v > E::zero() { v } else { E::zero() })
            .collect();
        let shape = self.shape(x).to_vec();
        let req = self.req(x);
        self.push(shape, Arc::new(out), req, Op::Relu { x })
    }

    pub fn max_pool2d(
        &mut self,
        x: NodeId,
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let [n, c, h, w] = match xs.as_slice() {
            &[a, b, c2, d] => [a, b, c2, d],
            other => {
                return Err(Error::invalid(format!(
                    "max_pool2d input must be 4-D, got shape {other:?}"
                )))
            }
        };
        let (out, argmax, oh, ow) =
            conv::max_pool2d_forward(self.data(x), n, c, h, w, kernel, stride, pad)?;
        let req = self.req(x);
        Ok(self.push(vec![n, c, oh, ow], Arc::new(out), req, Op::MaxPool { x, argmax }))
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let [n, c, h, w] = match xs.as_slice() {
            &[a, b, c2, d] => [a, b, c2, d],
            other => {
                return Err(Error::invalid(format!(
                    "global_avg_pool input must be 4-D, got shape {other:?}"
                )))
            }
        };
        let plane = h * w;
        let scale = E::one() / E::from_f64(plane as f64);
        let xd = self.data(x);
        let mut out = vec![E::zero(); n * c];
        for i in 0..n * c {
            out[i] = xd[i * plane..][..plane].iter().copied().sum::<E>() * scale;
        }
        debug_check_finite("global_avg_pool", &out);
        let req = self.req(x);
        Ok(self.push(vec![n, c], Arc::new(out), req, Op::GlobalAvgPool { x }))
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, din) = match self.shape(x) {
            &[a, b2] => (a, b2),
            other => {
                return Err(Error::invalid(format!(
                    "linear input must be 2-D, got shape {other:?}"
                )))
            }
        };
        let (dout, w_din) = match self.shape(w) {
            &[a, b2] => (a, b2),
            other => {
                return Err(Error::invalid(format!(
                    "linear weight must be 2-D, got shape {other:?}"
                )))
            }
        };
        if w_din != din {
            return Err(Error::invalid(format!(
                "linear weight input dim {w_din} != input features {din}"
            )));
        }
        if self.shape(b) != [dout] {
            return Err(Error::invalid(format!(
                "linear bias shape {:?} != [{dout}]",
                self.shape(b)
            )));
        }
        let xd = self.data(x);
        let wd = self.data(w);
        let bd = self.data(b);
        let mut out = vec![E::zero(); n * dout];
        for ni in 0..n {
            let xrow = &xd[ni * din..][..din];
            let orow = &mut out[ni * dout..][..dout];
            for (o, do_i) in orow.iter_mut().zip(0..dout) {
                let wrow = &wd[do_i * din..][..din];
                let mut acc = bd[do_i];
                for (xv, wv) in xrow.iter().zip(wrow) {
                    acc += *xv * *wv;
                }
                *o = acc;
            }
        }
        debug_check_finite("linear", &out);
        let req = self.req(x) || self.req(w) || self.req(b);
        Ok(self.push(vec![n, dout], Arc::new(out), req, Op::Linear { x, w, b }))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`, stabilized by
    /// max subtraction.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (n, k) = match self.shape(logits) {
            &[a, b2] => (a, b2),
            other => {
                return Err(Error::invalid(format!(
                    "softmax_cross_entropy logits must be 2-D, got shape {other:?}"
                )))
            }
        };
        if labels.len() != n {
            return Err(Error::invalid(format!(
                "softmax_cross_entropy got {} labels for batch of {n}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let zd = self.data(logits);
        let mut probs = vec![E::zero(); n * k];
        let mut loss = E::zero();
        for ni in 0..n {
            let row = &zd[ni * k..][..k];
            let max = row.iter().copied().fold(E::neg_infinity(), E::max);
            let mut denom = E::zero();
            for (p, &z) in probs[ni * k..][..k].iter_mut().zip(row) {
                *p = (z - max).exp();
                denom += *p;
            }
            for p in probs[ni * k..][..k].iter_mut() {
                *p = *p / denom;
            }
            // -log softmax[label] = log(denom) - (z[label] - max)
            loss += denom.ln() - (row[labels[ni]] - max);
        }
        loss = loss / E::from_f64(n as f64);
        debug_check_finite("softmax_cross_entropy", std::slice::from_ref(&loss));
        let req = self.req(logits);
        Ok(self.push(
            vec![1],
            Arc::new(vec![loss]),
            req,
            Op::SoftmaxCrossEntropy { logits, probs, labels: labels.to_vec() },
        ))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::invalid(format!(
                "add shape mismatch: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out: Vec<E> = self.data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x + y)
            .collect();
        debug_check_finite("add", &out);
        let shape = self.shape(a).to_vec();
        let req = self.req(a) || self.req(b);
        Ok(self.push(shape, Arc::new(out), req, Op::Add { a, b }))
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: E = self.data(x).iter().copied().sum();
        let req = self.req(x);
        self.push(vec![1], Arc::new(vec![s]), req, Op::Sum { x })
    }

    /// Inner product with a fixed coefficient vector, as a scalar node.
    /// Used by test harnesses to project a tensor onto a random direction.
    pub fn dot(&mut self, x: NodeId, coeffs: Vec<E>) -> Result<NodeId> {
        if coeffs.len() != self.numel(x) {
            return Err(Error::invalid(format!(
                "dot coefficient length {} != operand size {}",
                coeffs.len(),
                self.numel(x)
            )));
        }
        let s: E = self.data(x).iter().zip(&coeffs).map(|(&a, &b)| a * b).sum();
        let req = self.req(x);
        Ok(self.push(vec![1], Arc::new(vec![s]), req, Op::Dot { x, coeffs }))
    }

    /// Reverse pass from a scalar node. Returns gradients for every leaf
    /// with `requires_grad` that `loss` depends on; gradients accumulate
    /// additively when a node is used in several places.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<E>> {
        if self.numel(loss) != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<E>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![E::one()]);
        let mut out = HashMap::new();
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            match &self.nodes[id].op {
                Op::Leaf => {
                    out.insert(id, g);
                }
                op => self.backprop(op, &g, &mut grads),
            }
        }
        Ok(Gradients { by_node: out })
    }

    fn accum(&self, grads: &mut [Option<Vec<E>>], id: NodeId, add: Vec<E>) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(buf) => {
                for (a, b) in buf.iter_mut().zip(add) {
                    *a += b;
                }
            }
            slot => *slot = Some(add),
        }
    }

    fn backprop(&self, op: &Op<E>, g: &[E], grads: &mut [Option<Vec<E>>]) {
        match op {
            Op::Leaf => unreachable!("leaf handled by caller"),
            Op::Conv2d { x, w, b, spec, dims } => {
                if self.req(*x) {
                    let gin = conv::conv2d_backward_input(g, self.data(*w), dims, spec);
                    self.accum(grads, *x, gin);
                }
                if self.req(*w) {
                    let gw = conv::conv2d_backward_weight(g, self.data(*x), dims, spec);
                    self.accum(grads, *w, gw);
                }
                if let Some(bid) = b {
                    if self.req(*bid) {
                        self.accum(grads, *bid, conv::conv2d_backward_bias(g, dims));
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, mode, mean, inv_std } => {
                self.backprop_bn(*x, *gamma, *beta, *mode, mean, inv_std, g, grads);
            }
            Op::Relu { x } => {
                if self.req(*x) {
                    let gin: Vec<E> = self.data(*x)
                        .iter()
                        .zip(g)
                        .map(|(&xv, &gv)| if xv > E::zero() { gv } else { E::zero() })
                        .collect();
                    self.accum(grads, *x, gin);
                }
            }
            Op::MaxPool { x, argmax } => {
                if self.req(*x) {
                    let mut gin = vec![E::zero(); self.numel(*x)];
                    for (i, &src) in argmax.iter().enumerate() {
                        gin[src] += g[i];
                    }
                    self.accum(grads, *x, gin);
                }
            }
            Op::GlobalAvgPool { x } => {
                if self.req(*x) {
                    let shape = self.shape(*x);
                    let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
                    let scale = E::one() / E::from_f64(plane as f64);
                    let mut gin = vec![E::zero(); self.numel(*x)];
                    for i in 0..n * c {
                        let gv = g[i] * scale;
                        for v in gin[i * plane..][..plane].iter_mut() {
                            *v = gv;
                        }
                    }
                    self.accum(grads, *x, gin);
                }
            }
            Op::Linear { x, w, b } => {
                let (n, din) = (self.shape(*x)[0], self.shape(*x)[1]);
                let dout = self.shape(*w)[0];
                if self.req(*x) {
                    let wd = self.data(*w);
                    let mut gx = vec![E::zero(); n * din];
                    for ni in 0..n {
                        let grow = &g[ni * dout..][..dout];
                        let gxrow = &mut gx[ni * din..][..din];
                        for (do_i, &gv) in grow.iter().enumerate() {
                            let wrow = &wd[do_i * din..][..din];
                            for (a, &wv) in gxrow.iter_mut().zip(wrow) {
                                *a += gv * wv;
                            }
                        }
                    }
                    self.accum(grads, *x, gx);
                }
                if self.req(*w) {
                    let xd = self.data(*x);
                    let mut gw = vec![E::zero(); dout * din];
                    for ni in 0..n {
                        let xrow = &xd[ni * din..][..din];
                        let grow = &g[ni * dout..][..dout];
                        for (do_i, &gv) in grow.iter().enumerate() {
                            let gwrow = &mut gw[do_i * din..][..din];
                            for (a, &xv) in gwrow.iter_mut().zip(xrow) {
                                *a += gv * xv;
                            }
                        }
                    }
                    self.accum(grads, *w, gw);
                }
                if self.req(*b) {
                    let mut gb = vec![E::zero(); dout];
                    for ni in 0..n {
                        for (a, &gv) in gb.iter_mut().zip(&g[ni * dout..][..dout]) {
                            *a += gv;
                        }
                    }
                    self.accum(grads, *b, gb);
                }
            }
            Op::SoftmaxCrossEntropy { logits, probs, labels } => {
                if self.req(*logits) {
                    let (n, k) = (self.shape(*logits)[0], self.shape(*logits)[1]);
                    let scale = g[0] / E::from_f64(n as f64);
                    let mut gz = vec![E::zero(); n * k];
                    for ni in 0..n {
                        for ki in 0..k {
                            let onehot = if ki == labels[ni] { E::one() } else { E::zero() };
                            gz[ni * k + ki] = (probs[ni * k + ki] - onehot) * scale;
                        }
                    }
                    self.accum(grads, *logits, gz);
                }
            }
            Op::Add { a, b } => {
                if self.req(*a) {
                    self.accum(grads, *a, g.to_vec());
                }
                if self.req(*b) {
                    self.accum(grads, *b, g.to_vec());
                }
            }
            Op::Sum { x } => {
                if self.req(*x) {
                    self.accum(grads, *x, vec![g[0]; self.numel(*x)]);
                }
            }
            Op::Dot { x, coeffs } => {
                if self.req(*x) {
                    let gin: Vec<E> = coeffs.iter().map(|&c| c * g[0]).collect();
                    self.accum(grads, *x, gin);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_bn(
        &self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mode: BnMode,
        mean: &[E],
        inv_std: &[E],
        g: &[E],
        grads: &mut [Option<Vec<E>>],
    ) {
        let shape = self.shape(x);
        let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
        let m = E::from_f64((n * plane) as f64);
        let xd = self.data(x);
        let gd = self.data(gamma);

        // Per-channel reductions over N,H,W.
        let mut sum_g = vec![E::zero(); c];
        let mut sum_gx = vec![E::zero(); c];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * plane;
                let (mu, istd) = (mean[ci], inv_std[ci]);
                let mut sg = E::zero();
                let mut sgx = E::zero();
                for (&gv, &xv) in g[base..][..plane].iter().zip(&xd[base..][..plane]) {
                    sg += gv;
                    sgx += gv * (xv - mu) * istd;
                }
                sum_g[ci] += sg;
                sum_gx[ci] += sgx;
            }
        }

        let track_affine = mode != BnMode::Frozen;
        if track_affine && self.req(gamma) {
            self.accum(grads, gamma, sum_gx.clone());
        }
        if track_affine && self.req(beta) {
            self.accum(grads, beta, sum_g.clone());
        }
        if self.req(x) {
            let mut gin = vec![E::zero(); xd.len()];
            match mode {
                BnMode::Train => {
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * plane;
                            let (mu, istd, ga) = (mean[ci], inv_std[ci], gd[ci]);
                            let mg = sum_g[ci] / m;
                            let mgx = sum_gx[ci] / m;
                            for ((o, &gv), &xv) in gin[base..][..plane]
                                .iter_mut()
                                .zip(&g[base..][..plane])
                                .zip(&xd[base..][..plane])
                            {
                                let xhat = (xv - mu) * istd;
                                *o = ga * istd * (gv - mg - xhat * mgx);
                            }
                        }
                    }
                }
                BnMode::Eval | BnMode::Frozen => {
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * plane;
                            let scale = gd[ci] * inv_std[ci];
                            for (o, &gv) in gin[base..][..plane].iter_mut().zip(&g[base..][..plane]) {
                                *o = gv * scale;
                            }
                        }
                    }
                }
            }
            self.accum(grads, x, gin);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leafr(g: &mut Graph<f32>, shape: Vec<usize>, data: Vec<f32>) -> NodeId {
        let t = Tensor::new(shape, data).unwrap().with_requires_grad(true);
        g.leaf(&t)
    }

    #[test]
    fn relu_examples() {
        let mut g = Graph::new();
        let x = leafr(&mut g, vec![3], vec![-1.0, 0.0, 2.0]);
        let y = g.relu(x);
        assert_eq!(g.data(y), &[0.0, 0.0, 2.0]);
        // all-negative input: zero output and zero gradient
        let xn = leafr(&mut g, vec![2], vec![-3.0, -0.5]);
        let yn = g.relu(xn);
        let loss = g.sum(yn);
        let grads = g.backward(loss).unwrap();
        assert_eq!(g.data(yn), &[0.0, 0.0]);
        assert_eq!(grads.get(xn).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn sum_backward_is_ones_and_relu_masks() {
        let mut g = Graph::new();
        let x = leafr(&mut g, vec![2], vec![-1.0, 2.0]);
        let y = g.relu(x);
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[0.0, 1.0]);

        let mut g = Graph::new();
        let x = leafr(&mut g, vec![4], vec![0.5, -0.25, 3.0, 0.0]);
        let loss = g.sum(x);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = leafr(&mut g, vec![2], vec![1.0, 2.0]);
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn gradients_accumulate_across_uses() {
        // loss = sum(x) + sum(x) gives exactly twice the gradient of sum(x)
        let mut g = Graph::new();
        let x = leafr(&mut g, vec![3], vec![1.0, -2.0, 0.5]);
        let s1 = g.sum(x);
        let s2 = g.sum(x);
        let loss = g.add(s1, s2).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0; 3]);
    }

    #[test]
    fn add_requires_matching_shapes() {
        let mut g = Graph::new();
        let a = leafr(&mut g, vec![2], vec![1.0, 2.0]);
        let b = leafr(&mut g, vec![3], vec![1.0, 2.0, 3.0]);
        assert!(g.add(a, b).is_err());
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_k() {
        let mut g = Graph::new();
        let z = leafr(&mut g, vec![1, 44], vec![0.25; 44]);
        let loss = g.softmax_cross_entropy(z, &[7]).unwrap();
        let expect = (44.0f32).ln();
        assert!((g.scalar_value(loss) - expect).abs() < 1e-5);
    }

    #[test]
    fn cross_entropy_goes_to_zero_with_margin() {
        // loss decreases monotonically as the true-class margin grows
        let mut last = f32::INFINITY;
        for margin in [0.0f32, 1.0, 4.0, 16.0, 64.0] {
            let mut g = Graph::new();
            let z = leafr(&mut g, vec![1, 3], vec![margin, 0.0, 0.0]);
            let loss = g.softmax_cross_entropy(z, &[0]).unwrap();
            let v = g.scalar_value(loss);
            assert!(v < last, "loss must shrink as margin grows");
            last = v;
        }
        assert!(last < 1e-20);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut g = Graph::new();
        let z = leafr(&mut g, vec![1, 3], vec![0.0; 3]);
        assert!(g.softmax_cross_entropy(z, &[3]).is_err());
    }

    #[test]
    fn batch_norm_normalized_input_is_identity() {
        // per-channel batch mean 0 / variance 1 with gamma=1, beta=0
        let mut g = Graph::new();
        let x = leafr(&mut g, vec![2, 1, 1, 2], vec![-1.0, 1.0, -1.0, 1.0]);
        let ga = leafr(&mut g, vec![1], vec![1.0]);
        let be = leafr(&mut g, vec![1], vec![0.0]);
        let (y, upd) = g
            .batch_norm(x, ga, be, &[0.0], &[1.0], BnMode::Train, 1e-5, 0.1)
            .unwrap();
        for (a, b) in g.data(y).iter().zip(g.data(x)) {
            assert!((a - b).abs() < 1e-2, "{a} vs {b}");
        }
        let upd = upd.unwrap();
        assert!((upd.mean[0] - 0.0).abs() < 1e-7);
        assert!((upd.var[0] - (0.9 * 1.0 + 0.1 * 1.0)).abs() < 1e-6);
    }

    #[test]
    fn batch_norm_zero_variance_yields_beta() {
        let mut g = Graph::new();
        let x = leafr(&mut g, vec![1, 1, 2, 2], vec![5.0; 4]);
        let ga = leafr(&mut g, vec![1], vec![1.0]);
        let be = leafr(&mut g, vec![1], vec![2.0]);
        let (y, _) = g
            .batch_norm(x, ga, be, &[0.0], &[1.0], BnMode::Train, 1e-5, 0.1)
            .unwrap();
        for &v in g.data(y) {
            assert!((v - 2.0).abs() < 1e-6);
        }
    }

    #[test]
    fn batch_norm_rejects_nonpositive_eps() {
        let mut g = Graph::new();
        let x = leafr(&mut g, vec![1, 1, 1, 1], vec![1.0]);
        let ga = leafr(&mut g, vec![1], vec![1.0]);
        let be = leafr(&mut g, vec![1], vec![0.0]);
        assert!(g
            .batch_norm(x, ga, be, &[0.0], &[1.0], BnMode::Train, 0.0, 0.1)
            .is_err());
    }

    #[test]
    fn frozen_bn_blocks_affine_grads_but_passes_input_grads() {
        let mut g = Graph::new();
        let x = leafr(&mut g, vec![1, 1, 1, 2], vec![1.0, 3.0]);
        let ga = leafr(&mut g, vec![1], vec![2.0]);
        let be = leafr(&mut g, vec![1], vec![0.5]);
        let (y, upd) = g
            .batch_norm(x, ga, be, &[1.0], &[4.0], BnMode::Frozen, 1e-5, 0.1)
            .unwrap();
        assert!(upd.is_none());
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(ga).is_none());
        assert!(grads.get(be).is_none());
        let gx = grads.get(x).unwrap();
        // d/dx of gamma*(x-rm)/sqrt(rv+eps) = 2/sqrt(4+eps) ~ 1.0
        assert!((gx[0] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn global_avg_pool_examples() {
        let mut g = Graph::new();
        let x = leafr(&mut g, vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let y = g.global_avg_pool(x).unwrap();
        assert_eq!(g.data(y), &[2.5]);
        let c = leafr(&mut g, vec![2, 3, 2, 2], vec![7.0; 24]);
        let yc = g.global_avg_pool(c).unwrap();
        assert!(g.data(yc).iter().all(|&v| (v - 7.0).abs() < 1e-6));
    }

    #[test]
    fn linear_identity_weight_passes_through() {
        let mut g = Graph::new();
        let x = leafr(&mut g, vec![1, 3], vec![1.0, -2.0, 0.5]);
        let w = leafr(
            &mut g,
            vec![3, 3],
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        );
        let b = leafr(&mut g, vec![3], vec![0.0; 3]);
        let y = g.linear(x, w, b).unwrap();
        assert_eq!(g.data(y), g.data(x));
    }

    #[test]
    fn linear_rejects_dim_mismatch() {
        let mut g = Graph::new();
        let x = leafr(&mut g, vec![1, 3], vec![0.0; 3]);
        let w = leafr(&mut g, vec![2, 4], vec![0.0; 8]);
        let b = leafr(&mut g, vec![2], vec![0.0; 2]);
        assert!(g.linear(x, w, b).is_err());
    }

    #[test]
    fn sgd_like_identity_conv_grad_flows() {
        // depthwise behavior: groups = cin = cout
        let mut g = Graph::new();
        let x = leafr(&mut g, vec![1, 2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let w = leafr(&mut g, vec![2, 1, 1, 1], vec![1.0, 1.0]);
        let spec = ConvSpec::new((1, 1), (1, 1), (0, 0)).with_groups(2);
        let y = g.conv2d(x, w, None, &spec).unwrap();
        assert_eq!(g.data(y), g.data(x));
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0; 8]);
        // dL/dw[c] = sum of channel c inputs
        assert_eq!(grads.get(w).unwrap(), &[1.0 + 2.0 + 3.0 + 4.0, 5.0 + 6.0 + 7.0 + 8.0]);
    }
}
