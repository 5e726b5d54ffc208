//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation eagerly; [`Graph::backward`] walks the
//! tape in reverse. Parameters are bound lazily from a [`ParamStore`] so one
//! graph corresponds to one forward pass.

use std::borrow::Cow;
use std::collections::HashMap;

use crate::error::{invalid, Result};
use crate::nn::{ParamId, ParamStore};
use crate::tensor::{conv2d, conv2d_backward, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        dilation: usize,
        padding: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    LinComb(Vec<(Var, f64)>),
    Prelu {
        x: Var,
        slope: Var,
    },
    Relu(Var),
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    Sigmoid(Var),
    GlobalAvgPool(Var),
    ChannelScale {
        x: Var,
        gate: Var,
    },
    Concat(Vec<Var>),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
        /// Batch statistics were used (training mode).
        batch_stats: bool,
    },
    ChannelAffine {
        x: Var,
        scale: Vec<f64>,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    MeanAbs(Var),
    Ratio {
        anchor: Var,
        positive: Tensor,
        negatives: Vec<Var>,
        weight: f64,
        eps: f64,
    },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Batch statistics observed by a training-mode batch-norm layer.
#[derive(Clone, Debug)]
pub struct BnObservation {
    pub layer: usize,
    pub mean: Vec<f64>,
    /// Biased (population) variance over the batch.
    pub var: Vec<f64>,
    pub count: usize,
}

pub struct Graph<'a> {
    store: Option<&'a ParamStore>,
    nodes: Vec<Node<'a>>,
    params: HashMap<ParamId, Var>,
    pub(crate) bn_observations: Vec<BnObservation>,
}

impl<'a> Graph<'a> {
    /// A graph whose parameters are read from `store`.
    pub fn new(store: &'a ParamStore) -> Self {
        Graph {
            store: Some(store),
            nodes: Vec::new(),
            params: HashMap::new(),
            bn_observations: Vec::new(),
        }
    }

    /// A graph with no parameter store (constants and inputs only).
    pub fn detached() -> Self {
        Graph {
            store: None,
            nodes: Vec::new(),
            params: HashMap::new(),
            bn_observations: Vec::new(),
        }
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that receives gradients (e.g. an input image under test).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    pub fn constant_ref(&mut self, t: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, false)
    }

    /// Bind a trainable parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let store = self.store.expect("graph has no parameter store");
        let v = self.push(Cow::Borrowed(store.get(id)), Op::Leaf, true);
        self.params.insert(id, v);
        v
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        dilation: usize,
        padding: usize,
    ) -> Result<Var> {
        let out = conv2d(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            dilation,
            padding,
        )?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Cow::Owned(out),
            Op::Conv2d {
                x,
                w,
                b,
                dilation,
                padding,
            },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Cow::Owned(out), Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Cow::Owned(out), Op::Sub(a, b), rg))
    }

    /// `sum_i c_i * v_i` over same-shaped operands.
    pub fn lincomb(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let (first, _) = *terms.first().ok_or_else(|| invalid("empty linear combination"))?;
        let mut out = Tensor::zeros(self.value(first).shape());
        for &(v, c) in terms {
            let t = self.value(v);
            if t.shape() != out.shape() {
                return Err(invalid("lincomb: shape mismatch"));
            }
            for (o, x) in out.data_mut().iter_mut().zip(t.data()) {
                *o += c * x;
            }
        }
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        Ok(self.push(Cow::Owned(out), Op::LinComb(terms.to_vec()), rg))
    }

    pub fn scale(&mut self, v: Var, c: f64) -> Var {
        self.lincomb(&[(v, c)]).expect("single-term lincomb")
    }

    /// Parametric ReLU with one slope per channel (`slope` is `[1, C, 1, 1]`).
    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        let xv = self.value(x);
        let sv = self.value(slope);
        let [n, c, h, w] = xv.shape();
        if sv.len() != c {
            return Err(invalid(format!("prelu: {} slopes for {} channels", sv.len(), c)));
        }
        let plane = h * w;
        let mut out = xv.clone();
        for b in 0..n {
            for ch in 0..c {
                let a = sv.data()[ch];
                let off = (b * c + ch) * plane;
                for v in &mut out.data_mut()[off..off + plane] {
                    if *v <= 0.0 {
                        *v *= a;
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(slope);
        Ok(self.push(Cow::Owned(out), Op::Prelu { x, slope }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(Cow::Owned(out), Op::Relu(x), rg)
    }

    /// Elementwise clamp to `[lo, hi]`; the gradient passes where `lo <= x <= hi`.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(x).map(|v| v.clamp(lo, hi));
        let rg = self.rg(x);
        self.push(Cow::Owned(out), Op::Clamp { x, lo, hi }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(Cow::Owned(out), Op::Sigmoid(x), rg)
    }

    /// `[N, C, H, W] -> [N, C, 1, 1]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape();
        let plane = (h * w) as f64;
        let data = xv
            .data()
            .chunks(h * w)
            .map(|p| p.iter().sum::<f64>() / plane)
            .collect();
        let out = Tensor::from_vec([n, c, 1, 1], data).expect("pool shape");
        let rg = self.rg(x);
        self.push(Cow::Owned(out), Op::GlobalAvgPool(x), rg)
    }

    /// Multiply every channel plane of `x` by the matching entry of `gate`
    /// (`[N, C, 1, 1]`).
    pub fn channel_scale(&mut self, x: Var, gate: Var) -> Result<Var> {
        let xv = self.value(x);
        let gv = self.value(gate);
        let [n, c, h, w] = xv.shape();
        if gv.shape() != [n, c, 1, 1] {
            return Err(invalid(format!(
                "channel_scale: gate {:?} does not fit input {:?}",
                gv.shape(),
                xv.shape()
            )));
        }
        let mut out = xv.clone();
        for (i, p) in out.data_mut().chunks_mut(h * w).enumerate() {
            let s = gv.data()[i];
            p.iter_mut().for_each(|v| *v *= s);
        }
        let rg = self.rg(x) || self.rg(gate);
        Ok(self.push(Cow::Owned(out), Op::ChannelScale { x, gate }, rg))
    }

    /// Concatenate along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| invalid("concat of nothing"))?);
        let [n, _, h, w] = first.shape();
        let mut total_c = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s[0] != n || s[2] != h || s[3] != w {
                return Err(invalid("concat: mismatched batch or spatial size"));
            }
            total_c += s[1];
        }
        let mut out = Tensor::zeros([n, total_c, h, w]);
        for b in 0..n {
            let mut off = 0;
            for &p in parts {
                let src = self.value(p).item(b);
                out.item_mut(b)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Cow::Owned(out), Op::Concat(parts.to_vec()), rg))
    }

    /// Per-channel batch normalization. With `running = None` the batch
    /// statistics are used and reported through [`BnObservation`]; otherwise
    /// the supplied `(mean, var)` are applied as fixed constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        layer: usize,
        running: Option<(&[f64], &[f64])>,
    ) -> Result<Var> {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape();
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.len() != c || bv.len() != c {
            return Err(invalid("batch_norm: affine parameters do not match channels"));
        }
        let plane = h * w;
        let count = n * plane;
        let (mean, var) = match running {
            Some((m, v)) => (m.to_vec(), v.to_vec()),
            None => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for b in 0..n {
                        let off = (b * c + ch) * plane;
                        s += xv.data()[off..off + plane].iter().sum::<f64>();
                    }
                    let mu = s / count as f64;
                    let mut q = 0.0;
                    for b in 0..n {
                        let off = (b * c + ch) * plane;
                        q += xv.data()[off..off + plane]
                            .iter()
                            .map(|v| (v - mu) * (v - mu))
                            .sum::<f64>();
                    }
                    mean[ch] = mu;
                    var[ch] = q / count as f64;
                }
                (mean, var)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = xv.clone();
        let mut out = xv.clone();
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * plane;
                let (g, be) = (gv.data()[ch], bv.data()[ch]);
                for i in off..off + plane {
                    let xh = (xv.data()[i] - mean[ch]) * inv_std[ch];
                    xhat.data_mut()[i] = xh;
                    out.data_mut()[i] = g * xh + be;
                }
            }
        }
        let batch_stats = running.is_none();
        if batch_stats {
            self.bn_observations.push(BnObservation {
                layer,
                mean,
                var,
                count,
            });
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Cow::Owned(out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        ))
    }

    /// `y[:, c] = scale[c] * x[:, c] + shift[c]` with constant coefficients.
    pub fn channel_affine(&mut self, x: Var, scale: &[f64], shift: &[f64]) -> Result<Var> {
        let xv = self.value(x);
        let [_, c, h, w] = xv.shape();
        if scale.len() != c || shift.len() != c {
            return Err(invalid("channel_affine: coefficient count mismatch"));
        }
        let mut out = xv.clone();
        for (i, p) in out.data_mut().chunks_mut(h * w).enumerate() {
            let ch = i % c;
            p.iter_mut().for_each(|v| *v = scale[ch] * *v + shift[ch]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Cow::Owned(out),
            Op::ChannelAffine {
                x,
                scale: scale.to_vec(),
            },
            rg,
        ))
    }

    /// 2x2 max pooling with stride 2 (odd trailing rows/columns dropped).
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape();
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return Err(invalid(format!("max_pool2: input {h}x{w} too small")));
        }
        let mut out = Tensor::zeros([n, c, oh, ow]);
        let mut argmax = Vec::with_capacity(out.len());
        let mut o = 0;
        for b in 0..n {
            for ch in 0..c {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut best = xv.index(b, ch, 2 * y, 2 * xx);
                        for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                            let i = xv.index(b, ch, 2 * y + dy, 2 * xx + dx);
                            if xv.data()[i] > xv.data()[best] {
                                best = i;
                            }
                        }
                        out.data_mut()[o] = xv.data()[best];
                        argmax.push(best);
                        o += 1;
                    }
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Cow::Owned(out), Op::MaxPool2 { x, argmax }, rg))
    }

    /// Mean absolute value over all elements (scalar).
    pub fn mean_abs(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let m = xv.data().iter().map(|v| v.abs()).sum::<f64>() / xv.len() as f64;
        let rg = self.rg(x);
        self.push(Cow::Owned(Tensor::scalar(m)), Op::MeanAbs(x), rg)
    }

    /// `(1/N) sum_n sum_k weight * |P_n - A_n|^2 / (|Q_kn - A_n|^2 + eps)`.
    /// `P` is a constant; gradients flow into the anchor and into any
    /// negative that requires them.
    pub fn ratio_loss(
        &mut self,
        anchor: Var,
        positive: Tensor,
        negatives: &[Var],
        weight: f64,
        eps: f64,
    ) -> Result<Var> {
        let a = self.value(anchor);
        if positive.shape() != a.shape() || negatives.iter().any(|&q| self.value(q).shape() != a.shape()) {
            return Err(invalid("ratio_loss: feature shapes differ"));
        }
        if negatives.is_empty() {
            return Err(invalid("ratio_loss: at least one negative is required"));
        }
        let n = a.batch();
        let mut total = 0.0;
        for b in 0..n {
            let num = sq_dist(positive.item(b), a.item(b));
            for &q in negatives {
                total += weight * num / (sq_dist(self.value(q).item(b), a.item(b)) + eps);
            }
        }
        let rg = self.rg(anchor) || negatives.iter().any(|&q| self.rg(q));
        let negatives = negatives.to_vec();
        Ok(self.push(
            Cow::Owned(Tensor::scalar(total / n as f64)),
            Op::Ratio {
                anchor,
                positive,
                negatives,
                weight,
                eps,
            },
            rg,
        ))
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(loss) {
            return Gradients { grads };
        }
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            self.backward_node(node, &gout, &mut grads);
        }
        Gradients { grads }
    }

    fn backward_node(&self, node: &Node, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, g: Tensor| {
            if !self.rg(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(t) => t.add_assign(&g),
                slot => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                dilation,
                padding,
            } => {
                let (gx, gw) = conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    gout,
                    *dilation,
                    *padding,
                    self.rg(*x),
                    self.rg(*w),
                );
                if let Some(gx) = gx {
                    acc(*x, gx);
                }
                if let Some(gw) = gw {
                    acc(*w, gw);
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let [n, c, h, w] = gout.shape();
                        let mut gb = Tensor::zeros(self.value(*b).shape());
                        for bi in 0..n {
                            for ch in 0..c {
                                let off = (bi * c + ch) * h * w;
                                gb.data_mut()[ch] += gout.data()[off..off + h * w].iter().sum::<f64>();
                            }
                        }
                        acc(*b, gb);
                    }
                }
            }
            Op::Add(a, b) => {
                acc(*a, gout.clone());
                acc(*b, gout.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, gout.clone());
                acc(*b, gout.map(|v| -v));
            }
            Op::LinComb(terms) => {
                for &(v, c) in terms {
                    acc(v, gout.map(|g| g * c));
                }
            }
            Op::Prelu { x, slope } => {
                let xv = self.value(*x);
                let sv = self.value(*slope);
                let [n, c, h, w] = xv.shape();
                let plane = h * w;
                let mut gx = gout.clone();
                let mut gs = Tensor::zeros(sv.shape());
                for b in 0..n {
                    for ch in 0..c {
                        let a = sv.data()[ch];
                        let off = (b * c + ch) * plane;
                        for i in off..off + plane {
                            let xi = xv.data()[i];
                            if xi <= 0.0 {
                                gs.data_mut()[ch] += gout.data()[i] * xi;
                                gx.data_mut()[i] *= a;
                            }
                        }
                    }
                }
                acc(*x, gx);
                acc(*slope, gs);
            }
            Op::Relu(x) => {
                let g = gout
                    .zip_map(self.value(*x), |g, v| if v > 0.0 { g } else { 0.0 })
                    .expect("same shape");
                acc(*x, g);
            }
            Op::Clamp { x, lo, hi } => {
                let g = gout
                    .zip_map(self.value(*x), |g, v| if (*lo..=*hi).contains(&v) { g } else { 0.0 })
                    .expect("same shape");
                acc(*x, g);
            }
            Op::Sigmoid(x) => {
                let g = gout
                    .zip_map(&node.value, |g, s| g * s * (1.0 - s))
                    .expect("same shape");
                acc(*x, g);
            }
            Op::GlobalAvgPool(x) => {
                let shape = self.value(*x).shape();
                let plane = shape[2] * shape[3];
                let mut g = Tensor::zeros(shape);
                for (i, p) in g.data_mut().chunks_mut(plane).enumerate() {
                    p.fill(gout.data()[i] / plane as f64);
                }
                acc(*x, g);
            }
            Op::ChannelScale { x, gate } => {
                let xv = self.value(*x);
                let gv = self.value(*gate);
                let plane = xv.height() * xv.width();
                let mut gx = gout.clone();
                let mut gg = Tensor::zeros(gv.shape());
                for (i, p) in gx.data_mut().chunks_mut(plane).enumerate() {
                    let s = gv.data()[i];
                    let xs = &xv.data()[i * plane..(i + 1) * plane];
                    gg.data_mut()[i] = p.iter().zip(xs).map(|(g, x)| g * x).sum();
                    p.iter_mut().for_each(|v| *v *= s);
                }
                acc(*x, gx);
                acc(*gate, gg);
            }
            Op::Concat(parts) => {
                let n = gout.batch();
                let mut offs = 0;
                for &p in parts {
                    let shape = self.value(p).shape();
                    let sz = shape[1] * shape[2] * shape[3];
                    if self.rg(p) {
                        let mut g = Tensor::zeros(shape);
                        for b in 0..n {
                            g.item_mut(b).copy_from_slice(&gout.item(b)[offs..offs + sz]);
                        }
                        acc(p, g);
                    }
                    offs += sz;
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let [n, c, h, w] = xhat.shape();
                let plane = h * w;
                let m = (n * plane) as f64;
                let gv = self.value(*gamma);
                let mut ggamma = Tensor::zeros(gv.shape());
                let mut gbeta = Tensor::zeros(gv.shape());
                let mut gx = Tensor::zeros(xhat.shape());
                for ch in 0..c {
                    let (mut sdy, mut sdyx) = (0.0, 0.0);
                    for b in 0..n {
                        let off = (b * c + ch) * plane;
                        for i in off..off + plane {
                            sdy += gout.data()[i];
                            sdyx += gout.data()[i] * xhat.data()[i];
                        }
                    }
                    ggamma.data_mut()[ch] = sdyx;
                    gbeta.data_mut()[ch] = sdy;
                    let g = gv.data()[ch];
                    for b in 0..n {
                        let off = (b * c + ch) * plane;
                        for i in off..off + plane {
                            gx.data_mut()[i] = if *batch_stats {
                                g * inv_std[ch] / m
                                    * (m * gout.data()[i] - sdy - xhat.data()[i] * sdyx)
                            } else {
                                g * inv_std[ch] * gout.data()[i]
                            };
                        }
                    }
                }
                acc(*x, gx);
                acc(*gamma, ggamma);
                acc(*beta, gbeta);
            }
            Op::ChannelAffine { x, scale } => {
                let c = scale.len();
                let plane = gout.height() * gout.width();
                let mut g = gout.clone();
                for (i, p) in g.data_mut().chunks_mut(plane).enumerate() {
                    let s = scale[i % c];
                    p.iter_mut().for_each(|v| *v *= s);
                }
                acc(*x, g);
            }
            Op::MaxPool2 { x, argmax } => {
                let mut g = Tensor::zeros(self.value(*x).shape());
                for (o, &i) in argmax.iter().enumerate() {
                    g.data_mut()[i] += gout.data()[o];
                }
                acc(*x, g);
            }
            Op::MeanAbs(x) => {
                let xv = self.value(*x);
                let s = gout.data()[0] / xv.len() as f64;
                acc(*x, xv.map(|v| s * sign(v)));
            }
            Op::Ratio {
                anchor,
                positive,
                negatives,
                weight,
                eps,
            } => {
                let a = self.value(*anchor);
                let n = a.batch();
                let scale = gout.data()[0] * weight / n as f64;
                let mut g = Tensor::zeros(a.shape());
                let mut gq: Vec<Tensor> = negatives.iter().map(|_| Tensor::zeros(a.shape())).collect();
                for b in 0..n {
                    let (ab, pb) = (a.item(b), positive.item(b));
                    let num = sq_dist(pb, ab);
                    let gb = g.item_mut(b);
                    for (q, gqk) in negatives.iter().zip(&mut gq) {
                        let qb = self.value(*q).item(b);
                        let den = sq_dist(qb, ab) + eps;
                        let c_num = 2.0 / den;
                        let c_den = 2.0 * num / (den * den);
                        let gqb = gqk.item_mut(b);
                        for i in 0..gb.len() {
                            gb[i] += scale * (c_num * (ab[i] - pb[i]) - c_den * (ab[i] - qb[i]));
                            gqb[i] -= scale * c_den * (qb[i] - ab[i]);
                        }
                    }
                }
                acc(*anchor, g);
                for (q, gqk) in negatives.iter().zip(gq) {
                    acc(*q, gqk);
                }
            }
        }
    }

    /// Parameter nodes bound in this graph.
    pub fn bound_params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.params.iter().map(|(&p, &v)| (p, v))
    }

    pub fn bn_observations(&self) -> &[BnObservation] {
        &self.bn_observations
    }

    /// Which branch every non-smooth op took: the sign of PReLU/ReLU and
    /// absolute-value inputs and the max-pool winners. Two evaluations with
    /// equal patterns lie on the same smooth piece of the loss.
    pub fn kink_pattern(&self) -> Vec<i64> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Prelu { x, .. } | Op::Relu(x) | Op::MeanAbs(x) => {
                    out.extend(self.value(*x).data().iter().map(|&v| sign(v) as i64));
                }
                Op::Clamp { x, lo, hi } => {
                    out.extend(self.value(*x).data().iter().map(|&v| (v > *hi) as i64 - (v < *lo) as i64));
                }
                Op::MaxPool2 { argmax, .. } => out.extend(argmax.iter().map(|&i| i as i64)),
                _ => {}
            }
        }
        out
    }
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradients indexed by parameter; parameters absent from the graph (or
    /// unreachable from the loss) yield `None`.
    pub fn params(&self, graph: &Graph, store: &ParamStore) -> Vec<Option<Tensor>> {
        let mut out: Vec<Option<Tensor>> = (0..store.len()).map(|_| None).collect();
        for (p, v) in graph.bound_params() {
            out[p.index()] = self.grads[v.0].clone();
        }
        out
    }
}

#[inline]
pub(crate) fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Subgradient convention: `sign(0) = 0`.
#[inline]
pub(crate) fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg(shape: crate::tensor::Shape, seed: u64) -> Tensor {
        let mut s = seed ^ 0x9E3779B97F4A7C15;
        Tensor::from_fn(shape, |_, _, _, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    /// Central-difference check of d(loss)/d(input) for a graph builder.
    fn check(build: impl Fn(&mut Graph, Var) -> Var, x: Tensor) {
        let mut g = Graph::detached();
        let xv = g.input(x.clone());
        let loss = build(&mut g, xv);
        let grads = g.backward(loss);
        let analytic = grads.get(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
        let h = 1e-5;
        for i in 0..x.len() {
            let eval = |delta: f64| {
                let mut xp = x.clone();
                xp.data_mut()[i] += delta;
                let mut g = Graph::detached();
                let v = g.input(xp);
                let l = build(&mut g, v);
                g.value(l).data()[0]
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[i];
            let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            assert!(err < 1e-5, "element {i}: analytic {a} vs fd {fd}");
        }
    }

    #[test]
    fn grad_conv_prelu_chain() {
        let w = lcg([2, 3, 3, 3], 1);
        let s = Tensor::from_vec([1, 2, 1, 1], vec![0.25, 0.1]).unwrap();
        check(
            |g, x| {
                let wv = g.constant(w.clone());
                let sv = g.constant(s.clone());
                let y = g.conv2d(x, wv, None, 2, 2).unwrap();
                let y = g.prelu(y, sv).unwrap();
                g.mean_abs(y)
            },
            lcg([2, 3, 5, 6], 2),
        );
    }

    #[test]
    fn grad_se_style_ops() {
        check(
            |g, x| {
                let p = g.global_avg_pool(x);
                let s = g.sigmoid(p);
                let y = g.channel_scale(x, s).unwrap();
                let c = g.concat(&[y, x]).unwrap();
                let r = g.relu(c);
                let z = g.max_pool2(r).unwrap();
                g.mean_abs(z)
            },
            lcg([2, 2, 4, 5], 3),
        );
    }

    #[test]
    fn grad_batch_norm_train() {
        let gamma = Tensor::from_vec([1, 2, 1, 1], vec![1.3, -0.7]).unwrap();
        let beta = Tensor::from_vec([1, 2, 1, 1], vec![0.1, 0.2]).unwrap();
        let q = lcg([2, 2, 3, 3], 9);
        check(
            |g, x| {
                let gv = g.constant(gamma.clone());
                let bv = g.constant(beta.clone());
                let y = g.batch_norm(x, gv, bv, 1e-5, 0, None).unwrap();
                let qv = g.constant(q.clone());
                let d = g.sub(y, qv).unwrap();
                g.mean_abs(d)
            },
            lcg([2, 2, 3, 3], 4),
        );
    }

    #[test]
    fn grad_ratio_loss() {
        let p = lcg([2, 1, 3, 3], 5);
        let negs = vec![lcg([2, 1, 3, 3], 6), lcg([2, 1, 3, 3], 7)];
        check(
            |g, x| {
                let q: Vec<Var> = negs.iter().map(|t| g.constant(t.clone())).collect();
                g.ratio_loss(x, p.clone(), &q, 0.5, 1e-7).unwrap()
            },
            lcg([2, 1, 3, 3], 8),
        );
    }

    #[test]
    fn grad_ratio_loss_through_negatives() {
        let p = lcg([2, 1, 3, 3], 5);
        let shift = lcg([2, 1, 3, 3], 6).map(|v| 0.3 * v);
        let other = lcg([2, 1, 3, 3], 7);
        check(
            |g, x| {
                let s = g.constant(shift.clone());
                let q0 = g.add(x, s).unwrap();
                let q0 = g.clamp(q0, 0.0, 1.0);
                let q0 = g.sigmoid(q0);
                let q1 = g.constant(other.clone());
                let a = g.sigmoid(x);
                g.ratio_loss(a, p.clone(), &[q0, q1], 0.5, 1e-7).unwrap()
            },
            lcg([2, 1, 3, 3], 8),
        );
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::detached();
        let c = g.constant(Tensor::scalar(2.0));
        let x = g.input(Tensor::scalar(3.0));
        let y = g.lincomb(&[(c, 1.0), (x, 4.0)]).unwrap();
        let grads = g.backward(y);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().data()[0], 4.0);
    }
}
