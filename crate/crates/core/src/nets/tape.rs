//! Reverse-mode differentiation over a linear record of tensor operations.

use crate::error::{contract, Error, Result};

use super::params::ParamStore;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {} values, got {}",
                shape.iter().product::<usize>(),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row `i` of a 2-d tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }
}

pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// "Same" padding: output `ceil(n / stride)`, extra padding after.
fn same_padding(n: usize, k: usize, stride: usize) -> (usize, usize) {
    let out = n.div_ceil(stride);
    let total = ((out - 1) * stride + k).saturating_sub(n);
    (out, total / 2)
}

#[derive(Debug, Clone)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    oh: usize,
    ow: usize,
    pad_top: usize,
    pad_left: usize,
}

impl ConvGeom {
    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let area = self.oh * self.ow;
        for ci in 0..self.c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let out = &mut cols[row * area..(row + 1) * area];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad_top as isize;
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad_left as isize;
                            out[oy * self.ow + ox] = if iy >= 0
                                && (iy as usize) < self.h
                                && ix >= 0
                                && (ix as usize) < self.w
                            {
                                x[(ci * self.h + iy as usize) * self.w + ix as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let area = self.oh * self.ow;
        for ci in 0..self.c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let src = &cols[row * area..(row + 1) * area];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad_top as isize;
                        if iy < 0 || iy as usize >= self.h {
                            continue;
                        }
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad_left as isize;
                            if ix >= 0 && (ix as usize) < self.w {
                                dx[(ci * self.h + iy as usize) * self.w + ix as usize] +=
                                    src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `c[m x n] (+)= a[m x k] * b[k x n]`, with optional transposes given as strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices hold at least m*k, k*n and m*n elements laid out
    // with the strides above, checked in debug builds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            if accumulate { 1.0 } else { 0.0 },
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(usize),
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Conv {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        mode: Mode,
    },
    Relu(NodeId),
    Tanh(NodeId),
    Softplus(NodeId),
    /// Softplus on the listed columns of a 2-d tensor, identity elsewhere.
    SoftplusColumns(NodeId, Vec<bool>),
    Softmax(NodeId),
    Scale(NodeId, f64),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MaxPool {
        x: NodeId,
        argmax: Vec<usize>,
    },
    Reshape(NodeId),
    /// Columns of each part scattered into the output's columns.
    Scatter(Vec<(NodeId, Vec<usize>)>),
    Gather {
        x: NodeId,
        source: Vec<usize>,
    },
    Sum(NodeId),
    /// A scalar computed outside the tape with known partial derivatives.
    Custom(Vec<(NodeId, Vec<f64>)>),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Running batch-norm statistics observed during a training forward pass,
/// to be folded into the store by the optimiser.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean_param: usize,
    pub var_param: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    pub batch_stats: Vec<BatchStats>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore, index: usize) -> NodeId {
        let e = &store.entries[index];
        self.push(
            Tensor {
                shape: e.shape.clone(),
                data: e.data.clone(),
            },
            Op::Param(index),
        )
    }

    /// `x[N, I] * w[I, O] + b[O]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xs, ws, bs) = (&self.value(x).shape, &self.value(w).shape, &self.value(b).shape);
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] || bs != &[ws[1]] {
            return Err(Error::Shape(format!("linear {xs:?} x {ws:?} + {bs:?}")));
        }
        let (n, i, o) = (xs[0], xs[1], ws[1]);
        let mut out = Vec::with_capacity(n * o);
        for _ in 0..n {
            out.extend_from_slice(&self.value(b).data);
        }
        gemm(n, i, o, &self.value(x).data, false, &self.value(w).data, false, &mut out, true);
        Ok(self.push(Tensor { shape: vec![n, o], data: out }, Op::Linear { x, w, b }))
    }

    /// Square-kernel convolution with "same" padding over `x[N, C, H, W]`,
    /// weights `w[O, C, k, k]`, bias `b[O]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize) -> Result<NodeId> {
        let (xs, ws) = (self.value(x).shape.clone(), self.value(w).shape.clone());
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] || stride == 0 {
            return Err(Error::Shape(format!("conv {xs:?} with {ws:?}")));
        }
        if self.value(b).shape != [ws[0]] {
            return Err(Error::Shape("conv bias length".into()));
        }
        let (oh, pad_top) = same_padding(xs[2], ws[2], stride);
        let (ow, pad_left) = same_padding(xs[3], ws[2], stride);
        let geom = ConvGeom {
            n: xs[0],
            c: xs[1],
            h: xs[2],
            w: xs[3],
            k: ws[2],
            stride,
            oh,
            ow,
            pad_top,
            pad_left,
        };
        let o = ws[0];
        let ckk = geom.c * geom.k * geom.k;
        let area = oh * ow;
        let in_size = geom.c * geom.h * geom.w;
        let mut cols = vec![0.0; geom.n * ckk * area];
        let mut out = vec![0.0; geom.n * o * area];
        for n in 0..geom.n {
            let col = &mut cols[n * ckk * area..(n + 1) * ckk * area];
            geom.im2col(&self.value(x).data[n * in_size..(n + 1) * in_size], col);
            let dst = &mut out[n * o * area..(n + 1) * o * area];
            for (oc, bias) in self.value(b).data.iter().enumerate() {
                dst[oc * area..(oc + 1) * area].fill(*bias);
            }
            gemm(o, ckk, area, &self.value(w).data, false, col, false, dst, true);
        }
        let value = Tensor {
            shape: vec![geom.n, o, oh, ow],
            data: out,
        };
        Ok(self.push(value, Op::Conv { x, w, b, geom, cols }))
    }

    /// Batch normalisation over every axis except axis 1. In training mode the
    /// batch statistics are used and recorded for the running averages.
    pub fn batch_norm(
        &mut self,
        store: &ParamStore,
        x: NodeId,
        names: BatchNormParams,
        mode: Mode,
    ) -> Result<NodeId> {
        let shape = self.value(x).shape.clone();
        if shape.len() < 2 {
            return Err(Error::Shape("batch norm needs a channel axis".into()));
        }
        let (n, c) = (shape[0], shape[1]);
        let s: usize = shape[2..].iter().product();
        let gamma = self.param(store, names.gamma);
        let beta = self.param(store, names.beta);
        let count = (n * s) as f64;
        let data = self.value(x).data.clone();
        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * s;
                        mean[ch] += data[base..base + s].iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count);
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * s;
                        var[ch] += data[base..base + s]
                            .iter()
                            .map(|v| (v - mean[ch]) * (v - mean[ch]))
                            .sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= count);
                self.batch_stats.push(BatchStats {
                    mean_param: names.running_mean,
                    var_param: names.running_var,
                    mean: mean.clone(),
                    var: var.clone(),
                });
                (mean, var)
            }
            Mode::Eval => (
                store.entries[names.running_mean].data.clone(),
                store.entries[names.running_var].data.clone(),
            ),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (g, bt) = (&self.value(gamma).data, &self.value(beta).data);
        let mut xhat = vec![0.0; data.len()];
        let mut out = vec![0.0; data.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * s;
                for j in base..base + s {
                    xhat[j] = (data[j] - mean[ch]) * inv_std[ch];
                    out[j] = g[ch] * xhat[j] + bt[ch];
                }
            }
        }
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            mode,
        };
        Ok(self.push(Tensor { shape, data: out }, op))
    }

    fn unary(&mut self, x: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let v = &self.value(x);
        let value = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&a| f(a)).collect(),
        };
        self.push(value, op)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |a| a.max(0.0), Op::Relu(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        self.unary(x, softplus, Op::Softplus(x))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        self.unary(x, |a| c * a, Op::Scale(x, c))
    }

    pub fn softplus_columns(&mut self, x: NodeId, columns: &[usize]) -> Result<NodeId> {
        let shape = self.value(x).shape.clone();
        if shape.len() != 2 || columns.iter().any(|&c| c >= shape[1]) {
            return Err(Error::Shape(format!("softplus columns on {shape:?}")));
        }
        let mut mask = vec![false; shape[1]];
        for &c in columns {
            mask[c] = true;
        }
        let data = self
            .value(x)
            .data
            .iter()
            .enumerate()
            .map(|(i, &a)| if mask[i % shape[1]] { softplus(a) } else { a })
            .collect();
        Ok(self.push(Tensor { shape, data }, Op::SoftplusColumns(x, mask)))
    }

    /// Row-wise softmax of a 2-d tensor.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.value(x).shape.clone();
        if shape.len() != 2 {
            return Err(Error::Shape(format!("softmax on {shape:?}")));
        }
        let mut data = self.value(x).data.clone();
        for row in data.chunks_mut(shape[1]) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        Ok(self.push(Tensor { shape, data }, Op::Softmax(x)))
    }

    fn binary(&mut self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<NodeId> {
        if self.value(a).shape != self.value(b).shape {
            return Err(Error::Shape(format!(
                "{:?} vs {:?}",
                self.value(a).shape,
                self.value(b).shape
            )));
        }
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.value(a).shape.clone();
        Ok(self.push(Tensor { shape, data }, op))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// 2x2 max pooling with stride 2; odd borders keep a partial window.
    /// Ties go to the first maximal element in row-major window order.
    pub fn max_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.value(x).shape.clone();
        if shape.len() != 4 {
            return Err(Error::Shape(format!("max pool on {shape:?}")));
        }
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
        let src = &self.value(x).data;
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for y in 2 * oy..(2 * oy + 2).min(h) {
                        for x in 2 * ox..(2 * ox + 2).min(w) {
                            let i = base + y * w + x;
                            if src[i] > src[best] {
                                best = i;
                            }
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor {
            shape: vec![n, c, oh, ow],
            data: out,
        };
        Ok(self.push(value, Op::MaxPool { x, argmax }))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let data = self.value(x).data.clone();
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    /// Assembles a `[N, width]` tensor whose column `map[j]` is column `j` of
    /// the corresponding part. Every output column must be covered once.
    pub fn scatter_columns(&mut self, parts: Vec<(NodeId, Vec<usize>)>, width: usize) -> Result<NodeId> {
        let rows = match parts.first() {
            Some((id, _)) => self.value(*id).shape[0],
            None => return contract("scatter needs at least one part"),
        };
        let mut seen = vec![false; width];
        let mut out = vec![0.0; rows * width];
        for (id, map) in &parts {
            let v = self.value(*id);
            if v.shape != [rows, map.len()] {
                return Err(Error::Shape(format!("scatter part {:?}", v.shape)));
            }
            for (j, &dst) in map.iter().enumerate() {
                if dst >= width || seen[dst] {
                    return contract("scatter columns must cover the output exactly once");
                }
                seen[dst] = true;
                for r in 0..rows {
                    out[r * width + dst] = v.data[r * map.len() + j];
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return contract("scatter columns must cover the output exactly once");
        }
        Ok(self.push(
            Tensor {
                shape: vec![rows, width],
                data: out,
            },
            Op::Scatter(parts),
        ))
    }

    /// Element-wise gather from a 2-d tensor: output `[source.len() / cols, cols]`
    /// where flat output entry `i` is flat input entry `source[i]`.
    pub fn gather(&mut self, x: NodeId, source: Vec<usize>, cols: usize) -> Result<NodeId> {
        let v = self.value(x);
        if cols == 0 || source.len() % cols != 0 || source.iter().any(|&s| s >= v.len()) {
            return Err(Error::Shape("gather indices out of range".into()));
        }
        let data = source.iter().map(|&s| v.data[s]).collect();
        let shape = vec![source.len() / cols, cols];
        Ok(self.push(Tensor { shape, data }, Op::Gather { x, source }))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data.iter().sum();
        self.push(
            Tensor {
                shape: vec![1],
                data: vec![s],
            },
            Op::Sum(x),
        )
    }

    /// A scalar node with value `value` and partial derivatives `grads`
    /// (one per input, matching that input's length).
    pub fn custom(&mut self, value: f64, inputs: Vec<(NodeId, Vec<f64>)>) -> Result<NodeId> {
        for (id, g) in &inputs {
            if g.len() != self.value(*id).len() {
                return Err(Error::Shape("custom node gradient length".into()));
            }
        }
        Ok(self.push(
            Tensor {
                shape: vec![1],
                data: vec![value],
            },
            Op::Custom(inputs),
        ))
    }

    /// Gradients of the scalar `loss` with respect to every parameter of
    /// `store`, aligned with its entries (zeros where unused).
    pub fn backward(&self, loss: NodeId, store: &ParamStore) -> Result<Vec<Vec<f64>>> {
        if self.value(loss).len() != 1 {
            return contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss + 1];
        grads[loss] = Some(vec![1.0]);
        let mut out: Vec<Vec<f64>> = store.entries.iter().map(|e| vec![0.0; e.data.len()]).collect();
        for id in (0..=loss).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backward_node(id, &g, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn backward_node(
        &self,
        id: NodeId,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        params: &mut [Vec<f64>],
    ) {
        let node = &self.nodes[id];
        let mut acc = |target: NodeId, delta: &mut dyn FnMut(&mut [f64])| {
            let len = self.nodes[target].value.len();
            let slot = grads[target].get_or_insert_with(|| vec![0.0; len]);
            delta(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Param(p) => {
                for (a, b) in params[*p].iter_mut().zip(g) {
                    *a += b;
                }
            }
            Op::Linear { x, w, b } => {
                let (n, i) = (self.value(*x).shape[0], self.value(*x).shape[1]);
                let o = self.value(*w).shape[1];
                acc(*x, &mut |dx| gemm(n, o, i, g, false, &self.value(*w).data, true, dx, true));
                acc(*w, &mut |dw| gemm(i, n, o, &self.value(*x).data, true, g, false, dw, true));
                acc(*b, &mut |db| {
                    for row in g.chunks(o) {
                        for (a, v) in db.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                });
            }
            Op::Conv { x, w, b, geom, cols } => {
                let o = self.value(*w).shape[0];
                let ckk = geom.c * geom.k * geom.k;
                let area = geom.oh * geom.ow;
                let in_size = geom.c * geom.h * geom.w;
                acc(*b, &mut |db| {
                    for n in 0..geom.n {
                        for (oc, d) in db.iter_mut().enumerate() {
                            let base = (n * o + oc) * area;
                            *d += g[base..base + area].iter().sum::<f64>();
                        }
                    }
                });
                acc(*w, &mut |dw| {
                    for n in 0..geom.n {
                        let gn = &g[n * o * area..(n + 1) * o * area];
                        let col = &cols[n * ckk * area..(n + 1) * ckk * area];
                        gemm(o, area, ckk, gn, false, col, true, dw, true);
                    }
                });
                acc(*x, &mut |dx| {
                    let mut dcol = vec![0.0; ckk * area];
                    for n in 0..geom.n {
                        let gn = &g[n * o * area..(n + 1) * o * area];
                        gemm(ckk, o, area, &self.value(*w).data, true, gn, false, &mut dcol, false);
                        geom.col2im(&dcol, &mut dx[n * in_size..(n + 1) * in_size]);
                    }
                });
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                mode,
            } => {
                let shape = &self.value(*x).shape;
                let (n, c) = (shape[0], shape[1]);
                let s: usize = shape[2..].iter().product();
                let count = (n * s) as f64;
                let gm = &self.value(*gamma).data;
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * s;
                        for j in base..base + s {
                            sum_g[ch] += g[j];
                            sum_gx[ch] += g[j] * xhat[j];
                        }
                    }
                }
                acc(*gamma, &mut |d| d.iter_mut().zip(&sum_gx).for_each(|(a, v)| *a += v));
                acc(*beta, &mut |d| d.iter_mut().zip(&sum_g).for_each(|(a, v)| *a += v));
                acc(*x, &mut |dx| {
                    for i in 0..n {
                        for ch in 0..c {
                            let base = (i * c + ch) * s;
                            let k = gm[ch] * inv_std[ch];
                            for j in base..base + s {
                                dx[j] += match mode {
                                    Mode::Eval => k * g[j],
                                    Mode::Train => {
                                        k * (g[j] - (sum_g[ch] + xhat[j] * sum_gx[ch]) / count)
                                    }
                                };
                            }
                        }
                    }
                });
            }
            Op::Relu(x) => {
                let v = &node.value.data;
                acc(*x, &mut |d| {
                    for j in 0..d.len() {
                        if v[j] > 0.0 {
                            d[j] += g[j];
                        }
                    }
                });
            }
            Op::Tanh(x) => {
                let v = &node.value.data;
                acc(*x, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] * (1.0 - v[j] * v[j]);
                    }
                });
            }
            Op::Softplus(x) => {
                let input = &self.value(*x).data;
                acc(*x, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] * sigmoid(input[j]);
                    }
                });
            }
            Op::SoftplusColumns(x, mask) => {
                let input = &self.value(*x).data;
                acc(*x, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += if mask[j % mask.len()] {
                            g[j] * sigmoid(input[j])
                        } else {
                            g[j]
                        };
                    }
                });
            }
            Op::Softmax(x) => {
                let cols = node.value.shape[1];
                let y = &node.value.data;
                acc(*x, &mut |d| {
                    for r in 0..y.len() / cols {
                        let row = r * cols..(r + 1) * cols;
                        let dot: f64 = y[row.clone()].iter().zip(&g[row.clone()]).map(|(a, b)| a * b).sum();
                        for j in row {
                            d[j] += y[j] * (g[j] - dot);
                        }
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(a, v)| *a += c * v)),
            Op::Add(a, b) => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(x, v)| *x += v));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(x, v)| *x += v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&self.value(*a).data, &self.value(*b).data);
                acc(*a, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] * vb[j];
                    }
                });
                acc(*b, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] * va[j];
                    }
                });
            }
            Op::MaxPool { x, argmax } => acc(*x, &mut |d| {
                for (j, &src) in argmax.iter().enumerate() {
                    d[src] += g[j];
                }
            }),
            Op::Reshape(x) => acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(a, v)| *a += v)),
            Op::Sum(x) => acc(*x, &mut |d| d.iter_mut().for_each(|a| *a += g[0])),
            Op::Scatter(parts) => {
                let width = node.value.shape[1];
                let rows = node.value.shape[0];
                for (id, map) in parts {
                    acc(*id, &mut |d| {
                        for (j, &dst) in map.iter().enumerate() {
                            for r in 0..rows {
                                d[r * map.len() + j] += g[r * width + dst];
                            }
                        }
                    });
                }
            }
            Op::Gather { x, source } => acc(*x, &mut |d| {
                for (j, &s) in source.iter().enumerate() {
                    d[s] += g[j];
                }
            }),
            Op::Custom(inputs) => {
                for (id, partial) in inputs {
                    acc(*id, &mut |d| d.iter_mut().zip(partial).for_each(|(a, p)| *a += g[0] * p));
                }
            }
        }
    }
}

/// Store indices of one batch-norm layer's parameters and running statistics.
#[derive(Debug, Clone, Copy)]
pub struct BatchNormParams {
    pub gamma: usize,
    pub beta: usize,
    pub running_mean: usize,
    pub running_var: usize,
}
