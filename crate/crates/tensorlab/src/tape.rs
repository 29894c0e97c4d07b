//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its value and whatever the
//! backward pass needs. Nodes are only ever appended, so node order is a
//! topological order and [`Tape::backward`] walks it in reverse.

use std::collections::BTreeMap;
use std::collections::HashMap;

use crate::error::{shape_err, Result, TensorError};
use crate::kernels::{self, gemm, transpose};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    AddRow(Var, Var),
    SumAxis(Var, usize),
    Sum(Var),
    WeightedSum(Var, Tensor),
    Softmax(Var, usize),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv1x1 {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv3x3 {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        cols: Vec<f64>,
    },
    Resize(Var),
    AvgPool(Var, usize),
    Concat(Vec<Var>, usize),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    MaskedMean {
        masks: Var,
        feats: Var,
        denom: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        scale: f64,
        probs: Vec<f64>,
    },
    SoftCrossEntropy {
        logits: Var,
        target: Tensor,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations for one forward pass.
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    param_order: Vec<(String, Var)>,
    track_params: bool,
    relu_margin: f64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A tape whose bound parameters receive gradients.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            param_order: Vec::new(),
            track_params: true,
            relu_margin: f64::INFINITY,
        }
    }

    /// A tape that binds parameters as constants.
    pub fn inference() -> Self {
        Self {
            track_params: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Smallest `|input|` seen by any ReLU on this tape.
    pub fn relu_margin(&self) -> f64 {
        self.relu_margin
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
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

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Binds the named parameter from `store`; repeated calls return the same var.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))?
            .clone();
        let v = self.push(t, Op::Leaf, self.track_params);
        self.params.insert(name.to_string(), v);
        self.param_order.push((name.to_string(), v));
        Ok(v)
    }

    pub fn bound_params(&self) -> &[(String, Var)] {
        &self.param_order
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose2()?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, s), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let margin = self
            .value(x)
            .data()
            .iter()
            .map(|v| v.abs())
            .fold(f64::INFINITY, f64::min);
        self.relu_margin = self.relu_margin.min(margin);
        let out = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    /// Adds a length-`n` vector to every length-`n` row along the last axis.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap();
        if self.shape(row) != [n] {
            return shape_err("add_row", format!("{:?} + {:?}", self.shape(x), self.shape(row)));
        }
        let mut out = self.value(x).clone();
        kernels::add_row_bias(out.data_mut(), self.value(row).data());
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(out, Op::AddRow(x, row), rg))
    }

    /// Sums out `axis`.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return shape_err("sum_axis", format!("axis {axis} for {shape:?}"));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xd = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += xd[(o * len + l) * inner + i];
                }
            }
        }
        let mut oshape: Vec<usize> = shape[..axis].iter().chain(&shape[axis + 1..]).copied().collect();
        if oshape.is_empty() {
            oshape.push(1);
        }
        let out = Tensor::new(oshape, out)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::SumAxis(x, axis), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(out, Op::Sum(x), rg)
    }

    /// Scalar `Σ x ⊙ weights` for a fixed weight tensor.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor) -> Result<Var> {
        if self.shape(x) != weights.shape() {
            return shape_err("weighted_sum", format!("{:?} vs {:?}", self.shape(x), weights.shape()));
        }
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a * b)
            .sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum(x, weights), rg))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = kernels::softmax(self.value(x), axis)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Softmax(x, axis), rg))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let d = kernels::check_affine("layer_norm", self.value(x), self.value(gamma), self.value(beta))?;
        let (out, saved) = kernels::layer_norm_raw(
            self.value(x).data(),
            d,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let out = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat: saved.xhat,
                inv_std: saved.inv_std,
            },
            rg,
        ))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = kernels::linear(self.value(x), self.value(w), self.value(b))?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(out, Op::Linear { x, w, b }, rg))
    }

    pub fn conv1x1(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = kernels::conv1x1(self.value(x), self.value(w), self.value(b))?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(out, Op::Conv1x1 { x, w, b }, rg))
    }

    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let (xt, wt, bt) = (self.value(x), self.value(w), self.value(b));
        kernels::check_conv3x3(xt, wt, bt)?;
        if stride == 0 {
            return shape_err("conv3x3", "stride 0");
        }
        let (c, h, wd) = (xt.dim(0), xt.dim(1), xt.dim(2));
        let co = wt.dim(0);
        let (ho, wo) = (kernels::conv_out(h, stride), kernels::conv_out(wd, stride));
        let cols = kernels::im2col3x3(xt.data(), c, h, wd, stride);
        let mut y = gemm(wt.data(), &cols, co, c * 9, ho * wo);
        kernels::add_channel_bias(&mut y, bt.data());
        let out = Tensor::new(vec![co, ho, wo], y)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(
            out,
            Op::Conv3x3 {
                x,
                w,
                b,
                stride,
                cols,
            },
            rg,
        ))
    }

    /// Half-pixel bilinear resize of a `C×H×W` map.
    pub fn resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let out = kernels::bilinear_resize(self.value(x), out_h, out_w)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Resize(x), rg))
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return shape_err("upsample2x", format!("{s:?}"));
        }
        self.resize(x, s[1] * 2, s[2] * 2)
    }

    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let out = kernels::avg_pool(self.value(x), k)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::AvgPool(x, k), rg))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat", "no parts");
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return shape_err("concat", format!("axis {axis} for {base:?}"));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i]) {
                return shape_err("concat", format!("{s:?} vs {base:?} on axis {axis}"));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                let d = self.value(p).data();
                data.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::new(shape, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return shape_err("slice", format!("[{start}, {}) on axis {axis} of {shape:?}", start + len));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let d = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&d[from..from + len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        let out = Tensor::new(oshape, data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Slice { x, axis, start }, rg))
    }

    /// Row `n` of the result is `Σ_p masks[n,p]·feats[:,p] / Σ_p masks[n,p]`,
    /// or zero when the mask row sums to zero.
    pub fn masked_mean(&mut self, masks: Var, feats: Var) -> Result<Var> {
        let (ms, fs) = (self.shape(masks), self.shape(feats));
        if ms.len() != 2 || fs.len() != 2 || ms[1] != fs[1] {
            return shape_err("masked_mean", format!("masks {ms:?}, feats {fs:?}"));
        }
        let (n, p, c) = (ms[0], ms[1], fs[0]);
        let m = self.value(masks).data();
        let ft = transpose(self.value(feats).data(), c, p);
        let mut out = gemm(m, &ft, n, p, c);
        let denom: Vec<f64> = m.chunks(p).map(|row| row.iter().sum()).collect();
        for (row, &s) in out.chunks_mut(c).zip(&denom) {
            for v in row {
                *v = if s == 0.0 { 0.0 } else { *v / s };
            }
        }
        let out = Tensor::new(vec![n, c], out)?;
        let rg = self.rg(masks) || self.rg(feats);
        Ok(self.push(out, Op::MaskedMean { masks, feats, denom }, rg))
    }

    /// `softmax(scale·QKᵀ + key_bias)·V` with key-order-invariant reductions.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, scale: f64, key_bias: Option<Var>) -> Result<Var> {
        let dims = kernels::check_attention(
            self.value(q),
            self.value(k),
            self.value(v),
            key_bias.map(|b| self.value(b)),
        )?;
        let (out, probs) = kernels::attention_raw(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            &dims,
            scale,
            key_bias.map(|b| self.value(b).data()),
        );
        let out = Tensor::new(vec![dims.n, dims.dv], out)?;
        let rg = self.rg(q) || self.rg(k) || self.rg(v) || key_bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                bias: key_bias,
                scale,
                probs,
            },
            rg,
        ))
    }

    /// Mean over positions of `-Σ_c target[c]·log softmax(logits)[c]`, classes on axis 0.
    pub fn soft_cross_entropy(&mut self, logits: Var, target: Tensor) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() < 2 || target.shape() != shape.as_slice() {
            return shape_err("soft_cross_entropy", format!("{shape:?} vs {:?}", target.shape()));
        }
        let c = shape[0];
        let p = self.value(logits).numel() / c;
        let x = self.value(logits).data();
        let probs = kernels::softmax_raw(x, &shape, 0);
        let t = target.data();
        let mut loss = 0.0;
        for j in 0..p {
            let max = (0..c).map(|k| x[k * p + j]).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + (0..c).map(|k| (x[k * p + j] - max).exp()).sum::<f64>().ln();
            for k in 0..c {
                let tk = t[k * p + j];
                if tk != 0.0 {
                    loss -= tk * (x[k * p + j] - lse);
                }
            }
        }
        let out = Tensor::scalar(loss / p as f64);
        let rg = self.rg(logits);
        Ok(self.push(out, Op::SoftCrossEntropy { logits, target, probs }, rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if self.nodes[idx].requires_grad {
                self.propagate(idx, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            grads,
            params: self.param_order.clone(),
        })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out_shape = node.value.shape();
        let mut acc = |v: Var, contrib: Vec<f64>| accumulate(grads, v, contrib);
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.rg(*a) {
                    let bt = transpose(val(*b), k, n);
                    acc(*a, gemm(g, &bt, m, n, k));
                }
                if self.rg(*b) {
                    let at = transpose(val(*a), m, k);
                    acc(*b, gemm(&at, g, k, m, n));
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                acc(*x, transpose(g, c, r));
            }
            Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::Add(a, b) => {
                if self.rg(*a) {
                    acc(*a, g.to_vec());
                }
                if self.rg(*b) {
                    acc(*b, g.to_vec());
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    acc(*a, g.iter().zip(val(*b)).map(|(g, y)| g * y).collect());
                }
                if self.rg(*b) {
                    acc(*b, g.iter().zip(val(*a)).map(|(g, x)| g * x).collect());
                }
            }
            Op::Scale(x, s) => acc(*x, g.iter().map(|v| v * s).collect()),
            Op::Relu(x) => acc(
                *x,
                g.iter()
                    .zip(val(*x))
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect(),
            ),
            Op::AddRow(x, row) => {
                if self.rg(*x) {
                    acc(*x, g.to_vec());
                }
                if self.rg(*row) {
                    acc(*row, column_sums(g, self.shape(*row)[0]));
                }
            }
            Op::SumAxis(x, axis) => {
                let shape = self.shape(*x);
                let outer: usize = shape[..*axis].iter().product();
                let len = shape[*axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let mut dx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        dx[(o * len + l) * inner..(o * len + l + 1) * inner]
                            .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                acc(*x, dx);
            }
            Op::Sum(x) => acc(*x, vec![g[0]; self.value(*x).numel()]),
            Op::WeightedSum(x, w) => acc(*x, w.data().iter().map(|w| w * g[0]).collect()),
            Op::Softmax(x, axis) => {
                let y = node.value.data();
                let outer: usize = out_shape[..*axis].iter().product();
                let len = out_shape[*axis];
                let inner: usize = out_shape[axis + 1..].iter().product();
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let dot: f64 = (0..len).map(|l| g[base + l * inner] * y[base + l * inner]).sum();
                        for l in 0..len {
                            let at = base + l * inner;
                            dx[at] = y[at] * (g[at] - dot);
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = *out_shape.last().unwrap();
                let gam = val(*gamma);
                if self.rg(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for (r, &is) in inv_std.iter().enumerate() {
                        let rg = &g[r * d..(r + 1) * d];
                        let rh = &xhat[r * d..(r + 1) * d];
                        let dh: Vec<f64> = rg.iter().zip(gam).map(|(g, w)| g * w).collect();
                        let s1: f64 = dh.iter().sum();
                        let s2: f64 = dh.iter().zip(rh).map(|(a, b)| a * b).sum();
                        for c in 0..d {
                            dx[r * d + c] = is / d as f64 * (d as f64 * dh[c] - s1 - rh[c] * s2);
                        }
                    }
                    acc(*x, dx);
                }
                if self.rg(*gamma) {
                    let gh: Vec<f64> = g.iter().zip(xhat).map(|(a, b)| a * b).collect();
                    acc(*gamma, column_sums(&gh, d));
                }
                if self.rg(*beta) {
                    acc(*beta, column_sums(g, d));
                }
            }
            Op::Linear { x, w, b } => {
                let (m, k) = (self.shape(*x)[0], self.shape(*x)[1]);
                let n = self.shape(*w)[1];
                if self.rg(*x) {
                    let wt = transpose(val(*w), k, n);
                    acc(*x, gemm(g, &wt, m, n, k));
                }
                if self.rg(*w) {
                    let xt = transpose(val(*x), m, k);
                    acc(*w, gemm(&xt, g, k, m, n));
                }
                if self.rg(*b) {
                    acc(*b, column_sums(g, n));
                }
            }
            Op::Conv1x1 { x, w, b } => {
                let (co, ci) = (self.shape(*w)[0], self.shape(*w)[1]);
                let p = g.len() / co;
                if self.rg(*x) {
                    let wt = transpose(val(*w), co, ci);
                    acc(*x, gemm(&wt, g, ci, co, p));
                }
                if self.rg(*w) {
                    let xt = transpose(val(*x), ci, p);
                    acc(*w, gemm(g, &xt, co, p, ci));
                }
                if self.rg(*b) {
                    acc(*b, row_sums(g, co));
                }
            }
            Op::Conv3x3 { x, w, b, stride, cols } => {
                let co = self.shape(*w)[0];
                let xs = self.shape(*x);
                let (c, h, wd) = (xs[0], xs[1], xs[2]);
                let p = g.len() / co;
                if self.rg(*x) {
                    let wt = transpose(val(*w), co, c * 9);
                    let dcols = gemm(&wt, g, c * 9, co, p);
                    acc(*x, kernels::col2im3x3(&dcols, c, h, wd, *stride));
                }
                if self.rg(*w) {
                    let ct = transpose(cols, c * 9, p);
                    acc(*w, gemm(g, &ct, co, p, c * 9));
                }
                if self.rg(*b) {
                    acc(*b, row_sums(g, co));
                }
            }
            Op::Resize(x) => {
                let xs = self.shape(*x);
                acc(
                    *x,
                    kernels::resize_adjoint(g, xs[0], xs[1], xs[2], out_shape[1], out_shape[2]),
                );
            }
            Op::AvgPool(x, k) => {
                let xs = self.shape(*x);
                let (c, h, w) = (xs[0], xs[1], xs[2]);
                let (ho, wo) = (h / k, w / k);
                let norm = 1.0 / (k * k) as f64;
                let mut dx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..h {
                        for xx in 0..w {
                            dx[ch * h * w + y * w + xx] = g[ch * ho * wo + (y / k) * wo + xx / k] * norm;
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::Concat(parts, axis) => {
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let total = out_shape[*axis];
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if self.rg(p) {
                        let mut dp = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let from = (o * total + offset) * inner;
                            dp.extend_from_slice(&g[from..from + len * inner]);
                        }
                        acc(p, dp);
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = self.shape(*x);
                let outer: usize = xs[..*axis].iter().product();
                let inner: usize = xs[axis + 1..].iter().product();
                let len = out_shape[*axis];
                let mut dx = vec![0.0; self.value(*x).numel()];
                for o in 0..outer {
                    let to = (o * xs[*axis] + start) * inner;
                    dx[to..to + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                acc(*x, dx);
            }
            Op::MaskedMean { masks, feats, denom } => {
                let (n, p) = (self.shape(*masks)[0], self.shape(*masks)[1]);
                let c = self.shape(*feats)[0];
                let inv: Vec<f64> = denom.iter().map(|&s| if s == 0.0 { 0.0 } else { 1.0 / s }).collect();
                // g scaled by 1/s_n
                let gs: Vec<f64> = g
                    .chunks(c)
                    .zip(&inv)
                    .flat_map(|(row, &i)| row.iter().map(move |v| v * i))
                    .collect();
                if self.rg(*feats) {
                    let gst = transpose(&gs, n, c);
                    acc(*feats, gemm(&gst, val(*masks), c, n, p));
                }
                if self.rg(*masks) {
                    let q = node.value.data();
                    let mut dm = gemm(&gs, val(*feats), n, c, p);
                    for r in 0..n {
                        let corr: f64 = (0..c).map(|k| gs[r * c + k] * q[r * c + k]).sum();
                        for v in &mut dm[r * p..(r + 1) * p] {
                            *v -= corr;
                        }
                    }
                    acc(*masks, dm);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                bias,
                scale,
                probs,
            } => {
                let (n, d) = (self.shape(*q)[0], self.shape(*q)[1]);
                let (m, dv) = (self.shape(*v)[0], self.shape(*v)[1]);
                if self.rg(*v) {
                    let pt = transpose(probs, n, m);
                    acc(*v, gemm(&pt, g, m, n, dv));
                }
                let needs_scores = self.rg(*q) || self.rg(*k) || bias.is_some_and(|b| self.rg(b));
                if needs_scores {
                    let vt = transpose(val(*v), m, dv);
                    let dp = gemm(g, &vt, n, dv, m);
                    let mut ds = vec![0.0; n * m];
                    for i in 0..n {
                        let pr = &probs[i * m..(i + 1) * m];
                        let dr = &dp[i * m..(i + 1) * m];
                        let dot: f64 = pr.iter().zip(dr).map(|(a, b)| a * b).sum();
                        for j in 0..m {
                            ds[i * m + j] = pr[j] * (dr[j] - dot);
                        }
                    }
                    if let Some(b) = bias {
                        if self.rg(*b) {
                            acc(*b, column_sums(&ds, m));
                        }
                    }
                    let dss: Vec<f64> = ds.iter().map(|v| v * scale).collect();
                    if self.rg(*q) {
                        acc(*q, gemm(&dss, val(*k), n, m, d));
                    }
                    if self.rg(*k) {
                        let dst = transpose(&dss, n, m);
                        acc(*k, gemm(&dst, val(*q), m, n, d));
                    }
                }
            }
            Op::SoftCrossEntropy { logits, target, probs } => {
                let c = self.shape(*logits)[0];
                let p = probs.len() / c;
                let t = target.data();
                let mut dx = vec![0.0; probs.len()];
                for j in 0..p {
                    let tsum: f64 = (0..c).map(|k| t[k * p + j]).sum();
                    for k in 0..c {
                        dx[k * p + j] = g[0] * (probs[k * p + j] * tsum - t[k * p + j]) / p as f64;
                    }
                }
                acc(*logits, dx);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (a, b) in existing.iter_mut().zip(&contrib) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

fn column_sums(g: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for row in g.chunks(n) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

fn row_sums(g: &[f64], rows: usize) -> Vec<f64> {
    let p = g.len() / rows;
    g.chunks(p).map(|r| r.iter().sum()).collect()
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(String, Var)>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`; exactly zero when `v` did not contribute.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }

    /// Gradients of every parameter bound on the tape, keyed by name.
    pub fn params(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(name, v)| (name.clone(), self.get(*v)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_all_ones() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_fn(&[2, 3], |i| i as f64 - 2.5));
        let s = t.sum(x);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x), Tensor::full(&[2, 3], 1.0));
    }

    #[test]
    fn detached_leaf_has_exact_zero_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::full(&[3], 2.0));
        let p = t.leaf(Tensor::full(&[2, 2], 5.0));
        let _unused = t.scale(p, 3.0);
        let s = t.sum(x);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(p), Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn sum_of_softmax_has_vanishing_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![2, 3], vec![0.3, -1.0, 2.0, 0.0, 5.0, -2.0]).unwrap());
        let y = t.softmax(x, 1).unwrap();
        let s = t.sum(y);
        let g = t.backward(s).unwrap();
        assert!(g.get(x).data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros(&[2]));
        assert!(matches!(t.backward(x), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn shared_input_accumulates() {
        // d/dx sum(x*x + x) = 2x + 1
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let sq = t.mul(x, x).unwrap();
        let y = t.add(sq, x).unwrap();
        let s = t.sum(y);
        let g = t.backward(s).unwrap().get(x);
        assert_eq!(g.data(), &[3.0, -3.0, 2.0]);
    }

    #[test]
    fn param_binding_is_idempotent_and_collected() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::full(&[2], 3.0));
        let mut t = Tape::new();
        let a = t.param(&store, "w").unwrap();
        let b = t.param(&store, "w").unwrap();
        assert_eq!(a, b);
        let y = t.mul(a, b).unwrap();
        let s = t.sum(y);
        let grads = t.backward(s).unwrap().params();
        assert_eq!(grads["w"].data(), &[6.0, 6.0]);
        assert!(t.param(&store, "missing").is_err());
    }

    #[test]
    fn inference_tape_binds_constants() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::full(&[2], 3.0));
        let mut t = Tape::inference();
        let w = t.param(&store, "w").unwrap();
        let s = t.sum(w);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(w), Tensor::zeros(&[2]));
    }
}
