//! Forward kernels on plain tensors.
//!
//! Every reduction runs in a fixed order so results are bitwise
//! reproducible. Matrix products accumulate each output element over the
//! inner index in ascending order. Attention reductions over the key axis
//! sum their terms in sorted order, which makes them invariant to any
//! permutation of the keys.

use crate::error::{shape_err, Result, TensorError};
use crate::tensor::Tensor;

/// Variance floor used by [`layer_norm`].
pub const LN_EPS: f64 = 1e-5;

const MR: usize = 4;
const NR: usize = 16;

/// `a (m×k) · b (k×n)`, row-major.
pub fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    let mut i = 0;
    while i < m {
        let rows = MR.min(m - i);
        let mut j = 0;
        while j < n {
            let cols = NR.min(n - j);
            if rows == MR && cols == NR {
                tile_full(a, b, &mut out, i, j, k, n);
            } else {
                tile_edge(a, b, &mut out, i, j, rows, cols, k, n);
            }
            j += NR;
        }
        i += MR;
    }
    out
}

#[inline(always)]
fn tile_full(a: &[f64], b: &[f64], out: &mut [f64], i: usize, j: usize, k: usize, n: usize) {
    let mut acc = [[0.0f64; NR]; MR];
    for kk in 0..k {
        let brow: &[f64; NR] = b[kk * n + j..kk * n + j + NR].try_into().unwrap();
        for (r, row) in acc.iter_mut().enumerate() {
            let av = a[(i + r) * k + kk];
            for c in 0..NR {
                row[c] += av * brow[c];
            }
        }
    }
    for (r, row) in acc.iter().enumerate() {
        out[(i + r) * n + j..(i + r) * n + j + NR].copy_from_slice(row);
    }
}

#[allow(clippy::too_many_arguments)]
fn tile_edge(
    a: &[f64],
    b: &[f64],
    out: &mut [f64],
    i: usize,
    j: usize,
    rows: usize,
    cols: usize,
    k: usize,
    n: usize,
) {
    let mut acc = [[0.0f64; NR]; MR];
    for kk in 0..k {
        let brow = &b[kk * n + j..kk * n + j + cols];
        for r in 0..rows {
            let av = a[(i + r) * k + kk];
            for c in 0..cols {
                acc[r][c] += av * brow[c];
            }
        }
    }
    for r in 0..rows {
        out[(i + r) * n + j..(i + r) * n + j + cols].copy_from_slice(&acc[r][..cols]);
    }
}

pub fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    const B: usize = 32;
    for r0 in (0..rows).step_by(B) {
        for c0 in (0..cols).step_by(B) {
            for r in r0..(r0 + B).min(rows) {
                for c in c0..(c0 + B).min(cols) {
                    out[c * rows + r] = x[r * cols + c];
                }
            }
        }
    }
    out
}

/// Sum whose result does not depend on the order of `terms`.
pub fn sorted_sum(terms: &mut [f64]) -> f64 {
    terms.sort_unstable_by(f64::total_cmp);
    terms.iter().sum()
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax_raw(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = f64::NEG_INFINITY;
            for l in 0..len {
                max = max.max(x[base + l * inner]);
            }
            let mut total = 0.0;
            for l in 0..len {
                let e = (x[base + l * inner] - max).exp();
                out[base + l * inner] = e;
                total += e;
            }
            for l in 0..len {
                out[base + l * inner] /= total;
            }
        }
    }
    out
}

/// Numerically stable softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return shape_err("softmax", format!("axis {axis} out of range for {:?}", x.shape()));
    }
    Tensor::new(x.shape().to_vec(), softmax_raw(x.data(), x.shape(), axis))
}

pub(crate) struct LnSaved {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub(crate) fn layer_norm_raw(x: &[f64], d: usize, gamma: &[f64], beta: &[f64]) -> (Vec<f64>, LnSaved) {
    let rows = x.len() / d;
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std[r] = is;
        for c in 0..d {
            let h = (row[c] - mean) * is;
            xhat[r * d + c] = h;
            out[r * d + c] = h * gamma[c] + beta[c];
        }
    }
    (out, LnSaved { xhat, inv_std })
}

pub(crate) fn check_affine(op: &'static str, x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<usize> {
    let d = *x.shape().last().unwrap();
    if gamma.shape() != [d] || beta.shape() != [d] {
        return shape_err(
            op,
            format!("affine {:?}/{:?} for last extent {d}", gamma.shape(), beta.shape()),
        );
    }
    Ok(d)
}

/// Layer normalization over the last axis with affine `gamma`, `beta`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let d = check_affine("layer_norm", x, gamma, beta)?;
    let (out, _) = layer_norm_raw(x.data(), d, gamma.data(), beta.data());
    Tensor::new(x.shape().to_vec(), out)
}

pub(crate) fn check_matmul(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    if a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0) {
        return shape_err(op, format!("{:?} x {:?}", a.shape(), b.shape()));
    }
    Ok((a.dim(0), a.dim(1), b.dim(1)))
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k, n) = check_matmul("matmul", a, b)?;
    Tensor::new(vec![m, n], gemm(a.data(), b.data(), m, k, n))
}

pub(crate) fn add_row_bias(y: &mut [f64], bias: &[f64]) {
    let n = bias.len();
    for row in y.chunks_mut(n) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

pub(crate) fn check_linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    let dims = check_matmul("linear", x, w)?;
    if b.shape() != [dims.2] {
        return shape_err("linear", format!("bias {:?} for {} outputs", b.shape(), dims.2));
    }
    Ok(dims)
}

/// `y = x·W + b` with `x: n×k`, `W: k×m`, `b: m`.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k, n) = check_linear(x, w, b)?;
    let mut y = gemm(x.data(), w.data(), m, k, n);
    add_row_bias(&mut y, b.data());
    Tensor::new(vec![m, n], y)
}

pub(crate) fn check_conv1x1(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    if x.rank() != 3 || w.rank() != 2 || w.dim(1) != x.dim(0) || b.shape() != [w.dim(0)] {
        return shape_err(
            "conv1x1",
            format!("x {:?}, W {:?}, b {:?}", x.shape(), w.shape(), b.shape()),
        );
    }
    Ok((w.dim(0), x.dim(0), x.dim(1) * x.dim(2)))
}

pub(crate) fn add_channel_bias(y: &mut [f64], bias: &[f64]) {
    let p = y.len() / bias.len();
    for (row, b) in y.chunks_mut(p).zip(bias) {
        for v in row {
            *v += b;
        }
    }
}

/// Per-pixel linear map: `W (C'×C)` applied to `x (C×H×W)` plus bias `C'`.
pub fn conv1x1(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (co, ci, p) = check_conv1x1(x, w, b)?;
    let mut y = gemm(w.data(), x.data(), co, ci, p);
    add_channel_bias(&mut y, b.data());
    Tensor::new(vec![co, x.dim(1), x.dim(2)], y)
}

pub(crate) fn conv_out(len: usize, stride: usize) -> usize {
    (len - 1) / stride + 1
}

/// Unfolds 3×3 patches (zero padding 1) into a `(C·9) × (Ho·Wo)` matrix.
pub(crate) fn im2col3x3(x: &[f64], c: usize, h: usize, w: usize, stride: usize) -> Vec<f64> {
    let (ho, wo) = (conv_out(h, stride), conv_out(w, stride));
    let p = ho * wo;
    let mut cols = vec![0.0; c * 9 * p];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(ch * 9 + ky * 3 + kx) * p..(ch * 9 + ky * 3 + kx + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            row[oy * wo + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col3x3`].
pub(crate) fn col2im3x3(cols: &[f64], c: usize, h: usize, w: usize, stride: usize) -> Vec<f64> {
    let (ho, wo) = (conv_out(h, stride), conv_out(w, stride));
    let p = ho * wo;
    let mut x = vec![0.0; c * h * w];
    for ch in 0..c {
        let plane = &mut x[ch * h * w..(ch + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[(ch * 9 + ky * 3 + kx) * p..(ch * 9 + ky * 3 + kx + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            plane[iy as usize * w + ix as usize] += row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

pub(crate) fn check_conv3x3(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<()> {
    if x.rank() != 3
        || w.rank() != 4
        || w.dim(1) != x.dim(0)
        || w.dim(2) != 3
        || w.dim(3) != 3
        || b.shape() != [w.dim(0)]
    {
        return shape_err(
            "conv3x3",
            format!("x {:?}, W {:?}, b {:?}", x.shape(), w.shape(), b.shape()),
        );
    }
    Ok(())
}

/// 3×3 convolution with zero padding 1; `W` is `C'×C×3×3`.
pub fn conv3x3(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize) -> Result<Tensor> {
    check_conv3x3(x, w, b)?;
    let (c, h, wd) = (x.dim(0), x.dim(1), x.dim(2));
    let co = w.dim(0);
    let cols = im2col3x3(x.data(), c, h, wd, stride);
    let p = conv_out(h, stride) * conv_out(wd, stride);
    let mut y = gemm(w.data(), &cols, co, c * 9, p);
    add_channel_bias(&mut y, b.data());
    Tensor::new(vec![co, conv_out(h, stride), conv_out(wd, stride)], y)
}

/// Interpolation taps for one axis: `(i0, i1, w0, w1)` per output index.
pub(crate) fn bilinear_taps(len_in: usize, len_out: usize) -> Vec<(usize, usize, f64, f64)> {
    let scale = len_in as f64 / len_out as f64;
    (0..len_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len_in - 1);
            let i1 = (i0 + 1).min(len_in - 1);
            let w1 = src - i0 as f64;
            (i0, i1, 1.0 - w1, w1)
        })
        .collect()
}

pub(crate) fn resize_raw(x: &[f64], c: usize, h: usize, w: usize, ho: usize, wo: usize) -> Vec<f64> {
    let ty = bilinear_taps(h, ho);
    let tx = bilinear_taps(w, wo);
    let mut out = vec![0.0; c * ho * wo];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * ho * wo..(ch + 1) * ho * wo];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                dst[oy * wo + ox] = wy0 * (wx0 * plane[y0 * w + x0] + wx1 * plane[y0 * w + x1])
                    + wy1 * (wx0 * plane[y1 * w + x0] + wx1 * plane[y1 * w + x1]);
            }
        }
    }
    out
}

pub(crate) fn resize_adjoint(g: &[f64], c: usize, h: usize, w: usize, ho: usize, wo: usize) -> Vec<f64> {
    let ty = bilinear_taps(h, ho);
    let tx = bilinear_taps(w, wo);
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let src = &g[ch * ho * wo..(ch + 1) * ho * wo];
        let plane = &mut out[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let v = src[oy * wo + ox];
                plane[y0 * w + x0] += wy0 * wx0 * v;
                plane[y0 * w + x1] += wy0 * wx1 * v;
                plane[y1 * w + x0] += wy1 * wx0 * v;
                plane[y1 * w + x1] += wy1 * wx1 * v;
            }
        }
    }
    out
}

/// Half-pixel (align-corners = false) bilinear resize of a `C×H×W` map.
pub fn bilinear_resize(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if x.rank() != 3 || out_h == 0 || out_w == 0 {
        return shape_err("bilinear_resize", format!("{:?} -> {out_h}x{out_w}", x.shape()));
    }
    let (c, h, w) = (x.dim(0), x.dim(1), x.dim(2));
    Tensor::new(vec![c, out_h, out_w], resize_raw(x.data(), c, h, w, out_h, out_w))
}

pub fn bilinear_upsample2x(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 3 {
        return shape_err("bilinear_upsample2x", format!("{:?}", x.shape()));
    }
    bilinear_resize(x, x.dim(1) * 2, x.dim(2) * 2)
}

pub(crate) fn avg_pool_raw(x: &[f64], c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let (ho, wo) = (h / k, w / k);
    let norm = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; c * ho * wo];
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut s = 0.0;
                for dy in 0..k {
                    for dx in 0..k {
                        s += x[ch * h * w + (oy * k + dy) * w + ox * k + dx];
                    }
                }
                out[ch * ho * wo + oy * wo + ox] = s * norm;
            }
        }
    }
    out
}

/// Area averaging by an integer factor `k` on a `C×H×W` map.
pub fn avg_pool(x: &Tensor, k: usize) -> Result<Tensor> {
    if x.rank() != 3 || k == 0 || !x.dim(1).is_multiple_of(k) || !x.dim(2).is_multiple_of(k) {
        return shape_err("avg_pool", format!("{:?} by factor {k}", x.shape()));
    }
    let (c, h, w) = (x.dim(0), x.dim(1), x.dim(2));
    Tensor::new(vec![c, h / k, w / k], avg_pool_raw(x.data(), c, h, w, k))
}

pub(crate) struct AttnDims {
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub dv: usize,
}

pub(crate) fn check_attention(q: &Tensor, k: &Tensor, v: &Tensor, bias: Option<&Tensor>) -> Result<AttnDims> {
    if q.rank() != 2 || k.rank() != 2 || v.rank() != 2 || q.dim(1) != k.dim(1) || k.dim(0) != v.dim(0) {
        return shape_err(
            "attention",
            format!("Q {:?}, K {:?}, V {:?}", q.shape(), k.shape(), v.shape()),
        );
    }
    if let Some(b) = bias {
        if b.shape() != [k.dim(0)] {
            return shape_err("attention", format!("key bias {:?} for {} keys", b.shape(), k.dim(0)));
        }
    }
    Ok(AttnDims {
        n: q.dim(0),
        m: k.dim(0),
        d: q.dim(1),
        dv: v.dim(1),
    })
}

/// Returns `(output n×dv, weights n×m)` for `softmax(scale·QKᵀ + bias)·V`.
pub(crate) fn attention_raw(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    dims: &AttnDims,
    scale: f64,
    bias: Option<&[f64]>,
) -> (Vec<f64>, Vec<f64>) {
    let AttnDims { n, m, d, dv } = *dims;
    let kt = transpose(k, m, d);
    let mut probs = gemm(q, &kt, n, d, m);
    let mut terms = vec![0.0; m];
    for i in 0..n {
        let row = &mut probs[i * m..(i + 1) * m];
        for (j, s) in row.iter_mut().enumerate() {
            *s = *s * scale + bias.map_or(0.0, |b| b[j]);
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for (t, s) in terms.iter_mut().zip(row.iter_mut()) {
            *s = (*s - max).exp();
            *t = *s;
        }
        let total = sorted_sum(&mut terms);
        for s in row.iter_mut() {
            *s /= total;
        }
    }
    let mut out = vec![0.0; n * dv];
    for i in 0..n {
        let p = &probs[i * m..(i + 1) * m];
        for c in 0..dv {
            for (j, t) in terms.iter_mut().enumerate() {
                *t = p[j] * v[j * dv + c];
            }
            out[i * dv + c] = sorted_sum(&mut terms);
        }
    }
    (out, probs)
}

/// `softmax(QKᵀ·s)·V` where `s = 1/√d` when `scale_by_sqrt_d`, else 1.
pub fn scaled_dot_attention(q: &Tensor, k: &Tensor, v: &Tensor, scale_by_sqrt_d: bool) -> Result<Tensor> {
    let dims = check_attention(q, k, v, None)?;
    if dims.m == 0 {
        return Err(TensorError::Precondition {
            op: "scaled_dot_attention",
            detail: "empty key set".into(),
        });
    }
    let scale = if scale_by_sqrt_d { 1.0 / (dims.d as f64).sqrt() } else { 1.0 };
    let (out, _) = attention_raw(q.data(), k.data(), v.data(), &dims, scale, None);
    Tensor::new(vec![dims.n, dims.dv], out)
}

/// Row-stochastic weights `softmax(scale·QKᵀ + bias)`, `n×m`.
pub fn attention_weights(q: &Tensor, k: &Tensor, scale: f64, bias: Option<&Tensor>) -> Result<Tensor> {
    let v = Tensor::zeros(&[k.dim(0).max(1), 1]);
    let dims = check_attention(q, k, &v, bias)?;
    let (_, probs) = attention_raw(q.data(), k.data(), v.data(), &dims, scale, bias.map(|b| b.data()));
    Tensor::new(vec![dims.n, dims.m], probs)
}

/// `linear → ReLU → linear`.
pub fn ffn(x: &Tensor, w1: &Tensor, b1: &Tensor, w2: &Tensor, b2: &Tensor) -> Result<Tensor> {
    let h = linear(x, w1, b1)?.map(|v| v.max(0.0));
    linear(&h, w2, b2)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for kk in 0..k {
                    s += a[i * k + kk] * b[kk * n + j];
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    #[test]
    fn gemm_matches_naive_bitwise_on_ragged_sizes() {
        for &(m, k, n) in &[(1, 1, 1), (5, 7, 3), (4, 16, 16), (9, 3, 37), (17, 33, 20)] {
            let a: Vec<f64> = (0..m * k).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.13).collect();
            let b: Vec<f64> = (0..k * n).map(|i| ((i * 53 % 7) as f64 - 3.0) * 0.71).collect();
            assert_eq!(gemm(&a, &b, m, k, n), naive(&a, &b, m, k, n));
        }
    }

    #[test]
    fn im2col_adjoint_identity() {
        // <im2col(x), y> == <x, col2im(y)>
        let (c, h, w) = (2, 5, 6);
        for stride in [1, 2] {
            let x: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.37).sin()).collect();
            let cols = im2col3x3(&x, c, h, w, stride);
            let y: Vec<f64> = (0..cols.len()).map(|i| (i as f64 * 0.11).cos()).collect();
            let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
            let back = col2im3x3(&y, c, h, w, stride);
            let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn resize_adjoint_identity() {
        let (c, h, w, ho, wo) = (2, 3, 4, 12, 16);
        let x: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.7).sin()).collect();
        let y: Vec<f64> = (0..c * ho * wo).map(|i| (i as f64 * 0.3).cos()).collect();
        let lhs: f64 = resize_raw(&x, c, h, w, ho, wo).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = resize_adjoint(&y, c, h, w, ho, wo).iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn sorted_sum_is_order_free() {
        let mut a = vec![1e16, 1.0, -1e16, 3.5, 1e-3];
        let mut b = vec![3.5, -1e16, 1e-3, 1.0, 1e16];
        assert_eq!(sorted_sum(&mut a).to_bits(), sorted_sum(&mut b).to_bits());
    }
}
