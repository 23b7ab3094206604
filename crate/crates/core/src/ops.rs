//! Forward and backward kernels for the differentiable operations.
//!
//! Feature maps are laid out `[n, h, w, c]` (row-major, channel fastest).
//! The public entry points also accept a single `[h, w, c]` map. The
//! autodiff graph calls the batched kernels directly.

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

/// Default batch-norm epsilon.
pub const BN_EPS: f64 = 1e-5;
/// Weight of the newest batch in running-statistic updates.
pub const BN_MOMENTUM: f64 = 0.1;

/// `c = op(a) * op(b)` (or `c += ...` when `accumulate`). `a` is `m x k` after
/// the optional transpose and `b` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
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
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above guarantee every strided access stays in bounds.
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
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Plain matrix product of two rank-2 tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = as_matrix(a, "matmul lhs")?;
    let (k2, n) = as_matrix(b, "matmul rhs")?;
    if k != k2 {
        return dim_err(format!("matmul inner dims {k} vs {k2}"));
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), false, b.data(), false, &mut out, false);
    Ok(Tensor::from_parts(vec![m, n], out))
}

pub(crate) fn as_matrix(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => dim_err(format!("{what}: expected rank-2 tensor, got shape {s:?}")),
    }
}

/// `[h, w, c]` is promoted to `[1, h, w, c]`; the flag tells the caller to drop
/// the batch axis again.
fn batched_shape(t: &Tensor, what: &str) -> Result<([usize; 4], bool)> {
    match *t.shape() {
        [h, w, c] => Ok(([1, h, w, c], true)),
        [n, h, w, c] => Ok(([n, h, w, c], false)),
        ref s => dim_err(format!("{what}: expected [h,w,c] or [n,h,w,c], got {s:?}")),
    }
}

fn unbatch(out_shape: [usize; 4], single: bool, data: Vec<f64>) -> Tensor {
    let shape = if single {
        out_shape[1..].to_vec()
    } else {
        out_shape.to_vec()
    };
    Tensor::from_parts(shape, data)
}

// ---------------------------------------------------------------------------
// convolution

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(input: [usize; 4], kernel: &[usize], stride: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::Config("convolution stride must be positive".into()));
        }
        let [n, h, w, cin] = input;
        let &[kh, kw, kc, cout] = kernel else {
            return dim_err(format!("kernel must be [kh,kw,cin,cout], got {kernel:?}"));
        };
        if kc != cin {
            return dim_err(format!("kernel expects {kc} input channels, input has {cin}"));
        }
        if kh > h || kw > w {
            return dim_err(format!("kernel {kh}x{kw} larger than input {h}x{w}"));
        }
        Ok(Self {
            n,
            h,
            w,
            cin,
            kh,
            kw,
            cout,
            stride,
            oh: (h - kh) / stride + 1,
            ow: (w - kw) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    fn rows(&self) -> usize {
        self.n * self.oh * self.ow
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.n, self.oh, self.ow, self.cout]
    }
}

/// Unrolls every receptive field into one row, ordered (ki, kj, channel) to
/// match the kernel's `[kh, kw, cin, cout]` layout.
pub(crate) fn im2col(input: &[f64], g: &ConvGeom) -> Vec<f64> {
    let plen = g.patch_len();
    let run = g.kw * g.cin;
    let mut cols = vec![0.0; g.rows() * plen];
    let mut row = 0;
    for b in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let dst = &mut cols[row * plen..(row + 1) * plen];
                for ki in 0..g.kh {
                    let y = oy * g.stride + ki;
                    let src = ((b * g.h + y) * g.w + ox * g.stride) * g.cin;
                    dst[ki * run..(ki + 1) * run].copy_from_slice(&input[src..src + run]);
                }
                row += 1;
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom, grad_input: &mut [f64]) {
    let plen = g.patch_len();
    let run = g.kw * g.cin;
    let mut row = 0;
    for b in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let src = &cols[row * plen..(row + 1) * plen];
                for ki in 0..g.kh {
                    let y = oy * g.stride + ki;
                    let dst = ((b * g.h + y) * g.w + ox * g.stride) * g.cin;
                    for (d, s) in grad_input[dst..dst + run]
                        .iter_mut()
                        .zip(&src[ki * run..(ki + 1) * run])
                    {
                        *d += s;
                    }
                }
                row += 1;
            }
        }
    }
}

pub(crate) fn conv2d_forward(input: &[f64], kernel: &[f64], g: &ConvGeom) -> Vec<f64> {
    let cols = im2col(input, g);
    let mut out = vec![0.0; g.rows() * g.cout];
    gemm(g.rows(), g.patch_len(), g.cout, &cols, false, kernel, false, &mut out, false);
    out
}

/// Returns `(grad_input, grad_kernel)`.
pub(crate) fn conv2d_backward(
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    g: &ConvGeom,
) -> (Vec<f64>, Vec<f64>) {
    let cols = im2col(input, g);
    let (rows, plen) = (g.rows(), g.patch_len());
    let mut grad_kernel = vec![0.0; plen * g.cout];
    gemm(plen, rows, g.cout, &cols, true, grad_out, false, &mut grad_kernel, false);
    let mut grad_cols = vec![0.0; rows * plen];
    gemm(rows, g.cout, plen, grad_out, false, kernel, true, &mut grad_cols, false);
    let mut grad_input = vec![0.0; input.len()];
    col2im(&grad_cols, g, &mut grad_input);
    (grad_input, grad_kernel)
}

/// Valid (unpadded) 2-D convolution:
/// `out[x, y, o] = sum_{i, j, k} kernel[i, j, k, o] * input[x*s + i, y*s + j, k]`.
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize) -> Result<Tensor> {
    let (shape, single) = batched_shape(input, "conv2d input")?;
    let g = ConvGeom::new(shape, kernel.shape(), stride)?;
    let out = conv2d_forward(input.data(), kernel.data(), &g);
    Ok(unbatch(g.out_shape(), single, out))
}

// ---------------------------------------------------------------------------
// pooling and cropping

/// 2x2 / stride-2 max pooling. Ties go to the first cell in row-major window
/// order. Returned indices point into the flattened input.
pub(crate) fn maxpool2x2_forward(input: &[f64], shape: [usize; 4]) -> Result<(Vec<f64>, Vec<usize>)> {
    let [n, h, w, c] = shape;
    if h % 2 != 0 || w % 2 != 0 {
        return dim_err(format!("2x2 max-pool needs even spatial dims, got {h}x{w}"));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * oh * ow * c);
    let mut argmax = Vec::with_capacity(n * oh * ow * c);
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best_idx = ((b * h + 2 * oy) * w + 2 * ox) * c + ch;
                    let mut best = input[best_idx];
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = ((b * h + 2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                        if input[idx] > best {
                            best = input[idx];
                            best_idx = idx;
                        }
                    }
                    out.push(best);
                    argmax.push(best_idx);
                }
            }
        }
    }
    Ok((out, argmax))
}

pub fn maxpool2d(input: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (shape, single) = batched_shape(input, "maxpool2d input")?;
    let (out, argmax) = maxpool2x2_forward(input.data(), shape)?;
    let [n, h, w, c] = shape;
    Ok((unbatch([n, h / 2, w / 2, c], single, out), argmax))
}

/// Scatters `grad_out` onto the recorded argmax cells.
pub(crate) fn scatter_add(grad_out: &[f64], indices: &[usize], input_len: usize) -> Vec<f64> {
    let mut grad = vec![0.0; input_len];
    for (&gv, &idx) in grad_out.iter().zip(indices) {
        grad[idx] += gv;
    }
    grad
}

/// Drops the last row and/or column so both spatial dims are even.
pub(crate) fn crop_to_even(input: &[f64], shape: [usize; 4]) -> (Vec<f64>, [usize; 4]) {
    let [n, h, w, c] = shape;
    let (eh, ew) = (h - h % 2, w - w % 2);
    let mut out = Vec::with_capacity(n * eh * ew * c);
    for b in 0..n {
        for y in 0..eh {
            let start = ((b * h + y) * w) * c;
            out.extend_from_slice(&input[start..start + ew * c]);
        }
    }
    (out, [n, eh, ew, c])
}

pub(crate) fn crop_to_even_backward(grad_out: &[f64], shape: [usize; 4]) -> Vec<f64> {
    let [n, h, w, c] = shape;
    let (eh, ew) = (h - h % 2, w - w % 2);
    let mut grad = vec![0.0; n * h * w * c];
    let mut src = 0;
    for b in 0..n {
        for y in 0..eh {
            let start = ((b * h + y) * w) * c;
            grad[start..start + ew * c].copy_from_slice(&grad_out[src..src + ew * c]);
            src += ew * c;
        }
    }
    grad
}

// ---------------------------------------------------------------------------
// batch normalization (statistics over every axis except the last)

#[derive(Debug, Clone)]
pub(crate) struct BnCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub(crate) fn batchnorm_train_forward(
    x: &[f64],
    channels: usize,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> (Vec<f64>, BnCache) {
    let m = x.len() / channels;
    let mut mean = vec![0.0; channels];
    for row in x.chunks_exact(channels) {
        for (acc, v) in mean.iter_mut().zip(row) {
            *acc += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= m as f64);
    let mut var = vec![0.0; channels];
    for row in x.chunks_exact(channels) {
        for ((acc, v), mu) in var.iter_mut().zip(row).zip(&mean) {
            *acc += (v - mu) * (v - mu);
        }
    }
    var.iter_mut().for_each(|v| *v /= m as f64);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = Vec::with_capacity(x.len());
    let mut y = Vec::with_capacity(x.len());
    for row in x.chunks_exact(channels) {
        for ch in 0..channels {
            let xh = (row[ch] - mean[ch]) * inv_std[ch];
            xhat.push(xh);
            y.push(gamma[ch] * xh + beta[ch]);
        }
    }
    (
        y,
        BnCache {
            xhat,
            inv_std,
            mean,
            var,
        },
    )
}

/// Returns `(grad_x, grad_gamma, grad_beta)` for training-mode batch norm.
pub(crate) fn batchnorm_train_backward(
    grad_out: &[f64],
    cache: &BnCache,
    gamma: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let channels = gamma.len();
    let m = grad_out.len() / channels;
    let mut sum_dy = vec![0.0; channels];
    let mut sum_dy_xhat = vec![0.0; channels];
    for (dy, xh) in grad_out.chunks_exact(channels).zip(cache.xhat.chunks_exact(channels)) {
        for ch in 0..channels {
            sum_dy[ch] += dy[ch];
            sum_dy_xhat[ch] += dy[ch] * xh[ch];
        }
    }
    let mut grad_x = Vec::with_capacity(grad_out.len());
    let mf = m as f64;
    for (dy, xh) in grad_out.chunks_exact(channels).zip(cache.xhat.chunks_exact(channels)) {
        for ch in 0..channels {
            let g = gamma[ch] * cache.inv_std[ch] / mf;
            grad_x.push(g * (mf * dy[ch] - sum_dy[ch] - xh[ch] * sum_dy_xhat[ch]));
        }
    }
    (grad_x, sum_dy_xhat, sum_dy)
}

pub(crate) fn batchnorm_eval_forward(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    mean: &[f64],
    var: &[f64],
    eps: f64,
) -> (Vec<f64>, Vec<f64>) {
    let channels = gamma.len();
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = Vec::with_capacity(x.len());
    let mut y = Vec::with_capacity(x.len());
    for row in x.chunks_exact(channels) {
        for ch in 0..channels {
            let xh = (row[ch] - mean[ch]) * inv_std[ch];
            xhat.push(xh);
            y.push(gamma[ch] * xh + beta[ch]);
        }
    }
    (y, xhat)
}

/// Training-mode batch normalization over all leading axes; the last axis is
/// the channel axis.
pub fn batchnorm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let channels = check_bn_shapes(x, gamma, beta)?;
    let (y, _) = batchnorm_train_forward(x.data(), channels, gamma.data(), beta.data(), eps);
    Ok(Tensor::from_parts(x.shape().to_vec(), y))
}

pub(crate) fn check_bn_shapes(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<usize> {
    let channels = *x
        .shape()
        .last()
        .ok_or_else(|| Error::Dimension("batchnorm on a scalar".into()))?;
    if gamma.len() != channels || beta.len() != channels {
        return dim_err(format!(
            "batchnorm: {channels} channels but gamma/beta have {}/{}",
            gamma.len(),
            beta.len()
        ));
    }
    Ok(channels)
}

// ---------------------------------------------------------------------------
// elementwise and row-wise helpers

pub fn relu(x: &Tensor) -> Tensor {
    Tensor::from_parts(
        x.shape().to_vec(),
        x.data().iter().map(|&v| v.max(0.0)).collect(),
    )
}

/// Numerically stable softmax of one row.
pub(crate) fn softmax_row(z: &[f64], out: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - max).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

/// Softmax over the last axis.
pub fn softmax(z: &Tensor) -> Tensor {
    let cols = *z.shape().last().unwrap_or(&1);
    let mut out = vec![0.0; z.len()];
    for (src, dst) in z.data().chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        softmax_row(src, dst);
    }
    Tensor::from_parts(z.shape().to_vec(), out)
}

pub(crate) fn softmax_backward(p: &[f64], grad_out: &[f64], cols: usize) -> Vec<f64> {
    let mut grad = vec![0.0; p.len()];
    for ((pr, gr), dst) in p
        .chunks_exact(cols)
        .zip(grad_out.chunks_exact(cols))
        .zip(grad.chunks_exact_mut(cols))
    {
        let dot: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((d, &pi), &gi) in dst.iter_mut().zip(pr).zip(gr) {
            *d = pi * (gi - dot);
        }
    }
    grad
}

pub(crate) fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return dim_err(format!("{} labels for {rows} rows", labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Data(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    Ok(())
}

/// Mean negative log-likelihood of `labels` under row-wise probabilities.
pub fn cross_entropy(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    let (rows, classes) = as_matrix(probs, "cross_entropy")?;
    check_labels(labels, rows, classes)?;
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -probs.data()[i * classes + y].max(f64::MIN_POSITIVE).ln())
        .sum();
    Ok(total / rows as f64)
}

/// Row-wise argmax; the lowest index wins ties.
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let cols = *t.shape().last().unwrap_or(&1);
    t.data().chunks_exact(cols).map(argmax).collect()
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
