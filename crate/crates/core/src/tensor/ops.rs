//! Forward kernels and the raw-slice helpers their backward rules share.
//!
//! Every reduction accumulates in a fixed sequential order (no FMA, no
//! blocking over the reduced axis), so outputs are bit-reproducible and the
//! convolution matches a plain nested-loop reference exactly.

use crate::error::{dim_err, invalid, Result};

use super::Tensor;

/// Output geometry of a 2-D sliding window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Window {
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.stride == 0 {
            return Err(dim_err!("stride must be positive"));
        }
        let (ph, pw) = (h + 2 * self.padding, w + 2 * self.padding);
        if ph < self.kh || pw < self.kw {
            return Err(dim_err!(
                "window {}x{} larger than padded input {}x{}",
                self.kh,
                self.kw,
                ph,
                pw
            ));
        }
        Ok(((ph - self.kh) / self.stride + 1, (pw - self.kw) / self.stride + 1))
    }
}

fn expect_rank(t: &Tensor, rank: usize, what: &str) -> Result<()> {
    if t.ndim() != rank {
        return Err(dim_err!("{} must have rank {}, got shape {:?}", what, rank, t.shape()));
    }
    Ok(())
}

const MR: usize = 4;
const NR: usize = 16;

/// `out[m×n] += a[m×k] · b[k×n]`. Every output adds its `k` products to the
/// existing value one at a time, in order; blocking only spans `m` and `n`.
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    let mut panel = vec![0.0; k * NR];
    let mut j = 0;
    while j + NR <= n {
        for p in 0..k {
            panel[p * NR..(p + 1) * NR].copy_from_slice(&b[p * n + j..p * n + j + NR]);
        }
        let mut i = 0;
        while i + MR <= m {
            let mut acc = [[0.0f64; NR]; MR];
            for (r, row) in acc.iter_mut().enumerate() {
                row.copy_from_slice(&out[(i + r) * n + j..(i + r) * n + j + NR]);
            }
            for (p, bv) in panel.chunks_exact(NR).enumerate() {
                for (r, row) in acc.iter_mut().enumerate() {
                    let s = a[(i + r) * k + p];
                    for (o, &x) in row.iter_mut().zip(bv) {
                        *o += s * x;
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                out[(i + r) * n + j..(i + r) * n + j + NR].copy_from_slice(row);
            }
            i += MR;
        }
        if i < m {
            gemm_nn_edge(a, b, out, (i, m), (j, j + NR), k, n);
        }
        j += NR;
    }
    if j < n {
        gemm_nn_edge(a, b, out, (0, m), (j, n), k, n);
    }
}

fn gemm_nn_edge(a: &[f64], b: &[f64], out: &mut [f64], rows: (usize, usize), cols: (usize, usize), k: usize, n: usize) {
    for i in rows.0..rows.1 {
        let row = &mut out[i * n + cols.0..i * n + cols.1];
        for p in 0..k {
            let s = a[i * k + p];
            let brow = &b[p * n + cols.0..p * n + cols.1];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += s * bv;
            }
        }
    }
}

/// Row-major transpose of an `r×c` matrix.
pub(crate) fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut t = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            t[j * r + i] = a[i * c + j];
        }
    }
    t
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`.
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    gemm_nn(a, &transpose(b, n, k), out, m, k, n);
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`.
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    gemm_nn(&transpose(a, m, k), b, out, k, m, n);
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    expect_rank(a, 2, "matmul lhs")?;
    expect_rank(b, 2, "matmul rhs")?;
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(dim_err!("matmul inner extents differ: {:?} · {:?}", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; m * n];
    gemm_nn(a.data(), b.data(), &mut out, m, k, n);
    Tensor::new(vec![m, n], out)
}

/// Adds `bias[d]` along axis 1 of `x`, broadcasting over the batch axis and
/// over any trailing spatial axes (per-channel bias for conv outputs).
pub fn add_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if x.ndim() < 2 || bias.ndim() != 1 || bias.len() != x.shape()[1] {
        return Err(dim_err!("bias {:?} does not match input {:?}", bias.shape(), x.shape()));
    }
    let inner: usize = x.shape()[2..].iter().product();
    let d = bias.len();
    let mut out = x.clone();
    for (chunk_idx, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
        let b = bias.data()[chunk_idx % d];
        for v in chunk {
            *v += b;
        }
    }
    Ok(out)
}

/// Unrolls one sample `[C×H×W]` into columns `[C·kh·kw × H'·W']`, row `q`
/// starting at `cols[q·ld]`.
pub(crate) fn im2col(
    x: &[f64],
    (c, h, w): (usize, usize, usize),
    win: Window,
    (oh, ow): (usize, usize),
    cols: &mut [f64],
    ld: usize,
) {
    let p = oh * ow;
    let pad = win.padding as isize;
    let mut q = 0;
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..win.kh {
            for kj in 0..win.kw {
                let row = &mut cols[q * ld..q * ld + p];
                for oy in 0..oh {
                    let iy = (oy * win.stride + ki) as isize - pad;
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    if win.stride == 1 {
                        // valid ox satisfy 0 <= ox + kj - pad < w
                        let lo = (win.padding.saturating_sub(kj)).min(ow);
                        let hi = (w + win.padding).saturating_sub(kj).min(ow).max(lo);
                        dst[..lo].fill(0.0);
                        dst[hi..].fill(0.0);
                        let start = lo + kj - win.padding;
                        dst[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                        continue;
                    }
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * win.stride + kj) as isize - pad;
                        *d = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
                q += 1;
            }
        }
    }
}

/// Scatter-adds columns back onto one sample; inverse layout of [`im2col`].
pub(crate) fn col2im(
    cols: &[f64],
    (c, h, w): (usize, usize, usize),
    win: Window,
    (oh, ow): (usize, usize),
    ld: usize,
    x: &mut [f64],
) {
    let p = oh * ow;
    let pad = win.padding as isize;
    let mut q = 0;
    for ch in 0..c {
        let plane = &mut x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..win.kh {
            for kj in 0..win.kw {
                let row = &cols[q * ld..q * ld + p];
                for oy in 0..oh {
                    let iy = (oy * win.stride + ki) as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = iy as usize * w;
                    for ox in 0..ow {
                        let ix = (ox * win.stride + kj) as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            plane[base + ix as usize] += row[oy * ow + ox];
                        }
                    }
                }
                q += 1;
            }
        }
    }
}

/// Shape bookkeeping shared by the conv forward and backward passes.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub oh: usize,
    pub ow: usize,
    pub win: Window,
}

impl ConvDims {
    pub fn new(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Self> {
        expect_rank(input, 4, "conv2d input")?;
        expect_rank(kernel, 4, "conv2d kernel")?;
        let [n, c, h, w] = [input.shape()[0], input.shape()[1], input.shape()[2], input.shape()[3]];
        let [f, kc, kh, kw] = [kernel.shape()[0], kernel.shape()[1], kernel.shape()[2], kernel.shape()[3]];
        if kc != c {
            return Err(dim_err!("kernel expects {} channels, input has {}", kc, c));
        }
        let win = Window { kh, kw, stride, padding };
        let (oh, ow) = win.output_hw(h, w)?;
        Ok(ConvDims { n, c, h, w, f, oh, ow, win })
    }

    pub fn q(&self) -> usize {
        self.c * self.win.kh * self.win.kw
    }

    pub fn p(&self) -> usize {
        self.oh * self.ow
    }

    /// Sample ranges whose unrolled columns fit a fixed working set.
    pub fn chunks(&self) -> impl Iterator<Item = (usize, usize)> {
        let per = (COLS_BUDGET / (self.q() * self.p()).max(1)).max(1);
        let n = self.n;
        (0..n).step_by(per).map(move |s| (s, (s + per).min(n)))
    }

    /// Columns of samples `s0..s1` side by side: `[q × (s1−s0)·p]`.
    pub fn cols(&self, input: &Tensor, s0: usize, s1: usize) -> Vec<f64> {
        let (p, ld) = (self.p(), (s1 - s0) * self.p());
        let mut cols = vec![0.0; self.q() * ld];
        for s in s0..s1 {
            let off = (s - s0) * p;
            im2col(input.sample(s), (self.c, self.h, self.w), self.win, (self.oh, self.ow), &mut cols[off..], ld);
        }
        cols
    }
}

const COLS_BUDGET: usize = 1 << 20;

/// Cross-correlation with zero padding. Each output accumulates over
/// `(channel, row, col)` of the kernel in row-major order.
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let d = ConvDims::new(input, kernel, stride, padding)?;
    let (f, p) = (d.f, d.p());
    let mut out = vec![0.0; d.n * f * p];
    for (s0, s1) in d.chunks() {
        let ld = (s1 - s0) * p;
        let cols = d.cols(input, s0, s1);
        let mut y = vec![0.0; f * ld];
        gemm_nn(kernel.data(), &cols, &mut y, f, d.q(), ld);
        for s in s0..s1 {
            for ch in 0..f {
                let src = &y[ch * ld + (s - s0) * p..ch * ld + (s - s0 + 1) * p];
                out[(s * f + ch) * p..(s * f + ch + 1) * p].copy_from_slice(src);
            }
        }
    }
    Tensor::new(vec![d.n, f, d.oh, d.ow], out)
}

/// Max pooling without padding. Returns the pooled tensor and, per output,
/// the flat input index of the selected element (first maximum in row-major
/// window order).
pub fn maxpool2d(input: &Tensor, window: usize, stride: usize) -> Result<(Tensor, Vec<usize>)> {
    expect_rank(input, 4, "maxpool2d input")?;
    if window == 0 {
        return Err(dim_err!("pool window must be positive"));
    }
    let [n, c, h, w] = [input.shape()[0], input.shape()[1], input.shape()[2], input.shape()[3]];
    if h < window || w < window {
        return Err(dim_err!("pool window {} exceeds spatial extent {}x{}", window, h, w));
    }
    let win = Window { kh: window, kw: window, stride, padding: 0 };
    let (oh, ow) = win.output_hw(h, w)?;
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                let mut best_v = x[best];
                for ki in 0..window {
                    for kj in 0..window {
                        let idx = base + (oy * stride + ki) * w + ox * stride + kj;
                        if x[idx] > best_v {
                            best_v = x[idx];
                            best = idx;
                        }
                    }
                }
                out.push(best_v);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, oh, ow], out)?, arg))
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Row-wise softmax of `[N×K]` logits with max subtraction.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    expect_rank(logits, 2, "logits")?;
    let k = logits.shape()[1];
    let mut out = logits.data().to_vec();
    for row in out.chunks_mut(k) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    Tensor::new(logits.shape().to_vec(), out)
}

/// Mean negative log-likelihood of `labels` under softmax(logits).
/// Returns the loss and the softmax probabilities for the backward rule.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    expect_rank(logits, 2, "logits")?;
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != n {
        return Err(invalid!("{} labels for a batch of {}", labels.len(), n));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(invalid!("label {} out of range for {} classes", bad, k));
    }
    let probs = softmax(logits)?;
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.sample(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    Ok((total / n as f64, probs))
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_and_hand_product() {
        let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(matmul(&eye, &m).unwrap(), m);
        let a = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn blocked_gemm_matches_sequential_loop() {
        for (m, k, n) in [(1, 1, 1), (4, 3, 16), (5, 7, 17), (9, 2, 40), (3, 5, 15), (8, 1, 33)] {
            let a: Vec<f64> = (0..m * k).map(|i| ((i * 37) % 11) as f64 * 0.3 - 1.1).collect();
            let b: Vec<f64> = (0..k * n).map(|i| ((i * 53) % 13) as f64 * 0.7 - 2.9).collect();
            let init: Vec<f64> = (0..m * n).map(|i| i as f64 * 0.01).collect();
            let mut expect = init.clone();
            for i in 0..m {
                for j in 0..n {
                    for p in 0..k {
                        expect[i * n + j] += a[i * k + p] * b[p * n + j];
                    }
                }
            }
            let mut got = init;
            gemm_nn(&a, &b, &mut got, m, k, n);
            assert_eq!(got, expect, "{}x{}x{}", m, k, n);
        }
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &a), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn conv_identity_kernel() {
        let x = Tensor::from_fn(&[1, 1, 3, 3], |i| i as f64 - 4.0);
        let k = Tensor::full(&[1, 1, 1, 1], 1.0);
        assert_eq!(conv2d(&x, &k, 1, 0).unwrap(), x);
    }

    #[test]
    fn conv_zero_kernel_gives_zero() {
        let x = Tensor::from_fn(&[2, 2, 5, 5], |i| (i as f64).sin());
        let k = Tensor::zeros(&[3, 2, 3, 3]);
        let y = conv2d(&x, &k, 1, 1).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert_eq!(y.shape(), &[2, 3, 5, 5]);
    }

    #[test]
    fn conv_kernel_too_large() {
        let x = Tensor::zeros(&[1, 1, 3, 3]);
        let k = Tensor::zeros(&[1, 1, 4, 4]);
        assert!(conv2d(&x, &k, 1, 0).is_err());
        assert!(conv2d(&x, &k, 1, 1).is_ok());
    }

    #[test]
    fn maxpool_basic_and_ties() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, arg) = maxpool2d(&x, 2, 2).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(arg, vec![3]);

        let c = Tensor::full(&[1, 1, 4, 4], 0.7);
        let (y, arg) = maxpool2d(&c, 2, 2).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.7));
        assert_eq!(arg, vec![0, 2, 8, 10]);
    }

    #[test]
    fn maxpool_window_too_large() {
        let x = Tensor::zeros(&[1, 1, 2, 3]);
        assert!(maxpool2d(&x, 3, 1).is_err());
    }

    #[test]
    fn relu_values() {
        let x = Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn cross_entropy_uniform_and_stable() {
        let (l, _) = softmax_cross_entropy(&Tensor::zeros(&[3, 10]), &[0, 4, 9]).unwrap();
        assert!((l - 10f64.ln()).abs() < 1e-12);
        let big = Tensor::new(vec![1, 2], vec![1000.0, 0.0]).unwrap();
        let (l, p) = softmax_cross_entropy(&big, &[0]).unwrap();
        assert!(l.abs() < 1e-12 && p.is_finite());
        let huge = Tensor::new(vec![1, 3], vec![1e6, -1e6, 0.0]).unwrap();
        let (l, _) = softmax_cross_entropy(&huge, &[1]).unwrap();
        assert!(l.is_finite());
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let r = softmax_cross_entropy(&Tensor::zeros(&[1, 3]), &[3]);
        assert!(matches!(r, Err(crate::Error::Validation(_))));
    }

    #[test]
    fn argmax_prefers_lowest_on_ties() {
        assert_eq!(argmax(&[0.5, 1.0, 1.0]), 1);
        assert_eq!(argmax(&[2.0, 2.0]), 0);
    }
}
