//! Tape-free numeric kernels shared by the autodiff primitives and the
//! physics operators.

use std::cell::RefCell;
use std::sync::Arc;

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if input.len() != 4 {
            return Err(Error::shape("conv2d", format!("input must be [N,Cin,H,W], got {input:?}")));
        }
        if kernel.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("kernel must be [Cout,Cin,kh,kw], got {kernel:?}"),
            ));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be >= 1"));
        }
        let (batch, c_in, h, w) = (input[0], input[1], input[2], input[3]);
        let (c_out, k_cin, kh, kw) = (kernel[0], kernel[1], kernel[2], kernel[3]);
        if c_in != k_cin {
            return Err(Error::shape(
                "conv2d",
                format!("Cin: input has {c_in} channels but kernel expects {k_cin}"),
            ));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::shape(
                "conv2d",
                format!("H/W: padded input {}x{} smaller than kernel {kh}x{kw}", h + 2 * padding, w + 2 * padding),
            ));
        }
        Ok(ConvGeometry {
            batch,
            c_in,
            c_out,
            h,
            w,
            kh,
            kw,
            stride,
            padding,
            h_out: (h + 2 * padding - kh) / stride + 1,
            w_out: (w + 2 * padding - kw) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn out_pixels(&self) -> usize {
        self.h_out * self.w_out
    }
}

fn im2col(x: &[f64], g: &ConvGeometry, cols: &mut [f64]) {
    let np = g.out_pixels();
    for c in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * np..(row + 1) * np];
                for oi in 0..g.h_out {
                    let ii = (oi * g.stride + ki) as isize - g.padding as isize;
                    let line = &mut dst[oi * g.w_out..(oi + 1) * g.w_out];
                    if ii < 0 || ii >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &x[(c * g.h + ii as usize) * g.w..(c * g.h + ii as usize + 1) * g.w];
                    for (oj, v) in line.iter_mut().enumerate() {
                        let jj = (oj * g.stride + kj) as isize - g.padding as isize;
                        *v = if jj < 0 || jj >= g.w as isize { 0.0 } else { src[jj as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeometry, x: &mut [f64]) {
    let np = g.out_pixels();
    for c in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * np..(row + 1) * np];
                for oi in 0..g.h_out {
                    let ii = (oi * g.stride + ki) as isize - g.padding as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + ii as usize) * g.w;
                    for oj in 0..g.w_out {
                        let jj = (oj * g.stride + kj) as isize - g.padding as isize;
                        if jj >= 0 && jj < g.w as isize {
                            x[base + jj as usize] += src[oi * g.w_out + oj];
                        }
                    }
                }
            }
        }
    }
}

/// `c = beta * c + a · b` with optional transposes on row-major slices.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    let av = if a_t {
        ArrayView2::from_shape((k, m), a).expect("gemm a").reversed_axes()
    } else {
        ArrayView2::from_shape((m, k), a).expect("gemm a")
    };
    let bv = if b_t {
        ArrayView2::from_shape((n, k), b).expect("gemm b").reversed_axes()
    } else {
        ArrayView2::from_shape((k, n), b).expect("gemm b")
    };
    let mut cv = ArrayViewMut2::from_shape((m, n), c).expect("gemm c");
    general_mat_mul(1.0, &av, &bv, beta, &mut cv);
}

/// Cross-correlation (no kernel flip), zero padding.
pub fn conv2d_forward(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<(Tensor, ConvGeometry)> {
    input.expect_real("conv2d")?;
    kernel.expect_real("conv2d")?;
    let g = ConvGeometry::new(input.shape(), kernel.shape(), stride, padding)?;
    if let Some(b) = bias {
        b.expect_real("conv2d")?;
        if b.shape() != [g.c_out] {
            return Err(Error::shape(
                "conv2d",
                format!("Cout: bias shape {:?} does not match {} output channels", b.shape(), g.c_out),
            ));
        }
    }
    let np = g.out_pixels();
    let pl = g.patch_len();
    let in_per = g.c_in * g.h * g.w;
    let out_per = g.c_out * np;
    let mut out = vec![0.0; g.batch * out_per];
    let mut cols = vec![0.0; pl * np];
    for n in 0..g.batch {
        let x = &input.data()[n * in_per..(n + 1) * in_per];
        let o = &mut out[n * out_per..(n + 1) * out_per];
        if let Some(b) = bias {
            for (co, chunk) in o.chunks_exact_mut(np).enumerate() {
                chunk.fill(b.data()[co]);
            }
        }
        im2col(x, &g, &mut cols);
        gemm(g.c_out, pl, np, kernel.data(), false, &cols, false, 1.0, o);
    }
    Ok((Tensor::new(&[g.batch, g.c_out, g.h_out, g.w_out], out)?, g))
}

pub struct ConvGrads {
    pub input: Tensor,
    pub kernel: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    g: &ConvGeometry,
) -> Result<ConvGrads> {
    let np = g.out_pixels();
    let pl = g.patch_len();
    let in_per = g.c_in * g.h * g.w;
    let out_per = g.c_out * np;
    let mut gx = vec![0.0; g.batch * in_per];
    let mut gk = vec![0.0; g.c_out * pl];
    let mut gb = vec![0.0; g.c_out];
    let mut cols = vec![0.0; pl * np];
    let mut gcols = vec![0.0; pl * np];
    for n in 0..g.batch {
        let x = &input.data()[n * in_per..(n + 1) * in_per];
        let go = &grad_out.data()[n * out_per..(n + 1) * out_per];
        for (co, chunk) in go.chunks_exact(np).enumerate() {
            gb[co] += chunk.iter().sum::<f64>();
        }
        im2col(x, g, &mut cols);
        gemm(g.c_out, np, pl, go, false, &cols, true, 1.0, &mut gk);
        gemm(pl, g.c_out, np, kernel.data(), true, go, false, 0.0, &mut gcols);
        col2im(&gcols, g, &mut gx[n * in_per..(n + 1) * in_per]);
    }
    Ok(ConvGrads {
        input: Tensor::new(input.shape(), gx)?,
        kernel: Tensor::new(kernel.shape(), gk)?,
        bias: Tensor::new(&[g.c_out], gb)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel statistics and normalised values saved for the backward pass.
pub struct BatchNormCache {
    pub normalized: Tensor,
    pub inv_std: Vec<f64>,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

pub fn check_nchw(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize)> {
    if t.shape().len() != 4 {
        return Err(Error::shape(op, format!("expected [N,C,H,W], got {:?}", t.shape())));
    }
    let s = t.shape();
    Ok((s[0], s[1], s[2] * s[3]))
}

#[allow(clippy::too_many_arguments)]
pub fn batch_norm_forward(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
    mode: Mode,
    eps: f64,
) -> Result<(Tensor, BatchNormCache)> {
    input.expect_real("batch_norm")?;
    let (n, c, hw) = check_nchw("batch_norm", input)?;
    for (name, v) in [
        ("gamma", gamma),
        ("beta", beta),
        ("running_mean", running_mean),
        ("running_var", running_var),
    ] {
        if v.shape() != [c] {
            return Err(Error::shape(
                "batch_norm",
                format!("{name} has shape {:?}, expected [{c}]", v.shape()),
            ));
        }
    }
    if !(eps > 0.0) {
        return Err(Error::invalid("batch_norm", format!("eps must be positive, got {eps}")));
    }
    let count = n * hw;
    let x = input.data();
    let (mean, var) = match mode {
        Mode::Eval => (running_mean.data().to_vec(), running_var.data().to_vec()),
        Mode::Train => {
            if count == 0 {
                return Err(Error::invalid("batch_norm", "empty batch in train mode"));
            }
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let mut s = 0.0;
                for b in 0..n {
                    s += x[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().sum::<f64>();
                }
                let m = s / count as f64;
                let mut q = 0.0;
                for b in 0..n {
                    q += x[(b * c + ch) * hw..(b * c + ch + 1) * hw]
                        .iter()
                        .map(|v| (v - m) * (v - m))
                        .sum::<f64>();
                }
                mean[ch] = m;
                var[ch] = q / count as f64;
            }
            (mean, var)
        }
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            let (g, bt) = (gamma.data()[ch], beta.data()[ch]);
            for i in off..off + hw {
                let h = (x[i] - mean[ch]) * inv_std[ch];
                xhat[i] = h;
                out[i] = g * h + bt;
            }
        }
    }
    Ok((
        Tensor::new(input.shape(), out)?,
        BatchNormCache {
            normalized: Tensor::new(input.shape(), xhat)?,
            inv_std,
            batch_mean: mean,
            batch_var: var,
        },
    ))
}

pub struct BatchNormGrads {
    pub input: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
}

pub fn batch_norm_backward(
    grad_out: &Tensor,
    gamma: &Tensor,
    cache: &BatchNormCache,
    mode: Mode,
) -> Result<BatchNormGrads> {
    let (n, c, hw) = check_nchw("batch_norm", grad_out)?;
    let g = grad_out.data();
    let xhat = cache.normalized.data();
    let mut g_gamma = vec![0.0; c];
    let mut g_beta = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            for i in off..off + hw {
                g_gamma[ch] += g[i] * xhat[i];
                g_beta[ch] += g[i];
            }
        }
    }
    let count = (n * hw) as f64;
    let mut gx = vec![0.0; g.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            let scale = gamma.data()[ch] * cache.inv_std[ch];
            for i in off..off + hw {
                gx[i] = match mode {
                    Mode::Eval => scale * g[i],
                    Mode::Train => {
                        scale * (g[i] - g_beta[ch] / count - xhat[i] * g_gamma[ch] / count)
                    }
                };
            }
        }
    }
    Ok(BatchNormGrads {
        input: Tensor::new(grad_out.shape(), gx)?,
        gamma: Tensor::new(&[c], g_gamma)?,
        beta: Tensor::new(&[c], g_beta)?,
    })
}

/// Exponential-moving-average update of running statistics (unbiased variance).
pub fn batch_norm_running_update(
    running_mean: &Tensor,
    running_var: &Tensor,
    cache: &BatchNormCache,
    count: usize,
    momentum: f64,
) -> Result<(Tensor, Tensor)> {
    let unbias = if count > 1 {
        count as f64 / (count - 1) as f64
    } else {
        1.0
    };
    let rm: Vec<f64> = running_mean
        .data()
        .iter()
        .zip(&cache.batch_mean)
        .map(|(r, m)| (1.0 - momentum) * r + momentum * m)
        .collect();
    let rv: Vec<f64> = running_var
        .data()
        .iter()
        .zip(&cache.batch_var)
        .map(|(r, v)| (1.0 - momentum) * r + momentum * v * unbias)
        .collect();
    Ok((
        Tensor::new(running_mean.shape(), rm)?,
        Tensor::new(running_var.shape(), rv)?,
    ))
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(len)
        } else {
            p.plan_fft_forward(len)
        }
    })
}

fn trailing_hw(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    let s = t.shape();
    if s.len() < 2 {
        return Err(Error::shape(op, format!("need at least 2 axes, got {s:?}")));
    }
    Ok((s[s.len() - 2], s[s.len() - 1]))
}

fn fft2_impl(input: &Tensor, inverse: bool) -> Result<Tensor> {
    let op = if inverse { "ifft2" } else { "fft2" };
    input.expect_complex(op)?;
    let (h, w) = trailing_hw(op, input)?;
    let plane = h * w;
    let row_fft = plan(w, inverse);
    let col_fft = plan(h, inverse);
    let norm = 1.0 / (plane as f64).sqrt();
    let mut out = vec![0.0; input.data().len()];
    let mut buf = vec![Complex64::new(0.0, 0.0); plane];
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    for (src, dst) in input
        .data()
        .chunks_exact(2 * plane)
        .zip(out.chunks_exact_mut(2 * plane))
    {
        for (b, c) in buf.iter_mut().zip(src.chunks_exact(2)) {
            *b = Complex64::new(c[0], c[1]);
        }
        for row in buf.chunks_exact_mut(w) {
            row_fft.process(row);
        }
        for j in 0..w {
            for i in 0..h {
                col[i] = buf[i * w + j];
            }
            col_fft.process(&mut col);
            for i in 0..h {
                buf[i * w + j] = col[i];
            }
        }
        for (b, c) in buf.iter().zip(dst.chunks_exact_mut(2)) {
            c[0] = b.re * norm;
            c[1] = b.im * norm;
        }
    }
    Tensor::with_dtype(input.shape(), DType::Complex, out)
}

/// Unitary 2-D DFT over the two trailing axes.
pub fn fft2(input: &Tensor) -> Result<Tensor> {
    fft2_impl(input, false)
}

/// Unitary inverse 2-D DFT over the two trailing axes.
pub fn ifft2(input: &Tensor) -> Result<Tensor> {
    fft2_impl(input, true)
}

/// Rotation by `k·90°` counter-clockwise over the two trailing axes.
pub fn rotate90(input: &Tensor, k: usize) -> Result<Tensor> {
    let k = k % 4;
    rotate90_each(input, &vec![k; input.shape().first().copied().unwrap_or(1)])
}

/// Rotation with a separate quarter-turn count per leading-axis item.
pub fn rotate90_each(input: &Tensor, ks: &[usize]) -> Result<Tensor> {
    let (h, w) = trailing_hw("rotate90", input)?;
    let lead = input.shape()[0];
    if input.shape().len() > 2 && ks.len() != lead {
        return Err(Error::shape(
            "rotate90",
            format!("{} rotation counts for leading axis of {lead}", ks.len()),
        ));
    }
    if ks.iter().any(|k| k % 2 == 1) && h != w {
        return Err(Error::shape(
            "rotate90",
            format!("odd quarter turns need a square image, got {h}x{w}"),
        ));
    }
    let width = input.dtype().width();
    let plane = h * w * width;
    let per_item = if input.shape().len() > 2 {
        input.data().len() / lead
    } else {
        input.data().len()
    };
    let src = input.data();
    let mut out = vec![0.0; src.len()];
    for (p, (s, d)) in src
        .chunks_exact(plane)
        .zip(out.chunks_exact_mut(plane))
        .enumerate()
    {
        let k = ks.get(p * plane / per_item).copied().unwrap_or(0) % 4;
        for i in 0..h {
            for j in 0..w {
                let (si, sj) = match k {
                    0 => (i, j),
                    1 => (j, w - 1 - i),
                    2 => (h - 1 - i, w - 1 - j),
                    _ => (h - 1 - j, i),
                };
                let from = (si * w + sj) * width;
                let to = (i * w + j) * width;
                d[to..to + width].copy_from_slice(&s[from..from + width]);
            }
        }
    }
    Tensor::with_dtype(input.shape(), input.dtype(), out)
}

/// Complex `[N, ...]` to real `[N, 2, ...]` with real and imaginary planes.
pub fn complex_to_channels(input: &Tensor) -> Result<Tensor> {
    input.expect_complex("complex_to_channels")?;
    let s = input.shape();
    if s.is_empty() {
        return Err(Error::shape("complex_to_channels", "need a leading batch axis"));
    }
    let n = s[0];
    let per = input.numel() / n.max(1);
    let mut out = vec![0.0; input.data().len()];
    for b in 0..n {
        for i in 0..per {
            let src = 2 * (b * per + i);
            out[b * 2 * per + i] = input.data()[src];
            out[b * 2 * per + per + i] = input.data()[src + 1];
        }
    }
    let mut shape = vec![n, 2];
    shape.extend_from_slice(&s[1..]);
    Tensor::new(&shape, out)
}

/// Inverse of [`complex_to_channels`].
pub fn channels_to_complex(input: &Tensor) -> Result<Tensor> {
    input.expect_real("channels_to_complex")?;
    let s = input.shape();
    if s.len() < 2 || s[1] != 2 {
        return Err(Error::shape(
            "channels_to_complex",
            format!("expected [N,2,...], got {s:?}"),
        ));
    }
    let n = s[0];
    let per = input.numel() / (2 * n.max(1));
    let mut out = vec![0.0; input.data().len()];
    for b in 0..n {
        for i in 0..per {
            let dst = 2 * (b * per + i);
            out[dst] = input.data()[b * 2 * per + i];
            out[dst + 1] = input.data()[b * 2 * per + per + i];
        }
    }
    let mut shape = vec![n];
    shape.extend_from_slice(&s[2..]);
    Tensor::with_dtype(&shape, DType::Complex, out)
}
