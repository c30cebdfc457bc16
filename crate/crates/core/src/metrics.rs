//! Image quality metrics. Complex images are compared by magnitude.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn magnitudes(x: &Tensor) -> Tensor {
    if x.is_complex() {
        x.abs()
    } else {
        x.clone()
    }
}

fn check_pair(op: &'static str, x: &Tensor, reference: &Tensor) -> Result<()> {
    if x.shape() != reference.shape() {
        return Err(Error::Shape {
            op,
            detail: format!("{:?} vs {:?}", x.shape(), reference.shape()),
        });
    }
    Ok(())
}

/// `10 log10(peak² / mse)`; identical images give `f64::INFINITY`.
pub fn psnr(x: &Tensor, reference: &Tensor, peak: f64) -> Result<f64> {
    check_pair("psnr", x, reference)?;
    if !(peak > 0.0) {
        return Err(Error::InvalidArgument {
            op: "psnr",
            detail: format!("peak must be positive, got {peak}"),
        });
    }
    let (a, b) = (magnitudes(x), magnitudes(reference));
    let n = a.numel().max(1) as f64;
    let mse = a.sub(&b)?.norm_sq() / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

fn gaussian_window() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable weighted mean over every fully contained window.
fn filter(img: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * wo];
    for i in 0..h {
        for j in 0..wo {
            rows[i * wo + j] = (0..k).map(|t| g[t] * img[i * w + j + t]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for i in 0..ho {
        for j in 0..wo {
            out[i * wo + j] = (0..k).map(|t| g[t] * rows[(i + t) * wo + j]).sum();
        }
    }
    out
}

fn ssim_2d(x: &[f64], y: &[f64], h: usize, w: usize, peak: f64) -> f64 {
    let g = gaussian_window();
    let c1 = (SSIM_K1 * peak).powi(2);
    let c2 = (SSIM_K2 * peak).powi(2);
    let prod = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(p, q)| p * q).collect() };
    let mx = filter(x, h, w, &g);
    let my = filter(y, h, w, &g);
    let sxx = filter(&prod(x, x), h, w, &g);
    let syy = filter(&prod(y, y), h, w, &g);
    let sxy = filter(&prod(x, y), h, w, &g);
    let n = mx.len();
    let mut total = 0.0;
    for i in 0..n {
        let (a, b) = (mx[i], my[i]);
        let vx = sxx[i] - a * a;
        let vy = syy[i] - b * b;
        let cov = sxy[i] - a * b;
        total += ((2.0 * a * b + c1) * (2.0 * cov + c2)) / ((a * a + b * b + c1) * (vx + vy + c2));
    }
    total / n as f64
}

/// Mean structural similarity over 11×11 Gaussian windows (σ = 1.5) fully
/// inside the image, averaged over any leading axes.
pub fn ssim(x: &Tensor, reference: &Tensor, peak: f64) -> Result<f64> {
    check_pair("ssim", x, reference)?;
    let s = x.shape();
    if s.len() < 2 || s[s.len() - 1] < SSIM_WINDOW || s[s.len() - 2] < SSIM_WINDOW {
        return Err(Error::Shape {
            op: "ssim",
            detail: format!("images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {s:?}"),
        });
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let (a, b) = (magnitudes(x), magnitudes(reference));
    let items = a.numel() / (h * w);
    let mut total = 0.0;
    for n in 0..items {
        let r = n * h * w..(n + 1) * h * w;
        total += ssim_2d(&a.data()[r.clone()], &b.data()[r], h, w, peak);
    }
    Ok(total / items as f64)
}
