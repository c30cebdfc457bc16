//! Multi-coil Cartesian MRI: `A_i = P F S_i`.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::mask::SamplingMask;
use super::{LinearOperator, OperatorDescriptor};
use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{DType, Tensor};

/// Complex coil sensitivity profiles `[ncoils, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoilMaps {
    maps: Tensor,
}

impl CoilMaps {
    /// Wraps complex maps, checking that the sum of squared magnitudes is one at every pixel.
    pub fn new(maps: Tensor) -> Result<Self> {
        maps.expect_complex("CoilMaps")?;
        if maps.shape().len() != 3 {
            return Err(Error::shape("CoilMaps", format!("expected [C,H,W], got {:?}", maps.shape())));
        }
        let cm = CoilMaps { maps };
        let worst = cm
            .sum_of_squares()
            .iter()
            .map(|s| (s - 1.0).abs())
            .fold(0.0, f64::max);
        if worst > 1e-6 {
            return Err(Error::invalid(
                "CoilMaps",
                format!("sum of squared magnitudes deviates from one by {worst:e}"),
            ));
        }
        Ok(cm)
    }

    pub fn single(height: usize, width: usize) -> Self {
        let mut data = vec![0.0; 2 * height * width];
        data.iter_mut().step_by(2).for_each(|v| *v = 1.0);
        CoilMaps {
            maps: Tensor::with_dtype(&[1, height, width], DType::Complex, data).expect("shape"),
        }
    }

    /// Smooth Gaussian-bump magnitudes centred on a ring around the field of
    /// view with slowly varying linear phase, normalised by root-sum-of-squares.
    pub fn synthetic(ncoils: usize, height: usize, width: usize, seed: u64) -> Result<Self> {
        if ncoils == 0 || height == 0 || width == 0 {
            return Err(Error::invalid("CoilMaps::synthetic", "sizes must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let plane = height * width;
        let mut raw = vec![Complex64::new(0.0, 0.0); ncoils * plane];
        let (cy, cx) = ((height as f64 - 1.0) / 2.0, (width as f64 - 1.0) / 2.0);
        let radius = 0.6 * height.max(width) as f64;
        let spread = 0.55 * height.max(width) as f64;
        let base_angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        for c in 0..ncoils {
            let angle = base_angle + std::f64::consts::TAU * c as f64 / ncoils as f64;
            let (py, px) = (cy + radius * angle.sin(), cx + radius * angle.cos());
            let ky: f64 = rng.gen_range(-1.0..1.0) * std::f64::consts::PI / height as f64;
            let kx: f64 = rng.gen_range(-1.0..1.0) * std::f64::consts::PI / width as f64;
            let phi0: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            for i in 0..height {
                for j in 0..width {
                    let d2 = (i as f64 - py).powi(2) + (j as f64 - px).powi(2);
                    let mag = (-d2 / (2.0 * spread * spread)).exp();
                    let phase = phi0 + ky * i as f64 + kx * j as f64;
                    raw[c * plane + i * width + j] = Complex64::from_polar(mag, phase);
                }
            }
        }
        for p in 0..plane {
            let sos: f64 = (0..ncoils).map(|c| raw[c * plane + p].norm_sqr()).sum::<f64>().sqrt();
            for c in 0..ncoils {
                raw[c * plane + p] /= sos;
            }
        }
        CoilMaps::new(Tensor::from_complex(&[ncoils, height, width], &raw)?)
    }

    pub fn ncoils(&self) -> usize {
        self.maps.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.maps.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.maps.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.maps
    }

    pub fn sum_of_squares(&self) -> Vec<f64> {
        let plane = self.height() * self.width();
        let d = self.maps.data();
        (0..plane)
            .map(|p| {
                (0..self.ncoils())
                    .map(|c| {
                        let k = 2 * (c * plane + p);
                        d[k] * d[k] + d[k + 1] * d[k + 1]
                    })
                    .sum()
            })
            .collect()
    }
}

fn check_image(op: &'static str, x: &Tensor, maps: &CoilMaps, mask: &SamplingMask) -> Result<usize> {
    x.expect_complex(op)?;
    let s = x.shape();
    if s.len() != 3 || s[1] != maps.height() || s[2] != maps.width() {
        return Err(Error::shape(
            op,
            format!("image {:?} vs coil maps {}x{}", s, maps.height(), maps.width()),
        ));
    }
    if mask.width() != maps.width() {
        return Err(Error::shape(
            op,
            format!("mask width {} vs image width {}", mask.width(), maps.width()),
        ));
    }
    Ok(s[0])
}

/// Mask columns are in centred (fftshifted) order; FFT column `k` sits at
/// centred position `(k + w/2) mod w`, so the calibration block covers DC.
fn apply_mask(k: &mut [f64], width: usize, mask: &SamplingMask) {
    for (idx, c) in k.chunks_exact_mut(2).enumerate() {
        if !mask.is_sampled((idx % width + width / 2) % width) {
            c[0] = 0.0;
            c[1] = 0.0;
        }
    }
}

/// Per coil: multiply by `S_i`, unitary 2-D FFT, zero unsampled columns.
/// `x`: complex `[N,H,W]`; result: complex `[N,C,H,W]`.
pub fn mri_forward(x: &Tensor, maps: &CoilMaps, mask: &SamplingMask) -> Result<Tensor> {
    let n = check_image("mri_forward", x, maps, mask)?;
    let (nc, h, w) = (maps.ncoils(), maps.height(), maps.width());
    let plane = 2 * h * w;
    let s = maps.tensor().data();
    let mut coil_images = vec![0.0; n * nc * plane];
    for b in 0..n {
        let img = &x.data()[b * plane..(b + 1) * plane];
        for c in 0..nc {
            let sm = &s[c * plane..(c + 1) * plane];
            let dst = &mut coil_images[(b * nc + c) * plane..(b * nc + c + 1) * plane];
            for p in 0..h * w {
                let (xr, xi) = (img[2 * p], img[2 * p + 1]);
                let (sr, si) = (sm[2 * p], sm[2 * p + 1]);
                dst[2 * p] = sr * xr - si * xi;
                dst[2 * p + 1] = sr * xi + si * xr;
            }
        }
    }
    let coil_images = Tensor::with_dtype(&[n, nc, h, w], DType::Complex, coil_images)?;
    let mut k = kernels::fft2(&coil_images)?;
    apply_mask(k.data_mut(), w, mask);
    Ok(k)
}

/// `Aᴴ y = Σ_i conj(S_i) · F⁻¹(P y_i)`, summed in coil order.
pub fn mri_adjoint(y: &Tensor, maps: &CoilMaps, mask: &SamplingMask) -> Result<Tensor> {
    y.expect_complex("mri_adjoint")?;
    let (nc, h, w) = (maps.ncoils(), maps.height(), maps.width());
    let s = y.shape();
    if s.len() != 4 || s[1] != nc || s[2] != h || s[3] != w {
        return Err(Error::shape(
            "mri_adjoint",
            format!("k-space {:?} vs maps [{nc},{h},{w}]", s),
        ));
    }
    if mask.width() != w {
        return Err(Error::shape("mri_adjoint", format!("mask width {} vs {w}", mask.width())));
    }
    let n = s[0];
    let mut masked = y.clone();
    apply_mask(masked.data_mut(), w, mask);
    let coil_images = kernels::ifft2(&masked)?;
    let plane = 2 * h * w;
    let sm = maps.tensor().data();
    let ci = coil_images.data();
    let mut out = vec![0.0; n * plane];
    for b in 0..n {
        let dst = &mut out[b * plane..(b + 1) * plane];
        for c in 0..nc {
            let src = &ci[(b * nc + c) * plane..(b * nc + c + 1) * plane];
            let m = &sm[c * plane..(c + 1) * plane];
            for p in 0..h * w {
                let (yr, yi) = (src[2 * p], src[2 * p + 1]);
                let (sr, si) = (m[2 * p], -m[2 * p + 1]);
                dst[2 * p] += sr * yr - si * yi;
                dst[2 * p + 1] += sr * yi + si * yr;
            }
        }
    }
    Tensor::with_dtype(&[n, h, w], DType::Complex, out)
}

#[derive(Debug, Clone)]
pub struct MriOperator {
    maps: CoilMaps,
    mask: SamplingMask,
    input_shape: [usize; 2],
    output_shape: [usize; 3],
}

impl MriOperator {
    pub fn new(maps: CoilMaps, mask: SamplingMask) -> Result<Self> {
        if mask.width() != maps.width() {
            return Err(Error::shape(
                "MriOperator",
                format!("mask width {} vs maps width {}", mask.width(), maps.width()),
            ));
        }
        let (c, h, w) = (maps.ncoils(), maps.height(), maps.width());
        Ok(MriOperator {
            maps,
            mask,
            input_shape: [h, w],
            output_shape: [c, h, w],
        })
    }

    pub fn maps(&self) -> &CoilMaps {
        &self.maps
    }

    pub fn mask(&self) -> &SamplingMask {
        &self.mask
    }
}

impl LinearOperator for MriOperator {
    fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    fn input_dtype(&self) -> DType {
        DType::Complex
    }

    fn output_dtype(&self) -> DType {
        DType::Complex
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        mri_forward(x, &self.maps, &self.mask)
    }

    fn adjoint(&self, y: &Tensor) -> Result<Tensor> {
        mri_adjoint(y, &self.maps, &self.mask)
    }

    fn descriptor(&self) -> OperatorDescriptor {
        OperatorDescriptor::Mri {
            coils: self.maps.ncoils(),
            height: self.maps.height(),
            width: self.maps.width(),
            sampled_columns: self.mask.sampled(),
        }
    }
}
