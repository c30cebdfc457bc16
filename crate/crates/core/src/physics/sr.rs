//! Blur-then-decimate super-resolution model `A = S H` with circular boundaries.

use super::{LinearOperator, OperatorDescriptor};
use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelKind {
    Gaussian,
    Motion,
    Custom,
}

impl KernelKind {
    pub fn name(self) -> &'static str {
        match self {
            KernelKind::Gaussian => "gaussian",
            KernelKind::Motion => "motion",
            KernelKind::Custom => "custom",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "gaussian" => Some(KernelKind::Gaussian),
            "motion" => Some(KernelKind::Motion),
            "custom" => Some(KernelKind::Custom),
            _ => None,
        }
    }
}

/// Nonnegative blur kernel with unit sum.
#[derive(Debug, Clone, PartialEq)]
pub struct BlurKernel {
    weights: Tensor,
    kind: KernelKind,
}

impl BlurKernel {
    pub fn new(weights: Tensor, kind: KernelKind) -> Result<Self> {
        weights.expect_real("BlurKernel")?;
        if weights.shape().len() != 2 {
            return Err(Error::shape("BlurKernel", format!("expected [kh,kw], got {:?}", weights.shape())));
        }
        if weights.data().iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::invalid("BlurKernel", "entries must be finite and nonnegative"));
        }
        let s = weights.sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("BlurKernel", format!("entries sum to {s}, expected 1")));
        }
        Ok(BlurKernel { weights, kind })
    }

    pub fn delta(size: usize) -> Self {
        let mut w = vec![0.0; size * size];
        w[(size / 2) * size + size / 2] = 1.0;
        BlurKernel {
            weights: Tensor::new(&[size, size], w).expect("shape"),
            kind: KernelKind::Custom,
        }
    }

    pub fn kind(&self) -> KernelKind {
        self.kind
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn size(&self) -> (usize, usize) {
        (self.weights.shape()[0], self.weights.shape()[1])
    }
}

fn normalize(mut w: Vec<f64>, size: usize, kind: KernelKind) -> Result<BlurKernel> {
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    BlurKernel::new(Tensor::new(&[size, size], w)?, kind)
}

/// Sampled anisotropic Gaussian density. `sigma` is the standard deviation
/// along the principal axis at `angle` radians, `anisotropy` scales the
/// orthogonal axis.
pub fn gaussian_kernel(size: usize, sigma: f64, anisotropy: f64, angle: f64) -> Result<BlurKernel> {
    if size == 0 || size % 2 == 0 {
        return Err(Error::invalid("gaussian_kernel", format!("size must be odd, got {size}")));
    }
    if !(sigma > 0.0) || !(anisotropy > 0.0) {
        return Err(Error::invalid("gaussian_kernel", "sigma and anisotropy must be positive"));
    }
    let c = (size / 2) as f64;
    let (s1, s2) = (sigma, sigma * anisotropy);
    let (cs, sn) = (angle.cos(), angle.sin());
    let mut w = Vec::with_capacity(size * size);
    for i in 0..size {
        for j in 0..size {
            let (dy, dx) = (i as f64 - c, j as f64 - c);
            let u = cs * dx + sn * dy;
            let v = -sn * dx + cs * dy;
            w.push((-0.5 * (u * u / (s1 * s1) + v * v / (s2 * s2))).exp());
        }
    }
    normalize(w, size, KernelKind::Gaussian)
}

/// Rasterised centred line segment of `length` pixels at `angle` radians,
/// box-blurred once with a 3×3 window inside the kernel support.
pub fn motion_kernel(size: usize, length: f64, angle: f64) -> Result<BlurKernel> {
    if size == 0 || size % 2 == 0 {
        return Err(Error::invalid("motion_kernel", format!("size must be odd, got {size}")));
    }
    if !(length > 0.0) {
        return Err(Error::invalid("motion_kernel", "length must be positive"));
    }
    let c = (size / 2) as f64;
    let mut line = vec![0.0; size * size];
    let samples = (8.0 * length).ceil() as usize + 1;
    for s in 0..samples {
        let t = if samples == 1 {
            0.0
        } else {
            -length / 2.0 + length * s as f64 / (samples - 1) as f64
        };
        let i = (c + t * angle.sin()).round();
        let j = (c + t * angle.cos()).round();
        if i >= 0.0 && j >= 0.0 && (i as usize) < size && (j as usize) < size {
            line[i as usize * size + j as usize] += 1.0;
        }
    }
    let mut blurred = vec![0.0; size * size];
    for i in 0..size {
        for j in 0..size {
            let mut acc = 0.0;
            for di in -1i64..=1 {
                for dj in -1i64..=1 {
                    let (a, b) = (i as i64 + di, j as i64 + dj);
                    if a >= 0 && b >= 0 && (a as usize) < size && (b as usize) < size {
                        acc += line[a as usize * size + b as usize];
                    }
                }
            }
            blurred[i * size + j] = acc / 9.0;
        }
    }
    normalize(blurred, size, KernelKind::Motion)
}

fn check_sr(op: &'static str, x: &Tensor) -> Result<(usize, usize, usize, usize)> {
    x.expect_real(op)?;
    if x.shape().len() != 4 {
        return Err(Error::shape(op, format!("expected [N,C,H,W], got {:?}", x.shape())));
    }
    let s = x.shape();
    Ok((s[0], s[1], s[2], s[3]))
}

/// Circular convolution with `kernel` followed by keeping every `factor`-th
/// pixel on both axes. `x`: real `[N,C,H,W]`.
pub fn sr_forward(x: &Tensor, kernel: &BlurKernel, factor: usize) -> Result<Tensor> {
    let (n, c, h, w) = check_sr("sr_forward", x)?;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::shape(
            "sr_forward",
            format!("image {h}x{w} not divisible by factor {factor}"),
        ));
    }
    let (kh, kw) = kernel.size();
    let (ch, cw) = ((kh / 2) as isize, (kw / 2) as isize);
    let (ho, wo) = (h / factor, w / factor);
    let k = kernel.weights().data();
    let mut out = vec![0.0; n * c * ho * wo];
    for (src, dst) in x.data().chunks_exact(h * w).zip(out.chunks_exact_mut(ho * wo)) {
        for oi in 0..ho {
            for oj in 0..wo {
                let (i, j) = ((oi * factor) as isize, (oj * factor) as isize);
                let mut acc = 0.0;
                for a in 0..kh {
                    let si = (i - (a as isize - ch)).rem_euclid(h as isize) as usize;
                    for b in 0..kw {
                        let sj = (j - (b as isize - cw)).rem_euclid(w as isize) as usize;
                        acc += k[a * kw + b] * src[si * w + sj];
                    }
                }
                dst[oi * wo + oj] = acc;
            }
        }
    }
    Tensor::new(&[n, c, ho, wo], out)
}

/// Zero-upsampling by `factor` followed by circular correlation with
/// `kernel`; the exact adjoint of [`sr_forward`].
pub fn sr_adjoint(y: &Tensor, kernel: &BlurKernel, factor: usize, height: usize, width: usize) -> Result<Tensor> {
    let (n, c, ho, wo) = check_sr("sr_adjoint", y)?;
    if factor == 0 || ho * factor != height || wo * factor != width {
        return Err(Error::shape(
            "sr_adjoint",
            format!("low-res {ho}x{wo} times {factor} does not give {height}x{width}"),
        ));
    }
    let (kh, kw) = kernel.size();
    let (ch, cw) = ((kh / 2) as isize, (kw / 2) as isize);
    let (h, w) = (height, width);
    let k = kernel.weights().data();
    let mut out = vec![0.0; n * c * h * w];
    for (src, dst) in y.data().chunks_exact(ho * wo).zip(out.chunks_exact_mut(h * w)) {
        // scatter form of correlation with the zero-upsampled signal
        for oi in 0..ho {
            for oj in 0..wo {
                let v = src[oi * wo + oj];
                if v == 0.0 {
                    continue;
                }
                let (i, j) = ((oi * factor) as isize, (oj * factor) as isize);
                for a in 0..kh {
                    let si = (i - (a as isize - ch)).rem_euclid(h as isize) as usize;
                    for b in 0..kw {
                        let sj = (j - (b as isize - cw)).rem_euclid(w as isize) as usize;
                        dst[si * w + sj] += k[a * kw + b] * v;
                    }
                }
            }
        }
    }
    Tensor::new(&[n, c, h, w], out)
}

#[derive(Debug, Clone)]
pub struct SrOperator {
    kernel: BlurKernel,
    factor: usize,
    input_shape: [usize; 3],
    output_shape: [usize; 3],
}

impl SrOperator {
    pub fn new(kernel: BlurKernel, factor: usize, channels: usize, height: usize, width: usize) -> Result<Self> {
        if factor == 0 || height % factor != 0 || width % factor != 0 {
            return Err(Error::shape(
                "SrOperator",
                format!("image {height}x{width} not divisible by factor {factor}"),
            ));
        }
        Ok(SrOperator {
            kernel,
            factor,
            input_shape: [channels, height, width],
            output_shape: [channels, height / factor, width / factor],
        })
    }

    pub fn kernel(&self) -> &BlurKernel {
        &self.kernel
    }

    pub fn factor(&self) -> usize {
        self.factor
    }
}

impl LinearOperator for SrOperator {
    fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    fn input_dtype(&self) -> DType {
        DType::Real
    }

    fn output_dtype(&self) -> DType {
        DType::Real
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        sr_forward(x, &self.kernel, self.factor)
    }

    fn adjoint(&self, y: &Tensor) -> Result<Tensor> {
        sr_adjoint(y, &self.kernel, self.factor, self.input_shape[1], self.input_shape[2])
    }

    fn descriptor(&self) -> OperatorDescriptor {
        OperatorDescriptor::SuperResolution {
            factor: self.factor,
            kernel: self.kernel.kind(),
            kernel_size: self.kernel.size().0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::rotate90;
    use crate::physics::adjoint_mismatch;

    #[test]
    fn delta_kernel_factor_one_is_identity() {
        let x = Tensor::rand_uniform(&[2, 1, 6, 6], DType::Real, -1.0, 1.0, 1);
        let y = sr_forward(&x, &BlurKernel::delta(3), 1).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn constant_image_stays_constant() {
        let x = Tensor::full(&[1, 1, 8, 8], 0.3);
        let k = gaussian_kernel(5, 1.2, 0.6, 0.4).unwrap();
        let y = sr_forward(&x, &k, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        assert!(y.data().iter().all(|v| (v - 0.3).abs() < 1e-14));
    }

    #[test]
    fn adjoint_identity_random_pairs() {
        let kernels = [
            gaussian_kernel(7, 1.6, 0.5, 0.7).unwrap(),
            motion_kernel(9, 5.0, 1.1).unwrap(),
        ];
        for (i, k) in kernels.into_iter().enumerate() {
            for d in [1, 2, 3] {
                let op = SrOperator::new(k.clone(), d, 1, 12, 12).unwrap();
                for s in 0..20 {
                    let rel = adjoint_mismatch(&op, 2, (i * 100 + d * 20 + s) as u64).unwrap();
                    assert!(rel <= 1e-10, "rel {rel}");
                }
            }
        }
    }

    #[test]
    fn indivisible_dims_rejected() {
        let x = Tensor::zeros(&[1, 1, 7, 8]);
        assert!(sr_forward(&x, &BlurKernel::delta(3), 2).is_err());
        assert!(SrOperator::new(BlurKernel::delta(3), 3, 1, 8, 9).is_err());
    }

    #[test]
    fn tiny_sigma_gives_delta() {
        let k = gaussian_kernel(5, 1e-3, 1.0, 0.0).unwrap();
        assert_eq!(k.weights(), BlurKernel::delta(5).weights());
    }

    #[test]
    fn isotropic_gaussian_rotation_symmetric() {
        let k = gaussian_kernel(7, 1.3, 1.0, 0.3).unwrap();
        let r = rotate90(k.weights(), 1).unwrap();
        assert!(r.max_abs_diff(k.weights()).unwrap() <= 1e-12);
    }

    #[test]
    fn three_by_three_against_density() {
        let k = gaussian_kernel(3, 1.0, 1.0, 0.0).unwrap();
        let raw: Vec<f64> = (0..9)
            .map(|p| {
                let (dy, dx) = ((p / 3) as f64 - 1.0, (p % 3) as f64 - 1.0);
                (-(dx * dx + dy * dy) / 2.0).exp()
            })
            .collect();
        let total: f64 = raw.iter().sum();
        for (a, e) in k.weights().data().iter().zip(&raw) {
            assert!((a - e / total).abs() < 1e-15);
        }
        // corner/edge/centre ratios
        let w = k.weights().data();
        assert!((w[0] / w[4] - (-1.0f64).exp()).abs() < 1e-14);
        assert!((w[1] / w[4] - (-0.5f64).exp()).abs() < 1e-14);
    }

    #[test]
    fn kernel_invariants() {
        let m = motion_kernel(11, 7.0, 0.5).unwrap();
        assert!((m.weights().sum() - 1.0).abs() < 1e-12);
        assert!(m.weights().data().iter().all(|&v| v >= 0.0));
        assert!(gaussian_kernel(4, 1.0, 1.0, 0.0).is_err());
        assert!(gaussian_kernel(5, 0.0, 1.0, 0.0).is_err());
        assert!(motion_kernel(5, -1.0, 0.0).is_err());
    }
}
