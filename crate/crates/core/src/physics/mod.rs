//! Linear measurement models `y = A x + e` with exact adjoints.

mod mask;
mod mri;
mod sr;

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use mask::{make_cartesian_mask, SamplingMask};
pub use mri::{mri_adjoint, mri_forward, CoilMaps, MriOperator};
pub use sr::{gaussian_kernel, motion_kernel, sr_adjoint, sr_forward, BlurKernel, KernelKind, SrOperator};

use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub enum OperatorDescriptor {
    Identity,
    Mri {
        coils: usize,
        height: usize,
        width: usize,
        sampled_columns: usize,
    },
    SuperResolution {
        factor: usize,
        kernel: KernelKind,
        kernel_size: usize,
    },
    Other(String),
}

impl fmt::Display for OperatorDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OperatorDescriptor::Identity => write!(f, "identity"),
            OperatorDescriptor::Mri {
                coils,
                height,
                width,
                sampled_columns,
            } => write!(f, "mri(coils={coils}, {height}x{width}, columns={sampled_columns})"),
            OperatorDescriptor::SuperResolution {
                factor,
                kernel,
                kernel_size,
            } => write!(f, "sr(x{factor}, {} {kernel_size}x{kernel_size})", kernel.name()),
            OperatorDescriptor::Other(name) => write!(f, "{name}"),
        }
    }
}

/// A linear forward model acting on batches: inputs are `[N, input_shape..]`
/// and outputs `[N, output_shape..]`.
pub trait LinearOperator: Send + Sync {
    fn input_shape(&self) -> &[usize];
    fn output_shape(&self) -> &[usize];
    fn input_dtype(&self) -> DType;
    fn output_dtype(&self) -> DType;
    fn forward(&self, x: &Tensor) -> Result<Tensor>;
    fn adjoint(&self, y: &Tensor) -> Result<Tensor>;
    fn descriptor(&self) -> OperatorDescriptor;
}

#[derive(Debug, Clone)]
pub struct IdentityOperator {
    shape: Vec<usize>,
    dtype: DType,
}

impl IdentityOperator {
    pub fn new(shape: &[usize], dtype: DType) -> Self {
        IdentityOperator {
            shape: shape.to_vec(),
            dtype,
        }
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        if x.dtype() != self.dtype || x.shape().len() != self.shape.len() + 1 || x.shape()[1..] != self.shape[..] {
            return Err(Error::shape(
                "identity",
                format!("expected [N,{:?}] {}, got {:?} {}", self.shape, self.dtype.name(), x.shape(), x.dtype().name()),
            ));
        }
        Ok(())
    }
}

impl LinearOperator for IdentityOperator {
    fn input_shape(&self) -> &[usize] {
        &self.shape
    }

    fn output_shape(&self) -> &[usize] {
        &self.shape
    }

    fn input_dtype(&self) -> DType {
        self.dtype
    }

    fn output_dtype(&self) -> DType {
        self.dtype
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        Ok(x.clone())
    }

    fn adjoint(&self, y: &Tensor) -> Result<Tensor> {
        self.check(y)?;
        Ok(y.clone())
    }

    fn descriptor(&self) -> OperatorDescriptor {
        OperatorDescriptor::Identity
    }
}

fn batched(shape: &[usize], n: usize) -> Vec<usize> {
    let mut s = vec![n];
    s.extend_from_slice(shape);
    s
}

/// Random element of the operator's domain, uniform in [-1, 1].
pub fn random_input(op: &dyn LinearOperator, batch: usize, seed: u64) -> Tensor {
    Tensor::rand_uniform(&batched(op.input_shape(), batch), op.input_dtype(), -1.0, 1.0, seed)
}

pub fn random_output(op: &dyn LinearOperator, batch: usize, seed: u64) -> Tensor {
    Tensor::rand_uniform(&batched(op.output_shape(), batch), op.output_dtype(), -1.0, 1.0, seed)
}

/// Relative deviation `|⟨Ax,y⟩ − ⟨x,Aᴴy⟩| / max(|⟨Ax,y⟩|, |⟨x,Aᴴy⟩|)` on one random pair.
pub fn adjoint_mismatch(op: &dyn LinearOperator, batch: usize, seed: u64) -> Result<f64> {
    let x = random_input(op, batch, seed.wrapping_mul(2).wrapping_add(1));
    let y = random_output(op, batch, seed.wrapping_mul(2).wrapping_add(2));
    let lhs = op.forward(&x)?.inner(&y)?;
    let rhs = x.inner(&op.adjoint(&y)?)?;
    let scale = lhs.norm().max(rhs.norm());
    Ok(if scale == 0.0 { 0.0 } else { (lhs - rhs).norm() / scale })
}

/// Largest eigenvalue of `AᴴA` (i.e. `‖A‖²`) by power iteration.
pub fn operator_norm_sq(op: &dyn LinearOperator, iterations: usize, seed: u64) -> Result<f64> {
    let mut v = random_input(op, 1, seed);
    let n = v.norm();
    v = v.scale(1.0 / n);
    let mut lambda = 0.0;
    for _ in 0..iterations.max(1) {
        let w = op.adjoint(&op.forward(&v)?)?;
        lambda = v.dot(&w)?;
        let nw = w.norm();
        if nw == 0.0 {
            return Ok(0.0);
        }
        v = w.scale(1.0 / nw);
    }
    Ok(lambda)
}

/// Gradient of `½‖Ax − y‖²`: `Aᴴ(Ax − y)`.
pub fn data_fidelity_grad(x: &Tensor, y: &Tensor, op: &dyn LinearOperator) -> Result<Tensor> {
    let r = op.forward(x)?.sub(y)?;
    op.adjoint(&r)
}

/// i.i.d. Gaussian noise with standard deviation `sigma`; for complex
/// tensors the real and imaginary parts each get `sigma/√2`.
pub fn add_awgn(y: &Tensor, sigma: f64, seed: u64) -> Result<Tensor> {
    if !(sigma >= 0.0) {
        return Err(Error::invalid("add_awgn", format!("sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(y.clone());
    }
    let std = match y.dtype() {
        DType::Real => sigma,
        DType::Complex => sigma / std::f64::consts::SQRT_2,
    };
    let normal = Normal::new(0.0, std).map_err(|e| Error::invalid("add_awgn", e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = y.clone();
    for v in out.data_mut() {
        *v += normal.sample(&mut rng);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn awgn_contract() {
        let y = Tensor::rand_uniform(&[3, 5], DType::Real, 0.0, 1.0, 1);
        assert_eq!(add_awgn(&y, 0.0, 1).unwrap(), y);
        assert_eq!(add_awgn(&y, 0.1, 9).unwrap(), add_awgn(&y, 0.1, 9).unwrap());
        assert_ne!(add_awgn(&y, 0.1, 9).unwrap(), add_awgn(&y, 0.1, 10).unwrap());
        assert!(add_awgn(&y, -1.0, 1).is_err());
    }

    #[test]
    fn awgn_variance_monte_carlo() {
        let sigma = 0.3;
        for dtype in [DType::Real, DType::Complex] {
            let z = Tensor::zeros_like_dtype(&[1_000_000], dtype);
            let noisy = add_awgn(&z, sigma, 42).unwrap();
            // per logical element: |e|² has mean sigma² for both dtypes
            let var = noisy.norm_sq() / 1_000_000.0;
            assert!((var / (sigma * sigma) - 1.0).abs() < 0.01, "{dtype:?} {var}");
        }
    }

    #[test]
    fn identity_gradient_is_residual() {
        let op = IdentityOperator::new(&[1, 4, 4], DType::Real);
        let x = random_input(&op, 2, 1);
        let y = random_input(&op, 2, 2);
        assert_eq!(data_fidelity_grad(&x, &y, &op).unwrap(), x.sub(&y).unwrap());
        assert_eq!(data_fidelity_grad(&x, &x, &op).unwrap().norm(), 0.0);
    }

    #[test]
    fn fidelity_gradient_matches_finite_differences() {
        let maps = CoilMaps::synthetic(3, 8, 8, 1).unwrap();
        let mask = make_cartesian_mask(8, 0.5, 0.25, 1).unwrap();
        let op = MriOperator::new(maps, mask).unwrap();
        let x = random_input(&op, 1, 3);
        let y = random_output(&op, 1, 4);
        let g = data_fidelity_grad(&x, &y, &op).unwrap();
        let f = |x: &Tensor| 0.5 * op.forward(x).unwrap().sub(&y).unwrap().norm_sq();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in (0..x.data().len()).step_by(7) {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            worst = worst.max((fd - g.data()[i]).abs() / g.data()[i].abs().max(1e-3));
        }
        assert!(worst <= 1e-6, "{worst}");
    }

    #[test]
    fn linearity_and_lipschitz_bound() {
        let maps = CoilMaps::synthetic(4, 12, 12, 2).unwrap();
        let mask = make_cartesian_mask(12, 0.4, 0.1, 2).unwrap();
        let op = MriOperator::new(maps, mask).unwrap();
        let (x, z) = (random_input(&op, 1, 5), random_input(&op, 1, 6));
        let (a, b) = (0.7, -1.3);
        let lhs = op.forward(&x.scale(a).add(&z.scale(b)).unwrap()).unwrap();
        let rhs = op.forward(&x).unwrap().scale(a).add(&op.forward(&z).unwrap().scale(b)).unwrap();
        assert!(lhs.sub(&rhs).unwrap().norm() <= 1e-12 * rhs.norm());

        let l = operator_norm_sq(&op, 50, 3).unwrap();
        assert!(l <= 1.0 + 1e-9 && l > 0.9, "{l}");
        let y = random_output(&op, 1, 7);
        let g1 = data_fidelity_grad(&x, &y, &op).unwrap();
        let g2 = data_fidelity_grad(&z, &y, &op).unwrap();
        let lip = g1.sub(&g2).unwrap().norm() / x.sub(&z).unwrap().norm();
        assert!(lip <= l * (1.0 + 1e-6));
    }
}
