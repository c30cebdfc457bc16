//! Dense row-major tensors.
//!
//! Complex tensors store interleaved `(re, im)` pairs in the same `f64`
//! buffer, so `data.len() == 2 * numel()` for [`DType::Complex`]. All
//! gradient rules act on that underlying real vector, which makes the
//! real-representation adjoint of any complex-linear map its conjugate
//! transpose.

use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    Real,
    Complex,
}

impl DType {
    pub fn name(self) -> &'static str {
        match self {
            DType::Real => "real64",
            DType::Complex => "complex128",
        }
    }

    /// Number of `f64` slots per logical element.
    pub fn width(self) -> usize {
        match self {
            DType::Real => 1,
            DType::Complex => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    dtype: DType,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        Self::with_dtype(shape, DType::Real, data)
    }

    pub fn with_dtype(shape: &[usize], dtype: DType, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n * dtype.width() != data.len() {
            return Err(Error::shape(
                "tensor",
                format!(
                    "shape {:?} ({}) needs {} values, got {}",
                    shape,
                    dtype.name(),
                    n * dtype.width(),
                    data.len()
                ),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            dtype,
            data,
        })
    }

    pub fn from_complex(shape: &[usize], values: &[Complex64]) -> Result<Self> {
        let mut data = Vec::with_capacity(values.len() * 2);
        for v in values {
            data.push(v.re);
            data.push(v.im);
        }
        Self::with_dtype(shape, DType::Complex, data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::zeros_like_dtype(shape, DType::Real)
    }

    pub fn zeros_like_dtype(shape: &[usize], dtype: DType) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            dtype,
            data: vec![0.0; n * dtype.width()],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            dtype: DType::Real,
            data: vec![value; n],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            dtype: DType::Real,
            data: vec![value],
        }
    }

    /// Uniform samples in `[lo, hi)` from a seeded generator.
    pub fn rand_uniform(shape: &[usize], dtype: DType, lo: f64, hi: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product::<usize>() * dtype.width();
        let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor {
            shape: shape.to_vec(),
            dtype,
            data,
        }
    }

    pub fn randn(shape: &[usize], dtype: DType, std: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product::<usize>() * dtype.width();
        let data = (0..n)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Tensor {
            shape: shape.to_vec(),
            dtype,
            data,
        }
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Self::zeros_like_dtype(&other.shape, other.dtype)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn is_complex(&self) -> bool {
        self.dtype == DType::Complex
    }

    /// Logical element count (complex pairs count once).
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn complex_values(&self) -> Result<Vec<Complex64>> {
        self.expect_complex("complex_values")?;
        Ok(self
            .data
            .chunks_exact(2)
            .map(|c| Complex64::new(c[0], c[1]))
            .collect())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(Error::shape(
                "reshape",
                format!("cannot reshape {:?} into {:?}", self.shape, shape),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            dtype: self.dtype,
            data: self.data.clone(),
        })
    }

    /// Explicit promotion of a real tensor to complex with zero imaginary part.
    pub fn to_complex(&self) -> Result<Tensor> {
        self.expect_real("to_complex")?;
        let mut data = Vec::with_capacity(self.data.len() * 2);
        for &v in &self.data {
            data.push(v);
            data.push(0.0);
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            dtype: DType::Complex,
            data,
        })
    }

    pub fn real_part(&self) -> Result<Tensor> {
        self.expect_complex("real_part")?;
        Ok(Tensor {
            shape: self.shape.clone(),
            dtype: DType::Real,
            data: self.data.iter().step_by(2).copied().collect(),
        })
    }

    pub fn imag_part(&self) -> Result<Tensor> {
        self.expect_complex("imag_part")?;
        Ok(Tensor {
            shape: self.shape.clone(),
            dtype: DType::Real,
            data: self.data.iter().skip(1).step_by(2).copied().collect(),
        })
    }

    /// Elementwise modulus; identity-valued absolute value for real tensors.
    pub fn abs(&self) -> Tensor {
        let data = match self.dtype {
            DType::Real => self.data.iter().map(|v| v.abs()).collect(),
            DType::Complex => self
                .data
                .chunks_exact(2)
                .map(|c| c[0].hypot(c[1]))
                .collect(),
        };
        Tensor {
            shape: self.shape.clone(),
            dtype: DType::Real,
            data,
        }
    }

    pub(crate) fn expect_real(&self, op: &'static str) -> Result<()> {
        if self.dtype != DType::Real {
            return Err(Error::DType {
                op,
                expected: DType::Real.name(),
                got: self.dtype.name(),
            });
        }
        Ok(())
    }

    pub(crate) fn expect_complex(&self, op: &'static str) -> Result<()> {
        if self.dtype != DType::Complex {
            return Err(Error::DType {
                op,
                expected: DType::Complex.name(),
                got: self.dtype.name(),
            });
        }
        Ok(())
    }

    pub(crate) fn expect_same(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        if self.dtype != other.dtype {
            return Err(Error::DType {
                op,
                expected: self.dtype.name(),
                got: other.dtype.name(),
            });
        }
        Ok(())
    }

    /// Squared Euclidean norm over the underlying real vector.
    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    /// Real inner product `Re⟨self, other⟩` (conjugate-linear in `self` for complex).
    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.expect_same(other, "dot")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .sum())
    }

    /// Complex inner product `⟨self, other⟩ = Σ conj(self)·other`.
    pub fn inner(&self, other: &Tensor) -> Result<Complex64> {
        self.expect_same(other, "inner")?;
        match self.dtype {
            DType::Real => Ok(Complex64::new(self.dot(other)?, 0.0)),
            DType::Complex => {
                let mut acc = Complex64::new(0.0, 0.0);
                for (a, b) in self.data.chunks_exact(2).zip(other.data.chunks_exact(2)) {
                    let a = Complex64::new(a[0], a[1]);
                    let b = Complex64::new(b[0], b[1]);
                    acc += a.conj() * b;
                }
                Ok(acc)
            }
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            dtype: self.dtype,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.expect_same(other, op)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            dtype: self.dtype,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    /// `self += other` over the underlying vector.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.expect_same(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn axpy(&mut self, alpha: f64, other: &Tensor) -> Result<()> {
        self.expect_same(other, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.expect_same(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Index of a logical element from a multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| acc * d + i)
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index) * self.dtype.width()]
    }

    /// Copy of batch item `n` (first axis), keeping a leading axis of length one.
    pub fn batch_item(&self, n: usize) -> Result<Tensor> {
        if self.shape.is_empty() || n >= self.shape[0] {
            return Err(Error::shape("batch_item", format!("index {n} out of {:?}", self.shape)));
        }
        let per = self.data.len() / self.shape[0];
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Ok(Tensor {
            shape,
            dtype: self.dtype,
            data: self.data[n * per..(n + 1) * per].to_vec(),
        })
    }

    /// Concatenate along the first axis.
    pub fn stack_batch(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("stack_batch", "empty list"))?;
        let tail = &first.shape[1..];
        let mut data = Vec::new();
        let mut n = 0;
        for t in items {
            if &t.shape[1..] != tail || t.dtype != first.dtype {
                return Err(Error::shape(
                    "stack_batch",
                    format!("{:?} vs {:?}", t.shape, first.shape),
                ));
            }
            n += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = n;
        Tensor::with_dtype(&shape, first.dtype, data)
    }
}
