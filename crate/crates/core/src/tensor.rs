//! Dense row-major tensors, activations, softmax, and seeded initialization.
//!
//! Training and inference run in `f32`; gradient checking selects `f64`
//! through the same generic code path.

use num_traits::Float;
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::error::{Error, Result};

/// Element type for all numeric code: `f32` (default) or `f64` (gradient checks).
pub trait Scalar:
    Float + std::fmt::Debug + std::fmt::Display + std::iter::Sum + Default + Send + Sync + 'static
{
    /// Element width in bytes, as recorded in checkpoint manifests.
    const WIDTH: u8;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const WIDTH: u8 = 4;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().unwrap())
    }
}

impl Scalar for f64 {
    const WIDTH: u8 = 8;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().unwrap())
    }
}

/// Deterministic seeded random source (ChaCha8 keystream).
///
/// The same seed yields the same draw sequence on every platform.
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub const ALGORITHM: &'static str = "chacha8";

    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in [0, 1) with 53 bits of precision, built from the raw
    /// keystream so the mapping is fixed independent of any library version.
    pub fn next_unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, bound) via rejection sampling.
    pub fn next_below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0);
        let zone = u64::MAX - (u64::MAX % bound);
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % bound;
            }
        }
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below((i + 1) as u64) as usize;
            items.swap(i, j);
        }
    }
}

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F: Scalar> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![F::zero(); len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<F>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(Error::Dimension(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                expect,
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Identity matrix of size n×n.
    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = F::one();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.shape)
    }

    pub fn fill(&mut self, v: F) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// y += W·x for an (m×n) matrix and length-n slice.
    pub fn matvec_add(&self, x: &[F], y: &mut [F]) {
        let (m, n) = (self.rows(), self.cols());
        debug_assert_eq!(x.len(), n);
        debug_assert_eq!(y.len(), m);
        for i in 0..m {
            let row = &self.data[i * n..(i + 1) * n];
            let mut acc = F::zero();
            for j in 0..n {
                acc = acc + row[j] * x[j];
            }
            y[i] = y[i] + acc;
        }
    }

    /// y += Wᵀ·x for an (m×n) matrix and length-m slice.
    pub fn matvec_t_add(&self, x: &[F], y: &mut [F]) {
        let (m, n) = (self.rows(), self.cols());
        debug_assert_eq!(x.len(), m);
        debug_assert_eq!(y.len(), n);
        for i in 0..m {
            let row = &self.data[i * n..(i + 1) * n];
            let xi = x[i];
            for j in 0..n {
                y[j] = y[j] + row[j] * xi;
            }
        }
    }

    /// W += scale · u·vᵀ (rank-one gradient accumulation).
    pub fn add_outer(&mut self, u: &[F], v: &[F], scale: F) {
        let (m, n) = (self.rows(), self.cols());
        debug_assert_eq!(u.len(), m);
        debug_assert_eq!(v.len(), n);
        for i in 0..m {
            let row = &mut self.data[i * n..(i + 1) * n];
            let ui = u[i] * scale;
            for j in 0..n {
                row[j] = row[j] + ui * v[j];
            }
        }
    }

    /// Copy column j of an (m×n) matrix into `out`.
    pub fn column(&self, j: usize, out: &mut [F]) {
        let (m, n) = (self.rows(), self.cols());
        debug_assert!(j < n);
        debug_assert_eq!(out.len(), m);
        for i in 0..m {
            out[i] = self.data[i * n + j];
        }
    }

    /// column_j += scale · u.
    pub fn add_to_column(&mut self, j: usize, u: &[F], scale: F) {
        let (m, n) = (self.rows(), self.cols());
        debug_assert!(j < n);
        for i in 0..m {
            self.data[i * n + j] = self.data[i * n + j] + u[i] * scale;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Sum of squared entries (for the L2 term).
    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64() * v.as_f64()).sum()
    }

    /// Elementwise widen/narrow to another element type.
    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::from_f64(v.as_f64())).collect(),
        }
    }
}

/// y = W·x (+ b). Shape mismatches are reported with both shapes named.
pub fn linear<F: Scalar>(w: &Tensor<F>, x: &[F], b: Option<&[F]>) -> Result<Vec<F>> {
    if w.shape().len() != 2 || w.cols() != x.len() {
        return Err(Error::Dimension(format!(
            "linear: matrix {:?} vs vector [{}]",
            w.shape(),
            x.len()
        )));
    }
    if let Some(b) = b {
        if b.len() != w.rows() {
            return Err(Error::Dimension(format!(
                "linear: matrix {:?} vs bias [{}]",
                w.shape(),
                b.len()
            )));
        }
    }
    let mut y = match b {
        Some(b) => b.to_vec(),
        None => vec![F::zero(); w.rows()],
    };
    w.matvec_add(x, &mut y);
    Ok(y)
}

pub fn sigmoid_scalar<F: Scalar>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

pub fn sigmoid<F: Scalar>(x: &[F]) -> Vec<F> {
    x.iter().map(|&v| sigmoid_scalar(v)).collect()
}

/// g₁: plain hyperbolic tangent.
pub fn tanh_g1<F: Scalar>(x: &[F]) -> Vec<F> {
    x.iter().map(|v| v.tanh()).collect()
}

/// Amplitude of the scaled tanh g₂.
pub const SCALED_TANH_AMPLITUDE: f64 = 1.7159;
/// Slope factor inside the scaled tanh g₂.
pub const SCALED_TANH_SLOPE: f64 = 2.0 / 3.0;

pub fn scaled_tanh_scalar<F: Scalar>(x: F) -> F {
    F::from_f64(SCALED_TANH_AMPLITUDE) * (x * F::from_f64(SCALED_TANH_SLOPE)).tanh()
}

/// g₂(x) = 1.7159 · tanh(2x/3), elementwise.
pub fn scaled_tanh_g2<F: Scalar>(x: &[F]) -> Vec<F> {
    x.iter().map(|&v| scaled_tanh_scalar(v)).collect()
}

/// Derivative of g₂ expressed through its own output value.
pub fn scaled_tanh_deriv_from_output<F: Scalar>(y: F) -> F {
    let a = F::from_f64(SCALED_TANH_AMPLITUDE);
    let s = F::from_f64(SCALED_TANH_SLOPE);
    let t = y / a;
    a * s * (F::one() - t * t)
}

/// Numerically stable softmax (max-subtraction).
pub fn softmax<F: Scalar>(logits: &[F]) -> Result<Vec<F>> {
    if logits.is_empty() {
        return Err(Error::Dimension("softmax: empty input".into()));
    }
    let max = logits.iter().cloned().fold(F::neg_infinity(), F::max);
    let mut out: Vec<F> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: F = out.iter().cloned().sum();
    for v in out.iter_mut() {
        *v = *v / sum;
    }
    Ok(out)
}

/// I.i.d. uniform values in [−half_range, +half_range], deterministic per seed.
pub fn init_uniform<F: Scalar>(
    shape: &[usize],
    half_range: f64,
    rng: &mut SeededRng,
) -> Result<Tensor<F>> {
    if half_range <= 0.0 {
        return Err(Error::Parameter(format!(
            "init_uniform: half_range must be positive, got {half_range}"
        )));
    }
    let len: usize = shape.iter().product();
    let data = (0..len)
        .map(|_| F::from_f64((2.0 * rng.next_unit() - 1.0) * half_range))
        .collect();
    Tensor::from_vec(shape, data)
}
