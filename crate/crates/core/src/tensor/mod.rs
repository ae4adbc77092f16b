//! Dense tensors and reverse-mode automatic differentiation.
//!
//! Values are flat row-major buffers. The same code runs in two precision
//! modes: `f32` for training, `f64` for gradient checks and algebraic
//! identity tests, selected by the element type parameter.

pub mod gradcheck;
pub mod graph;

use std::fmt::{Debug, Display};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

// ── Element type ──────────────────────────────────────────────────────────

/// Stored element precision, as tagged in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Dtype> {
        match tag {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }

    pub fn byte_width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Floating-point element of a tensor. Implemented for `f32` and `f64`.
pub trait Element:
    Copy + PartialOrd + Debug + Display + Default + Send + Sync + 'static
{
    const DTYPE: Dtype;
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    fn add(self, rhs: Self) -> Self;
    fn sub(self, rhs: Self) -> Self;
    fn mul(self, rhs: Self) -> Self;
    fn div(self, rhs: Self) -> Self;
    fn neg(self) -> Self;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;
    fn is_nan(self) -> bool;

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

macro_rules! impl_element {
    ($t:ty, $dtype:expr) => {
        impl Element for $t {
            const DTYPE: Dtype = $dtype;
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;

            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn add(self, rhs: Self) -> Self {
                self + rhs
            }
            fn sub(self, rhs: Self) -> Self {
                self - rhs
            }
            fn mul(self, rhs: Self) -> Self {
                self * rhs
            }
            fn div(self, rhs: Self) -> Self {
                self / rhs
            }
            fn neg(self) -> Self {
                -self
            }
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            fn exp(self) -> Self {
                self.exp()
            }
            fn ln(self) -> Self {
                self.ln()
            }
            fn tanh(self) -> Self {
                self.tanh()
            }
            fn abs(self) -> Self {
                self.abs()
            }
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            fn is_nan(self) -> bool {
                <$t>::is_nan(self)
            }
            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }
            fn read_le(bytes: &[u8]) -> Self {
                let mut buf = [0u8; std::mem::size_of::<$t>()];
                buf.copy_from_slice(&bytes[..std::mem::size_of::<$t>()]);
                <$t>::from_le_bytes(buf)
            }
        }
    };
}

impl_element!(f32, Dtype::F32);
impl_element!(f64, Dtype::F64);

// ── TensorData ────────────────────────────────────────────────────────────

/// A dense n-dimensional value: shape plus a flat row-major buffer.
///
/// `TensorData` is the host-side storage for parameters and constants;
/// tensors participating in autodiff live as nodes of a [`graph::Graph`].
#[derive(Debug, Clone, PartialEq)]
pub struct TensorData<E: Element> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Element> TensorData<E> {
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.contains(&0) {
            return Err(Error::InvalidShape {
                op: "TensorData::new",
                shape,
                message: format!("shape implies {numel} elements, buffer holds {}", data.len()),
            });
        }
        Ok(TensorData { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        TensorData { shape, data: vec![E::ZERO; numel] }
    }

    pub fn full(shape: Vec<usize>, value: E) -> Self {
        let numel = shape.iter().product();
        TensorData { shape, data: vec![value; numel] }
    }

    pub fn scalar(value: E) -> Self {
        TensorData { shape: vec![1], data: vec![value] }
    }

    pub fn from_f64_slice(shape: Vec<usize>, values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| E::from_f64(v)).collect())
    }

    /// 2D convenience: rows of equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(n * d);
        for r in rows {
            if r.len() != d {
                return Err(Error::InvalidShape {
                    op: "TensorData::from_rows",
                    shape: vec![n, d],
                    message: "ragged rows".into(),
                });
            }
            data.extend(r.iter().map(|&v| E::from_f64(v)));
        }
        TensorData::new(vec![n, d], data)
    }

    /// Identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = E::ONE;
        }
        t
    }

    /// Samples i.i.d. N(0, std²) entries (Box-Muller; deterministic per RNG state).
    pub fn randn<R: Rng>(shape: Vec<usize>, std: f64, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        while data.len() < numel {
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let r = (-2.0 * u1.ln()).sqrt();
            let theta = 2.0 * std::f64::consts::PI * u2;
            data.push(E::from_f64(r * theta.cos() * std));
            if data.len() < numel {
                data.push(E::from_f64(r * theta.sin() * std));
            }
        }
        TensorData { shape, data }
    }

    /// Glorot/Xavier uniform init over [-a, a], a = sqrt(6 / (fan_in + fan_out)).
    pub fn xavier_uniform<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| E::from_f64(rng.gen_range(-a..=a)))
            .collect();
        TensorData { shape: vec![fan_in, fan_out], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    /// Rows of a 2D tensor (a 1D tensor counts as a single row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            2 => self.shape[0],
            _ => panic!("rows() on tensor of rank {}", self.shape.len()),
        }
    }

    /// Trailing (column) dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("cols() on rank-0 tensor")
    }

    pub fn at2(&self, i: usize, j: usize) -> E {
        self.data[i * self.cols() + j]
    }

    pub fn row(&self, i: usize) -> &[E] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64()).collect()
    }

    /// Lossless precision change: every f32 is exactly representable in f64.
    pub fn cast<F: Element>(&self) -> TensorData<F> {
        TensorData {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| F::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Max |a - b| over all entries; shapes must match.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }
}

// ── Scalar reductions on slices ───────────────────────────────────────────
//
// Order statistics and moments used by the pixel-set encoder. Quantiles use
// linear interpolation between order statistics; standard deviation uses the
// population convention (divide by k). Both conventions are relied on by the
// oracles in the test suite.

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

pub fn std_population(values: &[f64]) -> f64 {
    let m = mean(values);
    (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len() as f64).sqrt()
}

/// Quantile of unsorted data via sorting + linear interpolation.
///
/// For q in [0, 1] the rank is h = q (k - 1); the result interpolates
/// between the floor(h)-th and ceil(h)-th order statistics.
pub fn quantile_linear(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "quantile of empty slice");
    assert!((0.0..=1.0).contains(&q), "quantile level {q} outside [0,1]");
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("NaN in quantile input"));
    let h = q * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    let frac = h - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

// ── Seed derivation ───────────────────────────────────────────────────────

/// Mixes a base seed with labeled substream identifiers (splitmix64 over an
/// FNV-1a hash of the label and indices). Used everywhere a reproducible
/// per-image or per-purpose RNG is needed.
pub fn derive_seed(base: u64, label: &str, indices: &[u64]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in label.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    for v in indices {
        for b in v.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    let mut z = base ^ h;
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}
