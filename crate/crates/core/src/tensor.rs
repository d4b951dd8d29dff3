//! Dense row-major tensors and the elementwise primitives the propagation
//! rules are written in.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major array. `shape.iter().product() == data.len()` always holds.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != data.len() || shape.contains(&0) {
            return Err(Error::InvalidShape { shape, len: data.len() });
        }
        Ok(Self { shape, data })
    }

    /// Builds a tensor from `f64` literals, converting to `T`.
    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::of(v)).collect())
    }

    pub fn vector(data: Vec<T>) -> Self {
        let n = data.len();
        Self { shape: vec![n], data }
    }

    pub fn filled(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::filled(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::filled(shape, T::one())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// `(C, H, W)` of a rank-3 tensor.
    pub fn dims3(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::Rank {
                op,
                expected: 3,
                shape: self.shape.clone(),
            }),
        }
    }

    /// `(H, W)` of a rank-2 tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [h, w] => Ok((h, w)),
            _ => Err(Error::Rank {
                op,
                expected: 2,
                shape: self.shape.clone(),
            }),
        }
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    /// Sum of all elements, accumulated in `f64`.
    pub fn sum(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64()).sum()
    }

    /// Largest element; `-inf` is never returned because tensors are non-empty.
    pub fn max(&self) -> T {
        self.data
            .iter()
            .copied()
            .fold(T::neg_infinity(), |a, b| if b > a { b } else { a })
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |a, &b| if b.abs() > a { b.abs() } else { a })
    }

    /// Row-major index of the first maximum.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        best
    }

    pub fn abs(&self) -> Self {
        self.map(|v| v.abs())
    }

    pub fn scale(&self, alpha: T) -> Self {
        self.map(|v| v * alpha)
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|v| !v.is_zero()).count()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(self, op: &'static str) -> Result<Self> {
        if self.all_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite(op))
        }
    }

    /// Elementwise `self + other`, with the spatial broadcast of [`hadamard`].
    pub fn add(&self, other: &Self) -> Result<Self> {
        broadcast_zip("add", self, other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        broadcast_zip("sub", self, other, |a, b| a - b)
    }

    /// Repeats an `H×W` map over `channels` to give `channels×H×W`.
    pub fn broadcast_channels(&self, channels: usize) -> Result<Self> {
        let (h, w) = self.dims2("broadcast_channels")?;
        let mut data = Vec::with_capacity(channels * h * w);
        for _ in 0..channels {
            data.extend_from_slice(&self.data);
        }
        Self::new(vec![channels, h, w], data)
    }
}

fn broadcast_zip<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor {
            shape: a.shape.clone(),
            data,
        });
    }
    // C×H×W against H×W: repeat the map over every channel.
    if a.rank() == 3 && b.rank() == 2 && a.shape[1..] == b.shape[..] {
        let plane = b.len();
        let data = a
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, b.data[i % plane]))
            .collect();
        return Ok(Tensor {
            shape: a.shape.clone(),
            data,
        });
    }
    Err(Error::ShapeMismatch {
        op,
        left: a.shape.clone(),
        right: b.shape.clone(),
    })
}

/// Elementwise product. `b` may be an `H×W` map when `a` is `C×H×W`, in which
/// case every channel of `a` is multiplied by `b`.
pub fn hadamard<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    broadcast_zip("hadamard", a, b, |x, y| x * y)
}

/// `a / max(a)`; all zeros when `max(a) <= 0`.
pub fn normalize_max<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let m = a.max();
    if m <= T::zero() {
        return Tensor::zeros(a.shape.clone());
    }
    a.map(|v| v / m)
}

/// Logistic sigmoid, the smooth stand-in for a Heaviside step.
pub fn heaviside_surrogate<T: Scalar>(y: &Tensor<T>) -> Tensor<T> {
    y.map(sigmoid)
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    // Split on sign so exp never overflows.
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn positive_part<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    a.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Mean over the channel axis of a `C×H×W` tensor.
pub fn channel_mean_reduce<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = a.dims3("channel_mean_reduce")?;
    let plane = h * w;
    let data = (0..plane)
        .map(|p| {
            let s: f64 = (0..c).map(|ch| a.data[ch * plane + p].as_f64()).sum();
            T::of(s / c as f64)
        })
        .collect();
    Tensor::new(vec![h, w], data)
}

/// Sum over the channel axis of a `C×H×W` tensor.
pub fn channel_sum_reduce<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = a.dims3("channel_sum_reduce")?;
    let plane = h * w;
    let data = (0..plane)
        .map(|p| T::of((0..c).map(|ch| a.data[ch * plane + p].as_f64()).sum()))
        .collect();
    Tensor::new(vec![h, w], data)
}
