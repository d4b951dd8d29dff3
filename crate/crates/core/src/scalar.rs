//! Floating-point scalar abstraction shared by every numeric routine.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real scalar a [`Tensor`](crate::Tensor) can hold.
///
/// Implemented for `f32` and `f64`. Reductions widen to `f64` through
/// [`Scalar::as_f64`] regardless of the storage type.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossy conversion from `f64` (rounds to nearest for `f32`).
    fn of(v: f64) -> Self;

    fn as_f64(self) -> f64;

    /// Row-major `a·b` with `a` of shape `m×k` and `b` of shape `k×n`.
    /// `a_transposed` reads `a` from a `k×m` buffer instead.
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], a_transposed: bool, b: &[Self]) -> Vec<Self>;

    /// Name written into diagnostics, e.g. `"f32"`.
    const NAME: &'static str;
}

macro_rules! impl_scalar {
    ($t:ty, $name:literal, $gemm:path) => {
        impl Scalar for $t {
            #[inline]
            fn of(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }

            fn gemm(m: usize, k: usize, n: usize, a: &[Self], a_transposed: bool, b: &[Self]) -> Vec<Self> {
                assert!(a.len() >= m * k && b.len() >= k * n, "gemm inputs too short");
                let (rsa, csa) = if a_transposed {
                    (1, m as isize)
                } else {
                    (k as isize, 1)
                };
                let mut c = Vec::with_capacity(m * n);
                // SAFETY: input lengths were checked against the strides; with
                // beta = 0 every one of the m·n outputs is written, not read.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        n as isize,
                        1,
                        0.0,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                    c.set_len(m * n);
                }
                c
            }

            const NAME: &'static str = $name;
        }
    };
}

impl_scalar!(f32, "f32", matrixmultiply::sgemm);
impl_scalar!(f64, "f64", matrixmultiply::dgemm);
