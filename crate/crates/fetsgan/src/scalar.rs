//! Scalar abstraction over the two floating-point precisions the engine runs
//! at: `f32` for training and `f64` for gradient checking.

use num_traits::{Float, NumAssign};

/// Element type of tensors. The engine is generic over this so the same
/// forward/backward code can be exercised in double precision by tests.
pub trait Scalar:
    Float + NumAssign + Send + Sync + Default + std::fmt::Debug + std::fmt::Display + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;

    /// `c = a · b` (or `c += a · b` when `acc`), with explicit row/column
    /// strides for `a` and `b`; `c` is row-major `m × n`.
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: usize,
        csa: usize,
        b: &[Self],
        rsb: usize,
        csb: usize,
        c: &mut [Self],
        acc: bool,
    );
}

macro_rules! impl_scalar {
    ($ty:ty, $gemm:path) => {
        impl Scalar for $ty {
            #[inline(always)]
            fn from_f64(x: f64) -> Self {
                x as $ty
            }

            #[inline(always)]
            fn to_f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                rsa: usize,
                csa: usize,
                b: &[Self],
                rsb: usize,
                csb: usize,
                c: &mut [Self],
                acc: bool,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                assert!(k > 0, "gemm: inner dimension must be positive");
                assert!(a.len() > (m - 1) * rsa + (k - 1) * csa, "gemm: lhs buffer too small");
                assert!(b.len() > (k - 1) * rsb + (n - 1) * csb, "gemm: rhs buffer too small");
                assert!(c.len() >= m * n, "gemm: out buffer too small");
                let beta = if acc { 1.0 } else { 0.0 };
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa as isize,
                        csa as isize,
                        b.as_ptr(),
                        rsb as isize,
                        csb as isize,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);
