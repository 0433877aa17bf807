use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst};
use rustfft::FftNum;

/// Scalar type the tensor engine runs on. Implemented for `f32` (training and
/// inference) and `f64` (gradient checks and DSP oracles).
pub trait Real:
    Float + FloatConst + FftNum + Sum + Default + Debug + Display + Send + Sync + 'static
{
    const NAME: &'static str;

    fn of(x: f64) -> Self;
    fn f64(self) -> f64;
    fn erf(self) -> Self;

    /// `c = alpha * a * b + beta * c` with arbitrary row/column strides.
    ///
    /// # Safety contract
    /// The slices must be large enough for the given dimensions and strides; this is
    /// checked with debug assertions only.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: usize,
        csa: usize,
        b: &[Self],
        rsb: usize,
        csb: usize,
        beta: Self,
        c: &mut [Self],
        rsc: usize,
        csc: usize,
    );
}

fn span(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

macro_rules! impl_real {
    ($t:ty, $name:literal, $gemm:path, $erf:path) => {
        impl Real for $t {
            const NAME: &'static str = $name;

            #[inline]
            fn of(x: f64) -> Self {
                x as $t
            }

            #[inline]
            fn f64(self) -> f64 {
                self as f64
            }

            #[inline]
            fn erf(self) -> Self {
                $erf(self)
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: usize,
                csa: usize,
                b: &[Self],
                rsb: usize,
                csb: usize,
                beta: Self,
                c: &mut [Self],
                rsc: usize,
                csc: usize,
            ) {
                assert!(a.len() >= span(m, k, rsa, csa), "gemm: lhs too short");
                assert!(b.len() >= span(k, n, rsb, csb), "gemm: rhs too short");
                assert!(c.len() >= span(m, n, rsc, csc), "gemm: output too short");
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: bounds of all three operands were checked above.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa as isize,
                        csa as isize,
                        b.as_ptr(),
                        rsb as isize,
                        csb as isize,
                        beta,
                        c.as_mut_ptr(),
                        rsc as isize,
                        csc as isize,
                    );
                }
            }
        }
    };
}

impl_real!(f32, "f32", matrixmultiply::sgemm, libm::erff);
impl_real!(f64, "f64", matrixmultiply::dgemm, libm::erf);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_product() {
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0f64, 0.0, 0.0, 1.0, 1.0, 1.0]; // 3x2
        let mut c = [0.0f64; 4];
        f64::gemm(2, 3, 2, 1.0, &a, 3, 1, &b, 2, 1, 0.0, &mut c, 2, 1);
        assert_eq!(c, [4.0, 5.0, 10.0, 11.0]);
    }

    #[test]
    fn gemm_transposed_strides() {
        // a^T where a is stored 3x2 row-major
        let a = [1.0f32, 4.0, 2.0, 5.0, 3.0, 6.0];
        let b = [1.0f32, 1.0, 1.0];
        let mut c = [0.0f32; 2];
        f32::gemm(2, 3, 1, 1.0, &a, 1, 2, &b, 1, 1, 0.0, &mut c, 1, 1);
        assert_eq!(c, [6.0, 15.0]);
    }
}
