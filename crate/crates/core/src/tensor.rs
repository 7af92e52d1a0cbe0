//! Dense row-major 2D tensors and a strided GEMM wrapper.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Floating-point element type with a GEMM kernel.
pub trait Scalar:
    Float + Default + Debug + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + DivAssign + 'static
{
    fn lit(x: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `C = alpha * A B + beta * C` on strided views; `A` is `m x k`, `B` is
    /// `k x n`.
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

fn check_extent(len: usize, rows: usize, cols: usize, rs: usize, cs: usize) {
    if rows > 0 && cols > 0 {
        let last = (rows - 1) * rs + (cols - 1) * cs;
        assert!(last < len, "strided view out of bounds ({last} >= {len})");
    }
}

macro_rules! impl_scalar {
    ($t:ty, $kernel:path) => {
        impl Scalar for $t {
            fn lit(x: f64) -> Self {
                x as $t
            }

            fn as_f64(self) -> f64 {
                self as f64
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
                if m == 0 || n == 0 {
                    return;
                }
                check_extent(a.len(), m, k, rsa, csa);
                check_extent(b.len(), k, n, rsb, csb);
                check_extent(c.len(), m, n, rsc, csc);
                // SAFETY: extents of all three views were checked above and
                // `c` is uniquely borrowed.
                unsafe {
                    $kernel(
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

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

#[derive(Clone, PartialEq)]
pub struct Tensor<S> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<S>,
}

impl<S: Scalar> Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor({}x{})", self.rows, self.cols)
    }
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![S::zero(); rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor data length");
        Self { rows, cols, data }
    }

    pub fn from_f64(rows: usize, cols: usize, data: &[f64]) -> Self {
        Self::from_vec(rows, cols, data.iter().map(|&x| S::lit(x)).collect())
    }

    pub fn scalar(x: S) -> Self {
        Self::from_vec(1, 1, vec![x])
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, r: usize) -> &[S] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [S] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn at(&self, r: usize, c: usize) -> S {
        self.data[r * self.cols + c]
    }

    pub fn item(&self) -> S {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn add_assign(&mut self, other: &Tensor<S>) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "shape mismatch in add");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self::from_vec(self.rows, self.cols, self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_vec(self.rows, self.cols, self.data.iter().map(|x| T::lit(x.as_f64())).collect())
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|x| x.as_f64() * x.as_f64()).sum()
    }
}

/// `op(A) op(B)` into a fresh tensor.
pub fn matmul<S: Scalar>(a: &Tensor<S>, ta: bool, b: &Tensor<S>, tb: bool) -> Tensor<S> {
    let (m, k, rsa, csa) = if ta { (a.cols, a.rows, 1, a.cols) } else { (a.rows, a.cols, a.cols, 1) };
    let (k2, n, rsb, csb) = if tb { (b.cols, b.rows, 1, b.cols) } else { (b.rows, b.cols, b.cols, 1) };
    assert_eq!(k, k2, "matmul inner dimension");
    let mut c = Tensor::zeros(m, n);
    S::gemm(m, k, n, S::one(), &a.data, rsa, csa, &b.data, rsb, csb, S::zero(), &mut c.data, n, 1);
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_matches_naive_with_transposes() {
        let a = Tensor::<f64>::from_f64(2, 3, &[1., 2., 3., 4., 5., 6.]);
        let b = Tensor::<f64>::from_f64(3, 2, &[7., 8., 9., 10., 11., 12.]);
        let c = matmul(&a, false, &b, false);
        assert_eq!(c.data, vec![58., 64., 139., 154.]);
        let c2 = matmul(&a.transpose(), true, &b.transpose(), true);
        assert_eq!(c2.data, c.data);
        let c3 = matmul(&b, true, &a, true);
        assert_eq!(c3.data, c.transpose().data);
    }

    #[test]
    fn f32_kernel_agrees() {
        let a = Tensor::<f32>::from_f64(2, 2, &[1., 2., 3., 4.]);
        let c = matmul(&a, false, &a, true);
        assert_eq!(c.data, vec![5., 11., 11., 25.]);
    }
}
