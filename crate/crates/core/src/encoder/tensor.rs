//! Dense row-major matrices over `f32` or `f64`.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Real:
    Float + FromPrimitive + ToPrimitive + AddAssign + SubAssign + MulAssign + Sum + Default + Debug + Send + Sync + 'static
{
    const DTYPE: &'static str;

    /// `c = alpha * op(a) * op(b) + beta * c` with explicit strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("representable")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("representable")
    }
}

macro_rules! impl_real {
    ($t:ty, $name:literal, $gemm:path) => {
        impl Real for $t {
            const DTYPE: &'static str = $name;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                assert!(c.len() >= m * n, "gemm output too small");
                // SAFETY: callers pass slices sized for the (m, k, n) extents and
                // strides they describe; the asserts in `Mat` methods check this.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    )
                }
            }
        }
    };
}

impl_real!(f32, "f32", matrixmultiply::sgemm);
impl_real!(f64, "f64", matrixmultiply::dgemm);

#[derive(Clone, PartialEq)]
pub struct Mat<F> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<F>,
}

impl<F: Real> Debug for Mat<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Mat<{}>({}x{})", F::DTYPE, self.rows, self.cols)
    }
}

impl<F: Real> Mat<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![F::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<F>) -> Self {
        assert_eq!(data.len(), rows * cols, "data does not match {rows}x{cols}");
        Self { rows, cols, data }
    }

    pub fn from_f64(rows: usize, cols: usize, data: &[f64]) -> Self {
        Self::from_vec(rows, cols, data.iter().map(|&v| F::of(v)).collect())
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, r: usize) -> &[F] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [F] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.f64()).collect()
    }

    pub fn cast<G: Real>(&self) -> Mat<G> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| G::of(v.f64())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Mat<F>) {
        debug_assert_eq!(self.data.len(), other.data.len());
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += *b);
    }

    fn strides(&self, transposed: bool) -> (usize, usize, isize, isize) {
        if transposed {
            (self.cols, self.rows, 1, self.cols as isize)
        } else {
            (self.rows, self.cols, self.cols as isize, 1)
        }
    }

    /// `out = op(a) * op(b) + beta * out`.
    pub fn gemm_into(a: &Mat<F>, ta: bool, b: &Mat<F>, tb: bool, beta: F, out: &mut Mat<F>) {
        let (m, k, rsa, csa) = a.strides(ta);
        let (k2, n, rsb, csb) = b.strides(tb);
        assert_eq!(k, k2, "inner dimensions differ: {a:?} (t={ta}) x {b:?} (t={tb})");
        assert_eq!((out.rows, out.cols), (m, n), "output shape mismatch");
        if k == 0 {
            out.data.iter_mut().for_each(|c| *c = *c * beta);
            return;
        }
        F::gemm(m, k, n, F::one(), &a.data, rsa, csa, &b.data, rsb, csb, beta, &mut out.data, n as isize, 1);
    }

    pub fn matmul(a: &Mat<F>, ta: bool, b: &Mat<F>, tb: bool) -> Mat<F> {
        let m = if ta { a.cols } else { a.rows };
        let n = if tb { b.rows } else { b.cols };
        let mut out = Mat::zeros(m, n);
        Self::gemm_into(a, ta, b, tb, F::zero(), &mut out);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Mat<f64>, b: &Mat<f64>) -> Vec<f64> {
        let mut out = vec![0.0; a.rows * b.cols];
        for i in 0..a.rows {
            for j in 0..b.cols {
                for k in 0..a.cols {
                    out[i * b.cols + j] += a.data[i * a.cols + k] * b.data[k * b.cols + j];
                }
            }
        }
        out
    }

    fn transpose(a: &Mat<f64>) -> Mat<f64> {
        let mut t = Mat::zeros(a.cols, a.rows);
        for i in 0..a.rows {
            for j in 0..a.cols {
                t.data[j * a.rows + i] = a.data[i * a.cols + j];
            }
        }
        t
    }

    #[test]
    fn gemm_matches_naive_in_all_layouts() {
        let a = Mat::from_vec(3, 4, (0..12).map(|i| i as f64 * 0.5 - 2.0).collect());
        let b = Mat::from_vec(4, 5, (0..20).map(|i| (i as f64).sin()).collect());
        let want = naive(&a, &b);
        let close = |x: &Mat<f64>| x.data.iter().zip(&want).all(|(p, q)| (p - q).abs() < 1e-12);
        assert!(close(&Mat::matmul(&a, false, &b, false)));
        assert!(close(&Mat::matmul(&transpose(&a), true, &b, false)));
        assert!(close(&Mat::matmul(&a, false, &transpose(&b), true)));
        assert!(close(&Mat::matmul(&transpose(&a), true, &transpose(&b), true)));
        let af: Mat<f32> = a.cast();
        let bf: Mat<f32> = b.cast();
        let c = Mat::matmul(&af, false, &bf, false);
        assert!(c.to_f64().iter().zip(&want).all(|(p, q)| (p - q).abs() < 1e-4));
    }
}
