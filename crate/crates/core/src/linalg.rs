//! Dense kernels for the small symmetric systems that appear in GLS, IRLS
//! and penalized regression. Matrices are row-major `n x n` slices.

use crate::scalar::Real;

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
#[derive(Debug, Clone)]
pub struct Cholesky<T> {
    n: usize,
    l: Vec<T>,
}

impl<T: Real> Cholesky<T> {
    /// Factor `a`. On failure returns the index of the first column whose
    /// pivot is not positive relative to its diagonal entry; that column is
    /// (numerically) a linear combination of the preceding ones.
    pub fn new(a: &[T], n: usize) -> Result<Self, usize> {
        assert_eq!(a.len(), n * n);
        let tol = T::epsilon() * T::lit(1e4);
        let mut l = vec![T::zero(); n * n];
        for j in 0..n {
            let mut d = a[j * n + j];
            for k in 0..j {
                d -= l[j * n + k] * l[j * n + k];
            }
            let scale = a[j * n + j].abs().max(T::min_positive_value());
            if !(d > tol * scale) || !d.is_finite() {
                return Err(j);
            }
            let dj = d.sqrt();
            l[j * n + j] = dj;
            for i in (j + 1)..n {
                let mut s = a[i * n + j];
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k];
                }
                l[i * n + j] = s / dj;
            }
        }
        Ok(Cholesky { n, l })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn solve(&self, b: &[T]) -> Vec<T> {
        let n = self.n;
        let mut y = b.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for k in 0..i {
                s -= self.l[i * n + k] * y[k];
            }
            y[i] = s / self.l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s -= self.l[k * n + i] * y[k];
            }
            y[i] = s / self.l[i * n + i];
        }
        y
    }

    pub fn log_det(&self) -> T {
        (0..self.n)
            .map(|i| self.l[i * self.n + i].ln())
            .sum::<T>()
            * T::lit(2.0)
    }

    pub fn inverse(&self) -> Vec<T> {
        let n = self.n;
        let mut inv = vec![T::zero(); n * n];
        let mut e = vec![T::zero(); n];
        for j in 0..n {
            e.iter_mut().for_each(|v| *v = T::zero());
            e[j] = T::one();
            let col = self.solve(&e);
            for i in 0..n {
                inv[i * n + j] = col[i];
            }
        }
        inv
    }
}

/// `trace(A * B)` for row-major square matrices.
pub fn trace_product<T: Real>(a: &[T], b: &[T], n: usize) -> T {
    let mut s = T::zero();
    for i in 0..n {
        for k in 0..n {
            s += a[i * n + k] * b[k * n + i];
        }
    }
    s
}

pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}
