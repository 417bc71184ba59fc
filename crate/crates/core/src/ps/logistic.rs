//! Binary logistic regression by iteratively reweighted least squares.

use crate::error::{Error, Result};
use crate::linalg::Cholesky;
use crate::scalar::{inv_logit, Real};

const MAX_ITER: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticFit<T> {
    /// Coefficients in design-column order (column 0 is the intercept).
    pub coef: Vec<T>,
    pub deviance: T,
    pub iterations: usize,
    pub converged: bool,
    /// Some fitted probability lies within 1e-10 of 0 or 1.
    pub separation: bool,
    /// Non-intercept columns that were constant and held at zero.
    pub dropped: Vec<usize>,
}

/// Fits `P(y = 1 | x) = inv_logit(x' b)`. Every row of `x` must start with
/// the intercept `1`. Non-intercept columns are standardized internally;
/// iteration stops when the score vector on that scale has norm below the
/// tolerance (1e-8 in double precision) or after 100 iterations.
///
/// Quasi-separation is reported through [`LogisticFit::separation`] rather
/// than as an error.
pub fn fit_logistic<T: Real>(x: &[Vec<T>], y: &[bool]) -> Result<LogisticFit<T>> {
    let n = x.len();
    if n != y.len() {
        return Err(Error::data("design and response lengths differ"));
    }
    let n1 = y.iter().filter(|&&t| t).count();
    if n1 == 0 || n1 == n {
        return Err(Error::data("logistic fit needs both treated and control units"));
    }
    let p = x[0].len();
    if x.iter().any(|r| r.len() != p || r[0] != T::one()) {
        return Err(Error::data("design rows must have equal length and a leading intercept"));
    }

    // standardize non-intercept columns; constant columns are dropped
    let nf = T::from_usize_(n);
    let mut keep = vec![0usize];
    let mut center = vec![T::zero(); p];
    let mut scale = vec![T::one(); p];
    let mut dropped = Vec::new();
    for j in 1..p {
        let mean = x.iter().map(|r| r[j]).sum::<T>() / nf;
        let sd = (x.iter().map(|r| (r[j] - mean) * (r[j] - mean)).sum::<T>() / nf).sqrt();
        if sd <= T::epsilon() * (mean.abs() + T::one()) * T::lit(16.0) {
            dropped.push(j);
            continue;
        }
        center[j] = mean;
        scale[j] = sd;
        keep.push(j);
    }
    let q = keep.len();
    let z: Vec<Vec<T>> = x
        .iter()
        .map(|r| {
            keep.iter()
                .map(|&j| if j == 0 { T::one() } else { (r[j] - center[j]) / scale[j] })
                .collect()
        })
        .collect();

    let tol = T::lit(1e-8).max(T::epsilon() * nf * T::lit(10.0));
    let mut b = vec![T::zero(); q];
    b[0] = logit_of_fraction::<T>(n1, n);
    let mut dev = deviance(&z, y, &b);
    let mut iterations = 0;
    let mut converged = false;
    let mut separation = false;

    while iterations < MAX_ITER {
        let mut g = vec![T::zero(); q];
        let mut h = vec![T::zero(); q * q];
        for (row, &yi) in z.iter().zip(y) {
            let pi = inv_logit(row.iter().zip(&b).map(|(&a, &c)| a * c).sum::<T>());
            let w = pi * (T::one() - pi);
            let r = if yi { T::one() - pi } else { -pi };
            for a in 0..q {
                g[a] += row[a] * r;
                for c in 0..=a {
                    h[a * q + c] += w * row[a] * row[c];
                }
            }
        }
        for a in 0..q {
            for c in 0..a {
                h[c * q + a] = h[a * q + c];
            }
        }
        let gnorm = g.iter().map(|&v| v * v).sum::<T>().sqrt();
        if gnorm <= tol {
            converged = true;
            break;
        }
        let Ok(ch) = Cholesky::new(&h, q) else {
            // information matrix degenerates when probabilities hit 0/1
            separation = true;
            break;
        };
        let step = ch.solve(&g);
        let mut t = T::one();
        let mut accepted = false;
        for _ in 0..30 {
            let cand: Vec<T> = b.iter().zip(&step).map(|(&bi, &si)| bi + t * si).collect();
            let dc = deviance(&z, y, &cand);
            if dc <= dev + T::epsilon() * dev.abs().max(T::one()) * T::lit(8.0) {
                b = cand;
                dev = dc;
                accepted = true;
                break;
            }
            t = t / T::lit(2.0);
        }
        iterations += 1;
        if !accepted {
            break;
        }
    }

    let edge = T::lit(1e-10);
    separation |= z.iter().any(|row| {
        let pi = inv_logit(row.iter().zip(&b).map(|(&a, &c)| a * c).sum::<T>());
        pi < edge || pi > T::one() - edge
    });
    // a vanishing score under separation is not a finite maximum
    converged &= !separation;

    // back to the original column scale
    let mut coef = vec![T::zero(); p];
    let mut intercept = b[0];
    for (pos, &j) in keep.iter().enumerate().skip(1) {
        coef[j] = b[pos] / scale[j];
        intercept -= coef[j] * center[j];
    }
    coef[0] = intercept;
    Ok(LogisticFit { coef, deviance: dev, iterations, converged, separation, dropped })
}

fn logit_of_fraction<T: Real>(n1: usize, n: usize) -> T {
    let f = T::from_usize_(n1) / T::from_usize_(n);
    (f / (T::one() - f)).ln()
}

fn deviance<T: Real>(z: &[Vec<T>], y: &[bool], b: &[T]) -> T {
    let two = T::lit(2.0);
    z.iter()
        .zip(y)
        .map(|(row, &yi)| {
            let eta = row.iter().zip(b).map(|(&a, &c)| a * c).sum::<T>();
            // -log P(y | eta) = log(1 + exp(-s*eta)), s = +-1
            let m = if yi { -eta } else { eta };
            two * (m.max(T::zero()) + (-m.abs()).exp().ln_1p())
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(xs: &[f64]) -> Vec<Vec<f64>> {
        xs.iter().map(|&v| vec![1.0, v]).collect()
    }

    #[test]
    fn grouped_two_by_two_gives_log_odds_ratio() {
        let mut x = Vec::new();
        let mut y = Vec::new();
        for (t, xv, count) in [(true, 1.0, 30), (false, 1.0, 10), (true, 0.0, 10), (false, 0.0, 30)] {
            for _ in 0..count {
                x.push(xv);
                y.push(t);
            }
        }
        let fit = fit_logistic(&rows(&x), &y).unwrap();
        assert!(fit.converged);
        assert!((fit.coef[1] - 9.0_f64.ln()).abs() < 1e-9);
        assert!((fit.coef[0] - (10.0_f64 / 30.0).ln()).abs() < 1e-9);
    }

    #[test]
    fn independent_balanced_predictor_gives_zero_slope() {
        // 3 treated : 1 control within each level of x
        let x = [1.0, 1.0, 1.0, 1.0, -1.0, -1.0, -1.0, -1.0];
        let y = [true, true, true, false, true, true, true, false];
        let fit = fit_logistic(&rows(&x), &y).unwrap();
        assert!(fit.coef[1].abs() < 1e-10);
        assert!((fit.coef[0] - 3.0_f64.ln()).abs() < 1e-10);
    }

    #[test]
    fn perfect_separation_is_flagged() {
        let x = [-3.0, -2.0, -1.0, 1.0, 2.0, 3.0];
        let y = [false, false, false, true, true, true];
        let fit = fit_logistic(&rows(&x), &y).unwrap();
        assert!(fit.separation);
        assert!(!fit.converged);
    }

    #[test]
    fn single_class_is_an_error() {
        assert!(fit_logistic(&rows(&[1.0, 2.0]), &[true, true]).is_err());
    }

    #[test]
    fn constant_column_is_held_at_zero() {
        let x: Vec<Vec<f64>> = (0..10).map(|i| vec![1.0, 5.0, i as f64]).collect();
        let y: Vec<bool> = (0..10).map(|i| i % 3 == 0).collect();
        let fit = fit_logistic(&x, &y).unwrap();
        assert_eq!(fit.dropped, vec![1]);
        assert_eq!(fit.coef[1], 0.0);
        assert!(fit.converged);
    }

    #[test]
    fn single_precision_matches() {
        let x = [0.2, 1.5, -0.7, 2.2, 0.1, -1.4, 0.9, 1.1, -0.3, 0.4];
        let y = [false, true, false, true, true, false, false, true, false, true];
        let f64fit = fit_logistic(&rows(&x), &y).unwrap();
        let r32: Vec<Vec<f32>> = x.iter().map(|&v| vec![1.0, v as f32]).collect();
        let f32fit = fit_logistic(&r32, &y).unwrap();
        assert!((f64::from(f32fit.coef[1]) - f64fit.coef[1]).abs() < 1e-4);
    }
}
