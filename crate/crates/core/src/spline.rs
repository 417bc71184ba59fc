//! Penalized truncated-linear regression spline in one variable with the
//! ridge penalty chosen by generalized cross-validation.

use crate::error::{Error, Result};
use crate::linalg::{trace_product, Cholesky};
use crate::optim::golden_section;
use crate::scalar::Real;

/// Knot count used when none is supplied: `min(20, floor(n / 4))`.
pub fn default_knot_count(n: usize) -> usize {
    (n / 4).min(20)
}

#[derive(Debug, Clone)]
pub struct PenalizedSpline<T> {
    center: T,
    scale: T,
    knots: Vec<T>,
    coef: Vec<T>,
    /// Penalty actually used (on the standardized scale).
    pub lambda: T,
    pub edf: T,
    pub gcv: T,
}

impl<T: Real> PenalizedSpline<T> {
    pub fn knots(&self) -> Vec<T> {
        self.knots.iter().map(|&k| k * self.scale + self.center).collect()
    }

    pub fn coefficients(&self) -> &[T] {
        &self.coef
    }

    fn basis(&self, x: T) -> Vec<T> {
        basis(&self.knots, (x - self.center) / self.scale)
    }

    pub fn predict(&self, x: T) -> T {
        self.basis(x).iter().zip(&self.coef).map(|(&b, &c)| b * c).sum()
    }
}

fn basis<T: Real>(knots: &[T], u: T) -> Vec<T> {
    let mut b = Vec::with_capacity(knots.len() + 2);
    b.push(T::one());
    b.push(u);
    b.extend(knots.iter().map(|&k| (u - k).max(T::zero())));
    b
}

/// Knots at equally spaced interior quantiles `k / (K + 1)` of `x`, with
/// duplicates and knots at the extremes dropped.
pub fn quantile_knots<T: Real>(x: &[T], k: usize) -> Vec<T> {
    let mut s = x.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = s.len();
    let mut knots: Vec<T> = Vec::with_capacity(k);
    for j in 1..=k {
        let pos = T::from_usize_(j) / T::from_usize_(k + 1) * T::from_usize_(n - 1);
        let lo = pos.floor().to_usize().unwrap_or(0).min(n - 1);
        let hi = (lo + 1).min(n - 1);
        let frac = pos - T::from_usize_(lo);
        let q = s[lo] + frac * (s[hi] - s[lo]);
        if q > s[0] && q < s[n - 1] && knots.last().is_none_or(|&l| q > l) {
            knots.push(q);
        }
    }
    knots
}

struct Gram<T> {
    p: usize,
    btb: Vec<T>,
    bty: Vec<T>,
    yty: T,
    n: usize,
}

impl<T: Real> Gram<T> {
    /// Penalized fit at `lambda`; returns (coef, rss, edf).
    fn solve(&self, lambda: T) -> Option<(Vec<T>, T, T)> {
        let p = self.p;
        let mut a = self.btb.clone();
        for j in 2..p {
            a[j * p + j] += lambda;
        }
        let ch = Cholesky::new(&a, p).ok()?;
        let coef = ch.solve(&self.bty);
        // rss = y'y - 2 b'X'y + b'X'X b
        let mut quad = T::zero();
        for i in 0..p {
            for j in 0..p {
                quad += coef[i] * self.btb[i * p + j] * coef[j];
            }
        }
        let cross: T = coef.iter().zip(&self.bty).map(|(&c, &v)| c * v).sum();
        let rss = (self.yty - T::lit(2.0) * cross + quad).max(T::zero());
        let edf = trace_product(&ch.inverse(), &self.btb, p);
        Some((coef, rss, edf))
    }

    fn gcv(&self, lambda: T) -> Option<(T, Vec<T>, T)> {
        let (coef, rss, edf) = self.solve(lambda)?;
        let n = T::from_usize_(self.n);
        let denom = n - edf;
        if !(denom > T::zero()) {
            return None;
        }
        Some((n * rss / (denom * denom), coef, edf))
    }
}

/// Fits the spline with `n_knots` knots (quantile placement). When
/// `lambda` is `None` the penalty minimizes GCV over a log grid followed by
/// golden-section refinement.
pub fn fit_penalized_spline<T: Real>(
    x: &[T],
    y: &[T],
    n_knots: usize,
    lambda: Option<T>,
) -> Result<PenalizedSpline<T>> {
    let n = x.len();
    if n != y.len() {
        return Err(Error::data("spline inputs differ in length"));
    }
    if n < 3 {
        return Err(Error::data("penalized spline needs at least 3 points"));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::numerical("non-finite spline input"));
    }
    let nf = T::from_usize_(n);
    let center = x.iter().copied().sum::<T>() / nf;
    let var = x.iter().map(|&v| (v - center) * (v - center)).sum::<T>() / nf;
    let scale = if var > T::zero() { var.sqrt() } else { T::one() };
    let u: Vec<T> = x.iter().map(|&v| (v - center) / scale).collect();
    let knots = if var > T::zero() { quantile_knots(&u, n_knots.min(n.saturating_sub(2))) } else { Vec::new() };
    let p = knots.len() + 2;

    let mut btb = vec![T::zero(); p * p];
    let mut bty = vec![T::zero(); p];
    for (&ui, &yi) in u.iter().zip(y) {
        let b = basis(&knots, ui);
        for i in 0..p {
            bty[i] += b[i] * yi;
            for j in 0..p {
                btb[i * p + j] += b[i] * b[j];
            }
        }
    }
    if var == T::zero() {
        // Only the intercept is identified; pin the slope at zero.
        btb[p + 1] = T::one();
    }
    let yty = y.iter().map(|&v| v * v).sum();
    let gram = Gram { p, btb, bty, yty, n };

    let base = if p > 2 {
        (2..p).map(|j| gram.btb[j * p + j]).sum::<T>() / T::from_usize_(p - 2)
    } else {
        T::one()
    };
    let base = if base > T::zero() { base } else { T::one() };

    let (lambda, coef, edf, gcv) = match lambda {
        Some(l) => {
            let (g, coef, edf) = gram
                .gcv(l)
                .ok_or_else(|| Error::numerical("penalized spline system is singular"))?;
            (l, coef, edf, g)
        }
        None if p == 2 => {
            let (g, coef, edf) = gram.gcv(T::zero()).ok_or_else(|| Error::numerical("linear fit is singular"))?;
            (T::zero(), coef, edf, g)
        }
        None => {
            let eval = |log_rel: T| gram.gcv(base * T::lit(10.0).powf(log_rel)).map(|r| r.0);
            let mut best: Option<(T, T)> = None;
            let mut g = T::lit(-8.0);
            while g <= T::lit(8.0) {
                if let Some(v) = eval(g) {
                    if best.is_none_or(|(_, bv)| v < bv) {
                        best = Some((g, v));
                    }
                }
                g += T::lit(0.5);
            }
            let (g0, _) = best.ok_or_else(|| Error::numerical("GCV undefined at every penalty"))?;
            let refined = golden_section(
                |t| eval(t).unwrap_or(T::infinity()),
                g0 - T::lit(0.5),
                g0 + T::lit(0.5),
                T::lit(1e-3),
                100,
            );
            let gbest = if refined.value <= eval(g0).unwrap_or(T::infinity()) { refined.x[0] } else { g0 };
            let l = base * T::lit(10.0).powf(gbest);
            let (gv, coef, edf) = gram.gcv(l).ok_or_else(|| Error::numerical("GCV fit failed"))?;
            (l, coef, edf, gv)
        }
    };
    Ok(PenalizedSpline { center, scale, knots, coef, lambda, edf, gcv })
}
