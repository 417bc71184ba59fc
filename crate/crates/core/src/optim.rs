//! Derivative-free minimizers used for variance-component and penalty
//! selection.

use crate::scalar::Real;

#[derive(Debug, Clone)]
pub struct Minimum<T> {
    pub x: Vec<T>,
    pub value: T,
    pub iterations: usize,
    pub converged: bool,
}

/// Nelder-Mead simplex minimization inside the box `[lower, upper]`
/// (coordinates are clamped). Stops when the spread of simplex values is
/// within `rel_tol` of the best value, or after `max_iter` iterations.
pub fn nelder_mead<T: Real, F: FnMut(&[T]) -> T>(
    mut f: F,
    start: &[T],
    step: T,
    lower: &[T],
    upper: &[T],
    rel_tol: T,
    max_iter: usize,
) -> Minimum<T> {
    let n = start.len();
    let clamp = |x: &mut Vec<T>| {
        for i in 0..n {
            x[i] = x[i].max(lower[i]).min(upper[i]);
        }
    };
    let mut eval = |x: &[T]| {
        let v = f(x);
        if v.is_nan() {
            T::infinity()
        } else {
            v
        }
    };

    let mut simplex: Vec<Vec<T>> = Vec::with_capacity(n + 1);
    let mut x0 = start.to_vec();
    clamp(&mut x0);
    simplex.push(x0.clone());
    for i in 0..n {
        let mut x = x0.clone();
        x[i] += step;
        if x[i] > upper[i] {
            x[i] = x0[i] - step;
        }
        clamp(&mut x);
        simplex.push(x);
    }
    let mut values: Vec<T> = simplex.iter().map(|x| eval(x)).collect();

    let half = T::lit(0.5);
    let two = T::lit(2.0);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iter {
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        values = order.iter().map(|&i| values[i]).collect();

        let best = values[0];
        let worst = values[n];
        let scale = best.abs().max(T::one());
        if (worst - best).abs() <= rel_tol * scale {
            converged = true;
            break;
        }
        iterations += 1;

        let mut centroid = vec![T::zero(); n];
        for x in &simplex[..n] {
            for i in 0..n {
                centroid[i] += x[i] / T::from_usize_(n);
            }
        }
        let along = |t: T| {
            let mut x: Vec<T> = (0..n)
                .map(|i| centroid[i] + t * (simplex[n][i] - centroid[i]))
                .collect();
            clamp(&mut x);
            x
        };

        let xr = along(-T::one());
        let fr = eval(&xr);
        if fr < values[0] {
            let xe = along(-two);
            let fe = eval(&xe);
            if fe < fr {
                simplex[n] = xe;
                values[n] = fe;
            } else {
                simplex[n] = xr;
                values[n] = fr;
            }
        } else if fr < values[n - 1] {
            simplex[n] = xr;
            values[n] = fr;
        } else {
            let (xc, fc) = if fr < values[n] {
                let xc = along(-half);
                let fc = eval(&xc);
                (xc, fc)
            } else {
                let xc = along(half);
                let fc = eval(&xc);
                (xc, fc)
            };
            if fc < values[n].min(fr) {
                simplex[n] = xc;
                values[n] = fc;
            } else {
                // shrink toward the best vertex
                for j in 1..=n {
                    let mut x: Vec<T> = (0..n)
                        .map(|i| simplex[0][i] + half * (simplex[j][i] - simplex[0][i]))
                        .collect();
                    clamp(&mut x);
                    values[j] = eval(&x);
                    simplex[j] = x;
                }
            }
        }
    }
    let best = (0..=n)
        .min_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap())
        .unwrap();
    Minimum { x: simplex[best].clone(), value: values[best], iterations, converged }
}

/// Golden-section minimization of a unimodal function on `[a, b]`.
pub fn golden_section<T: Real, F: FnMut(T) -> T>(
    mut f: F,
    mut a: T,
    mut b: T,
    tol: T,
    max_iter: usize,
) -> Minimum<T> {
    let inv_phi = (T::lit(5.0).sqrt() - T::one()) / T::lit(2.0);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    let mut iterations = 0;
    while (b - a).abs() > tol && iterations < max_iter {
        iterations += 1;
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    let (x, value) = if fc < fd { (c, fc) } else { (d, fd) };
    Minimum { x: vec![x], value, iterations, converged: (b - a).abs() <= tol }
}
