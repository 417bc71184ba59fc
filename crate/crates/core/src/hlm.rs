//! Two-level hierarchical model for obtained subgroup averages with known
//! heteroskedastic measurement-error variances, fit by restricted maximum
//! likelihood, and empirical-Bayes (BLUP) prediction of true averages.
//!
//! For one assessment, the obtained average of cell `k` at school `i` is
//!
//! ```text
//! W_ik = gamma0 + Z_i gamma_z + d_i + s_ik + e_ik,
//! d_i ~ N(0, tau1^2),  s_ik ~ N(0, tau2^2),  e_ik ~ N(0, v_ik)
//! ```
//!
//! with `v_ik` taken from a [`MeasurementModel`]. The marginal covariance of a
//! school's observed cells is `tau1^2 * J + diag(tau2^2 + v_ik)`, which is
//! inverted in closed form (diagonal plus rank one), so one likelihood
//! evaluation costs O(cells).

use std::collections::BTreeMap;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::Cholesky;
use crate::measure::{build_sigma_where, CsemSource, CsemTable, MeasurementModel};
use crate::optim::{golden_section, nelder_mead};
use crate::scalar::Real;

const MAX_ITER: usize = 500;

#[derive(Debug, Clone, PartialEq)]
pub struct HlmFit<T> {
    pub assessment: String,
    pub gamma0: T,
    pub gamma_z: Vec<T>,
    /// School-level variance.
    pub tau1_sq: T,
    /// Subgroup-within-school variance.
    pub tau2_sq: T,
    /// Restricted log-likelihood at the optimum.
    pub objective: T,
    pub converged: bool,
    pub iterations: usize,
}

impl<T: Real> HlmFit<T> {
    fn fixed_part(&self, z: &[f64]) -> T {
        self.gamma0
            + self
                .gamma_z
                .iter()
                .zip(z)
                .map(|(&g, &zv)| g * T::lit(zv))
                .sum::<T>()
    }
}

/// Per-school, per-cell BLUPs. Indexed `[record][cell layout index]`;
/// entries are `None` for cells the fitted assessment(s) do not cover.
#[derive(Debug, Clone, PartialEq)]
pub struct EbPredictions<T> {
    pub xhat: Vec<Vec<Option<T>>>,
    pub cond_var: Vec<Vec<Option<T>>>,
    /// School random-intercept predictions, `[record][assessment index]`.
    pub school_effect: Vec<Vec<Option<T>>>,
}

impl<T: Real> EbPredictions<T> {
    fn empty(dataset: &Dataset) -> Self {
        let n = dataset.len();
        let k = dataset.cell_keys.len();
        let a = dataset.assessment_keys.len();
        EbPredictions {
            xhat: vec![vec![None; k]; n],
            cond_var: vec![vec![None; k]; n],
            school_effect: vec![vec![None; a]; n],
        }
    }

    /// Overlays the entries present in `other` onto `self`.
    pub fn merge(&mut self, other: &EbPredictions<T>) {
        let overlay = |dst: &mut Vec<Vec<Option<T>>>, src: &Vec<Vec<Option<T>>>| {
            for (d, s) in dst.iter_mut().zip(src) {
                for (dv, sv) in d.iter_mut().zip(s) {
                    if sv.is_some() {
                        *dv = *sv;
                    }
                }
            }
        };
        overlay(&mut self.xhat, &other.xhat);
        overlay(&mut self.cond_var, &other.cond_var);
        overlay(&mut self.school_effect, &other.school_effect);
    }

    /// Predictions as plain scores, for CSEM lookups.
    pub fn scores_f64(&self) -> Vec<Vec<Option<f64>>> {
        self.xhat
            .iter()
            .map(|r| r.iter().map(|v| v.map(Real::as_f64)).collect())
            .collect()
    }
}

struct SchoolBlock<T> {
    record: usize,
    /// Observed cells: (layout index, centered W, error variance).
    cells: Vec<(usize, T, T)>,
}

/// Likelihood ingredients for one assessment.
struct Problem<T> {
    q: usize,
    /// Design row (intercept + covariates) per record.
    rows: Vec<Vec<T>>,
    blocks: Vec<SchoolBlock<T>>,
    n_obs: usize,
    center: T,
}

struct Evaluation<T> {
    loglik: T,
    /// Fixed effects on the centered scale.
    gamma: Vec<T>,
}

impl<T: Real> Problem<T> {
    fn build(dataset: &Dataset, sigma: &MeasurementModel, assessment: &str) -> Result<Self> {
        let cells = dataset.cells_for_assessment(assessment);
        if cells.is_empty() {
            return Err(Error::data(format!("no cells for assessment '{assessment}'")));
        }
        let q = dataset.n_covariates() + 1;
        let rows: Vec<Vec<T>> = dataset
            .records
            .iter()
            .map(|r| {
                std::iter::once(T::one())
                    .chain(r.covariates.iter().map(|&z| T::lit(z)))
                    .collect()
            })
            .collect();

        let mut raw = Vec::new();
        for (i, rec) in dataset.records.iter().enumerate() {
            let mut obs = Vec::new();
            for &k in &cells {
                let Some(cell) = rec.cell(&dataset.cell_keys[k]) else { continue };
                let Some(w) = cell.obtained_avg else { continue };
                let v = sigma.error_variance(i, k).ok_or_else(|| {
                    Error::data(format!(
                        "no error variance for school {} cell {}",
                        rec.school_id, dataset.cell_keys[k]
                    ))
                })?;
                if !(v >= 0.0) {
                    return Err(Error::data(format!(
                        "negative error variance for school {} cell {}",
                        rec.school_id, dataset.cell_keys[k]
                    )));
                }
                obs.push((k, w, v));
            }
            if !obs.is_empty() {
                raw.push((i, obs));
            }
        }
        if raw.len() < 2 {
            return Err(Error::data(format!(
                "assessment '{assessment}': need at least 2 schools with observed averages, found {}",
                raw.len()
            )));
        }
        let n_obs: usize = raw.iter().map(|(_, o)| o.len()).sum();
        let center = raw.iter().flat_map(|(_, o)| o.iter().map(|c| c.1)).sum::<f64>() / n_obs as f64;
        let blocks = raw
            .into_iter()
            .map(|(record, obs)| SchoolBlock {
                record,
                cells: obs
                    .into_iter()
                    .map(|(k, w, v)| (k, T::lit(w - center), T::lit(v)))
                    .collect(),
            })
            .collect();
        Ok(Problem { q, rows, blocks, n_obs, center: T::lit(center) })
    }

    fn check_design(&self, dataset: &Dataset) -> Result<()> {
        let q = self.q;
        let mut a = vec![T::zero(); q * q];
        for b in &self.blocks {
            let x = &self.rows[b.record];
            let w = T::from_usize_(b.cells.len());
            for r in 0..q {
                for c in 0..q {
                    a[r * q + c] += w * x[r] * x[c];
                }
            }
        }
        Cholesky::new(&a, q).map(|_| ()).map_err(|j| {
            let name = |j: usize| {
                if j == 0 {
                    "intercept".to_string()
                } else {
                    dataset.covariate_names[j - 1].clone()
                }
            };
            let earlier: Vec<String> = (0..j).map(name).collect();
            Error::numerical(format!(
                "singular GLS system: covariate '{}' is collinear with [{}]",
                name(j),
                earlier.join(", ")
            ))
        })
    }

    /// Restricted log-likelihood at `(t1, t2)`; `None` when a covariance
    /// block or the GLS system is singular.
    fn evaluate(&self, t1: T, t2: T) -> Option<Evaluation<T>> {
        let q = self.q;
        let mut a = vec![T::zero(); q * q];
        let mut b = vec![T::zero(); q];
        let mut logdet_v = T::zero();
        let mut quad = T::zero();
        for blk in &self.blocks {
            let mut s = T::zero();
            let mut by = T::zero();
            let mut yy = T::zero();
            for &(_, y, e) in &blk.cells {
                let d = t2 + e;
                if !(d > T::zero()) {
                    return None;
                }
                let u = d.recip();
                s += u;
                by += u * y;
                yy += u * y * y;
                logdet_v += d.ln();
            }
            let denom = T::one() + t1 * s;
            logdet_v += denom.ln();
            let a_i = s / denom;
            let b_i = by / denom;
            quad += yy - t1 * by * by / denom;
            let x = &self.rows[blk.record];
            for r in 0..q {
                b[r] += b_i * x[r];
                for c in 0..q {
                    a[r * q + c] += a_i * x[r] * x[c];
                }
            }
        }
        let ch = Cholesky::new(&a, q).ok()?;
        let gamma = ch.solve(&b);
        let quad = quad - gamma.iter().zip(&b).map(|(&g, &bb)| g * bb).sum::<T>();
        let n_minus_q = T::from_usize_(self.n_obs) - T::from_usize_(q);
        let two_pi = T::lit(2.0) * T::PI();
        let loglik = -T::lit(0.5) * (logdet_v + ch.log_det() + quad + n_minus_q * two_pi.ln());
        loglik.is_finite().then_some(Evaluation { loglik, gamma })
    }

    fn scale(&self) -> T {
        let n = T::from_usize_(self.n_obs);
        let ys = self.blocks.iter().flat_map(|b| b.cells.iter().map(|c| c.1));
        let var_y = ys.map(|y| y * y).sum::<T>() / n;
        let mean_e = self.blocks.iter().flat_map(|b| b.cells.iter().map(|c| c.2)).sum::<T>() / n;
        var_y.max(mean_e).max(T::lit(1e-12))
    }
}

/// Restricted log-likelihood of the model at the given variance components.
pub fn reml_objective<T: Real>(
    dataset: &Dataset,
    sigma: &MeasurementModel,
    assessment: &str,
    tau1_sq: T,
    tau2_sq: T,
) -> Result<T> {
    let p = Problem::<T>::build(dataset, sigma, assessment)?;
    p.evaluate(tau1_sq, tau2_sq)
        .map(|e| e.loglik)
        .ok_or_else(|| Error::numerical("REML objective undefined at these variances"))
}

struct Candidate<T> {
    t1: T,
    t2: T,
    eval: Evaluation<T>,
    zeros: usize,
    converged: bool,
}

pub fn fit_hlm<T: Real>(
    dataset: &Dataset,
    sigma: &MeasurementModel,
    assessment: &str,
) -> Result<HlmFit<T>> {
    let prob = Problem::<T>::build(dataset, sigma, assessment)?;
    prob.check_design(dataset)?;

    let scale = prob.scale();
    let lo = (scale * T::lit(1e-10)).ln();
    let hi = (scale * T::lit(1e4)).ln();
    let rel_tol = T::lit(1e-8).max(T::epsilon() * T::lit(10.0));
    let neg = |t1: T, t2: T| prob.evaluate(t1, t2).map_or(T::infinity(), |e| -e.loglik);

    // crude moment start: split residual variance beyond measurement error
    let start = {
        let fit0 = prob.evaluate(T::zero(), scale).map(|e| e.gamma).unwrap_or_else(|| vec![T::zero(); prob.q]);
        let mut rss = T::zero();
        let mut err = T::zero();
        for b in &prob.blocks {
            let x = &prob.rows[b.record];
            let mu: T = x.iter().zip(&fit0).map(|(&a, &g)| a * g).sum();
            for &(_, y, e) in &b.cells {
                rss += (y - mu) * (y - mu);
                err += e;
            }
        }
        let n = T::from_usize_(prob.n_obs);
        let excess = ((rss - err) / n).max(scale * T::lit(1e-3));
        let half = (excess / T::lit(2.0)).ln().max(lo).min(hi);
        [half, half]
    };

    let nm = nelder_mead(
        |th: &[T]| neg(th[0].exp(), th[1].exp()),
        &start,
        T::one(),
        &[lo, lo],
        &[hi, hi],
        rel_tol,
        MAX_ITER,
    );
    let (theta, polish_iters) = newton_polish(&|th: &[T]| neg(th[0].exp(), th[1].exp()), nm.x.clone(), lo, hi);

    let mut candidates: Vec<Candidate<T>> = Vec::new();
    let (t1, t2) = (theta[0].exp(), theta[1].exp());
    if let Some(eval) = prob.evaluate(t1, t2) {
        candidates.push(Candidate { t1, t2, eval, zeros: 0, converged: nm.converged });
    }
    // boundary solutions: variance components exactly zero
    let golden_tol = T::lit(1e-9).max(T::epsilon().sqrt());
    let g2 = golden_section(|th| neg(T::zero(), th.exp()), lo, hi, golden_tol, 200);
    let g1 = golden_section(|th| neg(th.exp(), T::zero()), lo, hi, golden_tol, 200);
    for (t1, t2, zeros, conv) in [
        (T::zero(), g2.x[0].exp(), 1, g2.converged),
        (g1.x[0].exp(), T::zero(), 1, g1.converged),
        (T::zero(), T::zero(), 2, true),
    ] {
        if let Some(eval) = prob.evaluate(t1, t2) {
            candidates.push(Candidate { t1, t2, eval, zeros, converged: conv });
        }
    }
    let best = candidates
        .into_iter()
        .reduce(|best, c| {
            let tie = T::lit(1e-12) * best.eval.loglik.abs().max(T::one());
            if c.eval.loglik > best.eval.loglik + tie
                || ((c.eval.loglik - best.eval.loglik).abs() <= tie && c.zeros > best.zeros)
            {
                c
            } else {
                best
            }
        })
        .ok_or_else(|| Error::numerical(format!("REML objective undefined for assessment '{assessment}'")))?;

    let mut gamma = best.eval.gamma;
    gamma[0] += prob.center;
    Ok(HlmFit {
        assessment: assessment.to_string(),
        gamma0: gamma[0],
        gamma_z: gamma[1..].to_vec(),
        tau1_sq: best.t1,
        tau2_sq: best.t2,
        objective: best.eval.loglik,
        converged: best.converged,
        iterations: nm.iterations + polish_iters,
    })
}

/// Newton refinement of a 2-D minimum with finite-difference derivatives.
fn newton_polish<T: Real>(f: &dyn Fn(&[T]) -> T, mut x: Vec<T>, lo: T, hi: T) -> (Vec<T>, usize) {
    let hg = T::epsilon().cbrt();
    let hh = T::epsilon().powf(T::lit(0.25));
    let two = T::lit(2.0);
    let mut fx = f(&x);
    let mut iters = 0;
    for _ in 0..30 {
        if !fx.is_finite() || x.iter().any(|&v| v <= lo + T::one() || v >= hi) {
            break;
        }
        let at = |d0: T, d1: T| f(&[x[0] + d0, x[1] + d1]);
        let g = [
            (at(hg, T::zero()) - at(-hg, T::zero())) / (two * hg),
            (at(T::zero(), hg) - at(T::zero(), -hg)) / (two * hg),
        ];
        let h00 = (at(hh, T::zero()) - two * fx + at(-hh, T::zero())) / (hh * hh);
        let h11 = (at(T::zero(), hh) - two * fx + at(T::zero(), -hh)) / (hh * hh);
        let h01 = (at(hh, hh) - at(hh, -hh) - at(-hh, hh) + at(-hh, -hh)) / (T::lit(4.0) * hh * hh);
        let det = h00 * h11 - h01 * h01;
        if !(h00 > T::zero() && det > T::zero()) {
            break;
        }
        let step = [-(h11 * g[0] - h01 * g[1]) / det, -(h00 * g[1] - h01 * g[0]) / det];
        let mut t = T::one();
        let mut improved = false;
        for _ in 0..20 {
            let cand = vec![x[0] + t * step[0], x[1] + t * step[1]];
            let fc = f(&cand);
            if fc <= fx {
                improved = fc < fx || step.iter().all(|s| s.abs() < hg);
                x = cand;
                fx = fc;
                break;
            }
            t = t / two;
        }
        iters += 1;
        if !improved || (step[0].abs() + step[1].abs()) < T::epsilon().sqrt() {
            break;
        }
    }
    (x, iters)
}

pub fn predict_eb<T: Real>(
    fit: &HlmFit<T>,
    dataset: &Dataset,
    sigma: &MeasurementModel,
    assessment: &str,
) -> Result<EbPredictions<T>> {
    if !fit.converged {
        return Err(Error::numerical(format!(
            "HLM fit for assessment '{}' did not converge",
            fit.assessment
        )));
    }
    if fit.gamma_z.len() != dataset.n_covariates() {
        return Err(Error::data("HLM fit covariate dimension does not match dataset"));
    }
    let a_idx = dataset
        .assessment_keys
        .iter()
        .position(|a| a == assessment)
        .ok_or_else(|| Error::data(format!("unknown assessment '{assessment}'")))?;
    let cells = dataset.cells_for_assessment(assessment);
    let (t1, t2) = (fit.tau1_sq, fit.tau2_sq);
    let mut out = EbPredictions::empty(dataset);

    for (i, rec) in dataset.records.iter().enumerate() {
        let mu = fit.fixed_part(&rec.covariates);
        // observed cells: (layout index, residual, error variance)
        let mut obs: Vec<(usize, T, T)> = Vec::new();
        for &k in &cells {
            let Some(cell) = rec.cell(&dataset.cell_keys[k]) else { continue };
            if let Some(w) = cell.obtained_avg {
                let v = sigma.error_variance(i, k).ok_or_else(|| {
                    Error::data(format!(
                        "no error variance for school {} cell {}",
                        rec.school_id, dataset.cell_keys[k]
                    ))
                })?;
                obs.push((k, T::lit(w) - mu, T::lit(v)));
            }
        }
        let has_cells = cells.iter().any(|&k| rec.cell(&dataset.cell_keys[k]).is_some());
        if !has_cells {
            continue;
        }

        // exact observations (zero error variance, zero tau2) pin the cell
        let mut s = T::zero();
        let mut r_sum = T::zero();
        let mut u = Vec::with_capacity(obs.len());
        for &(_, r, e) in &obs {
            let d = t2 + e;
            let uk = if d > T::zero() { d.recip() } else { T::zero() };
            s += uk;
            r_sum += uk * r;
            u.push(uk);
        }
        let denom = T::one() + t1 * s;
        let school = if obs.is_empty() { T::zero() } else { t1 * r_sum / denom };
        out.school_effect[i][a_idx] = Some(school);

        for &k in &cells {
            if rec.cell(&dataset.cell_keys[k]).is_none() {
                continue;
            }
            let prior = t1 + t2;
            let (x, cv) = match obs.iter().position(|o| o.0 == k) {
                Some(j) => {
                    let (_, r, e) = obs[j];
                    if e == T::zero() {
                        (r + mu, T::zero())
                    } else {
                        let uk = u[j];
                        let sub = t2 * uk * (r - school);
                        // c' V^-1 c with c = t1*1 + t2*e_k
                        let ones = s / denom;
                        let vk_one = uk / denom;
                        let vkk = uk - t1 * uk * uk / denom;
                        let explained = t1 * t1 * ones + T::lit(2.0) * t1 * t2 * vk_one + t2 * t2 * vkk;
                        (mu + school + sub, (prior - explained).max(T::zero()))
                    }
                }
                None => {
                    let explained = t1 * t1 * s / denom;
                    (mu + school, (prior - explained).max(T::zero()))
                }
            };
            out.xhat[i][k] = Some(x);
            out.cond_var[i][k] = Some(cv);
        }
    }
    Ok(out)
}

/// Fits each assessment separately and merges the predictions.
pub fn fit_all_assessments<T: Real>(
    dataset: &Dataset,
    sigma: &MeasurementModel,
) -> Result<(Vec<HlmFit<T>>, EbPredictions<T>)> {
    let mut fits = Vec::new();
    let mut eb = EbPredictions::empty(dataset);
    for a in &dataset.assessment_keys {
        let fit = fit_hlm::<T>(dataset, sigma, a)?;
        let pred = predict_eb(&fit, dataset, sigma, a)?;
        eb.merge(&pred);
        fits.push(fit);
    }
    Ok((fits, eb))
}

/// Two-pass fit for score-dependent CSEMs: pass 1 evaluates the table at the
/// obtained averages; pass 2 re-evaluates it at the pass-1 predictions and
/// refits. Returns the pass-2 fit, its predictions, and the pass-2
/// measurement model for this assessment's cells (withheld ones included).
pub fn fit_hlm_two_pass<T: Real>(
    dataset: &Dataset,
    table: &CsemTable,
    assessment: &str,
) -> Result<(HlmFit<T>, EbPredictions<T>, MeasurementModel)> {
    let tables = BTreeMap::from([(assessment.to_string(), table.clone())]);
    let obtained: Vec<Vec<Option<f64>>> = (0..dataset.len()).map(|i| dataset.obtained_vector(i)).collect();
    let this = |k: &crate::data::CellKey| k.assessment == assessment;
    let sigma1 = build_sigma_where(dataset, CsemSource::Table { tables: &tables, scores: &obtained }, this)?;
    let fit1 = fit_hlm::<T>(dataset, &sigma1, assessment)?;
    let eb1 = predict_eb(&fit1, dataset, &sigma1, assessment)?;

    let scores = eb1.scores_f64();
    let sigma2 = build_sigma_where(dataset, CsemSource::Table { tables: &tables, scores: &scores }, this)?;
    let fit2 = fit_hlm::<T>(dataset, &sigma2, assessment)?;
    let eb2 = predict_eb(&fit2, dataset, &sigma2, assessment)?;
    Ok((fit2, eb2, sigma2))
}
