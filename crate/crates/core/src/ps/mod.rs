//! Propensity score estimators: naive (obtained scores), regression
//! calibration (EB predictions), and the marginal-likelihood estimator that
//! integrates the obtained-score logistic model over measurement error.

pub mod logistic;
pub mod mixture;

use std::fmt;
use std::str::FromStr;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::hlm::EbPredictions;
use crate::measure::MeasurementModel;
use crate::scalar::{inv_logit, Real};

pub use logistic::{fit_logistic, LogisticFit};
pub use mixture::{logistic_normal_oracle, ml_marginal_ps, mixture_prob, MixtureConstants};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PsKind {
    Naive,
    Rc,
    Ml,
}

impl PsKind {
    pub const ALL: [PsKind; 3] = [PsKind::Ml, PsKind::Rc, PsKind::Naive];

    pub fn as_str(self) -> &'static str {
        match self {
            PsKind::Naive => "naive",
            PsKind::Rc => "rc",
            PsKind::Ml => "ml",
        }
    }
}

impl fmt::Display for PsKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PsKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "naive" => Ok(PsKind::Naive),
            "rc" => Ok(PsKind::Rc),
            "ml" => Ok(PsKind::Ml),
            other => Err(Error::usage(format!("unknown PS kind '{other}' (naive|rc|ml)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitInfo<T> {
    pub deviance: T,
    pub iterations: usize,
    pub converged: bool,
    pub separation: bool,
    /// Number of schools used to fit the coefficients.
    pub n_fit: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PsFit<T> {
    pub kind: PsKind,
    pub beta0: T,
    /// Score-block coefficients in cell-layout order (on the EB predictions
    /// for [`PsKind::Rc`]).
    pub beta_w: Vec<T>,
    pub beta_z: Vec<T>,
    /// Propensity score per record, strictly inside (0, 1).
    pub prob: Vec<T>,
    pub logit: Vec<T>,
    pub info: FitInfo<T>,
}

impl<T: Real> PsFit<T> {
    pub fn coefficients(&self) -> Vec<T> {
        std::iter::once(self.beta0)
            .chain(self.beta_w.iter().copied())
            .chain(self.beta_z.iter().copied())
            .collect()
    }

    pub fn logits_f64(&self) -> Vec<f64> {
        self.logit.iter().map(|v| v.as_f64()).collect()
    }

    pub fn probs_f64(&self) -> Vec<f64> {
        self.prob.iter().map(|v| v.as_f64()).collect()
    }
}

fn clamp_prob<T: Real>(p: T) -> T {
    let eps = T::epsilon();
    p.max(T::min_positive_value()).min(T::one() - eps)
}

fn design_row<T: Real>(scores: &[T], z: &[f64]) -> Vec<T> {
    std::iter::once(T::one())
        .chain(scores.iter().copied())
        .chain(z.iter().map(|&v| T::lit(v)))
        .collect()
}

/// Obtained scores of a record in layout order, if none is withheld.
fn complete_scores<T: Real>(dataset: &Dataset, i: usize) -> Option<Vec<T>> {
    dataset.obtained_vector(i).into_iter().map(|w| w.map(T::lit)).collect()
}

fn from_logistic<T: Real>(
    dataset: &Dataset,
    fit: &LogisticFit<T>,
    n_fit: usize,
) -> (T, Vec<T>, Vec<T>, FitInfo<T>) {
    let k = dataset.cell_keys.len();
    (
        fit.coef[0],
        fit.coef[1..=k].to_vec(),
        fit.coef[k + 1..].to_vec(),
        FitInfo {
            deviance: fit.deviance,
            iterations: fit.iterations,
            converged: fit.converged,
            separation: fit.separation,
            n_fit,
        },
    )
}

fn scored_by_logit<T: Real>(kind: PsKind, rows: &[Vec<T>], parts: (T, Vec<T>, Vec<T>, FitInfo<T>), coef: &[T]) -> PsFit<T> {
    let (beta0, beta_w, beta_z, info) = parts;
    let logit: Vec<T> = rows
        .iter()
        .map(|r| r.iter().zip(coef).map(|(&a, &b)| a * b).sum())
        .collect();
    let prob = logit.iter().map(|&e| clamp_prob(inv_logit(e))).collect();
    PsFit { kind, beta0, beta_w, beta_z, prob, logit, info }
}

/// Logistic regression of treatment on obtained scores and covariates.
/// Every school must have all score cells observed.
pub fn ps_naive<T: Real>(dataset: &Dataset) -> Result<PsFit<T>> {
    let mut rows = Vec::with_capacity(dataset.len());
    let mut incomplete = Vec::new();
    for (i, rec) in dataset.records.iter().enumerate() {
        match complete_scores::<T>(dataset, i) {
            Some(w) => rows.push(design_row(&w, &rec.covariates)),
            None => incomplete.push(rec.school_id.clone()),
        }
    }
    if !incomplete.is_empty() {
        return Err(Error::data(format!(
            "naive PS needs every score observed; withheld averages at schools: {}",
            incomplete.join(", ")
        )));
    }
    let fit = fit_logistic(&rows, &dataset.treatment())?;
    let parts = from_logistic(dataset, &fit, dataset.len());
    Ok(scored_by_logit(PsKind::Naive, &rows, parts, &fit.coef))
}

fn eb_row<T: Real>(eb: &EbPredictions<T>, dataset: &Dataset, i: usize) -> Option<Vec<T>> {
    (0..dataset.cell_keys.len()).map(|k| eb.xhat.get(i)?.get(k).copied().flatten()).collect()
}

fn eb_rows<T: Real>(eb: &EbPredictions<T>, dataset: &Dataset) -> Result<Vec<Vec<T>>> {
    let mut missing = Vec::new();
    let mut rows = Vec::with_capacity(dataset.len());
    for i in 0..dataset.len() {
        match eb_row(eb, dataset, i) {
            Some(x) => rows.push(x),
            None => missing.push(dataset.records[i].school_id.clone()),
        }
    }
    if missing.is_empty() {
        Ok(rows)
    } else {
        Err(Error::data(format!(
            "EB predictions missing for score cells at schools: {}",
            missing.join(", ")
        )))
    }
}

/// Regression calibration: logistic regression of treatment on EB
/// predictions of true scores and covariates. Scores every school,
/// including those with withheld averages.
pub fn ps_rc<T: Real>(dataset: &Dataset, eb: &EbPredictions<T>) -> Result<PsFit<T>> {
    let xhat = eb_rows(eb, dataset)?;
    let rows: Vec<Vec<T>> = xhat
        .iter()
        .zip(&dataset.records)
        .map(|(x, r)| design_row(x, &r.covariates))
        .collect();
    let fit = fit_logistic(&rows, &dataset.treatment())?;
    let parts = from_logistic(dataset, &fit, dataset.len());
    Ok(scored_by_logit(PsKind::Rc, &rows, parts, &fit.coef))
}

/// Marginal-likelihood propensity scores. Coefficients come from the
/// obtained-score logistic fit on schools with no withheld cells; every
/// school is then scored with the normal-mixture approximation at its EB
/// predictions and measurement-error variances.
pub fn ps_ml<T: Real>(
    dataset: &Dataset,
    eb: &EbPredictions<T>,
    sigma: &MeasurementModel,
) -> Result<PsFit<T>> {
    let treat = dataset.treatment();
    let mut rows = Vec::new();
    let mut y = Vec::new();
    for (i, rec) in dataset.records.iter().enumerate() {
        if let Some(w) = complete_scores::<T>(dataset, i) {
            rows.push(design_row(&w, &rec.covariates));
            y.push(treat[i]);
        }
    }
    if rows.is_empty() {
        return Err(Error::data("ML PS needs at least one school with all scores observed"));
    }
    let fit = fit_logistic(&rows, &y)?;
    let coef = fit.coef.clone();
    let (beta0, beta_w, beta_z, info) = from_logistic(dataset, &fit, rows.len());
    score_ml(dataset, eb, sigma, beta0, beta_w, beta_z, info, &coef)
}

#[allow(clippy::too_many_arguments)]
fn score_ml<T: Real>(
    dataset: &Dataset,
    eb: &EbPredictions<T>,
    sigma: &MeasurementModel,
    beta0: T,
    beta_w: Vec<T>,
    beta_z: Vec<T>,
    info: FitInfo<T>,
    coef: &[T],
) -> Result<PsFit<T>> {
    let xhat = eb_rows(eb, dataset)?;
    let k = dataset.cell_keys.len();
    let mut prob = Vec::with_capacity(dataset.len());
    let mut logit = Vec::with_capacity(dataset.len());
    for (i, rec) in dataset.records.iter().enumerate() {
        let ev: Vec<Option<T>> = (0..k).map(|c| sigma.error_variance(i, c).map(T::lit)).collect();
        let z: Vec<T> = rec.covariates.iter().map(|&v| T::lit(v)).collect();
        let (eta, v) = mixture::ml_linear_parts(coef, &xhat[i], &ev, &z)
            .map_err(|e| Error::data(format!("school {}: {e}", rec.school_id)))?;
        let (p, q) = mixture::mixture_prob_pair(eta, v);
        let p = clamp_prob(p);
        let q = q.max(T::min_positive_value());
        prob.push(p);
        logit.push(p.ln() - q.ln());
    }
    Ok(PsFit { kind: PsKind::Ml, beta0, beta_w, beta_z, prob, logit, info })
}

/// Scores every school with the marginal approximation using coefficients
/// fitted elsewhere (e.g. on a complete-data file).
pub fn ps_ml_with_coefficients<T: Real>(
    dataset: &Dataset,
    eb: &EbPredictions<T>,
    sigma: &MeasurementModel,
    coef: &[T],
) -> Result<PsFit<T>> {
    let k = dataset.cell_keys.len();
    if coef.len() != 1 + k + dataset.n_covariates() {
        return Err(Error::data("coefficient vector does not match dataset layout"));
    }
    let info = FitInfo { deviance: T::nan(), iterations: 0, converged: true, separation: false, n_fit: 0 };
    score_ml(dataset, eb, sigma, coef[0], coef[1..=k].to_vec(), coef[k + 1..].to_vec(), info, coef)
}
