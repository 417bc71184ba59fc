//! Estimators of the average effect of treatment on the treated.

use std::fmt;

use crate::data::{CellKey, Dataset};
use crate::error::{Error, Result};
use crate::matching::MatchResult;
use crate::ps::{PsFit, PsKind};
use crate::scalar::Real;
use crate::spline::{default_knot_count, fit_penalized_spline};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Estimator {
    /// Stratum-weighted difference in a matched sample.
    Matching,
    /// Normalized odds weighting.
    Weighting,
    /// Odds weighting divided by the treated count.
    WeightingUnnormalized,
    Pencomp,
    /// Controls weighted by the marginal odds of treatment, no matching.
    MarginalOdds,
}

impl Estimator {
    pub fn as_str(self) -> &'static str {
        match self {
            Estimator::Matching => "matching",
            Estimator::Weighting => "weighting",
            Estimator::WeightingUnnormalized => "weighting_unnormalized",
            Estimator::Pencomp => "pencomp",
            Estimator::MarginalOdds => "marginal_odds",
        }
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EffectEstimate {
    pub estimator: Estimator,
    pub ps_kind: Option<PsKind>,
    pub outcome: CellKey,
    pub point: f64,
    pub n_treated: usize,
    pub n_control: usize,
}

fn outcomes(dataset: &Dataset, key: &CellKey) -> Vec<Option<f64>> {
    dataset
        .records
        .iter()
        .map(|r| r.cell(key).and_then(|c| c.outcome_avg))
        .collect()
}

fn check_key(dataset: &Dataset, key: &CellKey) -> Result<()> {
    if dataset.cell_index(key).is_none() {
        return Err(Error::data(format!("unknown outcome cell {key}")));
    }
    Ok(())
}

/// Weighted treated mean minus odds-weighted control mean in a matched
/// sample. Sets without an observed treated and an observed control
/// outcome are dropped and within-set weights recomputed.
pub fn matched_difference(result: &MatchResult, dataset: &Dataset, outcome: &CellKey) -> Result<EffectEstimate> {
    check_key(dataset, outcome)?;
    let y = outcomes(dataset, outcome);
    let available: Vec<bool> = y.iter().map(Option::is_some).collect();
    let w = result.weights_available(&available);
    let treat = dataset.treatment();
    let (mut st, mut nt, mut sc, mut wc, mut nc) = (0.0, 0usize, 0.0, 0.0, 0usize);
    for i in 0..dataset.len() {
        if let (Some(wi), Some(yi)) = (w[i], y[i]) {
            if treat[i] {
                st += yi;
                nt += 1;
            } else {
                sc += wi * yi;
                wc += wi;
                nc += 1;
            }
        }
    }
    if nt == 0 || nc == 0 {
        return Err(Error::data(format!("no matched set has outcomes for {outcome} in both groups")));
    }
    Ok(EffectEstimate {
        estimator: Estimator::Matching,
        ps_kind: None,
        outcome: outcome.clone(),
        point: st / nt as f64 - sc / wc,
        n_treated: nt,
        n_control: nc,
    })
}

/// Odds weighting: controls weighted by e/(1-e). The normalized form
/// divides by the total control weight; the unnormalized form by the
/// number of treated.
pub fn odds_weighting<T: Real>(
    ps: &PsFit<T>,
    dataset: &Dataset,
    outcome: &CellKey,
    normalized: bool,
) -> Result<EffectEstimate> {
    check_key(dataset, outcome)?;
    let y = outcomes(dataset, outcome);
    let treat = dataset.treatment();
    let (mut st, mut nt, mut sc, mut wc, mut nc) = (0.0, 0usize, 0.0, 0.0, 0usize);
    for i in 0..dataset.len() {
        let Some(yi) = y[i] else { continue };
        if treat[i] {
            st += yi;
            nt += 1;
        } else {
            let p = ps.prob[i].as_f64();
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::numerical(format!(
                    "propensity score outside (0,1) for school {}",
                    dataset.records[i].school_id
                )));
            }
            let odds = p / (1.0 - p);
            sc += odds * yi;
            wc += odds;
            nc += 1;
        }
    }
    if nt == 0 || nc == 0 {
        return Err(Error::data(format!("outcome {outcome} missing for every treated or every control school")));
    }
    if !(wc > 0.0) {
        return Err(Error::numerical("control odds are all zero"));
    }
    let denom = if normalized { wc } else { nt as f64 };
    Ok(EffectEstimate {
        estimator: if normalized { Estimator::Weighting } else { Estimator::WeightingUnnormalized },
        ps_kind: Some(ps.kind),
        outcome: outcome.clone(),
        point: st / nt as f64 - sc / denom,
        n_treated: nt,
        n_control: nc,
    })
}

/// Difference in means with controls weighted by the marginal odds of
/// treatment; the constant weight cancels in the normalized mean.
pub fn marginal_odds_difference(dataset: &Dataset, outcome: &CellKey) -> Result<EffectEstimate> {
    check_key(dataset, outcome)?;
    let y = outcomes(dataset, outcome);
    let treat = dataset.treatment();
    let (mut st, mut nt, mut sc, mut nc) = (0.0, 0usize, 0.0, 0usize);
    for (yi, &t) in y.iter().zip(&treat) {
        if let Some(v) = *yi {
            if t {
                st += v;
                nt += 1;
            } else {
                sc += v;
                nc += 1;
            }
        }
    }
    if nt == 0 || nc == 0 {
        return Err(Error::data(format!("outcome {outcome} missing for every treated or every control school")));
    }
    Ok(EffectEstimate {
        estimator: Estimator::MarginalOdds,
        ps_kind: None,
        outcome: outcome.clone(),
        point: st / nt as f64 - sc / nc as f64,
        n_treated: nt,
        n_control: nc,
    })
}

pub const PENCOMP_MIN_CONTROLS: usize = 10;

/// PENCOMP point estimate: a penalized spline in the PS logit fitted to
/// control outcomes imputes each treated school's untreated outcome.
pub fn pencomp<T: Real>(ps: &PsFit<T>, dataset: &Dataset, outcome: &CellKey) -> Result<EffectEstimate> {
    pencomp_with(ps, dataset, outcome, None, None)
}

/// PENCOMP with explicit knot count and/or penalty.
pub fn pencomp_with<T: Real>(
    ps: &PsFit<T>,
    dataset: &Dataset,
    outcome: &CellKey,
    n_knots: Option<usize>,
    lambda: Option<T>,
) -> Result<EffectEstimate> {
    check_key(dataset, outcome)?;
    let y = outcomes(dataset, outcome);
    let treat = dataset.treatment();
    let (mut xc, mut yc) = (Vec::new(), Vec::new());
    for i in 0..dataset.len() {
        if let (false, Some(v)) = (treat[i], y[i]) {
            xc.push(ps.logit[i]);
            yc.push(T::lit(v));
        }
    }
    if xc.len() < PENCOMP_MIN_CONTROLS {
        return Err(Error::data(format!(
            "PENCOMP needs at least {PENCOMP_MIN_CONTROLS} controls with outcome {outcome}; found {}",
            xc.len()
        )));
    }
    let k = n_knots.unwrap_or_else(|| default_knot_count(xc.len())).min(xc.len() - 2);
    let spline = fit_penalized_spline(&xc, &yc, k, lambda)?;
    let (mut s, mut nt) = (0.0, 0usize);
    for i in 0..dataset.len() {
        if let (true, Some(v)) = (treat[i], y[i]) {
            s += v - spline.predict(ps.logit[i]).as_f64();
            nt += 1;
        }
    }
    if nt == 0 {
        return Err(Error::data(format!("no treated school has outcome {outcome}")));
    }
    Ok(EffectEstimate {
        estimator: Estimator::Pencomp,
        ps_kind: Some(ps.kind),
        outcome: outcome.clone(),
        point: s / nt as f64,
        n_treated: nt,
        n_control: xc.len(),
    })
}

/// Estimates as CSV: `estimator,ps_kind,subgroup,assessment,point,n_treated,n_control`.
pub fn write_estimates<W: std::io::Write>(out: W, estimates: &[EffectEstimate]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(["estimator", "ps_kind", "subgroup", "assessment", "point", "n_treated", "n_control"])?;
    for e in estimates {
        wtr.write_record([
            e.estimator.as_str(),
            e.ps_kind.map_or("none", PsKind::as_str),
            &e.outcome.subgroup,
            &e.outcome.assessment,
            &e.point.to_string(),
            &e.n_treated.to_string(),
            &e.n_control.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}
