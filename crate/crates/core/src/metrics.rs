//! Balance diagnostics and Monte Carlo performance summaries.

use std::fmt;

use crate::data::CellKey;
use crate::error::{Error, Result};
use crate::ps::PsKind;
use crate::scalar::Real;

/// Sample standard deviation (n - 1 divisor) of the pooled values.
pub fn pooled_sd<T: Real>(values: &[T]) -> Option<T> {
    if values.len() < 2 {
        return None;
    }
    let n = T::from_usize_(values.len());
    let mean = values.iter().copied().sum::<T>() / n;
    let ss: T = values.iter().map(|&v| (v - mean) * (v - mean)).sum();
    Some((ss / (n - T::one())).sqrt())
}

/// Weighted treated mean minus weighted control mean, divided by `sd`.
/// Records with weight `None` are outside the sample.
pub fn standardized_difference<T: Real>(values: &[T], treated: &[bool], weights: &[Option<T>], sd: T) -> Result<T> {
    if !(sd > T::zero()) {
        return Err(Error::numerical("pooling standard deviation is zero"));
    }
    let (mut st, mut wt, mut sc, mut wc) = (T::zero(), T::zero(), T::zero(), T::zero());
    for ((&v, &t), w) in values.iter().zip(treated).zip(weights) {
        let Some(w) = *w else { continue };
        if t {
            st += w * v;
            wt += w;
        } else {
            sc += w * v;
            wc += w;
        }
    }
    if !(wt > T::zero() && wc > T::zero()) {
        return Err(Error::data("standardized difference needs positive weight in both groups"));
    }
    Ok((st / wt - sc / wc) / sd)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Family {
    /// Latent true scores.
    True,
    /// Obtained scores.
    Obtained,
    /// Empirical-Bayes predictions.
    Predicted,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::True => "X",
            Family::Obtained => "W",
            Family::Predicted => "Xhat",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Sample {
    Unmatched,
    Matched(PsKind),
}

impl fmt::Display for Sample {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Sample::Unmatched => f.write_str("unmatched"),
            Sample::Matched(k) => write!(f, "matched-{k}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BalanceRow {
    pub family: Family,
    pub cell: CellKey,
    pub sample: Sample,
    pub d_s: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BalanceReport {
    pub rows: Vec<BalanceRow>,
}

impl BalanceReport {
    /// Adds one row per cell for `sample`. `values[i][k]` is record i's
    /// value in cell k; missing values drop the record for that cell, and
    /// `weights_for` supplies the sample weights given which records are
    /// available. The pooling SD is that of every available value.
    pub fn add<F>(
        &mut self,
        family: Family,
        cells: &[CellKey],
        values: &[Vec<Option<f64>>],
        treated: &[bool],
        sample: Sample,
        mut weights_for: F,
    ) -> Result<()>
    where
        F: FnMut(&[bool]) -> Vec<Option<f64>>,
    {
        for (k, cell) in cells.iter().enumerate() {
            let avail: Vec<bool> = values.iter().map(|r| r[k].is_some()).collect();
            let col: Vec<f64> = values.iter().map(|r| r[k].unwrap_or(0.0)).collect();
            let pooled: Vec<f64> = values.iter().filter_map(|r| r[k]).collect();
            let sd = pooled_sd(&pooled).ok_or_else(|| Error::data(format!("too few values for {cell}")))?;
            let w: Vec<Option<f64>> = weights_for(&avail)
                .into_iter()
                .zip(&avail)
                .map(|(w, &a)| if a { w } else { None })
                .collect();
            let d_s = standardized_difference(&col, treated, &w, sd)?;
            self.rows.push(BalanceRow { family, cell: cell.clone(), sample, d_s });
        }
        Ok(())
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(["family", "subgroup", "assessment", "sample", "d_s"])?;
        for r in &self.rows {
            wtr.write_record([
                r.family.as_str(),
                &r.cell.subgroup,
                &r.cell.assessment,
                &r.sample.to_string(),
                &r.d_s.to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Bias and RMSE of a set of estimates against a known target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Performance {
    pub bias: f64,
    pub rmse: f64,
    pub n: usize,
}

impl Performance {
    /// Empirical variance of the estimates (n divisor).
    pub fn variance(&self) -> f64 {
        (self.rmse * self.rmse - self.bias * self.bias).max(0.0)
    }
}

pub fn summarize_replications(estimates: &[f64], truth: f64) -> Performance {
    let n = estimates.len();
    if n == 0 {
        return Performance { bias: f64::NAN, rmse: f64::NAN, n: 0 };
    }
    let nf = n as f64;
    let bias = estimates.iter().map(|e| e - truth).sum::<f64>() / nf;
    let mse = estimates.iter().map(|e| (e - truth) * (e - truth)).sum::<f64>() / nf;
    Performance { bias, rmse: mse.sqrt(), n }
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_example() {
        let v = [2.0, 4.0, 0.0, 2.0];
        let t = [true, true, false, false];
        let sd = pooled_sd(&v).unwrap();
        assert!((sd - (8.0f64 / 3.0).sqrt()).abs() < 1e-15);
        let d = standardized_difference(&v, &t, &[Some(1.0); 4], sd).unwrap();
        assert!((d - 2.0 / sd).abs() < 1e-15);
    }

    #[test]
    fn zero_sd_and_empty_group_are_errors() {
        assert!(standardized_difference(&[1.0, 1.0], &[true, false], &[Some(1.0); 2], 0.0).is_err());
        assert!(standardized_difference(&[1.0, 2.0], &[true, false], &[Some(1.0), None], 1.0).is_err());
    }

    #[test]
    fn summaries() {
        let p = summarize_replications(&[5.5; 4], 5.5);
        assert_eq!((p.bias, p.rmse), (0.0, 0.0));
        let p = summarize_replications(&[6.5, 4.5], 5.5);
        assert!(p.bias.abs() < 1e-15 && (p.rmse - 1.0).abs() < 1e-15);
    }

    #[test]
    fn report_drops_missing_values() {
        let cells = vec![CellKey::new("a", "m")];
        let values = vec![vec![Some(2.0)], vec![Some(4.0)], vec![Some(0.0)], vec![None]];
        let mut rep = BalanceReport::default();
        rep.add(Family::Obtained, &cells, &values, &[true, true, false, false], Sample::Unmatched, |a| {
            a.iter().map(|_| Some(1.0)).collect()
        })
        .unwrap();
        assert!((rep.rows[0].d_s - 3.0 / 2.0).abs() < 1e-12);
    }
}
