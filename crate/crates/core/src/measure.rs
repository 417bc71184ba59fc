//! Measurement-error variances of group-average scores.
//!
//! The error variance of an obtained subgroup average is the squared
//! per-student CSEM divided by the number of test-takers. Subgroups are
//! mutually exclusive, so the per-school covariance is diagonal.

use std::collections::BTreeMap;

use crate::data::{CellKey, Dataset};
use crate::error::{Error, Result};

/// Piecewise-linear CSEM curve for one assessment.
#[derive(Debug, Clone, PartialEq)]
pub struct CsemTable {
    knots: Vec<(f64, f64)>,
}

impl CsemTable {
    /// Knots must be strictly increasing in score with positive CSEMs.
    pub fn new(knots: Vec<(f64, f64)>) -> Result<Self> {
        if knots.is_empty() {
            return Err(Error::data("CSEM table has no knots"));
        }
        for w in knots.windows(2) {
            if !(w[1].0 > w[0].0) {
                return Err(Error::data(format!(
                    "CSEM table scores not strictly increasing at {}",
                    w[1].0
                )));
            }
        }
        if let Some(&(s, c)) = knots.iter().find(|&&(s, c)| !(c > 0.0) || !c.is_finite() || !s.is_finite()) {
            return Err(Error::data(format!("CSEM table has invalid csem {c} at score {s}")));
        }
        Ok(CsemTable { knots })
    }

    /// Single-knot table, i.e. a CSEM that does not depend on the score.
    pub fn constant(csem: f64) -> Result<Self> {
        Self::new(vec![(0.0, csem)])
    }

    pub fn knots(&self) -> &[(f64, f64)] {
        &self.knots
    }
}

/// Linear interpolation between knots, flat beyond the end knots.
pub fn lookup_csem(table: &CsemTable, score: f64) -> f64 {
    let k = &table.knots;
    let (first, last) = (k[0], k[k.len() - 1]);
    if score <= first.0 {
        return first.1;
    }
    if score >= last.0 {
        return last.1;
    }
    // first knot with score > x; exists because x < last.0
    let hi = k.partition_point(|&(s, _)| s <= score);
    let (s0, c0) = k[hi - 1];
    let (s1, c1) = k[hi];
    c0 + (c1 - c0) * (score - s0) / (s1 - s0)
}

/// Where per-student CSEMs come from.
#[derive(Debug, Clone, Copy)]
pub enum CsemSource<'a> {
    /// The `csem` field stored on each cell.
    PerCell,
    /// Per-assessment tables evaluated at a score for each
    /// `[record][cell layout index]` (e.g. obtained averages or EB predictions).
    Table {
        tables: &'a BTreeMap<String, CsemTable>,
        scores: &'a [Vec<Option<f64>>],
    },
}

/// Diagonal measurement-error variances `csem^2 / m` per school and cell.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementModel {
    /// `[record][cell layout index]`; `None` where no CSEM was available.
    variances: Vec<Vec<Option<f64>>>,
}

impl MeasurementModel {
    pub fn from_variances(variances: Vec<Vec<Option<f64>>>) -> Self {
        MeasurementModel { variances }
    }

    pub fn error_variance(&self, record: usize, cell: usize) -> Option<f64> {
        self.variances.get(record)?.get(cell).copied().flatten()
    }

    pub fn n_records(&self) -> usize {
        self.variances.len()
    }

    /// Overlays the entries present in `other`.
    pub fn merge(&mut self, other: &MeasurementModel) {
        for (d, s) in self.variances.iter_mut().zip(&other.variances) {
            for (dv, sv) in d.iter_mut().zip(s) {
                if sv.is_some() {
                    *dv = *sv;
                }
            }
        }
    }

    /// Model with no entries, to be filled by [`MeasurementModel::merge`].
    pub fn empty_like(dataset: &Dataset) -> Self {
        MeasurementModel { variances: vec![vec![None; dataset.cell_keys.len()]; dataset.len()] }
    }

    /// Zero-error model (all variances zero); useful for limiting cases.
    pub fn zero_like(dataset: &Dataset) -> Self {
        MeasurementModel {
            variances: dataset
                .records
                .iter()
                .map(|r| {
                    dataset
                        .cell_keys
                        .iter()
                        .map(|k| r.cell(k).map(|_| 0.0))
                        .collect()
                })
                .collect(),
        }
    }
}

pub fn build_sigma(dataset: &Dataset, source: CsemSource<'_>) -> Result<MeasurementModel> {
    build_sigma_where(dataset, source, |_| true)
}

/// As [`build_sigma`], restricted to cells whose key satisfies `include`;
/// other cells get no entry.
pub fn build_sigma_where<F: Fn(&CellKey) -> bool>(
    dataset: &Dataset,
    source: CsemSource<'_>,
    include: F,
) -> Result<MeasurementModel> {
    let mut variances = Vec::with_capacity(dataset.len());
    for (i, rec) in dataset.records.iter().enumerate() {
        let mut row = Vec::with_capacity(dataset.cell_keys.len());
        for (k, key) in dataset.cell_keys.iter().enumerate() {
            let Some(cell) = rec.cell(key).filter(|_| include(key)) else {
                row.push(None);
                continue;
            };
            if cell.size == 0 {
                return Err(Error::data(format!(
                    "school {} cell {key}: size must be >= 1",
                    rec.school_id
                )));
            }
            let csem = match source {
                CsemSource::PerCell => cell.csem,
                CsemSource::Table { tables, scores } => {
                    let score = scores.get(i).and_then(|r| r.get(k)).copied().flatten();
                    match (tables.get(&key.assessment), score) {
                        (Some(t), Some(s)) => Some(lookup_csem(t, s)),
                        _ => None,
                    }
                }
            };
            match csem {
                Some(s) => row.push(Some(s * s / f64::from(cell.size))),
                None if cell.is_withheld() => row.push(None),
                None => {
                    return Err(Error::data(format!(
                        "no CSEM available for school {} cell {key}",
                        rec.school_id
                    )))
                }
            }
        }
        variances.push(row);
    }
    Ok(MeasurementModel { variances })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::tests::cell;
    use crate::data::SchoolRecord;

    fn one_school(m: u32, csem: Option<f64>, w: Option<f64>) -> Dataset {
        let mut c = cell("a", "g5", m, w);
        c.csem = csem;
        Dataset::new(
            vec![SchoolRecord { school_id: "s".into(), treatment: 0, covariates: vec![], cells: vec![c] }],
            vec![],
            vec![CellKey::new("a", "g5")],
        )
    }

    #[test]
    fn variance_is_csem_squared_over_count() {
        let v = |m| {
            build_sigma(&one_school(m, Some(250.0), Some(1.0)), CsemSource::PerCell)
                .unwrap()
                .error_variance(0, 0)
                .unwrap()
        };
        assert!((v(44) - 62500.0 / 44.0).abs() < 1e-9);
        assert!((v(44).sqrt() - 37.69).abs() < 0.01);
        assert_eq!(v(1), 62500.0);
        assert!((v(6) - 10416.666666666666).abs() < 1e-9);
        assert!((v(6).sqrt() - 102.06).abs() < 0.01);
        // strictly decreasing in m
        assert!((1..200).all(|m| v(m + 1) < v(m)));
    }

    #[test]
    fn missing_csem_names_cell() {
        let err = build_sigma(&one_school(5, None, Some(1.0)), CsemSource::PerCell).unwrap_err();
        assert!(err.to_string().contains("a_g5"), "{err}");
        // withheld without csem is fine (no entry)
        let m = build_sigma(&one_school(5, None, None), CsemSource::PerCell).unwrap();
        assert_eq!(m.error_variance(0, 0), None);
    }

    #[test]
    fn table_source_covers_withheld_cells_with_scores() {
        let d = one_school(4, None, None);
        let mut tables = BTreeMap::new();
        tables.insert("g5".to_string(), CsemTable::new(vec![(1400.0, 80.0), (1500.0, 100.0)]).unwrap());
        let scores = vec![vec![Some(1450.0)]];
        let m = build_sigma(&d, CsemSource::Table { tables: &tables, scores: &scores }).unwrap();
        assert!((m.error_variance(0, 0).unwrap() - 8100.0 / 4.0).abs() < 1e-12);
    }

    #[test]
    fn lookup_interpolates_and_extrapolates_flat() {
        let t = CsemTable::new(vec![(1400.0, 80.0), (1500.0, 100.0)]).unwrap();
        assert_eq!(lookup_csem(&t, 1450.0), 90.0);
        assert_eq!(lookup_csem(&t, 1300.0), 80.0);
        assert_eq!(lookup_csem(&t, 1900.0), 100.0);
        assert_eq!(lookup_csem(&t, 1400.0), 80.0);
        let one = CsemTable::new(vec![(1500.0, 95.0)]).unwrap();
        assert_eq!(lookup_csem(&one, -3.0), 95.0);
        assert_eq!(lookup_csem(&one, 1e9), 95.0);
    }

    #[test]
    fn rejects_bad_tables() {
        assert!(CsemTable::new(vec![]).is_err());
        assert!(CsemTable::new(vec![(1.0, 2.0), (1.0, 3.0)]).is_err());
        assert!(CsemTable::new(vec![(1.0, 0.0)]).is_err());
    }

    #[test]
    fn scaling_csem_scales_variance_quadratically() {
        let base = build_sigma(&one_school(7, Some(30.0), Some(0.0)), CsemSource::PerCell).unwrap();
        let scaled = build_sigma(&one_school(7, Some(90.0), Some(0.0)), CsemSource::PerCell).unwrap();
        let r = scaled.error_variance(0, 0).unwrap() / base.error_variance(0, 0).unwrap();
        assert!((r - 9.0).abs() < 1e-12);
    }
}
