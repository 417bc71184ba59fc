//! Aggregate school-level data model.
//!
//! A [`Dataset`] holds one [`SchoolRecord`] per school. Each record carries
//! error-free covariates and a list of [`SubgroupCell`]s, one per
//! (subgroup, assessment) pair with test-takers. The ordered list of cell
//! keys fixed at construction defines every vector layout downstream
//! (score blocks in propensity models, balance tables, exports).

use std::collections::HashSet;
use std::fmt;

/// Identifies one (subgroup, assessment) cell of the score layout.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellKey {
    pub subgroup: String,
    pub assessment: String,
}

impl CellKey {
    pub fn new(subgroup: impl Into<String>, assessment: impl Into<String>) -> Self {
        CellKey { subgroup: subgroup.into(), assessment: assessment.into() }
    }
}

impl fmt::Display for CellKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}_{}", self.subgroup, self.assessment)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubgroupCell {
    pub subgroup: String,
    pub assessment: String,
    /// Number of test-takers.
    pub size: u32,
    /// Obtained average score; `None` when the agency withheld it.
    pub obtained_avg: Option<f64>,
    /// Per-student conditional standard error of measurement.
    pub csem: Option<f64>,
    /// Post-intervention average score.
    pub outcome_avg: Option<f64>,
}

impl SubgroupCell {
    pub fn key(&self) -> CellKey {
        CellKey::new(self.subgroup.clone(), self.assessment.clone())
    }

    pub fn matches(&self, key: &CellKey) -> bool {
        self.subgroup == key.subgroup && self.assessment == key.assessment
    }

    pub fn is_withheld(&self) -> bool {
        self.obtained_avg.is_none()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SchoolRecord {
    pub school_id: String,
    /// 1 = intervention, 0 = control. Stored unconstrained so that
    /// [`validate`] can report bad input instead of losing it at parse time.
    pub treatment: u8,
    pub covariates: Vec<f64>,
    pub cells: Vec<SubgroupCell>,
}

impl SchoolRecord {
    pub fn is_treated(&self) -> bool {
        self.treatment == 1
    }

    pub fn cell(&self, key: &CellKey) -> Option<&SubgroupCell> {
        self.cells.iter().find(|c| c.matches(key))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub records: Vec<SchoolRecord>,
    pub covariate_names: Vec<String>,
    pub subgroup_keys: Vec<String>,
    pub assessment_keys: Vec<String>,
    /// Ordered cell layout.
    pub cell_keys: Vec<CellKey>,
}

impl Dataset {
    /// Builds a dataset; subgroup and assessment key lists are taken in
    /// first-appearance order of `cell_keys`.
    pub fn new(
        records: Vec<SchoolRecord>,
        covariate_names: Vec<String>,
        cell_keys: Vec<CellKey>,
    ) -> Self {
        let mut subgroup_keys: Vec<String> = Vec::new();
        let mut assessment_keys: Vec<String> = Vec::new();
        for k in &cell_keys {
            if !subgroup_keys.contains(&k.subgroup) {
                subgroup_keys.push(k.subgroup.clone());
            }
            if !assessment_keys.contains(&k.assessment) {
                assessment_keys.push(k.assessment.clone());
            }
        }
        Dataset { records, covariate_names, subgroup_keys, assessment_keys, cell_keys }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn n_treated(&self) -> usize {
        self.records.iter().filter(|r| r.is_treated()).count()
    }

    pub fn treatment(&self) -> Vec<bool> {
        self.records.iter().map(SchoolRecord::is_treated).collect()
    }

    pub fn cell_index(&self, key: &CellKey) -> Option<usize> {
        self.cell_keys.iter().position(|k| k == key)
    }

    /// Obtained averages of record `i` in layout order (`None` = withheld or
    /// no cell).
    pub fn obtained_vector(&self, i: usize) -> Vec<Option<f64>> {
        let rec = &self.records[i];
        self.cell_keys
            .iter()
            .map(|k| rec.cell(k).and_then(|c| c.obtained_avg))
            .collect()
    }

    /// Keys of the cells that belong to `assessment`, in layout order.
    pub fn cells_for_assessment(&self, assessment: &str) -> Vec<usize> {
        (0..self.cell_keys.len())
            .filter(|&k| self.cell_keys[k].assessment == assessment)
            .collect()
    }
}

/// One broken invariant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    /// School id, or `None` for dataset-level rules.
    pub record: Option<String>,
    pub field: String,
    pub rule: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.record {
            Some(r) => write!(f, "record {r}: {} violates {}", self.field, self.rule),
            None => write!(f, "dataset: {} violates {}", self.field, self.rule),
        }
    }
}

/// Checks every type invariant; an empty list means the dataset is valid.
pub fn validate(dataset: &Dataset) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |record: Option<&str>, field: String, rule: &str| {
        out.push(Violation {
            record: record.map(str::to_owned),
            field,
            rule: rule.to_owned(),
        })
    };

    let layout: HashSet<&CellKey> = dataset.cell_keys.iter().collect();
    if layout.len() != dataset.cell_keys.len() {
        push(None, "cell_keys".into(), "keys unique");
    }

    let mut ids = HashSet::new();
    for rec in &dataset.records {
        let id = Some(rec.school_id.as_str());
        if !ids.insert(rec.school_id.as_str()) {
            push(id, "school_id".into(), "school_id unique");
        }
        if rec.treatment > 1 {
            push(id, "treatment".into(), "treatment in {0,1}");
        }
        if rec.covariates.len() != dataset.covariate_names.len() {
            push(id, "covariates".into(), "covariate length equals dataset dimension");
        }
        if rec.covariates.iter().any(|z| !z.is_finite()) {
            push(id, "covariates".into(), "covariates finite");
        }
        let mut seen = HashSet::new();
        for cell in &rec.cells {
            let key = cell.key();
            let field = |name: &str| format!("{name}[{key}]");
            if !seen.insert(key.clone()) {
                push(id, field("cell"), "subgroup/assessment keys unique");
            }
            if !layout.contains(&key) {
                push(id, field("cell"), "cell key in dataset layout");
            }
            if cell.size < 1 {
                push(id, field("size"), "size >= 1");
            }
            if let Some(s) = cell.csem {
                if !(s > 0.0) || !s.is_finite() {
                    push(id, field("csem"), "csem > 0");
                }
            }
            if cell.obtained_avg.is_some_and(|w| !w.is_finite()) {
                push(id, field("obtained_avg"), "obtained_avg finite");
            }
            if cell.outcome_avg.is_some_and(|y| !y.is_finite()) {
                push(id, field("outcome_avg"), "outcome_avg finite");
            }
        }
    }
    out
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn cell(s: &str, a: &str, m: u32, w: Option<f64>) -> SubgroupCell {
        SubgroupCell {
            subgroup: s.into(),
            assessment: a.into(),
            size: m,
            obtained_avg: w,
            csem: Some(250.0),
            outcome_avg: None,
        }
    }

    fn small() -> Dataset {
        let keys = vec![CellKey::new("a", "g5"), CellKey::new("b", "g5")];
        let recs = (0..4)
            .map(|i| SchoolRecord {
                school_id: format!("s{i}"),
                treatment: (i % 2) as u8,
                covariates: vec![i as f64],
                cells: vec![
                    cell("a", "g5", 10, Some(1500.0 + i as f64)),
                    cell("b", "g5", 3, if i == 2 { None } else { Some(1480.0) }),
                ],
            })
            .collect();
        Dataset::new(recs, vec!["x".into()], keys)
    }

    #[test]
    fn valid_dataset_has_no_violations() {
        let d = small();
        assert!(validate(&d).is_empty());
        assert_eq!(d.subgroup_keys, vec!["a", "b"]);
        assert_eq!(d.assessment_keys, vec!["g5"]);
    }

    #[test]
    fn bad_treatment_named() {
        let mut d = small();
        d.records[1].treatment = 2;
        let v = validate(&d);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].record.as_deref(), Some("s1"));
        assert_eq!(v[0].field, "treatment");
    }

    #[test]
    fn zero_size_cell_flagged() {
        let mut d = small();
        d.records[0].cells[1].size = 0;
        let v = validate(&d);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].rule, "size >= 1");
    }

    #[test]
    fn duplicate_cell_and_bad_csem() {
        let mut d = small();
        let dup = d.records[3].cells[0].clone();
        d.records[3].cells.push(dup);
        d.records[0].cells[0].csem = Some(0.0);
        d.records[2].covariates.push(1.0);
        let rules: Vec<_> = validate(&d).into_iter().map(|v| v.rule).collect();
        assert!(rules.contains(&"subgroup/assessment keys unique".to_string()));
        assert!(rules.contains(&"csem > 0".to_string()));
        assert!(rules.contains(&"covariate length equals dataset dimension".to_string()));
    }

    #[test]
    fn layout_vector_is_stable() {
        let d = small();
        let a = d.obtained_vector(2);
        assert_eq!(a, vec![Some(1502.0), None]);
        assert_eq!(a, d.obtained_vector(2));
    }
}
