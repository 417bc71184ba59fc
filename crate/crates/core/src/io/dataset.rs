//! Wide CSV layout for school-level data.
//!
//! Columns: `school_id`, `treatment`, `z_<name>` per covariate, then per
//! cell `m_<s>_<a>`, `w_<s>_<a>`, and optionally `csem_<s>_<a>` and
//! `y_<s>_<a>`. The assessment key is the text after the last underscore,
//! so subgroup keys may contain underscores but assessment keys may not.
//! An empty `m_` field means the school has no such cell; an empty `w_`
//! field with a size present means the average was withheld.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use crate::data::{validate, CellKey, Dataset, SchoolRecord, SubgroupCell};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Field {
    Size,
    Obtained,
    Csem,
    Outcome,
}

const PREFIXES: [(&str, Field); 4] =
    [("m_", Field::Size), ("w_", Field::Obtained), ("csem_", Field::Csem), ("y_", Field::Outcome)];

fn split_cell(name: &str) -> Option<CellKey> {
    let (s, a) = name.rsplit_once('_')?;
    (!s.is_empty() && !a.is_empty()).then(|| CellKey::new(s, a))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::data(format!("cannot open {}: {e}", path.display())))?;
    read_dataset(file)
}

pub fn read_dataset<R: Read>(input: R) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(input);
    let header = rdr.headers()?.clone();
    let col = |name: &str| header.iter().position(|h| h == name);
    let id_col = col("school_id").ok_or_else(|| Error::data("header lacks a school_id column"))?;
    let t_col = col("treatment").ok_or_else(|| Error::data("header lacks a treatment column"))?;

    let mut cov_cols = Vec::new();
    let mut cov_names = Vec::new();
    let mut cell_keys: Vec<CellKey> = Vec::new();
    let mut cell_cols: HashMap<(CellKey, u8), usize> = HashMap::new();
    for (j, h) in header.iter().enumerate() {
        if j == id_col || j == t_col {
            continue;
        }
        if let Some(name) = h.strip_prefix("z_") {
            cov_cols.push(j);
            cov_names.push(name.to_string());
            continue;
        }
        let parsed = PREFIXES.iter().find_map(|(p, f)| h.strip_prefix(p).map(|rest| (*f, rest)));
        let Some((field, rest)) = parsed else {
            return Err(Error::data(format!("unrecognized column '{h}'")));
        };
        let key = split_cell(rest).ok_or_else(|| Error::data(format!("column '{h}' does not name <subgroup>_<assessment>")))?;
        if !cell_keys.contains(&key) {
            cell_keys.push(key.clone());
        }
        if cell_cols.insert((key, field as u8), j).is_some() {
            return Err(Error::data(format!("duplicate column '{h}'")));
        }
    }
    for key in &cell_keys {
        for (p, f) in [("m_", Field::Size), ("w_", Field::Obtained)] {
            if !cell_cols.contains_key(&(key.clone(), f as u8)) {
                return Err(Error::data(format!("header lacks column {p}{key}")));
            }
        }
    }

    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        let bad = |what: String| Error::data(format!("line {line}: {what}"));
        if row.len() != header.len() {
            return Err(bad(format!("expected {} fields, found {}", header.len(), row.len())));
        }
        let school_id = row[id_col].to_string();
        if school_id.is_empty() {
            return Err(bad("empty school_id".into()));
        }
        if !seen.insert(school_id.clone()) {
            return Err(bad(format!("duplicate school_id '{school_id}'")));
        }
        let treatment: u8 = row[t_col]
            .parse()
            .map_err(|_| bad(format!("treatment '{}' is not 0 or 1", &row[t_col])))?;
        let num = |j: usize, what: &str| -> Result<Option<f64>> {
            let s = &row[j];
            if s.is_empty() {
                return Ok(None);
            }
            s.parse::<f64>()
                .map(Some)
                .map_err(|_| bad(format!("{what} '{s}' is not a number")))
        };
        let covariates = cov_cols
            .iter()
            .zip(&cov_names)
            .map(|(&j, n)| num(j, &format!("z_{n}"))?.ok_or_else(|| bad(format!("missing covariate z_{n}"))))
            .collect::<Result<Vec<f64>>>()?;
        let mut cells = Vec::new();
        for key in &cell_keys {
            let get = |f: Field| cell_cols.get(&(key.clone(), f as u8)).copied();
            let m_col = get(Field::Size).expect("checked above");
            let m_raw = &row[m_col];
            if m_raw.is_empty() {
                continue;
            }
            let size: u32 = m_raw.parse().map_err(|_| bad(format!("m_{key} '{m_raw}' is not a count")))?;
            let opt = |f: Field, p: &str| get(f).map_or(Ok(None), |j| num(j, &format!("{p}{key}")));
            cells.push(SubgroupCell {
                subgroup: key.subgroup.clone(),
                assessment: key.assessment.clone(),
                size,
                obtained_avg: opt(Field::Obtained, "w_")?,
                csem: opt(Field::Csem, "csem_")?,
                outcome_avg: opt(Field::Outcome, "y_")?,
            });
        }
        records.push(SchoolRecord { school_id, treatment, covariates, cells });
    }
    let dataset = Dataset::new(records, cov_names, cell_keys);
    let violations = validate(&dataset);
    if let Some(v) = violations.first() {
        let more = if violations.len() > 1 { format!(" (and {} more)", violations.len() - 1) } else { String::new() };
        return Err(Error::data(format!("{v}{more}")));
    }
    Ok(dataset)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes the wide layout. `csem_` and `y_` columns are emitted only when
/// some school has a value for them.
pub fn write_dataset<W: Write>(out: W, dataset: &Dataset) -> Result<()> {
    let any = |f: &dyn Fn(&SubgroupCell) -> bool| dataset.records.iter().flat_map(|r| &r.cells).any(f);
    let has_csem = any(&|c| c.csem.is_some());
    let has_y = any(&|c| c.outcome_avg.is_some());
    let mut header = vec!["school_id".to_string(), "treatment".to_string()];
    header.extend(dataset.covariate_names.iter().map(|n| format!("z_{n}")));
    for k in &dataset.cell_keys {
        header.push(format!("m_{k}"));
        header.push(format!("w_{k}"));
        if has_csem {
            header.push(format!("csem_{k}"));
        }
        if has_y {
            header.push(format!("y_{k}"));
        }
    }
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(&header)?;
    for r in &dataset.records {
        let mut row = vec![r.school_id.clone(), r.treatment.to_string()];
        row.extend(r.covariates.iter().map(|v| v.to_string()));
        for k in &dataset.cell_keys {
            let c = r.cell(k);
            row.push(c.map(|c| c.size.to_string()).unwrap_or_default());
            row.push(fmt_opt(c.and_then(|c| c.obtained_avg)));
            if has_csem {
                row.push(fmt_opt(c.and_then(|c| c.csem)));
            }
            if has_y {
                row.push(fmt_opt(c.and_then(|c| c.outcome_avg)));
            }
        }
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn save_dataset(path: impl AsRef<Path>, dataset: &Dataset) -> Result<()> {
    write_dataset(File::create(path)?, dataset)
}
