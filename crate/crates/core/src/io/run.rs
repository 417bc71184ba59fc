use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::config::{hex, Mode, RunConfig};
use super::dataset::load_dataset;
use super::svg::{grouped_bars, BarGroup};
use super::tables::load_csem_table;
use crate::data::{CellKey, Dataset};
use crate::error::{Error, Result};
use crate::estimate::{marginal_odds_difference, matched_difference, odds_weighting, pencomp, write_estimates, EffectEstimate, Estimator};
use crate::hlm::{fit_all_assessments, fit_hlm_two_pass, EbPredictions, HlmFit};
use crate::matching::{effective_sample_size, full_match, write_matched_sets, MatchResult};
use crate::measure::{build_sigma, CsemSource, MeasurementModel};
use crate::metrics::{BalanceReport, Family, Sample};
use crate::ps::mixture::{audit_grid, logistic_normal_oracle, mixture_prob};
use crate::ps::{ps_ml, ps_naive, ps_rc, PsFit, PsKind};
use crate::sim::{run_study, size_laws, StudyOutput};

/// Files written by a run, relative to the output directory.
#[derive(Debug, Clone, Default)]
pub struct RunReport {
    pub output: PathBuf,
    pub artifacts: Vec<String>,
    pub warnings: Vec<String>,
}

struct Out {
    dir: PathBuf,
    files: BTreeMap<String, String>,
}

impl Out {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Out { dir: dir.to_path_buf(), files: BTreeMap::new() })
    }

    fn put(&mut self, name: &str, bytes: Vec<u8>) -> Result<()> {
        fs::write(self.dir.join(name), &bytes)?;
        self.files.insert(name.to_string(), hex(&Sha256::digest(&bytes)));
        Ok(())
    }

    fn csv<F: FnOnce(&mut Vec<u8>) -> Result<()>>(&mut self, name: &str, f: F) -> Result<()> {
        let mut buf = Vec::new();
        f(&mut buf)?;
        self.put(name, buf)
    }
}

/// Dataset plus measurement model and HLM predictions shared by the data modes.
pub struct Prepared {
    pub dataset: Dataset,
    pub sigma: MeasurementModel,
    pub hlm: Vec<HlmFit<f64>>,
    pub eb: EbPredictions<f64>,
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let path = cfg.data.as_ref().ok_or_else(|| Error::usage("no dataset given"))?;
    let dataset = load_dataset(path)?;
    if cfg.csem_tables.is_empty() {
        let sigma = build_sigma(&dataset, CsemSource::PerCell)?;
        let (hlm, eb) = fit_all_assessments(&dataset, &sigma)?;
        return Ok(Prepared { dataset, sigma, hlm, eb });
    }
    let missing: Vec<&String> = dataset.assessment_keys.iter().filter(|a| !cfg.csem_tables.contains_key(*a)).collect();
    if !missing.is_empty() {
        return Err(Error::usage(format!(
            "CSEM tables given for some assessments but not for: {}",
            missing.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
        )));
    }
    let mut sigma = MeasurementModel::empty_like(&dataset);
    let mut eb: Option<EbPredictions<f64>> = None;
    let mut hlm = Vec::new();
    for a in &dataset.assessment_keys {
        let table = load_csem_table(&cfg.csem_tables[a])?;
        let (fit, pred, s) = fit_hlm_two_pass::<f64>(&dataset, &table, a)?;
        sigma.merge(&s);
        match eb.as_mut() {
            Some(e) => e.merge(&pred),
            None => eb = Some(pred),
        }
        hlm.push(fit);
    }
    Ok(Prepared { dataset, sigma, hlm, eb: eb.expect("at least one assessment") })
}

pub fn fit_kind(kind: PsKind, p: &Prepared) -> Result<PsFit<f64>> {
    match kind {
        PsKind::Naive => ps_naive(&p.dataset),
        PsKind::Rc => ps_rc(&p.dataset, &p.eb),
        PsKind::Ml => ps_ml(&p.dataset, &p.eb, &p.sigma),
    }
}

fn fit_kinds(cfg: &RunConfig, p: &Prepared, report: &mut RunReport) -> Result<Vec<PsFit<f64>>> {
    let mut fits = Vec::new();
    for &k in &cfg.ps_kinds {
        let f = fit_kind(k, p)?;
        if f.info.separation {
            report.warnings.push(format!("{k} PS fit shows quasi-separation; scores near 0 or 1"));
        } else if !f.info.converged {
            report.warnings.push(format!("{k} PS fit did not converge"));
        }
        fits.push(f);
    }
    Ok(fits)
}

fn f(v: f64) -> String {
    v.to_string()
}

fn write_rows<W: std::io::Write>(out: W, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

fn write_fit_outputs(out: &mut Out, p: &Prepared, fits: &[PsFit<f64>]) -> Result<()> {
    let d = &p.dataset;
    let rows: Vec<Vec<String>> = p
        .hlm
        .iter()
        .map(|h| {
            vec![
                h.assessment.clone(),
                f(h.gamma0),
                h.gamma_z.iter().map(|g| g.to_string()).collect::<Vec<_>>().join(";"),
                f(h.tau1_sq),
                f(h.tau2_sq),
                f(h.objective),
                h.converged.to_string(),
                h.iterations.to_string(),
            ]
        })
        .collect();
    out.csv("hlm.csv", |b| {
        write_rows(b, &["assessment", "gamma0", "gamma_z", "tau1_sq", "tau2_sq", "reml_loglik", "converged", "iterations"], &rows)
    })?;
    let mut rows = Vec::new();
    for (i, r) in d.records.iter().enumerate() {
        for (k, key) in d.cell_keys.iter().enumerate() {
            if let Some(x) = p.eb.xhat[i][k] {
                rows.push(vec![
                    r.school_id.clone(),
                    key.subgroup.clone(),
                    key.assessment.clone(),
                    f(x),
                    p.eb.cond_var[i][k].map(f).unwrap_or_default(),
                    p.sigma.error_variance(i, k).map(f).unwrap_or_default(),
                ]);
            }
        }
    }
    out.csv("eb.csv", |b| write_rows(b, &["school_id", "subgroup", "assessment", "xhat", "cond_var", "error_var"], &rows))?;

    let mut rows = Vec::new();
    let mut coef_rows = Vec::new();
    for fit in fits {
        for (i, r) in d.records.iter().enumerate() {
            rows.push(vec![r.school_id.clone(), r.treatment.to_string(), fit.kind.to_string(), f(fit.prob[i]), f(fit.logit[i])]);
        }
        let mut terms = vec![("intercept".to_string(), fit.beta0)];
        terms.extend(d.cell_keys.iter().zip(&fit.beta_w).map(|(k, &b)| (format!("w_{k}"), b)));
        terms.extend(d.covariate_names.iter().zip(&fit.beta_z).map(|(n, &b)| (format!("z_{n}"), b)));
        for (t, v) in terms {
            coef_rows.push(vec![
                fit.kind.to_string(),
                t,
                f(v),
                f(fit.info.deviance),
                fit.info.iterations.to_string(),
                fit.info.converged.to_string(),
                fit.info.separation.to_string(),
                fit.info.n_fit.to_string(),
            ]);
        }
    }
    out.csv("ps.csv", |b| write_rows(b, &["school_id", "treatment", "kind", "prob", "logit"], &rows))?;
    out.csv("ps_coefficients.csv", |b| {
        write_rows(b, &["kind", "term", "value", "deviance", "iterations", "converged", "separation", "n_fit"], &coef_rows)
    })
}

fn match_all(cfg: &RunConfig, p: &Prepared, fits: &[PsFit<f64>]) -> Result<Vec<MatchResult>> {
    let spec = cfg.matching.spec();
    fits.iter().map(|ps| full_match(ps, &p.dataset, &spec)).collect()
}

fn write_match_outputs(out: &mut Out, cfg: &RunConfig, p: &Prepared, fits: &[PsFit<f64>], results: &[MatchResult]) -> Result<()> {
    let mut rows = Vec::new();
    for (ps, m) in fits.iter().zip(results) {
        out.csv(&format!("matched_{}.csv", ps.kind), |b| write_matched_sets(b, m, &p.dataset))?;
        rows.push(vec![
            ps.kind.to_string(),
            f(cfg.matching.caliper),
            m.sets.len().to_string(),
            m.n_matched_treated().to_string(),
            m.n_matched_controls().to_string(),
            m.unmatched_treated.len().to_string(),
            m.unmatched_treated.iter().map(|&i| p.dataset.records[i].school_id.clone()).collect::<Vec<_>>().join(";"),
            f(m.total_distance),
            f(effective_sample_size(m)),
            m.feasible.to_string(),
        ]);
    }
    out.csv("match_summary.csv", |b| {
        write_rows(
            b,
            &[
                "kind",
                "caliper",
                "n_sets",
                "matched_treated",
                "matched_controls",
                "unmatched_treated",
                "unmatched_ids",
                "total_distance",
                "effective_sample_size",
                "feasible",
            ],
            &rows,
        )
    })
}

fn infeasible(fits: &[PsFit<f64>], results: &[MatchResult]) -> Result<()> {
    let bad: Vec<String> = fits.iter().zip(results).filter(|(_, m)| !m.feasible).map(|(p, _)| p.kind.to_string()).collect();
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::numerical(format!(
            "full matching infeasible under the ratio bounds for PS kind(s): {}",
            bad.join(", ")
        )))
    }
}

fn balance_report(p: &Prepared, fits: &[PsFit<f64>], results: &[MatchResult]) -> Result<BalanceReport> {
    let d = &p.dataset;
    let treated = d.treatment();
    let w: Vec<Vec<Option<f64>>> = (0..d.len()).map(|i| d.obtained_vector(i)).collect();
    let mut rep = BalanceReport::default();
    for (family, values) in [(Family::Obtained, &w), (Family::Predicted, &p.eb.xhat)] {
        rep.add(family, &d.cell_keys, values, &treated, Sample::Unmatched, |a| {
            a.iter().map(|&x| x.then_some(1.0)).collect()
        })?;
        for (ps, m) in fits.iter().zip(results) {
            rep.add(family, &d.cell_keys, values, &treated, Sample::Matched(ps.kind), |a| m.weights_available(a))?;
        }
    }
    Ok(rep)
}

fn outcome_cells(d: &Dataset) -> Vec<CellKey> {
    d.cell_keys
        .iter()
        .filter(|k| d.records.iter().any(|r| r.cell(k).is_some_and(|c| c.outcome_avg.is_some())))
        .cloned()
        .collect()
}

fn estimates(cfg: &RunConfig, p: &Prepared, fits: &[PsFit<f64>], results: &[MatchResult]) -> Result<Vec<EffectEstimate>> {
    let d = &p.dataset;
    let cells = outcome_cells(d);
    if cells.is_empty() {
        return Err(Error::data("dataset has no outcome columns (y_<subgroup>_<assessment>)"));
    }
    let mut out = Vec::new();
    for key in &cells {
        for (ps, m) in fits.iter().zip(results) {
            let mut e = matched_difference(m, d, key)?;
            e.ps_kind = Some(ps.kind);
            out.push(e);
            out.push(odds_weighting(ps, d, key, true)?);
            if cfg.unnormalized_weighting {
                out.push(odds_weighting(ps, d, key, false)?);
            }
            out.push(pencomp(ps, d, key)?);
        }
        out.push(marginal_odds_difference(d, key)?);
    }
    Ok(out)
}

fn write_study(out: &mut Out, study: &StudyOutput) -> Result<()> {
    let cfg = &study.config;
    let s = &study.summary;
    let cells = crate::sim::subgroup_keys(4);
    let classes = cfg.design.classes();

    let mut rows = Vec::new();
    for r in &study.records {
        for o in &r.kinds {
            for k in 0..4 {
                rows.push(vec![
                    r.index.to_string(),
                    o.kind.to_string(),
                    cells[k].subgroup.clone(),
                    classes[k].as_str().to_string(),
                    f(o.matching[k]),
                    f(o.weighting[k]),
                    f(o.weighting_unnormalized[k]),
                    f(o.pencomp[k]),
                    f(r.marginal_odds[k]),
                    f(o.balance_x[k]),
                    f(o.balance_w[k]),
                    f(o.balance_xhat[k]),
                    f(r.unmatched_balance_x[k]),
                    f(r.unmatched_balance_w[k]),
                    o.unmatched.iter().map(|u| u.to_string()).collect::<Vec<_>>().join(";"),
                    r.n_treated.to_string(),
                    f(r.finite_ett),
                ]);
            }
        }
    }
    out.csv("replications.csv", |b| {
        write_rows(
            b,
            &[
                "replication",
                "kind",
                "subgroup",
                "size_class",
                "matching",
                "weighting",
                "weighting_unnormalized",
                "pencomp",
                "marginal_odds",
                "ds_x",
                "ds_w",
                "ds_xhat",
                "ds_x_unmatched",
                "ds_w_unmatched",
                "unmatched_by_caliper",
                "n_treated",
                "finite_ett",
            ],
            &rows,
        )
    })?;

    let rows: Vec<Vec<String>> = s
        .performance
        .iter()
        .map(|p| {
            vec![
                p.kind.map_or("none".into(), |k| k.to_string()),
                p.estimator.to_string(),
                p.class.as_str().into(),
                f(p.perf.bias),
                f(p.perf.rmse),
                p.perf.n.to_string(),
            ]
        })
        .collect();
    out.csv("summary.csv", |b| write_rows(b, &["kind", "estimator", "size_class", "bias", "rmse", "n"], &rows))?;
    let rows: Vec<Vec<String>> = s.unmatched_pct.iter().map(|(k, c, p)| vec![k.to_string(), f(*c), f(*p)]).collect();
    out.csv("unmatched.csv", |b| write_rows(b, &["kind", "caliper", "unmatched_pct"], &rows))?;
    let rows: Vec<Vec<String>> = s
        .balance
        .iter()
        .map(|b| vec![b.family.as_str().into(), b.sample.to_string(), b.class.as_str().into(), f(b.mean_abs_ds)])
        .collect();
    out.csv("balance_summary.csv", |b| write_rows(b, &["family", "sample", "size_class", "mean_abs_ds"], &rows))?;

    let mut class_list = classes.to_vec();
    class_list.dedup();
    let samples = [Sample::Matched(PsKind::Ml), Sample::Matched(PsKind::Rc), Sample::Matched(PsKind::Naive), Sample::Unmatched];
    let panels: Vec<(String, Vec<BarGroup>)> = [Family::True, Family::Obtained]
        .iter()
        .map(|&fam| {
            let groups = class_list
                .iter()
                .map(|&c| BarGroup {
                    label: c.as_str().into(),
                    values: samples.iter().map(|&smp| s.balance(fam, smp, c).unwrap_or(f64::NAN)).collect(),
                })
                .collect();
            (fam.as_str().to_string(), groups)
        })
        .collect();
    let svg = grouped_bars(
        "Mean |standardized difference| by subgroup size",
        "mean |d_s|",
        &["matched ML", "matched RC", "matched naive", "unmatched"],
        &panels,
    );
    out.put("fig_balance.svg", svg.into_bytes())?;
    let groups: Vec<BarGroup> = class_list
        .iter()
        .map(|&c| BarGroup {
            label: c.as_str().into(),
            values: [Some(PsKind::Ml), Some(PsKind::Rc), Some(PsKind::Naive), None]
                .iter()
                .map(|&k| {
                    let est = if k.is_some() { Estimator::Matching } else { Estimator::MarginalOdds };
                    s.performance(k, est, c).map_or(f64::NAN, |p| p.rmse)
                })
                .collect(),
        })
        .collect();
    let svg = grouped_bars(
        "RMSE of matching estimators of the ETT",
        "RMSE (score points)",
        &["matched ML", "matched RC", "matched naive", "marginal odds"],
        &[("".to_string(), groups)],
    );
    out.put("fig_rmse.svg", svg.into_bytes())
}

fn approx_check(out: &mut Out) -> Result<(f64, f64, f64)> {
    let (etas, vars) = audit_grid();
    let mut rows = Vec::with_capacity(etas.len() * vars.len());
    let mut worst = (0.0f64, f64::NAN, f64::NAN);
    for &v in &vars {
        for &e in &etas {
            let (a, o) = (mixture_prob(e, v), logistic_normal_oracle(e, v));
            let d = (a - o).abs();
            if d > worst.0 {
                worst = (d, e, v);
            }
            rows.push(vec![f(e), f(v), f(a), f(o), f(d)]);
        }
    }
    out.csv("approx_grid.csv", |b| write_rows(b, &["eta", "var", "mixture", "oracle", "abs_error"], &rows))?;
    Ok(worst)
}

fn decisions(cfg: &RunConfig, study: Option<&StudyOutput>) -> Result<toml::Table> {
    let mut t = toml::Table::new();
    let mut put = |k: &str, v: toml::Value| {
        t.insert(k.to_string(), v);
    };
    put("ds_denominator", "sample SD (n-1) of the pooled unmatched sample, reused for matched samples".into());
    put(
        "weighting",
        if cfg.unnormalized_weighting { "normalized; unnormalized also reported" } else { "normalized" }.into(),
    );
    put("ml_coefficient_sample", "schools with every model cell observed".into());
    put("match_objective", "most controls placed, then least total logit distance".into());
    put("csem_source", if cfg.csem_tables.is_empty() { "per-cell" } else { "tables, two-pass" }.into());
    if cfg.mode == Mode::Simulate {
        let laws = size_laws(&cfg.sim)?;
        let desc: Vec<toml::Value> = cfg
            .sim
            .design
            .classes()
            .iter()
            .zip(&laws)
            .map(|(c, l)| {
                format!("{}: p(m) ∝ {}^m on 1..={} (mean {})", c.as_str(), l.ratio(), l.max(), l.mean()).into()
            })
            .collect();
        put("size_laws", toml::Value::Array(desc));
        put("effect_shape", format!("a * exp(-X / {})", cfg.sim.effect_scale).into());
        if let Some(s) = study {
            put("effect_amplitude", s.config.effect_amplitude.unwrap_or(f64::NAN).into());
            if let Some(c) = &s.calibration {
                put("calibration_treated_cells", (c.n_treated_cells as i64).into());
            }
            put("failed_replications", (s.failures.len() as i64).into());
        }
        put("primary_caliper", cfg.sim.primary_caliper.into());
        put(
            "max_treated_per_control",
            cfg.sim.max_treated_per_control.map_or("number of treated".to_string(), |v| v.to_string()).into(),
        );
        put("ett_target", cfg.sim.target_ett.into());
    }
    Ok(t)
}

fn write_manifest(out: &mut Out, cfg: &RunConfig, study: Option<&StudyOutput>) -> Result<()> {
    let mut m = toml::Table::new();
    m.insert("tool".into(), env!("CARGO_PKG_NAME").into());
    m.insert("version".into(), env!("CARGO_PKG_VERSION").into());
    m.insert("mode".into(), cfg.mode.as_str().into());
    m.insert("config_sha256".into(), cfg.hash().into());
    m.insert("seed".into(), (cfg.sim.master_seed as i64).into());
    m.insert("threads".into(), (cfg.threads as i64).into());
    if let Some(d) = &cfg.data {
        let bytes = fs::read(d)?;
        m.insert("data_sha256".into(), hex(&Sha256::digest(&bytes)).into());
    }
    m.insert("decisions".into(), toml::Value::Table(decisions(cfg, study)?));
    let outputs: toml::Table = out.files.iter().map(|(k, v)| (k.clone(), toml::Value::from(v.clone()))).collect();
    m.insert("outputs".into(), toml::Value::Table(outputs));
    let mut doc = toml::Table::new();
    doc.insert("manifest".into(), toml::Value::Table(m));
    doc.insert("config".into(), toml::Value::try_from(cfg).map_err(|e| Error::usage(e.to_string()))?);
    let text = toml::to_string(&doc).map_err(|e| Error::usage(e.to_string()))?;
    fs::write(out.dir.join("manifest.toml"), text)?;
    Ok(())
}

/// Executes a run: validates the config, dispatches on the mode, writes the
/// artifacts and a manifest into the output directory.
pub fn run(cfg: &RunConfig) -> Result<RunReport> {
    cfg.validate()?;
    let mut out = Out::new(&cfg.output)?;
    let mut report = RunReport { output: cfg.output.clone(), ..Default::default() };
    let mut study = None;
    let mut failure = None;
    match cfg.mode {
        Mode::ApproxCheck => {
            let (err, eta, v) = approx_check(&mut out)?;
            report.warnings.push(format!("max |mixture - oracle| = {err:.3e} at eta = {eta}, var = {v}"));
            if err > cfg.approx_tolerance {
                failure = Some(Error::numerical(format!(
                    "mixture approximation error {err:.3e} exceeds tolerance {:.3e}",
                    cfg.approx_tolerance
                )));
            }
        }
        Mode::Simulate => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(cfg.threads)
                .build()
                .map_err(|e| Error::usage(e.to_string()))?;
            let s = pool.install(|| run_study(&cfg.sim))?;
            for (r, msg) in &s.failures {
                report.warnings.push(format!("replication {r} failed: {msg}"));
            }
            write_study(&mut out, &s)?;
            study = Some(s);
        }
        Mode::FitPs | Mode::Match | Mode::Balance | Mode::Estimate => {
            let p = prepare(cfg)?;
            let fits = fit_kinds(cfg, &p, &mut report)?;
            match cfg.mode {
                Mode::FitPs => write_fit_outputs(&mut out, &p, &fits)?,
                Mode::Match => {
                    let results = match_all(cfg, &p, &fits)?;
                    write_match_outputs(&mut out, cfg, &p, &fits, &results)?;
                    failure = infeasible(&fits, &results).err();
                }
                Mode::Balance => {
                    let results = match_all(cfg, &p, &fits)?;
                    infeasible(&fits, &results)?;
                    let rep = balance_report(&p, &fits, &results)?;
                    out.csv("balance.csv", |b| rep.write_csv(b))?;
                }
                Mode::Estimate => {
                    let results = match_all(cfg, &p, &fits)?;
                    infeasible(&fits, &results)?;
                    let est = estimates(cfg, &p, &fits, &results)?;
                    out.csv("estimates.csv", |b| write_estimates(b, &est))?;
                }
                _ => unreachable!(),
            }
        }
    }
    write_manifest(&mut out, cfg, study.as_ref())?;
    report.artifacts = out.files.keys().cloned().chain(["manifest.toml".to_string()]).collect();
    match failure {
        Some(e) => Err(e),
        None => Ok(report),
    }
}
