use rayon::prelude::*;

use super::dgp::{calibrate_effect, generate_with_rng, replication_rng, size_laws, Calibration, Population, SizeClass, ASSESSMENT};
use super::SimConfig;
use crate::error::{Error, Result};
use crate::estimate::{marginal_odds_difference, matched_difference, odds_weighting, pencomp, Estimator};
use crate::hlm::{fit_hlm, predict_eb};
use crate::matching::{effective_sample_size, full_match, unmatched_counts, MatchSpec};
use crate::measure::{build_sigma, CsemSource};
use crate::metrics::{mean, pooled_sd, standardized_difference, summarize_replications, Family, Performance, Sample};
use crate::ps::{ps_ml, ps_naive, ps_rc, PsFit, PsKind};

/// Per-PS-kind results of one replication. Cell vectors follow the
/// subgroup layout.
#[derive(Debug, Clone, PartialEq)]
pub struct KindOutcome {
    pub kind: PsKind,
    pub converged: bool,
    pub separation: bool,
    /// Unmatched treated count at each configured caliper.
    pub unmatched: Vec<usize>,
    pub feasible: bool,
    /// Variance of PS logits among treated and among controls.
    pub logit_var: [f64; 2],
    pub ess: f64,
    pub balance_x: Vec<f64>,
    pub balance_w: Vec<f64>,
    pub balance_xhat: Vec<f64>,
    pub matching: Vec<f64>,
    pub weighting: Vec<f64>,
    pub weighting_unnormalized: Vec<f64>,
    pub pencomp: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationRecord {
    pub index: usize,
    pub n_treated: usize,
    pub finite_ett: f64,
    pub tau_hat: [f64; 2],
    pub unmatched_balance_x: Vec<f64>,
    pub unmatched_balance_w: Vec<f64>,
    pub unmatched_balance_xhat: Vec<f64>,
    pub marginal_odds: Vec<f64>,
    /// In the order ML, RC, naive.
    pub kinds: Vec<KindOutcome>,
}

impl ReplicationRecord {
    pub fn kind(&self, kind: PsKind) -> &KindOutcome {
        self.kinds.iter().find(|k| k.kind == kind).expect("every kind is recorded")
    }
}

fn logit_variances(ps: &PsFit<f64>, treated: &[bool]) -> [f64; 2] {
    let var = |want: bool| {
        let v: Vec<f64> = ps.logit.iter().zip(treated).filter(|(_, &t)| t == want).map(|(&l, _)| l).collect();
        pooled_sd(&v).map_or(f64::NAN, |s| s * s)
    };
    [var(true), var(false)]
}

fn column(values: &[Vec<Option<f64>>], k: usize) -> (Vec<f64>, f64) {
    let col: Vec<f64> = values.iter().map(|r| r[k].expect("complete column")).collect();
    let sd = pooled_sd(&col).unwrap_or(f64::NAN);
    (col, sd)
}

fn balance(values: &[Vec<Option<f64>>], treated: &[bool], weights: &[Option<f64>]) -> Result<Vec<f64>> {
    (0..values[0].len())
        .map(|k| {
            let (col, sd) = column(values, k);
            standardized_difference(&col, treated, weights, sd)
        })
        .collect()
}

/// Runs the full pipeline on one population.
pub fn analyze_population(config: &SimConfig, index: usize, pop: &Population) -> Result<ReplicationRecord> {
    let data = &pop.dataset;
    let treated = data.treatment();
    let n_treated = treated.iter().filter(|&&t| t).count();
    if n_treated == 0 || n_treated == data.len() {
        return Err(Error::data("replication drew a single treatment group"));
    }
    let sigma = build_sigma(data, CsemSource::PerCell)?;
    let fit = fit_hlm::<f64>(data, &sigma, ASSESSMENT)?;
    let eb = predict_eb(&fit, data, &sigma, ASSESSMENT)?;

    let x = pop.true_scores_opt();
    let w: Vec<Vec<Option<f64>>> = (0..data.len()).map(|i| data.obtained_vector(i)).collect();
    let xhat = &eb.xhat;
    let all = vec![Some(1.0); data.len()];
    let cells = &data.cell_keys;

    let spec = MatchSpec {
        caliper_logits: config.primary_caliper,
        max_controls_per_treated: config.max_controls_per_treated,
        max_treated_per_control: config.max_treated_per_control.unwrap_or(n_treated),
    };
    let fits = [ps_ml(data, &eb, &sigma)?, ps_rc(data, &eb)?, ps_naive(data)?];
    let mut kinds = Vec::with_capacity(3);
    for ps in &fits {
        let logits = ps.logits_f64();
        let unmatched = unmatched_counts(&logits, &treated, &config.calipers);
        let m = full_match(ps, data, &spec)?;
        let mw = m.weights(data.len());
        let each = |f: &dyn Fn(&crate::data::CellKey) -> Result<f64>| cells.iter().map(f).collect::<Result<Vec<f64>>>();
        kinds.push(KindOutcome {
            kind: ps.kind,
            converged: ps.info.converged,
            separation: ps.info.separation,
            unmatched,
            feasible: m.feasible,
            logit_var: logit_variances(ps, &treated),
            ess: effective_sample_size(&m),
            balance_x: balance(&x, &treated, &mw)?,
            balance_w: balance(&w, &treated, &mw)?,
            balance_xhat: balance(xhat, &treated, &mw)?,
            matching: each(&|k| Ok(matched_difference(&m, data, k)?.point))?,
            weighting: each(&|k| Ok(odds_weighting(ps, data, k, true)?.point))?,
            weighting_unnormalized: each(&|k| Ok(odds_weighting(ps, data, k, false)?.point))?,
            pencomp: each(&|k| Ok(pencomp(ps, data, k)?.point))?,
        });
    }
    Ok(ReplicationRecord {
        index,
        n_treated,
        finite_ett: pop.finite_ett(),
        tau_hat: [fit.tau1_sq.sqrt(), fit.tau2_sq.sqrt()],
        unmatched_balance_x: balance(&x, &treated, &all)?,
        unmatched_balance_w: balance(&w, &treated, &all)?,
        unmatched_balance_xhat: balance(xhat, &treated, &all)?,
        marginal_odds: cells
            .iter()
            .map(|k| Ok(marginal_odds_difference(data, k)?.point))
            .collect::<Result<Vec<f64>>>()?,
        kinds,
    })
}

/// Generates and analyzes replication `index` of a calibrated config.
pub fn run_replication(config: &SimConfig, index: usize) -> Result<ReplicationRecord> {
    let laws = size_laws(config)?;
    let pop = generate_with_rng(config, &laws, &mut replication_rng(config.master_seed, index as u64))?;
    analyze_population(config, index, &pop)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerformanceCell {
    pub kind: Option<PsKind>,
    pub estimator: Estimator,
    pub class: SizeClass,
    pub perf: Performance,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BalanceCell {
    pub family: Family,
    pub sample: Sample,
    pub class: SizeClass,
    /// Mean |d_s| over replications and the class's subgroups.
    pub mean_abs_ds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct McSummary {
    pub n_replications: usize,
    pub truth: f64,
    /// (kind, caliper, mean percentage of treated left unmatched).
    pub unmatched_pct: Vec<(PsKind, f64, f64)>,
    pub performance: Vec<PerformanceCell>,
    pub balance: Vec<BalanceCell>,
}

impl McSummary {
    pub fn unmatched(&self, kind: PsKind, caliper: f64) -> Option<f64> {
        self.unmatched_pct.iter().find(|u| u.0 == kind && u.1 == caliper).map(|u| u.2)
    }

    pub fn performance(&self, kind: Option<PsKind>, estimator: Estimator, class: SizeClass) -> Option<Performance> {
        self.performance
            .iter()
            .find(|p| p.kind == kind && p.estimator == estimator && p.class == class)
            .map(|p| p.perf)
    }

    pub fn balance(&self, family: Family, sample: Sample, class: SizeClass) -> Option<f64> {
        self.balance
            .iter()
            .find(|b| b.family == family && b.sample == sample && b.class == class)
            .map(|b| b.mean_abs_ds)
    }
}

/// Aggregates replication records (in index order) into bias/RMSE,
/// unmatched percentages and size-class balance averages.
pub fn summarize(config: &SimConfig, records: &[ReplicationRecord]) -> McSummary {
    let truth = config.target_ett;
    let classes = config.design.classes();
    let mut class_list: Vec<SizeClass> = classes.to_vec();
    class_list.dedup();
    let in_class = |c: SizeClass| (0..4).filter(move |&k| classes[k] == c);

    let mut unmatched_pct = Vec::new();
    for kind in PsKind::ALL {
        for (ci, &cal) in config.calipers.iter().enumerate() {
            let pcts: Vec<f64> = records
                .iter()
                .map(|r| 100.0 * r.kind(kind).unmatched[ci] as f64 / r.n_treated as f64)
                .collect();
            unmatched_pct.push((kind, cal, mean(&pcts)));
        }
    }

    let mut performance = Vec::new();
    let mut balance = Vec::new();
    for &class in &class_list {
        let pool = |get: &dyn Fn(&ReplicationRecord) -> &Vec<f64>| -> Vec<f64> {
            records.iter().flat_map(|r| in_class(class).map(|k| get(r)[k]).collect::<Vec<_>>()).collect()
        };
        for kind in PsKind::ALL {
            let per: [(Estimator, fn(&KindOutcome) -> &Vec<f64>); 4] = [
                (Estimator::Matching, |o| &o.matching),
                (Estimator::Weighting, |o| &o.weighting),
                (Estimator::WeightingUnnormalized, |o| &o.weighting_unnormalized),
                (Estimator::Pencomp, |o| &o.pencomp),
            ];
            for (est, get) in per {
                let v = pool(&|r| get(r.kind(kind)));
                performance.push(PerformanceCell { kind: Some(kind), estimator: est, class, perf: summarize_replications(&v, truth) });
            }
        }
        let v = pool(&|r| &r.marginal_odds);
        performance.push(PerformanceCell {
            kind: None,
            estimator: Estimator::MarginalOdds,
            class,
            perf: summarize_replications(&v, truth),
        });

        let abs_mean = |v: Vec<f64>| mean(&v.iter().map(|d| d.abs()).collect::<Vec<_>>());
        let fams: [(Family, fn(&ReplicationRecord) -> &Vec<f64>, fn(&KindOutcome) -> &Vec<f64>); 3] = [
            (Family::True, |r| &r.unmatched_balance_x, |o| &o.balance_x),
            (Family::Obtained, |r| &r.unmatched_balance_w, |o| &o.balance_w),
            (Family::Predicted, |r| &r.unmatched_balance_xhat, |o| &o.balance_xhat),
        ];
        for (family, unm, matched) in fams {
            balance.push(BalanceCell { family, sample: Sample::Unmatched, class, mean_abs_ds: abs_mean(pool(&unm)) });
            for kind in PsKind::ALL {
                let v = pool(&|r| matched(r.kind(kind)));
                balance.push(BalanceCell { family, sample: Sample::Matched(kind), class, mean_abs_ds: abs_mean(v) });
            }
        }
    }
    McSummary { n_replications: records.len(), truth, unmatched_pct, performance, balance }
}

#[derive(Debug, Clone)]
pub struct StudyOutput {
    /// The config actually run, with the calibrated amplitude filled in.
    pub config: SimConfig,
    pub calibration: Option<Calibration>,
    pub records: Vec<ReplicationRecord>,
    pub failures: Vec<(usize, String)>,
    pub summary: McSummary,
}

/// Maximum share of replications allowed to fail before the study aborts.
pub const MAX_FAILURE_RATE: f64 = 0.01;

/// Calibrates the effect (unless fixed in the config) and runs every
/// replication on the current rayon pool. Results depend only on the config.
pub fn run_study(config: &SimConfig) -> Result<StudyOutput> {
    config.validate()?;
    if config.n_replications < 2 {
        return Err(Error::usage("a study needs at least 2 replications"));
    }
    let mut cfg = config.clone();
    let calibration = match cfg.effect_amplitude {
        Some(_) => None,
        None => {
            let c = calibrate_effect(&cfg, cfg.master_seed)?;
            cfg.effect_amplitude = Some(c.amplitude);
            Some(c)
        }
    };
    let results: Vec<Result<ReplicationRecord>> =
        (0..cfg.n_replications).into_par_iter().map(|r| run_replication(&cfg, r)).collect();
    let mut records = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for (r, res) in results.into_iter().enumerate() {
        match res {
            Ok(rec) => records.push(rec),
            Err(e) => failures.push((r, e.to_string())),
        }
    }
    if failures.len() as f64 > MAX_FAILURE_RATE * cfg.n_replications as f64 {
        let (r, msg) = &failures[0];
        return Err(Error::numerical(format!(
            "{} of {} replications failed (first: replication {r}: {msg})",
            failures.len(),
            cfg.n_replications
        )));
    }
    let summary = summarize(&cfg, &records);
    Ok(StudyOutput { config: cfg, calibration, records, failures, summary })
}

/// Assignment-mechanism checks on one population.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DgpDiagnostics {
    pub treated_fraction: f64,
    /// Treated-minus-control mean true score in pooled SDs, averaged over
    /// subgroups.
    pub x_gap_sd: f64,
    pub finite_ett: f64,
}

pub fn dgp_diagnostics(pop: &Population) -> DgpDiagnostics {
    let treated = pop.dataset.treatment();
    let n = treated.len();
    let nt = treated.iter().filter(|&&t| t).count();
    let k = pop.true_scores[0].len();
    let gaps: Vec<f64> = (0..k)
        .map(|c| {
            let col: Vec<f64> = pop.true_scores.iter().map(|r| r[c]).collect();
            let sd = pooled_sd(&col).unwrap_or(f64::NAN);
            standardized_difference(&col, &treated, &vec![Some(1.0); n], sd).unwrap_or(f64::NAN)
        })
        .collect();
    DgpDiagnostics {
        treated_fraction: nt as f64 / n as f64,
        x_gap_sd: mean(&gaps),
        finite_ett: if nt > 0 { pop.finite_ett() } else { f64::NAN },
    }
}
