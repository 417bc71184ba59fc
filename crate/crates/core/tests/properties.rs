use std::sync::OnceLock;

use calibps::data::{CellKey, Dataset, SchoolRecord, SubgroupCell};
use calibps::estimate::{matched_difference, odds_weighting, pencomp};
use calibps::hlm::fit_all_assessments;
use calibps::matching::{full_match, MatchResult, MatchSpec, MatchedSet};
use calibps::measure::{build_sigma, CsemSource};
use calibps::metrics::{pooled_sd, standardized_difference, summarize_replications};
use calibps::ps::mixture::{logistic_normal_oracle, mixture_prob, APPROX_TOLERANCE};
use calibps::ps::{ps_ml, ps_naive, ps_rc};
use calibps::sim::{generate_population, SimConfig};
use calibps::PsFit;
use proptest::prelude::*;

fn school(id: usize, m: u32, csem: f64) -> SchoolRecord {
    SchoolRecord {
        school_id: format!("{id}"),
        treatment: (id % 2) as u8,
        covariates: vec![],
        cells: vec![SubgroupCell {
            subgroup: "g".into(),
            assessment: "a".into(),
            size: m,
            obtained_avg: Some(1500.0),
            csem: Some(csem),
            outcome_avg: None,
        }],
    }
}

fn variances(sizes: &[u32], csem: f64) -> Vec<f64> {
    let records = sizes.iter().enumerate().map(|(i, &m)| school(i, m, csem)).collect();
    let d = Dataset::new(records, vec![], vec![CellKey::new("g", "a")]);
    let s = build_sigma(&d, CsemSource::PerCell).unwrap();
    (0..sizes.len()).map(|i| s.error_variance(i, 0).unwrap()).collect()
}

proptest! {
    #[test]
    fn error_variance_scales_with_csem_squared(
        sizes in proptest::collection::vec(1u32..400, 1..10),
        csem in 1.0f64..400.0,
        c in 0.01f64..20.0,
    ) {
        let base = variances(&sizes, csem);
        let scaled = variances(&sizes, csem * c);
        for (b, s) in base.iter().zip(&scaled) {
            prop_assert!((s - c * c * b).abs() <= 1e-12 * s.abs());
        }
    }

    #[test]
    fn error_variance_falls_with_group_size(m in 1u32..10_000, csem in 1.0f64..400.0) {
        let v = variances(&[m, m + 1], csem);
        prop_assert!(v[1] < v[0]);
    }

    #[test]
    fn mixture_rises_in_eta(eta in -8.0f64..8.0, d in 1e-3f64..2.0, v in 0.0f64..25.0) {
        prop_assert!(mixture_prob(eta + d, v) > mixture_prob(eta, v));
    }

    #[test]
    fn mixture_moves_toward_one_half_with_variance(eta in -8.0f64..8.0, v in 0.0f64..25.0, dv in 1e-2f64..10.0) {
        prop_assume!(eta.abs() > 1e-3);
        let (a, b) = (mixture_prob(eta, v), mixture_prob(eta, v + dv));
        prop_assert!((b - 0.5).abs() < (a - 0.5).abs());
        prop_assert!((a - 0.5).signum() == eta.signum());
    }

    #[test]
    fn mixture_tracks_quadrature(eta in -8.0f64..8.0, v in 0.0f64..25.0) {
        let p = mixture_prob(eta, v);
        prop_assert!(p > 0.0 && p < 1.0);
        prop_assert!((p - logistic_normal_oracle(eta, v)).abs() <= APPROX_TOLERANCE);
    }

    #[test]
    fn standardized_difference_flips_with_labels(
        rows in proptest::collection::vec((-100.0f64..100.0, any::<bool>(), proptest::option::of(0.1f64..5.0)), 4..40),
    ) {
        let values: Vec<f64> = rows.iter().map(|r| r.0).collect();
        let treated: Vec<bool> = rows.iter().map(|r| r.1).collect();
        let weights: Vec<Option<f64>> = rows.iter().map(|r| r.2).collect();
        let sd = pooled_sd(&values).unwrap();
        let flipped: Vec<bool> = treated.iter().map(|t| !t).collect();
        match (standardized_difference(&values, &treated, &weights, sd), standardized_difference(&values, &flipped, &weights, sd)) {
            (Ok(a), Ok(b)) => prop_assert!((a + b).abs() <= 1e-12 * (1.0 + a.abs())),
            (a, b) => prop_assert!(a.is_err() && b.is_err()),
        }
    }

    #[test]
    fn standardized_difference_is_affine_invariant(
        rows in proptest::collection::vec((-100.0f64..100.0, any::<bool>(), proptest::option::of(0.1f64..5.0)), 4..40),
        scale in prop_oneof![0.01f64..100.0, -100.0f64..-0.01],
        shift in -1e4f64..1e4,
    ) {
        let values: Vec<f64> = rows.iter().map(|r| r.0).collect();
        let treated: Vec<bool> = rows.iter().map(|r| r.1).collect();
        let weights: Vec<Option<f64>> = rows.iter().map(|r| r.2).collect();
        let moved: Vec<f64> = values.iter().map(|v| scale * v + shift).collect();
        let sd = pooled_sd(&values).unwrap();
        prop_assume!(sd > 1e-6);
        let a = standardized_difference(&values, &treated, &weights, sd);
        let b = standardized_difference(&moved, &treated, &weights, pooled_sd(&moved).unwrap());
        if let (Ok(a), Ok(b)) = (a, b) {
            prop_assert!((b - scale.signum() * a).abs() <= 1e-8 * (1.0 + a.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn rmse_decomposes_into_bias_and_variance(
        est in proptest::collection::vec(-1e3f64..1e3, 1..200),
        truth in -1e3f64..1e3,
    ) {
        let p = summarize_replications(&est, truth);
        let n = est.len() as f64;
        let mean = est.iter().sum::<f64>() / n;
        let var = est.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n;
        prop_assert!((p.rmse * p.rmse - (p.bias * p.bias + var)).abs() <= 1e-9 * (1.0 + p.rmse * p.rmse));
        prop_assert!((p.bias - (mean - truth)).abs() <= 1e-9 * (1.0 + p.bias.abs()));
    }

    #[test]
    fn one_to_one_matching_is_a_plain_mean_difference(
        pairs in proptest::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 1..20),
    ) {
        let key = CellKey::new("g", "a");
        let mut records = Vec::new();
        let mut sets = Vec::new();
        for (k, &(yt, yc)) in pairs.iter().enumerate() {
            for (t, y) in [(1u8, yt), (0, yc)] {
                records.push(SchoolRecord {
                    school_id: format!("{}", records.len()),
                    treatment: t,
                    covariates: vec![],
                    cells: vec![SubgroupCell {
                        subgroup: "g".into(),
                        assessment: "a".into(),
                        size: 10,
                        obtained_avg: Some(0.0),
                        csem: Some(1.0),
                        outcome_avg: Some(y),
                    }],
                });
            }
            sets.push(MatchedSet { treated: vec![2 * k], controls: vec![2 * k + 1] });
        }
        let d = Dataset::new(records, vec![], vec![key.clone()]);
        let r = MatchResult { sets, unmatched_treated: vec![], total_distance: 0.0, scaled_cost: 0, feasible: true };
        let n = pairs.len() as f64;
        let expect = pairs.iter().map(|p| p.0).sum::<f64>() / n - pairs.iter().map(|p| p.1).sum::<f64>() / n;
        let got = matched_difference(&r, &d, &key).unwrap().point;
        prop_assert!((got - expect).abs() < 1e-9);
    }
}

struct Fixture {
    dataset: Dataset,
    ps: PsFit,
    matched: MatchResult,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let cfg = SimConfig { n_schools: 200, effect_amplitude: Some(20.0), ..SimConfig::default() };
        let dataset = generate_population(&cfg, 21).unwrap().dataset;
        let ps: PsFit = ps_naive(&dataset).unwrap();
        let spec = MatchSpec { caliper_logits: 1.0, max_controls_per_treated: 5, max_treated_per_control: 200 };
        let matched = full_match(&ps, &dataset, &spec).unwrap();
        Fixture { dataset, ps, matched }
    })
}

fn estimates(f: &Fixture, d: &Dataset, key: &CellKey) -> [f64; 3] {
    [
        matched_difference(&f.matched, d, key).unwrap().point,
        odds_weighting(&f.ps, d, key, true).unwrap().point,
        pencomp(&f.ps, d, key).unwrap().point,
    ]
}

fn shifted(d: &Dataset, c: f64, treated_only: bool) -> Dataset {
    let mut out = d.clone();
    for r in &mut out.records {
        if treated_only && !r.is_treated() {
            continue;
        }
        for cell in &mut r.cells {
            cell.outcome_avg = cell.outcome_avg.map(|y| y + c);
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn estimators_are_location_equivariant(c in -500.0f64..500.0, cell in 0usize..4) {
        let f = fixture();
        let key = f.dataset.cell_keys[cell].clone();
        let base = estimates(f, &f.dataset, &key);
        let all = estimates(f, &shifted(&f.dataset, c, false), &key);
        let treated = estimates(f, &shifted(&f.dataset, c, true), &key);
        for j in 0..3 {
            let tol = 1e-6 * (1.0 + c.abs() + base[j].abs());
            prop_assert!((all[j] - base[j]).abs() <= tol, "estimator {j}: {} vs {}", all[j], base[j]);
            prop_assert!((treated[j] - base[j] - c).abs() <= tol, "estimator {j}: {} vs {} + {c}", treated[j], base[j]);
        }
    }
}

#[test]
fn every_score_is_strictly_inside_the_unit_interval() {
    for seed in 0..5 {
        let d = generate_population(&SimConfig { n_schools: 150, ..SimConfig::default() }, seed).unwrap().dataset;
        let sigma = build_sigma(&d, CsemSource::PerCell).unwrap();
        let (_, eb) = fit_all_assessments::<f64>(&d, &sigma).unwrap();
        let fits: [PsFit; 3] = [ps_naive(&d).unwrap(), ps_rc(&d, &eb).unwrap(), ps_ml(&d, &eb, &sigma).unwrap()];
        for f in &fits {
            assert!(f.prob.iter().all(|&p| p > 0.0 && p < 1.0), "{:?}", f.kind);
            assert!(f.logit.iter().all(|l| l.is_finite()));
        }
    }
}
