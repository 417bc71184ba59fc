//! Optimal full matching within propensity-score calipers.
//!
//! Treated units with no control inside the caliper are set aside. The rest
//! are partitioned into stars (one treated with several controls, or one
//! control with several treated) by a min-cost flow whose objective is
//! lexicographic: first as many controls as possible are placed, then total
//! within-set logit distance is minimized.

mod flow;

use std::io::Write;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::ps::PsFit;
use crate::scalar::Real;

use flow::Network;

/// Distances are scaled to integers by this factor before solving.
pub const COST_SCALE: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchSpec {
    pub caliper_logits: f64,
    pub max_controls_per_treated: usize,
    pub max_treated_per_control: usize,
}

impl Default for MatchSpec {
    fn default() -> Self {
        MatchSpec { caliper_logits: 0.5, max_controls_per_treated: 5, max_treated_per_control: 10 }
    }
}

impl MatchSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.caliper_logits > 0.0 && self.caliper_logits.is_finite()) {
            return Err(Error::usage("caliper must be a positive finite number of logits"));
        }
        if self.max_controls_per_treated == 0 || self.max_treated_per_control == 0 {
            return Err(Error::usage("ratio bounds must be at least 1"));
        }
        Ok(())
    }
}

/// One matched set; members are record indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchedSet {
    pub treated: Vec<usize>,
    pub controls: Vec<usize>,
}

impl MatchedSet {
    /// Odds of treatment within the set; the weight of each control.
    pub fn control_weight(&self) -> f64 {
        self.treated.len() as f64 / self.controls.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub sets: Vec<MatchedSet>,
    pub unmatched_treated: Vec<usize>,
    /// Sum of within-set treated-control logit distances.
    pub total_distance: f64,
    /// The same objective in scaled integer units.
    pub scaled_cost: i64,
    pub feasible: bool,
}

impl MatchResult {
    pub fn n_matched_treated(&self) -> usize {
        self.sets.iter().map(|s| s.treated.len()).sum()
    }

    pub fn n_matched_controls(&self) -> usize {
        self.sets.iter().map(|s| s.controls.len()).sum()
    }

    /// Per-record weight: 1 for matched treated, set odds for matched
    /// controls, `None` for records outside every set.
    pub fn weights(&self, n_records: usize) -> Vec<Option<f64>> {
        let mut w = vec![None; n_records];
        for s in &self.sets {
            let cw = s.control_weight();
            for &t in &s.treated {
                w[t] = Some(1.0);
            }
            for &c in &s.controls {
                w[c] = Some(cw);
            }
        }
        w
    }

    /// Weights restricted to records flagged `available`: sets lacking an
    /// available treated or an available control are dropped, and control
    /// weights are recomputed from the available members.
    pub fn weights_available(&self, available: &[bool]) -> Vec<Option<f64>> {
        let mut w = vec![None; available.len()];
        for s in &self.sets {
            let nt = s.treated.iter().filter(|&&i| available[i]).count();
            let nc = s.controls.iter().filter(|&&i| available[i]).count();
            if nt == 0 || nc == 0 {
                continue;
            }
            let cw = nt as f64 / nc as f64;
            for &t in s.treated.iter().filter(|&&i| available[i]) {
                w[t] = Some(1.0);
            }
            for &c in s.controls.iter().filter(|&&i| available[i]) {
                w[c] = Some(cw);
            }
        }
        w
    }

    /// Set index for each record.
    pub fn set_of(&self, n_records: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; n_records];
        for (k, s) in self.sets.iter().enumerate() {
            for &i in s.treated.iter().chain(&s.controls) {
                out[i] = Some(k);
            }
        }
        out
    }
}

pub(crate) fn scaled_distance(a: f64, b: f64) -> i64 {
    ((a - b).abs() * COST_SCALE).round() as i64
}

/// Full matching on PS logits.
pub fn full_match<T: Real>(ps: &PsFit<T>, dataset: &Dataset, spec: &MatchSpec) -> Result<MatchResult> {
    if ps.logit.len() != dataset.len() {
        return Err(Error::data("propensity scores do not cover every record"));
    }
    full_match_logits(&ps.logits_f64(), &dataset.treatment(), spec)
}

/// Treated units with at least one control within the caliper.
pub fn caliper_eligible(logits: &[f64], treated: &[bool], caliper: f64) -> Vec<bool> {
    let mut controls: Vec<f64> = logits.iter().zip(treated).filter(|(_, &t)| !t).map(|(&l, _)| l).collect();
    controls.sort_by(f64::total_cmp);
    logits
        .iter()
        .zip(treated)
        .map(|(&l, &t)| t && nearest_gap(&controls, l) <= caliper)
        .collect()
}

fn nearest_gap(sorted: &[f64], x: f64) -> f64 {
    let i = sorted.partition_point(|&v| v < x);
    let mut best = f64::INFINITY;
    if i < sorted.len() {
        best = sorted[i] - x;
    }
    if i > 0 {
        best = best.min(x - sorted[i - 1]);
    }
    best
}

/// Number of treated units left unmatched at each caliper. Exact whenever
/// the ratio bounds leave the matching feasible, which holds in particular
/// when a control may absorb every treated unit.
pub fn unmatched_counts(logits: &[f64], treated: &[bool], calipers: &[f64]) -> Vec<usize> {
    calipers
        .iter()
        .map(|&c| {
            let elig = caliper_eligible(logits, treated, c);
            treated.iter().zip(&elig).filter(|(&t, &e)| t && !e).count()
        })
        .collect()
}

pub fn full_match_logits(logits: &[f64], treated: &[bool], spec: &MatchSpec) -> Result<MatchResult> {
    spec.validate()?;
    if logits.len() != treated.len() {
        return Err(Error::data("logit and treatment vectors differ in length"));
    }
    if let Some(i) = logits.iter().position(|l| !l.is_finite()) {
        return Err(Error::numerical(format!("non-finite PS logit for record {i}")));
    }
    if !treated.iter().any(|&t| t) || treated.iter().all(|&t| t) {
        return Err(Error::data("full matching needs both treated and control units"));
    }
    let cal = spec.caliper_logits;
    let eligible = caliper_eligible(logits, treated, cal);
    let unmatched_treated: Vec<usize> = (0..logits.len()).filter(|&i| treated[i] && !eligible[i]).collect();
    let tr: Vec<usize> = (0..logits.len()).filter(|&i| eligible[i]).collect();

    // Candidate edges, in treated-major then record order.
    let mut edges: Vec<(usize, usize, i64)> = Vec::new();
    let mut control_used = vec![false; logits.len()];
    for (ti, &t) in tr.iter().enumerate() {
        for c in 0..logits.len() {
            if !treated[c] && (logits[t] - logits[c]).abs() <= cal {
                edges.push((ti, c, scaled_distance(logits[t], logits[c])));
                control_used[c] = true;
            }
        }
    }
    let ctrl: Vec<usize> = (0..logits.len()).filter(|&i| control_used[i]).collect();
    let mut ctrl_node = vec![usize::MAX; logits.len()];
    for (k, &c) in ctrl.iter().enumerate() {
        ctrl_node[c] = k;
    }
    let (nt, nc) = (tr.len(), ctrl.len());
    if nt == 0 {
        return Ok(MatchResult {
            sets: Vec::new(),
            unmatched_treated,
            total_distance: 0.0,
            scaled_cost: 0,
            feasible: true,
        });
    }

    let max_c = spec.max_controls_per_treated as i64;
    let max_t = spec.max_treated_per_control.min(nt) as i64;
    let source = 0;
    let t_node = |k: usize| 1 + k;
    let c_node = |k: usize| 1 + nt + k;
    let overflow = 1 + nt + nc;
    let sink = overflow + 1;
    let bonus = edges.iter().map(|e| e.2).sum::<i64>() + 1;

    let mut net = Network::new(sink + 1);
    for k in 0..nt {
        net.add_arc(source, t_node(k), max_c, 0);
    }
    let edge_arcs: Vec<usize> = edges
        .iter()
        .map(|&(ti, c, w)| net.add_arc(t_node(ti), c_node(ctrl_node[c]), 1, w))
        .collect();
    for k in 0..nt {
        if max_c > 1 {
            net.add_arc(t_node(k), overflow, max_c - 1, 0);
        }
    }
    for k in 0..nc {
        net.add_arc(c_node(k), sink, 1, -bonus);
        if max_t > 1 {
            net.add_arc(c_node(k), overflow, max_t - 1, 0);
        }
    }
    net.add_arc(overflow, sink, max_c * nt as i64, 0);

    let required = max_c * nt as i64;
    let out = net.min_cost_flow(source, sink, required);
    if out.flow < required {
        return Ok(MatchResult {
            sets: Vec::new(),
            unmatched_treated,
            total_distance: 0.0,
            scaled_cost: 0,
            feasible: false,
        });
    }

    let mut chosen: Vec<(usize, usize, i64)> = edges
        .iter()
        .zip(&edge_arcs)
        .filter(|(_, &a)| net.flow_on(a) > 0)
        .map(|(&(ti, c, w), _)| (tr[ti], c, w))
        .collect();
    prune_to_stars(&mut chosen, logits.len());
    let sets = collect_stars(&chosen, logits.len());
    let scaled_cost = chosen.iter().map(|e| e.2).sum();
    let total_distance = chosen.iter().map(|&(t, c, _)| (logits[t] - logits[c]).abs()).sum();
    Ok(MatchResult { sets, unmatched_treated, total_distance, scaled_cost, feasible: true })
}

/// Drops edges whose two endpoints both have another edge; what remains is
/// a forest of stars with the same coverage and no larger cost.
fn prune_to_stars(edges: &mut Vec<(usize, usize, i64)>, n: usize) {
    let mut deg = vec![0usize; n];
    for &(t, c, _) in edges.iter() {
        deg[t] += 1;
        deg[c] += 1;
    }
    // Most expensive edges go first so ties resolve deterministically.
    let mut order: Vec<usize> = (0..edges.len()).collect();
    order.sort_by_key(|&k| (std::cmp::Reverse(edges[k].2), k));
    let mut keep = vec![true; edges.len()];
    for k in order {
        let (t, c, _) = edges[k];
        if deg[t] >= 2 && deg[c] >= 2 {
            keep[k] = false;
            deg[t] -= 1;
            deg[c] -= 1;
        }
    }
    let mut it = keep.iter();
    edges.retain(|_| *it.next().unwrap());
}

fn collect_stars(edges: &[(usize, usize, i64)], n: usize) -> Vec<MatchedSet> {
    let mut deg = vec![0usize; n];
    for &(t, c, _) in edges {
        deg[t] += 1;
        deg[c] += 1;
    }
    // Each edge belongs to the star centred at its higher-degree endpoint
    // (the treated end for a 1:1 pair).
    let mut by_center: std::collections::BTreeMap<(usize, bool), Vec<usize>> = Default::default();
    for &(t, c, _) in edges {
        if deg[c] > 1 {
            by_center.entry((c, false)).or_default().push(t);
        } else {
            by_center.entry((t, true)).or_default().push(c);
        }
    }
    let mut sets: Vec<MatchedSet> = by_center
        .into_iter()
        .map(|((center, is_treated), mut leaves)| {
            leaves.sort_unstable();
            if is_treated {
                MatchedSet { treated: vec![center], controls: leaves }
            } else {
                MatchedSet { treated: leaves, controls: vec![center] }
            }
        })
        .collect();
    sets.sort_by_key(|s| s.treated.iter().chain(&s.controls).copied().min());
    sets
}

/// Kish effective sample size of a matched sample: matched treated count
/// plus (sum of control weights)^2 / (sum of squared control weights).
pub fn effective_sample_size(result: &MatchResult) -> f64 {
    let mut n_t = 0.0;
    let (mut s1, mut s2) = (0.0, 0.0);
    for s in &result.sets {
        n_t += s.treated.len() as f64;
        let w = s.control_weight();
        s1 += w * s.controls.len() as f64;
        s2 += w * w * s.controls.len() as f64;
    }
    if s2 > 0.0 {
        n_t + s1 * s1 / s2
    } else {
        n_t
    }
}

/// Matched sets as CSV: `set_id,school_id,role,weight`.
pub fn write_matched_sets<W: Write>(out: W, result: &MatchResult, dataset: &Dataset) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(["set_id", "school_id", "role", "weight"])?;
    for (k, s) in result.sets.iter().enumerate() {
        let id = (k + 1).to_string();
        for &t in &s.treated {
            wtr.write_record([id.as_str(), &dataset.records[t].school_id, "treated", "1"])?;
        }
        let w = s.control_weight().to_string();
        for &c in &s.controls {
            wtr.write_record([id.as_str(), &dataset.records[c].school_id, "control", &w])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(cal: f64) -> MatchSpec {
        MatchSpec { caliper_logits: cal, ..MatchSpec::default() }
    }

    #[test]
    fn forced_pair() {
        let r = full_match_logits(&[0.0, 0.3], &[true, false], &spec(0.5)).unwrap();
        assert_eq!(r.sets, vec![MatchedSet { treated: vec![0], controls: vec![1] }]);
        assert_eq!(r.weights(2), vec![Some(1.0), Some(1.0)]);
        assert!((r.total_distance - 0.3).abs() < 1e-12);
        assert!(r.feasible);
    }

    #[test]
    fn caliper_exclusion() {
        let r = full_match_logits(&[0.0, 1.2], &[true, false], &spec(1.0)).unwrap();
        assert!(r.sets.is_empty());
        assert_eq!(r.unmatched_treated, vec![0]);
    }

    #[test]
    fn odds_weights_follow_set_shape() {
        // one treated near two controls, two treated near one control
        let logits = [0.0, 0.1, -0.1, 5.0, 5.05, 5.1];
        let treated = [true, false, false, true, true, false];
        let r = full_match_logits(&logits, &treated, &spec(0.5)).unwrap();
        let w = r.weights(6);
        assert_eq!(w, vec![Some(1.0), Some(0.5), Some(0.5), Some(1.0), Some(1.0), Some(2.0)]);
    }

    #[test]
    fn ratio_infeasibility_is_reported() {
        let s = MatchSpec { caliper_logits: 1.0, max_controls_per_treated: 5, max_treated_per_control: 2 };
        let r = full_match_logits(&[0.0, 0.1, 0.2, 0.15], &[true, true, true, false], &s).unwrap();
        assert!(!r.feasible);
        assert!(r.sets.is_empty());
    }

    #[test]
    fn needs_both_groups() {
        assert!(full_match_logits(&[0.0, 0.1], &[true, true], &spec(1.0)).is_err());
        assert!(full_match_logits(&[0.0], &[true], &MatchSpec { caliper_logits: 0.0, ..spec(1.0) }).is_err());
    }

    #[test]
    fn kish_examples() {
        let pairs = MatchResult {
            sets: (0..5).map(|k| MatchedSet { treated: vec![2 * k], controls: vec![2 * k + 1] }).collect(),
            unmatched_treated: vec![],
            total_distance: 0.0,
            scaled_cost: 0,
            feasible: true,
        };
        assert_eq!(effective_sample_size(&pairs), 10.0);
        let one_two = MatchResult {
            sets: vec![MatchedSet { treated: vec![0], controls: vec![1, 2] }],
            ..pairs.clone()
        };
        assert!((effective_sample_size(&one_two) - 3.0).abs() < 1e-12);
        let empty = MatchResult { sets: vec![], ..pairs };
        assert_eq!(effective_sample_size(&empty), 0.0);
    }

    #[test]
    fn unmatched_counts_agree_with_solver() {
        let logits = [0.0, 0.45, 2.0, 3.2, 0.3, 2.6];
        let treated = [true, true, true, true, false, false];
        let counts = unmatched_counts(&logits, &treated, &[0.5, 1.0]);
        for (k, cal) in [0.5, 1.0].into_iter().enumerate() {
            let s = MatchSpec { caliper_logits: cal, max_controls_per_treated: 5, max_treated_per_control: 4 };
            let r = full_match_logits(&logits, &treated, &s).unwrap();
            assert_eq!(r.unmatched_treated.len(), counts[k]);
        }
    }
}
