#![allow(dead_code)]

use calibps::matching::{MatchResult, MatchSpec, COST_SCALE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn scaled(a: f64, b: f64) -> i64 {
    ((a - b).abs() * COST_SCALE).round() as i64
}

/// Small random matching problem.
#[derive(Debug, Clone)]
pub struct Instance {
    pub logits: Vec<f64>,
    pub treated: Vec<bool>,
    pub spec: MatchSpec,
}

pub fn random_instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..=8);
    let mut treated: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
    treated[0] = true;
    treated[1] = false;
    // A coarse grid makes ties common.
    let logits = (0..n).map(|_| f64::from(rng.random_range(-10..=10)) * 0.1).collect();
    let spec = MatchSpec {
        caliper_logits: [0.15, 0.25, 0.5, 1.0, 3.0][rng.random_range(0..5)],
        max_controls_per_treated: rng.random_range(1..=3),
        max_treated_per_control: rng.random_range(1..=3),
    };
    Instance { logits, treated, spec }
}

/// Best (controls placed, total scaled distance) over every full matching of
/// the caliper-eligible treated units, found by trying every subset of the
/// admissible treated-control pairs. `None` when no full matching exists.
pub fn enumerate_optimum(inst: &Instance) -> Option<(usize, i64)> {
    let n = inst.logits.len();
    let cal = inst.spec.caliper_logits;
    let within = |t: usize, c: usize| (inst.logits[t] - inst.logits[c]).abs() <= cal;
    let eligible: Vec<usize> =
        (0..n).filter(|&t| inst.treated[t] && (0..n).any(|c| !inst.treated[c] && within(t, c))).collect();
    let edges: Vec<(usize, usize, i64)> = eligible
        .iter()
        .flat_map(|&t| (0..n).filter(move |&c| !inst.treated[c]).map(move |c| (t, c)))
        .filter(|&(t, c)| within(t, c))
        .map(|(t, c)| (t, c, scaled(inst.logits[t], inst.logits[c])))
        .collect();
    let mut best: Option<(usize, i64)> = None;
    for mask in 0u32..(1 << edges.len()) {
        let mut deg = vec![0usize; n];
        let mut cost = 0;
        for (k, &(t, c, w)) in edges.iter().enumerate() {
            if mask >> k & 1 == 1 {
                deg[t] += 1;
                deg[c] += 1;
                cost += w;
            }
        }
        if eligible.iter().any(|&t| deg[t] == 0 || deg[t] > inst.spec.max_controls_per_treated) {
            continue;
        }
        if (0..n).any(|c| !inst.treated[c] && deg[c] > inst.spec.max_treated_per_control) {
            continue;
        }
        // every component a star: no edge joins two branching nodes
        let star = edges.iter().enumerate().all(|(k, &(t, c, _))| mask >> k & 1 == 0 || deg[t] < 2 || deg[c] < 2);
        if !star {
            continue;
        }
        let placed = (0..n).filter(|&c| !inst.treated[c] && deg[c] > 0).count();
        let better = match best {
            None => true,
            Some((bp, bc)) => placed > bp || (placed == bp && cost < bc),
        };
        if better {
            best = Some((placed, cost));
        }
    }
    best
}

/// Checks the structural invariants of a matching result; returns a
/// description of the first violation.
pub fn check_structure(inst: &Instance, r: &MatchResult) -> Result<(), String> {
    let n = inst.logits.len();
    let mut seen = vec![false; n];
    for s in &r.sets {
        if s.treated.is_empty() || s.controls.is_empty() {
            return Err(format!("empty side in {s:?}"));
        }
        if s.treated.len() != 1 && s.controls.len() != 1 {
            return Err(format!("not a star: {s:?}"));
        }
        if s.controls.len() > inst.spec.max_controls_per_treated || s.treated.len() > inst.spec.max_treated_per_control {
            return Err(format!("ratio bound broken: {s:?}"));
        }
        for &i in s.treated.iter().chain(&s.controls) {
            if seen[i] {
                return Err(format!("unit {i} in two sets"));
            }
            seen[i] = true;
        }
        for &t in &s.treated {
            if !inst.treated[t] {
                return Err(format!("control {t} listed as treated"));
            }
            for &c in &s.controls {
                if inst.treated[c] {
                    return Err(format!("treated {c} listed as control"));
                }
                if (inst.logits[t] - inst.logits[c]).abs() > inst.spec.caliper_logits {
                    return Err(format!("pair ({t}, {c}) outside the caliper"));
                }
            }
        }
    }
    for &u in &r.unmatched_treated {
        if seen[u] {
            return Err(format!("unmatched unit {u} appears in a set"));
        }
    }
    let covered = (0..n).filter(|&i| inst.treated[i] && seen[i]).count() + r.unmatched_treated.len();
    if r.feasible && covered != inst.treated.iter().filter(|&&t| t).count() {
        return Err("some treated unit is neither matched nor listed unmatched".into());
    }
    Ok(())
}
