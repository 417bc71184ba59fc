//! Data-generating process for the replication study.

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Beta, Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::SimConfig;
use crate::data::{CellKey, Dataset, SchoolRecord, SubgroupCell};
use crate::error::{Error, Result};
use crate::scalar::inv_logit;

pub const ASSESSMENT: &str = "test";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SizeDesign {
    /// Four subgroups with sizes uniform on 1..=120.
    AllLarge,
    /// Two moderate subgroups (1..=120) and two small ones (1..=60).
    Mixed,
}

impl SizeDesign {
    pub fn as_str(self) -> &'static str {
        match self {
            SizeDesign::AllLarge => "all-large",
            SizeDesign::Mixed => "mixed",
        }
    }

    pub fn classes(self) -> [SizeClass; 4] {
        match self {
            SizeDesign::AllLarge => [SizeClass::Large; 4],
            SizeDesign::Mixed => [SizeClass::Moderate, SizeClass::Moderate, SizeClass::Small, SizeClass::Small],
        }
    }
}

impl std::str::FromStr for SizeDesign {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all-large" | "large" => Ok(SizeDesign::AllLarge),
            "mixed" => Ok(SizeDesign::Mixed),
            _ => Err(Error::usage(format!("unknown size design '{s}' (all-large|mixed)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SizeClass {
    Large,
    Moderate,
    Small,
}

impl SizeClass {
    pub fn as_str(self) -> &'static str {
        match self {
            SizeClass::Large => "large",
            SizeClass::Moderate => "moderate",
            SizeClass::Small => "small",
        }
    }
}

/// Distribution of a subgroup's test-taker count on `1..=max`.
#[derive(Debug, Clone)]
pub struct SizeLaw {
    max: u32,
    /// Geometric ratio `q` in p(m) ∝ q^m; `1` gives the uniform law.
    ratio: f64,
    index: WeightedIndex<f64>,
}

impl SizeLaw {
    pub fn uniform(max: u32) -> Self {
        Self::geometric(max, 1.0)
    }

    pub fn geometric(max: u32, ratio: f64) -> Self {
        let w: Vec<f64> = (1..=max).map(|m| ratio.powi(m as i32 - 1)).collect();
        let index = WeightedIndex::new(&w).expect("size law weights are positive");
        SizeLaw { max, ratio, index }
    }

    /// Truncated geometric law on `1..=max` whose mean equals `mean`,
    /// found by bisection on the ratio.
    pub fn geometric_with_mean(max: u32, mean: f64) -> Result<Self> {
        let uniform_mean = (f64::from(max) + 1.0) / 2.0;
        if !(mean > 1.0 && mean <= uniform_mean) {
            return Err(Error::usage(format!(
                "size-law mean {mean} must lie in (1, {uniform_mean}] for support 1..={max}"
            )));
        }
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if geometric_mean(max, mid) < mean {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(Self::geometric(max, 0.5 * (lo + hi)))
    }

    pub fn max(&self) -> u32 {
        self.max
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    pub fn mean(&self) -> f64 {
        geometric_mean(self.max, self.ratio)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u32 {
        self.index.sample(rng) as u32 + 1
    }
}

fn geometric_mean(max: u32, q: f64) -> f64 {
    let (mut s0, mut s1, mut w) = (0.0, 0.0, 1.0);
    for m in 1..=max {
        s0 += w;
        s1 += w * f64::from(m);
        w *= q;
    }
    s1 / s0
}

/// Size laws per cell for a design.
pub fn size_laws(config: &SimConfig) -> Result<[SizeLaw; 4]> {
    let large = SizeLaw::uniform(120);
    let moderate = SizeLaw::geometric_with_mean(120, config.moderate_mean)?;
    let small = SizeLaw::geometric_with_mean(60, config.small_mean)?;
    Ok(config.design.classes().map(|c| match c {
        SizeClass::Large => large.clone(),
        SizeClass::Moderate => moderate.clone(),
        SizeClass::Small => small.clone(),
    }))
}

/// A generated dataset plus the latent quantities behind it, indexed
/// `[school][subgroup]`.
#[derive(Debug, Clone)]
pub struct Population {
    pub dataset: Dataset,
    pub true_scores: Vec<Vec<f64>>,
    pub errors: Vec<Vec<f64>>,
    /// Individual treatment effects g(Z, X).
    pub effects: Vec<Vec<f64>>,
    pub y0: Vec<Vec<f64>>,
    pub y1: Vec<Vec<f64>>,
    /// Assignment probabilities.
    pub propensity: Vec<f64>,
}

impl Population {
    /// Mean individual effect over treated schools' cells.
    pub fn finite_ett(&self) -> f64 {
        let (mut s, mut n) = (0.0, 0usize);
        for (rec, g) in self.dataset.records.iter().zip(&self.effects) {
            if rec.is_treated() {
                s += g.iter().sum::<f64>();
                n += g.len();
            }
        }
        s / n as f64
    }

    pub fn true_scores_opt(&self) -> Vec<Vec<Option<f64>>> {
        self.true_scores.iter().map(|r| r.iter().map(|&v| Some(v)).collect()).collect()
    }
}

/// Stream for replication `r` of a study seeded by `master_seed`.
pub fn replication_rng(master_seed: u64, r: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(master_seed);
    rng.set_stream(r);
    rng
}

/// Streams used by effect calibration, disjoint from replication streams.
fn calibration_rng(seed: u64, j: u64) -> ChaCha12Rng {
    replication_rng(seed, (1 << 63) | j)
}

pub fn subgroup_keys(n: usize) -> Vec<CellKey> {
    (1..=n).map(|k| CellKey::new(format!("g{k}"), ASSESSMENT)).collect()
}

pub fn effect(amplitude: f64, scale: f64, x: f64) -> f64 {
    amplitude * (-x / scale).exp()
}

/// Generates one population with stream `seed`.
pub fn generate_population(config: &SimConfig, seed: u64) -> Result<Population> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    generate_with_rng(config, &size_laws(config)?, &mut rng)
}

/// Generates a population drawing from `rng`; the effect amplitude is
/// `config.effect_amplitude` (zero when not yet calibrated).
pub fn generate_with_rng<R: Rng + ?Sized>(config: &SimConfig, laws: &[SizeLaw; 4], rng: &mut R) -> Result<Population> {
    config.validate()?;
    let n = config.n_schools;
    let q = config.n_covariates;
    let amp = config.effect_amplitude.unwrap_or(0.0);
    let beta = Beta::new(config.covariate_alpha, config.covariate_beta).map_err(|e| Error::usage(e.to_string()))?;
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");

    let mut z = vec![vec![0.0; q]; n];
    let mut sizes = vec![[0u32; 4]; n];
    let mut x = vec![vec![0.0; 4]; n];
    let mut eps = vec![vec![0.0; 4]; n];
    let mut xi = vec![vec![0.0; 4]; n];
    for i in 0..n {
        for v in z[i].iter_mut() {
            *v = beta.sample(rng);
        }
        let fixed = config.gamma0 + z[i].iter().zip(&config.gamma_z).map(|(a, b)| a * b).sum::<f64>();
        let dc = config.tau1 * std_normal.sample(rng);
        for k in 0..4 {
            let ds = config.tau2 * std_normal.sample(rng);
            let m = laws[k].sample(rng);
            let se = config.sigma / f64::from(m).sqrt();
            sizes[i][k] = m;
            x[i][k] = fixed + dc + ds;
            eps[i][k] = se * std_normal.sample(rng);
            xi[i][k] = se * std_normal.sample(rng);
        }
    }
    let w: Vec<Vec<f64>> = (0..n).map(|i| (0..4).map(|k| x[i][k] + eps[i][k]).collect()).collect();
    // Keep W - X exactly equal to the stored error after rounding.
    for i in 0..n {
        for k in 0..4 {
            eps[i][k] = w[i][k] - x[i][k];
        }
    }
    let wbar: Vec<f64> = (0..4).map(|k| w.iter().map(|r| r[k]).sum::<f64>() / n as f64).collect();
    let zbar: Vec<f64> = (0..q).map(|j| z.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();

    let keys = subgroup_keys(4);
    let mut records = Vec::with_capacity(n);
    let (mut effects, mut y0, mut y1, mut propensity) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for i in 0..n {
        let eta = config.beta0
            + (0..4).map(|k| (w[i][k] - wbar[k]) * config.beta_w[k]).sum::<f64>()
            + (0..q).map(|j| (z[i][j] - zbar[j]) * config.beta_z[j]).sum::<f64>();
        let p = inv_logit(eta);
        let t = rng.random::<f64>() < p;
        let g: Vec<f64> = x[i].iter().map(|&v| effect(amp, config.effect_scale, v)).collect();
        let r0: Vec<f64> = (0..4).map(|k| x[i][k] + xi[i][k]).collect();
        let r1: Vec<f64> = (0..4).map(|k| r0[k] + g[k]).collect();
        let cells = (0..4)
            .map(|k| SubgroupCell {
                subgroup: keys[k].subgroup.clone(),
                assessment: ASSESSMENT.to_string(),
                size: sizes[i][k],
                obtained_avg: Some(w[i][k]),
                csem: Some(config.sigma),
                outcome_avg: Some(if t { r1[k] } else { r0[k] }),
            })
            .collect();
        records.push(SchoolRecord {
            school_id: format!("{:04}", i + 1),
            treatment: t as u8,
            covariates: z[i].clone(),
            cells,
        });
        effects.push(g);
        y0.push(r0);
        y1.push(r1);
        propensity.push(p);
    }
    let names = (1..=q).map(|j| format!("z{j}")).collect();
    Ok(Population {
        dataset: Dataset::new(records, names, keys),
        true_scores: x,
        errors: eps,
        effects,
        y0,
        y1,
        propensity,
    })
}

/// Result of calibrating the effect amplitude.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    pub amplitude: f64,
    /// Monte Carlo mean of exp(-X / scale) over treated cells.
    pub unit_effect: f64,
    pub n_treated_cells: usize,
    pub bisection_steps: usize,
}

/// Finds the amplitude `a` for which the mean of `a * exp(-X / scale)` over
/// simulated treated cells equals the target ETT, by bisection on the Monte
/// Carlo mean computed from at least `config.calibration_cells` cells.
pub fn calibrate_effect(config: &SimConfig, seed: u64) -> Result<Calibration> {
    let laws = size_laws(config)?;
    let mut base = config.clone();
    base.effect_amplitude = Some(0.0);
    let (mut sum, mut cells) = (0.0, 0usize);
    let mut j = 0u64;
    while cells < config.calibration_cells {
        let pop = generate_with_rng(&base, &laws, &mut calibration_rng(seed, j))?;
        for (rec, x) in pop.dataset.records.iter().zip(&pop.true_scores) {
            if rec.is_treated() {
                sum += x.iter().map(|&v| effect(1.0, config.effect_scale, v)).sum::<f64>();
                cells += x.len();
            }
        }
        j += 1;
        if j > 1_000_000 {
            return Err(Error::numerical("calibration drew no treated cells"));
        }
    }
    let unit = sum / cells as f64;
    let target = config.target_ett;
    let ett = |a: f64| a * unit;
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    let mut grow = 0;
    while (ett(hi) - target) * (ett(lo) - target) > 0.0 {
        hi *= 2.0;
        grow += 1;
        if grow > 200 || !hi.is_finite() {
            return Err(Error::numerical(format!(
                "could not bracket effect amplitude: target {target}, unit effect {unit:e}, tried up to {hi:e}"
            )));
        }
    }
    let mut steps = 0;
    while hi - lo > 1e-12 * hi.max(1.0) && steps < 200 {
        let mid = 0.5 * (lo + hi);
        if (ett(mid) - target) * (ett(lo) - target) <= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
        steps += 1;
    }
    Ok(Calibration { amplitude: 0.5 * (lo + hi), unit_effect: unit, n_treated_cells: cells, bisection_steps: steps })
}
