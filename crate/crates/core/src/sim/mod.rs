//! Monte Carlo replication study: data generation, effect calibration and
//! the per-replication pipeline (HLM, three propensity scores, matching,
//! balance and effect estimation).

mod dgp;
mod study;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use dgp::{
    calibrate_effect, effect, generate_population, generate_with_rng, replication_rng, size_laws,
    subgroup_keys, Calibration, Population, SizeClass, SizeDesign, SizeLaw, ASSESSMENT,
};
pub use study::{
    analyze_population, dgp_diagnostics, run_replication, run_study, summarize, BalanceCell, DgpDiagnostics, KindOutcome,
    McSummary, PerformanceCell, ReplicationRecord, StudyOutput,
};

/// Simulation settings. Defaults reproduce the published design; fields
/// not given in a config file keep their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub n_schools: usize,
    pub n_covariates: usize,
    pub covariate_alpha: f64,
    pub covariate_beta: f64,
    pub gamma0: f64,
    pub gamma_z: Vec<f64>,
    pub tau1: f64,
    pub tau2: f64,
    pub sigma: f64,
    pub beta0: f64,
    pub beta_w: Vec<f64>,
    pub beta_z: Vec<f64>,
    pub design: SizeDesign,
    /// Target mean of the moderate size law on 1..=120.
    pub moderate_mean: f64,
    /// Target mean of the small size law on 1..=60.
    pub small_mean: f64,
    pub calipers: Vec<f64>,
    /// Caliper whose matched samples feed balance and effect summaries.
    pub primary_caliper: f64,
    pub max_controls_per_treated: usize,
    /// `None` lets one control absorb every treated school.
    pub max_treated_per_control: Option<usize>,
    /// Effect g = amplitude * exp(-X / effect_scale); calibrated when `None`.
    pub effect_amplitude: Option<f64>,
    pub effect_scale: f64,
    pub target_ett: f64,
    pub calibration_cells: usize,
    pub n_replications: usize,
    pub master_seed: u64,
}

/// Equal covariate slopes giving V(Z gamma_z) / V(X) = 0.1 under
/// Beta(1.5, 0.5) covariates (variance 1/16).
fn default_gamma_z(tau1: f64, tau2: f64, q: usize) -> f64 {
    let v_random = tau1 * tau1 + tau2 * tau2;
    let v_fixed = v_random / 9.0;
    (v_fixed / (q as f64 * 0.0625)).sqrt()
}

pub const DEFAULT_MEAN_SCORE: f64 = 1500.0;

impl Default for SimConfig {
    fn default() -> Self {
        let (tau1, tau2, q) = (40.229, 59.149, 6);
        let gz = default_gamma_z(tau1, tau2, q);
        SimConfig {
            n_schools: 500,
            n_covariates: q,
            covariate_alpha: 1.5,
            covariate_beta: 0.5,
            gamma0: DEFAULT_MEAN_SCORE - 0.75 * gz * q as f64,
            gamma_z: vec![gz; q],
            tau1,
            tau2,
            sigma: 250.0,
            beta0: -1.386,
            beta_w: vec![-0.0115; 4],
            beta_z: vec![0.05, 0.05, 0.0, 0.0, 0.0, 0.0],
            design: SizeDesign::Mixed,
            moderate_mean: 44.0,
            small_mean: 6.0,
            calipers: vec![0.5, 0.7, 1.0],
            primary_caliper: 1.0,
            max_controls_per_treated: 5,
            max_treated_per_control: None,
            effect_amplitude: None,
            effect_scale: 1000.0,
            target_ett: 5.5,
            calibration_cells: 200_000,
            n_replications: 200,
            master_seed: 20240501,
        }
    }
}

impl SimConfig {
    pub fn with_design(design: SizeDesign) -> Self {
        SimConfig { design, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::usage(format!("invalid simulation config: {m}")));
        if self.n_schools < 10 {
            return bad("n_schools must be at least 10");
        }
        if self.gamma_z.len() != self.n_covariates || self.beta_z.len() != self.n_covariates {
            return bad("gamma_z and beta_z must have n_covariates entries");
        }
        if self.beta_w.len() != 4 {
            return bad("beta_w must have 4 entries (one per subgroup)");
        }
        if !(self.covariate_alpha > 0.0 && self.covariate_beta > 0.0) {
            return bad("covariate Beta parameters must be positive");
        }
        if !(self.tau1 >= 0.0 && self.tau2 >= 0.0 && self.sigma > 0.0) {
            return bad("tau1, tau2 must be nonnegative and sigma positive");
        }
        let finite = [self.gamma0, self.beta0, self.effect_scale, self.target_ett]
            .iter()
            .chain(&self.gamma_z)
            .chain(&self.beta_w)
            .chain(&self.beta_z)
            .all(|v| v.is_finite());
        if !finite || self.effect_scale == 0.0 {
            return bad("coefficients must be finite and effect_scale nonzero");
        }
        if self.calipers.iter().any(|&c| !(c > 0.0 && c.is_finite())) || !(self.primary_caliper > 0.0) {
            return bad("calipers must be positive");
        }
        if self.max_controls_per_treated == 0 || self.max_treated_per_control == Some(0) {
            return bad("ratio bounds must be at least 1");
        }
        if self.effect_amplitude.is_some_and(|a| !a.is_finite()) {
            return bad("effect_amplitude must be finite");
        }
        Ok(())
    }
}
