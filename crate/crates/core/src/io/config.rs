use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::matching::MatchSpec;
use crate::ps::PsKind;
use crate::sim::SimConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Simulate,
    FitPs,
    Match,
    Balance,
    Estimate,
    ApproxCheck,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Simulate => "simulate",
            Mode::FitPs => "fit-ps",
            Mode::Match => "match",
            Mode::Balance => "balance",
            Mode::Estimate => "estimate",
            Mode::ApproxCheck => "approx-check",
        }
    }

    fn needs_data(self) -> bool {
        matches!(self, Mode::FitPs | Mode::Match | Mode::Balance | Mode::Estimate)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchConfig {
    pub caliper: f64,
    pub max_controls_per_treated: usize,
    pub max_treated_per_control: usize,
}

impl Default for MatchConfig {
    fn default() -> Self {
        let d = MatchSpec::default();
        MatchConfig {
            caliper: d.caliper_logits,
            max_controls_per_treated: d.max_controls_per_treated,
            max_treated_per_control: d.max_treated_per_control,
        }
    }
}

impl MatchConfig {
    pub fn spec(&self) -> MatchSpec {
        MatchSpec {
            caliper_logits: self.caliper,
            max_controls_per_treated: self.max_controls_per_treated,
            max_treated_per_control: self.max_treated_per_control,
        }
    }
}

/// Everything a run depends on. Loaded from TOML; unknown keys are errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub output: PathBuf,
    /// Wide CSV dataset for the data modes.
    pub data: Option<PathBuf>,
    /// Per-assessment `score,csem` tables. When given (for every
    /// assessment) the HLM is fit in two passes from the tables instead of
    /// using per-cell CSEMs.
    pub csem_tables: BTreeMap<String, PathBuf>,
    pub ps_kinds: Vec<PsKind>,
    #[serde(rename = "match")]
    pub matching: MatchConfig,
    /// Also report odds weighting divided by the treated count.
    pub unnormalized_weighting: bool,
    /// Worker threads for replications; results do not depend on it.
    pub threads: usize,
    /// Bound on the mixture-vs-quadrature error for `approx-check`.
    pub approx_tolerance: f64,
    pub sim: SimConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: Mode::Simulate,
            output: PathBuf::from("out"),
            data: None,
            csem_tables: BTreeMap::new(),
            ps_kinds: PsKind::ALL.to_vec(),
            matching: MatchConfig::default(),
            unnormalized_weighting: false,
            threads: 1,
            approx_tolerance: crate::ps::mixture::APPROX_TOLERANCE,
            sim: SimConfig::default(),
        }
    }
}

#[derive(Deserialize)]
struct ManifestFile {
    config: RunConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let value: toml::Table = toml::from_str(text).map_err(|e| Error::usage(format!("config: {e}")))?;
        if value.contains_key("manifest") {
            let m: ManifestFile = toml::from_str(text).map_err(|e| Error::usage(format!("manifest: {e}")))?;
            return Ok(m.config);
        }
        toml::from_str(text).map_err(|e| Error::usage(format!("config: {e}")))
    }

    /// Loads a config file or a run manifest.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode.needs_data() {
            let data = self
                .data
                .as_ref()
                .ok_or_else(|| Error::usage(format!("mode {} needs a dataset (--data)", self.mode.as_str())))?;
            if !data.exists() {
                return Err(Error::usage(format!("dataset {} does not exist", data.display())));
            }
            for (a, p) in &self.csem_tables {
                if !p.exists() {
                    return Err(Error::usage(format!("CSEM table for {a} ({}) does not exist", p.display())));
                }
            }
            if self.ps_kinds.is_empty() {
                return Err(Error::usage("no PS kinds requested"));
            }
        }
        if matches!(self.mode, Mode::Match | Mode::Balance | Mode::Estimate) {
            self.matching.spec().validate()?;
        }
        if self.mode == Mode::Simulate {
            self.sim.validate()?;
        }
        if self.threads == 0 {
            return Err(Error::usage("threads must be at least 1"));
        }
        if !(self.approx_tolerance > 0.0) {
            return Err(Error::usage("approx_tolerance must be positive"));
        }
        Ok(())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
