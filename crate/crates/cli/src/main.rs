use std::path::PathBuf;
use std::process::ExitCode;

use calibps::io::{run, Mode, RunConfig};
use calibps::ps::PsKind;
use calibps::sim::SizeDesign;
use calibps::Error;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "calibps", version, about = "Propensity scores and full matching for error-prone group-average test scores")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the Monte Carlo study.
    Simulate(Common),
    /// Fit the HLM and the propensity-score models to a dataset.
    FitPs(Common),
    /// Full matching on each propensity score.
    Match(Common),
    /// Standardized differences before and after matching.
    Balance(Common),
    /// Effect estimates for every outcome cell.
    Estimate(Common),
    /// Compare the mixture approximation with quadrature on the audit grid.
    ApproxCheck(Common),
    /// Run whatever mode a config file (or manifest) specifies.
    Run(Common),
}

#[derive(Args)]
struct Common {
    /// TOML config file, or a manifest.toml written by an earlier run.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, short)]
    output: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
    /// Master seed of the simulation.
    #[arg(long)]
    seed: Option<u64>,
    /// Subgroup size design: all-large or mixed.
    #[arg(long)]
    design: Option<SizeDesign>,
    /// Number of Monte Carlo replications.
    #[arg(long)]
    reps: Option<usize>,
    /// Wide school-level CSV.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Propensity-score kinds to use (naive, rc, ml); repeatable.
    #[arg(long = "kind")]
    kinds: Vec<PsKind>,
    /// CSEM table for an assessment, as ASSESSMENT=PATH; repeatable.
    #[arg(long = "csem-table", value_parser = parse_table)]
    csem_tables: Vec<(String, PathBuf)>,
    /// Caliper in logit units.
    #[arg(long)]
    caliper: Option<f64>,
    #[arg(long)]
    max_controls: Option<usize>,
    #[arg(long)]
    max_treated: Option<usize>,
    /// Also report the unnormalized weighting estimator.
    #[arg(long)]
    unnormalized: bool,
}

fn parse_table(s: &str) -> Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((a, p)) if !a.is_empty() && !p.is_empty() => Ok((a.to_string(), PathBuf::from(p))),
        _ => Err(format!("expected ASSESSMENT=PATH, got '{s}'")),
    }
}

impl Common {
    fn into_config(self, mode: Option<Mode>) -> Result<RunConfig, Error> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None if mode.is_none() => return Err(Error::Usage("`run` needs --config".into())),
            None => RunConfig::default(),
        };
        if let Some(m) = mode {
            cfg.mode = m;
        }
        if let Some(o) = self.output {
            cfg.output = o;
        }
        if let Some(t) = self.threads {
            cfg.threads = t;
        }
        if let Some(s) = self.seed {
            cfg.sim.master_seed = s;
        }
        if let Some(d) = self.design {
            cfg.sim.design = d;
        }
        if let Some(r) = self.reps {
            cfg.sim.n_replications = r;
        }
        if let Some(d) = self.data {
            cfg.data = Some(d);
        }
        if !self.kinds.is_empty() {
            cfg.ps_kinds = self.kinds;
        }
        cfg.csem_tables.extend(self.csem_tables);
        if let Some(c) = self.caliper {
            cfg.matching.caliper = c;
        }
        if let Some(c) = self.max_controls {
            cfg.matching.max_controls_per_treated = c;
        }
        if let Some(t) = self.max_treated {
            cfg.matching.max_treated_per_control = t;
        }
        cfg.unnormalized_weighting |= self.unnormalized;
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let (mode, common) = match cli.command {
        Command::Simulate(c) => (Some(Mode::Simulate), c),
        Command::FitPs(c) => (Some(Mode::FitPs), c),
        Command::Match(c) => (Some(Mode::Match), c),
        Command::Balance(c) => (Some(Mode::Balance), c),
        Command::Estimate(c) => (Some(Mode::Estimate), c),
        Command::ApproxCheck(c) => (Some(Mode::ApproxCheck), c),
        Command::Run(c) => (None, c),
    };
    let result = common.into_config(mode).and_then(|cfg| run(&cfg));
    match result {
        Ok(report) => {
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            println!("wrote {} file(s) to {}", report.artifacts.len(), report.output.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("calibps: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
