//! Run configuration: command-line flags, config files, and the effective
//! config echoed next to the results.
//!
//! The effective config is itself a valid `--config` input: reloading it
//! reproduces the run byte for byte (for noiseless scenarios, and stream for
//! stream otherwise).

use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::Args;
use driftless::basis::BasisFamily;
use driftless::scenarios::{load_scenario, Scenario, ScenarioOverrides};
use serde::{Deserialize, Serialize};

/// Schema version stamped into every emitted file.
pub const SCHEMA_VERSION: u32 = 1;

/// Flags of the `run` subcommand.
#[derive(Debug, Args)]
pub struct RunArgs {
    /// Built-in scenario to run (linear_2x2, bloch, prc, prc_noise).
    #[arg(long, conflicts_with = "config")]
    pub scenario: Option<String>,

    /// Path to a config file (as written to effective_config.json).
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Output directory for all result files.
    #[arg(long)]
    pub out: PathBuf,

    /// Seed driving anchor sampling and noise streams.
    #[arg(long)]
    pub seed: Option<u64>,

    /// Sampling window t_s in seconds.
    #[arg(long)]
    pub ts: Option<f64>,

    /// Integrator step in seconds.
    #[arg(long)]
    pub dt: Option<f64>,

    /// Basis family: fourier, legendre or monomial.
    #[arg(long)]
    pub basis: Option<String>,

    /// Basis truncation order.
    #[arg(long)]
    pub order: Option<usize>,

    /// Number of anchor states.
    #[arg(long)]
    pub num_anchors: Option<usize>,

    /// Replace the scenario's input set by a designed one with this many
    /// perturbation experiments.
    #[arg(long)]
    pub num_perturbations: Option<usize>,

    /// Process-noise amplitude.
    #[arg(long)]
    pub noise: Option<f64>,

    /// Trials per sweep point of the noise study.
    #[arg(long)]
    pub trials: Option<usize>,

    /// Use analytic derivatives instead of forward differences (test mode).
    #[arg(long)]
    pub oracle_derivatives: bool,
}

/// The effective, fully-resolved configuration of a run.
///
/// Unknown keys are rejected so a typo in a hand-edited config fails the
/// configuration phase instead of being silently dropped.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// File-format version.
    pub schema_version: u32,
    /// Scenario name.
    pub scenario: String,
    /// Seed driving all randomness.
    pub seed: u64,
    /// Sampling window in seconds.
    pub t_s: f64,
    /// Integrator step in seconds.
    pub dt: f64,
    /// Basis family name.
    pub basis: String,
    /// Basis truncation order.
    pub order: usize,
    /// Number of anchors.
    pub num_anchors: usize,
    /// Designed perturbations per anchor; absent when the scenario's
    /// explicit control set is used.
    pub num_perturbations: Option<usize>,
    /// Process-noise amplitude.
    pub noise_amplitude: f64,
    /// Trials per sweep point (noise study only).
    pub trials: usize,
    /// Whether derivatives come from the analytic oracle.
    pub oracle_derivatives: bool,
}

impl RunConfig {
    /// Overrides that reproduce this configuration exactly.
    pub fn to_overrides(&self) -> anyhow::Result<ScenarioOverrides> {
        Ok(ScenarioOverrides {
            t_s: Some(self.t_s),
            dt: Some(self.dt),
            seed: Some(self.seed),
            basis_family: Some(
                BasisFamily::parse(&self.basis).map_err(|e| anyhow::anyhow!("{e}"))?,
            ),
            order: Some(self.order),
            num_anchors: Some(self.num_anchors),
            num_perturbations: self.num_perturbations,
            noise_amplitude: Some(self.noise_amplitude),
            trials: Some(self.trials),
            oracle_derivatives: self.oracle_derivatives,
        })
    }
}

/// Resolve the flags (or config file) into a loaded scenario plus its
/// effective configuration.
pub fn resolve(args: &RunArgs) -> anyhow::Result<(Scenario, RunConfig)> {
    let (name, overrides) = if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config file {}", path.display()))?;
        let config: RunConfig = serde_json::from_str(&text)
            .with_context(|| format!("cannot parse config file {}", path.display()))?;
        if config.schema_version != SCHEMA_VERSION {
            bail!(
                "config schema version {} unsupported (expected {SCHEMA_VERSION})",
                config.schema_version
            );
        }
        let mut overrides = config.to_overrides()?;
        // Flags win over the config file.
        apply_flag_overrides(&mut overrides, args)?;
        (config.scenario, overrides)
    } else if let Some(name) = &args.scenario {
        let mut overrides = ScenarioOverrides::default();
        apply_flag_overrides(&mut overrides, args)?;
        (name.clone(), overrides)
    } else {
        bail!("either --scenario or --config is required");
    };

    let scenario = load_scenario(&name, &overrides).map_err(|e| anyhow::anyhow!("{e}"))?;
    let effective = effective_config(&scenario);
    Ok((scenario, effective))
}

fn apply_flag_overrides(overrides: &mut ScenarioOverrides, args: &RunArgs) -> anyhow::Result<()> {
    if let Some(ts) = args.ts {
        overrides.t_s = Some(ts);
    }
    if let Some(dt) = args.dt {
        overrides.dt = Some(dt);
    }
    if let Some(seed) = args.seed {
        overrides.seed = Some(seed);
    }
    if let Some(basis) = &args.basis {
        overrides.basis_family =
            Some(BasisFamily::parse(basis).map_err(|e| anyhow::anyhow!("{e}"))?);
    }
    if let Some(order) = args.order {
        overrides.order = Some(order);
    }
    if let Some(n) = args.num_anchors {
        overrides.num_anchors = Some(n);
    }
    if let Some(n) = args.num_perturbations {
        overrides.num_perturbations = Some(n);
    }
    if let Some(noise) = args.noise {
        overrides.noise_amplitude = Some(noise);
    }
    if let Some(trials) = args.trials {
        overrides.trials = Some(trials);
    }
    if args.oracle_derivatives {
        overrides.oracle_derivatives = true;
    }
    Ok(())
}

/// Read the effective parameters back out of a loaded scenario.
pub fn effective_config(scenario: &Scenario) -> RunConfig {
    RunConfig {
        schema_version: SCHEMA_VERSION,
        scenario: scenario.name.as_str().to_string(),
        seed: scenario.plan.seed(),
        t_s: scenario.plan.sampling_time(),
        dt: scenario.plan.integrator_step(),
        basis: scenario.basis.family().name().to_string(),
        order: scenario.basis.order(),
        num_anchors: scenario.plan.anchors().len(),
        num_perturbations: scenario.designed_perturbations,
        noise_amplitude: scenario.plan.noise_amplitude(),
        trials: scenario.trials,
        oracle_derivatives: scenario.mode == driftless::experiment::DerivativeMode::ExactOracle,
    }
}
