//! The built-in studies: a 2x2 linear system, the Bloch system on the unit
//! sphere, and a phase oscillator with a nonlinear response curve (with a
//! noisy variant for the convergence study). Each scenario bundles its
//! system constants, experiment plan, basis choice and validation settings;
//! individual fields can be overridden before running.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::basis::{BasisFamily, BasisSpec};
use crate::dynamics::{
    integrate, make_bloch_system, make_linear_system, make_phase_oscillator, AffineSystem,
    ControlSignal, Trajectory,
};
use crate::error::Error;
use crate::experiment::{
    build_plan, collect_plan_differences, delta_u_matrix, AnchorSampler, DerivativeMode,
    DifferenceSample, ExperimentPlan, InputDesign,
};
use crate::recovery::{
    noise_convergence_study, recover_constant_b, recover_control_field, recover_drift_field,
    validate_field, DriftSampling, NoiseStudyRow, RecoveredControlField, RecoveredDriftField,
    ValidationReport,
};
use crate::regression::{assemble_constant_b_lrp, solve_least_squares, LeastSquaresSolution};
use crate::Result;

/// Frozen study constants and their expected recovery results.
pub mod constants {
    /// Drift matrix of the linear demo.
    pub const LINEAR_A: [[f64; 2]; 2] = [[1.0, 4.0], [5.0, -1.0]];
    /// Input matrix of the linear demo.
    pub const LINEAR_B: [[f64; 2]; 2] = [[2.0, 1.0], [0.6, 1.0]];
    /// Shared initial state of the linear experiments.
    pub const LINEAR_X0: [f64; 2] = [0.0, -0.25];
    /// The three constant controls applied in the linear experiments.
    pub const LINEAR_CONTROLS: [[f64; 2]; 3] = [[1.0, 2.0], [2.0, 4.0], [3.0, 8.0]];
    /// Sampling window of the linear demo. The reported recovery digits
    /// below correspond to this window.
    pub const LINEAR_TS: f64 = 1e-4;
    /// Integrator step shared by all scenarios.
    pub const DEFAULT_DT: f64 = 1e-5;
    /// Expected recovered input matrix of the linear demo.
    pub const EXPECTED_B_HAT: [[f64; 2]; 2] = [[2.0002, 1.0003], [0.6005, 1.0002]];
    /// Expected input-difference matrix of the linear demo.
    pub const EXPECTED_DELTA_U: [[f64; 2]; 2] = [[-1.0, -2.0], [-2.0, -6.0]];
    /// Expected derivative-difference targets for output 1.
    pub const EXPECTED_DIFF_X1: [f64; 2] = [-4.0007, -10.0018];
    /// Expected derivative-difference targets for output 2.
    pub const EXPECTED_DIFF_X2: [f64; 2] = [-2.6009, -7.2021];

    /// Bloch coupling strength.
    pub const BLOCH_EPSILON: f64 = 0.6;
    /// Bloch precession frequency.
    pub const BLOCH_OMEGA: f64 = 1.4;
    /// Anchors in the Bloch study.
    pub const BLOCH_ANCHORS: usize = 20;
    /// Maximum control magnitude `k` in the Bloch control ladder.
    pub const BLOCH_MAX_CONTROL: usize = 3;
    /// Sampling window of the Bloch study.
    pub const BLOCH_TS: f64 = 1e-4;
    /// Held-out validation points on the sphere.
    pub const BLOCH_VALIDATION_POINTS: usize = 1000;

    /// Phase-response curve of the oscillator demo.
    pub fn prc(theta: f64) -> f64 {
        -libm::sin(theta) * libm::exp(3.0 * (libm::cos(theta - 0.9 * core::f64::consts::PI) - 1.0))
    }

    /// Time-varying oscillation frequency of the oscillator demo.
    pub fn prc_omega(t: f64) -> f64 {
        0.1 * t
    }

    /// Anchors in the oscillator study.
    pub const PRC_ANCHORS: usize = 35;
    /// Perturbation experiments per anchor (3 experiments counting the
    /// reference).
    pub const PRC_PERTURBATIONS: usize = 2;
    /// Magnitude step of the designed oscillator inputs; keeps every
    /// input inside `[-1, 1]`.
    pub const PRC_INPUT_SCALE: f64 = 0.5;
    /// Fourier truncation order of the oscillator fit.
    pub const PRC_ORDER: usize = 6;
    /// Sampling window of the oscillator study.
    pub const PRC_TS: f64 = 1e-4;
    /// Process-noise amplitude of the noisy variant (`eta` uniform in
    /// `[-amplitude, amplitude]`).
    pub const PRC_NOISE_AMPLITUDE: f64 = 1.0;
    /// Experiment counts swept by the noise study.
    pub const PRC_NOISE_N_VALUES: [usize; 4] = [5, 25, 100, 200];
    /// Noisy trials per experiment count.
    pub const PRC_NOISE_TRIALS: usize = 20;
}

/// Name of a built-in scenario.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScenarioName {
    /// Constant-B recovery on the 2x2 linear system, plus the drift stage.
    Linear2x2,
    /// Control-field recovery on the Bloch sphere.
    Bloch,
    /// Phase-response-curve recovery, noiseless.
    Prc,
    /// Phase-response-curve recovery under process noise, swept over the
    /// number of perturbation experiments.
    PrcNoise,
}

impl ScenarioName {
    /// Parse a scenario name as used on the command line.
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "linear_2x2" => Ok(Self::Linear2x2),
            "bloch" => Ok(Self::Bloch),
            "prc" => Ok(Self::Prc),
            "prc_noise" => Ok(Self::PrcNoise),
            other => Err(Error::UnknownScenario {
                name: other.to_string(),
            }),
        }
    }

    /// Canonical name.
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Linear2x2 => "linear_2x2",
            Self::Bloch => "bloch",
            Self::Prc => "prc",
            Self::PrcNoise => "prc_noise",
        }
    }
}

/// Optional parameter overrides applied when loading a scenario.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScenarioOverrides {
    /// Sampling window replacement.
    pub t_s: Option<f64>,
    /// Integrator step replacement.
    pub dt: Option<f64>,
    /// Seed replacement (drives anchor sampling and noise streams).
    pub seed: Option<u64>,
    /// Basis family replacement.
    pub basis_family: Option<BasisFamily>,
    /// Basis order replacement.
    pub order: Option<usize>,
    /// Anchor-count replacement.
    pub num_anchors: Option<usize>,
    /// Replace the scenario's input set by a designed set with this many
    /// perturbations.
    pub num_perturbations: Option<usize>,
    /// Process-noise amplitude replacement.
    pub noise_amplitude: Option<f64>,
    /// Trial-count replacement for the noise study.
    pub trials: Option<usize>,
    /// Compute derivatives analytically instead of by forward differences.
    pub oracle_derivatives: bool,
}

/// A fully-populated, runnable study.
pub struct Scenario {
    /// Which built-in study this is.
    pub name: ScenarioName,
    /// Ground-truth system the experiments run on.
    pub system: AffineSystem,
    /// The perturbation plan.
    pub plan: ExperimentPlan,
    /// Basis for the control-field fit.
    pub basis: BasisSpec,
    /// Basis for the drift fit (linear scenario only).
    pub drift_basis: BasisSpec,
    /// Free-run sampling for the drift stage.
    pub drift_sampling: DriftSampling,
    /// Number of held-out validation points.
    pub validation_points: usize,
    /// Geometry of the validation samples.
    pub validation_sampler: AnchorSampler,
    /// Derivative mode for every pipeline stage.
    pub mode: DerivativeMode,
    /// Trials per sweep point of the noise study.
    pub trials: usize,
    /// Experiment counts swept by the noise study.
    pub n_values: Vec<usize>,
    /// Magnitude step for designed inputs.
    pub input_scale: f64,
    /// When the input set was produced by [`crate::experiment::design_inputs`],
    /// how many perturbations it has; absent for explicit control sets.
    pub designed_perturbations: Option<usize>,
}

/// Build a named scenario with `overrides` applied and validated.
pub fn load_scenario(name: &str, overrides: &ScenarioOverrides) -> Result<Scenario> {
    let name = ScenarioName::parse(name)?;
    validate_overrides(overrides)?;
    let seed = overrides.seed.unwrap_or(0);
    let dt = overrides.dt.unwrap_or(constants::DEFAULT_DT);
    let mode = if overrides.oracle_derivatives {
        DerivativeMode::ExactOracle
    } else {
        DerivativeMode::ForwardDifference
    };

    match name {
        ScenarioName::Linear2x2 => {
            let system = make_linear_system(
                &DMatrix::from_fn(2, 2, |i, j| constants::LINEAR_A[i][j]),
                &DMatrix::from_fn(2, 2, |i, j| constants::LINEAR_B[i][j]),
            )?;
            let t_s = overrides.t_s.unwrap_or(constants::LINEAR_TS);
            let inputs = match overrides.num_perturbations {
                Some(n) => InputDesign::Designed {
                    perturbations: n,
                    scale: 1.0,
                },
                None => InputDesign::Shared(
                    constants::LINEAR_CONTROLS
                        .iter()
                        .map(|u| DVector::from_row_slice(u))
                        .collect(),
                ),
            };
            let anchors = AnchorSampler::Explicit(alloc::vec![DVector::from_row_slice(
                &constants::LINEAR_X0
            )]);
            let num_anchors = overrides.num_anchors.unwrap_or(1);
            let sampler = if num_anchors == 1 {
                anchors
            } else {
                AnchorSampler::UniformBox
            };
            let mut plan = build_plan(&system, num_anchors, &inputs, t_s, dt, &sampler, seed)?;
            if let Some(noise) = overrides.noise_amplitude {
                plan = plan.with_noise(noise)?;
            }
            let basis = BasisSpec::new(
                overrides.basis_family.unwrap_or(BasisFamily::Monomial),
                overrides.order.unwrap_or(0),
                system.domain().clone(),
            );
            let drift_basis = BasisSpec::new(BasisFamily::Monomial, 1, system.domain().clone());
            Ok(Scenario {
                name,
                system,
                plan,
                basis,
                drift_basis,
                drift_sampling: DriftSampling::default(),
                validation_points: 0,
                validation_sampler: AnchorSampler::UniformBox,
                mode,
                trials: overrides.trials.unwrap_or(1),
                n_values: Vec::new(),
                input_scale: 1.0,
                designed_perturbations: overrides.num_perturbations,
            })
        }
        ScenarioName::Bloch => {
            let system = make_bloch_system(constants::BLOCH_EPSILON, constants::BLOCH_OMEGA);
            let t_s = overrides.t_s.unwrap_or(constants::BLOCH_TS);
            let inputs = match overrides.num_perturbations {
                Some(n) => InputDesign::Designed {
                    perturbations: n,
                    scale: 1.0,
                },
                None => InputDesign::Shared(bloch_controls()),
            };
            let num_anchors = overrides.num_anchors.unwrap_or(constants::BLOCH_ANCHORS);
            let mut plan = build_plan(
                &system,
                num_anchors,
                &inputs,
                t_s,
                dt,
                &AnchorSampler::UnitSphere,
                seed,
            )?;
            if let Some(noise) = overrides.noise_amplitude {
                plan = plan.with_noise(noise)?;
            }
            let family = overrides.basis_family.unwrap_or(BasisFamily::Monomial);
            let default_order = match family {
                BasisFamily::Fourier => 5,
                _ => 2,
            };
            let basis = BasisSpec::new(
                family,
                overrides.order.unwrap_or(default_order),
                system.domain().clone(),
            );
            let drift_basis = BasisSpec::new(BasisFamily::Monomial, 1, system.domain().clone());
            Ok(Scenario {
                name,
                system,
                plan,
                basis,
                drift_basis,
                drift_sampling: DriftSampling {
                    free_run_horizon: 1.0,
                    samples_per_anchor: 10,
                },
                validation_points: constants::BLOCH_VALIDATION_POINTS,
                validation_sampler: AnchorSampler::UnitSphere,
                mode,
                trials: overrides.trials.unwrap_or(1),
                n_values: Vec::new(),
                input_scale: 1.0,
                designed_perturbations: overrides.num_perturbations,
            })
        }
        ScenarioName::Prc | ScenarioName::PrcNoise => {
            let system = make_phase_oscillator(constants::prc, constants::prc_omega);
            let t_s = overrides.t_s.unwrap_or(constants::PRC_TS);
            let perturbations = overrides
                .num_perturbations
                .unwrap_or(constants::PRC_PERTURBATIONS);
            let num_anchors = overrides.num_anchors.unwrap_or(constants::PRC_ANCHORS);
            let mut plan = build_plan(
                &system,
                num_anchors,
                &InputDesign::Designed {
                    perturbations,
                    scale: constants::PRC_INPUT_SCALE,
                },
                t_s,
                dt,
                &AnchorSampler::UniformBox,
                seed,
            )?;
            let default_noise = if name == ScenarioName::PrcNoise {
                constants::PRC_NOISE_AMPLITUDE
            } else {
                0.0
            };
            plan = plan.with_noise(overrides.noise_amplitude.unwrap_or(default_noise))?;
            let basis = BasisSpec::new(
                overrides.basis_family.unwrap_or(BasisFamily::Fourier),
                overrides.order.unwrap_or(constants::PRC_ORDER),
                system.domain().clone(),
            );
            let drift_basis = BasisSpec::new(BasisFamily::Monomial, 1, system.domain().clone());
            Ok(Scenario {
                name,
                system,
                plan,
                basis,
                drift_basis,
                drift_sampling: DriftSampling::default(),
                validation_points: 1000,
                validation_sampler: AnchorSampler::UniformBox,
                mode,
                trials: overrides.trials.unwrap_or(constants::PRC_NOISE_TRIALS),
                n_values: constants::PRC_NOISE_N_VALUES.to_vec(),
                input_scale: constants::PRC_INPUT_SCALE,
                designed_perturbations: Some(perturbations),
            })
        }
    }
}

fn validate_overrides(overrides: &ScenarioOverrides) -> Result<()> {
    let positive = |key: &str, v: Option<f64>| -> Result<()> {
        if let Some(v) = v {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidOverride {
                    key: key.to_string(),
                    details: format!("must be positive and finite, got {v}"),
                });
            }
        }
        Ok(())
    };
    positive("ts", overrides.t_s)?;
    positive("dt", overrides.dt)?;
    if let Some(noise) = overrides.noise_amplitude {
        if noise < 0.0 || !noise.is_finite() {
            return Err(Error::InvalidOverride {
                key: String::from("noise"),
                details: format!("must be nonnegative, got {noise}"),
            });
        }
    }
    if let (Some(t_s), Some(dt)) = (overrides.t_s, overrides.dt) {
        if dt > t_s {
            return Err(Error::InvalidOverride {
                key: String::from("dt"),
                details: format!("dt = {dt} exceeds ts = {t_s}"),
            });
        }
    }
    if overrides.num_anchors == Some(0) {
        return Err(Error::InvalidOverride {
            key: String::from("num-anchors"),
            details: String::from("need at least one anchor"),
        });
    }
    if overrides.num_perturbations == Some(0) {
        return Err(Error::InvalidOverride {
            key: String::from("num-perturbations"),
            details: String::from("need at least one perturbation"),
        });
    }
    if overrides.trials == Some(0) {
        return Err(Error::InvalidOverride {
            key: String::from("trials"),
            details: String::from("need at least one trial"),
        });
    }
    Ok(())
}

/// The Bloch control ladder `(k, 0), (0, k)` for `k = 0..=3`, reference
/// `(0, 0)` first: eight experiments per anchor, the `k = 0` pair repeated.
pub fn bloch_controls() -> Vec<DVector<f64>> {
    let mut controls = Vec::with_capacity(2 * (constants::BLOCH_MAX_CONTROL + 1));
    for k in 0..=constants::BLOCH_MAX_CONTROL {
        controls.push(DVector::from_vec(alloc::vec![k as f64, 0.0]));
    }
    for k in 0..=constants::BLOCH_MAX_CONTROL {
        controls.push(DVector::from_vec(alloc::vec![0.0, k as f64]));
    }
    controls
}

/// Results of the linear scenario.
pub struct LinearOutcome {
    /// Stacked input differences (one row per perturbation).
    pub delta_u: DMatrix<f64>,
    /// The difference samples behind the recovery.
    pub samples: Vec<DifferenceSample>,
    /// Recovered input matrix.
    pub b_hat: DMatrix<f64>,
    /// Ground-truth input matrix.
    pub b_true: DMatrix<f64>,
    /// Per-output diagnostics of the `B` solve.
    pub b_diagnostics: Vec<LeastSquaresSolution>,
    /// Recovered drift matrix (linear part of the drift fit).
    pub a_hat: DMatrix<f64>,
    /// Constant terms of the drift fit (should sit at the noise floor).
    pub drift_offsets: DVector<f64>,
    /// Ground-truth drift matrix.
    pub a_true: DMatrix<f64>,
    /// Per-output diagnostics of the drift solve.
    pub a_diagnostics: Vec<LeastSquaresSolution>,
    /// The recorded experiment trajectories, in input order.
    pub trajectories: Vec<Trajectory>,
}

/// Results of a field-recovery scenario (Bloch or oscillator).
pub struct FieldOutcome {
    /// The fitted control field.
    pub recovered: RecoveredControlField,
    /// Held-out comparison against the truth.
    pub validation: ValidationReport,
    /// Drift fit over the same plan (reported for completeness).
    pub drift: Option<RecoveredDriftField>,
}

/// Results of the noise convergence study.
pub struct NoiseOutcome {
    /// One row per swept experiment count.
    pub rows: Vec<NoiseStudyRow>,
}

/// What running a scenario produces.
pub enum ScenarioOutcome {
    /// Linear scenario results.
    Linear(LinearOutcome),
    /// Field-recovery results.
    Field(FieldOutcome),
    /// Noise-study results.
    Noise(NoiseOutcome),
}

/// Execute a scenario end to end.
pub fn run_scenario(scenario: &Scenario) -> Result<ScenarioOutcome> {
    match scenario.name {
        ScenarioName::Linear2x2 => run_linear(scenario).map(ScenarioOutcome::Linear),
        ScenarioName::Bloch | ScenarioName::Prc => run_field(scenario).map(ScenarioOutcome::Field),
        ScenarioName::PrcNoise => {
            let rows = noise_convergence_study(
                &scenario.system,
                &scenario.plan,
                &scenario.basis,
                &scenario.n_values,
                scenario.trials,
                scenario.plan.seed(),
                scenario.input_scale,
            )?;
            Ok(ScenarioOutcome::Noise(NoiseOutcome { rows }))
        }
    }
}

fn run_linear(scenario: &Scenario) -> Result<LinearOutcome> {
    let system = &scenario.system;
    let plan = &scenario.plan;
    let samples = collect_plan_differences(system, plan, scenario.mode)?;
    let delta_u = delta_u_matrix(&samples)?;
    let b_hat = recover_constant_b(system, plan, scenario.mode)?;
    let b_diagnostics = (0..system.state_dim())
        .map(|j| solve_least_squares(&assemble_constant_b_lrp(&samples, j)?))
        .collect::<Result<Vec<_>>>()?;

    // Drift stage with the recovered B-hat subtracted.
    let constant_spec = BasisSpec::new(BasisFamily::Monomial, 0, system.domain().clone());
    let features = crate::basis::feature_count(&constant_spec);
    let mut ghat_coeffs = DMatrix::zeros(system.state_dim(), system.input_dim() * features);
    for j in 0..system.state_dim() {
        for s in 0..system.input_dim() {
            ghat_coeffs[(j, s * features)] = b_hat[(j, s)];
        }
    }
    let ghat = RecoveredControlField::from_coefficients(constant_spec, ghat_coeffs)?;
    let drift = recover_drift_field(
        system,
        plan,
        &ghat,
        &scenario.drift_basis,
        scenario.drift_sampling,
        scenario.mode,
    )?;
    // Features of the drift basis at L = 1 are [1, x1, .., xn] on the
    // identity-rescaled domain, so the linear part is columns 1..=n.
    let n = system.state_dim();
    let a_hat = DMatrix::from_fn(n, n, |i, j| drift.coefficients()[(i, 1 + j)]);
    let drift_offsets = DVector::from_fn(n, |i, _| drift.coefficients()[(i, 0)]);

    // Record the experiment trajectories for reporting.
    let mut trajectories = Vec::new();
    for (input_index, u0) in plan.inputs_for(0).iter().enumerate() {
        let signal = ControlSignal::constant(u0, plan.sampling_time())?;
        let traj = integrate(
            system,
            &plan.anchors()[0],
            &signal,
            0.0,
            plan.sampling_time(),
            plan.integrator_step(),
        )
        .map_err(|e| e.at_experiment(0, input_index))?;
        trajectories.push(traj);
    }

    Ok(LinearOutcome {
        delta_u,
        samples,
        b_hat,
        b_true: DMatrix::from_fn(2, 2, |i, j| constants::LINEAR_B[i][j]),
        b_diagnostics,
        a_hat,
        drift_offsets,
        a_true: DMatrix::from_fn(2, 2, |i, j| constants::LINEAR_A[i][j]),
        a_diagnostics: drift.diagnostics().to_vec(),
        trajectories,
    })
}

fn run_field(scenario: &Scenario) -> Result<FieldOutcome> {
    let recovered = recover_control_field(
        &scenario.system,
        &scenario.plan,
        &scenario.basis,
        scenario.mode,
    )?;
    let validation = validate_field(
        &recovered,
        &scenario.system,
        scenario.validation_points,
        &scenario.validation_sampler,
        crate::experiment::derive_seed(scenario.plan.seed(), 0x76616c, 0),
    )?;
    Ok(FieldOutcome {
        recovered,
        validation,
        drift: None,
    })
}

/// FNV-1a checksum over the scenario's defining constants; frozen by tests
/// so accidental constant drift is caught.
pub fn scenario_checksum(name: ScenarioName) -> u64 {
    let mut canon = String::new();
    canon.push_str(name.as_str());
    let mut push = |v: f64| {
        canon.push(';');
        canon.push_str(&format!("{:x}", v.to_bits()));
    };
    match name {
        ScenarioName::Linear2x2 => {
            for row in constants::LINEAR_A.iter().chain(constants::LINEAR_B.iter()) {
                for &v in row {
                    push(v);
                }
            }
            for &v in &constants::LINEAR_X0 {
                push(v);
            }
            for u in &constants::LINEAR_CONTROLS {
                for &v in u {
                    push(v);
                }
            }
            push(constants::LINEAR_TS);
            push(constants::DEFAULT_DT);
        }
        ScenarioName::Bloch => {
            push(constants::BLOCH_EPSILON);
            push(constants::BLOCH_OMEGA);
            push(constants::BLOCH_ANCHORS as f64);
            push(constants::BLOCH_MAX_CONTROL as f64);
            push(constants::BLOCH_TS);
            push(constants::BLOCH_VALIDATION_POINTS as f64);
        }
        ScenarioName::Prc | ScenarioName::PrcNoise => {
            for i in 0..8 {
                push(constants::prc(i as f64 * 0.25 * core::f64::consts::PI));
            }
            push(constants::prc_omega(10.0));
            push(constants::PRC_ANCHORS as f64);
            push(constants::PRC_PERTURBATIONS as f64);
            push(constants::PRC_INPUT_SCALE);
            push(constants::PRC_ORDER as f64);
            push(constants::PRC_TS);
            if name == ScenarioName::PrcNoise {
                push(constants::PRC_NOISE_AMPLITUDE);
                for &n in &constants::PRC_NOISE_N_VALUES {
                    push(n as f64);
                }
                push(constants::PRC_NOISE_TRIALS as f64);
            }
        }
    }
    let mut hash: u64 = 0xcbf29ce484222325;
    for byte in canon.as_bytes() {
        hash ^= *byte as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}
