//! End-to-end pipeline: plan -> experiments -> differences -> regression ->
//! recovered fields, plus validation against ground truth and the noise
//! convergence study.
//!
//! The per-output regression problems are independent (they share the design
//! and differ only in the target), so the pipeline assembles and solves them
//! one output dimension at a time. All stages are pure given the plan seed.

use alloc::format;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::basis::{eval_basis, feature_count, BasisSpec};
use crate::dynamics::{integrate, integrate_noisy, AffineSystem, ControlSignal, StepNoise};
use crate::error::Error;
use crate::experiment::{
    collect_anchor_records, collect_plan_differences, delta_u_matrix, derive_seed, design_inputs,
    AnchorSampler, DerivativeMode, ExperimentPlan,
};
use crate::regression::{
    assemble_constant_b_lrp, assemble_control_lrp, assemble_drift_lrp, describe_deficiency,
    solve_least_squares, DriftSample, LeastSquaresSolution, RANK_TOLERANCE,
};
use crate::Result;

/// A fitted control vector field `ghat(x)`.
///
/// Row `j` of `coefficients` holds the unknowns of output `j`, input-major:
/// entry `(j, s * F + k)` is the coefficient of basis feature `k` in
/// `ghat_js`.
#[derive(Debug, Clone, PartialEq)]
pub struct RecoveredControlField {
    basis: BasisSpec,
    coefficients: DMatrix<f64>,
    diagnostics: Vec<LeastSquaresSolution>,
}

impl RecoveredControlField {
    /// Wrap an explicit coefficient matrix (used by tests and oracles).
    pub fn from_coefficients(basis: BasisSpec, coefficients: DMatrix<f64>) -> Result<Self> {
        let features = feature_count(&basis);
        if features == 0 || coefficients.ncols() % features != 0 {
            return Err(Error::DimensionMismatch {
                what: "coefficient columns",
                expected: features,
                got: coefficients.ncols(),
            });
        }
        Ok(Self {
            basis,
            coefficients,
            diagnostics: Vec::new(),
        })
    }

    /// The basis the coefficients refer to.
    pub fn basis(&self) -> &BasisSpec {
        &self.basis
    }

    /// Coefficient matrix, `n` rows by `m * feature_count` columns.
    pub fn coefficients(&self) -> &DMatrix<f64> {
        &self.coefficients
    }

    /// Per-output solve diagnostics (empty for hand-built fields).
    pub fn diagnostics(&self) -> &[LeastSquaresSolution] {
        &self.diagnostics
    }

    /// Output dimension `n`.
    pub fn output_dim(&self) -> usize {
        self.coefficients.nrows()
    }

    /// Input dimension `m`.
    pub fn input_dim(&self) -> usize {
        self.coefficients.ncols() / feature_count(&self.basis)
    }

    /// Evaluate `ghat(x)` as an `n x m` matrix.
    pub fn evaluate(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let phi = eval_basis(&self.basis, x)?;
        let features = phi.len();
        let m = self.input_dim();
        let n = self.output_dim();
        let mut g = DMatrix::zeros(n, m);
        for j in 0..n {
            for s in 0..m {
                let mut acc = 0.0;
                for k in 0..features {
                    acc += self.coefficients[(j, s * features + k)] * phi[k];
                }
                g[(j, s)] = acc;
            }
        }
        Ok(g)
    }

    /// Coefficients of one field entry `ghat_js`.
    pub fn entry_coefficients(&self, output: usize, input: usize) -> DVector<f64> {
        let features = feature_count(&self.basis);
        DVector::from_fn(features, |k, _| {
            self.coefficients[(output, input * features + k)]
        })
    }

    /// All coefficients stacked row-major into one vector (the study metric).
    pub fn stacked_coefficients(&self) -> DVector<f64> {
        let (n, c) = self.coefficients.shape();
        DVector::from_fn(n * c, |i, _| self.coefficients[(i / c, i % c)])
    }
}

/// A fitted drift field `fhat(x)`; row `j` of `coefficients` expands output `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct RecoveredDriftField {
    basis: BasisSpec,
    coefficients: DMatrix<f64>,
    diagnostics: Vec<LeastSquaresSolution>,
}

impl RecoveredDriftField {
    /// The basis the coefficients refer to.
    pub fn basis(&self) -> &BasisSpec {
        &self.basis
    }

    /// Coefficient matrix, `n` rows by `feature_count` columns.
    pub fn coefficients(&self) -> &DMatrix<f64> {
        &self.coefficients
    }

    /// Per-output solve diagnostics.
    pub fn diagnostics(&self) -> &[LeastSquaresSolution] {
        &self.diagnostics
    }

    /// Evaluate `fhat(x)`.
    pub fn evaluate(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let phi = eval_basis(&self.basis, x)?;
        Ok(&self.coefficients * phi)
    }
}

/// Where recovered and true field entries were compared, and how far apart
/// they were.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    /// Fresh sample points the fields were evaluated at.
    pub sample_points: Vec<DVector<f64>>,
    /// Per-entry root-mean-square error, `n x m`.
    pub rmse: DMatrix<f64>,
    /// Per-entry maximum absolute error, `n x m`.
    pub max_abs: DMatrix<f64>,
    /// Condition numbers of the fits that produced the recovered field.
    pub condition_numbers: Vec<f64>,
    /// Sample points that fell outside the basis domain.
    pub out_of_domain: usize,
}

/// Run the full perturbation pipeline and fit the control field.
///
/// Deterministic given `plan.seed()`; upstream failures carry the
/// `(anchor, input)` coordinates of the offending experiment.
pub fn recover_control_field(
    system: &AffineSystem,
    plan: &ExperimentPlan,
    spec: &BasisSpec,
    mode: DerivativeMode,
) -> Result<RecoveredControlField> {
    let samples = collect_plan_differences(system, plan, mode)?;
    let du = delta_u_matrix(&samples)?;
    if du.norm() == 0.0 {
        return Err(Error::DegenerateDesign {
            rank: 0,
            required: system.input_dim(),
            details: describe_deficiency(&du),
        });
    }
    let n = system.state_dim();
    let features = feature_count(spec);
    let mut coefficients = DMatrix::zeros(n, system.input_dim() * features);
    let mut diagnostics = Vec::with_capacity(n);
    for j in 0..n {
        let problem = assemble_control_lrp(&samples, spec, j)?;
        let solution = solve_least_squares(&problem)?;
        coefficients
            .row_mut(j)
            .copy_from(&solution.coefficients.transpose());
        diagnostics.push(solution);
    }
    Ok(RecoveredControlField {
        basis: spec.clone(),
        coefficients,
        diagnostics,
    })
}

/// The constant-`B` path: solve the `n` stacked `delta U` systems directly.
///
/// Fails with a degenerate-design error when the input differences do not
/// span all `m` directions.
pub fn recover_constant_b(
    system: &AffineSystem,
    plan: &ExperimentPlan,
    mode: DerivativeMode,
) -> Result<DMatrix<f64>> {
    let samples = collect_plan_differences(system, plan, mode)?;
    let du = delta_u_matrix(&samples)?;
    let svd = du.clone().svd(false, false);
    let sigma_max = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let rank = svd
        .singular_values
        .iter()
        .filter(|&&s| s > RANK_TOLERANCE * sigma_max && s > 0.0)
        .count();
    let m = system.input_dim();
    if rank < m {
        return Err(Error::DegenerateDesign {
            rank,
            required: m,
            details: describe_deficiency(&du),
        });
    }
    let n = system.state_dim();
    let mut b_hat = DMatrix::zeros(n, m);
    for j in 0..n {
        let problem = assemble_constant_b_lrp(&samples, j)?;
        let solution = solve_least_squares(&problem)?;
        b_hat
            .row_mut(j)
            .copy_from(&solution.coefficients.transpose());
    }
    Ok(b_hat)
}

/// How states for the drift stage are gathered: a free run under zero input
/// from each plan anchor, sampled at `samples_per_anchor` evenly spaced
/// times over `[0, free_run_horizon]`, on top of the plan's own records.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriftSampling {
    /// Length of the zero-input run used to spread samples over the domain.
    pub free_run_horizon: f64,
    /// Number of states sampled along each free run.
    pub samples_per_anchor: usize,
}

impl Default for DriftSampling {
    fn default() -> Self {
        Self {
            free_run_horizon: 0.25,
            samples_per_anchor: 25,
        }
    }
}

/// Second stage: with `ghat` in hand, estimate the drift from
/// `xdot - ghat(x) u` over the plan records plus free-run samples.
/// Free-run states outside the system domain are discarded.
pub fn recover_drift_field(
    system: &AffineSystem,
    plan: &ExperimentPlan,
    recovered_g: &RecoveredControlField,
    spec: &BasisSpec,
    sampling: DriftSampling,
    mode: DerivativeMode,
) -> Result<RecoveredDriftField> {
    if !(sampling.free_run_horizon > 0.0) && sampling.samples_per_anchor > 0 {
        return Err(Error::InvalidArgument {
            what: "free_run_horizon",
            details: format!("must be positive, got {}", sampling.free_run_horizon),
        });
    }
    let t_s = plan.sampling_time();
    let dt = plan.integrator_step();
    let mut samples: Vec<DriftSample> = Vec::new();

    for anchor_index in 0..plan.anchors().len() {
        // The perturbation records themselves: state = anchor, known input.
        for record in collect_anchor_records(system, plan, anchor_index, mode)? {
            samples.push(DriftSample {
                time: 0.0,
                state: record.x_t0.clone(),
                derivative: record
                    .derivative_estimate
                    .clone()
                    .expect("collect_anchor_records fills estimates"),
                input: record.u0.clone(),
            });
        }

        if sampling.samples_per_anchor == 0 {
            continue;
        }

        // Free run under zero input, sampled on the integrator grid.
        let anchor = &plan.anchors()[anchor_index];
        let zero = DVector::zeros(system.input_dim());
        let horizon = sampling.free_run_horizon;
        let signal = ControlSignal::constant(&zero, horizon + t_s)?;
        let trajectory = if plan.noise_amplitude() > 0.0 {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(plan.seed(), anchor_index as u64, 0xd21f));
            integrate_noisy(
                system,
                anchor,
                &signal,
                0.0,
                horizon + t_s,
                dt,
                StepNoise {
                    amplitude: plan.noise_amplitude(),
                    rng: &mut rng,
                },
            )?
        } else {
            integrate(system, anchor, &signal, 0.0, horizon + t_s, dt)?
        };
        let ts_steps = libm::round(t_s / dt) as usize;
        let horizon_steps = libm::round(horizon / dt) as usize;
        let k_max = sampling.samples_per_anchor;
        for k in 0..k_max {
            let idx = if k_max == 1 {
                0
            } else {
                (k * horizon_steps) / (k_max - 1)
            };
            let state = trajectory.state(idx);
            if !system.domain().contains(&state) {
                continue;
            }
            let time = trajectory.times()[idx];
            let derivative = match mode {
                DerivativeMode::ForwardDifference => {
                    (trajectory.state(idx + ts_steps) - &state) / t_s
                }
                DerivativeMode::ExactOracle => system.rhs(time, &state, &zero)?,
            };
            samples.push(DriftSample {
                time,
                state,
                derivative,
                input: zero.clone(),
            });
        }
    }

    let n = system.state_dim();
    let features = feature_count(spec);
    let mut coefficients = DMatrix::zeros(n, features);
    let mut diagnostics = Vec::with_capacity(n);
    for j in 0..n {
        let problem = assemble_drift_lrp(&samples, recovered_g, spec, j)?;
        let solution = solve_least_squares(&problem)?;
        coefficients
            .row_mut(j)
            .copy_from(&solution.coefficients.transpose());
        diagnostics.push(solution);
    }
    Ok(RecoveredDriftField {
        basis: spec.clone(),
        coefficients,
        diagnostics,
    })
}

/// Compare a recovered field against the true one at `num_points` freshly
/// sampled states (drawn with `sampler` from the truth's domain).
pub fn validate_field(
    recovered: &RecoveredControlField,
    truth: &AffineSystem,
    num_points: usize,
    sampler: &AnchorSampler,
    seed: u64,
) -> Result<ValidationReport> {
    let n = truth.state_dim();
    let m = truth.input_dim();
    if recovered.output_dim() != n || recovered.input_dim() != m {
        return Err(Error::DimensionMismatch {
            what: "recovered field shape",
            expected: n * m,
            got: recovered.output_dim() * recovered.input_dim(),
        });
    }
    let points = sample_validation_points(truth, num_points, sampler, seed)?;
    let mut sq_sum: DMatrix<f64> = DMatrix::zeros(n, m);
    let mut max_abs: DMatrix<f64> = DMatrix::zeros(n, m);
    let mut out_of_domain = 0;
    for x in &points {
        if !recovered.basis().domain().contains(x) {
            out_of_domain += 1;
        }
        let g_true = truth.control_matrix(x)?;
        let g_hat = recovered.evaluate(x)?;
        for j in 0..n {
            for s in 0..m {
                let err = libm::fabs(g_hat[(j, s)] - g_true[(j, s)]);
                sq_sum[(j, s)] += err * err;
                if err > max_abs[(j, s)] {
                    max_abs[(j, s)] = err;
                }
            }
        }
    }
    let rmse = sq_sum.map(|v| libm::sqrt(v / points.len() as f64));
    Ok(ValidationReport {
        sample_points: points,
        rmse,
        max_abs,
        condition_numbers: recovered
            .diagnostics
            .iter()
            .map(|d| d.condition_number)
            .collect(),
        out_of_domain,
    })
}

fn sample_validation_points(
    truth: &AffineSystem,
    num_points: usize,
    sampler: &AnchorSampler,
    seed: u64,
) -> Result<Vec<DVector<f64>>> {
    use rand::Rng;
    let domain = truth.domain();
    let n = domain.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x56414c, 1));
    match sampler {
        AnchorSampler::Explicit(points) => Ok(points.clone()),
        AnchorSampler::UniformBox => Ok((0..num_points)
            .map(|_| {
                DVector::from_fn(n, |i, _| {
                    let lo = domain.lower()[i];
                    let hi = domain.upper()[i];
                    lo + (hi - lo) * rng.gen::<f64>()
                })
            })
            .collect()),
        AnchorSampler::UnitSphere => {
            let mut points = Vec::with_capacity(num_points);
            while points.len() < num_points {
                let v = DVector::from_fn(n, |_, _| rng.gen::<f64>() * 2.0 - 1.0);
                let norm = v.norm();
                if norm > 1e-3 && norm <= 1.0 {
                    points.push(v / norm);
                }
            }
            Ok(points)
        }
    }
}

/// One row of the noise convergence study.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseStudyRow {
    /// Number of perturbation experiments per anchor.
    pub num_perturbations: usize,
    /// Mean of `|| theta - theta_hat ||_2` over the trials.
    pub mean_error: f64,
    /// Median of the error norm over the trials.
    pub median_error: f64,
    /// First quartile.
    pub q25: f64,
    /// Third quartile.
    pub q75: f64,
    /// Number of noisy trials behind the row.
    pub trials: usize,
}

/// Coefficient-error norm versus experiment count under process noise.
///
/// For every `N` in `n_values` the anchor set of `base_plan` is reused with
/// freshly designed inputs of `N` perturbations (step `input_scale`). The
/// reference coefficients `theta` are the noiseless fit at that same `N`;
/// each trial reruns the pipeline with noise amplitude
/// `base_plan.noise_amplitude()` and an independent stream derived from
/// `seed`, recording `|| theta - theta_hat ||_2`.
pub fn noise_convergence_study(
    system: &AffineSystem,
    base_plan: &ExperimentPlan,
    spec: &BasisSpec,
    n_values: &[usize],
    trials: usize,
    seed: u64,
    input_scale: f64,
) -> Result<Vec<NoiseStudyRow>> {
    if trials == 0 {
        return Err(Error::InvalidArgument {
            what: "trials",
            details: format!("need at least one trial, got {trials}"),
        });
    }
    if n_values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument {
            what: "n_values",
            details: alloc::string::String::from("must be strictly ascending"),
        });
    }
    let mut rows = Vec::with_capacity(n_values.len());
    for &n_perturbations in n_values {
        let inputs = design_inputs(system.input_dim(), n_perturbations, input_scale)?;
        let noiseless = base_plan.with_inputs(inputs.clone())?.with_noise(0.0)?;
        let theta =
            recover_control_field(system, &noiseless, spec, DerivativeMode::ForwardDifference)?
                .stacked_coefficients();
        let mut errors = Vec::with_capacity(trials);
        for trial in 0..trials {
            let noisy = base_plan
                .with_inputs(inputs.clone())?
                .with_seed(derive_seed(seed, n_perturbations as u64, trial as u64))?;
            let theta_hat =
                recover_control_field(system, &noisy, spec, DerivativeMode::ForwardDifference)?
                    .stacked_coefficients();
            errors.push((&theta - &theta_hat).norm());
        }
        errors.sort_by(|a, b| a.partial_cmp(b).expect("error norms are finite"));
        let mean = errors.iter().sum::<f64>() / errors.len() as f64;
        rows.push(NoiseStudyRow {
            num_perturbations: n_perturbations,
            mean_error: mean,
            median_error: percentile(&errors, 0.5),
            q25: percentile(&errors, 0.25),
            q75: percentile(&errors, 0.75),
            trials,
        });
    }
    Ok(rows)
}

/// Linear-interpolated percentile of an ascending slice.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.len() == 1 {
        return sorted[0];
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = libm::floor(pos) as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}
