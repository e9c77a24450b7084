//! The perturbation protocol: repeated short-horizon experiments from
//! identical initial conditions, and the difference samples they produce.
//!
//! At each anchor state `a_j` the system is restarted `N + 1` times with
//! inputs `u^(0)..u^(N)` held constant over `[t0, t0 + t_s]`. Differencing
//! the reference experiment against each perturbation kills the drift:
//!
//! ```text
//! delta_i xdot(t0) = g(a_j) delta_i u(t0),    delta_i x(t0) = 0
//! ```
//!
//! Derivatives are estimated by the forward difference
//! `(x(t0 + t_s) - x(t0)) / t_s`, which carries an `O(t_s)` bias; the
//! exact-oracle mode replaces them with analytic values to separate method
//! error from sampling error in tests.
//!
//! All randomness (anchor sampling, per-experiment noise streams) flows from
//! the plan seed, so replaying a plan is bitwise reproducible.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dynamics::{integrate, integrate_noisy, AffineSystem, ControlSignal, StepNoise};
use crate::error::Error;
use crate::Result;

/// How derivatives at `t0` are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DerivativeMode {
    /// Forward difference over the sampling window (the measured protocol).
    #[default]
    ForwardDifference,
    /// Test-only oracle: derivatives from the true right-hand side, and
    /// derivative *differences* from the control fields alone, so the drift
    /// cancels algebraically rather than numerically.
    ExactOracle,
}

/// One perturbation battery: anchors, per-anchor input sets, and timing.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentPlan {
    anchors: Vec<DVector<f64>>,
    input_sets: Vec<Vec<DVector<f64>>>,
    t_s: f64,
    dt: f64,
    reference_index: usize,
    noise_amplitude: f64,
    seed: u64,
}

impl ExperimentPlan {
    /// Validate and build a plan. Every anchor needs at least two inputs
    /// (a reference and one perturbation) and `dt` must divide `t_s`.
    pub fn new(
        anchors: Vec<DVector<f64>>,
        input_sets: Vec<Vec<DVector<f64>>>,
        t_s: f64,
        dt: f64,
        reference_index: usize,
        noise_amplitude: f64,
        seed: u64,
    ) -> Result<Self> {
        if anchors.is_empty() {
            return Err(Error::InsufficientData { needed: 1, got: 0 });
        }
        if input_sets.len() != anchors.len() {
            return Err(Error::DimensionMismatch {
                what: "input sets",
                expected: anchors.len(),
                got: input_sets.len(),
            });
        }
        if !(t_s > 0.0) {
            return Err(Error::InvalidArgument {
                what: "t_s",
                details: format!("sampling time must be positive, got {t_s}"),
            });
        }
        if !(dt > 0.0) || dt > t_s {
            return Err(Error::InvalidArgument {
                what: "dt",
                details: format!("need 0 < dt <= t_s, got dt = {dt}, t_s = {t_s}"),
            });
        }
        let ratio = t_s / dt;
        if libm::fabs(ratio - libm::round(ratio)) > 1e-9 {
            return Err(Error::InvalidArgument {
                what: "dt",
                details: format!("dt = {dt} does not divide t_s = {t_s}"),
            });
        }
        if noise_amplitude < 0.0 {
            return Err(Error::InvalidArgument {
                what: "noise_amplitude",
                details: format!("must be nonnegative, got {noise_amplitude}"),
            });
        }
        for (j, set) in input_sets.iter().enumerate() {
            if set.len() < 2 {
                return Err(Error::InsufficientData {
                    needed: 2,
                    got: set.len(),
                });
            }
            if reference_index >= set.len() {
                return Err(Error::InvalidArgument {
                    what: "reference_index",
                    details: format!(
                        "index {reference_index} out of range for anchor {j} with {} inputs",
                        set.len()
                    ),
                });
            }
        }
        Ok(Self {
            anchors,
            input_sets,
            t_s,
            dt,
            reference_index,
            noise_amplitude,
            seed,
        })
    }

    /// Anchor states `a_0..a_M`.
    pub fn anchors(&self) -> &[DVector<f64>] {
        &self.anchors
    }

    /// Input set applied at anchor `j`.
    pub fn inputs_for(&self, anchor: usize) -> &[DVector<f64>] {
        &self.input_sets[anchor]
    }

    /// Sampling window length.
    pub fn sampling_time(&self) -> f64 {
        self.t_s
    }

    /// Integrator step.
    pub fn integrator_step(&self) -> f64 {
        self.dt
    }

    /// Which input of each set is the reference experiment.
    pub fn reference_index(&self) -> usize {
        self.reference_index
    }

    /// Amplitude of the per-step process noise (0 = noiseless).
    pub fn noise_amplitude(&self) -> f64 {
        self.noise_amplitude
    }

    /// Seed from which all plan randomness derives.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Total number of experiments `(M+1) * (N+1)` (per-anchor sets may vary).
    pub fn experiment_count(&self) -> usize {
        self.input_sets.iter().map(Vec::len).sum()
    }

    /// Copy of the plan with a different noise amplitude.
    pub fn with_noise(&self, noise_amplitude: f64) -> Result<Self> {
        Self::new(
            self.anchors.clone(),
            self.input_sets.clone(),
            self.t_s,
            self.dt,
            self.reference_index,
            noise_amplitude,
            self.seed,
        )
    }

    /// Copy of the plan with a different seed.
    pub fn with_seed(&self, seed: u64) -> Result<Self> {
        Self::new(
            self.anchors.clone(),
            self.input_sets.clone(),
            self.t_s,
            self.dt,
            self.reference_index,
            self.noise_amplitude,
            seed,
        )
    }

    /// Copy of the plan with every anchor's inputs replaced by `inputs`.
    pub fn with_inputs(&self, inputs: Vec<DVector<f64>>) -> Result<Self> {
        Self::new(
            self.anchors.clone(),
            alloc::vec![inputs; self.anchors.len()],
            self.t_s,
            self.dt,
            self.reference_index,
            self.noise_amplitude,
            self.seed,
        )
    }

    /// Copy of the plan with a different sampling time (and step, when given).
    pub fn with_timing(&self, t_s: f64, dt: Option<f64>) -> Result<Self> {
        Self::new(
            self.anchors.clone(),
            self.input_sets.clone(),
            t_s,
            dt.unwrap_or(self.dt),
            self.reference_index,
            self.noise_amplitude,
            self.seed,
        )
    }
}

/// Outcome of one experiment: the anchor, the applied input at `t0`, and the
/// states at both ends of the sampling window.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentRecord {
    /// Index of the anchor this experiment restarted from.
    pub anchor_index: usize,
    /// Index of the input within the anchor's input set.
    pub input_index: usize,
    /// Input vector applied at `t0` (held constant over the window).
    pub u0: DVector<f64>,
    /// State at `t0` — exactly the plan's anchor.
    pub x_t0: DVector<f64>,
    /// State at `t0 + t_s`.
    pub x_t0_plus_ts: DVector<f64>,
    /// Derivative estimate at `t0`, filled by [`estimate_derivative`] or the
    /// exact oracle.
    pub derivative_estimate: Option<DVector<f64>>,
}

/// One difference pair `(delta_i u, delta_i xdot)` anchored at `a_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct DifferenceSample {
    /// Index of the shared anchor.
    pub anchor_index: usize,
    /// The anchor state `a_j` both experiments restarted from.
    pub anchor_state: DVector<f64>,
    /// `u^(ref) - u^(i)` at `t0`.
    pub delta_u: DVector<f64>,
    /// `xdot^(ref) - xdot^(i)` at `t0`.
    pub delta_xdot: DVector<f64>,
    /// Index `i` of the perturbation experiment.
    pub perturbation_index: usize,
}

/// Mix two words into a sub-seed (splitmix64 finalizer chain); used to give
/// every experiment an independent but reproducible noise stream.
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e3779b97f4a7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^ (z >> 31)
    }
    splitmix(seed ^ splitmix(a.wrapping_add(0x517cc1b727220a95) ^ splitmix(b)))
}

/// Run one experiment: integrate from `anchor` under constant `u0` over
/// `[0, t_s]`, recording the endpoint states. Deterministic given `seed`.
pub fn run_experiment(
    system: &AffineSystem,
    anchor: &DVector<f64>,
    u0: &DVector<f64>,
    t_s: f64,
    dt: f64,
    noise_amplitude: f64,
    seed: u64,
) -> Result<ExperimentRecord> {
    system.domain().check(anchor)?;
    let signal = ControlSignal::constant(u0, t_s)?;
    let trajectory = if noise_amplitude > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        integrate_noisy(
            system,
            anchor,
            &signal,
            0.0,
            t_s,
            dt,
            StepNoise {
                amplitude: noise_amplitude,
                rng: &mut rng,
            },
        )?
    } else {
        integrate(system, anchor, &signal, 0.0, t_s, dt)?
    };
    Ok(ExperimentRecord {
        anchor_index: 0,
        input_index: 0,
        u0: u0.clone(),
        x_t0: anchor.clone(),
        x_t0_plus_ts: trajectory.final_state(),
        derivative_estimate: None,
    })
}

/// Forward-difference derivative `(x(t0 + t_s) - x(t0)) / t_s`.
pub fn estimate_derivative(record: &ExperimentRecord, t_s: f64) -> Result<DVector<f64>> {
    if !(t_s > 0.0) {
        return Err(Error::InvalidArgument {
            what: "t_s",
            details: format!("must be positive, got {t_s}"),
        });
    }
    Ok((&record.x_t0_plus_ts - &record.x_t0) / t_s)
}

/// Difference every non-reference record in `records` against the reference.
///
/// All records must share one anchor and carry derivative estimates; the
/// output has one sample per non-reference record, in record order.
pub fn form_differences(
    records: &[ExperimentRecord],
    reference_index: usize,
) -> Result<Vec<DifferenceSample>> {
    if records.len() < 2 {
        return Err(Error::InsufficientData {
            needed: 2,
            got: records.len(),
        });
    }
    let anchor = records[0].anchor_index;
    if records.iter().any(|r| r.anchor_index != anchor) {
        return Err(Error::ProtocolViolation {
            details: String::from(
                "difference samples require identical initial conditions: records mix anchors",
            ),
        });
    }
    let reference = records
        .iter()
        .find(|r| r.input_index == reference_index)
        .ok_or_else(|| Error::InvalidArgument {
            what: "reference_index",
            details: format!("no record with input index {reference_index}"),
        })?;
    let ref_deriv =
        reference
            .derivative_estimate
            .as_ref()
            .ok_or_else(|| Error::ProtocolViolation {
                details: String::from("reference record has no derivative estimate"),
            })?;
    let mut samples = Vec::with_capacity(records.len() - 1);
    for record in records {
        if record.input_index == reference_index {
            continue;
        }
        let deriv =
            record
                .derivative_estimate
                .as_ref()
                .ok_or_else(|| Error::ProtocolViolation {
                    details: format!(
                        "record (anchor {}, input {}) has no derivative estimate",
                        record.anchor_index, record.input_index
                    ),
                })?;
        samples.push(DifferenceSample {
            anchor_index: anchor,
            anchor_state: record.x_t0.clone(),
            delta_u: &reference.u0 - &record.u0,
            delta_xdot: ref_deriv - deriv,
            perturbation_index: record.input_index,
        });
    }
    Ok(samples)
}

/// Designed perturbation inputs: reference `u^(0) = 0` and
/// `u^(i) = -scale * e_{((i-1) mod m) + 1} * (1 + floor((i-1)/m))`, so the
/// first `m` difference rows form `scale * I` and the stacked `delta U` has
/// full column rank with condition number at most `2 * (1 + floor(N/m))`.
pub fn design_inputs(m: usize, perturbations: usize, scale: f64) -> Result<Vec<DVector<f64>>> {
    if m == 0 {
        return Err(Error::InvalidArgument {
            what: "m",
            details: String::from("input dimension must be positive"),
        });
    }
    if perturbations < m {
        return Err(Error::InfeasibleDesign {
            input_dim: m,
            perturbations,
        });
    }
    if !(scale > 0.0) {
        return Err(Error::InvalidArgument {
            what: "scale",
            details: format!("must be positive, got {scale}"),
        });
    }
    let mut inputs = Vec::with_capacity(perturbations + 1);
    inputs.push(DVector::zeros(m));
    for i in 1..=perturbations {
        let axis = (i - 1) % m;
        let magnitude = scale * (1 + (i - 1) / m) as f64;
        let mut u = DVector::zeros(m);
        u[axis] = -magnitude;
        inputs.push(u);
    }
    Ok(inputs)
}

/// How anchors are drawn for [`build_plan`].
#[derive(Debug, Clone)]
pub enum AnchorSampler {
    /// I.i.d. uniform over the system's state domain box.
    UniformBox,
    /// Uniform over the unit sphere (domain box samples, normalized).
    UnitSphere,
    /// Caller-supplied anchor states.
    Explicit(Vec<DVector<f64>>),
}

/// How each anchor's input set is chosen for [`build_plan`].
#[derive(Debug, Clone)]
pub enum InputDesign {
    /// [`design_inputs`] with this many perturbations and scale.
    Designed {
        /// Number of perturbation experiments `N`.
        perturbations: usize,
        /// Magnitude step of the designed inputs.
        scale: f64,
    },
    /// One explicit input set shared by every anchor.
    Shared(Vec<DVector<f64>>),
}

/// Sample anchors and assemble a validated plan. Deterministic given `seed`.
pub fn build_plan(
    system: &AffineSystem,
    num_anchors: usize,
    inputs: &InputDesign,
    t_s: f64,
    dt: f64,
    sampler: &AnchorSampler,
    seed: u64,
) -> Result<ExperimentPlan> {
    if num_anchors == 0 {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let anchors = sample_anchors(system, num_anchors, sampler, seed)?;
    for a in &anchors {
        system.domain().check(a)?;
    }
    let input_set = match inputs {
        InputDesign::Designed {
            perturbations,
            scale,
        } => design_inputs(system.input_dim(), *perturbations, *scale)?,
        InputDesign::Shared(set) => set.clone(),
    };
    ExperimentPlan::new(
        anchors,
        alloc::vec![input_set; num_anchors],
        t_s,
        dt,
        0,
        0.0,
        seed,
    )
}

fn sample_anchors(
    system: &AffineSystem,
    count: usize,
    sampler: &AnchorSampler,
    seed: u64,
) -> Result<Vec<DVector<f64>>> {
    let domain = system.domain();
    let n = domain.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x414e4348, 0));
    match sampler {
        AnchorSampler::Explicit(list) => {
            if list.len() != count {
                return Err(Error::DimensionMismatch {
                    what: "explicit anchors",
                    expected: count,
                    got: list.len(),
                });
            }
            Ok(list.clone())
        }
        AnchorSampler::UniformBox => Ok((0..count)
            .map(|_| {
                DVector::from_fn(n, |i, _| {
                    let lo = domain.lower()[i];
                    let hi = domain.upper()[i];
                    lo + (hi - lo) * rng.gen::<f64>()
                })
            })
            .collect()),
        AnchorSampler::UnitSphere => {
            let mut anchors = Vec::with_capacity(count);
            while anchors.len() < count {
                let v = DVector::from_fn(n, |_, _| rng.gen::<f64>() * 2.0 - 1.0);
                let norm = v.norm();
                if norm > 1e-3 && norm <= 1.0 {
                    anchors.push(v / norm);
                }
            }
            Ok(anchors)
        }
    }
}

/// Run every experiment of one anchor and return its records with derivative
/// estimates filled according to `mode`. Noise streams are seeded per
/// experiment as `derive_seed(plan.seed, anchor_index, input_index)`.
pub fn collect_anchor_records(
    system: &AffineSystem,
    plan: &ExperimentPlan,
    anchor_index: usize,
    mode: DerivativeMode,
) -> Result<Vec<ExperimentRecord>> {
    let anchor = &plan.anchors()[anchor_index];
    let inputs = plan.inputs_for(anchor_index);
    let mut records = Vec::with_capacity(inputs.len());
    for (input_index, u0) in inputs.iter().enumerate() {
        let mut record = match mode {
            DerivativeMode::ForwardDifference => {
                let seed = derive_seed(plan.seed(), anchor_index as u64, input_index as u64);
                let mut r = run_experiment(
                    system,
                    anchor,
                    u0,
                    plan.sampling_time(),
                    plan.integrator_step(),
                    plan.noise_amplitude(),
                    seed,
                )
                .map_err(|e| e.at_experiment(anchor_index, input_index))?;
                r.derivative_estimate = Some(estimate_derivative(&r, plan.sampling_time())?);
                r
            }
            DerivativeMode::ExactOracle => {
                system
                    .domain()
                    .check(anchor)
                    .map_err(|e| e.at_experiment(anchor_index, input_index))?;
                ExperimentRecord {
                    anchor_index,
                    input_index,
                    u0: u0.clone(),
                    x_t0: anchor.clone(),
                    x_t0_plus_ts: anchor.clone(),
                    derivative_estimate: Some(
                        system
                            .rhs(0.0, anchor, u0)
                            .map_err(|e| e.at_experiment(anchor_index, input_index))?,
                    ),
                }
            }
        };
        record.anchor_index = anchor_index;
        record.input_index = input_index;
        records.push(record);
    }
    Ok(records)
}

/// Difference samples for one anchor under `mode`.
///
/// In oracle mode the derivative difference is formed from the control
/// contributions alone — mathematically identical to differencing the true
/// derivatives (the drift cancels in exact arithmetic), and by construction
/// independent of the drift down to the last bit.
pub fn collect_anchor_differences(
    system: &AffineSystem,
    plan: &ExperimentPlan,
    anchor_index: usize,
    mode: DerivativeMode,
) -> Result<Vec<DifferenceSample>> {
    match mode {
        DerivativeMode::ForwardDifference => {
            let records = collect_anchor_records(system, plan, anchor_index, mode)?;
            form_differences(&records, plan.reference_index())
        }
        DerivativeMode::ExactOracle => {
            let anchor = &plan.anchors()[anchor_index];
            system.domain().check(anchor)?;
            let inputs = plan.inputs_for(anchor_index);
            let reference = &inputs[plan.reference_index()];
            let ref_ctrl = system.control_contribution(anchor, reference)?;
            let mut samples = Vec::with_capacity(inputs.len() - 1);
            for (input_index, u0) in inputs.iter().enumerate() {
                if input_index == plan.reference_index() {
                    continue;
                }
                let ctrl = system.control_contribution(anchor, u0)?;
                samples.push(DifferenceSample {
                    anchor_index,
                    anchor_state: anchor.clone(),
                    delta_u: reference - u0,
                    delta_xdot: &ref_ctrl - &ctrl,
                    perturbation_index: input_index,
                });
            }
            Ok(samples)
        }
    }
}

/// Pooled difference samples over every anchor of the plan.
pub fn collect_plan_differences(
    system: &AffineSystem,
    plan: &ExperimentPlan,
    mode: DerivativeMode,
) -> Result<Vec<DifferenceSample>> {
    let mut samples = Vec::new();
    for anchor_index in 0..plan.anchors().len() {
        samples.extend(collect_anchor_differences(
            system,
            plan,
            anchor_index,
            mode,
        )?);
    }
    Ok(samples)
}

/// The stacked `delta U` matrix of a difference batch (one row per sample).
pub fn delta_u_matrix(samples: &[DifferenceSample]) -> Result<DMatrix<f64>> {
    if samples.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let m = samples[0].delta_u.len();
    let mut du = DMatrix::zeros(samples.len(), m);
    for (r, s) in samples.iter().enumerate() {
        du.row_mut(r).copy_from(&s.delta_u.transpose());
    }
    Ok(du)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{make_bloch_system, make_linear_system, DriftFn};
    use alloc::boxed::Box;
    use alloc::vec;
    use approx::assert_relative_eq;

    fn demo_linear() -> AffineSystem {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 4.0, 5.0, -1.0]);
        let b = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 0.6, 1.0]);
        make_linear_system(&a, &b).unwrap()
    }

    fn demo_controls() -> Vec<DVector<f64>> {
        vec![
            DVector::from_vec(vec![1.0, 2.0]),
            DVector::from_vec(vec![2.0, 4.0]),
            DVector::from_vec(vec![3.0, 8.0]),
        ]
    }

    fn demo_plan(t_s: f64) -> ExperimentPlan {
        ExperimentPlan::new(
            vec![DVector::from_vec(vec![0.0, -0.25])],
            vec![demo_controls()],
            t_s,
            1e-5,
            0,
            0.0,
            7,
        )
        .unwrap()
    }

    #[test]
    fn forward_difference_near_true_derivative() {
        let sys = demo_linear();
        let anchor = DVector::from_vec(vec![0.0, -0.25]);
        let u0 = DVector::from_vec(vec![1.0, 2.0]);
        let t_s = 1e-3;
        let record = run_experiment(&sys, &anchor, &u0, t_s, 1e-5, 0.0, 0).unwrap();
        let fd = estimate_derivative(&record, t_s).unwrap();
        // True derivative (3, 2.85); the bias is (t_s/2) * xddot(0) with
        // xddot(0) = A xdot(0) = (14.4, 12.15), plus O(t_s^2).
        assert!((fd[0] - 3.0).abs() <= 0.55 * t_s * 14.4);
        assert!((fd[1] - 2.85).abs() <= 0.55 * t_s * 12.15);
        assert!((fd[0] - 3.0).abs() >= 0.4 * t_s * 14.4);
    }

    #[test]
    fn experiments_are_deterministic() {
        let sys = make_bloch_system(0.6, 1.4);
        let anchor = DVector::from_vec(vec![0.0, 0.0, 1.0]);
        let u0 = DVector::from_vec(vec![1.0, 0.0]);
        let a = run_experiment(&sys, &anchor, &u0, 1e-4, 1e-5, 0.5, 42).unwrap();
        let b = run_experiment(&sys, &anchor, &u0, 1e-4, 1e-5, 0.5, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn constant_derivative_is_recovered_exactly() {
        // xdot = u with u0 = 5: x(t_s) = 5e-3 and the estimate is exact.
        let sys = make_linear_system(&DMatrix::zeros(1, 1), &DMatrix::identity(1, 1)).unwrap();
        let record = run_experiment(
            &sys,
            &DVector::zeros(1),
            &DVector::from_element(1, 5.0),
            1e-3,
            1e-5,
            0.0,
            0,
        )
        .unwrap();
        assert_relative_eq!(record.x_t0_plus_ts[0], 5e-3, epsilon = 1e-12);
        let fd = estimate_derivative(&record, 1e-3).unwrap();
        assert_relative_eq!(fd[0], 5.0, epsilon = 1e-9);
    }

    #[test]
    fn zero_dynamics_estimate_is_exactly_zero() {
        let sys = make_linear_system(&DMatrix::zeros(2, 2), &DMatrix::zeros(2, 2)).unwrap();
        let anchor = DVector::from_vec(vec![0.3, -0.8]);
        let record = run_experiment(&sys, &anchor, &DVector::zeros(2), 1e-3, 1e-5, 0.0, 0).unwrap();
        let fd = estimate_derivative(&record, 1e-3).unwrap();
        assert_eq!(fd, DVector::zeros(2));
    }

    #[test]
    fn quadratic_bias_halves_with_sampling_time() {
        // xdot = 2t gives x(t) = t^2; the forward difference at t0 = 0 over
        // t_s is exactly t_s, a pure O(t_s) bias.
        let drift: DriftFn = Box::new(|t, _x| DVector::from_element(1, 2.0 * t));
        let sys =
            AffineSystem::new(drift, vec![], crate::dynamics::Domain::symmetric(1, 10.0)).unwrap();
        let err_at = |t_s: f64| {
            let sig = ControlSignal::piecewise(DMatrix::zeros(1, 0), t_s).unwrap();
            let traj = integrate(&sys, &DVector::zeros(1), &sig, 0.0, t_s, t_s / 100.0).unwrap();

            (traj.final_state()[0] - 0.0) / t_s // true derivative at 0 is 0, so the estimate is the error
        };
        let e1 = err_at(1e-2);
        let e2 = err_at(5e-3);
        assert_relative_eq!(e1, 1e-2, max_relative = 1e-6);
        assert!((e1 / e2 - 2.0).abs() < 0.05 * 2.0);
    }

    #[test]
    fn rejects_nonpositive_sampling_time() {
        let record = ExperimentRecord {
            anchor_index: 0,
            input_index: 0,
            u0: DVector::zeros(1),
            x_t0: DVector::zeros(1),
            x_t0_plus_ts: DVector::zeros(1),
            derivative_estimate: None,
        };
        assert!(estimate_derivative(&record, 0.0).is_err());
        assert!(estimate_derivative(&record, -1.0).is_err());
    }

    #[test]
    fn anchor_outside_domain_is_rejected() {
        let sys = demo_linear(); // domain [-1, 1]^2
        let res = run_experiment(
            &sys,
            &DVector::from_vec(vec![0.0, -2.5]),
            &DVector::zeros(2),
            1e-3,
            1e-5,
            0.0,
            0,
        );
        assert!(matches!(
            res,
            Err(Error::OutsideDomain { component: 1, .. })
        ));
    }

    #[test]
    fn difference_matrix_matches_reference_values() {
        let sys = demo_linear();
        // The frozen reference targets correspond to a 1e-4 s sampling window.
        let plan = demo_plan(1e-4);
        let samples =
            collect_anchor_differences(&sys, &plan, 0, DerivativeMode::ForwardDifference).unwrap();
        assert_eq!(samples.len(), 2);
        assert_eq!(samples[0].delta_u, DVector::from_vec(vec![-1.0, -2.0]));
        assert_eq!(samples[1].delta_u, DVector::from_vec(vec![-2.0, -6.0]));
        // Reference values: delta xdot_1 = (-4.0007, -10.0018),
        //                   delta xdot_2 = (-2.6009, -7.2021).
        assert!((samples[0].delta_xdot[0] - -4.0007).abs() < 5e-3);
        assert!((samples[1].delta_xdot[0] - -10.0018).abs() < 5e-3);
        assert!((samples[0].delta_xdot[1] - -2.6009).abs() < 5e-3);
        assert!((samples[1].delta_xdot[1] - -7.2021).abs() < 5e-3);
    }

    #[test]
    fn identical_inputs_difference_to_zero() {
        let sys = demo_linear();
        let plan = ExperimentPlan::new(
            vec![DVector::from_vec(vec![0.1, 0.2])],
            vec![vec![
                DVector::from_vec(vec![1.0, 2.0]),
                DVector::from_vec(vec![1.0, 2.0]),
            ]],
            1e-3,
            1e-5,
            0,
            0.0,
            0,
        )
        .unwrap();
        let samples =
            collect_anchor_differences(&sys, &plan, 0, DerivativeMode::ForwardDifference).unwrap();
        // Identical noiseless experiments are bitwise equal, so both deltas
        // are exactly zero.
        assert_eq!(samples[0].delta_u, DVector::zeros(2));
        assert_eq!(samples[0].delta_xdot, DVector::zeros(2));
    }

    #[test]
    fn mixed_anchors_are_a_protocol_violation() {
        let mk = |anchor_index| ExperimentRecord {
            anchor_index,
            input_index: anchor_index,
            u0: DVector::zeros(1),
            x_t0: DVector::zeros(1),
            x_t0_plus_ts: DVector::zeros(1),
            derivative_estimate: Some(DVector::zeros(1)),
        };
        let res = form_differences(&[mk(0), mk(1)], 0);
        assert!(matches!(res, Err(Error::ProtocolViolation { .. })));
        let res = form_differences(&[mk(0)], 0);
        assert!(matches!(res, Err(Error::InsufficientData { .. })));
    }

    #[test]
    fn designed_inputs_first_block_is_identity() {
        let inputs = design_inputs(2, 2, 1.0).unwrap();
        assert_eq!(inputs[0], DVector::zeros(2));
        // delta_i u = u0 - ui = e_i for the first m perturbations.
        let d1 = &inputs[0] - &inputs[1];
        let d2 = &inputs[0] - &inputs[2];
        assert_eq!(d1, DVector::from_vec(vec![1.0, 0.0]));
        assert_eq!(d2, DVector::from_vec(vec![0.0, 1.0]));
    }

    #[test]
    fn designed_inputs_are_full_rank_and_well_conditioned() {
        for (m, n, scale) in [(3, 3, 2.0), (2, 4, 1.0), (2, 5, 0.5), (1, 200, 0.5)] {
            let inputs = design_inputs(m, n, scale).unwrap();
            let rows: Vec<_> = (1..=n)
                .map(|i| (&inputs[0] - &inputs[i]).transpose())
                .collect();
            let du = DMatrix::from_rows(&rows);
            let svd = du.clone().svd(false, false);
            let smax = svd.singular_values.max();
            let smin = svd.singular_values.min();
            assert!(smin > 0.0, "rank deficient for m={m}, n={n}");
            let cond = smax / smin;
            let bound = 2.0 * (1 + n / m) as f64;
            assert!(cond <= bound, "cond {cond} > bound {bound} for m={m} n={n}");
            if m == 3 && n == 3 {
                let det = du.determinant();
                assert_relative_eq!(det, scale * scale * scale, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn designed_inputs_give_exact_least_squares_recovery() {
        // Overdetermined delta U from the design recovers a planted b* exactly.
        let inputs = design_inputs(2, 4, 1.0).unwrap();
        let rows: Vec<_> = (1..=4)
            .map(|i| (&inputs[0] - &inputs[i]).transpose())
            .collect();
        let du = DMatrix::from_rows(&rows);
        let b_star = DVector::from_vec(vec![0.3, -1.7]);
        let target = &du * &b_star;
        let sol = du.clone().svd(true, true).solve(&target, 1e-12).unwrap();
        assert!((sol - b_star).norm() < 1e-12);
    }

    #[test]
    fn infeasible_design_is_rejected() {
        assert!(matches!(
            design_inputs(3, 2, 1.0),
            Err(Error::InfeasibleDesign {
                input_dim: 3,
                perturbations: 2
            })
        ));
    }

    #[test]
    fn build_plan_counts_match_study_protocols() {
        // Bloch: 20 anchors x 8 inputs = 160 experiments.
        let bloch = make_bloch_system(0.6, 1.4);
        let mut controls = vec![DVector::zeros(2)];
        for k in 1..=3 {
            controls.push(DVector::from_vec(vec![k as f64, 0.0]));
        }
        controls.push(DVector::zeros(2));
        for k in 1..=3 {
            controls.push(DVector::from_vec(vec![0.0, k as f64]));
        }
        let plan = build_plan(
            &bloch,
            20,
            &InputDesign::Shared(controls),
            1e-4,
            1e-5,
            &AnchorSampler::UnitSphere,
            1,
        )
        .unwrap();
        assert_eq!(plan.experiment_count(), 160);
        for a in plan.anchors() {
            assert_relative_eq!(a.norm(), 1.0, epsilon = 1e-12);
        }

        // PRC: 35 anchors x 3 experiments = 105.
        let prc = crate::dynamics::make_phase_oscillator(libm::sin, |_| 1.0);
        let plan = build_plan(
            &prc,
            35,
            &InputDesign::Designed {
                perturbations: 2,
                scale: 0.5,
            },
            1e-4,
            1e-5,
            &AnchorSampler::UniformBox,
            2,
        )
        .unwrap();
        assert_eq!(plan.experiment_count(), 105);

        // Minimal legal plan: one anchor, reference plus one perturbation.
        let lin = demo_linear();
        let plan = build_plan(
            &lin,
            1,
            &InputDesign::Shared(vec![DVector::zeros(2), DVector::from_vec(vec![1.0, 0.0])]),
            1e-3,
            1e-5,
            &AnchorSampler::UniformBox,
            3,
        )
        .unwrap();
        assert_eq!(plan.experiment_count(), 2);
    }

    #[test]
    fn plan_randomness_is_reproducible() {
        let sys = make_bloch_system(0.6, 1.4);
        let design = InputDesign::Designed {
            perturbations: 2,
            scale: 1.0,
        };
        let p1 = build_plan(&sys, 5, &design, 1e-4, 1e-5, &AnchorSampler::UnitSphere, 9).unwrap();
        let p2 = build_plan(&sys, 5, &design, 1e-4, 1e-5, &AnchorSampler::UnitSphere, 9).unwrap();
        assert_eq!(p1, p2);
        let p3 = build_plan(&sys, 5, &design, 1e-4, 1e-5, &AnchorSampler::UnitSphere, 10).unwrap();
        assert_ne!(p1.anchors()[0], p3.anchors()[0]);
    }

    #[test]
    fn drift_swap_leaves_forward_differences_nearly_unchanged() {
        // Replacing f by f + h moves the difference samples only through the
        // O(t_s) estimator bias: shrinking t_s tenfold shrinks the effect
        // about tenfold.
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 4.0, 5.0, -1.0]);
        let b = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 0.6, 1.0]);
        let a_alt = DMatrix::from_row_slice(2, 2, &[-2.0, 1.0, 0.0, 3.0]);
        let sys1 = make_linear_system(&a, &b).unwrap();
        let sys2 = make_linear_system(&a_alt, &b).unwrap();
        let diff_at = |t_s: f64| {
            let plan = demo_plan(t_s);
            let s1 = collect_anchor_differences(&sys1, &plan, 0, DerivativeMode::ForwardDifference)
                .unwrap();
            let s2 = collect_anchor_differences(&sys2, &plan, 0, DerivativeMode::ForwardDifference)
                .unwrap();
            s1.iter()
                .zip(&s2)
                .map(|(x, y)| (&x.delta_xdot - &y.delta_xdot).norm())
                .fold(0.0f64, f64::max)
        };
        let d_coarse = diff_at(1e-3);
        let d_fine = diff_at(1e-4);
        assert!(d_coarse > 0.0);
        let ratio = d_coarse / d_fine;
        assert!((5.0..=20.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn oracle_differences_are_drift_free_bitwise() {
        let bloch = make_bloch_system(0.6, 1.4);
        let plan = build_plan(
            &bloch,
            4,
            &InputDesign::Designed {
                perturbations: 3,
                scale: 1.0,
            },
            1e-4,
            1e-5,
            &AnchorSampler::UnitSphere,
            5,
        )
        .unwrap();
        let s1 = collect_plan_differences(&bloch, &plan, DerivativeMode::ExactOracle).unwrap();
        let swapped = bloch
            .with_drift(Box::new(|_t, x: &DVector<f64>| {
                DVector::from_vec(vec![x[1] * x[1], -x[0] * x[2], x[0]])
            }))
            .unwrap();
        let s2 = collect_plan_differences(&swapped, &plan, DerivativeMode::ExactOracle).unwrap();
        assert_eq!(s1, s2);
    }

    #[test]
    fn oracle_differences_match_control_field_product() {
        let bloch = make_bloch_system(0.6, 1.4);
        let plan = build_plan(
            &bloch,
            3,
            &InputDesign::Designed {
                perturbations: 2,
                scale: 1.0,
            },
            1e-4,
            1e-5,
            &AnchorSampler::UnitSphere,
            11,
        )
        .unwrap();
        for s in collect_plan_differences(&bloch, &plan, DerivativeMode::ExactOracle).unwrap() {
            let g = bloch.control_matrix(&s.anchor_state).unwrap();
            let predicted = &g * &s.delta_u;
            assert!((predicted - &s.delta_xdot).norm() < 1e-14);
        }
    }

    #[test]
    fn difference_count_is_records_minus_one() {
        let sys = demo_linear();
        let plan = demo_plan(1e-3);
        let records =
            collect_anchor_records(&sys, &plan, 0, DerivativeMode::ForwardDifference).unwrap();
        let samples = form_differences(&records, 0).unwrap();
        assert_eq!(samples.len(), records.len() - 1);
    }

    #[test]
    fn derive_seed_separates_experiments() {
        let s = 42;
        assert_ne!(derive_seed(s, 0, 0), derive_seed(s, 0, 1));
        assert_ne!(derive_seed(s, 0, 0), derive_seed(s, 1, 0));
        assert_eq!(derive_seed(s, 3, 4), derive_seed(s, 3, 4));
    }
}
