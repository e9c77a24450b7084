//! Input-affine ground-truth systems and a fixed-step RK4 integrator.
//!
//! A system is
//!
//! ```text
//! xdot(t) = f(t, x) + sum_{k=1}^{m} g_k(x) u_k(t)
//! ```
//!
//! with drift `f` and control fields `g_k`. The drift receives the current
//! time so that non-autonomous frequencies such as `omega(t) = 0.1 t` can be
//! expressed; the integrator's clock plays the role of an internal clock
//! state, so the learner-visible state stays `n`-dimensional. Control fields
//! are functions of the state alone.
//!
//! Integration is classical 4th-order Runge-Kutta with a fixed step. The
//! step never straddles a segment boundary of the piecewise-constant input
//! (enforced by the caller-supplied `dt`), so the input is held at its
//! step-start value for all four stages. Two calls with identical arguments
//! produce bitwise-identical trajectories.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::Error;
use crate::Result;

/// Drift evaluator `f(t, x)`.
pub type DriftFn = Box<dyn Fn(f64, &DVector<f64>) -> DVector<f64> + Send + Sync>;

/// Control-field evaluator `g_k(x)`.
pub type FieldFn = Box<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;

/// Axis-aligned box in state space, used for sampling and basis scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct Domain {
    lower: DVector<f64>,
    upper: DVector<f64>,
}

impl Domain {
    /// Box with the given per-axis bounds. Every side must have positive length.
    pub fn new(lower: DVector<f64>, upper: DVector<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::DimensionMismatch {
                what: "domain bounds",
                expected: lower.len(),
                got: upper.len(),
            });
        }
        for i in 0..lower.len() {
            if !(upper[i] - lower[i]).is_finite() || upper[i] <= lower[i] {
                return Err(Error::InvalidArgument {
                    what: "domain",
                    details: format!(
                        "side {i} has non-positive length [{}, {}]",
                        lower[i], upper[i]
                    ),
                });
            }
        }
        Ok(Self { lower, upper })
    }

    /// The symmetric box `[-half, half]^n`.
    pub fn symmetric(dim: usize, half: f64) -> Self {
        Self {
            lower: DVector::from_element(dim, -half),
            upper: DVector::from_element(dim, half),
        }
    }

    /// Number of axes.
    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    /// Per-axis lower bounds.
    pub fn lower(&self) -> &DVector<f64> {
        &self.lower
    }

    /// Per-axis upper bounds.
    pub fn upper(&self) -> &DVector<f64> {
        &self.upper
    }

    /// Geometric centre of the box.
    pub fn center(&self) -> DVector<f64> {
        (&self.lower + &self.upper) * 0.5
    }

    /// True when every component of `x` lies inside the box (inclusive).
    pub fn contains(&self, x: &DVector<f64>) -> bool {
        x.len() == self.dim()
            && (0..x.len()).all(|i| x[i] >= self.lower[i] && x[i] <= self.upper[i])
    }

    /// Error naming the first component of `x` outside the box.
    pub fn check(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                what: "state",
                expected: self.dim(),
                got: x.len(),
            });
        }
        for i in 0..x.len() {
            if x[i] < self.lower[i] || x[i] > self.upper[i] {
                return Err(Error::OutsideDomain {
                    component: i,
                    value: x[i],
                    lower: self.lower[i],
                    upper: self.upper[i],
                });
            }
        }
        Ok(())
    }

    /// Rescale component `i` of `x` affinely to `[-1, 1]`.
    pub fn to_unit(&self, x: &DVector<f64>, i: usize) -> f64 {
        2.0 * (x[i] - self.lower[i]) / (self.upper[i] - self.lower[i]) - 1.0
    }

    /// Rescale component `i` of `x` affinely to `[0, 2*pi)` (angular coordinate).
    pub fn to_angle(&self, x: &DVector<f64>, i: usize) -> f64 {
        2.0 * core::f64::consts::PI * (x[i] - self.lower[i]) / (self.upper[i] - self.lower[i])
    }
}

/// Ground-truth input-affine system `xdot = f(t, x) + sum_k g_k(x) u_k`.
///
/// Immutable after construction and safe to share across threads; many
/// integrations of the same system may run concurrently.
pub struct AffineSystem {
    state_dim: usize,
    input_dim: usize,
    drift: DriftFn,
    control_fields: Vec<FieldFn>,
    state_domain: Domain,
}

impl AffineSystem {
    /// Assemble a system; probes the evaluators at the domain centre to
    /// catch fields whose output length is not `n`.
    pub fn new(drift: DriftFn, control_fields: Vec<FieldFn>, state_domain: Domain) -> Result<Self> {
        let n = state_domain.dim();
        let probe = state_domain.center();
        let f0 = drift(0.0, &probe);
        if f0.len() != n {
            return Err(Error::DimensionMismatch {
                what: "drift output",
                expected: n,
                got: f0.len(),
            });
        }
        for g in &control_fields {
            let gk = g(&probe);
            if gk.len() != n {
                return Err(Error::DimensionMismatch {
                    what: "control field output",
                    expected: n,
                    got: gk.len(),
                });
            }
        }
        Ok(Self {
            state_dim: n,
            input_dim: control_fields.len(),
            drift,
            control_fields,
            state_domain,
        })
    }

    /// State dimension `n`.
    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    /// Input dimension `m`.
    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    /// The sampling/scaling domain.
    pub fn domain(&self) -> &Domain {
        &self.state_domain
    }

    /// Replace the drift, keeping the control fields and domain.
    ///
    /// Used by drift-independence tests: the swapped system evaluates `g`
    /// through the very same closures, so control contributions are
    /// bitwise-identical across the swap.
    pub fn with_drift(self, drift: DriftFn) -> Result<Self> {
        Self::new(drift, self.control_fields, self.state_domain)
    }

    fn check_state(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.state_dim {
            return Err(Error::DimensionMismatch {
                what: "state",
                expected: self.state_dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    fn check_input(&self, u: &DVector<f64>) -> Result<()> {
        if u.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                what: "input",
                expected: self.input_dim,
                got: u.len(),
            });
        }
        Ok(())
    }

    /// Drift value `f(t, x)`.
    pub fn drift_at(&self, t: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_state(x)?;
        let f = (self.drift)(t, x);
        debug_assert_eq!(f.len(), self.state_dim);
        Ok(f)
    }

    /// The `n x m` matrix `g(x) = [g_1(x) ... g_m(x)]`.
    pub fn control_matrix(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_state(x)?;
        let mut g = DMatrix::zeros(self.state_dim, self.input_dim);
        for (k, field) in self.control_fields.iter().enumerate() {
            g.set_column(k, &field(x));
        }
        Ok(g)
    }

    /// Input-weighted control contribution `sum_k g_k(x) u_k`.
    ///
    /// Zero input components are skipped, so a zero input yields an exact
    /// zero vector and `rhs` returns the drift verbatim.
    pub fn control_contribution(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_state(x)?;
        self.check_input(u)?;
        let mut total = DVector::zeros(self.state_dim);
        for (k, field) in self.control_fields.iter().enumerate() {
            if u[k] != 0.0 {
                total += field(x) * u[k];
            }
        }
        Ok(total)
    }

    /// Full right-hand side `f(t, x) + sum_k g_k(x) u_k`.
    pub fn rhs(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_input(u)?;
        let mut xdot = self.drift_at(t, x)?;
        for (k, field) in self.control_fields.iter().enumerate() {
            if u[k] != 0.0 {
                xdot += field(x) * u[k];
            }
        }
        Ok(xdot)
    }
}

impl core::fmt::Debug for AffineSystem {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("AffineSystem")
            .field("state_dim", &self.state_dim)
            .field("input_dim", &self.input_dim)
            .field("state_domain", &self.state_domain)
            .finish_non_exhaustive()
    }
}

/// Linear system `xdot = A x + B u` on the default box `[-1, 1]^n`.
pub fn make_linear_system(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<AffineSystem> {
    make_linear_system_on(a, b, Domain::symmetric(a.nrows(), 1.0))
}

/// Linear system `xdot = A x + B u` on an explicit domain.
pub fn make_linear_system_on(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    domain: Domain,
) -> Result<AffineSystem> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::DimensionMismatch {
            what: "A columns",
            expected: n,
            got: a.ncols(),
        });
    }
    if b.nrows() != n {
        return Err(Error::DimensionMismatch {
            what: "B rows",
            expected: n,
            got: b.nrows(),
        });
    }
    if domain.dim() != n {
        return Err(Error::DimensionMismatch {
            what: "domain",
            expected: n,
            got: domain.dim(),
        });
    }
    let a_owned = a.clone();
    let drift: DriftFn = Box::new(move |_t, x| &a_owned * x);
    let fields: Vec<FieldFn> = (0..b.ncols())
        .map(|k| {
            let col: DVector<f64> = b.column(k).into_owned();
            let field: FieldFn = Box::new(move |_x| col.clone());
            field
        })
        .collect();
    AffineSystem::new(drift, fields, domain)
}

/// Bloch system on the unit sphere:
/// `f(x) = (-w x2, w x1, 0)`, `g1(x) = (e x3, 0, -e x1)`, `g2(x) = (0, -e x3, e x2)`.
///
/// Both control fields are skew with respect to `x`, so trajectories stay on
/// the sphere for any input.
pub fn make_bloch_system(epsilon: f64, omega: f64) -> AffineSystem {
    let drift: DriftFn =
        Box::new(move |_t, x| DVector::from_vec(alloc::vec![-omega * x[1], omega * x[0], 0.0]));
    let g1: FieldFn =
        Box::new(move |x| DVector::from_vec(alloc::vec![epsilon * x[2], 0.0, -epsilon * x[0]]));
    let g2: FieldFn =
        Box::new(move |x| DVector::from_vec(alloc::vec![0.0, -epsilon * x[2], epsilon * x[1]]));
    AffineSystem::new(drift, alloc::vec![g1, g2], Domain::symmetric(3, 1.0))
        .expect("bloch fields are 3-dimensional by construction")
}

/// Phase oscillator `thetadot = omega(t) + g(theta) u` on `[0, 2*pi]`.
///
/// `prc` is the phase-response curve; `omega_fn` may depend on time. Process
/// noise, when wanted, is configured on the experiment plan rather than on
/// the system, so the system itself stays deterministic and shareable.
pub fn make_phase_oscillator(
    prc: impl Fn(f64) -> f64 + Send + Sync + 'static,
    omega_fn: impl Fn(f64) -> f64 + Send + Sync + 'static,
) -> AffineSystem {
    let drift: DriftFn = Box::new(move |t, _x| DVector::from_element(1, omega_fn(t)));
    let field: FieldFn = Box::new(move |x| DVector::from_element(1, prc(x[0])));
    let domain = Domain::new(
        DVector::from_element(1, 0.0),
        DVector::from_element(1, 2.0 * core::f64::consts::PI),
    )
    .expect("phase domain is fixed");
    AffineSystem::new(drift, alloc::vec![field], domain)
        .expect("phase oscillator fields are scalar by construction")
}

/// Piecewise-constant input signal: row `floor((t - t0) / segment_duration)`
/// of `values` is applied; the value at `t0` is exactly row 0.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSignal {
    values: DMatrix<f64>,
    segment_duration: f64,
}

impl ControlSignal {
    /// Signal holding each row of `values` for `segment_duration` seconds.
    pub fn piecewise(values: DMatrix<f64>, segment_duration: f64) -> Result<Self> {
        if values.nrows() == 0 {
            return Err(Error::InsufficientData { needed: 1, got: 0 });
        }
        if !(segment_duration > 0.0) {
            return Err(Error::InvalidArgument {
                what: "segment_duration",
                details: format!("must be positive, got {segment_duration}"),
            });
        }
        Ok(Self {
            values,
            segment_duration,
        })
    }

    /// Signal holding `u` constant for `duration` seconds.
    pub fn constant(u: &DVector<f64>, duration: f64) -> Result<Self> {
        Self::piecewise(DMatrix::from_rows(&[u.transpose()]), duration)
    }

    /// Number of input channels.
    pub fn input_dim(&self) -> usize {
        self.values.ncols()
    }

    /// Total horizon covered by the segments.
    pub fn horizon(&self) -> f64 {
        self.segment_duration * self.values.nrows() as f64
    }

    /// Input at elapsed time `t - t0`; times at or beyond the horizon hold
    /// the final segment's value.
    pub fn value_at(&self, elapsed: f64) -> DVector<f64> {
        let idx = libm::floor(elapsed / self.segment_duration) as usize;
        let idx = idx.min(self.values.nrows() - 1);
        self.values.row(idx).transpose()
    }
}

/// Sampled solution of an integration run.
///
/// Row `i` of `states` / `inputs` is the state / applied input at `times[i]`;
/// times are `t0 + i * dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    times: Vec<f64>,
    states: DMatrix<f64>,
    inputs: DMatrix<f64>,
}

impl Trajectory {
    /// Number of samples (steps + 1).
    pub fn len(&self) -> usize {
        self.times.len()
    }

    /// True when the trajectory has no samples. Never the case for
    /// integrator output, which always contains the initial state.
    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Sample times, strictly increasing.
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// States, one row per sample.
    pub fn states(&self) -> &DMatrix<f64> {
        &self.states
    }

    /// Applied inputs, one row per sample.
    pub fn inputs(&self) -> &DMatrix<f64> {
        &self.inputs
    }

    /// State at sample `i` as a column vector.
    pub fn state(&self, i: usize) -> DVector<f64> {
        self.states.row(i).transpose()
    }

    /// Input at sample `i` as a column vector.
    pub fn input(&self, i: usize) -> DVector<f64> {
        self.inputs.row(i).transpose()
    }

    /// Final state.
    pub fn final_state(&self) -> DVector<f64> {
        self.state(self.len() - 1)
    }
}

/// Noise configuration for [`integrate_noisy`]: at each step one disturbance
/// vector with i.i.d. components uniform on `[-amplitude, amplitude]` is
/// added to the state derivative and held for the whole step.
pub struct StepNoise<'a, R: Rng> {
    /// Disturbance amplitude (the `eta in [-1, 1]` band scales by this).
    pub amplitude: f64,
    /// Source of the per-step draws.
    pub rng: &'a mut R,
}

/// Fixed-step RK4 integration of `system` from `x0` over `[t0, tf]` under
/// `signal`, recording every step. Deterministic: identical arguments give
/// bitwise-identical trajectories.
///
/// `dt` must divide the horizon and must not exceed the signal's segment
/// duration, so no step straddles a segment boundary.
pub fn integrate(
    system: &AffineSystem,
    x0: &DVector<f64>,
    signal: &ControlSignal,
    t0: f64,
    tf: f64,
    dt: f64,
) -> Result<Trajectory> {
    integrate_impl(
        system,
        x0,
        signal,
        t0,
        tf,
        dt,
        None::<StepNoise<'_, rand_chacha::ChaCha8Rng>>,
    )
}

/// [`integrate`] with additive per-step process noise on the derivative.
pub fn integrate_noisy<R: Rng>(
    system: &AffineSystem,
    x0: &DVector<f64>,
    signal: &ControlSignal,
    t0: f64,
    tf: f64,
    dt: f64,
    noise: StepNoise<'_, R>,
) -> Result<Trajectory> {
    integrate_impl(system, x0, signal, t0, tf, dt, Some(noise))
}

fn integrate_impl<R: Rng>(
    system: &AffineSystem,
    x0: &DVector<f64>,
    signal: &ControlSignal,
    t0: f64,
    tf: f64,
    dt: f64,
    mut noise: Option<StepNoise<'_, R>>,
) -> Result<Trajectory> {
    if !(tf > t0) {
        return Err(Error::InvalidArgument {
            what: "tf",
            details: format!("horizon must be positive, got t0 = {t0}, tf = {tf}"),
        });
    }
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument {
            what: "dt",
            details: format!("step must be positive, got {dt}"),
        });
    }
    if dt > signal.segment_duration + 1e-12 {
        return Err(Error::InvalidArgument {
            what: "dt",
            details: format!(
                "step {dt} exceeds signal segment duration {}",
                signal.segment_duration
            ),
        });
    }
    if signal.input_dim() != system.input_dim() {
        return Err(Error::DimensionMismatch {
            what: "signal input dim",
            expected: system.input_dim(),
            got: signal.input_dim(),
        });
    }
    let steps_f = (tf - t0) / dt;
    let steps = libm::round(steps_f) as usize;
    if steps == 0 || libm::fabs(steps_f - steps as f64) > 1e-9 {
        return Err(Error::InvalidArgument {
            what: "dt",
            details: format!("step {dt} does not divide the horizon {}", tf - t0),
        });
    }
    let seg_ratio = signal.segment_duration / dt;
    if libm::fabs(seg_ratio - libm::round(seg_ratio)) > 1e-9 {
        return Err(Error::InvalidArgument {
            what: "dt",
            details: format!(
                "step {dt} does not divide the segment duration {}",
                signal.segment_duration
            ),
        });
    }
    system.check_state(x0)?;

    let n = system.state_dim();
    let m = system.input_dim();
    let mut times = Vec::with_capacity(steps + 1);
    let mut states = DMatrix::zeros(steps + 1, n);
    let mut inputs = DMatrix::zeros(steps + 1, m);

    let mut x = x0.clone();
    for step in 0..=steps {
        let t = t0 + step as f64 * dt;
        let u = signal.value_at(t - t0);
        times.push(t);
        states.row_mut(step).copy_from(&x.transpose());
        inputs.row_mut(step).copy_from(&u.transpose());
        if step == steps {
            break;
        }

        // One uniform draw per step, held across all four stages.
        let xi = noise
            .as_mut()
            .map(|nz| DVector::from_fn(n, |_, _| nz.amplitude * (nz.rng.gen::<f64>() * 2.0 - 1.0)));
        let eval = |tau: f64, state: &DVector<f64>| -> Result<DVector<f64>> {
            let mut d = system.rhs(tau, state, &u)?;
            if let Some(xi) = &xi {
                d += xi;
            }
            Ok(d)
        };

        let k1 = eval(t, &x)?;
        let k2 = eval(t + 0.5 * dt, &(&x + &k1 * (0.5 * dt)))?;
        let k3 = eval(t + 0.5 * dt, &(&x + &k2 * (0.5 * dt)))?;
        let k4 = eval(t + dt, &(&x + &k3 * dt))?;
        x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);

        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::IntegrationDiverged { last_time: t });
        }
    }

    Ok(Trajectory {
        times,
        states,
        inputs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use approx::assert_relative_eq;

    fn demo_linear() -> AffineSystem {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 4.0, 5.0, -1.0]);
        let b = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 0.6, 1.0]);
        make_linear_system(&a, &b).unwrap()
    }

    /// Independent oracle: x(t) = e^{At} x0 + A^{-1}(e^{At} - I) B u for
    /// constant input, with e^{At} summed as a scaled Taylor series.
    fn expm(a: &DMatrix<f64>, t: f64) -> DMatrix<f64> {
        let n = a.nrows();
        let mut scaled = a * t;
        let mut squarings = 0u32;
        while scaled.norm() > 0.5 {
            scaled /= 2.0;
            squarings += 1;
        }
        let mut result = DMatrix::identity(n, n);
        let mut term = DMatrix::identity(n, n);
        for k in 1..30 {
            term = &term * &scaled / k as f64;
            result += &term;
        }
        for _ in 0..squarings {
            result = &result * &result;
        }
        result
    }

    fn linear_solution(
        a: &DMatrix<f64>,
        b: &DMatrix<f64>,
        x0: &DVector<f64>,
        u: &DVector<f64>,
        t: f64,
    ) -> DVector<f64> {
        let eat = expm(a, t);
        let n = a.nrows();
        let forced = a
            .clone()
            .lu()
            .solve(&((&eat - DMatrix::identity(n, n)) * (b * u)))
            .unwrap();
        &eat * x0 + forced
    }

    #[test]
    fn rhs_matches_reference_decomposition() {
        let sys = demo_linear();
        let x = DVector::from_vec(vec![0.0, -0.25]);
        let u = DVector::from_vec(vec![1.0, 2.0]);
        let xdot = sys.rhs(0.0, &x, &u).unwrap();
        // (-1, 0.25) + (4, 2.6)
        assert_relative_eq!(xdot[0], 3.0, epsilon = 1e-12);
        assert_relative_eq!(xdot[1], 2.85, epsilon = 1e-12);
    }

    #[test]
    fn rhs_zero_input_is_exact_drift() {
        let sys = demo_linear();
        let x = DVector::from_vec(vec![0.3, -0.7]);
        let u = DVector::zeros(2);
        let xdot = sys.rhs(0.0, &x, &u).unwrap();
        let drift = sys.drift_at(0.0, &x).unwrap();
        assert_eq!(xdot, drift);
    }

    #[test]
    fn rhs_rejects_dimension_mismatch() {
        let sys = demo_linear();
        let x = DVector::from_vec(vec![0.0, 0.0, 0.0]);
        let u = DVector::zeros(2);
        assert!(matches!(
            sys.rhs(0.0, &x, &u),
            Err(Error::DimensionMismatch { what: "state", .. })
        ));
        let x = DVector::zeros(2);
        let u = DVector::zeros(3);
        assert!(matches!(
            sys.rhs(0.0, &x, &u),
            Err(Error::DimensionMismatch { what: "input", .. })
        ));
    }

    #[test]
    fn linear_factory_special_cases() {
        // A = 0, B = I: rhs = u.
        let sys = make_linear_system(&DMatrix::zeros(2, 2), &DMatrix::identity(2, 2)).unwrap();
        let x = DVector::from_vec(vec![0.4, -0.2]);
        let u = DVector::from_vec(vec![0.7, -0.3]);
        assert_eq!(sys.rhs(0.0, &x, &u).unwrap(), u);
        // A = I, B = 0: rhs = x.
        let sys = make_linear_system(&DMatrix::identity(2, 2), &DMatrix::zeros(2, 2)).unwrap();
        assert_eq!(sys.rhs(0.0, &x, &u).unwrap(), x);
    }

    #[test]
    fn linear_factory_rejects_shape_mismatch() {
        let a = DMatrix::zeros(2, 3);
        let b = DMatrix::zeros(2, 2);
        assert!(make_linear_system(&a, &b).is_err());
        let a = DMatrix::zeros(2, 2);
        let b = DMatrix::zeros(3, 2);
        assert!(make_linear_system(&a, &b).is_err());
    }

    #[test]
    fn bloch_fields_match_definitions() {
        let sys = make_bloch_system(0.6, 1.4);
        // f at (1, 0, 0) with zero input: (0, 1.4, 0).
        let x = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        let xdot = sys.rhs(0.0, &x, &DVector::zeros(2)).unwrap();
        assert_eq!(xdot, DVector::from_vec(vec![0.0, 1.4, 0.0]));
        // g1 at (0, 0, 1): (0.6, 0, 0).
        let g = sys
            .control_matrix(&DVector::from_vec(vec![0.0, 0.0, 1.0]))
            .unwrap();
        assert_eq!(
            g.column(0).into_owned(),
            DVector::from_vec(vec![0.6, 0.0, 0.0])
        );
        // g2 at the origin vanishes.
        let g = sys.control_matrix(&DVector::zeros(3)).unwrap();
        assert_eq!(g.column(1).into_owned(), DVector::zeros(3));
    }

    #[test]
    fn phase_oscillator_drift_and_prc() {
        let sys = make_phase_oscillator(
            |theta| {
                -libm::sin(theta)
                    * libm::exp(3.0 * (libm::cos(theta - 0.9 * core::f64::consts::PI) - 1.0))
            },
            |t| 0.1 * t,
        );
        // PRC at theta = 0 vanishes (sin 0 = 0).
        let g = sys.control_matrix(&DVector::zeros(1)).unwrap();
        assert_eq!(g[(0, 0)], 0.0);
        // omega(10) = 1.0 enters the drift.
        let d = sys.drift_at(10.0, &DVector::zeros(1)).unwrap();
        assert_relative_eq!(d[0], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn phase_oscillator_prc_extremum_matches_grid_oracle() {
        // Frozen from a dense 10^6-point grid search over [0, 2*pi):
        // the most negative PRC value and where it is attained.
        let theta_star = 2.4302858113346066;
        let min_value = -0.5168806933406168;
        let sys = make_phase_oscillator(
            |theta| {
                -libm::sin(theta)
                    * libm::exp(3.0 * (libm::cos(theta - 0.9 * core::f64::consts::PI) - 1.0))
            },
            |_| 0.0,
        );
        let prc_at = |theta: f64| {
            sys.control_matrix(&DVector::from_element(1, theta))
                .unwrap()[(0, 0)]
        };
        assert_relative_eq!(prc_at(theta_star), min_value, epsilon = 1e-12);
        // Local maximality of |g| at theta*: neighbours on the 10^6 grid are no larger.
        let h = 2.0 * core::f64::consts::PI / 1e6;
        assert!(libm::fabs(prc_at(theta_star - h)) <= libm::fabs(min_value));
        assert!(libm::fabs(prc_at(theta_star + h)) <= libm::fabs(min_value));
    }

    #[test]
    fn signal_value_at_boundaries() {
        let values = DMatrix::from_row_slice(3, 1, &[1.0, 2.0, 3.0]);
        let sig = ControlSignal::piecewise(values, 0.5).unwrap();
        assert_eq!(sig.value_at(0.0)[0], 1.0);
        assert_eq!(sig.value_at(0.49)[0], 1.0);
        assert_eq!(sig.value_at(0.5)[0], 2.0);
        assert_eq!(sig.value_at(1.0)[0], 3.0);
        // At and beyond the horizon the final value holds.
        assert_eq!(sig.value_at(1.5)[0], 3.0);
        assert_eq!(sig.horizon(), 1.5);
    }

    #[test]
    fn integrate_constant_derivative_is_exact() {
        // xdot = u with u = 1: x(1) = 1.
        let sys = make_linear_system(&DMatrix::zeros(1, 1), &DMatrix::identity(1, 1)).unwrap();
        let sig = ControlSignal::constant(&DVector::from_element(1, 1.0), 1.0).unwrap();
        let traj = integrate(&sys, &DVector::zeros(1), &sig, 0.0, 1.0, 1e-3).unwrap();
        assert_relative_eq!(traj.final_state()[0], 1.0, epsilon = 1e-12);
        assert_eq!(traj.len(), 1001);
    }

    #[test]
    fn integrate_matches_matrix_exponential_oracle() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 4.0, 5.0, -1.0]);
        let b = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 0.6, 1.0]);
        let sys = make_linear_system(&a, &b).unwrap();
        let x0 = DVector::from_vec(vec![0.0, -0.25]);
        let u = DVector::from_vec(vec![1.0, 2.0]);
        let sig = ControlSignal::constant(&u, 1e-3).unwrap();
        let traj = integrate(&sys, &x0, &sig, 0.0, 1e-3, 1e-5).unwrap();
        let exact = linear_solution(&a, &b, &x0, &u, 1e-3);
        assert!((traj.final_state() - exact).norm() < 1e-9);
    }

    #[test]
    fn integrate_is_fourth_order() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 4.0, 5.0, -1.0]);
        let b = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 0.6, 1.0]);
        let sys = make_linear_system(&a, &b).unwrap();
        let x0 = DVector::from_vec(vec![0.0, -0.25]);
        let u = DVector::from_vec(vec![1.0, 2.0]);
        let sig = ControlSignal::constant(&u, 1.0).unwrap();
        let exact = linear_solution(&a, &b, &x0, &u, 1.0);
        let err = |dt: f64| {
            (integrate(&sys, &x0, &sig, 0.0, 1.0, dt)
                .unwrap()
                .final_state()
                - &exact)
                .norm()
        };
        let ratio = err(0.01) / err(0.005);
        assert!((8.0..=32.0).contains(&ratio), "convergence ratio {ratio}");
    }

    #[test]
    fn bloch_norm_preserved_over_long_horizon() {
        let sys = make_bloch_system(0.6, 1.4);
        let x0 = DVector::from_vec(vec![0.6, 0.8, 0.0]);
        let u = DVector::from_vec(vec![1.0, 2.0]);
        let sig = ControlSignal::constant(&u, 10.0).unwrap();
        let traj = integrate(&sys, &x0, &sig, 0.0, 10.0, 1e-4).unwrap();
        for i in (0..traj.len()).step_by(5000) {
            assert_relative_eq!(traj.state(i).norm(), 1.0, epsilon = 1e-6);
        }
        assert_relative_eq!(traj.final_state().norm(), 1.0, epsilon = 1e-6);
    }

    #[test]
    fn integrate_is_deterministic() {
        let sys = make_bloch_system(0.6, 1.4);
        let x0 = DVector::from_vec(vec![0.0, 0.0, 1.0]);
        let u = DVector::from_vec(vec![0.3, -0.7]);
        let sig = ControlSignal::constant(&u, 0.1).unwrap();
        let t1 = integrate(&sys, &x0, &sig, 0.0, 0.1, 1e-4).unwrap();
        let t2 = integrate(&sys, &x0, &sig, 0.0, 0.1, 1e-4).unwrap();
        assert_eq!(t1, t2);
    }

    #[test]
    fn integrate_reports_divergence_time() {
        // xdot = x^3 from x = 10 with a coarse step overflows quickly.
        let drift: DriftFn = Box::new(|_t, x| DVector::from_element(1, x[0] * x[0] * x[0]));
        let sys = AffineSystem::new(drift, vec![], Domain::symmetric(1, 1e300)).unwrap();
        let sig = ControlSignal::piecewise(DMatrix::zeros(1, 0), 10.0).unwrap();
        let res = integrate(&sys, &DVector::from_element(1, 10.0), &sig, 0.0, 10.0, 1.0);
        match res {
            Err(Error::IntegrationDiverged { last_time }) => {
                assert!(last_time.is_finite());
                assert!(last_time < 10.0);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn integrate_rejects_bad_steps() {
        let sys = demo_linear();
        let x0 = DVector::zeros(2);
        let u = DVector::zeros(2);
        let sig = ControlSignal::constant(&u, 1e-3).unwrap();
        // dt larger than the segment duration.
        assert!(integrate(&sys, &x0, &sig, 0.0, 1e-3, 2e-3).is_err());
        // dt not dividing the horizon.
        assert!(integrate(&sys, &x0, &sig, 0.0, 1e-3, 3e-4).is_err());
        // empty horizon.
        assert!(integrate(&sys, &x0, &sig, 0.0, 0.0, 1e-4).is_err());
    }

    #[test]
    fn domain_check_names_component() {
        let d = Domain::symmetric(2, 1.0);
        let x = DVector::from_vec(vec![0.5, 1.5]);
        match d.check(&x) {
            Err(Error::OutsideDomain { component, .. }) => assert_eq!(component, 1),
            other => panic!("expected OutsideDomain, got {other:?}"),
        }
    }

    #[test]
    fn shared_system_integrates_concurrently() {
        fn assert_send_sync<T: Send + Sync>() {}
        assert_send_sync::<AffineSystem>();
        assert_send_sync::<ControlSignal>();
        assert_send_sync::<Trajectory>();

        let sys = std::sync::Arc::new(make_bloch_system(0.6, 1.4));
        let x0 = DVector::from_vec(vec![0.0, 0.0, 1.0]);
        let u = DVector::from_vec(vec![1.0, 0.0]);
        let sig = ControlSignal::constant(&u, 0.01).unwrap();
        let reference = integrate(&sys, &x0, &sig, 0.0, 0.01, 1e-4).unwrap();
        let handles: Vec<_> = (0..4)
            .map(|_| {
                let sys = sys.clone();
                let x0 = x0.clone();
                let sig = sig.clone();
                std::thread::spawn(move || integrate(&sys, &x0, &sig, 0.0, 0.01, 1e-4).unwrap())
            })
            .collect();
        for handle in handles {
            assert_eq!(handle.join().unwrap(), reference);
        }
    }
}
