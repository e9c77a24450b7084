//! Assembly and solving of the per-output linear regression problems.
//!
//! Three problem shapes arise:
//!
//! - the control-field LRP: one row per difference sample, columns indexed by
//!   `(input s, basis feature k)`, unknowns `alpha_js^(k)` for a fixed
//!   output `j` — the design depends only on the anchors, the basis and the
//!   input differences, never on the drift;
//! - the constant-`B` LRP: the design is the stacked `delta U` matrix itself
//!   and the unknowns are row `j` of `B`;
//! - the drift LRP: rows are basis features at trajectory samples and the
//!   target is `xdot_j - sum_s ghat_js(x) u_s` after the recovered control
//!   field is subtracted.
//!
//! Problems are solved by SVD; singular values below `1e-10 * sigma_max`
//! count as zero, the minimum-norm solution is returned, and the rank and
//! 2-norm condition number of the design are reported. The `n` per-output
//! problems are independent and may be solved concurrently.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::basis::{eval_basis, feature_count, BasisSpec};
use crate::error::Error;
use crate::experiment::DifferenceSample;
use crate::recovery::RecoveredControlField;
use crate::Result;

/// Relative cutoff under which singular values are treated as zero.
pub const RANK_TOLERANCE: f64 = 1e-10;

/// Identifies what a design column multiplies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ColumnLabel {
    /// Output dimension `j` the problem solves for.
    pub output_dim: usize,
    /// Input channel `s` (always 0 for drift problems).
    pub input_dim: usize,
    /// Basis feature index `k`.
    pub basis_index: usize,
}

/// A least-squares problem `min || design c - target ||` with bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionProblem {
    /// Design matrix, one row per observation.
    pub design: DMatrix<f64>,
    /// Target vector, one entry per observation.
    pub target: DVector<f64>,
    /// Per-row `(anchor index, perturbation index)` provenance.
    pub row_provenance: Vec<(usize, usize)>,
    /// Per-column meaning.
    pub column_labels: Vec<ColumnLabel>,
    /// How many rows were evaluated outside the basis domain (extrapolated).
    pub out_of_domain_rows: usize,
}

impl RegressionProblem {
    fn validate(&self) -> Result<()> {
        if self.design.nrows() != self.target.len() {
            return Err(Error::DimensionMismatch {
                what: "regression target",
                expected: self.design.nrows(),
                got: self.target.len(),
            });
        }
        if !self.design.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                location: "regression design",
            });
        }
        if !self.target.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                location: "regression target",
            });
        }
        Ok(())
    }
}

/// Minimum-norm least-squares solution with conditioning diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct LeastSquaresSolution {
    /// Fitted coefficients, one per design column.
    pub coefficients: DVector<f64>,
    /// `|| design c - target ||_2`.
    pub residual_norm: f64,
    /// `sigma_max / sigma_min` of the design (infinite when singular).
    pub condition_number: f64,
    /// Number of singular values above the rank cutoff.
    pub rank: usize,
}

/// Stack difference samples into the control-field LRP for output `j`
/// (0-based). Columns are ordered input-major: all features of input 0,
/// then input 1, and so on.
pub fn assemble_control_lrp(
    samples: &[DifferenceSample],
    spec: &BasisSpec,
    output_dim: usize,
) -> Result<RegressionProblem> {
    if samples.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let n = samples[0].delta_xdot.len();
    let m = samples[0].delta_u.len();
    if output_dim >= n {
        return Err(Error::InvalidArgument {
            what: "output_dim",
            details: format!("index {output_dim} out of range for {n} outputs"),
        });
    }
    if spec.dimension() != samples[0].anchor_state.len() {
        return Err(Error::DimensionMismatch {
            what: "basis dimension",
            expected: samples[0].anchor_state.len(),
            got: spec.dimension(),
        });
    }
    let features = feature_count(spec);
    let cols = m * features;
    let mut design = DMatrix::zeros(samples.len(), cols);
    let mut target = DVector::zeros(samples.len());
    let mut provenance = Vec::with_capacity(samples.len());
    let mut out_of_domain = 0;
    for (r, sample) in samples.iter().enumerate() {
        if sample.delta_u.len() != m || sample.delta_xdot.len() != n {
            return Err(Error::ProtocolViolation {
                details: format!(
                    "sample {r} has inconsistent dimensions (delta_u {}, delta_xdot {})",
                    sample.delta_u.len(),
                    sample.delta_xdot.len()
                ),
            });
        }
        if !spec.domain().contains(&sample.anchor_state) {
            out_of_domain += 1;
        }
        let phi = eval_basis(spec, &sample.anchor_state)?;
        for s in 0..m {
            let du = sample.delta_u[s];
            for k in 0..features {
                design[(r, s * features + k)] = phi[k] * du;
            }
        }
        target[r] = sample.delta_xdot[output_dim];
        provenance.push((sample.anchor_index, sample.perturbation_index));
    }
    let column_labels = (0..m)
        .flat_map(|s| {
            (0..features).map(move |k| ColumnLabel {
                output_dim,
                input_dim: s,
                basis_index: k,
            })
        })
        .collect();
    let problem = RegressionProblem {
        design,
        target,
        row_provenance: provenance,
        column_labels,
        out_of_domain_rows: out_of_domain,
    };
    problem.validate()?;
    Ok(problem)
}

/// The constant-`B` special case: design rows are the input differences
/// themselves and the unknowns are row `j` of `B`.
pub fn assemble_constant_b_lrp(
    samples: &[DifferenceSample],
    output_dim: usize,
) -> Result<RegressionProblem> {
    if samples.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let n = samples[0].delta_xdot.len();
    let m = samples[0].delta_u.len();
    if output_dim >= n {
        return Err(Error::InvalidArgument {
            what: "output_dim",
            details: format!("index {output_dim} out of range for {n} outputs"),
        });
    }
    let mut design = DMatrix::zeros(samples.len(), m);
    let mut target = DVector::zeros(samples.len());
    let mut provenance = Vec::with_capacity(samples.len());
    for (r, sample) in samples.iter().enumerate() {
        design.row_mut(r).copy_from(&sample.delta_u.transpose());
        target[r] = sample.delta_xdot[output_dim];
        provenance.push((sample.anchor_index, sample.perturbation_index));
    }
    let column_labels = (0..m)
        .map(|s| ColumnLabel {
            output_dim,
            input_dim: s,
            basis_index: 0,
        })
        .collect();
    let problem = RegressionProblem {
        design,
        target,
        row_provenance: provenance,
        column_labels,
        out_of_domain_rows: 0,
    };
    problem.validate()?;
    Ok(problem)
}

/// One state/derivative/input triple for the drift stage.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftSample {
    /// Time the state was visited (matters for non-autonomous drifts).
    pub time: f64,
    /// Visited state.
    pub state: DVector<f64>,
    /// Derivative estimate at the state.
    pub derivative: DVector<f64>,
    /// Input applied when the state was visited.
    pub input: DVector<f64>,
}

/// Drift LRP for output `j`: rows are basis features at the sample states,
/// targets are `xdot_j - sum_s ghat_js(x) u_s`.
pub fn assemble_drift_lrp(
    samples: &[DriftSample],
    recovered_g: &RecoveredControlField,
    spec: &BasisSpec,
    output_dim: usize,
) -> Result<RegressionProblem> {
    if samples.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let n = samples[0].derivative.len();
    if output_dim >= n {
        return Err(Error::InvalidArgument {
            what: "output_dim",
            details: format!("index {output_dim} out of range for {n} outputs"),
        });
    }
    let features = feature_count(spec);
    let mut design = DMatrix::zeros(samples.len(), features);
    let mut target = DVector::zeros(samples.len());
    let mut provenance = Vec::with_capacity(samples.len());
    let mut out_of_domain = 0;
    for (r, sample) in samples.iter().enumerate() {
        if !spec.domain().contains(&sample.state) {
            out_of_domain += 1;
        }
        let phi = eval_basis(spec, &sample.state)?;
        design.row_mut(r).copy_from(&phi.transpose());
        let mut value = sample.derivative[output_dim];
        if sample.input.iter().any(|&u| u != 0.0) {
            let ghat = recovered_g.evaluate(&sample.state)?;
            value -= (ghat * &sample.input)[output_dim];
        }
        target[r] = value;
        provenance.push((r, 0));
    }
    let column_labels = (0..features)
        .map(|k| ColumnLabel {
            output_dim,
            input_dim: 0,
            basis_index: k,
        })
        .collect();
    let problem = RegressionProblem {
        design,
        target,
        row_provenance: provenance,
        column_labels,
        out_of_domain_rows: out_of_domain,
    };
    problem.validate()?;
    Ok(problem)
}

/// Minimum-norm least squares via SVD with the [`RANK_TOLERANCE`] cutoff.
///
/// A rank-deficient design still yields a solution; callers detect the
/// deficiency through `rank < column count`.
pub fn solve_least_squares(problem: &RegressionProblem) -> Result<LeastSquaresSolution> {
    solve_with_ridge(problem, 0.0)
}

/// [`solve_least_squares`] with an optional Tikhonov term: coefficients
/// `V diag(s / (s^2 + ridge)) U^T target`. Ridge 0 reproduces the plain
/// truncated solve.
pub fn solve_with_ridge(problem: &RegressionProblem, ridge: f64) -> Result<LeastSquaresSolution> {
    problem.validate()?;
    if ridge < 0.0 {
        return Err(Error::InvalidArgument {
            what: "ridge",
            details: format!("must be nonnegative, got {ridge}"),
        });
    }
    let svd = problem.design.clone().svd(true, true);
    let sigma_max = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let sigma_min = svd
        .singular_values
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let cutoff = RANK_TOLERANCE * sigma_max;
    let rank = svd.singular_values.iter().filter(|&&s| s > cutoff).count();
    let condition_number = if problem.design.ncols() == 0 {
        0.0
    } else if sigma_min > 0.0 {
        sigma_max / sigma_min
    } else {
        f64::INFINITY
    };

    let u = svd.u.as_ref().expect("svd computed with u");
    let v_t = svd.v_t.as_ref().expect("svd computed with v_t");
    let projected = u.transpose() * &problem.target;
    let mut scaled = DVector::zeros(svd.singular_values.len());
    for i in 0..svd.singular_values.len() {
        let s = svd.singular_values[i];
        if s > cutoff {
            scaled[i] = if ridge > 0.0 {
                projected[i] * s / (s * s + ridge)
            } else {
                projected[i] / s
            };
        }
    }
    let coefficients = v_t.transpose() * scaled;
    let residual_norm = (&problem.design * &coefficients - &problem.target).norm();
    Ok(LeastSquaresSolution {
        coefficients,
        residual_norm,
        condition_number,
        rank,
    })
}

/// Human-readable summary of unexcited directions, used by degenerate-design
/// errors: names the input columns whose excitation is (numerically) zero.
pub fn describe_deficiency(delta_u: &DMatrix<f64>) -> String {
    let mut silent = Vec::new();
    for c in 0..delta_u.ncols() {
        if delta_u.column(c).norm() < 1e-14 {
            silent.push(format!("input {c}"));
        }
    }
    if silent.is_empty() {
        String::from("input differences are collinear")
    } else {
        format!("no excitation on {}", silent.join(", "))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::BasisFamily;
    use crate::dynamics::Domain;
    use alloc::vec;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample(
        anchor: &[f64],
        du: &[f64],
        dxd: &[f64],
        anchor_index: usize,
        perturbation_index: usize,
    ) -> DifferenceSample {
        DifferenceSample {
            anchor_index,
            anchor_state: DVector::from_row_slice(anchor),
            delta_u: DVector::from_row_slice(du),
            delta_xdot: DVector::from_row_slice(dxd),
            perturbation_index,
        }
    }

    #[test]
    fn constant_basis_single_sample_degenerates_to_scalar_equation() {
        let spec = BasisSpec::new(BasisFamily::Monomial, 0, Domain::symmetric(1, 1.0));
        let s = sample(&[0.2], &[0.5], &[1.5], 0, 1);
        let p = assemble_control_lrp(&[s], &spec, 0).unwrap();
        assert_eq!(p.design.nrows(), 1);
        assert_eq!(p.design.ncols(), 1);
        assert_eq!(p.design[(0, 0)], 0.5);
        assert_eq!(p.target[0], 1.5);
    }

    #[test]
    fn bloch_sized_problem_has_expected_shape() {
        // 20 anchors x 7 differences, monomial L=2 on 3 states, m = 2:
        // 140 rows x 20 columns.
        let spec = BasisSpec::new(BasisFamily::Monomial, 2, Domain::symmetric(3, 1.0));
        let mut samples = Vec::new();
        for a in 0..20 {
            for i in 0..7 {
                samples.push(sample(
                    &[0.1 * a as f64 / 2.0, 0.2, -0.3],
                    &[1.0, 0.5],
                    &[0.0, 0.0, 0.0],
                    a,
                    i + 1,
                ));
            }
        }
        let p = assemble_control_lrp(&samples, &spec, 1).unwrap();
        assert_eq!(p.design.nrows(), 140);
        assert_eq!(p.design.ncols(), 20);
        assert_eq!(p.column_labels.len(), 20);
        assert_eq!(p.column_labels[10].input_dim, 1);
        assert_eq!(p.column_labels[10].basis_index, 0);
    }

    #[test]
    fn constant_basis_control_lrp_equals_constant_b_lrp() {
        let spec = BasisSpec::new(BasisFamily::Monomial, 0, Domain::symmetric(2, 1.0));
        let samples = vec![
            sample(&[0.0, -0.25], &[-1.0, -2.0], &[-4.0, -2.6], 0, 1),
            sample(&[0.0, -0.25], &[-2.0, -6.0], &[-10.0, -7.2], 0, 2),
        ];
        for j in 0..2 {
            let a = assemble_control_lrp(&samples, &spec, j).unwrap();
            let b = assemble_constant_b_lrp(&samples, j).unwrap();
            assert_eq!(a.design, b.design);
            assert_eq!(a.target, b.target);
        }
    }

    #[test]
    fn reference_constant_b_solution() {
        // delta U = [[-1, -2], [-2, -6]] with the reference difference targets
        // reproduces the reported rows of B-hat.
        let samples = vec![
            sample(&[0.0, -0.25], &[-1.0, -2.0], &[-4.0007, -2.6009], 0, 1),
            sample(&[0.0, -0.25], &[-2.0, -6.0], &[-10.0018, -7.2021], 0, 2),
        ];
        let p1 = assemble_constant_b_lrp(&samples, 0).unwrap();
        let sol1 = solve_least_squares(&p1).unwrap();
        assert_relative_eq!(sol1.coefficients[0], 2.0002, epsilon = 2e-4);
        assert_relative_eq!(sol1.coefficients[1], 1.0003, epsilon = 2e-4);
        assert!(sol1.residual_norm < 1e-12);
        let p2 = assemble_constant_b_lrp(&samples, 1).unwrap();
        let sol2 = solve_least_squares(&p2).unwrap();
        assert_relative_eq!(sol2.coefficients[0], 0.6005, epsilon = 2e-4);
        assert_relative_eq!(sol2.coefficients[1], 1.0002, epsilon = 2e-4);
    }

    #[test]
    fn identity_delta_u_returns_target_verbatim() {
        let samples = vec![
            sample(&[0.0], &[1.0, 0.0], &[0.7], 0, 1),
            sample(&[0.0], &[0.0, 1.0], &[-0.4], 0, 2),
        ];
        let p = assemble_constant_b_lrp(&samples, 0).unwrap();
        let sol = solve_least_squares(&p).unwrap();
        assert_relative_eq!(sol.coefficients[0], 0.7, epsilon = 1e-14);
        assert_relative_eq!(sol.coefficients[1], -0.4, epsilon = 1e-14);
    }

    #[test]
    fn duplicated_column_is_flagged_and_split_evenly() {
        let design = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 2.0, 2.0, -1.0, -1.0]);
        let target = DVector::from_vec(vec![2.0, 4.0, -2.0]);
        let p = RegressionProblem {
            design,
            target,
            row_provenance: vec![(0, 0); 3],
            column_labels: vec![
                ColumnLabel {
                    output_dim: 0,
                    input_dim: 0,
                    basis_index: 0,
                };
                2
            ],
            out_of_domain_rows: 0,
        };
        let sol = solve_least_squares(&p).unwrap();
        assert_eq!(sol.rank, 1);
        // Minimum-norm convention shares the coefficient equally.
        assert_relative_eq!(sol.coefficients[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(sol.coefficients[1], 1.0, epsilon = 1e-12);
        assert!(sol.condition_number > 1e10);
    }

    #[test]
    fn planted_overdetermined_recovery() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let design = DMatrix::from_fn(100, 10, |_, _| rng.gen::<f64>() * 2.0 - 1.0);
        let planted = DVector::from_fn(10, |i, _| (i as f64 - 4.5) / 3.0);
        let target = &design * &planted;
        let p = RegressionProblem {
            design,
            target,
            row_provenance: vec![(0, 0); 100],
            column_labels: Vec::new(),
            out_of_domain_rows: 0,
        };
        let sol = solve_least_squares(&p).unwrap();
        assert!((sol.coefficients - planted).norm() < 1e-9);
        assert_eq!(sol.rank, 10);
    }

    #[test]
    fn residual_is_monotone_under_row_removal() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let design = DMatrix::from_fn(30, 4, |_, _| rng.gen::<f64>() * 2.0 - 1.0);
        let target = DVector::from_fn(30, |_, _| rng.gen::<f64>());
        let full = RegressionProblem {
            design: design.clone(),
            target: target.clone(),
            row_provenance: vec![(0, 0); 30],
            column_labels: Vec::new(),
            out_of_domain_rows: 0,
        };
        let nested = RegressionProblem {
            design: design.rows(0, 20).into_owned(),
            target: target.rows(0, 20).into_owned(),
            row_provenance: vec![(0, 0); 20],
            column_labels: Vec::new(),
            out_of_domain_rows: 0,
        };
        let r_full = solve_least_squares(&full).unwrap().residual_norm;
        let r_nested = solve_least_squares(&nested).unwrap().residual_norm;
        assert!(r_nested <= r_full + 1e-12);
    }

    #[test]
    fn coefficients_invariant_to_common_row_scaling() {
        let spec = BasisSpec::new(BasisFamily::Monomial, 1, Domain::symmetric(2, 1.0));
        let samples: Vec<_> = (0..6)
            .map(|i| {
                sample(
                    &[0.1 * i as f64, -0.05 * i as f64],
                    &[1.0 + i as f64, 0.5],
                    &[0.3 + 0.1 * i as f64, -0.2],
                    0,
                    i + 1,
                )
            })
            .collect();
        let scaled: Vec<_> = samples
            .iter()
            .map(|s| DifferenceSample {
                delta_u: &s.delta_u * 3.5,
                delta_xdot: &s.delta_xdot * 3.5,
                ..s.clone()
            })
            .collect();
        let sol_a =
            solve_least_squares(&assemble_control_lrp(&samples, &spec, 0).unwrap()).unwrap();
        let sol_b = solve_least_squares(&assemble_control_lrp(&scaled, &spec, 0).unwrap()).unwrap();
        assert!((sol_a.coefficients - sol_b.coefficients).norm() < 1e-10);
    }

    #[test]
    fn drift_lrp_with_zero_input_is_raw_derivative() {
        let spec = BasisSpec::new(BasisFamily::Monomial, 1, Domain::symmetric(2, 1.0));
        let ghat = RecoveredControlField::from_coefficients(
            spec.clone(),
            DMatrix::zeros(2, 2 * feature_count(&spec)),
        )
        .unwrap();
        let samples = vec![DriftSample {
            time: 0.0,
            state: DVector::from_vec(vec![0.3, -0.4]),
            derivative: DVector::from_vec(vec![1.25, -0.5]),
            input: DVector::zeros(2),
        }];
        let p = assemble_drift_lrp(&samples, &ghat, &spec, 0).unwrap();
        // Control subtraction is a no-op: the target is the raw estimate.
        assert_eq!(p.target[0], 1.25);
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let p = RegressionProblem {
            design: DMatrix::from_row_slice(1, 1, &[f64::NAN]),
            target: DVector::from_vec(vec![0.0]),
            row_provenance: vec![(0, 0)],
            column_labels: Vec::new(),
            out_of_domain_rows: 0,
        };
        assert!(matches!(
            solve_least_squares(&p),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn empty_samples_are_insufficient() {
        let spec = BasisSpec::new(BasisFamily::Monomial, 1, Domain::symmetric(2, 1.0));
        assert!(matches!(
            assemble_control_lrp(&[], &spec, 0),
            Err(Error::InsufficientData { .. })
        ));
        assert!(matches!(
            assemble_constant_b_lrp(&[], 0),
            Err(Error::InsufficientData { .. })
        ));
    }

    #[test]
    fn ridge_shrinks_coefficients() {
        let design = DMatrix::from_row_slice(2, 1, &[1.0, 1.0]);
        let target = DVector::from_vec(vec![1.0, 1.0]);
        let p = RegressionProblem {
            design,
            target,
            row_provenance: vec![(0, 0); 2],
            column_labels: Vec::new(),
            out_of_domain_rows: 0,
        };
        let plain = solve_least_squares(&p).unwrap();
        let ridged = solve_with_ridge(&p, 1.0).unwrap();
        assert_relative_eq!(plain.coefficients[0], 1.0, epsilon = 1e-12);
        // s = sqrt(2): s/(s^2+1) * (s * 1) = 2/3.
        assert_relative_eq!(ridged.coefficients[0], 2.0 / 3.0, epsilon = 1e-12);
    }
}
