//! Truncated basis families for expanding the entries of a vector field.
//!
//! Each entry `g_js(x)` is approximated as `sum_k alpha_k phi_k(x)` over a
//! truncated family evaluated on the system's state domain:
//!
//! - `fourier`, one state dimension: angular features on the domain mapped to
//!   `[0, 2*pi)`, orthonormal under the Lebesgue inner product:
//!   `1/sqrt(2*pi), cos(k t)/sqrt(pi), sin(k t)/sqrt(pi)` for `k = 1..=L`
//!   (13 features at L = 6);
//! - `fourier`, several dimensions: per-coordinate features
//!   `1, cos(k*pi*xs_d), sin(k*pi*xs_d)` with `xs` the domain rescaled to
//!   `[-1, 1]`, giving `1 + 2*n*L` features (a full tensor basis would need
//!   `(2L+1)^n`);
//! - `legendre`: products of Lebesgue-normalized Legendre polynomials on the
//!   rescaled coordinates, all total degrees `<= L`, `C(n + L, L)` features;
//! - `monomial`: plain monomials of total degree `<= L` on the rescaled
//!   coordinates, `C(n + L, L)` features, ordered as degree-graded with the
//!   single-variable powers of each degree before the mixed terms
//!   (`1, x1, x2, x3, x1^2, x2^2, x3^2, x1 x2, x1 x3, x2 x3` for n = 3, L = 2).
//!
//! Evaluation is pure; points outside the domain are extrapolated and it is
//! the caller's job to count them if that matters.

use alloc::vec::Vec;

use nalgebra::DVector;

use crate::dynamics::Domain;
use crate::error::Error;
use crate::Result;

/// Which function family to expand in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BasisFamily {
    /// Trigonometric features (orthonormal in 1-D, per-coordinate otherwise).
    Fourier,
    /// Normalized Legendre polynomials, total degree graded.
    Legendre,
    /// Plain monomials, total degree graded.
    Monomial,
}

impl BasisFamily {
    /// Parse a family name as used in configs (`fourier`, `legendre`, `monomial`).
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "fourier" => Ok(Self::Fourier),
            "legendre" => Ok(Self::Legendre),
            "monomial" => Ok(Self::Monomial),
            other => Err(Error::InvalidArgument {
                what: "basis family",
                details: alloc::format!("unknown family '{other}'"),
            }),
        }
    }

    /// Canonical config name.
    pub fn name(&self) -> &'static str {
        match self {
            Self::Fourier => "fourier",
            Self::Legendre => "legendre",
            Self::Monomial => "monomial",
        }
    }
}

/// A truncated family on a domain: the family, the truncation order `L`
/// shared by every field entry, and the box used for rescaling.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisSpec {
    family: BasisFamily,
    order: usize,
    domain: Domain,
}

impl BasisSpec {
    /// Family of order `order` scaled to `domain`.
    pub fn new(family: BasisFamily, order: usize, domain: Domain) -> Self {
        Self {
            family,
            order,
            domain,
        }
    }

    /// The function family.
    pub fn family(&self) -> BasisFamily {
        self.family
    }

    /// Truncation order `L`.
    pub fn order(&self) -> usize {
        self.order
    }

    /// Scaling domain.
    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    /// State dimension the features are defined over.
    pub fn dimension(&self) -> usize {
        self.domain.dim()
    }

    /// Exact number of features [`eval_basis`] returns.
    pub fn feature_count(&self) -> usize {
        feature_count(self)
    }
}

/// Number of features the spec produces: `C(n + L, L)` for monomial and
/// Legendre, `1 + 2L` for 1-D Fourier, `1 + 2nL` for multi-D Fourier.
pub fn feature_count(spec: &BasisSpec) -> usize {
    let n = spec.dimension();
    let l = spec.order;
    match spec.family {
        BasisFamily::Fourier => 1 + 2 * n * l,
        BasisFamily::Legendre | BasisFamily::Monomial => binomial(n + l, l),
    }
}

fn binomial(n: usize, k: usize) -> usize {
    let k = k.min(n - k);
    let mut acc: usize = 1;
    for i in 0..k {
        acc = acc * (n - i) / (i + 1);
    }
    acc
}

/// Evaluate every feature of `spec` at `x`.
///
/// Points outside the domain are extrapolated by the same formulas.
pub fn eval_basis(spec: &BasisSpec, x: &DVector<f64>) -> Result<DVector<f64>> {
    let n = spec.dimension();
    if x.len() != n {
        return Err(Error::DimensionMismatch {
            what: "basis input",
            expected: n,
            got: x.len(),
        });
    }
    let mut values = Vec::with_capacity(feature_count(spec));
    match spec.family {
        BasisFamily::Fourier if n == 1 => {
            let theta = spec.domain.to_angle(x, 0);
            let two_pi = 2.0 * core::f64::consts::PI;
            values.push(1.0 / libm::sqrt(two_pi));
            let inv_sqrt_pi = 1.0 / libm::sqrt(core::f64::consts::PI);
            for k in 1..=spec.order {
                let kt = k as f64 * theta;
                values.push(libm::cos(kt) * inv_sqrt_pi);
                values.push(libm::sin(kt) * inv_sqrt_pi);
            }
        }
        BasisFamily::Fourier => {
            values.push(1.0);
            for d in 0..n {
                let xs = spec.domain.to_unit(x, d);
                for k in 1..=spec.order {
                    let arg = k as f64 * core::f64::consts::PI * xs;
                    values.push(libm::cos(arg));
                    values.push(libm::sin(arg));
                }
            }
        }
        BasisFamily::Legendre => {
            // Per-coordinate normalized Legendre values up to degree L.
            let table: Vec<Vec<f64>> = (0..n)
                .map(|d| normalized_legendre_values(spec.domain.to_unit(x, d), spec.order))
                .collect();
            for exponents in graded_exponents(n, spec.order) {
                let mut prod = 1.0;
                for (d, &e) in exponents.iter().enumerate() {
                    prod *= table[d][e];
                }
                values.push(prod);
            }
        }
        BasisFamily::Monomial => {
            let xs: Vec<f64> = (0..n).map(|d| spec.domain.to_unit(x, d)).collect();
            for exponents in graded_exponents(n, spec.order) {
                let mut prod = 1.0;
                for (d, &e) in exponents.iter().enumerate() {
                    for _ in 0..e {
                        prod *= xs[d];
                    }
                }
                values.push(prod);
            }
        }
    }
    Ok(DVector::from_vec(values))
}

/// Legendre values `P_0..P_L` at `t`, each scaled by `sqrt(k + 1/2)` so that
/// `int_{-1}^{1} phi_j phi_k dt = delta_jk`.
fn normalized_legendre_values(t: f64, max_degree: usize) -> Vec<f64> {
    let mut values = Vec::with_capacity(max_degree + 1);
    let mut p_prev = 1.0;
    values.push(libm::sqrt(0.5));
    if max_degree == 0 {
        return values;
    }
    let mut p_curr = t;
    values.push(libm::sqrt(1.5) * p_curr);
    for k in 1..max_degree {
        // (k+1) P_{k+1} = (2k+1) t P_k - k P_{k-1}
        let p_next = ((2 * k + 1) as f64 * t * p_curr - k as f64 * p_prev) / (k + 1) as f64;
        p_prev = p_curr;
        p_curr = p_next;
        values.push(libm::sqrt((k + 1) as f64 + 0.5) * p_curr);
    }
    values
}

/// All exponent vectors with total degree `<= max_degree`, graded by degree;
/// within a degree, terms touching fewer variables come first, then by the
/// variables involved. Matches the conventional listing
/// `1, x1, x2, x3, x1^2, x2^2, x3^2, x1 x2, x1 x3, x2 x3`.
fn graded_exponents(n: usize, max_degree: usize) -> Vec<Vec<usize>> {
    let mut all = Vec::new();
    for degree in 0..=max_degree {
        let mut of_degree = Vec::new();
        collect_exponents(n, degree, &mut Vec::with_capacity(n), &mut of_degree);
        of_degree.sort_by_key(|e: &Vec<usize>| {
            let distinct = e.iter().filter(|&&v| v > 0).count();
            let vars: Vec<usize> = e
                .iter()
                .enumerate()
                .filter(|(_, &v)| v > 0)
                .map(|(i, _)| i)
                .collect();
            (distinct, vars, e.clone())
        });
        all.extend(of_degree);
    }
    all
}

fn collect_exponents(
    n: usize,
    remaining: usize,
    prefix: &mut Vec<usize>,
    out: &mut Vec<Vec<usize>>,
) {
    if prefix.len() == n - 1 {
        prefix.push(remaining);
        out.push(prefix.clone());
        prefix.pop();
        return;
    }
    for e in 0..=remaining {
        prefix.push(e);
        collect_exponents(n, remaining - e, prefix, out);
        prefix.pop();
    }
}

/// Exponent vectors in feature order, for locating a feature by its powers.
pub fn monomial_exponents(spec: &BasisSpec) -> Vec<Vec<usize>> {
    graded_exponents(spec.dimension(), spec.order)
}

/// A fitted expansion `x -> coefficients . eval_basis(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisExpansion {
    spec: BasisSpec,
    coefficients: DVector<f64>,
}

impl BasisExpansion {
    /// The spec the coefficients refer to.
    pub fn spec(&self) -> &BasisSpec {
        &self.spec
    }

    /// Fitted coefficients, one per feature.
    pub fn coefficients(&self) -> &DVector<f64> {
        &self.coefficients
    }

    /// Value of the expansion at `x`.
    pub fn evaluate(&self, x: &DVector<f64>) -> Result<f64> {
        Ok(self.coefficients.dot(&eval_basis(&self.spec, x)?))
    }
}

/// Bind coefficients to a spec, checking the length against
/// [`feature_count`].
pub fn expand(spec: &BasisSpec, coefficients: DVector<f64>) -> Result<BasisExpansion> {
    let expected = feature_count(spec);
    if coefficients.len() != expected {
        return Err(Error::DimensionMismatch {
            what: "expansion coefficients",
            expected,
            got: coefficients.len(),
        });
    }
    Ok(BasisExpansion {
        spec: spec.clone(),
        coefficients,
    })
}
