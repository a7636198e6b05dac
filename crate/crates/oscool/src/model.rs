//! Oscillator networks and their phase-space realization.
//!
//! A model couples n unit-mass-like degrees of freedom through
//!
//! ```text
//! dx = v dt
//! M dv = -B v dt - grad V(x) dt + Sigma dW
//! ```
//!
//! with mass matrix `M` (symmetric positive definite), friction `B`
//! (`B + B'` positive semidefinite), nonsingular noise injection `Sigma`,
//! and a confining potential `V`.  Stacking `xi = (x, v)` gives the
//! phase-space form `d xi = A xi dt + Bn dW` whose blocks this module
//! assembles.  The module also evaluates the Boltzmann state at a given
//! temperature and checks the fluctuation–dissipation relation
//! `Sigma Sigma' = k T (B + B')` that makes that state invariant.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util;

/// Relative tolerance for fluctuation–dissipation comparisons: residuals
/// are measured in the max norm against `max(1, max |Sigma Sigma'|)`.
pub const FD_TOLERANCE: f64 = 1e-10;

/// Relative tolerance below which a matrix is accepted as symmetric.
const SYMMETRY_TOLERANCE: f64 = 1e-12;

/// Relative tolerance for positive-(semi)definiteness checks.
const DEFINITENESS_TOLERANCE: f64 = 1e-12;

/// Potential energy landscape for the position coordinates.
#[derive(Clone)]
pub enum PotentialSpec {
    /// `V(x) = x' K x / 2` with `K` symmetric positive definite.
    Quadratic(DMatrix<f64>),
    /// Separable polynomial `V(x) = sum_i p(x_i)` where
    /// `p(y) = c[0] + c[1] y + c[2] y^2 + ...`.
    Polynomial(Vec<f64>),
    /// Arbitrary user-supplied value and gradient evaluators.  The library
    /// trusts them: values should be finite and bounded below on finite
    /// inputs, and the gradient should be the true derivative of the value.
    Custom(CustomPotential),
}

type ValueFn = Arc<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>;
type GradientFn = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;

/// Value and gradient closures for a hand-rolled potential.
#[derive(Clone)]
pub struct CustomPotential {
    value: ValueFn,
    gradient: GradientFn,
}

impl CustomPotential {
    pub fn new(
        value: impl Fn(&DVector<f64>) -> f64 + Send + Sync + 'static,
        gradient: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    ) -> Self {
        Self {
            value: Arc::new(value),
            gradient: Arc::new(gradient),
        }
    }
}

impl fmt::Debug for PotentialSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PotentialSpec::Quadratic(k) => f.debug_tuple("Quadratic").field(k).finish(),
            PotentialSpec::Polynomial(c) => f.debug_tuple("Polynomial").field(c).finish(),
            PotentialSpec::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

impl PotentialSpec {
    /// Potential energy at `x`.
    pub fn value(&self, x: &DVector<f64>) -> f64 {
        match self {
            PotentialSpec::Quadratic(k) => 0.5 * (x.transpose() * k * x)[(0, 0)],
            PotentialSpec::Polynomial(c) => x.iter().map(|&y| poly_eval(c, y)).sum(),
            PotentialSpec::Custom(p) => (p.value)(x),
        }
    }

    /// Gradient of the potential at `x`.
    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            PotentialSpec::Quadratic(k) => k * x,
            PotentialSpec::Polynomial(c) => {
                DVector::from_iterator(x.len(), x.iter().map(|&y| poly_eval_derivative(c, y)))
            }
            PotentialSpec::Custom(p) => (p.gradient)(x),
        }
    }

    /// Stiffness matrix of a quadratic potential, if this is one.
    pub fn quadratic_stiffness(&self) -> Option<&DMatrix<f64>> {
        match self {
            PotentialSpec::Quadratic(k) => Some(k),
            _ => None,
        }
    }
}

fn poly_eval(coeffs: &[f64], y: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, &c| acc * y + c)
}

fn poly_eval_derivative(coeffs: &[f64], y: f64) -> f64 {
    coeffs
        .iter()
        .enumerate()
        .skip(1)
        .rev()
        .fold(0.0, |acc, (k, &c)| acc * y + k as f64 * c)
}

/// Phase-space matrices of the (linearized) dynamics `d xi = A xi dt + Bn dW`
/// with control channel `D`.
///
/// For a quadratic potential the drift is complete:
/// `A = [[0, I], [-M^-1 K, -M^-1 B]]`.  For other potentials the
/// position-coupling block is left at zero and `requires_gradient` is set;
/// simulation code must then add `-M^-1 grad V(x)` itself.
#[derive(Debug, Clone)]
pub struct PhaseSpaceMatrices {
    /// Drift matrix, `2n x 2n`.
    pub a: DMatrix<f64>,
    /// Noise injection `[0; M^-1 Sigma]`, `2n x n`.
    pub bn: DMatrix<f64>,
    /// Control channel `[0; I]`, `2n x n`: forces enter the velocity rows.
    pub d: DMatrix<f64>,
    /// True when the potential is not quadratic, so the drift above is
    /// missing the `-M^-1 grad V` term.
    pub requires_gradient: bool,
}

/// Gaussian state `N(mean, cov)` on phase space (or any linear space).
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianState {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

impl GaussianState {
    /// Build a Gaussian state, checking that `cov` is square of matching
    /// dimension, symmetric, and positive semidefinite.  The stored
    /// covariance is the symmetric part of the input.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != cov.ncols() || cov.nrows() != mean.len() {
            return Err(Error::InvalidArgument {
                name: "cov",
                reason: format!(
                    "expected {d} x {d} covariance for a mean of length {d}, got {r} x {c}",
                    d = mean.len(),
                    r = cov.nrows(),
                    c = cov.ncols()
                ),
            });
        }
        if !mean.iter().all(|x| x.is_finite()) || !util::all_finite(&cov) {
            return Err(Error::InvalidArgument {
                name: "cov",
                reason: "mean and covariance must be finite".into(),
            });
        }
        if util::symmetry_defect(&cov) > SYMMETRY_TOLERANCE {
            return Err(Error::InvalidArgument {
                name: "cov",
                reason: "covariance must be symmetric".into(),
            });
        }
        let mut cov = cov;
        util::symmetrize(&mut cov);
        let scale = util::max_abs(&cov).max(1.0);
        if util::min_symmetric_eigenvalue(&cov) < -DEFINITENESS_TOLERANCE * scale {
            return Err(Error::InvalidArgument {
                name: "cov",
                reason: "covariance must be positive semidefinite".into(),
            });
        }
        Ok(Self { mean, cov })
    }

    /// Centered Gaussian with the given covariance.
    pub fn centered(cov: DMatrix<f64>) -> Result<Self> {
        let dim = cov.nrows();
        Self::new(DVector::zeros(dim), cov)
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

impl Serialize for GaussianState {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        GaussianStateRepr {
            mean: util::vector_to_vec(&self.mean),
            cov: util::matrix_to_rows(&self.cov),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for GaussianState {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = GaussianStateRepr::deserialize(d)?;
        let cov = util::matrix_from_rows(&repr.cov)
            .ok_or_else(|| serde::de::Error::custom("covariance rows must be rectangular"))?;
        GaussianState::new(util::vector_from_vec(&repr.mean), cov)
            .map_err(|e| serde::de::Error::custom(e.to_string()))
    }
}

#[derive(Serialize, Deserialize)]
struct GaussianStateRepr {
    mean: Vec<f64>,
    cov: Vec<Vec<f64>>,
}

/// Outcome of a fluctuation–dissipation check at a given temperature.
#[derive(Debug, Clone)]
pub struct FdCheck {
    /// True when the residual is below `FD_TOLERANCE` relative to the
    /// noise covariance scale.
    pub holds: bool,
    /// `Sigma Sigma' - k T (B + B')`.
    pub residual: DMatrix<f64>,
}

/// A network of coupled stochastic oscillators.
///
/// Invariants checked at construction: all blocks are `n x n` and finite;
/// `M` is symmetric positive definite; `B + B'` is positive semidefinite;
/// `Sigma` is nonsingular; a quadratic stiffness is symmetric positive
/// definite; `temp > 0` and `boltzmann_constant > 0`.
#[derive(Debug, Clone)]
pub struct OscillatorModel {
    m: DMatrix<f64>,
    b: DMatrix<f64>,
    sigma: DMatrix<f64>,
    potential: PotentialSpec,
    boltzmann_constant: f64,
    temp: f64,
}

impl OscillatorModel {
    /// Build and validate a model.  The Boltzmann constant defaults to 1
    /// (natural units); see [`OscillatorModel::with_boltzmann_constant`].
    pub fn new(
        m: DMatrix<f64>,
        b: DMatrix<f64>,
        sigma: DMatrix<f64>,
        potential: PotentialSpec,
        temp: f64,
    ) -> Result<Self> {
        let n = m.nrows();
        if n == 0 {
            return Err(invalid("M", "must have at least one degree of freedom"));
        }
        for (field, mat) in [("M", &m), ("B", &b), ("Sigma", &sigma)] {
            if mat.nrows() != n || mat.ncols() != n {
                return Err(invalid(
                    field,
                    &format!("expected {n} x {n}, got {} x {}", mat.nrows(), mat.ncols()),
                ));
            }
            if !util::all_finite(mat) {
                return Err(invalid(field, "entries must be finite"));
            }
        }
        if util::symmetry_defect(&m) > SYMMETRY_TOLERANCE {
            return Err(invalid("M", "mass matrix must be symmetric"));
        }
        let m_scale = util::max_abs(&m).max(1.0);
        if util::min_symmetric_eigenvalue(&m) <= DEFINITENESS_TOLERANCE * m_scale {
            return Err(invalid("M", "mass matrix must be positive definite"));
        }
        let mut b_sym = &b + b.transpose();
        b_sym.scale_mut(0.5);
        let b_scale = util::max_abs(&b_sym).max(1.0);
        if util::min_symmetric_eigenvalue(&b_sym) < -DEFINITENESS_TOLERANCE * b_scale {
            return Err(invalid("B", "B + B' must be positive semidefinite"));
        }
        let svd = sigma.clone().svd(false, false);
        let s_max = svd.singular_values.max();
        let s_min = svd.singular_values.min();
        if s_min <= DEFINITENESS_TOLERANCE * s_max.max(1.0) {
            return Err(invalid("Sigma", "noise matrix must be nonsingular"));
        }
        match &potential {
            PotentialSpec::Quadratic(k) => {
                if k.nrows() != n || k.ncols() != n {
                    return Err(invalid(
                        "potential.K",
                        &format!("expected {n} x {n}, got {} x {}", k.nrows(), k.ncols()),
                    ));
                }
                if !util::all_finite(k) {
                    return Err(invalid("potential.K", "entries must be finite"));
                }
                if util::symmetry_defect(k) > SYMMETRY_TOLERANCE {
                    return Err(invalid("potential.K", "stiffness must be symmetric"));
                }
                let k_scale = util::max_abs(k).max(1.0);
                if util::min_symmetric_eigenvalue(k) <= DEFINITENESS_TOLERANCE * k_scale {
                    return Err(invalid(
                        "potential.K",
                        "stiffness must be positive definite",
                    ));
                }
            }
            PotentialSpec::Polynomial(c) => {
                if c.is_empty() || !c.iter().all(|x| x.is_finite()) {
                    return Err(invalid("potential.coeffs", "must be non-empty and finite"));
                }
            }
            PotentialSpec::Custom(_) => {}
        }
        if !(temp > 0.0) || !temp.is_finite() {
            return Err(invalid("T", "temperature must be positive and finite"));
        }
        Ok(Self {
            m,
            b,
            sigma,
            potential,
            boltzmann_constant: 1.0,
            temp,
        })
    }

    /// Single oscillator with scalar mass, friction, stiffness and noise.
    pub fn scalar(mass: f64, friction: f64, stiffness: f64, noise: f64, temp: f64) -> Result<Self> {
        Self::new(
            DMatrix::from_element(1, 1, mass),
            DMatrix::from_element(1, 1, friction),
            DMatrix::from_element(1, 1, noise),
            PotentialSpec::Quadratic(DMatrix::from_element(1, 1, stiffness)),
            temp,
        )
    }

    /// Ring of `masses.len()` oscillators with nearest-neighbour friction
    /// coupling: `B` is the circulant matrix with `beta` on the diagonal
    /// and `gamma` on the super-/sub-diagonal and in the two wrap-around
    /// corners.  `noise_rows[i]` becomes row `i` of `Sigma`.
    ///
    /// The wrap-around pattern needs at least three sites.
    pub fn ring(
        masses: &[f64],
        beta: f64,
        gamma: f64,
        potential: PotentialSpec,
        noise_rows: &[Vec<f64>],
        temp: f64,
    ) -> Result<Self> {
        let n = masses.len();
        if n < 3 {
            return Err(Error::RingTooSmall { n });
        }
        if masses.iter().any(|&m| !(m > 0.0) || !m.is_finite()) {
            return Err(invalid("masses", "must be positive and finite"));
        }
        if noise_rows.len() != n || noise_rows.iter().any(|r| r.len() != n) {
            return Err(invalid(
                "noise_rows",
                &format!("expected {n} rows of length {n}"),
            ));
        }
        let m = DMatrix::from_diagonal(&DVector::from_column_slice(masses));
        let mut b = DMatrix::zeros(n, n);
        for i in 0..n {
            b[(i, i)] = beta;
            b[(i, (i + 1) % n)] = gamma;
            b[(i, (i + n - 1) % n)] = gamma;
        }
        let sigma = DMatrix::from_fn(n, n, |i, j| noise_rows[i][j]);
        Self::new(m, b, sigma, potential, temp)
    }

    /// Replace the model temperature (must stay positive).
    pub fn with_temperature(mut self, temp: f64) -> Result<Self> {
        if !(temp > 0.0) || !temp.is_finite() {
            return Err(invalid("T", "temperature must be positive and finite"));
        }
        self.temp = temp;
        Ok(self)
    }

    /// Replace the Boltzmann constant (must be positive).
    pub fn with_boltzmann_constant(mut self, k: f64) -> Result<Self> {
        if !(k > 0.0) || !k.is_finite() {
            return Err(invalid(
                "k",
                "Boltzmann constant must be positive and finite",
            ));
        }
        self.boltzmann_constant = k;
        Ok(self)
    }

    /// Number of degrees of freedom.
    pub fn n(&self) -> usize {
        self.m.nrows()
    }

    /// Phase-space dimension `2n`.
    pub fn state_dim(&self) -> usize {
        2 * self.n()
    }

    pub fn m(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn potential(&self) -> &PotentialSpec {
        &self.potential
    }

    pub fn boltzmann_constant(&self) -> f64 {
        self.boltzmann_constant
    }

    pub fn temp(&self) -> f64 {
        self.temp
    }

    /// `k T` at the model's own temperature.
    pub fn thermal_energy(&self) -> f64 {
        self.boltzmann_constant * self.temp
    }

    /// Assemble the phase-space matrices for `xi = (x, v)`:
    /// `A = [[0, I], [-M^-1 K, -M^-1 B]]`, `Bn = [0; M^-1 Sigma]`,
    /// `D = [0; I]`.  For non-quadratic potentials the `-M^-1 K` block is
    /// zero and `requires_gradient` is set.
    pub fn phase_space(&self) -> PhaseSpaceMatrices {
        let n = self.n();
        let m_chol = self
            .m
            .clone()
            .cholesky()
            .expect("mass matrix validated positive definite at construction");
        let minv_b = m_chol.solve(&self.b);
        let minv_sigma = m_chol.solve(&self.sigma);

        let mut a = DMatrix::zeros(2 * n, 2 * n);
        a.view_mut((0, n), (n, n)).fill_with_identity();
        if let PotentialSpec::Quadratic(k) = &self.potential {
            let minv_k = m_chol.solve(k);
            a.view_mut((n, 0), (n, n)).copy_from(&(-&minv_k));
        }
        a.view_mut((n, n), (n, n)).copy_from(&(-&minv_b));

        let mut bn = DMatrix::zeros(2 * n, n);
        bn.view_mut((n, 0), (n, n)).copy_from(&minv_sigma);

        let mut d = DMatrix::zeros(2 * n, n);
        d.view_mut((n, 0), (n, n)).fill_with_identity();

        PhaseSpaceMatrices {
            a,
            bn,
            d,
            requires_gradient: self.potential.quadratic_stiffness().is_none(),
        }
    }

    /// Centered Gaussian with covariance
    /// `k * temp * blockdiag(K^-1, M^-1)` — the Boltzmann state of a
    /// quadratic model at temperature `temp`.
    pub fn boltzmann_state(&self, temp: f64) -> Result<GaussianState> {
        if !(temp > 0.0) || !temp.is_finite() {
            return Err(Error::InvalidArgument {
                name: "temp",
                reason: "temperature must be positive and finite".into(),
            });
        }
        let k = self
            .potential
            .quadratic_stiffness()
            .ok_or(Error::UnsupportedPotential {
                operation: "boltzmann_state",
            })?;
        let n = self.n();
        let kt = self.boltzmann_constant * temp;
        let k_inv = k
            .clone()
            .cholesky()
            .expect("stiffness validated positive definite at construction")
            .inverse();
        let m_inv = self
            .m
            .clone()
            .cholesky()
            .expect("mass matrix validated positive definite at construction")
            .inverse();
        let mut cov = DMatrix::zeros(2 * n, 2 * n);
        cov.view_mut((0, 0), (n, n)).copy_from(&(kt * k_inv));
        cov.view_mut((n, n), (n, n)).copy_from(&(kt * m_inv));
        util::symmetrize(&mut cov);
        GaussianState::centered(cov)
    }

    /// Inverse covariance of the Boltzmann state,
    /// `(1 / (k temp)) * blockdiag(K, M)`.  Used as boundary data by the
    /// finite-horizon solver.
    pub fn boltzmann_inverse_cov(&self, temp: f64) -> Result<DMatrix<f64>> {
        if !(temp > 0.0) || !temp.is_finite() {
            return Err(Error::InvalidArgument {
                name: "temp",
                reason: "temperature must be positive and finite".into(),
            });
        }
        let k = self
            .potential
            .quadratic_stiffness()
            .ok_or(Error::UnsupportedPotential {
                operation: "boltzmann_inverse_cov",
            })?;
        let n = self.n();
        let scale = 1.0 / (self.boltzmann_constant * temp);
        let mut s = DMatrix::zeros(2 * n, 2 * n);
        s.view_mut((0, 0), (n, n)).copy_from(&(scale * k));
        s.view_mut((n, n), (n, n)).copy_from(&(scale * &self.m));
        util::symmetrize(&mut s);
        Ok(s)
    }

    /// Check the fluctuation–dissipation relation
    /// `Sigma Sigma' = k * temp * (B + B')` at the given temperature.
    pub fn check_fd(&self, temp: f64) -> FdCheck {
        let noise_cov = &self.sigma * self.sigma.transpose();
        let kt = self.boltzmann_constant * temp;
        let residual = &noise_cov - kt * (&self.b + self.b.transpose());
        let tol = FD_TOLERANCE * util::max_abs(&noise_cov).max(1.0);
        FdCheck {
            holds: util::max_abs(&residual) <= tol,
            residual,
        }
    }

    /// Total energy `H(x, v) = v' M v / 2 + V(x)`.
    pub fn hamiltonian(&self, x: &DVector<f64>, v: &DVector<f64>) -> f64 {
        assert_eq!(x.len(), self.n(), "position dimension mismatch");
        assert_eq!(v.len(), self.n(), "velocity dimension mismatch");
        0.5 * (v.transpose() * &self.m * v)[(0, 0)] + self.potential.value(x)
    }

    /// Parse a model from its JSON file representation.
    pub fn from_json_str(s: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(s)?;
        file.into_model()
    }

    /// Read and parse a model file.
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    /// Serialize to the JSON file representation.  Custom potentials have
    /// no file form.
    pub fn to_json_string(&self) -> Result<String> {
        let potential = match &self.potential {
            PotentialSpec::Quadratic(k) => PotentialFile::Quadratic {
                k: util::matrix_to_rows(k),
            },
            PotentialSpec::Polynomial(c) => PotentialFile::Polynomial { coeffs: c.clone() },
            PotentialSpec::Custom(_) => {
                return Err(Error::UnsupportedPotential {
                    operation: "to_json_string",
                })
            }
        };
        let file = ModelFile {
            n: self.n(),
            m: util::matrix_to_rows(&self.m),
            b: util::matrix_to_rows(&self.b),
            sigma: util::matrix_to_rows(&self.sigma),
            potential,
            k: self.boltzmann_constant,
            t: self.temp,
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    /// Construct without validation — test-only escape hatch for degenerate
    /// configurations (for example zero noise in energy-ledger checks).
    #[cfg(test)]
    pub(crate) fn unchecked(
        m: DMatrix<f64>,
        b: DMatrix<f64>,
        sigma: DMatrix<f64>,
        potential: PotentialSpec,
        temp: f64,
    ) -> Self {
        Self {
            m,
            b,
            sigma,
            potential,
            boltzmann_constant: 1.0,
            temp,
        }
    }
}

fn invalid(field: &str, reason: &str) -> Error {
    Error::InvalidModel {
        field: field.into(),
        reason: reason.into(),
    }
}

/// JSON file layout: `{n, M, B, Sigma, potential, k, T}` with matrices as
/// row-major nested arrays and `potential` either
/// `{"type": "quadratic", "K": [[..]]}` or
/// `{"type": "polynomial", "coeffs": [..]}`.  `k` defaults to 1.
#[derive(Serialize, Deserialize)]
struct ModelFile {
    n: usize,
    #[serde(rename = "M")]
    m: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    b: Vec<Vec<f64>>,
    #[serde(rename = "Sigma")]
    sigma: Vec<Vec<f64>>,
    potential: PotentialFile,
    #[serde(default = "default_boltzmann_constant")]
    k: f64,
    #[serde(rename = "T")]
    t: f64,
}

fn default_boltzmann_constant() -> f64 {
    1.0
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum PotentialFile {
    Quadratic {
        #[serde(rename = "K")]
        k: Vec<Vec<f64>>,
    },
    Polynomial {
        coeffs: Vec<f64>,
    },
}

impl ModelFile {
    fn into_model(self) -> Result<OscillatorModel> {
        let parse = |field: &str, rows: &[Vec<f64>]| {
            util::matrix_from_rows(rows)
                .ok_or_else(|| invalid(field, "must be a non-empty rectangular array of numbers"))
        };
        let m = parse("M", &self.m)?;
        let b = parse("B", &self.b)?;
        let sigma = parse("Sigma", &self.sigma)?;
        if m.nrows() != self.n || m.ncols() != self.n {
            return Err(invalid(
                "M",
                &format!(
                    "declared n = {} but matrix is {} x {}",
                    self.n,
                    m.nrows(),
                    m.ncols()
                ),
            ));
        }
        let potential = match self.potential {
            PotentialFile::Quadratic { k } => PotentialSpec::Quadratic(parse("potential.K", &k)?),
            PotentialFile::Polynomial { coeffs } => PotentialSpec::Polynomial(coeffs),
        };
        OscillatorModel::new(m, b, sigma, potential, self.t)?.with_boltzmann_constant(self.k)
    }
}
