//! Stationary analysis of the linear phase-space dynamics and the
//! steady-state cooling feedback design.
//!
//! For `d xi = A xi dt + Bn dW` this module answers, in order: is the
//! drift stable, is the noise able to reach every direction, what is the
//! unique invariant Gaussian (a Lyapunov solve), is the stationary process
//! time-reversible, and how far is a given state from thermal equilibrium
//! (Gaussian relative entropy).  On top of that it designs the
//! minimum-power constant feedback `u = -U v` that moves the stationary
//! state to a colder Boltzmann state, and propagates covariances through
//! time for transient questions.

use nalgebra::{DMatrix, DVector};
use serde::ser::SerializeStruct;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{FdCheck, GaussianState, OscillatorModel, FD_TOLERANCE};
use crate::util;

/// Relative threshold on singular values when counting rank: a singular
/// value counts only above `RANK_TOLERANCE * sigma_max`.
pub const RANK_TOLERANCE: f64 = 1e-9;

/// Residual gate for Lyapunov solves, relative to `max(1, max |Q|)`.
pub const LYAPUNOV_TOLERANCE: f64 = 1e-10;

/// Solve `A P + P A' + Q = 0` for symmetric `P`.
///
/// The equation is vectorized through the Kronecker identity
/// `vec(A P + P A') = (I (x) A + A (x) I) vec(P)` and solved directly —
/// adequate for the desk-scale dimensions this crate targets.  The result
/// is validated by substitution; a residual above
/// [`LYAPUNOV_TOLERANCE`] `* max(1, max |Q|)` is an error, as is a drift
/// with an eigenvalue pair summing to zero (no unique solution).
pub fn solve_lyapunov(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n || q.nrows() != n || q.ncols() != n {
        return Err(Error::InvalidArgument {
            name: "q",
            reason: format!(
                "A and Q must be square of equal size, got {} x {} and {} x {}",
                a.nrows(),
                a.ncols(),
                q.nrows(),
                q.ncols()
            ),
        });
    }
    if !util::all_finite(a) || !util::all_finite(q) {
        return Err(Error::InvalidArgument {
            name: "a",
            reason: "A and Q must be finite".into(),
        });
    }
    let eye = DMatrix::<f64>::identity(n, n);
    let lhs = eye.kronecker(a) + a.kronecker(&eye);
    let rhs = DVector::from_column_slice(q.as_slice());
    let sol = lhs.lu().solve(&(-rhs)).ok_or(Error::NoUniqueSolution)?;
    if !sol.iter().all(|x| x.is_finite()) {
        return Err(Error::NoUniqueSolution);
    }
    let mut p = DMatrix::from_column_slice(n, n, sol.as_slice());
    util::symmetrize(&mut p);
    let residual = util::max_abs(&(a * &p + &p * a.transpose() + q));
    let tolerance = LYAPUNOV_TOLERANCE * util::max_abs(q).max(1.0);
    if residual > tolerance {
        return Err(Error::ResidualTooLarge {
            operation: "solve_lyapunov",
            residual,
            tolerance,
        });
    }
    Ok(p)
}

/// Controllability of the pair `(A, B)`: full rank of
/// `[B, AB, ..., A^(m-1) B]`, judged by singular values against
/// [`RANK_TOLERANCE`] `* sigma_max`.
pub fn is_controllable(a: &DMatrix<f64>, b: &DMatrix<f64>) -> bool {
    let m = a.nrows();
    assert_eq!(a.ncols(), m, "drift matrix must be square");
    assert_eq!(b.nrows(), m, "input matrix row count must match the drift");
    let p = b.ncols();
    let mut ctrb = DMatrix::zeros(m, m * p);
    let mut block = b.clone();
    for k in 0..m {
        ctrb.view_mut((0, k * p), (m, p)).copy_from(&block);
        if k + 1 < m {
            block = a * block;
        }
    }
    let sv = ctrb.svd(false, false).singular_values;
    let s_max = sv.max();
    if !(s_max > 0.0) {
        return false;
    }
    let rank = sv.iter().filter(|&&s| s > RANK_TOLERANCE * s_max).count();
    rank == m
}

/// Largest real part among the eigenvalues of `a`.  Negative means the
/// drift is asymptotically stable.
pub fn spectral_abscissa(a: &DMatrix<f64>) -> f64 {
    assert_eq!(a.nrows(), a.ncols(), "drift matrix must be square");
    assert!(util::all_finite(a), "drift matrix must be finite");
    a.complex_eigenvalues()
        .iter()
        .fold(f64::NEG_INFINITY, |acc, ev| acc.max(ev.re))
}

/// Everything the stationary analysis of a quadratic model reports.
#[derive(Debug, Clone, Serialize)]
pub struct StationaryReport {
    /// `spectral_abscissa < 0` for the phase-space drift.
    pub stable: bool,
    /// Controllability of the noise pair `(A, Bn)`.
    pub controllable: bool,
    /// Controllability of the damping pair
    /// `([0, I; -M^-1 K, 0], [0, 0; 0, -M^-1 (B+B')/2])` — the criterion
    /// guaranteeing a unique nondegenerate invariant measure.
    pub pervasive_damping: bool,
    /// Largest eigenvalue real part of the phase-space drift.
    pub spectral_abscissa: f64,
    /// Whether `Sigma Sigma' = k T (B + B')` at the model's temperature.
    pub fd_holds: bool,
    /// Whether the stationary process is time-reversible (`B` symmetric
    /// positive definite and `Sigma Sigma' = 2 k T B`).
    pub reversible: bool,
    /// The invariant Gaussian, present when the dynamics admit one.
    pub invariant: Option<GaussianState>,
}

/// Run the full stationary analysis of a quadratic model.
///
/// The invariant Gaussian is computed (by solving the Lyapunov equation
/// `A P + P A' + Bn Bn' = 0`) exactly when the drift is stable and both
/// controllability criteria hold; otherwise `invariant` is `None`.
pub fn invariant_gaussian(model: &OscillatorModel) -> Result<StationaryReport> {
    let k = model
        .potential()
        .quadratic_stiffness()
        .ok_or(Error::UnsupportedPotential {
            operation: "invariant_gaussian",
        })?;
    let n = model.n();
    let ps = model.phase_space();
    let abscissa = spectral_abscissa(&ps.a);
    let stable = abscissa < 0.0;
    let controllable = is_controllable(&ps.a, &ps.bn);

    // Damping pair: the conservative part of the drift against the
    // dissipative block alone.
    let m_chol = model
        .m()
        .clone()
        .cholesky()
        .expect("mass matrix validated positive definite at construction");
    let minv_k = m_chol.solve(k);
    let b_sym = 0.5 * (model.b() + model.b().transpose());
    let minv_bsym = m_chol.solve(&b_sym);
    let mut pair_a = DMatrix::zeros(2 * n, 2 * n);
    pair_a.view_mut((0, n), (n, n)).fill_with_identity();
    pair_a.view_mut((n, 0), (n, n)).copy_from(&(-&minv_k));
    let mut pair_b = DMatrix::zeros(2 * n, 2 * n);
    pair_b.view_mut((n, n), (n, n)).copy_from(&(-&minv_bsym));
    let pervasive_damping = is_controllable(&pair_a, &pair_b);

    let invariant = if stable && controllable && pervasive_damping {
        let q = &ps.bn * ps.bn.transpose();
        Some(GaussianState::centered(solve_lyapunov(&ps.a, &q)?)?)
    } else {
        None
    };

    Ok(StationaryReport {
        stable,
        controllable,
        pervasive_damping,
        spectral_abscissa: abscissa,
        fd_holds: model.check_fd(model.temp()).holds,
        reversible: is_reversible(model, model.temp()),
        invariant,
    })
}

/// Time-reversibility of the stationary process at temperature `temp`:
/// `B` symmetric positive definite and `Sigma Sigma' = 2 k temp B`.
pub fn is_reversible(model: &OscillatorModel, temp: f64) -> bool {
    let b = model.b();
    if util::symmetry_defect(b) > 1e-12 {
        return false;
    }
    let scale = util::max_abs(b).max(1.0);
    if util::min_symmetric_eigenvalue(&(0.5 * (b + b.transpose()))) <= 1e-12 * scale {
        return false;
    }
    let noise_cov = model.sigma() * model.sigma().transpose();
    let residual = &noise_cov - 2.0 * model.boltzmann_constant() * temp * b;
    util::max_abs(&residual) <= FD_TOLERANCE * util::max_abs(&noise_cov).max(1.0)
}

/// A constant velocity feedback `u = -U v` together with the stationary
/// power it draws.
#[derive(Debug, Clone)]
pub struct SteadyFeedback {
    /// Feedback gain on velocity.
    pub u: DMatrix<f64>,
    /// Stationary input power `k T_eff trace(M^-1 U' M^-2 U)`.
    pub power: f64,
    /// True when the gain is certified minimum-power (scalar mass matrix);
    /// for general mass matrices the symmetric gain is returned as a
    /// feasible design without an optimality certificate.
    pub certified_optimal: bool,
}

impl Serialize for SteadyFeedback {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut st = s.serialize_struct("SteadyFeedback", 3)?;
        st.serialize_field("U", &util::matrix_to_rows(&self.u))?;
        st.serialize_field("power", &self.power)?;
        st.serialize_field("certified_optimal", &self.certified_optimal)?;
        st.end()
    }
}

/// Design the constant feedback that cools the stationary state from
/// temperature `temp` to `temp_eff`.
///
/// The gain is the symmetric solution
/// `U = (temp - temp_eff) / (2 k temp temp_eff) * Sigma Sigma'`
/// of the modified fluctuation–dissipation relation (see [`verify_fd2`]).
/// For scalar mass matrices this gain is the minimum-power choice among
/// all gains achieving the target, and `certified_optimal` is set.
///
/// Requires `0 < temp_eff <= temp`; asking to heat is an error.
pub fn design_steady_feedback(
    model: &OscillatorModel,
    temp: f64,
    temp_eff: f64,
) -> Result<SteadyFeedback> {
    if !(temp > 0.0) || !temp.is_finite() {
        return Err(Error::InvalidArgument {
            name: "temp",
            reason: "temperature must be positive and finite".into(),
        });
    }
    if !(temp_eff > 0.0) || !temp_eff.is_finite() || temp_eff > temp {
        return Err(Error::HeatingNotCooling {
            t_eff: temp_eff,
            t: temp,
        });
    }
    let k = model.boltzmann_constant();
    let noise_cov = model.sigma() * model.sigma().transpose();
    let u = ((temp - temp_eff) / (2.0 * k * temp * temp_eff)) * noise_cov;

    let m_inv = model
        .m()
        .clone()
        .cholesky()
        .expect("mass matrix validated positive definite at construction")
        .inverse();
    let power = k * temp_eff * (&m_inv * u.transpose() * &m_inv * &m_inv * &u).trace();

    Ok(SteadyFeedback {
        u,
        power,
        certified_optimal: is_scalar_matrix(model.m()),
    })
}

/// Check the modified fluctuation–dissipation relation for a candidate
/// gain: `((temp - temp_eff) / temp) Sigma Sigma' = k temp_eff (U + U')`.
/// The returned residual is `lhs - rhs`.
pub fn verify_fd2(model: &OscillatorModel, u: &DMatrix<f64>, temp: f64, temp_eff: f64) -> FdCheck {
    let noise_cov = model.sigma() * model.sigma().transpose();
    let lhs = ((temp - temp_eff) / temp) * &noise_cov;
    let rhs = model.boltzmann_constant() * temp_eff * (u + u.transpose());
    let residual = lhs - rhs;
    let tol = FD_TOLERANCE * util::max_abs(&noise_cov).max(1.0);
    FdCheck {
        holds: util::max_abs(&residual) <= tol,
        residual,
    }
}

fn is_scalar_matrix(m: &DMatrix<f64>) -> bool {
    let n = m.nrows();
    let first = m[(0, 0)];
    let scale = first.abs().max(1.0);
    for i in 0..n {
        for j in 0..n {
            let want = if i == j { first } else { 0.0 };
            if (m[(i, j)] - want).abs() > 1e-12 * scale {
                return false;
            }
        }
    }
    true
}

/// Relative entropy `D(p || q)` between two Gaussians on the same space:
///
/// ```text
/// D = [trace(Q^-1 P) - d + (mq - mp)' Q^-1 (mq - mp) + ln det Q - ln det P] / 2
/// ```
///
/// Returns `+inf` when `p` is degenerate; a degenerate `q` is an error
/// because the divergence is then meaningless for any nondegenerate `p`.
/// The result is clamped at zero to absorb rounding on near-identical
/// inputs.
pub fn gaussian_kl(p: &GaussianState, q: &GaussianState) -> Result<f64> {
    let d = p.dim();
    if q.dim() != d {
        return Err(Error::InvalidArgument {
            name: "q",
            reason: format!("dimension mismatch: {} vs {}", d, q.dim()),
        });
    }
    let chol_q = q
        .cov()
        .clone()
        .cholesky()
        .ok_or(Error::SingularCovariance {
            context: "relative entropy reference state",
        })?;
    let chol_p = match p.cov().clone().cholesky() {
        Some(c) => c,
        None => return Ok(f64::INFINITY),
    };
    let ln_det = |c: &nalgebra::Cholesky<f64, nalgebra::Dyn>| {
        2.0 * c.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>()
    };
    let trace_term = chol_q.solve(p.cov()).trace();
    let dm = q.mean() - p.mean();
    let mean_term = dm.dot(&chol_q.solve(&dm));
    let kl = 0.5 * (trace_term - d as f64 + mean_term + ln_det(&chol_q) - ln_det(&chol_p));
    Ok(kl.max(0.0))
}

/// A covariance trajectory on a uniform time grid.
#[derive(Debug, Clone)]
pub struct CovariancePath {
    times: Vec<f64>,
    covs: Vec<DMatrix<f64>>,
}

impl CovariancePath {
    pub(crate) fn new(times: Vec<f64>, covs: Vec<DMatrix<f64>>) -> Self {
        debug_assert_eq!(times.len(), covs.len());
        Self { times, covs }
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn covs(&self) -> &[DMatrix<f64>] {
        &self.covs
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Covariance at the final grid node.
    pub fn final_cov(&self) -> &DMatrix<f64> {
        self.covs.last().expect("path has at least one node")
    }
}

/// Write a covariance-vs-time table as CSV: header `t,P_1_1,...,P_d_d`
/// (row-major entries), one row per time, 17-significant-digit floats.
pub fn write_covariance_csv<W: std::io::Write>(
    times: &[f64],
    covs: &[DMatrix<f64>],
    out: W,
) -> Result<()> {
    if times.len() != covs.len() || covs.is_empty() {
        return Err(Error::InvalidArgument {
            name: "covs",
            reason: format!(
                "need matching non-empty times and covariances, got {} and {}",
                times.len(),
                covs.len()
            ),
        });
    }
    let d = covs[0].nrows();
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["t".to_string()];
    for r in 1..=d {
        for c in 1..=d {
            header.push(format!("P_{r}_{c}"));
        }
    }
    w.write_record(&header)?;
    for (t, p) in times.iter().zip(covs) {
        if p.nrows() != d || p.ncols() != d {
            return Err(Error::InvalidArgument {
                name: "covs",
                reason: "all covariance matrices must share one size".into(),
            });
        }
        let mut row = vec![format!("{t:.16e}")];
        for r in 0..d {
            for c in 0..d {
                row.push(format!("{:.16e}", p[(r, c)]));
            }
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::Csv(e.to_string()))?;
    Ok(())
}

/// Read a covariance table written by [`write_covariance_csv`].
pub fn read_covariance_csv<R: std::io::Read>(input: R) -> Result<(Vec<f64>, Vec<DMatrix<f64>>)> {
    let mut reader = csv::Reader::from_reader(input);
    let headers = reader.headers().map_err(|e| Error::Csv(e.to_string()))?;
    let cols = headers.len();
    if cols < 2 || &headers[0] != "t" {
        return Err(Error::Csv(
            "expected header `t,P_1_1,...` with at least one entry column".into(),
        ));
    }
    let d = ((cols - 1) as f64).sqrt().round() as usize;
    if d * d != cols - 1 {
        return Err(Error::Csv(format!(
            "{} entry columns is not a square matrix",
            cols - 1
        )));
    }
    let parse = |s: &str| -> Result<f64> {
        s.trim()
            .parse::<f64>()
            .map_err(|e| Error::Csv(format!("bad float {s:?}: {e}")))
    };
    let mut times = Vec::new();
    let mut covs = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Csv(e.to_string()))?;
        if record.len() != cols {
            return Err(Error::Csv(format!(
                "row has {} fields, expected {cols}",
                record.len()
            )));
        }
        times.push(parse(&record[0])?);
        let mut p = DMatrix::zeros(d, d);
        for r in 0..d {
            for c in 0..d {
                p[(r, c)] = parse(&record[1 + r * d + c])?;
            }
        }
        covs.push(p);
    }
    if times.is_empty() {
        return Err(Error::Csv("table has no rows".into()));
    }
    Ok((times, covs))
}

/// Propagate a covariance through `dP/dt = A(t) P + P A(t)' + Q` with a
/// fixed-step fourth-order Runge–Kutta scheme, symmetrizing after every
/// step.  `drift` is evaluated at the stage times, so time-varying
/// closed-loop drifts are supported.
pub fn propagate_covariance<F>(
    mut drift: F,
    q: &DMatrix<f64>,
    p0: &DMatrix<f64>,
    t0: f64,
    t1: f64,
    steps: usize,
) -> Result<CovariancePath>
where
    F: FnMut(f64) -> DMatrix<f64>,
{
    let d = p0.nrows();
    if p0.ncols() != d || q.nrows() != d || q.ncols() != d {
        return Err(Error::InvalidArgument {
            name: "p0",
            reason: "P0 and Q must be square of equal size".into(),
        });
    }
    if !(t1 > t0) || !t0.is_finite() || !t1.is_finite() {
        return Err(Error::InvalidArgument {
            name: "t1",
            reason: format!("need t0 < t1, got [{t0}, {t1}]"),
        });
    }
    if steps == 0 {
        return Err(Error::InvalidArgument {
            name: "steps",
            reason: "need at least one step".into(),
        });
    }
    let h = (t1 - t0) / steps as f64;
    let rhs = |a: &DMatrix<f64>, p: &DMatrix<f64>| a * p + p * a.transpose() + q;

    let mut p = p0.clone();
    util::symmetrize(&mut p);
    let mut times = Vec::with_capacity(steps + 1);
    let mut covs = Vec::with_capacity(steps + 1);
    times.push(t0);
    covs.push(p.clone());

    for i in 0..steps {
        let t = t0 + i as f64 * h;
        let a1 = drift(t);
        let a_mid = drift(t + 0.5 * h);
        let a4 = drift(t + h);
        let k1 = rhs(&a1, &p);
        let k2 = rhs(&a_mid, &(&p + (0.5 * h) * &k1));
        let k3 = rhs(&a_mid, &(&p + (0.5 * h) * &k2));
        let k4 = rhs(&a4, &(&p + h * &k3));
        p += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        util::symmetrize(&mut p);
        if !util::all_finite(&p) {
            return Err(Error::IntegrationDiverged { t: t + h });
        }
        times.push(t0 + (i + 1) as f64 * h);
        covs.push(p.clone());
    }
    Ok(CovariancePath::new(times, covs))
}

/// [`propagate_covariance`] with a constant drift matrix.
pub fn propagate_covariance_const(
    a: &DMatrix<f64>,
    q: &DMatrix<f64>,
    p0: &DMatrix<f64>,
    t0: f64,
    t1: f64,
    steps: usize,
) -> Result<CovariancePath> {
    if a.nrows() != a.ncols() || a.nrows() != p0.nrows() {
        return Err(Error::InvalidArgument {
            name: "a",
            reason: "drift must be square and match P0".into(),
        });
    }
    propagate_covariance(|_| a.clone(), q, p0, t0, t1, steps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PotentialSpec;
    use crate::testutil::{max_diff, unit_oscillator};
    use nalgebra::dmatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lyapunov_unit_oscillator_gives_half_identity() {
        let a = dmatrix![0.0, 1.0; -1.0, -1.0];
        let q = dmatrix![0.0, 0.0; 0.0, 1.0];
        let p = solve_lyapunov(&a, &q).unwrap();
        assert!(max_diff(&p, &(0.5 * DMatrix::identity(2, 2))) <= 1e-12);
        let residual = util::max_abs(&(&a * &p + &p * a.transpose() + &q));
        assert!(residual <= 1e-10);
    }

    #[test]
    fn lyapunov_diagonal_case() {
        let a = -DMatrix::<f64>::identity(2, 2);
        let q = 2.0 * DMatrix::<f64>::identity(2, 2);
        let p = solve_lyapunov(&a, &q).unwrap();
        assert!(max_diff(&p, &DMatrix::identity(2, 2)) <= 1e-12);
    }

    #[test]
    fn lyapunov_hand_derived_oscillator() {
        // For A = [[0, 1], [-4, -2]] and Q = diag(0, 1), equating entries
        // of A P + P A' + Q = 0 gives p12 = 0, p22 = 1/4, p11 = 1/16.
        let a = dmatrix![0.0, 1.0; -4.0, -2.0];
        let q = dmatrix![0.0, 0.0; 0.0, 1.0];
        let p = solve_lyapunov(&a, &q).unwrap();
        assert!(max_diff(&p, &dmatrix![0.0625, 0.0; 0.0, 0.25]) <= 1e-12);
    }

    #[test]
    fn lyapunov_rejects_eigenvalue_collision() {
        // diag(1, -1) has an eigenvalue pair summing to zero.
        let a = dmatrix![1.0, 0.0; 0.0, -1.0];
        let q = DMatrix::identity(2, 2);
        assert!(matches!(
            solve_lyapunov(&a, &q),
            Err(Error::NoUniqueSolution)
        ));
    }

    #[test]
    fn lyapunov_random_stable_models_have_tiny_residuals() {
        let mut rng = ChaCha8Rng::seed_from_u64(20240811);
        for case in 0..25 {
            let model = crate::testutil::random_stable_model(&mut rng, 1 + case % 4);
            let ps = model.phase_space();
            let q = &ps.bn * ps.bn.transpose();
            let p = solve_lyapunov(&ps.a, &q).unwrap();
            let residual = util::max_abs(&(&ps.a * &p + &p * ps.a.transpose() + &q));
            assert!(
                residual <= 1e-10 * util::max_abs(&q).max(1.0),
                "case {case}: residual {residual:.3e}"
            );
            // The invariant covariance of a pervasively damped model is
            // positive definite.
            assert!(util::min_symmetric_eigenvalue(&p) > 0.0);
        }
    }

    #[test]
    fn controllability_examples() {
        let a = dmatrix![0.0, 1.0; -1.0, -1.0];
        let b = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        assert!(is_controllable(&a, &b));

        // Input aligned with an invariant subspace is not controllable.
        let a = DMatrix::<f64>::identity(2, 2);
        let b = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        assert!(!is_controllable(&a, &b));

        assert!(!is_controllable(&a, &DMatrix::zeros(2, 1)));
    }

    #[test]
    fn damping_pair_of_unit_oscillator_is_controllable() {
        let pair_a = dmatrix![0.0, 1.0; -1.0, 0.0];
        let pair_b = dmatrix![0.0, 0.0; 0.0, -1.0];
        assert!(is_controllable(&pair_a, &pair_b));
    }

    #[test]
    fn spectral_abscissa_examples() {
        assert!((spectral_abscissa(&dmatrix![0.0, 1.0; -1.0, -1.0]) + 0.5).abs() <= 1e-12);
        assert!((spectral_abscissa(&(-DMatrix::<f64>::identity(2, 2))) + 1.0).abs() <= 1e-12);
        assert!(spectral_abscissa(&dmatrix![0.0, 1.0; -1.0, 0.0]).abs() <= 1e-12);
    }

    #[test]
    fn stationary_report_for_unit_oscillator() {
        let report = invariant_gaussian(&unit_oscillator()).unwrap();
        assert!(report.stable);
        assert!(report.controllable);
        assert!(report.pervasive_damping);
        assert!(report.fd_holds);
        assert!(report.reversible);
        assert!((report.spectral_abscissa + 0.5).abs() <= 1e-12);
        let inv = report.invariant.unwrap();
        assert!(max_diff(inv.cov(), &(0.5 * DMatrix::identity(2, 2))) <= 1e-10);
    }

    #[test]
    fn fd_mismatch_does_not_remove_invariant() {
        // Same dynamics, but the model claims T = 1: the invariant
        // covariance is still I/2, it just is not Boltzmann at T = 1.
        let model = unit_oscillator().with_temperature(1.0).unwrap();
        let report = invariant_gaussian(&model).unwrap();
        assert!(!report.fd_holds);
        assert!(!report.reversible);
        let inv = report.invariant.unwrap();
        assert!(max_diff(inv.cov(), &(0.5 * DMatrix::identity(2, 2))) <= 1e-10);
    }

    #[test]
    fn undamped_oscillator_has_no_invariant() {
        let model = OscillatorModel::scalar(1.0, 0.0, 1.0, 1.0, 1.0).unwrap();
        let report = invariant_gaussian(&model).unwrap();
        assert!(!report.stable);
        assert!(!report.pervasive_damping);
        assert!(report.controllable, "noise still reaches every direction");
        assert!(report.spectral_abscissa.abs() <= 1e-12);
        assert!(report.invariant.is_none());
    }

    #[test]
    fn reversibility_requires_symmetric_positive_friction() {
        assert!(is_reversible(&unit_oscillator(), 0.5));
        assert!(!is_reversible(&unit_oscillator(), 1.0));

        // Skew coupling keeps FD but breaks reversibility.
        let model = OscillatorModel::new(
            DMatrix::identity(2, 2),
            dmatrix![1.0, 1.0; -1.0, 1.0],
            DMatrix::identity(2, 2),
            PotentialSpec::Quadratic(DMatrix::identity(2, 2)),
            0.5,
        )
        .unwrap();
        assert!(model.check_fd(0.5).holds);
        assert!(!is_reversible(&model, 0.5));
    }

    #[test]
    fn reversibility_of_rings_follows_friction_definiteness() {
        let eye_rows = |n: usize| -> Vec<Vec<f64>> {
            (0..n)
                .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
                .collect()
        };
        // Positive definite ring friction with noise chosen to satisfy
        // Sigma Sigma' = 2 k T B: reversible.
        let b = {
            let model = OscillatorModel::ring(
                &[1.0; 3],
                2.0,
                0.5,
                PotentialSpec::Quadratic(DMatrix::identity(3, 3)),
                &eye_rows(3),
                0.5,
            )
            .unwrap();
            model.b().clone()
        };
        let sigma = (2.0 * 0.5 * &b).cholesky().unwrap().l();
        let model = OscillatorModel::new(
            DMatrix::identity(3, 3),
            b,
            sigma,
            PotentialSpec::Quadratic(DMatrix::identity(3, 3)),
            0.5,
        )
        .unwrap();
        assert!(is_reversible(&model, 0.5));

        // A ring with a zero circulant eigenvalue (beta = 1, gamma = 1/2,
        // n = 4) is not reversible for any nonsingular noise.
        let model = OscillatorModel::ring(
            &[1.0; 4],
            1.0,
            0.5,
            PotentialSpec::Quadratic(DMatrix::identity(4, 4)),
            &eye_rows(4),
            0.5,
        )
        .unwrap();
        assert!(!is_reversible(&model, 0.5));
    }

    #[test]
    fn steady_feedback_for_eightfold_cooling() {
        let fb = design_steady_feedback(&unit_oscillator(), 0.5, 1.0 / 16.0).unwrap();
        assert_eq!(fb.u, dmatrix![7.0]);
        assert_eq!(fb.power, 49.0 / 16.0);
        assert!(fb.certified_optimal);
        // Cross-check against the friction-proportional form
        // U = (T - T_eff) / T_eff * B available when FD holds.
        assert_eq!(
            fb.u,
            (0.5 - 1.0 / 16.0) / (1.0 / 16.0) * unit_oscillator().b()
        );
    }

    #[test]
    fn steady_feedback_trivial_and_intermediate_targets() {
        let fb = design_steady_feedback(&unit_oscillator(), 0.5, 0.5).unwrap();
        assert_eq!(fb.u, dmatrix![0.0]);
        assert_eq!(fb.power, 0.0);

        let fb = design_steady_feedback(&unit_oscillator(), 0.5, 0.25).unwrap();
        assert_eq!(fb.u, dmatrix![1.0]);
    }

    #[test]
    fn steady_feedback_rejects_heating_and_nonsense() {
        assert!(matches!(
            design_steady_feedback(&unit_oscillator(), 0.5, 1.0),
            Err(Error::HeatingNotCooling { .. })
        ));
        assert!(matches!(
            design_steady_feedback(&unit_oscillator(), 0.5, 0.0),
            Err(Error::HeatingNotCooling { .. })
        ));
        assert!(matches!(
            design_steady_feedback(&unit_oscillator(), 0.5, -1.0),
            Err(Error::HeatingNotCooling { .. })
        ));
    }

    #[test]
    fn steady_feedback_gain_is_invariant_under_noise_temperature_scaling() {
        // Scaling Sigma -> c Sigma, T -> c^2 T, T_eff -> c^2 T_eff leaves
        // the designed gain unchanged.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let c: f64 = rng.gen_range(0.2..3.0);
            let t: f64 = rng.gen_range(0.5..2.0);
            let t_eff: f64 = t * rng.gen_range(0.05..1.0);
            let base = OscillatorModel::scalar(1.0, 1.0, 1.0, 1.0, t).unwrap();
            let scaled = OscillatorModel::scalar(1.0, 1.0, 1.0, c, c * c * t).unwrap();
            let fb1 = design_steady_feedback(&base, t, t_eff).unwrap();
            let fb2 = design_steady_feedback(&scaled, c * c * t, c * c * t_eff).unwrap();
            assert!(
                max_diff(&fb1.u, &fb2.u) <= 1e-9 * util::max_abs(&fb1.u).max(1.0),
                "c = {c}, T = {t}, T_eff = {t_eff}"
            );
        }
    }

    #[test]
    fn designed_feedback_satisfies_modified_fd() {
        let model = unit_oscillator();
        let fb = design_steady_feedback(&model, 0.5, 1.0 / 16.0).unwrap();
        let check = verify_fd2(&model, &fb.u, 0.5, 1.0 / 16.0);
        assert!(check.holds);
        assert_eq!(util::max_abs(&check.residual), 0.0);
    }

    #[test]
    fn verify_fd2_flags_wrong_gains() {
        let model = unit_oscillator();
        let check = verify_fd2(&model, &dmatrix![3.0], 0.5, 1.0 / 16.0);
        assert!(!check.holds);
        // lhs = (7/8) * 1, rhs = (1/16) * 6 = 3/8, residual = 1/2.
        assert!((check.residual[(0, 0)] - 0.5).abs() <= 1e-15);
    }

    #[test]
    fn gaussian_kl_examples() {
        let id2 = GaussianState::centered(DMatrix::identity(2, 2)).unwrap();
        let half = GaussianState::centered(0.5 * DMatrix::identity(2, 2)).unwrap();
        let sixteenth = GaussianState::centered((1.0 / 16.0) * DMatrix::identity(2, 2)).unwrap();

        assert_eq!(gaussian_kl(&id2, &id2).unwrap(), 0.0);

        // D(N(0, I) || N(0, I/2)) = (2*2 - 2 - 2 ln 2) / 2 = 1 - ln 2.
        let kl = gaussian_kl(&id2, &half).unwrap();
        assert!((kl - (1.0 - std::f64::consts::LN_2)).abs() < 1e-14);
        assert!((kl - 0.3068528194400547).abs() < 1e-13);

        // D(N(0, I/2) || N(0, I/16)) = (16 - 2 - ln 64 + 0) / 2.
        let kl = gaussian_kl(&half, &sixteenth).unwrap();
        assert!((kl - (14.0 - 64.0_f64.ln()) / 2.0).abs() < 1e-13);
        assert!((kl - 4.920558458320164).abs() < 1e-12);
    }

    #[test]
    fn gaussian_kl_mean_shift_term() {
        let p = GaussianState::new(nalgebra::dvector![1.0, 0.0], DMatrix::identity(2, 2)).unwrap();
        let q = GaussianState::centered(DMatrix::identity(2, 2)).unwrap();
        // Equal covariances, mean offset e1: D = |offset|^2 / 2 = 1/2.
        assert!((gaussian_kl(&p, &q).unwrap() - 0.5).abs() < 1e-14);
    }

    #[test]
    fn gaussian_kl_nonnegative_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..100 {
            let mut rand_spd = |d: usize| {
                let r = DMatrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0_f64));
                &r * r.transpose() + 0.1 * DMatrix::identity(d, d)
            };
            let p = GaussianState::centered(rand_spd(3)).unwrap();
            let q = GaussianState::centered(rand_spd(3)).unwrap();
            let kl = gaussian_kl(&p, &q).unwrap();
            assert!(kl >= 0.0);
        }
    }

    #[test]
    fn gaussian_kl_degenerate_cases() {
        let ok = GaussianState::centered(DMatrix::identity(2, 2)).unwrap();
        let singular = GaussianState::centered(dmatrix![1.0, 0.0; 0.0, 0.0]).unwrap();
        assert!(gaussian_kl(&ok, &singular).is_err());
        assert_eq!(gaussian_kl(&singular, &ok).unwrap(), f64::INFINITY);
    }

    #[test]
    fn covariance_propagation_fixes_the_invariant() {
        let model = unit_oscillator();
        let ps = model.phase_space();
        let q = &ps.bn * ps.bn.transpose();
        let p0 = 0.5 * DMatrix::identity(2, 2);
        let path = propagate_covariance_const(&ps.a, &q, &p0, 0.0, 5.0, 500).unwrap();
        for cov in path.covs() {
            assert!(max_diff(cov, &p0) <= 1e-13);
        }
    }

    #[test]
    fn covariance_propagation_matches_scalar_decay() {
        // dP/dt = -2P with P(0) = I gives P(1) = e^{-2} I.
        let a = -DMatrix::<f64>::identity(2, 2);
        let q = DMatrix::zeros(2, 2);
        let p0 = DMatrix::identity(2, 2);
        let path = propagate_covariance_const(&a, &q, &p0, 0.0, 1.0, 1000).unwrap();
        let expected = (-2.0_f64).exp() * DMatrix::identity(2, 2);
        assert!(max_diff(path.final_cov(), &expected) <= 1e-9);
        assert_eq!(path.len(), 1001);
        assert_eq!(path.times()[0], 0.0);
        assert_eq!(*path.times().last().unwrap(), 1.0);
    }

    #[test]
    fn covariance_propagation_approaches_lyapunov_solution() {
        let model = unit_oscillator();
        let ps = model.phase_space();
        let q = &ps.bn * ps.bn.transpose();
        let p_inf = solve_lyapunov(&ps.a, &q).unwrap();
        let p0 = 2.0 * DMatrix::identity(2, 2);
        let path = propagate_covariance_const(&ps.a, &q, &p0, 0.0, 50.0, 5000).unwrap();
        assert!(max_diff(path.final_cov(), &p_inf) <= 1e-6);
    }

    #[test]
    fn free_energy_decays_along_uncontrolled_flow() {
        // k T * D(rho_t || rho_B) is non-increasing for a model whose
        // noise balances its friction, here started from covariance 2I.
        let model = unit_oscillator();
        let ps = model.phase_space();
        let q = &ps.bn * ps.bn.transpose();
        let rho_b = model.boltzmann_state(0.5).unwrap();
        let p0 = 2.0 * DMatrix::identity(2, 2);
        let path = propagate_covariance_const(&ps.a, &q, &p0, 0.0, 8.0, 800).unwrap();
        let kt = model.thermal_energy();
        let free_energy: Vec<f64> = path
            .covs()
            .iter()
            .map(|c| {
                kt * gaussian_kl(&GaussianState::centered(c.clone()).unwrap(), &rho_b).unwrap()
            })
            .collect();
        for w in free_energy.windows(2) {
            assert!(
                w[1] <= w[0] + 1e-15,
                "free energy increased: {} -> {}",
                w[0],
                w[1]
            );
        }
        // Log-linear fit has negative slope (exponential decay).
        let n = free_energy.len();
        let xs: Vec<f64> = path.times().to_vec();
        let ys: Vec<f64> = free_energy.iter().map(|f| f.max(1e-300).ln()).collect();
        let xbar = xs.iter().sum::<f64>() / n as f64;
        let ybar = ys.iter().sum::<f64>() / n as f64;
        let slope = xs
            .iter()
            .zip(&ys)
            .map(|(x, y)| (x - xbar) * (y - ybar))
            .sum::<f64>()
            / xs.iter().map(|x| (x - xbar).powi(2)).sum::<f64>();
        assert!(slope < 0.0, "slope = {slope}");
    }

    #[test]
    fn propagation_validates_inputs() {
        let a = DMatrix::<f64>::identity(2, 2);
        let q = DMatrix::<f64>::zeros(2, 2);
        let p0 = DMatrix::<f64>::identity(2, 2);
        assert!(propagate_covariance_const(&a, &q, &p0, 1.0, 0.0, 10).is_err());
        assert!(propagate_covariance_const(&a, &q, &p0, 0.0, 1.0, 0).is_err());
        let bad = DMatrix::<f64>::identity(3, 3);
        assert!(propagate_covariance_const(&a, &q, &bad, 0.0, 1.0, 10).is_err());
    }

    #[test]
    fn covariance_csv_round_trip() {
        let times = vec![0.0, 0.5, 1.0];
        let covs = vec![
            dmatrix![1.0, 0.25; 0.25, 2.0],
            dmatrix![0.5, 0.125; 0.125, 1.0],
            dmatrix![1.0 / 3.0, 0.1; 0.1, 0.75],
        ];
        let mut buf = Vec::new();
        write_covariance_csv(&times, &covs, &mut buf).unwrap();
        let (t2, c2) = read_covariance_csv(buf.as_slice()).unwrap();
        assert_eq!(times, t2);
        assert_eq!(covs, c2);
        assert!(read_covariance_csv("t,P_1_1,P_1_2\n0,1,2\n".as_bytes()).is_err());
        assert!(write_covariance_csv(&times, &covs[..2], Vec::new()).is_err());
    }
}
