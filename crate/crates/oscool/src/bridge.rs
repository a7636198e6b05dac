//! Finite-horizon optimal cooling via a two-point Riccati boundary-value
//! problem.
//!
//! Steering the phase-space Gaussian from a warm equilibrium to a colder
//! one over `[t0, t1]` with minimum control effort reduces, for quadratic
//! potentials, to a pair of matrix Riccati equations
//!
//! ```text
//! dPi/dt = -A' Pi - Pi A + Pi BBt Pi
//! dH/dt  = -A' H  - H  A - H  BBt H
//! ```
//!
//! coupled only through their boundary values: `Pi(t0) + H(t0)` must equal
//! the initial inverse covariance `S0` and `Pi(t1) + H(t1)` the target
//! inverse covariance `S1`.  The optimal feedback along the way is
//! `u(t) = -G(t) xi` with `G(t) = sigma * Bn' * Pi(t)`, and the product
//! `(Pi(t) + H(t))^-1` is the closed-loop state covariance.
//!
//! The solver shoots on the symmetric matrix `Pi(t0)`: integrate the pair
//! forward with fixed-step RK4, measure the terminal mismatch, and drive
//! it to zero with a damped Newton iteration whose Jacobian is assembled
//! column-by-column from finite differences.
//!
//! Control and noise must share one channel for this reduction, so the
//! solver requires `M^-1 Sigma = sigma I` with scalar `sigma > 0`.

use std::io::{Read, Write};

use nalgebra::DMatrix;

use crate::analysis::{propagate_covariance, CovariancePath};
use crate::error::{Error, Result};
use crate::model::OscillatorModel;
use crate::util;

/// Convergence gate on the max-norm of the terminal boundary mismatch.
pub const SHOOTING_TOLERANCE: f64 = 1e-9;

/// Entry guard during Riccati integration; larger iterates are abandoned.
pub const BLOWUP_THRESHOLD: f64 = 1e12;

/// Newton iteration cap for the shooting solver.
pub const MAX_NEWTON_ITERATIONS: usize = 50;

/// Default number of RK4 grid steps over the horizon.
pub const DEFAULT_STEPS: usize = 1000;

/// Inverse covariances pinned at the two ends of the horizon.
#[derive(Debug, Clone)]
pub struct BoundaryData {
    s0: DMatrix<f64>,
    s1: DMatrix<f64>,
    t0: f64,
    t1: f64,
}

impl BoundaryData {
    /// Validate and store boundary inverse covariances: both must be
    /// symmetric positive definite of equal size, with `t0 < t1`.
    pub fn new(s0: DMatrix<f64>, s1: DMatrix<f64>, t0: f64, t1: f64) -> Result<Self> {
        let d = s0.nrows();
        if s0.ncols() != d || s1.nrows() != d || s1.ncols() != d {
            return Err(Error::InvalidArgument {
                name: "s1",
                reason: "boundary matrices must be square of equal size".into(),
            });
        }
        for (name, s) in [("s0", &s0), ("s1", &s1)] {
            if !util::all_finite(s) || util::symmetry_defect(s) > 1e-12 {
                return Err(Error::InvalidArgument {
                    name: "s0",
                    reason: format!("{name} must be finite and symmetric"),
                });
            }
            if s.clone().cholesky().is_none() {
                return Err(Error::SingularCovariance {
                    context: "boundary inverse covariance",
                });
            }
        }
        if !(t1 > t0) || !t0.is_finite() || !t1.is_finite() {
            return Err(Error::InvalidArgument {
                name: "t1",
                reason: format!("need t0 < t1, got [{t0}, {t1}]"),
            });
        }
        let mut s0 = s0;
        let mut s1 = s1;
        util::symmetrize(&mut s0);
        util::symmetrize(&mut s1);
        Ok(Self { s0, s1, t0, t1 })
    }

    pub fn s0(&self) -> &DMatrix<f64> {
        &self.s0
    }

    pub fn s1(&self) -> &DMatrix<f64> {
        &self.s1
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn t1(&self) -> f64 {
        self.t1
    }
}

/// Right-hand sides of the Riccati pair at `(pi, hh)`.
pub fn riccati_rhs(
    a: &DMatrix<f64>,
    bbt: &DMatrix<f64>,
    pi: &DMatrix<f64>,
    hh: &DMatrix<f64>,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let at = a.transpose();
    let d_pi = -&at * pi - pi * a + pi * bbt * pi;
    let d_hh = -&at * hh - hh * a - hh * bbt * hh;
    (d_pi, d_hh)
}

fn pi_rhs(a: &DMatrix<f64>, bbt: &DMatrix<f64>, pi: &DMatrix<f64>) -> DMatrix<f64> {
    -a.transpose() * pi - pi * a + pi * bbt * pi
}

fn hh_rhs(a: &DMatrix<f64>, bbt: &DMatrix<f64>, hh: &DMatrix<f64>) -> DMatrix<f64> {
    -a.transpose() * hh - hh * a - hh * bbt * hh
}

/// The Riccati pair on a uniform time grid.
#[derive(Debug, Clone)]
pub struct RiccatiPath {
    times: Vec<f64>,
    pi: Vec<DMatrix<f64>>,
    hh: Vec<DMatrix<f64>>,
}

impl RiccatiPath {
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn pi(&self) -> &[DMatrix<f64>] {
        &self.pi
    }

    pub fn hh(&self) -> &[DMatrix<f64>] {
        &self.hh
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Integrate the Riccati pair forward from `(pi0, h0)` over `[t0, t1]`
/// with `steps` fixed RK4 steps, symmetrizing after every step.
///
/// Iterates whose largest entry passes [`BLOWUP_THRESHOLD`] abort with
/// [`Error::RiccatiBlowUp`]; the guard is also applied to the initial
/// values.
pub fn integrate_pair(
    a: &DMatrix<f64>,
    bbt: &DMatrix<f64>,
    pi0: &DMatrix<f64>,
    h0: &DMatrix<f64>,
    t0: f64,
    t1: f64,
    steps: usize,
) -> Result<RiccatiPath> {
    let d = a.nrows();
    if a.ncols() != d
        || bbt.nrows() != d
        || bbt.ncols() != d
        || pi0.nrows() != d
        || pi0.ncols() != d
        || h0.nrows() != d
        || h0.ncols() != d
    {
        return Err(Error::InvalidArgument {
            name: "pi0",
            reason: "A, BBt, Pi0 and H0 must be square of equal size".into(),
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

    let guard = |m: &DMatrix<f64>, t: f64| -> Result<()> {
        if !util::all_finite(m) {
            return Err(Error::IntegrationDiverged { t });
        }
        let max_entry = util::max_abs(m);
        if max_entry > BLOWUP_THRESHOLD {
            return Err(Error::RiccatiBlowUp { t, max_entry });
        }
        Ok(())
    };

    let mut pi = pi0.clone();
    let mut hh = h0.clone();
    util::symmetrize(&mut pi);
    util::symmetrize(&mut hh);
    guard(&pi, t0)?;
    guard(&hh, t0)?;

    let h = (t1 - t0) / steps as f64;
    let mut times = Vec::with_capacity(steps + 1);
    let mut pis = Vec::with_capacity(steps + 1);
    let mut hhs = Vec::with_capacity(steps + 1);
    times.push(t0);
    pis.push(pi.clone());
    hhs.push(hh.clone());

    for i in 0..steps {
        let t_next = t0 + (i + 1) as f64 * h;

        let k1 = pi_rhs(a, bbt, &pi);
        let k2 = pi_rhs(a, bbt, &(&pi + (0.5 * h) * &k1));
        let k3 = pi_rhs(a, bbt, &(&pi + (0.5 * h) * &k2));
        let k4 = pi_rhs(a, bbt, &(&pi + h * &k3));
        pi += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        util::symmetrize(&mut pi);
        guard(&pi, t_next)?;

        let k1 = hh_rhs(a, bbt, &hh);
        let k2 = hh_rhs(a, bbt, &(&hh + (0.5 * h) * &k1));
        let k3 = hh_rhs(a, bbt, &(&hh + (0.5 * h) * &k2));
        let k4 = hh_rhs(a, bbt, &(&hh + h * &k3));
        hh += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        util::symmetrize(&mut hh);
        guard(&hh, t_next)?;

        times.push(t_next);
        pis.push(pi.clone());
        hhs.push(hh.clone());
    }

    Ok(RiccatiPath {
        times,
        pi: pis,
        hh: hhs,
    })
}

/// Terminal boundary mismatch `Pi(t1) + H(t1) - S1` when the pair starts
/// from `Pi(t0) = pi0`, `H(t0) = S0 - pi0`.
pub fn shooting_residual(
    a: &DMatrix<f64>,
    bbt: &DMatrix<f64>,
    bd: &BoundaryData,
    pi0: &DMatrix<f64>,
    steps: usize,
) -> Result<DMatrix<f64>> {
    let h0 = bd.s0() - pi0;
    let path = integrate_pair(a, bbt, pi0, &h0, bd.t0(), bd.t1(), steps)?;
    let last = path.len() - 1;
    Ok(&path.pi()[last] + &path.hh()[last] - bd.s1())
}

/// A solved finite-horizon cooling problem: the Riccati pair, the gain
/// schedule, the closed-loop covariance flow, and summary figures.
#[derive(Debug, Clone)]
pub struct BridgeSolution {
    path: RiccatiPath,
    pi_derivs: Vec<DMatrix<f64>>,
    gains: Vec<DMatrix<f64>>,
    covariances: CovariancePath,
    a: DMatrix<f64>,
    bbt: DMatrix<f64>,
    sigma: f64,
    /// Expected control cost `int (sigma^2/2) trace(Gbar P Gbar') dt`
    /// with `Gbar = [0 I] Pi(t)` — the relative entropy between the
    /// controlled and the free ensemble path measures.
    pub expected_cost: f64,
    /// `max |P(t1) - S1^-1|`: how far the propagated closed-loop
    /// covariance lands from the target.
    pub terminal_cov_residual: f64,
    /// Converged shooting residual `max |Pi(t1) + H(t1) - S1|`.
    pub boundary_residual: f64,
    /// Newton iterations the shooting solver used.
    pub iterations: usize,
}

impl BridgeSolution {
    /// Uniform time grid over the horizon.
    pub fn times(&self) -> &[f64] {
        self.path.times()
    }

    /// The underlying Riccati pair.
    pub fn path(&self) -> &RiccatiPath {
        &self.path
    }

    /// Feedback gains `G(t_i) = sigma Bn' Pi(t_i)` (`n x 2n`), one per
    /// grid node; the control is `u(t) = -G(t) xi` at acceleration level.
    pub fn gains(&self) -> &[DMatrix<f64>] {
        &self.gains
    }

    /// Closed-loop covariance flow `P(t)` on the same grid.
    pub fn covariances(&self) -> &CovariancePath {
        &self.covariances
    }

    /// Scalar noise channel `sigma` with `M^-1 Sigma = sigma I`.
    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn t0(&self) -> f64 {
        self.path.times()[0]
    }

    pub fn t1(&self) -> f64 {
        *self.path.times().last().expect("non-empty grid")
    }

    /// Gain at an arbitrary time inside the horizon, linearly
    /// interpolated between grid nodes.
    pub fn gain_at(&self, t: f64) -> Result<DMatrix<f64>> {
        let times = self.path.times();
        let t0 = self.t0();
        let t1 = self.t1();
        let span = t1 - t0;
        let slack = 1e-9 * span.max(1.0);
        if !(t >= t0 - slack && t <= t1 + slack) || !t.is_finite() {
            return Err(Error::TimeOutOfRange { t, t0, t1 });
        }
        let t = t.clamp(t0, t1);
        let steps = times.len() - 1;
        if steps == 0 {
            return Ok(self.gains[0].clone());
        }
        let h = span / steps as f64;
        let mut i = ((t - t0) / h).floor() as usize;
        if i >= steps {
            i = steps - 1;
        }
        let s = (t - times[i]) / h;
        if s == 0.0 {
            return Ok(self.gains[i].clone());
        }
        Ok((1.0 - s) * &self.gains[i] + s * &self.gains[i + 1])
    }

    /// Closed-loop drift `A - BBt Pi(t)`, smooth in `t`: between grid
    /// nodes `Pi` is interpolated by a cubic Hermite using the exact
    /// derivatives the Riccati equation supplies at the nodes, so the
    /// drift is accurate enough for fourth-order covariance propagation.
    pub fn closed_loop_drift(&self) -> impl Fn(f64) -> DMatrix<f64> + '_ {
        move |t: f64| {
            let pi = self.pi_at(t);
            &self.a - &self.bbt * pi
        }
    }

    /// `Pi(t)` by cubic Hermite interpolation on the grid (clamped to the
    /// horizon).
    pub fn pi_at(&self, t: f64) -> DMatrix<f64> {
        let times = self.path.times();
        let pis = self.path.pi();
        let t0 = self.t0();
        let t1 = self.t1();
        let steps = times.len() - 1;
        let t = t.clamp(t0, t1);
        if steps == 0 {
            return pis[0].clone();
        }
        let h = (t1 - t0) / steps as f64;
        let mut i = ((t - t0) / h).floor() as usize;
        if i >= steps {
            i = steps - 1;
        }
        let s = (t - times[i]) / h;
        if s == 0.0 {
            return pis[i].clone();
        }
        let (s2, s3) = (s * s, s * s * s);
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        h00 * &pis[i]
            + (h10 * h) * &self.pi_derivs[i]
            + h01 * &pis[i + 1]
            + (h11 * h) * &self.pi_derivs[i + 1]
    }
}

/// Solve the cooling problem between Boltzmann states: steer the model
/// from equilibrium at `temp` to equilibrium at `temp_eff` over
/// `[t0, t1]`.  Requires a quadratic potential, a scalar noise channel,
/// and `0 < temp_eff <= temp`.
pub fn solve_bridge(
    model: &OscillatorModel,
    temp: f64,
    temp_eff: f64,
    t0: f64,
    t1: f64,
    steps: usize,
) -> Result<BridgeSolution> {
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
    let s0 = model.boltzmann_inverse_cov(temp)?;
    let s1 = model.boltzmann_inverse_cov(temp_eff)?;
    let bd = BoundaryData::new(s0, s1, t0, t1)?;
    solve_bridge_between(model, &bd, steps)
}

/// Solve the steering problem between arbitrary centered Gaussians given
/// as boundary inverse covariances.  Requires a quadratic potential and a
/// scalar noise channel.
pub fn solve_bridge_between(
    model: &OscillatorModel,
    bd: &BoundaryData,
    steps: usize,
) -> Result<BridgeSolution> {
    if model.potential().quadratic_stiffness().is_none() {
        return Err(Error::UnsupportedPotential {
            operation: "solve_bridge",
        });
    }
    if steps == 0 {
        return Err(Error::InvalidArgument {
            name: "steps",
            reason: "need at least one step".into(),
        });
    }
    let sigma = scalar_noise_channel(model)?;
    let ps = model.phase_space();
    let d = ps.a.nrows();
    if bd.s0().nrows() != d {
        return Err(Error::InvalidArgument {
            name: "bd",
            reason: format!(
                "boundary dimension {} does not match state dimension {d}",
                bd.s0().nrows()
            ),
        });
    }
    let bbt = &ps.bn * ps.bn.transpose();

    let (path, boundary_residual, iterations) = shoot(&ps.a, &bbt, bd, steps)?;

    let n = model.n();
    let gains: Vec<DMatrix<f64>> = path
        .pi()
        .iter()
        .map(|pi| sigma * ps.bn.transpose() * pi)
        .collect();
    let pi_derivs: Vec<DMatrix<f64>> = path.pi().iter().map(|pi| pi_rhs(&ps.a, &bbt, pi)).collect();

    let p0 = bd
        .s0()
        .clone()
        .cholesky()
        .expect("validated positive definite in BoundaryData")
        .inverse();
    let target = bd
        .s1()
        .clone()
        .cholesky()
        .expect("validated positive definite in BoundaryData")
        .inverse();

    // Closed-loop covariance flow under the schedule.  Pi between nodes is
    // Hermite-interpolated from node values and exact node derivatives so
    // the half-step drift evaluations keep RK4 accuracy.
    let drift = |t: f64| -> DMatrix<f64> {
        let pi = hermite_pi(path.times(), path.pi(), &pi_derivs, t);
        &ps.a - &bbt * pi
    };
    let covariances = propagate_covariance(drift, &bbt, &p0, bd.t0(), bd.t1(), steps)?;
    let terminal_cov_residual = util::max_abs(&(covariances.final_cov() - &target));

    // Expected control cost: quadrature of (sigma^2 / 2) trace(Gbar P
    // Gbar') over the grid, Gbar = [0 I] Pi.  Composite Simpson keeps the
    // quadrature error fourth order in the step, matching the integrator,
    // so refining the grid leaves the estimate stable at full precision.
    let h = (bd.t1() - bd.t0()) / steps as f64;
    let rates: Vec<f64> = path
        .pi()
        .iter()
        .zip(covariances.covs())
        .map(|(pi, p)| {
            let gbar = pi.rows(n, n);
            0.5 * sigma * sigma * (gbar * p * gbar.transpose()).trace()
        })
        .collect();
    let expected_cost = composite_simpson(&rates, h);

    Ok(BridgeSolution {
        path,
        pi_derivs,
        gains,
        covariances,
        a: ps.a,
        bbt,
        sigma,
        expected_cost,
        terminal_cov_residual,
        boundary_residual,
        iterations,
    })
}

/// Extract the scalar `sigma` with `M^-1 Sigma = sigma I`, or fail.
fn scalar_noise_channel(model: &OscillatorModel) -> Result<f64> {
    let minv_sigma = model
        .m()
        .clone()
        .cholesky()
        .expect("mass matrix validated positive definite at construction")
        .solve(model.sigma());
    let sigma = minv_sigma[(0, 0)];
    let n = minv_sigma.nrows();
    let tol = 1e-10 * sigma.abs().max(1.0);
    for i in 0..n {
        for j in 0..n {
            let want = if i == j { sigma } else { 0.0 };
            if (minv_sigma[(i, j)] - want).abs() > tol {
                return Err(Error::NoiseChannelNotScalar);
            }
        }
    }
    if !(sigma > 0.0) {
        return Err(Error::NoiseChannelNotScalar);
    }
    Ok(sigma)
}

fn hermite_pi(
    times: &[f64],
    pis: &[DMatrix<f64>],
    derivs: &[DMatrix<f64>],
    t: f64,
) -> DMatrix<f64> {
    let steps = times.len() - 1;
    let t0 = times[0];
    let t1 = times[steps];
    let t = t.clamp(t0, t1);
    if steps == 0 {
        return pis[0].clone();
    }
    let h = (t1 - t0) / steps as f64;
    let mut i = ((t - t0) / h).floor() as usize;
    if i >= steps {
        i = steps - 1;
    }
    let s = (t - times[i]) / h;
    if s == 0.0 {
        return pis[i].clone();
    }
    let (s2, s3) = (s * s, s * s * s);
    let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
    let h10 = s3 - 2.0 * s2 + s;
    let h01 = -2.0 * s3 + 3.0 * s2;
    let h11 = s3 - s2;
    h00 * &pis[i] + (h10 * h) * &derivs[i] + h01 * &pis[i + 1] + (h11 * h) * &derivs[i + 1]
}

/// Composite Simpson quadrature over uniformly spaced samples.  An odd
/// interval count closes with the 3/8 rule so every panel stays fourth
/// order; a single interval falls back to the trapezoid.
fn composite_simpson(values: &[f64], h: f64) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let intervals = n - 1;
    if intervals == 1 {
        return 0.5 * h * (values[0] + values[1]);
    }
    let (simpson_end, mut total) = if intervals.is_multiple_of(2) {
        (intervals, 0.0)
    } else {
        // Simpson 3/8 on the last three intervals.
        let k = intervals - 3;
        let tail =
            3.0 * h / 8.0 * (values[k] + 3.0 * values[k + 1] + 3.0 * values[k + 2] + values[k + 3]);
        (k, tail)
    };
    if simpson_end > 0 {
        let mut acc = values[0] + values[simpson_end];
        let mut i = 1;
        while i < simpson_end {
            acc += 4.0 * values[i];
            if i + 1 < simpson_end {
                acc += 2.0 * values[i + 1];
            }
            i += 2;
        }
        total += h / 3.0 * acc;
    }
    total
}

/// Newton shooting on `Pi(t0)`.  Returns the converged pair path, the
/// final residual max-norm, and the iteration count.
fn shoot(
    a: &DMatrix<f64>,
    bbt: &DMatrix<f64>,
    bd: &BoundaryData,
    steps: usize,
) -> Result<(RiccatiPath, f64, usize)> {
    let d = a.nrows();
    let sym_dim = d * (d + 1) / 2;

    let residual_of =
        |pi0: &DMatrix<f64>| -> Result<DMatrix<f64>> { shooting_residual(a, bbt, bd, pi0, steps) };

    let mut pi0 = DMatrix::zeros(d, d);
    let mut residual = residual_of(&pi0).map_err(|_| Error::SolverFailed {
        iterations: 0,
        residual: f64::INFINITY,
    })?;

    let mut iterations = 0;
    loop {
        let res_norm = util::max_abs(&residual);
        if res_norm <= SHOOTING_TOLERANCE {
            let h0 = bd.s0() - &pi0;
            let path = integrate_pair(a, bbt, &pi0, &h0, bd.t0(), bd.t1(), steps)?;
            return Ok((path, res_norm, iterations));
        }
        if iterations >= MAX_NEWTON_ITERATIONS {
            return Err(Error::SolverFailed {
                iterations,
                residual: res_norm,
            });
        }
        iterations += 1;

        // Finite-difference Jacobian over the symmetric parameterization.
        let mut jac = DMatrix::zeros(sym_dim, sym_dim);
        let r_vec = vech(&residual);
        for col in 0..sym_dim {
            let (i, j) = vech_index(d, col);
            let scale = 1e-6 * (1.0 + pi0[(i, j)].abs());
            let mut perturbed = pi0.clone();
            perturbed[(i, j)] += scale;
            perturbed[(j, i)] = perturbed[(i, j)];
            let column = match residual_of(&perturbed) {
                Ok(r) => (vech(&r) - &r_vec) / scale,
                Err(_) => {
                    // Forward step blew up; try the backward difference.
                    let mut back = pi0.clone();
                    back[(i, j)] -= scale;
                    back[(j, i)] = back[(i, j)];
                    let r = residual_of(&back).map_err(|_| Error::SolverFailed {
                        iterations,
                        residual: res_norm,
                    })?;
                    (&r_vec - vech(&r)) / scale
                }
            };
            jac.set_column(col, &column);
        }

        let delta_vec = jac.lu().solve(&(-&r_vec)).ok_or(Error::SolverFailed {
            iterations,
            residual: res_norm,
        })?;
        let delta = unvech(d, &delta_vec);

        // Backtracking line search on the Frobenius norm of the residual.
        let fro = residual.norm();
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let candidate = &pi0 + alpha * &delta;
            match residual_of(&candidate) {
                Ok(r) if r.norm() <= (1.0 - 1e-4 * alpha) * fro => {
                    pi0 = candidate;
                    residual = r;
                    accepted = true;
                    break;
                }
                _ => alpha *= 0.5,
            }
        }
        if !accepted {
            return Err(Error::SolverFailed {
                iterations,
                residual: res_norm,
            });
        }
    }
}

/// Upper-triangle (row-wise) flattening of a symmetric matrix.
fn vech(m: &DMatrix<f64>) -> nalgebra::DVector<f64> {
    let d = m.nrows();
    let mut out = nalgebra::DVector::zeros(d * (d + 1) / 2);
    let mut k = 0;
    for i in 0..d {
        for j in i..d {
            out[k] = m[(i, j)];
            k += 1;
        }
    }
    out
}

fn unvech(d: usize, v: &nalgebra::DVector<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(d, d);
    let mut k = 0;
    for i in 0..d {
        for j in i..d {
            out[(i, j)] = v[k];
            out[(j, i)] = v[k];
            k += 1;
        }
    }
    out
}

/// Matrix indices of the `k`-th upper-triangle slot.
fn vech_index(d: usize, mut k: usize) -> (usize, usize) {
    for i in 0..d {
        let row_len = d - i;
        if k < row_len {
            return (i, i + k);
        }
        k -= row_len;
    }
    unreachable!("vech index out of range")
}

/// Write a gain schedule as CSV: header `t,G_1_1,...,G_n_2n`, one row per
/// grid node, 17-significant-digit floats (lossless for f64).
pub fn write_gains_csv<W: Write>(sol: &BridgeSolution, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let n = sol.gains()[0].nrows();
    let d = sol.gains()[0].ncols();
    let mut header = vec!["t".to_string()];
    for r in 1..=n {
        for c in 1..=d {
            header.push(format!("G_{r}_{c}"));
        }
    }
    w.write_record(&header)?;
    for (t, g) in sol.times().iter().zip(sol.gains()) {
        let mut row = vec![format!("{t:.16e}")];
        for r in 0..n {
            for c in 0..d {
                row.push(format!("{:.16e}", g[(r, c)]));
            }
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::Csv(e.to_string()))?;
    Ok(())
}

/// Read a gain schedule written by [`write_gains_csv`].
pub fn read_gains_csv<R: Read>(input: R) -> Result<(Vec<f64>, Vec<DMatrix<f64>>)> {
    let mut reader = csv::Reader::from_reader(input);
    let headers = reader.headers().map_err(|e| Error::Csv(e.to_string()))?;
    let cols = headers.len();
    if cols < 3 || &headers[0] != "t" {
        return Err(Error::Csv(
            "expected header `t,G_1_1,...` with at least one gain column".into(),
        ));
    }
    // cols - 1 = n * 2n for some integer n.
    let n = (1_usize..)
        .take_while(|n| 2 * n * n < cols)
        .find(|n| 2 * n * n == cols - 1)
        .ok_or_else(|| Error::Csv(format!("{} gain columns is not n x 2n", cols - 1)))?;
    let mut times = Vec::new();
    let mut gains = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Csv(e.to_string()))?;
        if record.len() != cols {
            return Err(Error::Csv(format!(
                "row has {} fields, expected {cols}",
                record.len()
            )));
        }
        let parse = |s: &str| -> Result<f64> {
            s.trim()
                .parse::<f64>()
                .map_err(|e| Error::Csv(format!("bad float {s:?}: {e}")))
        };
        times.push(parse(&record[0])?);
        let mut g = DMatrix::zeros(n, 2 * n);
        for r in 0..n {
            for c in 0..2 * n {
                g[(r, c)] = parse(&record[1 + r * 2 * n + c])?;
            }
        }
        gains.push(g);
    }
    if times.is_empty() {
        return Err(Error::Csv("schedule has no rows".into()));
    }
    Ok((times, gains))
}
