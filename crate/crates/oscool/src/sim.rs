//! Monte Carlo simulation of the controlled oscillator dynamics.
//!
//! The integrator is fixed-step Euler–Maruyama on the phase-space system
//!
//! ```text
//! x' = x + v dt
//! v' = v + M^-1 [ dt (-B v - grad V(x) + u) + sqrt(dt) Sigma zeta ]
//! ```
//!
//! with `u` the applied *force* and `zeta` a standard normal draw per
//! step.  Each trajectory owns an independent, counter-derived random
//! stream, so ensembles are reproducible bit for bit from a single master
//! seed regardless of trajectory count or order.
//!
//! The recorded ensembles carry states, applied controls, and raw noise
//! increments, which is enough to audit the run afterwards: empirical
//! covariances with standard errors, the Girsanov control cost (relative
//! entropy rate of the controlled path law against the free one), a
//! per-trajectory energy ledger, and a lagged-correlation test of
//! time-reversal symmetry.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::ser::SerializeStruct;
use serde::Serialize;

use crate::bridge::BridgeSolution;
use crate::error::{Error, Result};
use crate::model::{GaussianState, OscillatorModel};
use crate::util;

/// Default Euler–Maruyama step size.
pub const DEFAULT_DT: f64 = 1e-3;

/// Feedback law applied during a simulation.
///
/// All variants are linear state feedbacks; the distinction is where the
/// gain comes from and at which level it acts:
///
/// * [`ControlLaw::SteadyFeedback`] applies the *force* `u = -U v` with a
///   constant velocity gain `U`.
/// * [`ControlLaw::Schedule`] follows a finite-horizon solution, whose
///   gains act at acceleration level: the applied force is
///   `u = -M G(t) xi`.
/// * [`ControlLaw::Switched`] follows the schedule until its horizon ends
///   and then holds the steady velocity gain.
#[derive(Debug, Clone)]
pub enum ControlLaw {
    /// No control: the free (possibly equilibrium) dynamics.
    NoControl,
    /// Constant velocity feedback; the matrix is the `n x n` force-level
    /// gain `U` in `u = -U v`.
    SteadyFeedback(DMatrix<f64>),
    /// Time-varying schedule from a solved steering problem.
    Schedule(BridgeSolution),
    /// Schedule during its horizon, then constant velocity feedback.
    Switched {
        schedule: BridgeSolution,
        steady_gain: DMatrix<f64>,
    },
}

impl ControlLaw {
    /// Force-level feedback matrix `F(t)` with `u = -F(t) xi`, or `None`
    /// when the law applies no control.
    fn force_matrix(&self, t: f64, model: &OscillatorModel) -> Result<Option<DMatrix<f64>>> {
        let n = model.n();
        match self {
            ControlLaw::NoControl => Ok(None),
            ControlLaw::SteadyFeedback(u) => {
                if u.nrows() != n || u.ncols() != n {
                    return Err(Error::InvalidArgument {
                        name: "steady_gain",
                        reason: format!(
                            "velocity gain must be {n} x {n}, got {} x {}",
                            u.nrows(),
                            u.ncols()
                        ),
                    });
                }
                let mut f = DMatrix::zeros(n, 2 * n);
                f.view_mut((0, n), (n, n)).copy_from(u);
                Ok(Some(f))
            }
            ControlLaw::Schedule(sol) => {
                let g = sol.gain_at(t)?;
                Ok(Some(model.m() * g))
            }
            ControlLaw::Switched {
                schedule,
                steady_gain,
            } => {
                if t < schedule.t1() {
                    let g = schedule.gain_at(t)?;
                    Ok(Some(model.m() * g))
                } else {
                    ControlLaw::SteadyFeedback(steady_gain.clone()).force_matrix(t, model)
                }
            }
        }
    }

    /// Force this law applies to phase-space state `xi` at time `t`.
    pub fn force(
        &self,
        t: f64,
        model: &OscillatorModel,
        xi: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        let n = model.n();
        if xi.len() != 2 * n {
            return Err(Error::InvalidArgument {
                name: "xi",
                reason: format!("state must have length {}, got {}", 2 * n, xi.len()),
            });
        }
        match self.force_matrix(t, model)? {
            None => Ok(DVector::zeros(n)),
            Some(f) => {
                let mut u = vec![0.0; n];
                apply_negative_feedback(&f, xi.as_slice(), &mut u);
                Ok(DVector::from_vec(u))
            }
        }
    }
}

/// `u = -F xi`, accumulated in plain loops so the optimized ensemble path
/// and the one-off public path produce bit-identical results.
fn apply_negative_feedback(f: &DMatrix<f64>, xi: &[f64], out: &mut [f64]) {
    let (n, d) = f.shape();
    for i in 0..n {
        let mut acc = 0.0;
        for c in 0..d {
            acc += f[(i, c)] * xi[c];
        }
        out[i] = -acc;
    }
}

/// Simulation window, step size, ensemble size, and master seed.
#[derive(Debug, Clone, Serialize)]
pub struct SimConfig {
    pub t0: f64,
    pub t_end: f64,
    pub dt: f64,
    pub n_traj: usize,
    pub seed: u64,
}

impl SimConfig {
    /// Configuration with the default step size [`DEFAULT_DT`].
    pub fn new(t0: f64, t_end: f64, n_traj: usize, seed: u64) -> Self {
        Self {
            t0,
            t_end,
            dt: DEFAULT_DT,
            n_traj,
            seed,
        }
    }

    pub fn with_dt(mut self, dt: f64) -> Self {
        self.dt = dt;
        self
    }

    fn validate(&self) -> Result<usize> {
        if !self.t0.is_finite() || !self.t_end.is_finite() || !(self.t_end > self.t0) {
            return Err(Error::InvalidArgument {
                name: "t_end",
                reason: format!("need finite t0 < t_end, got [{}, {}]", self.t0, self.t_end),
            });
        }
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::InvalidArgument {
                name: "dt",
                reason: format!("step size must be positive and finite, got {}", self.dt),
            });
        }
        if self.n_traj == 0 {
            return Err(Error::InvalidArgument {
                name: "n_traj",
                reason: "need at least one trajectory".into(),
            });
        }
        let steps = ((self.t_end - self.t0) / self.dt).round() as usize;
        if steps == 0 {
            return Err(Error::InvalidArgument {
                name: "dt",
                reason: format!(
                    "step size {} exceeds the horizon {}",
                    self.dt,
                    self.t_end - self.t0
                ),
            });
        }
        Ok(steps)
    }
}

/// Counter-derived per-trajectory seed: a 64-bit finalizer mix of the
/// master seed and the trajectory index, so streams are independent of
/// each other and of evaluation order.
fn trajectory_seed(master: u64, index: u64) -> u64 {
    let mut z = master.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Shared arithmetic for one Euler–Maruyama step; both the public
/// [`em_step`] and the ensemble inner loop run through here so a recorded
/// ensemble can be replayed step for step with exact equality.
struct Stepper<'a> {
    model: &'a OscillatorModel,
    m_inv: DMatrix<f64>,
    stiffness: Option<DMatrix<f64>>,
    dt: f64,
    sqrt_dt: f64,
    grad: Vec<f64>,
    impulse: Vec<f64>,
}

impl<'a> Stepper<'a> {
    fn new(model: &'a OscillatorModel, dt: f64) -> Self {
        let m_inv = model
            .m()
            .clone()
            .cholesky()
            .expect("mass matrix validated positive definite at construction")
            .inverse();
        let n = model.n();
        Self {
            model,
            m_inv,
            stiffness: model.potential().quadratic_stiffness().cloned(),
            dt,
            sqrt_dt: dt.sqrt(),
            grad: vec![0.0; n],
            impulse: vec![0.0; n],
        }
    }

    /// Advance `(x, v) = xi` by one step under force `u` and noise draw
    /// `zeta`, writing the new state into `out`.
    fn step(&mut self, xi: &[f64], u: &[f64], zeta: &[f64], out: &mut [f64]) {
        let n = self.model.n();
        let (x, v) = xi.split_at(n);

        match &self.stiffness {
            Some(k) => {
                for i in 0..n {
                    let mut acc = 0.0;
                    for c in 0..n {
                        acc += k[(i, c)] * x[c];
                    }
                    self.grad[i] = acc;
                }
            }
            None => {
                let g = self
                    .model
                    .potential()
                    .gradient(&DVector::from_column_slice(x));
                self.grad.copy_from_slice(g.as_slice());
            }
        }

        let b = self.model.b();
        let sigma = self.model.sigma();
        for i in 0..n {
            let mut friction = 0.0;
            let mut kick = 0.0;
            for c in 0..n {
                friction += b[(i, c)] * v[c];
                kick += sigma[(i, c)] * zeta[c];
            }
            self.impulse[i] = self.dt * (u[i] - friction - self.grad[i]) + self.sqrt_dt * kick;
        }

        for i in 0..n {
            out[i] = x[i] + self.dt * v[i];
            let mut dv = 0.0;
            for c in 0..n {
                dv += self.m_inv[(i, c)] * self.impulse[c];
            }
            out[n + i] = v[i] + dv;
        }
    }
}

/// One Euler–Maruyama step of the phase-space dynamics under applied
/// force `force` and standard normal draw `zeta`.
pub fn em_step(
    model: &OscillatorModel,
    xi: &DVector<f64>,
    force: &DVector<f64>,
    dt: f64,
    zeta: &DVector<f64>,
) -> Result<DVector<f64>> {
    let n = model.n();
    if xi.len() != 2 * n {
        return Err(Error::InvalidArgument {
            name: "xi",
            reason: format!("state must have length {}, got {}", 2 * n, xi.len()),
        });
    }
    if force.len() != n || zeta.len() != n {
        return Err(Error::InvalidArgument {
            name: "force",
            reason: format!("force and noise must have length {n}"),
        });
    }
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::InvalidArgument {
            name: "dt",
            reason: format!("step size must be positive and finite, got {dt}"),
        });
    }
    let mut stepper = Stepper::new(model, dt);
    let mut out = vec![0.0; 2 * n];
    stepper.step(xi.as_slice(), force.as_slice(), zeta.as_slice(), &mut out);
    Ok(DVector::from_vec(out))
}

/// A simulated ensemble: states on the full time grid plus the applied
/// controls and raw noise draws for every step of every trajectory.
///
/// Storage is flat and trajectory-major; accessors hand out slices into
/// it.  `state_slice(j, k)` is the phase-space state of trajectory `j`
/// at grid time `times()[k]`; `control_slice(j, k)` and `noise_slice(j,
/// k)` belong to the step from `times()[k]` to `times()[k + 1]`.
#[derive(Debug, Clone)]
pub struct TrajectoryEnsemble {
    n: usize,
    n_traj: usize,
    dt: f64,
    times: Vec<f64>,
    states: Vec<f64>,
    controls: Vec<f64>,
    noises: Vec<f64>,
}

impl TrajectoryEnsemble {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn n_traj(&self) -> usize {
        self.n_traj
    }

    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn state_slice(&self, traj: usize, step: usize) -> &[f64] {
        let d = 2 * self.n;
        let start = (traj * self.times.len() + step) * d;
        &self.states[start..start + d]
    }

    pub fn state(&self, traj: usize, step: usize) -> DVector<f64> {
        DVector::from_column_slice(self.state_slice(traj, step))
    }

    pub fn control_slice(&self, traj: usize, step: usize) -> &[f64] {
        let start = (traj * self.steps() + step) * self.n;
        &self.controls[start..start + self.n]
    }

    pub fn noise_slice(&self, traj: usize, step: usize) -> &[f64] {
        let start = (traj * self.steps() + step) * self.n;
        &self.noises[start..start + self.n]
    }

    /// Index of the grid time closest to `t`.
    pub fn step_index_at(&self, t: f64) -> Result<usize> {
        let t0 = self.times[0];
        let t1 = *self.times.last().expect("non-empty grid");
        let slack = 1e-9 * (t1 - t0).max(1.0);
        if !t.is_finite() || t < t0 - slack || t > t1 + slack {
            return Err(Error::TimeOutOfRange { t, t0, t1 });
        }
        let idx = ((t - t0) / self.dt).round() as usize;
        Ok(idx.min(self.steps()))
    }
}

/// Simulate `config.n_traj` independent trajectories from `initial`
/// under `law`.
///
/// Initial states are drawn from `initial` through a matrix square root
/// of its covariance (Cholesky when positive definite, a clamped
/// spectral root otherwise, so degenerate point masses work too).  Per
/// trajectory, the stream consumes `2n` normals for the initial state
/// and `n` per step afterwards.
pub fn simulate_ensemble(
    model: &OscillatorModel,
    initial: &GaussianState,
    law: &ControlLaw,
    config: &SimConfig,
) -> Result<TrajectoryEnsemble> {
    let n = model.n();
    let d = 2 * n;
    if initial.dim() != d {
        return Err(Error::InvalidArgument {
            name: "initial",
            reason: format!(
                "initial state has dimension {}, model needs {d}",
                initial.dim()
            ),
        });
    }
    let steps = config.validate()?;
    let dt = (config.t_end - config.t0) / steps as f64;

    let mut times: Vec<f64> = (0..=steps).map(|k| config.t0 + k as f64 * dt).collect();
    times[steps] = config.t_end;

    // One force matrix per step, shared by every trajectory.
    let mut force_mats: Vec<Option<DMatrix<f64>>> = Vec::with_capacity(steps);
    for &t in &times[..steps] {
        force_mats.push(law.force_matrix(t, model)?);
    }

    let sqrt_cov = covariance_sqrt(initial.cov());
    let mean = initial.mean();

    let mut states = vec![0.0; config.n_traj * (steps + 1) * d];
    let mut controls = vec![0.0; config.n_traj * steps * n];
    let mut noises = vec![0.0; config.n_traj * steps * n];

    let mut stepper = Stepper::new(model, dt);
    let mut xi = vec![0.0; d];
    let mut next = vec![0.0; d];
    let mut u = vec![0.0; n];
    let mut zeta = vec![0.0; n];
    let mut init_draw = vec![0.0; d];

    for j in 0..config.n_traj {
        let mut rng = ChaCha8Rng::seed_from_u64(trajectory_seed(config.seed, j as u64));

        for z in init_draw.iter_mut() {
            *z = StandardNormal.sample(&mut rng);
        }
        for i in 0..d {
            let mut acc = mean[i];
            for c in 0..d {
                acc += sqrt_cov[(i, c)] * init_draw[c];
            }
            xi[i] = acc;
        }
        let traj_base = j * (steps + 1) * d;
        states[traj_base..traj_base + d].copy_from_slice(&xi);

        for k in 0..steps {
            match &force_mats[k] {
                Some(f) => apply_negative_feedback(f, &xi, &mut u),
                None => u.fill(0.0),
            }
            for z in zeta.iter_mut() {
                *z = StandardNormal.sample(&mut rng);
            }
            let rec = (j * steps + k) * n;
            controls[rec..rec + n].copy_from_slice(&u);
            noises[rec..rec + n].copy_from_slice(&zeta);

            stepper.step(&xi, &u, &zeta, &mut next);
            if !next.iter().all(|v| v.is_finite()) {
                return Err(Error::IntegrationDiverged { t: times[k + 1] });
            }
            xi.copy_from_slice(&next);
            let at = traj_base + (k + 1) * d;
            states[at..at + d].copy_from_slice(&xi);
        }
    }

    Ok(TrajectoryEnsemble {
        n,
        n_traj: config.n_traj,
        dt,
        times,
        states,
        controls,
        noises,
    })
}

/// Matrix square root of a covariance: Cholesky factor when positive
/// definite, otherwise a spectral root with negative eigenvalues clamped
/// to zero (covariances are validated PSD, so any negatives are
/// roundoff).
fn covariance_sqrt(cov: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(chol) = cov.clone().cholesky() {
        return chol.l();
    }
    let eig = cov.clone().symmetric_eigen();
    let d = cov.nrows();
    let mut scaled = eig.eigenvectors.clone();
    for c in 0..d {
        let s = eig.eigenvalues[c].max(0.0).sqrt();
        for r in 0..d {
            scaled[(r, c)] *= s;
        }
    }
    scaled
}

/// Sample mean, unbiased sample covariance, and entrywise standard
/// errors of the covariance at one grid time.
#[derive(Debug, Clone)]
pub struct CovarianceEstimate {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub se: DMatrix<f64>,
}

impl Serialize for CovarianceEstimate {
    fn serialize<S: serde::Serializer>(
        &self,
        serializer: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        let mut s = serializer.serialize_struct("CovarianceEstimate", 3)?;
        s.serialize_field("mean", &util::vector_to_vec(&self.mean))?;
        s.serialize_field("cov", &util::matrix_to_rows(&self.cov))?;
        s.serialize_field("se", &util::matrix_to_rows(&self.se))?;
        s.end()
    }
}

/// Empirical covariance across trajectories at grid index `step`.
///
/// The covariance divides by `n_traj - 1`; the standard error of each
/// entry is the spread of the per-trajectory centered products, so it is
/// distribution-free and honest for the `3 sigma` comparisons used in
/// verification.
pub fn empirical_covariance(ens: &TrajectoryEnsemble, step: usize) -> Result<CovarianceEstimate> {
    if ens.n_traj() < 2 {
        return Err(Error::InsufficientTrajectories {
            operation: "empirical_covariance",
            required: 2,
            got: ens.n_traj(),
        });
    }
    if step >= ens.times().len() {
        return Err(Error::InvalidArgument {
            name: "step",
            reason: format!(
                "grid has {} nodes, index {step} is out of range",
                ens.times().len()
            ),
        });
    }
    let d = 2 * ens.n();
    let nt = ens.n_traj();

    let mut mean = DVector::zeros(d);
    for j in 0..nt {
        let s = ens.state_slice(j, step);
        for i in 0..d {
            mean[i] += s[i];
        }
    }
    mean /= nt as f64;

    let mut cov = DMatrix::zeros(d, d);
    let mut se = DMatrix::zeros(d, d);
    for p in 0..d {
        for q in p..d {
            let mut sum = 0.0;
            let mut sumsq = 0.0;
            for j in 0..nt {
                let s = ens.state_slice(j, step);
                let prod = (s[p] - mean[p]) * (s[q] - mean[q]);
                sum += prod;
                sumsq += prod * prod;
            }
            let c = sum / (nt as f64 - 1.0);
            let prod_mean = sum / nt as f64;
            let var = (sumsq / nt as f64 - prod_mean * prod_mean).max(0.0);
            let e = (var / nt as f64).sqrt();
            cov[(p, q)] = c;
            cov[(q, p)] = c;
            se[(p, q)] = e;
            se[(q, p)] = e;
        }
    }
    Ok(CovarianceEstimate { mean, cov, se })
}

/// Girsanov control cost of the whole run: see
/// [`girsanov_cost_between`].
pub fn girsanov_cost(model: &OscillatorModel, ens: &TrajectoryEnsemble) -> Result<(f64, f64)> {
    let t0 = ens.times()[0];
    let t1 = *ens.times().last().expect("non-empty grid");
    girsanov_cost_between(model, ens, t0, t1)
}

/// Monte Carlo estimate (mean, standard error) of the control cost
/// `E[ (1/2) int u' (Sigma Sigma')^-1 u dt ]` over the window
/// `[t_lo, t_hi]`, using the recorded forces.
///
/// This is the relative entropy of the controlled path law with respect
/// to the uncontrolled one, so it can be checked against the planned
/// cost of a schedule.
pub fn girsanov_cost_between(
    model: &OscillatorModel,
    ens: &TrajectoryEnsemble,
    t_lo: f64,
    t_hi: f64,
) -> Result<(f64, f64)> {
    if ens.n_traj() < 2 {
        return Err(Error::InsufficientTrajectories {
            operation: "girsanov_cost",
            required: 2,
            got: ens.n_traj(),
        });
    }
    if !(t_lo < t_hi) || !t_lo.is_finite() || !t_hi.is_finite() {
        return Err(Error::InvalidArgument {
            name: "t_hi",
            reason: format!("need t_lo < t_hi, got [{t_lo}, {t_hi}]"),
        });
    }
    let n = model.n();
    if ens.n() != n {
        return Err(Error::InvalidArgument {
            name: "ens",
            reason: format!("ensemble has {} degrees of freedom, model has {n}", ens.n()),
        });
    }
    let gram = model.sigma() * model.sigma().transpose();
    let gram_inv = gram
        .cholesky()
        .ok_or(Error::SingularCovariance {
            context: "noise gram matrix",
        })?
        .inverse();

    let eps = 1e-9 * ens.dt().max(1.0);
    let window: Vec<usize> = (0..ens.steps())
        .filter(|&k| ens.times()[k] >= t_lo - eps && ens.times()[k + 1] <= t_hi + eps)
        .collect();

    let nt = ens.n_traj();
    let mut sum = 0.0;
    let mut sumsq = 0.0;
    for j in 0..nt {
        let mut cost = 0.0;
        for &k in &window {
            let u = ens.control_slice(j, k);
            let mut quad = 0.0;
            for p in 0..n {
                for q in 0..n {
                    quad += u[p] * gram_inv[(p, q)] * u[q];
                }
            }
            cost += 0.5 * quad * ens.dt();
        }
        sum += cost;
        sumsq += cost * cost;
    }
    let mean = sum / nt as f64;
    let var = (sumsq / nt as f64 - mean * mean).max(0.0);
    let se = (var / (nt as f64 - 1.0)).sqrt();
    Ok((mean, se))
}

/// Pathwise energy bookkeeping over a simulated ensemble.
///
/// Sample means with standard errors for the energy change and the work
/// done on the system, the deterministic fluctuation heat injection, and
/// the per-trajectory closure residual of the discrete energy balance
/// (which also absorbs the realized noise work, so it measures
/// discretization error, not randomness).
#[derive(Debug, Clone, Serialize)]
pub struct EnergyLedger {
    /// Mean Hamiltonian change `H(end) - H(start)`.
    pub delta_energy: f64,
    pub delta_energy_se: f64,
    /// Mean friction plus control work `sum (u - B_sym v)' v dt`.
    pub work: f64,
    pub work_se: f64,
    /// Deterministic heat injection `(T/2) trace(M^-1 Sigma Sigma')`.
    pub heat: f64,
    /// Mean closure residual of the discrete first law.
    pub residual: f64,
    pub residual_se: f64,
    /// Whether any control force was applied during the run.
    pub includes_control_work: bool,
}

/// Audit the discrete first law over the run.
///
/// Per trajectory the residual is `delta H - W - S - Q` with `W` the
/// friction-plus-control work, `S` the realized noise work
/// `sum v' Sigma sqrt(dt) zeta`, and `Q` the Ito heat injection.  For
/// the exact dynamics it vanishes; under Euler–Maruyama it shrinks with
/// the step size, so its mean and standard error certify the
/// integration.
pub fn energy_ledger(model: &OscillatorModel, ens: &TrajectoryEnsemble) -> Result<EnergyLedger> {
    if ens.n_traj() < 2 {
        return Err(Error::InsufficientTrajectories {
            operation: "energy_ledger",
            required: 2,
            got: ens.n_traj(),
        });
    }
    let n = model.n();
    if ens.n() != n {
        return Err(Error::InvalidArgument {
            name: "ens",
            reason: format!("ensemble has {} degrees of freedom, model has {n}", ens.n()),
        });
    }
    let horizon = ens.times().last().expect("non-empty grid") - ens.times()[0];
    let m_inv = model
        .m()
        .clone()
        .cholesky()
        .expect("mass matrix validated positive definite at construction")
        .inverse();
    let gram = model.sigma() * model.sigma().transpose();
    let heat = 0.5 * horizon * (&m_inv * gram).trace();
    let b_sym = 0.5 * (model.b() + model.b().transpose());

    let steps = ens.steps();
    let nt = ens.n_traj();
    let dt = ens.dt();
    let sqrt_dt = dt.sqrt();
    let sigma = model.sigma();

    let hamiltonian = |s: &[f64]| -> f64 {
        let x = DVector::from_column_slice(&s[..n]);
        let v = DVector::from_column_slice(&s[n..]);
        model.hamiltonian(&x, &v)
    };

    let mut acc = [Accumulator::default(); 3];
    let mut any_control = false;
    for j in 0..nt {
        let du = hamiltonian(ens.state_slice(j, steps)) - hamiltonian(ens.state_slice(j, 0));
        let mut work = 0.0;
        let mut noise_work = 0.0;
        for k in 0..steps {
            let s = ens.state_slice(j, k);
            let v = &s[n..];
            let u = ens.control_slice(j, k);
            let zeta = ens.noise_slice(j, k);
            let mut friction = 0.0;
            let mut drive = 0.0;
            let mut kick = 0.0;
            for p in 0..n {
                drive += u[p] * v[p];
                if u[p] != 0.0 {
                    any_control = true;
                }
                for q in 0..n {
                    friction += v[p] * b_sym[(p, q)] * v[q];
                    kick += v[p] * sigma[(p, q)] * zeta[q];
                }
            }
            work += (drive - friction) * dt;
            noise_work += sqrt_dt * kick;
        }
        let residual = du - work - noise_work - heat;
        acc[0].push(du);
        acc[1].push(work);
        acc[2].push(residual);
    }

    let (delta_energy, delta_energy_se) = acc[0].mean_se(nt);
    let (work, work_se) = acc[1].mean_se(nt);
    let (residual, residual_se) = acc[2].mean_se(nt);
    Ok(EnergyLedger {
        delta_energy,
        delta_energy_se,
        work,
        work_se,
        heat,
        residual,
        residual_se,
        includes_control_work: any_control,
    })
}

#[derive(Default, Clone, Copy)]
struct Accumulator {
    sum: f64,
    sumsq: f64,
}

impl Accumulator {
    fn push(&mut self, v: f64) {
        self.sum += v;
        self.sumsq += v * v;
    }

    fn mean_se(&self, count: usize) -> (f64, f64) {
        let mean = self.sum / count as f64;
        let var = (self.sumsq / count as f64 - mean * mean).max(0.0);
        (mean, (var / (count as f64 - 1.0)).sqrt())
    }
}

/// Result of the lagged-correlation time-reversal test.
#[derive(Debug, Clone)]
pub struct LagTestReport {
    /// Effective lag (an integer number of grid steps).
    pub lag: f64,
    /// Mean violation `C(tau) - R C(tau)' R` with `R = diag(I, -I)`.
    pub violation: DMatrix<f64>,
    /// Entrywise standard errors across trajectories.
    pub se: DMatrix<f64>,
    pub max_violation: f64,
    pub max_zscore: f64,
}

impl Serialize for LagTestReport {
    fn serialize<S: serde::Serializer>(
        &self,
        serializer: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        let mut s = serializer.serialize_struct("LagTestReport", 5)?;
        s.serialize_field("lag", &self.lag)?;
        s.serialize_field("violation", &util::matrix_to_rows(&self.violation))?;
        s.serialize_field("se", &util::matrix_to_rows(&self.se))?;
        s.serialize_field("max_violation", &self.max_violation)?;
        s.serialize_field("max_zscore", &self.max_zscore)?;
        s.end()
    }
}

/// Test time-reversal symmetry of a stationary ensemble through the
/// lagged correlation `C(tau) = E[xi(t + tau) xi(t)']`.
///
/// Under reversibility (with velocities flipping sign under reversal)
/// `C(tau) = R C(tau)' R` for `R = diag(I, -I)`.  Each trajectory
/// contributes one time-pooled estimate of the violation, so entries are
/// averaged over independent samples and the standard errors are honest.
/// The ensemble must already be stationary for the pooling to be
/// meaningful.
pub fn reversibility_lag_test(ens: &TrajectoryEnsemble, lag: f64) -> Result<LagTestReport> {
    if ens.n_traj() < 2 {
        return Err(Error::InsufficientTrajectories {
            operation: "reversibility_lag_test",
            required: 2,
            got: ens.n_traj(),
        });
    }
    if !(lag > 0.0) || !lag.is_finite() {
        return Err(Error::InvalidArgument {
            name: "lag",
            reason: format!("lag must be positive and finite, got {lag}"),
        });
    }
    let l = (lag / ens.dt()).round() as usize;
    if l == 0 || l > ens.steps() {
        return Err(Error::InvalidArgument {
            name: "lag",
            reason: format!(
                "lag {lag} maps to {l} grid steps; need between 1 and {}",
                ens.steps()
            ),
        });
    }
    let d = 2 * ens.n();
    let n = ens.n();
    let nt = ens.n_traj();
    let windows = ens.steps() - l + 1;

    let sign = |i: usize| if i < n { 1.0 } else { -1.0 };

    let mut sum: DMatrix<f64> = DMatrix::zeros(d, d);
    let mut sumsq: DMatrix<f64> = DMatrix::zeros(d, d);
    let mut corr: DMatrix<f64> = DMatrix::zeros(d, d);
    for j in 0..nt {
        corr.fill(0.0);
        for k in 0..windows {
            let now = ens.state_slice(j, k);
            let later = ens.state_slice(j, k + l);
            for p in 0..d {
                for q in 0..d {
                    corr[(p, q)] += later[p] * now[q];
                }
            }
        }
        corr /= windows as f64;
        for p in 0..d {
            for q in 0..d {
                let v = corr[(p, q)] - sign(p) * sign(q) * corr[(q, p)];
                sum[(p, q)] += v;
                sumsq[(p, q)] += v * v;
            }
        }
    }

    let mut violation = DMatrix::zeros(d, d);
    let mut se = DMatrix::zeros(d, d);
    let mut max_violation = 0.0_f64;
    let mut max_zscore = 0.0_f64;
    for p in 0..d {
        for q in 0..d {
            let mean = sum[(p, q)] / nt as f64;
            let var = (sumsq[(p, q)] / nt as f64 - mean * mean).max(0.0);
            let e = (var / (nt as f64 - 1.0)).sqrt();
            violation[(p, q)] = mean;
            se[(p, q)] = e;
            max_violation = max_violation.max(mean.abs());
            let z = if e > 0.0 {
                mean.abs() / e
            } else if mean == 0.0 {
                0.0
            } else {
                f64::INFINITY
            };
            max_zscore = max_zscore.max(z);
        }
    }

    Ok(LagTestReport {
        lag: l as f64 * ens.dt(),
        violation,
        se,
        max_violation,
        max_zscore,
    })
}

/// Trajectories read back from CSV: per trajectory, a `(steps + 1) x 2n`
/// state matrix (row per grid time) and a `(steps + 1) x n` control
/// matrix whose final row is zero padding.
#[derive(Debug, Clone)]
pub struct TrajectoryData {
    pub times: Vec<f64>,
    pub states: Vec<DMatrix<f64>>,
    pub controls: Vec<DMatrix<f64>>,
}

/// Write trajectories as CSV rows `t,traj,x_1..x_n,v_1..v_n,u_1..u_n`.
///
/// `limit` caps how many trajectories are written (ensembles can be far
/// larger than any useful CSV).  The final row of each trajectory has no
/// following step, so its control columns are written as zero.
pub fn write_trajectories_csv<W: Write>(
    ens: &TrajectoryEnsemble,
    limit: Option<usize>,
    out: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let n = ens.n();
    let mut header = vec!["t".to_string(), "traj".to_string()];
    for i in 1..=n {
        header.push(format!("x_{i}"));
    }
    for i in 1..=n {
        header.push(format!("v_{i}"));
    }
    for i in 1..=n {
        header.push(format!("u_{i}"));
    }
    w.write_record(&header)?;

    let count = limit.unwrap_or(ens.n_traj()).min(ens.n_traj());
    let zeros = vec![0.0; n];
    for j in 0..count {
        for k in 0..ens.times().len() {
            let mut row = vec![format!("{:.16e}", ens.times()[k]), j.to_string()];
            for v in ens.state_slice(j, k) {
                row.push(format!("{v:.16e}"));
            }
            let u = if k < ens.steps() {
                ens.control_slice(j, k)
            } else {
                &zeros
            };
            for v in u {
                row.push(format!("{v:.16e}"));
            }
            w.write_record(&row)?;
        }
    }
    w.flush().map_err(|e| Error::Csv(e.to_string()))?;
    Ok(())
}

/// Write the applied controls as CSV rows `t,traj,u_1..u_n`, one row
/// per step per trajectory.  `limit` caps how many trajectories are
/// written.
pub fn write_controls_csv<W: Write>(
    ens: &TrajectoryEnsemble,
    limit: Option<usize>,
    out: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let n = ens.n();
    let mut header = vec!["t".to_string(), "traj".to_string()];
    for i in 1..=n {
        header.push(format!("u_{i}"));
    }
    w.write_record(&header)?;
    let count = limit.unwrap_or(ens.n_traj()).min(ens.n_traj());
    for j in 0..count {
        for k in 0..ens.steps() {
            let mut row = vec![format!("{:.16e}", ens.times()[k]), j.to_string()];
            for v in ens.control_slice(j, k) {
                row.push(format!("{v:.16e}"));
            }
            w.write_record(&row)?;
        }
    }
    w.flush().map_err(|e| Error::Csv(e.to_string()))?;
    Ok(())
}

/// Controls read back from CSV: per trajectory, a `steps x n` matrix of
/// applied forces on the shared step-time grid.
#[derive(Debug, Clone)]
pub struct ControlData {
    pub times: Vec<f64>,
    pub controls: Vec<DMatrix<f64>>,
}

/// Read controls written by [`write_controls_csv`].
pub fn read_controls_csv<R: Read>(input: R) -> Result<ControlData> {
    let mut reader = csv::Reader::from_reader(input);
    let headers = reader.headers().map_err(|e| Error::Csv(e.to_string()))?;
    let cols = headers.len();
    if cols < 3 || &headers[0] != "t" || &headers[1] != "traj" {
        return Err(Error::Csv("expected header t,traj,u_1..u_n".into()));
    }
    let n = cols - 2;
    let parse = |s: &str| -> Result<f64> {
        s.trim()
            .parse::<f64>()
            .map_err(|e| Error::Csv(format!("bad float {s:?}: {e}")))
    };
    let mut times: Vec<f64> = Vec::new();
    let mut per_traj: Vec<Vec<f64>> = Vec::new();
    let mut current: Option<usize> = None;
    for record in reader.records() {
        let record = record.map_err(|e| Error::Csv(e.to_string()))?;
        if record.len() != cols {
            return Err(Error::Csv(format!(
                "row has {} fields, expected {cols}",
                record.len()
            )));
        }
        let t = parse(&record[0])?;
        let traj: usize = record[1]
            .trim()
            .parse()
            .map_err(|e| Error::Csv(format!("bad trajectory index {:?}: {e}", &record[1])))?;
        if current != Some(traj) {
            if traj != per_traj.len() {
                return Err(Error::Csv(format!(
                    "trajectory indices must be contiguous from zero, got {traj}"
                )));
            }
            per_traj.push(Vec::new());
            current = Some(traj);
        }
        if traj == 0 {
            times.push(t);
        }
        for i in 0..n {
            per_traj[traj].push(parse(&record[2 + i])?);
        }
    }
    if times.is_empty() {
        return Err(Error::Csv("no control rows".into()));
    }
    let rows = times.len();
    let mut controls = Vec::new();
    for flat in per_traj {
        if flat.len() != rows * n {
            return Err(Error::Csv("trajectories must share one time grid".into()));
        }
        controls.push(DMatrix::from_row_slice(rows, n, &flat));
    }
    Ok(ControlData { times, controls })
}

/// Read trajectories written by [`write_trajectories_csv`].
pub fn read_trajectories_csv<R: Read>(input: R) -> Result<TrajectoryData> {
    let mut reader = csv::Reader::from_reader(input);
    let headers = reader.headers().map_err(|e| Error::Csv(e.to_string()))?;
    let cols = headers.len();
    if cols < 5 || &headers[0] != "t" || &headers[1] != "traj" || (cols - 2) % 3 != 0 {
        return Err(Error::Csv(
            "expected header t,traj,x_1..x_n,v_1..v_n,u_1..u_n".into(),
        ));
    }
    let n = (cols - 2) / 3;

    let parse = |s: &str| -> Result<f64> {
        s.trim()
            .parse::<f64>()
            .map_err(|e| Error::Csv(format!("bad float {s:?}: {e}")))
    };

    let mut times: Vec<f64> = Vec::new();
    let mut rows_per_traj: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    let mut current_traj: Option<usize> = None;
    for record in reader.records() {
        let record = record.map_err(|e| Error::Csv(e.to_string()))?;
        if record.len() != cols {
            return Err(Error::Csv(format!(
                "row has {} fields, expected {cols}",
                record.len()
            )));
        }
        let t = parse(&record[0])?;
        let traj: usize = record[1]
            .trim()
            .parse()
            .map_err(|e| Error::Csv(format!("bad trajectory index {:?}: {e}", &record[1])))?;
        if current_traj != Some(traj) {
            if traj != rows_per_traj.len() {
                return Err(Error::Csv(format!(
                    "trajectory indices must be contiguous from zero, got {traj}"
                )));
            }
            rows_per_traj.push((Vec::new(), Vec::new()));
            current_traj = Some(traj);
        }
        if traj == 0 {
            times.push(t);
        }
        let (states, controls) = &mut rows_per_traj[traj];
        for i in 0..2 * n {
            states.push(parse(&record[2 + i])?);
        }
        for i in 0..n {
            controls.push(parse(&record[2 + 2 * n + i])?);
        }
    }
    if times.is_empty() {
        return Err(Error::Csv("no trajectory rows".into()));
    }
    let rows = times.len();
    let mut states_out = Vec::new();
    let mut controls_out = Vec::new();
    for (states, controls) in rows_per_traj {
        if states.len() != rows * 2 * n {
            return Err(Error::Csv("trajectories must share one time grid".into()));
        }
        states_out.push(DMatrix::from_row_slice(rows, 2 * n, &states));
        controls_out.push(DMatrix::from_row_slice(rows, n, &controls));
    }
    Ok(TrajectoryData {
        times,
        states: states_out,
        controls: controls_out,
    })
}
