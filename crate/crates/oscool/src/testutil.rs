//! Helpers shared by the crate's unit tests.

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::model::{OscillatorModel, PotentialSpec};

/// Single oscillator with unit mass, friction, stiffness and noise at
/// temperature 1/2 — the worked example used throughout the test suite.
/// Its noise satisfies fluctuation–dissipation at T = 1/2, its phase-space
/// drift is `[[0, 1], [-1, -1]]`, and its invariant covariance is `I/2`.
pub(crate) fn unit_oscillator() -> OscillatorModel {
    OscillatorModel::scalar(1.0, 1.0, 1.0, 1.0, 0.5).unwrap()
}

/// Componentwise max-norm distance between two matrices.
pub(crate) fn max_diff(a: &nalgebra::DMatrix<f64>, b: &nalgebra::DMatrix<f64>) -> f64 {
    (a - b).iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

/// Random `n`-dof model guaranteed stable: symmetric positive definite
/// mass and stiffness, friction with positive definite symmetric part
/// (plus a random skew part), and well-conditioned noise.
pub(crate) fn random_stable_model(rng: &mut ChaCha8Rng, n: usize) -> OscillatorModel {
    let mut rand_mat = |n: usize| DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0_f64));
    let r1 = rand_mat(n);
    let m = &r1 * r1.transpose() + DMatrix::identity(n, n);
    let r2 = rand_mat(n);
    let k = &r2 * r2.transpose() + DMatrix::identity(n, n);
    let r3 = rand_mat(n);
    let sym = &r3 * r3.transpose() + DMatrix::identity(n, n);
    let r4 = rand_mat(n);
    let skew = 0.5 * (&r4 - r4.transpose());
    let b = sym + skew;
    let sigma = rand_mat(n) + 3.0 * DMatrix::identity(n, n);
    OscillatorModel::new(m, b, sigma, PotentialSpec::Quadratic(k), 1.0).unwrap()
}
