//! Trajectory generation: forward causal recursion, backward anti-causal
//! recursion, shared output equation.
//!
//! The per-step mode labels are drawn i.i.d. first, then the causal chain is
//! rolled forward from `x_c(0)`, the anti-causal chain backward from
//! `x_a(T+1)`, and finally the outputs are assembled. The draw order is part
//! of the determinism contract: labels (causal then anti-causal), causal
//! process noise for t = 1..T, anti-causal process noise for t = T..1,
//! measurement noise for t = 1..T, all from one seeded ChaCha8 stream.
//! Identical `(theta, config)` therefore reproduce bit-identical
//! trajectories on every platform.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::{symmetric_part, validate_theta, ModeSequence, ThetaBundle, Trajectory};

/// Simulation settings: horizon, seed, and the two boundary states the
/// recursions start from (zero when unset — the least-informative
/// deterministic choice).
#[derive(Debug, Clone)]
pub struct SimConfig {
    /// Horizon length `T >= 2`.
    pub t_len: usize,
    /// RNG seed; the generator is ChaCha8, so streams are platform-stable.
    pub seed: u64,
    /// Boundary state `x_c(0)`; zero vector when `None`.
    pub x_c_init: Option<DVector<f64>>,
    /// Boundary state `x_a(T+1)`; zero vector when `None`.
    pub x_a_terminal: Option<DVector<f64>>,
}

impl SimConfig {
    /// Configuration with zero boundary states.
    pub fn new(t_len: usize, seed: u64) -> Self {
        SimConfig { t_len, seed, x_c_init: None, x_a_terminal: None }
    }
}

/// Draws the two mode-label sequences: `s_c(t) ~ Categorical(pi_c)` and
/// `s_a(t) ~ Categorical(pi_a)`, i.i.d. over time and independent across
/// chains. Labels are 0-based.
pub fn draw_mode_sequences<R: Rng + ?Sized>(
    theta: &ThetaBundle,
    t_len: usize,
    rng: &mut R,
) -> (ModeSequence, ModeSequence) {
    let s_c = (0..t_len).map(|_| draw_categorical(&theta.pi_c, rng)).collect();
    let s_a = (0..t_len).map(|_| draw_categorical(&theta.pi_a, rng)).collect();
    (s_c, s_a)
}

fn draw_categorical<R: Rng + ?Sized>(pi: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (k, &p) in pi.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    pi.len() - 1 // guard against cumulative rounding below 1
}

/// Square root factor `L` with `L L^T = cov` for sampling.
///
/// Cholesky when the covariance is positive definite; otherwise a symmetric
/// eigendecomposition with negative eigenvalues clamped to zero, which
/// covers the exactly-singular cases (noiseless systems have zero
/// covariances and must simulate without error).
fn psd_factor(cov: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    if let Some(chol) = nalgebra::Cholesky::new(cov.clone()) {
        return Ok(chol.unpack());
    }
    let eig = nalgebra::SymmetricEigen::new(symmetric_part(cov));
    let min = eig.eigenvalues.min();
    if min < crate::model::PSD_EIG_FLOOR {
        return Err(Error::Numerical {
            location: what.to_string(),
            message: format!("covariance not PSD (min eigenvalue {min:.3e})"),
        });
    }
    let sqrt = DVector::from_iterator(
        eig.eigenvalues.len(),
        eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()),
    );
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&sqrt))
}

fn standard_normal_vec<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

/// Simulates one trajectory with ground-truth states and mode labels.
///
/// The causal chain runs `t = 1..T` forward from `x_c(0)`, the anti-causal
/// chain `t = T..1` backward from `x_a(T+1)`, and the output equation adds
/// measurement noise at every step.
pub fn simulate(theta: &ThetaBundle, cfg: &SimConfig) -> Result<Trajectory> {
    validate_theta(theta)?;
    if cfg.t_len < 2 {
        return Err(Error::Invalid(format!("T >= 2 required, got {}", cfg.t_len)));
    }
    let d = &theta.dims;
    for (name, boundary, dim) in [
        ("x_c_init", &cfg.x_c_init, d.n_xc),
        ("x_a_terminal", &cfg.x_a_terminal, d.n_xa),
    ] {
        if let Some(v) = boundary {
            if v.len() != dim {
                return Err(Error::Dimension {
                    context: name.to_string(),
                    expected: format!("dimension {dim}"),
                    got: format!("dimension {}", v.len()),
                });
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let t_len = cfg.t_len;
    let (s_c, s_a) = draw_mode_sequences(theta, t_len, &mut rng);

    let factors_c: Vec<DMatrix<f64>> = theta
        .causal
        .iter()
        .enumerate()
        .map(|(j, m)| psd_factor(&m.sigma, &format!("Sigma_c mode {}", j + 1)))
        .collect::<Result<_>>()?;
    let factors_a: Vec<DMatrix<f64>> = theta
        .anticausal
        .iter()
        .enumerate()
        .map(|(l, m)| psd_factor(&m.sigma, &format!("Sigma_a mode {}", l + 1)))
        .collect::<Result<_>>()?;
    let factor_m = psd_factor(&theta.sigma_m, "Sigma_m")?;

    let mut x_c = vec![DVector::zeros(d.n_xc); t_len];
    let mut state = cfg.x_c_init.clone().unwrap_or_else(|| DVector::zeros(d.n_xc));
    for t in 0..t_len {
        let j = s_c[t];
        state = &theta.causal[j].a * &state
            + &factors_c[j] * standard_normal_vec(d.n_xc, &mut rng);
        x_c[t] = state.clone();
    }

    let mut x_a = vec![DVector::zeros(d.n_xa); t_len];
    let mut state = cfg.x_a_terminal.clone().unwrap_or_else(|| DVector::zeros(d.n_xa));
    for t in (0..t_len).rev() {
        let l = s_a[t];
        state = &theta.anticausal[l].a * &state
            + &factors_a[l] * standard_normal_vec(d.n_xa, &mut rng);
        x_a[t] = state.clone();
    }

    let mut y = Vec::with_capacity(t_len);
    for t in 0..t_len {
        y.push(
            &theta.causal[s_c[t]].c * &x_c[t]
                + &theta.anticausal[s_a[t]].c * &x_a[t]
                + &factor_m * standard_normal_vec(d.n_y, &mut rng),
        );
    }

    Ok(Trajectory { y, x_c: Some(x_c), x_a: Some(x_a), s_c: Some(s_c), s_a: Some(s_a) })
}
