//! M-step: closed-form parameter updates given mode weights and state
//! estimates.
//!
//! With assignments and states fixed, the surrogate objective separates and
//! every block has an exact maximizer:
//!
//! - mixing weights: per-mode weight mass divided by `T`;
//! - `A_c(j)`: weighted least squares of `x_c(t)` on `x_c(t-1)` over
//!   `t = 2..T` (the boundary state `x_c(0)` is unobserved);
//! - `A_a(l)`: weighted least squares of `x_a(t)` on `x_a(t+1)` over
//!   `t = 1..T-1`;
//! - `(C_c, C_a)`: one joint least squares across all modes and both
//!   chains, since the measurement residual couples whichever pair of
//!   output maps is active at each step;
//! - noise covariances: weighted averages of the corresponding residual
//!   outer products at the *new* transition/output matrices.
//!
//! Because each update is the exact maximizer of its block, the surrogate
//! evaluated at the new parameters can never fall below its value at the
//! old parameters for the same weights and states. `run_mstep` asserts this
//! invariant (up to accumulation roundoff) and returns an error when it is
//! violated, since that always indicates a numerical defect rather than a
//! modeling choice.
//!
//! Normal-equation solves reuse the guarded Cholesky from the E-step: plain
//! factorization first, escalating diagonal ridge only on failure. Modes
//! with zero weight mass keep their previous parameters (their mixing
//! weight becomes zero) and are reported.

use std::ops::AddAssign;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::estep::{surrogate_q, ModeWeights, SpdFactor};
use crate::model::{symmetric_part, ThetaBundle};

/// Eigenvalue floor of the measurement-covariance estimate, as a fraction
/// of the mean output power per component. Hard-assignment updates refit
/// `Σ_m` from filtered-state residuals, and nothing stops that estimate from
/// collapsing geometrically toward zero once the posterior states can
/// interpolate part of the output space; the floor is anchored to the data —
/// not to the estimate's own trace, which would follow the collapse down —
/// so it stays fixed across iterations and keeps every later density
/// evaluation finite. The value is small enough that a fit started at the
/// truth on noiseless data stays at the truth to well below the fixed-point
/// tolerance; the price is that the surrogate objective becomes extremely
/// sensitive to the floored directions (slope ~ T/floor), which the
/// monotonicity check below absorbs with a conditioning-aware slack.
pub const SIGMA_M_FLOOR_REL: f64 = 1e-12;

/// Condition-number proxy (ratio of extreme `|R_ii|` in a column-pivoted QR
/// of the Gram) above which a normal-equation solve switches to the ridge.
pub const RIDGE_COND_LIMIT: f64 = 1e12;

/// Tikhonov ridge strength for ill-conditioned normal equations, as a
/// fraction of the Gram's mean diagonal.
pub const RIDGE_REL: f64 = 1e-8;

/// What one M-step did, besides producing parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MStepReport {
    /// Causal modes with zero weight mass in the transition regression;
    /// their `A_c`, `Σ_c` were carried over unchanged.
    pub zero_mass_causal: Vec<usize>,
    /// Anti-causal modes with zero weight mass, carried over likewise.
    pub zero_mass_anticausal: Vec<usize>,
    /// Number of normal-equation solves that needed a ridge.
    pub ridge_events: usize,
    /// Surrogate objective at the previous parameters (same weights/states).
    pub q_before: f64,
    /// Surrogate objective at the updated parameters.
    pub q_after: f64,
}

/// Solves `G X = B` for a symmetric PSD Gram matrix `G`, reporting whether
/// a ridge was needed.
/// Solves the normal equations `G X = B` with a rank-revealing factorization.
/// A column-pivoted QR of the Gram exposes near rank deficiency as a ratio of
/// extreme `|R_ii|`; when that exceeds `RIDGE_COND_LIMIT` (or a pivot is
/// exactly zero) the solve falls back to a Tikhonov ridge
/// `G + λI, λ = RIDGE_REL · tr(G)/d`, and reports that it did. Rare modes can
/// legitimately produce tiny Gram eigenvalues, and a plain triangular solve
/// would turn those into enormous garbage coefficients.
fn gram_solve(
    g: &DMatrix<f64>,
    b: &DMatrix<f64>,
    scale_hint: f64,
    location: &str,
) -> Result<(DMatrix<f64>, bool)> {
    let dim = g.nrows();
    let qr = g.clone().col_piv_qr();
    let rdiag = qr.r().map_diagonal(f64::abs);
    let well_posed = rdiag.min() > 0.0 && rdiag.max() / rdiag.min() <= RIDGE_COND_LIMIT;
    if well_posed {
        if let Some(sol) = qr.solve(b) {
            return Ok((sol, false));
        }
    }
    let lambda = RIDGE_REL * g.trace().abs() / dim as f64;
    let mut ridged = g.clone();
    for i in 0..dim {
        ridged[(i, i)] += lambda;
    }
    let f = SpdFactor::new(&ridged, scale_hint, location)?;
    Ok((f.solve_mat(b), true))
}

/// Pushes a nearly-symmetric matrix into the cone `{Σ : Σ ⪰ floor·I}` by a
/// uniform diagonal shift of `max(0, floor − λ_min)`; `floor = 0` is a plain
/// PSD repair. A shift touches nothing when the matrix already satisfies the
/// floor, and — unlike an eigenvalue clamp — involves no eigenvector
/// reconstruction, whose round-off at extreme eigenvalue spread is large
/// enough to corrupt later inverse-weighted residual sums.
fn psd_lift(m: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let mut out = symmetric_part(m);
    let lift = (floor - out.symmetric_eigenvalues().min()).max(0.0);
    if lift > 0.0 {
        for i in 0..out.nrows() {
            out[(i, i)] += lift;
        }
    }
    out
}

/// Runs the M-step. `weights` and the state estimates come from the E-step
/// (`weights = estep.weights`, `x_c = estep.filter.xhat_c_post`,
/// `x_a = estep.filter.xhat_a_post`); they are taken as plain inputs so the
/// update is a pure function of (parameters, data, responsibilities).
pub fn run_mstep(
    theta_prev: &ThetaBundle,
    y: &[DVector<f64>],
    weights: &ModeWeights,
    x_c: &[DVector<f64>],
    x_a: &[DVector<f64>],
) -> Result<(ThetaBundle, MStepReport)> {
    let t_len = y.len();
    let d = theta_prev.dims.clone();
    if t_len < 2 {
        return Err(Error::Invalid("T >= 2 required for transition updates".to_string()));
    }
    if weights.w_c.len() != t_len
        || weights.w_a.len() != t_len
        || x_c.len() != t_len
        || x_a.len() != t_len
    {
        return Err(Error::Dimension {
            context: "M-step inputs".to_string(),
            expected: format!("{t_len} steps in weights and state estimates"),
            got: format!(
                "w_c: {}, w_a: {}, x_c: {}, x_a: {}",
                weights.w_c.len(),
                weights.w_a.len(),
                x_c.len(),
                x_a.len()
            ),
        });
    }

    let q_before = surrogate_q(theta_prev, y, weights, x_c, x_a)?;
    let mut theta = theta_prev.clone();
    let mut ridge_events = 0usize;
    let mut zero_mass_causal = Vec::new();
    let mut zero_mass_anticausal = Vec::new();

    // Mixing weights: average weight mass.
    for j in 0..d.m_c {
        theta.pi_c[j] = weights.w_c.iter().map(|row| row[j]).sum::<f64>() / t_len as f64;
    }
    for l in 0..d.m_a {
        theta.pi_a[l] = weights.w_a.iter().map(|row| row[l]).sum::<f64>() / t_len as f64;
    }

    let state_scale = |xs: &[DVector<f64>]| {
        xs.iter().map(|v| v.norm_squared()).sum::<f64>() / xs.len() as f64
    };
    let scale_c = state_scale(x_c);
    let scale_a = state_scale(x_a);

    // Causal transitions: rows t = 2..T regress x_c(t) on x_c(t-1).
    for j in 0..d.m_c {
        let mut gram = DMatrix::zeros(d.n_xc, d.n_xc);
        let mut cross = DMatrix::zeros(d.n_xc, d.n_xc);
        let mut mass = 0.0;
        for t in 1..t_len {
            let w = weights.w_c[t][j];
            if w <= 0.0 {
                continue;
            }
            gram += w * &x_c[t - 1] * x_c[t - 1].transpose();
            cross += w * &x_c[t - 1] * x_c[t].transpose();
            mass += w;
        }
        if mass <= 0.0 {
            zero_mass_causal.push(j);
            log::warn!("causal mode {} received no transition mass; parameters kept", j + 1);
            continue;
        }
        let (sol, ridged) = gram_solve(&gram, &cross, scale_c, "causal transition update")?;
        ridge_events += ridged as usize;
        theta.causal[j].a = sol.transpose();
        let mut resid_sum = DMatrix::zeros(d.n_xc, d.n_xc);
        for t in 1..t_len {
            let w = weights.w_c[t][j];
            if w <= 0.0 {
                continue;
            }
            let r = &x_c[t] - &theta.causal[j].a * &x_c[t - 1];
            resid_sum += w * &r * r.transpose();
        }
        theta.causal[j].sigma = psd_lift(&(resid_sum / mass), 0.0);
    }

    // Anti-causal transitions: rows t = 1..T-1 regress x_a(t) on x_a(t+1).
    for l in 0..d.m_a {
        let mut gram = DMatrix::zeros(d.n_xa, d.n_xa);
        let mut cross = DMatrix::zeros(d.n_xa, d.n_xa);
        let mut mass = 0.0;
        for t in 0..t_len - 1 {
            let w = weights.w_a[t][l];
            if w <= 0.0 {
                continue;
            }
            gram += w * &x_a[t + 1] * x_a[t + 1].transpose();
            cross += w * &x_a[t + 1] * x_a[t].transpose();
            mass += w;
        }
        if mass <= 0.0 {
            zero_mass_anticausal.push(l);
            log::warn!(
                "anti-causal mode {} received no transition mass; parameters kept",
                l + 1
            );
            continue;
        }
        let (sol, ridged) = gram_solve(&gram, &cross, scale_a, "anti-causal transition update")?;
        ridge_events += ridged as usize;
        theta.anticausal[l].a = sol.transpose();
        let mut resid_sum = DMatrix::zeros(d.n_xa, d.n_xa);
        for t in 0..t_len - 1 {
            let w = weights.w_a[t][l];
            if w <= 0.0 {
                continue;
            }
            let r = &x_a[t] - &theta.anticausal[l].a * &x_a[t + 1];
            resid_sum += w * &r * r.transpose();
        }
        theta.anticausal[l].sigma = psd_lift(&(resid_sum / mass), 0.0);
    }

    // Joint output-map update. Active blocks (modes with any weight mass)
    // form one regressor; inactive modes keep their previous maps.
    let mass_c: Vec<f64> = (0..d.m_c)
        .map(|j| weights.w_c.iter().map(|row| row[j]).sum())
        .collect();
    let mass_a: Vec<f64> = (0..d.m_a)
        .map(|l| weights.w_a.iter().map(|row| row[l]).sum())
        .collect();
    let active_c: Vec<usize> = (0..d.m_c).filter(|&j| mass_c[j] > 0.0).collect();
    let active_a: Vec<usize> = (0..d.m_a).filter(|&l| mass_a[l] > 0.0).collect();
    let dim = active_c.len() * d.n_xc + active_a.len() * d.n_xa;
    let off_c = |slot: usize| slot * d.n_xc;
    let off_a = |slot: usize| active_c.len() * d.n_xc + slot * d.n_xa;

    let mut gram = DMatrix::zeros(dim, dim);
    let mut rhs = DMatrix::zeros(dim, d.n_y);
    for t in 0..t_len {
        for (sc, &j) in active_c.iter().enumerate() {
            let wj = weights.w_c[t][j];
            if wj <= 0.0 {
                continue;
            }
            let xxt = &x_c[t] * x_c[t].transpose();
            gram
                .view_mut((off_c(sc), off_c(sc)), (d.n_xc, d.n_xc))
                .add_assign(&(wj * &xxt));
            rhs.view_mut((off_c(sc), 0), (d.n_xc, d.n_y))
                .add_assign(&(wj * &x_c[t] * y[t].transpose()));
            for (sa, &l) in active_a.iter().enumerate() {
                let w = wj * weights.w_a[t][l];
                if w <= 0.0 {
                    continue;
                }
                let xca = w * &x_c[t] * x_a[t].transpose();
                gram.view_mut((off_c(sc), off_a(sa)), (d.n_xc, d.n_xa)).add_assign(&xca);
                gram.view_mut((off_a(sa), off_c(sc)), (d.n_xa, d.n_xc))
                    .add_assign(&xca.transpose());
            }
        }
        for (sa, &l) in active_a.iter().enumerate() {
            let wl = weights.w_a[t][l];
            if wl <= 0.0 {
                continue;
            }
            gram
                .view_mut((off_a(sa), off_a(sa)), (d.n_xa, d.n_xa))
                .add_assign(&(wl * &x_a[t] * x_a[t].transpose()));
            rhs.view_mut((off_a(sa), 0), (d.n_xa, d.n_y))
                .add_assign(&(wl * &x_a[t] * y[t].transpose()));
        }
    }
    if dim > 0 {
        let (sol, ridged) =
            gram_solve(&gram, &rhs, scale_c.max(scale_a), "joint output-map update")?;
        ridge_events += ridged as usize;
        // sol is (dim x n_y); each block transposed is that mode's map.
        for (sc, &j) in active_c.iter().enumerate() {
            theta.causal[j].c = sol.view((off_c(sc), 0), (d.n_xc, d.n_y)).transpose();
        }
        for (sa, &l) in active_a.iter().enumerate() {
            theta.anticausal[l].c = sol.view((off_a(sa), 0), (d.n_xa, d.n_y)).transpose();
        }
    }

    // Measurement covariance: average residual outer product at the new
    // output maps, over all steps, floored to stay positive definite.
    let mut resid_sum = DMatrix::zeros(d.n_y, d.n_y);
    for t in 0..t_len {
        for j in 0..d.m_c {
            let wj = weights.w_c[t][j];
            if wj <= 0.0 {
                continue;
            }
            for l in 0..d.m_a {
                let w = wj * weights.w_a[t][l];
                if w <= 0.0 {
                    continue;
                }
                let r = &y[t] - &theta.causal[j].c * &x_c[t] - &theta.anticausal[l].c * &x_a[t];
                resid_sum += w * &r * r.transpose();
            }
        }
    }
    let y_power = y.iter().map(|v| v.norm_squared()).sum::<f64>() / (t_len * d.n_y) as f64;
    let floor =
        if y_power > 0.0 { SIGMA_M_FLOOR_REL * y_power } else { f64::MIN_POSITIVE * 1e30 };
    theta.sigma_m = psd_lift(&(resid_sum / t_len as f64), floor);
    let sigma_m_eigs = theta.sigma_m.symmetric_eigenvalues();

    let q_after = surrogate_q(&theta, y, weights, x_c, x_a)?;
    // The surrogate's sensitivity to a floored eigenvalue of Σ̂_m scales
    // like T/λ_min, so round-off in the eigenvalue clamp alone perturbs Q
    // by about T·ε_machine·(λ_max/λ_min). The check must tolerate that, or
    // it would flag healthy runs whose measurement covariance sits on the
    // floor (the usual fixed point when the filter can interpolate part of
    // the output space).
    let kappa = sigma_m_eigs.max() / sigma_m_eigs.min();
    let slack = 1e-10 * q_before.abs().max(1.0) + t_len as f64 * f64::EPSILON * kappa;
    if q_after < q_before - slack {
        return Err(Error::Numerical {
            location: "M-step".to_string(),
            message: format!(
                "surrogate objective decreased within one iteration: {q_before:.6e} -> {q_after:.6e}"
            ),
        });
    }

    let report = MStepReport {
        zero_mass_causal,
        zero_mass_anticausal,
        ridge_events,
        q_before,
        q_after,
    };
    Ok((theta, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estep::run_estep;
    use crate::model::{
        benchmark_system, example1, AntiCausalModeParams, CausalModeParams, Dims,
    };
    use crate::simulate::{simulate, SimConfig};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn rot(deg: f64) -> DMatrix<f64> {
        let r = deg.to_radians();
        DMatrix::from_row_slice(2, 2, &[r.cos(), -r.sin(), r.sin(), r.cos()])
    }

    /// Deterministic two-mode labels with both modes well represented.
    fn labels(t_len: usize, seed: u64, p: f64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..t_len).map(|_| usize::from(rng.gen::<f64>() >= p)).collect()
    }

    #[test]
    fn mixing_weights_count_assignments() {
        // 5 steps with labels [0, 1, 1, 0, 1] -> [0.4, 0.6].
        let s_c = vec![0, 1, 1, 0, 1];
        let s_a = vec![1, 1, 0, 0, 0];
        let w = ModeWeights::hard(&s_c, 2, &s_a, 2);
        let theta = example1();
        let y: Vec<DVector<f64>> = (0..5).map(|t| DVector::from_element(1, t as f64 * 0.1)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let xs: Vec<DVector<f64>> =
            (0..5).map(|_| DVector::from_fn(2, |_, _| rng.sample::<f64, _>(StandardNormal))).collect();
        let (new_theta, _) = run_mstep(&theta, &y, &w, &xs, &xs).unwrap();
        assert_relative_eq!(new_theta.pi_c[0], 0.4, max_relative = 1e-15);
        assert_relative_eq!(new_theta.pi_c[1], 0.6, max_relative = 1e-15);
        assert_relative_eq!(new_theta.pi_a[0], 0.6, max_relative = 1e-15);
        assert_relative_eq!(new_theta.pi_a[1], 0.4, max_relative = 1e-15);
    }

    /// Builds exact noiseless switched trajectories and returns
    /// (y, weights, x_c, x_a, truth) for recovery tests.
    fn exact_instance(t_len: usize) -> (Vec<DVector<f64>>, ModeWeights, Vec<DVector<f64>>, Vec<DVector<f64>>, ThetaBundle) {
        // Rotations keep the state norm constant, so the per-mode Gram
        // matrices stay well conditioned at any horizon.
        let a_c = [rot(33.0) * 0.97, rot(-71.0) * 1.02];
        let a_a = [rot(58.0) * 0.99, rot(-19.0) * 0.96];
        let c_c = [
            DMatrix::from_row_slice(2, 2, &[1.0, 0.4, -0.3, 0.8]),
            DMatrix::from_row_slice(2, 2, &[0.5, -0.9, 1.1, 0.2]),
        ];
        let c_a = [
            DMatrix::from_row_slice(2, 2, &[-0.6, 1.0, 0.7, 0.3]),
            DMatrix::from_row_slice(2, 2, &[0.9, 0.1, -0.4, -1.2]),
        ];
        let s_c = labels(t_len, 11, 0.6);
        let s_a = labels(t_len, 12, 0.5);

        let mut x_c = vec![DVector::from_row_slice(&[1.0, 0.7])];
        for t in 1..t_len {
            let prev = x_c[t - 1].clone();
            x_c.push(&a_c[s_c[t]] * prev);
        }
        let mut x_a = vec![DVector::zeros(2); t_len];
        x_a[t_len - 1] = DVector::from_row_slice(&[-0.4, 1.2]);
        for t in (0..t_len - 1).rev() {
            x_a[t] = &a_a[s_a[t]] * &x_a[t + 1];
        }
        let y: Vec<DVector<f64>> =
            (0..t_len).map(|t| &c_c[s_c[t]] * &x_c[t] + &c_a[s_a[t]] * &x_a[t]).collect();

        let truth = ThetaBundle {
            dims: Dims { n_xc: 2, n_xa: 2, n_y: 2, m_c: 2, m_a: 2 },
            causal: (0..2)
                .map(|j| CausalModeParams {
                    a: a_c[j].clone(),
                    c: c_c[j].clone(),
                    sigma: DMatrix::zeros(2, 2),
                })
                .collect(),
            anticausal: (0..2)
                .map(|l| AntiCausalModeParams {
                    a: a_a[l].clone(),
                    c: c_a[l].clone(),
                    sigma: DMatrix::zeros(2, 2),
                })
                .collect(),
            pi_c: vec![0.6, 0.4],
            pi_a: vec![0.5, 0.5],
            sigma_m: DMatrix::identity(2, 2),
        };
        let weights = ModeWeights::hard(&s_c, 2, &s_a, 2);
        (y, weights, x_c, x_a, truth)
    }

    #[test]
    fn exact_data_recovers_parameters_exactly() {
        // True labels + true states + no noise: every regression is exactly
        // determined, so the update must reproduce the generating matrices.
        let (y, weights, x_c, x_a, truth) = exact_instance(120);
        // Start from a deliberately wrong parameter point.
        let mut start = truth.clone();
        for mode in &mut start.causal {
            mode.a *= 0.5;
            mode.c *= -1.0;
            mode.sigma = DMatrix::identity(2, 2);
        }
        let (theta, report) = run_mstep(&start, &y, &weights, &x_c, &x_a).unwrap();
        for j in 0..2 {
            assert!((&theta.causal[j].a - &truth.causal[j].a).norm() < 1e-8, "A_c({j})");
            assert!((&theta.causal[j].c - &truth.causal[j].c).norm() < 1e-8, "C_c({j})");
            assert!(theta.causal[j].sigma.norm() < 1e-10, "Sigma_c({j}) should vanish");
        }
        for l in 0..2 {
            assert!((&theta.anticausal[l].a - &truth.anticausal[l].a).norm() < 1e-8, "A_a({l})");
            assert!((&theta.anticausal[l].c - &truth.anticausal[l].c).norm() < 1e-8, "C_a({l})");
        }
        assert!(theta.sigma_m.norm() < 1e-10, "Sigma_m should hit its floor");
        assert!(report.zero_mass_causal.is_empty());
        assert_eq!(report.ridge_events, 0, "well-posed regressions need no ridge");
    }

    #[test]
    fn mixing_weights_match_label_frequencies_on_exact_data() {
        let (y, weights, x_c, x_a, truth) = exact_instance(200);
        let (theta, _) = run_mstep(&truth, &y, &weights, &x_c, &x_a).unwrap();
        let count0 = weights.w_c.iter().filter(|row| row[0] == 1.0).count();
        assert_relative_eq!(theta.pi_c[0], count0 as f64 / 200.0, max_relative = 1e-15);
    }

    #[test]
    fn unassigned_mode_keeps_previous_parameters() {
        let theta = example1();
        let t_len = 40;
        let s = vec![0usize; t_len];
        let weights = ModeWeights::hard(&s, 2, &s, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xs: Vec<DVector<f64>> = (0..t_len)
            .map(|_| DVector::from_fn(2, |_, _| rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let y: Vec<DVector<f64>> =
            (0..t_len).map(|_| DVector::from_fn(1, |_, _| rng.sample::<f64, _>(StandardNormal))).collect();
        let (new_theta, report) = run_mstep(&theta, &y, &weights, &xs, &xs).unwrap();
        assert_eq!(report.zero_mass_causal, vec![1]);
        assert_eq!(report.zero_mass_anticausal, vec![1]);
        assert_eq!(new_theta.causal[1].a, theta.causal[1].a);
        assert_eq!(new_theta.causal[1].c, theta.causal[1].c);
        assert_eq!(new_theta.pi_c[1], 0.0);
    }

    #[test]
    fn degenerate_states_engage_the_ridge() {
        // A constant state sequence has a rank-one Gram matrix; the solve
        // must fall back to the ridge instead of failing.
        let theta = example1();
        let t_len = 30;
        let s = vec![0usize; t_len];
        let mut weights = ModeWeights::hard(&s, 2, &s, 2);
        // Give mode 2 a little mass so both modes regress.
        weights.w_c[3][0] = 0.0;
        weights.w_c[3][1] = 1.0;
        let xs = vec![DVector::from_row_slice(&[1.0, 2.0]); t_len];
        let y = vec![DVector::from_element(1, 0.5); t_len];
        let (new_theta, report) = run_mstep(&theta, &y, &weights, &xs, &xs).unwrap();
        assert!(report.ridge_events > 0, "rank-one Gram must trigger the ridge");
        for mode in &new_theta.causal {
            assert!(mode.a.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn update_is_equivariant_under_mode_relabeling() {
        let (y, weights, x_c, x_a, truth) = exact_instance(80);
        let (base, _) = run_mstep(&truth, &y, &weights, &x_c, &x_a).unwrap();

        let perm_c = [1, 0];
        let perm_a = [1, 0];
        let theta_p = truth.permute_modes(&perm_c, &perm_a);
        let weights_p = ModeWeights {
            w_c: weights.w_c.iter().map(|row| vec![row[perm_c[0]], row[perm_c[1]]]).collect(),
            w_a: weights.w_a.iter().map(|row| vec![row[perm_a[0]], row[perm_a[1]]]).collect(),
        };
        let (permuted, _) = run_mstep(&theta_p, &y, &weights_p, &x_c, &x_a).unwrap();
        let expected = base.permute_modes(&perm_c, &perm_a);
        assert!(expected.max_abs_diff(&permuted) < 1e-9);
    }

    #[test]
    fn surrogate_objective_never_decreases_within_iteration() {
        // Lemma-style guarantee: with weights and states fixed, the exact
        // block maximizers cannot lower the surrogate. Checked across many
        // seeds on both reference systems via the report the update itself
        // verifies, plus an independent re-evaluation here.
        for (sys, t_len) in [(example1(), 300), (benchmark_system(1.0), 300)] {
            for seed in 0..10 {
                let traj = simulate(&sys, &SimConfig::new(t_len, seed)).unwrap();
                let start = crate::model::perturb_theta(
                    &sys,
                    0.3,
                    &mut ChaCha8Rng::seed_from_u64(seed + 100),
                );
                let es = run_estep(&start, &traj.y, &Default::default(), None).unwrap();
                let (theta, report) = run_mstep(
                    &start,
                    &traj.y,
                    &es.weights,
                    &es.filter.xhat_c_post,
                    &es.filter.xhat_a_post,
                )
                .unwrap();
                assert_relative_eq!(report.q_before, es.q, max_relative = 1e-12);
                let q_re = surrogate_q(
                    &theta,
                    &traj.y,
                    &es.weights,
                    &es.filter.xhat_c_post,
                    &es.filter.xhat_a_post,
                )
                .unwrap();
                assert_relative_eq!(report.q_after, q_re, max_relative = 1e-12);
                assert!(
                    report.q_after >= report.q_before - 1e-10 * report.q_before.abs().max(1.0),
                    "seed {seed}: Q fell from {} to {}",
                    report.q_before,
                    report.q_after
                );
            }
        }
    }

    #[test]
    fn updated_bundle_passes_validation() {
        let (y, weights, x_c, x_a, truth) = exact_instance(100);
        let (theta, _) = run_mstep(&truth, &y, &weights, &x_c, &x_a).unwrap();
        crate::model::validate_theta(&theta).unwrap();
    }

    #[test]
    fn soft_weight_rows_produce_valid_mixing_weights() {
        let theta = benchmark_system(1.0);
        let traj = simulate(&theta, &SimConfig::new(200, 77)).unwrap();
        let cfg = crate::estep::EStepConfig { soft_weights: true, ..Default::default() };
        let es = run_estep(&theta, &traj.y, &cfg, None).unwrap();
        let (new_theta, _) = run_mstep(
            &theta,
            &traj.y,
            &es.weights,
            &es.filter.xhat_c_post,
            &es.filter.xhat_a_post,
        )
        .unwrap();
        let sum_c: f64 = new_theta.pi_c.iter().sum();
        let sum_a: f64 = new_theta.pi_a.iter().sum();
        assert_relative_eq!(sum_c, 1.0, max_relative = 1e-10);
        assert_relative_eq!(sum_a, 1.0, max_relative = 1e-10);
        assert!(new_theta.pi_c.iter().all(|&p| p >= 0.0));
    }
}
