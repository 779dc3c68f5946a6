//! E-step: per-step mode classification and coupled state estimation.
//!
//! One E-step runs a configurable number of sweeps. Each sweep is a forward
//! pass over the causal chain followed by a backward pass over the
//! anti-causal chain:
//!
//! - The forward pass at step `t` predicts each candidate causal mode from
//!   the previous posterior (a filter bank), scores the output predictive
//!   density times the mode probability, commits the best mode, and corrects
//!   the causal state. The anti-causal partner enters through its *prior*
//!   estimate from the previous sweep (or the previous EM iteration); on the
//!   very first sweep of the first iteration the partner prior is zero mean
//!   with covariance `10 I`, and the partner label defaults to the first
//!   mode.
//! - The backward pass mirrors this for the anti-causal chain, with one
//!   asymmetry: its partner terms use the *just-updated* causal posteriors
//!   from the forward pass that preceded it.
//!
//! Both chains share one innovation `y(t) - C_c x̂_c⁻(t) - C_a x̂_a⁻(t)` and
//! one innovation covariance `S = C_c P_c⁻ C_cᵀ + C_a P_a⁻ C_aᵀ + Σ_m`; each
//! chain's gain is `K = P⁻ Cᵀ S⁻¹`. Posterior covariances are stored in the
//! full quadratic (Joseph) form, which is PSD for any gain and equals the
//! short form `(I - K C) P⁻` at the optimal gain; the short form alone loses
//! definiteness at noiseless scales.
//!
//! All covariance solves go through a guarded Cholesky: the factorization is
//! attempted unmodified first (healthy inputs see no perturbation at all),
//! and only on failure is a relative jitter added and escalated. This keeps
//! the single-chain reduction exactly equal to a textbook Kalman filter
//! while still classifying correctly on exactly-noiseless data.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::model::{symmetrize, AntiCausalModeParams, CausalModeParams, ThetaBundle};

/// Diffuse prior covariance (times identity) for the opposite chain before
/// its first pass, and for each chain's own boundary state.
pub const OPPOSITE_PRIOR_COV: f64 = 10.0;
/// Relative jitter added to an innovation covariance only after its plain
/// Cholesky factorization fails; escalated by 10x per retry.
pub const REL_JITTER: f64 = 1e-12;
/// Absolute floor for the jitter scale, small enough never to mask data but
/// large enough that its reciprocal cannot overflow.
pub const ABS_JITTER_FLOOR: f64 = 1e-100;
/// Jitter escalation attempts before giving up. Round-off can leave a
/// covariance indefinite at its own magnitude (negative eigenvalues of
/// order `trace/n`), so the ladder must be able to climb from the relative
/// floor all the way past the matrix scale: 14 tenfold steps from
/// `1e-12 * scale` reach `10 * scale`, which makes any such matrix
/// diagonally dominant.
const MAX_JITTER_ROUNDS: u32 = 14;

/// E-step configuration.
#[derive(Debug, Clone)]
pub struct EStepConfig {
    /// Forward+backward sweep pairs per invocation. Two sweeps (the
    /// default) let each chain see the other's corrected estimates once;
    /// the second sweep also repairs the first step's uninformed partner
    /// prior.
    pub sweeps: usize,
    /// Return weights proportional to `density x pi` instead of one-hot
    /// indicators. Hard assignments remain the default and are what the
    /// mode sequences always contain.
    pub soft_weights: bool,
    /// Classify causal and anti-causal modes jointly over all label pairs
    /// in the forward pass instead of holding the partner label fixed.
    pub joint_mode_search: bool,
}

impl Default for EStepConfig {
    fn default() -> Self {
        EStepConfig { sweeps: 2, soft_weights: false, joint_mode_search: false }
    }
}

/// Per-step mode weights for both chains. Rows sum to 1; in hard mode each
/// row is a one-hot indicator of the assigned mode.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeWeights {
    /// `w_c[t][j]`: weight of causal mode `j` at step `t`.
    pub w_c: Vec<Vec<f64>>,
    /// `w_a[t][l]`: weight of anti-causal mode `l` at step `t`.
    pub w_a: Vec<Vec<f64>>,
}

impl ModeWeights {
    /// One-hot weights from hard assignments.
    pub fn hard(s_c: &[usize], m_c: usize, s_a: &[usize], m_a: usize) -> Self {
        let one_hot = |seq: &[usize], m: usize| {
            seq.iter()
                .map(|&s| {
                    let mut row = vec![0.0; m];
                    row[s] = 1.0;
                    row
                })
                .collect()
        };
        ModeWeights { w_c: one_hot(s_c, m_c), w_a: one_hot(s_a, m_a) }
    }
}

/// Full state of the coupled filter: priors, posteriors, and gains for both
/// chains at every step.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    /// Causal prior means `x̂_c⁻(t)`.
    pub xhat_c_prior: Vec<DVector<f64>>,
    /// Causal posterior means `x̂_c(t)`.
    pub xhat_c_post: Vec<DVector<f64>>,
    /// Causal prior covariances `P_c⁻(t)`.
    pub p_c_prior: Vec<DMatrix<f64>>,
    /// Causal posterior covariances `P_c(t)`.
    pub p_c_post: Vec<DMatrix<f64>>,
    /// Causal gains `K_c(t)`.
    pub k_c: Vec<DMatrix<f64>>,
    /// Anti-causal prior means `x̂_a⁻(t)`.
    pub xhat_a_prior: Vec<DVector<f64>>,
    /// Anti-causal posterior means `x̂_a(t)`.
    pub xhat_a_post: Vec<DVector<f64>>,
    /// Anti-causal prior covariances `P_a⁻(t)`.
    pub p_a_prior: Vec<DMatrix<f64>>,
    /// Anti-causal posterior covariances `P_a(t)`.
    pub p_a_post: Vec<DMatrix<f64>>,
    /// Anti-causal gains `K_a(t)`.
    pub k_a: Vec<DMatrix<f64>>,
}

/// Everything one E-step produces: filter state, mode weights, hard mode
/// sequences, and the surrogate objective evaluated at the current
/// parameters with these assignments and state estimates.
#[derive(Debug, Clone)]
pub struct EStepOutput {
    /// Coupled filter state from the final sweep.
    pub filter: FilterState,
    /// Mode weights (one-hot unless soft weights were requested).
    pub weights: ModeWeights,
    /// Hard causal mode assignments, 0-based.
    pub s_c: Vec<usize>,
    /// Hard anti-causal mode assignments, 0-based.
    pub s_a: Vec<usize>,
    /// Surrogate complete-data log-likelihood `Q` at the input parameters.
    pub q: f64,
}

/// Guarded Cholesky factor of a symmetric positive (semi)definite matrix.
pub(crate) struct SpdFactor {
    chol: Cholesky<f64, Dyn>,
    /// Jitter that had to be added to the diagonal (0 when none).
    pub jitter: f64,
}

impl SpdFactor {
    /// Factors `s`, trying the matrix unmodified first. On failure, adds a
    /// jitter relative to the matrix scale (and `scale_hint`, typically
    /// `||y_t||^2`, so all-zero matrices still get a usable floor) and
    /// escalates tenfold per retry.
    pub(crate) fn new(s: &DMatrix<f64>, scale_hint: f64, location: &str) -> Result<SpdFactor> {
        if let Some(chol) = Cholesky::new(s.clone()) {
            return Ok(SpdFactor { chol, jitter: 0.0 });
        }
        let n = s.nrows() as f64;
        let scale = (s.trace() / n)
            .abs()
            .max(REL_JITTER * scale_hint)
            .max(ABS_JITTER_FLOOR);
        // Cancellation can leave a covariance slightly indefinite, with
        // negative diagonal entries of the matrix's own magnitude; a jitter
        // proportional to trace scale alone can never climb over those, so
        // the ladder starts at least at the depth of the worst diagonal.
        let lift = (-s.diagonal().min()).max(0.0);
        for round in 0..MAX_JITTER_ROUNDS {
            let jitter = (REL_JITTER * scale + lift) * 10f64.powi(round as i32);
            let mut jittered = s.clone();
            for i in 0..s.nrows() {
                jittered[(i, i)] += jitter;
            }
            if let Some(chol) = Cholesky::new(jittered) {
                log::debug!("{location}: covariance needed jitter {jitter:.3e}");
                return Ok(SpdFactor { chol, jitter });
            }
        }
        Err(Error::Numerical {
            location: location.to_string(),
            message: format!(
                "covariance not factorizable after jitter escalation \
                 (trace {:.3e}, min diagonal {:.3e}, scale hint {:.3e})",
                s.trace(),
                s.diagonal().min(),
                scale_hint
            ),
        })
    }

    /// `S^{-1} b`.
    pub(crate) fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    /// `ln det S`.
    pub(crate) fn log_det(&self) -> f64 {
        self.chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0
    }

    /// `v^T S^{-1} v`.
    pub(crate) fn quad_form(&self, v: &DVector<f64>) -> f64 {
        v.dot(&self.chol.solve(v))
    }
}

const LN_2PI: f64 = 1.837877066409345; // ln(2 pi)

/// Log of the Gaussian density `N(residual; 0, cov)` through the guarded
/// factorization. `scale_hint` seeds the jitter floor for degenerate
/// covariances.
pub(crate) fn gaussian_log_density(
    residual: &DVector<f64>,
    cov: &DMatrix<f64>,
    scale_hint: f64,
    location: &str,
) -> Result<f64> {
    let f = SpdFactor::new(cov, scale_hint, location)?;
    Ok(-0.5 * (residual.len() as f64 * LN_2PI + f.log_det() + f.quad_form(residual)))
}

/// Propagates the causal chain one step forward:
/// `x̂⁻ = A_c x̂_prev`, `P⁻ = A_c P_prev A_cᵀ + Σ_c` (symmetrized).
pub fn predict_causal(
    xhat_prev: &DVector<f64>,
    p_prev: &DMatrix<f64>,
    mode: &CausalModeParams,
) -> (DVector<f64>, DMatrix<f64>) {
    let xhat = &mode.a * xhat_prev;
    let mut p = &mode.a * p_prev * mode.a.transpose() + &mode.sigma;
    symmetrize(&mut p);
    (xhat, p)
}

/// Propagates the anti-causal chain one step backward:
/// `x̂⁻ = A_a x̂_next`, `P⁻ = A_a P_next A_aᵀ + Σ_a` (symmetrized).
pub fn predict_anticausal(
    xhat_next: &DVector<f64>,
    p_next: &DMatrix<f64>,
    mode: &AntiCausalModeParams,
) -> (DVector<f64>, DMatrix<f64>) {
    let xhat = &mode.a * xhat_next;
    let mut p = &mode.a * p_next * mode.a.transpose() + &mode.sigma;
    symmetrize(&mut p);
    (xhat, p)
}

/// Shared innovation covariance
/// `S = C_c P_c⁻ C_cᵀ + C_a P_a⁻ C_aᵀ + Σ_m`, symmetrized and unfloored.
pub fn innovation_covariance(
    p_c_prior: &DMatrix<f64>,
    p_a_prior: &DMatrix<f64>,
    c_c: &DMatrix<f64>,
    c_a: &DMatrix<f64>,
    sigma_m: &DMatrix<f64>,
) -> DMatrix<f64> {
    let mut s = c_c * p_c_prior * c_c.transpose() + c_a * p_a_prior * c_a.transpose() + sigma_m;
    symmetrize(&mut s);
    s
}

/// Output of the shared measurement correction.
#[derive(Debug, Clone)]
pub struct Corrected {
    /// Corrected causal mean.
    pub xhat_c_post: DVector<f64>,
    /// Corrected anti-causal mean.
    pub xhat_a_post: DVector<f64>,
    /// Corrected causal covariance (Joseph form, symmetrized).
    pub p_c_post: DMatrix<f64>,
    /// Corrected anti-causal covariance.
    pub p_a_post: DMatrix<f64>,
    /// Causal gain `K_c = P_c⁻ C_cᵀ S⁻¹`.
    pub k_c: DMatrix<f64>,
    /// Anti-causal gain `K_a = P_a⁻ C_aᵀ S⁻¹`.
    pub k_a: DMatrix<f64>,
}

/// Corrects both chains with the shared innovation
/// `y - C_c x̂_c⁻ - C_a x̂_a⁻` (computed once) and per-chain gains
/// `K = P⁻ Cᵀ S⁻¹`. Covariances update in the full quadratic form
/// `P = (I - K C) P⁻ (I - K C)ᵀ + K R_eff Kᵀ` where `R_eff` is the other
/// chain's output-projected prior plus `Σ_m`; at the optimal gain this
/// equals `(I - K C) P⁻`.
#[allow(clippy::too_many_arguments)]
pub fn correct(
    xhat_c_prior: &DVector<f64>,
    xhat_a_prior: &DVector<f64>,
    p_c_prior: &DMatrix<f64>,
    p_a_prior: &DMatrix<f64>,
    y_t: &DVector<f64>,
    c_c: &DMatrix<f64>,
    c_a: &DMatrix<f64>,
    sigma_m: &DMatrix<f64>,
) -> Result<Corrected> {
    let s = innovation_covariance(p_c_prior, p_a_prior, c_c, c_a, sigma_m);
    let factor = SpdFactor::new(&s, y_t.norm_squared(), "measurement correction")?;
    let innovation = y_t - c_c * xhat_c_prior - c_a * xhat_a_prior;

    // K = P⁻ Cᵀ S⁻¹, computed as (S⁻¹ C P⁻)ᵀ since S and P⁻ are symmetric.
    let k_c = factor.solve_mat(&(c_c * p_c_prior)).transpose();
    let k_a = factor.solve_mat(&(c_a * p_a_prior)).transpose();

    let xhat_c_post = xhat_c_prior + &k_c * &innovation;
    let xhat_a_post = xhat_a_prior + &k_a * &innovation;

    let joseph = |p: &DMatrix<f64>,
                  k: &DMatrix<f64>,
                  c: &DMatrix<f64>,
                  r_eff: &DMatrix<f64>| {
        let ikc = DMatrix::identity(p.nrows(), p.nrows()) - k * c;
        let mut post = &ikc * p * ikc.transpose() + k * r_eff * k.transpose();
        symmetrize(&mut post);
        post
    };
    let r_eff_c = c_a * p_a_prior * c_a.transpose() + sigma_m;
    let r_eff_a = c_c * p_c_prior * c_c.transpose() + sigma_m;
    let p_c_post = joseph(p_c_prior, &k_c, c_c, &r_eff_c);
    let p_a_post = joseph(p_a_prior, &k_a, c_a, &r_eff_a);

    Ok(Corrected { xhat_c_post, xhat_a_post, p_c_post, p_a_post, k_c, k_a })
}

/// Which labels the sweep uses: scan candidates or keep a frozen sequence.
enum LabelPolicy<'a> {
    Scan,
    Fixed(&'a [usize], &'a [usize]),
}

/// Runs the E-step: per-step classification plus the coupled filter, over
/// `cfg.sweeps` forward/backward sweep pairs. `prev` supplies the previous
/// iteration's anti-causal priors and labels; `None` means first iteration
/// (diffuse partner priors, first-mode partner labels).
pub fn run_estep(
    theta: &ThetaBundle,
    y: &[DVector<f64>],
    cfg: &EStepConfig,
    prev: Option<&EStepOutput>,
) -> Result<EStepOutput> {
    estep_core(theta, y, cfg, prev, LabelPolicy::Scan)
}

/// E-step with the mode sequences held fixed (filter only, no
/// classification). Used once EM freezes label assignments.
pub fn run_estep_with_labels(
    theta: &ThetaBundle,
    y: &[DVector<f64>],
    cfg: &EStepConfig,
    prev: Option<&EStepOutput>,
    s_c: &[usize],
    s_a: &[usize],
) -> Result<EStepOutput> {
    estep_core(theta, y, cfg, prev, LabelPolicy::Fixed(s_c, s_a))
}

fn estep_core(
    theta: &ThetaBundle,
    y: &[DVector<f64>],
    cfg: &EStepConfig,
    prev: Option<&EStepOutput>,
    labels: LabelPolicy<'_>,
) -> Result<EStepOutput> {
    let t_len = y.len();
    let d = &theta.dims;
    if cfg.sweeps == 0 {
        return Err(Error::Invalid("sweeps >= 1 required".to_string()));
    }
    if let Some(p) = prev {
        if p.filter.xhat_a_prior.len() != t_len {
            return Err(Error::Dimension {
                context: "previous estimates".to_string(),
                expected: format!("length {t_len}"),
                got: format!("length {}", p.filter.xhat_a_prior.len()),
            });
        }
    }

    // Partner priors for the first forward pass.
    let mut xa_pri: Vec<DVector<f64>> = match prev {
        Some(p) => p.filter.xhat_a_prior.clone(),
        None => vec![DVector::zeros(d.n_xa); t_len],
    };
    let mut pa_pri: Vec<DMatrix<f64>> = match prev {
        Some(p) => p.filter.p_a_prior.clone(),
        None => vec![DMatrix::identity(d.n_xa, d.n_xa) * OPPOSITE_PRIOR_COV; t_len],
    };

    let (mut s_c, mut s_a) = match labels {
        LabelPolicy::Fixed(sc, sa) => (sc.to_vec(), sa.to_vec()),
        LabelPolicy::Scan => (
            vec![0; t_len],
            prev.map_or_else(|| vec![0; t_len], |p| p.s_a.clone()),
        ),
    };
    let scan = matches!(labels, LabelPolicy::Scan);

    let mut xc_pri = vec![DVector::zeros(d.n_xc); t_len];
    let mut pc_pri = vec![DMatrix::zeros(d.n_xc, d.n_xc); t_len];
    let mut xc_post = vec![DVector::zeros(d.n_xc); t_len];
    let mut pc_post = vec![DMatrix::zeros(d.n_xc, d.n_xc); t_len];
    let mut k_c = vec![DMatrix::zeros(d.n_xc, d.n_y); t_len];
    let mut xa_post = vec![DVector::zeros(d.n_xa); t_len];
    let mut pa_post = vec![DMatrix::zeros(d.n_xa, d.n_xa); t_len];
    let mut k_a = vec![DMatrix::zeros(d.n_xa, d.n_y); t_len];

    let mut w_c: Vec<Vec<f64>> = Vec::new();
    let mut w_a: Vec<Vec<f64>> = Vec::new();

    for sweep in 0..cfg.sweeps {
        let last_sweep = sweep + 1 == cfg.sweeps;
        if cfg.soft_weights && last_sweep {
            w_c = vec![vec![0.0; d.m_c]; t_len];
            w_a = vec![vec![0.0; d.m_a]; t_len];
        }

        // Forward pass over the causal chain.
        let mut xprev = DVector::zeros(d.n_xc);
        let mut pprev = DMatrix::identity(d.n_xc, d.n_xc) * OPPOSITE_PRIOR_COV;
        for t in 0..t_len {
            let yref = y[t].norm_squared();
            if scan {
                if cfg.joint_mode_search {
                    // Exhaustive pair search: the partner state prior is
                    // held fixed while both output maps vary.
                    let mut pair_scores = vec![vec![f64::NEG_INFINITY; d.m_a]; d.m_c];
                    let mut best_pair = (f64::NEG_INFINITY, s_c[t], s_a[t]);
                    for (j, mode) in theta.causal.iter().enumerate() {
                        if theta.pi_c[j] <= 0.0 {
                            continue;
                        }
                        let (xp, pp) = predict_causal(&xprev, &pprev, mode);
                        for (l, partner) in theta.anticausal.iter().enumerate() {
                            if theta.pi_a[l] <= 0.0 {
                                continue;
                            }
                            let s = innovation_covariance(
                                &pp, &pa_pri[t], &mode.c, &partner.c, &theta.sigma_m,
                            );
                            let innov = &y[t] - &mode.c * &xp - &partner.c * &xa_pri[t];
                            let score = gaussian_log_density(
                                &innov,
                                &s,
                                yref,
                                &format!("classification at t={}", t + 1),
                            )? + theta.pi_c[j].ln()
                                + theta.pi_a[l].ln();
                            pair_scores[j][l] = score;
                            if score > best_pair.0 {
                                best_pair = (score, j, l);
                            }
                        }
                    }
                    s_c[t] = best_pair.1;
                    s_a[t] = best_pair.2;
                    if cfg.soft_weights && last_sweep {
                        let marginals: Vec<f64> =
                            pair_scores.iter().map(|row| log_sum_exp(row)).collect();
                        w_c[t] = normalized_exp(&marginals);
                    }
                } else {
                    let partner = &theta.anticausal[s_a[t]].c;
                    let mut scores = vec![f64::NEG_INFINITY; d.m_c];
                    let mut best = (f64::NEG_INFINITY, s_c[t]);
                    for (j, mode) in theta.causal.iter().enumerate() {
                        if theta.pi_c[j] <= 0.0 {
                            continue;
                        }
                        let (xp, pp) = predict_causal(&xprev, &pprev, mode);
                        let s = innovation_covariance(
                            &pp, &pa_pri[t], &mode.c, partner, &theta.sigma_m,
                        );
                        let innov = &y[t] - &mode.c * &xp - partner * &xa_pri[t];
                        let score = gaussian_log_density(
                            &innov,
                            &s,
                            yref,
                            &format!("classification at t={}", t + 1),
                        )? + theta.pi_c[j].ln();
                        scores[j] = score;
                        if score > best.0 {
                            best = (score, j);
                        }
                    }
                    s_c[t] = best.1;
                    if cfg.soft_weights && last_sweep {
                        w_c[t] = normalized_exp(&scores);
                    }
                }
            }

            // Commit the assignment and correct the causal chain.
            let mode = &theta.causal[s_c[t]];
            let partner = &theta.anticausal[s_a[t]].c;
            let (xp, pp) = predict_causal(&xprev, &pprev, mode);
            let corrected = correct(
                &xp,
                &xa_pri[t],
                &pp,
                &pa_pri[t],
                &y[t],
                &mode.c,
                partner,
                &theta.sigma_m,
            )
            .map_err(|e| at_step(e, t))?;
            xc_pri[t] = xp;
            pc_pri[t] = pp;
            xc_post[t] = corrected.xhat_c_post.clone();
            pc_post[t] = corrected.p_c_post.clone();
            k_c[t] = corrected.k_c;
            xprev = corrected.xhat_c_post;
            pprev = corrected.p_c_post;
        }

        // Backward pass over the anti-causal chain, against the causal
        // posteriors just produced.
        let mut xnext = DVector::zeros(d.n_xa);
        let mut pnext = DMatrix::identity(d.n_xa, d.n_xa) * OPPOSITE_PRIOR_COV;
        for t in (0..t_len).rev() {
            let yref = y[t].norm_squared();
            if scan {
                let partner = &theta.causal[s_c[t]].c;
                let mut scores = vec![f64::NEG_INFINITY; d.m_a];
                let mut best = (f64::NEG_INFINITY, s_a[t]);
                for (l, mode) in theta.anticausal.iter().enumerate() {
                    if theta.pi_a[l] <= 0.0 {
                        continue;
                    }
                    let (xp, pp) = predict_anticausal(&xnext, &pnext, mode);
                    let s = innovation_covariance(
                        &pc_post[t], &pp, partner, &mode.c, &theta.sigma_m,
                    );
                    let innov = &y[t] - partner * &xc_post[t] - &mode.c * &xp;
                    let score = gaussian_log_density(
                        &innov,
                        &s,
                        yref,
                        &format!("classification at t={}", t + 1),
                    )? + theta.pi_a[l].ln();
                    scores[l] = score;
                    if score > best.0 {
                        best = (score, l);
                    }
                }
                s_a[t] = best.1;
                if cfg.soft_weights && last_sweep {
                    w_a[t] = normalized_exp(&scores);
                }
            }

            let mode = &theta.anticausal[s_a[t]];
            let partner = &theta.causal[s_c[t]].c;
            let (xp, pp) = predict_anticausal(&xnext, &pnext, mode);
            let corrected = correct(
                &xc_post[t],
                &xp,
                &pc_post[t],
                &pp,
                &y[t],
                partner,
                &mode.c,
                &theta.sigma_m,
            )
            .map_err(|e| at_step(e, t))?;
            xa_pri[t] = xp;
            pa_pri[t] = pp;
            xa_post[t] = corrected.xhat_a_post.clone();
            pa_post[t] = corrected.p_a_post.clone();
            k_a[t] = corrected.k_a;
            xnext = corrected.xhat_a_post;
            pnext = corrected.p_a_post;
        }
    }

    let weights = if cfg.soft_weights {
        ModeWeights { w_c, w_a }
    } else {
        ModeWeights::hard(&s_c, d.m_c, &s_a, d.m_a)
    };
    let filter = FilterState {
        xhat_c_prior: xc_pri,
        xhat_c_post: xc_post,
        p_c_prior: pc_pri,
        p_c_post: pc_post,
        k_c,
        xhat_a_prior: xa_pri,
        xhat_a_post: xa_post,
        p_a_prior: pa_pri,
        p_a_post: pa_post,
        k_a,
    };
    let q = surrogate_q(theta, y, &weights, &filter.xhat_c_post, &filter.xhat_a_post)?;
    Ok(EStepOutput { filter, weights, s_c, s_a, q })
}

fn at_step(e: Error, t: usize) -> Error {
    match e {
        Error::Numerical { location, message } => Error::Numerical {
            location: format!("{location} (t={})", t + 1),
            message,
        },
        other => other,
    }
}

fn log_sum_exp(scores: &[f64]) -> f64 {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln()
}

fn normalized_exp(scores: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(scores);
    if !lse.is_finite() {
        // No scorable candidate; fall back to uniform.
        return vec![1.0 / scores.len() as f64; scores.len()];
    }
    scores.iter().map(|s| (s - lse).exp()).collect()
}

/// Surrogate complete-data log-likelihood `Q` with the given weights and
/// state point estimates plugged in. Five terms: both mixing-weight sums,
/// both transition sums, and the measurement sum. The causal transition
/// term runs `t = 2..T` and the anti-causal one `t = 1..T-1` — the boundary
/// states `x_c(0)` and `x_a(T+1)` are unobserved — matching the ranges the
/// parameter updates maximize over, which is what makes the within-iteration
/// non-decrease of `Q` exact.
pub fn surrogate_q(
    theta: &ThetaBundle,
    y: &[DVector<f64>],
    weights: &ModeWeights,
    x_c: &[DVector<f64>],
    x_a: &[DVector<f64>],
) -> Result<f64> {
    let t_len = y.len();
    let d = &theta.dims;
    let yscale = y.iter().map(|v| v.norm_squared()).sum::<f64>() / t_len.max(1) as f64;
    let mut q = 0.0;
    for t in 0..t_len {
        let wc = &weights.w_c[t];
        let wa = &weights.w_a[t];
        for j in 0..d.m_c {
            if wc[j] > 0.0 {
                q += wc[j] * theta.pi_c[j].ln();
            }
        }
        for l in 0..d.m_a {
            if wa[l] > 0.0 {
                q += wa[l] * theta.pi_a[l].ln();
            }
        }
        for j in 0..d.m_c {
            if wc[j] <= 0.0 {
                continue;
            }
            for l in 0..d.m_a {
                let w = wc[j] * wa[l];
                if w <= 0.0 {
                    continue;
                }
                let r = &y[t] - &theta.causal[j].c * &x_c[t] - &theta.anticausal[l].c * &x_a[t];
                q += w * gaussian_log_density(&r, &theta.sigma_m, yscale, "Q measurement term")?;
            }
        }
        if t >= 1 {
            for j in 0..d.m_c {
                if wc[j] <= 0.0 {
                    continue;
                }
                let r = &x_c[t] - &theta.causal[j].a * &x_c[t - 1];
                q += wc[j]
                    * gaussian_log_density(&r, &theta.causal[j].sigma, yscale, "Q causal term")?;
            }
        }
        if t + 1 < t_len {
            for l in 0..d.m_a {
                if wa[l] <= 0.0 {
                    continue;
                }
                let r = &x_a[t] - &theta.anticausal[l].a * &x_a[t + 1];
                q += wa[l]
                    * gaussian_log_density(&r, &theta.anticausal[l].sigma, yscale, "Q anti term")?;
            }
        }
    }
    Ok(q)
}
