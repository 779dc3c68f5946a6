//! EM driver: initialization, E/M alternation, convergence detection,
//! monotonicity monitoring, and mode-label alignment.
//!
//! The loop alternates the classification/filtering E-step with the
//! closed-form M-step, recording the surrogate objective and parameter
//! movement at every iteration. Three stopping rules apply, in precedence
//! order: parameter stagnation (`tol_theta`), surrogate stagnation
//! (`tol_q`, relative), and the iteration cap. Parameter stagnation is
//! checked first because the surrogate can stall while rare-mode
//! parameters still move.
//!
//! Hard-assignment EM can oscillate between nearly tied labelings, so once
//! fewer than 0.1% of labels flip between consecutive iterations the
//! assignments are frozen and later iterations only re-run the filter and
//! parameter updates.
//!
//! The surrogate sequence is non-decreasing for exact EM; with hard
//! assignments the re-classification step can produce small dips. In the
//! default `Assert` policy any dip beyond a 1e-8 absolute slack aborts the
//! fit with a diagnostic; the `Permissive` policy logs the dip and records
//! its iteration index instead, which keeps runs alive while preserving the
//! evidence.

use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::estep::{run_estep, run_estep_with_labels, EStepConfig, EStepOutput, FilterState};
use crate::model::{
    perturb_theta, spectral_radius, validate_theta, AntiCausalModeParams, CausalModeParams, Dims,
    ThetaBundle, Trajectory,
};
use crate::mstep::run_mstep;

/// Absolute slack for the cross-iteration surrogate monotonicity check.
pub const Q_MONOTONE_SLACK: f64 = 1e-8;
/// Freeze classification once fewer than this fraction of all labels flip
/// between consecutive iterations.
pub const FREEZE_FLIP_FRACTION: f64 = 1e-3;
/// Largest mode count for which exhaustive permutation alignment runs.
pub const ALIGN_MAX_MODES: usize = 5;

/// How the parameter point is initialized.
#[derive(Debug, Clone)]
pub enum InitStrategy {
    /// Random transition matrices rescaled to spectral radius 0.5, random
    /// unit-row-norm output maps, identity covariances, uniform mixing
    /// weights.
    Random,
    /// A reference point with entry-wise relative Gaussian perturbation of
    /// size `rho` on the transition and output matrices (testing and
    /// probing; `rho = 0` returns the reference exactly).
    Perturb {
        /// Point to perturb around.
        reference: Box<ThetaBundle>,
        /// Relative perturbation size.
        rho: f64,
    },
    /// Split the output sequence into `m_c` contiguous blocks and seed each
    /// causal transition diagonal with a per-block scalar AR coefficient
    /// (anti-causal modes use the reversed recursion); everything else as
    /// in `Random`.
    Segments,
}

/// What to do when the recorded surrogate sequence dips between iterations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MonotoneQPolicy {
    /// Abort the fit with a numerical error (default).
    Assert,
    /// Log a warning and record the iteration index.
    Permissive,
}

/// EM loop configuration.
#[derive(Debug, Clone)]
pub struct EmConfig {
    /// Iteration cap.
    pub max_iters: usize,
    /// Relative surrogate-change stopping threshold.
    pub tol_q: f64,
    /// Max-entry parameter-change stopping threshold.
    pub tol_theta: f64,
    /// E-step sweeps per iteration.
    pub sweeps: usize,
    /// Use soft mode weights in the M-step.
    pub soft_weights: bool,
    /// Classify causal/anti-causal labels jointly in the forward pass.
    pub joint_mode_search: bool,
    /// Initialization strategy.
    pub init: InitStrategy,
    /// Seed for the initialization RNG (the loop itself is deterministic).
    pub seed: u64,
    /// Surrogate monotonicity handling.
    pub monotone_q: MonotoneQPolicy,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            max_iters: 100,
            tol_q: 1e-6,
            tol_theta: 1e-5,
            sweeps: 2,
            soft_weights: false,
            joint_mode_search: false,
            init: InitStrategy::Random,
            seed: 0,
            monotone_q: MonotoneQPolicy::Assert,
        }
    }
}

/// Why the loop stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    /// Max parameter change fell below `tol_theta`.
    TolTheta,
    /// Relative surrogate change fell below `tol_q`.
    TolQ,
    /// Iteration cap reached.
    MaxIterations,
    /// Surrogate monotonicity violation under the `Assert` policy.
    Aborted,
}

/// Details of an assert-mode abort. The report still carries everything
/// recorded before the violation (the offending iteration is not recorded,
/// so the iterate list always satisfies the monotonicity invariant).
#[derive(Debug, Clone, PartialEq)]
pub struct AbortInfo {
    /// Iteration whose E-step produced the dip.
    pub iteration: usize,
    /// Human-readable diagnostic.
    pub message: String,
}

/// One recorded EM iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct IterateRecord {
    /// 1-based iteration index.
    pub iter: usize,
    /// Surrogate objective at this iteration's parameters (from its E-step).
    pub q: f64,
    /// Labels that changed relative to the previous iteration (both chains).
    pub flip_count: usize,
    /// Max-entry parameter change produced by this iteration's M-step.
    pub theta_delta: f64,
    /// Normal-equation solves that needed a ridge in this iteration.
    pub ridge_events: usize,
    /// Whether classification was frozen for this iteration.
    pub frozen: bool,
    /// Aligned causal mode match rate against ground-truth labels, when the
    /// trajectory carries them and the mode count permits alignment.
    pub match_rate_c: Option<f64>,
    /// Aligned anti-causal mode match rate, likewise.
    pub match_rate_a: Option<f64>,
}

/// Result of a fit.
#[derive(Debug, Clone)]
pub struct EmReport {
    /// Parameters after the final M-step.
    pub final_theta: ThetaBundle,
    /// Filter state from the final E-step.
    pub final_states: FilterState,
    /// Final causal mode assignments.
    pub s_c: Vec<usize>,
    /// Final anti-causal mode assignments.
    pub s_a: Vec<usize>,
    /// Every iteration, in order.
    pub iterates: Vec<IterateRecord>,
    /// True when a tolerance-based stopping rule fired.
    pub converged: bool,
    /// Which stopping rule fired.
    pub stop_reason: StopReason,
    /// Iterations whose surrogate dipped below the previous one beyond the
    /// slack (empty under `Assert`, which aborts instead).
    pub q_dips: Vec<usize>,
    /// Present when the `Assert` policy stopped the loop early; everything
    /// recorded up to (and excluding) the violating iteration is kept.
    pub abort: Option<AbortInfo>,
}

fn random_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal))
}

fn random_transition<R: Rng + ?Sized>(rng: &mut R, n: usize) -> DMatrix<f64> {
    let mut a = random_matrix(rng, n, n);
    let rho = spectral_radius(&a);
    if rho > 0.0 {
        a *= 0.5 / rho;
    } else {
        a = DMatrix::identity(n, n) * 0.5;
    }
    a
}

fn random_output_map<R: Rng + ?Sized>(rng: &mut R, n_y: usize, n_x: usize) -> DMatrix<f64> {
    let mut c = random_matrix(rng, n_y, n_x);
    for i in 0..n_y {
        let norm = c.row(i).norm();
        if norm > 0.0 {
            c.row_mut(i).unscale_mut(norm);
        } else {
            c[(i, 0)] = 1.0;
        }
    }
    c
}

/// Per-block scalar AR(1) coefficient of the output sequence, regressing
/// `y(t)` on `y(t-1)` within the block (`shift = 1`) or on `y(t+1)`
/// (`shift = -1` for the anti-causal proxy).
fn block_ar_coefficient(y: &[nalgebra::DVector<f64>], lo: usize, hi: usize, shift: i64) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for t in lo..hi {
        let s = t as i64 - shift;
        if s < lo as i64 || s >= hi as i64 {
            continue;
        }
        let prev = &y[s as usize];
        num += y[t].dot(prev);
        den += prev.norm_squared();
    }
    if den > 0.0 {
        (num / den).clamp(-0.98, 0.98)
    } else {
        0.5
    }
}

/// Builds the starting parameter point. Deterministic given the RNG state.
pub fn initialize<R: Rng + ?Sized>(
    y: &[nalgebra::DVector<f64>],
    dims: &Dims,
    strategy: &InitStrategy,
    rng: &mut R,
) -> ThetaBundle {
    match strategy {
        InitStrategy::Perturb { reference, rho } => perturb_theta(reference, *rho, rng),
        InitStrategy::Random | InitStrategy::Segments => {
            let t_len = y.len();
            let mut causal = Vec::with_capacity(dims.m_c);
            for j in 0..dims.m_c {
                let a = if matches!(strategy, InitStrategy::Segments) && t_len >= 2 * dims.m_c {
                    let lo = j * t_len / dims.m_c;
                    let hi = (j + 1) * t_len / dims.m_c;
                    DMatrix::identity(dims.n_xc, dims.n_xc)
                        * block_ar_coefficient(y, lo, hi, 1)
                } else {
                    random_transition(rng, dims.n_xc)
                };
                causal.push(CausalModeParams {
                    a,
                    c: random_output_map(rng, dims.n_y, dims.n_xc),
                    sigma: DMatrix::identity(dims.n_xc, dims.n_xc),
                });
            }
            let mut anticausal = Vec::with_capacity(dims.m_a);
            for l in 0..dims.m_a {
                let a = if matches!(strategy, InitStrategy::Segments) && t_len >= 2 * dims.m_a {
                    let lo = l * t_len / dims.m_a;
                    let hi = (l + 1) * t_len / dims.m_a;
                    DMatrix::identity(dims.n_xa, dims.n_xa)
                        * block_ar_coefficient(y, lo, hi, -1)
                } else {
                    random_transition(rng, dims.n_xa)
                };
                anticausal.push(AntiCausalModeParams {
                    a,
                    c: random_output_map(rng, dims.n_y, dims.n_xa),
                    sigma: DMatrix::identity(dims.n_xa, dims.n_xa),
                });
            }
            ThetaBundle {
                dims: dims.clone(),
                causal,
                anticausal,
                pi_c: vec![1.0 / dims.m_c as f64; dims.m_c],
                pi_a: vec![1.0 / dims.m_a as f64; dims.m_a],
                sigma_m: DMatrix::identity(dims.n_y, dims.n_y),
            }
        }
    }
}

/// Aligned per-chain match rate: best label-permutation agreement between
/// an estimated sequence and the truth, exhaustive over `m!` permutations.
fn best_match_rate(est: &[usize], truth: &[usize], m: usize) -> Option<f64> {
    if m > ALIGN_MAX_MODES || est.len() != truth.len() || est.is_empty() {
        return None;
    }
    let best = permutations(m)
        .into_iter()
        .map(|p| est.iter().zip(truth).filter(|(&e, &t)| p[e] == t).count())
        .max()?;
    Some(best as f64 / est.len() as f64)
}

/// All permutations of `0..m` in lexicographic order.
pub(crate) fn permutations(m: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut current = Vec::with_capacity(m);
    let mut used = vec![false; m];
    fn rec(m: usize, current: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if current.len() == m {
            out.push(current.clone());
            return;
        }
        for i in 0..m {
            if !used[i] {
                used[i] = true;
                current.push(i);
                rec(m, current, used, out);
                current.pop();
                used[i] = false;
            }
        }
    }
    rec(m, &mut current, &mut used, &mut out);
    out
}

/// Runs the EM loop on a trajectory. The trajectory only needs outputs;
/// ground-truth mode sequences, when present, enrich the per-iteration
/// records with aligned match rates.
pub fn fit(traj: &Trajectory, dims: &Dims, cfg: &EmConfig) -> Result<EmReport> {
    let t_len = traj.len();
    let min_len = 10 * dims.n_xc.max(dims.n_xa);
    if t_len < min_len {
        return Err(Error::Invalid(format!(
            "trajectory too short: T = {t_len}, need at least {min_len} (10x the larger state dimension)"
        )));
    }
    if cfg.max_iters < 1 {
        return Err(Error::Invalid("max_iters >= 1 required".to_string()));
    }
    if !(cfg.tol_q > 0.0) || !(cfg.tol_theta > 0.0) {
        return Err(Error::Invalid("tolerances must be positive".to_string()));
    }
    traj.check(dims)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut theta = initialize(&traj.y, dims, &cfg.init, &mut rng);
    validate_theta(&theta)?;

    let es_cfg = EStepConfig {
        sweeps: cfg.sweeps,
        soft_weights: cfg.soft_weights,
        joint_mode_search: cfg.joint_mode_search,
    };
    let freeze_threshold = FREEZE_FLIP_FRACTION * (2 * t_len) as f64;

    let mut prev_estep: Option<EStepOutput> = None;
    let mut frozen_labels: Option<(Vec<usize>, Vec<usize>)> = None;
    let mut iterates: Vec<IterateRecord> = Vec::new();
    let mut q_dips: Vec<usize> = Vec::new();
    let mut stop_reason = StopReason::MaxIterations;
    let mut abort: Option<AbortInfo> = None;

    for iter in 1..=cfg.max_iters {
        let at_iter = |e: Error| match e {
            Error::Numerical { location, message } => Error::Numerical {
                location: format!("{location} (EM iteration {iter})"),
                message,
            },
            other => other,
        };
        let es = match &frozen_labels {
            Some((sc, sa)) => {
                run_estep_with_labels(&theta, &traj.y, &es_cfg, prev_estep.as_ref(), sc, sa)
            }
            None => run_estep(&theta, &traj.y, &es_cfg, prev_estep.as_ref()),
        }
        .map_err(at_iter)?;

        // Cross-iteration surrogate monotonicity (the within-iteration
        // direction is asserted inside the M-step itself).
        if let Some(last) = iterates.last() {
            if es.q < last.q - Q_MONOTONE_SLACK {
                match cfg.monotone_q {
                    MonotoneQPolicy::Assert => {
                        // Stop without recording the violating iteration, so
                        // the returned iterate list stays monotone. Everything
                        // up to the previous iteration is kept.
                        abort = Some(AbortInfo {
                            iteration: iter,
                            message: format!(
                                "surrogate objective decreased across iterations: {:.6e} -> {:.6e}",
                                last.q, es.q
                            ),
                        });
                        stop_reason = StopReason::Aborted;
                        break;
                    }
                    MonotoneQPolicy::Permissive => {
                        log::warn!(
                            "surrogate dipped at iteration {iter}: {:.6e} -> {:.6e}",
                            last.q,
                            es.q
                        );
                        q_dips.push(iter);
                    }
                }
            }
        }

        let flip_count = prev_estep
            .as_ref()
            .map(|p| {
                count_flips(&p.s_c, &es.s_c) + count_flips(&p.s_a, &es.s_a)
            })
            .unwrap_or(2 * t_len);

        let (new_theta, mrep) = run_mstep(
            &theta,
            &traj.y,
            &es.weights,
            &es.filter.xhat_c_post,
            &es.filter.xhat_a_post,
        )
        .map_err(at_iter)?;
        let theta_delta = new_theta.max_abs_diff(&theta);

        let (match_rate_c, match_rate_a) = match (&traj.s_c, &traj.s_a) {
            (Some(tc), Some(ta)) => (
                best_match_rate(&es.s_c, tc, dims.m_c),
                best_match_rate(&es.s_a, ta, dims.m_a),
            ),
            _ => (None, None),
        };
        iterates.push(IterateRecord {
            iter,
            q: es.q,
            flip_count,
            theta_delta,
            ridge_events: mrep.ridge_events,
            frozen: frozen_labels.is_some(),
            match_rate_c,
            match_rate_a,
        });

        if frozen_labels.is_none() && iter >= 2 && (flip_count as f64) < freeze_threshold {
            log::debug!("freezing mode assignments after iteration {iter} ({flip_count} flips)");
            frozen_labels = Some((es.s_c.clone(), es.s_a.clone()));
        }

        let q_delta_small = iterates.len() >= 2 && {
            let prev_q = iterates[iterates.len() - 2].q;
            (es.q - prev_q).abs() / prev_q.abs().max(1.0) < cfg.tol_q
        };
        theta = new_theta;
        prev_estep = Some(es);

        if theta_delta < cfg.tol_theta {
            stop_reason = StopReason::TolTheta;
            break;
        }
        if q_delta_small {
            stop_reason = StopReason::TolQ;
            break;
        }
    }

    let last = prev_estep.expect("max_iters >= 1 guarantees at least one E-step");
    Ok(EmReport {
        final_theta: theta,
        final_states: last.filter,
        s_c: last.s_c,
        s_a: last.s_a,
        iterates,
        converged: matches!(stop_reason, StopReason::TolTheta | StopReason::TolQ),
        stop_reason,
        q_dips,
        abort,
    })
}

fn count_flips(a: &[usize], b: &[usize]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

/// Estimated quantities relabeled onto the ground-truth mode indexing.
#[derive(Debug, Clone)]
pub struct Aligned {
    /// Causal permutation: estimated label `j` means true label `perm_c[j]`.
    pub perm_c: Vec<usize>,
    /// Anti-causal permutation, likewise.
    pub perm_a: Vec<usize>,
    /// Parameters with modes reordered accordingly.
    pub theta: ThetaBundle,
    /// Relabeled causal sequence.
    pub s_c: Vec<usize>,
    /// Relabeled anti-causal sequence.
    pub s_a: Vec<usize>,
}

/// Resolves EM's mode-permutation symmetry against ground truth: picks the
/// per-chain permutations maximizing sequence match counts (exhaustive;
/// mode counts above 5 are rejected — use assignment-based matching there)
/// and applies them to both the sequences and the per-mode parameters.
pub fn align_modes(
    theta_hat: &ThetaBundle,
    s_c_hat: &[usize],
    s_a_hat: &[usize],
    s_c_true: &[usize],
    s_a_true: &[usize],
) -> Result<Aligned> {
    let (m_c, m_a) = (theta_hat.dims.m_c, theta_hat.dims.m_a);
    if m_c > ALIGN_MAX_MODES || m_a > ALIGN_MAX_MODES {
        return Err(Error::Unsupported(format!(
            "alignment is exhaustive over mode permutations and supports at most {ALIGN_MAX_MODES} \
             modes (got {m_c}/{m_a}); use assignment-based matching for larger mode counts"
        )));
    }
    if s_c_hat.len() != s_c_true.len() || s_a_hat.len() != s_a_true.len() {
        return Err(Error::Dimension {
            context: "mode alignment".to_string(),
            expected: format!("sequences of lengths {}/{}", s_c_true.len(), s_a_true.len()),
            got: format!("{}/{}", s_c_hat.len(), s_a_hat.len()),
        });
    }

    // Strict improvement keeps the lexicographically first permutation on
    // ties (so already-aligned inputs map through the identity).
    let best_perm = |est: &[usize], truth: &[usize], m: usize| {
        let perms = permutations(m);
        let mut best_idx = 0;
        let mut best_count = 0;
        for (i, p) in perms.iter().enumerate() {
            let count = est.iter().zip(truth).filter(|(&e, &t)| p[e] == t).count();
            if count > best_count {
                best_count = count;
                best_idx = i;
            }
        }
        perms[best_idx].clone()
    };
    let perm_c = best_perm(s_c_hat, s_c_true, m_c);
    let perm_a = best_perm(s_a_hat, s_a_true, m_a);

    // theta reorder: new slot i must hold the estimated mode that maps to
    // true label i, i.e. the inverse permutation.
    let invert = |p: &[usize]| {
        let mut inv = vec![0; p.len()];
        for (j, &target) in p.iter().enumerate() {
            inv[target] = j;
        }
        inv
    };
    let theta = theta_hat.permute_modes(&invert(&perm_c), &invert(&perm_a));
    Ok(Aligned {
        s_c: s_c_hat.iter().map(|&j| perm_c[j]).collect(),
        s_a: s_a_hat.iter().map(|&l| perm_a[l]).collect(),
        perm_c,
        perm_a,
        theta,
    })
}
