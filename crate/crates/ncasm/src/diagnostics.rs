//! Evaluation metrics and empirical probes: match rates, relative errors,
//! Gram-matrix spectra, residual boundedness curves, and the convergence-
//! rate probe.
//!
//! Everything here is a pure function of its inputs. Metrics that compare
//! against ground truth expect label-aligned sequences (see
//! [`crate::em::align_modes`]); the probes that run whole fits fan their
//! trials out in parallel and aggregate in a fixed order, so results are
//! deterministic for a given configuration.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;

use crate::em::{self, EmConfig, InitStrategy, MonotoneQPolicy};
use crate::error::{Error, Result};
use crate::model::{ThetaBundle, Trajectory};
use crate::simulate::{simulate, SimConfig};

/// Parameter errors below this are treated as numerically zero; log-log
/// slopes over such errors are noise, so the probe flags itself degenerate.
/// Parameter entries are O(1), making 1e-8 a conservative "exact" floor.
pub const DEGENERATE_ERROR_FLOOR: f64 = 1e-8;

/// Fraction of steps where the two (already aligned) sequences agree.
pub fn mode_match_rate(true_seq: &[usize], est_seq: &[usize]) -> Result<f64> {
    if true_seq.len() != est_seq.len() {
        return Err(Error::Dimension {
            context: "mode match rate".to_string(),
            expected: format!("sequences of equal length {}", true_seq.len()),
            got: format!("{}", est_seq.len()),
        });
    }
    if true_seq.is_empty() {
        return Err(Error::Invalid("mode match rate of empty sequences".to_string()));
    }
    let matches = true_seq.iter().zip(est_seq).filter(|(a, b)| a == b).count();
    Ok(matches as f64 / true_seq.len() as f64)
}

fn stacked_norm_squared(xs: &[DVector<f64>]) -> f64 {
    xs.iter().map(|v| v.norm_squared()).sum()
}

fn check_same_shape(a: &[DVector<f64>], b: &[DVector<f64>], context: &str) -> Result<()> {
    if a.len() != b.len() || a.iter().zip(b).any(|(u, v)| u.len() != v.len()) {
        return Err(Error::Dimension {
            context: context.to_string(),
            expected: format!("two sequences of {} equally sized vectors", a.len()),
            got: format!("lengths {} and {}", a.len(), b.len()),
        });
    }
    Ok(())
}

/// Relative state estimation error: the *squared*-norm ratio
/// `‖x − x̂‖² / ‖x‖²` over the full stacked sequence.
pub fn relative_state_error(x_true: &[DVector<f64>], x_hat: &[DVector<f64>]) -> Result<f64> {
    check_same_shape(x_true, x_hat, "relative state error")?;
    let denom = stacked_norm_squared(x_true);
    if denom <= 0.0 {
        return Err(Error::Invalid(
            "relative state error undefined for zero-norm truth".to_string(),
        ));
    }
    let num: f64 = x_true.iter().zip(x_hat).map(|(t, h)| (t - h).norm_squared()).sum();
    Ok(num / denom)
}

/// Output reconstruction error: the plain norm ratio `‖y − ŷ‖ / ‖y‖`
/// (not squared — deliberately a different definition than
/// [`relative_state_error`], matching how reconstruction quality is
/// conventionally reported for outputs).
pub fn output_reconstruction_error(y: &[DVector<f64>], y_hat: &[DVector<f64>]) -> Result<f64> {
    check_same_shape(y, y_hat, "output reconstruction error")?;
    let denom = stacked_norm_squared(y);
    if denom <= 0.0 {
        return Err(Error::Invalid(
            "output reconstruction error undefined for zero-norm outputs".to_string(),
        ));
    }
    let num: f64 = y.iter().zip(y_hat).map(|(t, h)| (t - h).norm_squared()).sum();
    Ok((num / denom).sqrt())
}

/// Rebuilds the noise-free output sequence implied by state estimates and a
/// mode assignment: `ŷ(t) = C_c(s_c(t)) x_c(t) + C_a(s_a(t)) x_a(t)`.
pub fn reconstruct_outputs(
    theta: &ThetaBundle,
    x_c: &[DVector<f64>],
    x_a: &[DVector<f64>],
    s_c: &[usize],
    s_a: &[usize],
) -> Result<Vec<DVector<f64>>> {
    let t_len = x_c.len();
    if x_a.len() != t_len || s_c.len() != t_len || s_a.len() != t_len {
        return Err(Error::Dimension {
            context: "output reconstruction".to_string(),
            expected: format!("four sequences of length {t_len}"),
            got: format!("{}, {}, {}", x_a.len(), s_c.len(), s_a.len()),
        });
    }
    let mut y_hat = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let (jc, ja) = (s_c[t], s_a[t]);
        if jc >= theta.causal.len() || ja >= theta.anticausal.len() {
            return Err(Error::Invalid(format!(
                "output reconstruction: mode label out of range at step {t}"
            )));
        }
        y_hat.push(&theta.causal[jc].c * &x_c[t] + &theta.anticausal[ja].c * &x_a[t]);
    }
    Ok(y_hat)
}

/// Eigenvalue range of one mode-restricted Gram matrix
/// `W_j = Σ_{t: s(t)=j} x(t) x(t)ᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct GramSpectrum {
    /// Smallest eigenvalue (0 when the partition is empty).
    pub lambda_min: f64,
    /// Largest eigenvalue (0 when the partition is empty).
    pub lambda_max: f64,
    /// Steps assigned to this mode.
    pub count: usize,
    /// Set when no step carries this mode, making the spectrum vacuous.
    pub empty: bool,
}

/// Per-mode Gram spectra of a state sequence under a mode assignment.
pub fn gram_spectra(
    x: &[DVector<f64>],
    mode_seq: &[usize],
    m: usize,
) -> Result<Vec<GramSpectrum>> {
    if x.len() != mode_seq.len() {
        return Err(Error::Dimension {
            context: "Gram spectra".to_string(),
            expected: format!("{} mode labels", x.len()),
            got: format!("{}", mode_seq.len()),
        });
    }
    if let Some(&bad) = mode_seq.iter().find(|&&s| s >= m) {
        return Err(Error::Invalid(format!("mode label {bad} out of range for {m} modes")));
    }
    let n = x.first().map_or(0, |v| v.len());
    let mut grams = vec![DMatrix::zeros(n, n); m];
    let mut counts = vec![0usize; m];
    for (xt, &s) in x.iter().zip(mode_seq) {
        grams[s] += xt * xt.transpose();
        counts[s] += 1;
    }
    Ok(grams
        .into_iter()
        .zip(counts)
        .map(|(w, count)| {
            if count == 0 {
                GramSpectrum { lambda_min: 0.0, lambda_max: 0.0, count, empty: true }
            } else {
                let eig = SymmetricEigen::new(w);
                GramSpectrum {
                    lambda_min: eig.eigenvalues.min(),
                    lambda_max: eig.eigenvalues.max(),
                    count,
                    empty: false,
                }
            }
        })
        .collect())
}

/// Running-mean curves of the squared residual norms, with boundedness
/// flags.
#[derive(Debug, Clone)]
pub struct ResidualCurves {
    /// Running mean of `‖x_c(t) − A_c(ŝ_c(t)) x_c(t−1)‖²`.
    pub eta_c: Vec<f64>,
    /// Running mean of `‖x_a(t) − A_a(ŝ_a(t)) x_a(t+1)‖²`.
    pub eta_a: Vec<f64>,
    /// Running mean of `‖y(t) − C_c x_c(t) − C_a x_a(t)‖²`.
    pub eta_m: Vec<f64>,
    /// Final mean at most twice the halfway mean, per residual.
    pub bounded_c: bool,
    /// See `bounded_c`.
    pub bounded_a: bool,
    /// See `bounded_c`.
    pub bounded_m: bool,
}

fn running_means(sq: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(sq.len());
    let mut acc = 0.0;
    for (i, v) in sq.iter().enumerate() {
        acc += v;
        out.push(acc / (i + 1) as f64);
    }
    out
}

fn bounded(curve: &[f64]) -> bool {
    match (curve.last(), curve.get(curve.len() / 2)) {
        (Some(&fin), Some(&half)) => fin <= 2.0 * half,
        _ => true,
    }
}

/// Residual boundedness probe: evaluates the three model residuals on
/// ground-truth states under the given parameters and mode assignments,
/// and reports running means plus a doubling flag. It reports rather than
/// asserts — boundedness is the claim under scrutiny.
pub fn residual_boundedness(
    traj: &Trajectory,
    theta: &ThetaBundle,
    s_c: &[usize],
    s_a: &[usize],
) -> Result<ResidualCurves> {
    let (x_c, x_a) = match (&traj.x_c, &traj.x_a) {
        (Some(c), Some(a)) => (c, a),
        _ => {
            return Err(Error::Invalid(
                "residual boundedness needs ground-truth states (simulated data)".to_string(),
            ))
        }
    };
    let t_len = traj.len();
    if s_c.len() != t_len || s_a.len() != t_len {
        return Err(Error::Dimension {
            context: "residual boundedness".to_string(),
            expected: format!("mode sequences of length {t_len}"),
            got: format!("{}/{}", s_c.len(), s_a.len()),
        });
    }

    let sq_c: Vec<f64> = (1..t_len)
        .map(|t| (&x_c[t] - &theta.causal[s_c[t]].a * &x_c[t - 1]).norm_squared())
        .collect();
    let sq_a: Vec<f64> = (0..t_len - 1)
        .map(|t| (&x_a[t] - &theta.anticausal[s_a[t]].a * &x_a[t + 1]).norm_squared())
        .collect();
    let sq_m: Vec<f64> = (0..t_len)
        .map(|t| {
            (&traj.y[t]
                - &theta.causal[s_c[t]].c * &x_c[t]
                - &theta.anticausal[s_a[t]].c * &x_a[t])
                .norm_squared()
        })
        .collect();

    let eta_c = running_means(&sq_c);
    let eta_a = running_means(&sq_a);
    let eta_m = running_means(&sq_m);
    Ok(ResidualCurves {
        bounded_c: bounded(&eta_c),
        bounded_a: bounded(&eta_a),
        bounded_m: bounded(&eta_m),
        eta_c,
        eta_a,
        eta_m,
    })
}

/// One trial's aligned per-matrix errors and per-mode Gram spectra.
#[derive(Debug, Clone)]
struct TrialResult {
    errors: Vec<f64>,
    gram_c: Vec<GramSpectrum>,
    gram_a: Vec<GramSpectrum>,
    q_dips: usize,
}

/// Convergence-rate probe output.
#[derive(Debug, Clone)]
pub struct RateProbe {
    /// Simulated horizons, strictly increasing.
    pub horizons: Vec<usize>,
    /// Human-readable matrix labels, e.g. `A_c(1)`, `C_a(2)`.
    pub matrix_labels: Vec<String>,
    /// `per_seed_errors[h][seed][matrix]`: aligned max-abs-entry error.
    pub per_seed_errors: Vec<Vec<Vec<f64>>>,
    /// `median_errors[matrix][h]`: per-matrix median over seeds.
    pub median_errors: Vec<Vec<f64>>,
    /// `gram_c[h][seed][mode]` spectra of estimated causal states.
    pub gram_c: Vec<Vec<Vec<GramSpectrum>>>,
    /// `gram_a[h][seed][mode]`, likewise for the anti-causal chain.
    pub gram_a: Vec<Vec<Vec<GramSpectrum>>>,
    /// Per-matrix least-squares slope of `ln(median error)` against
    /// `ln √(ln T / T)`.
    pub slopes: Vec<f64>,
    /// Median of `slopes`.
    pub median_slope: f64,
    /// Per-matrix flag: median errors non-increasing in T.
    pub monotone: Vec<bool>,
    /// Errors are numerically zero somewhere, so log-slopes are vacuous.
    pub degenerate: bool,
    /// At least two horizons (otherwise no slope exists).
    pub slope_defined: bool,
    /// Total cross-iteration surrogate dips recorded over all fits.
    pub q_dips_total: usize,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
}

/// Runs one probe trial: simulate at the horizon, fit from a perturbed
/// start, align, and measure per-matrix errors.
fn rate_trial(theta_true: &ThetaBundle, t_len: usize, seed: u64, rho: f64) -> Result<TrialResult> {
    let traj = simulate(theta_true, &SimConfig::new(t_len, seed))?;
    let cfg = EmConfig {
        max_iters: 50,
        init: InitStrategy::Perturb { reference: Box::new(theta_true.clone()), rho },
        seed,
        monotone_q: MonotoneQPolicy::Permissive,
        ..Default::default()
    };
    let report = em::fit(&traj, &theta_true.dims, &cfg)?;
    let aligned = em::align_modes(
        &report.final_theta,
        &report.s_c,
        &report.s_a,
        traj.s_c.as_ref().expect("simulated trajectories carry labels"),
        traj.s_a.as_ref().expect("simulated trajectories carry labels"),
    )?;

    let mut errors = Vec::new();
    for (j, mode) in aligned.theta.causal.iter().enumerate() {
        errors.push(max_abs(&(&mode.a - &theta_true.causal[j].a)));
        errors.push(max_abs(&(&mode.c - &theta_true.causal[j].c)));
    }
    for (l, mode) in aligned.theta.anticausal.iter().enumerate() {
        errors.push(max_abs(&(&mode.a - &theta_true.anticausal[l].a)));
        errors.push(max_abs(&(&mode.c - &theta_true.anticausal[l].c)));
    }
    let gram_c =
        gram_spectra(&report.final_states.xhat_c_post, &aligned.s_c, theta_true.dims.m_c)?;
    let gram_a =
        gram_spectra(&report.final_states.xhat_a_post, &aligned.s_a, theta_true.dims.m_a)?;
    Ok(TrialResult { errors, gram_c, gram_a, q_dips: report.q_dips.len() })
}

/// Matrix labels in the fixed order `rate_trial` emits errors.
fn matrix_labels(theta: &ThetaBundle) -> Vec<String> {
    let mut labels = Vec::new();
    for j in 0..theta.dims.m_c {
        labels.push(format!("A_c({})", j + 1));
        labels.push(format!("C_c({})", j + 1));
    }
    for l in 0..theta.dims.m_a {
        labels.push(format!("A_a({})", l + 1));
        labels.push(format!("C_a({})", l + 1));
    }
    labels
}

/// Convergence-rate probe: for each horizon and seed, simulates, fits EM
/// from a perturbation of the truth (isolating estimation error from
/// optimization error), aligns labels, and measures per-matrix max-abs
/// errors; then fits per-matrix log-log slopes against `√(ln T / T)`.
/// Trials run in parallel; aggregation order is fixed.
pub fn rate_probe(
    theta_true: &ThetaBundle,
    horizons: &[usize],
    seeds: &[u64],
    rho: f64,
) -> Result<RateProbe> {
    if horizons.is_empty() || seeds.is_empty() {
        return Err(Error::Invalid("rate probe needs horizons and seeds".to_string()));
    }
    if horizons.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Invalid("horizons must be strictly increasing".to_string()));
    }
    if horizons[0] < 100 || *horizons.last().unwrap() > 100_000 {
        return Err(Error::Invalid(
            "horizons must lie within [100, 100000]".to_string(),
        ));
    }

    let jobs: Vec<(usize, u64)> = horizons
        .iter()
        .flat_map(|&t| seeds.iter().map(move |&s| (t, s)))
        .collect();
    let trials: Result<Vec<TrialResult>> = jobs
        .par_iter()
        .map(|&(t_len, seed)| rate_trial(theta_true, t_len, seed, rho))
        .collect();
    let trials = trials?;

    let n_seeds = seeds.len();
    let n_matrices = matrix_labels(theta_true).len();
    let per_seed_errors: Vec<Vec<Vec<f64>>> = (0..horizons.len())
        .map(|h| (0..n_seeds).map(|s| trials[h * n_seeds + s].errors.clone()).collect())
        .collect();
    let gram_c: Vec<Vec<Vec<GramSpectrum>>> = (0..horizons.len())
        .map(|h| (0..n_seeds).map(|s| trials[h * n_seeds + s].gram_c.clone()).collect())
        .collect();
    let gram_a: Vec<Vec<Vec<GramSpectrum>>> = (0..horizons.len())
        .map(|h| (0..n_seeds).map(|s| trials[h * n_seeds + s].gram_a.clone()).collect())
        .collect();
    let q_dips_total = trials.iter().map(|t| t.q_dips).sum();

    let median_errors: Vec<Vec<f64>> = (0..n_matrices)
        .map(|mat| {
            (0..horizons.len())
                .map(|h| median((0..n_seeds).map(|s| per_seed_errors[h][s][mat]).collect()))
                .collect()
        })
        .collect();

    let degenerate = median_errors.iter().flatten().any(|&e| e < DEGENERATE_ERROR_FLOOR);
    let slope_defined = horizons.len() >= 2 && !degenerate;

    // Abscissa of the asymptotic law: ln √(ln T / T).
    let xs: Vec<f64> = horizons
        .iter()
        .map(|&t| 0.5 * (((t as f64).ln()).ln() - (t as f64).ln()))
        .collect();
    let ls_slope = |ys: &[f64]| {
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
        sxy / sxx
    };
    let slopes: Vec<f64> = if slope_defined {
        median_errors
            .iter()
            .map(|errs| ls_slope(&errs.iter().map(|e| e.ln()).collect::<Vec<_>>()))
            .collect()
    } else {
        vec![f64::NAN; n_matrices]
    };
    let median_slope = if slope_defined { median(slopes.clone()) } else { f64::NAN };
    let monotone: Vec<bool> = median_errors
        .iter()
        .map(|errs| errs.windows(2).all(|w| w[1] <= w[0]))
        .collect();

    Ok(RateProbe {
        horizons: horizons.to_vec(),
        matrix_labels: matrix_labels(theta_true),
        per_seed_errors,
        median_errors,
        gram_c,
        gram_a,
        slopes,
        median_slope,
        monotone,
        degenerate,
        slope_defined,
        q_dips_total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{benchmark_system, example1};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn match_rate_counts_exactly() {
        assert_eq!(mode_match_rate(&[0, 1, 1, 0], &[0, 1, 1, 0]).unwrap(), 1.0);
        assert_eq!(mode_match_rate(&[0, 1, 1, 0], &[0, 0, 1, 1]).unwrap(), 0.5);
        assert!(mode_match_rate(&[0, 1], &[0]).is_err());
        assert!(mode_match_rate(&[], &[]).is_err());
    }

    #[test]
    fn match_rate_is_permutation_covariant() {
        let truth = vec![0, 1, 2, 1, 0, 2, 2];
        let est = vec![0, 1, 1, 1, 2, 2, 0];
        let base = mode_match_rate(&truth, &est).unwrap();
        let perm = [2, 0, 1];
        let truth_p: Vec<usize> = truth.iter().map(|&s| perm[s]).collect();
        let est_p: Vec<usize> = est.iter().map(|&s| perm[s]).collect();
        assert_eq!(mode_match_rate(&truth_p, &est_p).unwrap(), base);
    }

    fn randn_states(n: usize, dim: usize, seed: u64) -> Vec<DVector<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal)))
            .collect()
    }

    #[test]
    fn state_error_trivial_cases() {
        let x = randn_states(20, 3, 1);
        assert_eq!(relative_state_error(&x, &x).unwrap(), 0.0);
        let zeros = vec![DVector::zeros(3); 20];
        assert_relative_eq!(relative_state_error(&x, &zeros).unwrap(), 1.0, max_relative = 1e-15);
        assert!(relative_state_error(&zeros, &x).is_err(), "zero-norm truth must error");
    }

    #[test]
    fn state_error_is_rotation_invariant() {
        let x = randn_states(30, 2, 2);
        let xh = randn_states(30, 2, 3);
        let base = relative_state_error(&x, &xh).unwrap();
        let th = 0.83f64;
        let q = DMatrix::from_row_slice(2, 2, &[th.cos(), -th.sin(), th.sin(), th.cos()]);
        let xr: Vec<DVector<f64>> = x.iter().map(|v| &q * v).collect();
        let xhr: Vec<DVector<f64>> = xh.iter().map(|v| &q * v).collect();
        assert_relative_eq!(relative_state_error(&xr, &xhr).unwrap(), base, max_relative = 1e-12);
    }

    #[test]
    fn output_error_trivial_cases() {
        let y = randn_states(25, 2, 4);
        assert_eq!(output_reconstruction_error(&y, &y).unwrap(), 0.0);
        let doubled: Vec<DVector<f64>> = y.iter().map(|v| v * 2.0).collect();
        assert_relative_eq!(
            output_reconstruction_error(&y, &doubled).unwrap(),
            1.0,
            max_relative = 1e-15
        );
        let zeros = vec![DVector::zeros(2); 25];
        assert!(output_reconstruction_error(&zeros, &y).is_err());
    }

    #[test]
    fn reconstruction_from_true_states_matches_noiseless_outputs() {
        let theta = benchmark_system(0.0);
        // Zero process noise: energetic boundaries keep the states (and so
        // the outputs) well away from the measurement-noise floor.
        let cfg = SimConfig {
            t_len: 300,
            seed: 21,
            x_c_init: Some(DVector::from_element(2, 3.0)),
            x_a_terminal: Some(DVector::from_element(2, 3.0)),
        };
        let traj = simulate(&theta, &cfg).unwrap();
        let y_hat = reconstruct_outputs(
            &theta,
            traj.x_c.as_ref().unwrap(),
            traj.x_a.as_ref().unwrap(),
            traj.s_c.as_ref().unwrap(),
            traj.s_a.as_ref().unwrap(),
        )
        .unwrap();
        // Only the floored measurement noise (std 1e-9) separates y from ŷ.
        assert!(output_reconstruction_error(&traj.y, &y_hat).unwrap() < 1e-6);

        let truncated = &traj.x_c.as_ref().unwrap()[..100];
        assert!(reconstruct_outputs(
            &theta,
            truncated,
            traj.x_a.as_ref().unwrap(),
            traj.s_c.as_ref().unwrap(),
            traj.s_a.as_ref().unwrap(),
        )
        .is_err());
    }

    #[test]
    fn gram_spectrum_of_repeated_unit_vector_is_rank_one() {
        let e1 = DVector::from_row_slice(&[1.0, 0.0]);
        let x = vec![e1; 10];
        let s = vec![0usize; 10];
        let out = gram_spectra(&x, &s, 1).unwrap();
        assert_relative_eq!(out[0].lambda_max, 10.0, max_relative = 1e-12);
        assert!(out[0].lambda_min.abs() < 1e-12);
        assert!(!out[0].empty);
    }

    #[test]
    fn gram_partition_identity_holds() {
        let x = randn_states(200, 3, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s: Vec<usize> = (0..200).map(|_| rng.gen_range(0..3)).collect();
        let out = gram_spectra(&x, &s, 3).unwrap();
        // Trace of each Gram equals the energy of its partition; eigenvalue
        // sums reproduce them, so the grand total matches the state energy.
        let total: f64 = x.iter().map(|v| v.norm_squared()).sum();
        let mut grams = vec![DMatrix::zeros(3, 3); 3];
        for (xt, &st) in x.iter().zip(&s) {
            grams[st] += xt * xt.transpose();
        }
        let trace_sum: f64 = grams.iter().map(|g| g.trace()).sum();
        assert_relative_eq!(trace_sum, total, max_relative = 1e-12);
        for spec in &out {
            assert!(spec.lambda_min <= spec.lambda_max);
        }
    }

    #[test]
    fn gram_spectra_flags_empty_modes() {
        let x = randn_states(10, 2, 7);
        let s = vec![0usize; 10];
        let out = gram_spectra(&x, &s, 2).unwrap();
        assert!(out[1].empty);
        assert_eq!(out[1].lambda_min, 0.0);
        assert_eq!(out[1].lambda_max, 0.0);
        assert_eq!(out[0].count, 10);
    }

    #[test]
    fn gram_minimum_eigenvalue_tracks_state_variance() {
        // Isotropic unit-variance states: λ_min/T converges to 1.
        let t_len = 10_000;
        let x = randn_states(t_len, 2, 8);
        let s = vec![0usize; t_len];
        let out = gram_spectra(&x, &s, 1).unwrap();
        let ratio = out[0].lambda_min / t_len as f64;
        assert!((ratio - 1.0).abs() < 0.2, "λ_min/T = {ratio}, expected ≈ 1");
    }

    #[test]
    fn gram_minimum_grows_with_horizon() {
        // Persistently excited states keep λ_min increasing with T.
        let theta = example1();
        let mut last = 0.0;
        for (i, t_len) in [400usize, 1600, 6400].into_iter().enumerate() {
            let traj = simulate(&theta, &SimConfig::new(t_len, 3)).unwrap();
            let out =
                gram_spectra(traj.x_c.as_ref().unwrap(), traj.s_c.as_ref().unwrap(), 2).unwrap();
            let min_over_modes =
                out.iter().map(|g| g.lambda_min).fold(f64::INFINITY, f64::min);
            assert!(
                min_over_modes > last,
                "λ_min did not grow at horizon index {i}: {min_over_modes} <= {last}"
            );
            last = min_over_modes;
        }
    }

    #[test]
    fn residuals_at_truth_match_noise_covariance_trace() {
        // With true parameters, states, and modes, η_c is exactly the
        // process noise, so its mean squared norm approaches tr(Σ_c) = 2.
        let theta = example1();
        let traj = simulate(&theta, &SimConfig::new(10_000, 9)).unwrap();
        let curves = residual_boundedness(
            &traj,
            &theta,
            traj.s_c.as_ref().unwrap(),
            traj.s_a.as_ref().unwrap(),
        )
        .unwrap();
        let final_c = *curves.eta_c.last().unwrap();
        let final_m = *curves.eta_m.last().unwrap();
        assert!((final_c - 2.0).abs() / 2.0 < 0.15, "mean ‖η_c‖² = {final_c}, expected ≈ 2");
        assert!((final_m - 1.0).abs() < 0.15, "mean ‖η_m‖² = {final_m}, expected ≈ 1");
        assert!(curves.bounded_c && curves.bounded_a && curves.bounded_m);
    }

    #[test]
    fn residuals_vanish_without_noise() {
        let theta = benchmark_system(0.0);
        let traj = simulate(&theta, &SimConfig::new(300, 10)).unwrap();
        let curves = residual_boundedness(
            &traj,
            &theta,
            traj.s_c.as_ref().unwrap(),
            traj.s_a.as_ref().unwrap(),
        )
        .unwrap();
        // Chain noises are exactly zero; the measurement covariance carries
        // its tiny positive-definiteness floor (1e-18), hence the bound.
        assert!(curves.eta_c.last().unwrap() < &1e-24);
        assert!(curves.eta_a.last().unwrap() < &1e-24);
        assert!(curves.eta_m.last().unwrap() < &1e-12);
        assert!(curves.bounded_c && curves.bounded_a && curves.bounded_m);
    }

    #[test]
    fn residual_probe_reports_even_for_wrong_parameters() {
        // A deliberately inflated transition matrix: the probe reports
        // curves and flags without asserting anything about them.
        let theta = example1();
        let mut wrong = theta.clone();
        wrong.causal[0].a *= 1.5;
        let traj = simulate(&theta, &SimConfig::new(2_000, 11)).unwrap();
        let curves = residual_boundedness(
            &traj,
            &wrong,
            traj.s_c.as_ref().unwrap(),
            traj.s_a.as_ref().unwrap(),
        )
        .unwrap();
        assert!(curves.eta_c.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn residual_probe_requires_states() {
        let theta = example1();
        let traj = Trajectory::from_outputs(vec![DVector::zeros(1); 50]);
        let err = residual_boundedness(&traj, &theta, &[0; 50], &[0; 50]).unwrap_err();
        assert!(err.to_string().contains("ground-truth states"));
    }

    #[test]
    fn rate_probe_flags_degenerate_noiseless_runs() {
        // Zero noise and zero perturbation: the fit stays at the truth, all
        // errors are numerically zero, and slopes are meaningless.
        let theta = benchmark_system(0.0);
        let probe = rate_probe(&theta, &[100, 200], &[1, 2], 0.0).unwrap();
        assert!(probe.degenerate);
        assert!(!probe.slope_defined);
        assert!(probe.median_slope.is_nan());
    }

    #[test]
    fn rate_probe_single_horizon_has_no_slope() {
        let theta = benchmark_system(0.1);
        let probe = rate_probe(&theta, &[150], &[1, 2, 3], 0.05).unwrap();
        assert!(!probe.slope_defined);
        assert_eq!(probe.median_errors[0].len(), 1);
        assert!(probe.slopes.iter().all(|s| s.is_nan()));
    }

    #[test]
    fn rate_probe_rejects_bad_horizons() {
        let theta = benchmark_system(0.1);
        assert!(rate_probe(&theta, &[200, 200], &[1], 0.05).is_err());
        assert!(rate_probe(&theta, &[50, 200], &[1], 0.05).is_err());
        assert!(rate_probe(&theta, &[], &[1], 0.05).is_err());
    }

    #[test]
    fn rate_probe_is_deterministic_despite_parallelism() {
        let theta = benchmark_system(0.5);
        let a = rate_probe(&theta, &[100, 300], &[1, 2, 3], 0.05).unwrap();
        let b = rate_probe(&theta, &[100, 300], &[1, 2, 3], 0.05).unwrap();
        assert_eq!(a.median_errors, b.median_errors);
        assert_eq!(a.slopes, b.slopes);
    }
}
