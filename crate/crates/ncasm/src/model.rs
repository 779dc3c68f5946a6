//! Model types for non-causal switching linear state-space systems.
//!
//! The model couples two hidden state chains through one output equation:
//! a causal chain driven forward in time, `x_c(t) = A_c(s_c(t)) x_c(t-1) + v_c(t)`,
//! and an anti-causal chain driven backward, `x_a(t) = A_a(s_a(t)) x_a(t+1) + v_a(t)`,
//! with the shared measurement `y(t) = C_c(s_c(t)) x_c(t) + C_a(s_a(t)) x_a(t) + v_m(t)`.
//! The per-step mode labels `s_c(t)`, `s_a(t)` are i.i.d. categorical draws with
//! probabilities `pi_c`, `pi_a`, and all noises are zero-mean Gaussians.
//!
//! This module holds the parameter bundle, its validation, spectral-radius
//! diagnostics, and the two bundled reference systems used across tests and
//! the CLI (`example1` and `benchmark_system`).
//!
//! Mode labels are 0-based everywhere inside the crate; file formats use
//! 1-based labels and convert at the I/O boundary.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute tolerance for symmetry checks on covariance matrices.
pub const SYM_TOL: f64 = 1e-10;
/// Eigenvalue floor for the positive-semidefiniteness check; estimated
/// covariances accumulate floating-point asymmetry and tiny negative modes.
pub const PSD_EIG_FLOOR: f64 = -1e-10;
/// Tolerance on `sum(pi) == 1`.
pub const PI_SUM_TOL: f64 = 1e-12;

/// Problem dimensions: state sizes, output size, and mode counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    /// Causal state dimension.
    pub n_xc: usize,
    /// Anti-causal state dimension.
    pub n_xa: usize,
    /// Output dimension.
    pub n_y: usize,
    /// Number of causal modes.
    pub m_c: usize,
    /// Number of anti-causal modes.
    pub m_a: usize,
}

impl Dims {
    fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        for (name, val) in [
            ("n_xc", self.n_xc),
            ("n_xa", self.n_xa),
            ("n_y", self.n_y),
            ("m_c", self.m_c),
            ("m_a", self.m_a),
        ] {
            if val < 1 {
                v.push(format!("dims.{name}: must be >= 1, got {val}"));
            }
        }
        v
    }
}

/// Per-mode parameters of the causal chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalModeParams {
    /// State transition matrix, `n_xc x n_xc`.
    #[serde(rename = "A_c", with = "mat_json")]
    pub a: DMatrix<f64>,
    /// Output map, `n_y x n_xc`.
    #[serde(rename = "C_c", with = "mat_json")]
    pub c: DMatrix<f64>,
    /// Process-noise covariance, `n_xc x n_xc`, symmetric PSD.
    #[serde(rename = "Sigma_c", with = "mat_json")]
    pub sigma: DMatrix<f64>,
}

/// Per-mode parameters of the anti-causal chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AntiCausalModeParams {
    /// State transition matrix, `n_xa x n_xa` (applied to the *next* state).
    #[serde(rename = "A_a", with = "mat_json")]
    pub a: DMatrix<f64>,
    /// Output map, `n_y x n_xa`.
    #[serde(rename = "C_a", with = "mat_json")]
    pub c: DMatrix<f64>,
    /// Process-noise covariance, `n_xa x n_xa`, symmetric PSD.
    #[serde(rename = "Sigma_a", with = "mat_json")]
    pub sigma: DMatrix<f64>,
}

/// Complete parameter set of a non-causal switching system.
///
/// Serializes to a JSON document with keys `dims`, `causal`, `anticausal`,
/// `pi_c`, `pi_a`, `Sigma_m`; matrices are row-major nested arrays whose
/// floats re-parse to the identical IEEE-754 doubles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaBundle {
    /// Problem dimensions.
    pub dims: Dims,
    /// Causal mode parameters, length `m_c`.
    pub causal: Vec<CausalModeParams>,
    /// Anti-causal mode parameters, length `m_a`.
    pub anticausal: Vec<AntiCausalModeParams>,
    /// Causal mode probabilities, length `m_c`, nonnegative, sums to 1.
    pub pi_c: Vec<f64>,
    /// Anti-causal mode probabilities, length `m_a`.
    pub pi_a: Vec<f64>,
    /// Measurement-noise covariance, `n_y x n_y`, symmetric positive definite.
    #[serde(rename = "Sigma_m", with = "mat_json")]
    pub sigma_m: DMatrix<f64>,
}

/// Per-time mode labels (0-based), one entry per time step.
pub type ModeSequence = Vec<usize>;

/// A simulated or measured trajectory. Only `y` is mandatory; states and
/// mode labels are present for simulated data and used for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// Outputs, one `n_y` vector per time step.
    pub y: Vec<DVector<f64>>,
    /// Causal states (ground truth, simulation only).
    pub x_c: Option<Vec<DVector<f64>>>,
    /// Anti-causal states (ground truth, simulation only).
    pub x_a: Option<Vec<DVector<f64>>>,
    /// True causal mode labels (simulation only).
    pub s_c: Option<ModeSequence>,
    /// True anti-causal mode labels (simulation only).
    pub s_a: Option<ModeSequence>,
}

impl Trajectory {
    /// Builds an output-only trajectory.
    pub fn from_outputs(y: Vec<DVector<f64>>) -> Self {
        Trajectory { y, x_c: None, x_a: None, s_c: None, s_a: None }
    }

    /// Horizon length `T`.
    pub fn len(&self) -> usize {
        self.y.len()
    }

    /// True when the trajectory holds no samples.
    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Checks internal consistency and agreement with `dims`:
    /// all present sequences share the same length, `T >= 2`, every output
    /// has dimension `n_y`, and mode labels are within range.
    pub fn check(&self, dims: &Dims) -> Result<()> {
        let t_len = self.y.len();
        if t_len < 2 {
            return Err(Error::Invalid(format!("trajectory: T >= 2 required, got {t_len}")));
        }
        for (name, len) in [
            ("x_c", self.x_c.as_ref().map(Vec::len)),
            ("x_a", self.x_a.as_ref().map(Vec::len)),
            ("s_c", self.s_c.as_ref().map(Vec::len)),
            ("s_a", self.s_a.as_ref().map(Vec::len)),
        ] {
            if let Some(len) = len {
                if len != t_len {
                    return Err(Error::Dimension {
                        context: format!("trajectory.{name}"),
                        expected: format!("length {t_len}"),
                        got: format!("length {len}"),
                    });
                }
            }
        }
        if let Some(bad) = self.y.iter().position(|v| v.len() != dims.n_y) {
            return Err(Error::Dimension {
                context: format!("trajectory.y[{bad}]"),
                expected: format!("dimension {}", dims.n_y),
                got: format!("dimension {}", self.y[bad].len()),
            });
        }
        for (name, seq, m) in [
            ("s_c", &self.s_c, dims.m_c),
            ("s_a", &self.s_a, dims.m_a),
        ] {
            if let Some(seq) = seq {
                if let Some(bad) = seq.iter().position(|&s| s >= m) {
                    return Err(Error::Invalid(format!(
                        "trajectory.{name}[{bad}]: label {} out of range for {m} modes",
                        seq[bad]
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Spectral radii of every mode's transition matrix, with instability flags.
///
/// A flagged mode (`rho >= 1`) is a warning, not an error: the model only
/// requires bounded time-averaged state energy, which can hold with
/// individually unstable modes as long as the mode mixture contracts on
/// average.
#[derive(Debug, Clone, Serialize)]
pub struct SpectralRadiusReport {
    /// `rho(A_c(j))` per causal mode.
    pub rho_causal: Vec<f64>,
    /// `rho(A_a(l))` per anti-causal mode.
    pub rho_anticausal: Vec<f64>,
    /// `rho_causal[j] >= 1`.
    pub flagged_causal: Vec<bool>,
    /// `rho_anticausal[l] >= 1`.
    pub flagged_anticausal: Vec<bool>,
}

impl SpectralRadiusReport {
    /// True when any mode of either chain is flagged.
    pub fn any_flagged(&self) -> bool {
        self.flagged_causal.iter().chain(&self.flagged_anticausal).any(|&f| f)
    }
}

/// Largest eigenvalue modulus of a square matrix.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

impl ThetaBundle {
    /// Returns every violated invariant, one human-readable line each.
    /// An empty vector means the bundle is valid.
    pub fn violations(&self) -> Vec<String> {
        let mut v = self.dims.violations();
        let d = &self.dims;
        if self.causal.len() != d.m_c {
            v.push(format!("causal: expected {} mode entries, got {}", d.m_c, self.causal.len()));
        }
        if self.anticausal.len() != d.m_a {
            v.push(format!(
                "anticausal: expected {} mode entries, got {}",
                d.m_a,
                self.anticausal.len()
            ));
        }
        for (j, mode) in self.causal.iter().enumerate() {
            check_shape(&mut v, &format!("causal[{j}].A_c"), &mode.a, d.n_xc, d.n_xc);
            check_shape(&mut v, &format!("causal[{j}].C_c"), &mode.c, d.n_y, d.n_xc);
            check_shape(&mut v, &format!("causal[{j}].Sigma_c"), &mode.sigma, d.n_xc, d.n_xc);
            check_psd(&mut v, &format!("causal[{j}].Sigma_c"), &mode.sigma);
        }
        for (l, mode) in self.anticausal.iter().enumerate() {
            check_shape(&mut v, &format!("anticausal[{l}].A_a"), &mode.a, d.n_xa, d.n_xa);
            check_shape(&mut v, &format!("anticausal[{l}].C_a"), &mode.c, d.n_y, d.n_xa);
            check_shape(&mut v, &format!("anticausal[{l}].Sigma_a"), &mode.sigma, d.n_xa, d.n_xa);
            check_psd(&mut v, &format!("anticausal[{l}].Sigma_a"), &mode.sigma);
        }
        check_probability(&mut v, "pi_c", &self.pi_c, d.m_c);
        check_probability(&mut v, "pi_a", &self.pi_a, d.m_a);
        check_shape(&mut v, "Sigma_m", &self.sigma_m, d.n_y, d.n_y);
        check_pd(&mut v, "Sigma_m", &self.sigma_m);
        v
    }

    /// Spectral radii of all transition matrices; modes with `rho >= 1` are
    /// flagged and logged as warnings.
    pub fn spectral_radius_report(&self) -> SpectralRadiusReport {
        let rho_causal: Vec<f64> = self.causal.iter().map(|m| spectral_radius(&m.a)).collect();
        let rho_anticausal: Vec<f64> =
            self.anticausal.iter().map(|m| spectral_radius(&m.a)).collect();
        let flagged_causal: Vec<bool> = rho_causal.iter().map(|&r| r >= 1.0).collect();
        let flagged_anticausal: Vec<bool> = rho_anticausal.iter().map(|&r| r >= 1.0).collect();
        for (j, (&rho, &flag)) in rho_causal.iter().zip(&flagged_causal).enumerate() {
            if flag {
                log::warn!("causal mode {} has spectral radius {rho:.4} >= 1", j + 1);
            }
        }
        for (l, (&rho, &flag)) in rho_anticausal.iter().zip(&flagged_anticausal).enumerate() {
            if flag {
                log::warn!("anti-causal mode {} has spectral radius {rho:.4} >= 1", l + 1);
            }
        }
        SpectralRadiusReport { rho_causal, rho_anticausal, flagged_causal, flagged_anticausal }
    }

    /// Largest absolute entry-wise difference across all parameters
    /// (transitions, output maps, covariances, mixing weights). Used as the
    /// EM parameter-stagnation measure.
    pub fn max_abs_diff(&self, other: &ThetaBundle) -> f64 {
        let mut d: f64 = 0.0;
        let mat = |d: &mut f64, a: &DMatrix<f64>, b: &DMatrix<f64>| {
            for (x, y) in a.iter().zip(b.iter()) {
                *d = d.max((x - y).abs());
            }
        };
        for (a, b) in self.causal.iter().zip(&other.causal) {
            mat(&mut d, &a.a, &b.a);
            mat(&mut d, &a.c, &b.c);
            mat(&mut d, &a.sigma, &b.sigma);
        }
        for (a, b) in self.anticausal.iter().zip(&other.anticausal) {
            mat(&mut d, &a.a, &b.a);
            mat(&mut d, &a.c, &b.c);
            mat(&mut d, &a.sigma, &b.sigma);
        }
        for (x, y) in self.pi_c.iter().zip(&other.pi_c) {
            d = d.max((x - y).abs());
        }
        for (x, y) in self.pi_a.iter().zip(&other.pi_a) {
            d = d.max((x - y).abs());
        }
        mat(&mut d, &self.sigma_m, &other.sigma_m);
        d
    }

    /// Relabels modes: entry `j` of the result is entry `perm_c[j]` of the
    /// original causal chain (`perm_a` likewise for the anti-causal chain).
    pub fn permute_modes(&self, perm_c: &[usize], perm_a: &[usize]) -> ThetaBundle {
        let mut out = self.clone();
        for (j, &src) in perm_c.iter().enumerate() {
            out.causal[j] = self.causal[src].clone();
            out.pi_c[j] = self.pi_c[src];
        }
        for (l, &src) in perm_a.iter().enumerate() {
            out.anticausal[l] = self.anticausal[src].clone();
            out.pi_a[l] = self.pi_a[src];
        }
        out
    }
}

/// Validates a parameter bundle against every type invariant: dimension
/// consistency, PSD process-noise covariances, positive-definite
/// measurement covariance, and normalized mixing weights. Returns the
/// bundle's violations joined into one error, or `Ok(())`.
pub fn validate_theta(theta: &ThetaBundle) -> Result<()> {
    let v = theta.violations();
    if v.is_empty() {
        Ok(())
    } else {
        Err(Error::Invalid(v.join("\n")))
    }
}

fn check_shape(v: &mut Vec<String>, name: &str, m: &DMatrix<f64>, rows: usize, cols: usize) {
    if m.nrows() != rows || m.ncols() != cols {
        v.push(format!(
            "{name}: expected {rows}x{cols}, got {}x{}",
            m.nrows(),
            m.ncols()
        ));
    }
    if let Some((i, _)) = m.iter().enumerate().find(|(_, x)| !x.is_finite()) {
        v.push(format!("{name}: non-finite entry at flat index {i}"));
    }
}

fn check_probability(v: &mut Vec<String>, name: &str, p: &[f64], m: usize) {
    if p.len() != m {
        v.push(format!("{name}: expected length {m}, got {}", p.len()));
        return;
    }
    if let Some(bad) = p.iter().position(|&x| !(x >= 0.0)) {
        v.push(format!("{name}[{bad}]: negative or non-finite entry {}", p[bad]));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > PI_SUM_TOL {
        v.push(format!("{name}: probability vector sums to {sum}"));
    }
}

fn symmetry_defect(m: &DMatrix<f64>) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

fn check_psd(v: &mut Vec<String>, name: &str, m: &DMatrix<f64>) {
    if m.nrows() != m.ncols() || m.iter().any(|x| !x.is_finite()) {
        return; // shape/finiteness already reported
    }
    let defect = symmetry_defect(m);
    if defect > SYM_TOL {
        v.push(format!("{name}: not symmetric (max off-diagonal defect {defect:.3e})"));
        return;
    }
    let eig = nalgebra::SymmetricEigen::new(symmetric_part(m));
    let min = eig.eigenvalues.min();
    if min < PSD_EIG_FLOOR {
        v.push(format!("{name}: not PSD (min eigenvalue {min:.6})"));
    }
}

fn check_pd(v: &mut Vec<String>, name: &str, m: &DMatrix<f64>) {
    if m.nrows() != m.ncols() || m.iter().any(|x| !x.is_finite()) {
        return;
    }
    let defect = symmetry_defect(m);
    if defect > SYM_TOL {
        v.push(format!("{name}: not symmetric (max off-diagonal defect {defect:.3e})"));
        return;
    }
    let eig = nalgebra::SymmetricEigen::new(symmetric_part(m));
    let min = eig.eigenvalues.min();
    if min <= 0.0 {
        v.push(format!("{name}: not positive definite (min eigenvalue {min:.6})"));
    }
}

/// `(M + M^T) / 2`.
pub(crate) fn symmetric_part(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Symmetrizes a square matrix in place; covariance updates drift off
/// symmetry by float rounding and every stored covariance is re-projected.
pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let s = symmetric_part(m);
    m.copy_from(&s);
}

/// Multiplies every transition and output-map entry by `1 + rho * g` with
/// `g ~ N(0,1)` (mixing weights and covariances keep their reference
/// values; zero entries stay zero, preserving structural sparsity).
/// `rho = 0` returns the reference exactly.
pub fn perturb_theta<R: Rng + ?Sized>(theta: &ThetaBundle, rho: f64, rng: &mut R) -> ThetaBundle {
    let mut out = theta.clone();
    let mut jiggle = |m: &mut DMatrix<f64>| {
        for x in m.iter_mut() {
            let g: f64 = rng.sample(StandardNormal);
            *x *= 1.0 + rho * g;
        }
    };
    for mode in &mut out.causal {
        jiggle(&mut mode.a);
        jiggle(&mut mode.c);
    }
    for mode in &mut out.anticausal {
        jiggle(&mut mode.a);
        jiggle(&mut mode.c);
    }
    out
}

/// Scaling applied to the first causal transition matrix in [`example1`].
///
/// The two-mode causal pair as printed is unstable in the average sense:
/// its i.i.d. mode mixture has a measured top Lyapunov exponent of about
/// +0.086, so a horizon of 10^4 steps overflows `f64` with certainty
/// (ln-growth demand ~864 against the ~709.8 available). Scaling mode 1 by
/// 0.86 brings the mixture's exponent to about -0.019 while keeping
/// `rho(0.86 * A_c(1)) = 1.0015 > 1`, preserving the system's defining
/// trait that individual modes may be unstable.
pub const EXAMPLE1_MODE1_SCALE: f64 = 0.86;

/// Two-mode reference system with scalar output: `n_y = 1`,
/// `n_xc = n_xa = 2`, `m_c = m_a = 2`, unit noise covariances,
/// `pi_c = (0.7, 0.3)`, `pi_a = (0.5, 0.5)`.
///
/// The first causal transition is scaled by [`EXAMPLE1_MODE1_SCALE`] to make
/// the mode mixture stable in the average sense (see the constant's
/// documentation); [`example1_unstable`] returns the unscaled variant.
pub fn example1() -> ThetaBundle {
    let mut theta = example1_unstable();
    theta.causal[0].a *= EXAMPLE1_MODE1_SCALE;
    theta
}

/// The [`example1`] system without the mode-1 stabilization. Its state
/// energy grows on average (top Lyapunov exponent ~ +0.086), so long
/// simulations overflow; kept for instability diagnostics and tests.
pub fn example1_unstable() -> ThetaBundle {
    let dims = Dims { n_xc: 2, n_xa: 2, n_y: 1, m_c: 2, m_a: 2 };
    let eye2 = DMatrix::identity(2, 2);
    let causal = vec![
        CausalModeParams {
            a: DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.3, 0.8]),
            c: DMatrix::from_row_slice(1, 2, &[0.3, 0.7]),
            sigma: eye2.clone(),
        },
        CausalModeParams {
            a: DMatrix::from_row_slice(2, 2, &[0.8, 0.2, 0.3, 0.5]),
            c: DMatrix::from_row_slice(1, 2, &[0.7, 0.2]),
            sigma: eye2.clone(),
        },
    ];
    let anticausal = vec![
        AntiCausalModeParams {
            a: DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]),
            c: DMatrix::from_row_slice(1, 2, &[0.2, 0.6]),
            sigma: eye2.clone(),
        },
        AntiCausalModeParams {
            a: DMatrix::from_row_slice(2, 2, &[0.6, 0.2, 0.3, 0.8]),
            c: DMatrix::from_row_slice(1, 2, &[0.3, 0.76]),
            sigma: eye2.clone(),
        },
    ];
    ThetaBundle {
        dims,
        causal,
        anticausal,
        pi_c: vec![0.7, 0.3],
        pi_a: vec![0.5, 0.5],
        sigma_m: DMatrix::from_element(1, 1, 1.0),
    }
}

/// Rotation by `deg` degrees.
fn rot2(deg: f64) -> DMatrix<f64> {
    let r = deg.to_radians();
    DMatrix::from_row_slice(2, 2, &[r.cos(), -r.sin(), r.sin(), r.cos()])
}

/// Two-mode, four-output benchmark system for noise-robustness and
/// convergence-rate experiments. `noise_scale` is the shared covariance
/// level: `Sigma_c = Sigma_a = noise_scale * I_2`, `Sigma_m = noise_scale * I_4`.
/// At `0` the chain noises are exactly zero; `Sigma_m` is floored at
/// `1e-18 * I` (noise standard deviation `1e-9`) because the measurement
/// covariance must stay positive definite — far below any classification
/// margin, so the system still behaves as exactly noiseless.
///
/// Design rationale, driven by what per-step mode classification needs:
/// - Each chain's output block is taller than its state (2 dominant output
///   rows per chain plus a small cross block), so at zero noise the one-step
///   output innovation lies exactly in the range of the true mode's
///   `C * A` block and strictly outside every wrong mode's — classification
///   is exact rather than probabilistic.
/// - Mode moduli sit near 1 (0.9998 and 0.998): the causal chain decays
///   forward and the anti-causal chain backward, so strongly contractive
///   modes would underflow the noiseless mid-horizon signal.
/// - The anti-causal geometry mirrors the causal one through a reflection,
///   giving both chains identical singular values and balanced accuracy.
pub fn benchmark_system(noise_scale: f64) -> ThetaBundle {
    let dims = Dims { n_xc: 2, n_xa: 2, n_y: 4, m_c: 2, m_a: 2 };
    let a_c = [&rot2(28.0) * 0.9998, &rot2(-45.0) * 0.998];
    let a_a = [&rot2(-28.0) * 0.9998, &rot2(45.0) * 0.998];
    let b_c1 = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.2, -0.8]);
    let b_c2 = &b_c1 * &rot2(110.0) * 1.5;
    let b_a1 = &b_c1 * DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1.0]));
    let b_a2 = &b_a1 * &rot2(-110.0) * 1.5;
    let cross = DMatrix::from_row_slice(2, 2, &[0.5, -0.3, -0.2, 0.4]) * 0.1;
    let stack = |top: &DMatrix<f64>, bottom: &DMatrix<f64>| {
        let mut m = DMatrix::zeros(4, 2);
        m.view_mut((0, 0), (2, 2)).copy_from(top);
        m.view_mut((2, 0), (2, 2)).copy_from(bottom);
        m
    };
    let sigma_state = DMatrix::identity(2, 2) * noise_scale;
    let causal = vec![
        CausalModeParams {
            a: a_c[0].clone(),
            c: stack(&b_c1, &cross),
            sigma: sigma_state.clone(),
        },
        CausalModeParams {
            a: a_c[1].clone(),
            c: stack(&b_c2, &cross),
            sigma: sigma_state.clone(),
        },
    ];
    let anticausal = vec![
        AntiCausalModeParams {
            a: a_a[0].clone(),
            c: stack(&cross, &b_a1),
            sigma: sigma_state.clone(),
        },
        AntiCausalModeParams {
            a: a_a[1].clone(),
            c: stack(&cross, &b_a2),
            sigma: sigma_state.clone(),
        },
    ];
    ThetaBundle {
        dims,
        causal,
        anticausal,
        pi_c: vec![0.7, 0.3],
        pi_a: vec![0.5, 0.5],
        sigma_m: DMatrix::identity(4, 4) * noise_scale.max(1e-18),
    }
}

/// JSON (de)serialization of a matrix as row-major nested arrays.
pub(crate) mod mat_json {
    use nalgebra::DMatrix;
    use serde::de::Error as DeError;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> =
            m.row_iter().map(|r| r.iter().copied().collect()).collect();
        serde::Serialize::serialize(&rows, s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows: Vec<Vec<f64>> = Vec::deserialize(d)?;
        let nrows = rows.len();
        if nrows == 0 {
            return Err(D::Error::custom("matrix must have at least one row"));
        }
        let ncols = rows[0].len();
        if ncols == 0 {
            return Err(D::Error::custom("matrix must have at least one column"));
        }
        if let Some(bad) = rows.iter().position(|r| r.len() != ncols) {
            return Err(D::Error::custom(format!(
                "ragged matrix: row {bad} has {} entries, expected {ncols}",
                rows[bad].len()
            )));
        }
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        Ok(DMatrix::from_row_slice(nrows, ncols, &flat))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn spectral_radius_of_reference_mode_is_exact() {
        // Eigenvalues of [[1, 0.2], [0.3, 0.8]] solve l^2 - 1.8 l + 0.74 = 0,
        // i.e. l = 0.9 +- sqrt(0.07); the radius is the + root.
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.3, 0.8]);
        let expected = 0.9 + 0.07_f64.sqrt();
        assert_relative_eq!(spectral_radius(&a), expected, max_relative = 1e-14);
        assert_relative_eq!(spectral_radius(&a), 1.164_575_131_106_459_2, max_relative = 1e-14);
    }

    #[test]
    fn spectral_radius_trivial_cases() {
        let half = DMatrix::from_diagonal_element(3, 3, 0.5);
        assert_relative_eq!(spectral_radius(&half), 0.5, max_relative = 1e-14);
        let eye: DMatrix<f64> = DMatrix::identity(2, 2);
        assert_relative_eq!(spectral_radius(&eye), 1.0, max_relative = 1e-14);
    }

    #[test]
    fn radius_report_flags_boundary_and_unstable_modes() {
        let theta = example1_unstable();
        let report = theta.spectral_radius_report();
        // Causal mode 1 (rho ~ 1.1646) and the identity anti-causal mode
        // (rho = 1, boundary) are flagged; contractive modes are not.
        assert!(report.flagged_causal[0]);
        assert!(!report.flagged_causal[1]);
        assert!(report.flagged_anticausal[0]);
        assert!(!report.flagged_anticausal[1]);
        assert!(report.any_flagged());
    }

    #[test]
    fn stabilized_reference_keeps_mode_one_individually_unstable() {
        let theta = example1();
        let rho = spectral_radius(&theta.causal[0].a);
        assert!(rho > 1.0, "mode 1 should stay individually unstable, got rho = {rho}");
        assert_relative_eq!(rho, EXAMPLE1_MODE1_SCALE * (0.9 + 0.07_f64.sqrt()), max_relative = 1e-14);
    }

    #[test]
    fn reference_bundles_are_valid() {
        assert!(validate_theta(&example1()).is_ok());
        assert!(validate_theta(&example1_unstable()).is_ok());
        for scale in [0.0, 0.01, 1.0] {
            assert!(
                validate_theta(&benchmark_system(scale)).is_ok(),
                "benchmark at scale {scale} should validate"
            );
        }
    }

    #[test]
    fn unnormalized_probability_vector_is_rejected() {
        let mut theta = example1();
        theta.pi_c = vec![0.6, 0.6];
        let violations = theta.violations();
        assert!(
            violations.iter().any(|v| v.contains("pi_c") && v.contains("1.2")),
            "expected a pi_c sum violation naming 1.2, got {violations:?}"
        );
    }

    #[test]
    fn indefinite_measurement_covariance_is_rejected() {
        let mut theta = example1();
        // Eigenvalues 1.5 and -0.5: symmetric but indefinite.
        theta.dims.n_y = 2;
        theta.sigma_m = DMatrix::from_row_slice(2, 2, &[0.5, 1.0, 1.0, 0.5]);
        for mode in &mut theta.causal {
            mode.c = DMatrix::from_row_slice(2, 2, &[0.3, 0.7, 0.1, 0.1]);
        }
        for mode in &mut theta.anticausal {
            mode.c = DMatrix::from_row_slice(2, 2, &[0.2, 0.6, 0.1, 0.1]);
        }
        let violations = theta.violations();
        assert!(
            violations.iter().any(|v| v.contains("Sigma_m")),
            "expected a Sigma_m definiteness violation, got {violations:?}"
        );
    }

    #[test]
    fn singular_measurement_covariance_is_rejected() {
        let mut theta = example1();
        theta.sigma_m = DMatrix::from_element(1, 1, 0.0);
        assert!(theta.violations().iter().any(|v| v.contains("Sigma_m")));
    }

    #[test]
    fn validation_is_idempotent() {
        let theta = example1();
        validate_theta(&theta).unwrap();
        validate_theta(&theta).unwrap();
        assert!(theta.violations().is_empty());
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let theta = benchmark_system(0.37);
        let text = serde_json::to_string_pretty(&theta).unwrap();
        let back: ThetaBundle = serde_json::from_str(&text).unwrap();
        assert_eq!(theta, back);
        // Spot-check an irrational entry survives bit-for-bit.
        assert_eq!(
            theta.causal[0].a[(0, 0)].to_bits(),
            back.causal[0].a[(0, 0)].to_bits()
        );
    }

    #[test]
    fn ragged_matrix_json_is_rejected() {
        let text = r#"{"A_c": [[1.0, 0.0], [0.0]], "C_c": [[1.0, 0.0]], "Sigma_c": [[1.0, 0.0], [0.0, 1.0]]}"#;
        let parsed: std::result::Result<CausalModeParams, _> = serde_json::from_str(text);
        assert!(parsed.is_err());
    }

    #[test]
    fn zero_perturbation_is_identity() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let theta = example1();
        let same = perturb_theta(&theta, 0.0, &mut rng);
        assert_eq!(theta, same);
    }

    #[test]
    fn perturbation_preserves_zero_entries() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let theta = example1();
        let moved = perturb_theta(&theta, 0.3, &mut rng);
        // A_a(1) is the identity; its off-diagonal zeros must stay zero.
        assert_eq!(moved.anticausal[0].a[(0, 1)], 0.0);
        assert_eq!(moved.anticausal[0].a[(1, 0)], 0.0);
        assert!(moved.max_abs_diff(&theta) > 0.0);
    }

    #[test]
    fn mode_permutation_is_an_involution_for_swaps() {
        let theta = example1();
        let swapped = theta.permute_modes(&[1, 0], &[1, 0]);
        assert_ne!(theta, swapped);
        assert_eq!(theta, swapped.permute_modes(&[1, 0], &[1, 0]));
        assert_eq!(swapped.pi_c, vec![0.3, 0.7]);
    }

    #[test]
    fn trajectory_check_catches_mismatches() {
        let dims = example1().dims;
        let y = vec![DVector::from_vec(vec![0.0]); 5];
        let mut traj = Trajectory::from_outputs(y);
        traj.check(&dims).unwrap();
        traj.s_c = Some(vec![0, 1, 0]);
        assert!(traj.check(&dims).is_err());
        traj.s_c = Some(vec![0, 1, 0, 1, 2]);
        assert!(traj.check(&dims).is_err(), "label out of range must be rejected");
        let short = Trajectory::from_outputs(vec![DVector::from_vec(vec![0.0])]);
        assert!(short.check(&dims).is_err(), "T >= 2 required");
    }
}
