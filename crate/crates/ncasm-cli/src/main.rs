//! Command-line experiment runner for non-causal switching system
//! identification.
//!
//! Subcommands: `simulate`, `identify`, `evaluate`, `montecarlo`, `rates`.
//! Every run is reproducible from its seed; artifacts are CSV and JSON files
//! written into `--out`.
//!
//! Exit codes: `0` success, `1` usage or configuration error, `2` runtime or
//! numerical failure. Logging is controlled by the `NCASM_LOG` environment
//! variable (same filter syntax as `RUST_LOG`).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ncasm::diagnostics::{
    mode_match_rate, output_reconstruction_error, rate_probe, reconstruct_outputs,
    relative_state_error,
};
use ncasm::em::{align_modes, fit, EmConfig, InitStrategy, MonotoneQPolicy};
use ncasm::estep::{run_estep, EStepConfig, EStepOutput};
use ncasm::model::{benchmark_system, example1, Dims, ThetaBundle};
use ncasm::simulate::{simulate, SimConfig};
use ncasm::{io as fmt_io, Error as LibError};

/// How a failed run maps to the process exit code.
enum Failure {
    /// Bad flags, config, or input files: exit 1.
    Usage(String),
    /// The run itself failed (numerics, output I/O): exit 2.
    Runtime(String),
}

type CmdResult = std::result::Result<(), Failure>;

fn runtime<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Runtime(e.to_string())
}

/// Errors surfacing from inside a run: numerical trouble and write failures
/// are runtime-class, everything else means the inputs were bad.
fn classify(e: LibError) -> Failure {
    match e {
        LibError::Numerical { .. } | LibError::Io(_) => Failure::Runtime(e.to_string()),
        other => Failure::Usage(other.to_string()),
    }
}

#[derive(Parser)]
#[command(
    name = "ncasm",
    version,
    about = "Simulation and EM identification of non-causal switching linear systems"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate a trajectory from a ground-truth system.
    Simulate(SimulateArgs),
    /// Fit parameters to a trajectory CSV with hard-assignment EM.
    Identify(IdentifyArgs),
    /// Score an estimate on a trajectory (uses ground truth when present).
    Evaluate(EvaluateArgs),
    /// Monte Carlo mode-classification study over measurement-noise levels.
    Montecarlo(MontecarloArgs),
    /// Identification-error probe over increasing horizons.
    Rates(RatesArgs),
}

/// Flags shared by every subcommand. Each value may also be supplied by the
/// `--config` JSON file; explicit flags win.
#[derive(Args, Clone)]
struct CommonArgs {
    /// JSON config file with the same keys as the long flags.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Base RNG seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
    /// Directory artifacts are written into (created if missing).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Use the bundled single-output reference system as ground truth.
    #[arg(long)]
    example1: bool,
    /// Use the bundled four-output benchmark system at this noise scale.
    #[arg(long, value_name = "SCALE")]
    benchmark: Option<f64>,
    /// Ground-truth parameter JSON.
    #[arg(long, value_name = "PATH")]
    theta: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Horizon length.
    #[arg(short = 'T', long = "T", alias = "t-len", value_name = "STEPS")]
    t_len: Option<usize>,
}

#[derive(Args)]
struct IdentifyArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Trajectory CSV (only the y columns are used for fitting).
    #[arg(long, value_name = "PATH")]
    input: Option<PathBuf>,
    /// Causal state dimension.
    #[arg(long, value_name = "N")]
    n_xc: Option<usize>,
    /// Anti-causal state dimension.
    #[arg(long, value_name = "N")]
    n_xa: Option<usize>,
    /// Causal mode count.
    #[arg(long, value_name = "M")]
    m_c: Option<usize>,
    /// Anti-causal mode count.
    #[arg(long, value_name = "M")]
    m_a: Option<usize>,
    /// Iteration cap.
    #[arg(long, value_name = "N")]
    max_iters: Option<usize>,
    /// Relative surrogate-change stopping tolerance.
    #[arg(long, value_name = "TOL")]
    tol_q: Option<f64>,
    /// Parameter-change stopping tolerance.
    #[arg(long, value_name = "TOL")]
    tol_theta: Option<f64>,
    /// Classification sweeps per E-step.
    #[arg(long, value_name = "N")]
    sweeps: Option<usize>,
    /// Initialization: random, segments, or perturb.
    #[arg(long, value_name = "KIND")]
    init: Option<String>,
    /// Reference parameters for perturbed initialization
    /// (defaults to the bundled system when --example1 is set).
    #[arg(long, value_name = "PATH")]
    init_theta: Option<PathBuf>,
    /// Relative perturbation radius for perturbed initialization.
    #[arg(long, value_name = "RHO")]
    rho: Option<f64>,
    /// Record surrogate dips instead of aborting on them.
    #[arg(long)]
    permissive: bool,
    /// Keep per-step mode posteriors for the refit stage.
    #[arg(long)]
    soft_weights: bool,
    /// Score causal/anti-causal mode pairs jointly in the forward sweep.
    #[arg(long)]
    joint_mode_search: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Trajectory CSV; state/label columns unlock the truth-based metrics.
    #[arg(long, value_name = "PATH")]
    input: Option<PathBuf>,
    /// Estimated parameter JSON (as written by `identify`).
    #[arg(long, value_name = "PATH")]
    theta_hat: Option<PathBuf>,
    /// Classification sweeps used when re-running the filter bank.
    #[arg(long, value_name = "N")]
    sweeps: Option<usize>,
}

#[derive(Args)]
struct MontecarloArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Measurement-noise variances, e.g. --levels 0,0.01,0.1,0.5,1.
    #[arg(long, value_delimiter = ',', value_name = "LIST")]
    levels: Option<Vec<f64>>,
    /// Trials per level.
    #[arg(long, value_name = "N")]
    trials: Option<usize>,
    /// Horizon length per trial.
    #[arg(short = 'T', long = "T", alias = "t-len", value_name = "STEPS")]
    t_len: Option<usize>,
    /// Classification refinement passes per trial.
    #[arg(long, value_name = "N")]
    estep_iters: Option<usize>,
}

#[derive(Args)]
struct RatesArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Horizons, strictly increasing, e.g. --horizons 100,1000,10000.
    #[arg(long, value_delimiter = ',', value_name = "LIST")]
    horizons: Option<Vec<usize>>,
    /// Number of seeds per horizon (seed values start at --seed).
    #[arg(long, value_name = "N")]
    seeds: Option<usize>,
    /// Relative radius of the truth perturbation used to initialize fits.
    #[arg(long, value_name = "RHO")]
    rho: Option<f64>,
}

/// Config-file counterpart of the flags. Unknown keys are rejected so typos
/// fail loudly instead of silently falling back to defaults.
#[derive(Debug, Default, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
struct FileConfig {
    seed: Option<u64>,
    jobs: Option<usize>,
    out: Option<PathBuf>,
    example1: Option<bool>,
    benchmark: Option<f64>,
    theta: Option<PathBuf>,
    t_len: Option<usize>,
    input: Option<PathBuf>,
    n_xc: Option<usize>,
    n_xa: Option<usize>,
    m_c: Option<usize>,
    m_a: Option<usize>,
    max_iters: Option<usize>,
    tol_q: Option<f64>,
    tol_theta: Option<f64>,
    sweeps: Option<usize>,
    init: Option<String>,
    init_theta: Option<PathBuf>,
    rho: Option<f64>,
    permissive: Option<bool>,
    soft_weights: Option<bool>,
    joint_mode_search: Option<bool>,
    theta_hat: Option<PathBuf>,
    levels: Option<Vec<f64>>,
    trials: Option<usize>,
    estep_iters: Option<usize>,
    horizons: Option<Vec<usize>>,
    seeds: Option<usize>,
}

fn load_config(path: &Option<PathBuf>) -> std::result::Result<FileConfig, Failure> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Failure::Usage(format!("config {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| Failure::Usage(format!("config {}: {e}", p.display())))
        }
    }
}

/// Settings every command resolves the same way.
struct Resolved {
    file: FileConfig,
    seed: u64,
    out: PathBuf,
    example1: bool,
    benchmark: Option<f64>,
    theta: Option<PathBuf>,
}

fn resolve_common(common: &CommonArgs) -> std::result::Result<Resolved, Failure> {
    let file = load_config(&common.config)?;
    let jobs = common.jobs.or(file.jobs);
    if let Some(n) = jobs {
        if n == 0 {
            return Err(Failure::Usage("--jobs must be at least 1".into()));
        }
        // A second invocation in-process would fail; that's fine to ignore.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let out = common.out.clone().or(file.out.clone()).unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&out)
        .map_err(|e| Failure::Usage(format!("cannot create --out {}: {e}", out.display())))?;
    Ok(Resolved {
        seed: common.seed.or(file.seed).unwrap_or(0),
        example1: common.example1 || file.example1.unwrap_or(false),
        benchmark: common.benchmark.or(file.benchmark),
        theta: common.theta.clone().or(file.theta.clone()),
        out,
        file,
    })
}

/// Picks the ground-truth system: an explicit theta file wins, then the
/// benchmark flag, then the bundled single-output example.
fn resolve_system(r: &Resolved) -> std::result::Result<ThetaBundle, Failure> {
    if let Some(path) = &r.theta {
        return fmt_io::read_theta_json(path)
            .map_err(|e| Failure::Usage(format!("theta {}: {e}", path.display())));
    }
    if let Some(scale) = r.benchmark {
        if !(scale.is_finite() && scale >= 0.0) {
            return Err(Failure::Usage(format!("--benchmark must be >= 0, got {scale}")));
        }
        return Ok(benchmark_system(scale));
    }
    if r.example1 {
        return Ok(example1());
    }
    Err(Failure::Usage(
        "no ground-truth system: pass --theta <path>, --benchmark <scale>, or --example1".into(),
    ))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::new().filter("NCASM_LOG")).init();

    let result = match cli.cmd {
        Cmd::Simulate(args) => cmd_simulate(args),
        Cmd::Identify(args) => cmd_identify(args),
        Cmd::Evaluate(args) => cmd_evaluate(args),
        Cmd::Montecarlo(args) => cmd_montecarlo(args),
        Cmd::Rates(args) => cmd_rates(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn cmd_simulate(args: SimulateArgs) -> CmdResult {
    let r = resolve_common(&args.common)?;
    let theta = resolve_system(&r)?;
    let t_len = args.t_len.or(r.file.t_len).unwrap_or(10_000);

    let cfg = SimConfig::new(t_len, r.seed);
    let traj = simulate(&theta, &cfg).map_err(classify)?;

    let traj_path = r.out.join("trajectory.csv");
    let theta_path = r.out.join("theta.json");
    fmt_io::write_trajectory_csv(&traj_path, &traj).map_err(runtime)?;
    fmt_io::write_theta_json(&theta_path, &theta).map_err(runtime)?;
    println!(
        "simulate: T={} n_y={} seed={} -> {} and {}",
        t_len,
        theta.dims.n_y,
        r.seed,
        traj_path.display(),
        theta_path.display()
    );
    Ok(())
}

fn parse_init(
    kind: Option<&str>,
    init_theta: &Option<PathBuf>,
    example1_flag: bool,
    rho: f64,
) -> std::result::Result<InitStrategy, Failure> {
    match kind.unwrap_or("random") {
        "random" => Ok(InitStrategy::Random),
        "segments" => Ok(InitStrategy::Segments),
        "perturb" => {
            let reference = match init_theta {
                Some(path) => fmt_io::read_theta_json(path)
                    .map_err(|e| Failure::Usage(format!("init theta {}: {e}", path.display())))?,
                None if example1_flag => example1(),
                None => {
                    return Err(Failure::Usage(
                        "perturbed initialization needs --init-theta <path> (or --example1)".into(),
                    ))
                }
            };
            Ok(InitStrategy::Perturb { reference: Box::new(reference), rho })
        }
        other => Err(Failure::Usage(format!(
            "unknown init '{other}' (expected random, segments, or perturb)"
        ))),
    }
}

fn cmd_identify(args: IdentifyArgs) -> CmdResult {
    let r = resolve_common(&args.common)?;
    let input = args
        .input
        .clone()
        .or(r.file.input.clone())
        .ok_or_else(|| Failure::Usage("identify needs --input <trajectory.csv>".into()))?;
    let traj = fmt_io::read_trajectory_csv(&input)
        .map_err(|e| Failure::Usage(format!("input {}: {e}", input.display())))?;
    let n_y = traj.y[0].len();

    let need = |flag: &str, key: &str, v: Option<usize>| {
        v.ok_or_else(|| {
            Failure::Usage(format!("identify needs --{flag} (or \"{key}\" in the config file)"))
        })
    };
    let dims = Dims {
        n_xc: need("n-xc", "n_xc", args.n_xc.or(r.file.n_xc))?,
        n_xa: need("n-xa", "n_xa", args.n_xa.or(r.file.n_xa))?,
        n_y,
        m_c: need("m-c", "m_c", args.m_c.or(r.file.m_c))?,
        m_a: need("m-a", "m_a", args.m_a.or(r.file.m_a))?,
    };

    let defaults = EmConfig::default();
    let rho = args.rho.or(r.file.rho).unwrap_or(0.2);
    let permissive = args.permissive || r.file.permissive.unwrap_or(false);
    let cfg = EmConfig {
        max_iters: args.max_iters.or(r.file.max_iters).unwrap_or(defaults.max_iters),
        tol_q: args.tol_q.or(r.file.tol_q).unwrap_or(defaults.tol_q),
        tol_theta: args.tol_theta.or(r.file.tol_theta).unwrap_or(defaults.tol_theta),
        sweeps: args.sweeps.or(r.file.sweeps).unwrap_or(defaults.sweeps),
        soft_weights: args.soft_weights || r.file.soft_weights.unwrap_or(false),
        joint_mode_search: args.joint_mode_search || r.file.joint_mode_search.unwrap_or(false),
        init: parse_init(
            args.init.as_deref().or(r.file.init.as_deref()),
            &args.init_theta.clone().or(r.file.init_theta.clone()),
            r.example1,
            rho,
        )?,
        seed: r.seed,
        monotone_q: if permissive { MonotoneQPolicy::Permissive } else { MonotoneQPolicy::Assert },
    };

    let report = fit(&traj, &dims, &cfg).map_err(classify)?;
    for it in &report.iterates {
        println!(
            "iter {:>3}: Q={:+.8e}  flips={:<6} delta={:.3e}{}",
            it.iter,
            it.q,
            it.flip_count,
            it.theta_delta,
            if it.frozen { "  [frozen]" } else { "" }
        );
    }

    fmt_io::write_em_report_json(r.out.join("report.json"), &report).map_err(runtime)?;
    fmt_io::write_theta_json(r.out.join("theta_hat.json"), &report.final_theta)
        .map_err(runtime)?;
    fmt_io::write_q_trace_csv(r.out.join("q_trace.csv"), &report).map_err(runtime)?;
    fmt_io::write_filter_csv(r.out.join("states.csv"), &report.final_states).map_err(runtime)?;

    if let Some(abort) = &report.abort {
        return Err(Failure::Runtime(format!(
            "EM aborted at iteration {}: {} (partial report written to {})",
            abort.iteration,
            abort.message,
            r.out.join("report.json").display()
        )));
    }
    println!(
        "identify: {:?} after {} iterations, final Q={:+.8e} -> {}",
        report.stop_reason,
        report.iterates.len(),
        report.iterates.last().map(|it| it.q).unwrap_or(f64::NAN),
        r.out.join("theta_hat.json").display()
    );
    Ok(())
}

/// Largest absolute entry difference between two equally sized matrices.
fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax()
}

fn cmd_evaluate(args: EvaluateArgs) -> CmdResult {
    let r = resolve_common(&args.common)?;
    let input = args
        .input
        .clone()
        .or(r.file.input.clone())
        .ok_or_else(|| Failure::Usage("evaluate needs --input <trajectory.csv>".into()))?;
    let traj = fmt_io::read_trajectory_csv(&input)
        .map_err(|e| Failure::Usage(format!("input {}: {e}", input.display())))?;
    let theta_hat_path = args
        .theta_hat
        .clone()
        .or(r.file.theta_hat.clone())
        .ok_or_else(|| Failure::Usage("evaluate needs --theta-hat <theta.json>".into()))?;
    let theta_hat = fmt_io::read_theta_json(&theta_hat_path)
        .map_err(|e| Failure::Usage(format!("theta {}: {e}", theta_hat_path.display())))?;
    if theta_hat.dims.n_y != traj.y[0].len() {
        return Err(Failure::Usage(format!(
            "estimate expects n_y={}, input has {} output columns",
            theta_hat.dims.n_y,
            traj.y[0].len()
        )));
    }

    let es_cfg = EStepConfig {
        sweeps: args.sweeps.or(r.file.sweeps).unwrap_or(2),
        ..Default::default()
    };
    let es = run_estep(&theta_hat, &traj.y, &es_cfg, None).map_err(classify)?;

    let mut metrics: Vec<(String, f64)> = Vec::new();
    let y_hat = reconstruct_outputs(
        &theta_hat,
        &es.filter.xhat_c_post,
        &es.filter.xhat_a_post,
        &es.s_c,
        &es.s_a,
    )
    .map_err(classify)?;
    metrics.push((
        "delta_output".into(),
        output_reconstruction_error(&traj.y, &y_hat).map_err(classify)?,
    ));

    // Truth-dependent metrics, each skipped with a warning when its ground
    // truth is absent from the input file.
    let mut theta_aligned = theta_hat.clone();
    match (&traj.s_c, &traj.s_a) {
        (Some(tc), Some(ta)) => {
            let aligned = align_modes(&theta_hat, &es.s_c, &es.s_a, tc, ta).map_err(classify)?;
            metrics.push((
                "match_rate_c".into(),
                mode_match_rate(tc, &aligned.s_c).map_err(classify)?,
            ));
            metrics.push((
                "match_rate_a".into(),
                mode_match_rate(ta, &aligned.s_a).map_err(classify)?,
            ));
            theta_aligned = aligned.theta;
        }
        _ => log::warn!("input has no mode-label columns; skipping match rates"),
    }

    match (&traj.x_c, &traj.x_a) {
        (Some(xc), Some(xa)) => {
            metrics.push((
                "delta_c".into(),
                relative_state_error(xc, &es.filter.xhat_c_post).map_err(classify)?,
            ));
            metrics.push((
                "delta_a".into(),
                relative_state_error(xa, &es.filter.xhat_a_post).map_err(classify)?,
            ));
        }
        _ => log::warn!("input has no state columns; skipping state errors"),
    }

    // Parameter errors need a ground-truth system *and* label alignment.
    if r.theta.is_some() || r.benchmark.is_some() || r.example1 {
        let theta_true = resolve_system(&r)?;
        if traj.s_c.is_none() || traj.s_a.is_none() {
            log::warn!("parameter errors reported without label alignment (no label columns)");
        }
        if theta_true.dims != theta_aligned.dims {
            return Err(Failure::Usage(
                "ground-truth dimensions do not match the estimate".into(),
            ));
        }
        for j in 0..theta_true.dims.m_c {
            metrics.push((
                format!("err_A_c_{}", j + 1),
                max_abs_diff(&theta_aligned.causal[j].a, &theta_true.causal[j].a),
            ));
            metrics.push((
                format!("err_C_c_{}", j + 1),
                max_abs_diff(&theta_aligned.causal[j].c, &theta_true.causal[j].c),
            ));
            metrics.push((
                format!("err_pi_c_{}", j + 1),
                (theta_aligned.pi_c[j] - theta_true.pi_c[j]).abs(),
            ));
        }
        for j in 0..theta_true.dims.m_a {
            metrics.push((
                format!("err_A_a_{}", j + 1),
                max_abs_diff(&theta_aligned.anticausal[j].a, &theta_true.anticausal[j].a),
            ));
            metrics.push((
                format!("err_C_a_{}", j + 1),
                max_abs_diff(&theta_aligned.anticausal[j].c, &theta_true.anticausal[j].c),
            ));
            metrics.push((
                format!("err_pi_a_{}", j + 1),
                (theta_aligned.pi_a[j] - theta_true.pi_a[j]).abs(),
            ));
        }
        metrics.push((
            "sigma_m_trace_ratio".into(),
            theta_aligned.sigma_m.trace() / theta_true.sigma_m.trace(),
        ));
    }

    for (name, value) in &metrics {
        println!("{name} = {value:.6}");
    }
    fmt_io::write_metrics_csv(r.out.join("metrics.csv"), &metrics).map_err(runtime)?;
    Ok(())
}

/// One Monte Carlo trial: simulate at the given noise level with energetic
/// random boundaries, re-estimate the mode sequences by iterating the
/// classification E-step at the true parameters, then score aligned match
/// rates against the simulated truth.
fn mc_trial(
    theta: &ThetaBundle,
    t_len: usize,
    estep_iters: usize,
    seed: u64,
) -> ncasm::Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = rand_distr::StandardNormal;
    let x_c_init = DVector::from_fn(theta.dims.n_xc, |_, _| 5.0 * rng.sample::<f64, _>(normal));
    let x_a_term = DVector::from_fn(theta.dims.n_xa, |_, _| 5.0 * rng.sample::<f64, _>(normal));
    let sim_cfg = SimConfig {
        t_len,
        seed: rng.gen(),
        x_c_init: Some(x_c_init),
        x_a_terminal: Some(x_a_term),
    };
    let traj = simulate(theta, &sim_cfg)?;

    let es_cfg = EStepConfig::default();
    let mut prev: Option<EStepOutput> = None;
    for _ in 0..estep_iters.max(1) {
        let next = run_estep(theta, &traj.y, &es_cfg, prev.as_ref())?;
        prev = Some(next);
    }
    let es = prev.expect("at least one E-step ran");

    let truth_c = traj.s_c.as_ref().expect("simulated data carries labels");
    let truth_a = traj.s_a.as_ref().expect("simulated data carries labels");
    let aligned = align_modes(theta, &es.s_c, &es.s_a, truth_c, truth_a)?;
    Ok((
        mode_match_rate(truth_c, &aligned.s_c)?,
        mode_match_rate(truth_a, &aligned.s_a)?,
    ))
}

fn mean_and_variance(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

fn cmd_montecarlo(args: MontecarloArgs) -> CmdResult {
    let r = resolve_common(&args.common)?;
    let levels = args
        .levels
        .clone()
        .or(r.file.levels.clone())
        .unwrap_or_else(|| vec![0.0, 0.01, 0.1, 0.5, 1.0]);
    if levels.is_empty() || levels.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
        return Err(Failure::Usage("--levels must be nonnegative finite variances".into()));
    }
    let trials = args.trials.or(r.file.trials).unwrap_or(100);
    if trials == 0 {
        return Err(Failure::Usage("--trials must be at least 1".into()));
    }
    let t_len = args.t_len.or(r.file.t_len).unwrap_or(2_000);
    let estep_iters = args.estep_iters.or(r.file.estep_iters).unwrap_or(8);

    // The study varies the measurement-noise covariance only. Default base:
    // the four-output benchmark; a supplied system keeps its chain noises
    // and has Sigma_m replaced by level * I.
    let base = if r.theta.is_none() && r.benchmark.is_none() && !r.example1 {
        benchmark_system(0.0)
    } else {
        resolve_system(&r)?
    };
    let n_y = base.dims.n_y;
    let theta_at_level = |level: f64| -> ThetaBundle {
        let mut theta = base.clone();
        // Keep the covariance positive definite at level zero.
        theta.sigma_m = DMatrix::identity(n_y, n_y) * level.max(1e-18);
        theta
    };

    // One up-front seed table keeps trials reproducible regardless of the
    // parallel execution order.
    let mut seeder = ChaCha8Rng::seed_from_u64(r.seed);
    let trial_seeds: Vec<Vec<u64>> =
        levels.iter().map(|_| (0..trials).map(|_| seeder.gen()).collect()).collect();

    use rayon::prelude::*;
    let per_level: Vec<Vec<ncasm::Result<(f64, f64)>>> = levels
        .par_iter()
        .zip(trial_seeds.par_iter())
        .map(|(&level, seeds)| {
            let theta = theta_at_level(level);
            seeds
                .par_iter()
                .map(|&s| mc_trial(&theta, t_len, estep_iters, s))
                .collect()
        })
        .collect();

    let mut w = csv::Writer::from_path(r.out.join("montecarlo.csv")).map_err(runtime)?;
    w.write_record([
        "level",
        "trials_ok",
        "trials_failed",
        "mean_match_c",
        "var_match_c",
        "mean_match_a",
        "var_match_a",
    ])
    .map_err(runtime)?;
    for (i, level) in levels.iter().enumerate() {
        let mut ok_c = Vec::new();
        let mut ok_a = Vec::new();
        let mut failed = 0usize;
        for res in &per_level[i] {
            match res {
                Ok((mc, ma)) => {
                    ok_c.push(*mc);
                    ok_a.push(*ma);
                }
                Err(e) => {
                    failed += 1;
                    log::warn!("trial failed at level {level}: {e}");
                }
            }
        }
        let (mean_c, var_c) = mean_and_variance(&ok_c);
        let (mean_a, var_a) = mean_and_variance(&ok_a);
        println!(
            "level {:>6}: ok={} failed={} match_c={:.4} (var {:.2e}) match_a={:.4} (var {:.2e})",
            level,
            ok_c.len(),
            failed,
            mean_c,
            var_c,
            mean_a,
            var_a
        );
        w.write_record([
            format!("{level}"),
            ok_c.len().to_string(),
            failed.to_string(),
            format!("{mean_c}"),
            format!("{var_c}"),
            format!("{mean_a}"),
            format!("{var_a}"),
        ])
        .map_err(runtime)?;
    }
    w.flush().map_err(runtime)?;
    println!("montecarlo: wrote {}", r.out.join("montecarlo.csv").display());
    Ok(())
}

fn cmd_rates(args: RatesArgs) -> CmdResult {
    let r = resolve_common(&args.common)?;
    let theta = resolve_system(&r)?;
    let horizons =
        args.horizons.clone().or(r.file.horizons.clone()).unwrap_or_else(|| vec![100, 1_000, 10_000]);
    let n_seeds = args.seeds.or(r.file.seeds).unwrap_or(10);
    if n_seeds == 0 {
        return Err(Failure::Usage("--seeds must be at least 1".into()));
    }
    let rho = args.rho.or(r.file.rho).unwrap_or(0.05);
    let seeds: Vec<u64> = (0..n_seeds as u64).map(|i| r.seed.wrapping_add(i)).collect();

    let probe = rate_probe(&theta, &horizons, &seeds, rho).map_err(classify)?;

    fmt_io::write_rate_probe_csv(r.out.join("rates.csv"), &probe).map_err(runtime)?;
    for (label, (slope, mono)) in probe
        .matrix_labels
        .iter()
        .zip(probe.slopes.iter().zip(probe.monotone.iter()))
    {
        println!(
            "{label}: slope={slope:+.3} median errors {}",
            if *mono { "non-increasing" } else { "NOT monotone" }
        );
    }
    if probe.degenerate {
        println!("rates: errors hit numerical zero somewhere; slopes are vacuous");
    } else if probe.slope_defined {
        println!(
            "rates: median slope {:+.3} over {} horizons x {} seeds, {} surrogate dips",
            probe.median_slope,
            horizons.len(),
            n_seeds,
            probe.q_dips_total
        );
    }
    println!("rates: wrote {}", r.out.join("rates.csv").display());
    Ok(())
}
