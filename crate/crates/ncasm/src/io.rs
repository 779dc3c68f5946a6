//! File formats: parameter JSON, trajectory CSV, fit-report JSON, and
//! diagnostic CSV tables.
//!
//! Conventions shared by every format:
//! - Mode labels are 1-based on disk and 0-based in memory; the conversion
//!   happens here and nowhere else.
//! - JSON floats are printed with 17 significant digits (enough to re-parse
//!   to the identical IEEE-754 double); CSV floats use the shortest
//!   round-tripping decimal form.
//! - Trajectory CSV columns are `t, y_1..y_ny[, xc_1..xc_nxc, xa_1..xa_nxa,
//!   s_c, s_a]` with a mandatory header row; the optional groups appear only
//!   when the data carries them, so output-only files are valid inputs.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write as _};
use std::path::Path;

use nalgebra::DVector;

use crate::diagnostics::RateProbe;
use crate::em::{EmReport, StopReason};
use crate::error::{Error, Result};
use crate::estep::FilterState;
use crate::model::{validate_theta, ThetaBundle, Trajectory};

/// JSON formatter that prints every float with 17 significant digits in
/// scientific notation. Pretty-printing is delegated to the stock
/// two-space indenter.
struct SciNotation<'a> {
    inner: serde_json::ser::PrettyFormatter<'a>,
}

impl SciNotation<'_> {
    fn new() -> Self {
        SciNotation { inner: serde_json::ser::PrettyFormatter::new() }
    }
}

impl serde_json::ser::Formatter for SciNotation<'_> {
    fn write_f64<W: ?Sized + std::io::Write>(&mut self, w: &mut W, value: f64) -> std::io::Result<()> {
        write!(w, "{value:.16e}")
    }

    fn begin_array<W: ?Sized + std::io::Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.inner.begin_array(w)
    }

    fn end_array<W: ?Sized + std::io::Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.inner.end_array(w)
    }

    fn begin_array_value<W: ?Sized + std::io::Write>(&mut self, w: &mut W, first: bool) -> std::io::Result<()> {
        self.inner.begin_array_value(w, first)
    }

    fn end_array_value<W: ?Sized + std::io::Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.inner.end_array_value(w)
    }

    fn begin_object<W: ?Sized + std::io::Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.inner.begin_object(w)
    }

    fn end_object<W: ?Sized + std::io::Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.inner.end_object(w)
    }

    fn begin_object_key<W: ?Sized + std::io::Write>(&mut self, w: &mut W, first: bool) -> std::io::Result<()> {
        self.inner.begin_object_key(w, first)
    }

    fn end_object_key<W: ?Sized + std::io::Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.inner.end_object_key(w)
    }

    fn begin_object_value<W: ?Sized + std::io::Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.inner.begin_object_value(w)
    }

    fn end_object_value<W: ?Sized + std::io::Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.inner.end_object_value(w)
    }
}

fn write_json_value<P: AsRef<Path>>(path: P, value: &serde_json::Value) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    let mut ser = serde_json::Serializer::with_formatter(file, SciNotation::new());
    serde::Serialize::serialize(value, &mut ser)?;
    let mut file = ser.into_inner();
    file.write_all(b"\n")?;
    file.flush()?;
    Ok(())
}

/// Writes a parameter bundle as JSON (keys `dims`, `causal`, `anticausal`,
/// `pi_c`, `pi_a`, `Sigma_m`; matrices as row-major nested arrays).
pub fn write_theta_json<P: AsRef<Path>>(path: P, theta: &ThetaBundle) -> Result<()> {
    write_json_value(path, &serde_json::to_value(theta)?)
}

/// Reads a parameter bundle and checks it against the model contract
/// (shapes, covariance definiteness, probability simplexes).
pub fn read_theta_json<P: AsRef<Path>>(path: P) -> Result<ThetaBundle> {
    let file = BufReader::new(File::open(path)?);
    let theta: ThetaBundle = serde_json::from_reader(file)?;
    validate_theta(&theta)?;
    Ok(theta)
}

fn fmt_f64(v: f64) -> String {
    // `{}` on f64 is the shortest decimal that re-parses to the same bits.
    format!("{v}")
}

/// Writes a trajectory as CSV. Column groups for states and mode labels are
/// emitted only when present; mode labels and the time index are 1-based.
pub fn write_trajectory_csv<P: AsRef<Path>>(path: P, traj: &Trajectory) -> Result<()> {
    let t_len = traj.y.len();
    if t_len == 0 {
        return Err(Error::Invalid("trajectory csv: no time steps to write".into()));
    }
    let n_y = traj.y[0].len();
    let mut w = csv::Writer::from_path(path)?;

    let mut header: Vec<String> = vec!["t".into()];
    for i in 1..=n_y {
        header.push(format!("y_{i}"));
    }
    if let Some(xc) = &traj.x_c {
        for i in 1..=xc[0].len() {
            header.push(format!("xc_{i}"));
        }
    }
    if let Some(xa) = &traj.x_a {
        for i in 1..=xa[0].len() {
            header.push(format!("xa_{i}"));
        }
    }
    if traj.s_c.is_some() {
        header.push("s_c".into());
    }
    if traj.s_a.is_some() {
        header.push("s_a".into());
    }
    w.write_record(&header)?;

    for t in 0..t_len {
        let mut rec: Vec<String> = vec![(t + 1).to_string()];
        rec.extend(traj.y[t].iter().map(|&v| fmt_f64(v)));
        if let Some(xc) = &traj.x_c {
            rec.extend(xc[t].iter().map(|&v| fmt_f64(v)));
        }
        if let Some(xa) = &traj.x_a {
            rec.extend(xa[t].iter().map(|&v| fmt_f64(v)));
        }
        if let Some(sc) = &traj.s_c {
            rec.push((sc[t] + 1).to_string());
        }
        if let Some(sa) = &traj.s_a {
            rec.push((sa[t] + 1).to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// One contiguous indexed column group (`y_1..y_k`) in a trajectory header.
fn count_group(headers: &csv::StringRecord, start: usize, prefix: &str) -> usize {
    let mut k = 0;
    while headers.get(start + k) == Some(format!("{prefix}_{}", k + 1).as_str()) {
        k += 1;
    }
    k
}

/// Reads a trajectory CSV. The header row is mandatory and must follow the
/// written layout; the state and label groups are each optional, so an
/// output-only file (`t, y_1..`) is accepted.
pub fn read_trajectory_csv<P: AsRef<Path>>(path: P) -> Result<Trajectory> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers = rdr.headers()?.clone();

    if headers.get(0) != Some("t") {
        return Err(Error::Parse(format!(
            "line 1: expected a header row starting with 't', got '{}'",
            headers.get(0).unwrap_or("")
        )));
    }
    let mut at = 1;
    let n_y = count_group(&headers, at, "y");
    if n_y == 0 {
        return Err(Error::Parse(
            "line 1: header must contain at least one output column 'y_1'".into(),
        ));
    }
    at += n_y;
    let n_xc = count_group(&headers, at, "xc");
    at += n_xc;
    let n_xa = count_group(&headers, at, "xa");
    at += n_xa;
    let has_sc = headers.get(at) == Some("s_c");
    at += usize::from(has_sc);
    let has_sa = headers.get(at) == Some("s_a");
    at += usize::from(has_sa);
    if at != headers.len() {
        return Err(Error::Parse(format!(
            "line 1: unexpected header column '{}'",
            headers.get(at).unwrap_or("")
        )));
    }

    let mut y = Vec::new();
    let mut x_c: Vec<DVector<f64>> = Vec::new();
    let mut x_a: Vec<DVector<f64>> = Vec::new();
    let mut s_c: Vec<usize> = Vec::new();
    let mut s_a: Vec<usize> = Vec::new();

    for record in rdr.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != headers.len() {
            return Err(Error::Parse(format!(
                "line {line}: expected {} fields, got {}",
                headers.len(),
                record.len()
            )));
        }
        let float_at = |idx: usize| -> Result<f64> {
            let raw = record.get(idx).unwrap_or("");
            raw.parse::<f64>().map_err(|_| {
                Error::Parse(format!(
                    "line {line}: '{raw}' in column '{}' is not a number",
                    headers.get(idx).unwrap_or("?")
                ))
            })
        };
        let label_at = |idx: usize| -> Result<usize> {
            let raw = record.get(idx).unwrap_or("");
            let v: usize = raw.parse().map_err(|_| {
                Error::Parse(format!(
                    "line {line}: '{raw}' in column '{}' is not a mode label",
                    headers.get(idx).unwrap_or("?")
                ))
            })?;
            if v == 0 {
                return Err(Error::Parse(format!(
                    "line {line}: mode labels are 1-based, got 0 in column '{}'",
                    headers.get(idx).unwrap_or("?")
                )));
            }
            Ok(v - 1)
        };

        // The `t` column is informational; only its syntax is checked.
        record.get(0).unwrap_or("").parse::<i64>().map_err(|_| {
            Error::Parse(format!(
                "line {line}: '{}' in column 't' is not an integer",
                record.get(0).unwrap_or("")
            ))
        })?;

        let vector_at = |start: usize, n: usize| -> Result<DVector<f64>> {
            let mut vals = Vec::with_capacity(n);
            for i in 0..n {
                vals.push(float_at(start + i)?);
            }
            Ok(DVector::from_vec(vals))
        };

        let mut at = 1;
        y.push(vector_at(at, n_y)?);
        at += n_y;
        if n_xc > 0 {
            x_c.push(vector_at(at, n_xc)?);
            at += n_xc;
        }
        if n_xa > 0 {
            x_a.push(vector_at(at, n_xa)?);
            at += n_xa;
        }
        if has_sc {
            s_c.push(label_at(at)?);
            at += 1;
        }
        if has_sa {
            s_a.push(label_at(at)?);
        }
    }

    if y.is_empty() {
        return Err(Error::Parse("no data rows after the header".into()));
    }
    Ok(Trajectory {
        y,
        x_c: (n_xc > 0).then_some(x_c),
        x_a: (n_xa > 0).then_some(x_a),
        s_c: has_sc.then_some(s_c),
        s_a: has_sa.then_some(s_a),
    })
}

/// Writes per-step posterior means and covariance diagonals of both chains:
/// `t, xc_post_1.., pc_diag_1.., xa_post_1.., pa_diag_1..`.
pub fn write_filter_csv<P: AsRef<Path>>(path: P, filter: &FilterState) -> Result<()> {
    let t_len = filter.xhat_c_post.len();
    if t_len == 0 {
        return Err(Error::Invalid("filter csv: no time steps to write".into()));
    }
    let n_xc = filter.xhat_c_post[0].len();
    let n_xa = filter.xhat_a_post[0].len();
    let mut w = csv::Writer::from_path(path)?;

    let mut header: Vec<String> = vec!["t".into()];
    for i in 1..=n_xc {
        header.push(format!("xc_post_{i}"));
    }
    for i in 1..=n_xc {
        header.push(format!("pc_diag_{i}"));
    }
    for i in 1..=n_xa {
        header.push(format!("xa_post_{i}"));
    }
    for i in 1..=n_xa {
        header.push(format!("pa_diag_{i}"));
    }
    w.write_record(&header)?;

    for t in 0..t_len {
        let mut rec: Vec<String> = vec![(t + 1).to_string()];
        rec.extend(filter.xhat_c_post[t].iter().map(|&v| fmt_f64(v)));
        rec.extend(filter.p_c_post[t].diagonal().iter().map(|&v| fmt_f64(v)));
        rec.extend(filter.xhat_a_post[t].iter().map(|&v| fmt_f64(v)));
        rec.extend(filter.p_a_post[t].diagonal().iter().map(|&v| fmt_f64(v)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn stop_reason_str(reason: StopReason) -> &'static str {
    match reason {
        StopReason::TolTheta => "tol_theta",
        StopReason::TolQ => "tol_q",
        StopReason::MaxIterations => "max_iterations",
        StopReason::Aborted => "aborted",
    }
}

/// Writes a fit report as JSON: run summary, the per-iteration record list,
/// and the final parameters under `theta` (same layout as the theta file).
pub fn write_em_report_json<P: AsRef<Path>>(path: P, report: &EmReport) -> Result<()> {
    let iterates: Vec<serde_json::Value> = report
        .iterates
        .iter()
        .map(|it| {
            serde_json::json!({
                "iter": it.iter,
                "q": it.q,
                "flip_count": it.flip_count,
                "theta_delta": it.theta_delta,
                "ridge_events": it.ridge_events,
                "frozen": it.frozen,
                "match_rate_c": it.match_rate_c,
                "match_rate_a": it.match_rate_a,
            })
        })
        .collect();
    let doc = serde_json::json!({
        "converged": report.converged,
        "stop_reason": stop_reason_str(report.stop_reason),
        "iterations": report.iterates.len(),
        "q_dips": report.q_dips,
        "abort": report.abort.as_ref().map(|a| {
            serde_json::json!({ "iteration": a.iteration, "message": a.message })
        }),
        "iterates": iterates,
        "theta": serde_json::to_value(&report.final_theta)?,
    });
    write_json_value(path, &doc)
}

/// Writes the per-iteration surrogate trace as a two-column CSV (`iter,q`).
pub fn write_q_trace_csv<P: AsRef<Path>>(path: P, report: &EmReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["iter", "q"])?;
    for it in &report.iterates {
        w.write_record([it.iter.to_string(), fmt_f64(it.q)])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes named scalar metrics as a two-column CSV (`metric,value`).
pub fn write_metrics_csv<P: AsRef<Path>>(path: P, rows: &[(String, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["metric", "value"])?;
    for (name, value) in rows {
        w.write_record([name.clone(), fmt_f64(*value)])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes a rate probe as a long-format CSV with columns
/// `record,horizon,seed,metric,value`:
/// - `trial` rows: one per horizon x seed x matrix (aligned max-abs error);
/// - `gram_min` rows: smallest per-mode Gram eigenvalue, one per chain mode;
/// - `median` rows: per-matrix median error at each horizon;
/// - `slope` rows: per-matrix fitted log-log slope (when defined);
/// - `summary` rows: median slope, monotonicity count, degeneracy flags,
///   and the total number of surrogate dips observed across fits.
pub fn write_rate_probe_csv<P: AsRef<Path>>(path: P, probe: &RateProbe) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["record", "horizon", "seed", "metric", "value"])?;
    let mut row = |record: &str, horizon: String, seed: String, metric: &str, value: String| {
        w.write_record([record, &horizon, &seed, metric, &value])
    };

    for (h, horizon) in probe.horizons.iter().enumerate() {
        for (s, per_matrix) in probe.per_seed_errors[h].iter().enumerate() {
            for (m, err) in per_matrix.iter().enumerate() {
                row("trial", horizon.to_string(), s.to_string(), &probe.matrix_labels[m], fmt_f64(*err))?;
            }
            for (mode, spec) in probe.gram_c[h][s].iter().enumerate() {
                row(
                    "gram_min",
                    horizon.to_string(),
                    s.to_string(),
                    &format!("lambda_min_c({})", mode + 1),
                    fmt_f64(spec.lambda_min),
                )?;
            }
            for (mode, spec) in probe.gram_a[h][s].iter().enumerate() {
                row(
                    "gram_min",
                    horizon.to_string(),
                    s.to_string(),
                    &format!("lambda_min_a({})", mode + 1),
                    fmt_f64(spec.lambda_min),
                )?;
            }
        }
    }
    for (m, label) in probe.matrix_labels.iter().enumerate() {
        for (h, horizon) in probe.horizons.iter().enumerate() {
            row("median", horizon.to_string(), String::new(), label, fmt_f64(probe.median_errors[m][h]))?;
        }
    }
    if probe.slope_defined && !probe.degenerate {
        for (m, label) in probe.matrix_labels.iter().enumerate() {
            row("slope", String::new(), String::new(), label, fmt_f64(probe.slopes[m]))?;
        }
        row("summary", String::new(), String::new(), "median_slope", fmt_f64(probe.median_slope))?;
    }
    let monotone_count = probe.monotone.iter().filter(|&&b| b).count();
    row("summary", String::new(), String::new(), "monotone_matrices", monotone_count.to_string())?;
    row("summary", String::new(), String::new(), "degenerate", u8::from(probe.degenerate).to_string())?;
    row("summary", String::new(), String::new(), "slope_defined", u8::from(probe.slope_defined).to_string())?;
    row("summary", String::new(), String::new(), "q_dips_total", probe.q_dips_total.to_string())?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::em::{fit, EmConfig, InitStrategy};
    use crate::model::{benchmark_system, example1};
    use crate::simulate::{simulate, SimConfig};

    fn tmpfile(name: &str) -> std::path::PathBuf {
        let dir = tempfile::tempdir().unwrap();
        // Leak the handle so the directory survives the test body.
        let path = dir.path().join(name);
        std::mem::forget(dir);
        path
    }

    #[test]
    fn theta_json_file_round_trip_is_bit_exact() {
        let theta = benchmark_system(0.37);
        let path = tmpfile("theta.json");
        write_theta_json(&path, &theta).unwrap();
        let back = read_theta_json(&path).unwrap();
        assert_eq!(theta, back);
    }

    #[test]
    fn theta_json_prints_seventeen_significant_digits() {
        let path = tmpfile("theta.json");
        write_theta_json(&path, &example1()).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        // Every float is rendered as scientific notation with a 16-digit
        // fractional part, e.g. 8.9999999999999997e-1.
        assert!(text.contains("e-1") || text.contains("e0"));
        let has_17_sig = text.lines().any(|l| {
            l.trim_start()
                .trim_start_matches('-')
                .split('e')
                .next()
                .is_some_and(|m| m.len() == 18 && m.contains('.'))
        });
        assert!(has_17_sig, "expected 17-significant-digit floats:\n{text}");
    }

    #[test]
    fn invalid_theta_file_is_rejected() {
        let mut theta = example1();
        theta.pi_c = vec![0.9, 0.9];
        let path = tmpfile("bad.json");
        // Bypass validation on write by serializing directly.
        let text = serde_json::to_string(&theta).unwrap();
        std::fs::write(&path, text).unwrap();
        let err = read_theta_json(&path).unwrap_err();
        assert!(err.to_string().contains("pi_c"), "unexpected error: {err}");
    }

    #[test]
    fn trajectory_csv_round_trip_is_bit_exact() {
        let theta = example1();
        let traj = simulate(&theta, &SimConfig::new(40, 3)).unwrap();
        let path = tmpfile("traj.csv");
        write_trajectory_csv(&path, &traj).unwrap();
        let back = read_trajectory_csv(&path).unwrap();
        assert_eq!(traj, back);
    }

    #[test]
    fn trajectory_csv_header_shape_for_reference_system() {
        let theta = example1();
        let traj = simulate(&theta, &SimConfig::new(5, 0)).unwrap();
        let path = tmpfile("traj.csv");
        write_trajectory_csv(&path, &traj).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let header = text.lines().next().unwrap();
        assert_eq!(header, "t,y_1,xc_1,xc_2,xa_1,xa_2,s_c,s_a");
        assert_eq!(text.lines().count(), 6);
    }

    #[test]
    fn output_only_csv_is_accepted() {
        let path = tmpfile("y.csv");
        std::fs::write(&path, "t,y_1,y_2\n1,0.5,1.0\n2,-0.25,2.0\n3,0.125,3.0\n").unwrap();
        let traj = read_trajectory_csv(&path).unwrap();
        assert_eq!(traj.y.len(), 3);
        assert_eq!(traj.y[1][0], -0.25);
        assert_eq!(traj.y[2][1], 3.0);
        assert!(traj.x_c.is_none() && traj.x_a.is_none());
        assert!(traj.s_c.is_none() && traj.s_a.is_none());
    }

    #[test]
    fn missing_header_names_the_line() {
        let path = tmpfile("raw.csv");
        std::fs::write(&path, "1,0.5\n2,-0.25\n").unwrap();
        let err = read_trajectory_csv(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 1") && msg.contains("header"), "unexpected error: {msg}");
    }

    #[test]
    fn bad_float_names_line_and_column() {
        let path = tmpfile("bad.csv");
        std::fs::write(&path, "t,y_1\n1,0.5\n2,oops\n").unwrap();
        let err = read_trajectory_csv(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 3") && msg.contains("y_1"), "unexpected error: {msg}");
    }

    #[test]
    fn zero_mode_label_is_rejected_as_not_one_based() {
        let path = tmpfile("labels.csv");
        std::fs::write(&path, "t,y_1,s_c,s_a\n1,0.5,1,2\n2,1.5,0,1\n").unwrap();
        let err = read_trajectory_csv(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("1-based") && msg.contains("line 3"), "unexpected error: {msg}");
    }

    #[test]
    fn labels_shift_to_zero_based_in_memory() {
        let path = tmpfile("labels.csv");
        std::fs::write(&path, "t,y_1,s_c,s_a\n1,0.5,1,2\n2,1.5,2,1\n").unwrap();
        let traj = read_trajectory_csv(&path).unwrap();
        assert_eq!(traj.s_c.unwrap(), vec![0, 1]);
        assert_eq!(traj.s_a.unwrap(), vec![1, 0]);
    }

    #[test]
    fn unknown_header_column_is_rejected() {
        let path = tmpfile("extra.csv");
        std::fs::write(&path, "t,y_1,pressure\n1,0.5,7\n").unwrap();
        let err = read_trajectory_csv(&path).unwrap_err();
        assert!(err.to_string().contains("pressure"), "unexpected error: {err}");
    }

    #[test]
    fn ragged_row_is_rejected_with_line_number() {
        let path = tmpfile("ragged.csv");
        std::fs::write(&path, "t,y_1,y_2\n1,0.5,1.0\n2,0.25\n").unwrap();
        let err = read_trajectory_csv(&path).unwrap_err();
        // The csv crate reports unequal row lengths with position info.
        assert!(err.to_string().contains('3') || err.to_string().contains("fields"));
    }

    fn small_report() -> EmReport {
        let theta = benchmark_system(0.1);
        let traj = simulate(&theta, &SimConfig::new(120, 5)).unwrap();
        let cfg = EmConfig {
            max_iters: 3,
            init: InitStrategy::Perturb { reference: Box::new(theta.clone()), rho: 0.05 },
            ..Default::default()
        };
        fit(&traj, &theta.dims, &cfg).unwrap()
    }

    #[test]
    fn em_report_json_carries_iterates_and_reparsable_theta() {
        let report = small_report();
        let path = tmpfile("report.json");
        write_em_report_json(&path, &report).unwrap();
        let doc: serde_json::Value =
            serde_json::from_reader(File::open(&path).unwrap()).unwrap();
        assert_eq!(doc["iterations"].as_u64().unwrap() as usize, report.iterates.len());
        assert_eq!(doc["iterates"][0]["iter"].as_u64(), Some(1));
        assert!(doc["iterates"][0]["q"].is_f64());
        let theta: ThetaBundle = serde_json::from_value(doc["theta"].clone()).unwrap();
        assert_eq!(theta, report.final_theta);
    }

    #[test]
    fn q_trace_csv_has_one_row_per_iteration() {
        let report = small_report();
        let path = tmpfile("qtrace.csv");
        write_q_trace_csv(&path, &report).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 1 + report.iterates.len());
        assert!(text.starts_with("iter,q\n1,"));
    }

    #[test]
    fn filter_csv_shape_matches_dimensions() {
        let theta = example1();
        let traj = simulate(&theta, &SimConfig::new(12, 1)).unwrap();
        let es = crate::estep::run_estep(&theta, &traj.y, &Default::default(), None).unwrap();
        let path = tmpfile("filter.csv");
        write_filter_csv(&path, &es.filter).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let header = text.lines().next().unwrap();
        assert_eq!(
            header,
            "t,xc_post_1,xc_post_2,pc_diag_1,pc_diag_2,xa_post_1,xa_post_2,pa_diag_1,pa_diag_2"
        );
        assert_eq!(text.lines().count(), 13);
    }

    #[test]
    fn metrics_csv_is_two_columns() {
        let path = tmpfile("metrics.csv");
        write_metrics_csv(&path, &[("delta_output".into(), 0.25), ("match_rate_c".into(), 0.9)])
            .unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "metric,value\ndelta_output,0.25\nmatch_rate_c,0.9\n");
    }

    #[test]
    fn rate_probe_csv_has_trial_rows_and_slope_summary() {
        let theta = benchmark_system(0.01);
        let probe = crate::diagnostics::rate_probe(&theta, &[100, 200], &[11, 12], 0.05).unwrap();
        let path = tmpfile("rates.csv");
        write_rate_probe_csv(&path, &probe).unwrap();
        let mut rdr = csv::Reader::from_path(&path).unwrap();
        let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
        let trials = rows.iter().filter(|r| r.get(0) == Some("trial")).count();
        // horizons x seeds x matrices (8 matrices: A and C for 2 modes x 2 chains).
        assert_eq!(trials, 2 * 2 * probe.matrix_labels.len());
        assert!(rows.iter().any(|r| r.get(3) == Some("median_slope")) || probe.degenerate);
        assert!(rows.iter().any(|r| r.get(0) == Some("summary")));
    }
}
