//! CSV and JSON persistence of closed-loop traces.

use std::fs::File;
use std::path::Path;

use vhempc::{ClosedLoopTrace, ConvergenceCertificate};

use crate::CliError;

/// 17 significant digits, enough to round-trip every `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

fn writer(path: &Path) -> Result<csv::Writer<File>, CliError> {
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    Ok(csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(file))
}

fn write_rows(path: &Path, header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<(), CliError> {
    let mut w = writer(path)?;
    let err = |e: csv::Error| CliError::Runtime(format!("writing {}: {e}", path.display()));
    w.write_record(header).map_err(err)?;
    for row in rows {
        w.write_record(&row).map_err(err)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

fn header(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

/// One parsed `trace.csv` row.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub k: usize,
    pub horizon: usize,
    pub pi: Option<f64>,
    pub vae: Option<f64>,
    pub le: f64,
    pub le_running_avg: f64,
    pub solve_time_ms: f64,
    pub case_tag: String,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
}

/// Rows as they are written, for comparison with a re-parsed file.
pub fn trace_rows(trace: &ClosedLoopTrace) -> Vec<TraceRow> {
    let avg = trace.running_average();
    trace
        .steps
        .iter()
        .zip(avg)
        .map(|(s, a)| TraceRow {
            k: s.k,
            horizon: s.horizon,
            pi: s.pi,
            vae: s.vae,
            le: s.le,
            le_running_avg: a,
            solve_time_ms: s.solve_time_ms,
            case_tag: s.case_tag.as_str().to_string(),
            x: s.x.clone(),
            u: s.u.clone(),
        })
        .collect()
}

pub fn trace_header(n: usize, m: usize) -> Vec<String> {
    let mut h = header(&["k", "N_k", "pi", "Vae", "Le", "Le_running_avg", "solve_time_ms", "case_tag"]);
    h.extend((0..n).map(|i| format!("x{i}")));
    h.extend((0..m).map(|i| format!("u{i}")));
    h
}

/// Writes `trace.csv`; states and inputs are deviations from the steady state.
pub fn write_trace(path: &Path, trace: &ClosedLoopTrace) -> Result<(), CliError> {
    let rows = trace_rows(trace);
    let (n, m) = rows.first().map_or((0, 0), |r| (r.x.len(), r.u.len()));
    write_rows(
        path,
        &trace_header(n, m),
        rows.into_iter().map(|r| {
            let mut out = vec![
                r.k.to_string(),
                r.horizon.to_string(),
                fmt_opt(r.pi),
                fmt_opt(r.vae),
                fmt_f64(r.le),
                fmt_f64(r.le_running_avg),
                fmt_f64(r.solve_time_ms),
                r.case_tag,
            ];
            out.extend(r.x.iter().copied().map(fmt_f64));
            out.extend(r.u.iter().copied().map(fmt_f64));
            out
        }),
    )
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRow>, CliError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::Runtime(format!("reading {}: {e}", path.display())))?;
    let headers = r.headers().map_err(|e| CliError::Runtime(e.to_string()))?.clone();
    let n = headers.iter().filter(|h| h.starts_with('x')).count();
    let m = headers.iter().filter(|h| h.starts_with('u')).count();
    let bad = |what: &str| CliError::Runtime(format!("{}: malformed {what}", path.display()));
    let num = |s: &str, what: &str| s.parse::<f64>().map_err(|_| bad(what));
    let opt = |s: &str, what: &str| if s.is_empty() { Ok(None) } else { num(s, what).map(Some) };
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| CliError::Runtime(e.to_string()))?;
        if rec.len() != 8 + n + m {
            return Err(bad("row width"));
        }
        rows.push(TraceRow {
            k: rec[0].parse().map_err(|_| bad("k"))?,
            horizon: rec[1].parse().map_err(|_| bad("N_k"))?,
            pi: opt(&rec[2], "pi")?,
            vae: opt(&rec[3], "Vae")?,
            le: num(&rec[4], "Le")?,
            le_running_avg: num(&rec[5], "Le_running_avg")?,
            solve_time_ms: num(&rec[6], "solve_time_ms")?,
            case_tag: rec[7].to_string(),
            x: (0..n).map(|i| num(&rec[8 + i], "state")).collect::<Result<_, _>>()?,
            u: (0..m).map(|i| num(&rec[8 + n + i], "input")).collect::<Result<_, _>>()?,
        });
    }
    Ok(rows)
}

pub fn write_certificate(path: &Path, cert: &ConvergenceCertificate) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(cert).map_err(|e| CliError::Runtime(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

/// One plot-ready file per figure panel.
pub fn write_panels(dir: &Path, trace: &ClosedLoopTrace) -> Result<(), CliError> {
    let steps = &trace.steps;
    write_rows(
        &dir.join("panel_horizon.csv"),
        &header(&["k", "N_k"]),
        steps.iter().map(|s| vec![s.k.to_string(), s.horizon.to_string()]),
    )?;
    write_rows(
        &dir.join("panel_filters.csv"),
        &header(&["k", "pi", "Vae", "pi1", "pi2", "pi3"]),
        steps.iter().map(|s| {
            let all = s.all_filters.map(|f| f.map(Some)).unwrap_or([None; 3]);
            vec![
                s.k.to_string(),
                fmt_opt(s.pi),
                fmt_opt(s.vae),
                fmt_opt(all[0]),
                fmt_opt(all[1]),
                fmt_opt(all[2]),
            ]
        }),
    )?;
    write_rows(
        &dir.join("panel_stage_cost.csv"),
        &header(&["k", "Le"]),
        steps.iter().map(|s| vec![s.k.to_string(), fmt_f64(s.le)]),
    )?;
    write_rows(
        &dir.join("panel_solve_time.csv"),
        &header(&["k", "N_k", "solve_time_ms"]),
        steps
            .iter()
            .filter(|s| s.pi.is_some())
            .map(|s| vec![s.k.to_string(), s.horizon.to_string(), fmt_f64(s.solve_time_ms)]),
    )?;
    write_rows(
        &dir.join("panel_average.csv"),
        &header(&["k", "Le_running_avg"]),
        steps.iter().zip(trace.running_average()).map(|(s, a)| vec![s.k.to_string(), fmt_f64(a)]),
    )
}

pub fn write_table(path: &Path, names: &[&str], rows: Vec<Vec<String>>) -> Result<(), CliError> {
    write_rows(path, &header(names), rows)
}
