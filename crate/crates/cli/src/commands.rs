use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;
use vhempc::controller::{min_initial_horizon, reference_trajectory};
use vhempc::ocp::Solver;
use vhempc::stats::{median, spearman};
use vhempc::{run_closed_loop, ClosedLoopTrace, ControlProblem, ControllerConfig, ConvergenceCertificate, Vector};

use crate::config::{ExperimentConfig, PerStep, Setting};
use crate::output::{fmt_f64, write_certificate, write_panels, write_table, write_trace};
use crate::CliError;

/// Problem plus initial state in deviation coordinates.
pub fn prepare(cfg: &ExperimentConfig) -> Result<(ControlProblem, Vector), CliError> {
    let problem = ControlProblem::build(cfg.problem_config())?;
    let n = problem.model.state_dim();
    if cfg.x0.len() != n {
        return Err(CliError::Parse(format!("x0 has {} entries, the plant has {n} states", cfg.x0.len())));
    }
    if !problem.plant.state_box().contains(&cfg.x0, 0.0) {
        return Err(CliError::Init(format!(
            "x0 = {:?} lies outside the state constraints [{:?}, {:?}]",
            cfg.x0,
            problem.plant.state_box().lower,
            problem.plant.state_box().upper
        )));
    }
    let x0 = problem.model.from_plant_state(&Vector::from_vec(cfg.x0.clone()));
    Ok((problem, x0))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

#[derive(Serialize)]
struct ConfigEcho<'a> {
    experiment: &'a ExperimentConfig,
    problem: &'a vhempc::ProblemConfig,
    steady_state: &'a [f64],
    steady_input: &'a [f64],
    controller: &'a ControllerConfig,
}

fn write_run(dir: &Path, cfg: &ExperimentConfig, problem: &ControlProblem, controller: &ControllerConfig, trace: &ClosedLoopTrace) -> Result<(), CliError> {
    create_dir(dir)?;
    write_trace(&dir.join("trace.csv"), trace)?;
    write_certificate(&dir.join("certificate.json"), &trace.certificate)?;
    write_panels(dir, trace)?;
    let echo = ConfigEcho {
        experiment: cfg,
        problem: &problem.config,
        steady_state: problem.steady.x_s.as_slice(),
        steady_input: problem.steady.u_s.as_slice(),
        controller,
    };
    let text = serde_json::to_string_pretty(&echo).map_err(|e| CliError::Runtime(e.to_string()))?;
    let path = dir.join("config.json");
    std::fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))
}

fn certificate_result(cert: &ConvergenceCertificate) -> Result<(), CliError> {
    if cert.passed {
        Ok(())
    } else {
        Err(CliError::Invariant(cert.violations.join("; ")))
    }
}

pub fn simulate(cfg: &ExperimentConfig, out: &Path) -> Result<ConvergenceCertificate, CliError> {
    let (problem, x0) = prepare(cfg)?;
    let controller = cfg.base_controller_config()?;
    let trace = run_closed_loop(&problem, &x0, &controller)?;
    write_run(out, cfg, &problem, &controller, &trace)?;
    for w in &trace.certificate.warnings {
        eprintln!("warning: {w}");
    }
    println!(
        "{} steps, reached X_psi after {:?} (bound {:.0}), average L_e {:.6} vs steady {:.6}",
        trace.certificate.steps,
        trace.certificate.steps_to_psi,
        trace.certificate.s_psi_bound.ceil(),
        trace.certificate.average_le,
        trace.certificate.steady_le
    );
    certificate_result(&trace.certificate)?;
    Ok(trace.certificate)
}

fn describe<T: std::fmt::Debug>(v: &PerStep<T>) -> String {
    match v {
        PerStep::Constant(c) => format!("{c:?}"),
        PerStep::List(l) => format!("{l:?}").replace(", ", " "),
    }
}

/// Result of one sweep setting.
pub struct SettingOutcome {
    pub label: String,
    pub certificate: Option<ConvergenceCertificate>,
    /// `(horizon, solve time in ms)` from the timed repeats.
    pub timings: Vec<(usize, f64)>,
    pub error: Option<CliError>,
}

fn run_setting(cfg: &ExperimentConfig, problem: &ControlProblem, x0: &Vector, index: usize, setting: &Setting, out: &Path) -> SettingOutcome {
    let label = format!("upsilon={};sigma={}", describe(&setting.upsilon), describe(&setting.sigma));
    let mut outcome = SettingOutcome {
        label,
        certificate: None,
        timings: Vec::new(),
        error: None,
    };
    let result = (|| -> Result<(), CliError> {
        let controller = cfg.controller_config(&setting.upsilon, &setting.sigma)?;
        let mut last = None;
        // the first run warms caches and is not timed
        for rep in 0..=cfg.repeats {
            let trace = run_closed_loop(problem, x0, &controller)?;
            if rep > 0 {
                outcome
                    .timings
                    .extend(trace.steps.iter().filter(|s| s.pi.is_some()).map(|s| (s.horizon, s.solve_time_ms)));
            }
            last = Some(trace);
        }
        let trace = last.expect("at least one run");
        write_run(&out.join(format!("setting_{index}")), cfg, problem, &controller, &trace)?;
        outcome.certificate = Some(trace.certificate.clone());
        certificate_result(&trace.certificate)
    })();
    outcome.error = result.err();
    outcome
}

/// Bin edges: configured, or five equal-width bins covering the observed horizons.
pub fn horizon_edges(configured: Option<&[usize]>, max_horizon: usize) -> Vec<usize> {
    if let Some(e) = configured {
        return e.to_vec();
    }
    let width = max_horizon.div_ceil(5).max(1);
    let mut edges = vec![1];
    while *edges.last().unwrap() <= max_horizon {
        edges.push(edges.last().unwrap() + width);
    }
    edges
}

/// `(lo, hi, samples, median)` per bin `[lo, hi)`.
pub fn bin_medians(timings: &[(usize, f64)], edges: &[usize]) -> Vec<(usize, usize, usize, Option<f64>)> {
    edges
        .windows(2)
        .map(|w| {
            let v: Vec<f64> = timings.iter().filter(|(n, _)| *n >= w[0] && *n < w[1]).map(|t| t.1).collect();
            (w[0], w[1], v.len(), median(&v))
        })
        .collect()
}

pub fn sweep(cfg: &ExperimentConfig, out: &Path, jobs: Option<usize>) -> Result<Vec<SettingOutcome>, CliError> {
    let section = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| CliError::Parse("sweep needs a [sweep] section with settings".into()))?;
    let (problem, x0) = prepare(cfg)?;
    create_dir(out)?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(j) = jobs {
        builder = builder.num_threads(j.max(1));
    }
    let pool = builder.build().map_err(|e| CliError::Runtime(e.to_string()))?;
    let outcomes: Vec<SettingOutcome> = pool.install(|| {
        section
            .settings
            .par_iter()
            .enumerate()
            .map(|(i, s)| run_setting(cfg, &problem, &x0, i, s, out))
            .collect()
    });

    let max_h = outcomes.iter().flat_map(|o| o.timings.iter().map(|t| t.0)).max().unwrap_or(1);
    let edges = horizon_edges(section.horizon_bins.as_deref(), max_h);
    let mut rows = Vec::new();
    for (i, o) in outcomes.iter().enumerate() {
        let (psi, avg) = o.certificate.as_ref().map_or((String::new(), String::new()), |c| {
            (c.steps_to_psi.map(|s| s.to_string()).unwrap_or_default(), fmt_f64(c.average_le))
        });
        for (lo, hi, count, med) in bin_medians(&o.timings, &edges) {
            rows.push(vec![
                i.to_string(),
                o.label.clone(),
                psi.clone(),
                avg.clone(),
                lo.to_string(),
                hi.to_string(),
                count.to_string(),
                med.map(fmt_f64).unwrap_or_default(),
            ]);
        }
    }
    write_table(
        &out.join("summary.csv"),
        &["setting", "label", "steps_to_psi", "final_avg_Le", "bin_lo", "bin_hi", "samples", "median_solve_ms"],
        rows,
    )?;

    let pooled: Vec<(usize, f64)> = outcomes.iter().flat_map(|o| o.timings.iter().copied()).collect();
    let bins = bin_medians(&pooled, &edges);
    write_table(
        &out.join("timing.csv"),
        &["bin_lo", "bin_hi", "samples", "median_solve_ms"],
        bins.iter()
            .map(|(lo, hi, c, m)| vec![lo.to_string(), hi.to_string(), c.to_string(), m.map(fmt_f64).unwrap_or_default()])
            .collect(),
    )?;
    let (xs, ys): (Vec<f64>, Vec<f64>) = bins.iter().filter_map(|(lo, _, _, m)| m.map(|m| (*lo as f64, m))).unzip();
    match spearman(&xs, &ys) {
        Some(rho) if rho >= 0.8 => println!("timing trend: spearman {rho:.2} over {} bins", xs.len()),
        Some(rho) => eprintln!("warning: timing trend is weak (spearman {rho:.2} over {} bins)", xs.len()),
        None => eprintln!("warning: too few horizon bins for a timing trend"),
    }

    for (i, o) in outcomes.iter().enumerate() {
        match &o.error {
            None => println!("setting {i} ({}): ok", o.label),
            Some(e) => eprintln!("setting {i} ({}): {e}", o.label),
        }
    }
    Ok(outcomes)
}

/// Exit code of a sweep: the most severe per-setting failure.
pub fn sweep_exit_code(outcomes: &[SettingOutcome]) -> i32 {
    let codes: Vec<i32> = outcomes.iter().filter_map(|o| o.error.as_ref().map(CliError::exit_code)).collect();
    [2, 3, 1].into_iter().find(|c| codes.contains(c)).unwrap_or(0)
}

/// One `table1.csv` row.
#[derive(Debug, Clone, PartialEq)]
pub struct Table1Row {
    pub b: f64,
    pub n0: Result<usize, String>,
}

pub fn table1(cfg: &ExperimentConfig, out: &Path) -> Result<(Vec<Table1Row>, usize), CliError> {
    let section = cfg
        .table1
        .as_ref()
        .ok_or_else(|| CliError::Parse("table1 needs a [table1] section with b_grid".into()))?;
    let (problem, x0) = prepare(cfg)?;
    create_dir(out)?;
    let controller = cfg.base_controller_config()?;
    // one reference for every b keeps the column comparable
    let reference = reference_trajectory(&problem, &x0, &Solver::new(controller.solver.clone()), controller.reference_max_len)?;
    let rows: Vec<Table1Row> = section
        .b_grid
        .iter()
        .map(|&b| {
            let n0 = problem
                .aux
                .with_b(b)
                .and_then(|aux| min_initial_horizon(&problem.model, &aux, &x0, &reference))
                .map_err(|e| e.to_string());
            Table1Row { b, n0 }
        })
        .collect();
    write_table(
        &out.join("table1.csv"),
        &["b", "N0"],
        rows.iter()
            .map(|r| vec![fmt_f64(r.b), r.n0.as_ref().map(|n| n.to_string()).unwrap_or_default()])
            .collect(),
    )?;
    println!("reference trajectory length {}", reference.len());
    for r in &rows {
        match &r.n0 {
            Ok(n) => println!("b = {:<8} N0 = {n}", r.b),
            Err(e) => eprintln!("b = {:<8} failed: {e}", r.b),
        }
    }
    Ok((rows, reference.len()))
}

/// 0 when `N0` never increases as `b` decreases, 3 when a cell failed, 1 otherwise.
pub fn table1_exit_code(rows: &[Table1Row]) -> i32 {
    if rows.iter().any(|r| r.n0.is_err()) {
        return 3;
    }
    let mut sorted: Vec<(f64, usize)> = rows.iter().map(|r| (r.b, *r.n0.as_ref().unwrap())).collect();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    if sorted.windows(2).all(|w| w[1].1 <= w[0].1) {
        0
    } else {
        1
    }
}
