//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Every export takes plain numbers or strings and returns a JSON string.

use serde::Serialize;
use vhempc::controller::{min_initial_horizon, reference_trajectory};
use vhempc::ocp::Solver;
use vhempc::{run_closed_loop, ControlProblem, ControllerConfig, FilterKind, FilterSpec, HorizonSchedule, Vector};
use wasm_bindgen::prelude::*;

fn problem(plant: &str) -> Result<ControlProblem, String> {
    match plant {
        "scalar" => ControlProblem::scalar(),
        "cstr" => ControlProblem::cstr(),
        other => return Err(format!("unknown plant {other:?}")),
    }
    .map_err(|e| e.to_string())
}

fn filter_kind(name: &str) -> Result<FilterKind, String> {
    match name {
        "pi1" => Ok(FilterKind::Pi1),
        "pi2" => Ok(FilterKind::Pi2),
        "pi3" => Ok(FilterKind::Pi3),
        other => Err(format!("unknown filter {other:?}")),
    }
}

/// Initial state from plant coordinates, checked against the state box.
fn initial_state(p: &ControlProblem, x0: &[f64]) -> Result<Vector, String> {
    if x0.len() != p.model.state_dim() {
        return Err(format!("x0 needs {} entries", p.model.state_dim()));
    }
    if !p.plant.state_box().contains(x0, 0.0) {
        return Err("x0 lies outside the state constraints".into());
    }
    Ok(p.model.from_plant_state(&Vector::from_column_slice(x0)))
}

#[derive(Serialize)]
struct SimStep {
    k: usize,
    horizon: usize,
    pi: Option<f64>,
    le: f64,
    average: f64,
    case: &'static str,
    /// Plant coordinates.
    x: Vec<f64>,
}

#[derive(Serialize)]
struct SimResult {
    steps: Vec<SimStep>,
    steady_le: f64,
    steps_to_psi: Option<usize>,
    reach_bound: f64,
    passed: bool,
    violations: Vec<String>,
}

/// Closed loop from `x0` (plant coordinates).
pub fn simulate_json(plant: &str, filter: &str, kappa: f64, upsilon: f64, sigma: usize, x0: &[f64], max_steps: usize) -> Result<String, String> {
    let p = problem(plant)?;
    let x = initial_state(&p, x0)?;
    let spec = FilterSpec::new(filter_kind(filter)?, kappa).map_err(|e| e.to_string())?;
    let schedule = HorizonSchedule::constant(upsilon, sigma).map_err(|e| e.to_string())?;
    let mut cfg = ControllerConfig::new(spec, schedule);
    cfg.max_steps = max_steps.max(1);
    let trace = run_closed_loop(&p, &x, &cfg).map_err(|e| e.to_string())?;
    let avg = trace.running_average();
    let steps = trace
        .steps
        .iter()
        .zip(avg)
        .map(|(s, a)| SimStep {
            k: s.k,
            horizon: s.horizon,
            pi: s.pi,
            le: s.le,
            average: a,
            case: s.case_tag.as_str(),
            x: p.model.to_plant_state(&Vector::from_vec(s.x.clone())).iter().copied().collect(),
        })
        .collect();
    let c = &trace.certificate;
    let result = SimResult {
        steps,
        steady_le: c.steady_le,
        steps_to_psi: c.steps_to_psi,
        reach_bound: c.s_psi_bound,
        passed: c.passed,
        violations: c.violations.clone(),
    };
    serde_json::to_string(&result).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct TableRow {
    b: f64,
    n0: Option<usize>,
}

#[derive(Serialize)]
struct TableResult {
    reference_length: usize,
    rows: Vec<TableRow>,
}

/// Minimal initial horizon for each `b`, sharing one reference trajectory.
pub fn table1_json(plant: &str, x0: &[f64], b_grid: &[f64]) -> Result<String, String> {
    let p = problem(plant)?;
    let x = initial_state(&p, x0)?;
    let reference = reference_trajectory(&p, &x, &Solver::default(), 100).map_err(|e| e.to_string())?;
    let rows = b_grid
        .iter()
        .map(|&b| TableRow {
            b,
            n0: p
                .aux
                .with_b(b)
                .and_then(|aux| min_initial_horizon(&p.model, &aux, &x, &reference))
                .ok(),
        })
        .collect();
    serde_json::to_string(&TableResult {
        reference_length: reference.len(),
        rows,
    })
    .map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct Region {
    steady_state: Vec<f64>,
    state_lower: Vec<f64>,
    state_upper: Vec<f64>,
    alpha: f64,
    psi: f64,
    /// Boundary of the terminal set in plant coordinates.
    terminal: Vec<Vec<f64>>,
    /// Boundary of the inner set where the terminal law takes over.
    inner: Vec<Vec<f64>>,
}

fn level_boundary(p: &ControlProblem, level: f64, points: usize) -> Vec<Vec<f64>> {
    let ti = &p.aux.terminal;
    let n = p.model.state_dim();
    let dirs: Vec<Vector> = if n == 1 {
        vec![Vector::from_vec(vec![1.0]), Vector::from_vec(vec![-1.0])]
    } else {
        (0..points)
            .map(|i| {
                let t = i as f64 / points as f64 * std::f64::consts::TAU;
                Vector::from_vec(vec![t.cos(), t.sin()])
            })
            .collect()
    };
    dirs.into_iter()
        .map(|d| {
            let r = (level / ti.lyapunov(&d)).sqrt();
            p.model.to_plant_state(&(d * r)).iter().copied().collect()
        })
        .collect()
}

/// Terminal-set geometry for plotting.
pub fn terminal_region_json(plant: &str) -> Result<String, String> {
    let p = problem(plant)?;
    let ti = &p.aux.terminal;
    let region = Region {
        steady_state: p.steady.x_s.iter().copied().collect(),
        state_lower: p.plant.state_box().lower.clone(),
        state_upper: p.plant.state_box().upper.clone(),
        alpha: ti.alpha,
        psi: ti.psi,
        terminal: level_boundary(&p, ti.alpha, 96),
        inner: level_boundary(&p, ti.psi, 96),
    };
    serde_json::to_string(&region).map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn simulate(plant: &str, filter: &str, kappa: f64, upsilon: f64, sigma: u32, x0: Vec<f64>, max_steps: u32) -> Result<String, JsValue> {
    simulate_json(plant, filter, kappa, upsilon, sigma as usize, &x0, max_steps as usize).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn table1(plant: &str, x0: Vec<f64>, b_grid: Vec<f64>) -> Result<String, JsValue> {
    table1_json(plant, &x0, &b_grid).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn terminal_region(plant: &str) -> Result<String, JsValue> {
    terminal_region_json(plant).map_err(|e| JsValue::from_str(&e))
}
