//! Finite-horizon optimal control by single shooting.
//!
//! The decision vector is the stacked input sequence. Input bounds are handled
//! by projection; state bounds, the auxiliary-cost bound and an optional
//! terminal level are handled by an augmented Lagrangian. The inner loop is a
//! projected gradient method with Barzilai-Borwein steps and Armijo
//! backtracking; gradients come from an adjoint sweep over exact step
//! Jacobians. The returned point is always hard-feasible and never worse than
//! a supplied feasible warm start.

use serde::{Deserialize, Serialize};

use crate::costs::{auxiliary_total, economic_total, rollout, AuxiliaryCost, EconomicCost, Trajectory};
use crate::error::{check_dim, Error, Result};
use crate::model::{SystemModel, SET_TOL};
use crate::{Matrix, Vector};

/// Feasibility slack accepted on a warm start.
pub const WARM_START_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ObjectiveKind {
    /// Minimize `J_e` subject to `J_a <= pi_bound`.
    Economic,
    /// Minimize `J_a`; `pi_bound` is not imposed.
    Auxiliary,
}

#[derive(Debug, Clone)]
pub struct FhocpSpec<'a> {
    pub model: &'a SystemModel,
    pub econ: &'a EconomicCost,
    pub aux: &'a AuxiliaryCost,
    pub x0: Vector,
    pub horizon: usize,
    pub pi_bound: f64,
    pub objective: ObjectiveKind,
    /// Optional hard constraint `V(x_N) <= level`.
    pub terminal_level: Option<f64>,
}

impl<'a> FhocpSpec<'a> {
    pub fn economic(
        model: &'a SystemModel,
        econ: &'a EconomicCost,
        aux: &'a AuxiliaryCost,
        x0: Vector,
        horizon: usize,
        pi_bound: f64,
    ) -> Self {
        Self {
            model,
            econ,
            aux,
            x0,
            horizon,
            pi_bound,
            objective: ObjectiveKind::Economic,
            terminal_level: None,
        }
    }

    pub fn auxiliary(
        model: &'a SystemModel,
        econ: &'a EconomicCost,
        aux: &'a AuxiliaryCost,
        x0: Vector,
        horizon: usize,
    ) -> Self {
        Self {
            model,
            econ,
            aux,
            x0,
            horizon,
            pi_bound: f64::INFINITY,
            objective: ObjectiveKind::Auxiliary,
            terminal_level: None,
        }
    }

    pub fn with_terminal_level(mut self, level: f64) -> Self {
        self.terminal_level = Some(level);
        self
    }

    fn bound_active(&self) -> bool {
        self.objective == ObjectiveKind::Economic
    }

    fn validate(&self) -> Result<()> {
        check_dim("initial state", self.model.state_dim(), self.x0.len())?;
        if self.horizon == 0 {
            return Err(Error::Contract("horizon must be at least 1".into()));
        }
        if self.bound_active() && !self.pi_bound.is_finite() {
            return Err(Error::Contract("economic problems need a finite pi_bound".into()));
        }
        if !self.x0.iter().all(|v| v.is_finite()) {
            return Err(Error::NumericFailure("non-finite initial state".into()));
        }
        Ok(())
    }

    /// Objective of a trajectory under this spec.
    pub fn objective_of(&self, traj: &Trajectory) -> f64 {
        match self.objective {
            ObjectiveKind::Economic => economic_total(self.econ, traj),
            ObjectiveKind::Auxiliary => auxiliary_total(self.aux, traj),
        }
    }

    /// Largest constraint violation of an input sequence (0 when feasible).
    pub fn violation(&self, inputs: &[Vector]) -> Result<f64> {
        let traj = rollout(self.model, &self.x0, inputs)?;
        Ok(self.trajectory_violation(&traj))
    }

    pub fn trajectory_violation(&self, traj: &Trajectory) -> f64 {
        let mut worst = 0.0f64;
        for u in &traj.inputs {
            worst = worst.max(self.model.input_box().violation(u.as_slice()));
        }
        for x in traj.states.iter().skip(1) {
            worst = worst.max(self.model.state_box().violation(x.as_slice()));
        }
        if self.bound_active() {
            worst = worst.max(auxiliary_total(self.aux, traj) - self.pi_bound);
        }
        if let Some(level) = self.terminal_level {
            worst = worst.max(self.aux.terminal.lyapunov(traj.terminal_state()) - level);
        }
        worst
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Merit evaluations per start point and phase.
    pub max_iterations: usize,
    /// Relative step of the central differences applied to `L_e`.
    pub fd_step: f64,
    /// Per-coordinate levels of the exhaustive seed grid.
    pub grid_levels: usize,
    /// Largest decision dimension for which the exhaustive grid is used.
    pub grid_max_dim: usize,
    /// Constant-input seeds (as fractions of the input box) used otherwise.
    pub constant_levels: Vec<f64>,
    /// Also explore the seed set when a warm start is supplied.
    pub explore_with_warm_start: bool,
    /// Merit evaluations between multiplier updates.
    pub inner_iterations: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iterations: 400,
            fd_step: 1e-6,
            grid_levels: 5,
            grid_max_dim: 3,
            constant_levels: vec![0.0, 0.5, 1.0],
            explore_with_warm_start: false,
            inner_iterations: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveRecord {
    pub inputs: Vec<Vector>,
    pub states: Vec<Vector>,
    /// `J_e` or `J_a` at the returned point, per the objective kind.
    pub objective: f64,
    pub economic_value: f64,
    /// `J_a` of the returned point.
    pub aux_value: f64,
    pub feasible: bool,
    pub iterations: usize,
    pub solve_time_ms: f64,
    /// The warm start was returned verbatim.
    pub fell_back: bool,
}

impl SolveRecord {
    pub fn horizon(&self) -> usize {
        self.inputs.len()
    }

    pub fn trajectory(&self) -> Trajectory {
        Trajectory {
            states: self.states.clone(),
            inputs: self.inputs.clone(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Solver {
    pub options: SolverOptions,
}

struct Stopwatch {
    #[cfg(not(target_arch = "wasm32"))]
    start: std::time::Instant,
}

impl Stopwatch {
    fn start() -> Self {
        Self {
            #[cfg(not(target_arch = "wasm32"))]
            start: std::time::Instant::now(),
        }
    }

    fn elapsed_ms(&self) -> f64 {
        #[cfg(not(target_arch = "wasm32"))]
        {
            self.start.elapsed().as_secs_f64() * 1e3
        }
        #[cfg(target_arch = "wasm32")]
        {
            0.0
        }
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Phase {
    Objective,
    Feasibility,
}

#[derive(Clone, Copy, Debug)]
struct Eval {
    merit: f64,
    objective: f64,
    feasible: bool,
    /// Largest tightened constraint value (positive means violated).
    max_constraint: f64,
}

impl Eval {
    fn invalid() -> Self {
        Self {
            merit: f64::INFINITY,
            objective: f64::INFINITY,
            feasible: false,
            max_constraint: f64::INFINITY,
        }
    }
}

struct Multipliers {
    mu: f64,
    lower: Vec<f64>,
    upper: Vec<f64>,
    bound: f64,
    terminal: f64,
}

struct Workspace {
    states: Vec<f64>,
    a: Vec<Matrix>,
    b: Vec<Matrix>,
    grad: Vec<f64>,
    c_lower: Vec<f64>,
    c_upper: Vec<f64>,
    c_bound: f64,
    c_terminal: f64,
    gx: Vec<f64>,
    gu: Vec<f64>,
    costate: Vec<f64>,
    scratch_x: Vec<f64>,
    scratch_u: Vec<f64>,
}

struct Tracker {
    best: Option<(f64, Vec<f64>)>,
}

impl Tracker {
    fn consider(&mut self, z: &[f64], ev: &Eval) {
        if !ev.feasible || !ev.objective.is_finite() {
            return;
        }
        let better = match &self.best {
            None => true,
            Some((obj, _)) => ev.objective < *obj,
        };
        if better {
            self.best = Some((ev.objective, z.to_vec()));
        }
    }
}

struct Problem<'s, 'a> {
    spec: &'s FhocpSpec<'a>,
    n: usize,
    m: usize,
    horizon: usize,
    lower: Vec<f64>,
    upper: Vec<f64>,
    fd_step: f64,
    margin_box: f64,
    margin_bound: f64,
    margin_terminal: f64,
    /// Largest input-box width.
    width: f64,
}

const MU_START: f64 = 10.0;
const MU_MAX: f64 = 1e9;

impl<'s, 'a> Problem<'s, 'a> {
    fn new(spec: &'s FhocpSpec<'a>, options: &SolverOptions) -> Self {
        let n = spec.model.state_dim();
        let m = spec.model.input_dim();
        let horizon = spec.horizon;
        let ib = spec.model.input_box();
        let lower = (0..horizon).flat_map(|_| ib.lower.iter().copied()).collect();
        let upper = (0..horizon).flat_map(|_| ib.upper.iter().copied()).collect();
        let margin_bound = if spec.bound_active() {
            1e-9 * (1.0 + spec.pi_bound.abs())
        } else {
            0.0
        };
        let margin_terminal = spec.terminal_level.map_or(0.0, |l| 1e-9 * (1.0 + l.abs()));
        Self {
            spec,
            n,
            m,
            horizon,
            lower,
            upper,
            fd_step: options.fd_step,
            margin_box: 1e-10,
            margin_bound,
            margin_terminal,
            width: ib.upper.iter().zip(&ib.lower).fold(0.0, |acc, (h, l)| acc.max(h - l)),
        }
    }

    fn dim(&self) -> usize {
        self.m * self.horizon
    }

    fn workspace(&self) -> Workspace {
        let (n, m, h) = (self.n, self.m, self.horizon);
        Workspace {
            states: vec![0.0; (h + 1) * n],
            a: vec![Matrix::zeros(n, n); h],
            b: vec![Matrix::zeros(n, m); h],
            grad: vec![0.0; m * h],
            c_lower: vec![0.0; h * n],
            c_upper: vec![0.0; h * n],
            c_bound: 0.0,
            c_terminal: 0.0,
            gx: vec![0.0; n],
            gu: vec![0.0; m],
            costate: vec![0.0; n],
            scratch_x: vec![0.0; n],
            scratch_u: vec![0.0; m],
        }
    }

    fn multipliers(&self) -> Multipliers {
        Multipliers {
            mu: MU_START,
            lower: vec![0.0; self.horizon * self.n],
            upper: vec![0.0; self.horizon * self.n],
            bound: 0.0,
            terminal: 0.0,
        }
    }

    fn project(&self, z: &mut [f64]) {
        for ((v, lo), hi) in z.iter_mut().zip(&self.lower).zip(&self.upper) {
            *v = v.clamp(*lo, *hi);
        }
    }

    fn to_inputs(&self, z: &[f64]) -> Vec<Vector> {
        z.chunks(self.m).map(Vector::from_row_slice).collect()
    }

    fn flatten(&self, inputs: &[Vector]) -> Vec<f64> {
        inputs.iter().flat_map(|u| u.iter().copied()).collect()
    }

    /// Merit value, constraint values, and (optionally) the merit gradient in `ws.grad`.
    fn evaluate(&self, z: &[f64], mult: &Multipliers, phase: Phase, want_grad: bool, ws: &mut Workspace) -> Eval {
        let (n, m, h) = (self.n, self.m, self.horizon);
        let model = self.spec.model;
        let aux = self.spec.aux;
        let ti = &aux.terminal;
        ws.states[..n].copy_from_slice(self.spec.x0.as_slice());
        for i in 0..h {
            let (head, tail) = ws.states.split_at_mut((i + 1) * n);
            let x = &head[i * n..];
            let u = &z[i * m..(i + 1) * m];
            if want_grad {
                model.step_with_jacobians(x, u, &mut tail[..n], &mut ws.a[i], &mut ws.b[i]);
            } else {
                model.step_into(x, u, &mut tail[..n]);
            }
        }
        if !ws.states.iter().all(|v| v.is_finite()) {
            return Eval::invalid();
        }

        let mut econ = 0.0;
        let mut aux_total = 0.0;
        for i in 0..h {
            let x = &ws.states[i * n..(i + 1) * n];
            let u = &z[i * m..(i + 1) * m];
            econ += self.spec.econ.evaluate_slices(x, u);
            aux_total += aux.stage_slices(x, u);
        }
        let x_end = &ws.states[h * n..];
        let v_end = ti.lyapunov_slice(x_end);
        aux_total += aux.lambda * v_end;
        if !econ.is_finite() || !aux_total.is_finite() {
            return Eval::invalid();
        }

        let mu = mult.mu;
        let pen = |y: f64, c: f64| {
            let t = (y + mu * c).max(0.0);
            ((t * t - y * y) / (2.0 * mu), t)
        };
        let mut penalty = 0.0;
        let mut max_c = f64::NEG_INFINITY;
        let mut box_excess = 0.0f64;
        let sb = self.spec.model.state_box();
        for i in 1..=h {
            for j in 0..n {
                let v = ws.states[i * n + j];
                let k = (i - 1) * n + j;
                let cl = sb.lower[j] - v + self.margin_box;
                let cu = v - sb.upper[j] + self.margin_box;
                ws.c_lower[k] = cl;
                ws.c_upper[k] = cu;
                max_c = max_c.max(cl).max(cu);
                box_excess = box_excess.max(sb.lower[j] - v).max(v - sb.upper[j]);
                penalty += pen(mult.lower[k], cl).0 + pen(mult.upper[k], cu).0;
            }
        }
        let mut bound_ok = true;
        if self.spec.bound_active() {
            let c = aux_total - self.spec.pi_bound + self.margin_bound;
            ws.c_bound = c;
            max_c = max_c.max(c);
            penalty += pen(mult.bound, c).0;
            bound_ok = aux_total <= self.spec.pi_bound;
        }
        let mut terminal_ok = true;
        if let Some(level) = self.spec.terminal_level {
            let c = v_end - level + self.margin_terminal;
            ws.c_terminal = c;
            max_c = max_c.max(c);
            penalty += pen(mult.terminal, c).0;
            terminal_ok = v_end <= level;
        }

        let (w_econ, w_aux) = match (phase, self.spec.objective) {
            (Phase::Objective, ObjectiveKind::Economic) => (1.0, 0.0),
            _ => (0.0, 1.0),
        };
        let objective = match self.spec.objective {
            ObjectiveKind::Economic => econ,
            ObjectiveKind::Auxiliary => aux_total,
        };
        let ev = Eval {
            merit: w_econ * econ + w_aux * aux_total + penalty,
            objective,
            feasible: box_excess <= SET_TOL && bound_ok && terminal_ok,
            max_constraint: max_c,
        };
        if !ev.merit.is_finite() {
            return Eval::invalid();
        }
        if !want_grad {
            return ev;
        }

        // adjoint sweep
        let aux_weight = w_aux
            + if self.spec.bound_active() {
                pen(mult.bound, ws.c_bound).1
            } else {
                0.0
            };
        let terminal_weight = if self.spec.terminal_level.is_some() {
            pen(mult.terminal, ws.c_terminal).1
        } else {
            0.0
        };
        // terminal costate
        {
            let x = &ws.states[h * n..];
            for r in 0..n {
                let px: f64 = (0..n).map(|c| ti.p[(r, c)] * x[c]).sum();
                ws.costate[r] = 2.0 * px * (aux_weight * aux.lambda + terminal_weight);
            }
            self.add_box_gradient(h, mult, ws);
        }
        for i in (0..h).rev() {
            ws.scratch_x.copy_from_slice(&ws.states[i * n..(i + 1) * n]);
            ws.scratch_u.copy_from_slice(&z[i * m..(i + 1) * m]);
            ws.gx.iter_mut().for_each(|v| *v = 0.0);
            ws.gu.iter_mut().for_each(|v| *v = 0.0);
            if w_econ != 0.0 {
                self.economic_gradient(w_econ, ws);
            }
            if aux_weight != 0.0 {
                self.auxiliary_gradient(aux_weight, ws);
            }
            // input gradient: gu + B' costate
            for c in 0..m {
                let mut acc = ws.gu[c];
                for r in 0..n {
                    acc += ws.b[i][(r, c)] * ws.costate[r];
                }
                ws.grad[i * m + c] = acc;
            }
            if i > 0 {
                // costate <- gx + A' costate + box terms at stage i
                let mut next = vec![0.0; n];
                for c in 0..n {
                    let mut acc = ws.gx[c];
                    for r in 0..n {
                        acc += ws.a[i][(r, c)] * ws.costate[r];
                    }
                    next[c] = acc;
                }
                ws.costate.copy_from_slice(&next);
                self.add_box_gradient(i, mult, ws);
            }
        }
        ev
    }

    fn add_box_gradient(&self, stage: usize, mult: &Multipliers, ws: &mut Workspace) {
        let mu = mult.mu;
        for j in 0..self.n {
            let k = (stage - 1) * self.n + j;
            let tl = (mult.lower[k] + mu * ws.c_lower[k]).max(0.0);
            let tu = (mult.upper[k] + mu * ws.c_upper[k]).max(0.0);
            ws.costate[j] += tu - tl;
        }
    }

    fn economic_gradient(&self, weight: f64, ws: &mut Workspace) {
        let econ = self.spec.econ;
        for j in 0..self.n {
            let v = ws.scratch_x[j];
            let step = self.fd_step * v.abs().max(1.0);
            ws.scratch_x[j] = v + step;
            let fp = econ.evaluate_slices(&ws.scratch_x, &ws.scratch_u);
            ws.scratch_x[j] = v - step;
            let fm = econ.evaluate_slices(&ws.scratch_x, &ws.scratch_u);
            ws.scratch_x[j] = v;
            ws.gx[j] += weight * (fp - fm) / (2.0 * step);
        }
        for j in 0..self.m {
            let v = ws.scratch_u[j];
            let step = self.fd_step * v.abs().max(1.0);
            ws.scratch_u[j] = v + step;
            let fp = econ.evaluate_slices(&ws.scratch_x, &ws.scratch_u);
            ws.scratch_u[j] = v - step;
            let fm = econ.evaluate_slices(&ws.scratch_x, &ws.scratch_u);
            ws.scratch_u[j] = v;
            ws.gu[j] += weight * (fp - fm) / (2.0 * step);
        }
    }

    /// Gradient of the active branch of `L_a`; the jump at the terminal-set
    /// boundary is invisible to it and is handled by the line search.
    fn auxiliary_gradient(&self, weight: f64, ws: &mut Workspace) {
        let aux = self.spec.aux;
        let ti = &aux.terminal;
        let x = &ws.scratch_x;
        let u = &ws.scratch_u;
        if ti.in_terminal_set_slice(x) {
            for r in 0..self.n {
                let q: f64 = (0..self.n).map(|c| (ti.gamma_q[(r, c)] + ti.gamma_q[(c, r)]) * x[c]).sum();
                ws.gx[r] += weight * q;
            }
            for r in 0..self.m {
                let q: f64 = (0..self.m).map(|c| (ti.gamma_r[(r, c)] + ti.gamma_r[(c, r)]) * u[c]).sum();
                ws.gu[r] += weight * q;
            }
        } else {
            for r in 0..self.n {
                ws.gx[r] += weight * 2.0 * aux.b * x[r];
            }
        }
    }

    /// First-order multiplier update; returns the largest relative change.
    fn update_multipliers(&self, mult: &mut Multipliers, ws: &Workspace) -> f64 {
        let mu = mult.mu;
        let mut change = 0.0f64;
        let mut apply = |y: &mut f64, c: f64| {
            let next = (*y + mu * c).max(0.0);
            change = change.max((next - *y).abs() / (1.0 + y.abs()));
            *y = next;
        };
        for (y, c) in mult.lower.iter_mut().zip(&ws.c_lower) {
            apply(y, *c);
        }
        for (y, c) in mult.upper.iter_mut().zip(&ws.c_upper) {
            apply(y, *c);
        }
        if self.spec.bound_active() {
            apply(&mut mult.bound, ws.c_bound);
        }
        if self.spec.terminal_level.is_some() {
            apply(&mut mult.terminal, ws.c_terminal);
        }
        change
    }

    /// One augmented-Lagrangian run from `z0`; returns the last iterate and the
    /// number of merit evaluations used.
    fn run(
        &self,
        z0: &[f64],
        phase: Phase,
        options: &SolverOptions,
        tracker: &mut Tracker,
        ws: &mut Workspace,
    ) -> (Vec<f64>, usize) {
        let budget = options.max_iterations.max(1);
        let mut z = z0.to_vec();
        self.project(&mut z);
        let mut mult = self.multipliers();
        let mut ev = self.evaluate(&z, &mult, phase, true, ws);
        let mut used = 1;
        if !ev.merit.is_finite() {
            return (z, used);
        }
        tracker.consider(&z, &ev);
        if phase == Phase::Feasibility && ev.feasible {
            return (z, used);
        }
        let mut g = ws.grad.clone();
        let mut step = 1.0 / inf_norm(&g).max(1e-12);
        let mut prev_violation = ev.max_constraint.max(0.0);
        let mut since_update = 0;
        let mut stalls = 0;
        let mut trial = vec![0.0; z.len()];
        while used < budget {
            let mut accepted = false;
            // no trial moves further than one box width
            let mut t = step.min(self.width / inf_norm(&g).max(1e-300));
            let slope_scale = 1e-4;
            for _ in 0..30 {
                for ((tv, zv), gv) in trial.iter_mut().zip(&z).zip(&g) {
                    *tv = zv - t * gv;
                }
                self.project(&mut trial);
                let mut dir_dot = 0.0;
                let mut moved = 0.0f64;
                for ((tv, zv), gv) in trial.iter().zip(&z).zip(&g) {
                    dir_dot += gv * (tv - zv);
                    moved = moved.max((tv - zv).abs());
                }
                if moved <= 1e-15 * (1.0 + inf_norm(&z)) || used >= budget {
                    break;
                }
                let ev_trial = self.evaluate(&trial, &mult, phase, true, ws);
                used += 1;
                if ev_trial.merit <= ev.merit + slope_scale * dir_dot {
                    let g_trial = ws.grad.clone();
                    let mut ss = 0.0;
                    let mut sy = 0.0;
                    for i in 0..z.len() {
                        let s = trial[i] - z[i];
                        let y = g_trial[i] - g[i];
                        ss += s * s;
                        sy += s * y;
                    }
                    step = if sy > 0.0 { (ss / sy).clamp(1e-12, 1e12) } else { (4.0 * t).min(1e12) };
                    z.copy_from_slice(&trial);
                    g = g_trial;
                    ev = ev_trial;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if accepted {
                tracker.consider(&z, &ev);
                if phase == Phase::Feasibility && ev.feasible {
                    return (z, used);
                }
                since_update += 1;
            }
            if !accepted || since_update >= options.inner_iterations {
                let violation = ev.max_constraint.max(0.0);
                // refresh constraint values at z before the update
                let _ = self.evaluate(&z, &mult, phase, false, ws);
                let change = self.update_multipliers(&mut mult, ws);
                // a stalled line search ends the run once the multipliers settle
                stalls = if accepted { 0 } else { stalls + 1 };
                if !accepted && (violation <= 0.0 || mult.mu >= MU_MAX) && (change <= 1e-6 || stalls >= 4) {
                    break;
                }
                if violation > 0.0 && (violation > 0.25 * prev_violation || !accepted) {
                    mult.mu = (mult.mu * 10.0).min(MU_MAX);
                }
                prev_violation = violation;
                since_update = 0;
                if used >= budget {
                    break;
                }
                ev = self.evaluate(&z, &mult, phase, true, ws);
                used += 1;
                g = ws.grad.clone();
                step = 1.0 / inf_norm(&g).max(1e-12);
            }
        }
        (z, used)
    }

    /// Bisection along the segment from the best feasible point towards an
    /// infeasible but better iterate.
    fn restore(&self, last: &[f64], tracker: &mut Tracker, ws: &mut Workspace) -> usize {
        let Some((best_obj, best)) = tracker.best.clone() else {
            return 0;
        };
        let mult = self.multipliers();
        let last_ev = self.evaluate(last, &mult, Phase::Objective, false, ws);
        if last_ev.feasible || !(last_ev.objective < best_obj) {
            return 0;
        }
        let (mut lo, mut hi) = (0.0, 1.0);
        let mut point = vec![0.0; best.len()];
        let mut used = 1;
        for _ in 0..40 {
            let mid = 0.5 * (lo + hi);
            for i in 0..point.len() {
                point[i] = best[i] + mid * (last[i] - best[i]);
            }
            let ev = self.evaluate(&point, &mult, Phase::Objective, false, ws);
            used += 1;
            if ev.feasible {
                tracker.consider(&point, &ev);
                lo = mid;
            } else {
                hi = mid;
            }
        }
        used
    }

    fn seeds(&self, options: &SolverOptions) -> Vec<Vec<f64>> {
        let ib = self.spec.model.input_box();
        let dim = self.dim();
        let mut seeds = vec![vec![0.0; dim]];
        if dim <= options.grid_max_dim && options.grid_levels >= 2 {
            let levels: Vec<Vec<f64>> = (0..options.grid_levels)
                .map(|l| ib.lerp(l as f64 / (options.grid_levels - 1) as f64).iter().copied().collect())
                .collect();
            let count = options.grid_levels.pow(dim as u32);
            for idx in 0..count {
                let mut rem = idx;
                let mut z = vec![0.0; dim];
                for (pos, v) in z.iter_mut().enumerate() {
                    let level = rem % options.grid_levels;
                    rem /= options.grid_levels;
                    *v = levels[level][pos % self.m];
                }
                if !seeds.contains(&z) {
                    seeds.push(z);
                }
            }
        } else {
            for &t in &options.constant_levels {
                let u = ib.lerp(t);
                let z: Vec<f64> = (0..self.horizon).flat_map(|_| u.iter().copied()).collect();
                if !seeds.contains(&z) {
                    seeds.push(z);
                }
            }
        }
        seeds
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |acc, x| acc.max(x.abs()))
}

impl Solver {
    pub fn new(options: SolverOptions) -> Self {
        Self { options }
    }

    /// Solve the problem described by `spec`. A supplied warm start must be
    /// feasible within `WARM_START_TOL`; the result is then never worse than it.
    pub fn solve(&self, spec: &FhocpSpec, warm_start: Option<&[Vector]>) -> Result<SolveRecord> {
        self.solve_with_guesses(spec, warm_start, &[])
    }

    /// `solve` with extra start points (which need not be feasible) tried
    /// before the built-in seeds.
    pub fn solve_with_guesses(
        &self,
        spec: &FhocpSpec,
        warm_start: Option<&[Vector]>,
        guesses: &[Vec<Vector>],
    ) -> Result<SolveRecord> {
        let clock = Stopwatch::start();
        spec.validate()?;
        let problem = Problem::new(spec, &self.options);
        let mut ws = problem.workspace();
        let mut tracker = Tracker { best: None };
        let mut iterations = 0;

        let mut baseline: Option<(f64, Vec<Vector>)> = None;
        if let Some(warm) = warm_start {
            check_dim("warm start length", spec.horizon, warm.len())?;
            for u in warm {
                check_dim("warm start input", spec.model.input_dim(), u.len())?;
            }
            let traj = rollout(spec.model, &spec.x0, warm)?;
            let violation = spec.trajectory_violation(&traj);
            if violation > WARM_START_TOL {
                return Err(Error::Precondition(format!(
                    "warm start violates the constraints by {violation:e}"
                )));
            }
            let objective = spec.objective_of(&traj);
            if !objective.is_finite() {
                return Err(Error::NumericFailure("non-finite warm-start objective".into()));
            }
            baseline = Some((objective, warm.to_vec()));
        }

        let mut starts: Vec<Vec<f64>> = Vec::new();
        if let Some((_, warm)) = &baseline {
            starts.push(problem.flatten(warm));
        }
        for guess in guesses {
            if guess.len() == spec.horizon && guess.iter().all(|u| u.len() == spec.model.input_dim()) {
                starts.push(problem.flatten(guess));
            }
        }
        if baseline.is_none() || self.options.explore_with_warm_start {
            starts.extend(problem.seeds(&self.options));
        }

        for start in &starts {
            let mut from = start.clone();
            problem.project(&mut from);
            if spec.objective == ObjectiveKind::Economic {
                let mult = problem.multipliers();
                let ev = problem.evaluate(&from, &mult, Phase::Objective, false, &mut ws);
                iterations += 1;
                if !ev.feasible {
                    let (z, used) = problem.run(&from, Phase::Feasibility, &self.options, &mut tracker, &mut ws);
                    iterations += used;
                    from = z;
                    let ev = problem.evaluate(&from, &mult, Phase::Objective, false, &mut ws);
                    if !ev.feasible {
                        continue;
                    }
                }
            }
            let (last, used) = problem.run(&from, Phase::Objective, &self.options, &mut tracker, &mut ws);
            iterations += used;
            iterations += problem.restore(&last, &mut tracker, &mut ws);
        }

        let (inputs, fell_back) = match (tracker.best, baseline) {
            (Some((obj, z)), Some((base_obj, warm))) => {
                if obj < base_obj {
                    (problem.to_inputs(&z), false)
                } else {
                    (warm, true)
                }
            }
            (Some((_, z)), None) => (problem.to_inputs(&z), false),
            (None, Some((_, warm))) => (warm, true),
            (None, None) => {
                return Err(Error::Infeasible(format!(
                    "no feasible input sequence found for horizon {}",
                    spec.horizon
                )))
            }
        };
        let traj = rollout(spec.model, &spec.x0, &inputs)?;
        let economic_value = economic_total(spec.econ, &traj);
        let aux_value = auxiliary_total(spec.aux, &traj);
        let objective = spec.objective_of(&traj);
        if !objective.is_finite() {
            return Err(Error::NumericFailure("non-finite objective at the returned point".into()));
        }
        Ok(SolveRecord {
            feasible: spec.trajectory_violation(&traj) <= WARM_START_TOL,
            inputs: traj.inputs,
            states: traj.states,
            objective,
            economic_value,
            aux_value,
            iterations,
            solve_time_ms: clock.elapsed_ms(),
            fell_back,
        })
    }

    /// The stabilizing value `min J_a` over horizon `spec.horizon`.
    pub fn stabilizing_value(&self, spec: &FhocpSpec, warm_start: Option<&[Vector]>) -> Result<SolveRecord> {
        if spec.objective != ObjectiveKind::Auxiliary {
            return Err(Error::Contract("stabilizing_value needs the auxiliary objective".into()));
        }
        self.solve(spec, warm_start)
    }
}
