//! Dual-mode variable-horizon closed loop and its convergence certificate.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::costs::{auxiliary_total, rollout, AuxiliaryCost};
use crate::error::{Error, Result};
use crate::filters::{
    classify, extend_with_terminal_law, update_horizon, Case, FilterContext, FilterKind, FilterSpec,
    HorizonSchedule, ProcessOutcome, StepData, ACCEPT_TOL,
};
use crate::model::SystemModel;
use crate::ocp::{FhocpSpec, SolveRecord, Solver, SolverOptions};
use crate::problem::ControlProblem;
use crate::Vector;

const CHECK_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    pub filter: FilterSpec,
    pub schedule: HorizonSchedule,
    /// Initial horizon; computed from a reference trajectory when absent.
    pub initial_horizon: Option<usize>,
    pub max_steps: usize,
    /// Terminal-mode steps after which a run stops.
    pub terminal_steps: usize,
    pub seed: u64,
    /// Evaluate all three filters side by side on every step.
    pub record_all_filters: bool,
    /// Samples of the sampled minimum of `L_a` outside `X_psi`.
    pub tau_samples: usize,
    /// Longest reference trajectory tried when computing the initial horizon.
    pub reference_max_len: usize,
    /// Number of leading steps in the reported average of `L_e`; the whole run when absent.
    pub average_window: Option<usize>,
    pub solver: SolverOptions,
}

impl ControllerConfig {
    pub fn new(filter: FilterSpec, schedule: HorizonSchedule) -> Self {
        Self {
            filter,
            schedule,
            initial_horizon: None,
            max_steps: 150,
            terminal_steps: 20,
            seed: 0xC0FFEE,
            record_all_filters: false,
            tau_samples: 100_000,
            reference_max_len: 100,
            average_window: None,
            solver: SolverOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CaseTag {
    A1,
    A2,
    Terminal,
}

impl CaseTag {
    pub fn as_str(self) -> &'static str {
        match self {
            CaseTag::A1 => "A1",
            CaseTag::A2 => "A2",
            CaseTag::Terminal => "terminal",
        }
    }
}

impl From<Case> for CaseTag {
    fn from(c: Case) -> Self {
        match c {
            Case::A1 => CaseTag::A1,
            Case::A2 => CaseTag::A2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub k: usize,
    /// State in deviation coordinates.
    pub x: Vec<f64>,
    /// Applied input in deviation coordinates.
    pub u: Vec<f64>,
    pub horizon: usize,
    pub case_tag: CaseTag,
    /// Filter value bounding the auxiliary cost of this step's problem.
    pub pi: Option<f64>,
    /// Auxiliary cost of the economic solution.
    pub vae: Option<f64>,
    pub le: f64,
    /// `L_a` at the applied input.
    pub la_applied: f64,
    /// `L_a` at the first optimal input.
    pub la_optimal: Option<f64>,
    pub solve_time_ms: f64,
    pub n_tilde: Option<usize>,
    pub next_horizon: usize,
    pub pi_next: Option<f64>,
    /// `J_a` of the candidate stored for the next step.
    pub candidate_ja: Option<f64>,
    /// All three filters at the next horizon, when recorded.
    pub all_filters: Option<[f64; 3]>,
    pub all_n_tilde: Option<[usize; 3]>,
    /// The solver returned the warm start verbatim.
    pub fell_back: bool,
    /// No predicted state entered the terminal set; the stored candidate was used.
    pub no_entry_fallback: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauEstimate {
    /// `min(d, psi * min_x gamma_Q(x)/V(x))`, the exact infimum of `L_a` outside `X_psi`.
    pub exact: f64,
    /// Smallest value found by uniform sampling.
    pub sampled: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceCertificate {
    #[serde(rename = "S_psi_bound")]
    pub s_psi_bound: f64,
    pub tau: f64,
    pub tau_sampled: f64,
    pub tau_samples: usize,
    #[serde(rename = "chi_floor_fn")]
    pub chi_floor: String,
    pub steps_to_psi: Option<usize>,
    #[serde(rename = "average_Le")]
    pub average_le: f64,
    #[serde(rename = "steady_Le")]
    pub steady_le: f64,
    #[serde(rename = "N0")]
    pub n0: usize,
    #[serde(rename = "N_bar")]
    pub n_bar: usize,
    pub steps: usize,
    pub violations: Vec<String>,
    pub warnings: Vec<String>,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopTrace {
    pub steps: Vec<StepRecord>,
    pub certificate: ConvergenceCertificate,
}

impl ClosedLoopTrace {
    /// Running mean of `L_e` after each step.
    pub fn running_average(&self) -> Vec<f64> {
        let mut acc = 0.0;
        self.steps
            .iter()
            .enumerate()
            .map(|(i, s)| {
                acc += s.le;
                acc / (i + 1) as f64
            })
            .collect()
    }
}

/// Minimum-`J_a` trajectory from `x0` that ends in the terminal set, using
/// the shortest horizon for which one exists. Empty when `x0` is already in it.
///
/// Reachability is monotone in the horizon (the terminal set is invariant
/// under the terminal law), so the length is found by doubling and bisection.
pub fn reference_trajectory(
    problem: &ControlProblem,
    x0: &Vector,
    solver: &Solver,
    max_len: usize,
) -> Result<Vec<Vector>> {
    let ti = &problem.aux.terminal;
    if ti.in_terminal_set(x0) {
        return Ok(Vec::new());
    }
    // clamped terminal-law rollout, used as a start point at every length
    let mut guess = Vec::with_capacity(max_len);
    let mut x = x0.clone();
    for _ in 0..max_len {
        let u = ti.terminal_control(&x);
        x = problem.model.step(&x, &u)?;
        guess.push(u);
    }
    let attempt = |n: usize| -> Result<Option<Vec<Vector>>> {
        let spec = FhocpSpec::auxiliary(&problem.model, &problem.econ, &problem.aux, x0.clone(), n)
            .with_terminal_level(ti.alpha);
        match solver.solve_with_guesses(&spec, None, &[guess[..n].to_vec()]) {
            Ok(rec) => Ok(Some(rec.inputs)),
            Err(Error::Infeasible(_)) => Ok(None),
            Err(e) => Err(e),
        }
    };
    let mut lo = 0;
    let mut hi = 1;
    let mut best = loop {
        if let Some(inputs) = attempt(hi)? {
            break inputs;
        }
        if hi >= max_len {
            return Err(Error::Initialization(format!(
                "no trajectory into the terminal set within {max_len} steps"
            )));
        }
        lo = hi;
        hi = (2 * hi).min(max_len);
    };
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        match attempt(mid)? {
            Some(inputs) => {
                hi = mid;
                best = inputs;
            }
            None => lo = mid,
        }
    }
    Ok(best)
}

/// Smallest horizon satisfying `J_a(x0, ref) - lambda alpha <= N0 d`, and at
/// least the reference length.
pub fn min_initial_horizon(model: &SystemModel, aux: &AuxiliaryCost, x0: &Vector, reference: &[Vector]) -> Result<usize> {
    let ti = &aux.terminal;
    let (ja, end_inside) = if reference.is_empty() {
        (aux.terminal_weight(x0), ti.in_terminal_set(x0))
    } else {
        let traj = rollout(model, x0, reference)?;
        (auxiliary_total(aux, &traj), ti.in_terminal_set(traj.terminal_state()))
    };
    if !end_inside {
        return Err(Error::Initialization("reference trajectory does not reach the terminal set".into()));
    }
    let needed = ((ja - aux.lambda * ti.alpha) / aux.d - 1e-9).ceil();
    let needed = if needed > 0.0 { needed as usize } else { 0 };
    Ok(needed.max(reference.len()).max(1))
}

/// The infimum of `L_a` over states outside `X_psi`, exactly and by sampling.
pub fn estimate_tau(problem: &ControlProblem, samples: usize, seed: u64) -> TauEstimate {
    let aux = &problem.aux;
    let ti = &aux.terminal;
    let exact = aux.d.min(ti.psi * ti.min_gamma_ratio());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sampled = f64::INFINITY;
    let mut drawn = 0;
    while drawn < samples {
        let x = problem.model.state_box().sample(&mut rng);
        let u = problem.model.input_box().sample(&mut rng);
        if ti.in_psi_set(&x) {
            continue;
        }
        drawn += 1;
        sampled = sampled.min(aux.stage(&x, &u));
    }
    TauEstimate {
        exact,
        sampled,
        samples,
    }
}

/// The closed-loop state machine.
pub struct Controller<'p> {
    problem: &'p ControlProblem,
    config: ControllerConfig,
    solver: Solver,
    k: usize,
    horizon: usize,
    pi: f64,
    warm: Vec<Vector>,
    latched: bool,
    n0: usize,
    n_bar: usize,
    tau: TauEstimate,
    /// `Pi_k - kappa min(gamma0, d)` from the previous optimizing step.
    pending_decrease: Option<(usize, f64)>,
    violations: Vec<String>,
    warnings: Vec<String>,
}

impl<'p> Controller<'p> {
    pub fn new(problem: &'p ControlProblem, config: ControllerConfig, x0: &Vector) -> Result<Self> {
        let model = &problem.model;
        if x0.len() != model.state_dim() {
            return Err(Error::DimensionMismatch {
                what: "initial state",
                expected: model.state_dim(),
                got: x0.len(),
            });
        }
        if !model.in_state_set(x0) {
            return Err(Error::Initialization(format!(
                "initial state {:?} lies outside the state constraints",
                x0.as_slice()
            )));
        }
        let solver = Solver::new(config.solver.clone());
        let ti = &problem.aux.terminal;
        let reference = reference_trajectory(problem, x0, &solver, config.reference_max_len)?;
        let n_bar = reference.len();
        let required = min_initial_horizon(model, &problem.aux, x0, &reference)?;
        let n0 = match config.initial_horizon {
            Some(n) if n < required => {
                return Err(Error::Initialization(format!(
                    "initial horizon {n} is below the feasible minimum {required}"
                )))
            }
            Some(n) => n,
            None => required,
        };
        let warm = if ti.in_psi_set(x0) {
            Vec::new()
        } else {
            extend_with_terminal_law(model, ti, x0, &reference, n0)?
        };
        let tau = estimate_tau(problem, config.tau_samples, config.seed);
        Ok(Self {
            problem,
            solver,
            k: 0,
            horizon: n0,
            pi: problem.aux.feasible_bound(n0),
            warm,
            latched: false,
            n0,
            n_bar,
            tau,
            pending_decrease: None,
            violations: Vec::new(),
            warnings: Vec::new(),
            config,
        })
    }

    pub fn initial_horizon(&self) -> usize {
        self.n0
    }

    pub fn reference_length(&self) -> usize {
        self.n_bar
    }

    pub fn tau(&self) -> &TauEstimate {
        &self.tau
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn filter_value(&self) -> f64 {
        self.pi
    }

    pub fn violations(&self) -> &[String] {
        &self.violations
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    /// `(N0 d + lambda alpha) / (kappa tau)`.
    pub fn reach_bound(&self) -> f64 {
        self.problem.aux.feasible_bound(self.n0) / (self.config.filter.kappa * self.tau.exact.min(self.tau.sampled))
    }

    fn violation(&mut self, msg: String) {
        self.violations.push(format!("step {}: {msg}", self.k));
    }

    fn check_admissible_pair(&mut self, x: &Vector, u: &Vector) {
        let model = &self.problem.model;
        let xv = model.state_box().violation(x.as_slice());
        let uv = model.input_box().violation(u.as_slice());
        if xv > CHECK_TOL || uv > CHECK_TOL {
            self.violation(format!("applied pair leaves X x U (state {xv:e}, input {uv:e})"));
        }
    }

    fn filter_context(&self) -> FilterContext<'_> {
        FilterContext {
            model: &self.problem.model,
            econ: &self.problem.econ,
            aux: &self.problem.aux,
            solver: &self.solver,
            kappa: self.config.filter.kappa,
        }
    }

    /// One step of the dual-mode law at the measured state `x`.
    pub fn control_step(&mut self, x: &Vector) -> Result<(Vector, StepRecord)> {
        let problem = self.problem;
        let model = &problem.model;
        let aux = &problem.aux;
        let ti = &aux.terminal;

        if self.latched || ti.in_psi_set(x) {
            self.latched = true;
            let u = ti.terminal_control(x);
            let next = model.step(x, &u)?;
            let decrease = ti.lyapunov(&next) - ti.lyapunov(x) + ti.gamma0(x, &u);
            if decrease > 1e-9 {
                self.violation(format!("terminal-mode decrease fails by {decrease:e}"));
            }
            if !ti.in_psi_set(&next) {
                self.violation("terminal mode leaves X_psi".into());
            }
            self.check_admissible_pair(x, &u);
            let record = StepRecord {
                k: self.k,
                x: x.iter().copied().collect(),
                u: u.iter().copied().collect(),
                horizon: self.horizon,
                case_tag: CaseTag::Terminal,
                pi: None,
                vae: None,
                le: problem.econ.evaluate(x, &u),
                la_applied: aux.stage(x, &u),
                la_optimal: None,
                solve_time_ms: 0.0,
                n_tilde: None,
                next_horizon: self.horizon,
                pi_next: None,
                candidate_ja: None,
                all_filters: None,
                all_n_tilde: None,
                fell_back: false,
                no_entry_fallback: false,
                iterations: 0,
            };
            self.pending_decrease = None;
            self.k += 1;
            return Ok((u, record));
        }

        let horizon = self.horizon;
        let pi = self.pi;
        if pi > aux.feasible_bound(horizon) + CHECK_TOL {
            self.violation(format!(
                "filter value {pi} exceeds N d + lambda alpha = {}",
                aux.feasible_bound(horizon)
            ));
        }
        let spec = FhocpSpec::economic(model, &problem.econ, aux, x.clone(), horizon, pi);
        let warm_ok = self.warm.len() == horizon;
        let solved = if warm_ok {
            match self.solver.solve(&spec, Some(&self.warm)) {
                Err(Error::Precondition(msg)) => {
                    self.warnings.push(format!("step {}: stored candidate rejected ({msg}); cold solve", self.k));
                    self.solver.solve(&spec, None)
                }
                other => other,
            }
        } else {
            self.solver.solve(&spec, None)
        };
        let mut record = match solved {
            Ok(r) => r,
            Err(Error::Infeasible(msg)) if self.k == 0 => return Err(Error::Initialization(msg)),
            Err(e) => return Err(e),
        };
        let traj = record.trajectory();
        let violation = spec.trajectory_violation(&traj);
        if !record.feasible || violation > CHECK_TOL {
            self.violation(format!("economic solve violates its constraints by {violation:e}"));
        }
        if let Some((from, bound)) = self.pending_decrease.take() {
            if record.aux_value > bound + CHECK_TOL {
                self.violations.push(format!(
                    "step {}: V_a^e = {} exceeds Pi_{from} - kappa min(gamma0, d) = {bound}",
                    self.k, record.aux_value
                ));
            }
        }

        let mut no_entry = false;
        let case = match classify(ti, &record.states) {
            Some(c) => c,
            None => {
                no_entry = true;
                self.warnings.push(format!(
                    "step {}: no predicted state in the terminal set; using the stored candidate",
                    self.k
                ));
                if !warm_ok {
                    return Err(Error::InternalInvariant("no entry and no stored candidate".into()));
                }
                let traj = rollout(model, x, &self.warm)?;
                record = SolveRecord {
                    objective: spec.objective_of(&traj),
                    economic_value: spec.objective_of(&traj),
                    aux_value: auxiliary_total(aux, &traj),
                    feasible: true,
                    inputs: traj.inputs,
                    states: traj.states,
                    iterations: record.iterations,
                    solve_time_ms: record.solve_time_ms,
                    fell_back: true,
                };
                classify(ti, &record.states)
                    .ok_or_else(|| Error::InternalInvariant("stored candidate never enters the terminal set".into()))?
            }
        };
        let u = match case {
            Case::A1 => ti.terminal_control(x),
            Case::A2 => record.inputs[0].clone(),
        };
        self.check_admissible_pair(x, &u);
        let x_next = model.step(x, &u)?;
        let la_applied = aux.stage(x, &u);
        let la_optimal = aux.stage(x, &record.inputs[0]);
        let data = StepData {
            record: &record,
            case,
            x_next: x_next.clone(),
            horizon,
            vae: record.aux_value,
            la0: la_applied,
        };

        let kind = self.config.filter.kind;
        let ctx = self.filter_context();
        let outcome = ctx.iterative_process(kind, &data)?;
        let (upsilon, sigma) = self.config.schedule.at(self.k);
        let next_horizon = update_horizon(outcome.n_tilde, horizon, upsilon, sigma);
        let value = ctx.value_at(kind, &data, &outcome, next_horizon)?;

        let (all_filters, all_n_tilde) = if self.config.record_all_filters {
            let mut values = [0.0; 3];
            let mut tildes = [0usize; 3];
            for other in FilterKind::ALL {
                let o: ProcessOutcome = if other == kind {
                    outcome.clone()
                } else {
                    ctx.iterative_process(other, &data)?
                };
                tildes[other.index()] = o.n_tilde;
                values[other.index()] = if other == kind {
                    value.value
                } else {
                    ctx.value_at(other, &data, &outcome, next_horizon)?.value
                };
            }
            (Some(values), Some(tildes))
        } else {
            (None, None)
        };
        drop(ctx);

        // per-step certification
        if outcome.n_tilde > horizon {
            self.violation(format!("Ntilde = {} exceeds N_k = {horizon}", outcome.n_tilde));
        }
        if let Some(t) = all_n_tilde {
            if t.iter().any(|&n| n > horizon) {
                self.violation(format!("some Ntilde in {t:?} exceeds N_k = {horizon}"));
            }
        }
        if let Some(f) = all_filters {
            if f[0] > f[1] + 1e-8 || f[1] > f[2] + 1e-8 {
                self.violation(format!("filter ordering fails: {f:?}"));
            }
        }
        if value.candidate_ja > record.aux_value - la_applied + CHECK_TOL {
            self.violation(format!(
                "candidate J_a = {} exceeds V_a^e - L_a0 = {}",
                value.candidate_ja,
                record.aux_value - la_applied
            ));
        }
        let tau = self.tau.exact.min(self.tau.sampled);
        let kappa = self.config.filter.kappa;
        if value.value > pi - kappa * tau + CHECK_TOL {
            self.violation(format!(
                "filter decrease fails: Pi_next = {} > Pi_k - kappa tau = {}",
                value.value,
                pi - kappa * tau
            ));
        }
        if value.value > aux.feasible_bound(next_horizon) + CHECK_TOL {
            self.violation(format!(
                "next filter value {} exceeds N d + lambda alpha = {}",
                value.value,
                aux.feasible_bound(next_horizon)
            ));
        }
        let chi = ti.gamma0(x, &u).min(aux.d);
        self.pending_decrease = Some((self.k, pi - kappa * chi));
        debug_assert!(ACCEPT_TOL <= CHECK_TOL);

        let step = StepRecord {
            k: self.k,
            x: x.iter().copied().collect(),
            u: u.iter().copied().collect(),
            horizon,
            case_tag: case.into(),
            pi: Some(pi),
            vae: Some(record.aux_value),
            le: problem.econ.evaluate(x, &u),
            la_applied,
            la_optimal: Some(la_optimal),
            solve_time_ms: record.solve_time_ms,
            n_tilde: Some(outcome.n_tilde),
            next_horizon,
            pi_next: Some(value.value),
            candidate_ja: Some(value.candidate_ja),
            all_filters,
            all_n_tilde,
            fell_back: record.fell_back,
            no_entry_fallback: no_entry,
            iterations: record.iterations,
        };
        self.horizon = next_horizon;
        self.pi = value.value;
        self.warm = value.warm_start;
        self.k += 1;
        Ok((u, step))
    }
}

/// Run the closed loop from `x0` until `max_steps` or until the configured
/// number of terminal-mode steps has been applied.
pub fn run_closed_loop(problem: &ControlProblem, x0: &Vector, config: &ControllerConfig) -> Result<ClosedLoopTrace> {
    let mut controller = Controller::new(problem, config.clone(), x0)?;
    let mut x = x0.clone();
    let mut steps = Vec::new();
    let mut terminal = 0;
    let mut steps_to_psi = None;
    for _ in 0..config.max_steps {
        let (u, record) = controller.control_step(&x)?;
        if record.case_tag == CaseTag::Terminal {
            terminal += 1;
            steps_to_psi.get_or_insert(record.k);
        }
        steps.push(record);
        x = problem.model.step(&x, &u)?;
        if terminal >= config.terminal_steps {
            break;
        }
    }

    let s_psi = controller.reach_bound();
    let window = config.average_window.unwrap_or(steps.len()).min(steps.len()).max(1);
    let average_le = steps.iter().take(window).map(|s| s.le).sum::<f64>() / window as f64;
    let steady_le = problem.steady_cost();
    let mut violations = controller.violations().to_vec();
    match steps_to_psi {
        Some(s) if s as f64 > s_psi.ceil() => {
            violations.push(format!("reached X_psi after {s} steps, above the bound {}", s_psi.ceil()));
        }
        None if steps.len() as f64 > s_psi.ceil() => {
            violations.push(format!("did not reach X_psi within the bound {}", s_psi.ceil()));
        }
        _ => {}
    }
    if average_le > steady_le + 1e-3 {
        violations.push(format!(
            "average economic cost {average_le} exceeds the steady-state cost {steady_le} + 1e-3"
        ));
    }
    let tau = controller.tau().clone();
    let certificate = ConvergenceCertificate {
        s_psi_bound: s_psi,
        tau: tau.exact.min(tau.sampled),
        tau_sampled: tau.sampled,
        tau_samples: tau.samples,
        chi_floor: "min(gamma0(x, u), d)".into(),
        steps_to_psi,
        average_le,
        steady_le,
        n0: controller.initial_horizon(),
        n_bar: controller.reference_length(),
        steps: steps.len(),
        passed: violations.is_empty(),
        violations,
        warnings: controller.warnings().to_vec(),
    };
    Ok(ClosedLoopTrace { steps, certificate })
}
