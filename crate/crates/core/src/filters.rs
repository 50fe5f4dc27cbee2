//! Convergence filters, candidate sequences and the horizon update law.

use serde::{Deserialize, Serialize};

use crate::costs::{auxiliary_total, rollout, AuxiliaryCost, EconomicCost, Trajectory};
use crate::error::{Error, Result};
use crate::model::SystemModel;
use crate::ocp::{FhocpSpec, SolveRecord, Solver};
use crate::terminal::TerminalIngredients;
use crate::Vector;

/// Slack added to every acceptance inequality.
pub const ACCEPT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FilterKind {
    /// Blend with the stabilizing value function.
    Pi1,
    /// Blend with the auxiliary cost of the candidate sequence.
    Pi2,
    /// Candidate-free decrement.
    Pi3,
}

impl FilterKind {
    pub const ALL: [FilterKind; 3] = [FilterKind::Pi1, FilterKind::Pi2, FilterKind::Pi3];

    pub fn index(self) -> usize {
        match self {
            FilterKind::Pi1 => 0,
            FilterKind::Pi2 => 1,
            FilterKind::Pi3 => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    pub kind: FilterKind,
    pub kappa: f64,
}

impl FilterSpec {
    pub fn new(kind: FilterKind, kappa: f64) -> Result<Self> {
        if !(kappa > 0.0 && kappa <= 1.0) {
            return Err(Error::Contract(format!("kappa must lie in (0, 1], got {kappa}")));
        }
        Ok(Self { kind, kappa })
    }
}

/// Blending sequences of the horizon law, cycled when shorter than the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonSchedule {
    pub upsilon: Vec<f64>,
    pub sigma: Vec<usize>,
}

impl HorizonSchedule {
    pub fn new(upsilon: Vec<f64>, sigma: Vec<usize>) -> Result<Self> {
        if upsilon.is_empty() || sigma.is_empty() {
            return Err(Error::Contract("horizon schedule needs at least one entry".into()));
        }
        if let Some(bad) = upsilon.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Contract(format!("upsilon must lie in [0, 1], got {bad}")));
        }
        Ok(Self { upsilon, sigma })
    }

    pub fn constant(upsilon: f64, sigma: usize) -> Result<Self> {
        Self::new(vec![upsilon], vec![sigma])
    }

    pub fn at(&self, k: usize) -> (f64, usize) {
        (self.upsilon[k % self.upsilon.len()], self.sigma[k % self.sigma.len()])
    }
}

/// `max(ceil(upsilon Ntilde + (1 - upsilon) N_k) + sigma, 1)`.
pub fn update_horizon(n_tilde: usize, n_k: usize, upsilon: f64, sigma: usize) -> usize {
    let blend = upsilon * n_tilde as f64 + (1.0 - upsilon) * n_k as f64;
    // guard against 5.000000000000001 style roundoff
    let rounded = (blend - 1e-9).ceil().max(0.0) as usize;
    (rounded + sigma).max(1)
}

pub fn feasible_bound(horizon: usize, aux: &AuxiliaryCost) -> f64 {
    aux.feasible_bound(horizon)
}

pub fn pi1(prev_vae: f64, stabilizing_value: f64, kappa: f64) -> f64 {
    (1.0 - kappa) * prev_vae + kappa * stabilizing_value
}

pub fn pi2(prev_vae: f64, candidate_ja: f64, kappa: f64) -> f64 {
    (1.0 - kappa) * prev_vae + kappa * candidate_ja
}

pub fn pi3(prev_vae: f64, prev_la0: f64, kappa: f64) -> f64 {
    prev_vae - kappa * prev_la0
}

/// First index whose state lies in the terminal set.
pub fn first_entry_index(ti: &TerminalIngredients, states: &[Vector]) -> Result<usize> {
    states.iter().position(|x| ti.in_terminal_set(x)).ok_or(Error::NoEntry)
}

/// First index `>= 1` whose state lies in the terminal set.
pub fn first_shifted_entry_index(ti: &TerminalIngredients, states: &[Vector]) -> Result<usize> {
    states
        .iter()
        .enumerate()
        .skip(1)
        .find(|(_, x)| ti.in_terminal_set(x))
        .map(|(i, _)| i)
        .ok_or(Error::NoEntry)
}

/// Last index in `first..=min(n_next, N)` whose state lies in the terminal set.
pub fn last_entry_index(ti: &TerminalIngredients, states: &[Vector], n_next: usize, first: usize) -> Result<usize> {
    let upper = n_next.min(states.len().saturating_sub(1));
    if first > upper || !ti.in_terminal_set(&states[first]) {
        return Err(Error::Contract(format!(
            "entry index {first} is not a terminal-set index within 0..={upper}"
        )));
    }
    Ok((first..=upper).rev().find(|&i| ti.in_terminal_set(&states[i])).unwrap_or(first))
}

/// Append terminal-law steps to `inputs` (applied from `x_start`) until the
/// sequence has length `len`.
pub fn extend_with_terminal_law(
    model: &SystemModel,
    ti: &TerminalIngredients,
    x_start: &Vector,
    inputs: &[Vector],
    len: usize,
) -> Result<Vec<Vector>> {
    if len < inputs.len() {
        return Err(Error::Contract(format!(
            "cannot extend a sequence of length {} to {len}",
            inputs.len()
        )));
    }
    let mut x = x_start.clone();
    for u in inputs {
        x = model.step(&x, u)?;
    }
    let mut out = inputs.to_vec();
    while out.len() < len {
        let u = ti.terminal_control(&x);
        x = model.step(&x, &u)?;
        out.push(u);
    }
    Ok(out)
}

/// Terminal-law sequence of length `n_next` from `x_next`, which must lie in the terminal set.
pub fn candidate_a1(model: &SystemModel, ti: &TerminalIngredients, x_next: &Vector, n_next: usize) -> Result<Vec<Vector>> {
    if !ti.in_terminal_set(x_next) {
        return Err(Error::Contract("terminal-law candidate needs x_next in the terminal set".into()));
    }
    if n_next == 0 {
        return Err(Error::Contract("candidate length must be at least 1".into()));
    }
    extend_with_terminal_law(model, ti, x_next, &[], n_next)
}

/// Shifted optimal inputs up to the last terminal-set index `p` (at most
/// `n_next`), followed by terminal-law steps from `x*_p`; length `n_next`.
pub fn candidate_a2(model: &SystemModel, ti: &TerminalIngredients, prev: &SolveRecord, n_next: usize) -> Result<Vec<Vector>> {
    let first = first_shifted_entry_index(ti, &prev.states)
        .map_err(|_| Error::Contract("shifted candidate needs a predicted entry at index >= 1".into()))?;
    if n_next < first {
        return Err(Error::Contract(format!(
            "candidate length {n_next} is below the entry index {first}"
        )));
    }
    let last = last_entry_index(ti, &prev.states, n_next, first)?;
    let head = &prev.inputs[1..last];
    extend_with_terminal_law(model, ti, &prev.states[1], head, n_next)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Case {
    /// Only the current state is in the terminal set; the terminal law is applied.
    A1,
    /// Some later predicted state is in the terminal set; `u*_0` is applied.
    A2,
}

/// Classify an optimal prediction into the two cases; `None` when no
/// predicted state lies in the terminal set.
pub fn classify(ti: &TerminalIngredients, states: &[Vector]) -> Option<Case> {
    if first_shifted_entry_index(ti, states).is_ok() {
        Some(Case::A2)
    } else if ti.in_terminal_set(&states[0]) {
        Some(Case::A1)
    } else {
        None
    }
}

/// Everything the iterative processes need from step `k`.
#[derive(Debug, Clone)]
pub struct StepData<'r> {
    pub record: &'r SolveRecord,
    pub case: Case,
    pub x_next: Vector,
    pub horizon: usize,
    /// `V_a^e(x_k, N_k)`.
    pub vae: f64,
    /// `L_a` at `x_k` with the applied input.
    pub la0: f64,
}

#[derive(Debug, Clone)]
pub struct ProcessOutcome {
    pub kind: FilterKind,
    pub n_tilde: usize,
    /// Candidate sequence of length `n_tilde`.
    pub candidate: Vec<Vector>,
    pub candidate_ja: f64,
    /// Stabilizing solution at `n_tilde` (first filter only).
    pub stabilizing: Option<SolveRecord>,
    /// Filter value at `n_tilde`.
    pub value: f64,
    /// Number of stabilizing solves performed during the scan.
    pub solves: usize,
}

/// Filter value at some horizon `n >= n_tilde` and the matching warm start.
#[derive(Debug, Clone)]
pub struct FilterValue {
    pub value: f64,
    pub warm_start: Vec<Vector>,
    /// The candidate sequence extended to `n` and its `J_a`.
    pub candidate: Vec<Vector>,
    pub candidate_ja: f64,
    pub stabilizing_value: Option<f64>,
}

pub struct FilterContext<'a> {
    pub model: &'a SystemModel,
    pub econ: &'a EconomicCost,
    pub aux: &'a AuxiliaryCost,
    pub solver: &'a Solver,
    pub kappa: f64,
}

impl<'a> FilterContext<'a> {
    fn ti(&self) -> &TerminalIngredients {
        &self.aux.terminal
    }

    /// First horizon the processes consider.
    pub fn scan_start(&self, data: &StepData) -> Result<usize> {
        match data.case {
            Case::A1 => Ok(1),
            Case::A2 => first_shifted_entry_index(self.ti(), &data.record.states),
        }
    }

    pub fn candidate(&self, data: &StepData, n: usize) -> Result<Vec<Vector>> {
        match data.case {
            Case::A1 => candidate_a1(self.model, self.ti(), &data.x_next, n),
            Case::A2 => candidate_a2(self.model, self.ti(), data.record, n),
        }
    }

    fn trajectory(&self, data: &StepData, inputs: &[Vector]) -> Result<Trajectory> {
        rollout(self.model, &data.x_next, inputs)
    }

    fn box_violation(&self, traj: &Trajectory) -> f64 {
        let mut worst = 0.0f64;
        for u in &traj.inputs {
            worst = worst.max(self.model.input_box().violation(u.as_slice()));
        }
        for x in traj.states.iter().skip(1) {
            worst = worst.max(self.model.state_box().violation(x.as_slice()));
        }
        worst
    }

    /// `J_a` of the candidate when it is feasible and satisfies the one-step
    /// decrease `J_a <= V_a^e - L_a0`.
    pub fn admissible(&self, data: &StepData, inputs: &[Vector]) -> Result<Option<f64>> {
        let traj = self.trajectory(data, inputs)?;
        if self.box_violation(&traj) > ACCEPT_TOL {
            return Ok(None);
        }
        let ja = auxiliary_total(self.aux, &traj);
        Ok((ja <= data.vae - data.la0 + ACCEPT_TOL).then_some(ja))
    }

    fn stabilizing(&self, data: &StepData, n: usize, warm: &[Vector]) -> Result<SolveRecord> {
        let spec = FhocpSpec::auxiliary(self.model, self.econ, self.aux, data.x_next.clone(), n);
        self.solver.stabilizing_value(&spec, Some(warm))
    }

    /// Scan horizons from the entry index up to `N_k` and return the first
    /// accepted one.
    pub fn iterative_process(&self, kind: FilterKind, data: &StepData) -> Result<ProcessOutcome> {
        let start = self.scan_start(data)?.max(1);
        let mut solves = 0;
        for i in start..=data.horizon.max(start) {
            let bound = self.aux.feasible_bound(i) + ACCEPT_TOL;
            let candidate = self.candidate(data, i)?;
            let Some(ja) = self.admissible(data, &candidate)? else {
                continue;
            };
            match kind {
                FilterKind::Pi3 => {
                    let value = pi3(data.vae, data.la0, self.kappa);
                    if value <= bound {
                        return Ok(ProcessOutcome {
                            kind,
                            n_tilde: i,
                            candidate,
                            candidate_ja: ja,
                            stabilizing: None,
                            value,
                            solves,
                        });
                    }
                }
                FilterKind::Pi2 => {
                    let value = pi2(data.vae, ja, self.kappa);
                    if ja <= value + ACCEPT_TOL && value <= bound {
                        return Ok(ProcessOutcome {
                            kind,
                            n_tilde: i,
                            candidate,
                            candidate_ja: ja,
                            stabilizing: None,
                            value,
                            solves,
                        });
                    }
                }
                FilterKind::Pi1 => {
                    // the stabilizing value is nonnegative, so this is a lower bound on the filter
                    if (1.0 - self.kappa) * data.vae > bound {
                        continue;
                    }
                    let stab = self.stabilizing(data, i, &candidate)?;
                    solves += 1;
                    let value = pi1(data.vae, stab.objective, self.kappa);
                    if stab.objective <= value + ACCEPT_TOL && value <= bound {
                        return Ok(ProcessOutcome {
                            kind,
                            n_tilde: i,
                            candidate,
                            candidate_ja: ja,
                            stabilizing: Some(stab),
                            value,
                            solves,
                        });
                    }
                }
            }
        }
        Err(Error::InternalInvariant(format!(
            "iterative process {kind:?} found no admissible horizon in {start}..={}",
            data.horizon
        )))
    }

    /// Filter value of `kind` at horizon `n >= outcome.n_tilde`, reusing the
    /// outcome of a scan (of any kind) on the same step data.
    pub fn value_at(&self, kind: FilterKind, data: &StepData, outcome: &ProcessOutcome, n: usize) -> Result<FilterValue> {
        let candidate = extend_with_terminal_law(self.model, self.ti(), &data.x_next, &outcome.candidate, n)?;
        let candidate_ja = auxiliary_total(self.aux, &self.trajectory(data, &candidate)?);
        match kind {
            FilterKind::Pi3 => Ok(FilterValue {
                value: pi3(data.vae, data.la0, self.kappa),
                warm_start: candidate.clone(),
                candidate,
                candidate_ja,
                stabilizing_value: None,
            }),
            FilterKind::Pi2 => Ok(FilterValue {
                value: pi2(data.vae, candidate_ja, self.kappa),
                warm_start: candidate.clone(),
                candidate,
                candidate_ja,
                stabilizing_value: None,
            }),
            FilterKind::Pi1 => {
                let stab = match &outcome.stabilizing {
                    Some(s) if n == s.horizon() => s.clone(),
                    other => {
                        let mut warm = candidate.clone();
                        let mut warm_ja = candidate_ja;
                        if let Some(s) = other {
                            let ext = extend_with_terminal_law(self.model, self.ti(), &data.x_next, &s.inputs, n)?;
                            let traj = self.trajectory(data, &ext)?;
                            let ja = auxiliary_total(self.aux, &traj);
                            if self.box_violation(&traj) <= ACCEPT_TOL && ja < warm_ja {
                                warm = ext;
                                warm_ja = ja;
                            }
                        }
                        let _ = warm_ja;
                        self.stabilizing(data, n, &warm)?
                    }
                };
                Ok(FilterValue {
                    value: pi1(data.vae, stab.objective, self.kappa),
                    warm_start: stab.inputs.clone(),
                    candidate,
                    candidate_ja,
                    stabilizing_value: Some(stab.objective),
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::ControlProblem;
    use crate::Matrix;

    fn scalar_ti(alpha: f64) -> (SystemModel, TerminalIngredients) {
        let model = SystemModel::scalar();
        let q = Matrix::from_element(1, 1, 1.0);
        let ti = TerminalIngredients::new(
            Matrix::from_element(1, 1, 1.0),
            Matrix::from_element(1, 1, -0.5),
            alpha,
            alpha * 0.01,
            &q * 0.1,
            &q * 0.1,
            model.input_box().clone(),
        )
        .unwrap();
        (model, ti)
    }

    fn states(values: &[f64]) -> Vec<Vector> {
        values.iter().map(|&v| Vector::from_element(1, v)).collect()
    }

    #[test]
    fn filter_formulas() {
        assert_eq!(pi1(10.0, 4.0, 1.0), 4.0);
        assert_eq!(pi1(10.0, 4.0, 0.5), 7.0);
        assert!((pi1(10.0, 4.0, 1e-12) - 10.0).abs() < 1e-9);
        assert_eq!(pi2(10.0, 8.0, 0.5), 9.0);
        assert_eq!(pi2(10.0, 4.0, 0.5), pi1(10.0, 4.0, 0.5));
        assert_eq!(pi3(10.0, 2.0, 0.5), 9.0);
        assert_eq!(pi3(10.0, 10.0, 1.0), 0.0);
    }

    #[test]
    fn horizon_law_endpoints() {
        assert_eq!(update_horizon(5, 10, 1.0, 0), 5);
        assert_eq!(update_horizon(5, 10, 0.0, 0), 10);
        assert_eq!(update_horizon(5, 10, 0.5, 2), 10);
        assert_eq!(update_horizon(0, 0, 1.0, 0), 1);
    }

    #[test]
    fn feasible_bound_examples() {
        let (_, ti) = scalar_ti(0.5);
        let aux = AuxiliaryCost::new(ti.clone(), 1.0, 0.0, 1.0).unwrap();
        assert!((feasible_bound(10, &aux) - 10.5).abs() < 1e-12);
        let ti2 = ti.with_levels(2.0, 0.02).unwrap();
        let aux = AuxiliaryCost::new(ti2, 0.1, 0.0, 1.5).unwrap();
        assert!((feasible_bound(1, &aux) - 3.1).abs() < 1e-12);
        assert!(feasible_bound(2, &aux) > feasible_bound(1, &aux));
    }

    #[test]
    fn entry_indices() {
        let (_, ti) = scalar_ti(1.0);
        // V = x^2 with P = 1
        let s = states(&[2f64.sqrt(), 0.5f64.sqrt(), 2f64.sqrt()]);
        assert_eq!(first_entry_index(&ti, &s).unwrap(), 1);
        assert_eq!(first_entry_index(&ti, &states(&[0.1, 3.0])).unwrap(), 0);
        assert!(matches!(first_entry_index(&ti, &states(&[3.0, 3.0])), Err(Error::NoEntry)));
        let s = states(&[3.0, 0.5, 3.0, 0.5, 3.0]);
        assert_eq!(last_entry_index(&ti, &s, 3, 1).unwrap(), 3);
        assert_eq!(last_entry_index(&ti, &states(&[0.5, 3.0, 3.0]), 2, 0).unwrap(), 0);
        assert_eq!(last_entry_index(&ti, &states(&[3.0, 0.5, 3.0]), 2, 1).unwrap(), 1);
    }

    #[test]
    fn terminal_law_candidate() {
        let p = ControlProblem::scalar().unwrap();
        let ti = &p.aux.terminal;
        let zero = candidate_a1(&p.model, ti, &Vector::zeros(1), 4).unwrap();
        assert!(zero.iter().all(|u| u[0] == 0.0));
        let x = Vector::from_element(1, 1.5);
        for n in [1, 3, 7] {
            let c = candidate_a1(&p.model, ti, &x, n).unwrap();
            assert_eq!(c.len(), n);
            let traj = rollout(&p.model, &x, &c).unwrap();
            for w in traj.states.windows(2) {
                assert!(ti.in_terminal_set(&w[1]));
                assert!(ti.lyapunov(&w[1]) <= ti.lyapunov(&w[0]) + 1e-12);
            }
        }
        assert!(candidate_a1(&p.model, ti, &Vector::from_element(1, 1.99), 2).is_err());
    }

    fn record(model: &SystemModel, x0: f64, inputs: &[f64]) -> SolveRecord {
        let inputs: Vec<Vector> = inputs.iter().map(|&u| Vector::from_element(1, u)).collect();
        let traj = rollout(model, &Vector::from_element(1, x0), &inputs).unwrap();
        SolveRecord {
            inputs: traj.inputs,
            states: traj.states,
            objective: 0.0,
            economic_value: 0.0,
            aux_value: 0.0,
            feasible: true,
            iterations: 0,
            solve_time_ms: 0.0,
            fell_back: false,
        }
    }

    #[test]
    fn shifted_candidate_shapes_and_shift_identity() {
        let p = ControlProblem::scalar().unwrap();
        let ti = &p.aux.terminal;
        // from 1.9 (outside X_f) inputs keep the state inside afterwards
        let rec = record(&p.model, 1.9, &[-0.5, 0.2, -0.3]);
        let n = rec.horizon();
        assert!(!ti.in_terminal_set(&rec.states[0]));
        assert!(rec.states[1..].iter().all(|x| ti.in_terminal_set(x)));
        // last entry = N = N_next: pure shift plus one terminal-law step
        let c = candidate_a2(&p.model, ti, &rec, n).unwrap();
        assert_eq!(c.len(), n);
        assert_eq!(c[..n - 1], rec.inputs[1..]);
        assert_eq!(c[n - 1], ti.terminal_control(&rec.states[n]));
        // shortest admissible length
        let c = candidate_a2(&p.model, ti, &rec, 1).unwrap();
        assert_eq!(c, vec![ti.terminal_control(&rec.states[1])]);
        // shift identity
        let c = candidate_a2(&p.model, ti, &rec, 5).unwrap();
        let traj = rollout(&p.model, &rec.states[1], &c).unwrap();
        for i in 0..n {
            assert!((&traj.states[i] - &rec.states[i + 1]).norm() <= 1e-9);
        }
    }

    #[test]
    fn shifted_candidate_rejects_length_below_entry() {
        let p = ControlProblem::scalar().unwrap();
        let ti = &p.aux.terminal;
        // 1.9 -> 1.71 (just outside X_f) -> 0.539 (inside)
        let rec = record(&p.model, 1.9, &[0.0, -1.0, 0.0]);
        assert_eq!(first_shifted_entry_index(ti, &rec.states).unwrap(), 2);
        assert!(candidate_a2(&p.model, ti, &rec, 1).is_err());
        assert_eq!(candidate_a2(&p.model, ti, &rec, 2).unwrap().len(), 2);
    }

    #[test]
    fn classification() {
        let (_, ti) = scalar_ti(1.0);
        assert_eq!(classify(&ti, &states(&[0.5, 3.0, 3.0])), Some(Case::A1));
        assert_eq!(classify(&ti, &states(&[3.0, 3.0, 0.5])), Some(Case::A2));
        assert_eq!(classify(&ti, &states(&[0.5, 0.5])), Some(Case::A2));
        assert_eq!(classify(&ti, &states(&[3.0, 3.0])), None);
    }

    #[test]
    fn schedule_cycles() {
        let s = HorizonSchedule::new(vec![0.0, 1.0], vec![2]).unwrap();
        assert_eq!(s.at(0), (0.0, 2));
        assert_eq!(s.at(3), (1.0, 2));
        assert!(HorizonSchedule::constant(1.5, 0).is_err());
        assert!(FilterSpec::new(FilterKind::Pi1, 0.0).is_err());
        assert!(FilterSpec::new(FilterKind::Pi1, 1.0).is_ok());
    }
}
