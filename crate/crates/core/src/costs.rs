//! Economic and auxiliary stage costs and their horizon sums.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::model::{CstrParams, SteadyState, SystemModel, TEMPERATURE_SCALE};
use crate::terminal::TerminalIngredients;
use crate::Vector;

/// Production-rate economics of the CSTR with convex operating penalties
/// around a nominal operating point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CstrEconomics {
    pub params: CstrParams,
    /// Nominal reactor temperature [K].
    pub temperature_nominal: f64,
    /// Temperature deviation scale [K].
    pub temperature_scale: f64,
    /// Nominal feed concentration [kmol/m^3].
    pub feed_nominal: f64,
    pub weight_temperature: f64,
    pub weight_feed: f64,
    pub weight_heat: f64,
}

impl Default for CstrEconomics {
    fn default() -> Self {
        Self {
            params: CstrParams::default(),
            temperature_nominal: 380.0,
            temperature_scale: 10.0,
            feed_nominal: 4.0,
            weight_temperature: 1.0,
            weight_feed: 1.0,
            weight_heat: 1.0,
        }
    }
}

impl CstrEconomics {
    fn evaluate(&self, x: &[f64], u: &[f64]) -> f64 {
        let temperature = x[1] * TEMPERATURE_SCALE;
        let dt = (temperature - self.temperature_nominal) / self.temperature_scale;
        let df = u[0] - self.feed_nominal;
        -self.params.rate(x[0], temperature)
            + self.weight_temperature * dt * dt
            + self.weight_feed * df * df
            + self.weight_heat * u[1] * u[1]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum EconomicKind {
    /// `L_e(x, u) = sum_j x_j u_j`.
    Bilinear,
    Cstr(CstrEconomics),
}

/// Economic stage cost `L_e`, evaluated in original plant coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EconomicCost {
    kind: EconomicKind,
    x_offset: Vec<f64>,
    u_offset: Vec<f64>,
}

impl EconomicCost {
    pub fn new(kind: EconomicKind, state_dim: usize, input_dim: usize) -> Self {
        Self {
            kind,
            x_offset: vec![0.0; state_dim],
            u_offset: vec![0.0; input_dim],
        }
    }

    pub fn bilinear() -> Self {
        Self::new(EconomicKind::Bilinear, 1, 1)
    }

    pub fn cstr_default() -> Self {
        Self::new(EconomicKind::Cstr(CstrEconomics::default()), 2, 2)
    }

    pub fn kind(&self) -> &EconomicKind {
        &self.kind
    }

    pub fn evaluate_slices(&self, x: &[f64], u: &[f64]) -> f64 {
        match &self.kind {
            EconomicKind::Bilinear => x
                .iter()
                .zip(&self.x_offset)
                .zip(u.iter().zip(&self.u_offset))
                .map(|((a, ao), (b, bo))| (a + ao) * (b + bo))
                .sum(),
            EconomicKind::Cstr(c) => c.evaluate(
                &[x[0] + self.x_offset[0], x[1] + self.x_offset[1]],
                &[u[0] + self.u_offset[0], u[1] + self.u_offset[1]],
            ),
        }
    }

    pub fn evaluate(&self, x: &Vector, u: &Vector) -> f64 {
        self.evaluate_slices(x.as_slice(), u.as_slice())
    }

    /// The same cost expressed in deviation coordinates around `ss`.
    pub fn shifted(&self, ss: &SteadyState) -> Self {
        let mut out = self.clone();
        for (o, s) in out.x_offset.iter_mut().zip(ss.x_s.iter()) {
            *o += s;
        }
        for (o, s) in out.u_offset.iter_mut().zip(ss.u_s.iter()) {
            *o += s;
        }
        out
    }
}

/// Piecewise auxiliary cost: `gamma0` inside the terminal set, `d + b |x|^2` outside,
/// with terminal weight `lambda V`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuxiliaryCost {
    pub terminal: TerminalIngredients,
    pub d: f64,
    pub b: f64,
    pub lambda: f64,
}

impl AuxiliaryCost {
    pub fn new(terminal: TerminalIngredients, d: f64, b: f64, lambda: f64) -> Result<Self> {
        if !(d > 0.0 && d.is_finite()) {
            return Err(Error::Contract(format!("outside floor d must be positive, got {d}")));
        }
        if !(b >= 0.0 && b.is_finite()) {
            return Err(Error::Contract(format!("outside slope b must be nonnegative, got {b}")));
        }
        if !(lambda >= 1.0 && lambda.is_finite()) {
            return Err(Error::Contract(format!("terminal weight must be >= 1, got {lambda}")));
        }
        Ok(Self { terminal, d, b, lambda })
    }

    pub fn with_b(&self, b: f64) -> Result<Self> {
        Self::new(self.terminal.clone(), self.d, b, self.lambda)
    }

    pub fn stage_slices(&self, x: &[f64], u: &[f64]) -> f64 {
        if self.terminal.in_terminal_set_slice(x) {
            self.terminal.gamma0_slices(x, u)
        } else {
            self.d + self.b * x.iter().map(|v| v * v).sum::<f64>()
        }
    }

    pub fn stage(&self, x: &Vector, u: &Vector) -> f64 {
        self.stage_slices(x.as_slice(), u.as_slice())
    }

    pub fn terminal_weight(&self, x: &Vector) -> f64 {
        self.lambda * self.terminal.lyapunov(x)
    }

    /// `N d + lambda alpha`, the largest filter value that keeps the problem feasible.
    pub fn feasible_bound(&self, horizon: usize) -> f64 {
        horizon as f64 * self.d + self.lambda * self.terminal.alpha
    }
}

/// Inputs `u_0..u_{N-1}` and the states `x_0..x_N` they generate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<Vector>,
    pub inputs: Vec<Vector>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.inputs.len()
    }

    pub fn terminal_state(&self) -> &Vector {
        self.states.last().expect("trajectory has at least one state")
    }
}

pub fn rollout(model: &SystemModel, x0: &Vector, inputs: &[Vector]) -> Result<Trajectory> {
    check_dim("initial state", model.state_dim(), x0.len())?;
    if inputs.is_empty() {
        return Err(Error::Contract("rollout needs a nonempty input sequence".into()));
    }
    let mut states = Vec::with_capacity(inputs.len() + 1);
    states.push(x0.clone());
    for u in inputs {
        let next = model.step(states.last().unwrap(), u)?;
        states.push(next);
    }
    Ok(Trajectory {
        states,
        inputs: inputs.to_vec(),
    })
}

/// `J_e`: economic cost summed over the stage pairs (terminal state excluded).
pub fn economic_total(econ: &EconomicCost, traj: &Trajectory) -> f64 {
    traj.inputs
        .iter()
        .zip(&traj.states)
        .map(|(u, x)| econ.evaluate(x, u))
        .sum()
}

pub fn auxiliary_stage(aux: &AuxiliaryCost, x: &Vector, u: &Vector) -> f64 {
    aux.stage(x, u)
}

/// `J_a = sum L_a(x_i, u_i) + lambda V(x_N)`.
pub fn auxiliary_total(aux: &AuxiliaryCost, traj: &Trajectory) -> f64 {
    let stages: f64 = traj
        .inputs
        .iter()
        .zip(&traj.states)
        .map(|(u, x)| aux.stage(x, u))
        .sum();
    stages + aux.terminal_weight(traj.terminal_state())
}
