//! Plant models: discrete-time dynamics, box constraint sets and steady states.
//!
//! All models can be expressed in deviation coordinates around a steady state
//! with [`SystemModel::shift_to_origin`]. The shift is stored as an offset so the
//! underlying physics is always evaluated in original coordinates.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::costs::EconomicCost;
use crate::error::{check_dim, Error, Result};
use crate::{Matrix, Vector};

/// Membership tolerance for the closed state and input sets.
pub const SET_TOL: f64 = 1e-9;

/// Axis-aligned closed box `{ v : lower <= v <= upper }`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxSet {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxSet {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        check_dim("box bounds", lower.len(), upper.len())?;
        if lower.is_empty() {
            return Err(Error::Contract("box must have at least one coordinate".into()));
        }
        for (lo, hi) in lower.iter().zip(&upper) {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::Contract(format!("invalid interval [{lo}, {hi}]")));
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, v: &[f64], tol: f64) -> bool {
        v.len() == self.dim()
            && v
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(x, (lo, hi))| *x >= lo - tol && *x <= hi + tol)
    }

    /// Largest componentwise distance outside the box (0 inside).
    pub fn violation(&self, v: &[f64]) -> f64 {
        v.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(x, (lo, hi))| (lo - x).max(x - hi).max(0.0))
            .fold(0.0, f64::max)
    }

    pub fn clamp(&self, v: &mut [f64]) {
        for (x, (lo, hi)) in v.iter_mut().zip(self.lower.iter().zip(&self.upper)) {
            *x = x.clamp(*lo, *hi);
        }
    }

    pub fn center(&self) -> Vector {
        Vector::from_iterator(
            self.dim(),
            self.lower.iter().zip(&self.upper).map(|(lo, hi)| 0.5 * (lo + hi)),
        )
    }

    pub fn shifted(&self, by: &[f64]) -> Self {
        Self {
            lower: self.lower.iter().zip(by).map(|(l, s)| l - s).collect(),
            upper: self.upper.iter().zip(by).map(|(u, s)| u - s).collect(),
        }
    }

    /// Point at fraction `t` in `[0, 1]` of every coordinate's interval.
    pub fn lerp(&self, t: f64) -> Vector {
        Vector::from_iterator(
            self.dim(),
            self.lower.iter().zip(&self.upper).map(|(lo, hi)| lo + t * (hi - lo)),
        )
    }

    pub fn vertices(&self) -> Vec<Vector> {
        let n = self.dim();
        (0..1usize << n)
            .map(|mask| {
                Vector::from_iterator(
                    n,
                    (0..n).map(|j| {
                        if mask & (1 << j) != 0 {
                            self.upper[j]
                        } else {
                            self.lower[j]
                        }
                    }),
                )
            })
            .collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vector {
        Vector::from_iterator(
            self.dim(),
            self.lower
                .iter()
                .zip(&self.upper)
                .map(|(lo, hi)| if hi > lo { rng.random_range(*lo..=*hi) } else { *lo }),
        )
    }
}

/// Parameters of the non-isothermal second-order CSTR.
///
/// Units inside the model are scaled: temperature in 100 K and heat rate in
/// 1e5 kJ/h, so that state and input deviations are of order one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CstrParams {
    /// F/V [1/h]
    pub dilution: f64,
    /// Feed temperature [K]
    pub feed_temperature: f64,
    /// Pre-exponential factor [m^3/(kmol h)]
    pub k0: f64,
    /// E/R [K]
    pub activation: f64,
    /// Reaction enthalpy [kJ/kmol]
    pub delta_h: f64,
    /// Density times heat capacity [kJ/(m^3 K)]
    pub rho_cp: f64,
    /// Reactor volume [m^3]
    pub volume: f64,
}

impl Default for CstrParams {
    fn default() -> Self {
        Self {
            dilution: 5.0,
            feed_temperature: 300.0,
            k0: 8.46e6,
            activation: 6013.95,
            delta_h: -1.15e4,
            rho_cp: 231.0,
            volume: 1.0,
        }
    }
}

pub const CSTR_SUBSTEPS: usize = 64;
pub(crate) const TEMPERATURE_SCALE: f64 = 100.0;
pub(crate) const HEAT_SCALE: f64 = 1e5;

impl CstrParams {
    /// Reaction rate `k0 exp(-E/(R T)) C_A^2` with `T` in Kelvin.
    pub fn rate(&self, concentration: f64, temperature_k: f64) -> f64 {
        self.k0 * (-self.activation / temperature_k).exp() * concentration * concentration
    }

    /// Time derivative of the scaled state `(C_A, T/100)` under scaled inputs
    /// `(C_A0, Q/1e5)`.
    fn rhs(&self, x: [f64; 2], u: [f64; 2]) -> [f64; 2] {
        let temperature = x[1] * TEMPERATURE_SCALE;
        let r = self.rate(x[0], temperature);
        let heat = u[1] * HEAT_SCALE;
        let dc = self.dilution * (u[0] - x[0]) - r;
        let dt = self.dilution * (self.feed_temperature - temperature)
            + (-self.delta_h / self.rho_cp) * r
            + heat / (self.rho_cp * self.volume);
        [dc, dt / TEMPERATURE_SCALE]
    }

    fn rk4(&self, x: [f64; 2], u: [f64; 2], h: f64, substeps: usize) -> [f64; 2] {
        let h = h / substeps as f64;
        let mut x = x;
        let axpy = |a: [f64; 2], s: f64, b: [f64; 2]| [a[0] + s * b[0], a[1] + s * b[1]];
        for _ in 0..substeps {
            let k1 = self.rhs(x, u);
            let k2 = self.rhs(axpy(x, 0.5 * h, k1), u);
            let k3 = self.rhs(axpy(x, 0.5 * h, k2), u);
            let k4 = self.rhs(axpy(x, h, k3), u);
            for j in 0..2 {
                x[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
            }
        }
        x
    }
}

impl CstrParams {
    /// Right-hand side with its Jacobians w.r.t. state and input.
    fn rhs_jac(&self, x: [f64; 2], u: [f64; 2]) -> ([f64; 2], [[f64; 2]; 2], [[f64; 2]; 2]) {
        let temperature = x[1] * TEMPERATURE_SCALE;
        let arrhenius = self.k0 * (-self.activation / temperature).exp();
        let r = arrhenius * x[0] * x[0];
        let r_c = 2.0 * arrhenius * x[0];
        let r_t = r * self.activation / (temperature * temperature) * TEMPERATURE_SCALE;
        let heat_gain = -self.delta_h / self.rho_cp;
        let f = self.rhs(x, u);
        let jx = [
            [-self.dilution - r_c, -r_t],
            [heat_gain * r_c / TEMPERATURE_SCALE, (-self.dilution * TEMPERATURE_SCALE + heat_gain * r_t) / TEMPERATURE_SCALE],
        ];
        let ju = [
            [self.dilution, 0.0],
            [0.0, HEAT_SCALE / (self.rho_cp * self.volume) / TEMPERATURE_SCALE],
        ];
        (f, jx, ju)
    }

    /// RK4 step together with its exact derivative `[d/dx | d/du]` (RK4 applied
    /// to the variational equations).
    fn rk4_sens(&self, x: [f64; 2], u: [f64; 2], h: f64, substeps: usize) -> ([f64; 2], [[f64; 4]; 2]) {
        type Sens = [[f64; 4]; 2];
        let h = h / substeps as f64;
        let deriv = |x: [f64; 2], s: &Sens| -> ([f64; 2], Sens) {
            let (f, jx, ju) = self.rhs_jac(x, u);
            let mut ds = [[0.0; 4]; 2];
            for i in 0..2 {
                for c in 0..4 {
                    let mut acc = jx[i][0] * s[0][c] + jx[i][1] * s[1][c];
                    if c >= 2 {
                        acc += ju[i][c - 2];
                    }
                    ds[i][c] = acc;
                }
            }
            (f, ds)
        };
        let advance = |x: [f64; 2], s: &Sens, scale: f64, dx: [f64; 2], dsv: &Sens| -> ([f64; 2], Sens) {
            let mut out = *s;
            for i in 0..2 {
                for c in 0..4 {
                    out[i][c] += scale * dsv[i][c];
                }
            }
            ([x[0] + scale * dx[0], x[1] + scale * dx[1]], out)
        };
        let mut x = x;
        let mut s: Sens = [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]];
        for _ in 0..substeps {
            let (k1, l1) = deriv(x, &s);
            let (x2, s2) = advance(x, &s, 0.5 * h, k1, &l1);
            let (k2, l2) = deriv(x2, &s2);
            let (x3, s3) = advance(x, &s, 0.5 * h, k2, &l2);
            let (k3, l3) = deriv(x3, &s3);
            let (x4, s4) = advance(x, &s, h, k3, &l3);
            let (k4, l4) = deriv(x4, &s4);
            for i in 0..2 {
                x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
                for c in 0..4 {
                    s[i][c] += h / 6.0 * (l1[i][c] + 2.0 * l2[i][c] + 2.0 * l3[i][c] + l4[i][c]);
                }
            }
        }
        (x, s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Dynamics {
    /// `x+ = A x + B u`
    Linear { a: Matrix, b: Matrix },
    /// RK4-discretized CSTR.
    Cstr(CstrParams),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemModel {
    pub name: String,
    dynamics: Dynamics,
    state_box: BoxSet,
    input_box: BoxSet,
    sample_time: Option<f64>,
    substeps: usize,
    x_offset: Vec<f64>,
    u_offset: Vec<f64>,
}

impl SystemModel {
    pub fn linear(name: &str, a: Matrix, b: Matrix, state_box: BoxSet, input_box: BoxSet) -> Result<Self> {
        let n = a.nrows();
        check_dim("A columns", n, a.ncols())?;
        check_dim("B rows", n, b.nrows())?;
        check_dim("state box", n, state_box.dim())?;
        check_dim("input box", b.ncols(), input_box.dim())?;
        let m = b.ncols();
        Ok(Self {
            name: name.to_string(),
            dynamics: Dynamics::Linear { a, b },
            state_box,
            input_box,
            sample_time: None,
            substeps: 1,
            x_offset: vec![0.0; n],
            u_offset: vec![0.0; m],
        })
    }

    /// Scalar benchmark `x+ = 0.9 x + u`, `X = [-2, 2]`, `U = [-1, 1]`.
    pub fn scalar() -> Self {
        Self::linear(
            "scalar",
            Matrix::from_element(1, 1, 0.9),
            Matrix::from_element(1, 1, 1.0),
            BoxSet::new(vec![-2.0], vec![2.0]).unwrap(),
            BoxSet::new(vec![-1.0], vec![1.0]).unwrap(),
        )
        .unwrap()
    }

    /// CSTR benchmark in scaled units, 0.01 h sample time.
    ///
    /// The hot corner of `X` is stiff enough that a single RK4 step is not
    /// converged; 64 sub-steps keep the halving error below `1e-6`.
    pub fn cstr() -> Self {
        Self::cstr_with(CstrParams::default(), 0.01, CSTR_SUBSTEPS)
    }

    pub fn cstr_with(params: CstrParams, sample_time: f64, substeps: usize) -> Self {
        Self {
            name: "cstr".to_string(),
            dynamics: Dynamics::Cstr(params),
            // C_A in [0, 6] kmol/m^3, T in [280, 420] K
            state_box: BoxSet::new(vec![0.0, 2.8], vec![6.0, 4.2]).unwrap(),
            // C_A0 in [0.5, 7.5] kmol/m^3, Q in [-5e5, 5e5] kJ/h
            input_box: BoxSet::new(vec![0.5, -5.0], vec![7.5, 5.0]).unwrap(),
            sample_time: Some(sample_time),
            substeps: substeps.max(1),
            x_offset: vec![0.0; 2],
            u_offset: vec![0.0; 2],
        }
    }

    pub fn with_boxes(mut self, state_box: BoxSet, input_box: BoxSet) -> Result<Self> {
        check_dim("state box", self.state_dim(), state_box.dim())?;
        check_dim("input box", self.input_dim(), input_box.dim())?;
        self.state_box = state_box;
        self.input_box = input_box;
        Ok(self)
    }

    pub fn with_substeps(mut self, substeps: usize) -> Self {
        self.substeps = substeps.max(1);
        self
    }

    pub fn state_dim(&self) -> usize {
        self.state_box.dim()
    }

    pub fn input_dim(&self) -> usize {
        self.input_box.dim()
    }

    pub fn state_box(&self) -> &BoxSet {
        &self.state_box
    }

    pub fn input_box(&self) -> &BoxSet {
        &self.input_box
    }

    pub fn sample_time(&self) -> Option<f64> {
        self.sample_time
    }

    pub fn dynamics(&self) -> &Dynamics {
        &self.dynamics
    }

    /// Offset between these coordinates and the original plant coordinates.
    pub fn state_offset(&self) -> &[f64] {
        &self.x_offset
    }

    pub fn input_offset(&self) -> &[f64] {
        &self.u_offset
    }

    /// One step of the dynamics writing into `out`; no checks, no allocation.
    pub fn step_into(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        match &self.dynamics {
            Dynamics::Linear { a, b } => {
                let n = a.nrows();
                for i in 0..n {
                    let mut acc = 0.0;
                    for j in 0..n {
                        acc += a[(i, j)] * (x[j] + self.x_offset[j]);
                    }
                    for j in 0..b.ncols() {
                        acc += b[(i, j)] * (u[j] + self.u_offset[j]);
                    }
                    out[i] = acc - self.x_offset[i];
                }
            }
            Dynamics::Cstr(p) => {
                let xo = [x[0] + self.x_offset[0], x[1] + self.x_offset[1]];
                let uo = [u[0] + self.u_offset[0], u[1] + self.u_offset[1]];
                let next = p.rk4(xo, uo, self.sample_time.unwrap_or(0.01), self.substeps);
                out[0] = next[0] - self.x_offset[0];
                out[1] = next[1] - self.x_offset[1];
            }
        }
    }

    pub fn step(&self, x: &Vector, u: &Vector) -> Result<Vector> {
        check_dim("state", self.state_dim(), x.len())?;
        check_dim("input", self.input_dim(), u.len())?;
        let mut out = Vector::zeros(self.state_dim());
        self.step_into(x.as_slice(), u.as_slice(), out.as_mut_slice());
        if out.iter().all(|v| v.is_finite()) {
            Ok(out)
        } else {
            Err(Error::NumericFailure(format!(
                "non-finite successor state from x={:?}, u={:?}",
                x.as_slice(),
                u.as_slice()
            )))
        }
    }

    pub fn in_state_set(&self, x: &Vector) -> bool {
        self.state_box.contains(x.as_slice(), SET_TOL)
    }

    pub fn in_input_set(&self, u: &Vector) -> bool {
        self.input_box.contains(u.as_slice(), SET_TOL)
    }

    /// Equivalent model in deviation coordinates around `ss`.
    pub fn shift_to_origin(&self, ss: &SteadyState) -> Result<Self> {
        check_dim("steady state", self.state_dim(), ss.x_s.len())?;
        check_dim("steady input", self.input_dim(), ss.u_s.len())?;
        let mut out = self.clone();
        out.state_box = self.state_box.shifted(ss.x_s.as_slice());
        out.input_box = self.input_box.shifted(ss.u_s.as_slice());
        for (o, s) in out.x_offset.iter_mut().zip(ss.x_s.iter()) {
            *o += s;
        }
        for (o, s) in out.u_offset.iter_mut().zip(ss.u_s.iter()) {
            *o += s;
        }
        Ok(out)
    }

    /// Map a state given in original plant coordinates into this model's coordinates.
    pub fn from_plant_state(&self, x: &Vector) -> Vector {
        Vector::from_iterator(x.len(), x.iter().zip(&self.x_offset).map(|(v, o)| v - o))
    }

    pub fn to_plant_state(&self, x: &Vector) -> Vector {
        Vector::from_iterator(x.len(), x.iter().zip(&self.x_offset).map(|(v, o)| v + o))
    }

    pub fn to_plant_input(&self, u: &Vector) -> Vector {
        Vector::from_iterator(u.len(), u.iter().zip(&self.u_offset).map(|(v, o)| v + o))
    }

    /// One step plus the exact Jacobians of the discrete map; `a` is `n x n`,
    /// `b` is `n x m`.
    pub fn step_with_jacobians(&self, x: &[f64], u: &[f64], out: &mut [f64], a: &mut Matrix, b: &mut Matrix) {
        match &self.dynamics {
            Dynamics::Linear { a: am, b: bm } => {
                self.step_into(x, u, out);
                a.copy_from(am);
                b.copy_from(bm);
            }
            Dynamics::Cstr(p) => {
                let xo = [x[0] + self.x_offset[0], x[1] + self.x_offset[1]];
                let uo = [u[0] + self.u_offset[0], u[1] + self.u_offset[1]];
                let (next, s) = p.rk4_sens(xo, uo, self.sample_time.unwrap_or(0.01), self.substeps);
                out[0] = next[0] - self.x_offset[0];
                out[1] = next[1] - self.x_offset[1];
                for i in 0..2 {
                    for j in 0..2 {
                        a[(i, j)] = s[i][j];
                        b[(i, j)] = s[i][j + 2];
                    }
                }
            }
        }
    }

    /// Jacobians `(df/dx, df/du)` by central differences.
    pub fn jacobians(&self, x: &[f64], u: &[f64], rel_step: f64) -> (Matrix, Matrix) {
        let n = self.state_dim();
        let m = self.input_dim();
        let mut a = Matrix::zeros(n, n);
        let mut b = Matrix::zeros(n, m);
        let mut xp = x.to_vec();
        let mut up = u.to_vec();
        let mut fp = vec![0.0; n];
        let mut fm = vec![0.0; n];
        for j in 0..n {
            let h = rel_step * x[j].abs().max(1.0);
            xp[j] = x[j] + h;
            self.step_into(&xp, u, &mut fp);
            xp[j] = x[j] - h;
            self.step_into(&xp, u, &mut fm);
            xp[j] = x[j];
            for i in 0..n {
                a[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
        for j in 0..m {
            let h = rel_step * u[j].abs().max(1.0);
            up[j] = u[j] + h;
            self.step_into(x, &up, &mut fp);
            up[j] = u[j] - h;
            self.step_into(x, &up, &mut fm);
            up[j] = u[j];
            for i in 0..n {
                b[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
        (a, b)
    }
}

/// Optimal steady state, in the coordinates of the model it was computed for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteadyState {
    pub x_s: Vector,
    pub u_s: Vector,
    /// Economic stage cost at `(x_s, u_s)`.
    pub value: f64,
}

impl SteadyState {
    pub fn origin(n: usize, m: usize, value: f64) -> Self {
        Self {
            x_s: Vector::zeros(n),
            u_s: Vector::zeros(m),
            value,
        }
    }
}

const FIXED_POINT_TOL: f64 = 1e-6;

/// Solve `f(x, u) = x` for `u` with Gauss-Newton from `guess`.
fn fixed_point_input(model: &SystemModel, x: &[f64], guess: &[f64]) -> Option<(Vector, f64)> {
    let n = model.state_dim();
    let mut u = Vector::from_column_slice(guess);
    let mut fx = vec![0.0; n];
    let residual = |u: &Vector, fx: &mut Vec<f64>| -> Vector {
        model.step_into(x, u.as_slice(), fx);
        Vector::from_iterator(n, fx.iter().zip(x).map(|(a, b)| a - b))
    };
    let mut r = residual(&u, &mut fx);
    for _ in 0..40 {
        let norm = r.norm();
        if !norm.is_finite() {
            return None;
        }
        if norm < 1e-13 {
            break;
        }
        let (_, b) = model.jacobians(x, u.as_slice(), 1e-7);
        let step = b.svd(true, true).solve(&r, 1e-12).ok()?;
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let trial = &u - &step * t;
            let rt = residual(&trial, &mut fx);
            if rt.norm() < norm {
                u = trial;
                r = rt;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    let res = r.norm();
    res.is_finite().then_some((u, res))
}

fn grid_points_per_dim(n: usize) -> usize {
    match n {
        0 => 1,
        1 | 2 => 101,
        _ => ((10201.0f64).powf(1.0 / n as f64).floor() as usize).max(3),
    }
}

/// Minimize the economic cost over fixed points of the dynamics inside `X x U`.
///
/// Dense grid seeding over the state box, a fixed-point solve for the input at
/// each grid state, then a pattern-search refinement in state space followed by
/// a Newton polish of the fixed point. Ties go to the lexicographically smallest
/// state.
pub fn find_steady_state(model: &SystemModel, econ: &EconomicCost) -> Result<SteadyState> {
    let n = model.state_dim();
    let xbox = model.state_box();
    let ubox = model.input_box();
    let per_dim = grid_points_per_dim(n);
    let total = per_dim.pow(n as u32);
    let u_seed = ubox.center();

    let reduced = |x: &[f64], guess: &[f64]| -> Option<(Vector, f64)> {
        if !xbox.contains(x, 0.0) {
            return None;
        }
        let (u, res) = fixed_point_input(model, x, guess)?;
        if res >= FIXED_POINT_TOL || !ubox.contains(u.as_slice(), SET_TOL) {
            return None;
        }
        let xv = Vector::from_column_slice(x);
        let value = econ.evaluate(&xv, &u);
        value.is_finite().then_some((u, value))
    };

    let mut best: Option<(Vec<f64>, Vector, f64)> = None;
    let mut x = vec![0.0; n];
    for idx in 0..total {
        // coordinate 0 is the slowest-varying index, so visiting order is lexicographic
        let mut rem = idx;
        for j in (0..n).rev() {
            let k = rem % per_dim;
            rem /= per_dim;
            let t = if per_dim > 1 { k as f64 / (per_dim - 1) as f64 } else { 0.5 };
            x[j] = xbox.lower[j] + t * (xbox.upper[j] - xbox.lower[j]);
        }
        if let Some((u, value)) = reduced(&x, u_seed.as_slice()) {
            let better = match &best {
                None => true,
                Some((_, _, bv)) => value < *bv - 1e-12 * bv.abs().max(1.0),
            };
            if better {
                best = Some((x.clone(), u, value));
            }
        }
    }
    let (mut xb, mut ub, mut vb) = best.ok_or_else(|| {
        Error::InfeasibleModel("no fixed point of the dynamics inside X x U".into())
    })?;

    // pattern search in state space
    let mut step: Vec<f64> = (0..n)
        .map(|j| (xbox.upper[j] - xbox.lower[j]) / (per_dim.max(2) - 1) as f64)
        .collect();
    let min_step: Vec<f64> = (0..n)
        .map(|j| 1e-12 * (xbox.upper[j] - xbox.lower[j]).max(1.0))
        .collect();
    while step.iter().zip(&min_step).any(|(s, m)| s > m) {
        let mut improved = false;
        for j in 0..n {
            for dir in [-1.0, 1.0] {
                let mut trial = xb.clone();
                trial[j] += dir * step[j];
                if let Some((u, v)) = reduced(&trial, ub.as_slice()) {
                    if v < vb - 1e-15 * vb.abs().max(1.0) {
                        xb = trial;
                        ub = u;
                        vb = v;
                        improved = true;
                    }
                }
            }
        }
        if !improved {
            for s in step.iter_mut() {
                *s *= 0.5;
            }
        }
    }

    let x_s = Vector::from_column_slice(&xb);
    let (u_s, res) = fixed_point_input(model, &xb, ub.as_slice())
        .ok_or_else(|| Error::NumericFailure("fixed-point polish diverged".into()))?;
    if res > 1e-8 {
        return Err(Error::NumericFailure(format!("fixed-point residual {res:e} after polish")));
    }
    let value = econ.evaluate(&x_s, &u_s);
    Ok(SteadyState { x_s, u_s, value })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn v(xs: &[f64]) -> Vector {
        Vector::from_column_slice(xs)
    }

    #[test]
    fn scalar_step_formula() {
        let m = SystemModel::scalar();
        assert_eq!(m.step(&v(&[0.0]), &v(&[0.0])).unwrap()[0], 0.0);
        let next = m.step(&v(&[1.0]), &v(&[0.5])).unwrap()[0];
        assert!((next - 1.4).abs() < 1e-15);
    }

    #[test]
    fn step_rejects_wrong_dimensions() {
        let m = SystemModel::cstr();
        let err = m.step(&v(&[1.0]), &v(&[1.0, 0.0])).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
    }

    #[test]
    fn step_reports_non_finite_output() {
        let m = SystemModel::cstr();
        // negative temperature blows the Arrhenius term up
        let err = m.step(&v(&[1.0, -1e-3]), &v(&[1.0, 0.0])).unwrap_err();
        assert!(matches!(err, Error::NumericFailure(_)));
    }

    #[test]
    fn set_membership_is_closed_with_tolerance() {
        let m = SystemModel::scalar();
        assert!(m.in_state_set(&v(&[0.0])));
        assert!(m.in_state_set(&v(&[2.0])));
        assert!(!m.in_state_set(&v(&[2.001])));
        assert!(m.in_input_set(&v(&[-1.0])));
        assert!(!m.in_input_set(&v(&[-1.001])));
    }

    #[test]
    fn scalar_steady_state_is_origin() {
        let m = SystemModel::scalar();
        let ss = find_steady_state(&m, &EconomicCost::bilinear()).unwrap();
        assert_eq!(ss.x_s[0], 0.0);
        assert!(ss.u_s[0].abs() < 1e-12);
        assert!(ss.value.abs() < 1e-12);
    }

    #[test]
    fn shrunken_state_box_has_no_fixed_point() {
        let m = SystemModel::scalar()
            .with_boxes(
                BoxSet::new(vec![15.0], vec![20.0]).unwrap(),
                BoxSet::new(vec![-1.0], vec![1.0]).unwrap(),
            )
            .unwrap();
        let err = find_steady_state(&m, &EconomicCost::bilinear()).unwrap_err();
        assert!(matches!(err, Error::InfeasibleModel(_)));
    }

    #[test]
    fn cstr_steady_state_is_interior_fixed_point() {
        let m = SystemModel::cstr();
        let econ = EconomicCost::cstr_default();
        let ss = find_steady_state(&m, &econ).unwrap();
        let next = m.step(&ss.x_s, &ss.u_s).unwrap();
        assert!((next - &ss.x_s).norm() <= 1e-8);
        let xb = m.state_box();
        for j in 0..2 {
            assert!(ss.x_s[j] > xb.lower[j] + 0.05 && ss.x_s[j] < xb.upper[j] - 0.05);
        }
        assert!(m.in_input_set(&ss.u_s));
        // L_e at the optimum is no worse than at any grid-feasible fixed point
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let x = xb.sample(&mut rng);
            if let Some((u, res)) = fixed_point_input(&m, x.as_slice(), m.input_box().center().as_slice()) {
                if res < 1e-9 && m.in_input_set(&u) {
                    assert!(econ.evaluate(&x, &u) >= ss.value - 1e-9);
                }
            }
        }
    }

    #[test]
    fn shifting_box_is_interval_arithmetic() {
        let b = BoxSet::new(vec![1.0], vec![3.0]).unwrap().shifted(&[2.0]);
        assert_eq!(b.lower, vec![-1.0]);
        assert_eq!(b.upper, vec![1.0]);
    }

    #[test]
    fn shifting_by_origin_is_identity() {
        let m = SystemModel::scalar();
        let shifted = m.shift_to_origin(&SteadyState::origin(1, 1, 0.0)).unwrap();
        assert_eq!(shifted, m);
    }

    #[test]
    fn shifted_cstr_has_fixed_point_at_origin() {
        let m = SystemModel::cstr();
        let ss = find_steady_state(&m, &EconomicCost::cstr_default()).unwrap();
        let sm = m.shift_to_origin(&ss).unwrap();
        let next = sm.step(&Vector::zeros(2), &Vector::zeros(2)).unwrap();
        assert!(next.norm() <= 1e-8);
    }

    #[test]
    fn rk4_substep_halving_is_consistent() {
        let coarse = SystemModel::cstr();
        let fine = SystemModel::cstr().with_substeps(2 * CSTR_SUBSTEPS);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let x = coarse.state_box().sample(&mut rng);
            let u = coarse.input_box().sample(&mut rng);
            let a = coarse.step(&x, &u).unwrap();
            let b = fine.step(&x, &u).unwrap();
            assert!((&a - &b).norm() / b.norm() < 1e-6, "x={x:?} u={u:?}");
        }
    }

    #[test]
    fn exact_jacobians_match_central_differences() {
        let m = SystemModel::cstr();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut out = vec![0.0; 2];
        let mut a = Matrix::zeros(2, 2);
        let mut b = Matrix::zeros(2, 2);
        for _ in 0..50 {
            let x = m.state_box().sample(&mut rng);
            let u = m.input_box().sample(&mut rng);
            m.step_with_jacobians(x.as_slice(), u.as_slice(), &mut out, &mut a, &mut b);
            let (fa, fb) = m.jacobians(x.as_slice(), u.as_slice(), 1e-6);
            let plain = m.step(&x, &u).unwrap();
            assert_eq!(out.as_slice(), plain.as_slice());
            let scale = 1.0 + fa.abs().max().max(fb.abs().max());
            assert!((&a - &fa).abs().max() < 1e-5 * scale, "{a} vs {fa}");
            assert!((&b - &fb).abs().max() < 1e-5 * scale, "{b} vs {fb}");
        }
    }

    #[test]
    fn step_is_deterministic() {
        let m = SystemModel::cstr();
        let x = v(&[2.0, 3.8]);
        let u = v(&[4.0, 0.3]);
        let a = m.step(&x, &u).unwrap();
        let b = m.step(&x, &u).unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
    }
}
