//! Terminal ingredients: quadratic Lyapunov function, local linear feedback,
//! terminal level `alpha`, dual-mode level `psi`, and their sampled verification.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::model::{BoxSet, SystemModel, SET_TOL};
use crate::{Matrix, Vector};

/// Seed of every terminal-set sampler.
pub const SAMPLER_SEED: u64 = 0xC0FFEE;
/// Samples per verification pass inside `estimate_alpha`.
pub const VERIFY_SAMPLES: usize = 10_000;
const ALPHA_LEVELS: usize = 50;
const ALPHA_FLOOR: f64 = 1e-6;
const DECREASE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerminalIngredients {
    pub p: Matrix,
    pub k_gain: Matrix,
    pub alpha: f64,
    pub psi: f64,
    pub gamma_q: Matrix,
    pub gamma_r: Matrix,
    input_box: BoxSet,
}

impl TerminalIngredients {
    pub fn new(
        p: Matrix,
        k_gain: Matrix,
        alpha: f64,
        psi: f64,
        gamma_q: Matrix,
        gamma_r: Matrix,
        input_box: BoxSet,
    ) -> Result<Self> {
        let n = p.nrows();
        check_dim("P columns", n, p.ncols())?;
        check_dim("K columns", n, k_gain.ncols())?;
        check_dim("K rows", input_box.dim(), k_gain.nrows())?;
        check_dim("gamma_Q", n, gamma_q.nrows())?;
        check_dim("gamma_R", input_box.dim(), gamma_r.nrows())?;
        if (&p - p.transpose()).abs().max() > 1e-9 * p.abs().max().max(1.0) {
            return Err(Error::Contract("P must be symmetric".into()));
        }
        if p.clone().symmetric_eigenvalues().min() <= 0.0 {
            return Err(Error::Contract("P must be positive definite".into()));
        }
        if !(alpha > 0.0 && psi > 0.0 && psi <= alpha) {
            return Err(Error::Contract(format!(
                "levels must satisfy 0 < psi <= alpha, got psi={psi}, alpha={alpha}"
            )));
        }
        Ok(Self {
            p,
            k_gain,
            alpha,
            psi,
            gamma_q,
            gamma_r,
            input_box,
        })
    }

    pub fn with_levels(&self, alpha: f64, psi: f64) -> Result<Self> {
        Self::new(
            self.p.clone(),
            self.k_gain.clone(),
            alpha,
            psi,
            self.gamma_q.clone(),
            self.gamma_r.clone(),
            self.input_box.clone(),
        )
    }

    pub fn state_dim(&self) -> usize {
        self.p.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.k_gain.nrows()
    }

    fn quad(m: &Matrix, x: &[f64]) -> f64 {
        let n = x.len();
        let mut acc = 0.0;
        for i in 0..n {
            let mut row = 0.0;
            for j in 0..n {
                row += m[(i, j)] * x[j];
            }
            acc += x[i] * row;
        }
        acc
    }

    pub fn lyapunov_slice(&self, x: &[f64]) -> f64 {
        Self::quad(&self.p, x)
    }

    /// `V(x) = x' P x`
    pub fn lyapunov(&self, x: &Vector) -> f64 {
        self.lyapunov_slice(x.as_slice())
    }

    pub fn gamma0_slices(&self, x: &[f64], u: &[f64]) -> f64 {
        Self::quad(&self.gamma_q, x) + Self::quad(&self.gamma_r, u)
    }

    /// `gamma0(x, u) = x' gamma_Q x + u' gamma_R u`
    pub fn gamma0(&self, x: &Vector, u: &Vector) -> f64 {
        self.gamma0_slices(x.as_slice(), u.as_slice())
    }

    /// Unclamped `K_gain x`.
    pub fn raw_control(&self, x: &Vector) -> Vector {
        &self.k_gain * x
    }

    pub fn terminal_control_into(&self, x: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = (0..x.len()).map(|j| self.k_gain[(i, j)] * x[j]).sum();
        }
        self.input_box.clamp(out);
    }

    /// `K(x)`, clamped componentwise into `U`.
    pub fn terminal_control(&self, x: &Vector) -> Vector {
        let mut u = Vector::zeros(self.input_dim());
        self.terminal_control_into(x.as_slice(), u.as_mut_slice());
        u
    }

    pub fn in_terminal_set_slice(&self, x: &[f64]) -> bool {
        self.lyapunov_slice(x) <= self.alpha + SET_TOL
    }

    pub fn in_terminal_set(&self, x: &Vector) -> bool {
        self.in_terminal_set_slice(x.as_slice())
    }

    pub fn in_psi_set(&self, x: &Vector) -> bool {
        self.lyapunov(x) <= self.psi + SET_TOL
    }

    /// Eigenvalue bounds `(lambda_min(P), lambda_max(P))`; `V` is sandwiched between
    /// `lambda_min |x|^2` and `lambda_max |x|^2`.
    pub fn eigen_bounds(&self) -> (f64, f64) {
        let e = self.p.clone().symmetric_eigenvalues();
        (e.min(), e.max())
    }

    /// Smallest `x' gamma_Q x / x' P x` over nonzero `x`.
    pub fn min_gamma_ratio(&self) -> f64 {
        let l = self.p.clone().cholesky().expect("P is positive definite").l();
        let linv = l.try_inverse().expect("Cholesky factor is invertible");
        let m = &linv * &self.gamma_q * linv.transpose();
        let m = 0.5 * (&m + m.transpose());
        m.symmetric_eigenvalues().min()
    }

    /// Uniform sample in `{ x : V(x) <= level }`.
    pub fn sample_sublevel<R: Rng + ?Sized>(&self, level: f64, rng: &mut R) -> Vector {
        let n = self.state_dim();
        let l = self.p.clone().cholesky().expect("P is positive definite").l();
        let mut z = Vector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let norm = z.norm().max(1e-300);
        let radius = rng.random::<f64>().powf(1.0 / n as f64);
        z *= radius / norm;
        let lt = l.transpose();
        let x = lt.solve_upper_triangular(&z).expect("triangular solve");
        x * level.sqrt()
    }
}

/// Infinite-horizon discrete LQR around the origin of `model`.
///
/// Returns `(P, K_gain)` with `u = K_gain x`.
pub fn design_lqr(model: &SystemModel, q_w: &Matrix, r_w: &Matrix) -> Result<(Matrix, Matrix)> {
    let n = model.state_dim();
    let m = model.input_dim();
    check_dim("Q weight", n, q_w.nrows())?;
    check_dim("R weight", m, r_w.nrows())?;
    let (a, b) = model.jacobians(&vec![0.0; n], &vec![0.0; m], 1e-6);
    riccati(&a, &b, q_w, r_w)
}

pub(crate) fn riccati(a: &Matrix, b: &Matrix, q_w: &Matrix, r_w: &Matrix) -> Result<(Matrix, Matrix)> {
    let at = a.transpose();
    let bt = b.transpose();
    let mut p = q_w.clone();
    let mut converged = false;
    for _ in 0..200_000 {
        let s = r_w + &bt * &p * b;
        let s_inv = s
            .try_inverse()
            .ok_or_else(|| Error::DesignFailure("R + B'PB is singular".into()))?;
        let apb = &at * &p * b;
        let mut next = q_w + &at * &p * a - &apb * &s_inv * apb.transpose();
        next = 0.5 * (&next + next.transpose());
        if !next.iter().all(|v| v.is_finite()) || next.abs().max() > 1e15 {
            return Err(Error::DesignFailure(
                "Riccati recursion diverged: linearization is not stabilizable".into(),
            ));
        }
        let delta = (&next - &p).abs().max();
        p = next;
        if delta < 1e-10 {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::DesignFailure("Riccati recursion did not converge".into()));
    }
    let s = r_w + &bt * &p * b;
    let s_inv = s
        .try_inverse()
        .ok_or_else(|| Error::DesignFailure("R + B'PB is singular".into()))?;
    let k = -(s_inv * &bt * &p * a);
    let closed = a + b * &k;
    let radius = closed
        .complex_eigenvalues()
        .iter()
        .map(|c| c.norm())
        .fold(0.0, f64::max);
    if radius >= 1.0 {
        return Err(Error::DesignFailure(format!(
            "closed-loop spectral radius {radius} is not below one"
        )));
    }
    Ok((p, k))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub pass: bool,
    /// `max(0, max_x V(f(x, Kx)) - V(x) + gamma0(x, Kx))` over admissible samples.
    pub max_decrease_violation: f64,
    pub n_admissibility_failures: usize,
    pub alpha: f64,
    pub psi: f64,
    pub n_samples: usize,
}

fn verify_level(model: &SystemModel, ti: &TerminalIngredients, level: f64, n_samples: usize) -> (f64, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(SAMPLER_SEED);
    let mut worst = 0.0f64;
    let mut failures = 0;
    for _ in 0..n_samples {
        let x = ti.sample_sublevel(level, &mut rng);
        let u = ti.raw_control(&x);
        if !model.in_state_set(&x) || !model.in_input_set(&u) {
            failures += 1;
            continue;
        }
        match model.step(&x, &u) {
            Ok(next) => {
                let excess = ti.lyapunov(&next) - ti.lyapunov(&x) + ti.gamma0(&x, &u);
                worst = worst.max(excess);
            }
            Err(_) => failures += 1,
        }
    }
    (worst, failures)
}

/// Sampled check of the decrease condition `V(f(x,K(x))) - V(x) <= -gamma0(x,K(x))`
/// and of admissibility (`x in X`, `K x in U`) on `X_f`.
pub fn verify_assumption1(model: &SystemModel, ti: &TerminalIngredients, n_samples: usize) -> VerificationReport {
    let (worst, failures) = verify_level(model, ti, ti.alpha, n_samples);
    VerificationReport {
        pass: failures == 0 && worst <= DECREASE_TOL,
        max_decrease_violation: worst,
        n_admissibility_failures: failures,
        alpha: ti.alpha,
        psi: ti.psi,
        n_samples,
    }
}

/// Number of sampled states in `X_psi` whose successor under `K` leaves `X_psi`.
pub fn psi_invariance_failures(model: &SystemModel, ti: &TerminalIngredients, n_samples: usize) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(SAMPLER_SEED ^ 0x5eed);
    (0..n_samples)
        .filter(|_| {
            let x = ti.sample_sublevel(ti.psi, &mut rng);
            let u = ti.terminal_control(&x);
            match model.step(&x, &u) {
                Ok(next) => !ti.in_psi_set(&next),
                Err(_) => true,
            }
        })
        .count()
}

/// Largest level on a 50-point geometric grid from `1e-6` to `max_X V` whose
/// sampled verification passes, located by bisection over the grid.
pub fn estimate_alpha(
    model: &SystemModel,
    p: &Matrix,
    k_gain: &Matrix,
    gamma_q: &Matrix,
    gamma_r: &Matrix,
) -> Result<f64> {
    let probe = TerminalIngredients::new(
        p.clone(),
        k_gain.clone(),
        1.0,
        1.0,
        gamma_q.clone(),
        gamma_r.clone(),
        model.input_box().clone(),
    )?;
    let v_max = model
        .state_box()
        .vertices()
        .iter()
        .map(|x| probe.lyapunov(x))
        .fold(0.0, f64::max);
    if v_max <= ALPHA_FLOOR {
        return Err(Error::DesignFailure("state box is too small for a terminal set".into()));
    }
    let ratio = (v_max / ALPHA_FLOOR).powf(1.0 / (ALPHA_LEVELS - 1) as f64);
    let levels: Vec<f64> = (0..ALPHA_LEVELS)
        .map(|i| if i + 1 == ALPHA_LEVELS { v_max } else { ALPHA_FLOOR * ratio.powi(i as i32) })
        .collect();
    let passes = |level: f64| {
        let (worst, failures) = verify_level(model, &probe, level, VERIFY_SAMPLES);
        failures == 0 && worst <= DECREASE_TOL
    };
    if !passes(levels[0]) {
        return Err(Error::DesignFailure(
            "decrease condition fails at every candidate level".into(),
        ));
    }
    let last = ALPHA_LEVELS - 1;
    if passes(levels[last]) {
        return Ok(levels[last]);
    }
    let (mut lo, mut hi) = (0, last);
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if passes(levels[mid]) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(levels[lo])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_ti(alpha: f64, psi: f64) -> (SystemModel, TerminalIngredients) {
        let model = SystemModel::scalar();
        let q = Matrix::from_element(1, 1, 1.0);
        let (p, k) = design_lqr(&model, &q, &q).unwrap();
        let ti = TerminalIngredients::new(p, k, alpha, psi, &q * 0.5, &q * 0.5, model.input_box().clone()).unwrap();
        (model, ti)
    }

    #[test]
    fn scalar_lqr_matches_riccati_fixed_point() {
        // oracle: iterate P <- 1 + 0.81 P - 0.81 P^2 / (1 + P) to 1e-14
        let mut p_ref = 1.0f64;
        for _ in 0..10_000 {
            let next = 1.0 + 0.81 * p_ref - 0.81 * p_ref * p_ref / (1.0 + p_ref);
            if (next - p_ref).abs() < 1e-14 {
                break;
            }
            p_ref = next;
        }
        let k_ref = -0.9 * p_ref / (1.0 + p_ref);
        assert!((p_ref - 1.483_899_902_678_645).abs() < 1e-12);
        let (_, ti) = scalar_ti(1.0, 0.01);
        assert!((ti.p[(0, 0)] - p_ref).abs() < 1e-8);
        assert!((ti.k_gain[(0, 0)] - k_ref).abs() < 1e-8);
    }

    #[test]
    fn zero_dynamics_gives_zero_gain() {
        let m = SystemModel::linear(
            "zero",
            Matrix::zeros(1, 1),
            Matrix::from_element(1, 1, 1.0),
            BoxSet::new(vec![-1.0], vec![1.0]).unwrap(),
            BoxSet::new(vec![-1.0], vec![1.0]).unwrap(),
        )
        .unwrap();
        let one = Matrix::from_element(1, 1, 1.0);
        let (p, k) = design_lqr(&m, &one, &one).unwrap();
        assert!((p[(0, 0)] - 1.0).abs() < 1e-12);
        assert!(k[(0, 0)].abs() < 1e-12);
    }

    #[test]
    fn uncontrollable_unstable_pair_fails() {
        let m = SystemModel::linear(
            "bad",
            Matrix::from_element(1, 1, 2.0),
            Matrix::zeros(1, 1),
            BoxSet::new(vec![-1.0], vec![1.0]).unwrap(),
            BoxSet::new(vec![-1.0], vec![1.0]).unwrap(),
        )
        .unwrap();
        let one = Matrix::from_element(1, 1, 1.0);
        assert!(matches!(design_lqr(&m, &one, &one), Err(Error::DesignFailure(_))));
    }

    #[test]
    fn small_level_verifies_and_inflated_level_fails_admissibility() {
        let (model, ti) = scalar_ti(0.5, 0.005);
        let report = verify_assumption1(&model, &ti, 10_000);
        assert!(report.pass, "{report:?}");
        assert_eq!(report.n_admissibility_failures, 0);
        let big = ti.with_levels(50.0, 0.5).unwrap();
        let report = verify_assumption1(&model, &big, 10_000);
        assert!(!report.pass);
        assert!(report.n_admissibility_failures > 0);
    }

    #[test]
    fn empty_verification_passes_vacuously() {
        let (model, ti) = scalar_ti(0.5, 0.005);
        let report = verify_assumption1(&model, &ti, 0);
        assert!(report.pass);
        assert_eq!(report.max_decrease_violation, 0.0);
    }

    #[test]
    fn report_serializes_with_expected_fields() {
        let (model, ti) = scalar_ti(0.5, 0.005);
        let json = serde_json::to_value(verify_assumption1(&model, &ti, 10)).unwrap();
        for key in ["pass", "max_decrease_violation", "n_admissibility_failures", "alpha", "psi"] {
            assert!(json.get(key).is_some(), "missing {key}");
        }
    }

    #[test]
    fn estimated_alpha_passes_verification() {
        let model = SystemModel::scalar();
        let q = Matrix::from_element(1, 1, 1.0);
        let (p, k) = design_lqr(&model, &q, &q).unwrap();
        let alpha = estimate_alpha(&model, &p, &k, &(&q * 0.5), &(&q * 0.5)).unwrap();
        assert!(alpha > 0.0);
        let ti = TerminalIngredients::new(p, k, alpha, alpha * 0.01, &q * 0.5, &q * 0.5, model.input_box().clone()).unwrap();
        assert!(verify_assumption1(&model, &ti, 10_000).pass);
    }

    #[test]
    fn impossible_decrease_is_a_design_failure() {
        let model = SystemModel::scalar();
        let q = Matrix::from_element(1, 1, 1.0);
        let (p, k) = design_lqr(&model, &q, &q).unwrap();
        let err = estimate_alpha(&model, &p, &k, &(&q * 5e5), &(&q * 5e5)).unwrap_err();
        assert!(matches!(err, Error::DesignFailure(_)));
    }

    #[test]
    fn exact_lqr_on_linear_plant_passes_up_to_admissible_level() {
        // gamma equal to the LQR weights turns the decrease condition into an equality
        let model = SystemModel::scalar();
        let q = Matrix::from_element(1, 1, 1.0);
        let (p, k) = design_lqr(&model, &q, &q).unwrap();
        let alpha = estimate_alpha(&model, &p, &k, &q, &q).unwrap();
        // K x stays in U up to |x| = 1 / |K|
        let admissible = p[(0, 0)] / (k[(0, 0)] * k[(0, 0)]);
        assert!(alpha <= admissible + 1e-9);
        assert!(alpha > admissible / 1.5);
    }

    #[test]
    fn evaluation_helpers_at_origin_and_boundary() {
        let (_, ti) = scalar_ti(0.5, 0.005);
        let zero = Vector::zeros(1);
        assert_eq!(ti.lyapunov(&zero), 0.0);
        assert_eq!(ti.terminal_control(&zero)[0], 0.0);
        assert!(ti.in_terminal_set(&zero) && ti.in_psi_set(&zero));
        let edge = Vector::from_element(1, (ti.alpha / ti.p[(0, 0)]).sqrt());
        assert!(ti.in_terminal_set(&edge));
        assert!(!ti.in_psi_set(&edge));
    }

    #[test]
    fn quadratic_bounds_hold_on_samples() {
        let (_, ti) = scalar_ti(0.5, 0.005);
        let (lo, hi) = ti.eigen_bounds();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let x = Vector::from_element(1, rng.random_range(-5.0..5.0));
            let v = ti.lyapunov(&x);
            let r2 = x.norm_squared();
            assert!(lo * r2 <= v + 1e-12 && v <= hi * r2 + 1e-12);
        }
    }

    #[test]
    fn rejects_psi_above_alpha() {
        let (_, ti) = scalar_ti(0.5, 0.005);
        assert!(ti.with_levels(0.5, 0.6).is_err());
    }
}
