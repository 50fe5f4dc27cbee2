//! Assembly of a complete control problem: steady state, deviation
//! coordinates, terminal ingredients and the auxiliary cost.

use serde::{Deserialize, Serialize};

use crate::costs::{AuxiliaryCost, EconomicCost};
use crate::error::{Error, Result};
use crate::model::{find_steady_state, SteadyState, SystemModel};
use crate::terminal::{design_lqr, estimate_alpha, verify_assumption1, TerminalIngredients, VerificationReport, VERIFY_SAMPLES};
use crate::{Matrix, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlantKind {
    Scalar,
    Cstr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemConfig {
    pub plant: PlantKind,
    pub d: f64,
    pub b: f64,
    pub lambda: f64,
    /// `psi = psi_fraction * alpha`.
    pub psi_fraction: f64,
    /// Diagonal LQR state weight.
    pub q_weight: Vec<f64>,
    /// Diagonal LQR input weight.
    pub r_weight: Vec<f64>,
    /// `gamma0` weights as a fraction of the LQR weights.
    pub gamma_fraction: f64,
}

impl ProblemConfig {
    pub fn scalar() -> Self {
        Self {
            plant: PlantKind::Scalar,
            d: 0.1,
            b: 1.0,
            lambda: 1.0,
            psi_fraction: 0.01,
            q_weight: vec![1.0],
            r_weight: vec![1.0],
            gamma_fraction: 0.5,
        }
    }

    pub fn cstr() -> Self {
        Self {
            plant: PlantKind::Cstr,
            d: 1.0,
            b: 10.0,
            lambda: 1.5,
            psi_fraction: 0.01,
            q_weight: vec![1.0, 1.0],
            r_weight: vec![0.1, 0.1],
            gamma_fraction: 0.5,
        }
    }

    pub fn for_plant(plant: PlantKind) -> Self {
        match plant {
            PlantKind::Scalar => Self::scalar(),
            PlantKind::Cstr => Self::cstr(),
        }
    }
}

/// A plant in deviation coordinates together with all offline ingredients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlProblem {
    pub config: ProblemConfig,
    /// Plant in its original coordinates.
    pub plant: SystemModel,
    pub steady: SteadyState,
    /// Plant in deviation coordinates (steady state at the origin).
    pub model: SystemModel,
    pub econ: EconomicCost,
    pub aux: AuxiliaryCost,
    pub verification: VerificationReport,
}

impl ControlProblem {
    pub fn build(config: ProblemConfig) -> Result<Self> {
        let (plant, plant_econ) = match config.plant {
            PlantKind::Scalar => (SystemModel::scalar(), EconomicCost::bilinear()),
            PlantKind::Cstr => (SystemModel::cstr(), EconomicCost::cstr_default()),
        };
        if config.q_weight.len() != plant.state_dim() || config.r_weight.len() != plant.input_dim() {
            return Err(Error::DimensionMismatch {
                what: "LQR weight diagonal",
                expected: plant.state_dim() + plant.input_dim(),
                got: config.q_weight.len() + config.r_weight.len(),
            });
        }
        if !(config.psi_fraction > 0.0 && config.psi_fraction <= 1.0) {
            return Err(Error::Contract(format!(
                "psi fraction must lie in (0, 1], got {}",
                config.psi_fraction
            )));
        }
        if !(config.gamma_fraction > 0.0 && config.gamma_fraction.is_finite()) {
            return Err(Error::Contract("gamma fraction must be positive".into()));
        }
        let steady = find_steady_state(&plant, &plant_econ)?;
        let model = plant.shift_to_origin(&steady)?;
        let econ = plant_econ.shifted(&steady);
        let q = Matrix::from_diagonal(&Vector::from_vec(config.q_weight.clone()));
        let r = Matrix::from_diagonal(&Vector::from_vec(config.r_weight.clone()));
        let (p, k) = design_lqr(&model, &q, &r)?;
        let gamma_q = &q * config.gamma_fraction;
        let gamma_r = &r * config.gamma_fraction;
        let alpha = estimate_alpha(&model, &p, &k, &gamma_q, &gamma_r)?;
        let ti = TerminalIngredients::new(
            p,
            k,
            alpha,
            alpha * config.psi_fraction,
            gamma_q,
            gamma_r,
            model.input_box().clone(),
        )?;
        let verification = verify_assumption1(&model, &ti, VERIFY_SAMPLES);
        let aux = AuxiliaryCost::new(ti, config.d, config.b, config.lambda)?;
        Ok(Self {
            config,
            plant,
            steady,
            model,
            econ,
            aux,
            verification,
        })
    }

    pub fn scalar() -> Result<Self> {
        Self::build(ProblemConfig::scalar())
    }

    pub fn cstr() -> Result<Self> {
        Self::build(ProblemConfig::cstr())
    }

    /// Same problem with a different outside slope `b`.
    pub fn with_b(&self, b: f64) -> Result<Self> {
        let mut out = self.clone();
        out.aux = self.aux.with_b(b)?;
        out.config.b = b;
        Ok(out)
    }

    /// `L_e` at the steady state.
    pub fn steady_cost(&self) -> f64 {
        let n = self.model.state_dim();
        let m = self.model.input_dim();
        self.econ.evaluate(&Vector::zeros(n), &Vector::zeros(m))
    }
}
