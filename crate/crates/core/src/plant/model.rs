use super::{PlantError, Tolerances};
use crate::matjson;
use crate::numerics::{self, ensure_finite, Mat};
use serde::{Deserialize, Serialize};

/// Identical agent dynamics `x(k+1) = A x(k) + B u(k)`, `y(k) = C x(k)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawModel", into = "RawModel")]
pub struct AgentModel {
    a: Mat,
    b: Mat,
    c: Mat,
}

#[derive(Serialize, Deserialize)]
struct RawModel {
    #[serde(rename = "A", with = "matjson")]
    a: Mat,
    #[serde(rename = "B", with = "matjson")]
    b: Mat,
    #[serde(rename = "C", with = "matjson")]
    c: Mat,
}

impl TryFrom<RawModel> for AgentModel {
    type Error = PlantError;
    fn try_from(raw: RawModel) -> Result<Self, PlantError> {
        AgentModel::new(raw.a, raw.b, raw.c)
    }
}

impl From<AgentModel> for RawModel {
    fn from(m: AgentModel) -> Self {
        RawModel { a: m.a, b: m.b, c: m.c }
    }
}

impl AgentModel {
    /// Structural construction: dimensions and finiteness only.
    pub fn new(a: Mat, b: Mat, c: Mat) -> Result<Self, PlantError> {
        let n = a.nrows();
        if !a.is_square() || n == 0 {
            return Err(PlantError::Dimension(format!("A must be square and nonempty, got {}x{}", n, a.ncols())));
        }
        if b.nrows() != n || b.ncols() == 0 {
            return Err(PlantError::Dimension(format!("B must be {n}xm with m >= 1, got {}x{}", b.nrows(), b.ncols())));
        }
        if c.ncols() != n || c.nrows() == 0 {
            return Err(PlantError::Dimension(format!("C must be px{n} with p >= 1, got {}x{}", c.nrows(), c.ncols())));
        }
        ensure_finite(&a)?;
        ensure_finite(&b)?;
        ensure_finite(&c)?;
        Ok(Self { a, b, c })
    }

    /// Construction plus the standing assumptions: unit-disc spectrum,
    /// stabilizability and detectability.
    pub fn validated(a: Mat, b: Mat, c: Mat, tol: &Tolerances) -> Result<Self, PlantError> {
        let model = Self::new(a, b, c)?;
        model.validate(tol)?;
        Ok(model)
    }

    pub fn validate(&self, tol: &Tolerances) -> Result<(), PlantError> {
        let a1 = check_assumption1(self, tol)?;
        if !a1.holds {
            return Err(PlantError::Assumption1 { worst_modulus: a1.worst_modulus });
        }
        if let Some(mode) = numerics::pbh_uncontrollable_mode(&self.a, &self.b, tol.rank)? {
            return Err(PlantError::NotStabilizable { mode });
        }
        if let Some(mode) = numerics::pbh_uncontrollable_mode(&self.a.transpose(), &self.c.transpose(), tol.rank)? {
            return Err(PlantError::NotDetectable { mode });
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self, PlantError> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn a(&self) -> &Mat {
        &self.a
    }
    pub fn b(&self) -> &Mat {
        &self.b
    }
    pub fn c(&self) -> &Mat {
        &self.c
    }
    /// State dimension.
    pub fn n(&self) -> usize {
        self.a.nrows()
    }
    /// Input dimension.
    pub fn m(&self) -> usize {
        self.b.ncols()
    }
    /// Output dimension.
    pub fn p(&self) -> usize {
        self.c.nrows()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Assumption1Report {
    pub holds: bool,
    pub worst_modulus: f64,
}

/// All eigenvalues of `A` in the closed unit disc (up to `assumption_slack`).
pub fn check_assumption1(model: &AgentModel, tol: &Tolerances) -> Result<Assumption1Report, PlantError> {
    let worst_modulus = numerics::spectral_radius(model.a())?;
    Ok(Assumption1Report { holds: worst_modulus <= 1.0 + tol.assumption_slack, worst_modulus })
}

pub fn check_stabilizable(a: &Mat, b: &Mat, tol: &Tolerances) -> Result<bool, PlantError> {
    Ok(numerics::pbh_uncontrollable_mode(a, b, tol.rank)?.is_none())
}

pub fn check_detectable(a: &Mat, c: &Mat, tol: &Tolerances) -> Result<bool, PlantError> {
    Ok(numerics::pbh_uncontrollable_mode(&a.transpose(), &c.transpose(), tol.rank)?.is_none())
}
