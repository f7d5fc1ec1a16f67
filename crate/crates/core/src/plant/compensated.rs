use super::{max_abs, AgentModel, PlantError, RegulatorSolution, Tolerances};
use crate::matjson;
use crate::numerics::{self, hstack, image_basis, lstsq, orthogonal_complement, rank_of, Mat};
use serde::{Deserialize, Serialize};

/// Integrating precompensator
/// `p(k+1) = p(k) + [0 I] v(k)`, `u(k) = Γ₁ p(k) + [Γ₂ 0] v(k)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Precompensator {
    /// Injective, same image as Γ (m × v).
    #[serde(rename = "Gamma1", with = "matjson")]
    pub gamma1: Mat,
    /// Completes Γ₁ to an invertible m × m matrix (m × (m − v)).
    #[serde(rename = "Gamma2", with = "matjson")]
    pub gamma2: Mat,
}

impl Precompensator {
    /// Number of integrators, `rank Γ`.
    pub fn v(&self) -> usize {
        self.gamma1.ncols()
    }

    /// Injectivity of Γ₁, invertibility of `[Γ₁ Γ₂]` and `im Γ₁ = im Γ`.
    pub fn check(&self, gamma: &Mat, tol: &Tolerances) -> Result<(), PlantError> {
        let m = gamma.nrows();
        if self.gamma1.nrows() != m || self.gamma2.nrows() != m || self.gamma1.ncols() + self.gamma2.ncols() != m {
            return Err(PlantError::Dimension(format!(
                "[Gamma1 Gamma2] must be {m}x{m}, got {:?} and {:?}",
                self.gamma1.shape(),
                self.gamma2.shape()
            )));
        }
        let r1 = rank_of(&self.gamma1, tol.rank);
        if r1 != self.gamma1.ncols() {
            return Err(PlantError::Integrity("Gamma1 is not injective".into()));
        }
        if rank_of(&hstack(&self.gamma1, &self.gamma2), tol.rank) != m {
            return Err(PlantError::Integrity("[Gamma1 Gamma2] is not invertible".into()));
        }
        let rg = rank_of(gamma, tol.rank);
        if rg != r1 || rank_of(&hstack(&self.gamma1, gamma), tol.rank) != r1 {
            return Err(PlantError::Integrity("im Gamma1 differs from im Gamma".into()));
        }
        Ok(())
    }
}

/// Orthonormal Γ₁ spanning `im Γ` and orthonormal Γ₂ spanning its complement.
pub fn build_precompensator(gamma: &Mat, tol: &Tolerances) -> Precompensator {
    let gamma1 = image_basis(gamma, tol.rank);
    let gamma2 = orthogonal_complement(&gamma1, tol.rank);
    Precompensator { gamma1, gamma2 }
}

/// Agent plus precompensator:
/// `Ā = [[A, BΓ₁], [0, I]]`, `B̄ = [[BΓ₂, 0], [0, I]]`, `C̄ = [C, 0]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompensatedModel {
    #[serde(rename = "Abar", with = "matjson")]
    pub abar: Mat,
    #[serde(rename = "Bbar", with = "matjson")]
    pub bbar: Mat,
    #[serde(rename = "Cbar", with = "matjson")]
    pub cbar: Mat,
    /// `[Π; W]` with `Γ₁ W = Γ`; satisfies `Ā Π̄ = Π̄`, `C̄ Π̄ = R`.
    #[serde(rename = "PiBar", with = "matjson")]
    pub pibar: Mat,
    #[serde(rename = "W", with = "matjson")]
    pub w: Mat,
}

impl CompensatedModel {
    /// Dimension `n + v` of the compensated state.
    pub fn order(&self) -> usize {
        self.abar.nrows()
    }
}

pub fn compensate(
    model: &AgentModel,
    pre: &Precompensator,
    reg: &RegulatorSolution,
    tol: &Tolerances,
) -> Result<CompensatedModel, PlantError> {
    pre.check(&reg.gamma, tol)?;
    let (n, m, p) = (model.n(), model.m(), model.p());
    let v = pre.v();

    let mut abar = Mat::zeros(n + v, n + v);
    abar.view_mut((0, 0), (n, n)).copy_from(model.a());
    abar.view_mut((0, n), (n, v)).copy_from(&(model.b() * &pre.gamma1));
    abar.view_mut((n, n), (v, v)).fill_with_identity();

    let mut bbar = Mat::zeros(n + v, m);
    bbar.view_mut((0, 0), (n, m - v)).copy_from(&(model.b() * &pre.gamma2));
    bbar.view_mut((n, m - v), (v, v)).fill_with_identity();

    let mut cbar = Mat::zeros(p, n + v);
    cbar.view_mut((0, 0), (p, n)).copy_from(model.c());

    let w = lstsq(&pre.gamma1, &reg.gamma, tol.rank)?;
    let pibar = numerics::vstack(&reg.pi, &w);

    let scale = 1f64.max(max_abs(&pibar)).max(max_abs(&abar));
    let fixed = max_abs(&(&abar * &pibar - &pibar));
    let output = max_abs(&(&cbar * &pibar - &reg.r));
    let w_res = max_abs(&(&pre.gamma1 * &w - &reg.gamma));
    if fixed > tol.residual * scale || output > tol.residual * scale || w_res > tol.residual * scale {
        return Err(PlantError::Integrity(format!(
            "compensated equilibrium residuals: Abar*PiBar-PiBar {fixed:e}, Cbar*PiBar-R {output:e}, Gamma1*W-Gamma {w_res:e}"
        )));
    }
    if let Some(mode) = numerics::pbh_uncontrollable_mode(&abar, &bbar, tol.rank)? {
        return Err(PlantError::Integrity(format!("compensated pair (Abar, Bbar) not stabilizable at {mode}")));
    }
    if let Some(mode) = numerics::pbh_uncontrollable_mode(&abar.transpose(), &cbar.transpose(), tol.rank)? {
        return Err(PlantError::Integrity(format!("compensated pair (Abar, Cbar) not detectable at {mode}")));
    }
    Ok(CompensatedModel { abar, bbar, cbar, pibar, w })
}

/// State-feedback gain `K` and observer gain `F`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GainPair {
    #[serde(rename = "K", with = "matjson")]
    pub k: Mat,
    #[serde(rename = "F", with = "matjson")]
    pub f: Mat,
}

impl GainPair {
    /// Riccati-based design of both gains.
    pub fn design(comp: &CompensatedModel) -> Result<Self, PlantError> {
        let k = numerics::design_stabilizing_gain(&comp.abar, &comp.bbar)?;
        let f = numerics::design_observer_gain(&comp.abar, &comp.cbar)?;
        Ok(Self { k, f })
    }

    /// Accept externally supplied gains after the Schur checks.
    pub fn checked(comp: &CompensatedModel, k: Mat, f: Mat) -> Result<Self, PlantError> {
        let pair = Self { k, f };
        let (rk, rf) = pair.closed_loop_radii(comp)?;
        if rk >= 1.0 || rf >= 1.0 {
            return Err(PlantError::Integrity(format!(
                "gains are not stabilizing: rho(Abar - Bbar K) = {rk}, rho(Abar - F Cbar) = {rf}"
            )));
        }
        Ok(pair)
    }

    /// `(ρ(Ā − B̄K), ρ(Ā − FC̄))`.
    pub fn closed_loop_radii(&self, comp: &CompensatedModel) -> Result<(f64, f64), PlantError> {
        let q = comp.order();
        if self.k.shape() != (comp.bbar.ncols(), q) || self.f.shape() != (q, comp.cbar.nrows()) {
            return Err(PlantError::Dimension(format!(
                "K {:?} / F {:?} do not fit the compensated model of order {q}",
                self.k.shape(),
                self.f.shape()
            )));
        }
        let rk = numerics::spectral_radius(&(&comp.abar - &comp.bbar * &self.k))?;
        let rf = numerics::spectral_radius(&(&comp.abar - &self.f * &comp.cbar))?;
        Ok((rk, rf))
    }
}
