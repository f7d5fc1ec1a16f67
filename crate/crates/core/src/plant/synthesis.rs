use super::{
    build_precompensator, check_assumption1, check_right_invertible_no_zero_at_one, compensate, compute_yr_basis,
    regulator_residuals, solve_regulator, AgentModel, Assumption1Report, CompensatedModel, GainPair, PlantError,
    Precompensator, RegulatorSolution, Tolerances,
};
use crate::matjson;
use crate::numerics::{self, lstsq, Mat, Vector};
use serde::{Deserialize, Serialize};

/// Outcomes of every check run during synthesis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesisChecks {
    pub assumption1: Assumption1Report,
    pub stabilizable: bool,
    pub detectable: bool,
    pub right_invertible_no_zero_at_one: bool,
    /// Dimension of the set of reachable constant references.
    pub reference_set_dim: usize,
    pub reference_residual: f64,
    pub regulator_state_residual: f64,
    pub regulator_output_residual: f64,
    pub rank_condition: bool,
    pub compensated_stabilizable: bool,
    pub compensated_detectable: bool,
    pub state_feedback_radius: f64,
    pub observer_radius: f64,
}

/// Everything an agent needs to run the protocol, as written to `protocol.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesisResult {
    pub tool_version: String,
    pub model: AgentModel,
    #[serde(with = "matjson::vector")]
    pub y_r: Vector,
    /// Coordinates of `y_r` in the reference basis: `R z = y_r`.
    #[serde(with = "matjson::vector")]
    pub z: Vector,
    pub regulator: RegulatorSolution,
    pub precompensator: Precompensator,
    pub compensated: CompensatedModel,
    pub gains: GainPair,
    pub tolerances: Tolerances,
    pub checks: SynthesisChecks,
}

impl SynthesisResult {
    /// Number of integrators in the precompensator.
    pub fn v(&self) -> usize {
        self.precompensator.v()
    }

    /// Order `n + v` of the compensated agent.
    pub fn order(&self) -> usize {
        self.compensated.order()
    }

    pub fn to_json(&self) -> Result<String, PlantError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Parse and check shapes. Gains are not required to be stabilizing so
    /// that deliberately broken protocols can still be loaded and analysed.
    pub fn from_json(s: &str) -> Result<Self, PlantError> {
        let mut r: SynthesisResult = serde_json::from_str(s)?;
        r.fix_empty_shapes();
        r.check_shapes()?;
        Ok(r)
    }

    fn fix_empty_shapes(&mut self) {
        let (n, m, p) = (self.model.n(), self.model.m(), self.model.p());
        let q = self.regulator.r.ncols();
        let v = self.precompensator.gamma1.ncols();
        let reg = &mut self.regulator;
        reg.r = matjson::reshape_empty(std::mem::take(&mut reg.r), p, q);
        reg.pi = matjson::reshape_empty(std::mem::take(&mut reg.pi), n, q);
        reg.gamma = matjson::reshape_empty(std::mem::take(&mut reg.gamma), m, q);
        let pre = &mut self.precompensator;
        pre.gamma1 = matjson::reshape_empty(std::mem::take(&mut pre.gamma1), m, v);
        pre.gamma2 = matjson::reshape_empty(std::mem::take(&mut pre.gamma2), m, m - v.min(m));
        let comp = &mut self.compensated;
        comp.w = matjson::reshape_empty(std::mem::take(&mut comp.w), v, q);
        comp.pibar = matjson::reshape_empty(std::mem::take(&mut comp.pibar), n + v, q);
    }

    fn check_shapes(&self) -> Result<(), PlantError> {
        let (n, m, p) = (self.model.n(), self.model.m(), self.model.p());
        let q = self.regulator.r.ncols();
        let v = self.v();
        let expect = [
            ("R", self.regulator.r.shape(), (p, q)),
            ("Pi", self.regulator.pi.shape(), (n, q)),
            ("Gamma", self.regulator.gamma.shape(), (m, q)),
            ("Gamma1", self.precompensator.gamma1.shape(), (m, v)),
            ("Gamma2", self.precompensator.gamma2.shape(), (m, m.saturating_sub(v))),
            ("Abar", self.compensated.abar.shape(), (n + v, n + v)),
            ("Bbar", self.compensated.bbar.shape(), (n + v, m)),
            ("Cbar", self.compensated.cbar.shape(), (p, n + v)),
            ("PiBar", self.compensated.pibar.shape(), (n + v, q)),
            ("W", self.compensated.w.shape(), (v, q)),
            ("K", self.gains.k.shape(), (m, n + v)),
            ("F", self.gains.f.shape(), (n + v, p)),
        ];
        for (name, got, want) in expect {
            if got != want {
                return Err(PlantError::Dimension(format!("{name} is {got:?}, expected {want:?}")));
            }
        }
        if self.y_r.len() != p || self.z.len() != q {
            return Err(PlantError::Dimension(format!(
                "y_r has {} entries (p = {p}), z has {} (q = {q})",
                self.y_r.len(),
                self.z.len()
            )));
        }
        Ok(())
    }

    /// Re-run every invariant on the stored data.
    pub fn check_invariants(&self) -> Result<(), PlantError> {
        let tol = &self.tolerances;
        self.check_shapes()?;
        self.model.validate(tol)?;
        self.regulator.check(&self.model, tol)?;
        let recomputed = compensate(&self.model, &self.precompensator, &self.regulator, tol)?;
        let diff = (&recomputed.abar - &self.compensated.abar).norm()
            + (&recomputed.bbar - &self.compensated.bbar).norm()
            + (&recomputed.cbar - &self.compensated.cbar).norm();
        if diff > 1e-9 {
            return Err(PlantError::Integrity("stored compensated model does not match its precompensator".into()));
        }
        GainPair::checked(&self.compensated, self.gains.k.clone(), self.gains.f.clone())?;
        let reference = &self.regulator.r * &self.z - &self.y_r;
        if reference.amax() > tol.membership * self.y_r.norm().max(1.0) {
            return Err(PlantError::Integrity("R z does not reproduce y_r".into()));
        }
        Ok(())
    }

    /// Equilibrium of one compensated agent: `x̄ = Π̄ z`.
    pub fn equilibrium(&self) -> Vector {
        &self.compensated.pibar * &self.z
    }
}

/// Full synthesis from the agent model and a constant reference.
pub fn synthesize(model: &AgentModel, y_r: &Vector, tol: &Tolerances) -> Result<SynthesisResult, PlantError> {
    let assumption1 = check_assumption1(model, tol)?;
    model.validate(tol)?;
    if y_r.len() != model.p() {
        return Err(PlantError::Dimension(format!("y_r has {} entries, expected p = {}", y_r.len(), model.p())));
    }

    let right_invertible = check_right_invertible_no_zero_at_one(model, tol);
    let yr_basis = compute_yr_basis(model, tol);
    let r = if right_invertible { Mat::identity(model.p(), model.p()) } else { yr_basis.clone() };

    let y_mat = Mat::from_column_slice(y_r.len(), 1, y_r.as_slice());
    let z_mat = lstsq(&r, &y_mat, tol.rank)?;
    let z = Vector::from_column_slice(z_mat.as_slice());
    let miss = y_r - &r * &z;
    let distance = miss.norm();
    if distance > tol.membership * y_r.norm().max(1.0) {
        let component = miss.iamax();
        return Err(PlantError::InfeasibleReference { component, distance });
    }

    let regulator = solve_regulator(model, &r, tol)?;
    let precompensator = build_precompensator(&regulator.gamma, tol);
    let compensated = compensate(model, &precompensator, &regulator, tol)?;
    let gains = GainPair::design(&compensated)?;
    let (state_feedback_radius, observer_radius) = gains.closed_loop_radii(&compensated)?;
    let (regulator_state_residual, regulator_output_residual) =
        regulator_residuals(model, &regulator.r, &regulator.pi, &regulator.gamma);

    let checks = SynthesisChecks {
        assumption1,
        stabilizable: true,
        detectable: true,
        right_invertible_no_zero_at_one: right_invertible,
        reference_set_dim: yr_basis.ncols(),
        reference_residual: distance,
        regulator_state_residual,
        regulator_output_residual,
        rank_condition: true,
        compensated_stabilizable: numerics::pbh_uncontrollable_mode(&compensated.abar, &compensated.bbar, tol.rank)?
            .is_none(),
        compensated_detectable: numerics::pbh_uncontrollable_mode(
            &compensated.abar.transpose(),
            &compensated.cbar.transpose(),
            tol.rank,
        )?
        .is_none(),
        state_feedback_radius,
        observer_radius,
    };

    Ok(SynthesisResult {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        model: model.clone(),
        y_r: y_r.clone(),
        z,
        regulator,
        precompensator,
        compensated,
        gains,
        tolerances: *tol,
        checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    fn tol() -> Tolerances {
        Tolerances::default()
    }

    #[test]
    fn example_model_synthesis() {
        let s = synthesize(&fixtures::example_model(), &Vector::from_element(1, 5.0), &tol()).unwrap();
        s.check_invariants().unwrap();
        assert!(s.checks.right_invertible_no_zero_at_one);
        assert_eq!(s.checks.reference_set_dim, 1);
        assert_eq!(s.v(), 1);
        assert!((s.z[0] - 5.0).abs() < 1e-12);
        let eq = s.equilibrium();
        let y = &s.compensated.cbar * &eq;
        assert!((y[0] - 5.0).abs() < 1e-9);
    }

    #[test]
    fn zero_reference() {
        let s = synthesize(&fixtures::example_model(), &Vector::zeros(1), &tol()).unwrap();
        assert_eq!(s.z[0], 0.0);
        s.check_invariants().unwrap();
    }

    #[test]
    fn non_right_invertible_references() {
        let model = fixtures::non_right_invertible_model();
        let s = synthesize(&model, &Vector::from_vec(vec![1.0, 1.0]), &tol()).unwrap();
        s.check_invariants().unwrap();
        assert!(!s.checks.right_invertible_no_zero_at_one);
        assert_eq!(s.regulator.r.ncols(), 1);

        match synthesize(&model, &Vector::from_vec(vec![1.0, -1.0]), &tol()) {
            Err(PlantError::InfeasibleReference { distance, .. }) => {
                assert!((distance - 2f64.sqrt()).abs() < 1e-9)
            }
            other => panic!("expected infeasible reference, got {other:?}"),
        }
        assert!(matches!(
            synthesize(&model, &Vector::from_vec(vec![1.0, 0.0]), &tol()),
            Err(PlantError::InfeasibleReference { .. })
        ));
    }

    #[test]
    fn assumption_failure_reported() {
        let one = Mat::from_element(1, 1, 1.0);
        let model = AgentModel::new(Mat::from_element(1, 1, 1.5), one.clone(), one).unwrap();
        let err = synthesize(&model, &Vector::zeros(1), &tol()).unwrap_err();
        assert!(err.is_model_assumption());
    }

    #[test]
    fn json_round_trip_preserves_everything() {
        let s = synthesize(&fixtures::example_model(), &Vector::from_element(1, 5.0), &tol()).unwrap();
        let back = SynthesisResult::from_json(&s.to_json().unwrap()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn json_round_trip_with_empty_blocks() {
        // y_r = 0 on a model with an empty reference set gives v = 0, q = 0.
        let a = Mat::from_row_slice(2, 2, &[0.5, 0.0, 1.0, 0.0]);
        let b = Mat::from_column_slice(2, 1, &[1.0, 0.0]);
        let c = Mat::from_row_slice(1, 2, &[-1.0, 1.0]);
        let model = AgentModel::new(a, b, c).unwrap();
        let s = synthesize(&model, &Vector::zeros(1), &tol()).unwrap();
        assert_eq!((s.v(), s.regulator.r.ncols()), (0, 0));
        let back = SynthesisResult::from_json(&s.to_json().unwrap()).unwrap();
        assert_eq!(back, s);
        assert!(synthesize(&model, &Vector::from_element(1, 1.0), &tol()).is_err());
    }

    #[test]
    fn sabotaged_gains_still_load() {
        let mut s = synthesize(&fixtures::example_model(), &Vector::from_element(1, 5.0), &tol()).unwrap();
        s.gains.k.fill(0.0);
        let back = SynthesisResult::from_json(&s.to_json().unwrap()).unwrap();
        assert!(back.check_invariants().is_err());
    }
}
