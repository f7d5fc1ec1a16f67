use super::{max_abs, AgentModel, PlantError, Tolerances};
use crate::matjson;
use crate::numerics::{
    self, hstack, image_basis, image_basis_with_floor, kernel_basis, lstsq, rank_of, rank_with_floor, truncate_rank,
    vstack, Mat,
};
use serde::{Deserialize, Serialize};

/// Solution `(Π, Γ)` of `(A − I)Π + BΓ = 0`, `CΠ = R`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegulatorSolution {
    /// Injective basis (columns) of the reference set being regulated.
    #[serde(rename = "R", with = "matjson")]
    pub r: Mat,
    #[serde(rename = "Pi", with = "matjson")]
    pub pi: Mat,
    #[serde(rename = "Gamma", with = "matjson")]
    pub gamma: Mat,
}

impl RegulatorSolution {
    /// Check both regulator identities and the rank condition.
    pub fn check(&self, model: &AgentModel, tol: &Tolerances) -> Result<(), PlantError> {
        let q = self.r.ncols();
        if self.r.nrows() != model.p() || self.pi.shape() != (model.n(), q) || self.gamma.shape() != (model.m(), q) {
            return Err(PlantError::Dimension(format!(
                "regulator solution shapes R {:?}, Pi {:?}, Gamma {:?} do not fit n={}, m={}, p={}",
                self.r.shape(),
                self.pi.shape(),
                self.gamma.shape(),
                model.n(),
                model.m(),
                model.p()
            )));
        }
        let (state, output) = regulator_residuals(model, &self.r, &self.pi, &self.gamma);
        let scale = 1f64.max(max_abs(&self.pi)).max(max_abs(&self.gamma)).max(max_abs(&self.r));
        if state > tol.residual * scale || output > tol.residual * scale {
            return Err(PlantError::Integrity(format!(
                "regulator residuals too large: state {state:e}, output {output:e}"
            )));
        }
        if !rank_condition_holds(model, &self.gamma, tol) {
            return Err(PlantError::Integrity("regulator solution violates the rank condition".into()));
        }
        Ok(())
    }
}

/// `[[A − I, B], [C, 0]]`.
fn stacked_system(model: &AgentModel) -> Mat {
    let n = model.n();
    let a_minus_i = model.a() - Mat::identity(n, n);
    numerics::block2(&a_minus_i, model.b(), model.c(), &Mat::zeros(model.p(), model.m()))
}

/// Reference magnitude for deciding that Γ (or an output map) is zero.
fn model_scale(model: &AgentModel) -> f64 {
    numerics::norm2(&stacked_system(model))
}

/// `rank Γ`, treating singular values at the rounding level of the model as zero.
pub fn gamma_rank(model: &AgentModel, gamma: &Mat, tol: &Tolerances) -> usize {
    rank_with_floor(gamma, tol.rank, model_scale(model))
}

/// `[[A − I, BΓ], [C, 0]]`.
fn rank_test_matrix(model: &AgentModel, gamma: &Mat) -> Mat {
    let n = model.n();
    let a_minus_i = model.a() - Mat::identity(n, n);
    numerics::block2(&a_minus_i, &(model.b() * gamma), model.c(), &Mat::zeros(model.p(), gamma.ncols()))
}

/// Max-abs residuals of `(A − I)Π + BΓ` and `CΠ − R`.
pub fn regulator_residuals(model: &AgentModel, r: &Mat, pi: &Mat, gamma: &Mat) -> (f64, f64) {
    let n = model.n();
    let state = (model.a() - Mat::identity(n, n)) * pi + model.b() * gamma;
    let output = model.c() * pi - r;
    (max_abs(&state), max_abs(&output))
}

/// `rank [[A − I, BΓ], [C, 0]] = n + rank Γ`.
pub fn rank_condition_holds(model: &AgentModel, gamma: &Mat, tol: &Tolerances) -> bool {
    rank_of(&rank_test_matrix(model, gamma), tol.rank) == model.n() + gamma_rank(model, gamma, tol)
}

/// Basis of the set of outputs reachable as equilibria,
/// `C · {x : (A − I)x ∈ im B}`. May have zero columns.
pub fn compute_yr_basis(model: &AgentModel, tol: &Tolerances) -> Mat {
    let n = model.n();
    let top = hstack(&(model.a() - Mat::identity(n, n)), model.b());
    let null = kernel_basis(&top, tol.rank);
    let states = null.rows(0, n).clone_owned();
    image_basis_with_floor(&(model.c() * states), tol.rank, numerics::norm2(model.c()))
}

/// Right invertibility without an invariant zero at one:
/// `[[A − I, B], [C, 0]]` has full row rank, and the normal rank of the
/// system matrix is `n + p`.
pub fn check_right_invertible_no_zero_at_one(model: &AgentModel, tol: &Tolerances) -> bool {
    let full = model.n() + model.p();
    if rank_of(&stacked_system(model), tol.rank) != full {
        return false;
    }
    // Normal rank is the maximum over z; a few fixed irrational points avoid
    // landing on an eigenvalue or a zero.
    [0.739_085_133_215_160_6, -0.567_143_290_409_783_8, 1.324_717_957_244_746]
        .iter()
        .map(|&z| {
            let n = model.n();
            let a_minus_z = model.a() - Mat::identity(n, n) * z;
            let m = numerics::block2(&a_minus_z, model.b(), model.c(), &Mat::zeros(model.p(), model.m()));
            rank_of(&m, tol.rank)
        })
        .max()
        .unwrap_or(0)
        == full
}

/// Least-squares residual of `[[A − I, B], [C, 0]] [x; u] = [0; y]`,
/// normalized by `max(1, ‖y‖)`. Zero iff `y` is reachable as an equilibrium output.
pub fn reference_distance(model: &AgentModel, y: &Mat, tol: &Tolerances) -> Result<Vec<f64>, PlantError> {
    let sys = stacked_system(model);
    let rhs = vstack(&Mat::zeros(model.n(), y.ncols()), y);
    let sol = lstsq(&sys, &rhs, tol.rank)?;
    let res = &sys * sol - &rhs;
    Ok((0..y.ncols()).map(|j| res.column(j).norm() / y.column(j).norm().max(1.0)).collect())
}

/// One pass of the rank repair. Returns `None` when the rank condition
/// already holds, otherwise `(Π − x vᵀ, Γ(I − v vᵀ))` for a kernel direction
/// `(x, v)` of `[[A − I, BΓ], [C, 0]]` with `v` a unit vector in the row space of Γ.
pub fn rank_repair_step(
    model: &AgentModel,
    pi: &Mat,
    gamma: &Mat,
    tol: &Tolerances,
) -> Result<Option<(Mat, Mat)>, PlantError> {
    if rank_condition_holds(model, gamma, tol) {
        return Ok(None);
    }
    let n = model.n();
    let q = gamma.ncols();
    let kernel = kernel_basis(&rank_test_matrix(model, gamma), tol.rank);
    let xs = kernel.rows(0, n).clone_owned();
    let vs = kernel.rows(n, q).clone_owned();

    // Kernel combination with the largest Γ-image.
    let gv = gamma * &vs;
    let svd = gv.clone().svd(false, true);
    let (best, smax) = svd
        .singular_values
        .iter()
        .enumerate()
        .fold((0, 0.0), |acc, (i, &s)| if s > acc.1 { (i, s) } else { acc });
    if smax <= tol.rank.get() * 1f64.max(max_abs(gamma)) {
        return Err(PlantError::Integrity("rank condition fails but no kernel direction moves Γ".into()));
    }
    let coeff = svd.v_t.expect("right singular vectors requested").row(best).transpose();
    let x = &xs * &coeff;
    let v = &vs * &coeff;

    // Components of v in ker Γ pair with x = 0 in the kernel; drop them so the
    // update removes exactly one dimension from im Γ.
    let rows = image_basis(&gamma.transpose(), tol.rank);
    let v = &rows * (rows.transpose() * v);
    let norm = v.norm();
    let (x, v) = (x / norm, v / norm);

    let pi_next = pi - &x * v.transpose();
    let gamma_next = gamma * (Mat::identity(q, q) - &v * v.transpose());
    Ok(Some((pi_next, gamma_next)))
}

/// Solve the regulator equations for a reference basis `R` and repair the
/// solution until the rank condition holds.
pub fn solve_regulator(model: &AgentModel, r: &Mat, tol: &Tolerances) -> Result<RegulatorSolution, PlantError> {
    if r.nrows() != model.p() {
        return Err(PlantError::Dimension(format!("R has {} rows, expected p = {}", r.nrows(), model.p())));
    }
    let distances = reference_distance(model, r, tol)?;
    if let Some((component, &distance)) =
        distances.iter().enumerate().find(|(_, &d)| d > tol.membership)
    {
        return Err(PlantError::InfeasibleReference { component, distance });
    }

    let n = model.n();
    let rhs = vstack(&Mat::zeros(n, r.ncols()), r);
    let sol = lstsq(&stacked_system(model), &rhs, tol.rank)?;
    let mut pi = sol.rows(0, n).clone_owned();
    let scale = model_scale(model);
    let mut gamma = truncate_rank(&sol.rows(n, model.m()).clone_owned(), tol.rank, scale);

    let mut rank = gamma_rank(model, &gamma, tol);
    while let Some((pi_next, gamma_next)) = rank_repair_step(model, &pi, &gamma, tol)? {
        let gamma_next = truncate_rank(&gamma_next, tol.rank, scale);
        let next_rank = gamma_rank(model, &gamma_next, tol);
        if next_rank >= rank {
            return Err(PlantError::Integrity(format!(
                "rank repair did not reduce rank(Γ) ({rank} -> {next_rank})"
            )));
        }
        log::debug!("rank repair: rank(Γ) {rank} -> {next_rank}");
        pi = pi_next;
        gamma = gamma_next;
        rank = next_rank;
    }

    let solution = RegulatorSolution { r: r.clone(), pi, gamma };
    solution.check(model, tol)?;
    Ok(solution)
}
