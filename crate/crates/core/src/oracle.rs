//! Independent solvers for the steady-state program
//!
//! ```text
//! minimize g(y, u)  subject to  A x + B u + d = 0,  y = C x.
//! ```
//!
//! The general solver runs Newton's method over the feasible affine set
//! `z = z_p + Q w`. The quadratic solver assembles the full KKT system,
//! multipliers included, and solves it directly. The two share nothing
//! beyond the plant, which is what makes them useful as mutual checks.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kkt::{self, KktGeometry};
use crate::linalg;
use crate::objective::{ComposedObjective, ObjectiveKind, SteadyStateObjective};
use crate::plant::{self, Disturbance, EquilibriumPoint, LtiPlant};

pub const DEFAULT_MAX_ITERATIONS: usize = 10_000;
/// Objective values below this are taken as evidence of unboundedness.
pub const UNBOUNDED_THRESHOLD: f64 = -1e12;
const ARMIJO_C: f64 = 1e-4;
const MAX_HALVINGS: usize = 60;
/// Stopping tolerance on `‖Qᵀ∇f‖ / (1 + ‖∇g‖)`.
const GRAD_TOL: f64 = 1e-10;
/// Acceptance tolerance when progress stalls at round-off.
const GRAD_ACCEPT: f64 = 1e-8;
/// Reciprocal condition number below which the KKT matrix is singular.
const KKT_RCOND_MIN: f64 = 1e-13;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerResult {
    #[serde(with = "crate::serde_mat::vector")]
    pub x_star: DVector<f64>,
    #[serde(with = "crate::serde_mat::vector")]
    pub y_star: DVector<f64>,
    #[serde(with = "crate::serde_mat::vector")]
    pub u_star: DVector<f64>,
    pub objective_value: f64,
    pub kkt_feas: f64,
    pub kkt_grad: f64,
    pub iterations: usize,
}

impl OptimizerResult {
    pub fn point(&self) -> EquilibriumPoint {
        EquilibriumPoint {
            x: self.x_star.clone(),
            u: self.u_star.clone(),
            y: self.y_star.clone(),
        }
    }

    /// `(y⋆, u⋆)` stacked.
    pub fn output_input(&self) -> DVector<f64> {
        linalg::vcat_vec(&self.y_star, &self.u_star)
    }
}

#[derive(Debug, Clone)]
pub struct OracleOptions {
    pub max_iterations: usize,
    /// Starting subspace coordinate; `None` is the minimum-norm feasible point.
    pub w0: Option<DVector<f64>>,
}

impl Default for OracleOptions {
    fn default() -> Self {
        Self {
            max_iterations: DEFAULT_MAX_ITERATIONS,
            w0: None,
        }
    }
}

pub fn solve_steady_state(
    plant: &LtiPlant,
    geometry: &KktGeometry,
    objective: &ComposedObjective,
    d: &Disturbance,
) -> Result<OptimizerResult> {
    solve_steady_state_with(plant, geometry, objective, d, &OracleOptions::default())
}

pub fn solve_steady_state_with(
    plant: &LtiPlant,
    geometry: &KktGeometry,
    objective: &ComposedObjective,
    d: &Disturbance,
    options: &OracleOptions,
) -> Result<OptimizerResult> {
    plant.check_disturbance(d)?;
    check_shapes(plant, geometry, objective)?;
    let m = plant.m();
    let q = geometry.q();
    let zp = -(linalg::pinv(&plant.ab()) * d.as_vector());

    let mut w = match &options.w0 {
        Some(w0) if w0.len() == m => w0.clone(),
        Some(w0) => {
            return Err(Error::dim(format!(
                "initial point has length {}, expected {m}",
                w0.len()
            )))
        }
        None => DVector::zeros(m),
    };
    let z_of = |w: &DVector<f64>| &zp + q * w;
    let phi = |w: &DVector<f64>| objective.value_stacked(&z_of(w));
    let grad = |w: &DVector<f64>| q.transpose() * objective.gradient_stacked(&z_of(w));

    let mut value = phi(&w);
    let mut g = grad(&w);
    let finish =
        |w: &DVector<f64>, iterations: usize| finish_result(plant, geometry, objective, d, &z_of(w), iterations);

    for iter in 0..options.max_iterations {
        if !value.is_finite() {
            return Err(Error::OracleNonConvergence {
                best: Box::new(finish(&w, iter)),
            });
        }
        if value < UNBOUNDED_THRESHOLD {
            return Err(Error::Unbounded(UNBOUNDED_THRESHOLD));
        }
        let scale = 1.0 + gradient_scale(objective, &z_of(&w));
        if g.norm() <= GRAD_TOL * scale {
            return Ok(finish(&w, iter));
        }

        let hess = match objective.hessian_stacked(&z_of(&w)) {
            Some(h) => q.transpose() * h * q,
            None => fd_hessian(&grad, &w, &g),
        };
        let newton = hess
            .cholesky()
            .map(|chol| -chol.solve(&g))
            .filter(|dir| g.dot(dir) < 0.0);
        let expand = newton.is_none();
        let direction = newton.unwrap_or_else(|| -g.clone());
        let slope = g.dot(&direction);

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let trial = &w + &direction * step;
            let trial_value = phi(&trial);
            if trial_value.is_finite() && trial_value <= value + ARMIJO_C * step * slope {
                accepted = Some((trial, trial_value));
                break;
            }
            step *= 0.5;
        }
        // Without curvature information the unit step has no natural scale;
        // keep doubling while Armijo still holds so that unbounded directions
        // are detected in a reasonable number of iterations.
        if expand {
            if let Some((_, mut best_value)) = accepted.clone() {
                for _ in 0..MAX_HALVINGS {
                    let longer = step * 2.0;
                    let trial = &w + &direction * longer;
                    let trial_value = phi(&trial);
                    if !(trial_value.is_finite()
                        && trial_value < best_value
                        && trial_value <= value + ARMIJO_C * longer * slope)
                    {
                        break;
                    }
                    step = longer;
                    best_value = trial_value;
                    accepted = Some((trial, trial_value));
                }
            }
        }
        match accepted {
            Some((trial, trial_value)) => {
                // A step that cannot change the iterate means round-off has
                // taken over.
                if trial == w {
                    return accept_or_fail(&g, finish(&w, iter + 1), objective, &z_of(&w));
                }
                g = grad(&trial);
                w = trial;
                value = trial_value;
            }
            // No decrease along a descent direction: round-off floor.
            None => return accept_or_fail(&g, finish(&w, iter + 1), objective, &z_of(&w)),
        }
    }
    accept_or_fail(&g, finish(&w, options.max_iterations), objective, &z_of(&w))
}

fn accept_or_fail(
    g: &DVector<f64>,
    result: OptimizerResult,
    objective: &ComposedObjective,
    z: &DVector<f64>,
) -> Result<OptimizerResult> {
    if g.norm() <= GRAD_ACCEPT * (1.0 + gradient_scale(objective, z)) {
        Ok(result)
    } else {
        Err(Error::OracleNonConvergence { best: Box::new(result) })
    }
}

fn check_shapes(plant: &LtiPlant, geometry: &KktGeometry, objective: &ComposedObjective) -> Result<()> {
    if geometry.q().nrows() != plant.n() + plant.m() || geometry.m() != plant.m() {
        return Err(Error::dim("geometry does not match plant"));
    }
    if objective.n() != plant.n() || objective.m() != plant.m() {
        return Err(Error::dim("objective does not match plant"));
    }
    Ok(())
}

fn gradient_scale(objective: &ComposedObjective, z: &DVector<f64>) -> f64 {
    let n = objective.n();
    let x = z.rows(0, n).into_owned();
    let u = z.rows(n, objective.m()).into_owned();
    let y = objective.lifted_output(&x);
    objective.base().gradient(&y, &u).norm()
}

/// Forward differences of the reduced gradient with step `1e-6·(1 + ‖w‖)`.
fn fd_hessian<G>(grad: &G, w: &DVector<f64>, g0: &DVector<f64>) -> DMatrix<f64>
where
    G: Fn(&DVector<f64>) -> DVector<f64>,
{
    let m = w.len();
    let h = 1e-6 * (1.0 + w.norm());
    let mut hess = DMatrix::zeros(m, m);
    for j in 0..m {
        let mut wp = w.clone();
        wp[j] += h;
        hess.set_column(j, &((grad(&wp) - g0) / h));
    }
    linalg::symmetrize(&hess)
}

fn finish_result(
    plant: &LtiPlant,
    geometry: &KktGeometry,
    objective: &ComposedObjective,
    d: &Disturbance,
    z: &DVector<f64>,
    iterations: usize,
) -> OptimizerResult {
    let point = plant.equilibrium_from_stacked(z);
    let res = kkt::kkt_residual(plant, geometry, objective, &point, d);
    OptimizerResult {
        objective_value: objective.base().value(&point.y, &point.u),
        x_star: point.x,
        y_star: point.y,
        u_star: point.u,
        kkt_feas: res.feas,
        kkt_grad: res.grad,
        iterations,
    }
}

/// Direct solve of the KKT system for `g(z) = ½ zᵀHz + qᵀz`.
///
/// Unknowns are `(x, y, u, λ, ν)`, where `λ` enforces `y = Cx` and `ν`
/// enforces `Ax + Bu + d = 0`. The multipliers are discarded.
pub fn solve_quadratic_closed_form(
    plant: &LtiPlant,
    h: &DMatrix<f64>,
    q: &DVector<f64>,
    d: &Disturbance,
) -> Result<OptimizerResult> {
    plant.check_disturbance(d)?;
    let (n, m, p) = (plant.n(), plant.m(), plant.p());
    if h.shape() != (p + m, p + m) || q.len() != p + m {
        return Err(Error::dim("H and q must match p + m"));
    }
    let size = 2 * n + 2 * p + m;
    let (ox, oy, ou, ol, on) = (0, n, n + p, n + p + m, n + 2 * p + m);
    let mut k = DMatrix::zeros(size, size);
    let mut rhs = DVector::zeros(size);

    // Stationarity in x: -Cᵀλ + Aᵀν = 0.
    k.view_mut((ox, ol), (n, p)).copy_from(&(-plant.c().transpose()));
    k.view_mut((ox, on), (n, n)).copy_from(&plant.a().transpose());
    // Stationarity in (y, u): H (y, u) + q + (λ, Bᵀν) = 0.
    k.view_mut((oy, oy), (p + m, p + m)).copy_from(h);
    k.view_mut((oy, ol), (p, p)).fill_with_identity();
    k.view_mut((ou, on), (m, n)).copy_from(&plant.b().transpose());
    rhs.rows_mut(oy, p + m).copy_from(&(-q));
    // y - Cx = 0.
    k.view_mut((ol, ox), (p, n)).copy_from(&(-plant.c()));
    k.view_mut((ol, oy), (p, p)).fill_with_identity();
    // Ax + Bu = -d.
    k.view_mut((on, ox), (n, n)).copy_from(plant.a());
    k.view_mut((on, ou), (n, m)).copy_from(plant.b());
    rhs.rows_mut(on, n).copy_from(&(-d.as_vector()));

    let cond = linalg::condition_number(&k);
    if !(cond.is_finite() && 1.0 / cond > KKT_RCOND_MIN) {
        return Err(Error::NonUniqueOptimizer);
    }
    let sol = k.lu().solve(&rhs).ok_or(Error::NonUniqueOptimizer)?;
    let x = sol.rows(ox, n).into_owned();
    let u = sol.rows(ou, m).into_owned();
    let point = EquilibriumPoint::new(plant, x, u);
    let z = linalg::vcat_vec(&point.y, &point.u);
    let grad = h * &z + q;
    let lift = linalg::blkdiag(&[plant.c(), &DMatrix::identity(m, m)]);
    let q_basis = linalg::null_basis(&plant.ab(), m);
    let kkt_grad = ((lift * q_basis).transpose() * grad).norm();
    Ok(OptimizerResult {
        objective_value: 0.5 * z.dot(&(h * &z)) + q.dot(&z),
        kkt_feas: plant.equilibrium_residual(&point, d),
        kkt_grad,
        x_star: point.x,
        y_star: point.y,
        u_star: point.u,
        iterations: 1,
    })
}

/// Convenience wrapper for a quadratic [`SteadyStateObjective`].
pub fn solve_quadratic_objective(
    plant: &LtiPlant,
    objective: &SteadyStateObjective,
    d: &Disturbance,
) -> Result<OptimizerResult> {
    match objective.kind() {
        ObjectiveKind::Quadratic { h, q } => solve_quadratic_closed_form(plant, h, q, d),
        _ => Err(Error::InvalidInput(
            "closed-form solve needs a quadratic objective".into(),
        )),
    }
}

/// Sufficient condition for a unique closed-loop equilibrium: strict
/// convexity (`κ > 0`) and a detectable `(C, A)`.
pub fn check_uniqueness(plant: &LtiPlant, objective: &SteadyStateObjective) -> Result<bool> {
    Ok(objective.kappa() > 0.0 && plant::check_detectable(plant)?)
}
