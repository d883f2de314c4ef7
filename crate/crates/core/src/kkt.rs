//! Subspace form of the optimality conditions.
//!
//! `Q` holds an orthonormal basis of `null [A B]` as columns, so it is
//! `(n+m)×m`. (It is sometimes written as the transpose, `m×(n+m)`; the
//! column form is what `Qᵀ∇f` requires.) `R = blkdiag(C, I_m)·Q` maps the
//! same condition into output coordinates.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::objective::ComposedObjective;
use crate::plant::{self, Disturbance, EquilibriumPoint, LtiPlant};

/// Largest principal-angle sine at which two nullspaces count as equal.
pub const NULLSPACE_ANGLE_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KktGeometry {
    #[serde(with = "crate::serde_mat::matrix")]
    q: DMatrix<f64>,
    #[serde(with = "crate::serde_mat::matrix")]
    r: DMatrix<f64>,
}

impl KktGeometry {
    /// `(n+m)×m`, orthonormal columns spanning `null [A B]`.
    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    /// `(p+m)×m`.
    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn m(&self) -> usize {
        self.q.ncols()
    }

    /// Same geometry with `Q` replaced by `Q·U` for an orthogonal `U`.
    pub fn rotated(&self, u: &DMatrix<f64>) -> Result<Self> {
        if u.shape() != (self.m(), self.m()) {
            return Err(Error::dim("rotation must be m×m"));
        }
        let err = (u.transpose() * u - DMatrix::identity(self.m(), self.m())).norm();
        if err > 1e-10 {
            return Err(Error::InvalidInput(format!(
                "rotation is not orthogonal (error {err:.2e})"
            )));
        }
        Ok(Self {
            q: &self.q * u,
            r: &self.r * u,
        })
    }
}

pub fn build_kkt_geometry(plant: &LtiPlant) -> Result<KktGeometry> {
    let ab = plant.ab();
    let rank = linalg::numerical_rank(&ab);
    if rank < plant.n() {
        return Err(Error::Assumption(format!(
            "nullspace dimension exceeds m; rank [A B] = {rank} < n = {} (stabilizability of (A, B) violated)",
            plant.n()
        )));
    }
    let q = linalg::null_basis(&ab, plant.m());
    let lift = linalg::blkdiag(&[plant.c(), &DMatrix::identity(plant.m(), plant.m())]);
    let r = lift * &q;
    Ok(KktGeometry { q, r })
}

/// The two optimality residuals at a candidate equilibrium.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KktResidual {
    /// `‖A x + B u + d‖`.
    pub feas: f64,
    /// `‖Rᵀ ∇g(y, u)‖`.
    pub grad: f64,
}

pub fn kkt_residual(
    plant: &LtiPlant,
    geometry: &KktGeometry,
    objective: &ComposedObjective,
    point: &EquilibriumPoint,
    d: &Disturbance,
) -> KktResidual {
    let feas = plant.equilibrium_residual(point, d);
    let y = plant.output(&point.x);
    let grad = (geometry.r.transpose() * objective.base().gradient(&y, &point.u)).norm();
    KktResidual { feas, grad }
}

/// `Qᵀ ∇f(x, u)`, the full-state form of the gradient condition.
pub fn projected_state_gradient(
    geometry: &KktGeometry,
    objective: &ComposedObjective,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> DVector<f64> {
    geometry.q.transpose() * objective.gradient(x, u)
}

/// True when `null [A B]` and `null [Ã B̃]` coincide.
pub fn nullspace_equivalence(a: &LtiPlant, b: &LtiPlant) -> Result<bool> {
    if a.n() != b.n() || a.m() != b.m() {
        return Err(Error::dim(format!(
            "plants differ in shape: (n, m) = ({}, {}) vs ({}, {})",
            a.n(),
            a.m(),
            b.n(),
            b.m()
        )));
    }
    let ra = linalg::numerical_rank(&a.ab());
    let rb = linalg::numerical_rank(&b.ab());
    if ra != rb {
        return Ok(false);
    }
    let dim = a.n() + a.m() - ra;
    let qa = linalg::null_basis(&a.ab(), dim);
    let qb = linalg::null_basis(&b.ab(), dim);
    Ok(linalg::max_principal_sine(&qa, &qb) < NULLSPACE_ANGLE_TOL)
}

/// Verifies the standing assumptions needed for a well-posed problem and
/// returns the geometry.
pub fn checked_geometry(plant: &LtiPlant) -> Result<KktGeometry> {
    if !plant::check_stabilizable(plant)? {
        return Err(Error::Assumption("(A, B) is not stabilizable".into()));
    }
    build_kkt_geometry(plant)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchmark;
    use crate::objective::quadratic_objective;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn trivial_nullspace_is_input_axis() {
        let n = 3;
        let plant = LtiPlant::new(-DMatrix::identity(n, n), DMatrix::zeros(n, 1), DMatrix::identity(n, n)).unwrap();
        let g = build_kkt_geometry(&plant).unwrap();
        let mut e = DVector::zeros(n + 1);
        e[n] = 1.0;
        let q = g.q().column(0).into_owned();
        assert!((q.clone() - &e).norm() < 1e-12 || (q + e).norm() < 1e-12);
    }

    #[test]
    fn rank_deficient_plant_is_rejected() {
        let plant = LtiPlant::new(DMatrix::zeros(1, 1), DMatrix::zeros(1, 1), DMatrix::identity(1, 1)).unwrap();
        assert!(matches!(build_kkt_geometry(&plant), Err(Error::Assumption(_))));
    }

    #[test]
    fn random_two_input_geometry_is_orthonormal_nullspace() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let n = 4;
            let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let b = DMatrix::from_fn(n, 2, |_, _| rng.gen_range(-1.0..1.0));
            let c = DMatrix::from_fn(2, n, |_, _| rng.gen_range(-1.0..1.0));
            let plant = LtiPlant::new(a, b, c).unwrap();
            let g = build_kkt_geometry(&plant).unwrap();
            let ab = plant.ab();
            assert!((&ab * g.q()).norm() <= 1e-10 * ab.norm());
            assert!((g.q().transpose() * g.q() - DMatrix::identity(2, 2)).norm() < 1e-10);
            let projector = DMatrix::identity(n + 2, n + 2) - linalg::pinv(&ab) * &ab;
            assert!((g.q() * g.q().transpose() - projector).norm() < 1e-9);
        }
    }

    #[test]
    fn chain_rule_identity() {
        let plant = benchmark::stable_plant();
        let g = build_kkt_geometry(&plant).unwrap();
        let f = ComposedObjective::new(crate::objective::cosh_example_objective(), plant.c().clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let x = DVector::from_fn(4, |_, _| rng.gen_range(-2.0..2.0));
            let u = DVector::from_fn(1, |_, _| rng.gen_range(-2.0..2.0));
            let lhs = g.r().transpose() * f.base().gradient(&plant.output(&x), &u);
            let rhs = projected_state_gradient(&g, &f, &x, &u);
            assert_relative_eq!(lhs, rhs, epsilon = 1e-10);
        }
    }

    #[test]
    fn residual_grows_linearly_along_nullspace() {
        let plant = benchmark::unstable_plant();
        let g = build_kkt_geometry(&plant).unwrap();
        let f = ComposedObjective::new(benchmark::quadratic_cost(), plant.c().clone()).unwrap();
        let d = Disturbance::from_slice(&[-1.0, 3.0, 1.0, 2.0]);
        let opt = crate::oracle::solve_steady_state(&plant, &g, &f, &d).unwrap();
        let base = EquilibriumPoint::new(&plant, opt.x_star.clone(), opt.u_star.clone());
        let r0 = kkt_residual(&plant, &g, &f, &base, &d);
        assert!(r0.feas < 1e-8 && r0.grad < 1e-8);
        let dir = g.q().column(0).into_owned();
        let grads: Vec<f64> = [1e-3, 2e-3, 4e-3]
            .iter()
            .map(|&delta| {
                let z = linalg::vcat_vec(&opt.x_star, &opt.u_star) + &dir * delta;
                let p = plant.equilibrium_from_stacked(&z);
                let res = kkt_residual(&plant, &g, &f, &p, &d);
                assert!(res.feas < 1e-10);
                res.grad
            })
            .collect();
        assert_relative_eq!(grads[1] / grads[0], 2.0, epsilon = 1e-6);
        assert_relative_eq!(grads[2] / grads[0], 4.0, epsilon = 1e-6);
    }

    #[test]
    fn zero_gradient_gives_zero_residual() {
        let plant = benchmark::stable_plant();
        let g = build_kkt_geometry(&plant).unwrap();
        let flat = quadratic_objective(DMatrix::zeros(3, 3), DVector::zeros(3)).unwrap();
        let f = ComposedObjective::new(flat, plant.c().clone()).unwrap();
        let d = Disturbance::from_slice(&[1.0, 0.0, 0.0, 0.0]);
        let p = plant.particular_solution(&d).unwrap();
        assert_eq!(kkt_residual(&plant, &g, &f, &p, &d).grad, 0.0);
    }

    #[test]
    fn nullspace_equivalence_cases() {
        let va = benchmark::stable_plant();
        let vc = benchmark::unstable_plant();
        assert!(nullspace_equivalence(&va, &va).unwrap());
        let scaled = LtiPlant::new(va.a() * 2.0, va.b() * 2.0, va.c().clone()).unwrap();
        assert!(nullspace_equivalence(&va, &scaled).unwrap());
        assert!(!nullspace_equivalence(&va, &vc).unwrap());
    }

    #[test]
    fn rotation_preserves_zero_set() {
        let plant = LtiPlant::new(
            DMatrix::from_row_slice(3, 3, &[-1.0, 0.5, 0.0, 0.0, -2.0, 1.0, 0.3, 0.0, -1.5]),
            DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]),
            DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 1.0]),
        )
        .unwrap();
        let g = build_kkt_geometry(&plant).unwrap();
        let (s, c) = (0.3f64.sin(), 0.3f64.cos());
        let rot = g.rotated(&DMatrix::from_row_slice(2, 2, &[c, -s, s, c])).unwrap();
        let h = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0, 3.0, 1.5]));
        let f = ComposedObjective::new(
            quadratic_objective(h, DVector::from_vec(vec![0.1, 0.0, -0.2, 0.3])).unwrap(),
            plant.c().clone(),
        )
        .unwrap();
        let d = Disturbance::from_slice(&[0.5, -1.0, 2.0]);
        let opt = crate::oracle::solve_steady_state(&plant, &g, &f, &d).unwrap();
        let point = EquilibriumPoint::new(&plant, opt.x_star.clone(), opt.u_star.clone());
        assert!(kkt_residual(&plant, &rot, &f, &point, &d).grad < 1e-8);
        let off = EquilibriumPoint::new(
            &plant,
            opt.x_star.clone(),
            &opt.u_star + DVector::from_vec(vec![0.1, 0.0]),
        );
        assert!(kkt_residual(&plant, &g, &f, &off, &d).grad > 1e-4);
        assert!(kkt_residual(&plant, &rot, &f, &off, &d).grad > 1e-4);
    }
}
