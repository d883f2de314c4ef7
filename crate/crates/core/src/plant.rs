//! The LTI plant `x' = Ax + Bu + d`, `y = Cx` and checks of the standing
//! assumptions that make the steady-state problem well posed.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Eigenvalues with real part at or above this are PBH-tested.
pub const PBH_REAL_PART_MARGIN: f64 = -1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LtiPlant {
    #[serde(with = "crate::serde_mat::matrix")]
    a: DMatrix<f64>,
    #[serde(with = "crate::serde_mat::matrix")]
    b: DMatrix<f64>,
    #[serde(with = "crate::serde_mat::matrix")]
    c: DMatrix<f64>,
}

impl LtiPlant {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if n == 0 || !a.is_square() {
            return Err(Error::dim(format!(
                "A must be square and non-empty, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if b.nrows() != n || b.ncols() == 0 {
            return Err(Error::dim(format!(
                "B must be {n}xm with m >= 1, got {}x{}",
                b.nrows(),
                b.ncols()
            )));
        }
        if c.ncols() != n || c.nrows() == 0 {
            return Err(Error::dim(format!(
                "C must be px{n} with p >= 1, got {}x{}",
                c.nrows(),
                c.ncols()
            )));
        }
        if b.ncols() > n || c.nrows() > n {
            return Err(Error::dim(format!(
                "need m, p <= n; got n = {n}, m = {}, p = {}",
                b.ncols(),
                c.nrows()
            )));
        }
        if a.iter().chain(b.iter()).chain(c.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("plant matrices must be finite".into()));
        }
        Ok(Self { a, b, c })
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    pub fn p(&self) -> usize {
        self.c.nrows()
    }

    /// `[A B]`, the equilibrium constraint matrix.
    pub fn ab(&self) -> DMatrix<f64> {
        linalg::hcat(&self.a, &self.b)
    }

    /// Right-hand side `Ax + Bu + d`.
    pub fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>, d: &Disturbance) -> DVector<f64> {
        &self.a * x + &self.b * u + d.as_vector()
    }

    pub fn output(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.c * x
    }

    /// The minimum-norm solution of `A x + B u + d = 0`.
    pub fn particular_solution(&self, d: &Disturbance) -> Result<EquilibriumPoint> {
        self.check_disturbance(d)?;
        let z = -(linalg::pinv(&self.ab()) * d.as_vector());
        Ok(self.equilibrium_from_stacked(&z))
    }

    /// Split a stacked `(x, u)` vector into an equilibrium point.
    pub fn equilibrium_from_stacked(&self, z: &DVector<f64>) -> EquilibriumPoint {
        let x = z.rows(0, self.n()).into_owned();
        let u = z.rows(self.n(), self.m()).into_owned();
        EquilibriumPoint::new(self, x, u)
    }

    pub fn check_disturbance(&self, d: &Disturbance) -> Result<()> {
        if d.len() != self.n() {
            return Err(Error::dim(format!(
                "disturbance has length {}, plant has n = {}",
                d.len(),
                self.n()
            )));
        }
        Ok(())
    }

    /// `‖A x + B u + d‖` at an equilibrium candidate.
    pub fn equilibrium_residual(&self, point: &EquilibriumPoint, d: &Disturbance) -> f64 {
        self.dynamics(&point.x, &point.u, d).norm()
    }
}

/// Constant additive state disturbance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Disturbance(#[serde(with = "crate::serde_mat::vector")] DVector<f64>);

impl Disturbance {
    pub fn new(d: DVector<f64>) -> Self {
        Self(d)
    }

    pub fn from_slice(d: &[f64]) -> Self {
        Self(DVector::from_column_slice(d))
    }

    pub fn zeros(n: usize) -> Self {
        Self(DVector::zeros(n))
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.0.norm()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumPoint {
    #[serde(with = "crate::serde_mat::vector")]
    pub x: DVector<f64>,
    #[serde(with = "crate::serde_mat::vector")]
    pub u: DVector<f64>,
    #[serde(with = "crate::serde_mat::vector")]
    pub y: DVector<f64>,
}

impl EquilibriumPoint {
    /// Builds the point with `y = C x`.
    pub fn new(plant: &LtiPlant, x: DVector<f64>, u: DVector<f64>) -> Self {
        let y = plant.output(&x);
        Self { x, u, y }
    }
}

/// PBH stabilizability: `rank [A - λI, B] = n` at every eigenvalue of `A` in
/// the closed right half-plane.
pub fn check_stabilizable(plant: &LtiPlant) -> Result<bool> {
    pbh_holds(plant.a(), plant.b(), false)
}

/// PBH detectability of `(C, A)`: `rank [A - λI; C] = n` at every eigenvalue
/// of `A` in the closed right half-plane.
pub fn check_detectable(plant: &LtiPlant) -> Result<bool> {
    pbh_holds(plant.a(), plant.c(), true)
}

/// `rank [A B] = n`; then `A x + B u + d = 0` is solvable for every `d`.
pub fn check_full_row_rank_ab(plant: &LtiPlant) -> bool {
    linalg::numerical_rank(&plant.ab()) == plant.n()
}

pub use crate::linalg::eigenvalues;

fn pbh_holds(a: &DMatrix<f64>, other: &DMatrix<f64>, stack_below: bool) -> Result<bool> {
    let n = a.nrows();
    for lambda in eigenvalues(a)? {
        if lambda.re < PBH_REAL_PART_MARGIN {
            continue;
        }
        let shifted = DMatrix::from_fn(n, n, |i, j| {
            let v = Complex64::new(a[(i, j)], 0.0);
            if i == j {
                v - lambda
            } else {
                v
            }
        });
        let other_c = other.map(|v| Complex64::new(v, 0.0));
        let test = if stack_below {
            let mut t = DMatrix::zeros(n + other.nrows(), n);
            t.rows_mut(0, n).copy_from(&shifted);
            t.rows_mut(n, other.nrows()).copy_from(&other_c);
            t
        } else {
            let mut t = DMatrix::zeros(n, n + other.ncols());
            t.columns_mut(0, n).copy_from(&shifted);
            t.columns_mut(n, other.ncols()).copy_from(&other_c);
            t
        };
        if linalg::numerical_rank(&test) < n {
            return Ok(false);
        }
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchmark;

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    #[test]
    fn stable_benchmark_passes_all_checks() {
        let plant = benchmark::stable_plant();
        assert!(check_stabilizable(&plant).unwrap());
        assert!(check_detectable(&plant).unwrap());
        assert!(check_full_row_rank_ab(&plant));
    }

    #[test]
    fn unstable_benchmark_is_stabilizable_with_eigenvalue_one() {
        let plant = benchmark::unstable_plant();
        assert!(check_stabilizable(&plant).unwrap());
        assert!(check_detectable(&plant).unwrap());
        let mut ev = eigenvalues(plant.a()).unwrap();
        ev.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
        let expected = [
            Complex64::new(-2.0, -2.0),
            Complex64::new(-2.0, 0.0),
            Complex64::new(-2.0, 2.0),
            Complex64::new(1.0, 0.0),
        ];
        // The -2 eigenvalues are close together; sort by imaginary part within them.
        let mut head: Vec<Complex64> = ev[..3].to_vec();
        head.sort_by(|a, b| a.im.total_cmp(&b.im));
        for (got, want) in head.iter().chain(ev[3..].iter()).zip(expected.iter()) {
            assert!((got - want).norm() < 1e-8, "{got} vs {want}");
        }
    }

    #[test]
    fn uncontrollable_unstable_modes_are_not_stabilizable() {
        let plant = LtiPlant::new(DMatrix::identity(2, 2), DMatrix::zeros(2, 1), DMatrix::identity(2, 2)).unwrap();
        assert!(!check_stabilizable(&plant).unwrap());
    }

    #[test]
    fn full_state_measurement_is_detectable() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 3.0, -2.0, 0.5]);
        let plant = LtiPlant::new(
            a,
            DMatrix::from_column_slice(2, 1, &[0.0, 1.0]),
            DMatrix::identity(2, 2),
        )
        .unwrap();
        assert!(check_detectable(&plant).unwrap());
    }

    #[test]
    fn unobservable_unstable_mode_is_not_detectable() {
        let plant = LtiPlant::new(scalar(1.0), scalar(1.0), scalar(0.0)).unwrap();
        assert!(!check_detectable(&plant).unwrap());
    }

    #[test]
    fn rank_of_ab() {
        let zero = LtiPlant::new(scalar(0.0), scalar(0.0), scalar(1.0)).unwrap();
        assert!(!check_full_row_rank_ab(&zero));
        let invertible = LtiPlant::new(
            DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 0.0, -3.0]),
            DMatrix::zeros(2, 1),
            DMatrix::identity(2, 2),
        )
        .unwrap();
        assert!(check_full_row_rank_ab(&invertible));
    }

    #[test]
    fn rejects_inconsistent_dimensions() {
        assert!(LtiPlant::new(DMatrix::zeros(2, 3), DMatrix::zeros(2, 1), DMatrix::zeros(1, 2)).is_err());
        assert!(LtiPlant::new(DMatrix::zeros(2, 2), DMatrix::zeros(3, 1), DMatrix::zeros(1, 2)).is_err());
        assert!(LtiPlant::new(DMatrix::zeros(2, 2), DMatrix::zeros(2, 1), DMatrix::zeros(1, 3)).is_err());
        // m > n
        assert!(LtiPlant::new(DMatrix::zeros(1, 1), DMatrix::zeros(1, 2), DMatrix::zeros(1, 1)).is_err());
    }

    #[test]
    fn particular_solution_is_feasible() {
        let plant = benchmark::unstable_plant();
        let d = Disturbance::from_slice(&[-1.0, 3.0, 1.0, 2.0]);
        let point = plant.particular_solution(&d).unwrap();
        assert!(plant.equilibrium_residual(&point, &d) <= 1e-9 * (1.0 + d.norm()));
        assert!((&point.y - plant.c() * &point.x).norm() == 0.0);
    }

    #[test]
    fn stabilizability_invariant_under_similarity() {
        let plant = benchmark::unstable_plant();
        let t = DMatrix::from_row_slice(
            4,
            4,
            &[
                2.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.5, 0.0, 0.0, 0.0, 1.0, -1.0, 1.0, 0.0, 0.0, 3.0,
            ],
        );
        let t_inv = t.clone().try_inverse().unwrap();
        let similar = LtiPlant::new(&t * plant.a() * &t_inv, &t * plant.b(), plant.c() * &t_inv).unwrap();
        assert_eq!(
            check_stabilizable(&plant).unwrap(),
            check_stabilizable(&similar).unwrap()
        );
        let blocked = LtiPlant::new(
            DMatrix::identity(2, 2),
            DMatrix::from_column_slice(2, 1, &[1.0, 0.0]),
            DMatrix::identity(2, 2),
        )
        .unwrap();
        let t2 = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, -1.0, 1.0]);
        let t2_inv = t2.clone().try_inverse().unwrap();
        let blocked_similar =
            LtiPlant::new(&t2 * blocked.a() * &t2_inv, &t2 * blocked.b(), blocked.c() * &t2_inv).unwrap();
        assert!(!check_stabilizable(&blocked).unwrap());
        assert!(!check_stabilizable(&blocked_similar).unwrap());
    }
}
