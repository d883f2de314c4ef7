//! The four-state benchmark plants, disturbance schedule and gain grids used
//! throughout the tests and the bundled scenario files.

use nalgebra::{DMatrix, DVector};

use crate::objective::{self, SteadyStateObjective};
use crate::plant::{Disturbance, LtiPlant};
use crate::sim::DisturbanceSchedule;

const A_ROWS: [f64; 16] = [
    -1.0, -4.0, -1.0, 3.0, //
    1.0, -4.0, -1.0, -3.0, //
    -1.0, 4.0, -1.0, -9.0, //
    0.0, 0.0, 0.0, -4.0,
];
const B_COL: [f64; 4] = [0.0, 1.0, 0.0, 1.0];
const C_ROWS: [f64; 8] = [1.0, -1.0, 0.0, -4.0, 1.0, 0.0, 2.0, 0.0];

fn four_state(last_diagonal: f64) -> LtiPlant {
    let mut a = DMatrix::from_row_slice(4, 4, &A_ROWS);
    a[(3, 3)] = last_diagonal;
    LtiPlant::new(
        a,
        DMatrix::from_column_slice(4, 1, &B_COL),
        DMatrix::from_row_slice(2, 4, &C_ROWS),
    )
    .expect("benchmark plant is well formed")
}

/// Open-loop stable plant (n = 4, m = 1, p = 2).
pub fn stable_plant() -> LtiPlant {
    four_state(-4.0)
}

/// Same structure with an unstable eigenvalue at 1.
pub fn unstable_plant() -> LtiPlant {
    four_state(1.0)
}

/// Three constant disturbance levels switching at t = 5 and t = 10.
pub fn disturbance_schedule() -> DisturbanceSchedule {
    DisturbanceSchedule::new(vec![
        (0.0, Disturbance::from_slice(&[-1.0, 3.0, 1.0, 2.0])),
        (5.0, Disturbance::from_slice(&[2.0, -3.0, 0.0, 0.0])),
        (10.0, Disturbance::from_slice(&[1.0, 0.0, 0.0, -1.0])),
    ])
    .expect("benchmark schedule is well formed")
}

/// `g(y, u) = y1^2 + y2^2 / 2 + u^2 / 2`, sector [1, 2].
pub fn quadratic_cost() -> SteadyStateObjective {
    objective::quadratic_objective(
        DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 1.0, 1.0])),
        DVector::zeros(3),
    )
    .expect("diagonal PSD")
}

/// `{0.2, 0.4, ..., 2.0}`.
pub fn linear_gain_grid() -> Vec<f64> {
    (1..=10).map(|k| k as f64 / 5.0).collect()
}

/// `{1e-3, 1e-2, ..., 1e3}`.
pub fn log_gain_grid() -> Vec<f64> {
    vec![1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2, 1e3]
}
