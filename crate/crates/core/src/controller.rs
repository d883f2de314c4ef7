//! The feedback law: error signal `e = −Rᵀ∇g(y, u)`, integrator `η̇ = e`, and
//! either the PI input `u = K_I η + K_P e` or a dynamic stabilizer driven by
//! `σ = (y, η, e)`.
//!
//! Because `e` depends on `u` whenever `∇g` does, the input equation is
//! implicit. It is solved by damped Newton iteration at every evaluation.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kkt::KktGeometry;
use crate::linalg;
use crate::objective::{ObjectiveKind, SteadyStateObjective};
use crate::plant::LtiPlant;

/// Largest accepted condition number of `K_I`.
pub const MAX_KI_CONDITION: f64 = 1e12;
pub const LOOP_MAX_ITERATIONS: usize = 100;
/// Convergence when `‖F(u)‖ ≤ LOOP_TOL·(1 + ‖u‖)`.
pub const LOOP_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiGains {
    #[serde(with = "crate::serde_mat::matrix")]
    kp: DMatrix<f64>,
    #[serde(with = "crate::serde_mat::matrix")]
    ki: DMatrix<f64>,
}

impl PiGains {
    pub fn new(kp: DMatrix<f64>, ki: DMatrix<f64>) -> Result<Self> {
        if !kp.is_square() || kp.shape() != ki.shape() || kp.nrows() == 0 {
            return Err(Error::dim(format!(
                "K_P ({}x{}) and K_I ({}x{}) must be square of equal size",
                kp.nrows(),
                kp.ncols(),
                ki.nrows(),
                ki.ncols()
            )));
        }
        if kp.iter().chain(ki.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("gains must be finite".into()));
        }
        let cond = linalg::condition_number(&ki);
        if !(cond < MAX_KI_CONDITION) {
            return Err(Error::InvalidInput(format!(
                "K_I must be invertible (condition number {cond:.3e})"
            )));
        }
        Ok(Self { kp, ki })
    }

    /// `K_P = k_p·I_m`, `K_I = k_i·I_m`.
    pub fn scalar(m: usize, kp: f64, ki: f64) -> Result<Self> {
        Self::new(DMatrix::identity(m, m) * kp, DMatrix::identity(m, m) * ki)
    }

    pub fn kp(&self) -> &DMatrix<f64> {
        &self.kp
    }

    pub fn ki(&self) -> &DMatrix<f64> {
        &self.ki
    }

    pub fn m(&self) -> usize {
        self.kp.nrows()
    }

    /// `η̄ = K_I⁻¹ ū`.
    pub fn integrator_for(&self, u: &DVector<f64>) -> DVector<f64> {
        self.ki.clone().lu().solve(u).expect("K_I checked invertible")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerState {
    #[serde(with = "crate::serde_mat::vector")]
    pub eta: DVector<f64>,
}

/// `ẋ_s = A_s x_s + B_s σ`, `u = C_s x_s + D_s σ` with `σ = (y, η, e)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicStabilizer {
    #[serde(with = "crate::serde_mat::matrix")]
    a_s: DMatrix<f64>,
    #[serde(with = "crate::serde_mat::matrix")]
    b_s: DMatrix<f64>,
    #[serde(with = "crate::serde_mat::matrix")]
    c_s: DMatrix<f64>,
    #[serde(with = "crate::serde_mat::matrix")]
    d_s: DMatrix<f64>,
    p: usize,
}

impl DynamicStabilizer {
    pub fn new(a_s: DMatrix<f64>, b_s: DMatrix<f64>, c_s: DMatrix<f64>, d_s: DMatrix<f64>, p: usize) -> Result<Self> {
        let ns = a_s.nrows();
        let m = c_s.nrows();
        if !a_s.is_square() || m == 0 {
            return Err(Error::dim("A_s must be square and C_s must have m >= 1 rows"));
        }
        let sigma = p + 2 * m;
        if b_s.shape() != (ns, sigma) || c_s.ncols() != ns || d_s.shape() != (m, sigma) {
            return Err(Error::dim(format!(
                "stabilizer blocks inconsistent: A_s {ns}x{ns}, B_s {}x{}, C_s {}x{}, D_s {}x{} (sigma has p + 2m = {sigma} entries)",
                b_s.nrows(),
                b_s.ncols(),
                c_s.nrows(),
                c_s.ncols(),
                d_s.nrows(),
                d_s.ncols()
            )));
        }
        Ok(Self { a_s, b_s, c_s, d_s, p })
    }

    /// The PI law as a stateless stabilizer: `D_s = [0, K_I, K_P]`.
    pub fn from_pi(gains: &PiGains, p: usize) -> Self {
        let m = gains.m();
        let d_s = linalg::hcat(&linalg::hcat(&DMatrix::zeros(m, p), gains.ki()), gains.kp());
        Self {
            a_s: DMatrix::zeros(0, 0),
            b_s: DMatrix::zeros(0, p + 2 * m),
            c_s: DMatrix::zeros(m, 0),
            d_s,
            p,
        }
    }

    pub fn zero(ns: usize, p: usize, m: usize) -> Self {
        Self {
            a_s: DMatrix::zeros(ns, ns),
            b_s: DMatrix::zeros(ns, p + 2 * m),
            c_s: DMatrix::zeros(m, ns),
            d_s: DMatrix::zeros(m, p + 2 * m),
            p,
        }
    }

    pub fn a_s(&self) -> &DMatrix<f64> {
        &self.a_s
    }
    pub fn b_s(&self) -> &DMatrix<f64> {
        &self.b_s
    }
    pub fn c_s(&self) -> &DMatrix<f64> {
        &self.c_s
    }
    pub fn d_s(&self) -> &DMatrix<f64> {
        &self.d_s
    }

    pub fn order(&self) -> usize {
        self.a_s.nrows()
    }
    pub fn m(&self) -> usize {
        self.c_s.nrows()
    }
    pub fn p(&self) -> usize {
        self.p
    }

    fn d_block(&self, offset: usize, width: usize) -> DMatrix<f64> {
        self.d_s.columns(offset, width).into_owned()
    }

    fn b_block(&self, offset: usize, width: usize) -> DMatrix<f64> {
        self.b_s.columns(offset, width).into_owned()
    }

    /// The `e`-channel feedthrough, which closes the algebraic loop.
    pub fn d_e(&self) -> DMatrix<f64> {
        self.d_block(self.p + self.m(), self.m())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ControllerConfig {
    Pi(PiGains),
    Stabilizer(DynamicStabilizer),
}

impl ControllerConfig {
    /// Everything as a stabilizer (PI becomes a stateless one).
    pub fn as_stabilizer(&self, p: usize) -> DynamicStabilizer {
        match self {
            ControllerConfig::Pi(g) => DynamicStabilizer::from_pi(g, p),
            ControllerConfig::Stabilizer(s) => s.clone(),
        }
    }

    pub fn stabilizer_order(&self) -> usize {
        match self {
            ControllerConfig::Pi(_) => 0,
            ControllerConfig::Stabilizer(s) => s.order(),
        }
    }

    pub fn m(&self) -> usize {
        match self {
            ControllerConfig::Pi(g) => g.m(),
            ControllerConfig::Stabilizer(s) => s.m(),
        }
    }
}

/// `e = −Rᵀ∇g(y, u)`.
pub fn error_signal(
    geometry: &KktGeometry,
    objective: &SteadyStateObjective,
    y: &DVector<f64>,
    u: &DVector<f64>,
) -> DVector<f64> {
    -(geometry.r().transpose() * objective.gradient(y, u))
}

/// Outcome of an algebraic-loop solve.
#[derive(Debug, Clone, PartialEq)]
pub struct LoopSolution {
    pub u: DVector<f64>,
    pub e: DVector<f64>,
    pub iterations: usize,
    pub residual: f64,
}

/// Solves `u = base + K e(y, u)` by damped Newton from `u0`.
pub fn solve_loop(
    geometry: &KktGeometry,
    objective: &SteadyStateObjective,
    base: &DVector<f64>,
    k: &DMatrix<f64>,
    y: &DVector<f64>,
    u0: &DVector<f64>,
) -> Result<LoopSolution> {
    let m = base.len();
    if k.iter().all(|&v| v == 0.0) {
        let e = error_signal(geometry, objective, y, base);
        return Ok(LoopSolution {
            u: base.clone(),
            e,
            iterations: 0,
            residual: 0.0,
        });
    }
    let residual_at = |u: &DVector<f64>| {
        let e = error_signal(geometry, objective, y, u);
        let f = u - base - k * &e;
        (f, e)
    };
    let rt = geometry.r().transpose();
    let analytic = match objective.kind() {
        ObjectiveKind::Quadratic { h, .. } => {
            let p = y.len();
            Some(DMatrix::identity(m, m) + k * &rt * h.columns(p, m))
        }
        _ => None,
    };

    let mut u = u0.clone();
    let (mut f, mut e) = residual_at(&u);
    let mut fnorm = f.norm();
    for iter in 0..=LOOP_MAX_ITERATIONS {
        if fnorm <= LOOP_TOL * (1.0 + u.norm()) {
            return Ok(LoopSolution {
                u,
                e,
                iterations: iter,
                residual: fnorm,
            });
        }
        if iter == LOOP_MAX_ITERATIONS {
            break;
        }
        let jac = match &analytic {
            Some(j) => j.clone(),
            None => {
                let mut j = DMatrix::zeros(m, m);
                for c in 0..m {
                    let h = 1e-7 * (1.0 + u[c].abs());
                    let mut up = u.clone();
                    up[c] += h;
                    j.set_column(c, &((residual_at(&up).0 - &f) / h));
                }
                j
            }
        };
        let Some(step) = jac.lu().solve(&f) else {
            break;
        };
        let mut t = 1.0;
        let mut improved = false;
        for _ in 0..30 {
            let trial = &u - &step * t;
            let (tf, te) = residual_at(&trial);
            let tn = tf.norm();
            if tn.is_finite() && tn < fnorm {
                u = trial;
                f = tf;
                e = te;
                fnorm = tn;
                improved = true;
                break;
            }
            t *= 0.5;
        }
        if !improved {
            break;
        }
    }
    Err(Error::IllPosedLoop {
        residual: fnorm,
        iterations: LOOP_MAX_ITERATIONS,
    })
}

/// The PI input at `(η, y)`; `warm` is the previous input, if any.
pub fn resolve_input(
    gains: &PiGains,
    geometry: &KktGeometry,
    objective: &SteadyStateObjective,
    eta: &DVector<f64>,
    y: &DVector<f64>,
    warm: Option<&DVector<f64>>,
) -> Result<LoopSolution> {
    let base = gains.ki() * eta;
    let u0 = warm.cloned().unwrap_or_else(|| base.clone());
    solve_loop(geometry, objective, &base, gains.kp(), y, &u0)
}

/// `(η̇, u)` for the PI law.
pub fn pi_dynamics(
    gains: &PiGains,
    geometry: &KktGeometry,
    objective: &SteadyStateObjective,
    state: &ControllerState,
    y: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let sol = resolve_input(gains, geometry, objective, &state.eta, y, None)?;
    Ok((sol.e, sol.u))
}

/// Linear evaluation `(ẋ_s, u)` for a given `σ = (y, η, e)`.
pub fn stabilizer_dynamics(
    stab: &DynamicStabilizer,
    x_s: &DVector<f64>,
    sigma: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>) {
    (&stab.a_s * x_s + &stab.b_s * sigma, &stab.c_s * x_s + &stab.d_s * sigma)
}

/// The stabilizer input with the `e`-channel loop resolved.
pub fn resolve_stabilizer_input(
    stab: &DynamicStabilizer,
    geometry: &KktGeometry,
    objective: &SteadyStateObjective,
    x_s: &DVector<f64>,
    eta: &DVector<f64>,
    y: &DVector<f64>,
    warm: Option<&DVector<f64>>,
) -> Result<LoopSolution> {
    let (p, m) = (stab.p, stab.m());
    let base = &stab.c_s * x_s + stab.d_block(0, p) * y + stab.d_block(p, m) * eta;
    let u0 = warm.cloned().unwrap_or_else(|| base.clone());
    solve_loop(geometry, objective, &base, &stab.d_e(), y, &u0)
}

/// Closed-loop controller evaluated by the simulator. Holds the warm-start
/// input between calls, so use one instance per simulation.
#[derive(Debug, Clone)]
pub struct Controller {
    stab: DynamicStabilizer,
    geometry: KktGeometry,
    objective: SteadyStateObjective,
    last_u: Option<DVector<f64>>,
}

/// One evaluation of the controller.
#[derive(Debug, Clone)]
pub struct ControllerOutput {
    /// Derivative of the controller state `(η, x_s)`.
    pub state_dot: DVector<f64>,
    pub u: DVector<f64>,
    pub e: DVector<f64>,
}

impl Controller {
    pub fn new(
        config: &ControllerConfig,
        geometry: KktGeometry,
        objective: SteadyStateObjective,
        p: usize,
    ) -> Result<Self> {
        let stab = config.as_stabilizer(p);
        if stab.m() != geometry.m() || stab.p() != p {
            return Err(Error::dim("controller does not match plant dimensions"));
        }
        if objective.dim() != p + stab.m() {
            return Err(Error::dim("objective does not match p + m"));
        }
        Ok(Self {
            stab,
            geometry,
            objective,
            last_u: None,
        })
    }

    /// `m + n_s`.
    pub fn state_dim(&self) -> usize {
        self.stab.m() + self.stab.order()
    }

    pub fn stabilizer(&self) -> &DynamicStabilizer {
        &self.stab
    }

    pub fn reset_warm_start(&mut self) {
        self.last_u = None;
    }

    /// Controller state is `(η, x_s)`.
    pub fn evaluate(&mut self, state: &DVector<f64>, y: &DVector<f64>) -> Result<ControllerOutput> {
        let m = self.stab.m();
        let eta = state.rows(0, m).into_owned();
        let xs = state.rows(m, self.stab.order()).into_owned();
        let sol = resolve_stabilizer_input(
            &self.stab,
            &self.geometry,
            &self.objective,
            &xs,
            &eta,
            y,
            self.last_u.as_ref(),
        )?;
        self.last_u = Some(sol.u.clone());
        let sigma = linalg::vcat_vec(&linalg::vcat_vec(y, &eta), &sol.e);
        let (xs_dot, _) = stabilizer_dynamics(&self.stab, &xs, &sigma);
        Ok(ControllerOutput {
            state_dot: linalg::vcat_vec(&sol.e, &xs_dot),
            u: sol.u,
            e: sol.e,
        })
    }
}

/// Closed-loop state matrix on `(x, η, x_s)` when `∇g` is affine with
/// Hessian `h`, i.e. the exact error dynamics for a quadratic objective.
pub fn linearized_closed_loop(
    plant: &LtiPlant,
    geometry: &KktGeometry,
    config: &ControllerConfig,
    h: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let (n, m, p) = (plant.n(), plant.m(), plant.p());
    let stab = config.as_stabilizer(p);
    let ns = stab.order();
    if h.shape() != (p + m, p + m) {
        return Err(Error::dim("Hessian must be (p+m)x(p+m)"));
    }
    let rt = geometry.r().transpose();
    let g = &rt * h.columns(0, p) * plant.c();
    let hu = &rt * h.columns(p, m);
    let d_y = stab.d_block(0, p);
    let d_eta = stab.d_block(p, m);
    let d_e = stab.d_e();
    let w = (DMatrix::identity(m, m) + &d_e * &hu)
        .try_inverse()
        .ok_or(Error::IllPosedLoop {
            residual: f64::INFINITY,
            iterations: 0,
        })?;
    let ux = &w * (&d_y * plant.c() - &d_e * &g);
    let ueta = &w * &d_eta;
    let us = &w * stab.c_s();
    // e = -G x - Hu u
    let ex = -&g - &hu * &ux;
    let eeta = -&hu * &ueta;
    let es = -&hu * &us;
    let b_y = stab.b_block(0, p);
    let b_eta = stab.b_block(p, m);
    let b_e = stab.b_block(p + m, m);

    let rows_x = [plant.a() + plant.b() * &ux, plant.b() * &ueta, plant.b() * &us];
    let rows_eta = [ex.clone(), eeta.clone(), es.clone()];
    let rows_s = [
        &b_y * plant.c() + &b_e * &ex,
        &b_eta + &b_e * &eeta,
        stab.a_s() + &b_e * &es,
    ];
    let mut out = DMatrix::zeros(n + m + ns, n + m + ns);
    let offsets = [(0, n), (n, m), (n + m, ns)];
    for (bi, row) in [rows_x, rows_eta, rows_s].iter().enumerate() {
        for (bj, blk) in row.iter().enumerate() {
            out.view_mut((offsets[bi].0, offsets[bj].0), (offsets[bi].1, offsets[bj].1))
                .copy_from(blk);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchmark;
    use crate::kkt::build_kkt_geometry;
    use crate::objective::{cosh_example_objective, quadratic_objective, ComposedObjective};
    use crate::oracle;
    use crate::plant::Disturbance;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn singular_ki_is_rejected() {
        assert!(PiGains::scalar(1, 1.0, 0.0).is_err());
        let ki = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(PiGains::new(DMatrix::identity(2, 2), ki).is_err());
    }

    #[test]
    fn zero_kp_is_explicit() {
        let plant = benchmark::stable_plant();
        let geo = build_kkt_geometry(&plant).unwrap();
        let gains = PiGains::scalar(1, 0.0, 5.0).unwrap();
        let eta = DVector::from_vec(vec![2.0]);
        let y = DVector::from_vec(vec![0.3, -0.7]);
        let sol = resolve_input(&gains, &geo, &cosh_example_objective(), &eta, &y, None).unwrap();
        assert_eq!(sol.u[0], 10.0);
        assert_eq!(sol.iterations, 0);
    }

    #[test]
    fn quadratic_loop_matches_direct_solve() {
        let plant = benchmark::unstable_plant();
        let geo = build_kkt_geometry(&plant).unwrap();
        let h = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.5, 0.3, 1.0, -0.2, 0.5, -0.2, 1.5]);
        let q = DVector::from_vec(vec![0.1, -0.4, 0.2]);
        let obj = quadratic_objective(h.clone(), q.clone()).unwrap();
        let gains = PiGains::scalar(1, 10.0, 5.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let eta = DVector::from_fn(1, |_, _| rng.gen_range(-3.0..3.0));
            let y = DVector::from_fn(2, |_, _| rng.gen_range(-3.0..3.0));
            let sol = resolve_input(&gains, &geo, &obj, &eta, &y, None).unwrap();
            // (I + K_P Rᵀ H_u) u = K_I η − K_P Rᵀ (H_y y + q)
            let rt = geo.r().transpose();
            let lhs = DMatrix::identity(1, 1) + gains.kp() * &rt * h.columns(2, 1);
            let rhs = gains.ki() * &eta - gains.kp() * &rt * (h.columns(0, 2) * &y + &q);
            let direct = lhs.lu().solve(&rhs).unwrap();
            assert_relative_eq!(sol.u, direct, epsilon = 1e-12);
            assert!(sol.iterations <= 1);
        }
    }

    #[test]
    fn cosh_loop_converges_and_is_deterministic() {
        let plant = benchmark::stable_plant();
        let geo = build_kkt_geometry(&plant).unwrap();
        let gains = PiGains::scalar(1, 10.0, 5.0).unwrap();
        let obj = cosh_example_objective();
        let eta = DVector::from_vec(vec![0.8]);
        let y = DVector::from_vec(vec![1.5, -2.0]);
        let a = resolve_input(&gains, &geo, &obj, &eta, &y, None).unwrap();
        let b = resolve_input(&gains, &geo, &obj, &eta, &y, None).unwrap();
        assert_eq!(a, b);
        let f = &a.u - gains.ki() * &eta - gains.kp() * error_signal(&geo, &obj, &y, &a.u);
        assert!(f.norm() <= 1e-10 * (1.0 + a.u.norm()));
    }

    #[test]
    fn equilibrium_at_optimizer_is_stationary() {
        let plant = benchmark::stable_plant();
        let geo = build_kkt_geometry(&plant).unwrap();
        let obj = cosh_example_objective();
        let f = ComposedObjective::new(obj.clone(), plant.c().clone()).unwrap();
        let d = Disturbance::from_slice(&[-1.0, 3.0, 1.0, 2.0]);
        let opt = oracle::solve_steady_state(&plant, &geo, &f, &d).unwrap();
        assert!(error_signal(&geo, &obj, &opt.y_star, &opt.u_star).norm() < 1e-8);
        let gains = PiGains::scalar(1, 10.0, 5.0).unwrap();
        let state = ControllerState {
            eta: gains.integrator_for(&opt.u_star),
        };
        let (eta_dot, u) = pi_dynamics(&gains, &geo, &obj, &state, &opt.y_star).unwrap();
        assert!(eta_dot.norm() < 1e-8);
        assert_relative_eq!(u, opt.u_star, epsilon = 1e-8);
    }

    #[test]
    fn flat_objective_gives_zero_error() {
        let plant = benchmark::stable_plant();
        let geo = build_kkt_geometry(&plant).unwrap();
        let flat = quadratic_objective(DMatrix::zeros(3, 3), DVector::zeros(3)).unwrap();
        let gains = PiGains::scalar(1, 2.0, 1.0).unwrap();
        let state = ControllerState { eta: DVector::zeros(1) };
        let (eta_dot, u) = pi_dynamics(&gains, &geo, &flat, &state, &DVector::from_vec(vec![3.0, -1.0])).unwrap();
        assert_eq!(eta_dot, DVector::zeros(1));
        assert_eq!(u, DVector::zeros(1));
    }

    #[test]
    fn pi_embedding_matches_pi_law() {
        let plant = benchmark::stable_plant();
        let geo = build_kkt_geometry(&plant).unwrap();
        let obj = cosh_example_objective();
        let gains = PiGains::scalar(1, 10.0, 5.0).unwrap();
        let stab = DynamicStabilizer::from_pi(&gains, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let eta = DVector::from_fn(1, |_, _| rng.gen_range(-2.0..2.0));
            let y = DVector::from_fn(2, |_, _| rng.gen_range(-2.0..2.0));
            let a = resolve_input(&gains, &geo, &obj, &eta, &y, None).unwrap();
            let b = resolve_stabilizer_input(&stab, &geo, &obj, &DVector::zeros(0), &eta, &y, None).unwrap();
            assert!((a.u - b.u).norm() <= 1e-12);
        }
    }

    #[test]
    fn zero_stabilizer_and_zero_sigma() {
        let stab = DynamicStabilizer::new(
            DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 1.0, -2.0]),
            DMatrix::from_element(2, 4, 0.5),
            DMatrix::from_row_slice(1, 2, &[3.0, -1.0]),
            DMatrix::from_element(1, 4, 0.25),
            2,
        )
        .unwrap();
        let xs = DVector::from_vec(vec![1.0, 2.0]);
        let (_, u) = stabilizer_dynamics(&stab, &xs, &DVector::zeros(4));
        assert_eq!(u, stab.c_s() * &xs);
        let zero = DynamicStabilizer::zero(2, 2, 1);
        let (_, u) = stabilizer_dynamics(&zero, &xs, &DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]));
        assert_eq!(u, DVector::zeros(1));
        assert!(DynamicStabilizer::new(
            DMatrix::zeros(2, 2),
            DMatrix::zeros(2, 3),
            DMatrix::zeros(1, 2),
            DMatrix::zeros(1, 4),
            2
        )
        .is_err());
    }

    #[test]
    fn linearization_matches_finite_differences() {
        let plant = benchmark::unstable_plant();
        let geo = build_kkt_geometry(&plant).unwrap();
        let obj = benchmark::quadratic_cost();
        let h = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 1.0, 1.0]));
        let stab = DynamicStabilizer::new(
            DMatrix::from_row_slice(1, 1, &[-1.0]),
            DMatrix::from_row_slice(1, 4, &[0.1, -0.2, 0.3, 0.4]),
            DMatrix::from_row_slice(1, 1, &[0.7]),
            DMatrix::from_row_slice(1, 4, &[0.2, 0.1, 1.5, 0.6]),
            2,
        )
        .unwrap();
        let config = ControllerConfig::Stabilizer(stab);
        let lin = linearized_closed_loop(&plant, &geo, &config, &h).unwrap();
        let mut ctl = Controller::new(&config, geo.clone(), obj, 2).unwrap();
        let rhs = |ctl: &mut Controller, s: &DVector<f64>| {
            let x = s.rows(0, 4).into_owned();
            let c = s.rows(4, 2).into_owned();
            let out = ctl.evaluate(&c, &plant.output(&x)).unwrap();
            let xd = plant.dynamics(&x, &out.u, &Disturbance::zeros(4));
            linalg::vcat_vec(&xd, &out.state_dot)
        };
        for j in 0..6 {
            let mut s = DVector::zeros(6);
            s[j] = 1.0;
            let col = rhs(&mut ctl, &s);
            assert_relative_eq!(col, lin.column(j).into_owned(), epsilon = 1e-9);
        }
    }
}
