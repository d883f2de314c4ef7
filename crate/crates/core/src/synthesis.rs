//! Dynamic stabilizer synthesis through a loop transformation and an H∞
//! output-feedback design.
//!
//! Write the centered gradient map as `Φ(z) = c·z + r·w̃` with
//! `c = (L+κ)/2`, `r = (L−κ)/2`. Then `w̃ = Φ̃(z) = (Φ(z) − c·z)/r` is an
//! incremental contraction. The shift `c` is absorbed into the plant and the
//! scale `r` into the input channel of `w̃`. The generalized plant has state
//! `(x̃, η̃)`, disturbance `w̃`, performance output `z = (ỹ, ũ)`, measurement
//! `σ = (y, η, e)` and control `u`:
//!
//! ```text
//! ẋ = A x + B u
//! η̇ = e = −c Rᵀ (C x, u) − r Rᵀ w̃
//! ```
//!
//! Any controller that makes the closed-loop gain from `w̃` to `z` smaller
//! than one stabilizes the loop by the small-gain theorem.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::controller::{ControllerConfig, DynamicStabilizer};
use crate::error::{Error, Result};
use crate::kkt::KktGeometry;
use crate::linalg;
use crate::objective::SteadyStateObjective;
use crate::plant::LtiPlant;
use crate::sdp::{self, BallConstraint, LmiBlock, SdpOptions, SdpProblem, SdpVerdict};
use crate::sim::{self, DisturbanceSchedule, SegmentMetrics, SimulationSettings, Trace};

/// Terminal tracking error accepted per segment by [`validate_synthesis`].
pub const VALIDATION_TOL: f64 = 1e-2;

/// Relative eigenvalue margin required when checking a bounded-real certificate.
const CHECK_RTOL: f64 = 1e-12;

/// Linear system `(A, B, C, D)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSpace {
    #[serde(with = "crate::serde_mat::matrix")]
    pub a: DMatrix<f64>,
    #[serde(with = "crate::serde_mat::matrix")]
    pub b: DMatrix<f64>,
    #[serde(with = "crate::serde_mat::matrix")]
    pub c: DMatrix<f64>,
    #[serde(with = "crate::serde_mat::matrix")]
    pub d: DMatrix<f64>,
}

impl StateSpace {
    /// `C (jωI − A)⁻¹ B + D`.
    pub fn frequency_response(&self, omega: f64) -> DMatrix<Complex64> {
        let n = self.a.nrows();
        let to_c = |m: &DMatrix<f64>| m.map(|v| Complex64::new(v, 0.0));
        let shifted = DMatrix::<Complex64>::identity(n, n) * Complex64::new(0.0, omega) - to_c(&self.a);
        let x = shifted
            .lu()
            .solve(&to_c(&self.b))
            .unwrap_or_else(|| DMatrix::from_element(n, self.b.ncols(), Complex64::new(f64::INFINITY, 0.0)));
        to_c(&self.c) * x + to_c(&self.d)
    }

    pub fn gain_at(&self, omega: f64) -> f64 {
        self.frequency_response(omega)
            .singular_values()
            .iter()
            .cloned()
            .fold(0.0, f64::max)
    }

    /// Peak gain over a logarithmic frequency sweep with local refinement.
    /// A lower bound on the H∞ norm.
    pub fn peak_gain(&self) -> f64 {
        let fastest = linalg::eigenvalues(&self.a)
            .map(|ev| ev.iter().map(|z| z.norm()).fold(1.0, f64::max))
            .unwrap_or(1.0);
        let top = (100.0 * fastest).log10().max(4.0);
        let points = 2000;
        let grid: Vec<f64> = std::iter::once(0.0)
            .chain((0..points).map(|i| 10f64.powf(-4.0 + (top + 4.0) * i as f64 / (points - 1) as f64)))
            .collect();
        let gains: Vec<f64> = grid.iter().map(|&w| self.gain_at(w)).collect();
        let (best, _) = gains
            .iter()
            .enumerate()
            .fold((0, f64::MIN), |acc, (i, &g)| if g > acc.1 { (i, g) } else { acc });
        let lo = grid[best.saturating_sub(1)];
        let hi = grid[(best + 1).min(grid.len() - 1)];
        // Golden-section refinement on the bracketing interval.
        let (mut a, mut b) = (lo, hi);
        let phi = 0.5 * (5f64.sqrt() - 1.0);
        for _ in 0..60 {
            let c1 = b - phi * (b - a);
            let c2 = a + phi * (b - a);
            if self.gain_at(c1) > self.gain_at(c2) {
                b = c2;
            } else {
                a = c1;
            }
        }
        gains[best].max(self.gain_at(0.5 * (a + b)))
    }
}

/// Largest RMS gain seen over `count` random sinusoidal probes
/// `w(t) = v·sin(ωt)` in steady state, with `ω` log-uniform on
/// `[1e-3, 1e3]` and `v` a random unit direction.
pub fn probe_gain(sys: &StateSpace, count: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nw = sys.b.ncols();
    (0..count)
        .map(|_| {
            let omega = 10f64.powf(rng.gen_range(-3.0..3.0));
            let v = DVector::from_fn(nw, |_, _| rng.gen_range(-1.0..1.0));
            let v = v.normalize().map(|x| Complex64::new(x, 0.0));
            (sys.frequency_response(omega) * v).norm()
        })
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedPlant {
    #[serde(with = "crate::serde_mat::matrix")]
    pub ap: DMatrix<f64>,
    #[serde(with = "crate::serde_mat::matrix")]
    pub b1: DMatrix<f64>,
    #[serde(with = "crate::serde_mat::matrix")]
    pub b2: DMatrix<f64>,
    #[serde(with = "crate::serde_mat::matrix")]
    pub c1: DMatrix<f64>,
    #[serde(with = "crate::serde_mat::matrix")]
    pub d11: DMatrix<f64>,
    #[serde(with = "crate::serde_mat::matrix")]
    pub d12: DMatrix<f64>,
    #[serde(with = "crate::serde_mat::matrix")]
    pub c2: DMatrix<f64>,
    #[serde(with = "crate::serde_mat::matrix")]
    pub d21: DMatrix<f64>,
    #[serde(with = "crate::serde_mat::matrix")]
    pub d22: DMatrix<f64>,
    /// `(L + κ)/2`.
    pub center: f64,
    /// `(L − κ)/2`.
    pub radius: f64,
    pub p: usize,
    pub m: usize,
}

impl AugmentedPlant {
    pub fn state_dim(&self) -> usize {
        self.ap.nrows()
    }

    /// `Φ̃(v) = (Φ(v) − c·v)/r` for a given `Φ(v)`.
    pub fn transform_nonlinearity(&self, phi_v: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        (phi_v - v * self.center) / self.radius
    }
}

pub fn loop_transform(plant: &LtiPlant, geometry: &KktGeometry, kappa: f64, lipschitz: f64) -> Result<AugmentedPlant> {
    if !(kappa > 0.0 && lipschitz >= kappa && lipschitz.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "loop transformation needs 0 < kappa <= L < inf, got [{kappa}, {lipschitz}]"
        )));
    }
    let (n, m, p) = (plant.n(), plant.m(), plant.p());
    let center = 0.5 * (lipschitz + kappa);
    let radius = 0.5 * (lipschitz - kappa);
    let rt = geometry.r().transpose();
    let ry = rt.columns(0, p).into_owned();
    let ru = rt.columns(p, m).into_owned();
    let z = |r: usize, c: usize| DMatrix::<f64>::zeros(r, c);
    let i_m = DMatrix::<f64>::identity(m, m);

    // e = −c Ryᵀ C x − c Ruᵀ u − r Rᵀ w̃
    let e_x = &ry * plant.c() * -center;
    let e_u = &ru * -center;
    let e_w = &rt * -radius;

    let ap = linalg::block(&[&[plant.a(), &z(n, m)], &[&e_x, &z(m, m)]]);
    let b1 = linalg::vcat(&z(n, p + m), &e_w);
    let b2 = linalg::vcat(plant.b(), &e_u);
    let c1 = linalg::vcat(&linalg::hcat(plant.c(), &z(p, m)), &z(m, n + m));
    let d11 = z(p + m, p + m);
    let d12 = linalg::vcat(&z(p, m), &i_m);
    let c2 = linalg::block(&[&[plant.c(), &z(p, m)], &[&z(m, n), &i_m], &[&e_x, &z(m, m)]]);
    let d21 = linalg::vcat(&z(p + m, p + m), &e_w);
    let d22 = linalg::vcat(&z(p + m, m), &e_u);
    Ok(AugmentedPlant {
        ap,
        b1,
        b2,
        c1,
        d11,
        d12,
        c2,
        d21,
        d22,
        center,
        radius,
        p,
        m,
    })
}

/// Closed loop from `w̃` to `z` with the stabilizer
/// `ẋ_s = A_s x_s + B_s σ`, `u = C_s x_s + D_s σ`.
pub fn close_loop(aug: &AugmentedPlant, stab: &DynamicStabilizer) -> Result<StateSpace> {
    let np = aug.state_dim();
    let ns = stab.order();
    let m = aug.m;
    let loop_gain = DMatrix::identity(m, m) - stab.d_s() * &aug.d22;
    let w = loop_gain.try_inverse().ok_or(Error::IllPosedLoop {
        residual: f64::INFINITY,
        iterations: 0,
    })?;
    // u = Ux xp + Us xs + Uw w
    let ux = &w * stab.d_s() * &aug.c2;
    let us = &w * stab.c_s();
    let uw = &w * stab.d_s() * &aug.d21;
    // σ = C2 xp + D21 w + D22 u
    let sx = &aug.c2 + &aug.d22 * &ux;
    let ss = &aug.d22 * &us;
    let sw = &aug.d21 + &aug.d22 * &uw;
    let a = linalg::block(&[
        &[&(&aug.ap + &aug.b2 * &ux), &(&aug.b2 * &us)],
        &[&(stab.b_s() * &sx), &(stab.a_s() + stab.b_s() * &ss)],
    ]);
    let b = linalg::vcat(&(&aug.b1 + &aug.b2 * &uw), &(stab.b_s() * &sw));
    let c = linalg::hcat(&(&aug.c1 + &aug.d12 * &ux), &(&aug.d12 * &us));
    let d = &aug.d11 + &aug.d12 * &uw;
    debug_assert_eq!(a.nrows(), np + ns);
    Ok(StateSpace { a, b, c, d })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundedRealCertificate {
    #[serde(with = "crate::serde_mat::matrix")]
    pub p: DMatrix<f64>,
    pub gamma: f64,
    /// `−λ_max` of the bounded-real matrix at `(P, γ)`, measured in the
    /// balanced coordinates the check runs in.
    pub min_eig_margin: f64,
    pub p_min_eig: f64,
}

fn bounded_real_matrix(sys: &StateSpace, p: &DMatrix<f64>, gamma: f64) -> DMatrix<f64> {
    let (nw, nz) = (sys.b.ncols(), sys.c.nrows());
    let top = &sys.a.transpose() * p + p * &sys.a;
    let m = linalg::block(&[
        &[&top, &(p * &sys.b), &sys.c.transpose()],
        &[
            &(sys.b.transpose() * p),
            &(DMatrix::identity(nw, nw) * -gamma),
            &sys.d.transpose(),
        ],
        &[&sys.c, &sys.d, &(DMatrix::identity(nz, nz) * -gamma)],
    ]);
    linalg::symmetrize(&m)
}

/// Solves `AᵀP + PA = −I` by vectorization.
fn lyapunov_solution(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    let i = DMatrix::<f64>::identity(n, n);
    let op = i.kronecker(&a.transpose()) + a.transpose().kronecker(&i);
    let rhs = DVector::from_iterator(n * n, (-&i).iter().copied());
    let sol = op.lu().solve(&rhs)?;
    Some(linalg::symmetrize(&DMatrix::from_column_slice(n, n, sol.as_slice())))
}

/// Smallest `γ` certified by the bounded-real inequality
/// `[AᵀP+PA, PB, Cᵀ; BᵀP, −γI, Dᵀ; C, D, −γI] ≺ 0`, `P ≻ 0`.
pub fn bounded_real_certificate(sys: &StateSpace) -> Result<BoundedRealCertificate> {
    let n = sys.a.nrows();
    if linalg::spectral_abscissa(&sys.a)? >= 0.0 {
        return Err(Error::SynthesisFailed(f64::INFINITY));
    }
    // Solve in coordinates where the previous multiplier is the identity.
    // A badly scaled P otherwise stalls the Newton steps well short of the
    // optimal level.
    let mut s = DMatrix::<f64>::identity(n, n);
    let mut gamma_opt = f64::INFINITY;
    let mut iterations = 0;
    let mut scaled;
    let mut round = 0;
    loop {
        let s_inv = s.clone().try_inverse().ok_or(Error::SynthesisFailed(f64::NAN))?;
        scaled = StateSpace {
            a: &s * &sys.a * &s_inv,
            b: &s * &sys.b,
            c: &sys.c * &s_inv,
            d: sys.d.clone(),
        };
        let (p_scaled, gamma, newton) = bounded_real_solve(&scaled, None)?;
        iterations += newton;
        let previous = gamma_opt;
        gamma_opt = gamma_opt.min(gamma);
        round += 1;
        if round == 4 || (round > 1 && gamma >= previous * (1.0 - 1e-6)) {
            break;
        }
        let p = linalg::symmetrize(&(s.transpose() * &p_scaled * &s));
        let eig = p.symmetric_eigen();
        if eig.eigenvalues.min() <= 0.0 {
            break;
        }
        s = &eig.eigenvectors * DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt)) * eig.eigenvectors.transpose();
    }
    // Re-center slightly above the optimal level and check there. The check
    // runs in the solve coordinates; the similarity transform leaves the
    // transfer function unchanged.
    for rel in [1e-7, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2] {
        let level = gamma_opt * (1.0 + rel) + 1e-12;
        let (p_scaled, gamma, newton) = bounded_real_solve(&scaled, Some(level))?;
        iterations += newton;
        let brl = bounded_real_matrix(&scaled, &p_scaled, gamma);
        let lmax = linalg::max_sym_eigenvalue(&brl);
        let pmin = linalg::min_sym_eigenvalue(&p_scaled);
        log::debug!("bounded-real check at {gamma}: max eig {lmax:e}, min eig P {pmin:e}");
        if lmax < -CHECK_RTOL * brl.norm() && pmin > CHECK_RTOL * p_scaled.norm() {
            return Ok(BoundedRealCertificate {
                p: linalg::symmetrize(&(s.transpose() * &p_scaled * &s)),
                gamma,
                min_eig_margin: -lmax,
                p_min_eig: pmin,
            });
        }
    }
    Err(Error::SolverUndecided(iterations))
}

/// Minimizes `γ` over `P` by the barrier solver, starting from the
/// Lyapunov solution. With a level given, `P` is centered at that level
/// instead. Returns `(P, γ, Newton steps)` without verification.
fn bounded_real_solve(sys: &StateSpace, level: Option<f64>) -> Result<(DMatrix<f64>, f64, usize)> {
    let n = sys.a.nrows();
    let p0 = lyapunov_solution(&sys.a).ok_or(Error::SynthesisFailed(f64::INFINITY))?;
    let (basis, weights) = sdp::symmetric_basis(n);
    let k = basis.len();
    let size = n + sys.b.ncols() + sys.c.nrows();
    let f0 = bounded_real_matrix(sys, &DMatrix::zeros(n, n), 0.0);
    let fi: Vec<DMatrix<f64>> = basis.iter().map(|b| bounded_real_matrix(sys, b, 0.0) - &f0).collect();
    // t = −γ enters on the two identity blocks.
    let mut margin = DMatrix::identity(size, size);
    margin.view_mut((0, 0), (n, n)).fill(0.0);

    let mut prob = SdpProblem::new(k);
    prob.set_t_max(level.map_or(0.0, |g| -g));
    prob.add_block(LmiBlock {
        f0,
        fi,
        margin: Some(margin),
    })?;
    prob.add_block(LmiBlock {
        f0: DMatrix::zeros(n, n),
        fi: basis.iter().map(|b| -b).collect(),
        margin: None,
    })?;
    let coords: Vec<f64> = (0..n)
        .flat_map(|i| (i..n).map(move |j| (i, j)))
        .map(|(i, j)| p0[(i, j)])
        .collect();
    prob.add_ball(BallConstraint {
        indices: (0..k).collect(),
        weights,
        radius: 1e3 * (1.0 + p0.norm()),
    })?;
    let opts = SdpOptions {
        stop_when_infeasible: false,
        ..Default::default()
    };
    let sol = prob.maximize_margin(&DVector::from_vec(coords), &opts)?;
    log::debug!(
        "bounded-real solve: gamma {}, lower bound {}, {:?} after {} Newton steps",
        -sol.t,
        -sol.upper_bound,
        sol.verdict,
        sol.newton_iterations
    );
    Ok((
        sdp::symmetric_from_coords(n, sol.x.as_slice()),
        -sol.t,
        sol.newton_iterations,
    ))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthesisOptions {
    pub gamma_lo: f64,
    pub gamma_hi: f64,
    /// Relative width at which the bisection stops.
    pub rel_tol: f64,
    /// Design for decay rate `a`: the plant matrix is replaced by `A + aI`
    /// during the design, which moves closed-loop poles left of `−a`.
    pub decay_rate: f64,
    /// Design at `γ_min + θ(1 − γ_min)` rather than at the bisection limit.
    pub design_fraction: f64,
}

impl Default for SynthesisOptions {
    fn default() -> Self {
        Self {
            gamma_lo: 1e-3,
            gamma_hi: 1e3,
            rel_tol: 1e-2,
            decay_rate: 0.0,
            design_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisResult {
    pub stabilizer: DynamicStabilizer,
    /// Certified gain of the actual closed loop.
    pub gamma: f64,
    /// Smallest feasible design level found by bisection.
    pub gamma_min: f64,
    /// Level the controller was designed at.
    pub gamma_design: f64,
    pub decay_rate: f64,
    pub certificate: BoundedRealCertificate,
}

/// Decision variables `(X, Y, Â, B̂, Ĉ)` of the change-of-variables LMI.
struct SynthesisLmi {
    np: usize,
    ny: usize,
    nu: usize,
    nw: usize,
    nz: usize,
}

struct SynthesisVars {
    x: DMatrix<f64>,
    y: DMatrix<f64>,
    ah: DMatrix<f64>,
    bh: DMatrix<f64>,
    ch: DMatrix<f64>,
}

impl SynthesisLmi {
    fn sym_len(&self) -> usize {
        self.np * (self.np + 1) / 2
    }

    fn num_vars(&self) -> usize {
        2 * self.sym_len() + self.np * self.np + self.np * self.ny + self.nu * self.np
    }

    /// Offsets of `(X, Y, Â, B̂, Ĉ)` in the coordinate vector.
    fn offsets(&self) -> [usize; 5] {
        let s = self.sym_len();
        let o2 = 2 * s;
        let o3 = o2 + self.np * self.np;
        let o4 = o3 + self.np * self.ny;
        [0, s, o2, o3, o4]
    }

    fn unpack(&self, v: &[f64]) -> SynthesisVars {
        let [ox, oy, oa, ob, oc] = self.offsets();
        let s = self.sym_len();
        let np = self.np;
        SynthesisVars {
            x: sdp::symmetric_from_coords(np, &v[ox..ox + s]),
            y: sdp::symmetric_from_coords(np, &v[oy..oy + s]),
            ah: DMatrix::from_column_slice(np, np, &v[oa..oa + np * np]),
            bh: DMatrix::from_column_slice(np, self.ny, &v[ob..ob + np * self.ny]),
            ch: DMatrix::from_column_slice(self.nu, np, &v[oc..oc + self.nu * np]),
        }
    }

    fn main_block(&self, aug: &AugmentedPlant, ap: &DMatrix<f64>, v: &SynthesisVars, gamma: f64) -> DMatrix<f64> {
        let b2c = &aug.b2 * &v.ch;
        let bc2 = &v.bh * &aug.c2;
        let m11 = ap * &v.y + &v.y * ap.transpose() + &b2c + b2c.transpose();
        let m21 = &v.ah + ap.transpose();
        let m22 = ap.transpose() * &v.x + &v.x * ap + &bc2 + bc2.transpose();
        let m31 = aug.b1.transpose();
        let m32 = (&v.x * &aug.b1 + &v.bh * &aug.d21).transpose();
        let m41 = &aug.c1 * &v.y + &aug.d12 * &v.ch;
        let m42 = aug.c1.clone();
        let m43 = aug.d11.clone();
        let gw = DMatrix::identity(self.nw, self.nw) * -gamma;
        let gz = DMatrix::identity(self.nz, self.nz) * -gamma;
        linalg::symmetrize(&linalg::block(&[
            &[&m11, &m21.transpose(), &m31.transpose(), &m41.transpose()],
            &[&m21, &m22, &m32.transpose(), &m42.transpose()],
            &[&m31, &m32, &gw, &m43.transpose()],
            &[&m41, &m42, &m43, &gz],
        ]))
    }

    fn coupling_block(&self, v: &SynthesisVars) -> DMatrix<f64> {
        let i = DMatrix::identity(self.np, self.np);
        linalg::block(&[&[&v.y, &i], &[&i, &v.x]])
    }
}

fn synthesis_problem(aug: &AugmentedPlant, ap: &DMatrix<f64>, gamma: f64) -> Result<(SynthesisLmi, SdpProblem)> {
    let lmi = SynthesisLmi {
        np: aug.state_dim(),
        ny: aug.c2.nrows(),
        nu: aug.b2.ncols(),
        nw: aug.b1.ncols(),
        nz: aug.c1.nrows(),
    };
    let k = lmi.num_vars();
    let zero = vec![0.0; k];
    let v0 = lmi.unpack(&zero);
    let main0 = lmi.main_block(aug, ap, &v0, gamma);
    let coup0 = lmi.coupling_block(&v0);
    let mut main_fi = Vec::with_capacity(k);
    let mut coup_fi = Vec::with_capacity(k);
    let mut unit = zero.clone();
    for i in 0..k {
        unit[i] = 1.0;
        let v = lmi.unpack(&unit);
        main_fi.push(lmi.main_block(aug, ap, &v, gamma) - &main0);
        // Coupling enters as −[Y I; I X] ≺ 0.
        coup_fi.push(-(lmi.coupling_block(&v) - &coup0));
        unit[i] = 0.0;
    }
    let mut prob = SdpProblem::new(k);
    let sm = main0.nrows();
    let sc = coup0.nrows();
    prob.add_block(LmiBlock {
        f0: main0,
        fi: main_fi,
        margin: Some(DMatrix::identity(sm, sm)),
    })?;
    prob.add_block(LmiBlock {
        f0: -coup0,
        fi: coup_fi,
        margin: Some(DMatrix::identity(sc, sc)),
    })?;
    let [ox, oy, oa, ob, oc] = lmi.offsets();
    let (_, sym_w) = sdp::symmetric_basis(lmi.np);
    let sym_len = lmi.sym_len();
    for (offset, radius) in [(ox, 1e3), (oy, 1e3)] {
        prob.add_ball(BallConstraint {
            indices: (offset..offset + sym_len).collect(),
            weights: sym_w.clone(),
            radius,
        })?;
    }
    for (offset, len) in [(oa, lmi.np * lmi.np), (ob, lmi.np * lmi.ny), (oc, lmi.nu * lmi.np)] {
        prob.add_ball(BallConstraint {
            indices: (offset..offset + len).collect(),
            weights: vec![1.0; len],
            radius: 1e4,
        })?;
    }
    Ok((lmi, prob))
}

struct DesignPoint {
    vars: SynthesisVars,
    margin: f64,
    feasible: bool,
}

/// Solves the synthesis LMI at level `gamma`. With `margin_cap = None` the
/// solver stops at the first strictly feasible point. With a cap the margin
/// is driven to the cap and the remaining variables settle at the analytic
/// center of that slice, which keeps `I − XY` well conditioned.
fn design_at(aug: &AugmentedPlant, ap: &DMatrix<f64>, gamma: f64, margin_cap: Option<f64>) -> Result<DesignPoint> {
    let (lmi, mut prob) = synthesis_problem(aug, ap, gamma)?;
    if let Some(cap) = margin_cap {
        prob.set_t_max(cap);
    }
    let opts = SdpOptions {
        stop_when_feasible: margin_cap.is_none(),
        ..Default::default()
    };
    let sol = prob.maximize_margin(&DVector::zeros(lmi.num_vars()), &opts)?;
    log::debug!(
        "synthesis LMI at gamma {gamma}: {:?}, margin {}, bound {}",
        sol.verdict,
        sol.t,
        sol.upper_bound
    );
    Ok(DesignPoint {
        vars: lmi.unpack(sol.x.as_slice()),
        margin: sol.t,
        feasible: sol.verdict == SdpVerdict::Feasible,
    })
}

/// Controller reconstruction with `M = I`, `N = I − XY` and zero
/// feedthrough, for the plant with the `D22` term removed from the
/// measurement.
fn reconstruct(
    aug: &AugmentedPlant,
    ap: &DMatrix<f64>,
    v: &SynthesisVars,
) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let np = aug.state_dim();
    let n_mat = DMatrix::identity(np, np) - &v.x * &v.y;
    let lu = n_mat.lu();
    let bk = lu.solve(&v.bh).ok_or(Error::SynthesisFailed(f64::NAN))?;
    let ck = v.ch.clone();
    let rhs = &v.ah - &v.bh * &aug.c2 * &v.y - &v.x * &aug.b2 * &v.ch - &v.x * ap * &v.y;
    let ak = lu.solve(&rhs).ok_or(Error::SynthesisFailed(f64::NAN))?;
    Ok((ak, bk, ck))
}

pub fn synthesize_stabilizer(aug: &AugmentedPlant, options: &SynthesisOptions) -> Result<SynthesisResult> {
    let np = aug.state_dim();
    let a = options.decay_rate;
    if !(a >= 0.0 && a.is_finite()) {
        return Err(Error::InvalidInput(format!("decay rate must be >= 0, got {a}")));
    }
    let ap = &aug.ap + DMatrix::identity(np, np) * a;

    let (mut lo, mut hi) = (options.gamma_lo, options.gamma_hi);
    if !design_at(aug, &ap, hi, None)?.feasible {
        return Err(Error::SynthesisFailed(hi));
    }
    if design_at(aug, &ap, lo, None)?.feasible {
        hi = lo;
    } else {
        while hi / lo > 1.0 + options.rel_tol {
            let mid = (lo * hi).sqrt();
            if design_at(aug, &ap, mid, None)?.feasible {
                hi = mid;
            } else {
                lo = mid;
            }
        }
    }
    let gamma_min = hi;
    if gamma_min >= 1.0 {
        return Err(Error::SynthesisFailed(gamma_min));
    }
    let gamma_design = gamma_min + options.design_fraction * (1.0 - gamma_min);
    let best = design_at(aug, &ap, gamma_design, Some(1e3))?;
    if !best.feasible {
        return Err(Error::SynthesisFailed(gamma_design));
    }
    let point = design_at(aug, &ap, gamma_design, Some(0.5 * best.margin))?;
    let (ak, bk, ck) = reconstruct(aug, &ap, &point.vars)?;
    log::debug!(
        "cond(I - XY) = {:e}, |Ak| = {:e}",
        linalg::condition_number(&(DMatrix::identity(np, np) - &point.vars.x * &point.vars.y)),
        ak.norm()
    );
    // Undo the shift and fold the measurement feedthrough back in.
    let a_s = ak - DMatrix::identity(np, np) * a - &bk * &aug.d22 * &ck;
    let d_s = DMatrix::zeros(aug.m, aug.c2.nrows());
    let stabilizer = DynamicStabilizer::new(a_s, bk, ck, d_s, aug.p)?;
    let closed = close_loop(aug, &stabilizer)?;
    let certificate = bounded_real_certificate(&closed)?;
    if certificate.gamma >= 1.0 {
        return Err(Error::SynthesisFailed(certificate.gamma));
    }
    Ok(SynthesisResult {
        stabilizer,
        gamma: certificate.gamma,
        gamma_min,
        gamma_design,
        decay_rate: a,
        certificate,
    })
}

/// Closed-loop gain certificate for a fixed controller (PI or dynamic).
pub fn analyze_fixed_controller(aug: &AugmentedPlant, config: &ControllerConfig) -> Result<BoundedRealCertificate> {
    let stab = config.as_stabilizer(aug.p);
    bounded_real_certificate(&close_loop(aug, &stab)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub metrics: Vec<SegmentMetrics>,
    pub converged: bool,
    #[serde(skip)]
    pub trace: Option<Trace>,
}

/// Simulates the stabilizer in closed loop and checks convergence to the
/// oracle optimizer in every segment.
pub fn validate_synthesis(
    plant: &LtiPlant,
    geometry: &KktGeometry,
    objective: &SteadyStateObjective,
    stabilizer: &DynamicStabilizer,
    schedule: &DisturbanceSchedule,
    settings: &SimulationSettings,
) -> Result<ValidationReport> {
    let config = ControllerConfig::Stabilizer(stabilizer.clone());
    let trace = sim::simulate(plant, &config, objective, geometry, schedule, settings)?;
    let metrics = sim::convergence_metrics(&trace);
    let converged = metrics.iter().all(|m| m.terminal_error < VALIDATION_TOL);
    Ok(ValidationReport {
        metrics,
        converged,
        trace: Some(trace),
    })
}
