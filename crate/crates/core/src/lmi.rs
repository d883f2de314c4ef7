//! Circle-criterion stability certificates for the PI loop.
//!
//! Around the optimal equilibrium the closed loop is a linear system `H` with
//! state `(x̃, η̃)` in negative feedback with the incremental gradient map
//! `Φ(z) = ∇g(z⋆ + z) − ∇g(z⋆)`, `z = (ỹ, ũ)`. `H` has the realization
//!
//! ```text
//! 𝒜 = [A  B K_I; 0  0]      ℬ = [B K_P Rᵀ; Rᵀ]
//! 𝒞 = [C  0; 0  K_I]        𝒟 = [0; K_P Rᵀ]
//! ```
//!
//! where the `y` rows of `𝒟` are zero (no feedthrough into the output).
//! Stability follows from a symmetric `P ≻ 0` and `α ≥ 0` with
//!
//! ```text
//! S(P, α) = [𝒜ᵀP + P𝒜  Pℬ; ℬᵀP  0] + α [𝒞 𝒟; 0 I]ᵀ M [𝒞 𝒟; 0 I] ≺ 0.
//! ```
//!
//! `P ≻ 0` is imposed explicitly. Without it the inequality can be met by
//! indefinite `P` for loops that are in fact unstable.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::controller::PiGains;
use crate::error::{Error, Result};
use crate::kkt::KktGeometry;
use crate::linalg;
use crate::plant::LtiPlant;
use crate::sdp::{self, BallConstraint, LmiBlock, SdpOptions, SdpProblem, SdpVerdict};

/// Upper bound on the multiplier weight `α`.
pub const ALPHA_MAX: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealizationH {
    #[serde(with = "crate::serde_mat::matrix")]
    pub script_a: DMatrix<f64>,
    #[serde(with = "crate::serde_mat::matrix")]
    pub script_b: DMatrix<f64>,
    #[serde(with = "crate::serde_mat::matrix")]
    pub script_c: DMatrix<f64>,
    #[serde(with = "crate::serde_mat::matrix")]
    pub script_d: DMatrix<f64>,
}

impl RealizationH {
    pub fn from_blocks(
        script_a: DMatrix<f64>,
        script_b: DMatrix<f64>,
        script_c: DMatrix<f64>,
        script_d: DMatrix<f64>,
    ) -> Result<Self> {
        let n = script_a.nrows();
        let q = script_b.ncols();
        if !script_a.is_square() || script_b.nrows() != n || script_c.shape() != (q, n) || script_d.shape() != (q, q) {
            return Err(Error::dim("realization blocks are inconsistent"));
        }
        Ok(Self {
            script_a,
            script_b,
            script_c,
            script_d,
        })
    }

    /// `n + m`.
    pub fn state_dim(&self) -> usize {
        self.script_a.nrows()
    }

    /// `p + m`, the width of the nonlinearity channel.
    pub fn channel_dim(&self) -> usize {
        self.script_b.ncols()
    }
}

pub fn build_realization(plant: &LtiPlant, gains: &PiGains, geometry: &KktGeometry) -> Result<RealizationH> {
    let (n, m, p) = (plant.n(), plant.m(), plant.p());
    if gains.m() != m || geometry.r().shape() != (p + m, m) {
        return Err(Error::dim("gains or geometry do not match the plant"));
    }
    let rt = geometry.r().transpose();
    let script_a = linalg::block(&[
        &[plant.a(), &(plant.b() * gains.ki())],
        &[&DMatrix::zeros(m, n), &DMatrix::zeros(m, m)],
    ]);
    let script_b = linalg::vcat(&(plant.b() * gains.kp() * &rt), &rt);
    let script_c = linalg::blkdiag(&[plant.c(), gains.ki()]);
    let script_d = linalg::vcat(&DMatrix::zeros(p, p + m), &(gains.kp() * &rt));
    RealizationH::from_blocks(script_a, script_b, script_c, script_d)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectorMultiplier {
    #[serde(with = "crate::serde_mat::matrix")]
    pub m: DMatrix<f64>,
    pub kappa: f64,
    /// `+∞` selects the form for gradients that are not globally Lipschitz.
    #[serde(with = "crate::serde_mat::extended")]
    pub lipschitz: f64,
}

/// `M = ([1 0; 0 −1] M₀ [1 0; 0 −1]) ⊗ I_{p+m}` with
/// `M₀ = [−2κL, κ+L; κ+L, −2]`, or `M₀ = [−2κ, 1; 1, 0]` when `L = ∞`.
pub fn build_multiplier(kappa: f64, lipschitz: f64, p: usize, m: usize) -> Result<SectorMultiplier> {
    if !(kappa > 0.0 && kappa.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "sector lower bound must be > 0, got {kappa}"
        )));
    }
    if !(lipschitz >= kappa) {
        return Err(Error::InvalidInput(format!(
            "sector needs kappa <= L, got [{kappa}, {lipschitz}]"
        )));
    }
    let (m11, m12, m22) = if lipschitz.is_infinite() {
        (-2.0 * kappa, -1.0, 0.0)
    } else {
        (-2.0 * kappa * lipschitz, -(kappa + lipschitz), -2.0)
    };
    let q = p + m;
    let i = DMatrix::<f64>::identity(q, q);
    Ok(SectorMultiplier {
        m: linalg::block(&[&[&(&i * m11), &(&i * m12)], &[&(&i * m12), &(&i * m22)]]),
        kappa,
        lipschitz,
    })
}

/// The affine map `(P, α) ↦ S(P, α)` with its basis expansion.
#[derive(Debug, Clone)]
pub struct LmiMap {
    e1: DMatrix<f64>,
    mult_term: DMatrix<f64>,
    state_dim: usize,
    channel_dim: usize,
}

impl LmiMap {
    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    /// `n + m + p + m`.
    pub fn size(&self) -> usize {
        self.state_dim + self.channel_dim
    }

    /// `E2ᵀ M E2`, the coefficient of `α`.
    pub fn multiplier_term(&self) -> &DMatrix<f64> {
        &self.mult_term
    }

    pub fn eval(&self, p: &DMatrix<f64>, alpha: f64) -> DMatrix<f64> {
        let n = self.state_dim;
        let z = DMatrix::zeros(n, n);
        let mid = linalg::block(&[&[&z, p], &[p, &z]]);
        let s = self.e1.transpose() * mid * &self.e1 + &self.mult_term * alpha;
        linalg::symmetrize(&s)
    }

    /// True when `S(P, α) ≺ 0` and `P ≻ 0` by direct eigenvalue evaluation.
    pub fn holds(&self, p: &DMatrix<f64>, alpha: f64) -> bool {
        alpha >= 0.0
            && linalg::max_sym_eigenvalue(&self.eval(p, alpha)) < 0.0
            && linalg::min_sym_eigenvalue(&linalg::symmetrize(p)) > 0.0
    }
}

pub fn assemble_lmi(h: &RealizationH, mult: &SectorMultiplier) -> Result<LmiMap> {
    let n = h.state_dim();
    let q = h.channel_dim();
    if mult.m.shape() != (2 * q, 2 * q) {
        return Err(Error::dim("multiplier size does not match the realization"));
    }
    let e1 = linalg::vcat(
        &linalg::hcat(&DMatrix::identity(n, n), &DMatrix::zeros(n, q)),
        &linalg::hcat(&h.script_a, &h.script_b),
    );
    let e2 = linalg::vcat(
        &linalg::hcat(&h.script_c, &h.script_d),
        &linalg::hcat(&DMatrix::zeros(q, n), &DMatrix::identity(q, q)),
    );
    Ok(LmiMap {
        e1,
        mult_term: linalg::symmetrize(&(e2.transpose() * &mult.m * e2)),
        state_dim: n,
        channel_dim: q,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmiCertificate {
    #[serde(with = "crate::serde_mat::matrix")]
    pub p: DMatrix<f64>,
    pub alpha: f64,
    /// `−λ_max(S(P, α))`.
    pub min_eig_margin: f64,
    /// `λ_min(P)`.
    pub p_min_eig: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverReport {
    pub verdict: SdpVerdict,
    /// Best margin reached by the solver.
    pub margin: f64,
    /// Upper bound on the achievable margin.
    pub upper_bound: f64,
    pub newton_iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum LmiOutcome {
    Certified {
        certificate: LmiCertificate,
        report: SolverReport,
    },
    NotCertified {
        report: SolverReport,
    },
}

impl LmiOutcome {
    pub fn is_certified(&self) -> bool {
        matches!(self, LmiOutcome::Certified { .. })
    }

    pub fn certificate(&self) -> Option<&LmiCertificate> {
        match self {
            LmiOutcome::Certified { certificate, .. } => Some(certificate),
            LmiOutcome::NotCertified { .. } => None,
        }
    }

    pub fn report(&self) -> &SolverReport {
        match self {
            LmiOutcome::Certified { report, .. } | LmiOutcome::NotCertified { report } => report,
        }
    }
}

/// Maximizes `t` subject to `S(P, α) ⪯ −tI`, `P ⪰ tI`, `‖P‖_F ≤ 1` and
/// `0 ≤ α ≤ ALPHA_MAX`. A solver claim of feasibility is accepted only after
/// the returned pair passes [`LmiMap::holds`].
pub fn sdp_feasibility(map: &LmiMap, options: &SdpOptions) -> Result<LmiOutcome> {
    let n = map.state_dim;
    let (basis, weights) = sdp::symmetric_basis(n);
    let k = basis.len() + 1;
    let size = map.size();

    let mut s_fi: Vec<DMatrix<f64>> = basis.iter().map(|b| map.eval(b, 0.0)).collect();
    s_fi.push(map.mult_term.clone());
    let mut p_fi: Vec<DMatrix<f64>> = basis.iter().map(|b| -b).collect();
    p_fi.push(DMatrix::zeros(n, n));

    let mut prob = SdpProblem::new(k);
    prob.add_block(LmiBlock {
        f0: DMatrix::zeros(size, size),
        fi: s_fi,
        margin: Some(DMatrix::identity(size, size)),
    })?;
    prob.add_block(LmiBlock {
        f0: DMatrix::zeros(n, n),
        fi: p_fi,
        margin: Some(DMatrix::identity(n, n)),
    })?;
    prob.add_bound(k - 1, 0.0, false)?;
    prob.add_bound(k - 1, ALPHA_MAX, true)?;
    prob.add_ball(BallConstraint {
        indices: (0..k - 1).collect(),
        weights,
        radius: 1.0,
    })?;

    let mut x0 = DVector::zeros(k);
    x0[k - 1] = 1.0;
    let sol = prob.maximize_margin(&x0, options)?;
    let report = SolverReport {
        verdict: sol.verdict,
        margin: sol.t,
        upper_bound: sol.upper_bound,
        newton_iterations: sol.newton_iterations,
    };
    if sol.verdict != SdpVerdict::Feasible {
        return Ok(LmiOutcome::NotCertified { report });
    }
    let p = sdp::symmetric_from_coords(n, &sol.x.as_slice()[..k - 1]);
    let alpha = sol.x[k - 1];
    if !map.holds(&p, alpha) {
        return Ok(LmiOutcome::NotCertified {
            report: SolverReport {
                verdict: SdpVerdict::Undecided,
                ..report
            },
        });
    }
    let certificate = LmiCertificate {
        min_eig_margin: -linalg::max_sym_eigenvalue(&map.eval(&p, alpha)),
        p_min_eig: linalg::min_sym_eigenvalue(&p),
        p,
        alpha,
    };
    Ok(LmiOutcome::Certified { certificate, report })
}

pub fn verify_stability(
    plant: &LtiPlant,
    geometry: &KktGeometry,
    kappa: f64,
    lipschitz: f64,
    gains: &PiGains,
) -> Result<LmiOutcome> {
    let h = build_realization(plant, gains, geometry)?;
    let mult = build_multiplier(kappa, lipschitz, plant.p(), plant.m())?;
    let map = assemble_lmi(&h, &mult)?;
    sdp_feasibility(&map, &SdpOptions::default())
}

/// A Lyapunov certificate `P ≻ 0`, `AᵀP + PA ≺ 0`, if one exists.
pub fn lyapunov_certificate(a: &DMatrix<f64>) -> Result<Option<DMatrix<f64>>> {
    if !a.is_square() {
        return Err(Error::dim("Lyapunov test needs a square matrix"));
    }
    let n = a.nrows();
    let (basis, weights) = sdp::symmetric_basis(n);
    let k = basis.len();
    let mut prob = SdpProblem::new(k);
    prob.add_block(LmiBlock {
        f0: DMatrix::zeros(n, n),
        fi: basis.iter().map(|b| a.transpose() * b + b * a).collect(),
        margin: Some(DMatrix::identity(n, n)),
    })?;
    prob.add_block(LmiBlock {
        f0: DMatrix::zeros(n, n),
        fi: basis.iter().map(|b| -b).collect(),
        margin: Some(DMatrix::identity(n, n)),
    })?;
    prob.add_ball(BallConstraint {
        indices: (0..k).collect(),
        weights,
        radius: 1.0,
    })?;
    let sol = prob.maximize_margin(&DVector::zeros(k), &SdpOptions::default())?;
    if sol.verdict != SdpVerdict::Feasible {
        return Ok(None);
    }
    let p = sdp::symmetric_from_coords(n, sol.x.as_slice());
    let lyap = a.transpose() * &p + &p * a;
    let valid = linalg::max_sym_eigenvalue(&lyap) < 0.0 && linalg::min_sym_eigenvalue(&p) > 0.0;
    Ok(valid.then_some(p))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub kp: f64,
    pub ki: f64,
    pub outcome: LmiOutcome,
}

impl GridPoint {
    pub fn certified(&self) -> bool {
        self.outcome.is_certified()
    }
}

/// Every pair of the product grid `kp_values × ki_values` with
/// `K_P = k_P·I`, `K_I = k_I·I`, in row-major order over `(k_P, k_I)`.
pub fn gain_grid_search(
    plant: &LtiPlant,
    geometry: &KktGeometry,
    kappa: f64,
    lipschitz: f64,
    pairs: &[(f64, f64)],
) -> Result<Vec<GridPoint>> {
    pairs
        .par_iter()
        .map(|&(kp, ki)| {
            let gains = PiGains::scalar(plant.m(), kp, ki)?;
            let outcome = verify_stability(plant, geometry, kappa, lipschitz, &gains)?;
            Ok(GridPoint { kp, ki, outcome })
        })
        .collect()
}

pub fn product_grid(kp_values: &[f64], ki_values: &[f64]) -> Vec<(f64, f64)> {
    kp_values
        .iter()
        .flat_map(|&kp| ki_values.iter().map(move |&ki| (kp, ki)))
        .collect()
}

pub fn certified_gains(points: &[GridPoint]) -> Vec<(f64, f64)> {
    points.iter().filter(|g| g.certified()).map(|g| (g.kp, g.ki)).collect()
}

/// `k_P,k_I,certified,margin,sweeps`, one row per grid point.
pub fn write_grid_csv<W: std::io::Write>(points: &[GridPoint], mut out: W) -> std::io::Result<()> {
    writeln!(out, "k_P,k_I,certified,margin,sweeps")?;
    for g in points {
        let r = g.outcome.report();
        let margin = g.outcome.certificate().map_or(r.margin, |c| c.min_eig_margin);
        writeln!(
            out,
            "{},{},{},{},{}",
            g.kp,
            g.ki,
            g.certified(),
            margin,
            r.newton_iterations
        )?;
    }
    Ok(())
}
