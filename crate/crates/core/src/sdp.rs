//! A small primal barrier method for strict LMI feasibility.
//!
//! Problems have the form
//!
//! ```text
//! maximize t  over (x, t)
//! subject to  F0_j + Σ x_i F_ij + t T_j ≺ 0   for every block j,
//!             aᵀx < b,  ‖diag(w) x_I‖ < r,  t < t_max.
//! ```
//!
//! Each constraint contributes its logarithmic barrier and the barrier
//! problems are solved by damped Newton along an increasing weight `μ` on
//! `t`. Every iterate is strictly feasible (checked by Cholesky), so any
//! iterate with `t > 0` is a certificate when every block carries a positive
//! margin matrix. Near-optimality follows from the barrier parameter: on the
//! central path the optimal `t` is at most `t + ν/μ`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// One matrix inequality `F0 + Σ x_i F_i + t T ≺ 0`.
#[derive(Debug, Clone)]
pub struct LmiBlock {
    pub f0: DMatrix<f64>,
    pub fi: Vec<DMatrix<f64>>,
    /// `None` means `T = 0`.
    pub margin: Option<DMatrix<f64>>,
}

impl LmiBlock {
    pub fn size(&self) -> usize {
        self.f0.nrows()
    }

    pub fn eval(&self, x: &DVector<f64>, t: f64) -> DMatrix<f64> {
        let mut f = self.f0.clone();
        for (xi, fi) in x.iter().zip(&self.fi) {
            if *xi != 0.0 {
                f += fi * *xi;
            }
        }
        if let Some(tm) = &self.margin {
            f += tm * t;
        }
        linalg::symmetrize(&f)
    }
}

/// `‖diag(weights) x[indices]‖ < radius`.
#[derive(Debug, Clone)]
pub struct BallConstraint {
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
    pub radius: f64,
}

#[derive(Debug, Clone)]
pub struct SdpProblem {
    k: usize,
    blocks: Vec<LmiBlock>,
    linear: Vec<(DVector<f64>, f64)>,
    balls: Vec<BallConstraint>,
    t_max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SdpVerdict {
    /// `t ≥ threshold` at a strictly feasible iterate.
    Feasible,
    /// The optimal margin is provably below the threshold.
    Infeasible,
    /// Neither could be established.
    Undecided,
}

#[derive(Debug, Clone)]
pub struct SdpOptions {
    /// Margin at or above which a point counts as strictly feasible.
    pub threshold: f64,
    /// Stop once `ν/μ` drops below this.
    pub gap_tol: f64,
    pub max_newton: usize,
    /// Return as soon as the threshold is reached instead of maximizing.
    pub stop_when_feasible: bool,
    /// Return as soon as the threshold is provably out of reach.
    pub stop_when_infeasible: bool,
}

impl Default for SdpOptions {
    fn default() -> Self {
        Self {
            threshold: 1e-7,
            gap_tol: 1e-9,
            max_newton: 5_000,
            stop_when_feasible: false,
            stop_when_infeasible: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SdpSolution {
    pub x: DVector<f64>,
    pub t: f64,
    /// Upper bound on the optimal margin.
    pub upper_bound: f64,
    pub verdict: SdpVerdict,
    pub newton_iterations: usize,
}

impl SdpProblem {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            blocks: Vec::new(),
            linear: Vec::new(),
            balls: Vec::new(),
            t_max: 1e3,
        }
    }

    pub fn num_vars(&self) -> usize {
        self.k
    }

    pub fn blocks(&self) -> &[LmiBlock] {
        &self.blocks
    }

    pub fn set_t_max(&mut self, t_max: f64) {
        self.t_max = t_max;
    }

    pub fn add_block(&mut self, block: LmiBlock) -> Result<()> {
        let s = block.size();
        let square = |m: &DMatrix<f64>| m.nrows() == s && m.ncols() == s;
        if block.fi.len() != self.k
            || !square(&block.f0)
            || !block.fi.iter().all(square)
            || !block.margin.as_ref().is_none_or(square)
        {
            return Err(Error::dim("LMI block has inconsistent shapes"));
        }
        self.blocks.push(block);
        Ok(())
    }

    /// `aᵀx < b`.
    pub fn add_linear(&mut self, a: DVector<f64>, b: f64) -> Result<()> {
        if a.len() != self.k {
            return Err(Error::dim("linear constraint length"));
        }
        self.linear.push((a, b));
        Ok(())
    }

    /// `x_i < b` (`upper`) or `x_i > b` (otherwise).
    pub fn add_bound(&mut self, i: usize, b: f64, upper: bool) -> Result<()> {
        let mut a = DVector::zeros(self.k);
        a[i] = if upper { 1.0 } else { -1.0 };
        self.add_linear(a, if upper { b } else { -b })
    }

    pub fn add_ball(&mut self, ball: BallConstraint) -> Result<()> {
        if ball.indices.len() != ball.weights.len() || ball.indices.iter().any(|&i| i >= self.k) {
            return Err(Error::dim("ball constraint indices"));
        }
        self.balls.push(ball);
        Ok(())
    }

    fn barrier_parameter(&self) -> f64 {
        (self.blocks.iter().map(LmiBlock::size).sum::<usize>() + self.linear.len() + self.balls.len() + 1) as f64
    }

    fn cholesky_of_neg(&self, block: &LmiBlock, x: &DVector<f64>, t: f64) -> Option<Cholesky<f64, Dyn>> {
        (-block.eval(x, t)).cholesky()
    }

    /// Barrier value, or `None` outside the strict domain.
    fn barrier(&self, x: &DVector<f64>, t: f64) -> Option<f64> {
        let mut val = 0.0;
        for b in &self.blocks {
            let chol = self.cholesky_of_neg(b, x, t)?;
            val -= 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        }
        for (a, b) in &self.linear {
            let s = b - a.dot(x);
            if !(s > 0.0) {
                return None;
            }
            val -= s.ln();
        }
        for ball in &self.balls {
            let s = ball.radius * ball.radius - ball_norm2(ball, x);
            if !(s > 0.0) {
                return None;
            }
            val -= s.ln();
        }
        let s = self.t_max - t;
        if !(s > 0.0) {
            return None;
        }
        Some(val - s.ln())
    }

    fn gradient_hessian(&self, x: &DVector<f64>, t: f64) -> (DVector<f64>, DMatrix<f64>) {
        let k = self.k;
        let mut g = DVector::zeros(k + 1);
        let mut h = DMatrix::zeros(k + 1, k + 1);
        for b in &self.blocks {
            let chol = self.cholesky_of_neg(b, x, t).expect("iterate is strictly feasible");
            let n = b.size();
            let l = chol.l();
            let linv = l
                .solve_lower_triangular(&DMatrix::identity(n, n))
                .expect("Cholesky factor is nonsingular");
            let linv_t = linv.transpose();
            // W_a = L⁻¹ F_a L⁻ᵀ for every direction that touches this block.
            let mut ws: Vec<(usize, DMatrix<f64>)> = Vec::with_capacity(k + 1);
            for (a, fa) in b.fi.iter().enumerate() {
                if fa.iter().any(|v| *v != 0.0) {
                    ws.push((a, &linv * fa * &linv_t));
                }
            }
            if let Some(tm) = &b.margin {
                ws.push((k, &linv * tm * &linv_t));
            }
            for (i, (a, wa)) in ws.iter().enumerate() {
                g[*a] += wa.trace();
                for (bidx, wb) in ws.iter().take(i + 1) {
                    let v = wa.dot(wb);
                    h[(*a, *bidx)] += v;
                    if *a != *bidx {
                        h[(*bidx, *a)] += v;
                    }
                }
            }
        }
        for (a, b) in &self.linear {
            let s = b - a.dot(x);
            for i in 0..k {
                g[i] += a[i] / s;
                for j in 0..k {
                    h[(i, j)] += a[i] * a[j] / (s * s);
                }
            }
        }
        for ball in &self.balls {
            let s = ball.radius * ball.radius - ball_norm2(ball, x);
            let gq: Vec<(usize, f64)> = ball
                .indices
                .iter()
                .zip(&ball.weights)
                .map(|(&i, &w)| (i, 2.0 * w * w * x[i]))
                .collect();
            for &(i, gi) in &gq {
                g[i] += gi / s;
                for &(j, gj) in &gq {
                    h[(i, j)] += gi * gj / (s * s);
                }
            }
            for (&i, &w) in ball.indices.iter().zip(&ball.weights) {
                h[(i, i)] += 2.0 * w * w / s;
            }
        }
        let s = self.t_max - t;
        g[k] += 1.0 / s;
        h[(k, k)] += 1.0 / (s * s);
        (g, h)
    }

    /// Smallest `t` (in magnitude, by doubling) making `x0` strictly feasible.
    fn initial_margin(&self, x0: &DVector<f64>) -> Result<f64> {
        let mut t0: f64 = -1.0;
        for b in &self.blocks {
            if let Some(tm) = &b.margin {
                if linalg::min_sym_eigenvalue(tm) > 0.0 {
                    let lmax = linalg::max_sym_eigenvalue(&b.eval(x0, 0.0));
                    t0 = t0.min(-lmax / linalg::min_sym_eigenvalue(tm) - 1.0);
                }
            }
        }
        t0 = t0.min(self.t_max - 1.0);
        for _ in 0..200 {
            if self.barrier(x0, t0).is_some() {
                return Ok(t0);
            }
            t0 *= 2.0;
        }
        Err(Error::InvalidInput(
            "starting point is not strictly feasible for any margin".into(),
        ))
    }

    /// Maximizes the margin from the starting point `x0`, which must satisfy
    /// the linear and ball constraints strictly.
    pub fn maximize_margin(&self, x0: &DVector<f64>, options: &SdpOptions) -> Result<SdpSolution> {
        if x0.len() != self.k {
            return Err(Error::dim("starting point length"));
        }
        let k = self.k;
        let nu = self.barrier_parameter();
        let t0 = self.initial_margin(x0)?;
        let mut y = DVector::zeros(k + 1);
        y.rows_mut(0, k).copy_from(x0);
        y[k] = t0;
        let split = |y: &DVector<f64>| (y.rows(0, k).into_owned(), y[k]);

        let mut mu = 1.0;
        let mut newton = 0;
        loop {
            for _ in 0..200 {
                if newton >= options.max_newton {
                    let (x, t) = split(&y);
                    return Ok(self.verdict(x, t, t + nu / mu, newton, options, true));
                }
                let (x, t) = split(&y);
                let (mut g, mut h) = self.gradient_hessian(&x, t);
                g[k] -= mu;
                for i in 0..=k {
                    h[(i, i)] += 1e-14 * (1.0 + h[(i, i)]);
                }
                newton += 1;
                let dy = match h.clone().cholesky() {
                    Some(c) => -c.solve(&g),
                    None => match h.lu().solve(&g) {
                        Some(v) => -v,
                        None => break,
                    },
                };
                let lam2 = -g.dot(&dy);
                if !(lam2 / 2.0 >= 1e-10) {
                    break;
                }
                let f0 = self.barrier(&x, t).expect("feasible") - mu * t;
                let mut step = 1.0;
                let mut moved = false;
                while step >= 1e-12 {
                    let yn = &y + &dy * step;
                    let (xn, tn) = split(&yn);
                    if let Some(b) = self.barrier(&xn, tn) {
                        if b - mu * tn <= f0 - 0.25 * step * lam2 {
                            y = yn;
                            moved = true;
                            break;
                        }
                    }
                    step *= 0.5;
                }
                if !moved {
                    break;
                }
                if options.stop_when_feasible && y[k] >= options.threshold {
                    let (x, t) = split(&y);
                    return Ok(self.verdict(x, t, f64::INFINITY, newton, options, false));
                }
            }
            let (x, t) = split(&y);
            let bound = t + nu / mu;
            if nu / mu < options.gap_tol || (options.stop_when_infeasible && bound < options.threshold) {
                return Ok(self.verdict(x, t, bound, newton, options, false));
            }
            mu *= 10.0;
        }
    }

    fn verdict(
        &self,
        x: DVector<f64>,
        t: f64,
        upper_bound: f64,
        newton_iterations: usize,
        options: &SdpOptions,
        capped: bool,
    ) -> SdpSolution {
        let verdict = if t >= options.threshold {
            SdpVerdict::Feasible
        } else if upper_bound < options.threshold && !capped {
            SdpVerdict::Infeasible
        } else {
            SdpVerdict::Undecided
        };
        SdpSolution {
            x,
            t,
            upper_bound,
            verdict,
            newton_iterations,
        }
    }
}

fn ball_norm2(ball: &BallConstraint, x: &DVector<f64>) -> f64 {
    ball.indices
        .iter()
        .zip(&ball.weights)
        .map(|(&i, &w)| (w * x[i]).powi(2))
        .sum()
}

/// Basis of symmetric `n×n` matrices (`E_ii`, and `E_ij + E_ji` for `i < j`)
/// with the Frobenius weights that make coordinates isometric.
pub fn symmetric_basis(n: usize) -> (Vec<DMatrix<f64>>, Vec<f64>) {
    let mut mats = Vec::with_capacity(n * (n + 1) / 2);
    let mut weights = Vec::with_capacity(n * (n + 1) / 2);
    for i in 0..n {
        for j in i..n {
            let mut e = DMatrix::zeros(n, n);
            e[(i, j)] = 1.0;
            e[(j, i)] = 1.0;
            mats.push(e);
            weights.push(if i == j { 1.0 } else { std::f64::consts::SQRT_2 });
        }
    }
    (mats, weights)
}

/// Inverse of [`symmetric_basis`]: rebuild the matrix from coordinates.
pub fn symmetric_from_coords(n: usize, coords: &[f64]) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    let mut idx = 0;
    for i in 0..n {
        for j in i..n {
            m[(i, j)] = coords[idx];
            m[(j, i)] = coords[idx];
            idx += 1;
        }
    }
    m
}

/// Basis of general `r×c` matrices, column-major.
pub fn full_basis(r: usize, c: usize) -> Vec<DMatrix<f64>> {
    let mut out = Vec::with_capacity(r * c);
    for j in 0..c {
        for i in 0..r {
            let mut e = DMatrix::zeros(r, c);
            e[(i, j)] = 1.0;
            out.push(e);
        }
    }
    out
}
