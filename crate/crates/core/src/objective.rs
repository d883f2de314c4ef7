//! Convex steady-state costs `g(y, u)` and their composition with the output
//! map, `f(x, u) = g(Cx, u)`.
//!
//! Gradients are always ordered `(∂g/∂y, ∂g/∂u)`. An objective is a function
//! of the stacked vector `z = (y, u)`; the split between `y` and `u` is fixed
//! by the plant it is used with.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;

type ValueFn = dyn Fn(&DVector<f64>) -> f64 + Send + Sync;
type GradientFn = dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync;

#[derive(Clone)]
pub enum ObjectiveKind {
    /// `½ zᵀ H z + qᵀ z`.
    Quadratic { h: DMatrix<f64>, q: DVector<f64> },
    /// `cosh(y1/2) + cosh(y2/3) + u²` on `(y1, y2, u)`.
    CoshExample,
    /// Black-box value and gradient.
    Custom {
        value: Arc<ValueFn>,
        gradient: Arc<GradientFn>,
    },
}

impl fmt::Debug for ObjectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ObjectiveKind::Quadratic { h, q } => f.debug_struct("Quadratic").field("h", h).field("q", q).finish(),
            ObjectiveKind::CoshExample => f.write_str("CoshExample"),
            ObjectiveKind::Custom { .. } => f.write_str("Custom"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SteadyStateObjective {
    kind: ObjectiveKind,
    dim: usize,
    kappa: f64,
    lipschitz: f64,
    name: String,
}

impl SteadyStateObjective {
    /// A black-box objective with declared sector `[kappa, lipschitz]`;
    /// `lipschitz = f64::INFINITY` means the gradient is not globally
    /// Lipschitz.
    pub fn custom<V, G>(
        name: impl Into<String>,
        dim: usize,
        value: V,
        gradient: G,
        kappa: f64,
        lipschitz: f64,
    ) -> Result<Self>
    where
        V: Fn(&DVector<f64>) -> f64 + Send + Sync + 'static,
        G: Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    {
        validate_sector(kappa, lipschitz)?;
        Ok(Self {
            kind: ObjectiveKind::Custom {
                value: Arc::new(value),
                gradient: Arc::new(gradient),
            },
            dim,
            kappa,
            lipschitz,
            name: name.into(),
        })
    }

    pub fn kind(&self) -> &ObjectiveKind {
        &self.kind
    }

    /// `p + m`.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    pub fn has_lipschitz_gradient(&self) -> bool {
        self.lipschitz.is_finite()
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Override the declared sector; used when a scenario certifies against a
    /// wider class than the particular objective.
    pub fn with_sector(mut self, kappa: f64, lipschitz: f64) -> Result<Self> {
        validate_sector(kappa, lipschitz)?;
        self.kappa = kappa;
        self.lipschitz = lipschitz;
        Ok(self)
    }

    pub fn value_at(&self, z: &DVector<f64>) -> f64 {
        debug_assert_eq!(z.len(), self.dim);
        match &self.kind {
            ObjectiveKind::Quadratic { h, q } => 0.5 * z.dot(&(h * z)) + q.dot(z),
            ObjectiveKind::CoshExample => (z[0] / 2.0).cosh() + (z[1] / 3.0).cosh() + z[2] * z[2],
            ObjectiveKind::Custom { value, .. } => value(z),
        }
    }

    pub fn gradient_at(&self, z: &DVector<f64>) -> DVector<f64> {
        debug_assert_eq!(z.len(), self.dim);
        match &self.kind {
            ObjectiveKind::Quadratic { h, q } => h * z + q,
            ObjectiveKind::CoshExample => {
                DVector::from_vec(vec![0.5 * (z[0] / 2.0).sinh(), (z[1] / 3.0).sinh() / 3.0, 2.0 * z[2]])
            }
            ObjectiveKind::Custom { gradient, .. } => gradient(z),
        }
    }

    /// Analytic Hessian when one is available (quadratics only).
    pub fn hessian_at(&self, _z: &DVector<f64>) -> Option<DMatrix<f64>> {
        match &self.kind {
            ObjectiveKind::Quadratic { h, .. } => Some(h.clone()),
            _ => None,
        }
    }

    pub fn value(&self, y: &DVector<f64>, u: &DVector<f64>) -> f64 {
        self.value_at(&linalg::vcat_vec(y, u))
    }

    pub fn gradient(&self, y: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        self.gradient_at(&linalg::vcat_vec(y, u))
    }
}

pub fn validate_sector(kappa: f64, lipschitz: f64) -> Result<()> {
    if !(kappa >= 0.0) || kappa.is_infinite() {
        return Err(Error::InvalidInput(format!(
            "kappa must be finite and >= 0, got {kappa}"
        )));
    }
    if !(lipschitz >= kappa) {
        return Err(Error::InvalidInput(format!(
            "lipschitz parameter {lipschitz} must be >= kappa = {kappa}"
        )));
    }
    Ok(())
}

/// `g(z) = ½ zᵀ H z + qᵀ z` with `kappa = λ_min(H)` and `lipschitz = λ_max(H)`.
pub fn quadratic_objective(h: DMatrix<f64>, q: DVector<f64>) -> Result<SteadyStateObjective> {
    if !h.is_square() || h.nrows() != q.len() || q.is_empty() {
        return Err(Error::dim(format!(
            "quadratic objective needs square H matching q, got {}x{} and {}",
            h.nrows(),
            h.ncols(),
            q.len()
        )));
    }
    if !linalg::is_symmetric(&h, 1e-12) {
        return Err(Error::InvalidInput("H must be symmetric".into()));
    }
    let ev = linalg::sym_eigenvalues(&h);
    let (lo, hi) = (ev[0], ev[ev.len() - 1]);
    let tol = 1e-12 * (1.0 + hi.abs());
    if lo < -tol {
        return Err(Error::InvalidInput(format!(
            "H must be positive semidefinite (smallest eigenvalue {lo:.3e})"
        )));
    }
    let dim = q.len();
    Ok(SteadyStateObjective {
        kind: ObjectiveKind::Quadratic { h, q },
        dim,
        kappa: lo.max(0.0),
        lipschitz: hi.max(0.0),
        name: "quadratic".into(),
    })
}

/// `g(y1, y2, u) = cosh(y1/2) + cosh(y2/3) + u²`: strongly convex with
/// `kappa = 1/9`, gradient not globally Lipschitz.
pub fn cosh_example_objective() -> SteadyStateObjective {
    SteadyStateObjective {
        kind: ObjectiveKind::CoshExample,
        dim: 3,
        kappa: 1.0 / 9.0,
        lipschitz: f64::INFINITY,
        name: "cosh_example".into(),
    }
}

/// Largest central-difference gradient error over `points`, measured relative
/// to `max(‖∇g‖, 1)` at each point.
pub fn check_gradient_fd(obj: &SteadyStateObjective, points: &[DVector<f64>], h: f64) -> f64 {
    assert!(h > 0.0, "finite-difference step must be positive");
    points
        .iter()
        .map(|z| {
            let grad = obj.gradient_at(z);
            let mut fd = DVector::zeros(z.len());
            for i in 0..z.len() {
                let mut plus = z.clone();
                let mut minus = z.clone();
                plus[i] += h;
                minus[i] -= h;
                fd[i] = (obj.value_at(&plus) - obj.value_at(&minus)) / (2.0 * h);
            }
            (grad.clone() - fd).norm() / grad.norm().max(1.0)
        })
        .fold(0.0, f64::max)
}

/// Worst observed violation of the declared sector over sample pairs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SectorSample {
    /// `min (∇g(a)-∇g(b))ᵀ(a-b) - κ‖a-b‖²`; negative means a violation.
    pub monotonicity_slack: f64,
    /// `max ‖∇g(a)-∇g(b)‖ / ‖a-b‖`.
    pub max_gradient_ratio: f64,
}

pub fn sample_sector(obj: &SteadyStateObjective, pairs: &[(DVector<f64>, DVector<f64>)]) -> SectorSample {
    let mut slack = f64::INFINITY;
    let mut ratio: f64 = 0.0;
    for (a, b) in pairs {
        let dz = a - b;
        let dist2 = dz.norm_squared();
        if dist2 == 0.0 {
            continue;
        }
        let dg = obj.gradient_at(a) - obj.gradient_at(b);
        slack = slack.min(dg.dot(&dz) - obj.kappa * dist2);
        ratio = ratio.max(dg.norm() / dist2.sqrt());
    }
    SectorSample {
        monotonicity_slack: slack,
        max_gradient_ratio: ratio,
    }
}

/// `f(x, u) = g(Cx, u)` with `∇f = blkdiag(Cᵀ, I) ∇g(Cx, u)`.
#[derive(Debug, Clone)]
pub struct ComposedObjective {
    base: SteadyStateObjective,
    c: DMatrix<f64>,
}

impl ComposedObjective {
    pub fn new(base: SteadyStateObjective, c: DMatrix<f64>) -> Result<Self> {
        if base.dim() <= c.nrows() {
            return Err(Error::dim(format!(
                "objective dimension {} leaves no input block for p = {}",
                base.dim(),
                c.nrows()
            )));
        }
        Ok(Self { base, c })
    }

    pub fn base(&self) -> &SteadyStateObjective {
        &self.base
    }

    pub fn n(&self) -> usize {
        self.c.ncols()
    }

    pub fn m(&self) -> usize {
        self.base.dim() - self.c.nrows()
    }

    /// `C x`.
    pub fn lifted_output(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.c * x
    }

    fn lift(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        linalg::vcat_vec(&(&self.c * x), u)
    }

    pub fn value(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        self.base.value_at(&self.lift(x, u))
    }

    pub fn gradient(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let p = self.c.nrows();
        let g = self.base.gradient_at(&self.lift(x, u));
        let gy = g.rows(0, p);
        let gu = g.rows(p, self.m()).into_owned();
        linalg::vcat_vec(&(self.c.transpose() * gy), &gu)
    }

    /// Value at stacked `(x, u)`.
    pub fn value_stacked(&self, z: &DVector<f64>) -> f64 {
        let n = self.n();
        self.value(&z.rows(0, n).into_owned(), &z.rows(n, self.m()).into_owned())
    }

    pub fn gradient_stacked(&self, z: &DVector<f64>) -> DVector<f64> {
        let n = self.n();
        self.gradient(&z.rows(0, n).into_owned(), &z.rows(n, self.m()).into_owned())
    }

    /// `blkdiag(Cᵀ, I) H blkdiag(C, I)` when the base has an analytic Hessian.
    pub fn hessian_stacked(&self, z: &DVector<f64>) -> Option<DMatrix<f64>> {
        let n = self.n();
        let lifted = self.lift(&z.rows(0, n).into_owned(), &z.rows(n, self.m()).into_owned());
        let h = self.base.hessian_at(&lifted)?;
        let lift = linalg::blkdiag(&[&self.c, &DMatrix::identity(self.m(), self.m())]);
        Some(lift.transpose() * h * lift)
    }
}
