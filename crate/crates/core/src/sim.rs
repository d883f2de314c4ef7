//! Fixed-step RK4 simulation of the plant in closed loop with the controller
//! under a piecewise-constant disturbance.

use std::io::Write;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::controller::{Controller, ControllerConfig};
use crate::error::{Error, Result};
use crate::kkt::KktGeometry;
use crate::linalg;
use crate::objective::{ComposedObjective, SteadyStateObjective};
use crate::oracle::{self, OptimizerResult};
use crate::plant::{Disturbance, LtiPlant};

/// State norm beyond which a run is declared divergent.
pub const DIVERGENCE_THRESHOLD: f64 = 1e9;
/// Relative tolerance for segment boundaries falling on step boundaries.
const ALIGN_TOL: f64 = 1e-9;
/// Settling band relative to the segment's initial error.
pub const SETTLING_FRACTION: f64 = 0.02;
/// Errors below this, relative to `1 + ‖(y⋆, u⋆)‖`, count as settled.
pub const SETTLING_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisturbanceSchedule {
    segments: Vec<(f64, Disturbance)>,
}

impl DisturbanceSchedule {
    pub fn new(segments: Vec<(f64, Disturbance)>) -> Result<Self> {
        let Some((t0, d0)) = segments.first() else {
            return Err(Error::InvalidInput("disturbance schedule is empty".into()));
        };
        if *t0 != 0.0 {
            return Err(Error::InvalidInput(format!(
                "schedule must start at t = 0, starts at {t0}"
            )));
        }
        for w in segments.windows(2) {
            if !(w[1].0 > w[0].0) || !w[1].0.is_finite() {
                return Err(Error::InvalidInput(
                    "segment start times must be strictly increasing".into(),
                ));
            }
        }
        for (_, d) in &segments {
            if d.len() != d0.len() {
                return Err(Error::dim("all disturbances must have the same length"));
            }
            if d.as_vector().iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput("disturbance entries must be finite".into()));
            }
        }
        Ok(Self { segments })
    }

    pub fn constant(d: Disturbance) -> Self {
        Self {
            segments: vec![(0.0, d)],
        }
    }

    pub fn segments(&self) -> &[(f64, Disturbance)] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Index of the segment active at `t`.
    pub fn index_at(&self, t: f64) -> usize {
        self.segments.iter().rposition(|(s, _)| *s <= t).unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub times: Vec<f64>,
    #[serde(with = "crate::serde_mat::vectors")]
    pub x: Vec<DVector<f64>>,
    /// Controller state `(η, x_s)` per sample.
    #[serde(with = "crate::serde_mat::vectors")]
    pub controller: Vec<DVector<f64>>,
    #[serde(with = "crate::serde_mat::vectors")]
    pub y: Vec<DVector<f64>>,
    #[serde(with = "crate::serde_mat::vectors")]
    pub u: Vec<DVector<f64>>,
    #[serde(with = "crate::serde_mat::vectors")]
    pub e: Vec<DVector<f64>>,
    /// Integrator dimension `m`; the rest of `controller` is `x_s`.
    pub m: usize,
    /// Sample index at which each segment starts.
    pub segment_starts: Vec<usize>,
    /// Oracle optimizer for each segment.
    pub optimizer_ref: Vec<OptimizerResult>,
}

impl Trace {
    fn empty(m: usize, optimizer_ref: Vec<OptimizerResult>) -> Self {
        Self {
            times: Vec::new(),
            x: Vec::new(),
            controller: Vec::new(),
            y: Vec::new(),
            u: Vec::new(),
            e: Vec::new(),
            m,
            segment_starts: Vec::new(),
            optimizer_ref,
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn stabilizer_order(&self) -> usize {
        self.controller.first().map_or(0, |c| c.len() - self.m)
    }

    /// Segment index of sample `k` (boundary samples belong to the new segment).
    pub fn segment_of(&self, k: usize) -> usize {
        self.segment_starts.iter().rposition(|&s| s <= k).unwrap_or(0)
    }

    /// Sample range `[first, last]` covering segment `i`; the last sample is
    /// the state at the segment's end time.
    pub fn segment_range(&self, i: usize) -> (usize, usize) {
        let first = self.segment_starts[i];
        let last = self
            .segment_starts
            .get(i + 1)
            .copied()
            .unwrap_or(self.len().saturating_sub(1))
            .min(self.len().saturating_sub(1));
        (first, last)
    }

    /// `‖(y, u) − (y⋆, u⋆)‖` at sample `k` against segment `seg`'s optimizer.
    pub fn tracking_error(&self, k: usize, seg: usize) -> f64 {
        let target = self.optimizer_ref[seg].output_input();
        (linalg::vcat_vec(&self.y[k], &self.u[k]) - target).norm()
    }

    /// Writes `t, x…, eta…, [xs…], y…, u…, e…, ystar…, ustar…`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let n = self.x.first().map_or(0, |v| v.len());
        let p = self.y.first().map_or(0, |v| v.len());
        let m = self.m;
        let ns = self.stabilizer_order();
        let mut header = vec!["t".to_string()];
        let mut push = |prefix: &str, count: usize| {
            header.extend((1..=count).map(|i| format!("{prefix}{i}")));
        };
        push("x", n);
        push("eta", m);
        push("xs", ns);
        push("y", p);
        push("u", m);
        push("e", m);
        push("ystar", p);
        push("ustar", m);
        writeln!(out, "{}", header.join(","))?;
        for k in 0..self.len() {
            let opt = &self.optimizer_ref[self.segment_of(k)];
            let fields = std::iter::once(self.times[k])
                .chain(self.x[k].iter().copied())
                .chain(self.controller[k].iter().copied())
                .chain(self.y[k].iter().copied())
                .chain(self.u[k].iter().copied())
                .chain(self.e[k].iter().copied())
                .chain(opt.y_star.iter().copied())
                .chain(opt.u_star.iter().copied())
                .map(|v| v.to_string())
                .collect::<Vec<_>>();
            writeln!(out, "{}", fields.join(","))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SimulationSettings {
    pub t_final: f64,
    pub dt: f64,
    pub x0: DVector<f64>,
    /// Controller state `(η0, x_s0)`.
    pub c0: DVector<f64>,
}

/// Number of whole steps of size `dt` in `t`, if `t` lies on the grid.
fn aligned_steps(t: f64, dt: f64) -> Option<usize> {
    let steps = (t / dt).round();
    ((steps * dt - t).abs() <= ALIGN_TOL * t.abs().max(1.0) && steps >= 0.0).then_some(steps as usize)
}

/// Oracle optimizer for every segment of the schedule.
pub fn segment_optima(
    plant: &LtiPlant,
    geometry: &KktGeometry,
    objective: &SteadyStateObjective,
    schedule: &DisturbanceSchedule,
) -> Result<Vec<OptimizerResult>> {
    let composed = ComposedObjective::new(objective.clone(), plant.c().clone())?;
    schedule
        .segments()
        .par_iter()
        .map(|(_, d)| oracle::solve_steady_state(plant, geometry, &composed, d))
        .collect()
}

#[allow(clippy::too_many_arguments)]
pub fn simulate(
    plant: &LtiPlant,
    config: &ControllerConfig,
    objective: &SteadyStateObjective,
    geometry: &KktGeometry,
    schedule: &DisturbanceSchedule,
    settings: &SimulationSettings,
) -> Result<Trace> {
    let SimulationSettings { t_final, dt, x0, c0 } = settings;
    let (t_final, dt) = (*t_final, *dt);
    let (n, m) = (plant.n(), plant.m());
    if !(dt > 0.0 && dt.is_finite()) || !(t_final > 0.0 && t_final.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "need dt > 0 and t_final > 0, got dt = {dt}, t_final = {t_final}"
        )));
    }
    if schedule.segments()[0].1.len() != n {
        return Err(Error::dim("disturbance length differs from n"));
    }
    let mut controller = Controller::new(config, geometry.clone(), objective.clone(), plant.p())?;
    if x0.len() != n || c0.len() != controller.state_dim() {
        return Err(Error::dim(format!(
            "initial state lengths ({}, {}) do not match (n, m + n_s) = ({n}, {})",
            x0.len(),
            c0.len(),
            controller.state_dim()
        )));
    }
    let total = aligned_steps(t_final, dt)
        .ok_or_else(|| Error::InvalidInput(format!("t_final = {t_final} is not a multiple of dt = {dt}")))?;
    let mut boundaries = Vec::new();
    for (t, _) in schedule.segments() {
        if *t >= t_final {
            return Err(Error::InvalidInput(format!(
                "segment start {t} is not before t_final = {t_final}"
            )));
        }
        boundaries.push(
            aligned_steps(*t, dt)
                .ok_or_else(|| Error::InvalidInput(format!("segment start {t} is not a multiple of dt = {dt}")))?,
        );
    }

    let optima = segment_optima(plant, geometry, objective, schedule)?;
    let mut trace = Trace::empty(m, optima);
    trace.segment_starts = boundaries.clone();

    let nc = controller.state_dim();
    let mut state = linalg::vcat_vec(x0, c0);
    let split = |s: &DVector<f64>| (s.rows(0, n).into_owned(), s.rows(n, nc).into_owned());
    let mut seg = 0;

    for k in 0..=total {
        let t = k as f64 * dt;
        while seg + 1 < boundaries.len() && boundaries[seg + 1] <= k {
            seg += 1;
        }
        let d = &schedule.segments()[seg].1;
        let (x, c) = split(&state);
        let y = plant.output(&x);
        let out = match controller.evaluate(&c, &y) {
            Ok(out) => out,
            Err(err) => return Err(abort(trace, t, format!("{err}"))),
        };
        trace.times.push(t);
        trace.x.push(x.clone());
        trace.controller.push(c);
        trace.y.push(y);
        trace.u.push(out.u.clone());
        trace.e.push(out.e.clone());
        if k == total {
            break;
        }

        let k1 = linalg::vcat_vec(&plant.dynamics(&x, &out.u, d), &out.state_dot);
        let mut rhs = |s: &DVector<f64>| -> Result<DVector<f64>> {
            let (x, c) = split(s);
            let o = controller.evaluate(&c, &plant.output(&x))?;
            Ok(linalg::vcat_vec(&plant.dynamics(&x, &o.u, d), &o.state_dot))
        };
        let stages = (|| -> Result<DVector<f64>> {
            let k2 = rhs(&(&state + &k1 * (dt / 2.0)))?;
            let k3 = rhs(&(&state + &k2 * (dt / 2.0)))?;
            let k4 = rhs(&(&state + &k3 * dt))?;
            Ok(&state + (&k1 + &k2 * 2.0 + &k3 * 2.0 + &k4) * (dt / 6.0))
        })();
        let next = match stages {
            Ok(next) => next,
            Err(err) => return Err(abort(trace, t, format!("{err}"))),
        };
        let norm = next.norm();
        if !(norm <= DIVERGENCE_THRESHOLD) {
            return Err(abort(
                trace,
                t + dt,
                format!("divergence detected: state norm {norm:.3e}"),
            ));
        }
        state = next;
    }
    Ok(trace)
}

fn abort(mut trace: Trace, time: f64, reason: String) -> Error {
    let len = trace.len();
    trace.segment_starts.retain(|&s| s < len.max(1));
    Error::Simulation {
        reason,
        time,
        partial: Box::new(trace),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentMetrics {
    pub t_start: f64,
    pub t_end: f64,
    /// Time after the segment start from which the error stays within 2% of
    /// its initial value; `None` if it never does.
    pub settling_time: Option<f64>,
    pub terminal_error: f64,
    /// Per channel of `(y, u)`, the largest excursion past the optimizer
    /// value in the direction of travel.
    pub overshoot: Vec<f64>,
}

impl SegmentMetrics {
    pub fn max_overshoot(&self) -> f64 {
        self.overshoot.iter().cloned().fold(0.0, f64::max)
    }
}

pub fn convergence_metrics(trace: &Trace) -> Vec<SegmentMetrics> {
    (0..trace.segment_starts.len())
        .filter(|&i| trace.segment_starts[i] < trace.len())
        .map(|i| segment_metrics(trace, i))
        .collect()
}

fn segment_metrics(trace: &Trace, i: usize) -> SegmentMetrics {
    let (first, last) = trace.segment_range(i);
    let errors: Vec<f64> = (first..=last).map(|k| trace.tracking_error(k, i)).collect();
    let target = trace.optimizer_ref[i].output_input();
    let band = (SETTLING_FRACTION * errors[0]).max(SETTLING_FLOOR * (1.0 + target.norm()));
    let settling_time = match errors.iter().rposition(|&e| e > band) {
        None => Some(0.0),
        Some(j) if j + 1 < errors.len() => Some(trace.times[first + j + 1] - trace.times[first]),
        Some(_) => None,
    };
    let start = linalg::vcat_vec(&trace.y[first], &trace.u[first]);
    let overshoot = (0..target.len())
        .map(|c| {
            let direction = (target[c] - start[c]).signum();
            (first..=last)
                .map(|k| {
                    let v = if c < trace.y[k].len() {
                        trace.y[k][c]
                    } else {
                        trace.u[k][c - trace.y[k].len()]
                    };
                    let past = v - target[c];
                    if target[c] == start[c] {
                        past.abs()
                    } else {
                        (past * direction).max(0.0)
                    }
                })
                .fold(0.0, f64::max)
        })
        .collect();
    SegmentMetrics {
        t_start: trace.times[first],
        t_end: trace.times[last],
        settling_time,
        terminal_error: *errors.last().expect("segment has samples"),
        overshoot,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchmark;
    use crate::controller::PiGains;
    use crate::kkt::build_kkt_geometry;
    use crate::objective::quadratic_objective;
    use nalgebra::DMatrix;

    #[test]
    fn schedule_validation() {
        let d = || Disturbance::zeros(2);
        assert!(DisturbanceSchedule::new(vec![]).is_err());
        assert!(DisturbanceSchedule::new(vec![(1.0, d())]).is_err());
        assert!(DisturbanceSchedule::new(vec![(0.0, d()), (0.0, d())]).is_err());
        assert!(DisturbanceSchedule::new(vec![(0.0, d()), (1.0, Disturbance::zeros(3))]).is_err());
        let s = DisturbanceSchedule::new(vec![(0.0, d()), (1.0, d()), (2.5, d())]).unwrap();
        assert_eq!(s.index_at(0.0), 0);
        assert_eq!(s.index_at(1.0), 1);
        assert_eq!(s.index_at(9.0), 2);
    }

    fn settings(t_final: f64, dt: f64, n: usize, nc: usize) -> SimulationSettings {
        SimulationSettings {
            t_final,
            dt,
            x0: DVector::zeros(n),
            c0: DVector::zeros(nc),
        }
    }

    #[test]
    fn equilibrium_start_stays_put() {
        let plant = benchmark::stable_plant();
        let geo = build_kkt_geometry(&plant).unwrap();
        let obj = quadratic_objective(DMatrix::identity(3, 3) * 2.0, DVector::zeros(3)).unwrap();
        let config = ControllerConfig::Pi(PiGains::scalar(1, 1.0, 1.0).unwrap());
        let trace = simulate(
            &plant,
            &config,
            &obj,
            &geo,
            &DisturbanceSchedule::constant(Disturbance::zeros(4)),
            &settings(1.0, 1e-2, 4, 1),
        )
        .unwrap();
        assert!(trace.x.iter().all(|x| x.iter().all(|&v| v == 0.0)));
        let metrics = convergence_metrics(&trace);
        assert_eq!(metrics[0].settling_time, Some(0.0));
        assert_eq!(metrics[0].max_overshoot(), 0.0);
    }

    #[test]
    fn misaligned_boundaries_are_rejected() {
        let plant = benchmark::stable_plant();
        let geo = build_kkt_geometry(&plant).unwrap();
        let obj = benchmark::quadratic_cost();
        let config = ControllerConfig::Pi(PiGains::scalar(1, 1.0, 1.0).unwrap());
        let sched =
            DisturbanceSchedule::new(vec![(0.0, Disturbance::zeros(4)), (0.15, Disturbance::zeros(4))]).unwrap();
        let r = simulate(&plant, &config, &obj, &geo, &sched, &settings(1.0, 0.1, 4, 1));
        assert!(matches!(r, Err(Error::InvalidInput(_))));
    }

    #[test]
    fn zero_controller_on_unstable_plant_diverges() {
        let plant = benchmark::unstable_plant();
        let geo = build_kkt_geometry(&plant).unwrap();
        let obj = benchmark::quadratic_cost();
        let config = ControllerConfig::Stabilizer(crate::controller::DynamicStabilizer::zero(0, 2, 1));
        let s = SimulationSettings {
            t_final: 40.0,
            dt: 1e-2,
            x0: DVector::from_vec(vec![0.0, 0.0, 0.0, 1.0]),
            c0: DVector::zeros(1),
        };
        let err = simulate(&plant, &config, &obj, &geo, &benchmark::disturbance_schedule(), &s).unwrap_err();
        assert!(err.is_divergence(), "{err}");
        match err {
            Error::Simulation { partial, .. } => assert!(partial.len() > 100),
            _ => unreachable!(),
        }
    }

    #[test]
    fn csv_header_and_rows() {
        let plant = benchmark::stable_plant();
        let geo = build_kkt_geometry(&plant).unwrap();
        let obj = benchmark::quadratic_cost();
        let config = ControllerConfig::Pi(PiGains::scalar(1, 0.5, 0.5).unwrap());
        let sched = DisturbanceSchedule::new(vec![
            (0.0, Disturbance::zeros(4)),
            (0.5, Disturbance::from_slice(&[1.0, 0.0, 0.0, 0.0])),
        ])
        .unwrap();
        let trace = simulate(&plant, &config, &obj, &geo, &sched, &settings(1.0, 0.1, 4, 1)).unwrap();
        assert_eq!(trace.len(), 11);
        for (k, t) in trace.times.iter().enumerate() {
            assert_eq!(trace.y[k], plant.output(&trace.x[k]));
            if k > 0 {
                assert!(*t > trace.times[k - 1]);
            }
        }
        let mut buf = Vec::new();
        trace.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "t,x1,x2,x3,x4,eta1,y1,y2,u1,e1,ystar1,ystar2,ustar1"
        );
        assert_eq!(lines.count(), 11);
        assert_eq!(convergence_metrics(&trace).len(), 2);
    }
}
