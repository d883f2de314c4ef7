//! Scenario files: one JSON document describing a plant, a cost, a
//! controller, a disturbance schedule and the simulation and verification
//! settings. Matrices use the row-major `{"rows", "cols", "data"}` layout.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::controller::{ControllerConfig, DynamicStabilizer, PiGains};
use crate::error::{Error, Result};
use crate::objective::{self, SteadyStateObjective};
use crate::plant::{Disturbance, LtiPlant};
use crate::sim::{DisturbanceSchedule, SimulationSettings};
use crate::synthesis::SynthesisOptions;

/// Relative slack allowed between a declared sector and the spectrum of a
/// quadratic cost.
const SECTOR_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub plant: LtiPlant,
    pub objective: ObjectiveSpec,
    pub controller: ControllerSpec,
    pub disturbances: Vec<SegmentSpec>,
    pub simulation: SimulationSpec,
    #[serde(default)]
    pub verification: VerificationSpec,
}

/// Builtin cost with its declared sector `[kappa, lipschitz]`; a `null`
/// Lipschitz constant means the gradient is not globally Lipschitz.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "builtin", rename_all = "snake_case")]
pub enum ObjectiveSpec {
    Quadratic {
        #[serde(with = "crate::serde_mat::matrix")]
        h: DMatrix<f64>,
        #[serde(with = "crate::serde_mat::vector")]
        q: DVector<f64>,
        kappa: f64,
        #[serde(with = "crate::serde_mat::extended")]
        lipschitz: f64,
    },
    CoshExample {
        kappa: f64,
        #[serde(with = "crate::serde_mat::extended")]
        lipschitz: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ControllerSpec {
    Pi(PiGains),
    Stabilizer(DynamicStabilizer),
    Synthesize {
        #[serde(default)]
        decay_rate: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentSpec {
    pub start: f64,
    pub d: Disturbance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSpec {
    pub t_final: f64,
    pub dt: f64,
    /// Zero when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    /// Controller state `(η, x_s)`; zero when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c0: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct VerificationSpec {
    /// Scalar gains searched by `tune`.
    #[serde(default)]
    pub kp_grid: Vec<f64>,
    #[serde(default)]
    pub ki_grid: Vec<f64>,
    /// Sector used for certification instead of the declared one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sector: Option<SectorSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SectorSpec {
    pub kappa: f64,
    #[serde(with = "crate::serde_mat::extended")]
    pub lipschitz: f64,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self> {
        let s: Scenario = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Cross-field dimension and value checks.
    pub fn validate(&self) -> Result<()> {
        let plant = LtiPlant::new(self.plant.a().clone(), self.plant.b().clone(), self.plant.c().clone())?;
        let (n, m, p) = (plant.n(), plant.m(), plant.p());
        let obj = self.objective()?;
        if obj.dim() != p + m {
            return Err(Error::dim(format!(
                "objective has dimension {}, plant needs p + m = {}",
                obj.dim(),
                p + m
            )));
        }
        match &self.controller {
            ControllerSpec::Pi(g) => {
                let g = PiGains::new(g.kp().clone(), g.ki().clone())?;
                if g.m() != m {
                    return Err(Error::dim(format!("PI gains are {0}x{0}, plant has m = {m}", g.m())));
                }
            }
            ControllerSpec::Stabilizer(s) => {
                DynamicStabilizer::new(s.a_s().clone(), s.b_s().clone(), s.c_s().clone(), s.d_s().clone(), p)?;
                if s.m() != m {
                    return Err(Error::dim(format!(
                        "stabilizer drives {} inputs, plant has m = {m}",
                        s.m()
                    )));
                }
            }
            ControllerSpec::Synthesize { decay_rate } => {
                if !(*decay_rate >= 0.0 && decay_rate.is_finite()) {
                    return Err(Error::InvalidInput(format!(
                        "decay_rate must be >= 0, got {decay_rate}"
                    )));
                }
            }
        }
        if self.disturbances.iter().any(|s| s.d.len() != n) {
            return Err(Error::dim(format!("every disturbance must have length n = {n}")));
        }
        self.schedule()?;
        let sim = &self.simulation;
        if !(sim.dt > 0.0 && sim.t_final > 0.0 && sim.dt.is_finite() && sim.t_final.is_finite()) {
            return Err(Error::InvalidInput(
                "simulation needs finite dt > 0 and t_final > 0".into(),
            ));
        }
        if sim.x0.as_ref().is_some_and(|x| x.len() != n) {
            return Err(Error::dim(format!("x0 must have length n = {n}")));
        }
        if let (Some(c0), Some(order)) = (&sim.c0, self.stabilizer_order()) {
            if c0.len() != m + order {
                return Err(Error::dim(format!("c0 must have length m + n_s = {}", m + order)));
            }
        }
        if let Some(s) = &self.verification.sector {
            objective::validate_sector(s.kappa, s.lipschitz)?;
        }
        Ok(())
    }

    pub fn objective(&self) -> Result<SteadyStateObjective> {
        match &self.objective {
            ObjectiveSpec::Quadratic { h, q, kappa, lipschitz } => {
                let base = objective::quadratic_objective(h.clone(), q.clone())?;
                let tol = SECTOR_SLACK * (1.0 + base.lipschitz());
                if *kappa > base.kappa() + tol || *lipschitz < base.lipschitz() - tol {
                    return Err(Error::InvalidInput(format!(
                        "declared sector [{kappa}, {lipschitz}] does not contain the spectrum [{}, {}] of H",
                        base.kappa(),
                        base.lipschitz()
                    )));
                }
                base.with_sector(*kappa, *lipschitz)
            }
            ObjectiveSpec::CoshExample { kappa, lipschitz } => {
                let base = objective::cosh_example_objective();
                if *kappa > base.kappa() {
                    return Err(Error::InvalidInput(format!(
                        "declared kappa {kappa} exceeds the strong convexity modulus {}",
                        base.kappa()
                    )));
                }
                if lipschitz.is_finite() {
                    log::warn!("cosh objective has no global Lipschitz constant; using the declared value {lipschitz}");
                }
                base.with_sector(*kappa, *lipschitz)
            }
        }
    }

    /// Sector used for certification.
    pub fn sector(&self) -> (f64, f64) {
        match (&self.verification.sector, &self.objective) {
            (Some(s), _) => (s.kappa, s.lipschitz),
            (None, ObjectiveSpec::Quadratic { kappa, lipschitz, .. }) => (*kappa, *lipschitz),
            (None, ObjectiveSpec::CoshExample { kappa, lipschitz }) => (*kappa, *lipschitz),
        }
    }

    /// `None` when the controller is still to be synthesized.
    pub fn controller_config(&self) -> Option<ControllerConfig> {
        match &self.controller {
            ControllerSpec::Pi(g) => Some(ControllerConfig::Pi(g.clone())),
            ControllerSpec::Stabilizer(s) => Some(ControllerConfig::Stabilizer(s.clone())),
            ControllerSpec::Synthesize { .. } => None,
        }
    }

    pub fn synthesis_options(&self) -> SynthesisOptions {
        let decay_rate = match &self.controller {
            ControllerSpec::Synthesize { decay_rate } => *decay_rate,
            _ => 0.0,
        };
        SynthesisOptions {
            decay_rate,
            ..Default::default()
        }
    }

    fn stabilizer_order(&self) -> Option<usize> {
        match &self.controller {
            ControllerSpec::Pi(_) => Some(0),
            ControllerSpec::Stabilizer(s) => Some(s.order()),
            ControllerSpec::Synthesize { .. } => None,
        }
    }

    pub fn schedule(&self) -> Result<DisturbanceSchedule> {
        DisturbanceSchedule::new(self.disturbances.iter().map(|s| (s.start, s.d.clone())).collect())
    }

    /// Simulation settings for a controller with `controller_states` states,
    /// optionally with a different step.
    pub fn settings(&self, controller_states: usize, dt: Option<f64>) -> Result<SimulationSettings> {
        let n = self.plant.n();
        let sim = &self.simulation;
        let x0 = sim.x0.clone().map_or_else(|| DVector::zeros(n), DVector::from_vec);
        let c0 = match &sim.c0 {
            Some(c) if c.len() == controller_states => DVector::from_vec(c.clone()),
            Some(c) => {
                return Err(Error::dim(format!(
                    "c0 has length {}, controller has {controller_states} states",
                    c.len()
                )))
            }
            None => DVector::zeros(controller_states),
        };
        Ok(SimulationSettings {
            t_final: sim.t_final,
            dt: dt.unwrap_or(sim.dt),
            x0,
            c0,
        })
    }

    pub fn gain_pairs(&self) -> Vec<(f64, f64)> {
        crate::lmi::product_grid(&self.verification.kp_grid, &self.verification.ki_grid)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchmark;

    fn sample() -> Scenario {
        Scenario {
            name: "sample".into(),
            plant: benchmark::stable_plant(),
            objective: ObjectiveSpec::Quadratic {
                h: DMatrix::from_diagonal(&DVector::from_vec(vec![1.0 / 9.0, 1.0, 1.0])),
                q: DVector::zeros(3),
                kappa: 1.0 / 9.0,
                lipschitz: 1.0,
            },
            controller: ControllerSpec::Pi(PiGains::scalar(1, 2.0, 2.0).unwrap()),
            disturbances: benchmark::disturbance_schedule()
                .segments()
                .iter()
                .map(|(start, d)| SegmentSpec {
                    start: *start,
                    d: d.clone(),
                })
                .collect(),
            simulation: SimulationSpec {
                t_final: 15.0,
                dt: 1e-3,
                x0: None,
                c0: None,
            },
            verification: VerificationSpec {
                kp_grid: benchmark::linear_gain_grid(),
                ki_grid: benchmark::linear_gain_grid(),
                sector: None,
            },
        }
    }

    #[test]
    fn json_round_trip_is_bitwise() {
        let s = sample();
        let back = Scenario::from_json(&s.to_json().unwrap()).unwrap();
        assert_eq!(back, s);
        for (a, b) in s.plant.a().iter().zip(back.plant.a().iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn null_lipschitz_means_unbounded() {
        let text = r#"{"builtin": "cosh_example", "kappa": 0.1111111111111111, "lipschitz": null}"#;
        let spec: ObjectiveSpec = serde_json::from_str(text).unwrap();
        assert_eq!(
            spec,
            ObjectiveSpec::CoshExample {
                kappa: 1.0 / 9.0,
                lipschitz: f64::INFINITY
            }
        );
    }

    #[test]
    fn mismatched_dimensions_are_rejected() {
        let mut s = sample();
        s.disturbances[1].d = Disturbance::from_slice(&[1.0, 2.0]);
        assert!(matches!(s.validate(), Err(Error::Dimension(_))));

        let mut s = sample();
        s.controller = ControllerSpec::Pi(PiGains::scalar(2, 1.0, 1.0).unwrap());
        assert!(matches!(s.validate(), Err(Error::Dimension(_))));
    }

    #[test]
    fn declared_sector_must_contain_spectrum() {
        let mut s = sample();
        if let ObjectiveSpec::Quadratic { lipschitz, .. } = &mut s.objective {
            *lipschitz = 0.5;
        }
        assert!(matches!(s.validate(), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn sector_override_wins() {
        let mut s = sample();
        s.verification.sector = Some(SectorSpec {
            kappa: 0.1,
            lipschitz: f64::INFINITY,
        });
        assert_eq!(s.sector(), (0.1, f64::INFINITY));
    }
}
