use std::path::PathBuf;

use nalgebra::DVector;

use ossctl::benchmark;
use ossctl::controller::{Controller, ControllerConfig, DynamicStabilizer, PiGains};
use ossctl::error::Error;
use ossctl::kkt::{self, build_kkt_geometry};
use ossctl::linalg;
use ossctl::objective::ComposedObjective;
use ossctl::oracle;
use ossctl::scenario::Scenario;
use ossctl::sim::{self, DisturbanceSchedule, SimulationSettings, Trace};
use ossctl::synthesis::{self, loop_transform, probe_gain};

fn scenario(name: &str) -> Scenario {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(format!("{name}.json"));
    Scenario::load(&path).unwrap()
}

fn run(s: &Scenario, config: &ControllerConfig, dt: Option<f64>) -> Trace {
    let geo = build_kkt_geometry(&s.plant).unwrap();
    let states = config.m() + config.stabilizer_order();
    sim::simulate(
        &s.plant,
        config,
        &s.objective().unwrap(),
        &geo,
        &s.schedule().unwrap(),
        &s.settings(states, dt).unwrap(),
    )
    .unwrap()
}

fn output_input(trace: &Trace, k: usize) -> DVector<f64> {
    linalg::vcat_vec(&trace.y[k], &trace.u[k])
}

#[test]
fn halving_the_step_changes_the_cosh_trace_by_less_than_1e6() {
    let s = scenario("example_vb");
    let config = s.controller_config().unwrap();
    let coarse = run(&s, &config, Some(1e-3));
    let fine = run(&s, &config, Some(5e-4));
    assert_eq!(fine.len(), 2 * coarse.len() - 1);
    let worst = (0..coarse.len())
        .map(|k| (output_input(&coarse, k) - output_input(&fine, 2 * k)).norm())
        .fold(0.0, f64::max);
    assert!(worst < 1e-6, "step-halving difference {worst:e}");
}

#[test]
fn pi_embedded_as_stabilizer_reproduces_the_pi_trace() {
    let s = scenario("example_vb");
    let config = s.controller_config().unwrap();
    let ControllerConfig::Pi(gains) = &config else {
        panic!("PI scenario")
    };
    let embedded = ControllerConfig::Stabilizer(DynamicStabilizer::from_pi(gains, s.plant.p()));
    let a = run(&s, &config, Some(2e-3));
    let b = run(&s, &embedded, Some(2e-3));
    let worst = (0..a.len())
        .map(|k| (output_input(&a, k) - output_input(&b, k)).norm())
        .fold(0.0, f64::max);
    assert!(worst < 1e-9, "trace difference {worst:e}");
}

#[test]
fn trace_outputs_are_exact_functions_of_state() {
    let s = scenario("example_va");
    let trace = run(&s, &s.controller_config().unwrap(), Some(1e-2));
    for (x, y) in trace.x.iter().zip(&trace.y) {
        assert_eq!(&(s.plant.c() * x), y);
    }
}

#[test]
fn oracle_optimizer_is_an_equilibrium_of_the_cosh_loop() {
    let s = scenario("example_vb");
    let config = s.controller_config().unwrap();
    let ControllerConfig::Pi(gains) = &config else {
        panic!("PI scenario")
    };
    let obj = s.objective().unwrap();
    let geo = build_kkt_geometry(&s.plant).unwrap();
    let composed = ComposedObjective::new(obj.clone(), s.plant.c().clone()).unwrap();
    for (_, d) in s.schedule().unwrap().segments() {
        let opt = oracle::solve_steady_state(&s.plant, &geo, &composed, d).unwrap();
        let eta = gains.integrator_for(&opt.u_star);
        let mut controller = Controller::new(&config, geo.clone(), obj.clone(), s.plant.p()).unwrap();
        let out = controller.evaluate(&eta, &s.plant.output(&opt.x_star)).unwrap();
        let residual = (s.plant.dynamics(&opt.x_star, &out.u, d)).norm() + out.state_dot.norm();
        assert!(residual < 1e-7, "dynamics residual {residual:e}");
    }
}

#[test]
fn long_run_settles_at_the_optimizer() {
    let s = scenario("example_va");
    let config = s.controller_config().unwrap();
    let obj = s.objective().unwrap();
    let geo = build_kkt_geometry(&s.plant).unwrap();
    let d = s.schedule().unwrap().segments()[0].1.clone();
    let settings = SimulationSettings {
        t_final: 60.0,
        dt: 1e-2,
        x0: DVector::zeros(4),
        c0: DVector::zeros(1),
    };
    let trace = sim::simulate(
        &s.plant,
        &config,
        &obj,
        &geo,
        &DisturbanceSchedule::constant(d.clone()),
        &settings,
    )
    .unwrap();
    let last = trace.len() - 1;
    let (x, u) = (&trace.x[last], &trace.u[last]);
    let dynamics = s.plant.dynamics(x, u, &d).norm() + trace.e[last].norm();
    assert!(dynamics < 1e-6, "final dynamics residual {dynamics:e}");

    // Equilibrium implies both optimality residuals vanish.
    let composed = ComposedObjective::new(obj.clone(), s.plant.c().clone()).unwrap();
    let point = ossctl::plant::EquilibriumPoint::new(&s.plant, x.clone(), u.clone());
    let res = kkt::kkt_residual(&s.plant, &geo, &composed, &point, &d);
    assert!(res.feas < 1e-6 && res.grad < 1e-6, "{res:?}");

    let target = oracle::solve_quadratic_objective(&s.plant, &obj, &d).unwrap();
    assert!((output_input(&trace, last) - target.output_input()).norm() < 1e-4);
}

#[test]
fn certified_quadratic_run_has_a_monotone_tail_in_every_segment() {
    let s = scenario("example_va");
    let trace = run(&s, &s.controller_config().unwrap(), None);
    for seg in 0..3 {
        let (first, last) = trace.segment_range(seg);
        let tail = first + (0.8 * (last - first) as f64) as usize;
        let errors: Vec<f64> = (tail..=last).map(|k| trace.tracking_error(k, seg)).collect();
        assert!(errors.windows(2).all(|w| w[1] <= w[0]), "segment {seg}");
    }
}

#[test]
fn equilibrium_start_has_no_transient() {
    let plant = benchmark::stable_plant();
    let geo = build_kkt_geometry(&plant).unwrap();
    let obj = benchmark::quadratic_cost();
    let gains = PiGains::scalar(1, 2.0, 2.0).unwrap();
    let d = benchmark::disturbance_schedule().segments()[1].1.clone();
    let opt = oracle::solve_quadratic_objective(&plant, &obj, &d).unwrap();
    let settings = SimulationSettings {
        t_final: 5.0,
        dt: 1e-2,
        x0: opt.x_star.clone(),
        c0: gains.integrator_for(&opt.u_star),
    };
    let trace = sim::simulate(
        &plant,
        &ControllerConfig::Pi(gains),
        &obj,
        &geo,
        &DisturbanceSchedule::constant(d),
        &settings,
    )
    .unwrap();
    let metrics = sim::convergence_metrics(&trace);
    assert_eq!(metrics[0].settling_time, Some(0.0));
    assert!(metrics[0].max_overshoot() < 1e-9);
}

#[test]
fn synthesized_stabilizer_gain_bound_holds_under_probing() {
    let s = scenario("example_vc");
    let geo = build_kkt_geometry(&s.plant).unwrap();
    let (kappa, lipschitz) = s.sector();
    let aug = loop_transform(&s.plant, &geo, kappa, lipschitz).unwrap();
    let result = synthesis::synthesize_stabilizer(&aug, &s.synthesis_options()).unwrap();
    assert!(result.gamma < 1.0);
    assert!(result.gamma_min <= result.gamma_design && result.gamma_design < 1.0);

    // The probe uses the unshifted closed loop, as simulated.
    let closed = synthesis::close_loop(&aug, &result.stabilizer).unwrap();
    assert!(linalg::spectral_abscissa(&closed.a).unwrap() < 0.0);
    let probed = probe_gain(&closed, 100, 3);
    assert!(
        probed <= result.gamma * (1.0 + 1e-3),
        "probe {probed} vs gamma {}",
        result.gamma
    );
    assert!(closed.peak_gain() <= result.gamma * (1.0 + 1e-3));
}

#[test]
fn certified_pi_loop_gain_bound_holds_under_probing() {
    let s = scenario("example_va");
    let geo = build_kkt_geometry(&s.plant).unwrap();
    let (kappa, lipschitz) = s.sector();
    let aug = loop_transform(&s.plant, &geo, kappa, lipschitz).unwrap();
    let config = s.controller_config().unwrap();
    let cert = synthesis::analyze_fixed_controller(&aug, &config).unwrap();
    let closed = synthesis::close_loop(&aug, &config.as_stabilizer(s.plant.p())).unwrap();
    assert!(cert.gamma < 1.0);
    assert!(probe_gain(&closed, 100, 11) <= cert.gamma * (1.0 + 1e-3));
}

#[test]
fn zero_controller_on_unstable_plant_fails_validation_by_divergence() {
    let s = scenario("example_vc");
    let geo = build_kkt_geometry(&s.plant).unwrap();
    let zero = DynamicStabilizer::zero(0, s.plant.p(), s.plant.m());
    let settings = SimulationSettings {
        t_final: 40.0,
        dt: 1e-2,
        x0: DVector::zeros(4),
        c0: DVector::zeros(1),
    };
    let err = synthesis::validate_synthesis(
        &s.plant,
        &geo,
        &s.objective().unwrap(),
        &zero,
        &s.schedule().unwrap(),
        &settings,
    )
    .unwrap_err();
    assert!(err.is_divergence(), "{err}");
    assert!(matches!(err, Error::Simulation { .. }));
}
