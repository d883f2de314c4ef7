//! `ossctl`: scenario-driven front end. Every verb reads one scenario file,
//! writes machine-readable reports into the output directory and signals the
//! outcome through its exit code.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use ossctl::controller::ControllerConfig;
use ossctl::kkt::{self, KktGeometry};
use ossctl::lmi;
use ossctl::oracle::OptimizerResult;
use ossctl::plant::{self, LtiPlant};
use ossctl::scenario::{ControllerSpec, Scenario};
use ossctl::sim::{self, SegmentMetrics, Trace};
use ossctl::synthesis::{self, SynthesisResult, ValidationReport};
use ossctl::{linalg, Error};

/// Sinusoidal probes used to cross-check a synthesized gain.
const PROBES: usize = 100;

#[derive(Parser)]
#[command(name = "ossctl", version, about = "Optimal steady-state control toolkit")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
    /// Scenario file (JSON).
    #[arg(long, global = true)]
    scenario: Option<PathBuf>,
    /// Directory for reports; created if missing.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Integration step, overriding the scenario value.
    #[arg(long, global = true)]
    dt: Option<f64>,
    /// Seed for randomized checks.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand, Clone, Copy)]
enum Verb {
    /// Check the standing assumptions and solve for the optimizer of every segment.
    Analyze,
    /// Certify the scenario's PI gains with the circle-criterion LMI.
    Verify,
    /// Search the scenario's gain grid for certified PI gains.
    Tune,
    /// Synthesize a dynamic stabilizer by small-gain design.
    Synth,
    /// Simulate the closed loop and compare against the optimizer.
    Simulate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Status {
    Ok = 0,
    Input = 1,
    Assumption = 2,
    Certification = 3,
    Synthesis = 4,
    Divergence = 5,
}

impl From<Status> for ExitCode {
    fn from(s: Status) -> Self {
        ExitCode::from(s as u8)
    }
}

fn status_of(err: &Error) -> Status {
    match err {
        Error::Assumption(_) => Status::Assumption,
        Error::SynthesisFailed(_) => Status::Synthesis,
        e if e.is_divergence() => Status::Divergence,
        _ => Status::Input,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(threads) = std::env::var("OSSCTL_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
    {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    match run(&cli) {
        Ok(status) => status.into(),
        Err(e) => {
            eprintln!("error: {e}");
            status_of(&e).into()
        }
    }
}

fn run(cli: &Cli) -> ossctl::Result<Status> {
    let path = cli
        .scenario
        .as_deref()
        .ok_or_else(|| Error::InvalidInput("--scenario <path> is required".into()))?;
    let scenario = Scenario::load(path)?;
    fs::create_dir_all(&cli.out)?;
    match cli.verb {
        Verb::Analyze => analyze(&scenario, &cli.out),
        Verb::Verify => verify(&scenario, &cli.out),
        Verb::Tune => tune(&scenario, &cli.out),
        Verb::Synth => synth(&scenario, &cli.out, cli.dt, cli.seed),
        Verb::Simulate => simulate(&scenario, &cli.out, cli.dt),
    }
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> ossctl::Result<()> {
    let file = File::create(dir.join(name))?;
    serde_json::to_writer_pretty(BufWriter::new(file), value)?;
    Ok(())
}

fn write_trace(dir: &Path, trace: &Trace) -> ossctl::Result<()> {
    trace.write_csv(BufWriter::new(File::create(dir.join("trace.csv"))?))?;
    Ok(())
}

#[derive(Serialize)]
struct AnalysisReport {
    scenario: String,
    n: usize,
    m: usize,
    p: usize,
    stabilizable: bool,
    detectable: bool,
    full_row_rank_ab: bool,
    /// `[re, im]` pairs.
    eigenvalues: Vec<[f64; 2]>,
    unstable_eigenvalues: Vec<[f64; 2]>,
    failed_checks: Vec<String>,
    geometry: Option<KktGeometry>,
    optimizers: Vec<OptimizerResult>,
}

fn analyze(s: &Scenario, out: &Path) -> ossctl::Result<Status> {
    let plant = &s.plant;
    let eigenvalues: Vec<[f64; 2]> = linalg::eigenvalues(plant.a())?.iter().map(|z| [z.re, z.im]).collect();
    let unstable = eigenvalues.iter().copied().filter(|z| z[0] >= 0.0).collect();
    let stabilizable = plant::check_stabilizable(plant)?;
    let detectable = plant::check_detectable(plant)?;
    let full_row_rank_ab = plant::check_full_row_rank_ab(plant);
    let mut failed_checks = Vec::new();
    if !stabilizable {
        failed_checks.push("stabilizability of (A, B)".to_string());
    }
    if !detectable {
        failed_checks.push("detectability of (C, A)".to_string());
    }
    if !full_row_rank_ab {
        failed_checks.push("full row rank of [A B]".to_string());
    }
    let mut report = AnalysisReport {
        scenario: s.name.clone(),
        n: plant.n(),
        m: plant.m(),
        p: plant.p(),
        stabilizable,
        detectable,
        full_row_rank_ab,
        eigenvalues,
        unstable_eigenvalues: unstable,
        failed_checks,
        geometry: None,
        optimizers: Vec::new(),
    };
    if report.failed_checks.is_empty() {
        let geometry = kkt::build_kkt_geometry(plant)?;
        report.optimizers = sim::segment_optima(plant, &geometry, &s.objective()?, &s.schedule()?)?;
        report.geometry = Some(geometry);
    }
    write_json(out, "analysis.json", &report)?;
    for check in &report.failed_checks {
        eprintln!("assumption failed: {check}");
    }
    println!(
        "{}: {} unstable eigenvalue(s), {} failed check(s)",
        s.name,
        report.unstable_eigenvalues.len(),
        report.failed_checks.len()
    );
    Ok(if report.failed_checks.is_empty() {
        Status::Ok
    } else {
        Status::Assumption
    })
}

/// Plant and geometry after the assumption checks every later verb needs.
fn checked(s: &Scenario) -> ossctl::Result<(LtiPlant, KktGeometry)> {
    let plant = s.plant.clone();
    if !plant::check_stabilizable(&plant)? {
        return Err(Error::Assumption("(A, B) is not stabilizable".into()));
    }
    if !plant::check_detectable(&plant)? {
        return Err(Error::Assumption("(C, A) is not detectable".into()));
    }
    let geometry = kkt::build_kkt_geometry(&plant)?;
    Ok((plant, geometry))
}

fn verify(s: &Scenario, out: &Path) -> ossctl::Result<Status> {
    let (plant, geometry) = checked(s)?;
    let gains = match &s.controller {
        ControllerSpec::Pi(g) => g.clone(),
        _ => return Err(Error::InvalidInput("verify needs PI gains in the scenario".into())),
    };
    let (kappa, lipschitz) = s.sector();
    let outcome = lmi::verify_stability(&plant, &geometry, kappa, lipschitz, &gains)?;
    let report = json!({
        "scenario": s.name,
        "kappa": kappa,
        "lipschitz": if lipschitz.is_finite() { Some(lipschitz) } else { None },
        "gains": gains,
        "outcome": outcome,
    });
    write_json(out, "certificate.json", &report)?;
    let certified = outcome.is_certified();
    println!("{}: {}", s.name, if certified { "certified" } else { "not certified" });
    Ok(if certified { Status::Ok } else { Status::Certification })
}

fn tune(s: &Scenario, out: &Path) -> ossctl::Result<Status> {
    let (plant, geometry) = checked(s)?;
    let pairs = s.gain_pairs();
    if pairs.is_empty() {
        return Err(Error::InvalidInput(
            "verification.kp_grid and ki_grid must be non-empty".into(),
        ));
    }
    let (kappa, lipschitz) = s.sector();
    let points = lmi::gain_grid_search(&plant, &geometry, kappa, lipschitz, &pairs)?;
    lmi::write_grid_csv(&points, BufWriter::new(File::create(out.join("grid.csv"))?))?;
    let certified: Vec<[f64; 2]> = points.iter().filter(|p| p.certified()).map(|p| [p.kp, p.ki]).collect();
    let verdicts: Vec<_> = points
        .iter()
        .map(|p| (p.kp, p.ki, p.outcome.report().verdict))
        .collect();
    write_json(
        out,
        "tune.json",
        &json!({
            "scenario": s.name,
            "points": points.len(),
            "certified": certified,
            "verdicts": verdicts,
        }),
    )?;
    println!(
        "{}: {} of {} gain pairs certified",
        s.name,
        certified.len(),
        points.len()
    );
    Ok(if certified.is_empty() {
        Status::Certification
    } else {
        Status::Ok
    })
}

fn synthesize(s: &Scenario, plant: &LtiPlant, geometry: &KktGeometry) -> ossctl::Result<SynthesisResult> {
    let (kappa, lipschitz) = s.sector();
    let aug = synthesis::loop_transform(plant, geometry, kappa, lipschitz)?;
    synthesis::synthesize_stabilizer(&aug, &s.synthesis_options()).map_err(|e| match e {
        Error::SolverUndecided(_) => Error::SynthesisFailed(f64::NAN),
        e => e,
    })
}

#[derive(Serialize)]
struct SynthesisReport<'a> {
    scenario: &'a str,
    /// Drop-in replacement for the scenario's `controller` field.
    controller: ControllerSpec,
    gamma: f64,
    gamma_min: f64,
    gamma_design: f64,
    decay_rate: f64,
    peak_gain: f64,
    probe_gain: f64,
    certificate: &'a synthesis::BoundedRealCertificate,
    validation: &'a ValidationReport,
}

fn synth(s: &Scenario, out: &Path, dt: Option<f64>, seed: u64) -> ossctl::Result<Status> {
    let (plant, geometry) = checked(s)?;
    let result = synthesize(s, &plant, &geometry)?;
    let (kappa, lipschitz) = s.sector();
    let aug = synthesis::loop_transform(&plant, &geometry, kappa, lipschitz)?;
    let closed = synthesis::close_loop(&aug, &result.stabilizer)?;
    let settings = s.settings(plant.m() + result.stabilizer.order(), dt)?;
    let validation = synthesis::validate_synthesis(
        &plant,
        &geometry,
        &s.objective()?,
        &result.stabilizer,
        &s.schedule()?,
        &settings,
    )?;
    let report = SynthesisReport {
        scenario: &s.name,
        controller: ControllerSpec::Stabilizer(result.stabilizer.clone()),
        gamma: result.gamma,
        gamma_min: result.gamma_min,
        gamma_design: result.gamma_design,
        decay_rate: result.decay_rate,
        peak_gain: closed.peak_gain(),
        probe_gain: synthesis::probe_gain(&closed, PROBES, seed),
        certificate: &result.certificate,
        validation: &validation,
    };
    write_json(out, "stabilizer.json", &report)?;
    println!(
        "{}: gamma = {:.6}, validation {}",
        s.name,
        result.gamma,
        if validation.converged {
            "converged"
        } else {
            "did not converge"
        }
    );
    Ok(if validation.converged {
        Status::Ok
    } else {
        Status::Synthesis
    })
}

#[derive(Serialize)]
struct SimulationReport<'a> {
    scenario: &'a str,
    steps: usize,
    dt: f64,
    segments: &'a [SegmentMetrics],
    optimizers: &'a [OptimizerResult],
    diverged_at: Option<f64>,
}

fn simulate(s: &Scenario, out: &Path, dt: Option<f64>) -> ossctl::Result<Status> {
    let (plant, geometry) = checked(s)?;
    let config = match s.controller_config() {
        Some(c) => c,
        None => ControllerConfig::Stabilizer(synthesize(s, &plant, &geometry)?.stabilizer),
    };
    let states = plant.m() + config.stabilizer_order();
    let settings = s.settings(states, dt)?;
    let objective = s.objective()?;
    let schedule = s.schedule()?;
    let (trace, diverged_at) = match sim::simulate(&plant, &config, &objective, &geometry, &schedule, &settings) {
        Ok(t) => (t, None),
        Err(Error::Simulation { reason, time, partial }) => {
            eprintln!("simulation stopped at t = {time}: {reason}");
            if !reason.starts_with("divergence") {
                write_trace(out, &partial)?;
                return Err(Error::InvalidInput(reason));
            }
            (*partial, Some(time))
        }
        Err(e) => return Err(e),
    };
    write_trace(out, &trace)?;
    let metrics = if diverged_at.is_some() {
        Vec::new()
    } else {
        sim::convergence_metrics(&trace)
    };
    let report = SimulationReport {
        scenario: &s.name,
        steps: trace.len().saturating_sub(1),
        dt: settings.dt,
        segments: &metrics,
        optimizers: &trace.optimizer_ref,
        diverged_at,
    };
    write_json(out, "metrics.json", &report)?;
    if diverged_at.is_some() {
        return Ok(Status::Divergence);
    }
    let worst = metrics.iter().map(|m| m.terminal_error).fold(0.0, f64::max);
    println!("{}: worst terminal error {worst:.3e}", s.name);
    Ok(Status::Ok)
}
