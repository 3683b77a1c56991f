//! Command-line experiment runner for the bouncing-ball study.
//!
//! Every command reads an optional JSON [`ExperimentConfig`]; missing
//! sections take their defaults and unknown fields are rejected. Exit codes:
//! 0 success, 2 configuration, 3 simulation, 4 solver, 5 verification.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hybrid::{Matrix, Vector};
use crate::io::{
    extension_entries, extensions_from_entries, read_json, read_trajectory, write_closed_loop_csv,
    write_events_json, write_json, write_trajectory_csv, GainsFile, IoError,
};
use crate::mpc::{run_mpc, ClosedLoopLog, MpcConfig, MpcError, TrackingProblem, TrackingWeights};
use crate::simulator::{build_extensions, default_extension_horizon, rollout, Reference};
use crate::solver::{SolveReport, SolverOptions};
use crate::systems::{
    ball_mode, bouncing_ball, knot_count, make_single_bounce_reference, BouncingBallParams,
    ReferenceWeights, SingleBounce, SystemError, IMPACT,
};
use crate::verify::{run_all, CheckOptions};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_SIMULATION: i32 = 3;
pub const EXIT_SOLVER: i32 = 4;
pub const EXIT_VERIFICATION: i32 = 5;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("simulation error: {0}")]
    Simulation(String),
    #[error("solver error: {0}")]
    Solver(String),
    #[error("{0} verification check(s) failed")]
    Verification(usize),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Simulation(_) => EXIT_SIMULATION,
            CliError::Solver(_) => EXIT_SOLVER,
            CliError::Verification(_) => EXIT_VERIFICATION,
        }
    }
}

// Writing results can fail for reasons unrelated to the experiment; those
// are reported with the simulation code since no solve was involved.
impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        CliError::Simulation(e.to_string())
    }
}

impl From<MpcError> for CliError {
    fn from(e: MpcError) -> Self {
        match e {
            MpcError::Config(_) => CliError::Config(e.to_string()),
            MpcError::Sim(_) => CliError::Simulation(e.to_string()),
            _ => CliError::Solver(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "hilqr",
    version,
    about = "Hybrid iLQR experiments on a bouncing ball"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON experiment configuration; defaults are used when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory, overriding `output_dir` from the configuration.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Run MPC both with and without the event-driven cost update.
    #[arg(long, global = true)]
    pub ablation: bool,
    /// Seed for the randomized verification states.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Initial-state perturbation as `component:magnitude`, e.g. `z:0.5`.
    #[arg(long, global = true)]
    pub perturb: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Open-loop rollout with a constant input.
    Simulate,
    /// Optimize the single-bounce reference.
    Solve,
    /// Closed-loop MPC tracking of the reference from a perturbed start.
    Mpc,
    /// Numerical verification battery.
    Check,
}

/// Diagonal weights of a quadratic cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagonalWeights {
    pub state: Vec<f64>,
    pub input: Vec<f64>,
    pub terminal: Vec<f64>,
}

impl DiagonalWeights {
    fn matrices(&self, n: usize, m: usize) -> Result<(Matrix, Matrix, Matrix), CliError> {
        let check = |name: &str, v: &[f64], len: usize, strict: bool| {
            if v.len() != len {
                return Err(CliError::Config(format!(
                    "{name} weights need {len} entries, got {}",
                    v.len()
                )));
            }
            if v.iter()
                .any(|w| !w.is_finite() || *w < 0.0 || (strict && *w == 0.0))
            {
                let bound = if strict { "positive" } else { "nonnegative" };
                return Err(CliError::Config(format!("{name} weights must be {bound}")));
            }
            Ok(Matrix::from_diagonal(&Vector::from_column_slice(v)))
        };
        Ok((
            check("state", &self.state, n, false)?,
            check("input", &self.input, m, true)?,
            check("terminal", &self.terminal, n, false)?,
        ))
    }
}

fn diagonal(m: &Matrix) -> Vec<f64> {
    m.diagonal().iter().copied().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReferenceSpec {
    pub start: Vec<f64>,
    pub goal: Vec<f64>,
    pub duration: f64,
    pub dt: f64,
    pub weights: DiagonalWeights,
    pub max_iterations: usize,
    pub threshold: f64,
}

impl Default for ReferenceSpec {
    fn default() -> Self {
        let w = ReferenceWeights::default();
        Self {
            start: vec![4.0, 0.0],
            goal: vec![2.5, 0.0],
            duration: 1.0,
            dt: 0.001,
            weights: DiagonalWeights {
                state: diagonal(&w.running_state),
                input: diagonal(&w.input),
                terminal: diagonal(&w.terminal),
            },
            max_iterations: 50,
            threshold: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateSpec {
    pub x0: Vec<f64>,
    /// Initial mode; inferred from the sign of the velocity when absent.
    pub mode: Option<usize>,
    /// Input held for the whole rollout.
    pub input: Vec<f64>,
    pub duration: f64,
    pub dt: f64,
}

impl Default for SimulateSpec {
    fn default() -> Self {
        Self {
            x0: vec![4.0, 0.0],
            mode: None,
            input: vec![0.0],
            duration: 1.0,
            dt: 0.001,
        }
    }
}

/// Offset added to one component of the initial state before MPC.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Perturbation {
    /// `z`, `zdot` or a state index.
    pub component: String,
    pub magnitude: f64,
}

impl Default for Perturbation {
    fn default() -> Self {
        Self {
            component: "z".into(),
            magnitude: 0.5,
        }
    }
}

impl Perturbation {
    /// Parses `component:magnitude`.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let (component, magnitude) = text.split_once(':').ok_or_else(|| {
            CliError::Config(format!("perturbation `{text}` is not component:magnitude"))
        })?;
        let magnitude = magnitude
            .trim()
            .parse::<f64>()
            .map_err(|e| CliError::Config(format!("perturbation magnitude `{magnitude}`: {e}")))?;
        let p = Self {
            component: component.trim().to_string(),
            magnitude,
        };
        p.index(2)?;
        Ok(p)
    }

    pub fn index(&self, n: usize) -> Result<usize, CliError> {
        let index = match self.component.as_str() {
            "z" => 0,
            "zdot" => 1,
            other => other.parse::<usize>().map_err(|_| {
                CliError::Config(format!("unknown perturbation component `{other}`"))
            })?,
        };
        if index >= n || !self.magnitude.is_finite() {
            return Err(CliError::Config(format!(
                "perturbation {}:{} is out of range",
                self.component, self.magnitude
            )));
        }
        Ok(index)
    }

    pub fn vector(&self, n: usize) -> Result<Vector, CliError> {
        let mut d = Vector::zeros(n);
        d[self.index(n)?] = self.magnitude;
        Ok(d)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckSpec {
    pub samples: usize,
    pub seed: u64,
    /// Restitution given to the closed-form oracle; set it away from the
    /// system value to confirm the battery catches a wrong model.
    pub oracle_restitution: Option<f64>,
}

impl Default for CheckSpec {
    fn default() -> Self {
        Self {
            samples: 100,
            seed: 0,
            oracle_restitution: None,
        }
    }
}

/// Previously written reference files used by `mpc` instead of solving.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceFiles {
    pub trajectory: PathBuf,
    pub events: PathBuf,
    /// Built from the trajectory when absent.
    #[serde(default)]
    pub extensions: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub system: BouncingBallParams,
    pub reference: ReferenceSpec,
    pub simulate: SimulateSpec,
    pub mpc: MpcConfig,
    pub tracking_weights: DiagonalWeights,
    pub perturbation: Perturbation,
    pub check: CheckSpec,
    pub reference_files: Option<ReferenceFiles>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let w = TrackingWeights::default();
        Self {
            system: BouncingBallParams::default(),
            reference: ReferenceSpec::default(),
            simulate: SimulateSpec::default(),
            mpc: MpcConfig::default(),
            tracking_weights: DiagonalWeights {
                state: diagonal(&w.state),
                input: diagonal(&w.input),
                terminal: diagonal(&w.terminal),
            },
            perturbation: Perturbation::default(),
            check: CheckSpec::default(),
            reference_files: None,
            output_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let config = |e: &dyn std::fmt::Display| CliError::Config(e.to_string());
        self.system.validate().map_err(|e| config(&e))?;
        self.mpc.validate().map_err(|e| config(&e))?;
        let r = &self.reference;
        for (name, v) in [("reference.start", &r.start), ("reference.goal", &r.goal)] {
            if v.len() != 2 || v.iter().any(|x| !x.is_finite()) {
                return Err(CliError::Config(format!(
                    "{name} must be two finite numbers"
                )));
            }
        }
        knot_count(r.duration, r.dt).map_err(|e| config(&e))?;
        if !(r.threshold > 0.0) || r.max_iterations == 0 {
            return Err(CliError::Config(
                "reference.threshold and reference.max_iterations must be positive".into(),
            ));
        }
        r.weights.matrices(2, 1)?;
        self.tracking_weights.matrices(2, 1)?;
        let s = &self.simulate;
        if s.x0.len() != 2 || s.input.len() != 1 {
            return Err(CliError::Config(
                "simulate.x0 needs 2 entries and simulate.input 1".into(),
            ));
        }
        if matches!(s.mode, Some(m) if m > 1) {
            return Err(CliError::Config("simulate.mode must be 0 or 1".into()));
        }
        knot_count(s.duration, s.dt).map_err(|e| config(&e))?;
        self.perturbation.index(2)?;
        if self.check.samples == 0 {
            return Err(CliError::Config("check.samples must be positive".into()));
        }
        Ok(())
    }
}

/// Parses arguments and runs the selected command.
pub fn run<I, T>(args: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| match e.kind() {
        clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => e.exit(),
        _ => CliError::Config(e.to_string()),
    })?;
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.check.seed = seed;
    }
    if let Some(text) = &cli.perturb {
        cfg.perturbation = Perturbation::parse(text)?;
    }
    match cli.command {
        Command::Simulate => cmd_simulate(&cfg),
        Command::Solve => cmd_solve(&cfg).map(|_| ()),
        Command::Mpc => cmd_mpc(&cfg, cli.ablation).map(|_| ()),
        Command::Check => cmd_check(&cfg),
    }
}

fn output_dir(cfg: &ExperimentConfig) -> Result<&Path, CliError> {
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| {
        CliError::Config(format!(
            "output directory {}: {e}",
            cfg.output_dir.display()
        ))
    })?;
    Ok(&cfg.output_dir)
}

pub fn cmd_simulate(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let s = &cfg.simulate;
    let sys = bouncing_ball(&cfg.system).map_err(|e| CliError::Config(e.to_string()))?;
    let n = knot_count(s.duration, s.dt).map_err(|e| CliError::Config(e.to_string()))?;
    let x0 = Vector::from_column_slice(&s.x0);
    let mode0 = s.mode.map_or_else(|| ball_mode(&x0), crate::hybrid::ModeId);
    let inputs = vec![Vector::from_column_slice(&s.input); n];
    let traj = rollout(&sys, &x0, mode0, &inputs, s.dt)
        .map_err(|e| CliError::Simulation(e.to_string()))?;
    let dir = output_dir(cfg)?;
    write_trajectory_csv(&dir.join("trajectory.csv"), &traj)?;
    write_events_json(&dir.join("events.json"), &traj)?;
    let final_state = traj.final_state();
    println!(
        "simulated {} intervals, {} events, final state [{}, {}]",
        traj.len(),
        traj.events.len(),
        final_state[0],
        final_state[1]
    );
    Ok(())
}

/// Convergence report written by `solve`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveSummary {
    pub knots: usize,
    pub impact_knot: Option<usize>,
    pub final_state: Vec<f64>,
    pub terminal_error: f64,
    #[serde(flatten)]
    pub report: SolveReport,
}

fn reference_weights(cfg: &ExperimentConfig) -> Result<ReferenceWeights, CliError> {
    let (running_state, input, terminal) = cfg.reference.weights.matrices(2, 1)?;
    Ok(ReferenceWeights {
        running_state,
        input,
        terminal,
    })
}

fn solve_reference(cfg: &ExperimentConfig) -> Result<SingleBounce, CliError> {
    let r = &cfg.reference;
    let options = SolverOptions {
        max_iterations: r.max_iterations,
        threshold: r.threshold,
        ..SolverOptions::default()
    };
    make_single_bounce_reference(
        &cfg.system,
        &Vector::from_column_slice(&r.start),
        &Vector::from_column_slice(&r.goal),
        r.duration,
        r.dt,
        &reference_weights(cfg)?,
        &options,
    )
    .map_err(|e| match e {
        SystemError::InvalidParameter(_) | SystemError::NonIntegralDuration { .. } => {
            CliError::Config(e.to_string())
        }
        _ => CliError::Solver(e.to_string()),
    })
}

/// Writes the reference, its extensions, gains and report. Fails with the
/// solver exit code after writing if the solve did not converge.
pub fn cmd_solve(cfg: &ExperimentConfig) -> Result<SingleBounce, CliError> {
    let bounce = solve_reference(cfg)?;
    let dir = output_dir(cfg)?;
    let traj = &bounce.reference.trajectory;
    write_trajectory_csv(&dir.join("reference.csv"), traj)?;
    write_events_json(&dir.join("reference_events.json"), traj)?;
    write_json(
        &dir.join("extensions.json"),
        &extension_entries(&bounce.reference),
    )?;
    write_json(&dir.join("gains.json"), &GainsFile::from(&bounce.gains))?;
    let goal = Vector::from_column_slice(&cfg.reference.goal);
    let summary = SolveSummary {
        knots: traj.states.len(),
        impact_knot: traj
            .events
            .iter()
            .find(|(_, e)| e.transition == IMPACT)
            .map(|(k, _)| *k),
        final_state: traj.final_state().as_slice().to_vec(),
        terminal_error: (traj.final_state() - goal).amax(),
        report: bounce.report.clone(),
    };
    write_json(&dir.join("report.json"), &summary)?;
    println!(
        "solve: converged={} iterations={} cost={:.6e} final state [{}, {}]",
        bounce.report.converged,
        bounce.report.iterations,
        bounce.report.final_cost,
        summary.final_state[0],
        summary.final_state[1]
    );
    if !bounce.report.converged {
        return Err(CliError::Solver(format!(
            "no convergence after {} iterations ({:?})",
            bounce.report.iterations, bounce.report.termination
        )));
    }
    Ok(bounce)
}

fn load_reference(cfg: &ExperimentConfig, files: &ReferenceFiles) -> Result<Reference, CliError> {
    let sys = bouncing_ball(&cfg.system).map_err(|e| CliError::Config(e.to_string()))?;
    let read = |e: IoError| CliError::Config(e.to_string());
    let traj =
        read_trajectory(&files.trajectory, &files.events, &sys, Some(cfg.mpc.dt)).map_err(read)?;
    let extensions = match &files.extensions {
        Some(path) => extensions_from_entries(read_json(path).map_err(read)?),
        None => build_extensions(&sys, &traj, default_extension_horizon(traj.len()))
            .map_err(|e| CliError::Simulation(e.to_string()))?,
    };
    Ok(Reference::new(traj, extensions))
}

/// Per-run entry of the MPC summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub cost_update: bool,
    pub n_steps: usize,
    pub n_nonconverged: usize,
    pub nonconverged_knots: Vec<usize>,
    pub max_tracking_error: f64,
    pub mean_iterations: f64,
    pub mean_solve_ms: f64,
    pub peak_input: f64,
    pub final_state: Vec<f64>,
    pub closed_loop_file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpcSummary {
    pub perturbation: Perturbation,
    pub runs: Vec<RunSummary>,
}

fn summarize(
    log: &ClosedLoopLog,
    reference: &Reference,
    cost_update: bool,
    file: &str,
) -> RunSummary {
    RunSummary {
        cost_update,
        n_steps: log.steps.len(),
        n_nonconverged: log.nonconverged(),
        nonconverged_knots: log
            .steps
            .iter()
            .enumerate()
            .filter(|(_, s)| !s.converged)
            .map(|(k, _)| k)
            .collect(),
        max_tracking_error: log.max_tracking_error(reference),
        mean_iterations: log.mean_iterations(),
        mean_solve_ms: log.mean_solve_ms(),
        peak_input: log.peak_input(0..log.steps.len()),
        final_state: log.final_state.as_slice().to_vec(),
        closed_loop_file: file.to_string(),
    }
}

/// Runs closed-loop MPC, once or paired with and without the cost update,
/// from the same perturbed start.
pub fn cmd_mpc(cfg: &ExperimentConfig, ablation: bool) -> Result<MpcSummary, CliError> {
    let reference = match &cfg.reference_files {
        Some(files) => load_reference(cfg, files)?,
        None => {
            let mut ref_cfg = cfg.clone();
            ref_cfg.reference.dt = cfg.mpc.dt;
            let bounce = solve_reference(&ref_cfg)?;
            if !bounce.report.converged {
                return Err(CliError::Solver("reference solve did not converge".into()));
            }
            bounce.reference
        }
    };
    let reference = Arc::new(reference);
    let sys = Arc::new(bouncing_ball(&cfg.system).map_err(|e| CliError::Config(e.to_string()))?);
    let (state, input, terminal) = cfg.tracking_weights.matrices(2, 1)?;
    let weights = TrackingWeights {
        state,
        input,
        terminal,
    };
    let problem = TrackingProblem::new(
        sys.clone(),
        reference.clone(),
        weights,
        cfg.mpc.use_saltation,
    )?;
    let x0 = reference.trajectory.states[0].clone();
    let disturbance = cfg.perturbation.vector(2)?;
    let mode0 = ball_mode(&(&x0 + &disturbance));

    let variants: Vec<bool> = if ablation {
        vec![true, false]
    } else {
        vec![cfg.mpc.cost_update]
    };
    let dir = output_dir(cfg)?;
    let mut runs = Vec::new();
    for cost_update in variants {
        let mpc_cfg = MpcConfig {
            cost_update,
            ..cfg.mpc.clone()
        };
        let log = run_mpc(&problem, &sys, &x0, mode0, &mpc_cfg, Some(&disturbance))?;
        let file = if !ablation {
            "closed_loop.csv"
        } else if cost_update {
            "closed_loop_update.csv"
        } else {
            "closed_loop_no_update.csv"
        };
        write_closed_loop_csv(&dir.join(file), &log)?;
        let run = summarize(&log, &reference, cost_update, file);
        println!(
            "mpc cost_update={}: {} steps, {} not converged, max tracking error {:.3e}, mean iterations {:.2}",
            cost_update, run.n_steps, run.n_nonconverged, run.max_tracking_error, run.mean_iterations
        );
        runs.push(run);
    }
    let summary = MpcSummary {
        perturbation: cfg.perturbation.clone(),
        runs,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

pub fn cmd_check(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let opts = CheckOptions {
        params: cfg.system,
        seed: cfg.check.seed,
        samples: cfg.check.samples,
        oracle_restitution: cfg.check.oracle_restitution,
    };
    let results = run_all(&opts);
    for r in &results {
        println!(
            "[{}] {}: measured {:.3e}, tolerance {:.1e} ({})",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.measured,
            r.tolerance,
            r.detail
        );
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(CliError::Verification(failed));
    }
    Ok(())
}
