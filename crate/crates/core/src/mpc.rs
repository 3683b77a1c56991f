//! Receding-horizon tracking with Hybrid iLQR.
//!
//! Each solve tracks a window of a fixed reference. With the cost update on,
//! a plan whose mode differs from the reference at some knot is compared
//! against the reference extension in the plan's mode instead of the
//! nominal knot. Solves are warm started from the previous plan and seeded
//! with the reference itself; the cheaper of the two starts is optimized.

use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crate::cost::tracking_cost;
use crate::cost::{CostError, CostModel};
use crate::hybrid::{HybridSystem, Matrix, ModeId, Vector};
use crate::simulator::{
    build_extensions, closed_loop_rollout_window, integrate_step, HybridTrajectory, MismatchPolicy,
    Reference, SimError,
};
use crate::solver::{
    alpha_schedule, backward_pass, linearize_trajectory, solve, EventLinearization, GainSchedule,
    Initialization, LineSearchOptions, SolveError, SolveReport, SolverOptions,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MpcError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("knot {index} is past the reference end ({len})")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("negative or non-finite contact force {value} for leg {leg}")]
    NegativeForce { leg: usize, value: f64 },
    #[error("expected {expected} contact forces, got {found}")]
    ForceCount { expected: usize, found: usize },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Solve(#[from] SolveError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MpcConfig {
    /// Knot intervals per solve.
    pub horizon: usize,
    pub dt: f64,
    pub threshold: f64,
    pub max_iterations: usize,
    pub batch_width: usize,
    pub alpha_base: f64,
    /// Knots covered on each side of an event in each plan.
    pub extension_horizon: usize,
    pub warm_start: bool,
    /// Compare against reference extensions on a mode mismatch.
    pub cost_update: bool,
    pub use_saltation: bool,
    pub parallel: bool,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            horizon: 50,
            dt: 0.001,
            threshold: 1e-4,
            max_iterations: 50,
            batch_width: 9,
            alpha_base: 0.6,
            extension_horizon: 50,
            warm_start: true,
            cost_update: true,
            use_saltation: true,
            parallel: true,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<(), MpcError> {
        let fail = |msg: String| Err(MpcError::Config(msg));
        if self.horizon < 2 {
            return fail(format!("horizon must be at least 2, got {}", self.horizon));
        }
        if !(self.dt > 0.0) {
            return fail(format!("dt must be positive, got {}", self.dt));
        }
        if !(self.threshold > 0.0) {
            return fail(format!(
                "threshold must be positive, got {}",
                self.threshold
            ));
        }
        if self.max_iterations == 0 {
            return fail("max_iterations must be positive".into());
        }
        if self.batch_width == 0 {
            return fail("batch_width must be positive".into());
        }
        if !(self.alpha_base > 0.0 && self.alpha_base < 1.0) {
            return fail(format!(
                "alpha_base must lie in (0, 1), got {}",
                self.alpha_base
            ));
        }
        Ok(())
    }

    pub fn solver_options(&self) -> SolverOptions {
        SolverOptions {
            max_iterations: self.max_iterations,
            threshold: self.threshold,
            line_search: LineSearchOptions {
                alphas: alpha_schedule(self.alpha_base, self.batch_width),
                parallel: self.parallel,
                ..LineSearchOptions::default()
            },
            extension_horizon: Some(self.extension_horizon),
            use_saltation: self.use_saltation,
            event_linearization: EventLinearization::Exact,
            ..SolverOptions::default()
        }
    }
}

/// Weights of the tracking cost.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackingWeights {
    pub state: Matrix,
    pub input: Matrix,
    pub terminal: Matrix,
}

impl Default for TrackingWeights {
    /// Ball tracking weights: position dominates velocity.
    fn default() -> Self {
        let diag = Matrix::from_diagonal(&Vector::from_vec(vec![1000.0, 10.0]));
        Self {
            state: diag.clone(),
            input: Matrix::from_element(1, 1, 1e-2),
            terminal: diag,
        }
    }
}

/// A model, a full-length reference and the tracking weights, plus feedback
/// gains of the reference used to seed every solve.
#[derive(Debug, Clone)]
pub struct TrackingProblem {
    pub model: Arc<HybridSystem>,
    pub reference: Arc<Reference>,
    pub weights: TrackingWeights,
    pub reference_gains: GainSchedule,
}

impl TrackingProblem {
    pub fn new(
        model: Arc<HybridSystem>,
        reference: Arc<Reference>,
        weights: TrackingWeights,
        use_saltation: bool,
    ) -> Result<Self, MpcError> {
        if reference.is_empty() {
            return Err(MpcError::Config("reference has no intervals".into()));
        }
        let cost = CostModel::tracking(
            reference.clone(),
            weights.state.clone(),
            weights.input.clone(),
            weights.terminal.clone(),
        )?;
        let lins = linearize_trajectory(
            &model,
            &reference.trajectory,
            EventLinearization::Exact,
            true,
        )?;
        let options = SolverOptions::default();
        let mut lambda = options.regularization_min;
        let reference_gains = loop {
            match backward_pass(&cost, &reference.trajectory, &lins, lambda, use_saltation) {
                Ok(g) => break g,
                Err(SolveError::NotPositiveDefinite { .. })
                    if lambda < options.regularization_max =>
                {
                    lambda *= options.regularization_increase;
                }
                Err(e) => return Err(e.into()),
            }
        };
        Ok(Self {
            model,
            reference,
            weights,
            reference_gains,
        })
    }

    /// Reference intervals.
    pub fn len(&self) -> usize {
        self.reference.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reference.is_empty()
    }

    /// Cost of the window starting at `t_index`, clipped at the reference end
    /// (at least one interval).
    pub fn window_cost(&self, t_index: usize, cfg: &MpcConfig) -> Result<CostModel, MpcError> {
        let steps = window_length(self.len(), t_index, cfg.horizon);
        let cost = CostModel::window(
            self.reference.clone(),
            t_index,
            steps,
            self.weights.state.clone(),
            self.weights.input.clone(),
            self.weights.terminal.clone(),
        )?
        .with_mode_matching(cfg.cost_update);
        Ok(cost)
    }
}

/// Window length at `t_index`: the horizon clipped at the reference end,
/// but never shorter than one interval.
pub fn window_length(total: usize, t_index: usize, horizon: usize) -> usize {
    horizon.min(total.saturating_sub(t_index)).max(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Seed {
    WarmStart,
    Reference,
}

#[derive(Debug, Clone)]
pub struct MpcSolution {
    pub t_index: usize,
    pub plan: Reference,
    pub gains: GainSchedule,
    pub first_input: Vector,
    pub report: SolveReport,
    pub seed: Seed,
}

/// One receding-horizon solve from the measured `(x_now, mode_now)`.
pub fn mpc_step(
    problem: &TrackingProblem,
    x_now: &Vector,
    mode_now: ModeId,
    t_index: usize,
    previous: Option<&MpcSolution>,
    cfg: &MpcConfig,
) -> Result<MpcSolution, MpcError> {
    cfg.validate()?;
    if t_index > problem.len() {
        return Err(MpcError::IndexOutOfRange {
            index: t_index,
            len: problem.len(),
        });
    }
    let sys = problem.model.as_ref();
    let cost = problem.window_cost(t_index, cfg)?;
    let steps = cost.horizon();
    let policy = MismatchPolicy::Fallback;

    let seeded = closed_loop_rollout_window(
        sys,
        &problem.reference,
        &problem.reference_gains,
        t_index,
        steps,
        0.0,
        x_now,
        mode_now,
        policy,
    )?;
    let seeded_cost = cost.total(&seeded)?;
    let mut start = (seeded, seeded_cost, Seed::Reference);

    if let (true, Some(prev)) = (cfg.warm_start, previous) {
        if prev.t_index + 1 == t_index {
            let (nominal, gains) =
                shift_plan(problem, prev, t_index, steps, cfg.extension_horizon)?;
            // A warm start that fails to roll out is simply not used.
            if let Ok(warm) = closed_loop_rollout_window(
                sys, &nominal, &gains, 0, steps, 0.0, x_now, mode_now, policy,
            ) {
                let warm_cost = cost.total(&warm)?;
                if warm_cost <= start.1 {
                    start = (warm, warm_cost, Seed::WarmStart);
                }
            }
        }
    }

    let (initial, _, seed) = start;
    let solution = solve(
        sys,
        &cost,
        Initialization::Trajectory(initial),
        &cfg.solver_options(),
    )?;
    let first_input = solution.reference.trajectory.inputs[0].clone();
    Ok(MpcSolution {
        t_index,
        plan: solution.reference,
        gains: solution.gains,
        first_input,
        report: solution.report,
        seed,
    })
}

/// The previous plan advanced by one knot, padded at the end by holding the
/// reference input, with gains shifted the same way.
fn shift_plan(
    problem: &TrackingProblem,
    prev: &MpcSolution,
    t_index: usize,
    steps: usize,
    extension_horizon: usize,
) -> Result<(Reference, GainSchedule), MpcError> {
    let sys = problem.model.as_ref();
    let old = &prev.plan.trajectory;
    let reference = &problem.reference;
    let dt = reference.trajectory.dt;
    let mut traj = HybridTrajectory::single(
        reference.trajectory.time(t_index),
        dt,
        old.states[1.min(old.len())].clone(),
        old.modes[1.min(old.len())],
    );
    let mut feedforward = Vec::with_capacity(steps);
    let mut feedback = Vec::with_capacity(steps);
    for j in 0..steps {
        let k_old = j + 1;
        if k_old < old.len() {
            traj.inputs.push(old.inputs[k_old].clone());
            traj.states.push(old.states[k_old + 1].clone());
            traj.modes.push(old.modes[k_old + 1]);
            if let Some(event) = old.event_at(k_old) {
                traj.events.push((j, event.clone()));
            }
            feedforward.push(prev.gains.feedforward[k_old].clone());
            feedback.push(prev.gains.feedback[k_old].clone());
        } else {
            let k_ref = (t_index + j).min(reference.len() - 1);
            let u = reference.trajectory.inputs[k_ref].clone();
            let step = integrate_step(sys, traj.modes[j], traj.time(j), &traj.states[j], &u, dt)?;
            traj.inputs.push(u);
            traj.states.push(step.x_next);
            traj.modes.push(step.mode_next);
            if let Some(event) = step.event {
                traj.events.push((j, event));
            }
            feedforward.push(Vector::zeros(sys.input_dim()));
            feedback.push(problem.reference_gains.feedback[k_ref].clone());
        }
    }
    let extensions = build_extensions(sys, &traj, extension_horizon)?;
    Ok((
        Reference::new(traj, extensions),
        GainSchedule {
            feedforward,
            feedback,
            dj_linear: 0.0,
            dj_quadratic: 0.0,
        },
    ))
}

/// One row of the closed-loop log.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopStep {
    pub t: f64,
    pub mode: ModeId,
    pub x: Vector,
    pub u: Vector,
    pub converged: bool,
    pub iterations: usize,
    pub expected_reduction: f64,
    pub solve_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopLog {
    pub steps: Vec<ClosedLoopStep>,
    /// Plant state after the last applied input.
    pub final_state: Vector,
    pub final_mode: ModeId,
    /// Accepted-iteration cost histories of every solve.
    pub cost_histories: Vec<Vec<f64>>,
}

impl ClosedLoopLog {
    pub fn nonconverged(&self) -> usize {
        self.steps.iter().filter(|s| !s.converged).count()
    }

    pub fn mean_iterations(&self) -> f64 {
        mean(self.steps.iter().map(|s| s.iterations as f64))
    }

    pub fn mean_solve_ms(&self) -> f64 {
        mean(self.steps.iter().map(|s| s.solve_ms))
    }

    /// Largest state deviation from the reference knot at the same index.
    pub fn max_tracking_error(&self, reference: &Reference) -> f64 {
        self.steps
            .iter()
            .enumerate()
            .map(|(k, s)| (&s.x - reference.nominal(k).x).amax())
            .fold(0.0, f64::max)
    }

    /// Largest input magnitude over the knots in `range`.
    pub fn peak_input(&self, range: std::ops::Range<usize>) -> f64 {
        self.steps
            .get(range.start.min(self.steps.len())..range.end.min(self.steps.len()))
            .unwrap_or(&[])
            .iter()
            .map(|s| s.u.amax())
            .fold(0.0, f64::max)
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, count) = values.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Runs one solve per reference knot (including the last) against `plant`,
/// applying each first input for one interval. The plant is paused while
/// solving.
pub fn run_mpc(
    problem: &TrackingProblem,
    plant: &HybridSystem,
    x0: &Vector,
    mode0: ModeId,
    cfg: &MpcConfig,
    disturbance: Option<&Vector>,
) -> Result<ClosedLoopLog, MpcError> {
    cfg.validate()?;
    let dt = problem.reference.trajectory.dt;
    if (dt - cfg.dt).abs() > 1e-12 * dt.max(1.0) {
        return Err(MpcError::Config(format!(
            "configured dt {} differs from the reference dt {}",
            cfg.dt, dt
        )));
    }
    let mut x = match disturbance {
        Some(d) => x0 + d,
        None => x0.clone(),
    };
    let mut mode = mode0;
    let mut steps = Vec::with_capacity(problem.len() + 1);
    let mut histories = Vec::with_capacity(problem.len() + 1);
    let mut previous: Option<MpcSolution> = None;
    for t_index in 0..=problem.len() {
        let started = Instant::now();
        let solution = mpc_step(problem, &x, mode, t_index, previous.as_ref(), cfg)?;
        let solve_ms = started.elapsed().as_secs_f64() * 1e3;
        let t = problem.reference.trajectory.time(t_index);
        let u = solution.first_input.clone();
        let step = integrate_step(plant, mode, t, &x, &u, dt)?;
        steps.push(ClosedLoopStep {
            t,
            mode,
            x: x.clone(),
            u,
            converged: solution.report.converged,
            iterations: solution.report.iterations,
            expected_reduction: solution.report.expected_reduction,
            solve_ms,
        });
        histories.push(solution.report.cost_history.clone());
        x = step.x_next;
        mode = step.mode_next;
        previous = Some(solution);
    }
    Ok(ClosedLoopLog {
        steps,
        final_state: x,
        final_mode: mode,
        cost_histories: histories,
    })
}

/// Input-penalty interpolation by contact force share.
#[derive(Debug, Clone, PartialEq)]
pub struct ForceWeightConfig {
    pub r_min: Matrix,
    pub r_max: Matrix,
    /// Input indices driven by each leg.
    pub leg_inputs: Vec<Vec<usize>>,
}

impl ForceWeightConfig {
    pub fn new(
        r_min: Matrix,
        r_max: Matrix,
        leg_inputs: Vec<Vec<usize>>,
    ) -> Result<Self, MpcError> {
        let m = r_min.nrows();
        let square = |w: &Matrix| w.nrows() == m && w.ncols() == m;
        if !square(&r_min) || !square(&r_max) {
            return Err(MpcError::Config(
                "R_min and R_max must both be m x m".into(),
            ));
        }
        for (name, w) in [("R_min", &r_min), ("R_max", &r_max)] {
            if (w - w.transpose()).amax() > 1e-12 * w.amax().max(1.0)
                || w.clone().cholesky().is_none()
            {
                return Err(MpcError::Config(format!(
                    "{name} must be symmetric positive definite"
                )));
            }
        }
        for (leg, idx) in leg_inputs.iter().enumerate() {
            if let Some(bad) = idx.iter().find(|&&i| i >= m) {
                return Err(MpcError::Config(format!(
                    "leg {leg} refers to input {bad} but there are {m} inputs"
                )));
            }
            let diff = &r_max - &r_min;
            let block = Matrix::from_fn(idx.len(), idx.len(), |a, b| diff[(idx[a], idx[b])]);
            if idx.is_empty() {
                continue;
            }
            let min_eig = block.symmetric_eigenvalues().min();
            if min_eig < -1e-12 * diff.amax().max(1.0) {
                return Err(MpcError::Config(format!(
                    "R_max - R_min is not positive semidefinite on the inputs of leg {leg}"
                )));
            }
        }
        Ok(Self {
            r_min,
            r_max,
            leg_inputs,
        })
    }

    pub fn legs(&self) -> usize {
        self.leg_inputs.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForceWeights {
    /// `w_j = lambda_j / sum(lambda)`, all zero when no leg carries force.
    pub weights: Vec<f64>,
    /// `R_j = R_max - w_j (R_max - R_min)` per leg.
    pub penalties: Vec<Matrix>,
}

/// Per-leg input penalties interpolated by each leg's share of the total
/// contact force.
pub fn force_weighted_penalty(
    lambda: &[f64],
    cfg: &ForceWeightConfig,
) -> Result<ForceWeights, MpcError> {
    if lambda.len() != cfg.legs() {
        return Err(MpcError::ForceCount {
            expected: cfg.legs(),
            found: lambda.len(),
        });
    }
    if let Some((leg, &value)) = lambda
        .iter()
        .enumerate()
        .find(|(_, v)| !(v.is_finite() && **v >= 0.0))
    {
        return Err(MpcError::NegativeForce { leg, value });
    }
    let total: f64 = lambda.iter().sum();
    let weights: Vec<f64> = if total > 0.0 {
        lambda.iter().map(|l| l / total).collect()
    } else {
        vec![0.0; lambda.len()]
    };
    let span = &cfg.r_max - &cfg.r_min;
    // `R_max - (R_max - R_min)` need not round back to `R_min`.
    let penalties = weights
        .iter()
        .map(|&w| {
            if w == 1.0 {
                cfg.r_min.clone()
            } else {
                &cfg.r_max - &span * w
            }
        })
        .collect();
    Ok(ForceWeights { weights, penalties })
}

/// Full input weight with each leg's inputs penalized by that leg's `R_j`;
/// inputs not assigned to any leg keep `R_max`.
pub fn assemble_input_weight(weights: &ForceWeights, cfg: &ForceWeightConfig) -> Matrix {
    let mut r = cfg.r_max.clone();
    for (idx, penalty) in cfg.leg_inputs.iter().zip(&weights.penalties) {
        for &a in idx {
            for &b in idx {
                r[(a, b)] = penalty[(a, b)];
            }
        }
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    fn four_legs() -> ForceWeightConfig {
        ForceWeightConfig::new(
            Matrix::identity(4, 4) * 0.1,
            Matrix::identity(4, 4) * 10.0,
            (0..4).map(|i| vec![i]).collect(),
        )
        .unwrap()
    }

    #[test]
    fn single_leg_in_contact() {
        let cfg = four_legs();
        let w = force_weighted_penalty(&[1.0, 0.0, 0.0, 0.0], &cfg).unwrap();
        assert_eq!(w.penalties[0], cfg.r_min);
        for r in &w.penalties[1..] {
            assert_eq!(*r, cfg.r_max);
        }
    }

    #[test]
    fn uniform_and_direct_shares() {
        let cfg = four_legs();
        let span = &cfg.r_max - &cfg.r_min;
        let w = force_weighted_penalty(&[1.0; 4], &cfg).unwrap();
        for r in &w.penalties {
            assert_eq!(*r, &cfg.r_max - &span * 0.25);
        }
        let w = force_weighted_penalty(&[3.0, 1.0, 0.0, 0.0], &cfg).unwrap();
        assert_eq!(w.weights, vec![0.75, 0.25, 0.0, 0.0]);
        assert_eq!(w.penalties[0], &cfg.r_max - &span * 0.75);
    }

    #[test]
    fn no_contact_and_bad_forces() {
        let cfg = four_legs();
        let w = force_weighted_penalty(&[0.0; 4], &cfg).unwrap();
        assert!(w.penalties.iter().all(|r| *r == cfg.r_max));
        assert_eq!(
            force_weighted_penalty(&[1.0, -1.0, 0.0, 0.0], &cfg),
            Err(MpcError::NegativeForce {
                leg: 1,
                value: -1.0
            })
        );
        assert!(matches!(
            force_weighted_penalty(&[1.0], &cfg),
            Err(MpcError::ForceCount { .. })
        ));
    }

    #[test]
    fn config_checks_ordering() {
        assert!(ForceWeightConfig::new(
            Matrix::identity(2, 2) * 5.0,
            Matrix::identity(2, 2),
            vec![vec![0], vec![1]],
        )
        .is_err());
        assert!(ForceWeightConfig::new(
            Matrix::identity(2, 2),
            Matrix::identity(2, 2) * 2.0,
            vec![vec![0], vec![2]],
        )
        .is_err());
    }

    #[test]
    fn assembled_weight_uses_leg_blocks() {
        let cfg = four_legs();
        let w = force_weighted_penalty(&[1.0, 0.0, 0.0, 0.0], &cfg).unwrap();
        let r = assemble_input_weight(&w, &cfg);
        assert_eq!(r[(0, 0)], 0.1);
        assert_eq!(r[(1, 1)], 10.0);
    }

    #[test]
    fn window_clipping() {
        assert_eq!(window_length(1000, 0, 50), 50);
        assert_eq!(window_length(1000, 980, 50), 20);
        assert_eq!(window_length(1000, 1000, 50), 1);
    }

    #[test]
    fn config_validation() {
        assert!(MpcConfig::default().validate().is_ok());
        let bad = MpcConfig {
            horizon: 1,
            ..MpcConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
