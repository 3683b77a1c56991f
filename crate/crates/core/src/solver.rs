//! Hybrid iLQR: saltation-aware backward pass, expected reduction, and a
//! batched line-search forward pass.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::{CostError, CostModel, StageDerivatives};
use crate::hybrid::{HybridError, HybridSystem, Matrix, ModeId, Vector};
use crate::integrate::Dopri5;
use crate::simulator::{
    build_extensions, closed_loop_rollout_window, default_extension_horizon, rollout_from,
    HybridTrajectory, MismatchPolicy, Reference, SimError,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolveError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Hybrid(#[from] HybridError),
    #[error("Q_uu is not positive definite at knot {knot} with regularization {regularization:e}")]
    NotPositiveDefinite { knot: usize, regularization: f64 },
    #[error("every line-search rollout failed; first failure: {0}")]
    AllRolloutsFailed(SimError),
    #[error("trajectory has {found} intervals but the cost covers {expected}")]
    HorizonMismatch { expected: usize, found: usize },
    #[error("linearization has {found} entries but the trajectory has {expected} intervals")]
    LinearizationLength { expected: usize, found: usize },
    #[error("invalid line-search schedule: {0}")]
    InvalidSchedule(String),
    #[error("non-finite value in the {0}")]
    NonFinite(&'static str),
}

/// Feedforward terms, feedback gains and the two expected-reduction sums of
/// one backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct GainSchedule {
    pub feedforward: Vec<Vector>,
    pub feedback: Vec<Matrix>,
    /// `sum_k u_ff,k' Q_u,k`
    pub dj_linear: f64,
    /// `sum_k u_ff,k' Q_uu,k u_ff,k`
    pub dj_quadratic: f64,
}

impl GainSchedule {
    /// All-zero schedule for `len` knots.
    pub fn zeros(len: usize, n: usize, m: usize) -> Self {
        Self {
            feedforward: vec![Vector::zeros(m); len],
            feedback: vec![Matrix::zeros(m, n); len],
            dj_linear: 0.0,
            dj_quadratic: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.feedforward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.feedforward.is_empty()
    }

    pub fn expected_reduction(&self, alpha: f64) -> f64 {
        expected_reduction(self, alpha)
    }
}

/// Predicted cost change for learning rate `alpha`:
/// `alpha * dj_linear + alpha^2 / 2 * dj_quadratic`.
pub fn expected_reduction(gains: &GainSchedule, alpha: f64) -> f64 {
    alpha * gains.dj_linear + 0.5 * alpha * alpha * gains.dj_quadratic
}

/// Quadratic model of the value function at one knot.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueExpansion {
    pub v_x: Vector,
    pub v_xx: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpansionCoefficients {
    pub q_x: Vector,
    pub q_u: Vector,
    pub q_xx: Matrix,
    pub q_ux: Matrix,
    pub q_uu: Matrix,
}

/// How an interval containing a transition is linearized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventLinearization {
    /// Flow Jacobians over the sub-steps before and after the event with the
    /// saltation matrix between them.
    #[default]
    Exact,
    /// Flow Jacobian over the whole interval in the pre-event mode followed
    /// by the saltation matrix, as if the event happened at the interval end.
    EndOfStep,
}

/// Pieces of the one-step sensitivity at knot `k`.
///
/// Without an event only `pre_x`/`pre_u` are set. With an event the step
/// map is `post(saltation(pre(x, u)), u)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLinearization {
    pub pre_x: Matrix,
    pub pre_u: Matrix,
    pub saltation: Option<Matrix>,
    pub post_x: Option<Matrix>,
    pub post_u: Option<Matrix>,
}

impl StepLinearization {
    /// `(A, B)` of the composed step. With `use_saltation = false` the
    /// saltation matrix is replaced by the identity.
    pub fn composite(&self, use_saltation: bool) -> (Matrix, Matrix) {
        let (mut a, mut b) = (self.pre_x.clone(), self.pre_u.clone());
        if let (Some(s), true) = (&self.saltation, use_saltation) {
            a = s * a;
            b = s * b;
        }
        if let Some(post_x) = &self.post_x {
            a = post_x * a;
            b = post_x * b;
        }
        if let Some(post_u) = &self.post_u {
            b += post_u;
        }
        (a, b)
    }
}

/// Linearizes the step map of interval `k` of `traj`.
pub fn linearize_step(
    sys: &HybridSystem,
    traj: &HybridTrajectory,
    k: usize,
    convention: EventLinearization,
) -> Result<StepLinearization, SolveError> {
    let solver = Dopri5::default();
    let t = traj.time(k);
    let (x, u, mode) = (&traj.states[k], &traj.inputs[k], traj.modes[k]);
    match traj.event_at(k) {
        None => {
            let flow = sys.variational_flow(mode, t, x, u, traj.dt, &solver)?;
            Ok(StepLinearization {
                pre_x: flow.f_x,
                pre_u: flow.f_u,
                saltation: None,
                post_x: None,
                post_u: None,
            })
        }
        Some(event) => {
            let source = event.transition.source;
            match convention {
                EventLinearization::Exact => {
                    let pre = sys.variational_flow(source, t, x, u, event.dt1, &solver)?;
                    let post = sys.variational_flow(
                        event.transition.target,
                        event.event_time,
                        &event.x_post,
                        u,
                        event.dt2,
                        &solver,
                    )?;
                    Ok(StepLinearization {
                        pre_x: pre.f_x,
                        pre_u: pre.f_u,
                        saltation: Some(event.saltation.clone()),
                        post_x: Some(post.f_x),
                        post_u: Some(post.f_u),
                    })
                }
                EventLinearization::EndOfStep => {
                    let pre = sys.variational_flow(source, t, x, u, traj.dt, &solver)?;
                    Ok(StepLinearization {
                        pre_x: pre.f_x,
                        pre_u: pre.f_u,
                        saltation: Some(event.saltation.clone()),
                        post_x: None,
                        post_u: None,
                    })
                }
            }
        }
    }
}

/// Linearizes every interval, in parallel when asked.
pub fn linearize_trajectory(
    sys: &HybridSystem,
    traj: &HybridTrajectory,
    convention: EventLinearization,
    parallel: bool,
) -> Result<Vec<StepLinearization>, SolveError> {
    if parallel {
        (0..traj.len())
            .into_par_iter()
            .map(|k| linearize_step(sys, traj, k, convention))
            .collect()
    } else {
        (0..traj.len())
            .map(|k| linearize_step(sys, traj, k, convention))
            .collect()
    }
}

/// Gradient and Hessian of a transition cost with respect to the pre-event
/// state.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionTerms {
    pub j_x: Vector,
    pub j_xx: Matrix,
}

/// Quadratic expansion of the stage-plus-value function at one knot.
pub fn stage_expansion(
    stage: &StageDerivatives,
    lin: &StepLinearization,
    next: &ValueExpansion,
    transition: Option<&TransitionTerms>,
    use_saltation: bool,
) -> ExpansionCoefficients {
    let (a, b) = lin.composite(use_saltation);
    let at = a.transpose();
    let bt = b.transpose();
    let vxx_a = &next.v_xx * &a;
    let vxx_b = &next.v_xx * &b;
    let mut c = ExpansionCoefficients {
        q_x: &stage.j_x + &at * &next.v_x,
        q_u: &stage.j_u + &bt * &next.v_x,
        q_xx: &stage.j_xx + &at * &vxx_a,
        q_ux: &stage.j_ux + &bt * &vxx_a,
        q_uu: &stage.j_uu + &bt * &vxx_b,
    };
    if let Some(terms) = transition {
        let (px, pu) = (&lin.pre_x, &lin.pre_u);
        let pxt = px.transpose();
        let put = pu.transpose();
        let hx = &terms.j_xx * px;
        c.q_x += &pxt * &terms.j_x;
        c.q_u += &put * &terms.j_x;
        c.q_xx += &pxt * &hx;
        c.q_ux += &put * &hx;
        c.q_uu += &put * (&terms.j_xx * pu);
    }
    symmetrize(&mut c.q_xx);
    symmetrize(&mut c.q_uu);
    c
}

fn symmetrize(m: &mut Matrix) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

/// Backward recursion from the terminal cost. `lins[k]` must linearize
/// interval `k` of `traj`.
pub fn backward_pass(
    cost: &CostModel,
    traj: &HybridTrajectory,
    lins: &[StepLinearization],
    regularization: f64,
    use_saltation: bool,
) -> Result<GainSchedule, SolveError> {
    let n_steps = traj.len();
    if n_steps != cost.horizon() {
        return Err(SolveError::HorizonMismatch {
            expected: cost.horizon(),
            found: n_steps,
        });
    }
    if lins.len() != n_steps {
        return Err(SolveError::LinearizationLength {
            expected: n_steps,
            found: lins.len(),
        });
    }
    let terminal = cost.terminal(traj.final_state(), traj.final_mode())?;
    let mut value = ValueExpansion {
        v_x: terminal.j_x,
        v_xx: terminal.j_xx,
    };
    let mut feedforward = vec![Vector::zeros(0); n_steps];
    let mut feedback = vec![Matrix::zeros(0, 0); n_steps];
    let (mut dj_linear, mut dj_quadratic) = (0.0, 0.0);

    for k in (0..n_steps).rev() {
        let stage = cost.stage(k, &traj.states[k], &traj.inputs[k], traj.modes[k])?;
        let transition = match (cost.transition_cost(), traj.event_at(k)) {
            (Some(tc), Some(event)) => Some(TransitionTerms {
                j_x: tc.gradient(event.transition, event.event_time, &event.x_pre),
                j_xx: tc.hessian(event.transition, event.event_time, &event.x_pre),
            }),
            _ => None,
        };
        let c = stage_expansion(&stage, &lins[k], &value, transition.as_ref(), use_saltation);
        let m = c.q_uu.nrows();
        let q_uu_reg = &c.q_uu + Matrix::identity(m, m) * regularization;
        let chol = q_uu_reg.cholesky().ok_or(SolveError::NotPositiveDefinite {
            knot: k,
            regularization,
        })?;
        let k_ff = -chol.solve(&c.q_u);
        let k_fb = -chol.solve(&c.q_ux);

        dj_linear += k_ff.dot(&c.q_u);
        dj_quadratic += k_ff.dot(&(&c.q_uu * &k_ff));

        let q_xu = c.q_ux.transpose();
        let kt = k_fb.transpose();
        let v_x = &c.q_x + &q_xu * &k_ff;
        let mut v_xx = &c.q_xx + &kt * &c.q_uu * &k_fb + &kt * &c.q_ux + &q_xu * &k_fb;
        symmetrize(&mut v_xx);
        if !v_x.iter().chain(v_xx.iter()).all(|v| v.is_finite()) {
            return Err(SolveError::NonFinite("value expansion"));
        }
        value = ValueExpansion { v_x, v_xx };
        feedforward[k] = k_ff;
        feedback[k] = k_fb;
    }

    Ok(GainSchedule {
        feedforward,
        feedback,
        dj_linear,
        dj_quadratic,
    })
}

/// One evaluated line-search candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSummary {
    pub alpha: f64,
    /// `None` when the rollout failed.
    pub cost: Option<f64>,
    pub accepted: bool,
}

#[derive(Debug, Clone)]
pub struct AcceptedStep {
    pub alpha: f64,
    pub trajectory: HybridTrajectory,
    pub cost: f64,
}

#[derive(Debug, Clone)]
pub struct LineSearch {
    pub best: Option<AcceptedStep>,
    pub candidates: Vec<CandidateSummary>,
}

/// Line-search settings shared by [`forward_pass`] and [`solve`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineSearchOptions {
    pub alphas: Vec<f64>,
    /// Minimum ratio of actual to expected reduction.
    pub armijo: f64,
    pub parallel: bool,
    pub policy: MismatchPolicy,
}

impl Default for LineSearchOptions {
    fn default() -> Self {
        Self {
            alphas: alpha_schedule(0.6, 9),
            armijo: 1e-4,
            parallel: true,
            policy: MismatchPolicy::default(),
        }
    }
}

/// `base^j` for `j = 0..count`.
pub fn alpha_schedule(base: f64, count: usize) -> Vec<f64> {
    (0..count).map(|j| base.powi(j as i32)).collect()
}

/// Evaluates closed-loop rollouts for every learning rate and returns the
/// cheapest one passing the sufficient-decrease test. Ties in cost go to the
/// larger learning rate, so the result does not depend on evaluation order.
pub fn forward_pass(
    sys: &HybridSystem,
    cost: &CostModel,
    nominal: &Reference,
    gains: &GainSchedule,
    current_cost: f64,
    options: &LineSearchOptions,
) -> Result<LineSearch, SolveError> {
    let alphas = &options.alphas;
    if alphas.is_empty() {
        return Err(SolveError::InvalidSchedule("no learning rates".into()));
    }
    if let Some(a) = alphas.iter().find(|a| !(**a > 0.0 && **a <= 1.0)) {
        return Err(SolveError::InvalidSchedule(format!(
            "learning rate {a} outside (0, 1]"
        )));
    }
    if gains.len() != nominal.len() {
        return Err(SimError::GainLengthMismatch {
            gains: gains.len(),
            expected: nominal.len(),
        }
        .into());
    }
    let x0 = &nominal.trajectory.states[0];
    let mode0 = nominal.trajectory.modes[0];
    // Outer error: a problem with the cost itself. Inner error: the rollout
    // for this learning rate failed and the candidate is discarded.
    type Evaluated = Result<Result<(HybridTrajectory, f64), SimError>, SolveError>;
    let evaluate = |alpha: f64| -> Evaluated {
        let traj = match closed_loop_rollout_window(
            sys,
            nominal,
            gains,
            0,
            nominal.len(),
            alpha,
            x0,
            mode0,
            options.policy,
        ) {
            Ok(t) => t,
            Err(e) => return Ok(Err(e)),
        };
        match cost.total(&traj) {
            Ok(c) => Ok(Ok((traj, c))),
            Err(CostError::Sim(e)) => Ok(Err(e)),
            Err(e) => Err(e.into()),
        }
    };
    let outcomes: Vec<Evaluated> = if options.parallel {
        alphas.par_iter().map(|&a| evaluate(a)).collect()
    } else {
        alphas.iter().map(|&a| evaluate(a)).collect()
    };

    let mut candidates = Vec::with_capacity(alphas.len());
    let mut best: Option<AcceptedStep> = None;
    let mut first_error = None;
    for (&alpha, outcome) in alphas.iter().zip(outcomes) {
        match outcome? {
            Err(e) => {
                first_error.get_or_insert(e);
                candidates.push(CandidateSummary {
                    alpha,
                    cost: None,
                    accepted: false,
                });
            }
            Ok((trajectory, c)) => {
                let expected = expected_reduction(gains, alpha);
                let actual = c - current_cost;
                let accepted = c.is_finite() && actual < 0.0 && actual <= options.armijo * expected;
                candidates.push(CandidateSummary {
                    alpha,
                    cost: Some(c),
                    accepted,
                });
                if accepted {
                    let better = match &best {
                        None => true,
                        Some(b) => match c.total_cmp(&b.cost) {
                            Ordering::Less => true,
                            Ordering::Equal => alpha > b.alpha,
                            Ordering::Greater => false,
                        },
                    };
                    if better {
                        best = Some(AcceptedStep {
                            alpha,
                            trajectory,
                            cost: c,
                        });
                    }
                }
            }
        }
    }
    if candidates.iter().all(|c| c.cost.is_none()) {
        return Err(SolveError::AllRolloutsFailed(
            first_error.expect("at least one candidate"),
        ));
    }
    Ok(LineSearch { best, candidates })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub max_iterations: usize,
    /// Converged once `|expected_reduction(1)|` drops below this.
    pub threshold: f64,
    pub line_search: LineSearchOptions,
    pub regularization_init: f64,
    pub regularization_min: f64,
    pub regularization_max: f64,
    pub regularization_increase: f64,
    pub regularization_decrease: f64,
    /// Knots covered on each side of an event; `None` uses 10% of the horizon.
    pub extension_horizon: Option<usize>,
    pub use_saltation: bool,
    pub event_linearization: EventLinearization,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            threshold: 1e-4,
            line_search: LineSearchOptions::default(),
            regularization_init: 1e-9,
            regularization_min: 1e-9,
            regularization_max: 1e6,
            regularization_increase: 10.0,
            regularization_decrease: 5.0,
            extension_horizon: None,
            use_saltation: true,
            event_linearization: EventLinearization::Exact,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    IterationLimit,
    RegularizationLimit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub converged: bool,
    pub termination: Termination,
    pub iterations: usize,
    pub final_cost: f64,
    /// Initial cost followed by the cost after every accepted step.
    pub cost_history: Vec<f64>,
    /// `expected_reduction(1)` of every backward pass.
    pub expected_reduction_history: Vec<f64>,
    pub regularization_history: Vec<f64>,
    pub accepted_alphas: Vec<f64>,
    /// `expected_reduction(1)` of the returned gains.
    pub expected_reduction: f64,
}

#[derive(Debug, Clone)]
pub struct Solution {
    /// Final trajectory with its extensions.
    pub reference: Reference,
    /// Gains from a backward pass on the final trajectory.
    pub gains: GainSchedule,
    pub report: SolveReport,
}

impl Solution {
    pub fn trajectory(&self) -> &HybridTrajectory {
        &self.reference.trajectory
    }
}

/// Starting point of [`solve`].
#[derive(Debug, Clone)]
pub enum Initialization {
    /// Open-loop rollout of the given inputs from the cost's start time.
    Inputs {
        x0: Vector,
        mode0: ModeId,
        inputs: Vec<Vector>,
    },
    Trajectory(HybridTrajectory),
}

/// Alternates backward and forward passes until the expected reduction falls
/// below the threshold, the iteration cap is reached or the regularization
/// saturates. Non-convergence is reported, not returned as an error.
pub fn solve(
    sys: &HybridSystem,
    cost: &CostModel,
    init: Initialization,
    options: &SolverOptions,
) -> Result<Solution, SolveError> {
    let traj = match init {
        Initialization::Inputs { x0, mode0, inputs } => {
            rollout_from(sys, cost.start_time(), &x0, mode0, &inputs, cost.dt())?
        }
        Initialization::Trajectory(t) => t,
    };
    if traj.len() != cost.horizon() {
        return Err(SolveError::HorizonMismatch {
            expected: cost.horizon(),
            found: traj.len(),
        });
    }
    let horizon = options
        .extension_horizon
        .unwrap_or_else(|| default_extension_horizon(traj.len()));
    let extensions = build_extensions(sys, &traj, horizon)?;
    let mut nominal = Reference::new(traj, extensions);
    let mut current = cost.total(&nominal.trajectory)?;
    let mut lambda = options
        .regularization_init
        .clamp(options.regularization_min, options.regularization_max);

    let mut report = SolveReport {
        converged: false,
        termination: Termination::IterationLimit,
        iterations: 0,
        final_cost: current,
        cost_history: vec![current],
        expected_reduction_history: Vec::new(),
        regularization_history: Vec::new(),
        accepted_alphas: Vec::new(),
        expected_reduction: f64::NAN,
    };
    let mut lins: Option<Vec<StepLinearization>> = None;
    // Gains computed on the current nominal, if any.
    let mut gains: Option<GainSchedule> = None;

    for iteration in 1..=options.max_iterations {
        report.iterations = iteration;
        if lins.is_none() {
            lins = Some(linearize_trajectory(
                sys,
                &nominal.trajectory,
                options.event_linearization,
                options.line_search.parallel,
            )?);
        }
        let lin = lins.as_deref().expect("just computed");
        let schedule = loop {
            match backward_pass(
                cost,
                &nominal.trajectory,
                lin,
                lambda,
                options.use_saltation,
            ) {
                Ok(g) => break Some(g),
                Err(SolveError::NotPositiveDefinite { .. }) => {
                    lambda *= options.regularization_increase;
                    if lambda > options.regularization_max {
                        break None;
                    }
                }
                Err(e) => return Err(e),
            }
        };
        let Some(schedule) = schedule else {
            report.termination = Termination::RegularizationLimit;
            lambda = options.regularization_max;
            break;
        };
        let dj = schedule.expected_reduction(1.0);
        report.expected_reduction_history.push(dj);
        report.regularization_history.push(lambda);
        if dj.abs() < options.threshold {
            gains = Some(schedule);
            report.converged = true;
            report.termination = Termination::Converged;
            break;
        }

        let search = forward_pass(
            sys,
            cost,
            &nominal,
            &schedule,
            current,
            &options.line_search,
        );
        let accepted = match search {
            Ok(LineSearch { best, .. }) => best,
            Err(SolveError::AllRolloutsFailed(_)) => None,
            Err(e) => return Err(e),
        };
        match accepted {
            Some(step) => {
                let extensions = build_extensions(sys, &step.trajectory, horizon)?;
                nominal = Reference::new(step.trajectory, extensions);
                current = step.cost;
                lins = None;
                gains = None;
                report.accepted_alphas.push(step.alpha);
                report.cost_history.push(current);
                lambda = (lambda / options.regularization_decrease).max(options.regularization_min);
            }
            None => {
                gains = Some(schedule);
                lambda *= options.regularization_increase;
                if lambda > options.regularization_max {
                    report.termination = Termination::RegularizationLimit;
                    lambda = options.regularization_max;
                    break;
                }
            }
        }
    }

    let gains = match gains {
        Some(g) => g,
        None => {
            // The last accepted step has not been through a backward pass.
            let lin = match lins {
                Some(l) => l,
                None => linearize_trajectory(
                    sys,
                    &nominal.trajectory,
                    options.event_linearization,
                    options.line_search.parallel,
                )?,
            };
            backward_pass(
                cost,
                &nominal.trajectory,
                &lin,
                lambda,
                options.use_saltation,
            )?
        }
    };
    report.expected_reduction = gains.expected_reduction(1.0);
    report.final_cost = current;
    Ok(Solution {
        reference: nominal,
        gains,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expected_reduction_definition() {
        let g = GainSchedule {
            feedforward: vec![Vector::from_vec(vec![1.0])],
            feedback: vec![Matrix::zeros(1, 2)],
            dj_linear: -3.0,
            dj_quadratic: 2.0,
        };
        assert_eq!(expected_reduction(&g, 1.0), -3.0 + 1.0);
        assert_eq!(expected_reduction(&g, 0.5), -1.5 + 0.25);
        let z = GainSchedule::zeros(4, 2, 1);
        assert_eq!(z.expected_reduction(0.3), 0.0);
    }

    #[test]
    fn composite_without_event_is_the_flow() {
        let lin = StepLinearization {
            pre_x: Matrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]),
            pre_u: Matrix::from_row_slice(2, 1, &[0.005, 0.1]),
            saltation: None,
            post_x: None,
            post_u: None,
        };
        let (a, b) = lin.composite(true);
        assert_eq!(a, lin.pre_x);
        assert_eq!(b, lin.pre_u);
    }

    #[test]
    fn identity_saltation_matches_smooth_expansion() {
        let pre_x = Matrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        let pre_u = Matrix::from_row_slice(2, 1, &[0.005, 0.1]);
        let smooth = StepLinearization {
            pre_x: pre_x.clone(),
            pre_u: pre_u.clone(),
            saltation: None,
            post_x: None,
            post_u: None,
        };
        let with_identity = StepLinearization {
            saltation: Some(Matrix::identity(2, 2)),
            ..smooth.clone()
        };
        let stage = StageDerivatives {
            value: 0.0,
            j_x: Vector::from_vec(vec![0.3, -0.2]),
            j_u: Vector::from_vec(vec![0.1]),
            j_xx: Matrix::identity(2, 2) * 2.0,
            j_ux: Matrix::zeros(1, 2),
            j_uu: Matrix::identity(1, 1) * 0.02,
        };
        let next = ValueExpansion {
            v_x: Vector::from_vec(vec![1.0, 2.0]),
            v_xx: Matrix::from_row_slice(2, 2, &[3.0, 0.5, 0.5, 1.0]),
        };
        let a = stage_expansion(&stage, &smooth, &next, None, true);
        let b = stage_expansion(&stage, &with_identity, &next, None, true);
        assert_eq!(a, b);
        // Q_x = J_x + A' V_x
        let expected = &stage.j_x + pre_x.transpose() * &next.v_x;
        assert_eq!(a.q_x, expected);
    }

    #[test]
    fn schedule_is_geometric() {
        let s = alpha_schedule(0.6, 9);
        assert_eq!(s.len(), 9);
        assert_eq!(s[0], 1.0);
        assert!((s[8] - 0.6f64.powi(8)).abs() < 1e-15);
    }
}
