//! Event-driven simulation of hybrid systems.
//!
//! Each control interval is flowed with the input held constant. Guards are
//! monitored on the dense output of the integrator; the earliest crossing is
//! located by a bracketing root finder, the reset is applied and the rest of
//! the interval is flowed in the new mode. At most one transition is allowed
//! per interval.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hybrid::{HybridError, HybridSystem, Matrix, ModeId, TransitionId, Vector};
use crate::integrate::{DenseStep, Dopri5, IntegrationError, Outcome};
use crate::solver::GainSchedule;

/// Guard residual accepted at a located event.
pub const EVENT_TOLERANCE: f64 = 1e-10;

const MAX_ROOT_ITERATIONS: usize = 200;
const GUARD_SAMPLES: usize = 4;
const POLISH_ITERATIONS: usize = 6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error(transparent)]
    Hybrid(#[from] HybridError),
    #[error(transparent)]
    Integration(#[from] IntegrationError),
    #[error(
        "second transition {second} at t={time} in the step that already took {first} (possible Zeno behavior)"
    )]
    DoubleEvent {
        first: TransitionId,
        second: TransitionId,
        time: f64,
    },
    #[error("guard of {transition} is {value:e} at the window start; it must be positive")]
    GuardNotPositive {
        transition: TransitionId,
        value: f64,
    },
    #[error("guard of {0} does not change sign in the window")]
    NoSignChange(TransitionId),
    #[error(
        "event localization did not converge (|g| = {residual:e} after {iterations} iterations)"
    )]
    RootFinding { residual: f64, iterations: usize },
    #[error("time step must be positive, got {0}")]
    NonPositiveStep(f64),
    #[error("rollout in mode {mode} at knot {knot} is not covered by any reference extension")]
    ExtensionHorizonExceeded { knot: usize, mode: ModeId },
    #[error("gain schedule has {gains} entries but {expected} are required")]
    GainLengthMismatch { gains: usize, expected: usize },
    #[error("learning rate {0} is outside [0, 1]")]
    InvalidAlpha(f64),
    #[error("trajectory has no recorded transitions")]
    NoEvents,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventRecord {
    pub transition: TransitionId,
    pub event_time: f64,
    pub x_pre: Vector,
    pub x_post: Vector,
    /// Part of the control interval flowed before the transition.
    pub dt1: f64,
    /// Part of the control interval flowed after the transition.
    pub dt2: f64,
    pub saltation: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub x_next: Vector,
    pub mode_next: ModeId,
    pub event: Option<EventRecord>,
}

/// Uniformly sampled hybrid trajectory. `states` and `modes` hold `N + 1`
/// knots, `inputs` holds the `N` zero-order-hold inputs between them.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridTrajectory {
    pub t0: f64,
    pub dt: f64,
    pub states: Vec<Vector>,
    pub modes: Vec<ModeId>,
    pub inputs: Vec<Vector>,
    /// `(k, event)` for a transition inside the interval `[t_k, t_{k+1}]`.
    pub events: Vec<(usize, EventRecord)>,
}

impl HybridTrajectory {
    pub fn single(t0: f64, dt: f64, x0: Vector, mode0: ModeId) -> Self {
        Self {
            t0,
            dt,
            states: vec![x0],
            modes: vec![mode0],
            inputs: Vec::new(),
            events: Vec::new(),
        }
    }

    /// Number of control intervals.
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.dt
    }

    pub fn final_state(&self) -> &Vector {
        self.states
            .last()
            .expect("trajectory has at least one knot")
    }

    pub fn final_mode(&self) -> ModeId {
        *self.modes.last().expect("trajectory has at least one knot")
    }

    pub fn event_at(&self, k: usize) -> Option<&EventRecord> {
        self.events
            .binary_search_by_key(&k, |(knot, _)| *knot)
            .ok()
            .map(|i| &self.events[i].1)
    }

    fn push(&mut self, u: Vector, step: StepResult) {
        let k = self.inputs.len();
        self.inputs.push(u);
        self.states.push(step.x_next);
        self.modes.push(step.mode_next);
        if let Some(event) = step.event {
            self.events.push((k, event));
        }
    }
}

/// Continuation of a trajectory across one of its events: the pre-transition
/// mode flowed forward past the guard, and the post-transition mode flowed
/// backward before it, each with a constant input.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceExtension {
    /// Knot whose interval contains the event.
    pub knot: usize,
    pub transition: TransitionId,
    pub event_time: f64,
    pub x_pre: Vector,
    pub x_post: Vector,
    pub pre_input: Vector,
    pub post_input: Vector,
    /// States at knots `knot + 1, knot + 2, ...` in the source mode.
    pub pre_states: Vec<Vector>,
    /// States at knots `knot, knot - 1, ...` in the target mode.
    pub post_states: Vec<Vector>,
    pub horizon: usize,
}

/// A trajectory bundled with the extensions of its events.
#[derive(Debug, Clone, PartialEq)]
pub struct Reference {
    pub trajectory: HybridTrajectory,
    pub extensions: Vec<ReferenceExtension>,
}

/// What to do when a rollout's mode differs from the reference mode and no
/// extension covers the knot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MismatchPolicy {
    /// Compare against the reference knot as is.
    #[default]
    Fallback,
    /// Fail with [`SimError::ExtensionHorizonExceeded`].
    Strict,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetSource {
    Nominal,
    PreExtension(usize),
    PostExtension(usize),
    Uncovered,
}

/// The state/input a rollout in a given mode should be compared against at
/// a knot, and the knot whose gains and feedforward apply there.
#[derive(Debug, Clone, Copy)]
pub struct TargetKnot<'a> {
    pub x: &'a Vector,
    /// `None` only for references without any inputs.
    pub u: Option<&'a Vector>,
    pub mode: ModeId,
    pub policy_knot: usize,
    pub source: TargetSource,
}

impl Reference {
    pub fn new(trajectory: HybridTrajectory, extensions: Vec<ReferenceExtension>) -> Self {
        Self {
            trajectory,
            extensions,
        }
    }

    pub fn without_extensions(trajectory: HybridTrajectory) -> Self {
        Self::new(trajectory, Vec::new())
    }

    pub fn len(&self) -> usize {
        self.trajectory.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectory.is_empty()
    }

    /// Target for knot `k` without any mode matching. Knots past the end
    /// hold the final state and the last input.
    pub fn nominal(&self, k: usize) -> TargetKnot<'_> {
        let traj = &self.trajectory;
        let kk = k.min(traj.len());
        let ku = k.min(traj.len().saturating_sub(1));
        TargetKnot {
            x: &traj.states[kk],
            u: traj.inputs.get(ku),
            mode: traj.modes[kk],
            policy_knot: ku,
            source: TargetSource::Nominal,
        }
    }

    /// Target for knot `k` as seen from a rollout currently in `mode`. On a
    /// mode mismatch the nearest extension whose branch is in `mode` is used.
    pub fn target(
        &self,
        k: usize,
        mode: ModeId,
        policy: MismatchPolicy,
    ) -> Result<TargetKnot<'_>, SimError> {
        let nominal = self.nominal(k);
        if nominal.mode == mode {
            return Ok(nominal);
        }
        let n = self.trajectory.len();
        let kk = k.min(n);
        let mut best: Option<(usize, TargetKnot<'_>)> = None;
        for (i, ext) in self.extensions.iter().enumerate() {
            let candidate = if ext.transition.source == mode && kk > ext.knot {
                ext.pre_states.get(kk - ext.knot - 1).map(|x| {
                    (
                        kk - ext.knot,
                        TargetKnot {
                            x,
                            u: Some(&ext.pre_input),
                            mode,
                            policy_knot: ext.knot.min(n.saturating_sub(1)),
                            source: TargetSource::PreExtension(i),
                        },
                    )
                })
            } else if ext.transition.target == mode && kk <= ext.knot {
                ext.post_states.get(ext.knot - kk).map(|x| {
                    (
                        ext.knot - kk,
                        TargetKnot {
                            x,
                            u: Some(&ext.post_input),
                            mode,
                            policy_knot: (ext.knot + 1).min(n.saturating_sub(1)),
                            source: TargetSource::PostExtension(i),
                        },
                    )
                })
            } else {
                None
            };
            if let Some((distance, target)) = candidate {
                if best.as_ref().is_none_or(|(d, _)| distance < *d) {
                    best = Some((distance, target));
                }
            }
        }
        match (best, policy) {
            (Some((_, target)), _) => Ok(target),
            (None, MismatchPolicy::Fallback) => Ok(TargetKnot {
                source: TargetSource::Uncovered,
                ..nominal
            }),
            (None, MismatchPolicy::Strict) => {
                Err(SimError::ExtensionHorizonExceeded { knot: k, mode })
            }
        }
    }
}

/// Located guard crossing inside a flow.
#[derive(Debug, Clone)]
struct Crossing {
    index: usize,
    time: f64,
    x_pre: Vector,
}

enum Flow {
    Completed(Vector),
    Event(Crossing),
}

/// Bracketing root finder (Illinois variant of regula falsi, with bisection
/// whenever the secant step stalls). Requires `f(a) > 0 >= f(b)`.
///
/// Once the residual is within `tolerance` a few more iterations are spent
/// driving it towards the rounding floor, so that quantities downstream of
/// the root (post-event states, finite differences across events) are not
/// limited by the tolerance. Returns the root and the iterations used.
pub fn find_crossing(
    mut f: impl FnMut(f64) -> f64,
    a: f64,
    b: f64,
    tolerance: f64,
) -> Result<(f64, usize), SimError> {
    let (mut lo, mut hi) = (a, b);
    let (mut f_lo, mut f_hi) = (f(lo), f(hi));
    if !(f_lo > 0.0 && f_hi <= 0.0) {
        return Err(SimError::RootFinding {
            residual: f_hi.abs().min(f_lo.abs()),
            iterations: 0,
        });
    }
    if f_hi == 0.0 {
        return Ok((hi, 0));
    }
    let mut best = (f_hi.abs() <= tolerance).then_some((hi, f_hi.abs()));
    let mut polish = 0;
    let mut side = 0i8;
    let mut width = (hi - lo).abs();
    for iteration in 1..=MAX_ROOT_ITERATIONS {
        let mut t = (lo * f_hi - hi * f_lo) / (f_hi - f_lo);
        if !(t.is_finite() && (t - lo) * (t - hi) < 0.0) {
            t = 0.5 * (lo + hi);
        }
        let ft = f(t);
        if ft == 0.0 {
            return Ok((t, iteration));
        }
        if ft.abs() <= tolerance && best.is_none_or(|(_, r)| ft.abs() < r) {
            best = Some((t, ft.abs()));
        }
        if ft > 0.0 {
            lo = t;
            f_lo = ft;
            if side == 1 {
                f_hi *= 0.5;
            }
            side = 1;
        } else {
            hi = t;
            f_hi = ft;
            if side == -1 {
                f_lo *= 0.5;
            }
            side = -1;
        }
        if (hi - lo).abs() > 0.5 * width {
            // Slow progress: force a bisection.
            let mid = 0.5 * (lo + hi);
            let fm = f(mid);
            if fm == 0.0 {
                return Ok((mid, iteration));
            }
            if fm.abs() <= tolerance && best.is_none_or(|(_, r)| fm.abs() < r) {
                best = Some((mid, fm.abs()));
            }
            if fm > 0.0 {
                lo = mid;
                f_lo = fm;
            } else {
                hi = mid;
                f_hi = fm;
            }
            side = 0;
        }
        width = (hi - lo).abs();
        let collapsed = width <= 2.0 * f64::EPSILON * lo.abs().max(hi.abs()).max(f64::MIN_POSITIVE);
        if let Some((root, _)) = best {
            polish += 1;
            if collapsed || polish > POLISH_ITERATIONS {
                return Ok((root, iteration));
            }
        } else if collapsed {
            return Err(SimError::RootFinding {
                residual: f_lo.abs().min(f_hi.abs()),
                iterations: iteration,
            });
        }
    }
    match best {
        Some((root, _)) => Ok((root, MAX_ROOT_ITERATIONS)),
        None => Err(SimError::RootFinding {
            residual: f_lo.abs().min(f_hi.abs()),
            iterations: MAX_ROOT_ITERATIONS,
        }),
    }
}

/// Earliest crossing of any watched guard inside one dense step. `previous`
/// carries each guard's last sampled value across steps.
fn scan_step(
    sys: &HybridSystem,
    step: &DenseStep,
    watched: &[usize],
    previous: &mut [f64],
) -> Result<Option<Crossing>, SimError> {
    let transitions = sys.transitions();
    let mut earliest: Option<Crossing> = None;
    for (slot, &index) in watched.iter().enumerate() {
        let guard = transitions[index].guard();
        let mut g_prev = previous[slot];
        let mut t_prev = step.t0;
        for s in 1..=GUARD_SAMPLES {
            let (t, g) = if s == GUARD_SAMPLES {
                (step.t1, guard.eval(step.t1, &step.y1))
            } else {
                let t = step.t0 + (step.t1 - step.t0) * (s as f64 / GUARD_SAMPLES as f64);
                (t, guard.eval(t, &step.eval(t)))
            };
            if g_prev > 0.0 && g <= 0.0 {
                let (time, _) = find_crossing(
                    |tau| guard.eval(tau, &step.eval(tau)),
                    t_prev,
                    t,
                    EVENT_TOLERANCE,
                )?;
                // Strictly earlier wins, so ties keep the lower transition index.
                if earliest.as_ref().is_none_or(|c| time < c.time) {
                    earliest = Some(Crossing {
                        index,
                        time,
                        x_pre: step.eval(time),
                    });
                }
                break;
            }
            g_prev = g;
            t_prev = t;
        }
        previous[slot] = g_prev;
    }
    Ok(earliest)
}

/// Flows `mode` from `t0` to `t1` with `u` held, watching the guards of the
/// given transition indices, and stops at the earliest crossing.
fn flow_watching(
    sys: &HybridSystem,
    mode: ModeId,
    t0: f64,
    x0: &Vector,
    u: &Vector,
    t1: f64,
    watched: &[usize],
) -> Result<Flow, SimError> {
    sys.mode(mode)?;
    sys.check_state(x0)?;
    sys.check_input(u)?;
    let transitions = sys.transitions();
    let mut previous: Vec<f64> = watched
        .iter()
        .map(|&i| transitions[i].guard().eval(t0, x0))
        .collect();
    let rhs = |t: f64, x: &Vector| {
        sys.eval_vector_field(mode, t, x, u)
            .expect("mode and dimensions validated")
    };
    let outcome = Dopri5::default().integrate_with(rhs, t0, x0, t1, |step| {
        match scan_step(sys, step, watched, &mut previous) {
            Ok(None) => None,
            Ok(Some(c)) => Some(Ok(c)),
            Err(e) => Some(Err(e)),
        }
    })?;
    match outcome {
        Outcome::Completed(x) => Ok(Flow::Completed(x)),
        Outcome::Stopped(Ok(c)) => Ok(Flow::Event(c)),
        Outcome::Stopped(Err(e)) => Err(e),
    }
}

/// Flows `mode` ignoring every guard.
pub fn flow_mode(
    sys: &HybridSystem,
    mode: ModeId,
    t0: f64,
    x0: &Vector,
    u: &Vector,
    t1: f64,
) -> Result<Vector, SimError> {
    match flow_watching(sys, mode, t0, x0, u, t1, &[])? {
        Flow::Completed(x) => Ok(x),
        Flow::Event(_) => unreachable!("no guards watched"),
    }
}

fn outgoing_indices(sys: &HybridSystem, mode: ModeId) -> Vec<usize> {
    sys.transitions()
        .iter()
        .enumerate()
        .filter(|(_, t)| t.id.source == mode)
        .map(|(i, _)| i)
        .collect()
}

/// First outgoing transition whose guard set already holds the state and
/// that the flow does not leave: `g < 0`, or `g == 0` with `dg/dt < 0`.
fn immediate_transition(
    sys: &HybridSystem,
    mode: ModeId,
    t: f64,
    x: &Vector,
    u: &Vector,
) -> Result<Option<usize>, SimError> {
    for index in outgoing_indices(sys, mode) {
        let tr = &sys.transitions()[index];
        let g = tr.guard().eval(t, x);
        if g < 0.0 || (g == 0.0 && sys.guard_rate(tr.id, t, x, u)? < 0.0) {
            return Ok(Some(index));
        }
    }
    Ok(None)
}

fn take_transition(
    sys: &HybridSystem,
    index: usize,
    time: f64,
    x_pre: Vector,
    u: &Vector,
    t_start: f64,
    t_end: f64,
) -> Result<EventRecord, SimError> {
    let tr = sys.transitions()[index].id;
    let saltation = sys.saltation_matrix(tr, time, &x_pre, u)?.matrix;
    let x_post = sys.apply_reset(tr, time, &x_pre)?;
    Ok(EventRecord {
        transition: tr,
        event_time: time,
        x_pre,
        x_post,
        dt1: time - t_start,
        dt2: t_end - time,
        saltation,
    })
}

/// Advances one control interval of length `dt` from `(t, x)` in `mode`
/// with `u` held constant.
pub fn integrate_step(
    sys: &HybridSystem,
    mode: ModeId,
    t: f64,
    x: &Vector,
    u: &Vector,
    dt: f64,
) -> Result<StepResult, SimError> {
    if !(dt > 0.0) {
        return Err(SimError::NonPositiveStep(dt));
    }
    sys.mode(mode)?;
    sys.check_state(x)?;
    sys.check_input(u)?;
    let t_end = t + dt;

    let event = if let Some(index) = immediate_transition(sys, mode, t, x, u)? {
        take_transition(sys, index, t, x.clone(), u, t, t_end)?
    } else {
        match flow_watching(sys, mode, t, x, u, t_end, &outgoing_indices(sys, mode))? {
            Flow::Completed(x_next) => {
                return Ok(StepResult {
                    x_next,
                    mode_next: mode,
                    event: None,
                })
            }
            Flow::Event(c) => take_transition(sys, c.index, c.time, c.x_pre, u, t, t_end)?,
        }
    };

    let next_mode = event.transition.target;
    if event.dt2 <= 0.0 {
        return Ok(StepResult {
            x_next: event.x_post.clone(),
            mode_next: next_mode,
            event: Some(event),
        });
    }
    let double = |index: usize, time: f64| SimError::DoubleEvent {
        first: event.transition,
        second: sys.transitions()[index].id,
        time,
    };
    if let Some(index) = immediate_transition(sys, next_mode, event.event_time, &event.x_post, u)? {
        return Err(double(index, event.event_time));
    }
    let watched = outgoing_indices(sys, next_mode);
    match flow_watching(
        sys,
        next_mode,
        event.event_time,
        &event.x_post,
        u,
        t_end,
        &watched,
    )? {
        Flow::Completed(x_next) => Ok(StepResult {
            x_next,
            mode_next: next_mode,
            event: Some(event),
        }),
        Flow::Event(c) => Err(double(c.index, c.time)),
    }
}

/// Locates the earliest zero of the guard of `tr` while flowing `mode` over
/// `[t0, t0 + window]`. Returns the event time and the pre-event state.
pub fn locate_event(
    sys: &HybridSystem,
    tr: TransitionId,
    mode: ModeId,
    t0: f64,
    x0: &Vector,
    u: &Vector,
    window: f64,
) -> Result<(f64, Vector), SimError> {
    if !(window > 0.0) {
        return Err(SimError::NonPositiveStep(window));
    }
    let index = sys.transition_index(tr)?;
    let g0 = sys.eval_guard(tr, t0, x0)?;
    if !(g0 > 0.0) {
        return Err(SimError::GuardNotPositive {
            transition: tr,
            value: g0,
        });
    }
    match flow_watching(sys, mode, t0, x0, u, t0 + window, &[index])? {
        Flow::Event(c) => Ok((c.time, c.x_pre)),
        Flow::Completed(_) => Err(SimError::NoSignChange(tr)),
    }
}

/// Open-loop rollout starting at `t = 0`.
pub fn rollout(
    sys: &HybridSystem,
    x0: &Vector,
    mode0: ModeId,
    inputs: &[Vector],
    dt: f64,
) -> Result<HybridTrajectory, SimError> {
    rollout_from(sys, 0.0, x0, mode0, inputs, dt)
}

pub fn rollout_from(
    sys: &HybridSystem,
    t0: f64,
    x0: &Vector,
    mode0: ModeId,
    inputs: &[Vector],
    dt: f64,
) -> Result<HybridTrajectory, SimError> {
    if !(dt > 0.0) {
        return Err(SimError::NonPositiveStep(dt));
    }
    sys.mode(mode0)?;
    sys.check_state(x0)?;
    let mut traj = HybridTrajectory::single(t0, dt, x0.clone(), mode0);
    for u in inputs {
        let k = traj.len();
        let step = integrate_step(sys, traj.modes[k], traj.time(k), &traj.states[k], u, dt)?;
        traj.push(u.clone(), step);
    }
    Ok(traj)
}

/// Closed-loop rollout of `u_k = u_hat + alpha * u_ff + K (x_k - x_hat)`
/// along the whole nominal trajectory.
pub fn closed_loop_rollout(
    sys: &HybridSystem,
    nominal: &Reference,
    gains: &GainSchedule,
    alpha: f64,
    x0: &Vector,
    mode0: ModeId,
) -> Result<HybridTrajectory, SimError> {
    if gains.len() != nominal.len() {
        return Err(SimError::GainLengthMismatch {
            gains: gains.len(),
            expected: nominal.len(),
        });
    }
    closed_loop_rollout_window(
        sys,
        nominal,
        gains,
        0,
        nominal.len(),
        alpha,
        x0,
        mode0,
        MismatchPolicy::default(),
    )
}

/// Closed-loop rollout of `steps` intervals starting at nominal knot
/// `offset`. Gains are indexed in the nominal's frame; knots past the end of
/// the nominal hold its final target and gains.
///
/// When the rollout's mode differs from the nominal's, the target state comes
/// from the matching extension and the gains, feedforward and input of the
/// knot adjacent to that event are held.
#[allow(clippy::too_many_arguments)]
pub fn closed_loop_rollout_window(
    sys: &HybridSystem,
    nominal: &Reference,
    gains: &GainSchedule,
    offset: usize,
    steps: usize,
    alpha: f64,
    x0: &Vector,
    mode0: ModeId,
    policy: MismatchPolicy,
) -> Result<HybridTrajectory, SimError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(SimError::InvalidAlpha(alpha));
    }
    if steps > 0 && gains.is_empty() {
        return Err(SimError::GainLengthMismatch {
            gains: 0,
            expected: steps,
        });
    }
    let dt = nominal.trajectory.dt;
    let t0 = nominal.trajectory.time(offset);
    let mut traj = HybridTrajectory::single(t0, dt, x0.clone(), mode0);
    for j in 0..steps {
        let mode = traj.modes[j];
        let x = &traj.states[j];
        let target = nominal.target(offset + j, mode, policy)?;
        let g = target.policy_knot.min(gains.len() - 1);
        let u_hat = target.u.ok_or(SimError::GainLengthMismatch {
            gains: gains.len(),
            expected: steps,
        })?;
        let u = u_hat + &gains.feedforward[g] * alpha + &gains.feedback[g] * (x - target.x);
        let step = integrate_step(sys, mode, traj.time(j), x, &u, dt)?;
        traj.push(u, step);
    }
    Ok(traj)
}

/// Builds one extension per recorded event, each covering `horizon` knots
/// on either side.
pub fn build_extensions(
    sys: &HybridSystem,
    trajectory: &HybridTrajectory,
    horizon: usize,
) -> Result<Vec<ReferenceExtension>, SimError> {
    let n = trajectory.len();
    trajectory
        .events
        .iter()
        .map(|(j, event)| {
            let j = *j;
            let tr = event.transition;
            let pre_input = trajectory.inputs[j].clone();
            let post_input = trajectory.inputs[(j + 1).min(n - 1)].clone();

            let mut pre_states = Vec::with_capacity(horizon);
            let (mut t, mut x) = (event.event_time, event.x_pre.clone());
            for i in 1..=horizon {
                let t_next = trajectory.time(j + i);
                x = flow_mode(sys, tr.source, t, &x, &pre_input, t_next)?;
                t = t_next;
                pre_states.push(x.clone());
            }

            let mut post_states = Vec::with_capacity(horizon.min(j + 1));
            let (mut t, mut x) = (event.event_time, event.x_post.clone());
            for i in 0..horizon.min(j + 1) {
                let t_prev = trajectory.time(j - i);
                x = flow_mode(sys, tr.target, t, &x, &post_input, t_prev)?;
                t = t_prev;
                post_states.push(x.clone());
            }

            Ok(ReferenceExtension {
                knot: j,
                transition: tr,
                event_time: event.event_time,
                x_pre: event.x_pre.clone(),
                x_post: event.x_post.clone(),
                pre_input,
                post_input,
                pre_states,
                post_states,
                horizon,
            })
        })
        .collect()
}

/// Default extension horizon: 10% of the trajectory length, at least one knot.
pub fn default_extension_horizon(knots: usize) -> usize {
    (knots / 10).max(1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hybrid::{FnField, FnGuard, IdentityReset};
    use crate::systems::{bouncing_ball, BouncingBallParams, APEX, FALLING, IMPACT, RISING};

    fn ball() -> HybridSystem {
        bouncing_ball(&BouncingBallParams::default()).unwrap()
    }

    fn v(values: &[f64]) -> Vector {
        Vector::from_column_slice(values)
    }

    #[test]
    fn crossing_of_a_cubic_reaches_the_rounding_floor() {
        let root = 0.3f64;
        let (t, _) =
            find_crossing(|t| (root - t) * (1.0 + t * t), 0.0, 1.0, EVENT_TOLERANCE).unwrap();
        assert!((t - root).abs() < 1e-15);
    }

    #[test]
    fn crossing_needs_a_bracket() {
        assert!(matches!(
            find_crossing(|t| t + 1.0, 0.0, 1.0, EVENT_TOLERANCE),
            Err(SimError::RootFinding { .. })
        ));
    }

    #[test]
    fn free_fall_impact_time_is_exact() {
        let sys = ball();
        let (h, g) = (1.0, 9.81);
        let step = integrate_step(&sys, FALLING, 0.0, &v(&[h, 0.0]), &v(&[0.0]), 0.5).unwrap();
        let event = step.event.unwrap();
        assert_eq!(event.transition, IMPACT);
        assert!((event.event_time - (2.0 * h / g).sqrt()).abs() < 1e-12);
        assert!((event.x_post[1] + 0.8 * event.x_pre[1]).abs() < 1e-12);
        assert_eq!(step.mode_next, RISING);
        assert!((event.dt1 + event.dt2 - 0.5).abs() < 1e-15);
    }

    #[test]
    fn resting_apex_fires_immediately() {
        let sys = ball();
        let step = integrate_step(&sys, RISING, 0.0, &v(&[4.0, 0.0]), &v(&[0.0]), 1e-3).unwrap();
        let event = step.event.unwrap();
        assert_eq!(event.transition, APEX);
        assert_eq!(event.event_time, 0.0);
        assert_eq!(step.mode_next, FALLING);
    }

    #[test]
    fn hovering_ball_has_no_events() {
        let sys = ball();
        let traj = rollout(&sys, &v(&[4.0, 0.0]), RISING, &vec![v(&[9.81]); 100], 1e-3).unwrap();
        assert!(traj.events.is_empty());
        assert_eq!(traj.final_state(), &v(&[4.0, 0.0]));
    }

    #[test]
    fn second_event_in_one_interval_is_rejected() {
        let mut b = HybridSystem::builder(1, 0);
        let a = b.mode("a", FnField(|_t: f64, _x: &Vector, _u: &Vector| v(&[-1.0])));
        let c = b.mode("c", FnField(|_t: f64, _x: &Vector, _u: &Vector| v(&[-1.0])));
        b.transition(
            a,
            c,
            FnGuard(|_t: f64, x: &Vector| x[0] - 0.5),
            IdentityReset,
        )
        .unwrap();
        b.transition(
            c,
            a,
            FnGuard(|_t: f64, x: &Vector| x[0] - 0.4),
            IdentityReset,
        )
        .unwrap();
        let sys = b.build();
        let err = integrate_step(&sys, a, 0.0, &v(&[1.0]), &Vector::zeros(0), 1.0).unwrap_err();
        assert!(matches!(err, SimError::DoubleEvent { .. }));
    }

    #[test]
    fn extensions_continue_both_modes_across_the_event() {
        let sys = ball();
        let traj = rollout(&sys, &v(&[1.0, -1.0]), FALLING, &vec![v(&[0.0]); 600], 1e-3).unwrap();
        let ext = build_extensions(&sys, &traj, 20).unwrap();
        assert_eq!(ext.len(), 1);
        let e = ext[0].clone();
        assert_eq!(e.pre_states.len(), 20);
        assert_eq!(e.post_states.len(), 20);
        // The pre extension keeps falling below the ground.
        assert!(e.pre_states.iter().all(|x| x[0] < 0.0 && x[1] < 0.0));
        // The post extension rewinds the rising flow to before the event.
        assert!(e.post_states.iter().all(|x| x[1] > 0.0));
        let reference = Reference::new(traj.clone(), ext);
        let late = reference
            .target(e.knot + 5, FALLING, MismatchPolicy::default())
            .unwrap();
        assert_eq!(late.x, &e.pre_states[4]);
    }

    #[test]
    fn closed_loop_rollout_rejects_alpha_outside_unit_interval() {
        let sys = ball();
        let traj = rollout(&sys, &v(&[1.0, 0.0]), FALLING, &vec![v(&[0.0]); 10], 1e-3).unwrap();
        let gains = GainSchedule::zeros(10, 2, 1);
        let reference = Reference::without_extensions(traj);
        let err = closed_loop_rollout(&sys, &reference, &gains, 1.5, &v(&[1.0, 0.0]), FALLING)
            .unwrap_err();
        assert_eq!(err, SimError::InvalidAlpha(1.5));
    }
}
