//! Benchmark systems: the actuated bouncing ball and a double integrator.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::{CostError, CostModel};
use crate::hybrid::{
    Guard, HybridError, HybridSystem, IdentityReset, Matrix, ModeId, Reset, TransitionId, Vector,
    VectorField,
};
use crate::simulator::{HybridTrajectory, Reference};
use crate::solver::{solve, GainSchedule, Initialization, SolveError, SolveReport, SolverOptions};

/// Ball moving downward (`zdot < 0`).
pub const FALLING: ModeId = ModeId(0);
/// Ball moving upward or at rest (`zdot >= 0`).
pub const RISING: ModeId = ModeId(1);

/// Ground contact, `FALLING -> RISING`, guard `z`.
pub const IMPACT: TransitionId = TransitionId {
    source: FALLING,
    target: RISING,
};
/// Top of the flight, `RISING -> FALLING`, guard `zdot`.
pub const APEX: TransitionId = TransitionId {
    source: RISING,
    target: FALLING,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SystemError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("pre-impact velocity is zero; the impact is grazing")]
    GrazingImpact,
    #[error("duration {duration} is not an integer multiple of dt {dt}")]
    NonIntegralDuration { duration: f64, dt: f64 },
    #[error("reference has {0} impacts, expected exactly one")]
    ImpactCount(usize),
    #[error(transparent)]
    Hybrid(#[from] HybridError),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Solve(#[from] SolveError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BouncingBallParams {
    pub mass: f64,
    pub gravity: f64,
    pub restitution: f64,
}

impl Default for BouncingBallParams {
    fn default() -> Self {
        Self {
            mass: 1.0,
            gravity: 9.81,
            restitution: 0.8,
        }
    }
}

impl BouncingBallParams {
    pub fn validate(&self) -> Result<(), SystemError> {
        if !(self.mass > 0.0 && self.mass.is_finite()) {
            return Err(SystemError::InvalidParameter(format!(
                "mass must be positive, got {}",
                self.mass
            )));
        }
        if !(self.gravity > 0.0 && self.gravity.is_finite()) {
            return Err(SystemError::InvalidParameter(format!(
                "gravity must be positive, got {}",
                self.gravity
            )));
        }
        if !(self.restitution > 0.0 && self.restitution <= 1.0) {
            return Err(SystemError::InvalidParameter(format!(
                "restitution must lie in (0, 1], got {}",
                self.restitution
            )));
        }
        Ok(())
    }
}

struct BallField {
    mass: f64,
    gravity: f64,
}

impl VectorField for BallField {
    fn eval(&self, _t: f64, x: &Vector, u: &Vector) -> Vector {
        Vector::from_vec(vec![x[1], u[0] / self.mass - self.gravity])
    }

    fn jacobian_x(&self, _t: f64, _x: &Vector, _u: &Vector) -> Matrix {
        Matrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0])
    }

    fn jacobian_u(&self, _t: f64, _x: &Vector, _u: &Vector) -> Matrix {
        Matrix::from_row_slice(2, 1, &[0.0, 1.0 / self.mass])
    }
}

/// Guard on a single state component.
struct ComponentGuard(usize);

impl Guard for ComponentGuard {
    fn eval(&self, _t: f64, x: &Vector) -> f64 {
        x[self.0]
    }

    fn gradient_x(&self, _t: f64, x: &Vector) -> Vector {
        let mut g = Vector::zeros(x.len());
        g[self.0] = 1.0;
        g
    }

    fn derivative_t(&self, _t: f64, _x: &Vector) -> f64 {
        0.0
    }
}

struct ImpactReset {
    restitution: f64,
}

impl Reset for ImpactReset {
    fn apply(&self, _t: f64, x: &Vector) -> Vector {
        Vector::from_vec(vec![x[0], -self.restitution * x[1]])
    }

    fn jacobian_x(&self, _t: f64, _x: &Vector) -> Matrix {
        Matrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -self.restitution])
    }

    fn derivative_t(&self, _t: f64, _x: &Vector) -> Vector {
        Vector::zeros(2)
    }
}

/// The actuated bouncing ball, state `[z, zdot]`, input a vertical force.
///
/// Mode and transition ids are [`FALLING`], [`RISING`], [`IMPACT`] and
/// [`APEX`]; the impact is registered first.
pub fn bouncing_ball(params: &BouncingBallParams) -> Result<HybridSystem, SystemError> {
    params.validate()?;
    let field = || BallField {
        mass: params.mass,
        gravity: params.gravity,
    };
    let mut b = HybridSystem::builder(2, 1);
    let falling = b.mode("falling", field());
    let rising = b.mode("rising", field());
    b.transition(
        falling,
        rising,
        ComponentGuard(0),
        ImpactReset {
            restitution: params.restitution,
        },
    )?;
    b.transition(rising, falling, ComponentGuard(1), IdentityReset)?;
    Ok(b.build())
}

/// Mode a ball state belongs to; zero velocity counts as rising.
pub fn ball_mode(x: &Vector) -> ModeId {
    if x[1] >= 0.0 {
        RISING
    } else {
        FALLING
    }
}

/// Closed-form impact saltation matrix
/// `[[-e, 0], [(1 + e)(u/m - g)/zdot, -e]]`.
pub fn ball_saltation_oracle(
    params: &BouncingBallParams,
    x_minus: &Vector,
    u: &Vector,
) -> Result<Matrix, SystemError> {
    let zdot = x_minus[1];
    if zdot == 0.0 {
        return Err(SystemError::GrazingImpact);
    }
    let e = params.restitution;
    let accel = u[0] / params.mass - params.gravity;
    Ok(Matrix::from_row_slice(
        2,
        2,
        &[-e, 0.0, (1.0 + e) * accel / zdot, -e],
    ))
}

/// Weights of the offline reference problem.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceWeights {
    pub running_state: Matrix,
    pub input: Matrix,
    pub terminal: Matrix,
}

impl Default for ReferenceWeights {
    fn default() -> Self {
        Self {
            running_state: Matrix::zeros(2, 2),
            input: Matrix::from_element(1, 1, 1e-2),
            terminal: Matrix::from_diagonal(&Vector::from_vec(vec![1e7, 1e7])),
        }
    }
}

/// Result of the offline single-bounce optimization.
#[derive(Debug, Clone)]
pub struct SingleBounce {
    pub reference: Reference,
    pub gains: GainSchedule,
    pub report: SolveReport,
}

/// Number of knot intervals `duration / dt`, if integral.
pub fn knot_count(duration: f64, dt: f64) -> Result<usize, SystemError> {
    if !(dt > 0.0 && duration > 0.0) {
        return Err(SystemError::NonIntegralDuration { duration, dt });
    }
    let ratio = duration / dt;
    let n = ratio.round();
    if (ratio - n).abs() > 1e-9 * ratio.max(1.0) {
        return Err(SystemError::NonIntegralDuration { duration, dt });
    }
    Ok(n as usize)
}

/// Optimizes a bounce from `x_start` to `x_goal` over `duration`, starting
/// from zero input. The result must contain exactly one impact.
pub fn make_single_bounce_reference(
    params: &BouncingBallParams,
    x_start: &Vector,
    x_goal: &Vector,
    duration: f64,
    dt: f64,
    weights: &ReferenceWeights,
    options: &SolverOptions,
) -> Result<SingleBounce, SystemError> {
    let sys = bouncing_ball(params)?;
    let n = knot_count(duration, dt)?;

    let mut goal = HybridTrajectory::single(0.0, dt, x_goal.clone(), ball_mode(x_goal));
    goal.states = vec![x_goal.clone(); n + 1];
    goal.modes = vec![ball_mode(x_goal); n + 1];
    goal.inputs = vec![Vector::zeros(1); n];
    let cost = CostModel::tracking(
        Arc::new(Reference::without_extensions(goal)),
        weights.running_state.clone(),
        weights.input.clone(),
        weights.terminal.clone(),
    )?
    .with_mode_matching(false);

    let solution = solve(
        &sys,
        &cost,
        Initialization::Inputs {
            x0: x_start.clone(),
            mode0: ball_mode(x_start),
            inputs: vec![Vector::zeros(1); n],
        },
        options,
    )?;
    let impacts = count_impacts(solution.trajectory());
    if impacts != 1 {
        return Err(SystemError::ImpactCount(impacts));
    }
    Ok(SingleBounce {
        reference: solution.reference,
        gains: solution.gains,
        report: solution.report,
    })
}

pub fn count_impacts(traj: &HybridTrajectory) -> usize {
    traj.events
        .iter()
        .filter(|(_, e)| e.transition == IMPACT)
        .count()
}

struct DoubleIntegratorField {
    mass: f64,
}

impl VectorField for DoubleIntegratorField {
    fn eval(&self, _t: f64, x: &Vector, u: &Vector) -> Vector {
        Vector::from_vec(vec![x[1], u[0] / self.mass])
    }

    fn jacobian_x(&self, _t: f64, _x: &Vector, _u: &Vector) -> Matrix {
        Matrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0])
    }

    fn jacobian_u(&self, _t: f64, _x: &Vector, _u: &Vector) -> Matrix {
        Matrix::from_row_slice(2, 1, &[0.0, 1.0 / self.mass])
    }
}

/// Single-mode `[z, zdot]` with `zddot = u / m` and no transitions.
pub fn double_integrator(mass: f64) -> Result<HybridSystem, SystemError> {
    if !(mass > 0.0 && mass.is_finite()) {
        return Err(SystemError::InvalidParameter(format!(
            "mass must be positive, got {mass}"
        )));
    }
    let mut b = HybridSystem::builder(2, 1);
    b.mode("free", DoubleIntegratorField { mass });
    Ok(b.build())
}
