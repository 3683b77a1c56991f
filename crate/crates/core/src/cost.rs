//! Quadratic tracking cost with mode-aware reference lookup.

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::hybrid::{Matrix, ModeId, TransitionId, Vector};
use crate::simulator::{HybridTrajectory, MismatchPolicy, Reference, SimError, TargetKnot};

const SYMMETRY_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CostError {
    #[error("{what}: expected {expected_rows}x{expected_cols}, found {rows}x{cols}")]
    Shape {
        what: &'static str,
        expected_rows: usize,
        expected_cols: usize,
        rows: usize,
        cols: usize,
    },
    #[error("{0} is not symmetric")]
    NotSymmetric(&'static str),
    #[error("{0} is not positive semidefinite")]
    NotPositiveSemidefinite(&'static str),
    #[error("{0} is not positive definite")]
    NotPositiveDefinite(&'static str),
    #[error("cost covers {expected} intervals but the trajectory has {found}")]
    HorizonMismatch { expected: usize, found: usize },
    #[error("{what} schedule has {found} entries, expected {expected}")]
    ScheduleLength {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("reference has no knots past offset {offset}")]
    EmptyReference { offset: usize },
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Value and derivatives of one cost term.
#[derive(Debug, Clone, PartialEq)]
pub struct StageDerivatives {
    pub value: f64,
    pub j_x: Vector,
    pub j_u: Vector,
    pub j_xx: Matrix,
    pub j_ux: Matrix,
    pub j_uu: Matrix,
}

/// Optional cost charged at each transition on the pre-event state.
pub trait TransitionCost: Send + Sync {
    fn value(&self, tr: TransitionId, t: f64, x_pre: &Vector) -> f64;
    fn gradient(&self, tr: TransitionId, t: f64, x_pre: &Vector) -> Vector;
    fn hessian(&self, tr: TransitionId, t: f64, x_pre: &Vector) -> Matrix;
}

/// `(x - x_hat)' Q (x - x_hat) + (u - u_hat)' R (u - u_hat)` at one knot.
///
/// With `mode_matching` the reference knot is chosen for the rollout's
/// `mode` (extensions on mismatch); otherwise the nominal knot is used.
#[allow(clippy::too_many_arguments)]
pub fn tracking_cost(
    x: &Vector,
    u: &Vector,
    reference: &Reference,
    k: usize,
    mode: ModeId,
    q: &Matrix,
    r: &Matrix,
    mode_matching: bool,
    policy: MismatchPolicy,
) -> Result<StageDerivatives, SimError> {
    let target = select_target(reference, k, mode, mode_matching, policy)?;
    let dx = x - target.x;
    let du = match target.u {
        Some(u_hat) => u - u_hat,
        None => u.clone(),
    };
    let q_dx = q * &dx;
    let r_du = r * &du;
    Ok(StageDerivatives {
        value: dx.dot(&q_dx) + du.dot(&r_du),
        j_x: q_dx * 2.0,
        j_u: r_du * 2.0,
        j_xx: q * 2.0,
        j_ux: Matrix::zeros(u.len(), x.len()),
        j_uu: r * 2.0,
    })
}

fn select_target(
    reference: &Reference,
    k: usize,
    mode: ModeId,
    mode_matching: bool,
    policy: MismatchPolicy,
) -> Result<TargetKnot<'_>, SimError> {
    if mode_matching {
        reference.target(k, mode, policy)
    } else {
        Ok(reference.nominal(k))
    }
}

/// Tracking cost over a window of a shared reference.
///
/// Knot `k` of the problem corresponds to knot `offset + k` of the
/// reference; knots past the reference end hold its final target.
#[derive(Clone)]
pub struct CostModel {
    target: Arc<Reference>,
    offset: usize,
    horizon: usize,
    state_weights: Vec<Matrix>,
    input_weights: Vec<Matrix>,
    terminal_weight: Matrix,
    mode_matching: bool,
    policy: MismatchPolicy,
    transition_cost: Option<Arc<dyn TransitionCost>>,
}

impl fmt::Debug for CostModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CostModel")
            .field("offset", &self.offset)
            .field("horizon", &self.horizon)
            .field("mode_matching", &self.mode_matching)
            .field("policy", &self.policy)
            .field("transition_cost", &self.transition_cost.is_some())
            .finish()
    }
}

impl CostModel {
    /// Constant weights over the whole reference.
    pub fn tracking(
        target: Arc<Reference>,
        q: Matrix,
        r: Matrix,
        q_terminal: Matrix,
    ) -> Result<Self, CostError> {
        let horizon = target.len();
        Self::window(target, 0, horizon, q, r, q_terminal)
    }

    /// Constant weights over `horizon` intervals starting at `offset`.
    pub fn window(
        target: Arc<Reference>,
        offset: usize,
        horizon: usize,
        q: Matrix,
        r: Matrix,
        q_terminal: Matrix,
    ) -> Result<Self, CostError> {
        Self::scheduled(
            target,
            offset,
            vec![q; horizon],
            vec![r; horizon],
            q_terminal,
        )
    }

    /// Per-knot weights; the horizon is the schedule length.
    pub fn scheduled(
        target: Arc<Reference>,
        offset: usize,
        state_weights: Vec<Matrix>,
        input_weights: Vec<Matrix>,
        terminal_weight: Matrix,
    ) -> Result<Self, CostError> {
        let horizon = state_weights.len();
        if input_weights.len() != horizon {
            return Err(CostError::ScheduleLength {
                what: "input weight",
                expected: horizon,
                found: input_weights.len(),
            });
        }
        let n = target.trajectory.states[0].len();
        let m = target
            .trajectory
            .inputs
            .first()
            .map(|u| u.len())
            .or_else(|| input_weights.first().map(|r| r.nrows()))
            .unwrap_or(0);
        if horizon > 0 && target.is_empty() {
            return Err(CostError::EmptyReference { offset });
        }
        for q in &state_weights {
            check_weight(q, n, "state weight", Definiteness::SemiDefinite)?;
        }
        for r in &input_weights {
            check_weight(r, m, "input weight", Definiteness::Definite)?;
        }
        check_weight(
            &terminal_weight,
            n,
            "terminal weight",
            Definiteness::SemiDefinite,
        )?;
        Ok(Self {
            target,
            offset,
            horizon,
            state_weights,
            input_weights,
            terminal_weight,
            mode_matching: true,
            policy: MismatchPolicy::default(),
            transition_cost: None,
        })
    }

    /// Toggles the mode-mismatch reference switch.
    pub fn with_mode_matching(mut self, enabled: bool) -> Self {
        self.mode_matching = enabled;
        self
    }

    pub fn with_policy(mut self, policy: MismatchPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn with_transition_cost(mut self, cost: Arc<dyn TransitionCost>) -> Self {
        self.transition_cost = Some(cost);
        self
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn offset(&self) -> usize {
        self.offset
    }

    pub fn reference(&self) -> &Arc<Reference> {
        &self.target
    }

    pub fn mode_matching(&self) -> bool {
        self.mode_matching
    }

    pub fn dt(&self) -> f64 {
        self.target.trajectory.dt
    }

    pub fn start_time(&self) -> f64 {
        self.target.trajectory.time(self.offset)
    }

    pub fn transition_cost(&self) -> Option<&dyn TransitionCost> {
        self.transition_cost.as_deref()
    }

    pub fn stage(
        &self,
        k: usize,
        x: &Vector,
        u: &Vector,
        mode: ModeId,
    ) -> Result<StageDerivatives, CostError> {
        Ok(tracking_cost(
            x,
            u,
            &self.target,
            self.offset + k,
            mode,
            &self.state_weights[k],
            &self.input_weights[k],
            self.mode_matching,
            self.policy,
        )?)
    }

    /// Terminal term; the input derivatives are empty.
    pub fn terminal(&self, x: &Vector, mode: ModeId) -> Result<StageDerivatives, CostError> {
        let target = select_target(
            &self.target,
            self.offset + self.horizon,
            mode,
            self.mode_matching,
            self.policy,
        )?;
        let dx = x - target.x;
        let q_dx = &self.terminal_weight * &dx;
        Ok(StageDerivatives {
            value: dx.dot(&q_dx),
            j_x: q_dx * 2.0,
            j_u: Vector::zeros(0),
            j_xx: &self.terminal_weight * 2.0,
            j_ux: Matrix::zeros(0, x.len()),
            j_uu: Matrix::zeros(0, 0),
        })
    }

    /// Total cost of a trajectory spanning this cost's horizon.
    pub fn total(&self, traj: &HybridTrajectory) -> Result<f64, CostError> {
        if traj.len() != self.horizon {
            return Err(CostError::HorizonMismatch {
                expected: self.horizon,
                found: traj.len(),
            });
        }
        let mut total = 0.0;
        for k in 0..self.horizon {
            total += self
                .stage(k, &traj.states[k], &traj.inputs[k], traj.modes[k])?
                .value;
        }
        total += self.terminal(traj.final_state(), traj.final_mode())?.value;
        if let Some(tc) = &self.transition_cost {
            for (_, event) in &traj.events {
                total += tc.value(event.transition, event.event_time, &event.x_pre);
            }
        }
        Ok(total)
    }
}

#[derive(Clone, Copy)]
enum Definiteness {
    SemiDefinite,
    Definite,
}

fn check_weight(
    w: &Matrix,
    dim: usize,
    what: &'static str,
    definiteness: Definiteness,
) -> Result<(), CostError> {
    if w.nrows() != dim || w.ncols() != dim {
        return Err(CostError::Shape {
            what,
            expected_rows: dim,
            expected_cols: dim,
            rows: w.nrows(),
            cols: w.ncols(),
        });
    }
    if dim == 0 {
        return Ok(());
    }
    let scale = w.amax().max(1.0);
    if (w - w.transpose()).amax() > SYMMETRY_TOLERANCE * scale {
        return Err(CostError::NotSymmetric(what));
    }
    let eigen = w.clone().symmetric_eigenvalues();
    let min = eigen.min();
    match definiteness {
        Definiteness::SemiDefinite if min < -SYMMETRY_TOLERANCE * scale => {
            Err(CostError::NotPositiveSemidefinite(what))
        }
        Definiteness::Definite if min <= 0.0 => Err(CostError::NotPositiveDefinite(what)),
        _ => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hybrid::ModeId;

    fn flat_reference(n_knots: usize) -> Reference {
        let mut traj = HybridTrajectory::single(0.0, 0.1, Vector::zeros(2), ModeId(0));
        for _ in 0..n_knots {
            traj.inputs.push(Vector::zeros(1));
            traj.states.push(Vector::zeros(2));
            traj.modes.push(ModeId(0));
        }
        Reference::without_extensions(traj)
    }

    #[test]
    fn zero_at_reference() {
        let reference = flat_reference(3);
        let c = tracking_cost(
            &Vector::zeros(2),
            &Vector::zeros(1),
            &reference,
            1,
            ModeId(0),
            &Matrix::identity(2, 2),
            &Matrix::identity(1, 1),
            true,
            MismatchPolicy::Strict,
        )
        .unwrap();
        assert_eq!(c.value, 0.0);
        assert_eq!(c.j_x, Vector::zeros(2));
    }

    #[test]
    fn direct_quadratic() {
        let reference = flat_reference(3);
        let c = tracking_cost(
            &Vector::from_vec(vec![0.1, 0.0]),
            &Vector::from_vec(vec![5.0]),
            &reference,
            0,
            ModeId(0),
            &Matrix::identity(2, 2),
            &Matrix::zeros(1, 1),
            true,
            MismatchPolicy::Strict,
        )
        .unwrap();
        assert!((c.value - 0.01).abs() < 1e-15);
        assert!((c.j_x[0] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn weights_are_validated() {
        let reference = Arc::new(flat_reference(2));
        let asym = Matrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert_eq!(
            CostModel::tracking(
                reference.clone(),
                asym,
                Matrix::identity(1, 1),
                Matrix::identity(2, 2)
            )
            .unwrap_err(),
            CostError::NotSymmetric("state weight")
        );
        assert_eq!(
            CostModel::tracking(
                reference.clone(),
                Matrix::identity(2, 2),
                Matrix::zeros(1, 1),
                Matrix::identity(2, 2)
            )
            .unwrap_err(),
            CostError::NotPositiveDefinite("input weight")
        );
        assert_eq!(
            CostModel::tracking(
                reference.clone(),
                -Matrix::identity(2, 2),
                Matrix::identity(1, 1),
                Matrix::identity(2, 2)
            )
            .unwrap_err(),
            CostError::NotPositiveSemidefinite("state weight")
        );
        assert!(matches!(
            CostModel::tracking(
                reference,
                Matrix::identity(3, 3),
                Matrix::identity(1, 1),
                Matrix::identity(2, 2)
            ),
            Err(CostError::Shape { .. })
        ));
    }

    #[test]
    fn total_rejects_wrong_length() {
        let reference = Arc::new(flat_reference(2));
        let cost = CostModel::tracking(
            reference.clone(),
            Matrix::identity(2, 2),
            Matrix::identity(1, 1),
            Matrix::identity(2, 2),
        )
        .unwrap();
        let short = HybridTrajectory::single(0.0, 0.1, Vector::zeros(2), ModeId(0));
        assert_eq!(
            cost.total(&short),
            Err(CostError::HorizonMismatch {
                expected: 2,
                found: 0
            })
        );
        assert_eq!(cost.total(&reference.trajectory), Ok(0.0));
    }
}
