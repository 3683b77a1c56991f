//! Hybrid dynamical systems: modes, transitions, guards, resets and the
//! saltation matrix that carries perturbations across a transition.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::integrate::{Dopri5, IntegrationError};

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

/// Denominators of the saltation matrix below this magnitude are rejected.
pub const TRANSVERSALITY_TOLERANCE: f64 = 1e-8;

/// Relative step used by the default central-difference derivatives.
pub const FD_STEP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ModeId(pub usize);

impl fmt::Display for ModeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Edge `(source, target)` of the transition graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TransitionId {
    pub source: ModeId,
    pub target: ModeId,
}

impl TransitionId {
    pub fn new(source: ModeId, target: ModeId) -> Self {
        Self { source, target }
    }
}

impl fmt::Display for TransitionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}->{}", self.source, self.target)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HybridError {
    #[error("mode {0} does not exist")]
    InvalidMode(ModeId),
    #[error("transition {0} does not exist")]
    InvalidTransition(TransitionId),
    #[error("transition {0} registered twice")]
    DuplicateTransition(TransitionId),
    #[error("{what}: expected dimension {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error(
        "grazing transition {transition} at t={time}: |D_t g + D_x g . F| = {denominator:e} is below {tolerance:e}"
    )]
    Transversality {
        transition: TransitionId,
        time: f64,
        denominator: f64,
        tolerance: f64,
    },
    #[error("time step must be positive, got {0}")]
    NonPositiveStep(f64),
    #[error(transparent)]
    Integration(#[from] IntegrationError),
}

/// Time-varying vector field `F(t, x, u)` of one mode.
///
/// The Jacobians default to central finite differences; systems with known
/// derivatives should override them.
pub trait VectorField: Send + Sync {
    fn eval(&self, t: f64, x: &Vector, u: &Vector) -> Vector;

    fn jacobian_x(&self, t: f64, x: &Vector, u: &Vector) -> Matrix {
        central_jacobian(x, |xp| self.eval(t, xp, u))
    }

    fn jacobian_u(&self, t: f64, x: &Vector, u: &Vector) -> Matrix {
        central_jacobian(u, |up| self.eval(t, x, up))
    }
}

/// Scalar guard `g(t, x)`; the transition fires when `g` reaches zero from above.
pub trait Guard: Send + Sync {
    fn eval(&self, t: f64, x: &Vector) -> f64;

    fn gradient_x(&self, t: f64, x: &Vector) -> Vector {
        let row = central_jacobian(x, |xp| Vector::from_element(1, self.eval(t, xp)));
        row.row(0).transpose()
    }

    fn derivative_t(&self, t: f64, x: &Vector) -> f64 {
        let h = FD_STEP * t.abs().max(1.0);
        (self.eval(t + h, x) - self.eval(t - h, x)) / (2.0 * h)
    }
}

/// Reset map `R(t, x)` applied when a guard is reached.
pub trait Reset: Send + Sync {
    fn apply(&self, t: f64, x: &Vector) -> Vector;

    fn jacobian_x(&self, t: f64, x: &Vector) -> Matrix {
        central_jacobian(x, |xp| self.apply(t, xp))
    }

    fn derivative_t(&self, t: f64, x: &Vector) -> Vector {
        let h = FD_STEP * t.abs().max(1.0);
        (self.apply(t + h, x) - self.apply(t - h, x)) / (2.0 * h)
    }
}

/// Central-difference Jacobian of `f` at `x` with step `1e-6 * max(1, |x_i|)`.
pub fn central_jacobian(x: &Vector, mut f: impl FnMut(&Vector) -> Vector) -> Matrix {
    let mut columns = Vec::with_capacity(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let h = FD_STEP * x[i].abs().max(1.0);
        probe[i] = x[i] + h;
        let plus = f(&probe);
        probe[i] = x[i] - h;
        let minus = f(&probe);
        probe[i] = x[i];
        columns.push((plus - minus) / (2.0 * h));
    }
    if columns.is_empty() {
        let rows = f(x).len();
        return Matrix::zeros(rows, 0);
    }
    Matrix::from_columns(&columns)
}

/// Vector field from a closure, with finite-difference Jacobians.
pub struct FnField<F>(pub F);

impl<F> VectorField for FnField<F>
where
    F: Fn(f64, &Vector, &Vector) -> Vector + Send + Sync,
{
    fn eval(&self, t: f64, x: &Vector, u: &Vector) -> Vector {
        (self.0)(t, x, u)
    }
}

/// Guard from a closure, with finite-difference derivatives.
pub struct FnGuard<F>(pub F);

impl<F> Guard for FnGuard<F>
where
    F: Fn(f64, &Vector) -> f64 + Send + Sync,
{
    fn eval(&self, t: f64, x: &Vector) -> f64 {
        (self.0)(t, x)
    }
}

/// Reset from a closure, with finite-difference derivatives.
pub struct FnReset<F>(pub F);

impl<F> Reset for FnReset<F>
where
    F: Fn(f64, &Vector) -> Vector + Send + Sync,
{
    fn apply(&self, t: f64, x: &Vector) -> Vector {
        (self.0)(t, x)
    }
}

pub struct IdentityReset;

impl Reset for IdentityReset {
    fn apply(&self, _t: f64, x: &Vector) -> Vector {
        x.clone()
    }

    fn jacobian_x(&self, _t: f64, x: &Vector) -> Matrix {
        Matrix::identity(x.len(), x.len())
    }

    fn derivative_t(&self, _t: f64, x: &Vector) -> Vector {
        Vector::zeros(x.len())
    }
}

pub struct Mode {
    pub name: String,
    field: Box<dyn VectorField>,
}

pub struct Transition {
    pub id: TransitionId,
    guard: Box<dyn Guard>,
    reset: Box<dyn Reset>,
}

impl Transition {
    pub fn guard(&self) -> &dyn Guard {
        self.guard.as_ref()
    }

    pub fn reset(&self) -> &dyn Reset {
        self.reset.as_ref()
    }
}

/// Modes with their vector fields plus the guarded, resetting transitions
/// between them. Immutable once built.
pub struct HybridSystem {
    state_dim: usize,
    input_dim: usize,
    modes: Vec<Mode>,
    transitions: Vec<Transition>,
}

impl fmt::Debug for HybridSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HybridSystem")
            .field("state_dim", &self.state_dim)
            .field("input_dim", &self.input_dim)
            .field(
                "modes",
                &self.modes.iter().map(|m| &m.name).collect::<Vec<_>>(),
            )
            .field(
                "transitions",
                &self.transitions.iter().map(|t| t.id).collect::<Vec<_>>(),
            )
            .finish()
    }
}

pub struct HybridSystemBuilder {
    state_dim: usize,
    input_dim: usize,
    modes: Vec<Mode>,
    transitions: Vec<Transition>,
}

impl HybridSystemBuilder {
    pub fn mode(&mut self, name: impl Into<String>, field: impl VectorField + 'static) -> ModeId {
        self.modes.push(Mode {
            name: name.into(),
            field: Box::new(field),
        });
        ModeId(self.modes.len() - 1)
    }

    /// Registers a transition. Transition order is the tie-break order for
    /// simultaneous guard crossings.
    pub fn transition(
        &mut self,
        source: ModeId,
        target: ModeId,
        guard: impl Guard + 'static,
        reset: impl Reset + 'static,
    ) -> Result<TransitionId, HybridError> {
        for mode in [source, target] {
            if mode.0 >= self.modes.len() {
                return Err(HybridError::InvalidMode(mode));
            }
        }
        let id = TransitionId::new(source, target);
        if self.transitions.iter().any(|t| t.id == id) {
            return Err(HybridError::DuplicateTransition(id));
        }
        self.transitions.push(Transition {
            id,
            guard: Box::new(guard),
            reset: Box::new(reset),
        });
        Ok(id)
    }

    pub fn build(self) -> HybridSystem {
        HybridSystem {
            state_dim: self.state_dim,
            input_dim: self.input_dim,
            modes: self.modes,
            transitions: self.transitions,
        }
    }
}

/// Saltation matrix together with the transversality denominator it was
/// built from.
#[derive(Debug, Clone, PartialEq)]
pub struct SaltationResult {
    pub matrix: Matrix,
    pub denominator: f64,
}

/// Jacobians of the one-step flow map restricted to a single mode.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowJacobians {
    pub x_next: Vector,
    pub f_x: Matrix,
    pub f_u: Matrix,
}

impl HybridSystem {
    pub fn builder(state_dim: usize, input_dim: usize) -> HybridSystemBuilder {
        HybridSystemBuilder {
            state_dim,
            input_dim,
            modes: Vec::new(),
            transitions: Vec::new(),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn mode_count(&self) -> usize {
        self.modes.len()
    }

    pub fn modes(&self) -> &[Mode] {
        &self.modes
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn mode(&self, id: ModeId) -> Result<&Mode, HybridError> {
        self.modes.get(id.0).ok_or(HybridError::InvalidMode(id))
    }

    pub fn transition(&self, id: TransitionId) -> Result<&Transition, HybridError> {
        self.transition_index(id).map(|i| &self.transitions[i])
    }

    pub fn transition_index(&self, id: TransitionId) -> Result<usize, HybridError> {
        self.transitions
            .iter()
            .position(|t| t.id == id)
            .ok_or(HybridError::InvalidTransition(id))
    }

    /// Transitions leaving `mode`, in registration order.
    pub fn outgoing(&self, mode: ModeId) -> impl Iterator<Item = &Transition> {
        self.transitions.iter().filter(move |t| t.id.source == mode)
    }

    pub fn check_state(&self, x: &Vector) -> Result<(), HybridError> {
        check_dim("state", self.state_dim, x.len())
    }

    pub fn check_input(&self, u: &Vector) -> Result<(), HybridError> {
        check_dim("input", self.input_dim, u.len())
    }

    pub fn eval_vector_field(
        &self,
        mode: ModeId,
        t: f64,
        x: &Vector,
        u: &Vector,
    ) -> Result<Vector, HybridError> {
        let m = self.mode(mode)?;
        self.check_state(x)?;
        self.check_input(u)?;
        Ok(m.field.eval(t, x, u))
    }

    pub fn field_jacobians(
        &self,
        mode: ModeId,
        t: f64,
        x: &Vector,
        u: &Vector,
    ) -> Result<(Matrix, Matrix), HybridError> {
        let m = self.mode(mode)?;
        Ok((m.field.jacobian_x(t, x, u), m.field.jacobian_u(t, x, u)))
    }

    pub fn eval_guard(&self, tr: TransitionId, t: f64, x: &Vector) -> Result<f64, HybridError> {
        let transition = self.transition(tr)?;
        self.check_state(x)?;
        Ok(transition.guard.eval(t, x))
    }

    pub fn apply_reset(
        &self,
        tr: TransitionId,
        t: f64,
        x_minus: &Vector,
    ) -> Result<Vector, HybridError> {
        let transition = self.transition(tr)?;
        self.check_state(x_minus)?;
        let x_plus = transition.reset.apply(t, x_minus);
        check_dim("reset output", self.state_dim, x_plus.len())?;
        Ok(x_plus)
    }

    /// Rate of change of the guard along the flow of its source mode,
    /// `D_t g + D_x g . F_I`.
    pub fn guard_rate(
        &self,
        tr: TransitionId,
        t: f64,
        x: &Vector,
        u: &Vector,
    ) -> Result<f64, HybridError> {
        let transition = self.transition(tr)?;
        let field = self.eval_vector_field(tr.source, t, x, u)?;
        let guard = &transition.guard;
        Ok(guard.derivative_t(t, x) + guard.gradient_x(t, x).dot(&field))
    }

    /// Saltation matrix of transition `tr` at pre-event state `x_minus`:
    ///
    /// `Xi = D_x R + (F_J - D_x R . F_I - D_t R) D_x g / (D_t g + D_x g . F_I)`
    ///
    /// with `F_I` at the pre-event state and `F_J` at the post-reset state.
    pub fn saltation_matrix(
        &self,
        tr: TransitionId,
        t: f64,
        x_minus: &Vector,
        u: &Vector,
    ) -> Result<SaltationResult, HybridError> {
        let transition = self.transition(tr)?;
        self.check_state(x_minus)?;
        self.check_input(u)?;

        let guard = &transition.guard;
        let reset = &transition.reset;
        let f_pre = self.eval_vector_field(tr.source, t, x_minus, u)?;
        let x_plus = reset.apply(t, x_minus);
        let f_post = self.eval_vector_field(tr.target, t, &x_plus, u)?;
        let dg_dx = guard.gradient_x(t, x_minus);
        let denominator = guard.derivative_t(t, x_minus) + dg_dx.dot(&f_pre);
        if !(denominator.abs() >= TRANSVERSALITY_TOLERANCE) {
            return Err(HybridError::Transversality {
                transition: tr,
                time: t,
                denominator,
                tolerance: TRANSVERSALITY_TOLERANCE,
            });
        }

        let dr_dx = reset.jacobian_x(t, x_minus);
        let jump = f_post - &dr_dx * f_pre - reset.derivative_t(t, x_minus);
        let matrix = dr_dx + (jump * dg_dx.transpose()) / denominator;
        Ok(SaltationResult {
            matrix,
            denominator,
        })
    }

    /// Jacobians of the discrete flow `x_{k+1} = f_dt(x_k, u_k)` within one
    /// mode, obtained by integrating the variational equations alongside the
    /// state with the input held constant. Guards are ignored.
    pub fn linearize_flow_step(
        &self,
        mode: ModeId,
        t: f64,
        x: &Vector,
        u: &Vector,
        dt: f64,
    ) -> Result<FlowJacobians, HybridError> {
        if !(dt > 0.0) {
            return Err(HybridError::NonPositiveStep(dt));
        }
        self.variational_flow(mode, t, x, u, dt, &Dopri5::default())
    }

    pub(crate) fn variational_flow(
        &self,
        mode: ModeId,
        t: f64,
        x: &Vector,
        u: &Vector,
        duration: f64,
        solver: &Dopri5,
    ) -> Result<FlowJacobians, HybridError> {
        let field = &self.mode(mode)?.field;
        self.check_state(x)?;
        self.check_input(u)?;
        let n = self.state_dim;
        let m = self.input_dim;
        if duration == 0.0 {
            return Ok(FlowJacobians {
                x_next: x.clone(),
                f_x: Matrix::identity(n, n),
                f_u: Matrix::zeros(n, m),
            });
        }

        // Packed as [x | Phi_x (column-major) | Phi_u (column-major)].
        let size = n + n * n + n * m;
        let mut y0 = Vector::zeros(size);
        y0.rows_mut(0, n).copy_from(x);
        for i in 0..n {
            y0[n + i * n + i] = 1.0;
        }
        let rhs = |s: f64, y: &Vector| -> Vector {
            let state = y.rows(0, n).into_owned();
            let phi_x = Matrix::from_column_slice(n, n, y.rows(n, n * n).as_slice());
            let phi_u = Matrix::from_column_slice(n, m, y.rows(n + n * n, n * m).as_slice());
            let a = field.jacobian_x(s, &state, u);
            let b = field.jacobian_u(s, &state, u);
            let mut dy = Vector::zeros(size);
            dy.rows_mut(0, n).copy_from(&field.eval(s, &state, u));
            let d_phi_x = &a * phi_x;
            let d_phi_u = &a * phi_u + b;
            dy.rows_mut(n, n * n).copy_from_slice(d_phi_x.as_slice());
            dy.rows_mut(n + n * n, n * m)
                .copy_from_slice(d_phi_u.as_slice());
            dy
        };
        let y1 = solver.integrate(rhs, t, &y0, t + duration)?;
        Ok(FlowJacobians {
            x_next: y1.rows(0, n).into_owned(),
            f_x: Matrix::from_column_slice(n, n, y1.rows(n, n * n).as_slice()),
            f_u: Matrix::from_column_slice(n, m, y1.rows(n + n * n, n * m).as_slice()),
        })
    }
}

fn check_dim(what: &'static str, expected: usize, found: usize) -> Result<(), HybridError> {
    if expected == found {
        Ok(())
    } else {
        Err(HybridError::DimensionMismatch {
            what,
            expected,
            found,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn pendulum_with_wall() -> HybridSystem {
        let mut b = HybridSystem::builder(2, 1);
        let swing = b.mode(
            "swing",
            FnField(|_t: f64, x: &Vector, u: &Vector| {
                Vector::from_vec(vec![x[1], -x[0].sin() + u[0]])
            }),
        );
        b.transition(
            swing,
            swing,
            FnGuard(|_t: f64, x: &Vector| x[0] + 0.3),
            FnReset(|_t: f64, x: &Vector| Vector::from_vec(vec![x[0], -0.5 * x[1]])),
        )
        .unwrap();
        b.build()
    }

    #[test]
    fn rejects_unknown_ids() {
        let sys = pendulum_with_wall();
        let x = Vector::zeros(2);
        let u = Vector::zeros(1);
        assert_eq!(
            sys.eval_vector_field(ModeId(3), 0.0, &x, &u),
            Err(HybridError::InvalidMode(ModeId(3)))
        );
        let bogus = TransitionId::new(ModeId(0), ModeId(1));
        assert_eq!(
            sys.eval_guard(bogus, 0.0, &x),
            Err(HybridError::InvalidTransition(bogus))
        );
        assert!(matches!(
            sys.eval_vector_field(ModeId(0), 0.0, &Vector::zeros(3), &u),
            Err(HybridError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn duplicate_transition_is_rejected() {
        let mut b = HybridSystem::builder(1, 1);
        let a = b.mode("a", FnField(|_t: f64, x: &Vector, _u: &Vector| x.clone()));
        b.transition(a, a, FnGuard(|_t: f64, x: &Vector| x[0]), IdentityReset)
            .unwrap();
        let again = b.transition(a, a, FnGuard(|_t: f64, x: &Vector| x[0]), IdentityReset);
        assert!(matches!(again, Err(HybridError::DuplicateTransition(_))));
    }

    #[test]
    fn finite_difference_saltation_matches_closed_form_for_self_loop() {
        // Self-loop with a damped reset: D_x R = diag(1, -0.5), F_I = F_J form.
        let sys = pendulum_with_wall();
        let tr = sys.transitions()[0].id;
        let x = Vector::from_vec(vec![-0.3, -2.0]);
        let u = Vector::from_vec(vec![0.1]);
        let salt = sys.saltation_matrix(tr, 0.0, &x, &u).unwrap();
        let a = -(-0.3f64).sin() + 0.1;
        let x_plus = [-0.3f64, 1.0];
        let f_post = [x_plus[1], -x_plus[0].sin() + 0.1];
        let f_pre = [-2.0, a];
        let jump0 = f_post[0] - f_pre[0];
        let jump1 = f_post[1] + 0.5 * f_pre[1];
        let expected = Matrix::from_row_slice(2, 2, &[1.0 + jump0 / -2.0, 0.0, jump1 / -2.0, -0.5]);
        assert_relative_eq!(salt.matrix, expected, epsilon = 1e-6);
        assert_relative_eq!(salt.denominator, -2.0, epsilon = 1e-8);
    }

    #[test]
    fn linearization_of_nonlinear_field_matches_finite_differences() {
        let sys = pendulum_with_wall();
        let x = Vector::from_vec(vec![0.4, -0.2]);
        let u = Vector::from_vec(vec![0.3]);
        let dt = 0.05;
        let lin = sys.linearize_flow_step(ModeId(0), 0.0, &x, &u, dt).unwrap();
        let solver = Dopri5::default();
        let step = |x: &Vector, u: &Vector| {
            sys.variational_flow(ModeId(0), 0.0, x, u, dt, &solver)
                .unwrap()
                .x_next
        };
        let fd_x = central_jacobian(&x, |xp| step(xp, &u));
        let fd_u = central_jacobian(&u, |up| step(&x, up));
        assert_relative_eq!(lin.f_x, fd_x, max_relative = 1e-6, epsilon = 1e-9);
        assert_relative_eq!(lin.f_u, fd_u, max_relative = 1e-6, epsilon = 1e-9);
    }

    #[test]
    fn zero_duration_flow_is_identity() {
        let sys = pendulum_with_wall();
        let x = Vector::from_vec(vec![0.4, -0.2]);
        let u = Vector::from_vec(vec![0.3]);
        let lin = sys
            .variational_flow(ModeId(0), 0.0, &x, &u, 0.0, &Dopri5::default())
            .unwrap();
        assert_eq!(lin.f_x, Matrix::identity(2, 2));
        assert_eq!(lin.f_u, Matrix::zeros(2, 1));
        assert!(matches!(
            sys.linearize_flow_step(ModeId(0), 0.0, &x, &u, 0.0),
            Err(HybridError::NonPositiveStep(_))
        ));
    }
}
