//! Dormand–Prince 5(4) with step-size control and the 4th-order continuous
//! extension used for guard monitoring.

use nalgebra::DVector;
use thiserror::Error;

type Vector = DVector<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IntegrationError {
    #[error("step size underflow at t={t} (h={h:e})")]
    StepSizeUnderflow { t: f64, h: f64 },
    #[error("exceeded {0} integration steps")]
    TooManySteps(usize),
    #[error("non-finite state at t={0}")]
    NonFinite(f64),
}

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;

const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;

// b - b* (5th minus embedded 4th order weights)
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

// Dense output coefficients (Hairer, Norsett & Wanner).
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

/// One accepted step with its interpolant.
#[derive(Debug, Clone)]
pub struct DenseStep {
    pub t0: f64,
    pub t1: f64,
    pub y0: Vector,
    pub y1: Vector,
    r3: Vector,
    r4: Vector,
    r5: Vector,
}

impl DenseStep {
    /// Interpolated state at `t` (intended for `t` between `t0` and `t1`).
    pub fn eval(&self, t: f64) -> Vector {
        if t == self.t0 {
            return self.y0.clone();
        }
        if t == self.t1 {
            return self.y1.clone();
        }
        let theta = (t - self.t0) / (self.t1 - self.t0);
        let theta1 = 1.0 - theta;
        let dy = &self.y1 - &self.y0;
        &self.y0 + (dy + (&self.r3 + (&self.r4 + &self.r5 * theta1) * theta) * theta1) * theta
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dopri5 {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_steps: usize,
}

impl Default for Dopri5 {
    fn default() -> Self {
        Self {
            abs_tol: 1e-9,
            rel_tol: 1e-9,
            max_steps: 100_000,
        }
    }
}

/// Result of [`Dopri5::integrate_with`].
#[derive(Debug, Clone)]
pub enum Outcome<T> {
    Completed(Vector),
    Stopped(T),
}

impl Dopri5 {
    pub fn integrate(
        &self,
        rhs: impl Fn(f64, &Vector) -> Vector,
        t0: f64,
        y0: &Vector,
        t1: f64,
    ) -> Result<Vector, IntegrationError> {
        match self.integrate_with(rhs, t0, y0, t1, |_| None::<()>)? {
            Outcome::Completed(y) => Ok(y),
            Outcome::Stopped(()) => unreachable!(),
        }
    }

    /// Integrates from `t0` to `t1` (either direction). After every accepted
    /// step `monitor` may stop the integration by returning `Some`.
    ///
    /// The first trial step spans the whole interval, so smooth problems
    /// that the method integrates exactly take a single step.
    pub fn integrate_with<T>(
        &self,
        rhs: impl Fn(f64, &Vector) -> Vector,
        t0: f64,
        y0: &Vector,
        t1: f64,
        mut monitor: impl FnMut(&DenseStep) -> Option<T>,
    ) -> Result<Outcome<T>, IntegrationError> {
        if t1 == t0 {
            return Ok(Outcome::Completed(y0.clone()));
        }
        let direction = (t1 - t0).signum();
        let span = (t1 - t0).abs();
        let mut t = t0;
        let mut y = y0.clone();
        let mut k1 = rhs(t, &y);
        let mut h = span;
        let mut steps = 0;

        loop {
            let remaining = (t1 - t).abs();
            let last = h >= remaining;
            if last {
                h = remaining;
            }
            let h_signed = direction * h;
            let t_next = if last { t1 } else { t + h_signed };

            let k2 = rhs(t + C2 * h_signed, &(&y + &k1 * (h_signed * A21)));
            let k3 = rhs(
                t + C3 * h_signed,
                &(&y + (&k1 * A31 + &k2 * A32) * h_signed),
            );
            let k4 = rhs(
                t + C4 * h_signed,
                &(&y + (&k1 * A41 + &k2 * A42 + &k3 * A43) * h_signed),
            );
            let k5 = rhs(
                t + C5 * h_signed,
                &(&y + (&k1 * A51 + &k2 * A52 + &k3 * A53 + &k4 * A54) * h_signed),
            );
            let k6 = rhs(
                t_next,
                &(&y + (&k1 * A61 + &k2 * A62 + &k3 * A63 + &k4 * A64 + &k5 * A65) * h_signed),
            );
            let y_next =
                &y + (&k1 * A71 + &k3 * A73 + &k4 * A74 + &k5 * A75 + &k6 * A76) * h_signed;
            let k7 = rhs(t_next, &y_next);

            let err_vec =
                (&k1 * E1 + &k3 * E3 + &k4 * E4 + &k5 * E5 + &k6 * E6 + &k7 * E7) * h_signed;
            let mut sum = 0.0;
            for i in 0..y.len() {
                let scale = self.abs_tol + self.rel_tol * y[i].abs().max(y_next[i].abs());
                let ratio = err_vec[i] / scale;
                sum += ratio * ratio;
            }
            let err = if y.is_empty() {
                0.0
            } else {
                (sum / y.len() as f64).sqrt()
            };
            if !err.is_finite() || !y_next.iter().all(|v| v.is_finite()) {
                if h <= f64::EPSILON * t.abs().max(1.0) {
                    return Err(IntegrationError::NonFinite(t));
                }
                h *= 0.1;
                continue;
            }

            steps += 1;
            if steps > self.max_steps {
                return Err(IntegrationError::TooManySteps(self.max_steps));
            }

            let factor = if err == 0.0 {
                10.0
            } else {
                (0.9 * err.powf(-0.2)).clamp(0.2, 10.0)
            };

            if err <= 1.0 {
                let dy = &y_next - &y;
                let r3 = &k1 * h_signed - &dy;
                let r4 = &dy - &k7 * h_signed - &r3;
                let r5 =
                    (&k1 * D1 + &k3 * D3 + &k4 * D4 + &k5 * D5 + &k6 * D6 + &k7 * D7) * h_signed;
                let step = DenseStep {
                    t0: t,
                    t1: t_next,
                    y0: y,
                    y1: y_next,
                    r3,
                    r4,
                    r5,
                };
                if let Some(stop) = monitor(&step) {
                    return Ok(Outcome::Stopped(stop));
                }
                if last {
                    return Ok(Outcome::Completed(step.y1));
                }
                t = t_next;
                y = step.y1;
                k1 = k7;
                h *= factor;
            } else {
                h *= factor.min(1.0);
                if h <= 4.0 * f64::EPSILON * t.abs().max(span) {
                    return Err(IntegrationError::StepSizeUnderflow { t, h });
                }
            }
        }
    }
}
