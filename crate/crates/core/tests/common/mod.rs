//! Reference computations that do not go through the library: closed forms
//! for the bouncing ball, a discrete Riccati recursion and finite
//! differences.

#![allow(dead_code)]

use hilqr::hybrid::{Matrix, Vector};

pub const G: f64 = 9.81;
pub const E: f64 = 0.8;

pub fn v(values: &[f64]) -> Vector {
    Vector::from_column_slice(values)
}

pub fn diag(values: &[f64]) -> Matrix {
    Matrix::from_diagonal(&v(values))
}

/// First `t > 0` with `z0 + zd0 t + a t^2 / 2 = 0` for a body that ends up
/// moving downward, `a < 0`.
pub fn fall_time(z0: f64, zd0: f64, a: f64) -> f64 {
    (zd0 + (zd0 * zd0 - 2.0 * a * z0).sqrt()) / -a
}

/// Ballistic state after `t` seconds under constant acceleration `a`.
pub fn ballistic(z0: f64, zd0: f64, a: f64, t: f64) -> [f64; 2] {
    [z0 + zd0 * t + 0.5 * a * t * t, zd0 + a * t]
}

/// Impact saltation matrix of the ball, written out from the jump in the
/// vector field across the impact: only `zdot` changes, by a factor `-e`,
/// and the guard is the height, so the correction term is
/// `(F+ - R F-) e_1^T / zdot`.
pub fn ball_impact_saltation(e: f64, mass: f64, g: f64, u: f64, zdot: f64) -> Matrix {
    let accel = u / mass - g;
    let f_minus = v(&[zdot, accel]);
    let f_plus = v(&[-e * zdot, accel]);
    let reset = diag(&[1.0, -e]);
    let jump = &f_plus - &reset * &f_minus;
    let mut xi = reset;
    xi[(0, 0)] += jump[0] / zdot;
    xi[(1, 0)] += jump[1] / zdot;
    xi
}

/// Feedback gains `K_k` of the finite-horizon discrete LQR problem
/// `sum x'Qx + u'Ru + x_N' Qn x_N` for `x+ = A x + B u`.
pub fn riccati_gains(
    a: &Matrix,
    b: &Matrix,
    q: &Matrix,
    r: &Matrix,
    qn: &Matrix,
    n: usize,
) -> Vec<Matrix> {
    let mut p = qn.clone();
    let mut gains = vec![Matrix::zeros(b.ncols(), a.nrows()); n];
    for k in (0..n).rev() {
        let s = r + b.transpose() * &p * b;
        let k_gain = -s.lu().solve(&(b.transpose() * &p * a)).expect("invertible");
        let a_cl = a + b * &k_gain;
        p = q + k_gain.transpose() * r * &k_gain + a_cl.transpose() * &p * &a_cl;
        gains[k] = k_gain;
    }
    gains
}

/// Exact zero-order-hold discretization of the double integrator.
pub fn double_integrator_ab(mass: f64, dt: f64) -> (Matrix, Matrix) {
    (
        Matrix::from_row_slice(2, 2, &[1.0, dt, 0.0, 1.0]),
        Matrix::from_row_slice(2, 1, &[0.5 * dt * dt / mass, dt / mass]),
    )
}

/// Central-difference Jacobian with a fixed step.
pub fn fd_jacobian(x: &Vector, h: f64, mut f: impl FnMut(&Vector) -> Vector) -> Matrix {
    let rows = f(x).len();
    let mut jac = Matrix::zeros(rows, x.len());
    for i in 0..x.len() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[i] += h;
        xm[i] -= h;
        jac.set_column(i, &((f(&xp) - f(&xm)) / (2.0 * h)));
    }
    jac
}

pub fn max_rel_err(a: &Matrix, b: &Matrix) -> f64 {
    (a - b).amax() / b.amax()
}
