//! Numerical self-checks run by the `check` command.
//!
//! Each check compares a computed quantity with an independent reference
//! (closed forms, finite differences, a Riccati recursion) and reports the
//! measured error against its tolerance.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::cost::CostModel;
use crate::hybrid::{HybridSystem, Matrix, ModeId, Vector};
use crate::simulator::{integrate_step, rollout, HybridTrajectory, Reference};
use crate::solver::{
    backward_pass, linearize_trajectory, solve, EventLinearization, GainSchedule, Initialization,
    SolverOptions,
};
use crate::systems::{
    ball_saltation_oracle, bouncing_ball, double_integrator, BouncingBallParams, FALLING, IMPACT,
};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub measured: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl CheckResult {
    fn at_most(name: &str, measured: f64, tolerance: f64, detail: impl Into<String>) -> Self {
        Self {
            name: name.to_string(),
            passed: measured <= tolerance,
            measured,
            tolerance,
            detail: detail.into(),
        }
    }

    fn failed(name: &str, detail: impl Into<String>) -> Self {
        Self {
            name: name.to_string(),
            passed: false,
            measured: f64::NAN,
            tolerance: f64::NAN,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOptions {
    pub params: BouncingBallParams,
    pub seed: u64,
    pub samples: usize,
    /// Restitution used by the closed-form oracle; differs from
    /// `params.restitution` only to exercise a deliberate fault.
    pub oracle_restitution: Option<f64>,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            params: BouncingBallParams::default(),
            seed: 0,
            samples: 100,
            oracle_restitution: None,
        }
    }
}

fn rel_err_matrix(a: &Matrix, b: &Matrix) -> f64 {
    (a - b).amax() / b.amax().max(f64::MIN_POSITIVE)
}

/// Runs every check; a check that cannot even be evaluated counts as failed.
pub fn run_all(opts: &CheckOptions) -> Vec<CheckResult> {
    let mut results = Vec::new();
    let p = &opts.params;
    let oracle = BouncingBallParams {
        restitution: opts.oracle_restitution.unwrap_or(p.restitution),
        ..*p
    };
    results.push(saltation_vs_oracle(p, &oracle, opts.samples, opts.seed));
    results.push(saltation_vs_finite_differences(p));
    results.push(saltation_remainder_slope(p));
    results.push(riccati_equivalence());
    results.push(hybrid_gradient(p, true));
    results.push(hybrid_gradient(p, false));
    results.extend(simulator_invariants(p));
    results
}

/// Saltation matrices of random ball impacts against the closed form.
pub fn saltation_vs_oracle(
    params: &BouncingBallParams,
    oracle: &BouncingBallParams,
    samples: usize,
    seed: u64,
) -> CheckResult {
    const NAME: &str = "saltation matrix vs closed form";
    let sys = match bouncing_ball(params) {
        Ok(s) => s,
        Err(e) => return CheckResult::failed(NAME, e.to_string()),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let zdot = -rng.random_range(0.1..20.0);
        let u = rng.random_range(-30.0..30.0);
        let x = Vector::from_vec(vec![0.0, zdot]);
        let u = Vector::from_vec(vec![u]);
        let computed = match sys.saltation_matrix(IMPACT, 0.0, &x, &u) {
            Ok(s) => s.matrix,
            Err(e) => return CheckResult::failed(NAME, e.to_string()),
        };
        let expected = match ball_saltation_oracle(oracle, &x, &u) {
            Ok(m) => m,
            Err(e) => return CheckResult::failed(NAME, e.to_string()),
        };
        worst = worst.max(rel_err_matrix(&computed, &expected));
    }
    CheckResult::at_most(
        NAME,
        worst,
        1e-8,
        format!("max relative error over {samples} pre-impact states"),
    )
}

const PRE_IMPACT: [f64; 2] = [0.1, -1.0];
const THROUGH_IMPACT_SPAN: f64 = 0.12;

/// Flow of the ball from `x` at t = 0 over a window containing one impact.
fn through_impact(sys: &HybridSystem, x: &Vector) -> Result<Vector, String> {
    let u = Vector::zeros(1);
    let step =
        integrate_step(sys, FALLING, 0.0, x, &u, THROUGH_IMPACT_SPAN).map_err(|e| e.to_string())?;
    match step.event {
        Some(e) if e.transition == IMPACT => Ok(step.x_next),
        _ => Err("window does not contain exactly one impact".into()),
    }
}

/// `Phi_post * Xi * Phi_pre` of the through-impact flow at `x`.
fn through_impact_jacobian(sys: &HybridSystem, x: &Vector) -> Result<Matrix, String> {
    let u = Vector::zeros(1);
    let step =
        integrate_step(sys, FALLING, 0.0, x, &u, THROUGH_IMPACT_SPAN).map_err(|e| e.to_string())?;
    let event = step.event.ok_or("no impact in the window")?;
    let pre = sys
        .linearize_flow_step(FALLING, 0.0, x, &u, event.dt1)
        .map_err(|e| e.to_string())?;
    let post = sys
        .linearize_flow_step(
            event.transition.target,
            event.event_time,
            &event.x_post,
            &u,
            event.dt2,
        )
        .map_err(|e| e.to_string())?;
    Ok(post.f_x * event.saltation * pre.f_x)
}

pub fn saltation_vs_finite_differences(params: &BouncingBallParams) -> CheckResult {
    const NAME: &str = "through-impact Jacobian vs finite differences";
    let run = || -> Result<f64, String> {
        let sys = bouncing_ball(params).map_err(|e| e.to_string())?;
        let x = Vector::from_row_slice(&PRE_IMPACT);
        let analytic = through_impact_jacobian(&sys, &x)?;
        let h = 1e-6;
        let mut fd = Matrix::zeros(2, 2);
        for i in 0..2 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let col = (through_impact(&sys, &xp)? - through_impact(&sys, &xm)?) / (2.0 * h);
            fd.set_column(i, &col);
        }
        Ok(rel_err_matrix(&analytic, &fd))
    };
    match run() {
        Ok(err) => CheckResult::at_most(NAME, err, 1e-5, "max relative error, step 1e-6"),
        Err(e) => CheckResult::failed(NAME, e),
    }
}

/// Log-log slope of the first-order remainder of the through-impact flow.
pub fn remainder_slope(params: &BouncingBallParams) -> Result<f64, String> {
    let sys = bouncing_ball(params).map_err(|e| e.to_string())?;
    let x = Vector::from_row_slice(&PRE_IMPACT);
    let base = through_impact(&sys, &x)?;
    let jac = through_impact_jacobian(&sys, &x)?;
    let direction = Vector::from_vec(vec![0.6, 0.8]);
    let mut points = Vec::new();
    for delta in [1e-3, 1e-4, 1e-5] {
        let d = &direction * delta;
        let moved = through_impact(&sys, &(&x + &d))?;
        let remainder = (moved - &base - &jac * &d).norm();
        points.push((f64::log10(delta), f64::log10(remainder)));
    }
    Ok(least_squares_slope(&points))
}

pub fn least_squares_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

pub fn saltation_remainder_slope(params: &BouncingBallParams) -> CheckResult {
    const NAME: &str = "second-order remainder slope";
    match remainder_slope(params) {
        Ok(slope) => CheckResult::at_most(
            NAME,
            (slope - 2.0).abs(),
            0.2,
            format!("slope {slope:.4} over delta in 1e-3, 1e-4, 1e-5"),
        ),
        Err(e) => CheckResult::failed(NAME, e),
    }
}

/// Trajectory of `len` intervals holding `x` with zero input.
pub fn constant_reference(x: &Vector, mode: ModeId, len: usize, dt: f64, m: usize) -> Reference {
    let mut traj = HybridTrajectory::single(0.0, dt, x.clone(), mode);
    traj.states = vec![x.clone(); len + 1];
    traj.modes = vec![mode; len + 1];
    traj.inputs = vec![Vector::zeros(m); len];
    Reference::without_extensions(traj)
}

/// Backward-pass gains on a double-integrator regulator against a discrete
/// Riccati recursion, plus the iteration count of a full solve.
pub fn riccati_equivalence() -> CheckResult {
    const NAME: &str = "double integrator vs Riccati recursion";
    let run = || -> Result<(f64, usize), String> {
        let (mass, dt, n_steps) = (1.0, 0.01, 100);
        let sys = double_integrator(mass).map_err(|e| e.to_string())?;
        let q = Matrix::from_diagonal(&Vector::from_vec(vec![1.0, 0.1]));
        let r = Matrix::from_element(1, 1, 0.01);
        let qn = Matrix::from_diagonal(&Vector::from_vec(vec![10.0, 1.0]));
        let target = Arc::new(constant_reference(
            &Vector::zeros(2),
            ModeId(0),
            n_steps,
            dt,
            1,
        ));
        let cost = CostModel::tracking(target, q.clone(), r.clone(), qn.clone())
            .map_err(|e| e.to_string())?;
        let x0 = Vector::from_vec(vec![1.0, 0.0]);
        let traj = rollout(&sys, &x0, ModeId(0), &vec![Vector::zeros(1); n_steps], dt)
            .map_err(|e| e.to_string())?;
        let lins = linearize_trajectory(&sys, &traj, EventLinearization::Exact, false)
            .map_err(|e| e.to_string())?;
        let gains = backward_pass(&cost, &traj, &lins, 0.0, true).map_err(|e| e.to_string())?;

        let a = Matrix::from_row_slice(2, 2, &[1.0, dt, 0.0, 1.0]);
        let b = Matrix::from_row_slice(2, 1, &[dt * dt / (2.0 * mass), dt / mass]);
        let mut p = qn;
        let mut worst = 0.0f64;
        for k in (0..n_steps).rev() {
            let s = &r + b.transpose() * &p * &b;
            let s_inv = s.try_inverse().ok_or("singular Riccati step")?;
            let k_gain = -(&s_inv * b.transpose() * &p * &a);
            worst = worst.max(rel_err_matrix(&gains.feedback[k], &k_gain));
            p = &q + a.transpose() * &p * &a + a.transpose() * &p * &b * &k_gain;
        }
        let solution = solve(
            &sys,
            &cost,
            Initialization::Trajectory(traj),
            &SolverOptions::default(),
        )
        .map_err(|e| e.to_string())?;
        if !solution.report.converged {
            return Err("solve did not converge".into());
        }
        Ok((worst, solution.report.iterations))
    };
    match run() {
        Ok((err, iterations)) => {
            let mut c = CheckResult::at_most(
                NAME,
                err,
                1e-6,
                format!("max relative gain error; solve converged in {iterations} iterations"),
            );
            c.passed &= iterations <= 2;
            c
        }
        Err(e) => CheckResult::failed(NAME, e),
    }
}

/// Closed-loop cost with feedforward scaled by `alpha`, which may be
/// negative here for central differences.
pub fn closed_loop_cost(
    sys: &HybridSystem,
    cost: &CostModel,
    nominal: &HybridTrajectory,
    gains: &GainSchedule,
    alpha: f64,
) -> Result<f64, String> {
    let mut traj = HybridTrajectory::single(
        nominal.t0,
        nominal.dt,
        nominal.states[0].clone(),
        nominal.modes[0],
    );
    for k in 0..nominal.len() {
        let x = &traj.states[k];
        let u = &nominal.inputs[k]
            + &gains.feedforward[k] * alpha
            + &gains.feedback[k] * (x - &nominal.states[k]);
        let step = integrate_step(sys, traj.modes[k], traj.time(k), x, &u, nominal.dt)
            .map_err(|e| e.to_string())?;
        traj.inputs.push(u);
        traj.states.push(step.x_next);
        traj.modes.push(step.mode_next);
        if let Some(e) = step.event {
            traj.events.push((k, e));
        }
    }
    cost.total(&traj).map_err(|e| e.to_string())
}

/// Ball trajectory with exactly one impact, a tracking cost and a gain
/// schedule computed on it.
pub fn gradient_problem(
    params: &BouncingBallParams,
    use_saltation: bool,
) -> Result<(HybridSystem, CostModel, HybridTrajectory, GainSchedule), String> {
    let sys = bouncing_ball(params).map_err(|e| e.to_string())?;
    let (dt, n_steps) = (0.001, 600);
    let inputs: Vec<Vector> = (0..n_steps)
        .map(|k| Vector::from_vec(vec![2.0 * (k as f64 * 0.01).sin()]))
        .collect();
    let x0 = Vector::from_vec(vec![1.0, -0.1]);
    let traj = rollout(&sys, &x0, FALLING, &inputs, dt).map_err(|e| e.to_string())?;
    let target = Arc::new(constant_reference(
        &Vector::from_vec(vec![0.5, 0.0]),
        crate::systems::RISING,
        n_steps,
        dt,
        1,
    ));
    let cost = CostModel::tracking(
        target,
        Matrix::from_diagonal(&Vector::from_vec(vec![1.0, 0.1])),
        Matrix::from_element(1, 1, 1e-2),
        Matrix::from_diagonal(&Vector::from_vec(vec![10.0, 1.0])),
    )
    .map_err(|e| e.to_string())?
    .with_mode_matching(false);
    let lins = linearize_trajectory(&sys, &traj, EventLinearization::Exact, true)
        .map_err(|e| e.to_string())?;
    let gains =
        backward_pass(&cost, &traj, &lins, 1e-9, use_saltation).map_err(|e| e.to_string())?;
    Ok((sys, cost, traj, gains))
}

/// Relative mismatch between the predicted linear cost change and a central
/// difference of the closed-loop cost.
pub fn gradient_mismatch(params: &BouncingBallParams, use_saltation: bool) -> Result<f64, String> {
    let (sys, cost, traj, gains) = gradient_problem(params, use_saltation)?;
    let impacts = traj
        .events
        .iter()
        .filter(|(_, e)| e.transition == IMPACT)
        .count();
    if impacts != 1 || traj.events.len() != 1 {
        return Err(format!(
            "expected exactly one impact, found {} events",
            traj.events.len()
        ));
    }
    let h = 1e-4;
    let plus = closed_loop_cost(&sys, &cost, &traj, &gains, h)?;
    let minus = closed_loop_cost(&sys, &cost, &traj, &gains, -h)?;
    let fd = (plus - minus) / (2.0 * h);
    Ok((fd - gains.dj_linear).abs() / gains.dj_linear.abs().max(f64::MIN_POSITIVE))
}

pub fn hybrid_gradient(params: &BouncingBallParams, use_saltation: bool) -> CheckResult {
    let name = if use_saltation {
        "gradient through one impact"
    } else {
        "gradient without saltation is detected as wrong"
    };
    match gradient_mismatch(params, use_saltation) {
        Ok(err) if use_saltation => {
            CheckResult::at_most(name, err, 1e-4, "relative error of the linear term")
        }
        Ok(err) => CheckResult {
            name: name.to_string(),
            passed: err > 1e-4,
            measured: err,
            tolerance: 1e-4,
            detail: "relative error must exceed the tolerance".into(),
        },
        Err(e) => CheckResult::failed(name, e),
    }
}

/// Impact speed, restitution, guard residual and energy checks on an
/// unforced drop from 4 m.
pub fn simulator_invariants(params: &BouncingBallParams) -> Vec<CheckResult> {
    let run = || -> Result<Vec<CheckResult>, String> {
        let sys = bouncing_ball(params).map_err(|e| e.to_string())?;
        let (dt, n_steps, h) = (0.001, 3000, 4.0);
        let x0 = Vector::from_vec(vec![h, -0.0]);
        let x0_mode = FALLING;
        let traj = rollout(&sys, &x0, x0_mode, &vec![Vector::zeros(1); n_steps], dt)
            .map_err(|e| e.to_string())?;
        let impacts: Vec<_> = traj
            .events
            .iter()
            .filter(|(_, e)| e.transition == IMPACT)
            .map(|(_, e)| e)
            .collect();
        let first = impacts.first().ok_or("no impact")?;
        let expected_speed = (2.0 * params.gravity * h).sqrt();
        let speed_err = (first.x_pre[1].abs() - expected_speed).abs() / expected_speed;

        let ratio_err = impacts
            .iter()
            .map(|e| (e.x_post[1] / e.x_pre[1] + params.restitution).abs())
            .fold(0.0, f64::max);

        let mut residual = 0.0f64;
        for (_, e) in &traj.events {
            let g = sys
                .eval_guard(e.transition, e.event_time, &e.x_pre)
                .map_err(|e| e.to_string())?;
            residual = residual.max(g.abs());
        }

        let energy =
            |x: &Vector| 0.5 * params.mass * x[1] * x[1] + params.mass * params.gravity * x[0];
        let mut increase = 0.0f64;
        for e in &impacts {
            increase = increase.max(energy(&e.x_post) - energy(&e.x_pre));
        }
        Ok(vec![
            CheckResult::at_most(
                "impact speed of a 4 m drop",
                speed_err,
                1e-8,
                "relative error against sqrt(2 g h)",
            ),
            CheckResult::at_most(
                "restitution ratio",
                ratio_err,
                1e-9,
                format!("{} impacts", impacts.len()),
            ),
            CheckResult::at_most(
                "guard residual at events",
                residual,
                1e-10,
                format!("{} events", traj.events.len()),
            ),
            CheckResult::at_most(
                "energy gain across impacts",
                increase.max(0.0),
                0.0,
                "largest increase in mechanical energy",
            ),
        ])
    };
    run().unwrap_or_else(|e| vec![CheckResult::failed("simulator invariants", e)])
}
