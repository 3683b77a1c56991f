mod common;

use approx::assert_relative_eq;
use common::*;
use hilqr::hybrid::{HybridSystem, Vector};
use hilqr::io::{read_trajectory, write_events_json, write_trajectory_csv};
use hilqr::simulator::*;
use hilqr::solver::GainSchedule;
use hilqr::systems::*;
use proptest::prelude::*;

fn ball() -> HybridSystem {
    bouncing_ball(&BouncingBallParams::default()).unwrap()
}

fn zero_inputs(n: usize) -> Vec<Vector> {
    vec![v(&[0.0]); n]
}

#[test]
fn first_millisecond_of_a_drop() {
    let step = integrate_step(&ball(), FALLING, 0.0, &v(&[4.0, 0.0]), &v(&[0.0]), 1e-3).unwrap();
    assert!(step.event.is_none());
    assert_eq!(step.mode_next, FALLING);
    let [z, zd] = ballistic(4.0, 0.0, -G, 1e-3);
    assert_relative_eq!(step.x_next[0], z, max_relative = 1e-14);
    assert_relative_eq!(step.x_next[1], zd, max_relative = 1e-12);
    assert_relative_eq!(z, 3.999995095, max_relative = 1e-12);
}

#[test]
fn drop_from_four_meters() {
    let sys = ball();
    let traj = rollout(&sys, &v(&[4.0, 0.0]), FALLING, &zero_inputs(1000), 1e-3).unwrap();
    assert_eq!(traj.states.len(), 1001);
    let impacts: Vec<_> = traj
        .events
        .iter()
        .filter(|(_, e)| e.transition == IMPACT)
        .collect();
    assert_eq!(impacts.len(), 1);
    let (knot, e) = impacts[0];
    let t_star = fall_time(4.0, 0.0, -G);
    assert_relative_eq!(t_star, 0.903047, epsilon = 1e-6);
    assert_eq!(*knot, 903);
    assert_relative_eq!(e.event_time, t_star, epsilon = 1e-12);
    assert!(e.x_pre[0].abs() <= 1e-10);
    assert_relative_eq!(e.x_pre[1], -(2.0 * G * 4.0).sqrt(), max_relative = 1e-10);
    assert_eq!(e.x_post[1], -E * e.x_pre[1]);
    // The rebound apex is at about 1.63 s, past the end of the rollout.
    assert_eq!(traj.events.len(), 1);
    assert_eq!(traj.final_mode(), RISING);
}

#[test]
fn resting_start_labels_an_apex_at_the_first_knot() {
    let sys = ball();
    let x0 = v(&[4.0, 0.0]);
    assert_eq!(ball_mode(&x0), RISING);
    let traj = rollout(&sys, &x0, ball_mode(&x0), &zero_inputs(1000), 1e-3).unwrap();
    assert_eq!(traj.events.len(), 2);
    assert_eq!(traj.events[0].0, 0);
    assert_eq!(traj.events[0].1.transition, APEX);
    assert_eq!(traj.events[1].0, 903);
}

#[test]
fn step_just_above_the_ground() {
    let sys = ball();
    let t_star = fall_time(4.0, 0.0, -G);
    let t0 = t_star - 5e-4;
    let x0 = v(&ballistic(4.0, 0.0, -G, t0));
    let step = integrate_step(&sys, FALLING, t0, &x0, &v(&[0.0]), 1e-3).unwrap();
    let e = step.event.unwrap();
    assert_relative_eq!(e.event_time, t_star, epsilon = 1e-12);
    assert!(e.x_pre[0].abs() <= 1e-10);
    assert_eq!(e.x_post[1], -0.8 * e.x_pre[1]);
    let [z, zd] = ballistic(e.x_post[0], e.x_post[1], -G, 5e-4);
    assert_relative_eq!(step.x_next[0], z, epsilon = 1e-12);
    assert_relative_eq!(step.x_next[1], zd, epsilon = 1e-12);
}

#[test]
fn locating_the_touchdown() {
    let sys = ball();
    let (t, x) = locate_event(
        &sys,
        IMPACT,
        FALLING,
        0.9,
        &v(&ballistic(4.0, 0.0, -G, 0.9)),
        &v(&[0.0]),
        0.01,
    )
    .unwrap();
    assert_relative_eq!(t, fall_time(4.0, 0.0, -G), epsilon = 1e-12);
    assert!(x[0].abs() <= 1e-10);
    let err = locate_event(
        &sys,
        IMPACT,
        FALLING,
        0.0,
        &v(&[0.0, -1.0]),
        &v(&[0.0]),
        0.01,
    );
    assert!(matches!(err, Err(SimError::GuardNotPositive { .. })));
}

#[test]
fn linear_crossing_converges_quickly() {
    let (t, iterations) = find_crossing(|t| 0.25 - t, 0.0, 1.0, EVENT_TOLERANCE).unwrap();
    assert!((t - 0.25).abs() < 1e-12);
    assert!(iterations <= 60);
}

#[test]
fn empty_and_hover_rollouts() {
    let sys = ball();
    let traj = rollout(&sys, &v(&[4.0, 0.0]), RISING, &[], 1e-3).unwrap();
    assert_eq!(traj.states.len(), 1);
    assert!(traj.events.is_empty());
    let hover = rollout(&sys, &v(&[4.0, 0.0]), RISING, &vec![v(&[9.81]); 1000], 1e-3).unwrap();
    assert!(hover.events.is_empty());
    assert!(hover.states.iter().all(|x| x[0] == 4.0));
}

#[test]
fn closed_loop_at_alpha_zero_reproduces_the_nominal() {
    let sys = ball();
    let inputs: Vec<Vector> = (0..800).map(|k| v(&[(k as f64 * 0.02).cos()])).collect();
    let traj = rollout(&sys, &v(&[2.0, 1.0]), RISING, &inputs, 1e-3).unwrap();
    assert!(traj.events.iter().any(|(_, e)| e.transition == IMPACT));
    let reference = Reference::new(traj.clone(), build_extensions(&sys, &traj, 80).unwrap());
    let mut gains = GainSchedule::zeros(800, 2, 1);
    for k in gains.feedback.iter_mut() {
        k[(0, 0)] = -3.0;
        k[(0, 1)] = -0.5;
    }
    let again =
        closed_loop_rollout(&sys, &reference, &gains, 0.0, &v(&[2.0, 1.0]), RISING).unwrap();
    for (a, b) in again.states.iter().zip(&traj.states) {
        assert!((a - b).amax() <= 1e-9);
    }
    assert_eq!(again.modes, traj.modes);
}

#[test]
fn extensions_follow_the_ballistic_closed_forms() {
    let sys = ball();
    let traj = rollout(&sys, &v(&[1.0, 0.0]), FALLING, &zero_inputs(700), 1e-3).unwrap();
    let ext = build_extensions(&sys, &traj, 30).unwrap();
    assert_eq!(ext.len(), 1);
    let e = &ext[0];
    for (i, x) in e.pre_states.iter().enumerate() {
        let dt = traj.time(e.knot + 1 + i) - e.event_time;
        let expected = ballistic(e.x_pre[0], e.x_pre[1], -G, dt);
        assert_relative_eq!(x[0], expected[0], epsilon = 1e-12);
        assert_relative_eq!(x[1], expected[1], epsilon = 1e-12);
        assert!(x[0] < 0.0);
    }
    for (i, x) in e.post_states.iter().enumerate() {
        let dt = traj.time(e.knot - i) - e.event_time;
        let expected = ballistic(e.x_post[0], e.x_post[1], -G, dt);
        assert_relative_eq!(x[0], expected[0], epsilon = 1e-12);
        assert_relative_eq!(x[1], expected[1], epsilon = 1e-12);
        assert!(x[0] < 0.0);
    }

    assert!(build_extensions(
        &sys,
        &rollout(&sys, &v(&[4.0, 0.0]), RISING, &vec![v(&[9.81]); 10], 1e-3).unwrap(),
        30
    )
    .unwrap()
    .is_empty());
    let empty = build_extensions(&sys, &traj, 0).unwrap();
    assert!(empty[0].pre_states.is_empty() && empty[0].post_states.is_empty());
}

#[test]
fn early_impact_tracks_the_post_extension() {
    let sys = ball();
    let traj = rollout(&sys, &v(&[1.0, 0.0]), FALLING, &zero_inputs(700), 1e-3).unwrap();
    let reference = Reference::new(traj.clone(), build_extensions(&sys, &traj, 70).unwrap());
    let knot = reference.extensions[0].knot;
    // A plan that bounced 10 knots early is RISING where the nominal falls.
    let target = reference
        .target(knot - 10, RISING, MismatchPolicy::default())
        .unwrap();
    assert_eq!(target.mode, RISING);
    assert_eq!(target.x, &reference.extensions[0].post_states[10]);
}

#[test]
fn files_round_trip_bit_for_bit() {
    let sys = ball();
    let inputs: Vec<Vector> = (0..1000)
        .map(|k| v(&[0.3 * (k as f64 * 0.013).sin()]))
        .collect();
    let traj = rollout(&sys, &v(&[4.0, 0.0]), FALLING, &inputs, 1e-3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (csv, json) = (dir.path().join("t.csv"), dir.path().join("e.json"));
    write_trajectory_csv(&csv, &traj).unwrap();
    write_events_json(&json, &traj).unwrap();
    let back = read_trajectory(&csv, &json, &sys, None).unwrap();
    assert_eq!(back.states, traj.states);
    assert_eq!(back.inputs, traj.inputs);
    assert_eq!(back.modes, traj.modes);
    assert_eq!(back.events, traj.events);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn impact_time_matches_the_quadratic(z0 in 0.05f64..5.0, zd0 in -5.0f64..5.0, u in -5.0f64..5.0) {
        let sys = ball();
        let a = u - G;
        let t_star = fall_time(z0, zd0, a);
        prop_assume!(t_star > 1e-3 && t_star < 2.0);
        let mode = if zd0 > 0.0 { RISING } else { FALLING };
        let steps = (t_star / 1e-3).ceil() as usize + 1;
        let traj = rollout(&sys, &v(&[z0, zd0]), mode, &vec![v(&[u]); steps], 1e-3).unwrap();
        let impact = traj.events.iter().find(|(_, e)| e.transition == IMPACT).unwrap();
        prop_assert!((impact.1.event_time - t_star).abs() <= 1e-10);
        prop_assert!(impact.1.x_pre[0].abs() <= 1e-10);
    }

    #[test]
    fn energy_never_grows_at_impacts(z0 in 0.1f64..5.0, zd0 in -5.0f64..5.0) {
        let sys = ball();
        let (mut x, mut mode) = (v(&[z0, zd0]), if zd0 > 0.0 { RISING } else { FALLING });
        let energy = |x: &Vector| 0.5 * x[1] * x[1] + G * x[0];
        let mut impacts = 0;
        for k in 0..3000 {
            // Bounces eventually become shorter than one interval; stop there.
            let step = match integrate_step(&sys, mode, k as f64 * 1e-3, &x, &v(&[0.0]), 1e-3) {
                Ok(step) => step,
                Err(SimError::DoubleEvent { .. }) => break,
                Err(e) => panic!("{e}"),
            };
            if let Some(e) = &step.event {
                prop_assert!(energy(&e.x_post) <= energy(&e.x_pre) + 1e-12);
                impacts += usize::from(e.transition == IMPACT);
            }
            x = step.x_next;
            mode = step.mode_next;
        }
        prop_assert!(impacts >= 1);
    }
}
