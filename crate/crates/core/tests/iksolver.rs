use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use touchhand::decode::{HandJoints, JointSet};
use touchhand::handmodel::{fk_flat, HandPose, HandTemplate, ARTICULATION_START, POSE_DOF};
use touchhand::iksolver::{solve, Constraint, IkConfig, IkProblem, TrackerSession};
use touchhand::skeleton::{Hand, FINGERTIPS, JOINTS};

fn joints_of(pose: &HandPose, tmpl: &HandTemplate) -> [[f64; 3]; JOINTS] {
    let f = fk_flat(pose, tmpl);
    std::array::from_fn(|k| [f[3 * k], f[3 * k + 1], f[3 * k + 2]])
}

/// Random pose within limits with every joint at least 5 mm up.
fn feasible_pose(rng: &mut ChaCha8Rng, tmpl: &HandTemplate, hand: Hand) -> HandPose {
    let mut p = HandPose::neutral(hand);
    p.theta[0] = rng.random_range(80.0..260.0);
    p.theta[1] = rng.random_range(150.0..190.0);
    for i in 3..6 {
        p.theta[i] = rng.random_range(-0.5..0.5);
    }
    for i in ARTICULATION_START..POSE_DOF {
        p.theta[i] = rng.random_range(tmpl.theta_min[i]..=tmpl.theta_max[i]);
    }
    let low = joints_of(&p, tmpl).iter().map(|j| j[2]).fold(f64::INFINITY, f64::min);
    p.theta[2] += 5.0 - low + rng.random_range(0.0..30.0);
    p
}

fn epe(a: &[[f64; 3]; JOINTS], b: &[[f64; 3]; JOINTS]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(p, q)| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt())
        .sum::<f64>()
        / JOINTS as f64
}

fn assert_feasible(pose: &HandPose, tmpl: &HandTemplate) {
    for i in ARTICULATION_START..POSE_DOF {
        assert!(pose.theta[i] >= tmpl.theta_min[i] - 1e-9 && pose.theta[i] <= tmpl.theta_max[i] + 1e-9);
    }
    for j in joints_of(pose, tmpl) {
        assert!(j[2] >= 5.0 - 1e-6, "joint at z = {}", j[2]);
    }
}

#[test]
fn recovers_random_feasible_poses_from_neutral() {
    let tmpl = HandTemplate::builtin();
    let cfg = IkConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut errors = Vec::new();
    for i in 0..100 {
        let hand = if i % 2 == 0 { Hand::Right } else { Hand::Left };
        let truth = feasible_pose(&mut rng, &tmpl, hand);
        let targets = joints_of(&truth, &tmpl);
        let problem = IkProblem::new(targets, HandPose::neutral(hand), &[], &cfg);
        let sol = solve(&problem, &tmpl, &cfg).unwrap();
        assert_feasible(&sol.pose, &tmpl);
        errors.push(epe(&sol.joints(&tmpl), &targets));
    }
    errors.sort_by(f64::total_cmp);
    let median = errors[49];
    let p95 = errors[94];
    assert!(median < 0.5, "median {median}");
    assert!(p95 < 2.0, "p95 {p95}");
    assert!(errors.iter().filter(|e| **e < 1.0).count() >= 95);
}

#[test]
fn fingertip_below_screen_stops_at_min_height() {
    let tmpl = HandTemplate::builtin();
    let cfg = IkConfig::default();
    // flat hand hovering 12 mm up, index slightly bent
    let mut truth = HandPose::neutral(Hand::Right);
    truth.theta[..3].copy_from_slice(&[150.0, 170.0, 12.0]);
    truth.theta[8] = 0.15;
    let mut targets = joints_of(&truth, &tmpl);
    targets[FINGERTIPS[1]][2] = -20.0;
    let problem = IkProblem::new(targets, truth, &[], &cfg);
    let sol = solve(&problem, &tmpl, &cfg).unwrap();
    let got = sol.joints(&tmpl);
    assert!((got[FINGERTIPS[1]][2] - 5.0).abs() < 1e-6, "{}", got[FINGERTIPS[1]][2]);
    assert!(sol.active.contains(&Constraint::Height(FINGERTIPS[1])));
    let others: f64 = (0..JOINTS)
        .filter(|k| !(5..=8).contains(k))
        .map(|k| (0..3).map(|a| (got[k][a] - targets[k][a]).powi(2)).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    assert!(others < 3.0, "{others}");
    assert_feasible(&sol.pose, &tmpl);
}

#[test]
fn warm_start_at_solution_is_a_fixed_point() {
    let tmpl = HandTemplate::builtin();
    let cfg = IkConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let prev = feasible_pose(&mut rng, &tmpl, Hand::Left);
    let problem = IkProblem::new(joints_of(&prev, &tmpl), prev, &[], &cfg);
    let sol = solve(&problem, &tmpl, &cfg).unwrap();
    assert!(sol.converged);
    assert!(sol.iterations <= 2);
    assert!(sol.residual < 1e-6);
}

#[test]
fn objective_never_increases_across_iterations() {
    let tmpl = HandTemplate::builtin();
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let truth = feasible_pose(&mut rng, &tmpl, Hand::Right);
    let mut targets = joints_of(&truth, &tmpl);
    targets[4][2] -= 15.0;
    let mut last = f64::INFINITY;
    for k in 1..=30 {
        let cfg = IkConfig { max_iterations: k, ..IkConfig::default() };
        let problem = IkProblem::new(targets, HandPose::neutral(Hand::Right), &[0], &cfg);
        let r = solve(&problem, &tmpl, &cfg).unwrap().residual;
        assert!(r <= last + 1e-12, "iteration {k}: {r} > {last}");
        last = r;
    }
}

#[test]
fn shape_locks_after_twenty_all_touch_frames() {
    let tmpl = HandTemplate::builtin();
    let mut session = TrackerSession::new(IkConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let mut truth = feasible_pose(&mut rng, &tmpl, Hand::Right);
    truth.beta = [0.8, 0.0, 0.3, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
    let mut js = JointSet::empty(0);
    js.hands[1] = Some(HandJoints::from_joints(joints_of(&truth, &tmpl)));
    let all: BTreeSet<_> = (0..5).map(|f| (Hand::Right, f)).collect();
    for i in 0..19 {
        session.track_frame(&js, &all, &tmpl).unwrap();
        assert_eq!(session.calibration_frames, i + 1);
        assert!(!session.beta_locked);
    }
    let moved = session.beta;
    assert!(moved[0] > 0.3, "{moved:?}");
    session.track_frame(&js, &all, &tmpl).unwrap();
    assert_eq!(session.calibration_frames, 20);
    assert!(session.beta_locked);
    let locked = session.beta;
    for _ in 0..3 {
        let sols = session.track_frame(&js, &all, &tmpl).unwrap();
        assert_eq!(sols[1].as_ref().unwrap().pose.beta, locked);
    }
    assert!(session.beta_locked);
    assert_eq!(session.calibration_frames, 20);
}

#[test]
fn partial_touch_does_not_calibrate() {
    let tmpl = HandTemplate::builtin();
    let mut session = TrackerSession::new(IkConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    let truth = feasible_pose(&mut rng, &tmpl, Hand::Left);
    let mut js = JointSet::empty(0);
    js.hands[0] = Some(HandJoints::from_joints(joints_of(&truth, &tmpl)));
    let four: BTreeSet<_> = (0..4).map(|f| (Hand::Left, f)).collect();
    let sols = session.track_frame(&js, &four, &tmpl).unwrap();
    assert_eq!(session.calibration_frames, 0);
    assert_eq!(sols[0].as_ref().unwrap().pose.beta, [0.0; 10]);
}

#[test]
fn missing_hand_resets_after_grace() {
    let tmpl = HandTemplate::builtin();
    let mut session = TrackerSession::new(IkConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(27);
    let truth = feasible_pose(&mut rng, &tmpl, Hand::Right);
    let mut seen = JointSet::empty(0);
    seen.hands[1] = Some(HandJoints::from_joints(joints_of(&truth, &tmpl)));
    let none = BTreeSet::new();
    session.track_frame(&seen, &none, &tmpl).unwrap();
    for _ in 0..5 {
        session.track_frame(&JointSet::empty(0), &none, &tmpl).unwrap();
    }
    assert!(session.previous(Hand::Right).is_some());
    session.track_frame(&JointSet::empty(0), &none, &tmpl).unwrap();
    assert!(session.previous(Hand::Right).is_none());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn solutions_are_feasible_and_deterministic(seed in any::<u64>(), push in -40.0..0.0f64) {
        let tmpl = HandTemplate::builtin();
        let cfg = IkConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth = feasible_pose(&mut rng, &tmpl, if seed % 2 == 0 { Hand::Left } else { Hand::Right });
        let mut targets = joints_of(&truth, &tmpl);
        for t in targets.iter_mut() {
            for v in t.iter_mut() {
                *v += rng.random_range(-6.0..6.0);
            }
        }
        targets[FINGERTIPS[rng.random_range(0..5)]][2] = push;
        let problem = IkProblem::new(targets, HandPose::neutral(truth.hand), &[2], &cfg);
        let a = solve(&problem, &tmpl, &cfg).unwrap();
        let b = solve(&problem, &tmpl, &cfg).unwrap();
        prop_assert_eq!(&a, &b);
        for i in ARTICULATION_START..POSE_DOF {
            prop_assert!(a.pose.theta[i] >= tmpl.theta_min[i] - 1e-9);
            prop_assert!(a.pose.theta[i] <= tmpl.theta_max[i] + 1e-9);
        }
        for j in joints_of(&a.pose, &tmpl) {
            prop_assert!(j[2] >= 5.0 - 1e-6);
        }
    }
}
