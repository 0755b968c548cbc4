use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use touchhand::frames::{preprocess, ScreenGeometry, GRID_COLS};
use touchhand::handmodel::{HandTemplate, ARTICULATION_START, POSE_DOF};
use touchhand::mvs::{reconstruct_frame, CameraRig, FilterConfig};
use touchhand::skeleton::{bone, Hand, BONES, FINGERTIPS, JOINTS};
use touchhand::synth::{
    generate_dataset, generate_trajectory, load_index, load_sequence, load_truth_poses, simulate_cameras,
    simulate_capacitance, Corruption, Gesture, HandsInvolved, SynthConfig, SynthScenario, CAMERA_SUBSTEPS,
};

#[test]
fn trajectories_are_deterministic_and_within_limits() {
    let tmpl = HandTemplate::builtin();
    for g in Gesture::ALL {
        let sc = SynthScenario::new(5, g, HandsInvolved::Both, 60);
        let a = generate_trajectory(&sc, &tmpl);
        assert_eq!(a, generate_trajectory(&sc, &tmpl));
        assert_eq!(a.len(), 60 * CAMERA_SUBSTEPS);
        for f in &a {
            for p in f.poses.iter().flatten() {
                for i in ARTICULATION_START..POSE_DOF {
                    assert!(p.theta[i] >= tmpl.theta_min[i] && p.theta[i] <= tmpl.theta_max[i]);
                }
            }
            for hj in f.joints.hands.iter().flatten() {
                assert!(hj.joints.iter().all(|j| j[2] >= 2.0 - 1e-9));
            }
        }
    }
}

#[test]
fn trajectories_have_bounded_velocity() {
    let tmpl = HandTemplate::builtin();
    let sc = SynthScenario::new(6, Gesture::Free, HandsInvolved::Right, 150);
    let t = generate_trajectory(&sc, &tmpl);
    let worst = t
        .windows(2)
        .map(|w| {
            let (a, b) = (&w[0].joints.hands[1].as_ref().unwrap().joints, &w[1].joints.hands[1].as_ref().unwrap().joints);
            (0..JOINTS)
                .map(|k| (0..3).map(|c| (a[k][c] - b[k][c]).powi(2)).sum::<f64>().sqrt())
                .fold(0.0, f64::max)
        })
        .fold(0.0, f64::max);
    // mm per 33 ms camera frame
    assert!(worst < 25.0, "{worst}");
}

#[test]
fn palm_keeps_fingertips_on_the_screen() {
    let tmpl = HandTemplate::builtin();
    let sc = SynthScenario::new(7, Gesture::Palm, HandsInvolved::Left, 150);
    let t = generate_trajectory(&sc, &tmpl);
    let flat = t
        .iter()
        .filter(|f| {
            let hj = f.joints.hand(Hand::Left).unwrap();
            FINGERTIPS.iter().all(|&k| hj.joints[k][2] <= 5.0)
        })
        .count();
    assert!(flat as f64 >= 0.9 * t.len() as f64, "{flat}/{}", t.len());
}

#[test]
fn ground_truth_bones_follow_the_shape() {
    let tmpl = HandTemplate::builtin();
    let mut sc = SynthScenario::new(8, Gesture::Writing, HandsInvolved::Right, 20);
    sc.beta[0] = 0.7;
    sc.beta[3] = -0.4;
    let lengths = tmpl.bone_lengths(&sc.beta);
    for f in generate_trajectory(&sc, &tmpl) {
        let j = f.joints.hand(Hand::Right).unwrap().joints;
        for b in 0..BONES {
            let (p, c) = bone(b);
            let d = (0..3).map(|a| (j[p][a] - j[c][a]).powi(2)).sum::<f64>().sqrt();
            assert!((d - lengths[b]).abs() < 1e-9);
        }
    }
}

#[test]
fn palm_contact_shows_up_where_the_hand_is() {
    let tmpl = HandTemplate::builtin();
    let geom = ScreenGeometry::default();
    let sc = SynthScenario::new(9, Gesture::Palm, HandsInvolved::Right, 30);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut checked = 0;
    for f in generate_trajectory(&sc, &tmpl).iter().step_by(3 * CAMERA_SUBSTEPS) {
        // footprint of the bone capsules on the screen plane, 1 mm grid
        let j = f.joints.hand(Hand::Right).unwrap().joints;
        let (mut cx, mut cy, mut area) = (0.0, 0.0, 0.0);
        for yi in 0..195 {
            for xi in 0..345 {
                let p = [xi as f64 + 0.5, yi as f64 + 0.5, 0.0];
                let inside = (0..BONES).any(|b| {
                    let (a, c) = bone(b);
                    let ab: Vec<f64> = (0..3).map(|k| j[c][k] - j[a][k]).collect();
                    let ap: Vec<f64> = (0..3).map(|k| p[k] - j[a][k]).collect();
                    let t = (ab.iter().zip(&ap).map(|(u, v)| u * v).sum::<f64>()
                        / ab.iter().map(|u| u * u).sum::<f64>())
                    .clamp(0.0, 1.0);
                    let d2: f64 = (0..3).map(|k| (ap[k] - t * ab[k]).powi(2)).sum();
                    d2 < tmpl.bone_radii[b].powi(2)
                });
                if inside {
                    cx += p[0];
                    cy += p[1];
                    area += 1.0;
                }
            }
        }
        if area < 1000.0 {
            continue;
        }
        let (cx, cy) = (cx / area, cy / area);
        let cap = simulate_capacitance(&f.poses, &tmpl, &geom, 1.5, 0, &mut rng);
        let norm = preprocess(&cap).unwrap();
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
        for (i, &v) in norm.values.iter().enumerate() {
            if v > 0.0 {
                let (x, y) = geom.pixel_to_mm((i % GRID_COLS) as f64, (i / GRID_COLS) as f64);
                sx += x;
                sy += y;
                n += 1.0;
            }
        }
        assert!(n > 0.0);
        let d = ((sx / n - cx).powi(2) + (sy / n - cy).powi(2)).sqrt();
        assert!(d < 15.0, "centroid off by {d} mm");
        checked += 1;
    }
    assert!(checked >= 8, "{checked}");
}

#[test]
fn noiseless_cameras_triangulate_exactly_and_flips_are_dropped() {
    let tmpl = HandTemplate::builtin();
    let rig = CameraRig::desk_default();
    let sc = SynthScenario::new(10, Gesture::Fingers, HandsInvolved::Both, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (i, f) in generate_trajectory(&sc, &tmpl).iter().enumerate() {
        let corrupt = [Corruption::FlipHandedness { camera: i % 9 }];
        let obs = simulate_cameras(&f.joints, i, &rig, 0.0, &corrupt, &mut rng);
        let out = reconstruct_frame(&obs, &rig, &FilterConfig::default());
        for h in Hand::BOTH {
            let got = out[h.index()].as_ref().expect("hand reconstructed");
            assert_eq!(got.views, 8);
            let want = &f.joints.hand(h).unwrap().joints;
            for k in 0..JOINTS {
                let e = (0..3).map(|a| (got.joints[k][a] - want[k][a]).powi(2)).sum::<f64>().sqrt();
                assert!(e < 1e-6, "{e}");
            }
        }
    }
}

#[test]
fn dataset_files_round_trip_and_repeat_exactly() {
    let tmpl = HandTemplate::builtin();
    let geom = ScreenGeometry::default();
    let rig = CameraRig::desk_default();
    let cfg = SynthConfig { sequences: 5, frames: 6, ..SynthConfig::default() };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let index = generate_dataset(&cfg, &tmpl, &geom, &rig, a.path()).unwrap();
    generate_dataset(&cfg, &tmpl, &geom, &rig, b.path()).unwrap();
    assert_eq!(load_index(a.path()).unwrap(), index);
    let gestures: std::collections::BTreeSet<_> = index.sequences.iter().map(|s| s.gesture).collect();
    assert_eq!(gestures.len(), 5);
    for entry in std::fs::read_dir(a.path()).unwrap() {
        let name = entry.unwrap().file_name();
        let x = std::fs::read(a.path().join(&name)).unwrap();
        let y = std::fs::read(b.path().join(&name)).unwrap();
        assert!(x == y, "{name:?} differs");
    }
    let seq = load_sequence(a.path(), &index.sequences[2], &geom).unwrap();
    assert_eq!(seq.frames.len(), 6);
    assert_eq!(seq.truth[0].present(), [true, true]);
    let poses = load_truth_poses(&a.path().join(&index.sequences[2].truth)).unwrap();
    assert_eq!(poses.len(), 6);
    assert_eq!(poses[0][0].unwrap().beta, index.sequences[2].beta);
}
