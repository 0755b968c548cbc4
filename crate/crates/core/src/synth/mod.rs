//! Synthetic scenes: hand-pose trajectories, capacitive frames and 2D
//! camera detections generated from them. Everything is a pure function of
//! the scenario seed.

mod dataset;

pub use dataset::{
    generate_dataset, load_index, load_sequence, load_truth_poses, DatasetIndex, SequenceEntry, SynthConfig, INDEX_FILE,
    RIG_FILE,
};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::decode::{HandJoints, JointSet};
use crate::frames::{CapFrame, ScreenGeometry, SENSOR_COLS, SENSOR_ROWS};
use crate::handmodel::{fk, HandPose, HandTemplate, ARTICULATION_START, POSE_DOF, SHAPE_DOF};
use crate::mvs::{CameraRig, ObservedHand2D};
use crate::skeleton::{bone, Hand, BONES, HANDS, JOINTS};

/// Camera frames per capacitive frame (30 fps against 15 fps).
pub const CAMERA_SUBSTEPS: usize = 2;
pub const CAP_FPS: f64 = 15.0;
/// Lowest joint height the generator allows (mm).
pub const CONTACT_HEIGHT: f64 = 2.0;
/// Falloff length of the capacitance model (mm).
pub const FALLOFF_MM: f64 = 3.0;
pub const BASELINE: f64 = 128.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gesture {
    Palm,
    Fingers,
    Knuckles,
    Writing,
    Free,
}

impl Gesture {
    pub const ALL: [Gesture; 5] = [Gesture::Palm, Gesture::Fingers, Gesture::Knuckles, Gesture::Writing, Gesture::Free];

    pub fn as_str(self) -> &'static str {
        match self {
            Gesture::Palm => "palm",
            Gesture::Fingers => "fingers",
            Gesture::Knuckles => "knuckles",
            Gesture::Writing => "writing",
            Gesture::Free => "free",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HandsInvolved {
    Left,
    Right,
    Both,
}

impl HandsInvolved {
    pub fn includes(self, h: Hand) -> bool {
        matches!((self, h), (HandsInvolved::Both, _) | (HandsInvolved::Left, Hand::Left) | (HandsInvolved::Right, Hand::Right))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthScenario {
    pub seed: u64,
    pub gesture: Gesture,
    pub hands: HandsInvolved,
    /// Capacitive frames; the camera stream has `CAMERA_SUBSTEPS` times more.
    pub frames: usize,
    /// Standard deviation of raw capacitance noise (sensor units).
    pub cap_noise: f64,
    /// Standard deviation of 2D detection noise (pixels).
    pub pixel_noise: f64,
    pub beta: [f64; SHAPE_DOF],
}

impl SynthScenario {
    pub fn new(seed: u64, gesture: Gesture, hands: HandsInvolved, frames: usize) -> Self {
        SynthScenario { seed, gesture, hands, frames, cap_noise: 1.5, pixel_noise: 0.5, beta: [0.0; SHAPE_DOF] }
    }
}

/// One camera-rate sample of a trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryFrame {
    pub time_ms: f64,
    pub poses: [Option<HandPose>; HANDS],
    pub joints: JointSet,
}

pub fn cap_timestamp_ms(k: usize) -> u64 {
    (k as f64 * 1000.0 / CAP_FPS).round() as u64
}

pub fn camera_time_ms(i: usize) -> f64 {
    i as f64 * 1000.0 / (CAP_FPS * CAMERA_SUBSTEPS as f64)
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..=hi)
}

/// Lowest joint height of a pose.
fn min_height(pose: &HandPose, tmpl: &HandTemplate) -> f64 {
    fk(pose, tmpl).iter().map(|p| p.z).fold(f64::INFINITY, f64::min)
}

fn set_height(pose: &mut HandPose, tmpl: &HandTemplate, lowest: f64) {
    pose.theta[2] += lowest - min_height(pose, tmpl);
}

const MCP: [usize; 4] = [8, 10, 12, 14];
const PIP: [usize; 4] = [18, 20, 22, 24];
const DIP: [usize; 4] = [19, 21, 23, 25];

fn keypose(rng: &mut ChaCha8Rng, tmpl: &HandTemplate, gesture: Gesture, hand: Hand, anchor_x: f64, beta: &[f64; SHAPE_DOF]) -> HandPose {
    let gesture = match gesture {
        Gesture::Free => match rng.random_range(0..6) {
            0 => Gesture::Palm,
            1 => Gesture::Fingers,
            2 => Gesture::Knuckles,
            3 => Gesture::Writing,
            _ => Gesture::Free,
        },
        g => g,
    };
    let mut p = HandPose::neutral(hand);
    p.beta = *beta;
    p.theta[0] = anchor_x + uniform(rng, -30.0, 30.0);
    p.theta[1] = uniform(rng, 165.0, 195.0);
    p.theta[5] = uniform(rng, -0.3, 0.3);
    let th = &mut p.theta;
    let mut lowest = CONTACT_HEIGHT;
    match gesture {
        Gesture::Palm => {
            // nearly flat, so the lowest joints are the fingertips
            for f in 0..4 {
                th[MCP[f]] = uniform(rng, 0.0, 0.02);
                th[MCP[f] + 1] = uniform(rng, -0.15, 0.15);
                th[PIP[f]] = uniform(rng, 0.0, 0.015);
                th[DIP[f]] = uniform(rng, 0.0, 0.01);
            }
            th[6] = uniform(rng, 0.0, 0.02);
            th[7] = uniform(rng, 0.0, 0.3);
            th[16] = uniform(rng, 0.0, 0.015);
            th[17] = uniform(rng, 0.0, 0.015);
        }
        Gesture::Fingers => {
            th[3] = uniform(rng, 0.25, 0.5);
            let touching = rng.random_range(1..=5usize);
            for f in 0..4 {
                let down = f + 1 < touching;
                th[MCP[f]] = if down { uniform(rng, 0.2, 0.6) } else { uniform(rng, -0.26, 0.0) };
                th[MCP[f] + 1] = uniform(rng, -0.2, 0.2);
                th[PIP[f]] = if down { uniform(rng, 0.2, 0.7) } else { uniform(rng, 0.0, 0.2) };
                th[DIP[f]] = uniform(rng, 0.0, 0.3);
            }
            th[6] = uniform(rng, 0.2, 0.8);
            th[7] = uniform(rng, 0.0, 0.6);
            th[16] = uniform(rng, 0.0, 0.5);
            th[17] = uniform(rng, 0.0, 0.5);
        }
        Gesture::Knuckles => {
            th[3] = uniform(rng, -0.1, 0.2);
            for f in 0..4 {
                th[MCP[f]] = uniform(rng, 1.2, 1.6);
                th[MCP[f] + 1] = uniform(rng, -0.05, 0.05);
                th[PIP[f]] = uniform(rng, 1.3, 1.8);
                th[DIP[f]] = uniform(rng, 0.5, 1.0);
            }
            th[6] = uniform(rng, 0.3, 0.7);
            th[7] = uniform(rng, 0.3, 0.8);
            th[16] = uniform(rng, 0.4, 0.8);
            th[17] = uniform(rng, 0.3, 0.7);
        }
        Gesture::Writing => {
            th[4] = uniform(rng, 0.5, 0.9);
            th[3] = uniform(rng, 0.0, 0.3);
            for f in 0..4 {
                let grip = f < 2;
                th[MCP[f]] = if grip { uniform(rng, 0.4, 0.8) } else { uniform(rng, 1.0, 1.5) };
                th[PIP[f]] = if grip { uniform(rng, 0.3, 0.7) } else { uniform(rng, 1.2, 1.7) };
                th[DIP[f]] = uniform(rng, 0.2, 0.6);
            }
            th[6] = uniform(rng, 0.3, 0.7);
            th[7] = uniform(rng, 0.4, 0.9);
            th[16] = uniform(rng, 0.2, 0.5);
            th[17] = uniform(rng, 0.1, 0.4);
        }
        Gesture::Free => {
            for i in 3..5 {
                th[i] = uniform(rng, -0.4, 0.4);
            }
            for i in ARTICULATION_START..POSE_DOF {
                th[i] = uniform(rng, tmpl.theta_min[i], tmpl.theta_max[i]);
            }
            lowest = uniform(rng, CONTACT_HEIGHT, 60.0);
        }
    }
    tmpl.clamp(&mut p);
    set_height(&mut p, tmpl, lowest);
    p
}

/// C¹ blend with zero velocity at both keys; stays between them.
fn smoothstep(a: &HandPose, b: &HandPose, u: f64) -> HandPose {
    let s = u * u * (3.0 - 2.0 * u);
    let mut p = *a;
    for i in 0..POSE_DOF {
        p.theta[i] = a.theta[i] + (b.theta[i] - a.theta[i]) * s;
    }
    p
}

/// Camera-rate pose trajectory: keyposes about every second, blended with
/// smoothstep and raised where a blend would dip below the contact height.
pub fn generate_trajectory(sc: &SynthScenario, tmpl: &HandTemplate) -> Vec<TrajectoryFrame> {
    let mut rng = ChaCha8Rng::seed_from_u64(sc.seed);
    let n = sc.frames * CAMERA_SUBSTEPS;
    let mut tracks: [Option<Vec<HandPose>>; HANDS] = [None, None];
    for h in Hand::BOTH {
        if !sc.hands.includes(h) {
            continue;
        }
        let anchor = match (sc.hands, h) {
            (HandsInvolved::Both, Hand::Left) => 95.0,
            (HandsInvolved::Both, Hand::Right) => 250.0,
            _ => uniform(&mut rng, 120.0, 225.0),
        };
        let mut keys = vec![(0usize, keypose(&mut rng, tmpl, sc.gesture, h, anchor, &sc.beta))];
        while keys.last().unwrap().0 < n {
            let t = keys.last().unwrap().0 + rng.random_range(20..=40);
            keys.push((t, keypose(&mut rng, tmpl, sc.gesture, h, anchor, &sc.beta)));
        }
        let mut poses = Vec::with_capacity(n);
        let mut seg = 0;
        for i in 0..n {
            while keys[seg + 1].0 <= i {
                seg += 1;
            }
            let (t0, a) = &keys[seg];
            let (t1, b) = &keys[seg + 1];
            let mut p = smoothstep(a, b, (i - t0) as f64 / (t1 - t0) as f64);
            let low = min_height(&p, tmpl);
            if low < CONTACT_HEIGHT {
                p.theta[2] += CONTACT_HEIGHT - low;
            }
            poses.push(p);
        }
        tracks[h.index()] = Some(poses);
    }
    (0..n)
        .map(|i| {
            let poses = [tracks[0].as_ref().map(|t| t[i]), tracks[1].as_ref().map(|t| t[i])];
            let mut joints = JointSet::empty(camera_time_ms(i).round() as u64);
            for h in 0..HANDS {
                joints.hands[h] = poses[h].map(|p| {
                    let j = fk(&p, tmpl);
                    HandJoints::from_joints(j.map(|v| [v.x, v.y, v.z]))
                });
            }
            TrajectoryFrame { time_ms: camera_time_ms(i), poses, joints }
        })
        .collect()
}

fn segment_distance(p: &Vector3<f64>, a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let ab = b - a;
    let t = ((p - a).dot(&ab) / ab.norm_squared().max(1e-12)).clamp(0.0, 1.0);
    (p - (a + ab * t)).norm()
}

/// Distance from a point to the hand surface, modelled as one capsule per
/// bone around the posed joints; zero inside.
pub fn surface_distance(p: &Vector3<f64>, joints: &[Vector3<f64>; JOINTS], tmpl: &HandTemplate) -> f64 {
    (0..BONES)
        .map(|b| {
            let (i, j) = bone(b);
            segment_distance(p, &joints[i], &joints[j]) - tmpl.bone_radii[b]
        })
        .fold(f64::INFINITY, f64::min)
        .max(0.0)
}

/// Noise-free raw reading for a surface distance.
pub fn raw_reading(delta_mm: f64) -> f64 {
    (BASELINE + 127.0 * (-delta_mm / FALLOFF_MM).exp()).clamp(0.0, 255.0)
}

/// Capacitive frame for the hands in `poses`: each cell reads the falloff
/// of its distance to the nearest hand surface, plus quantized noise.
pub fn simulate_capacitance(
    poses: &[Option<HandPose>; HANDS],
    tmpl: &HandTemplate,
    geom: &ScreenGeometry,
    noise: f64,
    timestamp_ms: u64,
    rng: &mut impl Rng,
) -> CapFrame {
    let hands: Vec<[Vector3<f64>; JOINTS]> = poses.iter().flatten().map(|p| fk(p, tmpl)).collect();
    let normal = Normal::new(0.0, noise.max(0.0)).expect("finite noise");
    let mut grid = vec![0u8; SENSOR_COLS * SENSOR_ROWS];
    for r in 0..SENSOR_ROWS {
        for c in 0..SENSOR_COLS {
            let (x, y) = geom.cell_center(c, r);
            let p = Vector3::new(x, y, 0.0);
            let delta = hands.iter().map(|j| surface_distance(&p, j, tmpl)).fold(f64::INFINITY, f64::min);
            let mut v = if delta.is_finite() { raw_reading(delta) } else { BASELINE };
            if noise > 0.0 {
                v += normal.sample(rng);
            }
            grid[r * SENSOR_COLS + c] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    CapFrame { cols: SENSOR_COLS, rows: SENSOR_ROWS, grid, timestamp_ms }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Corruption {
    /// The camera reports every hand with the wrong label.
    FlipHandedness { camera: usize },
    /// `joints` detections of the camera are displaced by `magnitude_px`.
    Outliers { camera: usize, joints: usize, magnitude_px: f64 },
}

/// 2D detections of every present hand in every camera. Joints behind a
/// camera are omitted.
pub fn simulate_cameras(
    joints: &JointSet,
    frame: usize,
    rig: &CameraRig,
    pixel_noise: f64,
    corruptions: &[Corruption],
    rng: &mut impl Rng,
) -> Vec<ObservedHand2D> {
    let normal = Normal::new(0.0, pixel_noise.max(0.0)).expect("finite noise");
    let mut out = Vec::new();
    for (ci, cam) in rig.cameras.iter().enumerate() {
        for h in Hand::BOTH {
            let Some(hj) = joints.hand(h) else { continue };
            let mut px: Vec<Option<[f64; 2]>> = hj
                .joints
                .iter()
                .map(|p| {
                    cam.project(&Vector3::from(*p)).map(|[u, v]| {
                        if pixel_noise > 0.0 {
                            [u + normal.sample(rng), v + normal.sample(rng)]
                        } else {
                            [u, v]
                        }
                    })
                })
                .collect();
            let mut label = h;
            for c in corruptions {
                match *c {
                    Corruption::FlipHandedness { camera } if camera == ci => label = h.other(),
                    Corruption::Outliers { camera, joints: count, magnitude_px } if camera == ci => {
                        for k in 0..count.min(JOINTS) {
                            let j = (k * 7 + 3) % JOINTS;
                            if let Some(p) = &mut px[j] {
                                let a = rng.random_range(0.0..std::f64::consts::TAU);
                                p[0] += magnitude_px * a.cos();
                                p[1] += magnitude_px * a.sin();
                            }
                        }
                    }
                    _ => {}
                }
            }
            out.push(ObservedHand2D { frame, camera: ci, hand: label, joints: px, confidence: 1.0 });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reading_examples() {
        assert_eq!(raw_reading(0.0), 255.0);
        assert!((raw_reading(3.0) - (128.0 + 127.0 / std::f64::consts::E)).abs() < 1e-12);
        assert!((raw_reading(3.0) - 174.72).abs() < 0.01);
        assert!(raw_reading(200.0) - 128.0 < 1e-20);
    }

    #[test]
    fn empty_scene_reads_baseline() {
        let tmpl = HandTemplate::builtin();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = simulate_capacitance(&[None, None], &tmpl, &ScreenGeometry::default(), 0.0, 0, &mut rng);
        assert!(f.grid.iter().all(|&v| v == 128));
        let f = simulate_capacitance(&[None, None], &tmpl, &ScreenGeometry::default(), 1.5, 0, &mut rng);
        assert!(f.grid.iter().all(|&v| (118..=138).contains(&v)));
    }

    #[test]
    fn cap_and_camera_clocks_line_up() {
        assert_eq!(cap_timestamp_ms(3), 200);
        assert_eq!(camera_time_ms(6), 200.0);
    }
}
