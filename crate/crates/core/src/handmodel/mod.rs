//! Simplified parametric hand: 26-DoF kinematic chain, 10 shape
//! coefficients, joint limits and a capsule-tube mesh.

mod mesh;

pub use mesh::{flatten_contact, write_obj, HandMesh};

use std::path::Path;

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skeleton::{bone, finger_of, Hand, BONES, JOINTS, PARENT};

pub const POSE_DOF: usize = 26;
pub const SHAPE_DOF: usize = 10;
/// Columns of the joint Jacobian: pose DoFs then shape coefficients.
pub const JAC_COLS: usize = POSE_DOF + SHAPE_DOF;
/// First articulation DoF; 0..3 is root translation, 3..6 root rotation.
pub const ARTICULATION_START: usize = 6;
pub const BETA_LIMIT: f64 = 3.0;

const BUILTIN_TEMPLATE: &str = include_str!("../../assets/hand_template.toml");

/// Flexion and optional abduction DoF driving each joint's child bone.
const JOINT_DOFS: [Option<(usize, Option<usize>)>; JOINTS] = [
    None,
    Some((6, Some(7))),
    Some((16, None)),
    Some((17, None)),
    None,
    Some((8, Some(9))),
    Some((18, None)),
    Some((19, None)),
    None,
    Some((10, Some(11))),
    Some((20, None)),
    Some((21, None)),
    None,
    Some((12, Some(13))),
    Some((22, None)),
    Some((23, None)),
    None,
    Some((14, Some(15))),
    Some((24, None)),
    Some((25, None)),
    None,
];

/// Joint whose rotation a pose DoF applies at, for articulation DoFs.
fn dof_joint(dof: usize) -> Option<usize> {
    JOINT_DOFS.iter().position(|d| {
        d.is_some_and(|(flex, abd)| flex == dof || abd == Some(dof))
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LimitEntry {
    pub name: String,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TemplateFile {
    length_unit: String,
    angle_unit: String,
    joints: Vec<[f64; 3]>,
    bone_radii: Vec<f64>,
    shape_basis: Vec<Vec<f64>>,
    limits: Vec<LimitEntry>,
}

/// Canonical right hand. Left hands use the x-mirrored template.
#[derive(Debug, Clone)]
pub struct HandTemplate {
    pub rest: [Vector3<f64>; JOINTS],
    /// Rest vector of bone `b`, from its parent joint to joint `b + 1`.
    pub bone_vectors: [Vector3<f64>; BONES],
    pub bone_radii: [f64; BONES],
    /// `shape_basis[i][b]`: relative length change of bone `b` per unit `beta[i]`.
    pub shape_basis: [[f64; BONES]; SHAPE_DOF],
    pub theta_min: [f64; POSE_DOF],
    pub theta_max: [f64; POSE_DOF],
    pub dof_names: Vec<String>,
    /// Flexion axis at each joint in the rest frame (zero where unused).
    flex_axes: [Vector3<f64>; JOINTS],
}

impl HandTemplate {
    pub fn builtin() -> Self {
        Self::from_toml(BUILTIN_TEMPLATE, Path::new("hand_template.toml"))
            .expect("built-in template is valid")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path)
    }

    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        let bad = |msg: String| Error::format(path, msg);
        let f: TemplateFile = toml::from_str(text).map_err(|e| bad(e.to_string()))?;
        if f.length_unit != "mm" || f.angle_unit != "rad" {
            return Err(bad(format!(
                "units must be mm/rad, got {}/{}",
                f.length_unit, f.angle_unit
            )));
        }
        if f.joints.len() != JOINTS || f.bone_radii.len() != BONES {
            return Err(bad(format!(
                "need {JOINTS} joints and {BONES} bone radii, got {} and {}",
                f.joints.len(),
                f.bone_radii.len()
            )));
        }
        if f.shape_basis.len() != SHAPE_DOF || f.shape_basis.iter().any(|r| r.len() != BONES) {
            return Err(bad(format!("shape_basis must be {SHAPE_DOF}x{BONES}")));
        }
        if f.limits.len() != POSE_DOF - ARTICULATION_START {
            return Err(bad(format!(
                "need {} limit entries, got {}",
                POSE_DOF - ARTICULATION_START,
                f.limits.len()
            )));
        }
        let rest: [Vector3<f64>; JOINTS] =
            std::array::from_fn(|j| Vector3::new(f.joints[j][0], f.joints[j][1], f.joints[j][2]));
        let bone_vectors = std::array::from_fn(|b| {
            let (p, c) = bone(b);
            rest[c] - rest[p]
        });
        let mut theta_min = [f64::NEG_INFINITY; POSE_DOF];
        let mut theta_max = [f64::INFINITY; POSE_DOF];
        let mut dof_names: Vec<String> = ["tx", "ty", "tz", "rx", "ry", "rz"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        for (i, l) in f.limits.iter().enumerate() {
            if !(l.min <= l.max) {
                return Err(bad(format!("limit {} has min > max", l.name)));
            }
            theta_min[ARTICULATION_START + i] = l.min;
            theta_max[ARTICULATION_START + i] = l.max;
            dof_names.push(l.name.clone());
        }
        let mut flex_axes = [Vector3::zeros(); JOINTS];
        for (j, dofs) in JOINT_DOFS.iter().enumerate() {
            if dofs.is_some() {
                // the child bone of a DoF joint is bone j (joint j -> j + 1)
                let d: Vector3<f64> = bone_vectors[j];
                flex_axes[j] = Vector3::z().cross(&d).normalize();
            }
        }
        let shape_basis = std::array::from_fn(|i| std::array::from_fn(|b| f.shape_basis[i][b]));
        Ok(HandTemplate {
            rest,
            bone_vectors,
            bone_radii: std::array::from_fn(|b| f.bone_radii[b]),
            shape_basis,
            theta_min,
            theta_max,
            dof_names,
            flex_axes,
        })
    }

    /// Relative length `1 + B beta` of every bone.
    pub fn bone_scales(&self, beta: &[f64; SHAPE_DOF]) -> [f64; BONES] {
        std::array::from_fn(|b| {
            1.0 + (0..SHAPE_DOF)
                .map(|i| self.shape_basis[i][b] * beta[i])
                .sum::<f64>()
        })
    }

    pub fn bone_lengths(&self, beta: &[f64; SHAPE_DOF]) -> [f64; BONES] {
        let s = self.bone_scales(beta);
        std::array::from_fn(|b| s[b] * self.bone_vectors[b].norm())
    }

    /// Clamps articulation DoFs into their limits and beta into range.
    pub fn clamp(&self, pose: &mut HandPose) {
        for i in 0..POSE_DOF {
            pose.theta[i] = pose.theta[i].clamp(self.theta_min[i], self.theta_max[i]);
        }
        for b in &mut pose.beta {
            *b = b.clamp(-BETA_LIMIT, BETA_LIMIT);
        }
    }

    /// Names of DoFs outside their limits (root DoFs are unconstrained).
    pub fn limit_violations(&self, pose: &HandPose, tol: f64) -> Vec<&str> {
        let mut out: Vec<&str> = (0..POSE_DOF)
            .filter(|&i| {
                pose.theta[i] < self.theta_min[i] - tol || pose.theta[i] > self.theta_max[i] + tol
            })
            .map(|i| self.dof_names[i].as_str())
            .collect();
        if pose.beta.iter().any(|b| b.abs() > BETA_LIMIT + tol) {
            out.push("beta");
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HandPose {
    pub theta: [f64; POSE_DOF],
    pub beta: [f64; SHAPE_DOF],
    pub hand: Hand,
}

impl HandPose {
    pub fn neutral(hand: Hand) -> Self {
        HandPose {
            theta: [0.0; POSE_DOF],
            beta: [0.0; SHAPE_DOF],
            hand,
        }
    }

    pub fn translation(&self) -> Vector3<f64> {
        Vector3::new(self.theta[0], self.theta[1], self.theta[2])
    }

    /// The right-hand pose whose x-mirror is this pose (and vice versa).
    pub fn mirrored(&self) -> HandPose {
        let mut theta = self.theta;
        theta[0] = -theta[0];
        theta[4] = -theta[4];
        theta[5] = -theta[5];
        HandPose {
            theta,
            beta: self.beta,
            hand: self.hand.other(),
        }
    }
}

/// Root rotation `Rx(a) Ry(b) Rz(c)`.
pub fn root_rotation(a: f64, b: f64, c: f64) -> Matrix3<f64> {
    let rx = Rotation3::from_axis_angle(&Vector3::x_axis(), a);
    let ry = Rotation3::from_axis_angle(&Vector3::y_axis(), b);
    let rz = Rotation3::from_axis_angle(&Vector3::z_axis(), c);
    (rx * ry * rz).into_inner()
}

fn axis_angle(axis: &Vector3<f64>, angle: f64) -> Matrix3<f64> {
    Rotation3::from_axis_angle(&Unit::new_unchecked(*axis), angle).into_inner()
}

/// Joint positions plus the frame each joint passes to its children.
#[derive(Debug, Clone)]
pub struct Kinematics {
    pub joints: [Vector3<f64>; JOINTS],
    /// Rotation applied to the child bones of each joint.
    pub frames: [Matrix3<f64>; JOINTS],
}

/// Forward kinematics of the canonical right hand.
fn fk_canonical(tmpl: &HandTemplate, theta: &[f64; POSE_DOF], beta: &[f64; SHAPE_DOF]) -> Kinematics {
    let scales = tmpl.bone_scales(beta);
    let mut joints = [Vector3::zeros(); JOINTS];
    let mut frames = [Matrix3::identity(); JOINTS];
    joints[0] = Vector3::new(theta[0], theta[1], theta[2]);
    frames[0] = root_rotation(theta[3], theta[4], theta[5]);
    for k in 1..JOINTS {
        let j = PARENT[k];
        let b = k - 1;
        joints[k] = joints[j] + frames[j] * (tmpl.bone_vectors[b] * scales[b]);
        frames[k] = match JOINT_DOFS[k] {
            Some((flex, abd)) => {
                let abd_rot = match abd {
                    Some(a) => axis_angle(&Vector3::z(), theta[a]),
                    None => Matrix3::identity(),
                };
                frames[j] * abd_rot * axis_angle(&tmpl.flex_axes[k], theta[flex])
            }
            None => frames[j],
        };
    }
    Kinematics { joints, frames }
}

fn mirror_point(p: &Vector3<f64>) -> Vector3<f64> {
    Vector3::new(-p.x, p.y, p.z)
}

/// Kinematic state in the hand's own handedness (left hands mirrored).
pub fn kinematics(pose: &HandPose, tmpl: &HandTemplate) -> Kinematics {
    match pose.hand {
        Hand::Right => fk_canonical(tmpl, &pose.theta, &pose.beta),
        Hand::Left => {
            let m = Matrix3::from_diagonal(&Vector3::new(-1.0, 1.0, 1.0));
            let r = fk_canonical(tmpl, &pose.mirrored().theta, &pose.beta);
            Kinematics {
                joints: r.joints.map(|p| mirror_point(&p)),
                frames: r.frames.map(|f| m * f * m),
            }
        }
    }
}

/// The 21 joint positions (mm, screen frame).
pub fn fk(pose: &HandPose, tmpl: &HandTemplate) -> [Vector3<f64>; JOINTS] {
    kinematics(pose, tmpl).joints
}

/// Joint positions as a flat `[x0, y0, z0, x1, ...]` vector.
pub fn fk_flat(pose: &HandPose, tmpl: &HandTemplate) -> [f64; JOINTS * 3] {
    let j = fk(pose, tmpl);
    std::array::from_fn(|i| j[i / 3][i % 3])
}

/// Whether `k` is moved by a rotation at joint `j`.
fn moves(j: usize, k: usize) -> bool {
    k > j && finger_of(k) == finger_of(j)
}

/// Analytic Jacobian of [`fk_flat`]: 63 rows, 26 pose then 10 shape columns,
/// row-major.
pub fn fk_jacobian(pose: &HandPose, tmpl: &HandTemplate) -> Vec<f64> {
    let (theta, sign) = match pose.hand {
        Hand::Right => (pose.theta, 1.0),
        Hand::Left => (pose.mirrored().theta, -1.0),
    };
    let kin = fk_canonical(tmpl, &theta, &pose.beta);
    let p = &kin.joints;
    let mut jac = vec![0.0; JOINTS * 3 * JAC_COLS];
    let mut set = |k: usize, col: usize, v: Vector3<f64>| {
        for a in 0..3 {
            jac[(k * 3 + a) * JAC_COLS + col] = v[a];
        }
    };
    let rx = Rotation3::from_axis_angle(&Vector3::x_axis(), theta[3]).into_inner();
    let ry = Rotation3::from_axis_angle(&Vector3::y_axis(), theta[4]).into_inner();
    let root_axes = [Vector3::x(), rx * Vector3::y(), rx * ry * Vector3::z()];
    for k in 0..JOINTS {
        for a in 0..3 {
            let mut e = Vector3::zeros();
            e[a] = 1.0;
            set(k, a, e);
        }
        for (i, w) in root_axes.iter().enumerate() {
            set(k, 3 + i, w.cross(&(p[k] - p[0])));
        }
    }
    for (j, dofs) in JOINT_DOFS.iter().enumerate() {
        let Some((flex, abd)) = dofs else { continue };
        let parent_frame = kin.frames[PARENT[j]];
        let abd_rot = match abd {
            Some(a) => axis_angle(&Vector3::z(), theta[*a]),
            None => Matrix3::identity(),
        };
        let flex_axis = parent_frame * abd_rot * tmpl.flex_axes[j];
        let abd_axis = parent_frame * Vector3::z();
        for k in (0..JOINTS).filter(|&k| moves(j, k)) {
            set(k, *flex, flex_axis.cross(&(p[k] - p[j])));
            if let Some(a) = abd {
                set(k, *a, abd_axis.cross(&(p[k] - p[j])));
            }
        }
    }
    for i in 0..SHAPE_DOF {
        for k in 1..JOINTS {
            let mut v = Vector3::zeros();
            let mut c = k;
            while c != 0 {
                let b = c - 1;
                v += kin.frames[PARENT[c]] * tmpl.bone_vectors[b] * tmpl.shape_basis[i][b];
                c = PARENT[c];
            }
            set(k, POSE_DOF + i, v);
        }
    }
    if sign < 0.0 {
        // d/dθ [M f(D θ)] = M J D
        for row in 0..JOINTS * 3 {
            let flip_row = row % 3 == 0;
            for col in 0..JAC_COLS {
                let flip_col = matches!(col, 0 | 4 | 5);
                if flip_row != flip_col {
                    jac[row * JAC_COLS + col] = -jac[row * JAC_COLS + col];
                }
            }
        }
    }
    jac
}

/// Pose DoFs that move joint `k` (used to check Jacobian sparsity).
pub fn dof_moves_joint(dof: usize, k: usize) -> bool {
    match dof {
        0..=5 => true,
        d if d < POSE_DOF => dof_joint(d).is_some_and(|j| moves(j, k)),
        _ => k != 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::{finger_joints, FINGERTIPS};
    use crate::tensor::gradcheck::central_difference;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_pose(rng: &mut ChaCha8Rng, tmpl: &HandTemplate, hand: Hand) -> HandPose {
        let mut pose = HandPose::neutral(hand);
        for i in 0..3 {
            pose.theta[i] = rng.random_range(-50.0..50.0);
        }
        for i in 3..6 {
            pose.theta[i] = rng.random_range(-0.6..0.6);
        }
        for i in ARTICULATION_START..POSE_DOF {
            pose.theta[i] = rng.random_range(tmpl.theta_min[i]..=tmpl.theta_max[i]);
        }
        for b in &mut pose.beta {
            *b = rng.random_range(-2.0..2.0);
        }
        pose
    }

    #[test]
    fn neutral_pose_is_rest() {
        let t = HandTemplate::builtin();
        let j = fk(&HandPose::neutral(Hand::Right), &t);
        assert_eq!(j, t.rest);
        let l = fk(&HandPose::neutral(Hand::Left), &t);
        for k in 0..JOINTS {
            assert_eq!(l[k], mirror_point(&t.rest[k]));
        }
    }

    #[test]
    fn root_translation_shifts_every_joint() {
        let t = HandTemplate::builtin();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pose = random_pose(&mut rng, &t, Hand::Right);
        let mut moved = pose;
        moved.theta[0] += 10.0;
        let (a, b) = (fk(&pose, &t), fk(&moved, &t));
        for k in 0..JOINTS {
            let d = b[k] - a[k];
            assert!((d.x - 10.0).abs() < 1e-9 && d.y.abs() < 1e-9 && d.z.abs() < 1e-9);
        }
    }

    #[test]
    fn index_shape_row_scales_only_index() {
        let t = HandTemplate::builtin();
        let base = HandPose::neutral(Hand::Right);
        let mut grown = base;
        grown.beta[2] = 2.0;
        let (a, b) = (fk(&base, &t), fk(&grown, &t));
        let [mcp, _, _, tip] = finger_joints(1);
        let ratio = (b[tip] - b[mcp]).norm() / (a[tip] - a[mcp]).norm();
        assert!((ratio - 1.1).abs() < 1e-9, "{ratio}");
        for f in [0, 2, 3, 4] {
            for k in finger_joints(f) {
                assert!((a[k] - b[k]).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn bone_lengths_follow_shape_basis() {
        let t = HandTemplate::builtin();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let pose = random_pose(&mut rng, &t, Hand::Right);
            let j = fk(&pose, &t);
            let expect = t.bone_lengths(&pose.beta);
            for b in 0..BONES {
                let (p, c) = bone(b);
                assert!(((j[c] - j[p]).norm() - expect[b]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn left_hand_is_mirrored_right_hand() {
        let t = HandTemplate::builtin();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let left = random_pose(&mut rng, &t, Hand::Left);
            let right = left.mirrored();
            let (l, r) = (fk(&left, &t), fk(&right, &t));
            for k in 0..JOINTS {
                assert_eq!(l[k], mirror_point(&r[k]));
            }
        }
    }

    #[test]
    fn flexion_curls_toward_screen() {
        let t = HandTemplate::builtin();
        let mut pose = HandPose::neutral(Hand::Right);
        pose.theta[18] = 0.5;
        let j = fk(&pose, &t);
        assert!(j[FINGERTIPS[1]].z < -1.0);
        assert_eq!(j[FINGERTIPS[2]].z, 0.0);
    }

    #[test]
    fn jacobian_translation_columns_are_identity() {
        let t = HandTemplate::builtin();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pose = random_pose(&mut rng, &t, Hand::Left);
        let jac = fk_jacobian(&pose, &t);
        for row in 0..JOINTS * 3 {
            for col in 0..3 {
                let expect = if row % 3 == col { 1.0 } else { 0.0 };
                assert_eq!(jac[row * JAC_COLS + col], expect);
            }
        }
    }

    #[test]
    fn jacobian_zero_upstream_of_dof() {
        let t = HandTemplate::builtin();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pose = random_pose(&mut rng, &t, Hand::Right);
        let jac = fk_jacobian(&pose, &t);
        for dof in 0..JAC_COLS {
            for k in 0..JOINTS {
                if !dof_moves_joint(dof, k) {
                    for a in 0..3 {
                        assert_eq!(jac[(k * 3 + a) * JAC_COLS + dof], 0.0, "dof {dof} joint {k}");
                    }
                }
            }
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let t = HandTemplate::builtin();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for seed in 0..50 {
            let hand = if seed % 2 == 0 { Hand::Left } else { Hand::Right };
            let pose = random_pose(&mut rng, &t, hand);
            let jac = fk_jacobian(&pose, &t);
            let x: Vec<f64> = pose.theta.iter().chain(&pose.beta).copied().collect();
            for row in 0..JOINTS * 3 {
                let num = central_difference(&x, 1e-6, |v| {
                    let mut p = pose;
                    p.theta.copy_from_slice(&v[..POSE_DOF]);
                    p.beta.copy_from_slice(&v[POSE_DOF..]);
                    fk_flat(&p, &t)[row]
                });
                let ana = &jac[row * JAC_COLS..(row + 1) * JAC_COLS];
                for c in 0..JAC_COLS {
                    let scale = ana[c].abs().max(1.0);
                    assert!((ana[c] - num[c]).abs() / scale < 1e-5, "row {row} col {c}: {} vs {}", ana[c], num[c]);
                }
            }
        }
    }

    #[test]
    fn template_rejects_bad_units() {
        let text = BUILTIN_TEMPLATE.replace("angle_unit = \"rad\"", "angle_unit = \"deg\"");
        assert!(HandTemplate::from_toml(&text, Path::new("t")).is_err());
    }

    #[test]
    fn clamp_enforces_limits() {
        let t = HandTemplate::builtin();
        let mut pose = HandPose::neutral(Hand::Right);
        pose.theta[18] = 5.0;
        pose.beta[0] = -9.0;
        assert_eq!(t.limit_violations(&pose, 0.0).len(), 2);
        t.clamp(&mut pose);
        assert!(t.limit_violations(&pose, 0.0).is_empty());
    }
}
