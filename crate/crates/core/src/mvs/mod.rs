//! Multi-camera geometry for building 3D ground truth from 2D detections:
//! pinhole cameras with Brown-Conrady distortion, ray consistency between
//! views, hand filtering, point-to-ray triangulation and 30 to 15 fps
//! stream alignment.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::decode::{HandJoints, JointSet};
use crate::skeleton::{Hand, HANDS, JOINTS};
use crate::{Error, Result};

const UNDISTORT_ITERATIONS: usize = 10;
/// Ray pairs whose cross product is shorter than this are skipped.
const PARALLEL_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Camera {
    pub name: String,
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// k1, k2, p1, p2, k3.
    pub distortion: [f64; 5],
    /// World-to-camera rotation, row-major.
    pub rotation: [[f64; 3]; 3],
    /// World-to-camera translation (mm).
    pub translation: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    /// Unit length.
    pub dir: Vector3<f64>,
}

impl Camera {
    /// Camera at `eye` looking at `target`, image x axis perpendicular to `up`.
    pub fn look_at(name: &str, eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>, fx: f64) -> Camera {
        let f = (target - eye).normalize();
        let x = f.cross(&up).normalize();
        let y = f.cross(&x);
        let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), f.transpose()]);
        let t = -(r * eye);
        Camera {
            name: name.to_string(),
            width: 1920,
            height: 1080,
            fx,
            fy: fx,
            cx: 959.5,
            cy: 539.5,
            distortion: [0.0; 5],
            rotation: [[r[(0, 0)], r[(0, 1)], r[(0, 2)]], [r[(1, 0)], r[(1, 1)], r[(1, 2)]], [r[(2, 0)], r[(2, 1)], r[(2, 2)]]],
            translation: [t.x, t.y, t.z],
        }
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|i, j| self.rotation[i][j])
    }

    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation().transpose() * Vector3::from(self.translation))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(format!("camera {}: {m}", self.name)));
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return bad("focal lengths must be positive".into());
        }
        let r = self.rotation();
        let err = (r * r.transpose() - Matrix3::identity()).amax();
        if err > 1e-9 || (r.determinant() - 1.0).abs() > 1e-9 {
            return bad(format!("rotation not orthonormal (error {err:.3e})"));
        }
        let centre = [self.cx, self.cy];
        if self.distortion.iter().chain(&self.translation).chain(&centre).any(|v| !v.is_finite()) {
            return bad("non-finite parameter".into());
        }
        Ok(())
    }

    /// Normalized image coordinates to distorted ones.
    pub fn distort(&self, x: f64, y: f64) -> (f64, f64) {
        let [k1, k2, p1, p2, k3] = self.distortion;
        let r2 = x * x + y * y;
        let radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3));
        (
            x * radial + 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x),
            y * radial + p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y,
        )
    }

    /// Fixed-point inversion of [`Camera::distort`].
    pub fn undistort(&self, xd: f64, yd: f64) -> (f64, f64) {
        let [k1, k2, p1, p2, k3] = self.distortion;
        let (mut x, mut y) = (xd, yd);
        for _ in 0..UNDISTORT_ITERATIONS {
            let r2 = x * x + y * y;
            let radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3));
            let dx = 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x);
            let dy = p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y;
            x = (xd - dx) / radial;
            y = (yd - dy) / radial;
        }
        (x, y)
    }

    /// Pixel of a world point, or `None` behind the camera.
    pub fn project(&self, p: &Vector3<f64>) -> Option<[f64; 2]> {
        let c = self.rotation() * p + Vector3::from(self.translation);
        if c.z <= 0.0 {
            return None;
        }
        let (x, y) = self.distort(c.x / c.z, c.y / c.z);
        Some([self.fx * x + self.cx, self.fy * y + self.cy])
    }

    pub fn unproject(&self, px: [f64; 2]) -> Ray {
        let (x, y) = self.undistort((px[0] - self.cx) / self.fx, (px[1] - self.cy) / self.fy);
        let dir = self.rotation().transpose() * Vector3::new(x, y, 1.0);
        Ray { origin: self.center(), dir: dir.normalize() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraRig {
    pub length_unit: String,
    pub cameras: Vec<Camera>,
}

impl CameraRig {
    /// Nine cameras 600 to 800 mm from the screen centre: five above the
    /// screen looking down, four below looking up through it.
    pub fn desk_default() -> CameraRig {
        let c = Vector3::new(172.5, 97.5, 30.0);
        let up = Vector3::new(0.0, -1.0, 0.0);
        let spots = [
            ("top", Vector3::new(15.0, 25.0, 640.0)),
            ("top_nw", Vector3::new(-330.0, -260.0, 520.0)),
            ("top_ne", Vector3::new(340.0, -250.0, 500.0)),
            ("top_se", Vector3::new(320.0, 290.0, 560.0)),
            ("top_sw", Vector3::new(-310.0, 300.0, 540.0)),
            ("bottom_n", Vector3::new(40.0, -300.0, -560.0)),
            ("bottom_e", Vector3::new(360.0, 30.0, -580.0)),
            ("bottom_s", Vector3::new(-30.0, 320.0, -600.0)),
            ("bottom_w", Vector3::new(-380.0, -20.0, -540.0)),
        ];
        let cameras = spots
            .iter()
            .enumerate()
            .map(|(i, (name, offset))| {
                let mut cam = Camera::look_at(name, c + offset, c, up, 1150.0 + 20.0 * i as f64);
                cam.distortion = [-0.04 + 0.005 * i as f64, 0.012, 0.0004, -0.0003, -0.002];
                cam
            })
            .collect();
        CameraRig { length_unit: "mm".into(), cameras }
    }

    pub fn validate(&self) -> Result<()> {
        if self.length_unit != "mm" {
            return Err(Error::InvalidInput(format!("rig length unit must be mm, got {}", self.length_unit)));
        }
        if self.cameras.is_empty() {
            return Err(Error::InvalidInput("rig has no cameras".into()));
        }
        self.cameras.iter().try_for_each(Camera::validate)
    }

    pub fn load(path: &Path) -> Result<CameraRig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let rig: CameraRig = toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        rig.validate().map_err(|e| Error::format(path, e.to_string()))?;
        Ok(rig)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::format(path, e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// One camera's 2D detection of one hand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservedHand2D {
    pub frame: usize,
    pub camera: usize,
    pub hand: Hand,
    /// Pixel of each joint; `None` where the joint was not detected.
    pub joints: Vec<Option<[f64; 2]>>,
    pub confidence: f64,
}

impl ObservedHand2D {
    pub fn validate(&self, cameras: usize) -> Result<()> {
        if self.joints.len() != JOINTS {
            return Err(Error::InvalidInput(format!("observation has {} joints", self.joints.len())));
        }
        if self.camera >= cameras {
            return Err(Error::InvalidInput(format!("camera {} not in rig", self.camera)));
        }
        if self.joints.iter().flatten().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("2D observation".into()));
        }
        Ok(())
    }

    pub fn rays(&self, rig: &CameraRig) -> Vec<Option<Ray>> {
        let cam = &rig.cameras[self.camera];
        self.joints.iter().map(|p| p.map(|p| cam.unproject(p))).collect()
    }
}

/// Mean distance between corresponding rays of two views of one hand.
/// Joints missing in either view and near-parallel pairs are skipped.
pub fn ray_consistency(a: &[Option<Ray>], b: &[Option<Ray>]) -> Result<f64> {
    let mut sum = 0.0;
    let mut used = 0usize;
    for (ra, rb) in a.iter().zip(b) {
        let (Some(ra), Some(rb)) = (ra, rb) else { continue };
        let n = ra.dir.cross(&rb.dir);
        let len = n.norm();
        if len < PARALLEL_EPS {
            continue;
        }
        sum += ((ra.origin - rb.origin).dot(&n) / len).abs();
        used += 1;
    }
    if used == 0 {
        return Err(Error::UndefinedConsistency);
    }
    Ok(sum / used as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    /// Largest ray distance (mm) at which two views agree.
    pub threshold_mm: f64,
    pub min_consistent: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig { threshold_mm: 10.0, min_consistent: 3 }
    }
}

/// Keep mask over `obs`: an observation survives when at least
/// `min_consistent` same-frame, same-label hands from other cameras agree
/// with it.
pub fn filter_hands(obs: &[ObservedHand2D], rig: &CameraRig, cfg: &FilterConfig) -> Vec<bool> {
    let rays: Vec<_> = obs.iter().map(|o| o.rays(rig)).collect();
    (0..obs.len())
        .map(|i| {
            let partners = (0..obs.len())
                .filter(|&j| {
                    j != i
                        && obs[j].frame == obs[i].frame
                        && obs[j].hand == obs[i].hand
                        && obs[j].camera != obs[i].camera
                        && ray_consistency(&rays[i], &rays[j]).is_ok_and(|d| d < cfg.threshold_mm)
                })
                .count();
            partners >= cfg.min_consistent
        })
        .collect()
}

/// Point closest to all rays in the least-squares sense, with the RMS
/// point-to-ray distance.
pub fn triangulate(rays: &[Ray]) -> Result<(Vector3<f64>, f64)> {
    if rays.len() < 2 {
        return Err(Error::DegenerateGeometry(format!("{} ray(s), need 2", rays.len())));
    }
    let mut a = Matrix3::zeros();
    let mut b = Vector3::zeros();
    for r in rays {
        let m = Matrix3::identity() - r.dir * r.dir.transpose();
        a += m;
        b += m * r.origin;
    }
    let eig = SymmetricEigen::new(a).eigenvalues;
    if eig.min() <= 1e-9 * eig.max() {
        return Err(Error::DegenerateGeometry("rays are parallel".into()));
    }
    let p = a
        .cholesky()
        .ok_or_else(|| Error::DegenerateGeometry("normal matrix not positive definite".into()))?
        .solve(&b);
    let ss: f64 = rays.iter().map(|r| (p - r.origin).cross(&r.dir).norm_squared()).sum();
    Ok((p, (ss / rays.len() as f64).sqrt()))
}

/// 3D joints of one hand and the worst per-joint triangulation residual.
#[derive(Debug, Clone, PartialEq)]
pub struct TriangulatedHand {
    pub joints: [[f64; 3]; JOINTS],
    pub residual: f64,
    pub views: usize,
}

/// Filters one frame's observations and triangulates each hand seen by
/// enough consistent views. A hand needs two rays for every joint.
pub fn reconstruct_frame(
    obs: &[ObservedHand2D],
    rig: &CameraRig,
    cfg: &FilterConfig,
) -> [Option<TriangulatedHand>; HANDS] {
    let keep = filter_hands(obs, rig, cfg);
    let mut out = [None, None];
    for h in Hand::BOTH {
        let views: Vec<_> = obs
            .iter()
            .zip(&keep)
            .filter(|(o, k)| **k && o.hand == h)
            .map(|(o, _)| o.rays(rig))
            .collect();
        if views.len() < 2 {
            continue;
        }
        let mut joints = [[0.0; 3]; JOINTS];
        let mut worst: f64 = 0.0;
        let mut ok = true;
        for k in 0..JOINTS {
            let rays: Vec<Ray> = views.iter().filter_map(|v| v[k]).collect();
            match triangulate(&rays) {
                Ok((p, res)) => {
                    joints[k] = [p.x, p.y, p.z];
                    worst = worst.max(res);
                }
                Err(_) => {
                    ok = false;
                    break;
                }
            }
        }
        if ok {
            out[h.index()] = Some(TriangulatedHand { joints, residual: worst, views: views.len() });
        }
    }
    out
}

/// Groups observations by frame index.
pub fn by_frame(obs: &[ObservedHand2D]) -> BTreeMap<usize, Vec<ObservedHand2D>> {
    let mut m: BTreeMap<usize, Vec<ObservedHand2D>> = BTreeMap::new();
    for o in obs {
        m.entry(o.frame).or_default().push(o.clone());
    }
    m
}

/// Resamples a timestamped joint track at `times` by linear interpolation
/// between the bracketing samples. Times outside the track give `None`. A
/// hand is present only if both bracketing samples have it.
pub fn align_streams(track: &[(f64, JointSet)], times: &[u64]) -> Vec<Option<JointSet>> {
    times
        .iter()
        .map(|&t| {
            let tf = t as f64;
            let hi = track.partition_point(|(s, _)| *s < tf);
            if hi == track.len() {
                return None;
            }
            if track[hi].0 == tf {
                let mut js = track[hi].1.clone();
                js.timestamp_ms = t;
                return Some(js);
            }
            if hi == 0 {
                return None;
            }
            let (t0, a) = &track[hi - 1];
            let (t1, b) = &track[hi];
            let w = (tf - t0) / (t1 - t0);
            let mut js = JointSet::empty(t);
            for h in 0..HANDS {
                if let (Some(ha), Some(hb)) = (&a.hands[h], &b.hands[h]) {
                    let joints = std::array::from_fn(|k| {
                        std::array::from_fn(|c| ha.joints[k][c] + w * (hb.joints[k][c] - ha.joints[k][c]))
                    });
                    js.hands[h] = Some(HandJoints::from_joints(joints));
                }
            }
            Some(js)
        })
        .collect()
}

pub fn save_observations(obs: &[ObservedHand2D], path: &Path) -> Result<()> {
    let mut text = String::new();
    for o in obs {
        text.push_str(&serde_json::to_string(o).map_err(|e| Error::format(path, e.to_string()))?);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_observations(path: &Path, rig: &CameraRig) -> Result<Vec<ObservedHand2D>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let o: ObservedHand2D =
            serde_json::from_str(line).map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?;
        o.validate(rig.cameras.len())
            .map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?;
        out.push(o);
    }
    Ok(out)
}
