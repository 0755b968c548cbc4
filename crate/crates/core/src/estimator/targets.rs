use super::{DEPTH_BINS, DEPTH_MAX_MM, DEPTH_MIN_MM};
use crate::frames::{ScreenGeometry, GRID_COLS, GRID_ROWS};
use crate::skeleton::{bone, Hand, BONES, HANDS, JOINTS};

/// Centre of depth bin `k` in millimetres.
pub fn bin_center(k: usize) -> f64 {
    let width = (DEPTH_MAX_MM - DEPTH_MIN_MM) / DEPTH_BINS as f64;
    DEPTH_MIN_MM + width * k as f64 + width / 2.0
}

/// Bin whose centre is nearest to `z` after clipping into the depth range.
pub fn depth_bin(z: f64) -> usize {
    let width = (DEPTH_MAX_MM - DEPTH_MIN_MM) / DEPTH_BINS as f64;
    let k = ((z - DEPTH_MIN_MM) / width).floor();
    k.clamp(0.0, (DEPTH_BINS - 1) as f64) as usize
}

/// Per-frame supervision: joint positions (mm) of each present hand.
///
/// x is measured from the left-right flip axis of the padded grid rather
/// than from the sensor edge, so mirroring is a sign change and applying it
/// twice restores the frame exactly. y and z are screen millimetres.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthFrame {
    pub hands: [Option<[[f64; 3]; JOINTS]>; HANDS],
}

impl GroundTruthFrame {
    pub fn empty() -> Self {
        GroundTruthFrame { hands: [None, None] }
    }

    /// From joints in screen millimetres.
    pub fn from_screen(hands: [Option<[[f64; 3]; JOINTS]>; HANDS], geom: &ScreenGeometry) -> Self {
        let a = geom.flip_axis_x();
        GroundTruthFrame {
            hands: hands.map(|h| h.map(|j| j.map(|[x, y, z]| [x - a, y, z]))),
        }
    }

    pub fn from_joint_set(js: &crate::decode::JointSet, geom: &ScreenGeometry) -> Self {
        Self::from_screen(js.hands.clone().map(|h| h.map(|h| h.joints)), geom)
    }

    /// Joints of hand `h` in screen millimetres.
    pub fn screen_hand(&self, h: Hand, geom: &ScreenGeometry) -> Option<[[f64; 3]; JOINTS]> {
        let a = geom.flip_axis_x();
        self.hands[h.index()].map(|j| j.map(|[x, y, z]| [x + a, y, z]))
    }

    pub fn present(&self) -> [bool; HANDS] {
        [self.hands[0].is_some(), self.hands[1].is_some()]
    }

    /// Ground truth of the left-right flipped frame.
    pub fn mirrored(&self) -> Self {
        let flip = |j: &[[f64; 3]; JOINTS]| j.map(|[x, y, z]| [-x, y, z]);
        GroundTruthFrame {
            hands: [self.hands[1].as_ref().map(flip), self.hands[0].as_ref().map(flip)],
        }
    }

    /// Unnormalized Gaussian heatmaps, `[42][96][128]`, zero for absent hands.
    pub fn write_heatmaps(&self, geom: &ScreenGeometry, sigma_px: f64, out: &mut [f64]) {
        let plane = GRID_ROWS * GRID_COLS;
        out.fill(0.0);
        let inv = 1.0 / (2.0 * sigma_px * sigma_px);
        let axis = geom.flip_axis_x();
        for (h, joints) in self.hands.iter().enumerate() {
            let Some(joints) = joints else { continue };
            for (j, p) in joints.iter().enumerate() {
                let (cc, rc) = geom.mm_to_pixel(p[0] + axis, p[1]);
                let gx: Vec<f64> = (0..GRID_COLS)
                    .map(|c| (-(c as f64 - cc).powi(2) * inv).exp())
                    .collect();
                let dst = &mut out[(h * JOINTS + j) * plane..][..plane];
                for (r, line) in dst.chunks_mut(GRID_COLS).enumerate() {
                    let gy = (-(r as f64 - rc).powi(2) * inv).exp();
                    for (v, &g) in line.iter_mut().zip(&gx) {
                        *v = g * gy;
                    }
                }
            }
        }
    }

    pub fn heatmaps(&self, geom: &ScreenGeometry, sigma_px: f64) -> Vec<f64> {
        let mut out = vec![0.0; HANDS * JOINTS * GRID_ROWS * GRID_COLS];
        self.write_heatmaps(geom, sigma_px, &mut out);
        out
    }

    /// One-hot depth rows, `[42][48]`, zero rows for absent hands.
    pub fn depth_targets(&self) -> Vec<f64> {
        let mut out = vec![0.0; HANDS * JOINTS * DEPTH_BINS];
        for (h, joints) in self.hands.iter().enumerate() {
            let Some(joints) = joints else { continue };
            for (j, p) in joints.iter().enumerate() {
                out[(h * JOINTS + j) * DEPTH_BINS + depth_bin(p[2])] = 1.0;
            }
        }
        out
    }

    pub fn bone_lengths(&self) -> [Option<[f64; BONES]>; HANDS] {
        self.hands.map(|joints| {
            joints.map(|j| {
                std::array::from_fn(|b| {
                    let (p, c) = bone(b);
                    let d = [j[c][0] - j[p][0], j[c][1] - j[p][1], j[c][2] - j[p][2]];
                    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
                })
            })
        })
    }
}
