use serde::{Deserialize, Serialize};

use super::output::{EstimatorOutput, HEATMAP_PLANE};
use super::targets::{bin_center, GroundTruthFrame};
use super::{EstimatorConfig, DEPTH_BINS};
use crate::frames::{ScreenGeometry, GRID_COLS};
use crate::skeleton::{bone, BONES, HANDS, JOINTS};

const BCE_EPS: f64 = 1e-7;

/// Unweighted term values and the weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub heatmap: f64,
    pub depth: f64,
    pub bone: f64,
    pub existence: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn add(&mut self, o: &LossBreakdown) {
        self.heatmap += o.heatmap;
        self.depth += o.depth;
        self.bone += o.bone;
        self.existence += o.existence;
        self.total += o.total;
    }

    pub fn scaled(&self, k: f64) -> LossBreakdown {
        LossBreakdown {
            heatmap: self.heatmap * k,
            depth: self.depth * k,
            bone: self.bone * k,
            existence: self.existence * k,
            total: self.total * k,
        }
    }
}

/// Gradient of the weighted total w.r.t. each output.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrads {
    pub heatmaps: Vec<f64>,
    /// W.r.t. the depth probabilities (not logits).
    pub depth: Vec<f64>,
    /// W.r.t. the existence probabilities.
    pub existence: [f64; HANDS],
}

/// Neumaier-compensated sum of squares. The heatmap term sums about a
/// million squares, and plain summation error swamps finite differences.
fn sum_squares(v: &[f64]) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for x in v {
        let sq = x * x;
        let t = sum + sq;
        comp += if sum.abs() >= sq { (sum - t) + sq } else { (sq - t) + sum };
        sum = t;
    }
    sum + comp
}

/// `sqrt(sum(d^2))` and its gradient `d / norm` (zero at the origin).
fn norm_with_grad(diff: &mut [f64]) -> f64 {
    let n = sum_squares(diff).sqrt();
    if n > 0.0 {
        diff.iter_mut().for_each(|d| *d /= n);
    } else {
        diff.fill(0.0);
    }
    n
}

/// Soft-argmax position of one heatmap in millimetres plus the softmax
/// weights it used.
fn soft_argmax(plane: &[f64], beta: f64, geom: &ScreenGeometry) -> (f64, f64, Vec<f64>) {
    let m = plane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s: Vec<f64> = plane.iter().map(|&h| (beta * (h - m)).exp()).collect();
    let z: f64 = s.iter().sum();
    s.iter_mut().for_each(|v| *v /= z);
    let (mut x, mut y) = (0.0, 0.0);
    for (i, &w) in s.iter().enumerate() {
        let (px, py) = geom.pixel_to_mm((i % GRID_COLS) as f64, (i / GRID_COLS) as f64);
        x += w * px;
        y += w * py;
    }
    (x, y, s)
}

/// Loss of one frame and its gradients.
///
/// Heatmaps are compared on all channels (absent hands against zero);
/// depth and bone terms only cover present hands. Bone lengths come from
/// soft-argmax xy and the expected depth.
pub fn frame_loss(
    out: &EstimatorOutput,
    gt: &GroundTruthFrame,
    geom: &ScreenGeometry,
    cfg: &EstimatorConfig,
) -> (LossBreakdown, LossGrads) {
    let present = gt.present();

    let mut d_heat = gt.heatmaps(geom, cfg.heatmap_sigma_px);
    for (g, &h) in d_heat.iter_mut().zip(&out.heatmaps) {
        *g = h - *g;
    }
    let l_h = norm_with_grad(&mut d_heat);
    d_heat.iter_mut().for_each(|g| *g *= cfg.lambda_h);

    let target = gt.depth_targets();
    let mut d_depth = vec![0.0; out.depth.len()];
    let rows: Vec<usize> = (0..HANDS)
        .filter(|&h| present[h])
        .flat_map(|h| h * JOINTS..(h + 1) * JOINTS)
        .collect();
    let mut diff: Vec<f64> = rows
        .iter()
        .flat_map(|&c| (0..DEPTH_BINS).map(move |k| c * DEPTH_BINS + k))
        .map(|i| out.depth[i] - target[i])
        .collect();
    let l_d = norm_with_grad(&mut diff);
    for (n, i) in rows
        .iter()
        .flat_map(|&c| (0..DEPTH_BINS).map(move |k| c * DEPTH_BINS + k))
        .enumerate()
    {
        d_depth[i] = cfg.lambda_d * diff[n];
    }

    // bone term through soft-argmax joints
    let truth_len = gt.bone_lengths();
    let centers: Vec<f64> = (0..DEPTH_BINS).map(bin_center).collect();
    let mut joints = Vec::new();
    let mut diffs = Vec::new();
    for h in (0..HANDS).filter(|&h| present[h]) {
        let mut p = [[0.0; 3]; JOINTS];
        let mut weights = Vec::with_capacity(JOINTS);
        for (j, pj) in p.iter_mut().enumerate() {
            let c = h * JOINTS + j;
            let (x, y, s) = soft_argmax(out.heatmap(c), cfg.soft_argmax_beta, geom);
            let z: f64 = out.depth_row(c).iter().zip(&centers).map(|(d, c)| d * c).sum();
            *pj = [x, y, z];
            weights.push(s);
        }
        let lt = truth_len[h].expect("present hand");
        for (b, &l_true) in lt.iter().enumerate() {
            let (a, c) = bone(b);
            let v = [p[c][0] - p[a][0], p[c][1] - p[a][1], p[c][2] - p[a][2]];
            let l = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            diffs.push((l - l_true) / cfg.bone_unit_mm);
        }
        joints.push((h, p, weights));
    }
    let l_b = norm_with_grad(&mut diffs);
    if l_b > 0.0 {
        for (n, (h, p, weights)) in joints.iter().enumerate() {
            let mut gp = [[0.0; 3]; JOINTS];
            for b in 0..BONES {
                let (a, c) = bone(b);
                let v = [p[c][0] - p[a][0], p[c][1] - p[a][1], p[c][2] - p[a][2]];
                let l = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                if l == 0.0 {
                    continue;
                }
                let g = cfg.lambda_b * diffs[n * BONES + b] / (l * cfg.bone_unit_mm);
                for k in 0..3 {
                    gp[c][k] += g * v[k];
                    gp[a][k] -= g * v[k];
                }
            }
            for j in 0..JOINTS {
                let ch = h * JOINTS + j;
                let [x, y, _] = p[j];
                let [gx, gy, gz] = gp[j];
                let beta = cfg.soft_argmax_beta;
                let dst = &mut d_heat[ch * HEATMAP_PLANE..][..HEATMAP_PLANE];
                for (i, (&s, g)) in weights[j].iter().zip(dst.iter_mut()).enumerate() {
                    let (px, py) = geom.pixel_to_mm((i % GRID_COLS) as f64, (i / GRID_COLS) as f64);
                    *g += beta * s * ((px - x) * gx + (py - y) * gy);
                }
                for (k, c) in centers.iter().enumerate() {
                    d_depth[ch * DEPTH_BINS + k] += c * gz;
                }
            }
        }
    }

    let mut l_e = 0.0;
    let mut d_exist = [0.0; HANDS];
    for h in 0..HANDS {
        let e = if present[h] { 1.0 } else { 0.0 };
        let raw = out.existence[h];
        let p = raw.clamp(BCE_EPS, 1.0 - BCE_EPS);
        l_e -= (e * p.ln() + (1.0 - e) * (1.0 - p).ln()) / HANDS as f64;
        if p == raw {
            d_exist[h] = -cfg.lambda_e * (e / p - (1.0 - e) / (1.0 - p)) / HANDS as f64;
        }
    }

    let total = cfg.lambda_h * l_h + cfg.lambda_d * l_d + cfg.lambda_b * l_b + cfg.lambda_e * l_e;
    (
        LossBreakdown {
            heatmap: l_h,
            depth: l_d,
            bone: l_b,
            existence: l_e,
            total,
        },
        LossGrads {
            heatmaps: d_heat,
            depth: d_depth,
            existence: d_exist,
        },
    )
}
