use crate::frames::{GRID_COLS, GRID_ROWS};
use crate::skeleton::{swap_channel, CHANNELS, HANDS};

use super::DEPTH_BINS;

pub const HEATMAP_PLANE: usize = GRID_ROWS * GRID_COLS;

/// One frame of estimator output, in double precision.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorOutput {
    /// `[42][96][128]`: left-hand joints 0..21, right-hand 21..42.
    pub heatmaps: Vec<f64>,
    /// `[42][48]`, each row a distribution over depth bins.
    pub depth: Vec<f64>,
    /// Existence probability of (left, right).
    pub existence: [f64; HANDS],
}

impl EstimatorOutput {
    pub fn zeros() -> Self {
        EstimatorOutput {
            heatmaps: vec![0.0; CHANNELS * HEATMAP_PLANE],
            depth: vec![1.0 / DEPTH_BINS as f64; CHANNELS * DEPTH_BINS],
            existence: [0.0; HANDS],
        }
    }

    pub fn heatmap(&self, channel: usize) -> &[f64] {
        &self.heatmaps[channel * HEATMAP_PLANE..(channel + 1) * HEATMAP_PLANE]
    }

    pub fn depth_row(&self, channel: usize) -> &[f64] {
        &self.depth[channel * DEPTH_BINS..(channel + 1) * DEPTH_BINS]
    }

    /// The output the same network state would give for a left-right
    /// flipped input: heatmaps flipped, hands swapped.
    pub fn mirrored(&self) -> EstimatorOutput {
        let mut heatmaps = vec![0.0; self.heatmaps.len()];
        for c in 0..CHANNELS {
            let src = self.heatmap(c);
            let dst = &mut heatmaps[swap_channel(c) * HEATMAP_PLANE..][..HEATMAP_PLANE];
            for (d_line, s_line) in dst.chunks_mut(GRID_COLS).zip(src.chunks(GRID_COLS)) {
                for (col, &v) in s_line.iter().enumerate() {
                    d_line[GRID_COLS - 1 - col] = v;
                }
            }
        }
        let mut depth = vec![0.0; self.depth.len()];
        for c in 0..CHANNELS {
            depth[swap_channel(c) * DEPTH_BINS..][..DEPTH_BINS].copy_from_slice(self.depth_row(c));
        }
        EstimatorOutput {
            heatmaps,
            depth,
            existence: [self.existence[1], self.existence[0]],
        }
    }

    /// Rescales each depth row to sum to one. Rows already normalized to
    /// within rounding are left untouched so the operation is exact on them.
    pub fn renormalize_depth(&mut self) {
        for row in self.depth.chunks_mut(DEPTH_BINS) {
            let s: f64 = row.iter().sum();
            if s > 0.0 && (s - 1.0).abs() > 1e-12 {
                row.iter_mut().for_each(|v| *v /= s);
            }
        }
    }
}

/// Test-time augmentation merge: the average of `original` and the
/// un-mirrored output of the flipped stream, with depth rows renormalized.
pub fn merge_tta(original: &EstimatorOutput, flipped: &EstimatorOutput) -> EstimatorOutput {
    let back = flipped.mirrored();
    let avg = |a: &[f64], b: &[f64]| -> Vec<f64> {
        a.iter().zip(b).map(|(&x, &y)| (x + y) * 0.5).collect()
    };
    let mut out = EstimatorOutput {
        heatmaps: avg(&original.heatmaps, &back.heatmaps),
        depth: avg(&original.depth, &back.depth),
        existence: [
            (original.existence[0] + back.existence[0]) * 0.5,
            (original.existence[1] + back.existence[1]) * 0.5,
        ],
    };
    out.renormalize_depth();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_output(rng: &mut ChaCha8Rng) -> EstimatorOutput {
        let heatmaps = (0..CHANNELS * HEATMAP_PLANE).map(|_| rng.random::<f64>()).collect();
        let mut out = EstimatorOutput {
            heatmaps,
            depth: (0..CHANNELS * DEPTH_BINS).map(|_| rng.random::<f64>()).collect(),
            existence: [rng.random(), rng.random()],
        };
        out.renormalize_depth();
        out
    }

    #[test]
    fn mirror_is_involution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let o = random_output(&mut rng);
        assert_eq!(o.mirrored().mirrored(), o);
    }

    #[test]
    fn tta_of_symmetric_output_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let o = random_output(&mut rng);
        // a flip-symmetric model gives the mirrored output on the flipped input
        let merged = merge_tta(&o, &o.mirrored());
        assert_eq!(merged.heatmaps, o.heatmaps);
        assert_eq!(merged.existence, o.existence);
        assert_eq!(merged.depth, o.depth);
    }

    #[test]
    fn tta_matches_hand_computation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_output(&mut rng);
        let b = random_output(&mut rng);
        let m = merge_tta(&a, &b);
        // left wrist heatmap pixel (row 5, col 7) pairs with right wrist of b at col 120
        let ia = 5 * GRID_COLS + 7;
        let ib = 21 * HEATMAP_PLANE + 5 * GRID_COLS + 120;
        assert_eq!(m.heatmaps[ia], (a.heatmaps[ia] + b.heatmaps[ib]) / 2.0);
        assert_eq!(m.existence[0], (a.existence[0] + b.existence[1]) / 2.0);
        for row in m.depth.chunks(DEPTH_BINS) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let raw0 = (a.depth[0] + b.depth[21 * DEPTH_BINS]) / 2.0;
        let s: f64 = (0..DEPTH_BINS)
            .map(|k| (a.depth[k] + b.depth[21 * DEPTH_BINS + k]) / 2.0)
            .sum();
        assert!((m.depth[0] - raw0 / s).abs() < 1e-12);
    }
}
