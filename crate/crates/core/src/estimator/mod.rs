//! Recurrent U-Net joint estimator: network, loss, training and inference.

mod infer;
mod loss;
mod network;
mod output;
mod targets;
mod train;

pub use infer::{Estimator, StreamState};
pub use loss::{frame_loss, LossBreakdown, LossGrads};
pub use network::{Network, NetOutput, RecurrentState, StepCache};
pub use output::{merge_tta, EstimatorOutput, HEATMAP_PLANE};
pub use targets::{bin_center, depth_bin, GroundTruthFrame};
pub use train::{
    augment, learning_rate, load_checkpoint, save_checkpoint, train, window_gradient, window_length, window_loss, write_loss_csv,
    EpochLoss, TrainConfig, TrainSequence, TrainedModel,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEPTH_BINS: usize = 48;
pub const DEPTH_MIN_MM: f64 = -10.0;
pub const DEPTH_MAX_MM: f64 = 110.0;
pub const LEVELS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    /// Output channels of the five downsampling blocks at scale 1.
    pub down_widths: [usize; LEVELS],
    /// Output channels (and GRU state width) of the five upsampling blocks.
    pub up_widths: [usize; LEVELS],
    /// Channel multiplier applied to both width lists.
    pub scale: f64,
    /// Lower bound on any scaled width.
    pub min_width: usize,
    pub head_hidden: usize,
    pub se_reduction: usize,
    pub gru_kernel: usize,
    pub leaky_slope: f64,
    pub heatmap_sigma_px: f64,
    /// Inverse temperature of the spatial soft-argmax used by the bone term.
    pub soft_argmax_beta: f64,
    pub lambda_h: f64,
    pub lambda_d: f64,
    pub lambda_b: f64,
    pub lambda_e: f64,
    /// Millimetres per unit of the bone-length term; 1000 scores bone
    /// errors in metres.
    pub bone_unit_mm: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            down_widths: [32, 64, 128, 256, 512],
            up_widths: [256, 128, 64, 32, 32],
            scale: 1.0,
            min_width: 1,
            head_hidden: 128,
            se_reduction: 8,
            gru_kernel: 3,
            leaky_slope: 0.01,
            heatmap_sigma_px: 2.0,
            soft_argmax_beta: 20.0,
            lambda_h: 10.0,
            lambda_d: 2.0,
            lambda_b: 1.0,
            lambda_e: 0.2,
            bone_unit_mm: 1000.0,
        }
    }
}

impl EstimatorConfig {
    /// The desk-scale network: every width, head widths included, divided
    /// by eight.
    pub fn desk() -> Self {
        EstimatorConfig {
            scale: 0.125,
            head_hidden: 16,
            ..Self::default()
        }
    }

    fn scaled(&self, w: usize) -> usize {
        ((w as f64 * self.scale).round() as usize).max(self.min_width).max(1)
    }

    pub fn down(&self) -> [usize; LEVELS] {
        self.down_widths.map(|w| self.scaled(w))
    }

    pub fn up(&self) -> [usize; LEVELS] {
        self.up_widths.map(|w| self.scaled(w))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(format!("estimator config: {m}")));
        if !(self.scale > 0.0) {
            return bad("scale must be positive");
        }
        if self.gru_kernel % 2 == 0 {
            return bad("gru_kernel must be odd");
        }
        if self.head_hidden == 0 || self.se_reduction == 0 {
            return bad("head_hidden and se_reduction must be positive");
        }
        if !(self.heatmap_sigma_px > 0.0) || !(self.soft_argmax_beta > 0.0) || !(self.bone_unit_mm > 0.0) {
            return bad("heatmap_sigma_px, soft_argmax_beta and bone_unit_mm must be positive");
        }
        if [self.lambda_h, self.lambda_d, self.lambda_b, self.lambda_e]
            .iter()
            .any(|l| !(*l >= 0.0))
        {
            return bad("loss weights must be non-negative");
        }
        Ok(())
    }
}
