use super::network::{NetOutput, Network, RecurrentState};
use super::output::{merge_tta, EstimatorOutput, HEATMAP_PLANE};
use super::DEPTH_BINS;
use crate::error::Result;
use crate::frames::NormFrame;
use crate::skeleton::{CHANNELS, HANDS};
use crate::tensor::{Mode, Real};

/// Recurrent states of one input stream: the frames as captured and their
/// mirror images.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamState<T> {
    pub original: RecurrentState<T>,
    pub flipped: RecurrentState<T>,
}

/// Batch slot `i` of a network output as a double-precision frame output.
pub(crate) fn output_slot<T: Real>(out: &NetOutput<T>, i: usize) -> EstimatorOutput {
    let heat = &out.heat.data()[i * CHANNELS * HEATMAP_PLANE..][..CHANNELS * HEATMAP_PLANE];
    let depth = &out.depth.data()[i * CHANNELS * DEPTH_BINS..][..CHANNELS * DEPTH_BINS];
    let ex = &out.exist.data()[i * HANDS..][..HANDS];
    EstimatorOutput {
        heatmaps: heat.iter().map(|v| v.f64()).collect(),
        depth: depth.iter().map(|v| v.f64()).collect(),
        existence: [ex[0].f64(), ex[1].f64()],
    }
}

/// Inference wrapper: evaluation-mode forward passes with optional
/// flip test-time augmentation.
#[derive(Debug, Clone)]
pub struct Estimator<T> {
    pub network: Network<T>,
    pub tta: bool,
}

impl<T: Real> Estimator<T> {
    pub fn new(network: Network<T>, tta: bool) -> Self {
        Estimator { network, tta }
    }

    /// Zeroed states for a new sequence.
    pub fn start_stream(&self) -> StreamState<T> {
        StreamState {
            original: RecurrentState::zeros(&self.network.config, 1),
            flipped: RecurrentState::zeros(&self.network.config, 1),
        }
    }

    /// Single pass on one stream, advancing `state`.
    pub fn forward(&mut self, frame: &NormFrame, state: &mut RecurrentState<T>) -> Result<EstimatorOutput> {
        let x = frame.to_tensor::<T>();
        let (out, next, _) = self.network.step(&x, state, Mode::Eval)?;
        *state = next;
        Ok(output_slot(&out, 0))
    }

    /// Output for the next frame of a stream. With TTA the mirrored frame
    /// advances its own state and the two outputs are merged.
    pub fn infer(&mut self, frame: &NormFrame, state: &mut StreamState<T>) -> Result<EstimatorOutput> {
        let a = self.forward(frame, &mut state.original)?;
        if !self.tta {
            return Ok(a);
        }
        let b = self.forward(&frame.mirrored(), &mut state.flipped)?;
        Ok(merge_tta(&a, &b))
    }

    /// Runs a whole sequence from zero state.
    pub fn infer_sequence(&mut self, frames: &[NormFrame]) -> Result<Vec<EstimatorOutput>> {
        let mut state = self.start_stream();
        frames.iter().map(|f| self.infer(f, &mut state)).collect()
    }
}
