use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::infer::output_slot;
use super::loss::{frame_loss, LossBreakdown};
use super::network::{Network, RecurrentState};
use super::output::HEATMAP_PLANE;
use super::targets::GroundTruthFrame;
use super::{EstimatorConfig, DEPTH_BINS};
use crate::error::{Error, Result};
use crate::frames::{NormFrame, ScreenGeometry, GRID_COLS, GRID_ROWS};
use crate::skeleton::{CHANNELS, HANDS};
use crate::tensor::{load_weights, save_weights, Adam, AdamConfig, Mode, Real, Slot, Tensor, Visit};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Windows per optimizer step, one window per sequence.
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Per-epoch multiplicative decay of the learning rate.
    pub lr_decay: f64,
    pub window_start: usize,
    /// Epochs between window length increments.
    pub window_every: usize,
    pub window_max: usize,
    pub flip_prob: f64,
    pub seed: u64,
    pub adam: AdamConfig,
    pub estimator: EstimatorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 600,
            batch_size: 8,
            learning_rate: 1e-3,
            lr_decay: 0.999,
            window_start: 2,
            window_every: 20,
            window_max: 30,
            flip_prob: 0.5,
            seed: 0,
            adam: AdamConfig::default(),
            estimator: EstimatorConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.estimator.validate()?;
        let bad = |m: &str| Err(Error::InvalidInput(format!("train config: {m}")));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.window_start == 0 || self.window_every == 0 || self.window_max < self.window_start {
            return bad("window schedule needs 0 < window_start <= window_max and window_every > 0");
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return bad("flip_prob must lie in [0, 1]");
        }
        if !(self.learning_rate > 0.0) || !(self.lr_decay > 0.0) {
            return bad("learning_rate and lr_decay must be positive");
        }
        Ok(())
    }
}

/// Frames per training window at `epoch`.
pub fn window_length(epoch: usize, cfg: &TrainConfig) -> usize {
    (cfg.window_start + epoch / cfg.window_every).min(cfg.window_max)
}

pub fn learning_rate(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.learning_rate * cfg.lr_decay.powi(epoch as i32)
}

/// A recorded sequence with per-frame supervision.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSequence {
    pub frames: Vec<NormFrame>,
    pub truth: Vec<GroundTruthFrame>,
}

/// Per-frame mean loss terms over one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub window: usize,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedModel<T> {
    pub config: TrainConfig,
    pub network: Network<T>,
    pub adam: Adam<T>,
    /// Epochs completed.
    pub epoch: usize,
    pub losses: Vec<EpochLoss>,
}

impl<T: Real> TrainedModel<T> {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(TrainedModel {
            config: config.clone(),
            network: Network::new(&config.estimator, &mut rng)?,
            adam: Adam::new(config.adam),
            epoch: 0,
            losses: Vec::new(),
        })
    }

    /// Trains `epochs` more epochs, calling `on_epoch` after each.
    pub fn train_epochs(
        &mut self,
        data: &[TrainSequence],
        epochs: usize,
        geom: &ScreenGeometry,
        mut on_epoch: impl FnMut(&EpochLoss),
    ) -> Result<()> {
        check_dataset(data)?;
        for _ in 0..epochs {
            let e = self.run_epoch(data, geom)?;
            on_epoch(&e);
            self.losses.push(e);
        }
        Ok(())
    }

    fn run_epoch(&mut self, data: &[TrainSequence], geom: &ScreenGeometry) -> Result<EpochLoss> {
        let epoch = self.epoch;
        let cfg = &self.config;
        // per-epoch stream so a resumed run samples what an uninterrupted one would
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let lr = learning_rate(epoch, cfg);
        let window = window_length(epoch, cfg);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let mut sum = LossBreakdown::default();
        let mut frames = 0usize;
        let batches: Vec<Vec<usize>> = order.chunks(cfg.batch_size).map(|c| c.to_vec()).collect();
        for batch in batches {
            let n = window.min(batch.iter().map(|&s| data[s].frames.len()).min().unwrap_or(0));
            let mut windows = Vec::with_capacity(batch.len());
            for &s in &batch {
                let len = data[s].frames.len();
                let start = rng.random_range(0..=len - n);
                let flip = rng.random_bool(self.config.flip_prob);
                windows.push((s, start, flip));
            }
            let samples: Vec<Vec<(NormFrame, GroundTruthFrame)>> = windows
                .iter()
                .map(|&(s, start, flip)| {
                    (start..start + n)
                        .map(|t| augment(&data[s].frames[t], &data[s].truth[t], flip))
                        .collect()
                })
                .collect();
            let loss = self.step(&samples, lr, geom)?;
            sum.add(&loss);
            frames += n * batch.len();
        }
        self.epoch += 1;
        Ok(EpochLoss {
            epoch,
            loss: sum.scaled(1.0 / frames.max(1) as f64),
            window,
            lr,
        })
    }

    /// One optimizer step on a batch of equal-length windows; returns the
    /// summed (not averaged) loss terms.
    fn step(&mut self, samples: &[Vec<(NormFrame, GroundTruthFrame)>], lr: f64, geom: &ScreenGeometry) -> Result<LossBreakdown> {
        self.network.zero_grad();
        let sum = window_gradient(&mut self.network, samples, geom)?;
        self.adam.step(&mut self.network, lr);
        Ok(sum)
    }
}

/// Unrolls `network` from zero state over a batch of equal-length windows
/// and back-propagates through time, adding parameter gradients of the
/// batch-mean window loss. Returns the loss terms summed over frames and
/// windows.
pub fn window_gradient<T: Real>(
    network: &mut Network<T>,
    samples: &[Vec<(NormFrame, GroundTruthFrame)>],
    geom: &ScreenGeometry,
) -> Result<LossBreakdown> {
    let b = samples.len();
    let n = samples.first().map_or(0, |w| w.len());
    if b == 0 || n == 0 || samples.iter().any(|w| w.len() != n) {
        return Err(Error::InvalidInput("windows must be non-empty and of equal length".into()));
    }
    let mut state = RecurrentState::<T>::zeros(&network.config, b);
    let mut caches = Vec::with_capacity(n);
    let mut grads = Vec::with_capacity(n);
    let mut sum = LossBreakdown::default();
    let scale = 1.0 / b as f64;
    for t in 0..n {
        let mut x = Tensor::<T>::zeros(&[b, 2, GRID_ROWS, GRID_COLS]);
        for (i, w) in samples.iter().enumerate() {
            w[t].0.write_into(&mut x, i);
        }
        let (out, next, cache) = network.step(&x, &state, Mode::Train)?;
        state = next;
        let mut d_heat = Tensor::<T>::zeros(&[b, CHANNELS, GRID_ROWS, GRID_COLS]);
        let mut d_depth = Tensor::<T>::zeros(&[b, CHANNELS * DEPTH_BINS]);
        let mut d_exist = Tensor::<T>::zeros(&[b, HANDS]);
        for (i, w) in samples.iter().enumerate() {
            let (l, g) = frame_loss(&output_slot(&out, i), &w[t].1, geom, &network.config);
            if !l.total.is_finite() {
                return Err(Error::NonFinite("training loss".into()));
            }
            sum.add(&l);
            let put = |dst: &mut [T], src: &[f64]| {
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = T::of(s * scale);
                }
            };
            put(&mut d_heat.data_mut()[i * CHANNELS * HEATMAP_PLANE..][..CHANNELS * HEATMAP_PLANE], &g.heatmaps);
            put(&mut d_depth.data_mut()[i * CHANNELS * DEPTH_BINS..][..CHANNELS * DEPTH_BINS], &g.depth);
            put(&mut d_exist.data_mut()[i * HANDS..][..HANDS], &g.existence);
        }
        caches.push(cache);
        grads.push((d_heat, d_depth, d_exist));
    }
    let mut d_next: Option<RecurrentState<T>> = None;
    for t in (0..n).rev() {
        let (dh, dd, de) = grads.pop().expect("one gradient per frame");
        let cache = caches.pop().expect("one cache per frame");
        let d_prev = network.backward(&cache, &dh, &dd, &de, d_next.as_ref())?;
        d_next = Some(RecurrentState {
            levels: d_prev,
            frame: t as u64,
        });
    }
    Ok(sum)
}

/// Batch-summed loss of `window_gradient` without the backward pass, and
/// the activation sign pattern of every step (`StepCache::activation_signs`).
pub fn window_loss<T: Real>(
    network: &mut Network<T>,
    samples: &[Vec<(NormFrame, GroundTruthFrame)>],
    geom: &ScreenGeometry,
) -> Result<(LossBreakdown, Vec<bool>)> {
    let b = samples.len();
    let n = samples.first().map_or(0, |w| w.len());
    if b == 0 || n == 0 || samples.iter().any(|w| w.len() != n) {
        return Err(Error::InvalidInput("windows must be non-empty and of equal length".into()));
    }
    let mut state = RecurrentState::<T>::zeros(&network.config, b);
    let mut sum = LossBreakdown::default();
    let mut signs = Vec::new();
    for t in 0..n {
        let mut x = Tensor::<T>::zeros(&[b, 2, GRID_ROWS, GRID_COLS]);
        for (i, w) in samples.iter().enumerate() {
            w[t].0.write_into(&mut x, i);
        }
        let (out, next, cache) = network.step(&x, &state, Mode::Train)?;
        state = next;
        signs.extend(cache.activation_signs());
        for (i, w) in samples.iter().enumerate() {
            sum.add(&frame_loss(&output_slot(&out, i), &w[t].1, geom, &network.config).0);
        }
    }
    Ok((sum, signs))
}

/// Training sample after optional flip-swap augmentation.
pub fn augment(frame: &NormFrame, truth: &GroundTruthFrame, flip: bool) -> (NormFrame, GroundTruthFrame) {
    if flip {
        (frame.mirrored(), truth.mirrored())
    } else {
        (frame.clone(), truth.clone())
    }
}

fn check_dataset(data: &[TrainSequence]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    for (i, s) in data.iter().enumerate() {
        if s.frames.is_empty() || s.frames.len() != s.truth.len() {
            return Err(Error::InvalidInput(format!(
                "sequence {i} has {} frames and {} ground-truth frames",
                s.frames.len(),
                s.truth.len()
            )));
        }
    }
    Ok(())
}

/// Trains a fresh model for `cfg.epochs` epochs.
pub fn train<T: Real>(
    data: &[TrainSequence],
    cfg: &TrainConfig,
    geom: &ScreenGeometry,
    on_epoch: impl FnMut(&EpochLoss),
) -> Result<TrainedModel<T>> {
    let mut model = TrainedModel::new(cfg)?;
    model.train_epochs(data, cfg.epochs, geom, on_epoch)?;
    Ok(model)
}

pub fn write_loss_csv(path: &Path, losses: &[EpochLoss]) -> Result<()> {
    let mut out = String::from("epoch,heatmap,depth,bone,existence,total,window,lr\n");
    for e in losses {
        let l = &e.loss;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            e.epoch, l.heatmap, l.depth, l.bone, l.existence, l.total, e.window, e.lr
        ));
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Adam moments exposed as buffers so they share the weight file format.
struct Moments<'a, T>(&'a mut Adam<T>);

impl<T: Real> Visit<T> for Moments<'_, T> {
    fn visit(&mut self, _prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        for (name, (m, v)) in self.0.moments.iter_mut() {
            f(&format!("{name}.m"), Slot::Buffer(m));
            f(&format!("{name}.v"), Slot::Buffer(v));
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    epoch: usize,
    adam_step: u64,
    dtype: String,
    config: TrainConfig,
    moments: Vec<(String, Vec<usize>)>,
    losses: Vec<EpochLoss>,
}

/// Writes `model.{json,bin}`, `optimizer.{json,bin}` and `checkpoint.json`
/// into `dir`.
pub fn save_checkpoint<T: Real>(model: &mut TrainedModel<T>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_weights(&mut model.network, dir, "model")?;
    save_weights(&mut Moments(&mut model.adam), dir, "optimizer")?;
    let meta = CheckpointMeta {
        epoch: model.epoch,
        adam_step: model.adam.step,
        dtype: T::DTYPE.to_string(),
        config: model.config.clone(),
        moments: model
            .adam
            .moments
            .iter()
            .map(|(k, (m, _))| (k.clone(), m.shape().to_vec()))
            .collect(),
        losses: model.losses.clone(),
    };
    let path = dir.join("checkpoint.json");
    let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::format(&path, e.to_string()))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint<T: Real>(dir: &Path) -> Result<TrainedModel<T>> {
    let path = dir.join("checkpoint.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    if meta.dtype != T::DTYPE {
        return Err(Error::format(
            &path,
            format!("checkpoint holds {} weights, requested {}", meta.dtype, T::DTYPE),
        ));
    }
    let mut model = TrainedModel::<T>::new(&meta.config)?;
    load_weights(&mut model.network, dir, "model")?;
    for (name, shape) in &meta.moments {
        model
            .adam
            .moments
            .insert(name.clone(), (Tensor::zeros(shape), Tensor::zeros(shape)));
    }
    load_weights(&mut Moments(&mut model.adam), dir, "optimizer")?;
    model.adam.step = meta.adam_step;
    model.epoch = meta.epoch;
    model.losses = meta.losses;
    Ok(model)
}
