use rand::Rng;

use super::{EstimatorConfig, DEPTH_BINS, LEVELS};
use crate::error::{Error, Result};
use crate::frames::{GRID_COLS, GRID_ROWS};
use crate::skeleton::{CHANNELS, HANDS};
use crate::tensor::{
    global_avg_pool, global_avg_pool_backward, join, leaky_relu, leaky_relu_backward, sigmoid,
    sigmoid_backward, softmax_rows, softmax_rows_backward, BatchNorm, BnCache, Conv2d,
    ConvGru, ConvTranspose2d, GruCache, Linear, Mode, Real, SeBlock, SeCache, Slot, Tensor,
    Visit,
};

const INPUT_CHANNELS: usize = 2;

/// Spatial size of up-level `i` (0 = coarsest, 6x8).
fn level_dims(i: usize) -> (usize, usize) {
    let f = 1 << (LEVELS - 1 - i);
    (GRID_ROWS / f, GRID_COLS / f)
}

/// GRU hidden maps of the five upsampling levels.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentState<T> {
    pub levels: Vec<Tensor<T>>,
    pub frame: u64,
}

impl<T: Real> RecurrentState<T> {
    pub fn zeros(cfg: &EstimatorConfig, batch: usize) -> Self {
        let up = cfg.up();
        RecurrentState {
            levels: (0..LEVELS)
                .map(|i| {
                    let (h, w) = level_dims(i);
                    Tensor::zeros(&[batch, up[i], h, w])
                })
                .collect(),
            frame: 0,
        }
    }
}

#[derive(Debug, Clone)]
struct BnActCache<T> {
    bn: Option<BnCache<T>>,
    pre: Tensor<T>,
}

fn bn_act<T: Real>(
    bn: &mut BatchNorm<T>,
    x: &Tensor<T>,
    mode: Mode,
    slope: T,
) -> Result<(Tensor<T>, BnActCache<T>)> {
    let (pre, cache) = bn.forward(x, mode)?;
    let y = leaky_relu(&pre, slope);
    Ok((y, BnActCache { bn: cache, pre }))
}

fn bn_act_backward<T: Real>(
    bn: &mut BatchNorm<T>,
    cache: &BnActCache<T>,
    dy: &Tensor<T>,
    slope: T,
) -> Result<Tensor<T>> {
    let d_pre = leaky_relu_backward(&cache.pre, dy, slope);
    let bn_cache = cache
        .bn
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("backward through an inference-mode step".into()))?;
    bn.backward(bn_cache, &d_pre)
}

#[derive(Debug, Clone)]
struct DownBlock<T> {
    conv: Conv2d<T>,
    bn: BatchNorm<T>,
}

#[derive(Debug, Clone)]
struct UpBlock<T> {
    up: ConvTranspose2d<T>,
    bn: BatchNorm<T>,
    gru: ConvGru<T>,
}

/// 1x1 conv + BN + leaky ReLU + global average pool.
#[derive(Debug, Clone)]
struct Branch<T> {
    conv: Conv2d<T>,
    bn: BatchNorm<T>,
}

#[derive(Debug, Clone)]
struct BranchCache<T> {
    x: Tensor<T>,
    act: BnActCache<T>,
    shape: Vec<usize>,
}

impl<T: Real> Branch<T> {
    fn new(cin: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Branch {
            conv: Conv2d::new(cin, hidden, 1, 1, 0, false, rng),
            bn: BatchNorm::new(hidden),
        }
    }

    fn forward(&mut self, x: &Tensor<T>, mode: Mode, slope: T) -> Result<(Tensor<T>, BranchCache<T>)> {
        let c = self.conv.forward(x)?;
        let (a, act) = bn_act(&mut self.bn, &c, mode, slope)?;
        let pooled = global_avg_pool(&a)?;
        Ok((
            pooled,
            BranchCache {
                x: x.clone(),
                act,
                shape: a.shape().to_vec(),
            },
        ))
    }

    fn backward(&mut self, cache: &BranchCache<T>, dy: &Tensor<T>, slope: T) -> Result<Tensor<T>> {
        let da = global_avg_pool_backward(&cache.shape, dy);
        let dc = bn_act_backward(&mut self.bn, &cache.act, &da, slope)?;
        self.conv.backward(&cache.x, &dc)
    }
}

/// Depth or existence head: pooled features of the final GRU output and of
/// the latent code, concatenated, then one fully connected layer.
#[derive(Debug, Clone)]
struct Head<T> {
    from_final: Branch<T>,
    from_latent: Branch<T>,
    fc: Linear<T>,
}

#[derive(Debug, Clone)]
struct HeadCache<T> {
    a: BranchCache<T>,
    b: BranchCache<T>,
    cat: Tensor<T>,
}

fn concat_features<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (n, ca) = (a.shape()[0], a.shape()[1]);
    let cb = b.shape()[1];
    let mut data = Vec::with_capacity(n * (ca + cb));
    for i in 0..n {
        data.extend_from_slice(&a.data()[i * ca..(i + 1) * ca]);
        data.extend_from_slice(&b.data()[i * cb..(i + 1) * cb]);
    }
    Tensor::from_vec(&[n, ca + cb], data).expect("concat shape")
}

fn split_features<T: Real>(x: &Tensor<T>, ca: usize) -> (Tensor<T>, Tensor<T>) {
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let cb = c - ca;
    let mut a = Vec::with_capacity(n * ca);
    let mut b = Vec::with_capacity(n * cb);
    for row in x.data().chunks(c) {
        a.extend_from_slice(&row[..ca]);
        b.extend_from_slice(&row[ca..]);
    }
    (
        Tensor::from_vec(&[n, ca], a).expect("split shape"),
        Tensor::from_vec(&[n, cb], b).expect("split shape"),
    )
}

impl<T: Real> Head<T> {
    fn new(final_ch: usize, latent_ch: usize, hidden: usize, out: usize, rng: &mut impl Rng) -> Self {
        Head {
            from_final: Branch::new(final_ch, hidden, rng),
            from_latent: Branch::new(latent_ch, hidden, rng),
            fc: Linear::new(2 * hidden, out, rng),
        }
    }

    fn forward(
        &mut self,
        fin: &Tensor<T>,
        latent: &Tensor<T>,
        mode: Mode,
        slope: T,
    ) -> Result<(Tensor<T>, HeadCache<T>)> {
        let (fa, a) = self.from_final.forward(fin, mode, slope)?;
        let (fb, b) = self.from_latent.forward(latent, mode, slope)?;
        let cat = concat_features(&fa, &fb);
        let y = self.fc.forward(&cat)?;
        Ok((y, HeadCache { a, b, cat }))
    }

    /// Returns gradients for (final features, latent).
    fn backward(&mut self, cache: &HeadCache<T>, dy: &Tensor<T>, slope: T) -> Result<(Tensor<T>, Tensor<T>)> {
        let dcat = self.fc.backward(&cache.cat, dy)?;
        let hidden = cache.cat.shape()[1] / 2;
        let (da, db) = split_features(&dcat, hidden);
        let dfin = self.from_final.backward(&cache.a, &da, slope)?;
        let dlat = self.from_latent.backward(&cache.b, &db, slope)?;
        Ok((dfin, dlat))
    }
}

impl<T: Real> Visit<T> for Head<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        self.from_final.conv.visit(&join(prefix, "final.conv"), f);
        self.from_final.bn.visit(&join(prefix, "final.bn"), f);
        self.from_latent.conv.visit(&join(prefix, "latent.conv"), f);
        self.from_latent.bn.visit(&join(prefix, "latent.bn"), f);
        self.fc.visit(&join(prefix, "fc"), f);
    }
}

/// Raw network outputs for a batch.
#[derive(Debug, Clone)]
pub struct NetOutput<T> {
    /// `[n, 42, 96, 128]`
    pub heat: Tensor<T>,
    /// `[n, 42 * 48]`, softmax over each group of 48.
    pub depth: Tensor<T>,
    /// `[n, 2]`, sigmoid probabilities.
    pub exist: Tensor<T>,
}

#[derive(Debug, Clone)]
struct UpCache<T> {
    input: Tensor<T>,
    act: BnActCache<T>,
    gru: GruCache<T>,
}

/// Everything one step needs for its backward pass.
#[derive(Debug, Clone)]
pub struct StepCache<T> {
    down_inputs: Vec<Tensor<T>>,
    down_acts: Vec<BnActCache<T>>,
    se: SeCache<T>,
    up: Vec<UpCache<T>>,
    fin: Tensor<T>,
    depth_head: HeadCache<T>,
    exist_head: HeadCache<T>,
    output: NetOutput<T>,
}

impl<T: Real> StepCache<T> {
    /// Sign of every rectifier input of the step, in a fixed order. Two
    /// steps with equal patterns lie on the same linear piece of every
    /// (leaky) ReLU.
    pub fn activation_signs(&self) -> Vec<bool> {
        let mut pres: Vec<&Tensor<T>> = self.down_acts.iter().map(|a| &a.pre).collect();
        pres.push(self.se.pre_relu());
        pres.extend(self.up.iter().map(|u| &u.act.pre));
        for h in [&self.depth_head, &self.exist_head] {
            pres.push(&h.a.act.pre);
            pres.push(&h.b.act.pre);
        }
        pres.iter().flat_map(|t| t.data().iter().map(|&v| v >= T::zero())).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Network<T> {
    pub config: EstimatorConfig,
    down: Vec<DownBlock<T>>,
    se: SeBlock<T>,
    up: Vec<UpBlock<T>>,
    heat: Conv2d<T>,
    depth_head: Head<T>,
    exist_head: Head<T>,
}

const HEAT_INIT_GAIN: f64 = 0.01;

impl<T: Real> Network<T> {
    pub fn new(config: &EstimatorConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let dw = config.down();
        let uw = config.up();
        let mut down = Vec::with_capacity(LEVELS);
        let mut cin = INPUT_CHANNELS;
        for &w in &dw {
            down.push(DownBlock {
                conv: Conv2d::new(cin, w, 3, 2, 1, false, rng),
                bn: BatchNorm::new(w),
            });
            cin = w;
        }
        let latent = dw[LEVELS - 1];
        let se = SeBlock::new(latent, config.se_reduction, rng);
        let mut up = Vec::with_capacity(LEVELS);
        let mut cin = latent;
        for i in 0..LEVELS {
            let skip = if i + 1 < LEVELS { dw[LEVELS - 2 - i] } else { INPUT_CHANNELS };
            up.push(UpBlock {
                up: ConvTranspose2d::new(cin, uw[i], 3, 2, 1, 1, false, rng),
                bn: BatchNorm::new(uw[i]),
                gru: ConvGru::new(uw[i] + skip, uw[i], config.gru_kernel, rng),
            });
            cin = uw[i];
        }
        let fin = uw[LEVELS - 1];
        // Near-zero initial heatmaps; at He scale the first few hundred steps
        // go into shrinking the output and training stalls at all-zero maps.
        let mut heat = Conv2d::new(fin, CHANNELS, 1, 1, 0, true, rng);
        heat.weight.value.data_mut().iter_mut().for_each(|w| *w = *w * T::of(HEAT_INIT_GAIN));
        Ok(Network {
            config: config.clone(),
            down,
            se,
            up,
            heat,
            depth_head: Head::new(fin, latent, config.head_hidden, CHANNELS * DEPTH_BINS, rng),
            exist_head: Head::new(fin, latent, config.head_hidden, HANDS, rng),
        })
    }

    fn slope(&self) -> T {
        T::of(self.config.leaky_slope)
    }

    /// One recurrent step over a batch `x: [n, 2, 96, 128]`.
    pub fn step(
        &mut self,
        x: &Tensor<T>,
        state: &RecurrentState<T>,
        mode: Mode,
    ) -> Result<(NetOutput<T>, RecurrentState<T>, StepCache<T>)> {
        let (n, c, h, w) = x.dims4("estimator")?;
        if (c, h, w) != (INPUT_CHANNELS, GRID_ROWS, GRID_COLS) {
            return Err(Error::shape(
                "estimator",
                format!("input {:?}, expected [n, 2, 96, 128]", x.shape()),
            ));
        }
        if state.levels.len() != LEVELS {
            return Err(Error::shape("estimator", "state must have five levels"));
        }
        for (i, s) in state.levels.iter().enumerate() {
            let (hh, ww) = level_dims(i);
            if s.shape() != [n, self.up[i].gru.hidden(), hh, ww] {
                return Err(Error::shape(
                    "estimator",
                    format!("state level {i} is {:?}", s.shape()),
                ));
            }
        }
        let slope = self.slope();
        let mut down_inputs = Vec::with_capacity(LEVELS);
        let mut down_acts = Vec::with_capacity(LEVELS);
        let mut feats = Vec::with_capacity(LEVELS);
        let mut cur = x.clone();
        for block in &mut self.down {
            let conv = block.conv.forward(&cur)?;
            let (y, act) = bn_act(&mut block.bn, &conv, mode, slope)?;
            down_inputs.push(cur);
            down_acts.push(act);
            feats.push(y.clone());
            cur = y;
        }
        let (latent, se) = self.se.forward(&cur)?;
        let mut up_caches = Vec::with_capacity(LEVELS);
        let mut new_levels = Vec::with_capacity(LEVELS);
        let mut u = latent.clone();
        for (i, block) in self.up.iter_mut().enumerate() {
            let a = block.up.forward(&u)?;
            let (a, act) = bn_act(&mut block.bn, &a, mode, slope)?;
            let skip = if i + 1 < LEVELS { &feats[LEVELS - 2 - i] } else { x };
            let xin = Tensor::concat_channels(&a, skip)?;
            let (hnew, gru) = block.gru.forward(&state.levels[i], &xin)?;
            up_caches.push(UpCache { input: u, act, gru });
            new_levels.push(hnew.clone());
            u = hnew;
        }
        let heat = self.heat.forward(&u)?;
        let (depth_logits, depth_head) = self.depth_head.forward(&u, &latent, mode, slope)?;
        let depth = softmax_rows(&depth_logits, DEPTH_BINS)?;
        let (exist_logits, exist_head) = self.exist_head.forward(&u, &latent, mode, slope)?;
        let exist = sigmoid(&exist_logits);
        let output = NetOutput { heat, depth, exist };
        let cache = StepCache {
            down_inputs,
            down_acts,
            se,
            up: up_caches,
            fin: u,
            depth_head,
            exist_head,
            output: output.clone(),
        };
        let next = RecurrentState {
            levels: new_levels,
            frame: state.frame + 1,
        };
        Ok((output, next, cache))
    }

    /// Back-propagates one step. `d_heat`, `d_depth`, `d_exist` are loss
    /// gradients w.r.t. the step's outputs (probabilities for depth and
    /// existence); `d_next` w.r.t. the state it produced. Returns the
    /// gradient w.r.t. the state it consumed.
    pub fn backward(
        &mut self,
        cache: &StepCache<T>,
        d_heat: &Tensor<T>,
        d_depth: &Tensor<T>,
        d_exist: &Tensor<T>,
        d_next: Option<&RecurrentState<T>>,
    ) -> Result<Vec<Tensor<T>>> {
        let slope = self.slope();
        let out = &cache.output;
        let d_exist_logits = sigmoid_backward(&out.exist, d_exist);
        let (mut d_fin, mut d_latent) = self.exist_head.backward(&cache.exist_head, &d_exist_logits, slope)?;
        let d_depth_logits = softmax_rows_backward(&out.depth, d_depth, DEPTH_BINS);
        let (df, dl) = self.depth_head.backward(&cache.depth_head, &d_depth_logits, slope)?;
        d_fin.add_assign(&df);
        d_latent.add_assign(&dl);
        d_fin.add_assign(&self.heat.backward(&cache.fin, d_heat)?);

        let mut d_skips: Vec<Option<Tensor<T>>> = vec![None; LEVELS];
        let mut d_prev = vec![Tensor::zeros(&[0]); LEVELS];
        let mut du = d_fin;
        for i in (0..LEVELS).rev() {
            if let Some(next) = d_next {
                du.add_assign(&next.levels[i]);
            }
            let block = &mut self.up[i];
            let uc = &cache.up[i];
            let (dh, dxin) = block.gru.backward(&uc.gru, &du)?;
            d_prev[i] = dh;
            let (da, dskip) = dxin.split_channels(block.gru.hidden())?;
            if i + 1 < LEVELS {
                d_skips[LEVELS - 2 - i] = Some(dskip);
            }
            let da = bn_act_backward(&mut block.bn, &uc.act, &da, slope)?;
            du = block.up.backward(&uc.input, &da)?;
        }
        d_latent.add_assign(&du);
        let mut dcur = self.se.backward(&cache.se, &d_latent)?;
        for k in (0..LEVELS).rev() {
            if let Some(ds) = &d_skips[k] {
                dcur.add_assign(ds);
            }
            let block = &mut self.down[k];
            let dc = bn_act_backward(&mut block.bn, &cache.down_acts[k], &dcur, slope)?;
            dcur = block.conv.backward(&cache.down_inputs[k], &dc)?;
        }
        Ok(d_prev)
    }

    /// Learnable parameter count.
    pub fn parameters(&mut self) -> usize {
        self.param_count()
    }

    /// Same weights and running statistics in another precision.
    pub fn cast<U: Real>(&mut self) -> Result<Network<U>> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut target = Network::<U>::new(&self.config, &mut rng)?;
        let mut values = Vec::new();
        self.visit("", &mut |_, slot| {
            let t = match slot {
                Slot::Param(p) => &p.value,
                Slot::Buffer(b) => b,
            };
            values.push(t.cast::<U>());
        });
        let mut it = values.into_iter();
        target.visit("", &mut |_, slot| {
            let v = it.next().expect("same layout");
            match slot {
                Slot::Param(p) => p.value = v,
                Slot::Buffer(b) => *b = v,
            }
        });
        Ok(target)
    }
}

impl<T: Real> Visit<T> for Network<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        for (i, b) in self.down.iter_mut().enumerate() {
            b.conv.visit(&join(prefix, &format!("down{i}.conv")), f);
            b.bn.visit(&join(prefix, &format!("down{i}.bn")), f);
        }
        self.se.visit(&join(prefix, "se"), f);
        for (i, b) in self.up.iter_mut().enumerate() {
            b.up.visit(&join(prefix, &format!("up{i}.deconv")), f);
            b.bn.visit(&join(prefix, &format!("up{i}.bn")), f);
            b.gru.visit(&join(prefix, &format!("up{i}.gru")), f);
        }
        self.heat.visit(&join(prefix, "heatmap"), f);
        self.depth_head.visit(&join(prefix, "depth_head"), f);
        self.exist_head.visit(&join(prefix, "exist_head"), f);
    }
}
