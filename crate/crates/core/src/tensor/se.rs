use rand::Rng;

use super::act::{global_avg_pool, relu, relu_backward, sigmoid, sigmoid_backward};
use super::layers::Linear;
use super::{join, Real, Slot, Tensor, Visit};
use crate::error::{Error, Result};

/// Squeeze-and-excitation channel gating.
#[derive(Debug, Clone)]
pub struct SeBlock<T> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

#[derive(Debug, Clone)]
pub struct SeCache<T> {
    x: Tensor<T>,
    squeeze: Tensor<T>,
    pre_relu: Tensor<T>,
    hidden: Tensor<T>,
    excitation: Tensor<T>,
}

impl<T> SeCache<T> {
    pub fn excitation(&self) -> &Tensor<T> {
        &self.excitation
    }

    pub fn pre_relu(&self) -> &Tensor<T> {
        &self.pre_relu
    }
}

/// Multiplies each `(n, c)` plane of `x` by `scale[n, c]`.
pub fn scale_channels<T: Real>(x: &Tensor<T>, scale: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("scale_channels")?;
    if scale.shape() != [n, c] {
        return Err(Error::shape(
            "scale_channels",
            format!("scale {:?} vs [{n}, {c}]", scale.shape()),
        ));
    }
    let mut y = x.clone();
    for (plane, &s) in y.data_mut().chunks_mut(h * w).zip(scale.data()) {
        plane.iter_mut().for_each(|v| *v *= s);
    }
    Ok(y)
}

impl<T: Real> SeBlock<T> {
    pub fn new(channels: usize, reduction: usize, rng: &mut impl Rng) -> Self {
        let squeezed = (channels / reduction.max(1)).max(1);
        SeBlock {
            fc1: Linear::new(channels, squeezed, rng),
            fc2: Linear::new(squeezed, channels, rng),
        }
    }

    pub fn channels(&self) -> usize {
        self.fc1.weight.value.shape()[1]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, SeCache<T>)> {
        let (_, c, _, _) = x.dims4("se_block")?;
        if c != self.channels() {
            return Err(Error::shape(
                "se_block",
                format!("{c} channels, block built for {}", self.channels()),
            ));
        }
        let squeeze = global_avg_pool(x)?;
        let pre_relu = self.fc1.forward(&squeeze)?;
        let hidden = relu(&pre_relu);
        let excitation = sigmoid(&self.fc2.forward(&hidden)?);
        let y = scale_channels(x, &excitation)?;
        Ok((
            y,
            SeCache {
                x: x.clone(),
                squeeze,
                pre_relu,
                hidden,
                excitation,
            },
        ))
    }

    pub fn backward(&mut self, cache: &SeCache<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, c, h, w) = cache.x.dims4("se_block_backward")?;
        let hw = h * w;
        let mut dx = scale_channels(dy, &cache.excitation)?;
        let mut de = Tensor::zeros(&[n, c]);
        for (i, d) in de.data_mut().iter_mut().enumerate() {
            let r = i * hw..(i + 1) * hw;
            *d = dy.data()[r.clone()]
                .iter()
                .zip(&cache.x.data()[r])
                .map(|(&a, &b)| a * b)
                .sum();
        }
        let da2 = sigmoid_backward(&cache.excitation, &de);
        let dhidden = self.fc2.backward(&cache.hidden, &da2)?;
        let da1 = relu_backward(&cache.pre_relu, &dhidden);
        let dsq = self.fc1.backward(&cache.squeeze, &da1)?;
        let inv = T::one() / T::of(hw as f64);
        for (plane, &g) in dx.data_mut().chunks_mut(hw).zip(dsq.data()) {
            plane.iter_mut().for_each(|v| *v += g * inv);
        }
        Ok(dx)
    }
}

impl<T: Real> Visit<T> for SeBlock<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }
}
