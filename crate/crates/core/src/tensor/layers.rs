use rand::Rng;

use super::act::{
    batch_norm_backward, batch_norm_eval, batch_norm_train, fully_connected,
    fully_connected_backward, BnCache,
};
use super::conv::{conv2d, conv2d_backward, upconv2d, upconv2d_backward};
use super::{join, Param, Real, Slot, Tensor, Visit};
use crate::error::Result;

/// Batch-norm behaviour: batch statistics (and running-stat updates) or
/// fixed running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

fn uniform<T: Real>(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.random_range(-bound..=bound))).collect();
    Tensor::from_vec(shape, data).expect("shape product")
}

#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Real> Conv2d<T> {
    /// He-uniform initialised square-kernel convolution.
    pub fn new(
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = (cin * kernel * kernel) as f64;
        let bound = (6.0 / fan_in).sqrt();
        Conv2d {
            weight: Param::new(uniform(&[cout, cin, kernel, kernel], bound, rng)),
            bias: bias.then(|| Param::new(Tensor::zeros(&[cout]))),
            stride,
            pad,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d(
            x,
            &self.weight.value,
            self.bias.as_ref().map(|b| &b.value),
            self.stride,
            self.pad,
        )
    }

    pub fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let g = conv2d_backward(x, &self.weight.value, dy, self.stride, self.pad)?;
        self.weight.grad.add_assign(&g.kernel);
        if let Some(b) = &mut self.bias {
            b.grad.add_assign(&g.bias);
        }
        Ok(g.input)
    }
}

impl<T: Real> Visit<T> for Conv2d<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        f(&join(prefix, "weight"), Slot::Param(&mut self.weight));
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), Slot::Param(b));
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConvTranspose2d<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub stride: usize,
    pub pad: usize,
    pub out_pad: usize,
}

impl<T: Real> ConvTranspose2d<T> {
    pub fn new(
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        out_pad: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        // each output pixel receives roughly cin * (k / stride)^2 taps
        let taps = (cin * kernel * kernel) as f64 / (stride * stride) as f64;
        let bound = (6.0 / taps.max(1.0)).sqrt();
        ConvTranspose2d {
            weight: Param::new(uniform(&[cin, cout, kernel, kernel], bound, rng)),
            bias: bias.then(|| Param::new(Tensor::zeros(&[cout]))),
            stride,
            pad,
            out_pad,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        upconv2d(
            x,
            &self.weight.value,
            self.bias.as_ref().map(|b| &b.value),
            self.stride,
            self.pad,
            self.out_pad,
        )
    }

    pub fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let g = upconv2d_backward(x, &self.weight.value, dy, self.stride, self.pad, self.out_pad)?;
        self.weight.grad.add_assign(&g.kernel);
        if let Some(b) = &mut self.bias {
            b.grad.add_assign(&g.bias);
        }
        Ok(g.input)
    }
}

impl<T: Real> Visit<T> for ConvTranspose2d<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        f(&join(prefix, "weight"), Slot::Param(&mut self.weight));
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), Slot::Param(b));
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Real> Linear<T> {
    pub fn new(fin: usize, fout: usize, rng: &mut impl Rng) -> Self {
        let bound = (1.0 / fin as f64).sqrt();
        Linear {
            weight: Param::new(uniform(&[fout, fin], bound, rng)),
            bias: Param::new(Tensor::zeros(&[fout])),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        fully_connected(x, &self.weight.value, Some(&self.bias.value))
    }

    pub fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let (dx, dw, db) = fully_connected_backward(x, &self.weight.value, dy)?;
        self.weight.grad.add_assign(&dw);
        self.bias.grad.add_assign(&db);
        Ok(dx)
    }
}

impl<T: Real> Visit<T> for Linear<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        f(&join(prefix, "weight"), Slot::Param(&mut self.weight));
        f(&join(prefix, "bias"), Slot::Param(&mut self.bias));
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    /// Weight kept on the old running statistic at each update.
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Param::new(Tensor::full(&[channels], T::one())),
            beta: Param::new(Tensor::zeros(&[channels])),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
            momentum: 0.9,
            eps: 1e-5,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Option<BnCache<T>>)> {
        match mode {
            Mode::Eval => Ok((
                batch_norm_eval(
                    x,
                    &self.gamma.value,
                    &self.beta.value,
                    &self.running_mean,
                    &self.running_var,
                    T::of(self.eps),
                )?,
                None,
            )),
            Mode::Train => {
                let (y, cache, stats) =
                    batch_norm_train(x, &self.gamma.value, &self.beta.value, T::of(self.eps))?;
                let keep = T::of(self.momentum);
                let take = T::one() - keep;
                let unbias = if stats.count > 1 {
                    T::of(stats.count as f64 / (stats.count - 1) as f64)
                } else {
                    T::one()
                };
                for (r, &m) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
                    *r = keep * *r + take * m;
                }
                for (r, &v) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
                    *r = keep * *r + take * v * unbias;
                }
                Ok((y, Some(cache)))
            }
        }
    }

    pub fn backward(&mut self, cache: &BnCache<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let (dx, dg, db) = batch_norm_backward(cache, &self.gamma.value, dy)?;
        self.gamma.grad.add_assign(&dg);
        self.beta.grad.add_assign(&db);
        Ok(dx)
    }
}

impl<T: Real> Visit<T> for BatchNorm<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        f(&join(prefix, "gamma"), Slot::Param(&mut self.gamma));
        f(&join(prefix, "beta"), Slot::Param(&mut self.beta));
        f(&join(prefix, "running_mean"), Slot::Buffer(&mut self.running_mean));
        f(&join(prefix, "running_var"), Slot::Buffer(&mut self.running_var));
    }
}
