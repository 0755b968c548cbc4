use rand::Rng;

use super::act::sigmoid_scalar;
use super::layers::Conv2d;
use super::{join, Real, Slot, Tensor, Visit};
use crate::error::{Error, Result};

/// Convolutional GRU cell.
///
/// ```text
/// z  = sigmoid(conv_z([h, x]))
/// r  = sigmoid(conv_r([h, x]))
/// h~ = tanh(conv_c([r * h, x]))
/// h' = (1 - z) * h + z * h~
/// ```
/// The update and reset convolutions share one kernel: output channels
/// `0..hidden` are `z`, `hidden..2*hidden` are `r`.
#[derive(Debug, Clone)]
pub struct ConvGru<T> {
    pub gates: Conv2d<T>,
    pub candidate: Conv2d<T>,
    hidden: usize,
}

#[derive(Debug, Clone)]
pub struct GruCache<T> {
    h: Tensor<T>,
    hx: Tensor<T>,
    z: Tensor<T>,
    r: Tensor<T>,
    rhx: Tensor<T>,
    cand: Tensor<T>,
}

/// `(1 - z) * h + z * c`, elementwise.
pub fn gru_blend<T: Real>(h: &[T], z: &[T], c: &[T]) -> Vec<T> {
    h.iter()
        .zip(z)
        .zip(c)
        .map(|((&h, &z), &c)| (T::one() - z) * h + z * c)
        .collect()
}

impl<T: Real> ConvGru<T> {
    pub fn new(input: usize, hidden: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        let pad = kernel / 2;
        ConvGru {
            gates: Conv2d::new(hidden + input, 2 * hidden, kernel, 1, pad, true, rng),
            candidate: Conv2d::new(hidden + input, hidden, kernel, 1, pad, true, rng),
            hidden,
        }
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn input_channels(&self) -> usize {
        self.gates.weight.value.shape()[1] - self.hidden
    }

    pub fn forward(&self, h: &Tensor<T>, x: &Tensor<T>) -> Result<(Tensor<T>, GruCache<T>)> {
        let (n, ch, hh, hw) = h.dims4("conv_gru")?;
        let (nx, cx, xh, xw) = x.dims4("conv_gru")?;
        if ch != self.hidden || (n, hh, hw) != (nx, xh, xw) || cx != self.input_channels() {
            return Err(Error::shape(
                "conv_gru",
                format!(
                    "hidden {:?} / input {:?} vs cell ({} hidden, {} input)",
                    h.shape(),
                    x.shape(),
                    self.hidden,
                    self.input_channels()
                ),
            ));
        }
        let hx = Tensor::concat_channels(h, x)?;
        let pre = self.gates.forward(&hx)?;
        let gates = pre.map(sigmoid_scalar);
        let (z, r) = gates.split_channels(ch)?;
        let rh: Vec<T> = r.data().iter().zip(h.data()).map(|(&a, &b)| a * b).collect();
        let rhx = Tensor::concat_channels(&Tensor::from_vec(h.shape(), rh)?, x)?;
        let cand = self.candidate.forward(&rhx)?.map(|v| v.tanh());
        let out = Tensor::from_vec(h.shape(), gru_blend(h.data(), z.data(), cand.data()))?;
        Ok((
            out,
            GruCache {
                h: h.clone(),
                hx,
                z,
                r,
                rhx,
                cand,
            },
        ))
    }

    /// Returns `(d hidden, d input)`; accumulates parameter gradients.
    pub fn backward(
        &mut self,
        cache: &GruCache<T>,
        dout: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let ch = self.hidden;
        let one = T::one();
        let (h, z, r, c) = (cache.h.data(), cache.z.data(), cache.r.data(), cache.cand.data());
        let g = dout.data();
        let mut dh: Vec<T> = g.iter().zip(z).map(|(&g, &z)| g * (one - z)).collect();
        let dz_pre: Vec<T> = (0..g.len())
            .map(|i| g[i] * (c[i] - h[i]) * z[i] * (one - z[i]))
            .collect();
        let dc_pre: Vec<T> = (0..g.len())
            .map(|i| g[i] * z[i] * (one - c[i] * c[i]))
            .collect();
        let d_rhx = self
            .candidate
            .backward(&cache.rhx, &Tensor::from_vec(cache.h.shape(), dc_pre)?)?;
        let (d_rh, mut dx) = d_rhx.split_channels(ch)?;
        let mut dr_pre = vec![T::zero(); g.len()];
        for i in 0..g.len() {
            let d = d_rh.data()[i];
            dh[i] += d * r[i];
            dr_pre[i] = d * h[i] * r[i] * (one - r[i]);
        }
        let dgates = Tensor::concat_channels(
            &Tensor::from_vec(cache.h.shape(), dz_pre)?,
            &Tensor::from_vec(cache.h.shape(), dr_pre)?,
        )?;
        let d_hx = self.gates.backward(&cache.hx, &dgates)?;
        let (dh2, dx2) = d_hx.split_channels(ch)?;
        for (a, &b) in dh.iter_mut().zip(dh2.data()) {
            *a += b;
        }
        dx.add_assign(&dx2);
        Ok((Tensor::from_vec(cache.h.shape(), dh)?, dx))
    }
}

impl<T: Real> Visit<T> for ConvGru<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        self.gates.visit(&join(prefix, "gates"), f);
        self.candidate.visit(&join(prefix, "candidate"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{central_difference, relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_gates_average_state_and_candidate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut cell = ConvGru::<f64>::new(2, 3, 3, &mut rng);
        cell.gates.weight.value.fill(0.0);
        cell.gates.bias.as_mut().unwrap().value.fill(0.0);
        let h = random(&[1, 3, 4, 3], &mut rng);
        let x = random(&[1, 2, 4, 3], &mut rng);
        let (out, cache) = cell.forward(&h, &x).unwrap();
        assert!(cache.z.data().iter().all(|&z| z == 0.5));
        // candidate sees r*h with r = 0.5
        let half_h: Vec<f64> = h.data().iter().map(|v| 0.5 * v).collect();
        let rhx = Tensor::concat_channels(&Tensor::from_vec(h.shape(), half_h).unwrap(), &x).unwrap();
        let cand = cell.candidate.forward(&rhx).unwrap().map(f64::tanh);
        for i in 0..out.len() {
            let expect = 0.5 * h.data()[i] + 0.5 * cand.data()[i];
            assert!((out.data()[i] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn saturated_update_gate_keeps_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut cell = ConvGru::<f64>::new(2, 2, 3, &mut rng);
        cell.gates.weight.value.fill(0.0);
        let bias = cell.gates.bias.as_mut().unwrap();
        bias.value.data_mut()[..2].fill(-50.0);
        let h = random(&[1, 2, 3, 3], &mut rng);
        let x = random(&[1, 2, 3, 3], &mut rng);
        let (out, _) = cell.forward(&h, &x).unwrap();
        for (a, b) in out.data().iter().zip(h.data()) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_update_gate_is_bit_identical() {
        let h = [0.3, -1.7, 1e-300, 42.0];
        let z = [0.0; 4];
        let c = [0.9, -0.2, 0.5, -1.0];
        assert_eq!(gru_blend(&h, &z, &c), h.to_vec());
    }

    #[test]
    fn rejects_mismatched_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cell = ConvGru::<f64>::new(2, 2, 3, &mut rng);
        let h = Tensor::zeros(&[1, 2, 3, 3]);
        assert!(cell.forward(&h, &Tensor::zeros(&[1, 2, 4, 3])).is_err());
        assert!(cell.forward(&h, &Tensor::zeros(&[1, 3, 3, 3])).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cell = ConvGru::<f64>::new(2, 2, 3, &mut rng);
        let h = random(&[1, 2, 2, 2], &mut rng);
        let x = random(&[1, 2, 2, 2], &mut rng);
        let w = random(&[1, 2, 2, 2], &mut rng);
        let loss = |h: &Tensor<f64>, x: &Tensor<f64>| {
            let (o, _) = cell.forward(h, x).unwrap();
            o.data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut cell_b = cell.clone();
        let (_, cache) = cell.forward(&h, &x).unwrap();
        let (dh, dx) = cell_b.backward(&cache, &w).unwrap();
        let nh = central_difference(h.data(), 1e-4, |v| {
            loss(&Tensor::from_vec(h.shape(), v.to_vec()).unwrap(), &x)
        });
        let nx = central_difference(x.data(), 1e-4, |v| {
            loss(&h, &Tensor::from_vec(x.shape(), v.to_vec()).unwrap())
        });
        assert!(relative_error(dh.data(), &nh) < 1e-5);
        assert!(relative_error(dx.data(), &nx) < 1e-5);
    }
}
