use super::{Real, Tensor};
use crate::error::{Error, Result};

pub fn leaky_relu<T: Real>(x: &Tensor<T>, slope: T) -> Tensor<T> {
    x.map(|v| if v >= T::zero() { v } else { v * slope })
}

pub fn leaky_relu_backward<T: Real>(x: &Tensor<T>, dy: &Tensor<T>, slope: T) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| if v >= T::zero() { g } else { g * slope })
        .collect();
    Tensor::from_vec(x.shape(), data).expect("same shape")
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    leaky_relu(x, T::zero())
}

pub fn relu_backward<T: Real>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    leaky_relu_backward(x, dy, T::zero())
}

#[inline]
pub(crate) fn sigmoid_scalar<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

/// Backward of sigmoid given its output `y`.
pub fn sigmoid_backward<T: Real>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let data = y
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&s, &g)| g * s * (T::one() - s))
        .collect();
    Tensor::from_vec(y.shape(), data).expect("same shape")
}

pub fn tanh<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.tanh())
}

/// Backward of tanh given its output `y`.
pub fn tanh_backward<T: Real>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let data = y
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&t, &g)| g * (T::one() - t * t))
        .collect();
    Tensor::from_vec(y.shape(), data).expect("same shape")
}

/// Softmax over the last axis of a tensor viewed as `[rows, cols]`.
pub fn softmax_rows<T: Real>(x: &Tensor<T>, cols: usize) -> Result<Tensor<T>> {
    if cols == 0 || x.len() % cols != 0 {
        return Err(Error::shape(
            "softmax",
            format!("axis of length {cols} does not tile {} values", x.len()),
        ));
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(out)
}

/// Backward of softmax given its output `y`.
pub fn softmax_rows_backward<T: Real>(y: &Tensor<T>, dy: &Tensor<T>, cols: usize) -> Tensor<T> {
    let mut dx = Tensor::zeros(y.shape());
    for ((yr, gr), dr) in y
        .data()
        .chunks(cols)
        .zip(dy.data().chunks(cols))
        .zip(dx.data_mut().chunks_mut(cols))
    {
        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for ((d, &a), &b) in dr.iter_mut().zip(yr).zip(gr) {
            *d = a * (b - dot);
        }
    }
    dx
}

/// `y = x W^T + b` with `x: [n, in]`, `W: [out, in]`.
pub fn fully_connected<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let (n, fin) = x.dims2("fully_connected")?;
    let (fout, win) = weight.dims2("fully_connected")?;
    if fin != win {
        return Err(Error::shape(
            "fully_connected",
            format!("weight expects {win} features, input has {fin}"),
        ));
    }
    let mut y = Tensor::zeros(&[n, fout]);
    T::gemm(n, fin, fout, x.data(), false, weight.data(), true, T::zero(), y.data_mut());
    if let Some(b) = bias {
        if b.len() != fout {
            return Err(Error::shape("fully_connected", "bias length"));
        }
        for row in y.data_mut().chunks_mut(fout) {
            for (v, &bb) in row.iter_mut().zip(b.data()) {
                *v += bb;
            }
        }
    }
    Ok(y)
}

/// Returns `(dx, dW, db)`.
pub fn fully_connected_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, fin) = x.dims2("fully_connected_backward")?;
    let (fout, _) = weight.dims2("fully_connected_backward")?;
    if dy.shape() != [n, fout] {
        return Err(Error::shape("fully_connected_backward", "grad shape"));
    }
    let mut dx = Tensor::zeros(&[n, fin]);
    T::gemm(n, fout, fin, dy.data(), false, weight.data(), false, T::zero(), dx.data_mut());
    let mut dw = Tensor::zeros(&[fout, fin]);
    T::gemm(fout, n, fin, dy.data(), true, x.data(), false, T::zero(), dw.data_mut());
    let mut db = Tensor::zeros(&[fout]);
    for row in dy.data().chunks(fout) {
        for (d, &g) in db.data_mut().iter_mut().zip(row) {
            *d += g;
        }
    }
    Ok((dx, dw, db))
}

/// Mean over the spatial axes: `[n, c, h, w] -> [n, c]`.
pub fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("global_avg_pool")?;
    let hw = h * w;
    if hw == 0 {
        return Err(Error::shape("global_avg_pool", "empty spatial extent"));
    }
    let inv = T::one() / T::of(hw as f64);
    let data = x.data().chunks(hw).map(|p| p.iter().copied().sum::<T>() * inv).collect();
    Tensor::from_vec(&[n, c], data)
}

pub fn global_avg_pool_backward<T: Real>(shape: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let hw = shape[2] * shape[3];
    let inv = T::one() / T::of(hw as f64);
    let mut dx = Tensor::zeros(shape);
    for (plane, &g) in dx.data_mut().chunks_mut(hw).zip(dy.data()) {
        plane.fill(g * inv);
    }
    dx
}

/// Per-channel batch statistics (biased variance).
#[derive(Debug, Clone)]
pub struct BnStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    /// Number of values each channel statistic was taken over.
    pub count: usize,
}

#[derive(Debug, Clone)]
pub struct BnCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
}

fn bn_dims<T: Real>(x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [n, c] => Ok((n, c, 1)),
        [n, c, h, w] => Ok((n, c, h * w)),
        _ => Err(Error::shape("batch_norm", format!("{:?}", x.shape()))),
    }
}

/// Training-mode batch norm over all axes except channels.
pub fn batch_norm_train<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, BnCache<T>, BnStats<T>)> {
    let (n, c, hw) = bn_dims(x)?;
    if gamma.len() != c || beta.len() != c {
        return Err(Error::shape("batch_norm", "affine parameters vs channels"));
    }
    let count = n * hw;
    let inv_count = T::one() / T::of(count as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let plane = &x.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw];
            mean[ch] += plane.iter().copied().sum::<T>();
        }
    }
    mean.iter_mut().for_each(|m| *m *= inv_count);
    for b in 0..n {
        for ch in 0..c {
            let plane = &x.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw];
            let m = mean[ch];
            var[ch] += plane.iter().map(|&v| (v - m) * (v - m)).sum::<T>();
        }
    }
    var.iter_mut().for_each(|v| *v *= inv_count);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    for b in 0..n {
        for ch in 0..c {
            let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
            let (g, bb, m, s) = (gamma.data()[ch], beta.data()[ch], mean[ch], inv_std[ch]);
            for ((xh, yv), &v) in xhat.data_mut()[r.clone()]
                .iter_mut()
                .zip(&mut y.data_mut()[r.clone()])
                .zip(&x.data()[r])
            {
                *xh = (v - m) * s;
                *yv = g * *xh + bb;
            }
        }
    }
    Ok((y, BnCache { xhat, inv_std }, BnStats { mean, var, count }))
}

/// Inference-mode batch norm with fixed statistics.
pub fn batch_norm_eval<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mean: &Tensor<T>,
    var: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let (n, c, hw) = bn_dims(x)?;
    if gamma.len() != c || beta.len() != c || mean.len() != c || var.len() != c {
        return Err(Error::shape("batch_norm", "statistics vs channels"));
    }
    let mut y = x.clone();
    for b in 0..n {
        for ch in 0..c {
            let s = gamma.data()[ch] / (var.data()[ch] + eps).sqrt();
            let o = beta.data()[ch] - mean.data()[ch] * s;
            for v in &mut y.data_mut()[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                *v = *v * s + o;
            }
        }
    }
    Ok(y)
}

/// Returns `(dx, dgamma, dbeta)` for training-mode batch norm.
pub fn batch_norm_backward<T: Real>(
    cache: &BnCache<T>,
    gamma: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, c, hw) = bn_dims(dy)?;
    let count = T::of((n * hw) as f64);
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
            for (&g, &xh) in dy.data()[r.clone()].iter().zip(&cache.xhat.data()[r]) {
                dgamma[ch] += g * xh;
                dbeta[ch] += g;
            }
        }
    }
    let mut dx = Tensor::zeros(dy.shape());
    for b in 0..n {
        for ch in 0..c {
            let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
            let k = gamma.data()[ch] * cache.inv_std[ch] / count;
            let (sg, sgx) = (dbeta[ch], dgamma[ch]);
            for ((d, &g), &xh) in dx.data_mut()[r.clone()]
                .iter_mut()
                .zip(&dy.data()[r.clone()])
                .zip(&cache.xhat.data()[r])
            {
                *d = k * (count * g - sg - xh * sgx);
            }
        }
    }
    Ok((
        dx,
        Tensor::from_vec(&[c], dgamma)?,
        Tensor::from_vec(&[c], dbeta)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{central_difference, relative_error};

    #[test]
    fn softmax_uniform() {
        let x = Tensor::<f64>::zeros(&[1, 4]);
        assert_eq!(softmax_rows(&x, 4).unwrap().data(), &[0.25; 4]);
        assert!(softmax_rows(&x, 0).is_err());
        assert!(softmax_rows(&x, 3).is_err());
    }

    #[test]
    fn softmax_large_logits_stay_finite() {
        let x = Tensor::<f64>::from_f64(&[1, 3], &[1000.0, 999.0, -1000.0]).unwrap();
        let y = softmax_rows(&x, 3).unwrap();
        assert!(y.all_finite());
        assert!((y.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn leaky_negative_slope() {
        let x = Tensor::<f64>::from_f64(&[2], &[-1.0, 2.0]).unwrap();
        assert_eq!(leaky_relu(&x, 0.01).data(), &[-0.01, 2.0]);
    }

    #[test]
    fn sigmoid_extremes_are_finite() {
        let x = Tensor::<f64>::from_f64(&[3], &[-800.0, 0.0, 800.0]).unwrap();
        let y = sigmoid(&x);
        assert_eq!(y.data()[1], 0.5);
        assert!(y.all_finite());
    }

    #[test]
    fn pool_constant_map() {
        let x = Tensor::<f64>::full(&[1, 1, 3, 4], 7.0);
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[7.0]);
    }

    #[test]
    fn batch_norm_normalizes() {
        let x = Tensor::<f64>::from_f64(&[2, 1, 1, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let g = Tensor::full(&[1], 1.0);
        let b = Tensor::zeros(&[1]);
        let (y, _, stats) = batch_norm_train(&x, &g, &b, 0.0).unwrap();
        assert!((stats.mean[0] - 2.5).abs() < 1e-15);
        assert!((stats.var[0] - 1.25).abs() < 1e-15);
        assert!(y.sum().abs() < 1e-12);
        let e = batch_norm_eval(&x, &g, &b, &Tensor::full(&[1], 2.5), &Tensor::full(&[1], 1.25), 0.0)
            .unwrap();
        for (a, b) in e.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_norm_gradient() {
        let xs: Vec<f64> = (0..24).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.3).collect();
        let x = Tensor::<f64>::from_f64(&[2, 3, 2, 2], &xs).unwrap();
        let gamma = Tensor::<f64>::from_f64(&[3], &[0.5, 1.5, -1.0]).unwrap();
        let beta = Tensor::<f64>::from_f64(&[3], &[0.1, 0.0, -0.2]).unwrap();
        let w: Vec<f64> = (0..24).map(|i| ((i * 13 % 7) as f64 - 3.0) * 0.25).collect();
        let f = |v: &[f64]| {
            let t = Tensor::from_vec(x.shape(), v.to_vec()).unwrap();
            let (y, _, _) = batch_norm_train(&t, &gamma, &beta, 1e-5).unwrap();
            y.data().iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, cache, _) = batch_norm_train(&x, &gamma, &beta, 1e-5).unwrap();
        let dy = Tensor::from_vec(x.shape(), w.clone()).unwrap();
        let (dx, _, _) = batch_norm_backward(&cache, &gamma, &dy).unwrap();
        let num = central_difference(x.data(), 1e-4, f);
        assert!(relative_error(dx.data(), &num) < 1e-5);
    }
}
