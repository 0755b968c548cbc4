//! Analytic-versus-numerical gradient checks for every differentiable
//! layer and for the estimator loss through the whole network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::estimator::{window_gradient, window_loss, EstimatorConfig, GroundTruthFrame, Network};
use crate::frames::{NormFrame, ScreenGeometry, GRID_COLS, GRID_ROWS};
use crate::tensor::gradcheck::{central_difference, relative_error};
use crate::tensor::{
    batch_norm_backward, batch_norm_train, conv2d, conv2d_backward, fully_connected,
    fully_connected_backward, global_avg_pool, global_avg_pool_backward, leaky_relu,
    leaky_relu_backward, sigmoid, sigmoid_backward, softmax_rows, softmax_rows_backward, upconv2d,
    upconv2d_backward, ConvGru, SeBlock, Slot, Tensor, Visit,
};

/// Finite-difference step for the per-layer checks.
pub const OP_STEP: f64 = 1e-4;
pub const OP_TOLERANCE: f64 = 1e-4;
/// Step and tolerance for the end-to-end network check.
pub const NETWORK_STEP: f64 = 1e-6;
pub const NETWORK_TOLERANCE: f64 = 1e-3;
/// Parameters probed per end-to-end check.
pub const NETWORK_PROBES: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub op: String,
    pub seeds: usize,
    /// Largest relative error over all seeds.
    pub worst: f64,
    pub tolerance: f64,
    /// Probes redrawn because their finite difference straddled a kink.
    pub redrawn: usize,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.worst < self.tolerance
    }
}

type Case = fn(&mut ChaCha8Rng) -> Result<f64>;

const OPS: [(&str, Case); 11] = [
    ("conv2d", conv_case),
    ("upconv2d", upconv_case),
    ("batch_norm", batch_norm_case),
    ("leaky_relu", leaky_case),
    ("sigmoid", sigmoid_case),
    ("softmax", softmax_case),
    ("fully_connected", fc_case),
    ("global_avg_pool", gap_case),
    ("conv_gru", gru_case),
    ("se_block", se_case),
    ("tanh", tanh_case),
];

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(shape, v).expect("shape product")
}

/// Values bounded away from zero so kinked activations are probed off
/// their kink.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    random(rng, shape).map(|v| if v.abs() < 0.05 { v + 0.1f64.copysign(v) } else { v })
}

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, v).expect("probe keeps shape")
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Compares an analytic gradient with central differences of `f` around
/// `x`.
fn compare(x: &[f64], analytic: &[f64], f: impl FnMut(&[f64]) -> f64) -> f64 {
    relative_error(analytic, &central_difference(x, OP_STEP, f))
}

fn concat(parts: &[&Tensor<f64>]) -> Vec<f64> {
    parts.iter().flat_map(|p| p.data().iter().copied()).collect()
}

fn conv_case(rng: &mut ChaCha8Rng) -> Result<f64> {
    let stride = rng.random_range(1..=2);
    let pad = rng.random_range(0..=1);
    let (cin, cout) = (rng.random_range(1..=3), rng.random_range(1..=3));
    let xs = [1, cin, rng.random_range(3..=5), rng.random_range(3..=5)];
    let ks = [cout, cin, 3, 3];
    let x = random(rng, &xs);
    let k = random(rng, &ks);
    let b = random(rng, &[cout]);
    let y = conv2d(&x, &k, Some(&b), stride, pad)?;
    let w = random(rng, y.shape());
    let g = conv2d_backward(&x, &k, &w, stride, pad)?;
    let nx = x.len();
    let nk = k.len();
    Ok(compare(&concat(&[&x, &k, &b]), &concat(&[&g.input, &g.kernel, &g.bias]), |v| {
        let y = conv2d(&t(&xs, &v[..nx]), &t(&ks, &v[nx..nx + nk]), Some(&t(&[cout], &v[nx + nk..])), stride, pad)
            .expect("same geometry");
        dot(&y, &w)
    }))
}

fn upconv_case(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (cin, cout) = (rng.random_range(1..=3), rng.random_range(1..=3));
    let xs = [1, cin, rng.random_range(2..=3), rng.random_range(2..=3)];
    let ks = [cin, cout, 3, 3];
    let x = random(rng, &xs);
    let k = random(rng, &ks);
    let b = random(rng, &[cout]);
    let y = upconv2d(&x, &k, Some(&b), 2, 1, 1)?;
    let w = random(rng, y.shape());
    let g = upconv2d_backward(&x, &k, &w, 2, 1, 1)?;
    let nx = x.len();
    let nk = k.len();
    Ok(compare(&concat(&[&x, &k, &b]), &concat(&[&g.input, &g.kernel, &g.bias]), |v| {
        let y = upconv2d(&t(&xs, &v[..nx]), &t(&ks, &v[nx..nx + nk]), Some(&t(&[cout], &v[nx + nk..])), 2, 1, 1)
            .expect("same geometry");
        dot(&y, &w)
    }))
}

fn batch_norm_case(rng: &mut ChaCha8Rng) -> Result<f64> {
    let c = rng.random_range(1..=3);
    let xs = [2, c, 2, 3];
    let x = random(rng, &xs);
    let gamma = random(rng, &[c]);
    let beta = random(rng, &[c]);
    let eps = 1e-5;
    let (y, cache, _) = batch_norm_train(&x, &gamma, &beta, eps)?;
    let w = random(rng, y.shape());
    let (dx, dg, db) = batch_norm_backward(&cache, &gamma, &w)?;
    let nx = x.len();
    Ok(compare(&concat(&[&x, &gamma, &beta]), &concat(&[&dx, &dg, &db]), |v| {
        let (y, _, _) = batch_norm_train(&t(&xs, &v[..nx]), &t(&[c], &v[nx..nx + c]), &t(&[c], &v[nx + c..]), eps)
            .expect("same shape");
        dot(&y, &w)
    }))
}

fn leaky_case(rng: &mut ChaCha8Rng) -> Result<f64> {
    let x = off_zero(rng, &[3, 5]);
    let w = random(rng, &[3, 5]);
    let dx = leaky_relu_backward(&x, &w, 0.01);
    Ok(compare(x.data(), dx.data(), |v| dot(&leaky_relu(&t(&[3, 5], v), 0.01), &w)))
}

fn sigmoid_case(rng: &mut ChaCha8Rng) -> Result<f64> {
    let x = random(rng, &[3, 5]).map(|v| 4.0 * v);
    let w = random(rng, &[3, 5]);
    let dx = sigmoid_backward(&sigmoid(&x), &w);
    Ok(compare(x.data(), dx.data(), |v| dot(&sigmoid(&t(&[3, 5], v)), &w)))
}

fn tanh_case(rng: &mut ChaCha8Rng) -> Result<f64> {
    use crate::tensor::{tanh, tanh_backward};
    let x = random(rng, &[3, 5]).map(|v| 2.0 * v);
    let w = random(rng, &[3, 5]);
    let dx = tanh_backward(&tanh(&x), &w);
    Ok(compare(x.data(), dx.data(), |v| dot(&tanh(&t(&[3, 5], v)), &w)))
}

fn softmax_case(rng: &mut ChaCha8Rng) -> Result<f64> {
    let cols = rng.random_range(2..=6);
    let shape = [3, cols];
    let x = random(rng, &shape).map(|v| 3.0 * v);
    let w = random(rng, &shape);
    let dx = softmax_rows_backward(&softmax_rows(&x, cols)?, &w, cols);
    Ok(compare(x.data(), dx.data(), |v| {
        dot(&softmax_rows(&t(&shape, v), cols).expect("cols tile"), &w)
    }))
}

fn fc_case(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (n, fin, fout) = (2, rng.random_range(1..=4), rng.random_range(1..=4));
    let x = random(rng, &[n, fin]);
    let wt = random(rng, &[fout, fin]);
    let b = random(rng, &[fout]);
    let w = random(rng, &[n, fout]);
    let (dx, dw, db) = fully_connected_backward(&x, &wt, &w)?;
    let (nx, nw) = (x.len(), wt.len());
    Ok(compare(&concat(&[&x, &wt, &b]), &concat(&[&dx, &dw, &db]), |v| {
        let y = fully_connected(&t(&[n, fin], &v[..nx]), &t(&[fout, fin], &v[nx..nx + nw]), Some(&t(&[fout], &v[nx + nw..])))
            .expect("same shape");
        dot(&y, &w)
    }))
}

fn gap_case(rng: &mut ChaCha8Rng) -> Result<f64> {
    let shape = [2, 3, rng.random_range(1..=4), rng.random_range(1..=4)];
    let x = random(rng, &shape);
    let w = random(rng, &[2, 3]);
    let dx = global_avg_pool_backward(&shape, &w);
    Ok(compare(x.data(), dx.data(), |v| {
        dot(&global_avg_pool(&t(&shape, v)).expect("non-empty"), &w)
    }))
}

/// Flattened parameter values of a module, in visiting order.
fn param_values(m: &mut dyn Visit<f64>) -> Vec<f64> {
    let mut out = Vec::new();
    m.visit("", &mut |_, s| {
        if let Slot::Param(p) = s {
            out.extend_from_slice(p.value.data());
        }
    });
    out
}

fn param_grads(m: &mut dyn Visit<f64>) -> Vec<f64> {
    let mut out = Vec::new();
    m.visit("", &mut |_, s| {
        if let Slot::Param(p) = s {
            out.extend_from_slice(p.grad.data());
        }
    });
    out
}

fn set_params(m: &mut dyn Visit<f64>, values: &[f64]) {
    let mut at = 0;
    m.visit("", &mut |_, s| {
        if let Slot::Param(p) = s {
            let n = p.value.len();
            p.value.data_mut().copy_from_slice(&values[at..at + n]);
            at += n;
        }
    });
}

fn gru_case(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (hidden, input) = (2, 2);
    let hs = [1, hidden, 2, 2];
    let xs = [1, input, 2, 2];
    let mut cell = ConvGru::<f64>::new(input, hidden, 3, rng);
    let h = random(rng, &hs);
    let x = random(rng, &xs);
    let (y, cache) = cell.forward(&h, &x)?;
    let w = random(rng, y.shape());
    cell.zero_grad();
    let (dh, dx) = cell.backward(&cache, &w)?;
    let mut analytic = concat(&[&dh, &dx]);
    analytic.extend(param_grads(&mut cell));
    let mut point = concat(&[&h, &x]);
    point.extend(param_values(&mut cell));
    let (nh, nx) = (h.len(), x.len());
    Ok(compare(&point, &analytic, |v| {
        let mut c = cell.clone();
        set_params(&mut c, &v[nh + nx..]);
        let (y, _) = c.forward(&t(&hs, &v[..nh]), &t(&xs, &v[nh..nh + nx])).expect("same shape");
        dot(&y, &w)
    }))
}

fn se_case(rng: &mut ChaCha8Rng) -> Result<f64> {
    let c = 8;
    let xs = [2, c, 2, 3];
    let mut se = SeBlock::<f64>::new(c, 4, rng);
    let x = random(rng, &xs);
    let (y, cache) = se.forward(&x)?;
    let w = random(rng, y.shape());
    se.zero_grad();
    let dx = se.backward(&cache, &w)?;
    let mut analytic = dx.data().to_vec();
    analytic.extend(param_grads(&mut se));
    let mut point = x.data().to_vec();
    point.extend(param_values(&mut se));
    let nx = x.len();
    Ok(compare(&point, &analytic, |v| {
        let mut s = se.clone();
        set_params(&mut s, &v[nx..]);
        let (y, _) = s.forward(&t(&xs, &v[..nx])).expect("same shape");
        dot(&y, &w)
    }))
}

/// End-to-end check on a desk-scale network unrolled over two frames:
/// relative error of the loss gradient w.r.t. `NETWORK_PROBES` random
/// parameters, and the number of probes redrawn.
///
/// A probe whose `±NETWORK_STEP` evaluations change the sign of any
/// rectifier input straddles a kink, where a central difference averages
/// two slopes instead of measuring the gradient; such probes are redrawn.
pub fn network_case(seed: u64) -> Result<(f64, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = EstimatorConfig::desk();
    let mut net = Network::<f64>::new(&cfg, &mut rng)?;
    let geom = ScreenGeometry::default();
    let window: Vec<(NormFrame, GroundTruthFrame)> = (0..2).map(|_| random_sample(&mut rng, &geom)).collect();
    let samples = vec![window];
    net.zero_grad();
    window_gradient(&mut net, &samples, &geom)?;

    let mut sizes = Vec::new();
    net.visit("", &mut |_, s| {
        if let Slot::Param(p) = s {
            sizes.push(p.value.len());
        }
    });
    let offsets: Vec<usize> = sizes.iter().scan(0, |acc, &n| {
        let o = *acc;
        *acc += n;
        Some(o)
    }).collect();
    let grads = param_grads(&mut net);
    let base = param_values(&mut net);
    let mut probe_net = net.clone();
    let (_, base_signs) = window_loss(&mut probe_net, &samples, &geom)?;
    let mut eval = |i: usize, x: f64| -> Result<(f64, bool)> {
        let mut values = base.clone();
        values[i] = x;
        set_params(&mut probe_net, &values);
        let (l, signs) = window_loss(&mut probe_net, &samples, &geom)?;
        Ok((l.total / samples.len() as f64, signs == base_signs))
    };
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    let mut redrawn = 0;
    while analytic.len() < NETWORK_PROBES {
        if redrawn > 20 * NETWORK_PROBES {
            return Err(Error::InvalidInput(format!("seed {seed}: every probe crosses an activation kink")));
        }
        let ti = rng.random_range(0..sizes.len());
        let i = offsets[ti] + rng.random_range(0..sizes[ti]);
        let (fp, same_p) = eval(i, base[i] + NETWORK_STEP)?;
        let (fm, same_m) = eval(i, base[i] - NETWORK_STEP)?;
        if !(same_p && same_m) {
            redrawn += 1;
            continue;
        }
        analytic.push(grads[i]);
        numeric.push((fp - fm) / (2.0 * NETWORK_STEP));
    }
    Ok((relative_error(&analytic, &numeric), redrawn))
}

fn random_sample(rng: &mut ChaCha8Rng, geom: &ScreenGeometry) -> (NormFrame, GroundTruthFrame) {
    let values: Vec<f64> = (0..GRID_ROWS * GRID_COLS)
        .map(|_| if rng.random_bool(0.2) { rng.random_range(0.6..1.0) } else { 0.0 })
        .collect();
    let frame = NormFrame {
        values,
        validity: vec![1.0; GRID_ROWS * GRID_COLS],
    };
    let mut hands = [None, None];
    hands[rng.random_range(0..2)] = Some(std::array::from_fn(|_| {
        [
            rng.random_range(0.0..geom.width_mm),
            rng.random_range(0.0..geom.height_mm),
            rng.random_range(-5.0..60.0),
        ]
    }));
    (frame, GroundTruthFrame::from_screen(hands, geom))
}

/// Runs every per-layer check over `seeds` seeds, plus the end-to-end
/// network check over `network_seeds` seeds.
pub fn gradient_suite(seeds: u64, network_seeds: u64) -> Result<Vec<GradCheck>> {
    let mut out = Vec::new();
    for (name, case) in OPS {
        let mut worst = 0.0f64;
        for s in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            worst = worst.max(case(&mut rng)?);
        }
        out.push(GradCheck {
            op: name.to_string(),
            seeds: seeds as usize,
            worst,
            tolerance: OP_TOLERANCE,
            redrawn: 0,
        });
    }
    if network_seeds > 0 {
        let (mut worst, mut redrawn) = (0.0f64, 0);
        for s in 0..network_seeds {
            let (e, r) = network_case(s)?;
            worst = worst.max(e);
            redrawn += r;
        }
        out.push(GradCheck {
            op: "loss_end_to_end".to_string(),
            seeds: network_seeds as usize,
            worst,
            tolerance: NETWORK_TOLERANCE,
            redrawn,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ops_pass_on_a_few_seeds() {
        for c in gradient_suite(5, 0).unwrap() {
            assert!(c.passed(), "{} worst {}", c.op, c.worst);
        }
    }

    #[test]
    fn network_gradient_matches() {
        let (e, _) = network_case(7).unwrap();
        assert!(e < NETWORK_TOLERANCE, "{e}");
    }
}
