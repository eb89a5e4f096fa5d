//! Central finite-difference gradient oracle.
//!
//! Verifies tape backward passes against numeric differentiation of the
//! forward path only; nothing here touches the reverse-mode code. Run in f64
//! — in f32 the truncation/rounding tradeoff leaves no usable step size.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::Result;
use crate::float::Float;
use crate::ops;
use crate::rng::Rng;
use crate::tape::{Tape, ValId};
use crate::tensor::Tensor;

/// Numeric gradient of `loss_fn` w.r.t. every element of every parameter,
/// via central differences with step `h`.
pub fn finite_difference_gradients<F>(
    params: &[Tensor<f64>],
    mut loss_fn: F,
    h: f64,
) -> Result<Vec<Tensor<f64>>>
where
    F: FnMut(&[Tensor<f64>]) -> Result<f64>,
{
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut grads = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut grad = Tensor::zeros(params[p].shape());
        for i in 0..params[p].elements() {
            let orig = work[p].data()[i];
            work[p].data_mut()[i] = orig + h;
            let plus = loss_fn(&work)?;
            work[p].data_mut()[i] = orig - h;
            let minus = loss_fn(&work)?;
            work[p].data_mut()[i] = orig;
            grad.data_mut()[i] = (plus - minus) / (2.0 * h);
        }
        grads.push(grad);
    }
    Ok(grads)
}

/// max over elements of |analytic - numeric| / max(1, |numeric|).
pub fn max_relative_error(analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> f64 {
    debug_assert_eq!(analytic.shape(), numeric.shape());
    let mut worst = 0.0f64;
    for (a, n) in analytic.data().iter().zip(numeric.data()) {
        let rel = (a - n).abs() / n.abs().max(1.0);
        if rel > worst {
            worst = rel;
        }
    }
    worst
}

const FD_STEP: f64 = 1e-5;

/// Worst relative error per layer type, over `instances` random cases each.
#[derive(Debug, Clone)]
pub struct LayerSuiteReport {
    pub layers: Vec<(&'static str, f64)>,
}

impl LayerSuiteReport {
    pub fn worst(&self) -> f64 {
        self.layers.iter().fold(0.0, |acc, (_, e)| acc.max(*e))
    }
}

fn random_tensor(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    let data = (0..shape.iter().product::<usize>())
        .map(|_| rng.normal() as f64)
        .collect();
    Tensor::from_vec(shape, data).expect("random tensor")
}

/// Analytic gradients for `params` under a tape-built scalar loss.
fn tape_gradients(
    params: &[Tensor<f64>],
    build: impl Fn(&mut Tape<f64>, &[ValId]) -> Result<ValId>,
) -> Result<Vec<Tensor<f64>>> {
    let mut tape = Tape::new();
    let ids: Vec<ValId> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = build(&mut tape, &ids)?;
    let grads = tape.backward(loss)?;
    Ok(ids
        .iter()
        .map(|id| grads.get(*id).expect("param grad").clone())
        .collect())
}

fn compare<F>(params: &[Tensor<f64>], analytic: &[Tensor<f64>], loss_fn: F) -> Result<f64>
where
    F: FnMut(&[Tensor<f64>]) -> Result<f64>,
{
    let numeric = finite_difference_gradients(params, loss_fn, FD_STEP)?;
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(&numeric) {
        worst = worst.max(max_relative_error(a, n));
    }
    Ok(worst)
}

fn check_conv(rng: &mut Rng) -> Result<f64> {
    let (n, c, f) = (1 + rng.below(2), 1 + rng.below(3), 1 + rng.below(4));
    let k = if rng.coin() { 1 } else { 3 };
    let stride = 1 + rng.below(2);
    let pad = rng.below(2);
    let (h, w) = (k + 2 + rng.below(3), k + 2 + rng.below(3));
    let params = [
        random_tensor(&[n, c, h, w], rng),
        random_tensor(&[f, c, k, k], rng),
        random_tensor(&[f], rng),
    ];
    let oh = ops::out_extent(h, k, stride, pad).unwrap();
    let ow = ops::out_extent(w, k, stride, pad).unwrap();
    let proj = random_tensor(&[n, f, oh, ow], rng);
    let analytic = tape_gradients(&params, |tape, ids| {
        let y = tape.conv2d(ids[0], ids[1], ids[2], stride, pad)?;
        tape.weighted_sum(y, &proj)
    })?;
    compare(&params, &analytic, |ps| {
        let y = ops::conv2d_forward(&ps[0], &ps[1], &ps[2], stride, pad)?;
        ops::weighted_sum_forward(&y, &proj)
    })
}

fn check_batchnorm_train(rng: &mut Rng) -> Result<f64> {
    let (n, c, h, w) = (
        2 + rng.below(2),
        1 + rng.below(3),
        2 + rng.below(2),
        2 + rng.below(2),
    );
    let eps = 1e-5;
    let gamma = Tensor::from_vec(
        &[c],
        (0..c).map(|_| 1.0 + 0.3 * rng.normal() as f64).collect(),
    )?;
    let params = [
        random_tensor(&[n, c, h, w], rng),
        gamma,
        random_tensor(&[c], rng),
    ];
    let proj = random_tensor(&[n, c, h, w], rng);
    let analytic = tape_gradients(&params, |tape, ids| {
        let (y, _, _) = tape.batchnorm_train(ids[0], ids[1], ids[2], eps)?;
        tape.weighted_sum(y, &proj)
    })?;
    compare(&params, &analytic, |ps| {
        let (y, _) = ops::batchnorm_train_forward(&ps[0], &ps[1], &ps[2], eps)?;
        ops::weighted_sum_forward(&y, &proj)
    })
}

fn check_batchnorm_eval(rng: &mut Rng) -> Result<f64> {
    let (n, c, h, w) = (
        1 + rng.below(2),
        1 + rng.below(3),
        2 + rng.below(2),
        2 + rng.below(2),
    );
    let eps = 1e-5;
    let mean = random_tensor(&[c], rng);
    let var = Tensor::from_vec(&[c], (0..c).map(|_| 0.5 + rng.uniform_f64()).collect())?;
    let params = [
        random_tensor(&[n, c, h, w], rng),
        random_tensor(&[c], rng),
        random_tensor(&[c], rng),
    ];
    let proj = random_tensor(&[n, c, h, w], rng);
    let analytic = tape_gradients(&params, |tape, ids| {
        let y = tape.batchnorm_eval(ids[0], ids[1], ids[2], &mean, &var, eps)?;
        tape.weighted_sum(y, &proj)
    })?;
    compare(&params, &analytic, |ps| {
        let y = ops::batchnorm_eval_forward(&ps[0], &ps[1], &ps[2], &mean, &var, eps)?;
        ops::weighted_sum_forward(&y, &proj)
    })
}

fn check_relu(rng: &mut Rng) -> Result<f64> {
    let shape = [1 + rng.below(2), 1 + rng.below(3), 3, 3];
    // keep inputs away from the kink at zero, where FD is meaningless
    let data: Vec<f64> = (0..shape.iter().product::<usize>())
        .map(|_| {
            let v = rng.normal() as f64;
            let sign = if v >= 0.0 { 1.0 } else { -1.0 };
            sign * (0.05 + v.abs())
        })
        .collect();
    let params = [Tensor::from_vec(&shape, data)?];
    let proj = random_tensor(&shape, rng);
    let analytic = tape_gradients(&params, |tape, ids| {
        let y = tape.relu(ids[0]);
        tape.weighted_sum(y, &proj)
    })?;
    compare(&params, &analytic, |ps| {
        ops::weighted_sum_forward(&ops::relu_forward(&ps[0]), &proj)
    })
}

fn check_maxpool(rng: &mut Rng) -> Result<f64> {
    let kernel = 2 + rng.below(2);
    let stride = 2;
    let (h, w) = (kernel + 2 + rng.below(3), kernel + 2 + rng.below(3));
    let shape = [1 + rng.below(2), 1 + rng.below(2), h, w];
    // distinct values with comfortable margins so FD cannot cross a tie
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let mut data = vec![0.0f64; n];
    for (rank, idx) in order.iter().enumerate() {
        data[*idx] = rank as f64 * 0.01 + rng.uniform_f64() * 1e-3;
    }
    let params = [Tensor::from_vec(&shape, data)?];
    let oh = ops::out_extent(h, kernel, stride, 0).unwrap();
    let ow = ops::out_extent(w, kernel, stride, 0).unwrap();
    let proj = random_tensor(&[shape[0], shape[1], oh, ow], rng);
    let analytic = tape_gradients(&params, |tape, ids| {
        let y = tape.maxpool(ids[0], kernel, stride)?;
        tape.weighted_sum(y, &proj)
    })?;
    compare(&params, &analytic, |ps| {
        ops::weighted_sum_forward(&ops::maxpool_forward(&ps[0], kernel, stride)?.0, &proj)
    })
}

fn check_concat(rng: &mut Rng) -> Result<f64> {
    let (n, h, w) = (1 + rng.below(2), 2 + rng.below(2), 2 + rng.below(2));
    let (ca, cb) = (1 + rng.below(3), 1 + rng.below(3));
    let params = [
        random_tensor(&[n, ca, h, w], rng),
        random_tensor(&[n, cb, h, w], rng),
    ];
    let proj = random_tensor(&[n, ca + cb, h, w], rng);
    let analytic = tape_gradients(&params, |tape, ids| {
        let y = tape.concat_channels(ids[0], ids[1])?;
        tape.weighted_sum(y, &proj)
    })?;
    compare(&params, &analytic, |ps| {
        ops::weighted_sum_forward(&ops::concat_channels_forward(&ps[0], &ps[1])?, &proj)
    })
}

fn check_global_avg_pool(rng: &mut Rng) -> Result<f64> {
    let shape = [
        1 + rng.below(3),
        1 + rng.below(4),
        2 + rng.below(3),
        2 + rng.below(3),
    ];
    let params = [random_tensor(&shape, rng)];
    let proj = random_tensor(&[shape[0], shape[1]], rng);
    let analytic = tape_gradients(&params, |tape, ids| {
        let y = tape.global_avg_pool(ids[0])?;
        tape.weighted_sum(y, &proj)
    })?;
    compare(&params, &analytic, |ps| {
        ops::weighted_sum_forward(&ops::global_avg_pool_forward(&ps[0])?, &proj)
    })
}

fn check_dense(rng: &mut Rng) -> Result<f64> {
    let (n, c, k) = (1 + rng.below(3), 1 + rng.below(5), 1 + rng.below(4));
    let params = [
        random_tensor(&[n, c], rng),
        random_tensor(&[k, c], rng),
        random_tensor(&[k], rng),
    ];
    let proj = random_tensor(&[n, k], rng);
    let analytic = tape_gradients(&params, |tape, ids| {
        let y = tape.dense(ids[0], ids[1], ids[2])?;
        tape.weighted_sum(y, &proj)
    })?;
    compare(&params, &analytic, |ps| {
        ops::weighted_sum_forward(&ops::dense_forward(&ps[0], &ps[1], &ps[2])?, &proj)
    })
}

fn check_softmax_cross_entropy(rng: &mut Rng) -> Result<f64> {
    let (n, k) = (1 + rng.below(4), 2 + rng.below(4));
    let labels: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
    let params = [random_tensor(&[n, k], rng)];
    let analytic = tape_gradients(&params, |tape, ids| {
        tape.softmax_cross_entropy(ids[0], &labels)
    })?;
    compare(&params, &analytic, |ps| {
        Ok(ops::softmax_cross_entropy_forward(&ps[0], &labels)?
            .0
            .to_f64())
    })
}

/// 1x1 conv into cross-entropy on a two-class toy batch, differentiated
/// end to end through the tape.
fn check_composite(rng: &mut Rng) -> Result<f64> {
    let (n, c, f) = (2, 2, 2);
    let labels: Vec<usize> = (0..n).map(|_| rng.below(2)).collect();
    let params = [
        random_tensor(&[n, c, 3, 3], rng),
        random_tensor(&[f, c, 1, 1], rng),
        random_tensor(&[f], rng),
    ];
    let analytic = tape_gradients(&params, |tape, ids| {
        let y = tape.conv2d(ids[0], ids[1], ids[2], 1, 0)?;
        let g = tape.global_avg_pool(y)?;
        tape.softmax_cross_entropy(g, &labels)
    })?;
    compare(&params, &analytic, |ps| {
        let y = ops::conv2d_forward(&ps[0], &ps[1], &ps[2], 1, 0)?;
        let g = ops::global_avg_pool_forward(&y)?;
        Ok(ops::softmax_cross_entropy_forward(&g, &labels)?.0.to_f64())
    })
}

/// Run every layer-type check `instances` times; returns the worst relative
/// error seen per layer.
pub fn run_layer_suite(instances: usize, seed: u64) -> Result<LayerSuiteReport> {
    type Check = fn(&mut Rng) -> Result<f64>;
    let checks: [(&'static str, Check); 10] = [
        ("conv2d", check_conv),
        ("batchnorm_train", check_batchnorm_train),
        ("batchnorm_eval", check_batchnorm_eval),
        ("relu", check_relu),
        ("maxpool", check_maxpool),
        ("concat_channels", check_concat),
        ("global_avg_pool", check_global_avg_pool),
        ("dense", check_dense),
        ("softmax_cross_entropy", check_softmax_cross_entropy),
        ("conv_softmax_composite", check_composite),
    ];
    let mut layers = Vec::with_capacity(checks.len());
    for (li, (name, check)) in checks.iter().enumerate() {
        let mut rng = Rng::with_stream(seed, li as u64);
        let mut worst = 0.0f64;
        for _ in 0..instances {
            worst = worst.max(check(&mut rng)?);
        }
        layers.push((*name, worst));
    }
    Ok(LayerSuiteReport { layers })
}
