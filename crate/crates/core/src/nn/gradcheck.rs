//! Central finite-difference checks of every layer's backward pass and of
//! the composed model, in `f64`.
//!
//! Each layer is reduced to the scalar `sum(out * w)` with a fixed random
//! `w`, so one check covers every output. Relative error is
//! `|a - n| / max(|a|, |n|, REL_FLOOR)`.

use rand::seq::SliceRandom;
use rand::RngExt;

use crate::error::Result;
use crate::rng;

use super::layers::{
    bce_loss, dropout_backward, dropout_forward, gap_backward, gap_forward, maxpool3d_backward,
    maxpool3d_forward, relu_backward, relu_forward, sigmoid_backward, sigmoid_forward, BatchNorm3d,
    Conv3d, Dense, Padding,
};
use super::{Mode, Model, ModelConfig, Tensor};

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor so near-zero gradients are judged on absolute error.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub name: String,
    pub probes: usize,
    pub max_rel_error: f64,
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn random_vec(n: usize, r: &mut rng::Rng, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| r.random_range(lo..hi)).collect()
}

fn random_tensor(shape: &[usize], r: &mut rng::Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), random_vec(n, r, -1.0, 1.0)).expect("shape")
}

/// Values at least 0.1 apart and away from zero, so no probe crosses a
/// rectifier kink or changes a pooling argmax.
fn separated_tensor(shape: &[usize], r: &mut rng::Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n)
        .map(|i| 0.05 + 0.1 * (i as f64 - n as f64 / 2.0))
        .collect();
    vals.shuffle(r);
    Tensor::new(shape.to_vec(), vals).expect("shape")
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Probes `count` random coordinates of each slot. `slots` gives the length
/// of each perturbable buffer; `coord` gives mutable access to one element.
fn run_probes<S: Clone>(
    name: &str,
    state: &S,
    analytic: &[Vec<f64>],
    counts: &[usize],
    r: &mut rng::Rng,
    eval: impl Fn(&S) -> f64,
    coord: impl Fn(&mut S, usize, usize) -> &mut f64,
) -> GradReport {
    let mut worst: f64 = 0.0;
    let mut probes = 0;
    for (slot, (grad, &count)) in analytic.iter().zip(counts).enumerate() {
        for _ in 0..count {
            let i = r.random_range(0..grad.len());
            let mut plus = state.clone();
            *coord(&mut plus, slot, i) += FD_STEP;
            let mut minus = state.clone();
            *coord(&mut minus, slot, i) -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_error(grad[i], numeric));
            probes += 1;
        }
    }
    GradReport {
        name: name.to_string(),
        probes,
        max_rel_error: worst,
    }
}

pub fn check_conv(padding: Padding, seed: u64) -> Result<GradReport> {
    let mut r = rng::rng(seed);
    let mut conv = Conv3d::<f64>::new("conv", 2, 3, padding);
    conv.init_he(&mut r);
    conv.bias.value = random_vec(3, &mut r, -0.5, 0.5);
    let x = random_tensor(&[1, 2, 5, 5, 5], &mut r);
    let out_shape = conv.forward(&x)?.shape().to_vec();
    let w = random_tensor(&out_shape, &mut r);
    let (gx, gw, gb) = conv.backward(&x, &w)?;
    let state = (conv, x);
    Ok(run_probes(
        &format!("conv3d ({padding:?})"),
        &state,
        &[gx.into_data(), gw, gb],
        &[10, 10, 5],
        &mut r,
        |(c, x)| dot(c.forward(x).expect("conv").data(), w.data()),
        |(c, x), slot, i| match slot {
            0 => &mut x.data_mut()[i],
            1 => &mut c.weight.value[i],
            _ => &mut c.bias.value[i],
        },
    ))
}

pub fn check_maxpool(seed: u64) -> Result<GradReport> {
    let mut r = rng::rng(seed);
    let x = separated_tensor(&[1, 2, 5, 4, 4], &mut r);
    let (out, arg) = maxpool3d_forward(&x)?;
    let w = random_tensor(out.shape(), &mut r);
    let gx = maxpool3d_backward(&w, &arg, x.shape())?;
    Ok(run_probes(
        "maxpool3d",
        &x,
        &[gx.into_data()],
        &[20],
        &mut r,
        |x| dot(maxpool3d_forward(x).expect("pool").0.data(), w.data()),
        |x, _, i| &mut x.data_mut()[i],
    ))
}

pub fn check_batchnorm(seed: u64) -> Result<GradReport> {
    let mut r = rng::rng(seed);
    let mut bn = BatchNorm3d::<f64>::new("bn", 3, 0.99, 1e-3);
    bn.gamma.value = random_vec(3, &mut r, 0.5, 1.5);
    bn.beta.value = random_vec(3, &mut r, -0.5, 0.5);
    let x = random_tensor(&[2, 3, 3, 3, 3], &mut r);
    let w = random_tensor(x.shape(), &mut r);
    let mode = Mode::Train { dropout_seed: 0 };
    let (_, cache) = bn.clone().forward(&x, mode)?;
    let (gx, gg, gb) = bn.backward(&cache.expect("train cache"), &w)?;
    let state = (bn, x);
    Ok(run_probes(
        "batchnorm3d",
        &state,
        &[gx.into_data(), gg, gb],
        &[20, 5, 5],
        &mut r,
        |(bn, x)| dot(bn.clone().forward(x, mode).expect("bn").0.data(), w.data()),
        |(bn, x), slot, i| match slot {
            0 => &mut x.data_mut()[i],
            1 => &mut bn.gamma.value[i],
            _ => &mut bn.beta.value[i],
        },
    ))
}

pub fn check_gap(seed: u64) -> Result<GradReport> {
    let mut r = rng::rng(seed);
    let x = random_tensor(&[2, 3, 2, 3, 2], &mut r);
    let w = random_tensor(&[2, 3], &mut r);
    let gx = gap_backward(&w, x.shape())?;
    Ok(run_probes(
        "global average pool",
        &x,
        &[gx.into_data()],
        &[10],
        &mut r,
        |x| dot(gap_forward(x).expect("gap").data(), w.data()),
        |x, _, i| &mut x.data_mut()[i],
    ))
}

pub fn check_dense(seed: u64) -> Result<GradReport> {
    let mut r = rng::rng(seed);
    let mut d = Dense::<f64>::new("dense", 6, 4);
    d.init_he(&mut r);
    d.bias.value = random_vec(4, &mut r, -0.5, 0.5);
    let x = random_tensor(&[3, 6], &mut r);
    let w = random_tensor(&[3, 4], &mut r);
    let (gx, gw, gb) = d.backward(&x, &w)?;
    let state = (d, x);
    Ok(run_probes(
        "dense",
        &state,
        &[gx.into_data(), gw, gb],
        &[10, 15, 5],
        &mut r,
        |(d, x)| dot(d.forward(x).expect("dense").data(), w.data()),
        |(d, x), slot, i| match slot {
            0 => &mut x.data_mut()[i],
            1 => &mut d.weight.value[i],
            _ => &mut d.bias.value[i],
        },
    ))
}

pub fn check_relu(seed: u64) -> Result<GradReport> {
    let mut r = rng::rng(seed);
    let x = separated_tensor(&[4, 8], &mut r);
    let w = random_tensor(&[4, 8], &mut r);
    let gx = relu_backward(&x, &w)?;
    Ok(run_probes(
        "relu",
        &x,
        &[gx.into_data()],
        &[10],
        &mut r,
        |x| dot(relu_forward(x).data(), w.data()),
        |x, _, i| &mut x.data_mut()[i],
    ))
}

pub fn check_dropout(seed: u64) -> Result<GradReport> {
    let mut r = rng::rng(seed);
    let x = random_tensor(&[4, 8], &mut r);
    let w = random_tensor(&[4, 8], &mut r);
    let mode = Mode::Train { dropout_seed: seed };
    let (_, mask) = dropout_forward(&x, 0.3, mode)?;
    let gx = dropout_backward(&w, mask.as_deref())?;
    Ok(run_probes(
        "dropout",
        &x,
        &[gx.into_data()],
        &[10],
        &mut r,
        |x| {
            dot(
                dropout_forward(x, 0.3, mode).expect("dropout").0.data(),
                w.data(),
            )
        },
        |x, _, i| &mut x.data_mut()[i],
    ))
}

pub fn check_sigmoid(seed: u64) -> Result<GradReport> {
    let mut r = rng::rng(seed);
    let x = Tensor::new(vec![12], random_vec(12, &mut r, -4.0, 4.0))?;
    let w = random_tensor(&[12], &mut r);
    let gx = sigmoid_backward(&sigmoid_forward(&x), &w)?;
    Ok(run_probes(
        "sigmoid",
        &x,
        &[gx.into_data()],
        &[10],
        &mut r,
        |x| dot(sigmoid_forward(x).data(), w.data()),
        |x, _, i| &mut x.data_mut()[i],
    ))
}

pub fn check_bce(seed: u64) -> Result<GradReport> {
    let mut r = rng::rng(seed);
    let p = random_vec(8, &mut r, 0.05, 0.95);
    let y: Vec<f64> = (0..8).map(|i| (i % 2) as f64).collect();
    let (_, g) = bce_loss(&p, &y)?;
    Ok(run_probes(
        "binary cross-entropy",
        &p,
        &[g],
        &[10],
        &mut r,
        |p| bce_loss(p, &y).expect("bce").0,
        |p, _, i| &mut p[i],
    ))
}

/// Reduced-width model on a 32x32x16 input with same padding (valid
/// padding cannot fit four blocks at that size).
pub fn small_model_config() -> ModelConfig {
    ModelConfig {
        input_dims: [32, 32, 16],
        widths: vec![4, 4, 8, 8],
        dense_units: 8,
        padding: Padding::Same,
        ..ModelConfig::default()
    }
}

/// Probes `probes` random trainable parameters of the composed model against
/// the training-mode BCE loss on a random batch of two.
pub fn check_model(probes: usize, seed: u64) -> Result<GradReport> {
    let mut r = rng::rng(seed);
    let config = small_model_config();
    let mut model = Model::<f64>::new(config.clone(), seed)?;
    let [nx, ny, nz] = config.input_dims;
    let x = Tensor::new(
        vec![2, 1, nx, ny, nz],
        random_vec(2 * nx * ny * nz, &mut r, 0.0, 1.0),
    )?;
    let labels = [1.0, 0.0];
    let mode = Mode::Train { dropout_seed: seed };
    model.forward(&x, mode)?;
    model.backward_bce(&labels)?;
    let grads: Vec<Vec<f64>> = model.params().iter().map(|p| p.grad.clone()).collect();
    let sizes: Vec<usize> = grads.iter().map(Vec::len).collect();
    let total: usize = sizes.iter().sum();
    let mut counts = vec![0; grads.len()];
    for _ in 0..probes {
        // Pick tensors in proportion to their size so small ones still appear.
        let mut k = r.random_range(0..total + grads.len() * 8);
        let slot = sizes
            .iter()
            .position(|&s| {
                if k < s + 8 {
                    true
                } else {
                    k -= s + 8;
                    false
                }
            })
            .unwrap_or(grads.len() - 1);
        counts[slot] += 1;
    }
    let eval = |m: &Model<f64>| {
        let mut m = m.clone();
        let p = m.forward(&x, mode).expect("forward");
        bce_loss(&p, &labels).expect("loss").0
    };
    Ok(run_probes(
        "model (32x32x16)",
        &model,
        &grads,
        &counts,
        &mut r,
        eval,
        |m, slot, i| &mut m.params_mut().into_iter().nth(slot).expect("slot").value[i],
    ))
}

/// Every layer check plus `model_probes` probes of the composed model.
pub fn check_all(model_probes: usize, seed: u64) -> Result<Vec<GradReport>> {
    Ok(vec![
        check_conv(Padding::Valid, seed)?,
        check_conv(Padding::Same, seed + 1)?,
        check_maxpool(seed + 2)?,
        check_batchnorm(seed + 3)?,
        check_gap(seed + 4)?,
        check_dense(seed + 5)?,
        check_relu(seed + 6)?,
        check_dropout(seed + 7)?,
        check_sigmoid(seed + 8)?,
        check_bce(seed + 9)?,
        check_model(model_probes, seed + 10)?,
    ])
}
