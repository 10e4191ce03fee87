//! Layer primitives. Every `*_backward` computes the exact gradient of its
//! `*_forward`.

use rand::RngExt;

use crate::error::{Error, Result};
use crate::rng;

use super::gemm::{gemm, Mat};
use super::{Mode, Scalar, Tensor};

/// Probabilities are clamped to `[BCE_EPSILON, 1 - BCE_EPSILON]` in the loss.
pub const BCE_EPSILON: f64 = 1e-7;

/// Columns per im2col chunk; bounds the scratch buffer to `K x CHUNK`.
const IM2COL_CHUNK: usize = 2048;

/// A trainable tensor with its gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Scalar> Param<T> {
    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Param {
            name: name.into(),
            shape: shape.to_vec(),
            value: vec![T::zero(); n],
            grad: vec![T::zero(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    fn fill_uniform(&mut self, limit: f64, rng: &mut rng::Rng) {
        for v in &mut self.value {
            *v = T::from_f64_lossy(rng.random_range(-limit..limit));
        }
    }
}

/// Spatial padding of the 3x3x3 convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// No padding; each extent shrinks by 2.
    Valid,
    /// One voxel of zeros on every side; extents are preserved.
    Same,
}

impl Padding {
    fn amount(self) -> usize {
        match self {
            Padding::Valid => 0,
            Padding::Same => 1,
        }
    }

    /// Output extent for an input extent, if non-empty.
    pub fn output_extent(self, input: usize) -> Option<usize> {
        (input + 2 * self.amount())
            .checked_sub(2)
            .filter(|&o| o > 0)
    }
}

#[derive(Clone, Copy)]
struct ConvGeom {
    c_in: usize,
    input: [usize; 3],
    output: [usize; 3],
    pad: usize,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.c_in * 27
    }

    fn positions(&self) -> usize {
        self.output.iter().product()
    }

    fn lines(&self) -> usize {
        self.output[0] * self.output[1]
    }

    /// Valid `oz` range for kernel offset `dz`: `iz = oz + dz - pad` in range.
    fn z_range(&self, dz: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(dz);
        let hi = (self.input[2] + self.pad)
            .saturating_sub(dz)
            .min(self.output[2]);
        (lo, hi.max(lo))
    }

    /// Input `(ix, iy)` for an output line and kernel offsets, if inside.
    fn source_line(&self, line: usize, dx: usize, dy: usize) -> Option<(usize, usize)> {
        let (ox, oy) = (line / self.output[1], line % self.output[1]);
        let ix = (ox + dx).checked_sub(self.pad)?;
        let iy = (oy + dy).checked_sub(self.pad)?;
        (ix < self.input[0] && iy < self.input[1]).then_some((ix, iy))
    }

    /// Fills `cols` (`K x n_lines*OZ`, row-major) from one sample.
    fn im2col<T: Scalar>(&self, x: &[T], first_line: usize, n_lines: usize, cols: &mut [T]) {
        let [_, ny, nz] = self.input;
        let oz = self.output[2];
        let width = n_lines * oz;
        for ci in 0..self.c_in {
            for dx in 0..3 {
                for dy in 0..3 {
                    for dz in 0..3 {
                        let row = ((ci * 3 + dx) * 3 + dy) * 3 + dz;
                        let dst_row = &mut cols[row * width..(row + 1) * width];
                        let (lo, hi) = self.z_range(dz);
                        for l in 0..n_lines {
                            let dst = &mut dst_row[l * oz..(l + 1) * oz];
                            match self.source_line(first_line + l, dx, dy) {
                                None => dst.fill(T::zero()),
                                Some((ix, iy)) => {
                                    let base = ((ci * self.input[0] + ix) * ny + iy) * nz + dz;
                                    dst[..lo].fill(T::zero());
                                    dst[lo..hi].copy_from_slice(
                                        &x[base + lo - self.pad..base + hi - self.pad],
                                    );
                                    dst[hi..].fill(T::zero());
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds `cols` back into one sample's input gradient.
    fn col2im<T: Scalar>(&self, cols: &[T], first_line: usize, n_lines: usize, dx_out: &mut [T]) {
        let [_, ny, nz] = self.input;
        let oz = self.output[2];
        let width = n_lines * oz;
        for ci in 0..self.c_in {
            for dx in 0..3 {
                for dy in 0..3 {
                    for dz in 0..3 {
                        let row = ((ci * 3 + dx) * 3 + dy) * 3 + dz;
                        let src_row = &cols[row * width..(row + 1) * width];
                        let (lo, hi) = self.z_range(dz);
                        for l in 0..n_lines {
                            if let Some((ix, iy)) = self.source_line(first_line + l, dx, dy) {
                                let base = ((ci * self.input[0] + ix) * ny + iy) * nz + dz;
                                let dst = &mut dx_out[base + lo - self.pad..base + hi - self.pad];
                                for (d, s) in dst.iter_mut().zip(&src_row[l * oz + lo..l * oz + hi])
                                {
                                    *d += *s;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn lines_per_chunk(&self) -> usize {
        (IM2COL_CHUNK / self.output[2]).max(1)
    }
}

/// 3x3x3 convolution (cross-correlation), stride 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub padding: Padding,
    /// Shape `(out, in, 3, 3, 3)`.
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> Conv3d<T> {
    pub fn new(name: &str, in_channels: usize, out_channels: usize, padding: Padding) -> Self {
        Conv3d {
            in_channels,
            out_channels,
            padding,
            weight: Param::zeros(
                format!("{name}.weight"),
                &[out_channels, in_channels, 3, 3, 3],
            ),
            bias: Param::zeros(format!("{name}.bias"), &[out_channels]),
        }
    }

    /// He-uniform weights, zero bias.
    pub fn init_he(&mut self, rng: &mut rng::Rng) {
        let fan_in = (self.in_channels * 27) as f64;
        self.weight.fill_uniform((6.0 / fan_in).sqrt(), rng);
        self.bias.value.fill(T::zero());
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn output_spatial(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            out[a] = self.padding.output_extent(input[a]).ok_or_else(|| {
                Error::Shape(format!(
                    "conv3d with {:?} padding needs spatial extents >= 3, got {input:?}",
                    self.padding
                ))
            })?;
        }
        Ok(out)
    }

    fn geometry(&self, x: &Tensor<T>) -> Result<ConvGeom> {
        x.expect_rank(5, "conv3d")?;
        if x.shape()[1] != self.in_channels {
            return Err(Error::Shape(format!(
                "conv3d expects {} input channels, got input shape {:?} (weights {:?})",
                self.in_channels,
                x.shape(),
                self.weight.shape
            )));
        }
        let input = x.spatial();
        Ok(ConvGeom {
            c_in: self.in_channels,
            input,
            output: self.output_spatial(input)?,
            pad: self.padding.amount(),
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.geometry(x)?;
        let batch = x.shape()[0];
        let (k, p) = (g.k(), g.positions());
        let in_len = g.c_in * g.input.iter().product::<usize>();
        let mut out = vec![T::zero(); batch * self.out_channels * p];
        let lines_per = g.lines_per_chunk();
        let mut cols = vec![T::zero(); k * lines_per * g.output[2]];
        for b in 0..batch {
            let xb = &x.data()[b * in_len..(b + 1) * in_len];
            let ob = &mut out[b * self.out_channels * p..(b + 1) * self.out_channels * p];
            let mut line = 0;
            while line < g.lines() {
                let n_lines = lines_per.min(g.lines() - line);
                let w = n_lines * g.output[2];
                g.im2col(xb, line, n_lines, &mut cols[..k * w]);
                let p0 = line * g.output[2];
                gemm(
                    T::one(),
                    &self.weight.value,
                    Mat::row_major(self.out_channels, k),
                    &cols[..k * w],
                    Mat::row_major(k, w),
                    T::zero(),
                    &mut ob[p0..],
                    Mat {
                        rows: self.out_channels,
                        cols: w,
                        rs: p,
                        cs: 1,
                    },
                );
                line += n_lines;
            }
            for (o, chunk) in ob.chunks_exact_mut(p).enumerate() {
                let bias = self.bias.value[o];
                chunk.iter_mut().for_each(|v| *v += bias);
            }
        }
        let [ox, oy, oz] = g.output;
        Tensor::new(vec![batch, self.out_channels, ox, oy, oz], out)
    }

    /// Returns `(grad_input, grad_weight, grad_bias)`. `grad_input` is left
    /// empty when `need_input_grad` is false.
    pub fn backward_with(
        &self,
        x: &Tensor<T>,
        grad_out: &Tensor<T>,
        need_input_grad: bool,
    ) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
        let g = self.geometry(x)?;
        let batch = x.shape()[0];
        let [ox, oy, oz] = g.output;
        grad_out.expect_shape(&[batch, self.out_channels, ox, oy, oz], "conv3d backward")?;
        let (k, p) = (g.k(), g.positions());
        let in_len = g.c_in * g.input.iter().product::<usize>();
        let mut grad_w = vec![T::zero(); self.weight.len()];
        let mut grad_b = vec![T::zero(); self.out_channels];
        let mut grad_x = if need_input_grad {
            vec![T::zero(); x.len()]
        } else {
            Vec::new()
        };
        let lines_per = g.lines_per_chunk();
        let mut cols = vec![T::zero(); k * lines_per * oz];
        let mut grad_cols = vec![T::zero(); k * lines_per * oz];
        for b in 0..batch {
            let xb = &x.data()[b * in_len..(b + 1) * in_len];
            let gb = &grad_out.data()[b * self.out_channels * p..(b + 1) * self.out_channels * p];
            for (o, chunk) in gb.chunks_exact(p).enumerate() {
                grad_b[o] += chunk.iter().copied().sum::<T>();
            }
            let mut line = 0;
            while line < g.lines() {
                let n_lines = lines_per.min(g.lines() - line);
                let w = n_lines * oz;
                let p0 = line * oz;
                let g_chunk = Mat {
                    rows: self.out_channels,
                    cols: w,
                    rs: p,
                    cs: 1,
                };
                g.im2col(xb, line, n_lines, &mut cols[..k * w]);
                gemm(
                    T::one(),
                    &gb[p0..],
                    g_chunk,
                    &cols[..k * w],
                    Mat::row_major(k, w).transposed(),
                    T::one(),
                    &mut grad_w,
                    Mat::row_major(self.out_channels, k),
                );
                if need_input_grad {
                    gemm(
                        T::one(),
                        &self.weight.value,
                        Mat::row_major(self.out_channels, k).transposed(),
                        &gb[p0..],
                        g_chunk,
                        T::zero(),
                        &mut grad_cols[..k * w],
                        Mat::row_major(k, w),
                    );
                    g.col2im(
                        &grad_cols[..k * w],
                        line,
                        n_lines,
                        &mut grad_x[b * in_len..(b + 1) * in_len],
                    );
                }
                line += n_lines;
            }
        }
        let grad_x = if need_input_grad {
            Tensor::new(x.shape().to_vec(), grad_x)?
        } else {
            Tensor::zeros(&[0])
        };
        Ok((grad_x, grad_w, grad_b))
    }

    pub fn backward(
        &self,
        x: &Tensor<T>,
        grad_out: &Tensor<T>,
    ) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
        self.backward_with(x, grad_out, true)
    }
}

/// 2x2x2 max pooling with stride 2; odd trailing slabs are dropped. Returns
/// the pooled tensor and, per output element, the flat input index of its
/// maximum (first maximum in scan order on ties).
pub fn maxpool3d_forward<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    x.expect_rank(5, "maxpool3d")?;
    let [nx, ny, nz] = x.spatial();
    if nx < 2 || ny < 2 || nz < 2 {
        return Err(Error::Shape(format!(
            "maxpool3d needs spatial extents >= 2, got {:?}",
            x.shape()
        )));
    }
    let (batch, ch) = (x.shape()[0], x.shape()[1]);
    let (ox, oy, oz) = (nx / 2, ny / 2, nz / 2);
    let mut out = Vec::with_capacity(batch * ch * ox * oy * oz);
    let mut argmax = Vec::with_capacity(out.capacity());
    let data = x.data();
    for bc in 0..batch * ch {
        let base = bc * nx * ny * nz;
        for i in 0..ox {
            for j in 0..oy {
                for k in 0..oz {
                    let mut best_idx = base + ((2 * i) * ny + 2 * j) * nz + 2 * k;
                    let mut best = data[best_idx];
                    for di in 0..2 {
                        for dj in 0..2 {
                            for dk in 0..2 {
                                let idx = base + ((2 * i + di) * ny + 2 * j + dj) * nz + 2 * k + dk;
                                if data[idx] > best {
                                    best = data[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_idx);
                }
            }
        }
    }
    Ok((Tensor::new(vec![batch, ch, ox, oy, oz], out)?, argmax))
}

pub fn maxpool3d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    argmax: &[usize],
    input_shape: &[usize],
) -> Result<Tensor<T>> {
    if grad_out.len() != argmax.len() {
        return Err(Error::Shape(format!(
            "maxpool3d backward: {} gradients for {} pooled elements",
            grad_out.len(),
            argmax.len()
        )));
    }
    let mut grad = Tensor::zeros(input_shape);
    let g = grad.data_mut();
    for (&idx, &v) in argmax.iter().zip(grad_out.data()) {
        g[idx] += v;
    }
    Ok(grad)
}

/// Per-channel statistics cached by a training-mode batch-norm pass.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    pub x_hat: Vec<T>,
    pub inv_std: Vec<f64>,
    pub shape: Vec<usize>,
}

/// Batch normalization over `(batch, x, y, z)` per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm3d<T> {
    pub channels: usize,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    /// `running = momentum * running + (1 - momentum) * batch`.
    pub momentum: f64,
    pub epsilon: f64,
}

impl<T: Scalar> BatchNorm3d<T> {
    pub fn new(name: &str, channels: usize, momentum: f64, epsilon: f64) -> Self {
        let mut gamma = Param::zeros(format!("{name}.gamma"), &[channels]);
        gamma.value.fill(T::one());
        BatchNorm3d {
            channels,
            gamma,
            beta: Param::zeros(format!("{name}.beta"), &[channels]),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum,
            epsilon,
        }
    }

    pub fn param_count(&self) -> usize {
        self.gamma.len() + self.beta.len()
    }

    pub fn buffer_count(&self) -> usize {
        self.running_mean.len() + self.running_var.len()
    }

    fn check(&self, x: &Tensor<T>) -> Result<(usize, usize)> {
        x.expect_rank(5, "batchnorm")?;
        if x.shape()[1] != self.channels {
            return Err(Error::Shape(format!(
                "batchnorm over {} channels got input shape {:?}",
                self.channels,
                x.shape()
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::State(format!(
                "batchnorm epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        Ok((x.shape()[0], x.spatial().iter().product()))
    }

    /// Inference-mode pass using the running statistics.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (batch, s) = self.check(x)?;
        let c = self.channels;
        let data = x.data();
        let mut out = vec![T::zero(); x.len()];
        let idx = |b: usize, ch: usize| (b * c + ch) * s;
        for ch in 0..c {
            let mean = self.running_mean[ch].as_f64();
            let var = self.running_var[ch].as_f64();
            if !(mean.is_finite() && var.is_finite() && var >= 0.0) {
                return Err(Error::State(format!(
                    "batchnorm channel {ch} has invalid running statistics (mean {mean}, var {var})"
                )));
            }
            let inv = 1.0 / (var + self.epsilon).sqrt();
            let scale = self.gamma.value[ch].as_f64() * inv;
            let shift = self.beta.value[ch].as_f64() - mean * scale;
            let (scale, shift) = (T::from_f64_lossy(scale), T::from_f64_lossy(shift));
            for b in 0..batch {
                let r = idx(b, ch)..idx(b, ch) + s;
                for (o, &v) in out[r.clone()].iter_mut().zip(&data[r]) {
                    *o = v * scale + shift;
                }
            }
        }
        Tensor::new(x.shape().to_vec(), out)
    }

    pub fn forward(
        &mut self,
        x: &Tensor<T>,
        mode: Mode,
    ) -> Result<(Tensor<T>, Option<BnCache<T>>)> {
        if !mode.is_train() {
            return Ok((self.infer(x)?, None));
        }
        let (batch, s) = self.check(x)?;
        let c = self.channels;
        let data = x.data();
        let mut out = vec![T::zero(); x.len()];
        let idx = |b: usize, ch: usize| (b * c + ch) * s;

        let n = (batch * s) as f64;
        let mut x_hat = vec![T::zero(); x.len()];
        let mut inv_std = vec![0.0; c];
        for ch in 0..c {
            let mut sum = 0.0;
            for b in 0..batch {
                sum += data[idx(b, ch)..idx(b, ch) + s]
                    .iter()
                    .map(|v| v.as_f64())
                    .sum::<f64>();
            }
            let mean = sum / n;
            let mut sq = 0.0;
            for b in 0..batch {
                sq += data[idx(b, ch)..idx(b, ch) + s]
                    .iter()
                    .map(|v| (v.as_f64() - mean).powi(2))
                    .sum::<f64>();
            }
            let var = sq / n;
            let inv = 1.0 / (var + self.epsilon).sqrt();
            inv_std[ch] = inv;
            let (gamma, beta) = (self.gamma.value[ch], self.beta.value[ch]);
            for b in 0..batch {
                for off in idx(b, ch)..idx(b, ch) + s {
                    let xh = T::from_f64_lossy((data[off].as_f64() - mean) * inv);
                    x_hat[off] = xh;
                    out[off] = gamma * xh + beta;
                }
            }
            let m = self.momentum;
            self.running_mean[ch] =
                T::from_f64_lossy(m * self.running_mean[ch].as_f64() + (1.0 - m) * mean);
            self.running_var[ch] =
                T::from_f64_lossy(m * self.running_var[ch].as_f64() + (1.0 - m) * var);
        }
        let cache = BnCache {
            x_hat,
            inv_std,
            shape: x.shape().to_vec(),
        };
        Ok((Tensor::new(x.shape().to_vec(), out)?, Some(cache)))
    }

    /// Returns `(grad_input, grad_gamma, grad_beta)` for a training-mode pass.
    pub fn backward(
        &self,
        cache: &BnCache<T>,
        grad_out: &Tensor<T>,
    ) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
        grad_out.expect_shape(&cache.shape, "batchnorm backward")?;
        let (batch, c) = (cache.shape[0], self.channels);
        let s: usize = cache.shape[2..].iter().product();
        let n = (batch * s) as f64;
        let dy = grad_out.data();
        let mut dx = vec![T::zero(); dy.len()];
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for ch in 0..c {
            let (mut sum_dy, mut sum_dy_xh) = (0.0, 0.0);
            for b in 0..batch {
                let base = (b * c + ch) * s;
                for off in base..base + s {
                    let g = dy[off].as_f64();
                    sum_dy += g;
                    sum_dy_xh += g * cache.x_hat[off].as_f64();
                }
            }
            dgamma[ch] = T::from_f64_lossy(sum_dy_xh);
            dbeta[ch] = T::from_f64_lossy(sum_dy);
            let k = self.gamma.value[ch].as_f64() * cache.inv_std[ch] / n;
            for b in 0..batch {
                let base = (b * c + ch) * s;
                for off in base..base + s {
                    let v = n * dy[off].as_f64() - sum_dy - cache.x_hat[off].as_f64() * sum_dy_xh;
                    dx[off] = T::from_f64_lossy(k * v);
                }
            }
        }
        Ok((Tensor::new(cache.shape.clone(), dx)?, dgamma, dbeta))
    }
}

/// Per-(batch, channel) spatial mean: `(B, C, x, y, z) -> (B, C)`.
pub fn gap_forward<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    x.expect_rank(5, "global average pool")?;
    let (b, c) = (x.shape()[0], x.shape()[1]);
    let s: usize = x.spatial().iter().product();
    let out = x
        .data()
        .chunks_exact(s)
        .map(|ch| T::from_f64_lossy(ch.iter().map(|v| v.as_f64()).sum::<f64>() / s as f64))
        .collect();
    Tensor::new(vec![b, c], out)
}

pub fn gap_backward<T: Scalar>(grad_out: &Tensor<T>, input_shape: &[usize]) -> Result<Tensor<T>> {
    if input_shape.len() != 5 || grad_out.shape() != &input_shape[..2] {
        return Err(Error::Shape(format!(
            "gap backward: gradient {:?} does not match input {input_shape:?}",
            grad_out.shape()
        )));
    }
    let s: usize = input_shape[2..].iter().product();
    let inv = T::from_f64_lossy(1.0 / s as f64);
    let mut data = Vec::with_capacity(grad_out.len() * s);
    for &g in grad_out.data() {
        data.extend(std::iter::repeat_n(g * inv, s));
    }
    Tensor::new(input_shape.to_vec(), data)
}

/// Fully connected layer, `y = x W^T + b` with `W` of shape `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn new(name: &str, in_features: usize, out_features: usize) -> Self {
        Dense {
            in_features,
            out_features,
            weight: Param::zeros(format!("{name}.weight"), &[out_features, in_features]),
            bias: Param::zeros(format!("{name}.bias"), &[out_features]),
        }
    }

    pub fn init_he(&mut self, rng: &mut rng::Rng) {
        self.weight
            .fill_uniform((6.0 / self.in_features as f64).sqrt(), rng);
        self.bias.value.fill(T::zero());
    }

    pub fn init_glorot(&mut self, rng: &mut rng::Rng) {
        let limit = (6.0 / (self.in_features + self.out_features) as f64).sqrt();
        self.weight.fill_uniform(limit, rng);
        self.bias.value.fill(T::zero());
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn check(&self, x: &Tensor<T>) -> Result<usize> {
        x.expect_rank(2, "dense")?;
        if x.shape()[1] != self.in_features {
            return Err(Error::Shape(format!(
                "dense expects {} features, got input shape {:?}",
                self.in_features,
                x.shape()
            )));
        }
        Ok(x.shape()[0])
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let batch = self.check(x)?;
        let mut out = Vec::with_capacity(batch * self.out_features);
        for _ in 0..batch {
            out.extend_from_slice(&self.bias.value);
        }
        gemm(
            T::one(),
            x.data(),
            Mat::row_major(batch, self.in_features),
            &self.weight.value,
            Mat::row_major(self.out_features, self.in_features).transposed(),
            T::one(),
            &mut out,
            Mat::row_major(batch, self.out_features),
        );
        Tensor::new(vec![batch, self.out_features], out)
    }

    /// Returns `(grad_input, grad_weight, grad_bias)`.
    pub fn backward(
        &self,
        x: &Tensor<T>,
        grad_out: &Tensor<T>,
    ) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
        let batch = self.check(x)?;
        grad_out.expect_shape(&[batch, self.out_features], "dense backward")?;
        let mut grad_w = vec![T::zero(); self.weight.len()];
        gemm(
            T::one(),
            grad_out.data(),
            Mat::row_major(batch, self.out_features).transposed(),
            x.data(),
            Mat::row_major(batch, self.in_features),
            T::zero(),
            &mut grad_w,
            Mat::row_major(self.out_features, self.in_features),
        );
        let mut grad_b = vec![T::zero(); self.out_features];
        for row in grad_out.data().chunks_exact(self.out_features) {
            for (gb, &g) in grad_b.iter_mut().zip(row) {
                *gb += g;
            }
        }
        let mut grad_x = vec![T::zero(); x.len()];
        gemm(
            T::one(),
            grad_out.data(),
            Mat::row_major(batch, self.out_features),
            &self.weight.value,
            Mat::row_major(self.out_features, self.in_features),
            T::zero(),
            &mut grad_x,
            Mat::row_major(batch, self.in_features),
        );
        Ok((Tensor::new(x.shape().to_vec(), grad_x)?, grad_w, grad_b))
    }
}

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let data = x.data().iter().map(|&v| v.max(T::zero())).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// Gradient of the rectifier given its forward input.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    grad_out.expect_shape(x.shape(), "relu backward")?;
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Inverted dropout. In training mode each unit is kept with probability
/// `1 - p` and scaled by `1 / (1 - p)`; the returned mask holds the applied
/// per-unit factor. Inference is the identity.
pub fn dropout_forward<T: Scalar>(
    x: &Tensor<T>,
    p: f64,
    mode: Mode,
) -> Result<(Tensor<T>, Option<Vec<T>>)> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Argument(format!(
            "dropout probability must be in [0, 1), got {p}"
        )));
    }
    let seed = match mode {
        Mode::Infer => return Ok((x.clone(), None)),
        Mode::Train { dropout_seed } => dropout_seed,
    };
    let mut rng = rng::rng(seed);
    let scale = T::from_f64_lossy(1.0 / (1.0 - p));
    let mask: Vec<T> = (0..x.len())
        .map(|_| {
            if rng.random::<f64>() >= p {
                scale
            } else {
                T::zero()
            }
        })
        .collect();
    let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
    Ok((Tensor::new(x.shape().to_vec(), data)?, Some(mask)))
}

pub fn dropout_backward<T: Scalar>(grad_out: &Tensor<T>, mask: Option<&[T]>) -> Result<Tensor<T>> {
    match mask {
        None => Ok(grad_out.clone()),
        Some(m) if m.len() == grad_out.len() => {
            let data = grad_out
                .data()
                .iter()
                .zip(m)
                .map(|(&g, &k)| g * k)
                .collect();
            Tensor::new(grad_out.shape().to_vec(), data)
        }
        Some(m) => Err(Error::Shape(format!(
            "dropout mask of {} units for gradient of shape {:?}",
            m.len(),
            grad_out.shape()
        ))),
    }
}

fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let data = x.data().iter().map(|&z| sigmoid(z)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// Gradient of the logistic map given its forward output.
pub fn sigmoid_backward<T: Scalar>(out: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    grad_out.expect_shape(out.shape(), "sigmoid backward")?;
    let data = out
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&p, &g)| g * p * (T::one() - p))
        .collect();
    Tensor::new(out.shape().to_vec(), data)
}

/// Mean binary cross-entropy and its gradient with respect to `p`.
pub fn bce_loss<T: Scalar>(p: &[T], y: &[T]) -> Result<(T, Vec<T>)> {
    if p.len() != y.len() || p.is_empty() {
        return Err(Error::Argument(format!(
            "bce loss needs equal non-empty lengths, got {} and {}",
            p.len(),
            y.len()
        )));
    }
    if let Some(bad) = y.iter().find(|&&v| v != T::zero() && v != T::one()) {
        return Err(Error::Argument(format!("labels must be 0 or 1, got {bad}")));
    }
    let n = p.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(p.len());
    for (&pi, &yi) in p.iter().zip(y) {
        let pc = pi.as_f64().clamp(BCE_EPSILON, 1.0 - BCE_EPSILON);
        let yv = yi.as_f64();
        loss -= yv * pc.ln() + (1.0 - yv) * (1.0 - pc).ln();
        grad.push(T::from_f64_lossy((pc - yv) / (pc * (1.0 - pc)) / n));
    }
    Ok((T::from_f64_lossy(loss / n), grad))
}
