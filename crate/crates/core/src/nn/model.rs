use crate::error::{Error, Result};
use crate::rng;

use super::layers::{
    dropout_backward, dropout_forward, gap_backward, gap_forward, maxpool3d_backward,
    maxpool3d_forward, relu_backward, relu_forward, sigmoid_forward, BatchNorm3d, BnCache, Conv3d,
    Dense, Padding, Param,
};
use super::{Mode, Scalar, Tensor};

/// Trainable parameters of the default architecture.
pub const DEFAULT_TRAINABLE_PARAMS: usize = 1_351_873;
/// Trainable parameters plus batch-norm running statistics.
pub const DEFAULT_TOTAL_PARAMS: usize = 1_352_897;

/// Architecture of the classifier: `widths.len()` blocks of
/// conv -> ReLU -> maxpool -> batchnorm, then GAP -> dense -> ReLU ->
/// dropout -> dense(1) -> sigmoid.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub input_dims: [usize; 3],
    pub widths: Vec<usize>,
    pub dense_units: usize,
    pub dropout: f64,
    pub padding: Padding,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dims: [128, 128, 64],
            widths: vec![64, 64, 128, 256],
            dense_units: 512,
            dropout: 0.3,
            padding: Padding::Valid,
            bn_momentum: 0.99,
            bn_epsilon: 1e-3,
        }
    }
}

impl ModelConfig {
    /// Spatial extents after each conv and each pool, in order. Fails if any
    /// stage would be empty.
    pub fn spatial_trace(&self) -> Result<Vec<[usize; 3]>> {
        let mut dims = self.input_dims;
        let mut trace = Vec::with_capacity(2 * self.widths.len());
        for (b, _) in self.widths.iter().enumerate() {
            for a in 0..3 {
                dims[a] = self.padding.output_extent(dims[a]).ok_or_else(|| {
                    Error::Shape(format!(
                        "input {:?} is too small: block {b} conv with {:?} padding sees extent {} on axis {a}",
                        self.input_dims, self.padding, dims[a]
                    ))
                })?;
            }
            trace.push(dims);
            if dims.iter().any(|&d| d < 2) {
                return Err(Error::Shape(format!(
                    "input {:?} is too small: block {b} pooling sees {dims:?}",
                    self.input_dims
                )));
            }
            dims = dims.map(|d| d / 2);
            trace.push(dims);
        }
        Ok(trace)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config(format!(
                "model widths must be a non-empty list of positive counts, got {:?}",
                self.widths
            )));
        }
        if self.dense_units == 0 {
            return Err(Error::Config("dense units must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        if !(0.0..1.0).contains(&self.bn_momentum) || !(self.bn_epsilon > 0.0) {
            return Err(Error::Config(format!(
                "batchnorm momentum must be in [0, 1) and epsilon > 0, got {} and {}",
                self.bn_momentum, self.bn_epsilon
            )));
        }
        self.spatial_trace().map(|_| ())
    }

    /// Canonical text form; hashed into checkpoints.
    pub fn descriptor(&self) -> String {
        format!(
            "input={}x{}x{};widths={};dense={};dropout={:?};padding={:?};bn_momentum={:?};bn_epsilon={:?}",
            self.input_dims[0],
            self.input_dims[1],
            self.input_dims[2],
            self.widths.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(","),
            self.dense_units,
            self.dropout,
            self.padding,
            self.bn_momentum,
            self.bn_epsilon
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCount {
    pub trainable: usize,
    /// `trainable` plus batch-norm running statistics.
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Block<T> {
    conv: Conv3d<T>,
    bn: BatchNorm3d<T>,
}

#[derive(Debug, Clone)]
struct BlockCache<T> {
    input: Tensor<T>,
    conv_shape: Vec<usize>,
    /// Pooled conv output before the rectifier.
    pooled: Tensor<T>,
    argmax: Vec<usize>,
    bn: BnCache<T>,
}

#[derive(Debug, Clone)]
struct ForwardCache<T> {
    blocks: Vec<BlockCache<T>>,
    features_shape: Vec<usize>,
    gap: Tensor<T>,
    hidden_pre: Tensor<T>,
    mask: Option<Vec<T>>,
    hidden: Tensor<T>,
    probs: Vec<T>,
}

/// The 3D CNN classifier. Training-mode [`Model::forward`] caches the
/// activations that [`Model::backward`] consumes.
#[derive(Debug, Clone)]
pub struct Model<T> {
    config: ModelConfig,
    blocks: Vec<Block<T>>,
    hidden: Dense<T>,
    output: Dense<T>,
    cache: Option<ForwardCache<T>>,
}

impl<T: Scalar> Model<T> {
    /// Builds and initializes the model. Shape problems surface here rather
    /// than mid-training.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::rng(seed);
        let mut blocks = Vec::with_capacity(config.widths.len());
        let mut in_ch = 1;
        for (i, &w) in config.widths.iter().enumerate() {
            let mut conv = Conv3d::new(&format!("block{i}.conv"), in_ch, w, config.padding);
            conv.init_he(&mut r);
            let bn = BatchNorm3d::new(
                &format!("block{i}.bn"),
                w,
                config.bn_momentum,
                config.bn_epsilon,
            );
            blocks.push(Block { conv, bn });
            in_ch = w;
        }
        let mut hidden = Dense::new("dense", in_ch, config.dense_units);
        hidden.init_he(&mut r);
        let mut output = Dense::new("output", config.dense_units, 1);
        output.init_glorot(&mut r);
        let model = Model {
            config,
            blocks,
            hidden,
            output,
            cache: None,
        };
        if model.config == ModelConfig::default() {
            let count = model.param_count();
            if count.trainable != DEFAULT_TRAINABLE_PARAMS || count.total != DEFAULT_TOTAL_PARAMS {
                return Err(Error::Consistency(format!(
                    "default architecture has {count:?}, expected {DEFAULT_TRAINABLE_PARAMS} trainable and {DEFAULT_TOTAL_PARAMS} total"
                )));
            }
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_count(&self) -> ParamCount {
        let trainable = self
            .blocks
            .iter()
            .map(|b| b.conv.param_count() + b.bn.param_count())
            .sum::<usize>()
            + self.hidden.param_count()
            + self.output.param_count();
        let buffers: usize = self.blocks.iter().map(|b| b.bn.buffer_count()).sum();
        ParamCount {
            trainable,
            total: trainable + buffers,
        }
    }

    /// Trainable parameters in a fixed order.
    pub fn params(&self) -> Vec<&Param<T>> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.extend([&b.conv.weight, &b.conv.bias, &b.bn.gamma, &b.bn.beta]);
        }
        out.extend([
            &self.hidden.weight,
            &self.hidden.bias,
            &self.output.weight,
            &self.output.bias,
        ]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.extend([
                &mut b.conv.weight,
                &mut b.conv.bias,
                &mut b.bn.gamma,
                &mut b.bn.beta,
            ]);
        }
        out.extend([
            &mut self.hidden.weight,
            &mut self.hidden.bias,
            &mut self.output.weight,
            &mut self.output.bias,
        ]);
        out
    }

    /// Batch-norm running statistics as `(name, values)`.
    pub fn buffers(&self) -> Vec<(String, &[T])> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.bn.running_mean"), &b.bn.running_mean[..]));
            out.push((format!("block{i}.bn.running_var"), &b.bn.running_var[..]));
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<(String, &mut Vec<T>)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("block{i}.bn.running_mean"), &mut b.bn.running_mean));
            out.push((format!("block{i}.bn.running_var"), &mut b.bn.running_var));
        }
        out
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let [nx, ny, nz] = self.config.input_dims;
        if x.rank() != 5 || x.shape()[1] != 1 || x.spatial() != [nx, ny, nz] || x.shape()[0] == 0 {
            return Err(Error::Shape(format!(
                "model expects input (batch, 1, {nx}, {ny}, {nz}), got {:?}",
                x.shape()
            )));
        }
        Ok(())
    }

    /// Inference-mode probabilities; a pure function of weights and input.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Vec<T>> {
        self.infer_inner(x, None)
    }

    /// Inference that also records every intermediate activation shape:
    /// conv and pool outputs per block, then the pooled feature vector.
    pub fn infer_with_trace(&self, x: &Tensor<T>) -> Result<(Vec<T>, Vec<Vec<usize>>)> {
        let mut trace = Vec::new();
        let probs = self.infer_inner(x, Some(&mut trace))?;
        Ok((probs, trace))
    }

    fn infer_inner(
        &self,
        x: &Tensor<T>,
        mut trace: Option<&mut Vec<Vec<usize>>>,
    ) -> Result<Vec<T>> {
        self.check_input(x)?;
        let mut h = x.clone();
        for b in &self.blocks {
            let conv = b.conv.forward(&h)?;
            if let Some(t) = trace.as_deref_mut() {
                t.push(conv.shape().to_vec());
            }
            let (pooled, _) = maxpool3d_forward(&conv)?;
            drop(conv);
            if let Some(t) = trace.as_deref_mut() {
                t.push(pooled.shape().to_vec());
            }
            h = b.bn.infer(&relu_forward(&pooled))?;
        }
        let features = gap_forward(&h)?;
        if let Some(t) = trace {
            t.push(features.shape().to_vec());
        }
        let hidden = relu_forward(&self.hidden.forward(&features)?);
        let logits = self.output.forward(&hidden)?;
        Ok(sigmoid_forward(&logits).into_data())
    }

    /// Forward pass. Training mode uses batch statistics, updates the running
    /// statistics, applies seeded dropout and caches activations for
    /// [`Model::backward`]; inference mode is [`Model::infer`].
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Vec<T>> {
        self.cache = None;
        if !mode.is_train() {
            return self.infer(x);
        }
        self.check_input(x)?;
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut h = x.clone();
        for b in &mut self.blocks {
            let conv = b.conv.forward(&h)?;
            let conv_shape = conv.shape().to_vec();
            let (pooled, argmax) = maxpool3d_forward(&conv)?;
            drop(conv);
            let (out, bn) = b.bn.forward(&relu_forward(&pooled), mode)?;
            caches.push(BlockCache {
                input: std::mem::replace(&mut h, out),
                conv_shape,
                pooled,
                argmax,
                bn: bn.expect("training mode caches"),
            });
        }
        let features_shape = h.shape().to_vec();
        let gap = gap_forward(&h)?;
        let hidden_pre = self.hidden.forward(&gap)?;
        let (hidden, mask) =
            dropout_forward(&relu_forward(&hidden_pre), self.config.dropout, mode)?;
        let logits = self.output.forward(&hidden)?;
        let probs = sigmoid_forward(&logits).into_data();
        self.cache = Some(ForwardCache {
            blocks: caches,
            features_shape,
            gap,
            hidden_pre,
            mask,
            hidden,
            probs: probs.clone(),
        });
        Ok(probs)
    }

    /// Backpropagates `d loss / d probability` through the last training
    /// forward pass, overwriting every parameter gradient.
    pub fn backward(&mut self, grad_probs: &[T]) -> Result<()> {
        let probs = &self.cached()?.probs;
        if grad_probs.len() != probs.len() {
            return Err(Error::Shape(format!(
                "{} probability gradients for a batch of {}",
                grad_probs.len(),
                probs.len()
            )));
        }
        let grad_logits = probs
            .iter()
            .zip(grad_probs)
            .map(|(&p, &g)| g * p * (T::one() - p))
            .collect();
        self.backward_logits(grad_logits)
    }

    /// Mean binary cross-entropy of the last training pass against `labels`,
    /// backpropagated. The sigmoid and loss derivatives are combined into
    /// `(p - y) / n`, which stays finite when the sigmoid saturates.
    pub fn backward_bce(&mut self, labels: &[T]) -> Result<T> {
        let probs = self.cached()?.probs.clone();
        let (loss, _) = super::layers::bce_loss(&probs, labels)?;
        let n = T::from_usize(probs.len()).expect("batch size");
        let grad_logits = probs
            .iter()
            .zip(labels)
            .map(|(&p, &y)| (p - y) / n)
            .collect();
        self.backward_logits(grad_logits)?;
        Ok(loss)
    }

    fn cached(&self) -> Result<&ForwardCache<T>> {
        self.cache.as_ref().ok_or_else(|| {
            Error::State("backward requires a preceding training-mode forward pass".into())
        })
    }

    fn backward_logits(&mut self, grad_logits: Vec<T>) -> Result<()> {
        let cache = self.cache.take().ok_or_else(|| {
            Error::State("backward requires a preceding training-mode forward pass".into())
        })?;
        let batch = grad_logits.len();
        let g = Tensor::new(vec![batch, 1], grad_logits)?;
        let (g, dw, db) = self.output.backward(&cache.hidden, &g)?;
        self.output.weight.grad = dw;
        self.output.bias.grad = db;
        let g = dropout_backward(&g, cache.mask.as_deref())?;
        let g = relu_backward(&cache.hidden_pre, &g)?;
        let (g, dw, db) = self.hidden.backward(&cache.gap, &g)?;
        self.hidden.weight.grad = dw;
        self.hidden.bias.grad = db;
        let mut g = gap_backward(&g, &cache.features_shape)?;
        for (i, (b, c)) in self.blocks.iter_mut().zip(&cache.blocks).enumerate().rev() {
            let (gp, dgamma, dbeta) = b.bn.backward(&c.bn, &g)?;
            b.bn.gamma.grad = dgamma;
            b.bn.beta.grad = dbeta;
            let gp = relu_backward(&c.pooled, &gp)?;
            let gc = maxpool3d_backward(&gp, &c.argmax, &c.conv_shape)?;
            let (gi, dw, db) = b.conv.backward_with(&c.input, &gc, i > 0)?;
            b.conv.weight.grad = dw;
            b.conv.bias.grad = db;
            g = gi;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngExt;

    fn conv_params(cin: usize, cout: usize) -> usize {
        cout * cin * 27 + cout
    }

    /// Closed-form count from the layer formulas.
    fn formula_count(widths: &[usize], dense: usize) -> (usize, usize) {
        let mut trainable = 0;
        let mut cin = 1;
        for &w in widths {
            trainable += conv_params(cin, w) + 2 * w;
            cin = w;
        }
        trainable += cin * dense + dense + dense + 1;
        let stats: usize = widths.iter().map(|w| 2 * w).sum();
        (trainable, trainable + stats)
    }

    fn small_config() -> ModelConfig {
        ModelConfig {
            input_dims: [16, 16, 8],
            widths: vec![3, 4],
            dense_units: 5,
            padding: Padding::Same,
            ..ModelConfig::default()
        }
    }

    fn random_input(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut r = rng::rng(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| r.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn default_counts() {
        let m = Model::<f32>::new(ModelConfig::default(), 0).unwrap();
        let c = m.param_count();
        assert_eq!(c.trainable, 1_351_873);
        assert_eq!(c.total, 1_352_897);
        assert_eq!(
            (c.trainable, c.total),
            formula_count(&[64, 64, 128, 256], 512)
        );
        assert_eq!(c.total - c.trainable, 1_024);
    }

    #[test]
    fn widened_first_conv_shifts_by_formula() {
        let base = formula_count(&[64, 64, 128, 256], 512);
        let cfg = ModelConfig {
            widths: vec![65, 64, 128, 256],
            ..ModelConfig::default()
        };
        let m = Model::<f32>::new(cfg, 0).unwrap();
        let c = m.param_count();
        // conv1 +28, BN1 gamma/beta +2, conv2 +27*64, BN1 stats +2
        let delta_trainable = 28 + 2 + 27 * 64;
        assert_eq!(c.trainable, base.0 + delta_trainable);
        assert_eq!(c.total, base.1 + delta_trainable + 2);
    }

    #[test]
    fn default_trace() {
        let trace = ModelConfig::default().spatial_trace().unwrap();
        assert_eq!(
            trace,
            vec![
                [126, 126, 62],
                [63, 63, 31],
                [61, 61, 29],
                [30, 30, 14],
                [28, 28, 12],
                [14, 14, 6],
                [12, 12, 4],
                [6, 6, 2]
            ]
        );
    }

    #[test]
    fn too_small_input_fails_at_construction() {
        let cfg = ModelConfig {
            input_dims: [64, 64, 32],
            ..ModelConfig::default()
        };
        assert!(matches!(
            Model::<f32>::new(cfg.clone(), 0),
            Err(Error::Shape(_))
        ));
        let same = ModelConfig {
            padding: Padding::Same,
            ..cfg
        };
        assert!(Model::<f32>::new(same, 0).is_ok());
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let m = Model::<f64>::new(small_config(), 3).unwrap();
        let x = random_input(&[2, 1, 16, 16, 8], 4);
        let (p, trace) = m.infer_with_trace(&x).unwrap();
        assert_eq!(p.len(), 2);
        assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(trace.last().unwrap(), &vec![2, 4]);
        assert_eq!(trace[0], vec![2, 3, 16, 16, 8]);
        assert_eq!(m.infer(&x).unwrap(), p);

        let mut a = m.clone();
        let mut b = m.clone();
        let mode = Mode::Train { dropout_seed: 9 };
        assert_eq!(a.forward(&x, mode).unwrap(), b.forward(&x, mode).unwrap());
        assert!(m.infer(&random_input(&[1, 1, 16, 16, 9], 1)).is_err());
    }

    #[test]
    fn backward_without_forward_is_state_error() {
        let mut m = Model::<f64>::new(small_config(), 3).unwrap();
        assert!(matches!(m.backward(&[1.0]), Err(Error::State(_))));
        let x = random_input(&[1, 1, 16, 16, 8], 4);
        m.forward(&x, Mode::Infer).unwrap();
        assert!(matches!(m.backward(&[1.0]), Err(Error::State(_))));
    }

    #[test]
    fn small_step_decreases_loss() {
        let mut m = Model::<f64>::new(small_config(), 5).unwrap();
        let x = random_input(&[1, 1, 16, 16, 8], 6);
        let mode = Mode::Train { dropout_seed: 1 };
        m.forward(&x, mode).unwrap();
        let before = m.backward_bce(&[1.0]).unwrap();
        for p in m.params_mut() {
            for (v, g) in p.value.iter_mut().zip(&p.grad) {
                *v -= 1e-5 * g;
            }
        }
        m.forward(&x, mode).unwrap();
        let after = m.backward_bce(&[1.0]).unwrap();
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn bce_path_matches_probability_path() {
        let mut a = Model::<f64>::new(small_config(), 7).unwrap();
        let mut b = a.clone();
        let x = random_input(&[2, 1, 16, 16, 8], 8);
        let mode = Mode::Train { dropout_seed: 2 };
        let p = a.forward(&x, mode).unwrap();
        a.backward_bce(&[1.0, 0.0]).unwrap();
        b.forward(&x, mode).unwrap();
        let (_, gp) = crate::nn::bce_loss(&p, &[1.0, 0.0]).unwrap();
        b.backward(&gp).unwrap();
        for (pa, pb) in a.params().iter().zip(b.params()) {
            for (x, y) in pa.grad.iter().zip(&pb.grad) {
                assert!((x - y).abs() <= 1e-10 * (1.0 + x.abs()));
            }
        }
    }
}
