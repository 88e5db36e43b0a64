use std::ops::Range;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Architecture, ConvAeSpec, DenseAeSpec, ModelError, ModelFamily};
use crate::autograd::{
    AdamState, BatchStats, BnMode, ConvGeometry, Padding, Scalar, Tape, Tensor, TensorError, Var,
};
use crate::features::{FeatureKind, FeatureSet};

/// Weight of the previous value in the running-statistics update.
pub const BN_MOMENTUM: f64 = 0.9;

/// Encoder activation chain of the standard convolutional autoencoder.
const STANDARD_CONV_CHAIN: [[usize; 3]; 6] = [
    [1, 128, 32],
    [32, 64, 32],
    [64, 32, 32],
    [128, 16, 16],
    [256, 8, 8],
    [512, 4, 4],
];

/// Rows per forward pass when scoring.
const DENSE_SCORE_CHUNK: usize = 512;
const CONV_SCORE_CHUNK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BnBufferIndex {
    pub mean: usize,
    pub var: usize,
}

/// One step of the forward pass. Indices refer to [`Network::params`] and
/// [`Network::buffers`].
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense {
        w: usize,
        b: usize,
    },
    Conv {
        w: usize,
        b: usize,
        stride: (usize, usize),
        padding: Padding,
    },
    ConvTranspose {
        w: usize,
        b: usize,
        stride: (usize, usize),
        target: [usize; 3],
    },
    BatchNorm {
        gamma: usize,
        beta: usize,
        running: BnBufferIndex,
    },
    Relu,
    /// Per-sample output shape; the batch axis is kept.
    Reshape(Vec<usize>),
}

/// Result of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    /// Training-mode loss before the update.
    pub loss: f64,
}

/// A sequential autoencoder with trainable parameters and batch-norm
/// running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T: Scalar = f32> {
    arch: Architecture,
    layers: Vec<Layer>,
    /// Per-sample output shape of every layer.
    shapes: Vec<Vec<usize>>,
    /// Number of leading layers that produce the latent code.
    encoder_len: usize,
    param_names: Vec<String>,
    params: Vec<Tensor<T>>,
    buffer_names: Vec<String>,
    buffers: Vec<Tensor<T>>,
}

type LayerOutput<T> = (Var, Vec<(BnBufferIndex, BatchStats<T>)>);

impl<T: Scalar> Network<T> {
    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn family(&self) -> ModelFamily {
        self.arch.family()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Per-sample output shape of layer `i`, computed when the network was
    /// built.
    pub fn layer_shape(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    pub fn latent_shape(&self) -> &[usize] {
        &self.shapes[self.encoder_len - 1]
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.param_names
    }

    pub fn buffers(&self) -> &[Tensor<T>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.buffers
    }

    pub fn buffer_names(&self) -> &[String] {
        &self.buffer_names
    }

    /// Trainable parameters plus running statistics.
    pub fn n_tensors(&self) -> usize {
        self.params.len() + self.buffers.len()
    }

    pub fn n_weights(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Every named tensor, parameters first.
    pub fn named_tensors(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.param_names
            .iter()
            .zip(&self.params)
            .chain(self.buffer_names.iter().zip(&self.buffers))
            .map(|(n, t)| (n.as_str(), t))
    }

    pub fn named_tensor_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        if let Some(i) = self.param_names.iter().position(|n| n == name) {
            return Some(&mut self.params[i]);
        }
        let i = self.buffer_names.iter().position(|n| n == name)?;
        Some(&mut self.buffers[i])
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            arch: self.arch.clone(),
            layers: self.layers.clone(),
            shapes: self.shapes.clone(),
            encoder_len: self.encoder_len,
            param_names: self.param_names.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            buffer_names: self.buffer_names.clone(),
            buffers: self.buffers.iter().map(Tensor::cast).collect(),
        }
    }

    /// Adam state matching this network's parameters.
    pub fn optimizer(&self, lr: f64) -> AdamState<T> {
        AdamState::new(self.params.iter().map(Tensor::shape), lr)
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<(), ModelError> {
        let sample = self.arch.sample_shape();
        if x.rank() != sample.len() + 1 || x.shape()[1..] != sample[..] || x.shape()[0] == 0 {
            return Err(TensorError::ShapeMismatch(format!(
                "{} model expects [batch, {sample:?}], got {:?}",
                self.family(),
                x.shape()
            ))
            .into());
        }
        Ok(())
    }

    fn run<'p>(
        &'p self,
        tape: &mut Tape<'p, T>,
        mut h: Var,
        pv: &[Var],
        layers: Range<usize>,
        train: bool,
    ) -> Result<LayerOutput<T>, ModelError> {
        let mut stats = Vec::new();
        for layer in &self.layers[layers] {
            h = match layer {
                Layer::Dense { w, b } => tape.dense(h, pv[*w], Some(pv[*b]))?,
                Layer::Conv {
                    w,
                    b,
                    stride,
                    padding,
                } => tape.conv2d(h, pv[*w], Some(pv[*b]), *stride, *padding)?,
                Layer::ConvTranspose { w, b, stride, target } => {
                    tape.conv_transpose2d(h, pv[*w], Some(pv[*b]), *stride, *target)?
                }
                Layer::BatchNorm { gamma, beta, running } => {
                    let mode = if train {
                        BnMode::Train
                    } else {
                        BnMode::Infer {
                            running_mean: self.buffers[running.mean].data(),
                            running_var: self.buffers[running.var].data(),
                        }
                    };
                    let (y, s) = tape.batch_norm(h, pv[*gamma], pv[*beta], mode)?;
                    if let Some(s) = s {
                        stats.push((*running, s));
                    }
                    y
                }
                Layer::Relu => tape.relu(h),
                Layer::Reshape(shape) => {
                    let batch = tape.value(h).shape()[0];
                    let mut full = vec![batch];
                    full.extend_from_slice(shape);
                    tape.reshape(h, &full)?
                }
            };
        }
        Ok((h, stats))
    }

    fn infer(&self, x: &Tensor<T>, layers: Range<usize>) -> Result<Tensor<T>, ModelError> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let pv: Vec<Var> = self.params.iter().map(|p| tape.borrowed(p, false)).collect();
        let input = tape.borrowed(x, false);
        let (out, _) = self.run(&mut tape, input, &pv, layers, false)?;
        Ok(tape.value(out).clone())
    }

    /// Inference-mode reconstruction.
    pub fn reconstruct(&self, x: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        self.infer(x, 0..self.layers.len())
    }

    /// Inference-mode latent codes, `[batch, latent]`.
    pub fn encode(&self, x: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        self.infer(x, 0..self.encoder_len)
    }

    /// Inference-mode MSE over the whole batch.
    pub fn eval_loss(&self, x: &Tensor<T>) -> Result<f64, ModelError> {
        let y = self.reconstruct(x)?;
        Ok(mean_sq_diff(x.data(), y.data()))
    }

    /// Training-mode loss, its gradient for every parameter, and the batch
    /// statistics seen by each batch-norm layer.
    #[allow(clippy::type_complexity)]
    pub fn loss_and_grads(
        &self,
        x: &Tensor<T>,
    ) -> Result<(f64, Vec<Tensor<T>>, Vec<(BnBufferIndex, BatchStats<T>)>), ModelError> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let pv: Vec<Var> = self.params.iter().map(|p| tape.borrowed(p, true)).collect();
        let input = tape.borrowed(x, false);
        let (out, stats) = self.run(&mut tape, input, &pv, 0..self.layers.len(), true)?;
        let loss = tape.mse(out, input)?;
        let loss_value = tape.value(loss).data()[0].to_f64_lossy();
        let mut grads = tape.backward(loss)?;
        let g = pv
            .iter()
            .zip(&self.params)
            .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        Ok((loss_value, g, stats))
    }

    /// Training-mode loss without gradients.
    pub fn train_loss(&self, x: &Tensor<T>) -> Result<f64, ModelError> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let pv: Vec<Var> = self.params.iter().map(|p| tape.borrowed(p, false)).collect();
        let input = tape.borrowed(x, false);
        let (out, _) = self.run(&mut tape, input, &pv, 0..self.layers.len(), true)?;
        let loss = tape.mse(out, input)?;
        Ok(tape.value(loss).data()[0].to_f64_lossy())
    }

    /// One Adam step on the reconstruction MSE of `x`, followed by the
    /// running-statistics update of every batch-norm layer.
    pub fn train_step(&mut self, adam: &mut AdamState<T>, x: &Tensor<T>) -> Result<StepOutcome, ModelError> {
        let (loss, grads, stats) = self.loss_and_grads(x)?;
        adam.step(&mut self.params, &grads)?;
        self.update_running(&stats);
        Ok(StepOutcome { loss })
    }

    fn update_running(&mut self, stats: &[(BnBufferIndex, BatchStats<T>)]) {
        let keep = T::from_f64_lossy(BN_MOMENTUM);
        let take = T::from_f64_lossy(1.0 - BN_MOMENTUM);
        for (idx, s) in stats {
            for (buf, batch) in [(idx.mean, &s.mean), (idx.var, &s.var)] {
                for (r, &b) in self.buffers[buf].data_mut().iter_mut().zip(batch) {
                    *r = keep * *r + take * b;
                }
            }
        }
    }
}

fn mean_sq_diff<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    let sum: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x.to_f64_lossy() - y.to_f64_lossy();
            d * d
        })
        .sum();
    sum / a.len() as f64
}

/// Inference-mode reconstruction MSE of every row (dense) or patch (conv).
pub fn reconstruction_error(model: &Network<f32>, batch: &FeatureSet) -> Result<Vec<f64>, ModelError> {
    let (expected, chunk) = match model.family() {
        ModelFamily::Dense => (FeatureKind::DenseVectors, DENSE_SCORE_CHUNK),
        ModelFamily::Conv => (FeatureKind::ConvPatches, CONV_SCORE_CHUNK),
    };
    if batch.kind() != expected {
        return Err(ModelError::KindMismatch {
            expected: model.family(),
            got: batch.kind(),
        });
    }
    let data = batch.data();
    let n = batch.len();
    let width = data.len().checked_div(n).unwrap_or(0);
    let mut errors = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let x = data.slice_rows(start, end);
        let y = model.reconstruct(&x)?;
        errors.extend(
            x.data()
                .chunks_exact(width)
                .zip(y.data().chunks_exact(width))
                .map(|(a, b)| mean_sq_diff(a, b)),
        );
        start = end;
    }
    Ok(errors)
}

enum Init {
    Glorot { fan_in: usize, fan_out: usize },
    Zeros,
    Ones,
}

struct Builder<T: Scalar> {
    rng: ChaCha8Rng,
    net: Network<T>,
    shape: Vec<usize>,
}

impl<T: Scalar> Builder<T> {
    fn new(arch: &Architecture, seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            shape: arch.sample_shape(),
            net: Network {
                arch: arch.clone(),
                layers: Vec::new(),
                shapes: Vec::new(),
                encoder_len: 0,
                param_names: Vec::new(),
                params: Vec::new(),
                buffer_names: Vec::new(),
                buffers: Vec::new(),
            },
        }
    }

    fn param(&mut self, name: String, shape: &[usize], init: Init) -> usize {
        let t = match init {
            Init::Glorot { fan_in, fan_out } => {
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let dist = Uniform::new_inclusive(-limit, limit);
                Tensor::from_fn(shape, |_| T::from_f64_lossy(dist.sample(&mut self.rng)))
            }
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::filled(shape, T::one()),
        };
        self.net.param_names.push(name);
        self.net.params.push(t);
        self.net.params.len() - 1
    }

    fn buffer(&mut self, name: String, shape: &[usize], value: f64) -> usize {
        self.net.buffer_names.push(name);
        self.net.buffers.push(Tensor::filled(shape, T::from_f64_lossy(value)));
        self.net.buffers.len() - 1
    }

    fn push(&mut self, layer: Layer, shape: Vec<usize>) {
        self.net.layers.push(layer);
        self.shape = shape.clone();
        self.net.shapes.push(shape);
    }

    fn dense(&mut self, name: &str, out: usize) -> Result<(), ModelError> {
        let [n_in] = self.shape[..] else {
            return Err(ModelError::Architecture(format!(
                "dense layer '{name}' after shape {:?}",
                self.shape
            )));
        };
        let w = self.param(format!("{name}.w"), &[n_in, out], Init::Glorot { fan_in: n_in, fan_out: out });
        let b = self.param(format!("{name}.b"), &[out], Init::Zeros);
        self.push(Layer::Dense { w, b }, vec![out]);
        Ok(())
    }

    fn conv(
        &mut self,
        name: &str,
        filters: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: Padding,
    ) -> Result<(), ModelError> {
        let chw = self.chw(name)?;
        let geom = ConvGeometry::new(chw, filters, kernel, stride, padding)?;
        let (kh, kw) = kernel;
        let w = self.param(
            format!("{name}.w"),
            &[filters, chw[0], kh, kw],
            Init::Glorot {
                fan_in: chw[0] * kh * kw,
                fan_out: filters * kh * kw,
            },
        );
        let b = self.param(format!("{name}.b"), &[filters], Init::Zeros);
        self.push(
            Layer::Conv {
                w,
                b,
                stride,
                padding,
            },
            vec![filters, geom.out_h, geom.out_w],
        );
        Ok(())
    }

    fn conv_transpose(
        &mut self,
        name: &str,
        kernel: usize,
        stride: (usize, usize),
        target: [usize; 3],
    ) -> Result<(), ModelError> {
        let chw = self.chw(name)?;
        let geom = ConvGeometry::new(target, chw[0], (kernel, kernel), stride, Padding::Same)?;
        if [geom.out_h, geom.out_w] != [chw[1], chw[2]] {
            return Err(TensorError::UnreachableTargetShape(format!(
                "layer '{name}': {chw:?} cannot be upsampled to {target:?} with stride {stride:?}"
            ))
            .into());
        }
        let w = self.param(
            format!("{name}.w"),
            &[chw[0], target[0], kernel, kernel],
            Init::Glorot {
                fan_in: chw[0] * kernel * kernel,
                fan_out: target[0] * kernel * kernel,
            },
        );
        let b = self.param(format!("{name}.b"), &[target[0]], Init::Zeros);
        self.push(Layer::ConvTranspose { w, b, stride, target }, target.to_vec());
        Ok(())
    }

    fn chw(&self, name: &str) -> Result<[usize; 3], ModelError> {
        self.shape.as_slice().try_into().map_err(|_| {
            ModelError::Architecture(format!("convolution '{name}' after shape {:?}", self.shape))
        })
    }

    fn bn_relu(&mut self, name: &str) {
        let channels = self.shape[0];
        let gamma = self.param(format!("{name}.bn.gamma"), &[channels], Init::Ones);
        let beta = self.param(format!("{name}.bn.beta"), &[channels], Init::Zeros);
        let mean = self.buffer(format!("{name}.bn.running_mean"), &[channels], 0.0);
        let var = self.buffer(format!("{name}.bn.running_var"), &[channels], 1.0);
        let shape = self.shape.clone();
        self.push(
            Layer::BatchNorm {
                gamma,
                beta,
                running: BnBufferIndex { mean, var },
            },
            shape.clone(),
        );
        self.push(Layer::Relu, shape);
    }

    fn reshape(&mut self, shape: Vec<usize>) -> Result<(), ModelError> {
        if shape.iter().product::<usize>() != self.shape.iter().product::<usize>() {
            return Err(ModelError::Architecture(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape
            )));
        }
        self.push(Layer::Reshape(shape.clone()), shape);
        Ok(())
    }

    fn mark_latent(&mut self) {
        self.net.encoder_len = self.net.layers.len();
    }

    fn finish(self) -> Result<Network<T>, ModelError> {
        let input = self.net.arch.sample_shape();
        if self.shape != input {
            return Err(ModelError::Architecture(format!(
                "decoder produces {:?}, input is {input:?}",
                self.shape
            )));
        }
        Ok(self.net)
    }
}

fn build_dense<T: Scalar>(arch: &Architecture, spec: &DenseAeSpec, seed: u64) -> Result<Network<T>, ModelError> {
    if spec.input_dim == 0 || spec.hidden == 0 || spec.latent == 0 {
        return Err(ModelError::Architecture(format!("zero-width layer in {spec:?}")));
    }
    let mut b = Builder::new(arch, seed);
    for i in 0..spec.depth {
        b.dense(&format!("enc{i}"), spec.hidden)?;
        b.bn_relu(&format!("enc{i}"));
    }
    b.dense("latent", spec.latent)?;
    b.mark_latent();
    for i in 0..spec.depth {
        b.dense(&format!("dec{i}"), spec.hidden)?;
        b.bn_relu(&format!("dec{i}"));
    }
    b.dense("out", spec.input_dim)?;
    b.finish()
}

fn build_conv<T: Scalar>(arch: &Architecture, spec: &ConvAeSpec, seed: u64) -> Result<Network<T>, ModelError> {
    if spec.layers.is_empty() || spec.latent == 0 || spec.input.contains(&0) {
        return Err(ModelError::Architecture(format!("degenerate conv spec {spec:?}")));
    }
    let mut b = Builder::new(arch, seed);
    let mut chain = vec![spec.input];
    for (i, l) in spec.layers.iter().enumerate() {
        let name = format!("enc{i}");
        b.conv(&name, l.filters, (l.kernel, l.kernel), l.stride, Padding::Same)?;
        b.bn_relu(&name);
        chain.push(b.chw(&name)?);
    }
    if chain != spec.encoder_chain() {
        return Err(ModelError::Architecture(format!(
            "encoder chain {chain:?} differs from the spec's {:?}",
            spec.encoder_chain()
        )));
    }
    let [c, h, w] = *chain.last().expect("non-empty");
    b.conv("latent", spec.latent, (h, w), (1, 1), Padding::Valid)?;
    b.reshape(vec![spec.latent])?;
    b.mark_latent();
    b.dense("inflate", c * h * w)?;
    b.bn_relu("inflate");
    b.reshape(vec![c, h, w])?;
    let n = spec.layers.len();
    for (j, i) in (0..n).rev().enumerate() {
        let name = format!("dec{j}");
        b.conv_transpose(&name, spec.layers[i].kernel, spec.layers[i].stride, chain[i])?;
        if i > 0 {
            b.bn_relu(&name);
        }
    }
    b.finish()
}

/// Builds any architecture with Glorot-uniform weights drawn from a
/// ChaCha8 stream seeded with `seed`.
pub fn build<T: Scalar>(arch: &Architecture, seed: u64) -> Result<Network<T>, ModelError> {
    match arch {
        Architecture::Dense(spec) => build_dense(arch, spec, seed),
        Architecture::Conv(spec) => build_conv(arch, spec, seed),
    }
}

/// The standard 640 → 512×4 → 8 → 512×4 → 640 dense autoencoder.
pub fn build_dense_ae(seed: u64) -> Network<f32> {
    let net = build(&Architecture::Dense(DenseAeSpec::standard()), seed).expect("standard dense spec is valid");
    let widths: Vec<usize> = net
        .layers()
        .iter()
        .zip(&net.shapes)
        .filter(|(l, _)| matches!(l, Layer::Dense { .. }))
        .map(|(_, s)| s[0])
        .collect();
    assert_eq!(widths, [512, 512, 512, 512, 8, 512, 512, 512, 512, 640]);
    net
}

/// The standard convolutional autoencoder over 1×128×32 patches.
pub fn build_conv_ae(seed: u64) -> Network<f32> {
    let spec = ConvAeSpec::standard();
    let net = build(&Architecture::Conv(spec), seed).expect("standard conv spec is valid");
    let encoder: Vec<&[usize]> = std::iter::once(&[1usize, 128, 32][..])
        .chain(
            net.layers()
                .iter()
                .zip(&net.shapes)
                .filter(|(l, _)| matches!(l, Layer::Conv { padding: Padding::Same, .. }))
                .map(|(_, s)| s.as_slice()),
        )
        .collect();
    assert_eq!(encoder, STANDARD_CONV_CHAIN.iter().map(|s| &s[..]).collect::<Vec<_>>());
    assert_eq!(net.latent_shape(), [40]);
    assert_eq!(net.shapes.last().map(Vec::as_slice), Some(&[1, 128, 32][..]));
    net
}
