//! Layer stack, reverse-mode gradients and SGD with momentum.

pub mod conv;
pub mod layers;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::bases::BasisSet;
use crate::dcf::{dcf_backward_cached, dcf_forward_cached, decompose_filters, DcfLayer};
use crate::error::{DcfError, Result};
use crate::tensor::Tensor;

pub use conv::{conv2d_backward, conv2d_forward, output_size, ConvGrads, ConvSpec};
pub use layers::{
    batchnorm, batchnorm_backward, fc, fc_backward, maxpool, maxpool_backward, relu, relu_backward, softmax_xent,
    softmax_xent_backward, BatchNorm, BatchNormCache, Linear, MaxPool,
};

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(ConvSpec),
    Dcf(DcfLayer),
    BatchNorm(BatchNorm),
    Relu,
    MaxPool(MaxPool),
    /// Flattens its input; output is `(N, out, 1, 1)`.
    Linear(Linear),
}

impl Layer {
    pub fn name(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv",
            Layer::Dcf(_) => "dcf",
            Layer::BatchNorm(_) => "bn",
            Layer::Relu => "relu",
            Layer::MaxPool(_) => "maxpool",
            Layer::Linear(_) => "fc",
        }
    }

    /// Trainable arrays with their weight-decay flag.
    pub fn params(&self) -> Vec<(&[f64], bool)> {
        match self {
            Layer::Conv(c) => vec![(&c.weights, true), (&c.bias, false)],
            Layer::Dcf(d) => vec![(&d.coeffs, true), (&d.bias, false)],
            Layer::BatchNorm(b) => vec![(&b.gamma, false), (&b.beta, false)],
            Layer::Linear(l) => vec![(&l.weights, true), (&l.bias, false)],
            Layer::Relu | Layer::MaxPool(_) => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<(&mut Vec<f64>, bool)> {
        match self {
            Layer::Conv(c) => vec![(&mut c.weights, true), (&mut c.bias, false)],
            Layer::Dcf(d) => vec![(&mut d.coeffs, true), (&mut d.bias, false)],
            Layer::BatchNorm(b) => vec![(&mut b.gamma, false), (&mut b.beta, false)],
            Layer::Linear(l) => vec![(&mut l.weights, true), (&mut l.bias, false)],
            Layer::Relu | Layer::MaxPool(_) => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch-norm layers.
    Train,
    /// Running statistics in batch-norm layers.
    Eval,
}

#[derive(Debug, Clone)]
enum Cache {
    None,
    Dcf(Tensor),
    BatchNorm(BatchNormCache),
    MaxPool(Vec<usize>),
}

/// Activations and saved state of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// `activations[0]` is the input, `activations[i + 1]` the output of layer `i`.
    pub activations: Vec<Tensor>,
    caches: Vec<Cache>,
}

impl ForwardPass {
    pub fn output(&self) -> &Tensor {
        self.activations.last().unwrap()
    }
}

/// Gradients aligned with [`Network::params`], plus the input gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub params: Vec<Vec<f64>>,
    pub input: Tensor,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Network {
    pub layers: Vec<Layer>,
}

impl Network {
    pub fn new(layers: Vec<Layer>) -> Self {
        Network { layers }
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = forward_layer(layer, &cur, mode)?.0;
        }
        Ok(cur)
    }

    pub fn forward_cached(&self, x: &Tensor, mode: Mode) -> Result<ForwardPass> {
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut caches = Vec::with_capacity(self.layers.len());
        activations.push(x.clone());
        for layer in &self.layers {
            let (out, cache) = forward_layer(layer, activations.last().unwrap(), mode)?;
            activations.push(out);
            caches.push(cache);
        }
        Ok(ForwardPass { activations, caches })
    }

    pub fn backward(&self, pass: &ForwardPass, grad_out: &Tensor) -> Result<Gradients> {
        if pass.caches.len() != self.layers.len() {
            return Err(DcfError::shape("forward pass does not belong to this network"));
        }
        if grad_out.shape() != pass.output().shape() {
            return Err(DcfError::shape("upstream gradient shape"));
        }
        let mut per_layer: Vec<Vec<Vec<f64>>> = vec![Vec::new(); self.layers.len()];
        let mut g = grad_out.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let x = &pass.activations[i];
            let (params, gx) = backward_layer(layer, x, &pass.caches[i], &g)?;
            per_layer[i] = params;
            g = gx;
        }
        Ok(Gradients {
            params: per_layer.into_iter().flatten().collect(),
            input: g,
        })
    }

    /// Mean cross-entropy, its gradients, and the forward pass that produced them.
    pub fn loss_and_grad(&self, x: &Tensor, labels: &[u8], mode: Mode) -> Result<(f64, Gradients, ForwardPass)> {
        let pass = self.forward_cached(x, mode)?;
        let (loss, probs) = softmax_xent(pass.output(), labels)?;
        let g = softmax_xent_backward(&probs, labels);
        let grads = self.backward(&pass, &g)?;
        Ok((loss, grads, pass))
    }

    /// Folds the batch statistics of a training-mode pass into every
    /// batch-norm layer's running averages.
    pub fn update_running_stats(&mut self, pass: &ForwardPass) {
        let count = pass.activations[0].batch();
        for (i, (layer, cache)) in self.layers.iter_mut().zip(&pass.caches).enumerate() {
            if let (Layer::BatchNorm(bn), Cache::BatchNorm(c)) = (layer, cache) {
                if c.train {
                    let plane = pass.activations[i].plane();
                    layers::update_running_stats(bn, c, count * plane);
                }
            }
        }
    }

    pub fn params(&self) -> Vec<(&[f64], bool)> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<(&mut Vec<f64>, bool)> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(p, _)| p.len()).sum()
    }

    /// Top-1 predictions in eval mode.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<u8>> {
        let logits = self.forward(x, Mode::Eval)?;
        Ok((0..logits.batch()).map(|n| argmax(logits.sample(n)) as u8).collect())
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn forward_layer(layer: &Layer, x: &Tensor, mode: Mode) -> Result<(Tensor, Cache)> {
    Ok(match layer {
        Layer::Conv(c) => (conv2d_forward(x, c)?, Cache::None),
        Layer::Dcf(d) => {
            let (y, response) = dcf_forward_cached(x, d)?;
            (y, Cache::Dcf(response))
        }
        Layer::BatchNorm(bn) => {
            let (y, c) = batchnorm(x, bn, mode == Mode::Train)?;
            (y, Cache::BatchNorm(c))
        }
        Layer::Relu => (relu(x), Cache::None),
        Layer::MaxPool(p) => {
            let (y, arg) = maxpool(x, *p)?;
            (y, Cache::MaxPool(arg))
        }
        Layer::Linear(l) => (fc(x, l)?, Cache::None),
    })
}

fn backward_layer(layer: &Layer, x: &Tensor, cache: &Cache, g: &Tensor) -> Result<(Vec<Vec<f64>>, Tensor)> {
    Ok(match (layer, cache) {
        (Layer::Conv(c), _) => {
            let r = conv2d_backward(x, c, g)?;
            (vec![r.weights, r.bias], r.input)
        }
        (Layer::Dcf(d), Cache::Dcf(response)) => {
            let r = dcf_backward_cached(x, response, d, g)?;
            (vec![r.coeffs, r.bias], r.input)
        }
        (Layer::BatchNorm(bn), Cache::BatchNorm(c)) => {
            let (gg, gb, gx) = batchnorm_backward(bn, c, g)?;
            (vec![gg, gb], gx)
        }
        (Layer::Relu, _) => (Vec::new(), relu_backward(x, g)?),
        (Layer::MaxPool(_), Cache::MaxPool(arg)) => (Vec::new(), maxpool_backward(x.shape(), arg, g)?),
        (Layer::Linear(l), _) => {
            let (gw, gb, gx) = fc_backward(x, l, g)?;
            (vec![gw, gb], gx)
        }
        _ => return Err(DcfError::shape("forward cache does not match layer")),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr_start: f64,
    pub lr_end: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_start: 1e-2,
            lr_end: 1e-4,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 100,
            epochs: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr_start > 0.0
            && self.lr_end > 0.0
            && self.lr_end <= self.lr_start
            && (0.0..1.0).contains(&self.momentum)
            && self.weight_decay >= 0.0
            && self.batch_size > 0
            && self.epochs > 0;
        if ok {
            Ok(())
        } else {
            Err(DcfError::Config(format!("invalid training configuration {self:?}")))
        }
    }

    /// Log-linear from `lr_start` at epoch 0 to `lr_end` at the last epoch.
    pub fn lr(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            return self.lr_start;
        }
        let t = epoch.min(self.epochs - 1) as f64 / (self.epochs - 1) as f64;
        self.lr_start * (self.lr_end / self.lr_start).powf(t)
    }
}

/// Momentum buffers for every parameter array.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Sgd {
    pub velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(net: &Network) -> Self {
        Sgd {
            velocity: net.params().iter().map(|(p, _)| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn step(&mut self, net: &mut Network, grads: &[Vec<f64>], cfg: &TrainConfig, epoch: usize) -> Result<()> {
        let lr = cfg.lr(epoch);
        let mut params = net.params_mut();
        if params.len() != grads.len() || params.len() != self.velocity.len() {
            return Err(DcfError::shape("gradient list does not match parameters"));
        }
        for (((p, decay), g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            if p.len() != g.len() || p.len() != v.len() {
                return Err(DcfError::shape("gradient array size"));
            }
            let wd = if *decay { cfg.weight_decay } else { 0.0 };
            sgd_momentum_step(p, g, v, lr, cfg.momentum, wd);
        }
        Ok(())
    }
}

/// `v ← μ v − lr (g + wd θ)`, then `θ ← θ + v`.
pub fn sgd_momentum_step(theta: &mut [f64], grad: &[f64], velocity: &mut [f64], lr: f64, momentum: f64, weight_decay: f64) {
    for ((t, g), v) in theta.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = momentum * *v - lr * (g + weight_decay * *t);
        *t += *v;
    }
}

/// Filter bases for the two convolutional layers of a decomposed Conv-2.
pub type Conv2Bases = [Arc<BasisSet>; 2];

pub const CONV2_CHANNELS: [usize; 2] = [16, 64];
pub const CONV2_KERNEL: usize = 5;
pub const CONV2_HIDDEN: usize = 128;
pub const CONV2_CLASSES: usize = 10;

/// Conv-2 for 28x28 single-channel input: two blocks of 5x5 conv, batch
/// norm, ReLU and 3x3/2 max pooling, then fc-128, ReLU, fc-10.
///
/// Dense layers when `bases` is `None`; otherwise each conv is decomposed
/// over its basis. Dense filters are drawn He-normal in either case and, for
/// decomposed layers, projected onto the basis, so both variants consume the
/// generator identically.
pub fn conv2(bases: Option<&Conv2Bases>, seed: u64) -> Result<Network> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    let mut in_c = 1;
    for (i, &out_c) in CONV2_CHANNELS.iter().enumerate() {
        let l = CONV2_KERNEL;
        let std = (2.0 / (l * l * in_c) as f64).sqrt();
        let weights = normal_vec(&mut rng, out_c * in_c * l * l, std);
        match bases {
            None => layers.push(Layer::Conv(ConvSpec::new(in_c, out_c, l, 1, l / 2, weights, vec![0.0; out_c])?)),
            Some(b) => {
                let basis = b[i].clone();
                if basis.size() != l {
                    return Err(DcfError::shape(format!(
                        "basis for conv{} has L={}, expected {l}",
                        i + 1,
                        basis.size()
                    )));
                }
                let mut layer = DcfLayer::zeros(basis, in_c, out_c, 1, l / 2);
                layer.coeffs = decompose_filters(&weights, &layer.basis)?.coeffs;
                layers.push(Layer::Dcf(layer));
            }
        }
        layers.push(Layer::BatchNorm(BatchNorm::new(out_c)));
        layers.push(Layer::Relu);
        layers.push(Layer::MaxPool(MaxPool::MP3X3));
        in_c = out_c;
    }
    let flat = CONV2_CHANNELS[1] * 7 * 7;
    for (fin, fout, relu_after) in [(flat, CONV2_HIDDEN, true), (CONV2_HIDDEN, CONV2_CLASSES, false)] {
        let mut lin = Linear::zeros(fin, fout);
        lin.weights = normal_vec(&mut rng, fin * fout, (2.0 / fin as f64).sqrt());
        layers.push(Layer::Linear(lin));
        if relu_after {
            layers.push(Layer::Relu);
        }
    }
    Ok(Network::new(layers))
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    let dist = Normal::new(0.0, std).unwrap();
    (0..n).map(|_| dist.sample(rng)).collect()
}
