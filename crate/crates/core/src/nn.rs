//! Small feedforward network (convolution + dense layers) with manual
//! backpropagation and a weight-magnitude band penalty.
//!
//! Every layer is stored as a weight matrix of `rows x cols` (outputs by
//! fan-in). Convolutions are lowered to that form by unrolling input patches,
//! which is also how a layer maps onto one crossbar tile.

use std::borrow::Cow;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::rng::substream;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerKind {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    /// Valid (unpadded) stride-1 convolution with a square kernel.
    Conv {
        in_channels: usize,
        height: usize,
        width: usize,
        out_channels: usize,
        kernel: usize,
    },
}

impl LayerKind {
    /// Rows of the weight matrix (output units or output channels).
    pub fn rows(&self) -> usize {
        match *self {
            LayerKind::Dense { outputs, .. } => outputs,
            LayerKind::Conv { out_channels, .. } => out_channels,
        }
    }

    /// Columns of the weight matrix (fan-in of one output).
    pub fn cols(&self) -> usize {
        match *self {
            LayerKind::Dense { inputs, .. } => inputs,
            LayerKind::Conv {
                in_channels, kernel, ..
            } => in_channels * kernel * kernel,
        }
    }

    pub fn input_len(&self) -> usize {
        match *self {
            LayerKind::Dense { inputs, .. } => inputs,
            LayerKind::Conv {
                in_channels,
                height,
                width,
                ..
            } => in_channels * height * width,
        }
    }

    /// Number of spatial output positions; 1 for dense layers.
    pub fn positions(&self) -> usize {
        match *self {
            LayerKind::Dense { .. } => 1,
            LayerKind::Conv {
                height, width, kernel, ..
            } => (height + 1 - kernel) * (width + 1 - kernel),
        }
    }

    pub fn output_len(&self) -> usize {
        self.rows() * self.positions()
    }

    fn is_valid(&self) -> bool {
        match *self {
            LayerKind::Dense { inputs, outputs } => inputs > 0 && outputs > 0,
            LayerKind::Conv {
                in_channels,
                height,
                width,
                out_channels,
                kernel,
            } => in_channels > 0 && out_channels > 0 && kernel > 0 && kernel <= height && kernel <= width,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub kind: LayerKind,
    pub activation: Activation,
    /// Row-major `rows x cols`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    /// He-initialized layer with zero bias.
    pub fn init<R: Rng>(kind: LayerKind, activation: Activation, rng: &mut R) -> Self {
        let std = (2.0 / kind.cols() as f64).sqrt();
        let weights = (0..kind.rows() * kind.cols())
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Layer {
            kind,
            activation,
            weights,
            bias: vec![0.0; kind.rows()],
        }
    }

    pub fn rows(&self) -> usize {
        self.kind.rows()
    }

    pub fn cols(&self) -> usize {
        self.kind.cols()
    }
}

/// Weight matrix to use for one layer during a forward pass, and an optional
/// multiplicative factor applied to the matrix product before the bias.
pub struct LayerWeights<'a> {
    pub weights: Cow<'a, [f64]>,
    pub out_scale: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    /// Shape of one sample, e.g. `[1, 8, 8]`.
    pub input_shape: Vec<usize>,
    pub layers: Vec<Layer>,
    pub rng_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

pub type Gradients = Vec<LayerGrad>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Weights with magnitude below this are penalized.
    pub epsilon_small: f64,
    /// Weights with magnitude above this are penalized.
    pub theta_large: f64,
    pub lambda_small: f64,
    pub lambda_large: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub noise_aware: bool,
    /// Std of additive weight noise, relative to the layer's max |w|.
    pub nw_std_rel: f64,
    /// Drop-connect probability in noise-aware mode.
    pub pdrop: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epsilon_small: 0.05,
            theta_large: 1.0,
            lambda_small: 1.0,
            lambda_large: 1.0,
            lr: 0.05,
            epochs: 30,
            batch_size: 32,
            noise_aware: false,
            nw_std_rel: 0.1,
            pdrop: 0.03,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("train: {m}")));
        if !(self.epsilon_small > 0.0 && self.epsilon_small < self.theta_large) {
            return bad("need 0 < epsilon_small < theta_large");
        }
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.pdrop) {
            return bad("pdrop must lie in [0, 1)");
        }
        if self.lambda_small < 0.0 || self.lambda_large < 0.0 || self.nw_std_rel < 0.0 {
            return bad("penalty strengths and noise std must be non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        Ok(())
    }

    /// Same settings with both penalty strengths set to zero.
    pub fn unconstrained(&self) -> Self {
        TrainConfig {
            lambda_small: 0.0,
            lambda_large: 0.0,
            ..self.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_f1: f64,
}

/// Per-layer values recorded during a forward pass, needed by backprop.
struct Trace {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    logits: Vec<f64>,
}

impl Network {
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>, rng_seed: u64) -> Result<Self> {
        let net = Network {
            input_shape,
            layers,
            rng_seed,
        };
        net.validate()?;
        Ok(net)
    }

    /// 3x3 convolution with 8 channels, a 64-unit hidden layer and a linear
    /// output layer, for single-channel `height x width` inputs.
    pub fn desk(height: usize, width: usize, classes: usize, seed: u64) -> Result<Self> {
        let mut rng = substream(seed, "init", &[]);
        let conv = LayerKind::Conv {
            in_channels: 1,
            height,
            width,
            out_channels: 8,
            kernel: 3,
        };
        let hidden = LayerKind::Dense {
            inputs: conv.output_len(),
            outputs: 64,
        };
        let out = LayerKind::Dense {
            inputs: 64,
            outputs: classes,
        };
        let layers = vec![
            Layer::init(conv, Activation::Relu, &mut rng),
            Layer::init(hidden, Activation::Relu, &mut rng),
            Layer::init(out, Activation::Identity, &mut rng),
        ];
        Network::new(vec![1, height, width], layers, seed)
    }

    /// Fully connected ReLU network with the given layer widths; the last
    /// layer is linear.
    pub fn mlp(sizes: &[usize], seed: u64) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::InvalidConfig("mlp needs at least two sizes".into()));
        }
        let mut rng = substream(seed, "init", &[]);
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let act = if i + 2 == sizes.len() {
                    Activation::Identity
                } else {
                    Activation::Relu
                };
                Layer::init(
                    LayerKind::Dense {
                        inputs: w[0],
                        outputs: w[1],
                    },
                    act,
                    &mut rng,
                )
            })
            .collect();
        Network::new(vec![sizes[0]], layers, seed)
    }

    pub fn validate(&self) -> Result<()> {
        let mut len: usize = self.input_shape.iter().product();
        if self.layers.is_empty() {
            return Err(Error::Empty("network has no layers"));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if !layer.kind.is_valid() {
                return Err(Error::InvalidConfig(format!(
                    "layer {i}: degenerate shape {:?}",
                    layer.kind
                )));
            }
            if layer.kind.input_len() != len {
                return Err(Error::shape("layer composition", len, layer.kind.input_len()));
            }
            if layer.weights.len() != layer.rows() * layer.cols() {
                return Err(Error::shape(
                    "layer weights",
                    layer.rows() * layer.cols(),
                    layer.weights.len(),
                ));
            }
            if layer.bias.len() != layer.rows() {
                return Err(Error::shape("layer bias", layer.rows(), layer.bias.len()));
            }
            if layer.weights.iter().chain(&layer.bias).any(|v| !v.is_finite()) {
                return Err(Error::OutOfRange(format!("layer {i} has non-finite parameters")));
            }
            len = layer.kind.output_len();
        }
        Ok(())
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().map_or(0, |l| l.kind.output_len())
    }

    pub fn weight_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len()).sum()
    }

    /// All weights (not biases), layer by layer.
    pub fn weights(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers.iter().flat_map(|l| l.weights.iter().copied())
    }

    fn check_batch(&self, batch: &Tensor) -> Result<usize> {
        if batch.row_len() != self.input_len() {
            return Err(Error::shape("forward input", self.input_len(), batch.row_len()));
        }
        Ok(batch.rows())
    }

    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        self.forward_with(batch, |_, layer| LayerWeights {
            weights: Cow::Borrowed(&layer.weights),
            out_scale: None,
        })
    }

    /// Forward pass where the weight matrix of every layer is supplied by
    /// `weights_for`. Activations and biases are always taken from `self`.
    pub fn forward_with<'n, F>(&'n self, batch: &Tensor, mut weights_for: F) -> Result<Tensor>
    where
        F: FnMut(usize, &'n Layer) -> LayerWeights<'n>,
    {
        let n = self.check_batch(batch)?;
        let mut x = batch.data().to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let lw = weights_for(i, layer);
            if lw.weights.len() != layer.weights.len() {
                return Err(Error::shape("supplied weights", layer.weights.len(), lw.weights.len()));
            }
            let mut pre = layer_pre(layer, &lw.weights, lw.out_scale, &x, n);
            activate(layer.activation, &mut pre);
            x = pre;
        }
        Tensor::new(vec![n, self.num_classes()], x)
    }

    fn forward_trace(&self, weights: &[Cow<'_, [f64]>], input: &[f64], n: usize) -> Trace {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pres = Vec::with_capacity(self.layers.len());
        let mut x = input.to_vec();
        for (layer, w) in self.layers.iter().zip(weights) {
            let pre = layer_pre(layer, w, None, &x, n);
            let mut post = pre.clone();
            activate(layer.activation, &mut post);
            inputs.push(x);
            pres.push(pre);
            x = post;
        }
        Trace {
            inputs,
            pre: pres,
            logits: x,
        }
    }

    /// Squared-hinge band penalty over all weights.
    pub fn penalty(&self, cfg: &TrainConfig) -> f64 {
        self.weights().map(|w| weight_penalty(w, cfg)).sum()
    }

    /// Mean cross-entropy of `logits` against `labels` plus the band penalty.
    pub fn constrained_loss(&self, logits: &Tensor, labels: &[usize], cfg: &TrainConfig) -> Result<f64> {
        let ce = cross_entropy(logits, labels, self.num_classes())?;
        Ok(ce + self.penalty(cfg))
    }

    /// Loss and gradient of every parameter for one batch, with the current
    /// weights.
    pub fn backward(&self, batch: &Tensor, labels: &[usize], cfg: &TrainConfig) -> Result<(f64, Gradients)> {
        let weights: Vec<Cow<'_, [f64]>> = self.layers.iter().map(|l| Cow::Borrowed(&l.weights[..])).collect();
        self.backward_with(batch.data(), self.check_batch(batch)?, labels, &weights, cfg)
            .map(|(loss, grads, _)| (loss, grads))
    }

    /// Backprop through the network using `weights` in place of the stored
    /// weights for the data term; the penalty always uses the stored ones.
    /// Also returns the number of correct predictions in the batch.
    fn backward_with(
        &self,
        input: &[f64],
        n: usize,
        labels: &[usize],
        weights: &[Cow<'_, [f64]>],
        cfg: &TrainConfig,
    ) -> Result<(f64, Gradients, usize)> {
        if labels.len() != n {
            return Err(Error::shape("labels", n, labels.len()));
        }
        let classes = self.num_classes();
        let trace = self.forward_trace(weights, input, n);

        let mut delta = vec![0.0; n * classes];
        let mut ce = 0.0;
        let mut correct = 0;
        for b in 0..n {
            let row = &trace.logits[b * classes..(b + 1) * classes];
            let label = labels[b];
            if label >= classes {
                return Err(Error::OutOfRange(format!("label {label} >= {classes} classes")));
            }
            let probs = softmax(row);
            ce -= probs[label].max(f64::MIN_POSITIVE).ln();
            if argmax(row) == label {
                correct += 1;
            }
            for (c, p) in probs.iter().enumerate() {
                let target = if c == label { 1.0 } else { 0.0 };
                delta[b * classes + c] = (p - target) / n as f64;
            }
        }
        let loss = ce / n as f64 + self.penalty(cfg);

        let mut grads: Gradients = Vec::with_capacity(self.layers.len());
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let pre = &trace.pre[li];
            if layer.activation == Activation::Relu {
                for (d, p) in delta.iter_mut().zip(pre) {
                    if *p <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let need_input_grad = li > 0;
            let (mut grad, dx) = layer_backward(layer, &weights[li], &trace.inputs[li], &delta, n, need_input_grad);
            for (g, &w) in grad.weights.iter_mut().zip(&layer.weights) {
                *g += penalty_grad(w, cfg);
            }
            grads.push(grad);
            delta = dx;
        }
        grads.reverse();
        Ok((loss, grads, correct))
    }

    fn apply(&mut self, grads: &Gradients, lr: f64) {
        for (layer, g) in self.layers.iter_mut().zip(grads) {
            for (w, d) in layer.weights.iter_mut().zip(&g.weights) {
                *w -= lr * d;
            }
            for (b, d) in layer.bias.iter_mut().zip(&g.bias) {
                *b -= lr * d;
            }
        }
    }

    /// Copy of the weights with per-layer additive Gaussian noise
    /// (std = `nw_std_rel * max|w|`) and drop-connect.
    fn noisy_weights<R: Rng>(&self, cfg: &TrainConfig, rng: &mut R) -> Vec<Cow<'static, [f64]>> {
        self.layers
            .iter()
            .map(|layer| {
                let wmax = layer.weights.iter().fold(0.0f64, |m, w| m.max(w.abs()));
                let std = cfg.nw_std_rel * wmax;
                let noisy: Vec<f64> = layer
                    .weights
                    .iter()
                    .map(|&w| {
                        let z: f64 = rng.sample(StandardNormal);
                        let keep = rng.random::<f64>() >= cfg.pdrop;
                        if keep {
                            w + std * z
                        } else {
                            0.0
                        }
                    })
                    .collect();
                Cow::Owned(noisy)
            })
            .collect()
    }
}

/// Train with plain minibatch SGD. `on_epoch` receives each epoch's mean
/// loss and running training accuracy.
pub fn train(
    net: &Network,
    images: &Tensor,
    labels: &[usize],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Network> {
    cfg.validate()?;
    let n = net.check_batch(images)?;
    if n == 0 {
        return Err(Error::Empty("training set"));
    }
    if labels.len() != n {
        return Err(Error::shape("labels", n, labels.len()));
    }
    let mut net = net.clone();
    let row = images.row_len();
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut substream(net.rng_seed, "train-shuffle", &[epoch as u64]));
        let mut noise_rng = substream(net.rng_seed, "train-noise", &[epoch as u64]);
        let (mut loss_sum, mut batches, mut correct) = (0.0, 0usize, 0usize);
        let mut input = Vec::with_capacity(cfg.batch_size * row);
        let mut batch_labels = Vec::with_capacity(cfg.batch_size);
        for chunk in order.chunks(cfg.batch_size) {
            input.clear();
            batch_labels.clear();
            for &i in chunk {
                input.extend_from_slice(images.row(i));
                batch_labels.push(labels[i]);
            }
            let weights: Vec<Cow<'_, [f64]>> = if cfg.noise_aware {
                net.noisy_weights(cfg, &mut noise_rng)
            } else {
                net.layers.iter().map(|l| Cow::Owned(l.weights.clone())).collect()
            };
            let (loss, grads, ok) = net.backward_with(&input, chunk.len(), &batch_labels, &weights, cfg)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            net.apply(&grads, cfg.lr);
            loss_sum += loss;
            batches += 1;
            correct += ok;
        }
        on_epoch(&EpochLog {
            epoch,
            loss: loss_sum / batches as f64,
            accuracy: correct as f64 / n as f64,
        });
    }
    Ok(net)
}

/// Accuracy and macro-F1 of the network's argmax predictions.
pub fn evaluate(net: &Network, images: &Tensor, labels: &[usize]) -> Result<Metrics> {
    let logits = net.forward(images)?;
    metrics_from_logits(&logits, labels)
}

pub fn predictions(logits: &Tensor) -> Vec<usize> {
    (0..logits.rows()).map(|i| argmax(logits.row(i))).collect()
}

pub fn metrics_from_logits(logits: &Tensor, labels: &[usize]) -> Result<Metrics> {
    if logits.rows() != labels.len() {
        return Err(Error::shape("labels", logits.rows(), labels.len()));
    }
    metrics(&predictions(logits), labels, logits.row_len())
}

/// Accuracy and macro-averaged F1. Classes that appear in neither the labels
/// nor the predictions are left out of the average.
pub fn metrics(pred: &[usize], labels: &[usize], classes: usize) -> Result<Metrics> {
    if labels.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    if pred.len() != labels.len() {
        return Err(Error::shape("predictions", labels.len(), pred.len()));
    }
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fneg = vec![0usize; classes];
    for (&p, &l) in pred.iter().zip(labels) {
        if p >= classes || l >= classes {
            return Err(Error::OutOfRange(format!("class index beyond {classes}")));
        }
        if p == l {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fneg[l] += 1;
        }
    }
    let correct: usize = tp.iter().sum();
    let (mut f1_sum, mut present) = (0.0, 0usize);
    for c in 0..classes {
        let denom = 2 * tp[c] + fp[c] + fneg[c];
        if denom > 0 {
            f1_sum += 2.0 * tp[c] as f64 / denom as f64;
            present += 1;
        }
    }
    Ok(Metrics {
        accuracy: correct as f64 / labels.len() as f64,
        macro_f1: f1_sum / present as f64,
    })
}

pub fn weight_penalty(w: f64, cfg: &TrainConfig) -> f64 {
    let a = w.abs();
    let small = (cfg.epsilon_small - a).max(0.0);
    let large = (a - cfg.theta_large).max(0.0);
    cfg.lambda_small * small * small + cfg.lambda_large * large * large
}

pub fn penalty_grad(w: f64, cfg: &TrainConfig) -> f64 {
    let a = w.abs();
    let s = w.signum() * if w == 0.0 { 0.0 } else { 1.0 };
    if a < cfg.epsilon_small {
        -2.0 * cfg.lambda_small * (cfg.epsilon_small - a) * s
    } else if a > cfg.theta_large {
        2.0 * cfg.lambda_large * (a - cfg.theta_large) * s
    } else {
        0.0
    }
}

pub fn cross_entropy(logits: &Tensor, labels: &[usize], classes: usize) -> Result<f64> {
    if logits.row_len() != classes {
        return Err(Error::shape("logits", classes, logits.row_len()));
    }
    if logits.rows() != labels.len() {
        return Err(Error::shape("labels", logits.rows(), labels.len()));
    }
    if labels.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let mut sum = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::OutOfRange(format!("label {l} >= {classes} classes")));
        }
        sum -= softmax(logits.row(i))[l].max(f64::MIN_POSITIVE).ln();
    }
    Ok(sum / labels.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub parameters: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

/// Compare every analytic gradient entry with a central finite difference of
/// step `h`. Relative error is `|a - f| / max(|a|, |f|, floor)`; the floor
/// keeps entries that are zero on both sides from dividing by zero.
pub fn gradient_check(
    net: &Network,
    batch: &Tensor,
    labels: &[usize],
    cfg: &TrainConfig,
    h: f64,
    floor: f64,
) -> Result<GradCheck> {
    let (_, grads) = net.backward(batch, labels, cfg)?;
    let loss_at = |probe: &Network| -> Result<f64> {
        let logits = probe.forward(batch)?;
        probe.constrained_loss(&logits, labels, cfg)
    };
    let mut probe = net.clone();
    let mut report = GradCheck {
        parameters: 0,
        max_rel_error: 0.0,
        max_abs_error: 0.0,
    };
    for (li, g) in grads.iter().enumerate() {
        for is_bias in [false, true] {
            let count = if is_bias {
                net.layers[li].bias.len()
            } else {
                net.layers[li].weights.len()
            };
            for k in 0..count {
                let orig = *param_mut(&mut probe, li, is_bias, k);
                *param_mut(&mut probe, li, is_bias, k) = orig + h;
                let up = loss_at(&probe)?;
                *param_mut(&mut probe, li, is_bias, k) = orig - h;
                let down = loss_at(&probe)?;
                *param_mut(&mut probe, li, is_bias, k) = orig;
                let fd = (up - down) / (2.0 * h);
                let a = if is_bias { g.bias[k] } else { g.weights[k] };
                let abs = (a - fd).abs();
                let rel = abs / a.abs().max(fd.abs()).max(floor);
                report.parameters += 1;
                report.max_abs_error = report.max_abs_error.max(abs);
                report.max_rel_error = report.max_rel_error.max(rel);
            }
        }
    }
    Ok(report)
}

fn param_mut(net: &mut Network, layer: usize, is_bias: bool, k: usize) -> &mut f64 {
    let l = &mut net.layers[layer];
    if is_bias {
        &mut l.bias[k]
    } else {
        &mut l.weights[k]
    }
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// First index of the maximum.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn activate(act: Activation, x: &mut [f64]) {
    if act == Activation::Relu {
        for v in x.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    }
}

/// Unrolled input patches of one sample: `positions x cols`, patch entry
/// order `(channel, ky, kx)`.
fn im2col(kind: &LayerKind, sample: &[f64]) -> Vec<f64> {
    let LayerKind::Conv {
        in_channels,
        height,
        width,
        kernel,
        ..
    } = *kind
    else {
        unreachable!("im2col on a dense layer")
    };
    let (oh, ow) = (height + 1 - kernel, width + 1 - kernel);
    let cols = kind.cols();
    let mut out = vec![0.0; oh * ow * cols];
    for y in 0..oh {
        for x in 0..ow {
            let base = (y * ow + x) * cols;
            let mut p = 0;
            for c in 0..in_channels {
                for ky in 0..kernel {
                    let src = c * height * width + (y + ky) * width + x;
                    out[base + p..base + p + kernel].copy_from_slice(&sample[src..src + kernel]);
                    p += kernel;
                }
            }
        }
    }
    out
}

/// Pre-activation output of one layer for a batch of `n` flattened inputs.
fn layer_pre(layer: &Layer, weights: &[f64], out_scale: Option<f64>, x: &[f64], n: usize) -> Vec<f64> {
    let (rows, cols) = (layer.rows(), layer.cols());
    let in_len = layer.kind.input_len();
    let positions = layer.kind.positions();
    let mut out = vec![0.0; n * rows * positions];
    for b in 0..n {
        let sample = &x[b * in_len..(b + 1) * in_len];
        let patches: Cow<'_, [f64]> = match layer.kind {
            LayerKind::Dense { .. } => Cow::Borrowed(sample),
            LayerKind::Conv { .. } => Cow::Owned(im2col(&layer.kind, sample)),
        };
        let dst = &mut out[b * rows * positions..(b + 1) * rows * positions];
        for r in 0..rows {
            let wrow = &weights[r * cols..(r + 1) * cols];
            for pos in 0..positions {
                let patch = &patches[pos * cols..(pos + 1) * cols];
                let mut acc = 0.0;
                for (w, v) in wrow.iter().zip(patch) {
                    acc += w * v;
                }
                if let Some(s) = out_scale {
                    acc *= s;
                }
                dst[r * positions + pos] = acc + layer.bias[r];
            }
        }
    }
    out
}

/// Gradients of one layer given `delta` = dLoss/dPre for the batch. Returns
/// dLoss/dInput as well when requested (empty otherwise).
fn layer_backward(
    layer: &Layer,
    weights: &[f64],
    x: &[f64],
    delta: &[f64],
    n: usize,
    input_grad: bool,
) -> (LayerGrad, Vec<f64>) {
    let (rows, cols) = (layer.rows(), layer.cols());
    let in_len = layer.kind.input_len();
    let positions = layer.kind.positions();
    let mut gw = vec![0.0; rows * cols];
    let mut gb = vec![0.0; rows];
    let mut dx = if input_grad { vec![0.0; n * in_len] } else { Vec::new() };
    for b in 0..n {
        let sample = &x[b * in_len..(b + 1) * in_len];
        let patches: Cow<'_, [f64]> = match layer.kind {
            LayerKind::Dense { .. } => Cow::Borrowed(sample),
            LayerKind::Conv { .. } => Cow::Owned(im2col(&layer.kind, sample)),
        };
        let d = &delta[b * rows * positions..(b + 1) * rows * positions];
        let mut dpatch = if input_grad {
            vec![0.0; positions * cols]
        } else {
            Vec::new()
        };
        for r in 0..rows {
            let grow = &mut gw[r * cols..(r + 1) * cols];
            let wrow = &weights[r * cols..(r + 1) * cols];
            for pos in 0..positions {
                let g = d[r * positions + pos];
                if g == 0.0 {
                    continue;
                }
                gb[r] += g;
                let patch = &patches[pos * cols..(pos + 1) * cols];
                for (gw_, v) in grow.iter_mut().zip(patch) {
                    *gw_ += g * v;
                }
                if input_grad {
                    let dp = &mut dpatch[pos * cols..(pos + 1) * cols];
                    for (dp_, w) in dp.iter_mut().zip(wrow) {
                        *dp_ += g * w;
                    }
                }
            }
        }
        if input_grad {
            let dst = &mut dx[b * in_len..(b + 1) * in_len];
            match layer.kind {
                LayerKind::Dense { .. } => dst.copy_from_slice(&dpatch),
                LayerKind::Conv {
                    in_channels,
                    height,
                    width,
                    kernel,
                    ..
                } => {
                    let ow = width + 1 - kernel;
                    for pos in 0..positions {
                        let (y, xx) = (pos / ow, pos % ow);
                        let mut p = 0;
                        for c in 0..in_channels {
                            for ky in 0..kernel {
                                for kx in 0..kernel {
                                    dst[c * height * width + (y + ky) * width + xx + kx] += dpatch[pos * cols + p];
                                    p += 1;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (LayerGrad { weights: gw, bias: gb }, dx)
}
