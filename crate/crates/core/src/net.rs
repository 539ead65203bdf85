//! Small feedforward scoring network trained from scratch.
//!
//! Hidden layers are dense + ReLU, one hidden layer is followed by inverted
//! dropout, and the output is a single logistic unit estimating the
//! probability that the target classifier's prediction is correct. Training
//! minimizes binary cross-entropy with mini-batch Adam.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{fsutil, seed};

/// Scores are clamped to this distance from 0 and 1 before logarithms.
pub const LOSS_CLAMP: f64 = 1e-12;

const NET_FORMAT: &str = "accuracy-monitor-net";
pub const NET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetArchitecture {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub dropout_rate: f64,
    /// Index of the hidden layer whose output is dropped out.
    pub dropout_position: usize,
}

impl NetArchitecture {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>) -> Self {
        NetArchitecture {
            input_dim,
            hidden_dims,
            dropout_rate: 0.5,
            dropout_position: 0,
        }
    }

    /// Default widths by class count: `[1000, 1000]` for 1000 or more
    /// classes, `[100, 50]` otherwise.
    pub fn for_classes(class_count: usize) -> Self {
        let hidden = if class_count >= 1000 {
            vec![1000, 1000]
        } else {
            vec![100, 50]
        };
        NetArchitecture::new(class_count, hidden)
    }

    pub fn with_dropout(mut self, rate: f64, position: usize) -> Self {
        self.dropout_rate = rate;
        self.dropout_position = position;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("input_dim must be positive"));
        }
        if self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
            return Err(Error::config("hidden_dims must be nonempty and positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        if self.dropout_position >= self.hidden_dims.len() {
            return Err(Error::config(format!(
                "dropout_position {} but only {} hidden layers",
                self.dropout_position,
                self.hidden_dims.len()
            )));
        }
        Ok(())
    }

    /// Affine layers including the output layer.
    pub fn layer_count(&self) -> usize {
        self.hidden_dims.len() + 1
    }

    fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(1);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            epochs: 200,
            batch_size: 128,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::config("Adam betas must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// One affine layer. `weights` is row-major `[inputs][outputs]`: row `j`
/// holds the outgoing weights of input unit `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub inputs: usize,
    pub outputs: usize,
    pub trainable: bool,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        DenseLayer {
            inputs,
            outputs,
            trainable: true,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    #[inline]
    fn row(&self, j: usize) -> &[f64] {
        &self.weights[j * self.outputs..(j + 1) * self.outputs]
    }

    /// `out = bias + x W`, skipping zero inputs (ReLU and dropout make most
    /// hidden activations zero).
    #[inline]
    fn affine(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.bias);
        for (j, &xj) in x.iter().enumerate() {
            if xj != 0.0 {
                axpy(xj, self.row(j), out);
            }
        }
    }
}

#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(y, x)| *y += a * x);
}

/// Dot product with four independent accumulators so it vectorizes.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Per-unit multipliers for the dropout layer: 0 for dropped units,
/// `1 / (1 - rate)` for survivors.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask(pub Vec<f64>);

impl DropoutMask {
    pub fn sample<R: Rng + ?Sized>(width: usize, rate: f64, rng: &mut R) -> Self {
        let keep = 1.0 / (1.0 - rate);
        DropoutMask(
            (0..width)
                .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
                .collect(),
        )
    }
}

/// Gradient of the loss for every layer, shaped like the layers themselves.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    fn zeros_like(layers: &[DenseLayer]) -> Self {
        Gradients {
            weights: layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            biases: layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    fn clear(&mut self) {
        self.weights.iter_mut().for_each(|g| g.fill(0.0));
        self.biases.iter_mut().for_each(|g| g.fill(0.0));
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorNet {
    architecture: NetArchitecture,
    seed: u64,
    layers: Vec<DenseLayer>,
}

/// Activations cached by a forward pass for reuse in backpropagation.
struct Scratch {
    /// Pre-activation of each layer.
    pre: Vec<Vec<f64>>,
    /// Post-activation (after ReLU and dropout) of each hidden layer.
    post: Vec<Vec<f64>>,
    upstream: Vec<Vec<f64>>,
}

impl Scratch {
    fn new(layers: &[DenseLayer]) -> Self {
        Scratch {
            pre: layers.iter().map(|l| vec![0.0; l.outputs]).collect(),
            post: layers.iter().map(|l| vec![0.0; l.outputs]).collect(),
            upstream: layers.iter().map(|l| vec![0.0; l.outputs]).collect(),
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Keeps a probability strictly inside (0, 1).
fn open_unit(s: f64) -> f64 {
    const BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;
    s.clamp(f64::MIN_POSITIVE, BELOW_ONE)
}

/// Binary cross-entropy in nats, with the score clamped to
/// `[LOSS_CLAMP, 1 - LOSS_CLAMP]`.
pub fn bce_loss(score: f64, target: bool) -> f64 {
    let s = score.clamp(LOSS_CLAMP, 1.0 - LOSS_CLAMP);
    if target {
        -s.ln()
    } else {
        -(1.0 - s).ln()
    }
}

impl MonitorNet {
    /// He-initialized network: weights ~ N(0, 2 / fan_in), zero biases.
    pub fn new(architecture: NetArchitecture, seed: u64) -> Result<Self> {
        architecture.validate()?;
        let mut rng = seed::rng(seed);
        let layers = architecture
            .layer_shapes()
            .into_iter()
            .map(|(inputs, outputs)| {
                let mut layer = DenseLayer::zeros(inputs, outputs);
                let scale = (2.0 / inputs as f64).sqrt();
                for w in &mut layer.weights {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *w = z * scale;
                }
                layer
            })
            .collect();
        Ok(MonitorNet {
            architecture,
            seed,
            layers,
        })
    }

    /// Builds a network from explicit layers, checking that shapes chain.
    pub fn from_layers(
        architecture: NetArchitecture,
        seed: u64,
        layers: Vec<DenseLayer>,
    ) -> Result<Self> {
        architecture.validate()?;
        let shapes = architecture.layer_shapes();
        if shapes.len() != layers.len() {
            return Err(Error::Parse {
                what: "network".into(),
                message: format!("expected {} layers, found {}", shapes.len(), layers.len()),
            });
        }
        for (i, ((inputs, outputs), l)) in shapes.iter().zip(&layers).enumerate() {
            if l.inputs != *inputs
                || l.outputs != *outputs
                || l.weights.len() != inputs * outputs
                || l.bias.len() != *outputs
            {
                return Err(Error::Parse {
                    what: "network".into(),
                    message: format!("layer {i} does not match the architecture"),
                });
            }
            if l.weights.iter().chain(&l.bias).any(|v| !v.is_finite()) {
                return Err(Error::Parse {
                    what: "network".into(),
                    message: format!("layer {i} has non-finite parameters"),
                });
            }
        }
        Ok(MonitorNet {
            architecture,
            seed,
            layers,
        })
    }

    pub fn architecture(&self) -> &NetArchitecture {
        &self.architecture
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    fn dropout_width(&self) -> usize {
        self.architecture.hidden_dims[self.architecture.dropout_position]
    }

    /// Draws a dropout mask for one stochastic forward pass.
    pub fn sample_mask<R: Rng + ?Sized>(&self, rng: &mut R) -> DropoutMask {
        DropoutMask::sample(self.dropout_width(), self.architecture.dropout_rate, rng)
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.architecture.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.architecture.input_dim,
                got: input.len(),
            });
        }
        if input.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(())
    }

    fn check_mask(&self, mask: Option<&DropoutMask>) -> Result<()> {
        match mask {
            Some(m) if m.0.len() != self.dropout_width() => Err(Error::DimensionMismatch {
                expected: self.dropout_width(),
                got: m.0.len(),
            }),
            _ => Ok(()),
        }
    }

    /// Runs the layers, filling `scratch`; returns the output logit.
    fn forward_into(&self, input: &[f64], mask: Option<&[f64]>, scratch: &mut Scratch) -> f64 {
        let hidden = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let (before, rest) = scratch.post.split_at_mut(l);
            let x: &[f64] = if l == 0 { input } else { &before[l - 1] };
            layer.affine(x, &mut scratch.pre[l]);
            if l < hidden {
                let post = &mut rest[0];
                for (p, z) in post.iter_mut().zip(&scratch.pre[l]) {
                    *p = z.max(0.0);
                }
                if l == self.architecture.dropout_position {
                    if let Some(m) = mask {
                        post.iter_mut().zip(m).for_each(|(p, m)| *p *= m);
                    }
                }
            }
        }
        scratch.pre[hidden][0]
    }

    /// Accumulates `d loss / d params` into `grads` given the output-logit
    /// gradient `delta`.
    fn backward_into(
        &self,
        input: &[f64],
        mask: Option<&[f64]>,
        delta: f64,
        scratch: &mut Scratch,
        grads: &mut Gradients,
    ) {
        let last = self.layers.len() - 1;
        scratch.upstream[last][0] = delta;
        for l in (0..=last).rev() {
            let layer = &self.layers[l];
            let (lower, upper) = scratch.upstream.split_at_mut(l);
            let dz = &mut upper[0];
            if l < last {
                // dz currently holds d loss / d post-activation.
                if l == self.architecture.dropout_position {
                    if let Some(m) = mask {
                        dz.iter_mut().zip(m).for_each(|(d, m)| *d *= m);
                    }
                }
                for (d, z) in dz.iter_mut().zip(&scratch.pre[l]) {
                    if *z <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let x: &[f64] = if l == 0 { input } else { &scratch.post[l - 1] };
            let gw = &mut grads.weights[l];
            axpy(1.0, dz, &mut grads.biases[l]);
            for (j, &xj) in x.iter().enumerate() {
                if xj != 0.0 {
                    axpy(xj, dz, &mut gw[j * layer.outputs..(j + 1) * layer.outputs]);
                }
            }
            if l > 0 {
                // Units with zero activation get zero gradient after the ReLU
                // and dropout masks anyway, so only active ones are computed.
                for (j, b) in lower[l - 1].iter_mut().enumerate() {
                    *b = if x[j] != 0.0 { dot(layer.row(j), dz) } else { 0.0 };
                }
            }
        }
    }

    /// Forward pass with an explicit dropout mask (`None` disables dropout).
    pub fn forward_with_mask(&self, input: &[f64], mask: Option<&DropoutMask>) -> Result<f64> {
        self.check_input(input)?;
        self.check_mask(mask)?;
        let mut scratch = Scratch::new(&self.layers);
        let z = self.forward_into(input, mask.map(|m| m.0.as_slice()), &mut scratch);
        Ok(open_unit(sigmoid(z)))
    }

    /// Deterministic score in (0, 1), dropout off.
    pub fn score(&self, input: &[f64]) -> Result<f64> {
        self.forward_with_mask(input, None)
    }

    /// Score with dropout active when `dropout_active` is set; the mask is
    /// drawn from `rng`.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        input: &[f64],
        dropout_active: bool,
        rng: &mut R,
    ) -> Result<f64> {
        if dropout_active {
            let mask = self.sample_mask(rng);
            self.forward_with_mask(input, Some(&mask))
        } else {
            self.forward_with_mask(input, None)
        }
    }

    /// Scores many inputs with dropout off, reusing one scratch buffer.
    pub fn score_all<'a, I>(&self, inputs: I) -> Result<Vec<f64>>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let mut scratch = Scratch::new(&self.layers);
        inputs
            .into_iter()
            .map(|x| {
                self.check_input(x)?;
                Ok(open_unit(sigmoid(self.forward_into(x, None, &mut scratch))))
            })
            .collect()
    }

    /// Analytic gradient of [`bce_loss`] for one example.
    pub fn gradient(
        &self,
        input: &[f64],
        target: bool,
        mask: Option<&DropoutMask>,
    ) -> Result<Gradients> {
        self.check_input(input)?;
        self.check_mask(mask)?;
        let mask = mask.map(|m| m.0.as_slice());
        let mut scratch = Scratch::new(&self.layers);
        let mut grads = Gradients::zeros_like(&self.layers);
        let z = self.forward_into(input, mask, &mut scratch);
        let delta = sigmoid(z) - if target { 1.0 } else { 0.0 };
        self.backward_into(input, mask, delta, &mut scratch, &mut grads);
        Ok(grads)
    }

    /// Makes the last `trainable_tail` affine layers trainable and freezes the
    /// rest.
    pub fn freeze_prefix(&mut self, trainable_tail: usize) -> Result<()> {
        let n = self.layers.len();
        if trainable_tail > n {
            return Err(Error::config(format!(
                "trainable_tail {trainable_tail} exceeds layer count {n}"
            )));
        }
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.trainable = i >= n - trainable_tail;
        }
        Ok(())
    }

    pub fn trainable_flags(&self) -> Vec<bool> {
        self.layers.iter().map(|l| l.trainable).collect()
    }

    /// Mini-batch Adam on mean binary cross-entropy with dropout active.
    /// Returns the mean training loss of every epoch.
    pub fn train<X: AsRef<[f64]>>(
        &mut self,
        inputs: &[X],
        targets: &[bool],
        config: &TrainConfig,
    ) -> Result<Vec<f64>> {
        config.validate()?;
        if inputs.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if inputs.len() != targets.len() {
            return Err(Error::DimensionMismatch {
                expected: inputs.len(),
                got: targets.len(),
            });
        }
        for x in inputs {
            self.check_input(x.as_ref())?;
        }

        let mut rng = seed::rng(config.seed);
        let mut order: Vec<usize> = (0..inputs.len()).collect();
        let mut scratch = Scratch::new(&self.layers);
        let mut grads = Gradients::zeros_like(&self.layers);
        let mut adam = Adam::new(&self.layers, config);
        let rate = self.architecture.dropout_rate;
        let mut mask = vec![1.0; self.dropout_width()];
        let keep = 1.0 / (1.0 - rate);
        let mut history = Vec::with_capacity(config.epochs);

        for _ in 0..config.epochs {
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            for batch in order.chunks(config.batch_size) {
                grads.clear();
                for &i in batch {
                    if rate > 0.0 {
                        for m in mask.iter_mut() {
                            *m = if rng.gen::<f64>() < rate { 0.0 } else { keep };
                        }
                    }
                    let x = inputs[i].as_ref();
                    let z = self.forward_into(x, Some(&mask), &mut scratch);
                    let s = sigmoid(z);
                    epoch_loss += bce_loss(s, targets[i]);
                    let delta = s - if targets[i] { 1.0 } else { 0.0 };
                    self.backward_into(x, Some(&mask), delta, &mut scratch, &mut grads);
                }
                let scale = 1.0 / batch.len() as f64;
                adam.step(&mut self.layers, &grads, scale);
            }
            history.push(epoch_loss / inputs.len() as f64);
        }
        Ok(history)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&NetFile {
            format: NET_FORMAT.into(),
            version: NET_FORMAT_VERSION,
            net: self.clone(),
        })
        .expect("network serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let header: NetHeader = serde_json::from_str(text).map_err(|e| Error::Parse {
            what: "network file".into(),
            message: e.to_string(),
        })?;
        if header.format != NET_FORMAT {
            return Err(Error::Parse {
                what: "network file".into(),
                message: format!("unexpected format tag `{}`", header.format),
            });
        }
        if header.version != NET_FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                expected: NET_FORMAT_VERSION,
                found: header.version,
            });
        }
        let file: NetFile = serde_json::from_str(text).map_err(|e| Error::Parse {
            what: "network file".into(),
            message: e.to_string(),
        })?;
        let net = file.net;
        MonitorNet::from_layers(net.architecture, net.seed, net.layers)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fsutil::write_string_atomic(path.as_ref(), &self.to_json())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        MonitorNet::from_json(&fsutil::read_to_string(path.as_ref())?)
    }
}

#[derive(Serialize, Deserialize)]
struct NetFile {
    format: String,
    version: u32,
    #[serde(flatten)]
    net: MonitorNet,
}

#[derive(Deserialize)]
struct NetHeader {
    format: String,
    version: u32,
}

/// First and second moment estimates for one parameter vector.
#[derive(Debug, Clone, Default)]
pub struct AdamMoments {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamMoments {
    pub fn new(len: usize) -> Self {
        AdamMoments {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    /// Applies one bias-corrected Adam update for step `t` (1-based),
    /// multiplying every gradient by `grad_scale` first.
    pub fn update(
        &mut self,
        params: &mut [f64],
        grads: &[f64],
        grad_scale: f64,
        t: u64,
        config: &TrainConfig,
    ) {
        let (b1, b2) = (config.adam_beta1, config.adam_beta2);
        let c1 = 1.0 - b1.powf(t as f64);
        let c2 = 1.0 - b2.powf(t as f64);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            let g = g * grad_scale;
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= config.learning_rate * m_hat / (v_hat.sqrt() + config.adam_epsilon);
        }
    }
}

struct Adam<'c> {
    config: &'c TrainConfig,
    t: u64,
    weights: Vec<AdamMoments>,
    biases: Vec<AdamMoments>,
}

impl<'c> Adam<'c> {
    fn new(layers: &[DenseLayer], config: &'c TrainConfig) -> Self {
        Adam {
            config,
            t: 0,
            weights: layers.iter().map(|l| AdamMoments::new(l.weights.len())).collect(),
            biases: layers.iter().map(|l| AdamMoments::new(l.bias.len())).collect(),
        }
    }

    fn step(&mut self, layers: &mut [DenseLayer], grads: &Gradients, scale: f64) {
        self.t += 1;
        for (l, layer) in layers.iter_mut().enumerate() {
            if !layer.trainable {
                continue;
            }
            self.weights[l].update(&mut layer.weights, &grads.weights[l], scale, self.t, self.config);
            self.biases[l].update(&mut layer.bias, &grads.biases[l], scale, self.t, self.config);
        }
    }
}
