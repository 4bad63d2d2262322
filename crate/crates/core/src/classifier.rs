//! Feed-forward softmax classifier with hand-written backpropagation, plus
//! the optimizers that update it.
//!
//! A classifier is a stack of dense layers `z = W a + b`. Hidden layers apply
//! the configured activation; the last layer emits logits that go through
//! softmax. With no hidden layers it is multinomial logistic regression.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{cross_entropy, softmax_unchecked, HardLabel, Matrix, ProbDist, SeededRng, Stream};

/// Which of the two peer networks a classifier plays.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelId {
    F,
    G,
}

impl ModelId {
    pub fn peer(self) -> ModelId {
        match self {
            ModelId::F => ModelId::G,
            ModelId::G => ModelId::F,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModelId::F => "f",
            ModelId::G => "g",
        }
    }
}

impl fmt::Display for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Tanh,
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" | "linear" => Ok(Activation::Identity),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

impl Activation {
    fn apply(self, z: &mut [f64]) {
        if let Activation::Tanh = self {
            for v in z {
                *v = v.tanh();
            }
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `outputs × inputs`.
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            weights: Matrix::zeros(outputs, inputs),
            bias: vec![0.0; outputs],
        }
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut z = self.weights.matvec(x);
        for (zi, bi) in z.iter_mut().zip(&self.bias) {
            *zi += bi;
        }
        z
    }

    fn num_params(&self) -> usize {
        self.weights.as_slice().len() + self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    id: ModelId,
    activation: Activation,
    layers: Vec<Dense>,
}

/// One term of a weighted cross-entropy objective.
#[derive(Debug, Clone, Copy)]
pub struct WeightedSample<'a> {
    pub features: &'a [f64],
    pub target: HardLabel,
    pub weight: f64,
}

impl<'a> WeightedSample<'a> {
    pub fn new(features: &'a [f64], target: HardLabel, weight: f64) -> Self {
        WeightedSample {
            features,
            target,
            weight,
        }
    }
}

fn check_sizes(layer_sizes: &[usize]) -> Result<()> {
    if layer_sizes.len() < 2 {
        return Err(Error::Config(
            "layer sizes need at least an input and an output".into(),
        ));
    }
    if layer_sizes[0] < 1 {
        return Err(Error::Config("input dimension must be at least 1".into()));
    }
    if *layer_sizes.last().unwrap() < 2 {
        return Err(Error::Config("a classifier needs at least 2 classes".into()));
    }
    if layer_sizes.iter().any(|&s| s == 0) {
        return Err(Error::Config("hidden layers must be non-empty".into()));
    }
    Ok(())
}

impl Classifier {
    /// Draws every weight and bias uniformly from `[-1/√fan_in, 1/√fan_in]`
    /// using the model-init stream of `seed`.
    pub fn init(layer_sizes: &[usize], activation: Activation, id: ModelId, seed: u64) -> Result<Self> {
        check_sizes(layer_sizes)?;
        let mut rng = SeededRng::stream(seed, Stream::ModelInit, 0);
        let layers = layer_sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let mut layer = Dense::zeros(fan_in, fan_out);
                for v in layer.weights.as_mut_slice().iter_mut().chain(layer.bias.iter_mut()) {
                    *v = (2.0 * rng.uniform() - 1.0) * bound;
                }
                layer
            })
            .collect();
        Ok(Classifier {
            id,
            activation,
            layers,
        })
    }

    /// All parameters zero: every input maps to the uniform distribution.
    pub fn zeros(layer_sizes: &[usize], activation: Activation, id: ModelId) -> Result<Self> {
        check_sizes(layer_sizes)?;
        let layers = layer_sizes.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect();
        Ok(Classifier {
            id,
            activation,
            layers,
        })
    }

    pub fn from_layers(id: ModelId, activation: Activation, layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("classifier needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].weights.rows() != pair[1].weights.cols() {
                return Err(Error::Dimension {
                    expected: pair[0].weights.rows(),
                    got: pair[1].weights.cols(),
                });
            }
        }
        for l in &layers {
            if l.bias.len() != l.weights.rows() {
                return Err(Error::Dimension {
                    expected: l.weights.rows(),
                    got: l.bias.len(),
                });
            }
        }
        let model = Classifier {
            id,
            activation,
            layers,
        };
        check_sizes(&model.layer_sizes())?;
        Ok(model)
    }

    pub fn id(&self) -> ModelId {
        self.id
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.layers[0].weights.cols()];
        sizes.extend(self.layers.iter().map(|l| l.weights.rows()));
        sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().unwrap().weights.rows()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Dense::num_params).sum()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite feature".into()));
        }
        Ok(())
    }

    /// Activations of every layer, input first, logits last.
    fn activations(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = layer.forward(acts.last().unwrap());
            if i < last {
                self.activation.apply(&mut z);
            }
            acts.push(z);
        }
        acts
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.activations(x).pop().unwrap())
    }

    pub fn forward(&self, x: &[f64]) -> Result<ProbDist> {
        let logits = self.logits(x)?;
        if logits.iter().any(|z| !z.is_finite()) {
            return Err(Error::NonFinite("logits".into()));
        }
        Ok(ProbDist::new(softmax_unchecked(&logits)).expect("softmax output lies on the simplex"))
    }

    /// Gradient of `(1/N) Σ w_b · H(target_b, forward(x_b))` over the batch,
    /// together with the loss value. Zero-weight samples still count in `N`.
    pub fn backward(&self, batch: &[WeightedSample<'_>]) -> Result<(Gradients, f64)> {
        if batch.is_empty() {
            return Err(Error::Domain("backward on an empty batch".into()));
        }
        let n = batch.len() as f64;
        let mut grads = Gradients::zeros_like(self);
        let mut loss = 0.0;
        let classes = self.num_classes();
        for sample in batch {
            if !(sample.weight >= 0.0) {
                return Err(Error::Domain(format!("negative sample weight {}", sample.weight)));
            }
            if sample.target.0 >= classes {
                return Err(Error::Domain(format!(
                    "target {} out of range for {classes} classes",
                    sample.target.0
                )));
            }
            self.check_input(sample.features)?;
            if sample.weight == 0.0 {
                continue;
            }
            let acts = self.activations(sample.features);
            let probs = softmax_unchecked(acts.last().unwrap());
            let pred = ProbDist::new(probs).map_err(|_| Error::NonFinite("logits".into()))?;
            loss += sample.weight * cross_entropy(sample.target, &pred);

            let scale = sample.weight / n;
            let mut delta: Vec<f64> = pred.into_vec();
            delta[sample.target.0] -= 1.0;
            for v in &mut delta {
                *v *= scale;
            }
            for l in (0..self.layers.len()).rev() {
                let input = &acts[l];
                grads.layers[l].weights.add_outer(&delta, input, 1.0);
                for (gb, d) in grads.layers[l].bias.iter_mut().zip(&delta) {
                    *gb += d;
                }
                if l > 0 {
                    let mut back = self.layers[l].weights.matvec_t(&delta);
                    for (b, &a) in back.iter_mut().zip(input) {
                        *b *= self.activation.derivative_from_output(a);
                    }
                    delta = back;
                }
            }
        }
        Ok((grads, loss / n))
    }

    pub fn params_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.as_slice().iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    /// Parameters flattened layer by layer: row-major weights, then bias.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(l.weights.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::Dimension {
                expected: self.num_params(),
                got: params.len(),
            });
        }
        let mut offset = 0;
        for l in &mut self.layers {
            let w = l.weights.as_mut_slice();
            w.copy_from_slice(&params[offset..offset + w.len()]);
            offset += w.len();
            let nb = l.bias.len();
            l.bias.copy_from_slice(&params[offset..offset + nb]);
            offset += nb;
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            model_id: self.id,
            activation: self.activation,
            layer_sizes: self.layer_sizes(),
            layers: self
                .layers
                .iter()
                .map(|l| CheckpointLayer {
                    weights: l.weights.as_slice().to_vec(),
                    bias: l.bias.clone(),
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!(
                "unsupported checkpoint {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        if ckpt.layer_sizes.len() != ckpt.layers.len() + 1 {
            return Err(Error::Data("checkpoint layer count disagrees with header".into()));
        }
        let layers = ckpt
            .layer_sizes
            .windows(2)
            .zip(&ckpt.layers)
            .map(|(w, l)| {
                Ok(Dense {
                    weights: Matrix::from_vec(w[1], w[0], l.weights.clone())?,
                    bias: l.bias.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Classifier::from_layers(ckpt.model_id, ckpt.activation, layers)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(&self.to_checkpoint())?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Classifier::from_checkpoint(&serde_json::from_str(&text)?)
    }
}

pub const CHECKPOINT_FORMAT: &str = "jointmatch-classifier";
pub const CHECKPOINT_VERSION: u32 = 1;

/// On-disk parameter dump. `layer_sizes` is `[d_in, hidden..., C]`; layer `i`
/// stores a row-major `layer_sizes[i+1] × layer_sizes[i]` weight array and a
/// bias of length `layer_sizes[i+1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub model_id: ModelId,
    pub activation: Activation,
    pub layer_sizes: Vec<usize>,
    pub layers: Vec<CheckpointLayer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointLayer {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Per-parameter gradients, shaped like the classifier they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    layers: Vec<Dense>,
}

impl Gradients {
    pub fn zeros_like(model: &Classifier) -> Self {
        Gradients {
            layers: model
                .layers
                .iter()
                .map(|l| Dense::zeros(l.weights.cols(), l.weights.rows()))
                .collect(),
        }
    }

    /// Gradients equal to the model's own parameters.
    pub fn from_params(model: &Classifier) -> Self {
        Gradients {
            layers: model.layers.clone(),
        }
    }

    fn same_shape(&self, other: &Gradients) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.weights.rows() == b.weights.rows()
                    && a.weights.cols() == b.weights.cols()
                    && a.bias.len() == b.bias.len()
            })
    }

    fn matches(&self, model: &Classifier) -> bool {
        self.layers.len() == model.layers.len()
            && self.layers.iter().zip(&model.layers).all(|(a, b)| {
                a.weights.rows() == b.weights.rows()
                    && a.weights.cols() == b.weights.cols()
                    && a.bias.len() == b.bias.len()
            })
    }

    /// `self += scale · other`.
    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::Domain("gradient shapes differ".into()));
        }
        for (a, b) in self.iter_mut().zip(other.iter()) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.as_slice().iter().chain(l.bias.iter()))
    }

    fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.as_mut_slice().iter_mut().chain(l.bias.iter_mut()))
    }

    /// Same ordering as [`Classifier::params_flat`].
    pub fn flat(&self) -> Vec<f64> {
        self.iter().copied().collect()
    }

    pub fn is_zero(&self) -> bool {
        self.iter().all(|&g| g == 0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|g| g.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Plain gradient descent: `θ ← θ − lr·g`.
    Sgd,
    /// Adaptive moments with bias correction.
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state for one classifier.
///
/// `weight_decay` is decoupled: each step additionally applies
/// `θ ← θ − lr·weight_decay·θ`. With zero decay, a zero gradient leaves
/// parameters unchanged under SGD, and under Adam as long as the moment
/// buffers are still zero.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    weight_decay: f64,
    step: u64,
    first_moment: Option<Vec<f64>>,
    second_moment: Option<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Optimizer {
            kind,
            lr,
            weight_decay: 0.0,
            step: 0,
            first_moment: None,
            second_moment: None,
        }
    }

    pub fn sgd(lr: f64) -> Self {
        Optimizer::new(OptimizerKind::Sgd, lr)
    }

    pub fn adam(lr: f64) -> Self {
        Optimizer::new(OptimizerKind::adam(), lr)
    }

    pub fn with_weight_decay(mut self, weight_decay: f64) -> Self {
        self.weight_decay = weight_decay;
        self
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn step(&mut self, model: &mut Classifier, grads: &Gradients) -> Result<()> {
        if !grads.matches(model) {
            return Err(Error::Dimension {
                expected: model.num_params(),
                got: grads.iter().count(),
            });
        }
        self.step += 1;
        let lr = self.lr;
        let decay = self.weight_decay;
        let params = model
            .layers
            .iter_mut()
            .flat_map(|l| l.weights.as_mut_slice().iter_mut().chain(l.bias.iter_mut()));
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, &g) in params.zip(grads.iter()) {
                    *p -= lr * g + lr * decay * *p;
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let n = grads.iter().count();
                let m = self.first_moment.get_or_insert_with(|| vec![0.0; n]);
                let v = self.second_moment.get_or_insert_with(|| vec![0.0; n]);
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (((p, &g), mi), vi) in params.zip(grads.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                    *mi = beta1 * *mi + (1.0 - beta1) * g;
                    *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                    let update = (*mi / c1) / ((*vi / c2).sqrt() + eps);
                    *p -= lr * update + lr * decay * *p;
                }
            }
        }
        Ok(())
    }
}

/// Applies one optimizer step to `model`.
pub fn apply_update(model: &mut Classifier, grads: &Gradients, optimizer: &mut Optimizer) -> Result<()> {
    optimizer.step(model, grads)
}
