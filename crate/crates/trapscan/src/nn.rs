//! A small fully connected network: ReLU hidden layers, linear output, MSE
//! against one-hot targets, trained with Adam/AdamW in `f64`.
//!
//! Weights are stored `out × in`, so layer `k` maps `R^{in_k} → R^{out_k}`.
//! In checkpoints layer `k` (1-based) is saved as `fc{k}.weight` and
//! `fc{k}.bias` (a `1 × out` matrix).

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{map_indexed, pairwise_sum, Execution};
use crate::seed;
use crate::tensor_store::{save_checkpoint, Checkpoint, WeightMatrix};

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub name: String,
    /// `out × in`.
    pub weight: WeightMatrix,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.out_dim())
            .map(|o| {
                let row = self.weight.row(o);
                row.iter().zip(x).fold(self.bias[o], |acc, (w, v)| acc + w * v)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    layers: Vec<DenseLayer>,
}

impl MlpModel {
    /// Validates that consecutive layer shapes compose.
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::ShapeMismatch("model has no layers".into()));
        }
        for layer in &layers {
            if layer.bias.len() != layer.out_dim() {
                return Err(Error::ShapeMismatch(format!(
                    "layer `{}`: bias length {} for {} outputs",
                    layer.name,
                    layer.bias.len(),
                    layer.out_dim()
                )));
            }
            if layer.bias.iter().any(|b| !b.is_finite()) {
                return Err(Error::NonFiniteEntry {
                    layer_id: format!("{}.bias", layer.name),
                    index: layer.bias.iter().position(|b| !b.is_finite()).unwrap_or(0),
                });
            }
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::ShapeMismatch(format!(
                    "layer `{}` outputs {} but `{}` expects {}",
                    pair[0].name,
                    pair[0].out_dim(),
                    pair[1].name,
                    pair[1].in_dim()
                )));
            }
        }
        Ok(Self { layers })
    }

    /// PyTorch-default initialization (`U(−1/√fan_in, 1/√fan_in)` for weights
    /// and biases) multiplied by `init_scale`. `widths` lists every layer
    /// width from input to output.
    pub fn init(widths: &[usize], init_scale: f64, seed: u64) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::ShapeMismatch(format!("invalid widths {widths:?}")));
        }
        let mut rng = seed::rng(seed);
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(k, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let name = format!("fc{}", k + 1);
                let weight = WeightMatrix::from_fn(format!("{name}.weight"), fan_out, fan_in, |_, _| {
                    init_scale * rng.gen_range(-bound..bound)
                })?;
                let bias = (0..fan_out)
                    .map(|_| init_scale * rng.gen_range(-bound..bound))
                    .collect();
                Ok(DenseLayer { name, weight, bias })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    /// Finds a layer by name (`fc1`) or weight id (`fc1.weight`).
    pub fn layer_index(&self, id: &str) -> Option<usize> {
        self.layers
            .iter()
            .position(|l| l.name == id || l.weight.layer_id() == id)
    }

    /// Replaces the weight of layer `index`, keeping its shape.
    pub fn set_weight(&mut self, index: usize, weight: WeightMatrix) -> Result<()> {
        let layer = &mut self.layers[index];
        if weight.shape() != layer.weight.shape() {
            return Err(Error::ShapeMismatch(format!(
                "layer `{}` is {:?}, replacement is {:?}",
                layer.name,
                layer.weight.shape(),
                weight.shape()
            )));
        }
        layer.weight = weight;
        Ok(())
    }

    /// Logits: affine + ReLU on hidden layers, affine output.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::ShapeMismatch(format!(
                "input has {} features, model expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        let last = self.layers.len() - 1;
        let mut a = x.to_vec();
        for (k, layer) in self.layers.iter().enumerate() {
            a = layer.apply(&a);
            if k < last {
                a.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        Ok(a)
    }

    /// Weights and biases as checkpoint tensors.
    pub fn to_tensors(&self) -> Vec<WeightMatrix> {
        self.layers
            .iter()
            .flat_map(|l| {
                let bias = WeightMatrix::new(format!("{}.bias", l.name), 1, l.bias.len(), l.bias.clone())
                    .expect("bias validated on construction");
                [l.weight.clone(), bias]
            })
            .collect()
    }

    /// Rebuilds a model from `fc{k}.weight` / `fc{k}.bias` tensors.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut layers = Vec::new();
        for k in 1.. {
            let name = format!("fc{k}");
            let Some(weight) = ckpt.layer(&format!("{name}.weight")) else {
                break;
            };
            let bias = match ckpt.layer(&format!("{name}.bias")) {
                Some(b) => b.data().to_vec(),
                None => vec![0.0; weight.rows()],
            };
            layers.push(DenseLayer {
                name,
                weight: weight.clone(),
                bias,
            });
        }
        if layers.is_empty() {
            return Err(Error::LayerNotFound("fc1.weight".into()));
        }
        Self::new(layers)
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.data_mut(), l.bias.as_mut_slice()])
            .collect()
    }
}

/// Labeled classification data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(inputs: Vec<Vec<f64>>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let ds = Self {
            inputs,
            labels,
            num_classes,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.inputs.is_empty() || self.inputs.len() != self.labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} inputs with {} labels",
                self.inputs.len(),
                self.labels.len()
            )));
        }
        let dim = self.inputs[0].len();
        if self.inputs.iter().any(|x| x.len() != dim) {
            return Err(Error::ShapeMismatch("inputs differ in dimension".into()));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(Error::ShapeMismatch(format!(
                "label {bad} outside 0..{}",
                self.num_classes
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs[0].len()
    }

    /// Mean and standard deviation over all input features.
    pub fn input_stats(&self) -> (f64, f64) {
        let flat: Vec<f64> = self.inputs.iter().flatten().copied().collect();
        let n = flat.len() as f64;
        let mean = pairwise_sum(&flat) / n;
        let dev: Vec<f64> = flat.iter().map(|x| (x - mean).powi(2)).collect();
        (mean, (pairwise_sum(&dev) / n).sqrt())
    }
}

/// Gaussian-cluster classification task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Standard deviation of the class centers.
    pub separation: f64,
    /// Within-class standard deviation.
    pub noise: f64,
}

impl Default for ClusterSpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            dim: 32,
            train_per_class: 50,
            test_per_class: 250,
            separation: 1.0,
            noise: 1.0,
        }
    }
}

/// Draws stratified train and test sets around shared class centers.
pub fn gaussian_clusters(spec: &ClusterSpec, seed: u64) -> Result<(Dataset, Dataset)> {
    if spec.num_classes < 2 || spec.dim == 0 || spec.train_per_class == 0 || spec.test_per_class == 0 {
        return Err(Error::Domain(format!("invalid cluster spec {spec:?}")));
    }
    let mut rng = seed::rng(seed);
    let normal = |rng: &mut rand_chacha::ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
    let centers: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| (0..spec.dim).map(|_| spec.separation * normal(&mut rng)).collect())
        .collect();
    let mut draw = |per_class: usize| {
        let mut inputs = Vec::with_capacity(per_class * spec.num_classes);
        let mut labels = Vec::with_capacity(per_class * spec.num_classes);
        for _ in 0..per_class {
            for (c, center) in centers.iter().enumerate() {
                inputs.push(center.iter().map(|m| m + spec.noise * normal(&mut rng)).collect());
                labels.push(c);
            }
        }
        Dataset::new(inputs, labels, spec.num_classes)
    };
    let train = draw(spec.train_per_class)?;
    let test = draw(spec.test_per_class)?;
    Ok((train, test))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub mse_loss: f64,
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn one_hot_sq_error(logits: &[f64], label: usize) -> f64 {
    logits
        .iter()
        .enumerate()
        .map(|(c, z)| {
            let y = if c == label { 1.0 } else { 0.0 };
            (z - y) * (z - y)
        })
        .sum()
}

/// Argmax accuracy and mean squared error against one-hot targets (averaged
/// over samples and classes).
pub fn evaluate(model: &MlpModel, data: &Dataset) -> Result<Evaluation> {
    if data.dim() != model.input_dim() || data.num_classes != model.output_dim() {
        return Err(Error::ShapeMismatch(format!(
            "dataset {}→{} vs model {}→{}",
            data.dim(),
            data.num_classes,
            model.input_dim(),
            model.output_dim()
        )));
    }
    let per_sample = map_indexed(Execution::default(), data.len(), |i| {
        let z = model.forward(&data.inputs[i])?;
        let hit = if argmax(&z) == data.labels[i] { 1.0 } else { 0.0 };
        Ok((hit, one_hot_sq_error(&z, data.labels[i])))
    })
    .into_iter()
    .collect::<Result<Vec<(f64, f64)>>>()?;
    let (hits, errs): (Vec<f64>, Vec<f64>) = per_sample.into_iter().unzip();
    let n = data.len() as f64;
    Ok(Evaluation {
        accuracy: pairwise_sum(&hits) / n,
        mse_loss: pairwise_sum(&errs) / (n * model.output_dim() as f64),
    })
}

/// Parameter gradients, laid out like the model's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    fn zeros(model: &MlpModel) -> Self {
        Self {
            weights: model.layers.iter().map(|l| vec![0.0; l.weight.data().len()]).collect(),
            biases: model.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    fn slices(&self) -> Vec<&[f64]> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w.as_slice(), b.as_slice()])
            .collect()
    }
}

/// MSE-vs-one-hot loss over the samples `batch` of `data`, with analytic
/// gradients by backpropagation.
pub fn loss_and_gradients(
    model: &MlpModel,
    data: &Dataset,
    batch: &[usize],
) -> Result<(f64, Gradients)> {
    let layers = &model.layers;
    let last = layers.len() - 1;
    let classes = model.output_dim();
    let norm = (batch.len() * classes) as f64;
    let mut grads = Gradients::zeros(model);
    let mut losses = Vec::with_capacity(batch.len());

    for &i in batch {
        let x = &data.inputs[i];
        if x.len() != model.input_dim() {
            return Err(Error::ShapeMismatch("input dimension".into()));
        }
        // activations[k] is the input to layer k; pre[k] its pre-activation.
        let mut activations = Vec::with_capacity(layers.len() + 1);
        let mut pre = Vec::with_capacity(layers.len());
        activations.push(x.clone());
        for (k, layer) in layers.iter().enumerate() {
            let h = layer.apply(&activations[k]);
            let a = if k < last { h.iter().map(|v| v.max(0.0)).collect() } else { h.clone() };
            pre.push(h);
            activations.push(a);
        }
        let z = &activations[layers.len()];
        losses.push(one_hot_sq_error(z, data.labels[i]));

        let mut delta: Vec<f64> = z
            .iter()
            .enumerate()
            .map(|(c, v)| {
                let y = if c == data.labels[i] { 1.0 } else { 0.0 };
                2.0 * (v - y) / norm
            })
            .collect();
        for k in (0..layers.len()).rev() {
            let input = &activations[k];
            let (in_dim, out_dim) = (layers[k].in_dim(), layers[k].out_dim());
            let gw = &mut grads.weights[k];
            for o in 0..out_dim {
                let d = delta[o];
                grads.biases[k][o] += d;
                if d != 0.0 {
                    let row = &mut gw[o * in_dim..(o + 1) * in_dim];
                    for (g, a) in row.iter_mut().zip(input) {
                        *g += d * a;
                    }
                }
            }
            if k > 0 {
                let w = &layers[k].weight;
                let mut back = vec![0.0; in_dim];
                for (o, &d) in delta.iter().enumerate() {
                    if d != 0.0 {
                        for (b, wv) in back.iter_mut().zip(w.row(o)) {
                            *b += wv * d;
                        }
                    }
                }
                for (b, h) in back.iter_mut().zip(&pre[k - 1]) {
                    if *h <= 0.0 {
                        *b = 0.0;
                    }
                }
                delta = back;
            }
        }
    }
    Ok((pairwise_sum(&losses) / norm, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Weight decay added to the gradient (L2 penalty).
    Adam,
    /// Decoupled weight decay.
    #[default]
    AdamW,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub init_scale: f64,
    pub seed: u64,
    /// Steps at which checkpoints are written (step 0 is the initial model).
    /// Empty means [`log_spaced_steps`] with 12 points.
    pub checkpoint_schedule: Vec<u64>,
    /// Evaluate and log every this many steps (and at every checkpoint).
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::AdamW,
            learning_rate: 5e-4,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 200,
            steps: 200_000,
            init_scale: 8.0,
            seed: 0,
            checkpoint_schedule: Vec::new(),
            log_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Domain(format!("invalid train config: {what}")));
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return bad("betas must lie in (0, 1)");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        if !(self.weight_decay >= 0.0) || !(self.learning_rate > 0.0) {
            return bad("learning rate must be positive and weight decay nonnegative");
        }
        if self.batch_size == 0 || self.log_every == 0 {
            return bad("batch_size and log_every must be positive");
        }
        Ok(())
    }

    pub fn schedule(&self) -> BTreeSet<u64> {
        if self.checkpoint_schedule.is_empty() {
            log_spaced_steps(self.steps, 12)
        } else {
            self.checkpoint_schedule
                .iter()
                .copied()
                .filter(|&s| s <= self.steps)
                .collect()
        }
    }
}

/// `count` roughly log-spaced steps in `[0, total]`, always including both
/// ends.
pub fn log_spaced_steps(total: u64, count: usize) -> BTreeSet<u64> {
    let mut steps = BTreeSet::from([0, total]);
    if total > 1 && count > 2 {
        let top = (total as f64).ln();
        for k in 0..count - 1 {
            let s = (top * k as f64 / (count - 2) as f64).exp().round() as u64;
            steps.insert(s.clamp(1, total));
        }
    }
    steps
}

/// Adam / AdamW moment state.
#[derive(Debug, Clone)]
pub struct Adam {
    kind: OptimizerKind,
    lr: f64,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: &TrainConfig, model: &MlpModel) -> Self {
        let zeros: Vec<Vec<f64>> = Gradients::zeros(model)
            .slices()
            .iter()
            .map(|s| vec![0.0; s.len()])
            .collect();
        Self {
            kind: config.optimizer,
            lr: config.learning_rate,
            weight_decay: config.weight_decay,
            beta1: config.beta1,
            beta2: config.beta2,
            epsilon: config.epsilon,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, model: &mut MlpModel, grads: &Gradients) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2_sqrt = (1.0 - self.beta2.powi(self.t)).sqrt();
        let step_size = self.lr / bc1;
        let decay = 1.0 - self.lr * self.weight_decay;
        let grad_slices = grads.slices();
        for (p_idx, params) in model.param_slices_mut().into_iter().enumerate() {
            let g = grad_slices[p_idx];
            let m = &mut self.m[p_idx];
            let v = &mut self.v[p_idx];
            for j in 0..params.len() {
                let mut grad = g[j];
                match self.kind {
                    OptimizerKind::AdamW => params[j] *= decay,
                    OptimizerKind::Adam => grad += self.weight_decay * params[j],
                }
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * grad;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * grad * grad;
                let denom = v[j].sqrt() / bc2_sqrt + self.epsilon;
                params[j] -= step_size * m[j] / denom;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub train_acc: f64,
    pub train_loss: f64,
    pub eval_acc: Option<f64>,
    pub eval_loss: Option<f64>,
}

/// Where and how checkpoints are written during training.
#[derive(Debug, Clone)]
pub struct CheckpointSink {
    pub dir: PathBuf,
    pub model_name: String,
}

impl CheckpointSink {
    pub fn path_for(&self, step: u64) -> PathBuf {
        self.dir.join(format!("step_{step:010}.json"))
    }
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub model: MlpModel,
    pub log: Vec<LogRow>,
    pub checkpoints: Vec<PathBuf>,
}

fn write_checkpoint(
    sink: &CheckpointSink,
    model: &MlpModel,
    row: &LogRow,
    input_stats: (f64, f64),
) -> Result<PathBuf> {
    let mut meta = BTreeMap::new();
    meta.insert("step".to_string(), row.step.to_string());
    meta.insert("train_acc".to_string(), format!("{}", row.train_acc));
    meta.insert("train_loss".to_string(), format!("{}", row.train_loss));
    if let (Some(acc), Some(loss)) = (row.eval_acc, row.eval_loss) {
        meta.insert("test_acc".to_string(), format!("{acc}"));
        meta.insert("test_loss".to_string(), format!("{loss}"));
    }
    meta.insert("input_mean".to_string(), format!("{}", input_stats.0));
    meta.insert("input_std".to_string(), format!("{}", input_stats.1));
    let path = sink.path_for(row.step);
    save_checkpoint(&path, &sink.model_name, row.step, &model.to_tensors(), &meta)?;
    Ok(path)
}

/// Trains `model` on `train_set`, logging train (and optional eval) metrics
/// and writing checkpoints at scheduled steps. Deterministic given the
/// config seed.
pub fn train(
    mut model: MlpModel,
    train_set: &Dataset,
    eval_set: Option<&Dataset>,
    config: &TrainConfig,
    sink: Option<&CheckpointSink>,
) -> Result<TrainRun> {
    config.validate()?;
    train_set.validate()?;
    if train_set.dim() != model.input_dim() || train_set.num_classes != model.output_dim() {
        return Err(Error::ShapeMismatch("dataset does not match model".into()));
    }
    let schedule = config.schedule();
    let input_stats = train_set.input_stats();
    let mut optimizer = Adam::new(config, &model);
    let mut rng = seed::rng(seed::derive(config.seed, 0x7472_6169_6e));
    let n = train_set.len();
    let full_batch: Vec<usize> = (0..n).collect();
    let mut order = full_batch.clone();
    let mut cursor = n;

    let mut log = Vec::new();
    let mut checkpoints = Vec::new();
    let mut record = |model: &MlpModel, step: u64, log: &mut Vec<LogRow>| -> Result<()> {
        let is_ckpt = schedule.contains(&step);
        if step % config.log_every != 0 && !is_ckpt {
            return Ok(());
        }
        let tr = evaluate(model, train_set)?;
        let ev = eval_set.map(|d| evaluate(model, d)).transpose()?;
        let row = LogRow {
            step,
            train_acc: tr.accuracy,
            train_loss: tr.mse_loss,
            eval_acc: ev.map(|e| e.accuracy),
            eval_loss: ev.map(|e| e.mse_loss),
        };
        log.push(row);
        if let (true, Some(sink)) = (is_ckpt, sink) {
            checkpoints.push(write_checkpoint(sink, model, &row, input_stats)?);
        }
        Ok(())
    };

    record(&model, 0, &mut log)?;
    for step in 1..=config.steps {
        let batch: &[usize] = if config.batch_size >= n {
            &full_batch
        } else {
            if cursor + config.batch_size > n {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            cursor += config.batch_size;
            &order[cursor - config.batch_size..cursor]
        };
        let (loss, grads) = loss_and_gradients(&model, train_set, batch)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        optimizer.step(&mut model, &grads);
        record(&model, step, &mut log)?;
    }
    Ok(TrainRun {
        model,
        log,
        checkpoints,
    })
}

/// Adds `±magnitude` to `k` distinct random entries of layer
/// `layer_index`'s weight, planting extreme coordinates.
pub fn inject_trap(
    model: &MlpModel,
    layer_index: usize,
    magnitude: f64,
    k: usize,
    seed: u64,
) -> Result<MlpModel> {
    let layer = model
        .layers
        .get(layer_index)
        .ok_or_else(|| Error::Domain(format!("no layer {layer_index}")))?;
    let size = layer.weight.data().len();
    if k > size {
        return Err(Error::Domain(format!("k = {k} exceeds {size} entries")));
    }
    if !(magnitude >= 0.0 && magnitude.is_finite()) {
        return Err(Error::Domain(format!("magnitude must be nonnegative, got {magnitude}")));
    }
    let mut out = model.clone();
    if magnitude == 0.0 || k == 0 {
        return Ok(out);
    }
    let mut rng = seed::rng(seed);
    let picks = index::sample(&mut rng, size, k);
    let mut data = layer.weight.data().to_vec();
    for idx in picks.iter() {
        let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        data[idx] += sign * magnitude;
    }
    out.set_weight(layer_index, layer.weight.with_data(data)?)?;
    Ok(out)
}

/// Reads a dataset from JSON (`{"inputs", "labels", "num_classes"}`).
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ds: Dataset = serde_json::from_str(&text).map_err(|e| Error::MalformedManifest {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    ds.validate()?;
    Ok(ds)
}

pub fn save_dataset(path: &Path, data: &Dataset) -> Result<()> {
    let json = serde_json::to_string(data).expect("dataset serializes");
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}
