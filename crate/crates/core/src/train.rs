//! Joint multi-task training, single-task baselines, and two-rate
//! fine-tuning.
//!
//! The joint objective is the plain sum of per-task cross-entropies; one
//! backward pass of that sum also yields the per-task head gradients used by
//! fine-tuning, because a head only appears in its own task term. Fine-tuning
//! applies explicit gradient steps: heads at rate `alpha` on their task loss,
//! the backbone at rate `eta` on the total loss, both taken at the pre-update
//! parameter values.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{stack_images, Dataset, LabeledImage};
use crate::model::{ModelConfig, ModelError, MtlModel};
use crate::rng::Rng;
use crate::tape::{Gradients, Tape};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("sample carries {actual} labels but the run needs label index {index}")]
    LabelIndex { index: usize, actual: usize },
    #[error("label map has {actual} entries for a {expected}-task model")]
    LabelMapLength { expected: usize, actual: usize },
    #[error("non-finite loss on task {task}")]
    NonFiniteLoss { task: usize },
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("optimizer does not cover parameter {0}")]
    OptimizerCoverage(String),
    #[error("evaluate on an empty dataset")]
    EmptyDataset,
    #[error("batch is empty")]
    EmptyBatch,
}

/// Per-task losses and their sum, in fixed task order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub per_task: Vec<f32>,
    pub total: f32,
}

impl LossReport {
    /// Total is the left fold of the per-task values, the same order the
    /// training graph adds them in.
    pub fn from_per_task(per_task: Vec<f32>) -> Self {
        let total = per_task[1..]
            .iter()
            .fold(per_task[0], |acc, &l| acc + l);
        LossReport { per_task, total }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    AdamW,
}

/// Adaptive-moment constants (published defaults of the decoupled-decay
/// method).
pub const ADAMW_BETA1: f32 = 0.9;
pub const ADAMW_BETA2: f32 = 0.999;
pub const ADAMW_EPSILON: f32 = 1e-8;
pub const ADAMW_WEIGHT_DECAY: f32 = 0.01;

/// Optimizer state covering every parameter of one model.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub learning_rate: f32,
    pub weight_decay: f32,
    beta1: f32,
    beta2: f32,
    epsilon: f32,
    step_count: u64,
    // (param name, first moment, second moment), in model parameter order.
    moments: Vec<(String, Vec<f32>, Vec<f32>)>,
}

impl Optimizer {
    pub fn sgd(model: &MtlModel, learning_rate: f32) -> Self {
        Optimizer {
            kind: OptimizerKind::Sgd,
            learning_rate,
            weight_decay: 0.0,
            beta1: ADAMW_BETA1,
            beta2: ADAMW_BETA2,
            epsilon: ADAMW_EPSILON,
            step_count: 0,
            moments: Self::zero_moments(model),
        }
    }

    pub fn adamw(model: &MtlModel, learning_rate: f32) -> Self {
        Self::adamw_with_decay(model, learning_rate, ADAMW_WEIGHT_DECAY)
    }

    pub fn adamw_with_decay(model: &MtlModel, learning_rate: f32, weight_decay: f32) -> Self {
        Optimizer {
            kind: OptimizerKind::AdamW,
            learning_rate,
            weight_decay,
            beta1: ADAMW_BETA1,
            beta2: ADAMW_BETA2,
            epsilon: ADAMW_EPSILON,
            step_count: 0,
            moments: Self::zero_moments(model),
        }
    }

    pub fn new(model: &MtlModel, kind: OptimizerKind, learning_rate: f32) -> Self {
        match kind {
            OptimizerKind::Sgd => Self::sgd(model, learning_rate),
            OptimizerKind::AdamW => Self::adamw(model, learning_rate),
        }
    }

    fn zero_moments(model: &MtlModel) -> Vec<(String, Vec<f32>, Vec<f32>)> {
        model
            .params
            .iter()
            .map(|(name, t)| (name.to_string(), vec![0.0; t.len()], vec![0.0; t.len()]))
            .collect()
    }

    /// One update of every model parameter from `grads`. A zero learning
    /// rate leaves parameters bitwise untouched.
    pub fn apply(&mut self, model: &mut MtlModel, grads: &Gradients) -> Result<(), TrainError> {
        if self.learning_rate == 0.0 {
            return Ok(());
        }
        self.step_count += 1;
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::Sgd => {
                for (name, _, _) in &self.moments {
                    let grad = grads
                        .get(name)
                        .ok_or_else(|| TrainError::OptimizerCoverage(name.clone()))?;
                    let param = model
                        .params
                        .get_mut(name)
                        .ok_or_else(|| TrainError::OptimizerCoverage(name.clone()))?;
                    for (p, &g) in param.data_mut().iter_mut().zip(grad.data()) {
                        *p -= lr * g;
                    }
                }
            }
            OptimizerKind::AdamW => {
                let t = self.step_count as i32;
                let bias1 = 1.0 - self.beta1.powi(t);
                let bias2 = 1.0 - self.beta2.powi(t);
                let (beta1, beta2, eps, wd) =
                    (self.beta1, self.beta2, self.epsilon, self.weight_decay);
                for (name, m, v) in &mut self.moments {
                    let grad = grads
                        .get(name)
                        .ok_or_else(|| TrainError::OptimizerCoverage(name.clone()))?;
                    let param = model
                        .params
                        .get_mut(name)
                        .ok_or_else(|| TrainError::OptimizerCoverage(name.clone()))?;
                    for (((p, &g), m), v) in param
                        .data_mut()
                        .iter_mut()
                        .zip(grad.data())
                        .zip(m.iter_mut())
                        .zip(v.iter_mut())
                    {
                        // Decoupled decay, then the adaptive step.
                        if wd != 0.0 {
                            *p *= 1.0 - lr * wd;
                        }
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        let m_hat = *m / bias1;
                        let v_hat = *v / bias2;
                        *p -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Head learning rate `alpha` and backbone learning rate `eta`; the
/// intended regime is `eta` much smaller than `alpha` (or zero).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub alpha: f32,
    pub eta: f32,
}

fn check_batch(
    model: &MtlModel,
    batch: &[&LabeledImage],
    label_map: &[usize],
) -> Result<(), TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    if label_map.len() != model.n_tasks() {
        return Err(TrainError::LabelMapLength {
            expected: model.n_tasks(),
            actual: label_map.len(),
        });
    }
    for image in batch {
        for &index in label_map {
            if index >= image.labels.len() {
                return Err(TrainError::LabelIndex {
                    index,
                    actual: image.labels.len(),
                });
            }
        }
    }
    Ok(())
}

/// Forward pass of the joint objective on `tape`. Returns the scalar total
/// loss node and the numeric report. `label_map[j]` selects which label
/// position in each sample feeds task `j`.
pub fn total_loss_on_tape(
    tape: &mut Tape,
    model: &MtlModel,
    batch: &[&LabeledImage],
    label_map: &[usize],
) -> Result<(Tensor, LossReport), TrainError> {
    check_batch(model, batch, label_map)?;
    let (x, labels) = stack_images(batch);
    let feature = model.backbone_forward(tape, &x)?;
    let mut per_task = Vec::with_capacity(model.n_tasks());
    let mut total: Option<Tensor> = None;
    for (j, &label_index) in label_map.iter().enumerate() {
        let task_labels: Vec<usize> = labels
            .iter()
            .map(|l| l[label_index] as usize)
            .collect();
        let logits = model.head_forward(tape, j, &feature)?;
        let per_sample = tape.softmax_cross_entropy_batch(&logits, &task_labels)?;
        let task_loss = tape.mean(&per_sample);
        per_task.push(task_loss.item());
        total = Some(match total {
            None => task_loss,
            Some(acc) => tape.add(&acc, &task_loss)?,
        });
    }
    let total = total.expect("at least one task");
    Ok((total, LossReport::from_per_task(per_task)))
}

/// Forward pass of a single task's loss (backbone + head `j` only).
pub fn task_loss_on_tape(
    tape: &mut Tape,
    model: &MtlModel,
    batch: &[&LabeledImage],
    label_map: &[usize],
    j: usize,
) -> Result<Tensor, TrainError> {
    check_batch(model, batch, label_map)?;
    let (x, labels) = stack_images(batch);
    let task_labels: Vec<usize> = labels
        .iter()
        .map(|l| l[label_map[j]] as usize)
        .collect();
    let feature = model.backbone_forward(tape, &x)?;
    let logits = model.head_forward(tape, j, &feature)?;
    let per_sample = tape.softmax_cross_entropy_batch(&logits, &task_labels)?;
    Ok(tape.mean(&per_sample))
}

/// Joint loss without recording anything.
pub fn total_loss(
    model: &MtlModel,
    batch: &[&LabeledImage],
    label_map: &[usize],
) -> Result<LossReport, TrainError> {
    let mut tape = Tape::inference();
    let (_, report) = total_loss_on_tape(&mut tape, model, batch, label_map)?;
    Ok(report)
}

fn check_finite(report: &LossReport) -> Result<(), TrainError> {
    for (task, loss) in report.per_task.iter().enumerate() {
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { task });
        }
    }
    Ok(())
}

/// One forward, one backward of the total loss, one optimizer update of
/// every parameter. Returns the pre-update losses.
pub fn train_step(
    model: &mut MtlModel,
    batch: &[&LabeledImage],
    label_map: &[usize],
    opt: &mut Optimizer,
) -> Result<LossReport, TrainError> {
    let mut tape = Tape::new();
    let (loss, report) = total_loss_on_tape(&mut tape, model, batch, label_map)?;
    check_finite(&report)?;
    let grads = tape.backward(&loss)?;
    opt.apply(model, &grads)?;
    Ok(report)
}

/// Two-rate fine-tune step: heads move at `alpha` along their own task
/// gradient, the backbone moves at `eta` along the total-loss gradient.
/// Both gradients come from one backward pass of the total loss, taken at
/// the pre-update parameter values (a head's task gradient equals its
/// total-loss gradient because other task terms do not touch it).
pub fn finetune_step(
    model: &mut MtlModel,
    batch: &[&LabeledImage],
    label_map: &[usize],
    cfg: &FinetuneConfig,
) -> Result<LossReport, TrainError> {
    let mut tape = Tape::new();
    let (loss, report) = total_loss_on_tape(&mut tape, model, batch, label_map)?;
    check_finite(&report)?;
    let grads = tape.backward(&loss)?;
    for (name, grad) in grads.iter() {
        if grad.data().iter().any(|g| !g.is_finite()) {
            return Err(TrainError::NonFiniteGradient(name.to_string()));
        }
    }
    let param_names: Vec<String> = model.params.names().map(str::to_string).collect();
    for name in param_names {
        let rate = if name.starts_with("backbone.") {
            cfg.eta
        } else {
            cfg.alpha
        };
        if rate == 0.0 {
            continue;
        }
        let grad = grads
            .get(&name)
            .ok_or_else(|| TrainError::OptimizerCoverage(name.clone()))?;
        let param = model.params.get_mut(&name).expect("names come from the store");
        for (p, &g) in param.data_mut().iter_mut().zip(grad.data()) {
            *p -= rate * g;
        }
    }
    Ok(report)
}

/// Per-task accuracy over `dataset`, as percentages.
pub fn evaluate(
    model: &MtlModel,
    dataset: &Dataset,
    label_map: &[usize],
) -> Result<Vec<f64>, TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if label_map.len() != model.n_tasks() {
        return Err(TrainError::LabelMapLength {
            expected: model.n_tasks(),
            actual: label_map.len(),
        });
    }
    let mut correct = vec![0u64; model.n_tasks()];
    let mut tape = Tape::inference();
    for chunk in dataset.images.chunks(256) {
        let refs: Vec<&LabeledImage> = chunk.iter().collect();
        let (x, labels) = stack_images(&refs);
        let logits = model.predict_all(&mut tape, &x)?;
        for (j, task_logits) in logits.iter().enumerate() {
            let classes = task_logits.shape()[1];
            for (row, sample_labels) in labels.iter().enumerate() {
                let row_logits = &task_logits.data()[row * classes..(row + 1) * classes];
                let predicted = argmax(row_logits);
                if predicted == sample_labels[label_map[j]] as usize {
                    correct[j] += 1;
                }
            }
        }
    }
    let n = dataset.len() as f64;
    Ok(correct.iter().map(|&c| 100.0 * c as f64 / n).collect())
}

/// First index of the maximum value; ties resolve to the lowest index.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Epoch/batch/optimizer settings for a whole run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f32,
    pub weight_decay: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 64,
            optimizer: OptimizerKind::AdamW,
            learning_rate: 1e-3,
            weight_decay: ADAMW_WEIGHT_DECAY,
        }
    }
}

/// Train `model` in place. Returns per-epoch per-task mean losses. Epoch
/// shuffles derive from `seed`, so a (model init, seed) pair fixes the
/// entire run.
pub fn train_model(
    model: &mut MtlModel,
    data: &Dataset,
    label_map: &[usize],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Vec<Vec<f64>>, TrainError> {
    assert!(cfg.batch_size > 0, "batch size must be positive");
    let mut opt = match cfg.optimizer {
        OptimizerKind::Sgd => Optimizer::sgd(model, cfg.learning_rate),
        OptimizerKind::AdamW => {
            Optimizer::adamw_with_decay(model, cfg.learning_rate, cfg.weight_decay)
        }
    };
    let mut shuffle_rng = Rng::for_purpose(seed, "epoch-shuffle");
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..cfg.epochs {
        shuffle_rng.shuffle(&mut order);
        let mut sums = vec![0.0f64; model.n_tasks()];
        for batch_indices in order.chunks(cfg.batch_size) {
            let batch: Vec<&LabeledImage> =
                batch_indices.iter().map(|&i| &data.images[i]).collect();
            let report = train_step(model, &batch, label_map, &mut opt)?;
            for (sum, &l) in sums.iter_mut().zip(&report.per_task) {
                *sum += f64::from(l) * batch.len() as f64;
            }
        }
        let n = data.len() as f64;
        epoch_losses.push(sums.iter().map(|s| s / n).collect());
    }
    Ok(epoch_losses)
}

/// Single-task config: the same backbone family with exactly one head.
pub fn stl_config(base: &ModelConfig, task: usize) -> ModelConfig {
    ModelConfig {
        input_shape: base.input_shape,
        backbone_widths: base.backbone_widths.clone(),
        feature_len: base.feature_len,
        head_hidden_width: base.head_hidden_width,
        tasks: vec![base.tasks[task].clone()],
    }
}

/// Train an independent single-task model on one label position.
pub fn train_stl(
    base: &ModelConfig,
    task: usize,
    data: &Dataset,
    dataset_label_index: usize,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(MtlModel, Vec<Vec<f64>>), TrainError> {
    let config = stl_config(base, task);
    let mut rng = Rng::for_purpose(seed, "init");
    let mut model = MtlModel::init(config, &mut rng)?;
    let losses = train_model(&mut model, data, &[dataset_label_index], cfg, seed)?;
    Ok((model, losses))
}

/// One run's metrics document. `wall_clock_seconds` is the only
/// non-deterministic field.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsDoc {
    pub seed: u64,
    pub config_digest: String,
    pub tasks: Vec<String>,
    pub per_epoch_losses: Vec<Vec<f64>>,
    /// Percent, rounded to 2 decimals.
    pub final_accuracies: Vec<f64>,
    pub wall_clock_seconds: f64,
}

pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// STL baselines vs one joint model on the same split, all derived from
/// one seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkOutcome {
    pub seed: u64,
    pub tasks: Vec<String>,
    /// Percent, per task.
    pub stl_accuracies: Vec<f64>,
    pub mtl_accuracies: Vec<f64>,
    pub wall_clock_seconds: f64,
}

impl BenchmarkOutcome {
    /// Signed MTL-minus-STL deltas.
    pub fn deltas(&self) -> Vec<f64> {
        self.mtl_accuracies
            .iter()
            .zip(&self.stl_accuracies)
            .map(|(m, s)| m - s)
            .collect()
    }
}

/// Generate the dataset, train one STL model per task plus one MTL model,
/// and evaluate everything on the held-out split.
pub fn run_benchmark(
    spec: &crate::data::FactorSpec,
    noise_fraction: f64,
    model_config: &ModelConfig,
    cfg: &TrainConfig,
    split_ratio: f64,
    seed: u64,
) -> Result<BenchmarkOutcome, TrainError> {
    let started = Instant::now();
    let dataset = crate::data::generate_noisy(spec, noise_fraction, seed)
        .map_err(|e| TrainError::Model(ModelError::Config(e.to_string())))?;
    let (train_set, test_set) = crate::data::split_train_test(&dataset, split_ratio, seed)
        .map_err(|e| TrainError::Model(ModelError::Config(e.to_string())))?;

    let label_map: Vec<usize> = model_config
        .tasks
        .iter()
        .map(|t| {
            spec.task_index(&t.name)
                .expect("model tasks name dataset factors")
        })
        .collect();

    let mut stl_accuracies = Vec::with_capacity(model_config.n_tasks());
    for j in 0..model_config.n_tasks() {
        let stl_seed = crate::rng::derive_seed(seed, &format!("stl.{j}"));
        let (stl_model, _) =
            train_stl(model_config, j, &train_set, label_map[j], cfg, stl_seed)?;
        let acc = evaluate(&stl_model, &test_set, &[label_map[j]])?;
        stl_accuracies.push(acc[0]);
    }

    let mtl_seed = crate::rng::derive_seed(seed, "mtl");
    let mut rng = Rng::for_purpose(mtl_seed, "init");
    let mut mtl_model = MtlModel::init(model_config.clone(), &mut rng)?;
    train_model(&mut mtl_model, &train_set, &label_map, cfg, mtl_seed)?;
    let mtl_accuracies = evaluate(&mtl_model, &test_set, &label_map)?;

    Ok(BenchmarkOutcome {
        seed,
        tasks: model_config.tasks.iter().map(|t| t.name.clone()).collect(),
        stl_accuracies,
        mtl_accuracies,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    })
}
