//! Small classifiers, the conformal-training loop and its loss functions.
//!
//! Models are linear or MLP softmax classifiers over a flat parameter
//! vector. Training follows the batch recipe: each batch is split into a
//! calibration half and a test half, the calibration half produces a soft
//! conformal quantile through the differentiable sorter, and the chosen
//! loss is evaluated on the soft prediction sets of the test half.
//! Optimization is SGD with Nesterov momentum 0.9 and a step schedule that
//! multiplies the learning rate by 0.1 after 2/5, 3/5 and 4/5 of the
//! epochs.

mod losses;

pub use losses::{
    conformal_step, loss_ce, loss_conftr, loss_conftr_class, loss_dpi, loss_fano, loss_mb_fano,
    SoftStep,
};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::conformal::{calibrate, predict_set};
use crate::data::{coverage, inefficiency, split, LabeledDataset, ProbVector, RngSeed};
use crate::diffsort::RelaxConfig;
use crate::error::{Error, Result};
use crate::scores::{score, ScoreSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Activation {
    Relu,
    Tanh,
}

/// Layer sizes run input -> hidden... -> num_labels; an empty hidden list
/// is a linear model.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelSpec {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
}

impl ModelSpec {
    pub fn linear(input_dim: usize, num_labels: usize) -> Self {
        ModelSpec { layer_sizes: vec![input_dim, num_labels], activation: Activation::Relu }
    }

    pub fn mlp(input_dim: usize, hidden: &[usize], num_labels: usize, activation: Activation) -> Self {
        let mut sizes = vec![input_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(num_labels);
        ModelSpec { layer_sizes: sizes, activation }
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn num_labels(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn num_params(&self) -> usize {
        self.layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 || self.layer_sizes.contains(&0) {
            return Err(Error::invalid("layer_sizes needs at least input and output, all positive"));
        }
        Ok(())
    }
}

/// A classifier: spec plus flat parameters (per layer: row-major weight
/// matrix, then bias).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: Vec<f64>,
}

impl Model {
    /// Seeded uniform init in (-1/sqrt(fan_in), 1/sqrt(fan_in)).
    pub fn init(spec: ModelSpec, seed: RngSeed) -> Result<Self> {
        spec.validate()?;
        let mut rng = seed.rng();
        let mut params = Vec::with_capacity(spec.num_params());
        for w in spec.layer_sizes.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            for _ in 0..w[0] * w[1] + w[1] {
                params.push(rng.uniform_in(-bound, bound));
            }
        }
        Ok(Model { spec, params })
    }

    pub fn from_params(spec: ModelSpec, params: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if params.len() != spec.num_params() {
            return Err(Error::invalid(format!(
                "{} params provided, spec needs {}",
                params.len(),
                spec.num_params()
            )));
        }
        Ok(Model { spec, params })
    }

    /// A linear model whose softmax output at a one-hot feature row equals
    /// the given probability table row (up to the log clamp).
    pub fn exact_table(table: &[Vec<f64>]) -> Result<Self> {
        let contexts = table.len();
        let k = table.first().map_or(0, Vec::len);
        let spec = ModelSpec::linear(contexts, k);
        let mut params = vec![0.0; spec.num_params()];
        for (x, row) in table.iter().enumerate() {
            for (y, &p) in row.iter().enumerate() {
                params[x * k + y] = p.max(1e-12).ln();
            }
        }
        Model::from_params(spec, params)
    }

    /// Forward pass on the tape. `features` is row-major (n x input_dim).
    /// Returns (logits, log_probs, probs, last hidden representation).
    pub fn forward_tape(&self, tape: &Tape, params: Var, features: &[f64], n: usize) -> ForwardVars {
        let dim = self.spec.input_dim();
        debug_assert_eq!(features.len(), n * dim);
        let input = tape.constant(n, dim, features.to_vec());
        self.forward_tape_var(tape, params, input)
    }

    /// Forward pass from an input already on the tape (e.g. a detached or
    /// shared representation).
    pub fn forward_tape_var(&self, tape: &Tape, params: Var, input: Var) -> ForwardVars {
        debug_assert_eq!(input.cols, self.spec.input_dim());
        let mut h = input;
        let mut offset = 0;
        let depth = self.spec.layer_sizes.len() - 1;
        let mut repr = h;
        for (l, w) in self.spec.layer_sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let weight = tape.slice(params, offset, fan_in, fan_out);
            offset += fan_in * fan_out;
            let bias = tape.slice(params, offset, 1, fan_out);
            offset += fan_out;
            h = tape.add(tape.matmul(h, weight), bias);
            if l + 1 < depth {
                h = match self.spec.activation {
                    Activation::Relu => tape.relu(h),
                    Activation::Tanh => tape.tanh(h),
                };
                repr = h;
            }
        }
        let logits = h;
        let (log_probs, probs) = log_softmax(tape, logits);
        ForwardVars { logits, log_probs, probs, repr }
    }

    /// Plain forward pass (no tape), returning per-row probabilities.
    pub fn forward_probs(&self, features: &[f64], n: usize) -> Vec<ProbVector> {
        let tape = Tape::new();
        let params = tape.constant(1, self.params.len(), self.params.clone());
        let fw = self.forward_tape(&tape, params, features, n);
        let k = self.spec.num_labels();
        let flat = tape.value(fw.probs);
        (0..n)
            .map(|i| {
                let row = &flat[i * k..(i + 1) * k];
                let total: f64 = row.iter().sum();
                ProbVector::new(row.iter().map(|v| v / total).collect()).expect("softmax row")
            })
            .collect()
    }

    pub fn probs_for(&self, ds: &LabeledDataset) -> Vec<ProbVector> {
        let mut flat = Vec::with_capacity(ds.len() * ds.dim());
        for i in 0..ds.len() {
            flat.extend_from_slice(ds.feature_row(i));
        }
        self.forward_probs(&flat, ds.len())
    }
}

pub struct ForwardVars {
    pub logits: Var,
    pub log_probs: Var,
    pub probs: Var,
    /// Last hidden activation; equals the input for a linear model.
    pub repr: Var,
}

/// Numerically stable log-softmax on the tape; the row max enters as a
/// constant, which leaves gradients unchanged.
pub fn log_softmax(tape: &Tape, logits: Var) -> (Var, Var) {
    let (n, k) = (logits.rows, logits.cols);
    let values = tape.value(logits);
    let row_max: Vec<f64> = (0..n)
        .map(|i| values[i * k..(i + 1) * k].iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let max_const = tape.constant(n, 1, row_max);
    let shifted = tape.sub(logits, max_const);
    let exp = tape.exp(shifted);
    let denom = tape.row_sum(exp);
    let log_probs = tape.sub(shifted, tape.ln(denom));
    let probs = tape.div(exp, denom);
    (log_probs, probs)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LossKind {
    Ce,
    ConfTr,
    ConfTrClass,
    Fano,
    MbFano,
    Dpi,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub alpha_train: f64,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    pub epochs: usize,
    pub relax: RelaxConfig,
    /// Classification term weight (ConfTrClass only).
    #[serde(default)]
    pub class_weight: f64,
    /// Bernstein confidence (Dpi only).
    #[serde(default = "default_delta")]
    pub delta: f64,
    pub seed: RngSeed,
    /// Fraction of the dataset held out for the per-epoch hard-SCP metric.
    #[serde(default = "default_holdout")]
    pub holdout_fraction: f64,
}

fn default_momentum() -> f64 {
    0.9
}

fn default_delta() -> f64 {
    0.05
}

fn default_holdout() -> f64 {
    0.2
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_train > 0.0 && self.alpha_train < 0.5) {
            return Err(Error::invalid(format!("alpha_train {} outside (0, 0.5)", self.alpha_train)));
        }
        if self.loss != LossKind::Ce {
            let n_cal = self.batch_size / 2;
            let rank = crate::conformal::quantile_rank(n_cal, self.alpha_train);
            if n_cal < 1 || rank > n_cal {
                return Err(Error::infeasible(format!(
                    "batch_size {} gives {} calibration scores; rank {} at alpha {} is infeasible",
                    self.batch_size, n_cal, rank, self.alpha_train
                )));
            }
        }
        if self.batch_size < 1 || self.epochs == 0 {
            return Err(Error::invalid("batch_size and epochs must be positive"));
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err(Error::invalid("holdout_fraction must lie in (0, 1)"));
        }
        self.relax.validate()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    pub holdout_coverage: f64,
    pub holdout_inefficiency: f64,
}

/// Learning rate after the step schedule (drops at 2/5, 3/5, 4/5).
pub fn scheduled_lr(base: f64, epoch: usize, total_epochs: usize) -> f64 {
    let mut lr = base;
    for frac in [2usize, 3, 4] {
        if epoch >= frac * total_epochs / 5 && frac * total_epochs / 5 > 0 {
            lr *= 0.1;
        }
    }
    lr
}

/// Builds the configured loss for one batch on a fresh tape and returns
/// (loss var, tape, params var).
pub fn batch_loss(
    model: &Model,
    features: &[f64],
    labels: &[usize],
    n: usize,
    cfg: &TrainConfig,
) -> Result<(Tape, Var, Var)> {
    let tape = Tape::new();
    let params = tape.param(1, model.params.len(), model.params.clone());
    let k = model.spec.num_labels();
    let loss = match cfg.loss {
        LossKind::Ce => {
            let fw = model.forward_tape(&tape, params, features, n);
            loss_ce(&tape, fw.log_probs, labels)
        }
        _ => {
            let step = conformal_step(&tape, model, params, features, labels, n, cfg.alpha_train, &cfg.relax)?;
            match cfg.loss {
                LossKind::ConfTr => loss_conftr(&tape, step.soft_sets),
                LossKind::ConfTrClass => {
                    loss_conftr_class(&tape, step.soft_sets, &step.test_labels, cfg.class_weight)
                }
                LossKind::Fano => {
                    loss_fano(&tape, step.soft_sets, &step.test_labels, cfg.alpha_train, step.n_cal, k)
                }
                LossKind::MbFano => loss_mb_fano(
                    &tape,
                    step.soft_sets,
                    step.test_probs,
                    &step.test_labels,
                    cfg.alpha_train,
                    step.n_cal,
                ),
                LossKind::Dpi => loss_dpi(
                    &tape,
                    step.soft_sets,
                    step.test_probs,
                    step.test_log_probs,
                    &step.test_labels,
                    cfg.alpha_train,
                    step.n_cal,
                    cfg.delta,
                ),
                LossKind::Ce => unreachable!(),
            }
        }
    };
    Ok((tape, loss, params))
}

/// Trains in place; returns per-epoch metrics. The held-out split is carved
/// from the dataset once, up front, with the config seed.
pub fn train(model: &mut Model, dataset: &LabeledDataset, cfg: &TrainConfig) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    if model.spec.input_dim() != dataset.dim() {
        return Err(Error::invalid("model input dim does not match dataset"));
    }
    let (train_ds, holdout) = split(dataset, 1.0 - cfg.holdout_fraction, cfg.seed.derive(0x7011))?;
    let mut velocity = vec![0.0; model.params.len()];
    let mut metrics = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = scheduled_lr(cfg.lr, epoch, cfg.epochs);
        let order = cfg.seed.derive(epoch as u64).rng().shuffled_indices(train_ds.len());
        let mut losses = Vec::new();
        let mut start = 0;
        while start + cfg.batch_size <= order.len() {
            let idx = &order[start..start + cfg.batch_size];
            start += cfg.batch_size;
            let batch = train_ds.subset(idx);
            let mut flat = Vec::with_capacity(batch.len() * batch.dim());
            for i in 0..batch.len() {
                flat.extend_from_slice(batch.feature_row(i));
            }
            let (tape, loss, params) = batch_loss(model, &flat, batch.labels(), batch.len(), cfg)?;
            let loss_value = tape.value_scalar(loss);
            if !loss_value.is_finite() {
                return Err(Error::Diverged(format!(
                    "loss became {loss_value} at epoch {epoch} (lr {lr}, {} batches in)",
                    losses.len()
                )));
            }
            losses.push(loss_value);
            if lr > 0.0 {
                let grads = tape.backward(loss)?;
                let grad = grads.get(params);
                for (i, &g) in grad.iter().enumerate() {
                    velocity[i] = cfg.momentum * velocity[i] + g;
                    model.params[i] -= lr * (g + cfg.momentum * velocity[i]);
                }
            }
        }
        let mean_loss = if losses.is_empty() {
            f64::NAN
        } else {
            losses.iter().sum::<f64>() / losses.len() as f64
        };
        let (cov, ineff) = holdout_scp(model, &holdout, cfg.alpha_train, cfg.seed.derive(0xe7a1 + epoch as u64))?;
        metrics.push(EpochMetrics {
            epoch,
            mean_loss,
            lr,
            holdout_coverage: cov,
            holdout_inefficiency: ineff,
        });
    }
    Ok(metrics)
}

/// Hard split-conformal evaluation of the current model on held-out data.
fn holdout_scp(model: &Model, holdout: &LabeledDataset, alpha: f64, seed: RngSeed) -> Result<(f64, f64)> {
    if holdout.len() < 4 {
        return Ok((f64::NAN, f64::NAN));
    }
    let (cal, test) = split(holdout, 0.5, seed)?;
    let spec = ScoreSpec::thr_prob().with_jitter(1e-9);
    let cal_probs = model.probs_for(&cal);
    let cal_scores: Vec<f64> = cal_probs
        .iter()
        .enumerate()
        .map(|(i, p)| score(&spec, p, cal.label(i), Some(seed.derive(i as u64))).unwrap())
        .collect();
    let calibration = calibrate(&cal_scores, alpha)?;
    let test_probs = model.probs_for(&test);
    let sets: Vec<_> = test_probs
        .iter()
        .enumerate()
        .map(|(i, p)| predict_set(&calibration, &spec, p, Some(seed.derive(100_000 + i as u64))))
        .collect();
    Ok((coverage(&sets, test.labels())?, inefficiency(&sets)?))
}
