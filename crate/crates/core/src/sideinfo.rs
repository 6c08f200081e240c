//! Side-information posterior updates and SI-aware conformal evaluation.
//!
//! Discrete side information `z` is folded into the predictive
//! distribution by Bayes rule: `p'(y) ∝ p(y) q(z | x, y)`. When `z` is
//! unobserved the model falls back to `p` unchanged, which keeps the
//! conformal guarantee as long as the availability pattern is sampled
//! identically for calibration and test examples.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::conformal::{calibrate, mondrian_calibrate, mondrian_predict, predict_set};
use crate::data::{coverage, inefficiency, LabeledDataset, ProbVector, RngSeed};
use crate::error::{Error, Result};
use crate::scores::{score, ScoreSpec};
use crate::training::Model;

/// Auxiliary model for `q(z | x, y)`: either an exact per-label table or a
/// linear head over the concatenated features and one-hot label.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum SideModel {
    /// `lik[y][z]`, each row on the group simplex. Ignores `x`.
    Table { lik: Vec<Vec<f64>> },
    /// Linear head over `[x ; onehot(y)]` producing group logits.
    Linear { head: Model, feature_dim: usize, num_labels: usize },
}

impl SideModel {
    pub fn num_groups(&self) -> usize {
        match self {
            SideModel::Table { lik } => lik.first().map_or(0, Vec::len),
            SideModel::Linear { head, .. } => head.spec.num_labels(),
        }
    }

    /// Deterministic table from a label-to-group map.
    pub fn from_group_map(num_labels: usize, num_groups: usize, group_of: impl Fn(usize) -> usize) -> Self {
        let lik = (0..num_labels)
            .map(|y| {
                let mut row = vec![0.0; num_groups];
                row[group_of(y)] = 1.0;
                row
            })
            .collect();
        SideModel::Table { lik }
    }

    /// Table fitted by smoothed counts over (label, group) pairs.
    pub fn table_from_counts(ds: &LabeledDataset) -> Result<Self> {
        let (k, g) = (ds.num_labels(), ds.num_groups());
        if g == 0 {
            return Err(Error::invalid("dataset has no side information"));
        }
        let smoothing = 1e-3;
        let mut counts = vec![vec![smoothing; g]; k];
        let mut seen = 0usize;
        for i in 0..ds.len() {
            if let Some(z) = ds.side(i) {
                counts[ds.label(i)][z] += 1.0;
                seen += 1;
            }
        }
        if seen == 0 {
            return Err(Error::invalid("no examples carry side information"));
        }
        for row in &mut counts {
            let total: f64 = row.iter().sum();
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        Ok(SideModel::Table { lik: counts })
    }

    /// Likelihood vector over labels for an observed group:
    /// `lik[y] = q(z | x, y)`.
    pub fn likelihood(&self, x: &[f64], z: usize) -> Vec<f64> {
        match self {
            SideModel::Table { lik } => lik.iter().map(|row| row[z]).collect(),
            SideModel::Linear { head, feature_dim, num_labels } => {
                let k = *num_labels;
                let mut rows = Vec::with_capacity(k * (feature_dim + k));
                for y in 0..k {
                    rows.extend_from_slice(x);
                    let mut onehot = vec![0.0; k];
                    onehot[y] = 1.0;
                    rows.extend_from_slice(&onehot);
                }
                let probs = head.forward_probs(&rows, k);
                probs.iter().map(|p| p.get(z)).collect()
            }
        }
    }

    /// Mean log-likelihood of the observed (x, y, z) triples.
    pub fn mean_log_likelihood(&self, ds: &LabeledDataset) -> Result<f64> {
        let mut total = 0.0;
        let mut n = 0usize;
        for i in 0..ds.len() {
            if let Some(z) = ds.side(i) {
                let lik = self.likelihood(ds.feature_row(i), z);
                total += lik[ds.label(i)].max(1e-300).ln();
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::invalid("no examples carry side information"));
        }
        Ok(total / n as f64)
    }
}

/// Bayes update: `p'(y) ∝ p(y) lik(y)`.
///
/// ```
/// use ecp_core::data::ProbVector;
/// use ecp_core::sideinfo::posterior_with_si;
///
/// let p = ProbVector::new(vec![0.5, 0.3, 0.1, 0.1]).unwrap();
/// // Side information restricts to the first two labels.
/// let post = posterior_with_si(&p, &[1.0, 1.0, 0.0, 0.0]).unwrap();
/// assert!((post.get(0) - 0.625).abs() < 1e-12);
/// assert_eq!(post.get(3), 0.0);
/// ```
pub fn posterior_with_si(p: &ProbVector, lik: &[f64]) -> Result<ProbVector> {
    if lik.len() != p.len() {
        return Err(Error::invalid("likelihood length must match label count"));
    }
    if lik.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::invalid("likelihood entries must be finite and nonnegative"));
    }
    let weighted: Vec<f64> = (0..p.len()).map(|y| p.get(y) * lik[y]).collect();
    let total: f64 = weighted.iter().sum();
    if total <= 0.0 {
        return Err(Error::invalid("side-information update has zero normalizer"));
    }
    ProbVector::new(weighted.iter().map(|v| v / total).collect())
}

/// Posterior update when `z` is observed, identity when it is not.
pub fn effective_probs(
    p: &ProbVector,
    side_model: &SideModel,
    x: &[f64],
    z: Option<usize>,
) -> Result<ProbVector> {
    match z {
        Some(z) => posterior_with_si(p, &side_model.likelihood(x, z)),
        None => Ok(p.clone()),
    }
}

/// Trains the linear side head to maximize `mean ln q(z | x, y)` by
/// full-batch gradient ascent on the examples carrying side information.
pub fn train_side_model(ds: &LabeledDataset, epochs: usize, lr: f64, seed: RngSeed) -> Result<SideModel> {
    let (dim, k, g) = (ds.dim(), ds.num_labels(), ds.num_groups());
    if g == 0 {
        return Err(Error::invalid("dataset has no side information"));
    }
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for i in 0..ds.len() {
        if let Some(z) = ds.side(i) {
            rows.extend_from_slice(ds.feature_row(i));
            let mut onehot = vec![0.0; k];
            onehot[ds.label(i)] = 1.0;
            rows.extend_from_slice(&onehot);
            targets.push(z);
        }
    }
    if targets.is_empty() {
        return Err(Error::invalid("no examples carry side information"));
    }
    let n = targets.len();
    let mut head = Model::init(crate::training::ModelSpec::linear(dim + k, g), seed)?;
    let mut velocity = vec![0.0; head.params.len()];
    for _ in 0..epochs {
        let tape = Tape::new();
        let params = tape.param(1, head.params.len(), head.params.clone());
        let fw = head.forward_tape(&tape, params, &rows, n);
        let loss = tape.mean(tape.neg(tape.gather(fw.log_probs, &targets)));
        let grads = tape.backward(loss)?;
        let grad = grads.get(params);
        for (i, &gv) in grad.iter().enumerate() {
            velocity[i] = 0.9 * velocity[i] + gv;
            head.params[i] -= lr * (gv + 0.9 * velocity[i]);
        }
    }
    Ok(SideModel::Linear { head, feature_dim: dim, num_labels: k })
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SiReport {
    pub coverage: f64,
    pub inefficiency: f64,
    pub accuracy: f64,
    pub availability: f64,
    pub mondrian: bool,
}

/// Split-conformal evaluation with side information observed for a random
/// `availability` fraction of both calibration and test examples, sampled
/// once per example from the shared seed. The Mondrian arm calibrates per
/// observed group and falls back to the global threshold for SI-missing
/// examples and unseen groups.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_si(
    ds_cal: &LabeledDataset,
    ds_test: &LabeledDataset,
    model: &Model,
    side_model: &SideModel,
    spec: &ScoreSpec,
    alpha: f64,
    availability: f64,
    seed: RngSeed,
    mondrian: bool,
) -> Result<SiReport> {
    if !(0.0..=1.0).contains(&availability) {
        return Err(Error::invalid(format!("availability {availability} outside [0, 1]")));
    }
    let observed = |stream: u64, i: usize, ds: &LabeledDataset| -> Option<usize> {
        let z = ds.side(i)?;
        if availability >= 1.0 {
            return Some(z);
        }
        if availability <= 0.0 {
            return None;
        }
        let u = seed.derive(stream).derive(i as u64).rng().uniform();
        (u < availability).then_some(z)
    };

    let cal_probs = model.probs_for(ds_cal);
    let mut cal_scores = Vec::with_capacity(ds_cal.len());
    let mut cal_groups: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for i in 0..ds_cal.len() {
        let z = observed(0, i, ds_cal);
        let p_eff = effective_probs(&cal_probs[i], side_model, ds_cal.feature_row(i), z)?;
        let s = score(spec, &p_eff, ds_cal.label(i), Some(seed.derive(0xca1).derive(i as u64)))?;
        cal_scores.push(s);
        if let Some(z) = z {
            cal_groups.entry(z).or_default().push(s);
        }
    }
    let global_cal = calibrate(&cal_scores, alpha)?;
    let group_cal = if mondrian {
        Some(mondrian_calibrate(&cal_groups, alpha)?.with_fallback(global_cal))
    } else {
        None
    };

    let test_probs = model.probs_for(ds_test);
    let mut sets = Vec::with_capacity(ds_test.len());
    let mut hits = 0usize;
    for i in 0..ds_test.len() {
        let z = observed(1, i, ds_test);
        let p_eff = effective_probs(&test_probs[i], side_model, ds_test.feature_row(i), z)?;
        if p_eff.argmax() == ds_test.label(i) {
            hits += 1;
        }
        let pseed = Some(seed.derive(0x7e57).derive(i as u64));
        let set = match (&group_cal, z) {
            (Some(gc), Some(z)) => mondrian_predict(gc, z, spec, &p_eff, pseed)?,
            _ => predict_set(&global_cal, spec, &p_eff, pseed),
        };
        sets.push(set);
    }
    Ok(SiReport {
        coverage: coverage(&sets, ds_test.labels())?,
        inefficiency: inefficiency(&sets)?,
        accuracy: hits as f64 / ds_test.len() as f64,
        availability,
        mondrian,
    })
}
