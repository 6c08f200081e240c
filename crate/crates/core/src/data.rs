//! Shared domain types, dataset splitting and the basic metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Seed for any randomized operation. Identical seed and inputs give
/// bit-identical outputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngSeed(pub u64);

impl RngSeed {
    pub fn rng(self) -> Rng {
        Rng::new(self.0)
    }

    /// Independent stream for a sub-task (example index, worker id, ...).
    pub fn derive(self, index: u64) -> RngSeed {
        RngSeed(crate::rng::derive_seed(self.0, index))
    }
}

/// Feature vectors with dense integer labels and optional group ids.
///
/// Labels live in `[0, num_labels)`; group ids, when present, live in
/// `[0, num_groups)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LabeledDataset {
    features: Vec<f64>,
    dim: usize,
    labels: Vec<usize>,
    side_info: Vec<Option<usize>>,
    num_labels: usize,
    num_groups: usize,
}

impl LabeledDataset {
    pub fn new(
        features: Vec<Vec<f64>>,
        labels: Vec<usize>,
        side_info: Option<Vec<Option<usize>>>,
        num_labels: usize,
        num_groups: usize,
    ) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(Error::invalid(format!(
                "{} feature rows but {} labels",
                features.len(),
                labels.len()
            )));
        }
        let dim = features.first().map_or(0, Vec::len);
        let mut flat = Vec::with_capacity(features.len() * dim);
        for row in &features {
            if row.len() != dim {
                return Err(Error::invalid("ragged feature rows"));
            }
            flat.extend_from_slice(row);
        }
        for &y in &labels {
            if y >= num_labels {
                return Err(Error::invalid(format!("label {y} out of range [0, {num_labels})")));
            }
        }
        let side_info = side_info.unwrap_or_else(|| vec![None; labels.len()]);
        if side_info.len() != labels.len() {
            return Err(Error::invalid("side_info length mismatch"));
        }
        for z in side_info.iter().flatten() {
            if num_groups == 0 || *z >= num_groups {
                return Err(Error::invalid(format!("group id {z} out of range [0, {num_groups})")));
            }
        }
        Ok(LabeledDataset {
            features: flat,
            dim,
            labels,
            side_info,
            num_labels,
            num_groups,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn num_groups(&self) -> usize {
        self.num_groups
    }

    pub fn feature_row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn side(&self, i: usize) -> Option<usize> {
        self.side_info[i]
    }

    /// Dataset restricted to the given example indices, in order.
    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        let mut side = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.feature_row(i));
            labels.push(self.labels[i]);
            side.push(self.side_info[i]);
        }
        LabeledDataset {
            features,
            dim: self.dim,
            labels,
            side_info: side,
            num_labels: self.num_labels,
            num_groups: self.num_groups,
        }
    }

    /// Replaces every group id (used when group structure is re-derived,
    /// e.g. device assignment). `num_groups` is updated to `groups`.
    pub fn with_side_info(&self, side: Vec<Option<usize>>, groups: usize) -> Result<LabeledDataset> {
        if side.len() != self.len() {
            return Err(Error::invalid("side_info length mismatch"));
        }
        let mut out = self.clone();
        for z in side.iter().flatten() {
            if *z >= groups {
                return Err(Error::invalid("group id out of range"));
            }
        }
        out.side_info = side;
        out.num_groups = groups;
        Ok(out)
    }
}

/// Per-example label probabilities: nonnegative, summing to 1 within 1e-9.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.is_empty() {
            return Err(Error::invalid("empty probability vector"));
        }
        if p.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::invalid("negative or non-finite probability"));
        }
        let total: f64 = p.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("probabilities sum to {total}, not 1")));
        }
        Ok(ProbVector(p))
    }

    pub fn uniform(k: usize) -> Self {
        ProbVector(vec![1.0 / k as f64; k])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, y: usize) -> f64 {
        self.0[y]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.0.iter().enumerate() {
            if v > self.0[best] {
                best = i;
            }
        }
        best
    }
}

/// Hard prediction set over `K` labels as a boolean membership mask.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionSet {
    member: Vec<bool>,
}

impl PredictionSet {
    pub fn new(member: Vec<bool>) -> Self {
        PredictionSet { member }
    }

    pub fn full(k: usize) -> Self {
        PredictionSet { member: vec![true; k] }
    }

    pub fn empty(k: usize) -> Self {
        PredictionSet { member: vec![false; k] }
    }

    pub fn num_labels(&self) -> usize {
        self.member.len()
    }

    pub fn contains(&self, y: usize) -> bool {
        self.member[y]
    }

    pub fn size(&self) -> usize {
        self.member.iter().filter(|&&m| m).count()
    }

    pub fn mask(&self) -> &[bool] {
        &self.member
    }
}

/// Splits a dataset into (calibration, rest) with `floor(n * cal_fraction)`
/// calibration examples, permuted by the seed.
pub fn split(ds: &LabeledDataset, cal_fraction: f64, seed: RngSeed) -> Result<(LabeledDataset, LabeledDataset)> {
    if ds.is_empty() {
        return Err(Error::invalid("cannot split an empty dataset"));
    }
    if !(cal_fraction > 0.0 && cal_fraction < 1.0) {
        return Err(Error::invalid(format!("cal_fraction {cal_fraction} outside (0, 1)")));
    }
    let n_cal = (ds.len() as f64 * cal_fraction).floor() as usize;
    if n_cal == 0 || n_cal == ds.len() {
        return Err(Error::invalid(format!(
            "split of {} examples at fraction {cal_fraction} leaves an empty part",
            ds.len()
        )));
    }
    let perm = seed.rng().shuffled_indices(ds.len());
    let cal = ds.subset(&perm[..n_cal]);
    let test = ds.subset(&perm[n_cal..]);
    Ok((cal, test))
}

/// Fraction of examples whose label falls inside its prediction set.
pub fn coverage(sets: &[PredictionSet], labels: &[usize]) -> Result<f64> {
    if sets.is_empty() {
        return Err(Error::invalid("coverage of empty input"));
    }
    if sets.len() != labels.len() {
        return Err(Error::invalid(format!("{} sets but {} labels", sets.len(), labels.len())));
    }
    let hits = sets.iter().zip(labels).filter(|(s, &y)| s.contains(y)).count();
    Ok(hits as f64 / sets.len() as f64)
}

/// Mean prediction-set size (the inefficiency metric; smaller is better).
pub fn inefficiency(sets: &[PredictionSet]) -> Result<f64> {
    if sets.is_empty() {
        return Err(Error::invalid("inefficiency of empty input"));
    }
    let total: usize = sets.iter().map(PredictionSet::size).sum();
    Ok(total as f64 / sets.len() as f64)
}

/// Binary entropy in nats, with the 0 ln 0 = 0 convention.
///
/// ```
/// use ecp_core::binary_entropy;
/// assert!((binary_entropy(0.5) - std::f64::consts::LN_2).abs() < 1e-12);
/// assert_eq!(binary_entropy(0.0), 0.0);
/// ```
pub fn binary_entropy(p: f64) -> f64 {
    assert!((0.0..=1.0).contains(&p), "binary_entropy argument {p} outside [0, 1]");
    let mut h = 0.0;
    if p > 0.0 {
        h -= p * p.ln();
    }
    if p < 1.0 {
        h -= (1.0 - p) * (1.0 - p).ln();
    }
    h
}
