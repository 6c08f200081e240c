//! Gaussian-mixture classification tasks.
//!
//! Serves as the exchangeable synthetic task whose posterior `P(Y|X)` is
//! available in closed form, so coverage and entropy claims can be checked
//! against an oracle instead of a fitted model.

use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, ProbVector, RngSeed};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianMixtureSpec {
    pub num_labels: usize,
    pub dim: usize,
    /// Per-label mean vectors, `num_labels` rows of length `dim`.
    pub means: Vec<Vec<f64>>,
    /// Per-label diagonal variances, same shape as `means`, all positive.
    pub diag_vars: Vec<Vec<f64>>,
    /// Label prior on the simplex.
    pub priors: Vec<f64>,
}

impl GaussianMixtureSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_labels == 0 || self.dim == 0 {
            return Err(Error::invalid("empty mixture spec"));
        }
        if self.means.len() != self.num_labels || self.diag_vars.len() != self.num_labels {
            return Err(Error::invalid("means/vars rows must match num_labels"));
        }
        for (m, v) in self.means.iter().zip(&self.diag_vars) {
            if m.len() != self.dim || v.len() != self.dim {
                return Err(Error::invalid("mean/var row length must match dim"));
            }
            if v.iter().any(|&x| x <= 0.0) {
                return Err(Error::invalid("variances must be positive"));
            }
        }
        if self.priors.len() != self.num_labels {
            return Err(Error::invalid("priors length must match num_labels"));
        }
        let total: f64 = self.priors.iter().sum();
        if (total - 1.0).abs() > 1e-9 || self.priors.iter().any(|&p| p < 0.0) {
            return Err(Error::invalid("priors must be a probability vector"));
        }
        Ok(())
    }

    /// Labels on a circle of the given radius with shared isotropic
    /// variance. With unit variance and a small radius the classes overlap
    /// heavily; the posterior is exactly softmax-linear in x.
    pub fn circle(num_labels: usize, radius: f64, var: f64) -> Self {
        let means = (0..num_labels)
            .map(|k| {
                let theta = 2.0 * std::f64::consts::PI * k as f64 / num_labels as f64;
                vec![radius * theta.cos(), radius * theta.sin()]
            })
            .collect();
        GaussianMixtureSpec {
            num_labels,
            dim: 2,
            means,
            diag_vars: vec![vec![var; 2]; num_labels],
            priors: vec![1.0 / num_labels as f64; num_labels],
        }
    }
}

/// Draws labels from the prior, then features from the label's Gaussian.
pub fn gen_gaussian_mixture(spec: &GaussianMixtureSpec, n: usize, seed: RngSeed) -> Result<LabeledDataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::invalid("n must be at least 1"));
    }
    let mut features = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        // Per-example stream so generation order never matters.
        let mut rng = seed.derive(i as u64).rng();
        let y = rng.categorical(&spec.priors);
        let row: Vec<f64> = (0..spec.dim)
            .map(|d| spec.means[y][d] + spec.diag_vars[y][d].sqrt() * rng.normal())
            .collect();
        features.push(row);
        labels.push(y);
    }
    LabeledDataset::new(features, labels, None, spec.num_labels, 0)
}

fn log_density_diag(x: &[f64], mean: &[f64], var: &[f64]) -> f64 {
    let mut ll = 0.0;
    for d in 0..x.len() {
        let z = x[d] - mean[d];
        ll -= 0.5 * (z * z / var[d] + var[d].ln() + (2.0 * std::f64::consts::PI).ln());
    }
    ll
}

/// Exact posterior `P(Y | X = x)` by Bayes rule, computed in log-space.
pub fn gmm_posterior(spec: &GaussianMixtureSpec, x: &[f64]) -> Result<ProbVector> {
    spec.validate()?;
    if x.len() != spec.dim {
        return Err(Error::invalid("feature dim mismatch"));
    }
    let mut logw: Vec<f64> = (0..spec.num_labels)
        .map(|k| {
            let prior = spec.priors[k].max(1e-300).ln();
            prior + log_density_diag(x, &spec.means[k], &spec.diag_vars[k])
        })
        .collect();
    let max = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for w in &mut logw {
        *w = (*w - max).exp();
        total += *w;
    }
    ProbVector::new(logw.iter().map(|w| w / total).collect())
}

/// Monte-Carlo estimate with its standard error.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct McEstimate {
    pub value: f64,
    pub std_error: f64,
    pub n: usize,
}

/// Estimates `H(Y|X)` as the mean posterior entropy over fresh draws.
pub fn gmm_cond_entropy_mc(spec: &GaussianMixtureSpec, n_mc: usize, seed: RngSeed) -> Result<McEstimate> {
    if n_mc == 0 {
        return Err(Error::invalid("n_mc must be at least 1"));
    }
    let ds = gen_gaussian_mixture(spec, n_mc, seed)?;
    let mut sum = 0.0;
    let mut sumsq = 0.0;
    for i in 0..n_mc {
        let post = gmm_posterior(spec, ds.feature_row(i))?;
        let h: f64 = post
            .as_slice()
            .iter()
            .map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 })
            .sum();
        sum += h;
        sumsq += h * h;
    }
    let mean = sum / n_mc as f64;
    let var = (sumsq / n_mc as f64 - mean * mean).max(0.0);
    Ok(McEstimate { value: mean, std_error: (var / n_mc as f64).sqrt(), n: n_mc })
}
