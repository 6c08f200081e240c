//! Upper bounds on the conditional entropy `H(Y|X)` evaluated from a
//! conformal run.
//!
//! Three bound families are provided, all in nats:
//!
//! - the DPI bound, which combines the empirical cross-entropy of a model
//!   with a binary-divergence term over the coverage event, corrected by an
//!   empirical Bernstein confidence width;
//! - the model-based Fano bound, which renormalizes the model inside and
//!   outside each prediction set;
//! - the simple Fano bound, its model-agnostic specialization, which only
//!   needs prediction-set sizes.
//!
//! Companion quantities: the exact binary-divergence form of the DPI bound
//! (always at most the cross-entropy), the set-size objective used by
//! conformal training (an upper bound looser than simple Fano), and the
//! list-decoding form.
//!
//! Every bound assumes the coverage sandwich
//! `1 - alpha <= P(Y in C(X)) <= 1 - alpha + 1/(n+1)` and `alpha in
//! (0, 0.5)`. Probabilities are clamped to `[1e-12, 1]` before every log;
//! clamp events are counted and surfaced in the report.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{binary_entropy, PredictionSet, ProbVector};
use crate::error::{Error, Result};

pub const CLAMP_EPS: f64 = 1e-12;

/// One bound evaluation with its additive term breakdown.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BoundReport {
    pub method: String,
    /// Bound value in nats; always the sum of `terms`.
    pub value: f64,
    pub terms: BTreeMap<String, f64>,
    pub alpha: f64,
    pub n: usize,
    /// Present only for methods that use the Bernstein correction.
    pub delta: Option<f64>,
    /// Number of probability clamps applied before logs.
    pub clip_events: usize,
}

impl BoundReport {
    fn new(method: &str, alpha: f64, n: usize) -> Self {
        BoundReport {
            method: method.to_string(),
            value: 0.0,
            terms: BTreeMap::new(),
            alpha,
            n,
            delta: None,
            clip_events: 0,
        }
    }

    fn push(&mut self, name: &str, value: f64) {
        self.terms.insert(name.to_string(), value);
        self.value += value;
    }
}

/// Evaluation sample: model probabilities, true label and hard set per
/// example. The sets must come from a calibration that did not see these
/// examples.
#[derive(Clone, Debug)]
pub struct EvalBatch {
    probs: Vec<ProbVector>,
    labels: Vec<usize>,
    sets: Vec<PredictionSet>,
}

impl EvalBatch {
    pub fn new(probs: Vec<ProbVector>, labels: Vec<usize>, sets: Vec<PredictionSet>) -> Result<Self> {
        if probs.len() != labels.len() || probs.len() != sets.len() {
            return Err(Error::invalid("probs, labels and sets must align"));
        }
        if probs.is_empty() {
            return Err(Error::invalid("empty evaluation batch"));
        }
        for ((p, &y), s) in probs.iter().zip(&labels).zip(&sets) {
            if y >= p.len() || s.num_labels() != p.len() {
                return Err(Error::invalid("label or set out of range"));
            }
        }
        Ok(EvalBatch { probs, labels, sets })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_labels(&self) -> usize {
        self.probs[0].len()
    }

    pub fn probs(&self) -> &[ProbVector] {
        &self.probs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sets(&self) -> &[PredictionSet] {
        &self.sets
    }

    pub fn covered(&self, i: usize) -> bool {
        self.sets[i].contains(self.labels[i])
    }

    /// Model mass inside the prediction set of example `i`.
    pub fn set_mass(&self, i: usize) -> f64 {
        let p = &self.probs[i];
        self.sets[i]
            .mask()
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(y, _)| p.get(y))
            .sum()
    }
}

fn clamped_ln(x: f64, clips: &mut usize) -> f64 {
    if x < CLAMP_EPS {
        *clips += 1;
        CLAMP_EPS.ln()
    } else if x > 1.0 {
        *clips += 1;
        0.0
    } else {
        x.ln()
    }
}

fn check_alpha_half(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 0.5) {
        return Err(Error::invalid(format!(
            "alpha {alpha} outside (0, 0.5); the binary-entropy step of each bound needs the miscoverage side below one half"
        )));
    }
    Ok(())
}

fn alpha_n(alpha: f64, n: usize) -> f64 {
    alpha - 1.0 / (n as f64 + 1.0)
}

/// Empirical Bernstein confidence width for the mean of `[0, 1]` samples:
/// `sqrt(2 V ln(2/delta) / n) + 7 ln(2/delta) / (3 (n - 1))`, `V` the
/// unbiased sample variance.
pub fn bernstein_delta(z: &[f64], delta: f64) -> Result<f64> {
    let n = z.len();
    if n < 2 {
        return Err(Error::invalid("Bernstein width needs at least 2 samples"));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::invalid(format!("delta {delta} outside (0, 1)")));
    }
    if z.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::invalid("Bernstein samples must lie in [0, 1]"));
    }
    let nf = n as f64;
    let mean = z.iter().sum::<f64>() / nf;
    let var = z.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / (nf - 1.0);
    let log_term = (2.0 / delta).ln();
    Ok((2.0 * var * log_term / nf).sqrt() + 7.0 * log_term / (3.0 * (nf - 1.0)))
}

/// DPI entropy bound with the Bernstein-corrected coverage masses.
///
/// Per example, `Z_i` is the model's total mass on the prediction set. The
/// upper-confidence masses are `min(1, mean(Z) + width)` and
/// `min(1, mean(1 - Z) + width)`; capping at 1 only tightens the bound
/// since true probabilities cannot exceed 1.
pub fn dpi_bound(batch: &EvalBatch, alpha: f64, delta: f64) -> Result<BoundReport> {
    check_alpha_half(alpha)?;
    let n = batch.len();
    if n < 2 {
        return Err(Error::invalid("DPI bound needs at least 2 evaluation examples"));
    }
    let z: Vec<f64> = (0..n).map(|i| batch.set_mass(i).clamp(0.0, 1.0)).collect();
    let width = bernstein_delta(&z, delta)?;
    let mean_in = z.iter().sum::<f64>() / n as f64;
    let q_in = (mean_in + width).min(1.0);
    let q_out = (1.0 - mean_in + width).min(1.0);

    let mut clips = 0usize;
    let ce = (0..n)
        .map(|i| -clamped_ln(batch.probs()[i].get(batch.labels()[i]), &mut clips))
        .sum::<f64>()
        / n as f64;

    let mut report = BoundReport::new("dpi", alpha, n);
    report.delta = Some(delta);
    report.push("binary_entropy", binary_entropy(alpha));
    report.push("coverage_mass", (1.0 - alpha) * clamped_ln(q_in, &mut clips));
    report.push("miscoverage_mass", alpha_n(alpha, n) * clamped_ln(q_out, &mut clips));
    report.push("cross_entropy", ce);
    report.clip_events = clips;
    Ok(report)
}

/// Exact binary-divergence form of the DPI bound:
/// `CE - d_KL(empirical coverage || mean set mass)`. Never exceeds the
/// empirical cross-entropy.
pub fn dpi_exact(batch: &EvalBatch) -> f64 {
    let n = batch.len();
    let mut clips = 0usize;
    let ce = (0..n)
        .map(|i| -clamped_ln(batch.probs()[i].get(batch.labels()[i]), &mut clips))
        .sum::<f64>()
        / n as f64;
    let p_cov = (0..n).filter(|&i| batch.covered(i)).count() as f64 / n as f64;
    let q_cov = (0..n).map(|i| batch.set_mass(i)).sum::<f64>() / n as f64;
    ce - binary_kl(p_cov, q_cov)
}

/// Binary KL divergence in nats with clamped logs.
pub fn binary_kl(p: f64, q: f64) -> f64 {
    let q = q.clamp(CLAMP_EPS, 1.0 - CLAMP_EPS);
    let mut d = 0.0;
    if p > 0.0 {
        d += p * (p / q).ln();
    }
    if p < 1.0 {
        d += (1.0 - p) * ((1.0 - p) / (1.0 - q)).ln();
    }
    d
}

/// Model-based Fano bound.
///
/// Partitions the batch by the coverage event. The covered term averages
/// `-ln` of the model renormalized inside the set; the uncovered term does
/// the same outside the set. Empty partitions contribute zero.
pub fn mb_fano_bound(batch: &EvalBatch, alpha: f64) -> Result<BoundReport> {
    check_alpha_half(alpha)?;
    let n = batch.len();
    let mut clips = 0usize;
    let (mut cov_sum, mut cov_n) = (0.0, 0usize);
    let (mut unc_sum, mut unc_n) = (0.0, 0usize);
    for i in 0..n {
        let p_true = batch.probs()[i].get(batch.labels()[i]);
        let mass_in = batch.set_mass(i);
        if batch.covered(i) {
            // -ln(q(y|x) / mass_in) with both factors clamped.
            cov_sum += clamped_ln(mass_in, &mut clips) - clamped_ln(p_true, &mut clips);
            cov_n += 1;
        } else {
            let mass_out = 1.0 - mass_in;
            unc_sum += clamped_ln(mass_out, &mut clips) - clamped_ln(p_true, &mut clips);
            unc_n += 1;
        }
    }
    let covered_term = if cov_n > 0 { cov_sum / cov_n as f64 } else { 0.0 };
    let uncovered_term = if unc_n > 0 { unc_sum / unc_n as f64 } else { 0.0 };

    let mut report = BoundReport::new("mb_fano", alpha, n);
    report.push("binary_entropy", binary_entropy(alpha));
    report.push("uncovered", alpha * uncovered_term);
    report.push("covered", (1.0 - alpha_n(alpha, n)) * covered_term);
    report.clip_events = clips;
    Ok(report)
}

/// Simple (model-agnostic) Fano bound from prediction-set sizes alone.
///
/// Covered examples always have a nonempty set and uncovered examples
/// always leave at least one label outside, so both logs are finite.
///
/// ```
/// use ecp_core::bounds::simple_fano_bound;
/// use ecp_core::data::PredictionSet;
///
/// // Three covered singletons at alpha 0.25 with n = 3: only the binary
/// // entropy term survives.
/// let sets = vec![PredictionSet::new(vec![true, false]); 3];
/// let report = simple_fano_bound(&sets, &[0, 0, 0], 0.25, 3, 2).unwrap();
/// assert!((report.value - 0.5623351446188083).abs() < 1e-12);
/// ```
pub fn simple_fano_bound(
    sets: &[PredictionSet],
    labels: &[usize],
    alpha: f64,
    n: usize,
    num_labels: usize,
) -> Result<BoundReport> {
    check_alpha_half(alpha)?;
    if sets.len() != labels.len() || sets.is_empty() {
        return Err(Error::invalid("sets and labels must align and be nonempty"));
    }
    let k = num_labels as f64;
    let (mut cov_sum, mut cov_n) = (0.0, 0usize);
    let (mut unc_sum, mut unc_n) = (0.0, 0usize);
    for (s, &y) in sets.iter().zip(labels) {
        let size = s.size() as f64;
        if s.contains(y) {
            cov_sum += size.ln();
            cov_n += 1;
        } else {
            unc_sum += (k - size).ln();
            unc_n += 1;
        }
    }
    let covered_term = if cov_n > 0 { cov_sum / cov_n as f64 } else { 0.0 };
    let uncovered_term = if unc_n > 0 { unc_sum / unc_n as f64 } else { 0.0 };

    let mut report = BoundReport::new("simple_fano", alpha, n);
    report.push("binary_entropy", binary_entropy(alpha));
    report.push("uncovered", alpha * uncovered_term);
    report.push("covered", (1.0 - alpha_n(alpha, n)) * covered_term);
    Ok(report)
}

/// Set-size objective bound: `lambda_alpha + (1 - alpha_n) ln(mean size)`,
/// with `lambda_alpha = h_b(alpha) + alpha ln K - (1 - alpha_n) ln(1-alpha)`.
/// This is the (looser) bound whose variable part is the conformal-training
/// size loss.
pub fn conftr_bound(mean_set_size: f64, alpha: f64, n: usize, num_labels: usize) -> Result<f64> {
    check_alpha_half(alpha)?;
    if mean_set_size <= 0.0 {
        return Err(Error::invalid(format!("mean set size {mean_set_size} must be positive")));
    }
    let one_minus_an = 1.0 - alpha_n(alpha, n);
    let lambda = binary_entropy(alpha) + alpha * (num_labels as f64).ln() - one_minus_an * (1.0 - alpha).ln();
    Ok(lambda + one_minus_an * mean_set_size.ln())
}

/// List-decoding Fano bound: `h_b(alpha) + alpha ln K + E[[ln |C|]^+]`.
/// Empty sets contribute zero through the positive part.
pub fn list_fano_bound(sets: &[PredictionSet], alpha: f64, num_labels: usize) -> Result<f64> {
    check_alpha_half(alpha)?;
    if sets.is_empty() {
        return Err(Error::invalid("empty set list"));
    }
    let mean_log: f64 = sets
        .iter()
        .map(|s| {
            let size = s.size() as f64;
            if size >= 1.0 {
                size.ln().max(0.0)
            } else {
                0.0
            }
        })
        .sum::<f64>()
        / sets.len() as f64;
    Ok(binary_entropy(alpha) + alpha * (num_labels as f64).ln() + mean_log)
}
