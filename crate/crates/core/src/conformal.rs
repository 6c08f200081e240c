//! Split-conformal calibration and hard prediction sets.
//!
//! Calibration takes the exact order statistic at rank
//! `r = ceil((n + 1) * (1 - alpha))` over the calibration scores, with an
//! appended infinity: if `r > n` the threshold is infinite and every
//! prediction set is the full label set. No interpolation is used; the exact
//! rank is what carries the finite-sample coverage guarantee.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{PredictionSet, ProbVector, RngSeed};
use crate::error::{Error, Result};
use crate::scores::{score_all, ScoreSpec};

/// Fitted conformal threshold with its provenance.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Calibration {
    #[serde(with = "serde_inf")]
    pub q_hat: f64,
    pub n: usize,
    pub alpha: f64,
}

/// Serializes an infinite threshold as the string "inf".
mod serde_inf {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(v),
            Raw::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Raw::Text(t) => Err(de::Error::custom(format!("unexpected threshold {t:?}"))),
        }
    }
}

/// The conformal quantile rank `ceil((n + 1) * (1 - alpha))`, guarded
/// against float round-off when the product is an exact integer.
pub fn quantile_rank(n: usize, alpha: f64) -> usize {
    let t = (n as f64 + 1.0) * (1.0 - alpha);
    let rounded = t.round();
    if (t - rounded).abs() < 1e-9 {
        rounded as usize
    } else {
        t.ceil() as usize
    }
}

/// Fits the conformal threshold for miscoverage level `alpha`.
///
/// An empty score list is accepted and yields an infinite threshold with
/// `n = 0`, which is the valid (fully uninformative) degenerate case.
///
/// ```
/// use ecp_core::conformal::calibrate;
///
/// let scores: Vec<f64> = (1..=9).map(f64::from).collect();
/// let cal = calibrate(&scores, 0.1).unwrap();
/// assert_eq!(cal.q_hat, 9.0); // rank ceil(10 * 0.9) = 9
///
/// // Too few scores for the requested level: the threshold is infinite.
/// let cal = calibrate(&scores[..5], 0.01).unwrap();
/// assert!(cal.q_hat.is_infinite());
/// ```
pub fn calibrate(cal_scores: &[f64], alpha: f64) -> Result<Calibration> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!("alpha {alpha} outside (0, 1)")));
    }
    if cal_scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid("non-finite calibration score"));
    }
    let n = cal_scores.len();
    let rank = quantile_rank(n, alpha);
    let q_hat = if rank > n {
        f64::INFINITY
    } else {
        let mut sorted = cal_scores.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        sorted[rank - 1]
    };
    Ok(Calibration { q_hat, n, alpha })
}

/// Hard set: every label whose score is at most the threshold. Empty sets
/// are allowed.
///
/// ```
/// use ecp_core::conformal::{calibrate, predict_set};
/// use ecp_core::data::ProbVector;
/// use ecp_core::scores::ScoreSpec;
///
/// let cal = calibrate(&[0.1, 0.2, 0.25, 0.3], 0.25).unwrap();
/// let p = ProbVector::new(vec![0.8, 0.15, 0.05]).unwrap();
/// let set = predict_set(&cal, &ScoreSpec::thr_prob(), &p, None);
/// assert!(set.contains(0) && !set.contains(2));
/// ```
pub fn predict_set(
    cal: &Calibration,
    spec: &ScoreSpec,
    p: &ProbVector,
    seed: Option<RngSeed>,
) -> PredictionSet {
    if cal.q_hat.is_infinite() {
        return PredictionSet::full(p.len());
    }
    let scores = score_all(spec, p, seed);
    PredictionSet::new(scores.iter().map(|&s| s <= cal.q_hat).collect())
}

/// Per-group thresholds for Mondrian (group-balanced) conformal prediction.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GroupCalibration {
    pub per_group: BTreeMap<usize, Calibration>,
    /// Used for examples whose group has no calibration entry.
    pub fallback: Option<Calibration>,
}

impl GroupCalibration {
    pub fn with_fallback(mut self, cal: Calibration) -> Self {
        self.fallback = Some(cal);
        self
    }
}

/// Runs `calibrate` independently inside every group.
pub fn mondrian_calibrate(
    cal_scores_by_group: &BTreeMap<usize, Vec<f64>>,
    alpha: f64,
) -> Result<GroupCalibration> {
    let mut per_group = BTreeMap::new();
    for (&g, scores) in cal_scores_by_group {
        per_group.insert(g, calibrate(scores, alpha)?);
    }
    Ok(GroupCalibration { per_group, fallback: None })
}

/// Predicts with the example's group threshold, falling back to the global
/// threshold for unseen groups.
pub fn mondrian_predict(
    gc: &GroupCalibration,
    group: usize,
    spec: &ScoreSpec,
    p: &ProbVector,
    seed: Option<RngSeed>,
) -> Result<PredictionSet> {
    let cal = gc
        .per_group
        .get(&group)
        .or(gc.fallback.as_ref())
        .ok_or_else(|| Error::invalid(format!("group {group} has no calibration and no fallback")))?;
    Ok(predict_set(cal, spec, p, seed))
}
