//! Nonconformity score functions.
//!
//! A score maps a probability vector and a candidate label to a real number;
//! larger scores mean more disagreement between input and label. The
//! adaptive variants (APS, RAPS) accumulate probability mass down the sorted
//! label order; RAPS adds a rank penalty `lambda_reg * max(0, rank - k_reg)`.
//!
//! An optional jitter adds one seeded uniform draw in `[0, jitter)` per
//! scored example (shared across all labels of that example). It exists to
//! break exact score collisions, e.g. on one-hot probability vectors, which
//! the coverage guarantee's "almost surely distinct" condition requires.

use serde::{Deserialize, Serialize};

use crate::data::{ProbVector, RngSeed};
use crate::error::{Error, Result};

const LOG_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ScoreKind {
    ThrProb,
    ThrLogprob,
    Aps,
    Raps,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreSpec {
    pub kind: ScoreKind,
    /// RAPS only: ranks up to `k_reg` are unpenalized.
    #[serde(default)]
    pub k_reg: usize,
    /// RAPS only: penalty per rank beyond `k_reg`.
    #[serde(default)]
    pub lambda_reg: f64,
    /// Tie-breaking noise amplitude; 0 disables jitter.
    #[serde(default)]
    pub jitter: f64,
}

impl ScoreSpec {
    pub fn new(kind: ScoreKind) -> Self {
        ScoreSpec { kind, k_reg: 0, lambda_reg: 0.0, jitter: 0.0 }
    }

    pub fn thr_prob() -> Self {
        Self::new(ScoreKind::ThrProb)
    }

    pub fn thr_logprob() -> Self {
        Self::new(ScoreKind::ThrLogprob)
    }

    pub fn aps() -> Self {
        Self::new(ScoreKind::Aps)
    }

    pub fn raps(k_reg: usize, lambda_reg: f64) -> Self {
        ScoreSpec { kind: ScoreKind::Raps, k_reg, lambda_reg, jitter: 0.0 }
    }

    pub fn with_jitter(mut self, jitter: f64) -> Self {
        self.jitter = jitter;
        self
    }

    fn jitter_draw(&self, seed: Option<RngSeed>) -> f64 {
        if self.jitter > 0.0 {
            let seed = seed.unwrap_or(RngSeed(0));
            seed.rng().uniform() * self.jitter
        } else {
            0.0
        }
    }
}

/// Labels ordered by descending probability, ties broken by label index.
fn descending_order(p: &ProbVector) -> Vec<usize> {
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| p.get(b).partial_cmp(&p.get(a)).unwrap().then(a.cmp(&b)));
    order
}

fn raw_scores(spec: &ScoreSpec, p: &ProbVector) -> Vec<f64> {
    match spec.kind {
        ScoreKind::ThrProb => (0..p.len()).map(|y| 1.0 - p.get(y)).collect(),
        ScoreKind::ThrLogprob => (0..p.len()).map(|y| -(p.get(y).max(LOG_EPS)).ln()).collect(),
        ScoreKind::Aps | ScoreKind::Raps => {
            let order = descending_order(p);
            let mut out = vec![0.0; p.len()];
            let mut cum = 0.0;
            for (rank0, &y) in order.iter().enumerate() {
                cum += p.get(y);
                out[y] = cum;
                if spec.kind == ScoreKind::Raps {
                    let rank = rank0 + 1;
                    out[y] += spec.lambda_reg * (rank.saturating_sub(spec.k_reg)) as f64;
                }
            }
            out
        }
    }
}

/// Score of one (probability vector, label) pair.
pub fn score(spec: &ScoreSpec, p: &ProbVector, y: usize, seed: Option<RngSeed>) -> Result<f64> {
    if y >= p.len() {
        return Err(Error::invalid(format!("label {y} out of range [0, {})", p.len())));
    }
    Ok(raw_scores(spec, p)[y] + spec.jitter_draw(seed))
}

/// Scores for every label of one example. The jitter draw is shared across
/// labels, so `score_all(..)[y] == score(.., y, ..)` for the same seed.
pub fn score_all(spec: &ScoreSpec, p: &ProbVector, seed: Option<RngSeed>) -> Vec<f64> {
    let jitter = spec.jitter_draw(seed);
    let mut out = raw_scores(spec, p);
    for s in &mut out {
        *s += jitter;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pv(v: &[f64]) -> ProbVector {
        ProbVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn thr_prob_basic() {
        let p = pv(&[0.9, 0.1]);
        assert!((score(&ScoreSpec::thr_prob(), &p, 0, None).unwrap() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn aps_cumulative_sums() {
        let p = pv(&[0.5, 0.3, 0.2]);
        let s = score_all(&ScoreSpec::aps(), &p, None);
        assert!((s[0] - 0.5).abs() < 1e-12);
        assert!((s[1] - 0.8).abs() < 1e-12);
        assert!((s[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn raps_rank_penalties() {
        let p = pv(&[0.5, 0.3, 0.2]);
        let s = score_all(&ScoreSpec::raps(1, 0.01), &p, None);
        assert!((s[0] - 0.5).abs() < 1e-12);
        assert!((s[1] - 0.81).abs() < 1e-12);
        assert!((s[2] - 1.02).abs() < 1e-12);
    }

    #[test]
    fn thr_prob_uniform() {
        let p = ProbVector::uniform(4);
        let s = score_all(&ScoreSpec::thr_prob(), &p, None);
        assert!(s.iter().all(|&v| (v - 0.75).abs() < 1e-12));
    }

    #[test]
    fn aps_max_is_total_mass() {
        let mut rng = crate::rng::Rng::new(17);
        for _ in 0..200 {
            let raw: Vec<f64> = (0..6).map(|_| rng.uniform() + 0.01).collect();
            let total: f64 = raw.iter().sum();
            let p = pv(&raw.iter().map(|v| v / total).collect::<Vec<_>>());
            let s = score_all(&ScoreSpec::aps(), &p, None);
            let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!((max - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn score_all_matches_score_per_label() {
        let mut rng = crate::rng::Rng::new(23);
        let specs = [
            ScoreSpec::thr_prob().with_jitter(0.01),
            ScoreSpec::thr_logprob(),
            ScoreSpec::aps().with_jitter(0.5),
            ScoreSpec::raps(2, 0.05),
        ];
        for trial in 0..100 {
            let raw: Vec<f64> = (0..5).map(|_| rng.uniform() + 0.01).collect();
            let total: f64 = raw.iter().sum();
            let p = pv(&raw.iter().map(|v| v / total).collect::<Vec<_>>());
            let seed = Some(RngSeed(trial));
            for spec in &specs {
                let all = score_all(spec, &p, seed);
                for y in 0..p.len() {
                    let one = score(spec, &p, y, seed).unwrap();
                    assert!((all[y] - one).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn label_out_of_range_errors() {
        let p = pv(&[0.6, 0.4]);
        assert!(score(&ScoreSpec::thr_prob(), &p, 2, None).is_err());
    }

    #[test]
    fn raps_degenerates_to_aps() {
        let p = pv(&[0.4, 0.35, 0.15, 0.1]);
        let aps = score_all(&ScoreSpec::aps(), &p, None);
        let zero_lambda = score_all(&ScoreSpec::raps(1, 0.0), &p, None);
        let big_kreg = score_all(&ScoreSpec::raps(4, 0.7), &p, None);
        for y in 0..4 {
            assert_eq!(aps[y], zero_lambda[y]);
            assert_eq!(aps[y], big_kreg[y]);
        }
    }

    #[test]
    fn spec_round_trips_as_json() {
        let spec = ScoreSpec::raps(1, 0.01).with_jitter(0.001);
        let text = serde_json::to_string(&spec).unwrap();
        assert!(text.contains("\"RAPS\""));
        let back: ScoreSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back.kind, ScoreKind::Raps);
        assert_eq!(back.k_reg, 1);
    }

    proptest! {
        // Higher-probability labels must score strictly lower for THR and APS.
        #[test]
        fn monotone_in_probability(raw in proptest::collection::vec(0.01f64..1.0, 4)) {
            let total: f64 = raw.iter().sum();
            let p = pv(&raw.iter().map(|v| v / total).collect::<Vec<_>>());
            for spec in [ScoreSpec::thr_prob(), ScoreSpec::thr_logprob(), ScoreSpec::aps()] {
                let s = score_all(&spec, &p, None);
                for a in 0..4 {
                    for b in 0..4 {
                        if p.get(a) > p.get(b) + 1e-12 {
                            prop_assert!(s[a] < s[b]);
                        }
                    }
                }
            }
        }
    }
}
