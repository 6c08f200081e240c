//! Differentiable sorting, soft quantiles and soft set membership.
//!
//! The sorter is a bitonic network over the next power of two, padded with
//! large sentinels that are routed hard (min/max) so no gradient or value
//! leaks from the padding. Each real comparator mixes its inputs through a
//! smooth CDF: `w = g(steepness * (a - b))`, low output
//! `(1 - w) a + w b`, high output `a + b - low`. As steepness grows the
//! network recovers the exact sort.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::conformal::quantile_rank;
use crate::error::{Error, Result};

/// Padding sentinel; assumed strictly larger than any real input.
const SENTINEL: f64 = 1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SwapKind {
    Logistic,
    Cauchy,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct RelaxConfig {
    /// Sorting sharpness; larger is closer to a hard sort.
    pub steepness: f64,
    /// Set-membership temperature; smaller is closer to a hard threshold.
    pub temperature: f64,
    pub swap_kind: SwapKind,
}

impl RelaxConfig {
    pub fn new(steepness: f64, temperature: f64) -> Self {
        RelaxConfig { steepness, temperature, swap_kind: SwapKind::Logistic }
    }

    pub fn with_swap(mut self, kind: SwapKind) -> Self {
        self.swap_kind = kind;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.steepness <= 0.0 || self.temperature <= 0.0 {
            return Err(Error::invalid("steepness and temperature must be positive"));
        }
        Ok(())
    }
}

/// Mixing weight `g(steepness * (a - b))` on the tape.
fn swap_weight(tape: &Tape, cfg: &RelaxConfig, a: Var, b: Var) -> Var {
    let t = tape.scale(tape.sub(a, b), cfg.steepness);
    match cfg.swap_kind {
        SwapKind::Logistic => tape.sigmoid(t),
        // Cauchy CDF: atan(t)/pi + 1/2.
        SwapKind::Cauchy => tape.add_const(tape.scale(tape.atan(t), std::f64::consts::FRAC_1_PI), 0.5),
    }
}

/// One lane of the network: a value plus a flag marking sentinel padding.
#[derive(Clone, Copy)]
struct Lane {
    var: Var,
    sentinel: bool,
}

/// Sorts ascending, differentiably. Returns a row vector of length m.
pub fn soft_sort(tape: &Tape, values: Var, cfg: &RelaxConfig) -> Result<Var> {
    cfg.validate()?;
    let m = values.len();
    if m == 0 {
        return Err(Error::invalid("soft_sort of empty input"));
    }
    if values.rows != 1 {
        return Err(Error::invalid("soft_sort expects a row vector"));
    }
    let padded = m.next_power_of_two();
    let mut lanes: Vec<Lane> = (0..m)
        .map(|i| Lane { var: tape.index(values, i), sentinel: false })
        .collect();
    for _ in m..padded {
        lanes.push(Lane { var: tape.scalar(SENTINEL), sentinel: true });
    }

    // Bitonic schedule: comparator (i, i^j) sorted ascending when the k-bit
    // of i is clear, descending otherwise.
    let mut k = 2;
    while k <= padded {
        let mut j = k / 2;
        while j >= 1 {
            for i in 0..padded {
                let l = i ^ j;
                if l > i {
                    let ascending = i & k == 0;
                    let (lo, hi) = comparator(tape, cfg, lanes[i], lanes[l]);
                    if ascending {
                        lanes[i] = lo;
                        lanes[l] = hi;
                    } else {
                        lanes[i] = hi;
                        lanes[l] = lo;
                    }
                }
            }
            j /= 2;
        }
        k *= 2;
    }

    // Ascending order leaves the sentinels in the top padded positions.
    debug_assert!(lanes[..m].iter().all(|l| !l.sentinel));
    let scalars: Vec<Var> = lanes[..m].iter().map(|l| l.var).collect();
    Ok(tape.concat(&scalars))
}

/// (low, high) outputs of one comparator. Sentinels are routed hard so the
/// padding carries no gradient and cannot contaminate real outputs.
fn comparator(tape: &Tape, cfg: &RelaxConfig, a: Lane, b: Lane) -> (Lane, Lane) {
    match (a.sentinel, b.sentinel) {
        (false, false) => {
            let w = swap_weight(tape, cfg, a.var, b.var);
            let lo = tape.add(a.var, tape.mul(w, tape.sub(b.var, a.var)));
            let hi = tape.sub(tape.add(a.var, b.var), lo);
            (Lane { var: lo, sentinel: false }, Lane { var: hi, sentinel: false })
        }
        (false, true) => (a, b),
        (true, false) => (b, a),
        (true, true) => (a, b),
    }
}

/// Differentiable conformal quantile: the soft-sorted value at rank
/// `ceil((m + 1) (1 - alpha))`. Errors when that rank exceeds m.
pub fn soft_quantile(tape: &Tape, scores: Var, alpha: f64, cfg: &RelaxConfig) -> Result<Var> {
    let m = scores.len();
    let rank = quantile_rank(m, alpha);
    if rank > m {
        return Err(Error::infeasible(format!(
            "quantile rank {rank} exceeds {m} scores (alpha {alpha} needs at least {} scores)",
            rank
        )));
    }
    let sorted = soft_sort(tape, scores, cfg)?;
    Ok(tape.index(sorted, rank - 1))
}

/// Soft set membership `sigmoid((q_hat - score) / T)`. Works elementwise
/// when `score` is a matrix of per-label scores.
pub fn soft_membership(tape: &Tape, q_hat: Var, score: Var, cfg: &RelaxConfig) -> Var {
    tape.sigmoid(tape.scale(tape.sub(q_hat, score), 1.0 / cfg.temperature))
}
