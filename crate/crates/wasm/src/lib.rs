//! Interactive browser demo over the core library.
//!
//! Three exported operations, each pure and seeded, returning JSON for the
//! static page in `www/` to render:
//!
//! - [`scp_playground`]: a 2-D Gaussian-mixture task with hard
//!   split-conformal sets per test point;
//! - [`bounds_curve`]: entropy upper bounds against the exact conditional
//!   entropy across an alpha grid on a discrete task;
//! - [`soft_sort_demo`]: the differentiable sorter and soft quantile next
//!   to their hard counterparts as steepness varies.
//!
//! Build: `cargo build -p ecp-wasm --target wasm32-unknown-unknown --release`
//! then `wasm-bindgen --target web` (see the README).

use serde::Serialize;
use wasm_bindgen::prelude::*;

use ecp_core::autodiff::Tape;
use ecp_core::bounds::{conftr_bound, dpi_bound, dpi_exact, mb_fano_bound, simple_fano_bound, EvalBatch};
use ecp_core::conformal::{calibrate, predict_set, quantile_rank};
use ecp_core::data::{coverage, inefficiency, split, PredictionSet, ProbVector, RngSeed};
use ecp_core::datagen::{
    discrete_exact_entropy, gen_discrete_task, gen_gaussian_mixture, gmm_posterior, grouped_task,
    DiscreteTaskSpec, GaussianMixtureSpec,
};
use ecp_core::diffsort::{soft_quantile, soft_sort, RelaxConfig, SwapKind};
use ecp_core::scores::{score, ScoreKind, ScoreSpec};

fn to_json<T: Serialize>(value: &T) -> Result<String, String> {
    serde_json::to_string(value).map_err(|e| e.to_string())
}

fn err(msg: impl std::fmt::Display) -> String {
    msg.to_string()
}

fn parse_score(kind: &str) -> Result<ScoreSpec, String> {
    let kind = match kind {
        "thr" => ScoreKind::ThrProb,
        "thr-log" => ScoreKind::ThrLogprob,
        "aps" => ScoreKind::Aps,
        "raps" => return Ok(ScoreSpec::raps(1, 0.05).with_jitter(1e-6)),
        other => return Err(err(format!("unknown score kind {other:?}"))),
    };
    Ok(ScoreSpec::new(kind).with_jitter(1e-6))
}

#[derive(Serialize)]
struct PlaygroundPoint {
    x: f64,
    y: f64,
    label: usize,
    set_size: usize,
    covered: bool,
}

#[derive(Serialize)]
struct PlaygroundOut {
    points: Vec<PlaygroundPoint>,
    means: Vec<[f64; 2]>,
    q_hat: f64,
    coverage: f64,
    inefficiency: f64,
    alpha: f64,
    n_cal: usize,
}

/// Split-conformal sets on a 3-class overlapping Gaussian mixture.
#[wasm_bindgen]
pub fn scp_playground(seed: u32, alpha: f64, score_kind: &str, n: u32, spread: f64) -> Result<String, String> {
    let spec = GaussianMixtureSpec::circle(3, spread.clamp(0.2, 4.0), 1.0);
    let score_spec = parse_score(score_kind)?;
    let n = (n as usize).clamp(40, 4000);
    let root = RngSeed(seed as u64);
    let ds = gen_gaussian_mixture(&spec, n, root).map_err(err)?;
    let (cal, test) = split(&ds, 0.5, root.derive(1)).map_err(err)?;

    let cal_scores: Vec<f64> = (0..cal.len())
        .map(|i| {
            let p = gmm_posterior(&spec, cal.feature_row(i)).unwrap();
            score(&score_spec, &p, cal.label(i), Some(root.derive(10 + i as u64))).unwrap()
        })
        .collect();
    let calibration = calibrate(&cal_scores, alpha).map_err(err)?;

    let mut points = Vec::with_capacity(test.len());
    let mut sets = Vec::with_capacity(test.len());
    for i in 0..test.len() {
        let row = test.feature_row(i);
        let p = gmm_posterior(&spec, row).map_err(err)?;
        let set = predict_set(&calibration, &score_spec, &p, Some(root.derive(90_000 + i as u64)));
        points.push(PlaygroundPoint {
            x: row[0],
            y: row[1],
            label: test.label(i),
            set_size: set.size(),
            covered: set.contains(test.label(i)),
        });
        sets.push(set);
    }
    let out = PlaygroundOut {
        means: spec.means.iter().map(|m| [m[0], m[1]]).collect(),
        q_hat: calibration.q_hat,
        coverage: coverage(&sets, test.labels()).map_err(err)?,
        inefficiency: inefficiency(&sets).map_err(err)?,
        alpha,
        n_cal: cal.len(),
        points,
    };
    to_json(&out)
}

#[derive(Serialize)]
struct BoundsCurveOut {
    alphas: Vec<f64>,
    dpi: Vec<f64>,
    mb_fano: Vec<f64>,
    simple_fano: Vec<f64>,
    conftr: Vec<f64>,
    dpi_exact: Vec<f64>,
    cross_entropy: f64,
    exact_entropy: f64,
    inefficiency: Vec<f64>,
}

/// Entropy upper bounds across an alpha grid on a grouped discrete task
/// whose exact conditional entropy is known.
#[wasm_bindgen]
pub fn bounds_curve(seed: u32, sharpness: f64, n: u32) -> Result<String, String> {
    let sharpness = sharpness.clamp(0.15, 0.95);
    let spec = grouped_task(8, 2, sharpness).map_err(err)?;
    let h = discrete_exact_entropy(&spec).map_err(err)?;
    let n = (n as usize).clamp(200, 20_000);
    let root = RngSeed(seed as u64);
    let score_spec = ScoreSpec::thr_prob().with_jitter(1e-6);

    let ds = gen_discrete_task(&spec, n, root).map_err(err)?;
    let (cal, test) = split(&ds, 0.5, root.derive(1)).map_err(err)?;
    let posterior = |row: &[f64]| -> ProbVector {
        let x = DiscreteTaskSpec::context_of(row);
        ProbVector::new(spec.cond_y_given_x[x].clone()).unwrap()
    };
    let cal_scores: Vec<f64> = (0..cal.len())
        .map(|i| score(&score_spec, &posterior(cal.feature_row(i)), cal.label(i), Some(root.derive(10 + i as u64))).unwrap())
        .collect();
    let test_probs: Vec<ProbVector> = (0..test.len()).map(|i| posterior(test.feature_row(i))).collect();

    let alphas: Vec<f64> = (1..=24).map(|i| 0.01 + 0.02 * (i as f64 - 1.0)).collect();
    let mut out = BoundsCurveOut {
        alphas: alphas.clone(),
        dpi: Vec::new(),
        mb_fano: Vec::new(),
        simple_fano: Vec::new(),
        conftr: Vec::new(),
        dpi_exact: Vec::new(),
        cross_entropy: 0.0,
        exact_entropy: h,
        inefficiency: Vec::new(),
    };
    for &alpha in &alphas {
        let calibration = calibrate(&cal_scores, alpha).map_err(err)?;
        let sets: Vec<PredictionSet> = test_probs
            .iter()
            .enumerate()
            .map(|(i, p)| predict_set(&calibration, &score_spec, p, Some(root.derive(90_000 + i as u64))))
            .collect();
        let batch = EvalBatch::new(test_probs.clone(), test.labels().to_vec(), sets).map_err(err)?;
        let n_eval = batch.len();
        out.dpi.push(dpi_bound(&batch, alpha, 0.05).map_err(err)?.value);
        out.mb_fano.push(mb_fano_bound(&batch, alpha).map_err(err)?.value);
        out.simple_fano
            .push(simple_fano_bound(batch.sets(), batch.labels(), alpha, n_eval, 8).map_err(err)?.value);
        let mean_size = inefficiency(batch.sets()).map_err(err)?.max(1e-9);
        out.conftr.push(conftr_bound(mean_size, alpha, n_eval, 8).map_err(err)?);
        out.dpi_exact.push(dpi_exact(&batch));
        out.inefficiency.push(mean_size);
        if out.cross_entropy == 0.0 {
            out.cross_entropy = (0..n_eval)
                .map(|i| -batch.probs()[i].get(batch.labels()[i]).max(1e-12).ln())
                .sum::<f64>()
                / n_eval as f64;
        }
    }
    to_json(&out)
}

#[derive(Serialize)]
struct SoftSortOut {
    input: Vec<f64>,
    soft_sorted: Vec<f64>,
    hard_sorted: Vec<f64>,
    soft_quantile: f64,
    hard_quantile: f64,
    rank: usize,
    max_abs_gap: f64,
}

/// Soft sorting network output against the exact sort.
#[wasm_bindgen]
pub fn soft_sort_demo(seed: u32, steepness: f64, swap: &str, m: u32, alpha: f64) -> Result<String, String> {
    let swap_kind = match swap {
        "logistic" => SwapKind::Logistic,
        "cauchy" => SwapKind::Cauchy,
        other => return Err(err(format!("unknown swap kind {other:?}"))),
    };
    let cfg = RelaxConfig::new(steepness.clamp(0.05, 1e6), 0.1).with_swap(swap_kind);
    let m = (m as usize).clamp(2, 64);
    let mut rng = RngSeed(seed as u64).rng();
    let input: Vec<f64> = (0..m).map(|_| rng.uniform_in(0.0, 1.0)).collect();

    let tape = Tape::new();
    let x = tape.constant(1, m, input.clone());
    let sorted = soft_sort(&tape, x, &cfg).map_err(err)?;
    let soft_sorted = tape.value(sorted);

    let mut hard_sorted = input.clone();
    hard_sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let rank = quantile_rank(m, alpha);
    let (soft_q, hard_q) = if rank <= m {
        let q = soft_quantile(&tape, x, alpha, &cfg).map_err(err)?;
        (tape.value_scalar(q), hard_sorted[rank - 1])
    } else {
        (f64::NAN, f64::NAN)
    };
    let max_abs_gap = soft_sorted
        .iter()
        .zip(&hard_sorted)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    to_json(&SoftSortOut {
        input,
        soft_sorted,
        hard_sorted,
        soft_quantile: soft_q,
        hard_quantile: hard_q,
        rank,
        max_abs_gap,
    })
}
