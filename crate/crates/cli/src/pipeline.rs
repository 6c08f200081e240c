//! Shared command plumbing: dataset/model loading, the plain hard-SCP
//! evaluation cell, bounded parallelism and atomic file output.

use std::path::Path;

use ecp_core::bounds::EvalBatch;
use ecp_core::conformal::{calibrate, predict_set, Calibration};
use ecp_core::data::{coverage, inefficiency, split, LabeledDataset, PredictionSet, RngSeed};
use ecp_core::datagen::{
    gen_discrete_task, gen_gaussian_mixture, grouped_task, load_columnar, load_csv, load_idx,
    GaussianMixtureSpec,
};
use ecp_core::scores::{score, ScoreSpec};
use ecp_core::training::{Model, ModelSpec};
use ecp_core::{Error, Result};

use crate::config::TaskSource;

pub fn load_dataset(source: &TaskSource, seed: u64) -> Result<LabeledDataset> {
    match source {
        TaskSource::Gmm { spec, n } => gen_gaussian_mixture(spec, *n, RngSeed(seed)),
        TaskSource::GmmCircle { num_labels, radius, var, n } => {
            gen_gaussian_mixture(&GaussianMixtureSpec::circle(*num_labels, *radius, *var), *n, RngSeed(seed))
        }
        TaskSource::Discrete { spec, n } => gen_discrete_task(spec, *n, RngSeed(seed)),
        TaskSource::Grouped { num_labels, num_groups, sharpness, n } => {
            gen_discrete_task(&grouped_task(*num_labels, *num_groups, *sharpness)?, *n, RngSeed(seed))
        }
        TaskSource::Columnar { path } => load_columnar(path),
        TaskSource::Csv { path, schema } => load_csv(path, schema),
        TaskSource::Idx { images, labels } => load_idx(images, labels),
    }
}

/// Loads a checkpoint, or falls back to the all-zero (uniform-output)
/// linear model when none is given.
pub fn load_model(path: Option<&Path>, ds: &LabeledDataset) -> Result<Model> {
    match path {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            let model: Model = serde_json::from_str(&text)?;
            if model.spec.input_dim() != ds.dim() || model.spec.num_labels() != ds.num_labels() {
                return Err(Error::invalid(format!(
                    "model is {}->{} but dataset is {}->{}",
                    model.spec.input_dim(),
                    model.spec.num_labels(),
                    ds.dim(),
                    ds.num_labels()
                )));
            }
            Ok(model)
        }
        None => Model::from_params(
            ModelSpec::linear(ds.dim(), ds.num_labels()),
            vec![0.0; ds.dim() * ds.num_labels() + ds.num_labels()],
        ),
    }
}

pub struct ScpCell {
    pub coverage: f64,
    pub inefficiency: f64,
    pub calibration: Calibration,
    pub batch: EvalBatch,
}

/// One hard split-conformal run: split, score, calibrate, predict.
pub fn scp_cell(
    ds: &LabeledDataset,
    model: &Model,
    spec: &ScoreSpec,
    alpha: f64,
    cal_fraction: f64,
    seed: u64,
) -> Result<ScpCell> {
    let seed = RngSeed(seed);
    let (cal, test) = split(ds, cal_fraction, seed)?;
    let cal_probs = model.probs_for(&cal);
    let cal_scores: Vec<f64> = (0..cal.len())
        .map(|i| score(spec, &cal_probs[i], cal.label(i), Some(seed.derive(i as u64))).unwrap())
        .collect();
    let calibration = calibrate(&cal_scores, alpha)?;
    let test_probs = model.probs_for(&test);
    let sets: Vec<PredictionSet> = (0..test.len())
        .map(|i| predict_set(&calibration, spec, &test_probs[i], Some(seed.derive(0x7e57_0000 + i as u64))))
        .collect();
    let cov = coverage(&sets, test.labels())?;
    let ineff = inefficiency(&sets)?;
    let batch = EvalBatch::new(test_probs, test.labels().to_vec(), sets)?;
    Ok(ScpCell { coverage: cov, inefficiency: ineff, calibration, batch })
}

/// Parallelism cap from ECP_THREADS (default 1).
pub fn thread_cap() -> usize {
    std::env::var("ECP_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

/// Maps `f` over the items with at most `threads` workers; results come
/// back in input order regardless of scheduling.
pub fn ordered_parallel_map<T, R, F>(items: Vec<T>, threads: usize, f: F) -> Vec<R>
where
    T: Send + Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    if threads <= 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut collected: Vec<(usize, R)> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..threads.min(items.len()))
            .map(|_| {
                scope.spawn(|| {
                    let mut out = Vec::new();
                    loop {
                        let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                        if i >= items.len() {
                            break;
                        }
                        out.push((i, f(&items[i])));
                    }
                    out
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    });
    collected.sort_by_key(|(i, _)| *i);
    collected.into_iter().map(|(_, r)| r).collect()
}

/// Writes bytes through a temp file and rename, so partial output never
/// lands under the final name.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// Mean and standard deviation across seeds ("mean±std" in tables).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn fmt_mean_std(values: &[f64]) -> String {
    let (mean, std) = mean_std(values);
    format!("{mean:.3}±{std:.3}")
}
