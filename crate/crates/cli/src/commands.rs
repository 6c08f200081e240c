//! Subcommand implementations.

use std::path::Path;

use serde::Serialize;

use ecp_core::bounds::{
    conftr_bound, dpi_bound, dpi_exact, list_fano_bound, mb_fano_bound, simple_fano_bound, BoundReport,
    EvalBatch,
};
use ecp_core::conformal::{calibrate, predict_set};
use ecp_core::data::{inefficiency, split, LabeledDataset, PredictionSet, ProbVector, RngSeed};
use ecp_core::datagen::save_columnar;
use ecp_core::federated::{
    dirichlet_proportions, fedavg_round, partition_by_proportions, personalize, FederatedConfig,
    GlobalModel,
};
use ecp_core::scores::{score, ScoreSpec};
use ecp_core::setsize::{expected_logsize_lb_mb, expected_logsize_lb_simple, kmeans, max_setsize_lb, quantize};
use ecp_core::sideinfo::{evaluate_si, train_side_model, SideModel, SiReport};
use ecp_core::training::{train, Model, TrainConfig};
use ecp_core::{Error, Result};

use crate::config::*;
use crate::pipeline::*;

pub fn gen_data(cfg: &GenDataConfig) -> Result<()> {
    let ds = load_dataset(&cfg.task, cfg.seed)?;
    save_columnar(&ds, &cfg.out)?;
    #[derive(Serialize)]
    struct Meta {
        n: usize,
        dim: usize,
        num_labels: usize,
        num_groups: usize,
        seed: u64,
    }
    let meta = Meta {
        n: ds.len(),
        dim: ds.dim(),
        num_labels: ds.num_labels(),
        num_groups: ds.num_groups(),
        seed: cfg.seed,
    };
    write_json(&cfg.out.with_extension("meta.json"), &meta)?;
    println!("wrote {} ({} examples, dim {})", cfg.out.display(), ds.len(), ds.dim());
    Ok(())
}

pub fn run_calibrate(cfg: &CalibrateConfig) -> Result<()> {
    let ds = load_dataset(&cfg.dataset, cfg.seed)?;
    let model = load_model(cfg.model.as_deref(), &ds)?;
    let cell = scp_cell(&ds, &model, &cfg.score, cfg.alpha, cfg.cal_fraction, cfg.seed)?;
    write_json(&cfg.out, &cell.calibration)?;
    println!(
        "q_hat {} (n {}, alpha {})",
        if cell.calibration.q_hat.is_finite() {
            format!("{:.6}", cell.calibration.q_hat)
        } else {
            "inf".to_string()
        },
        cell.calibration.n,
        cell.calibration.alpha
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalRow {
    alpha: f64,
    seed: u64,
    coverage: f64,
    inefficiency: f64,
}

#[derive(Serialize)]
struct EvalSummary {
    alpha: f64,
    coverage_mean: f64,
    coverage_std: f64,
    inefficiency_mean: f64,
    inefficiency_std: f64,
    coverage: String,
    inefficiency: String,
}

pub fn run_evaluate(cfg: &EvaluateConfig) -> Result<()> {
    let ds = load_dataset(&cfg.dataset, cfg.seeds.first().copied().unwrap_or(0))?;
    let model = load_model(cfg.model.as_deref(), &ds)?;
    let cells: Vec<(f64, u64)> = cfg
        .alphas
        .iter()
        .flat_map(|&a| cfg.seeds.iter().map(move |&s| (a, s)))
        .collect();
    let rows: Vec<Result<EvalRow>> = ordered_parallel_map(cells, thread_cap(), |&(alpha, seed)| {
        let cell = scp_cell(&ds, &model, &cfg.score, alpha, cfg.cal_fraction, seed)?;
        Ok(EvalRow { alpha, seed, coverage: cell.coverage, inefficiency: cell.inefficiency })
    });
    let rows: Vec<EvalRow> = rows.into_iter().collect::<Result<_>>()?;

    let mut jsonl = String::new();
    for row in &rows {
        jsonl.push_str(&serde_json::to_string(row)?);
        jsonl.push('\n');
    }
    write_atomic(&cfg.out_dir.join("metrics.jsonl"), jsonl.as_bytes())?;

    let mut summaries = Vec::new();
    let mut csv = String::from("alpha,coverage,inefficiency\n");
    for &alpha in &cfg.alphas {
        let covs: Vec<f64> = rows.iter().filter(|r| r.alpha == alpha).map(|r| r.coverage).collect();
        let ineffs: Vec<f64> = rows.iter().filter(|r| r.alpha == alpha).map(|r| r.inefficiency).collect();
        let (cm, cs) = mean_std(&covs);
        let (im, is) = mean_std(&ineffs);
        csv.push_str(&format!("{alpha},{},{}\n", fmt_mean_std(&covs), fmt_mean_std(&ineffs)));
        summaries.push(EvalSummary {
            alpha,
            coverage_mean: cm,
            coverage_std: cs,
            inefficiency_mean: im,
            inefficiency_std: is,
            coverage: fmt_mean_std(&covs),
            inefficiency: fmt_mean_std(&ineffs),
        });
    }
    write_atomic(&cfg.out_dir.join("table.csv"), csv.as_bytes())?;
    write_json(&cfg.out_dir.join("report.json"), &summaries)?;
    for s in &summaries {
        println!("alpha {}: coverage {}, inefficiency {}", s.alpha, s.coverage, s.inefficiency);
    }
    Ok(())
}

#[derive(Serialize)]
struct BoundsOut {
    alpha: f64,
    coverage: f64,
    inefficiency: f64,
    cross_entropy: f64,
    dpi: BoundReport,
    mb_fano: BoundReport,
    simple_fano: BoundReport,
    conftr: f64,
    list_fano: f64,
    dpi_exact: f64,
}

/// `bits` converts the printed values to bits; emitted files are always
/// in nats.
pub fn run_bounds(cfg: &BoundsConfig, bits: bool) -> Result<()> {
    for &alpha in &cfg.alphas {
        if !(alpha > 0.0 && alpha < 0.5) {
            return Err(Error::invalid(format!(
                "alpha {alpha} outside (0, 0.5): the bounds replace the coverage entropy term by \
                 h_b(alpha), which requires the miscoverage side of the binary entropy below one half"
            )));
        }
    }
    let ds = load_dataset(&cfg.dataset, cfg.seed)?;
    let model = load_model(cfg.model.as_deref(), &ds)?;
    let outs: Vec<Result<BoundsOut>> = ordered_parallel_map(cfg.alphas.clone(), thread_cap(), |&alpha| {
        let cell = scp_cell(&ds, &model, &cfg.score, alpha, cfg.cal_fraction, cfg.seed)?;
        let batch = &cell.batch;
        let n = batch.len();
        let k = ds.num_labels();
        let ce = (0..n)
            .map(|i| -batch.probs()[i].get(batch.labels()[i]).max(1e-12).ln())
            .sum::<f64>()
            / n as f64;
        Ok(BoundsOut {
            alpha,
            coverage: cell.coverage,
            inefficiency: cell.inefficiency,
            cross_entropy: ce,
            dpi: dpi_bound(batch, alpha, cfg.delta)?,
            mb_fano: mb_fano_bound(batch, alpha)?,
            simple_fano: simple_fano_bound(batch.sets(), batch.labels(), alpha, n, k)?,
            conftr: conftr_bound(cell.inefficiency.max(1e-12), alpha, n, k)?,
            list_fano: list_fano_bound(batch.sets(), alpha, k)?,
            dpi_exact: dpi_exact(batch),
        })
    });
    let outs: Vec<BoundsOut> = outs.into_iter().collect::<Result<_>>()?;
    write_json(&cfg.out_dir.join("report.json"), &outs)?;
    let mut csv = String::from("alpha,coverage,inefficiency,cross_entropy,dpi,mb_fano,simple_fano,conftr,list_fano,dpi_exact\n");
    for o in &outs {
        csv.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            o.alpha, o.coverage, o.inefficiency, o.cross_entropy, o.dpi.value, o.mb_fano.value,
            o.simple_fano.value, o.conftr, o.list_fano, o.dpi_exact
        ));
        let scale = if bits { std::f64::consts::LOG2_E } else { 1.0 };
        let unit = if bits { "bits" } else { "nats" };
        println!(
            "alpha {}: dpi {:.4} | mb_fano {:.4} | simple {:.4} | conftr {:.4} | list {:.4} | dpi_exact {:.4} (ce {:.4}) [{unit}]",
            o.alpha,
            o.dpi.value * scale,
            o.mb_fano.value * scale,
            o.simple_fano.value * scale,
            o.conftr * scale,
            o.list_fano * scale,
            o.dpi_exact * scale,
            o.cross_entropy * scale
        );
    }
    write_atomic(&cfg.out_dir.join("table.csv"), csv.as_bytes())?;
    Ok(())
}

#[derive(Serialize)]
struct SetsizeOut {
    alpha: f64,
    h_lb: f64,
    simple_raw: f64,
    simple_clamped: f64,
    mb_raw: f64,
    mb_clamped: f64,
    max_logsize_raw: f64,
    empirical_logsize: f64,
    empirical_inefficiency: f64,
}

/// Quantized set-size pipeline: cluster the model's log-probability
/// vectors on the calibration pool, lower-bound the conditional entropy
/// from joint (label, cluster) counts, and compare the set-size lower
/// bounds against the empirical quantized-CP run. The calibration pool is
/// split in two equal halves: one fits the threshold, the other evaluates
/// the model-based terms.
pub fn run_setsize(cfg: &SetsizeConfig) -> Result<()> {
    let ds = load_dataset(&cfg.dataset, cfg.seed)?;
    let model = load_model(cfg.model.as_deref(), &ds)?;
    let seed = RngSeed(cfg.seed);
    let (cal_pool, test_pool) = split(&ds, cfg.cal_fraction, seed)?;
    let k_labels = ds.num_labels();

    let log_vec = |p: &ProbVector| -> Vec<f64> {
        p.as_slice().iter().map(|&v| v.max(1e-12).ln()).collect()
    };
    let cal_vectors: Vec<Vec<f64>> = model.probs_for(&cal_pool).iter().map(&log_vec).collect();
    let quantizer = kmeans(&cal_vectors, cfg.k, cfg.kmeans_iters, seed.derive(1))?;
    let quantized_probs = |pool: &LabeledDataset| -> Vec<ProbVector> {
        let vectors: Vec<Vec<f64>> = model.probs_for(pool).iter().map(&log_vec).collect();
        quantize(&quantizer, &vectors)
            .iter()
            .map(|&c| {
                let centroid = &quantizer.centroids[c];
                let max = centroid.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = centroid.iter().map(|v| (v - max).exp()).collect();
                let total: f64 = exps.iter().sum();
                ProbVector::new(exps.iter().map(|e| e / total).collect()).unwrap()
            })
            .collect()
    };

    // Conditional-entropy lower bound from the quantized calibration pool.
    let cal_ids = quantize(&quantizer, &cal_vectors);
    let mut joint = vec![vec![0usize; cfg.k]; k_labels];
    for (i, &c) in cal_ids.iter().enumerate() {
        joint[cal_pool.label(i)][c] += 1;
    }
    let h_lb = ecp_core::setsize::cond_entropy_lb(&joint, cfg.k)?;

    // Halves of the calibration pool: thresholds vs bound terms.
    let (cal_a, cal_b) = split(&cal_pool, 0.5, seed.derive(2))?;
    let cal_a_probs = quantized_probs(&cal_a);
    let cal_b_probs = quantized_probs(&cal_b);
    let test_probs = quantized_probs(&test_pool);

    let mut outs = Vec::new();
    for &alpha in &cfg.alphas {
        let cal_scores: Vec<f64> = (0..cal_a.len())
            .map(|i| score(&cfg.score, &cal_a_probs[i], cal_a.label(i), Some(seed.derive(10 + i as u64))).unwrap())
            .collect();
        let calibration = calibrate(&cal_scores, alpha)?;
        let b_sets: Vec<PredictionSet> = (0..cal_b.len())
            .map(|i| predict_set(&calibration, &cfg.score, &cal_b_probs[i], Some(seed.derive(0xb0 + i as u64))))
            .collect();
        let batch = EvalBatch::new(cal_b_probs.clone(), cal_b.labels().to_vec(), b_sets)?;

        let test_sets: Vec<PredictionSet> = (0..test_pool.len())
            .map(|i| predict_set(&calibration, &cfg.score, &test_probs[i], Some(seed.derive(0x7e + i as u64))))
            .collect();
        let emp_logsize = test_sets
            .iter()
            .map(|s| if s.size() >= 1 { (s.size() as f64).ln().max(0.0) } else { 0.0 })
            .sum::<f64>()
            / test_sets.len() as f64;

        let n_cal = cal_a.len();
        let simple = expected_logsize_lb_simple(h_lb, alpha, k_labels)?;
        let mb = expected_logsize_lb_mb(h_lb, alpha, n_cal, k_labels, &batch)?;
        let max_lb = max_setsize_lb(h_lb, alpha, n_cal, k_labels)?;
        outs.push(SetsizeOut {
            alpha,
            h_lb,
            simple_raw: simple.raw,
            simple_clamped: simple.clamped,
            mb_raw: mb.raw,
            mb_clamped: mb.clamped,
            max_logsize_raw: max_lb.raw,
            empirical_logsize: emp_logsize,
            empirical_inefficiency: inefficiency(&test_sets)?,
        });
        println!(
            "alpha {alpha}: h_lb {h_lb:.4}, simple {:.4}, mb {:.4}, empirical {:.4}",
            simple.raw, mb.raw, emp_logsize
        );
    }
    write_json(&cfg.out_dir.join("report.json"), &outs)?;
    let mut csv = String::from("alpha,h_lb,simple,mb,empirical_logsize\n");
    for o in &outs {
        csv.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6}\n",
            o.alpha, o.h_lb, o.simple_raw, o.mb_raw, o.empirical_logsize
        ));
    }
    write_atomic(&cfg.out_dir.join("table.csv"), csv.as_bytes())?;
    Ok(())
}

pub fn run_train(cfg: &TrainCommandConfig) -> Result<()> {
    let ds = load_dataset(&cfg.dataset, cfg.seed)?;
    let train_cfg = TrainConfig {
        loss: cfg.loss,
        alpha_train: cfg.alpha_train,
        batch_size: cfg.batch_size,
        lr: cfg.lr,
        momentum: cfg.momentum,
        epochs: cfg.epochs,
        relax: cfg.relax,
        class_weight: cfg.class_weight,
        delta: cfg.delta,
        seed: RngSeed(cfg.seed),
        holdout_fraction: 0.2,
    };
    let mut model = Model::init(cfg.model_spec.clone(), RngSeed(cfg.seed).derive(0x1217))?;
    let metrics = train(&mut model, &ds, &train_cfg)?;

    write_json(&cfg.out_dir.join("model.json"), &model)?;
    let mut jsonl = String::new();
    for m in &metrics {
        jsonl.push_str(&serde_json::to_string(m)?);
        jsonl.push('\n');
    }
    write_atomic(&cfg.out_dir.join("metrics.jsonl"), jsonl.as_bytes())?;

    #[derive(Serialize)]
    struct TrainReport {
        epochs: usize,
        final_loss: f64,
        holdout_coverage: f64,
        holdout_inefficiency: f64,
    }
    if let Some(last) = metrics.last() {
        write_json(
            &cfg.out_dir.join("report.json"),
            &TrainReport {
                epochs: metrics.len(),
                final_loss: last.mean_loss,
                holdout_coverage: last.holdout_coverage,
                holdout_inefficiency: last.holdout_inefficiency,
            },
        )?;
        println!(
            "trained {} epochs: loss {:.4}, holdout coverage {:.4}, holdout inefficiency {:.3}",
            metrics.len(),
            last.mean_loss,
            last.holdout_coverage,
            last.holdout_inefficiency
        );
    }
    Ok(())
}

pub fn run_sideinfo(cfg: &SideInfoConfig) -> Result<()> {
    let ds = load_dataset(&cfg.dataset, cfg.seeds.first().copied().unwrap_or(0))?;
    if ds.num_groups() == 0 {
        return Err(Error::invalid("side-information evaluation needs a dataset with group ids"));
    }
    let model = load_model(cfg.model.as_deref(), &ds)?;
    let side = match &cfg.side_model {
        SideModelKind::Table => SideModel::table_from_counts(&ds)?,
        SideModelKind::Linear { epochs, lr } => train_side_model(&ds, *epochs, *lr, RngSeed(7))?,
    };

    let cells: Vec<(f64, u64)> = cfg
        .availabilities
        .iter()
        .flat_map(|&a| cfg.seeds.iter().map(move |&s| (a, s)))
        .collect();
    let reports: Vec<Result<SiReport>> = ordered_parallel_map(cells.clone(), thread_cap(), |&(avail, seed)| {
        let (cal, test) = split(&ds, cfg.cal_fraction, RngSeed(seed))?;
        evaluate_si(&cal, &test, &model, &side, &cfg.score, cfg.alpha, avail, RngSeed(seed).derive(1), cfg.mondrian)
    });
    let reports: Vec<SiReport> = reports.into_iter().collect::<Result<_>>()?;
    write_json(&cfg.out_dir.join("report.json"), &reports)?;

    let mut csv = String::from("availability,coverage,inefficiency,accuracy\n");
    for &avail in &cfg.availabilities {
        let rows: Vec<&SiReport> = reports.iter().filter(|r| r.availability == avail).collect();
        let covs: Vec<f64> = rows.iter().map(|r| r.coverage).collect();
        let ineffs: Vec<f64> = rows.iter().map(|r| r.inefficiency).collect();
        let accs: Vec<f64> = rows.iter().map(|r| r.accuracy).collect();
        csv.push_str(&format!(
            "{avail},{},{},{}\n",
            fmt_mean_std(&covs),
            fmt_mean_std(&ineffs),
            fmt_mean_std(&accs)
        ));
        println!(
            "availability {avail}: coverage {}, inefficiency {}, accuracy {}",
            fmt_mean_std(&covs),
            fmt_mean_std(&ineffs),
            fmt_mean_std(&accs)
        );
    }
    write_atomic(&cfg.out_dir.join("table.csv"), csv.as_bytes())?;
    Ok(())
}

#[derive(Serialize)]
struct FedRoundMetrics {
    round: usize,
    coverage: f64,
    inefficiency: f64,
    coverage_si: f64,
    inefficiency_si: f64,
}

pub fn run_fed_train(cfg: &FedTrainConfig) -> Result<()> {
    let seed = RngSeed(cfg.seed);
    let train_pool = load_dataset(&cfg.dataset, cfg.seed)?;
    let heldout_pool = match &cfg.dataset {
        TaskSource::Columnar { .. } | TaskSource::Csv { .. } | TaskSource::Idx { .. } => {
            return Err(Error::invalid(
                "fed-train generates matched held-out data; use a synthetic task source",
            ));
        }
        source => {
            let mut with_n = source.clone();
            set_source_n(&mut with_n, cfg.heldout_n);
            load_dataset(&with_n, cfg.seed ^ 0x8e1d)?
        }
    };

    let k = train_pool.num_labels();
    let proportions = dirichlet_proportions(k, cfg.devices, cfg.dirichlet_conc, seed.derive(1));
    let train_devices = partition_by_proportions(&train_pool, &proportions, seed.derive(2))?;
    let held_devices = partition_by_proportions(&heldout_pool, &proportions, seed.derive(3))?;

    // Held-out pool tagged with the device id as side information.
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut side = Vec::new();
    for (dev, d) in held_devices.iter().enumerate() {
        for i in 0..d.len() {
            features.push(d.feature_row(i).to_vec());
            labels.push(d.label(i));
            side.push(Some(dev));
        }
    }
    let held = LabeledDataset::new(features, labels, Some(side), k, cfg.devices)?;

    let fed_cfg = FederatedConfig {
        m: cfg.devices,
        dirichlet_conc: cfg.dirichlet_conc,
        rounds: cfg.rounds,
        local_epochs: cfg.local_epochs,
        base: TrainConfig {
            loss: cfg.loss,
            alpha_train: cfg.alpha_train,
            batch_size: cfg.batch_size,
            lr: cfg.lr,
            momentum: cfg.momentum,
            epochs: 1,
            relax: cfg.relax,
            class_weight: cfg.class_weight,
            delta: cfg.delta,
            seed: seed.derive(4),
            holdout_fraction: 0.2,
        },
        seed: seed.derive(5),
    };
    fed_cfg.validate()?;
    let mut global = GlobalModel::init(cfg.model_spec.clone(), cfg.devices, seed.derive(6))?;

    let score_spec = ScoreSpec::thr_prob().with_jitter(1e-6);
    let eval_global = |global: &GlobalModel, round: usize| -> Result<FedRoundMetrics> {
        let side_model = SideModel::Linear {
            head: global.head_z_xy.clone(),
            feature_dim: held.dim(),
            num_labels: k,
        };
        let (cal, test) = split(&held, 0.5, seed.derive(0xE0 + round as u64))?;
        let plain = evaluate_si(&cal, &test, &global.trunk, &side_model, &score_spec, cfg.alpha_eval, 0.0, seed.derive(7), false)?;
        let with_si = evaluate_si(&cal, &test, &global.trunk, &side_model, &score_spec, cfg.alpha_eval, 1.0, seed.derive(7), false)?;
        Ok(FedRoundMetrics {
            round,
            coverage: plain.coverage,
            inefficiency: plain.inefficiency,
            coverage_si: with_si.coverage,
            inefficiency_si: with_si.inefficiency,
        })
    };

    let mut jsonl = String::new();
    for round in 0..cfg.rounds {
        global = fedavg_round(&global, &train_devices, &fed_cfg, round)?;
        let metrics = eval_global(&global, round)?;
        println!(
            "round {:>3}: coverage {:.4} inefficiency {:.3} | with device-ID SI: coverage {:.4} inefficiency {:.3}",
            round, metrics.coverage, metrics.inefficiency, metrics.coverage_si, metrics.inefficiency_si
        );
        jsonl.push_str(&serde_json::to_string(&metrics)?);
        jsonl.push('\n');
    }
    write_atomic(&cfg.out_dir.join("metrics.jsonl"), jsonl.as_bytes())?;

    // Personalized per-device report on the held-out devices.
    let personalize_lr = cfg.personalize_lr.unwrap_or(cfg.lr * 0.1);
    let mut per_cov = Vec::new();
    let mut per_ineff = Vec::new();
    for (dev, local_train) in train_devices.iter().enumerate() {
        if local_train.len() < 8 || held_devices[dev].len() < 8 {
            continue;
        }
        let tuned = personalize(&global, local_train, cfg.personalize_epochs, personalize_lr, seed.derive(0xFE + dev as u64))?;
        let cell = scp_cell(&held_devices[dev], &tuned, &score_spec, cfg.alpha_eval, 0.5, cfg.seed ^ dev as u64)?;
        per_cov.push(cell.coverage);
        per_ineff.push(cell.inefficiency);
    }

    #[derive(Serialize)]
    struct FedReport {
        rounds: usize,
        final_global: FedRoundMetrics,
        model: GlobalModel,
        personalized_coverage: String,
        personalized_inefficiency: String,
    }
    let report = FedReport {
        rounds: cfg.rounds,
        final_global: eval_global(&global, cfg.rounds)?,
        model: global,
        personalized_coverage: fmt_mean_std(&per_cov),
        personalized_inefficiency: fmt_mean_std(&per_ineff),
    };
    println!(
        "personalized devices: coverage {}, inefficiency {}",
        report.personalized_coverage, report.personalized_inefficiency
    );
    write_json(&cfg.out_dir.join("report.json"), &report)?;
    Ok(())
}

fn set_source_n(source: &mut TaskSource, n: usize) {
    match source {
        TaskSource::Gmm { n: slot, .. }
        | TaskSource::GmmCircle { n: slot, .. }
        | TaskSource::Discrete { n: slot, .. }
        | TaskSource::Grouped { n: slot, .. } => *slot = n,
        _ => {}
    }
}

pub fn run_repro(criterion: &str, mnist_dir: Option<&Path>) -> Result<bool> {
    let ids: Vec<&str> = if criterion == "all" {
        ecp_core::repro::CRITERION_IDS.to_vec()
    } else {
        vec![criterion]
    };
    let mut all_pass = true;
    for id in ids {
        let result = ecp_core::repro::run_criterion(id, mnist_dir)?;
        println!("{}", result.summary_line());
        for line in &result.details {
            println!("  {line}");
        }
        all_pass &= result.pass;
    }
    Ok(all_pass)
}
