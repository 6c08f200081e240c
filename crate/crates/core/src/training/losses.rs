//! The differentiable conformal step and the six training losses.
//!
//! The conformal step scores the calibration half with the log-probability
//! threshold score, runs the soft quantile, and produces soft membership
//! values for every (test example, label) pair. Losses built on the soft
//! sets use the soft coverage weight `w_i = C_soft(x_i, y_i)` wherever the
//! hard bounds condition on the coverage event; conditional means are
//! normalized by the soft event masses with a 1e-6 floor. Every loss
//! reduces to its hard bound counterpart as steepness grows and the
//! membership temperature shrinks.

use crate::autodiff::{Tape, Var};
use crate::conformal::quantile_rank;
use crate::data::binary_entropy;
use crate::diffsort::{soft_membership, soft_quantile, RelaxConfig};
use crate::error::{Error, Result};
use crate::training::Model;

/// Floor on soft conditional-weight normalizers.
const WEIGHT_EPS: f64 = 1e-6;

/// Output of the differentiable conformal step on one batch.
pub struct SoftStep {
    /// Soft membership, test rows by labels.
    pub soft_sets: Var,
    /// Model probabilities on the test half.
    pub test_probs: Var,
    /// Model log probabilities on the test half.
    pub test_log_probs: Var,
    pub test_labels: Vec<usize>,
    pub q_hat: Var,
    pub n_cal: usize,
}

/// Splits the batch in half (odd leftover joins the test half), fits the
/// soft quantile on calibration log-probability scores, and soft-assigns
/// every test label.
#[allow(clippy::too_many_arguments)]
pub fn conformal_step(
    tape: &Tape,
    model: &Model,
    params: Var,
    features: &[f64],
    labels: &[usize],
    n: usize,
    alpha: f64,
    relax: &RelaxConfig,
) -> Result<SoftStep> {
    if n < 2 {
        return Err(Error::invalid("conformal step needs a batch of at least 2"));
    }
    let n_cal = n / 2;
    let rank = quantile_rank(n_cal, alpha);
    if rank > n_cal {
        return Err(Error::infeasible(format!(
            "rank {rank} exceeds {n_cal} calibration scores (batch {n}, alpha {alpha})"
        )));
    }
    let dim = model.spec.input_dim();
    let (cal_feats, test_feats) = features.split_at(n_cal * dim);
    let (cal_labels, test_labels) = labels.split_at(n_cal);

    let cal_fw = model.forward_tape(tape, params, cal_feats, n_cal);
    let cal_scores_col = tape.neg(tape.gather(cal_fw.log_probs, cal_labels));
    let cal_scores: Vec<Var> = (0..n_cal).map(|i| tape.index(cal_scores_col, i)).collect();
    let scores_row = tape.concat(&cal_scores);
    let q_hat = soft_quantile(tape, scores_row, alpha, relax)?;

    let n_test = n - n_cal;
    let test_fw = model.forward_tape(tape, params, test_feats, n_test);
    let test_scores = tape.neg(test_fw.log_probs);
    let soft_sets = soft_membership(tape, q_hat, test_scores, relax);

    Ok(SoftStep {
        soft_sets,
        test_probs: test_fw.probs,
        test_log_probs: test_fw.log_probs,
        test_labels: test_labels.to_vec(),
        q_hat,
        n_cal,
    })
}

/// Mean negative log-likelihood.
pub fn loss_ce(tape: &Tape, log_probs: Var, labels: &[usize]) -> Var {
    tape.mean(tape.neg(tape.gather(log_probs, labels)))
}

/// Log of the mean soft set size.
pub fn loss_conftr(tape: &Tape, soft_sets: Var) -> Var {
    tape.ln(tape.mean(tape.row_sum(soft_sets)))
}

/// Size loss plus a weighted classification term
/// `mean(1 - C_soft(x, y_true))`.
pub fn loss_conftr_class(tape: &Tape, soft_sets: Var, labels: &[usize], class_weight: f64) -> Var {
    let size_term = loss_conftr(tape, soft_sets);
    let true_member = tape.gather(soft_sets, labels);
    let class_term = tape.mean(tape.add_const(tape.neg(true_member), 1.0));
    tape.add(size_term, tape.scale(class_term, class_weight))
}

fn alpha_n(alpha: f64, n: usize) -> f64 {
    alpha - 1.0 / (n as f64 + 1.0)
}

/// Soft conditional mean: sum(w * t) / (sum(w) + eps).
fn weighted_mean(tape: &Tape, weights: Var, terms: Var) -> Var {
    let num = tape.sum(tape.mul(weights, terms));
    let den = tape.add_const(tape.sum(weights), WEIGHT_EPS);
    tape.div(num, den)
}

/// Soft coverage weights for the true labels, and their complements.
fn event_weights(tape: &Tape, soft_sets: Var, labels: &[usize]) -> (Var, Var) {
    let covered = tape.gather(soft_sets, labels);
    let uncovered = tape.add_const(tape.neg(covered), 1.0);
    (covered, uncovered)
}

/// Simple Fano bound with soft sets and soft event weights.
pub fn loss_fano(
    tape: &Tape,
    soft_sets: Var,
    labels: &[usize],
    alpha: f64,
    n_cal: usize,
    num_labels: usize,
) -> Var {
    let (w_cov, w_unc) = event_weights(tape, soft_sets, labels);
    let sizes = tape.row_sum(soft_sets);
    let ln_in = tape.ln(sizes);
    let ln_out = tape.ln(tape.add_const(tape.neg(sizes), num_labels as f64));
    let covered = weighted_mean(tape, w_cov, ln_in);
    let uncovered = weighted_mean(tape, w_unc, ln_out);
    let base = tape.scalar(binary_entropy(alpha));
    let total = tape.add(base, tape.scale(uncovered, alpha));
    tape.add(total, tape.scale(covered, 1.0 - alpha_n(alpha, n_cal)))
}

/// Model-based Fano bound with soft sets: the in-set and out-of-set masses
/// are soft mixtures of the model probabilities.
pub fn loss_mb_fano(
    tape: &Tape,
    soft_sets: Var,
    probs: Var,
    labels: &[usize],
    alpha: f64,
    n_cal: usize,
) -> Var {
    let (w_cov, w_unc) = event_weights(tape, soft_sets, labels);
    let mass_in = tape.row_sum(tape.mul(soft_sets, probs));
    let complement = tape.add_const(tape.neg(soft_sets), 1.0);
    let mass_out = tape.row_sum(tape.mul(complement, probs));
    let ln_true = tape.ln(tape.gather(probs, labels));
    let t_cov = tape.sub(tape.ln(mass_in), ln_true);
    let t_unc = tape.sub(tape.ln(mass_out), ln_true);
    let covered = weighted_mean(tape, w_cov, t_cov);
    let uncovered = weighted_mean(tape, w_unc, t_unc);
    let base = tape.scalar(binary_entropy(alpha));
    let total = tape.add(base, tape.scale(uncovered, alpha));
    tape.add(total, tape.scale(covered, 1.0 - alpha_n(alpha, n_cal)))
}

/// DPI bound with soft coverage masses and the Bernstein width computed
/// from the soft per-example set masses.
#[allow(clippy::too_many_arguments)]
pub fn loss_dpi(
    tape: &Tape,
    soft_sets: Var,
    probs: Var,
    log_probs: Var,
    labels: &[usize],
    alpha: f64,
    n_cal: usize,
    delta: f64,
) -> Var {
    let n = soft_sets.rows;
    let z = tape.row_sum(tape.mul(soft_sets, probs));
    let mean_z = tape.mean(z);
    let centered = tape.sub(z, mean_z);
    let var = tape.scale(tape.sum(tape.mul(centered, centered)), 1.0 / (n as f64 - 1.0));
    let log_term = (2.0 / delta).ln();
    let width = tape.add_const(
        tape.sqrt(tape.scale(var, 2.0 * log_term / n as f64)),
        7.0 * log_term / (3.0 * (n as f64 - 1.0)),
    );
    let q_in = tape.min_const(tape.add(mean_z, width), 1.0);
    let q_out = tape.min_const(tape.add(tape.add_const(tape.neg(mean_z), 1.0), width), 1.0);
    let ce = loss_ce(tape, log_probs, labels);

    let base = tape.scalar(binary_entropy(alpha));
    let cover_term = tape.scale(tape.ln(q_in), 1.0 - alpha);
    let miss_term = tape.scale(tape.ln(q_out), alpha_n(alpha, n_cal));
    tape.add(tape.add(tape.add(base, cover_term), miss_term), ce)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::bounds::{dpi_bound, mb_fano_bound, simple_fano_bound, EvalBatch};
    use crate::conformal::{calibrate, predict_set};
    use crate::data::{PredictionSet, ProbVector, RngSeed};
    use crate::rng::Rng;
    use crate::scores::{score, ScoreSpec};
    use crate::training::{Model, ModelSpec};

    fn fixture(seed: u64, n: usize, dim: usize, k: usize) -> (Model, Vec<f64>, Vec<usize>) {
        let mut rng = Rng::new(seed);
        let model = Model::init(ModelSpec::linear(dim, k), RngSeed(seed ^ 0xff)).unwrap();
        let features: Vec<f64> = (0..n * dim).map(|_| rng.normal()).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
        (model, features, labels)
    }

    #[test]
    fn conftr_loss_arithmetic() {
        // All memberships 0.5 over K = 10: mean soft size 5.
        let tape = Tape::new();
        let sets = tape.constant(4, 10, vec![0.5; 40]);
        let loss = loss_conftr(&tape, sets);
        assert!((tape.value_scalar(loss) - 5.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn conftr_class_terms() {
        let tape = Tape::new();
        let mut member = vec![0.2; 12];
        // True label memberships of 1 kill the class term.
        member[0] = 1.0;
        member[5] = 1.0;
        member[10] = 1.0;
        let sets = tape.constant(3, 4, member);
        let labels = [0usize, 1, 2];
        let with_class = loss_conftr_class(&tape, sets, &labels, 2.0);
        let plain = loss_conftr(&tape, sets);
        assert!((tape.value_scalar(with_class) - tape.value_scalar(plain)).abs() < 1e-12);

        // Zero weight degenerates to the size loss regardless of coverage.
        let sets2 = tape.constant(3, 4, vec![0.3; 12]);
        let a = loss_conftr_class(&tape, sets2, &labels, 0.0);
        let b = loss_conftr(&tape, sets2);
        assert!((tape.value_scalar(a) - tape.value_scalar(b)).abs() < 1e-12);
    }

    #[test]
    fn ce_loss_values() {
        let tape = Tape::new();
        // Uniform probs over K = 10.
        let log_probs = tape.constant(2, 10, vec![(0.1f64).ln(); 20]);
        let loss = loss_ce(&tape, log_probs, &[3, 7]);
        assert!((tape.value_scalar(loss) - 10.0f64.ln()).abs() < 1e-12);

        // Hand-computed three-example fixture.
        let rows = [
            [0.7, 0.2, 0.1],
            [0.1, 0.8, 0.1],
            [0.25, 0.25, 0.5],
        ];
        let flat: Vec<f64> = rows.iter().flatten().map(|p: &f64| p.ln()).collect();
        let lp = tape.constant(3, 3, flat);
        let loss = loss_ce(&tape, lp, &[0, 1, 2]);
        let expect = -(0.7f64.ln() + 0.8f64.ln() + 0.5f64.ln()) / 3.0;
        assert!((tape.value_scalar(loss) - expect).abs() < 1e-12);
    }

    #[test]
    fn mb_fano_with_uniform_probs_equals_fano() {
        let tape = Tape::new();
        let mut rng = Rng::new(5);
        let (n, k) = (6, 4);
        let sets_data: Vec<f64> = (0..n * k).map(|_| rng.uniform()).collect();
        let sets = tape.constant(n, k, sets_data);
        let probs = tape.constant(n, k, vec![1.0 / k as f64; n * k]);
        let labels: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
        let fano = loss_fano(&tape, sets, &labels, 0.2, 16, k);
        let mb = loss_mb_fano(&tape, sets, probs, &labels, 0.2, 16);
        assert!((tape.value_scalar(fano) - tape.value_scalar(mb)).abs() < 1e-9);
    }

    #[test]
    fn batch_of_two_with_small_alpha_is_infeasible() {
        let (model, features, labels) = fixture(1, 2, 3, 4);
        let tape = Tape::new();
        let params = tape.param(1, model.params.len(), model.params.clone());
        let relax = RelaxConfig::new(5.0, 0.5);
        let err = conformal_step(&tape, &model, params, &features, &labels, 2, 0.25, &relax);
        assert!(matches!(err, Err(Error::Infeasible(_))));
    }

    #[test]
    fn conformal_step_is_deterministic() {
        let (model, features, labels) = fixture(2, 8, 3, 4);
        let run = || {
            let tape = Tape::new();
            let params = tape.param(1, model.params.len(), model.params.clone());
            let relax = RelaxConfig::new(5.0, 0.5);
            let step =
                conformal_step(&tape, &model, params, &features, &labels, 8, 0.25, &relax).unwrap();
            tape.value(step.soft_sets)
        };
        assert_eq!(run(), run());
    }

    /// Hard pipeline replicated on the same split for the saturation checks.
    fn hard_counterpart(
        model: &Model,
        features: &[f64],
        labels: &[usize],
        n: usize,
        alpha: f64,
    ) -> (Vec<PredictionSet>, Vec<ProbVector>, Vec<usize>, usize) {
        let dim = model.spec.input_dim();
        let n_cal = n / 2;
        let spec = ScoreSpec::thr_logprob();
        let cal_probs = model.forward_probs(&features[..n_cal * dim], n_cal);
        let cal_scores: Vec<f64> = cal_probs
            .iter()
            .zip(&labels[..n_cal])
            .map(|(p, &y)| score(&spec, p, y, None).unwrap())
            .collect();
        let calibration = calibrate(&cal_scores, alpha).unwrap();
        let test_probs = model.forward_probs(&features[n_cal * dim..], n - n_cal);
        let sets: Vec<PredictionSet> =
            test_probs.iter().map(|p| predict_set(&calibration, &spec, p, None)).collect();
        (sets, test_probs, labels[n_cal..].to_vec(), n_cal)
    }

    #[test]
    fn saturated_step_reproduces_hard_sets() {
        let (model, features, labels) = fixture(3, 16, 3, 5);
        let alpha = 0.25;
        let relax = RelaxConfig::new(1e4, 1e-3);
        let tape = Tape::new();
        let params = tape.param(1, model.params.len(), model.params.clone());
        let step =
            conformal_step(&tape, &model, params, &features, &labels, 16, alpha, &relax).unwrap();
        let soft = tape.value(step.soft_sets);
        let (hard_sets, _, _, _) = hard_counterpart(&model, &features, &labels, 16, alpha);
        let k = 5;
        for (i, set) in hard_sets.iter().enumerate() {
            for y in 0..k {
                let rounded = soft[i * k + y] >= 0.5;
                assert_eq!(rounded, set.contains(y), "example {i} label {y}");
            }
        }
    }

    #[test]
    fn saturated_losses_match_bound_module() {
        // Even split so the batch n in each loss matches the evaluation n.
        let (model, features, labels) = fixture(4, 20, 3, 4);
        let alpha = 0.3;
        let relax = RelaxConfig::new(1e4, 1e-4);
        let tape = Tape::new();
        let params = tape.param(1, model.params.len(), model.params.clone());
        let step =
            conformal_step(&tape, &model, params, &features, &labels, 20, alpha, &relax).unwrap();

        let (hard_sets, test_probs, test_labels, n_cal) =
            hard_counterpart(&model, &features, &labels, 20, alpha);
        let batch = EvalBatch::new(test_probs, test_labels.clone(), hard_sets.clone()).unwrap();

        let fano_soft = loss_fano(&tape, step.soft_sets, &step.test_labels, alpha, n_cal, 4);
        let fano_hard = simple_fano_bound(&hard_sets, &test_labels, alpha, batch.len(), 4).unwrap();
        assert!(
            (tape.value_scalar(fano_soft) - fano_hard.value).abs() < 1e-3,
            "fano {} vs {}",
            tape.value_scalar(fano_soft),
            fano_hard.value
        );

        let mb_soft = loss_mb_fano(&tape, step.soft_sets, step.test_probs, &step.test_labels, alpha, n_cal);
        let mb_hard = mb_fano_bound(&batch, alpha).unwrap();
        assert!((tape.value_scalar(mb_soft) - mb_hard.value).abs() < 1e-3);

        let dpi_soft = loss_dpi(
            &tape,
            step.soft_sets,
            step.test_probs,
            step.test_log_probs,
            &step.test_labels,
            alpha,
            n_cal,
            0.1,
        );
        let dpi_hard = dpi_bound(&batch, alpha, 0.1).unwrap();
        assert!((tape.value_scalar(dpi_soft) - dpi_hard.value).abs() < 1e-3);
    }

    #[test]
    fn all_losses_pass_grad_check_on_small_fixture() {
        // 8 examples, K = 4, moderate relaxation away from saturation.
        let mut rng = Rng::new(9);
        let (n, dim, k) = (8usize, 3usize, 4usize);
        let features: Vec<f64> = (0..n * dim).map(|_| rng.normal()).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
        let model = Model::init(ModelSpec::linear(dim, k), RngSeed(10)).unwrap();
        let alpha = 0.3;
        let relax = RelaxConfig::new(2.0, 0.7);

        type LossBuilder = Box<dyn Fn(&Tape, &Model, Var, &[f64], &[usize]) -> Var>;
        let builders: Vec<(&str, LossBuilder)> = vec![
            ("ce", Box::new(move |t, m, p, f, l| {
                let fw = m.forward_tape(t, p, f, 8);
                loss_ce(t, fw.log_probs, l)
            })),
            ("conftr", Box::new(move |t, m, p, f, l| {
                let step = conformal_step(t, m, p, f, l, 8, alpha, &relax).unwrap();
                loss_conftr(t, step.soft_sets)
            })),
            ("conftr_class", Box::new(move |t, m, p, f, l| {
                let step = conformal_step(t, m, p, f, l, 8, alpha, &relax).unwrap();
                loss_conftr_class(t, step.soft_sets, &step.test_labels, 0.5)
            })),
            ("fano", Box::new(move |t, m, p, f, l| {
                let step = conformal_step(t, m, p, f, l, 8, alpha, &relax).unwrap();
                loss_fano(t, step.soft_sets, &step.test_labels, alpha, step.n_cal, k)
            })),
            ("mb_fano", Box::new(move |t, m, p, f, l| {
                let step = conformal_step(t, m, p, f, l, 8, alpha, &relax).unwrap();
                loss_mb_fano(t, step.soft_sets, step.test_probs, &step.test_labels, alpha, step.n_cal)
            })),
            ("dpi", Box::new(move |t, m, p, f, l| {
                let step = conformal_step(t, m, p, f, l, 8, alpha, &relax).unwrap();
                loss_dpi(
                    t,
                    step.soft_sets,
                    step.test_probs,
                    step.test_log_probs,
                    &step.test_labels,
                    alpha,
                    step.n_cal,
                    0.1,
                )
            })),
        ];

        for (name, build) in &builders {
            for trial in 0..5 {
                let point = Model::init(ModelSpec::linear(dim, k), RngSeed(100 + trial)).unwrap().params;
                let model = model.clone();
                let features = features.clone();
                let labels = labels.clone();
                let report = grad_check(
                    |t, x| build(t, &model, x, &features, &labels),
                    &point,
                    1e-5,
                    1e-4,
                )
                .unwrap();
                assert!(report.ok, "{name} trial {trial}: rel err {}", report.max_rel_err);
            }
        }
    }
}
