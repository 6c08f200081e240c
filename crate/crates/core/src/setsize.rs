//! Lower bounds on prediction-set size via quantized entropy estimation.
//!
//! The pipeline discretizes model outputs with seeded k-means, counts the
//! joint occupancy of (label, cluster) cells, and turns the Miller-Madow
//! corrected plug-in entropy into a lower bound on the conditional entropy:
//! `H(Y|Yq) = H(Y, Yq) - H(Yq) >= H_mm(Y, Yq) - ln k`. That lower bound (or
//! an exact oracle value, both feed the same functions) then yields lower
//! bounds on the maximal and expected log set size.

use serde::{Deserialize, Serialize};

use crate::bounds::{EvalBatch, CLAMP_EPS};
use crate::data::{binary_entropy, RngSeed};
use crate::error::{Error, Result};

/// K-means codebook.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QuantizerModel {
    pub centroids: Vec<Vec<f64>>,
}

impl QuantizerModel {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn dim(&self) -> usize {
        self.centroids.first().map_or(0, Vec::len)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's iterations from a seeded k-means++ initialization. Empty
/// clusters are re-seeded to the point farthest from its centroid.
pub fn kmeans(points: &[Vec<f64>], k: usize, iters: usize, seed: RngSeed) -> Result<QuantizerModel> {
    let n = points.len();
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if k > n {
        return Err(Error::invalid(format!("k = {k} exceeds {n} points")));
    }
    let mut rng = seed.rng();

    // k-means++ seeding.
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(points[rng.below(n)].clone());
    let mut dist2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = dist2.iter().sum();
        let next = if total <= 0.0 {
            rng.below(n)
        } else {
            let mut target = rng.uniform() * total;
            let mut chosen = n - 1;
            for (i, &d) in dist2.iter().enumerate() {
                target -= d;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        centroids.push(points[next].clone());
        for (i, p) in points.iter().enumerate() {
            dist2[i] = dist2[i].min(sq_dist(p, centroids.last().unwrap()));
        }
    }

    let qm_assign = |cents: &[Vec<f64>]| -> Vec<usize> {
        points
            .iter()
            .map(|p| {
                let mut best = 0;
                let mut best_d = sq_dist(p, &cents[0]);
                for (j, c) in cents.iter().enumerate().skip(1) {
                    let d = sq_dist(p, c);
                    if d < best_d {
                        best_d = d;
                        best = j;
                    }
                }
                best
            })
            .collect()
    };

    for _ in 0..iters {
        let assign = qm_assign(&centroids);
        let dim = points[0].len();
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assign) {
            counts[a] += 1;
            for d in 0..dim {
                sums[a][d] += p[d];
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                for d in 0..dim {
                    centroids[j][d] = sums[j][d] / counts[j] as f64;
                }
            } else {
                // Re-seed to the point farthest from its own centroid.
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = sq_dist(&points[a], &centroids[assign[a]]);
                        let db = sq_dist(&points[b], &centroids[assign[b]]);
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                centroids[j] = points[far].clone();
            }
        }
    }
    Ok(QuantizerModel { centroids })
}

/// Nearest-centroid ids (Euclidean); equidistant points take the lowest
/// centroid index.
pub fn quantize(qm: &QuantizerModel, points: &[Vec<f64>]) -> Vec<usize> {
    points
        .iter()
        .map(|p| {
            let mut best = 0;
            let mut best_d = sq_dist(p, &qm.centroids[0]);
            for (j, c) in qm.centroids.iter().enumerate().skip(1) {
                let d = sq_dist(p, c);
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Sum of squared distances to the nearest centroid.
pub fn kmeans_objective(qm: &QuantizerModel, points: &[Vec<f64>]) -> f64 {
    let assign = quantize(qm, points);
    points.iter().zip(&assign).map(|(p, &a)| sq_dist(p, &qm.centroids[a])).sum()
}

/// Plug-in entropy with the Miller-Madow correction.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EntropyEstimate {
    /// Maximum-likelihood (plug-in) entropy in nats.
    pub h_mle: f64,
    /// `h_mle + (occupied_bins - 1) / (2 n)`.
    pub h_mm: f64,
    pub occupied_bins: usize,
    pub n: usize,
}

pub fn entropy_mle(counts: &[usize]) -> Result<EntropyEstimate> {
    let n: usize = counts.iter().sum();
    if n == 0 {
        return Err(Error::invalid("all-zero counts"));
    }
    let nf = n as f64;
    let mut h = 0.0;
    let mut occupied = 0usize;
    for &c in counts {
        if c > 0 {
            occupied += 1;
            let p = c as f64 / nf;
            h -= p * p.ln();
        }
    }
    Ok(EntropyEstimate {
        h_mle: h,
        h_mm: h + (occupied as f64 - 1.0) / (2.0 * nf),
        occupied_bins: occupied,
        n,
    })
}

/// Lower bound on `H(Y|Yq)` from joint (label, cluster) counts:
/// Miller-Madow joint entropy minus `ln k`. May be negative; it is still a
/// valid lower bound.
pub fn cond_entropy_lb(joint_counts: &[Vec<usize>], k: usize) -> Result<f64> {
    let flat: Vec<usize> = joint_counts.iter().flatten().copied().collect();
    let est = entropy_mle(&flat)?;
    Ok(est.h_mm - (k as f64).ln())
}

/// A set-size lower bound with both the raw value and a zero-clamped
/// convenience field (a negative bound is valid but uninformative).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SizeLowerBound {
    pub raw: f64,
    pub clamped: f64,
    pub informative: bool,
}

impl SizeLowerBound {
    fn from_raw(raw: f64) -> Self {
        SizeLowerBound { raw, clamped: raw.max(0.0), informative: raw > 0.0 }
    }
}

/// Lower bound on the maximal log set size:
/// `(h_lb - h_b(alpha) - alpha ln K) / (1 - alpha + 1/(n+1))`.
pub fn max_setsize_lb(h_lb: f64, alpha: f64, n: usize, num_labels: usize) -> Result<SizeLowerBound> {
    check_alpha(alpha)?;
    let numer = h_lb - binary_entropy(alpha) - alpha * (num_labels as f64).ln();
    let denom = 1.0 - alpha + 1.0 / (n as f64 + 1.0);
    Ok(SizeLowerBound::from_raw(numer / denom))
}

/// Model-agnostic lower bound on `E[[ln |C|]^+]`:
/// `h_lb - h_b(alpha) - alpha ln K`.
pub fn expected_logsize_lb_simple(h_lb: f64, alpha: f64, num_labels: usize) -> Result<SizeLowerBound> {
    check_alpha(alpha)?;
    Ok(SizeLowerBound::from_raw(h_lb - binary_entropy(alpha) - alpha * (num_labels as f64).ln()))
}

/// Model-based lower bound on `E[[ln |C|]^+]`.
///
/// The covered correction averages `-ln q(y|x) + ln(mass_in / |C|)` over
/// covered examples; the uncovered correction averages
/// `-ln q(y|x) + ln(mass_out / (K - |C|))` over uncovered ones. Conditional
/// means over empty partitions are zero. With a uniform model both
/// corrections vanish and the bound reduces to the simple one scaled by
/// `(1 - alpha) / (1 - alpha + 1/(n+1))`.
pub fn expected_logsize_lb_mb(
    h_lb: f64,
    alpha: f64,
    n: usize,
    num_labels: usize,
    batch: &EvalBatch,
) -> Result<SizeLowerBound> {
    check_alpha(alpha)?;
    if batch.is_empty() {
        return Err(Error::invalid("empty evaluation batch"));
    }
    let k = num_labels as f64;
    let (mut cov_sum, mut cov_n) = (0.0, 0usize);
    let (mut unc_sum, mut unc_n) = (0.0, 0usize);
    for i in 0..batch.len() {
        let q_true = batch.probs()[i].get(batch.labels()[i]).max(CLAMP_EPS);
        let size = batch.sets()[i].size() as f64;
        let mass_in = batch.set_mass(i);
        if batch.covered(i) {
            let mean_mass = (mass_in / size).max(CLAMP_EPS);
            cov_sum += -q_true.ln() + mean_mass.ln();
            cov_n += 1;
        } else {
            let mean_mass = ((1.0 - mass_in) / (k - size)).max(CLAMP_EPS);
            unc_sum += -q_true.ln() + mean_mass.ln();
            unc_n += 1;
        }
    }
    let t_cov = if cov_n > 0 { cov_sum / cov_n as f64 } else { 0.0 };
    let t_unc = if unc_n > 0 { unc_sum / unc_n as f64 } else { 0.0 };
    let one_minus_a = 1.0 - alpha;
    let denom = 1.0 - alpha + 1.0 / (n as f64 + 1.0);
    let raw = one_minus_a * (h_lb - binary_entropy(alpha) - alpha * k.ln() - alpha * t_unc) / denom
        - one_minus_a * t_cov;
    Ok(SizeLowerBound::from_raw(raw))
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 0.5) {
        return Err(Error::invalid(format!("alpha {alpha} outside (0, 0.5)")));
    }
    Ok(())
}

/// Quantized conditional-entropy lower bound in one step: fit the codebook
/// on the given vectors, count joint (label, cluster) occupancy and apply
/// [`cond_entropy_lb`].
pub fn quantized_cond_entropy_lb(
    vectors: &[Vec<f64>],
    labels: &[usize],
    num_labels: usize,
    k: usize,
    iters: usize,
    seed: RngSeed,
) -> Result<(f64, QuantizerModel)> {
    if vectors.len() != labels.len() || vectors.is_empty() {
        return Err(Error::invalid("vectors and labels must align and be nonempty"));
    }
    let qm = kmeans(vectors, k, iters, seed)?;
    let ids = quantize(&qm, vectors);
    let mut joint = vec![vec![0usize; k]; num_labels];
    for (&y, &c) in labels.iter().zip(&ids) {
        joint[y][c] += 1;
    }
    let lb = cond_entropy_lb(&joint, k)?;
    Ok((lb, qm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn k1_is_the_mean() {
        let points = vec![vec![1.0, 2.0], vec![3.0, 6.0], vec![5.0, 4.0]];
        let qm = kmeans(&points, 1, 5, RngSeed(0)).unwrap();
        assert!((qm.centroids[0][0] - 3.0).abs() < 1e-12);
        assert!((qm.centroids[0][1] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn two_blobs_recovered() {
        let mut rng = Rng::new(4);
        let mut points = Vec::new();
        for _ in 0..100 {
            points.push(vec![-10.0 + 0.1 * rng.normal(), 0.1 * rng.normal()]);
            points.push(vec![10.0 + 0.1 * rng.normal(), 0.1 * rng.normal()]);
        }
        let qm = kmeans(&points, 2, 20, RngSeed(8)).unwrap();
        let mut xs: Vec<f64> = qm.centroids.iter().map(|c| c[0]).collect();
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((xs[0] + 10.0).abs() < 0.1, "centroid {}", xs[0]);
        assert!((xs[1] - 10.0).abs() < 0.1, "centroid {}", xs[1]);
    }

    #[test]
    fn zero_iters_returns_init_unchanged() {
        let points: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let a = kmeans(&points, 3, 0, RngSeed(5)).unwrap();
        let b = kmeans(&points, 3, 0, RngSeed(5)).unwrap();
        assert_eq!(a.centroids, b.centroids);
        // Every centroid is one of the input points (pure k-means++ output).
        for c in &a.centroids {
            assert!(points.iter().any(|p| p == c));
        }
    }

    #[test]
    fn k_exceeding_n_is_an_error() {
        let points = vec![vec![0.0]];
        assert!(kmeans(&points, 2, 1, RngSeed(0)).is_err());
    }

    #[test]
    fn objective_non_increasing() {
        let mut rng = Rng::new(12);
        let points: Vec<Vec<f64>> = (0..200).map(|_| vec![rng.normal(), rng.normal()]).collect();
        let mut last = f64::INFINITY;
        for iters in 0..8 {
            let qm = kmeans(&points, 5, iters, RngSeed(3)).unwrap();
            let obj = kmeans_objective(&qm, &points);
            assert!(obj <= last + 1e-9, "objective rose: {last} -> {obj}");
            last = obj;
        }
    }

    #[test]
    fn quantize_matches_brute_force() {
        let mut rng = Rng::new(6);
        let points: Vec<Vec<f64>> = (0..1000).map(|_| vec![rng.normal(), rng.normal(), rng.normal()]).collect();
        let qm = kmeans(&points[..64], 8, 10, RngSeed(1)).unwrap();
        let ids = quantize(&qm, &points);
        for (p, &id) in points.iter().zip(&ids) {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (j, c) in qm.centroids.iter().enumerate() {
                let d = sq_dist(p, c);
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            assert_eq!(id, best);
        }
    }

    #[test]
    fn quantize_tie_rules() {
        let qm = QuantizerModel { centroids: vec![vec![0.0], vec![2.0]] };
        assert_eq!(quantize(&qm, &[vec![0.0]]), vec![0]);
        assert_eq!(quantize(&qm, &[vec![2.0]]), vec![1]);
        // Equidistant: lowest index wins.
        assert_eq!(quantize(&qm, &[vec![1.0]]), vec![0]);
    }

    #[test]
    fn entropy_estimates() {
        let est = entropy_mle(&[10]).unwrap();
        assert_eq!(est.h_mle, 0.0);
        assert_eq!(est.h_mm, 0.0);
        assert_eq!(est.occupied_bins, 1);

        // Uniform over m bins with count c each.
        let (m, c) = (6usize, 7usize);
        let est = entropy_mle(&vec![c; m]).unwrap();
        assert!((est.h_mle - (m as f64).ln()).abs() < 1e-12);
        let expect = (m as f64).ln() + (m as f64 - 1.0) / (2.0 * (m * c) as f64);
        assert!((est.h_mm - expect).abs() < 1e-12);

        let est = entropy_mle(&[3, 1]).unwrap();
        let expect = -(0.75f64 * 0.75f64.ln() + 0.25 * 0.25f64.ln());
        assert!((est.h_mle - expect).abs() < 1e-12);

        assert!(entropy_mle(&[0, 0]).is_err());
    }

    #[test]
    fn miller_madow_dominates_mle() {
        let mut rng = Rng::new(9);
        for _ in 0..50 {
            let counts: Vec<usize> = (0..8).map(|_| rng.below(20)).collect();
            if counts.iter().sum::<usize>() == 0 {
                continue;
            }
            let est = entropy_mle(&counts).unwrap();
            assert!(est.h_mm >= est.h_mle);
            assert!(est.h_mle <= (est.occupied_bins as f64).ln() + 1e-12);
        }
    }

    #[test]
    fn cond_entropy_lb_cases() {
        // Y determined by the cluster, uniform clusters: bound approaches 0
        // from below as n grows (Miller-Madow nearly cancels ln k).
        let k = 4;
        let per = 2500usize;
        let joint: Vec<Vec<usize>> = (0..k)
            .map(|y| (0..k).map(|c| if c == y { per } else { 0 }).collect())
            .collect();
        let lb = cond_entropy_lb(&joint, k).unwrap();
        assert!(lb.abs() < 1e-3, "lb = {lb}");

        // Independent uniform Y (K bins) and cluster (k bins):
        // H_mm(Y, Yq) - ln k -> ln K.
        let (big_k, k2, per2) = (3usize, 5usize, 2000usize);
        let joint: Vec<Vec<usize>> = vec![vec![per2; k2]; big_k];
        let lb = cond_entropy_lb(&joint, k2).unwrap();
        assert!((lb - (big_k as f64).ln()).abs() < 1e-3, "lb = {lb}");

        // Single occupied cell: exactly -ln k (negative, still valid).
        let joint = vec![vec![9usize, 0], vec![0, 0]];
        let lb = cond_entropy_lb(&joint, 2).unwrap();
        assert!((lb + 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn max_setsize_lb_cases() {
        let (alpha, n, k) = (0.1, 99, 8);
        let at_zero = binary_entropy(alpha) + alpha * (k as f64).ln();
        let lb = max_setsize_lb(at_zero, alpha, n, k).unwrap();
        assert!(lb.raw.abs() < 1e-12);
        assert!(lb.clamped >= 0.0);

        // Perfect uncertainty, alpha and 1/n negligible: approaches ln K.
        let lb = max_setsize_lb((k as f64).ln(), 1e-9, 1_000_000_000, k).unwrap();
        assert!((lb.raw - (k as f64).ln()).abs() < 1e-6);
    }

    #[test]
    fn simple_logsize_lb_zero_point() {
        let (alpha, k) = (0.2, 10);
        let h = binary_entropy(alpha) + alpha * (k as f64).ln();
        let lb = expected_logsize_lb_simple(h, alpha, k).unwrap();
        assert!(lb.raw.abs() < 1e-12);
        assert_eq!(lb.clamped, 0.0);
    }

    #[test]
    fn max_setsize_lb_is_dominated_by_observed_maximum() {
        // Discrete task with exact entropy: run split conformal prediction
        // and compare the largest observed log set size to the bound.
        use crate::conformal::{calibrate, predict_set};
        use crate::data::ProbVector;
        use crate::datagen::{discrete_exact_entropy, gen_discrete_task, DiscreteTaskSpec};
        use crate::scores::{score, ScoreSpec};

        let spec = DiscreteTaskSpec::new(
            vec![0.25; 4],
            vec![
                vec![0.4, 0.3, 0.2, 0.1, 0.0, 0.0],
                vec![0.0, 0.4, 0.3, 0.2, 0.1, 0.0],
                vec![1.0 / 6.0; 6],
                vec![0.05, 0.05, 0.05, 0.05, 0.4, 0.4],
            ],
        )
        .unwrap();
        let h = discrete_exact_entropy(&spec).unwrap();
        let score_spec = ScoreSpec::thr_prob().with_jitter(1e-6);
        for &alpha in &[0.05, 0.1, 0.2] {
            let seed = RngSeed(400 + (alpha * 100.0) as u64);
            let n_cal = 2000;
            let cal = gen_discrete_task(&spec, n_cal, seed).unwrap();
            let cal_scores: Vec<f64> = (0..cal.len())
                .map(|i| {
                    let x = DiscreteTaskSpec::context_of(cal.feature_row(i));
                    let p = ProbVector::new(spec.cond_y_given_x[x].clone()).unwrap();
                    score(&score_spec, &p, cal.label(i), Some(seed.derive(i as u64))).unwrap()
                })
                .collect();
            let calibration = calibrate(&cal_scores, alpha).unwrap();
            let eval = gen_discrete_task(&spec, 4000, seed.derive(1)).unwrap();
            let max_log = (0..eval.len())
                .map(|i| {
                    let x = DiscreteTaskSpec::context_of(eval.feature_row(i));
                    let p = ProbVector::new(spec.cond_y_given_x[x].clone()).unwrap();
                    let set = predict_set(&calibration, &score_spec, &p, Some(seed.derive(90_000 + i as u64)));
                    (set.size().max(1) as f64).ln()
                })
                .fold(f64::NEG_INFINITY, f64::max);
            let lb = max_setsize_lb(h, alpha, n_cal, 6).unwrap();
            assert!(max_log >= lb.raw - 1e-9, "alpha {alpha}: observed {max_log} vs bound {}", lb.raw);
        }
    }

    #[test]
    fn quantized_pipeline_lower_bounds_exact_entropy() {
        // Quantizing exact posterior vectors loses nothing at desk scale:
        // the bound must sit at or below the true conditional entropy.
        use crate::datagen::{discrete_exact_entropy, gen_discrete_task, grouped_task, DiscreteTaskSpec};

        let spec = grouped_task(6, 3, 0.5).unwrap();
        let h = discrete_exact_entropy(&spec).unwrap();
        let ds = gen_discrete_task(&spec, 6000, RngSeed(91)).unwrap();
        let vectors: Vec<Vec<f64>> = (0..ds.len())
            .map(|i| {
                let x = DiscreteTaskSpec::context_of(ds.feature_row(i));
                spec.cond_y_given_x[x].iter().map(|&p| p.max(1e-12).ln()).collect()
            })
            .collect();
        let (lb, qm) = quantized_cond_entropy_lb(&vectors, ds.labels(), 6, 6, 15, RngSeed(17)).unwrap();
        assert_eq!(qm.k(), 6);
        assert!(lb <= h + 1e-3, "lb {lb} vs H {h}");
        // With one cluster per context the loss is only the Miller-Madow
        // residue, so the bound should land near H.
        assert!(lb > h - 0.2, "lb {lb} far below H {h}");
    }

    #[test]
    fn mb_logsize_with_uniform_model_scales_simple() {
        use crate::bounds::test_support::uniform_batch;
        let (alpha, n, k) = (0.1, 10_000, 6);
        let batch = uniform_batch(40, k, 17);
        // Informative configuration: positive numerator.
        let h = binary_entropy(alpha) + alpha * (k as f64).ln() + 0.8;
        let simple = expected_logsize_lb_simple(h, alpha, k).unwrap();
        let mb = expected_logsize_lb_mb(h, alpha, n, k, &batch).unwrap();
        let factor = (1.0 - alpha) / (1.0 - alpha + 1.0 / (n as f64 + 1.0));
        assert!((mb.raw - simple.raw * factor).abs() < 1e-9);
        assert!(mb.raw <= simple.raw + 1e-9);
    }
}
