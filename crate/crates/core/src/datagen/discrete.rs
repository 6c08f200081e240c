//! Finite discrete tasks with exact entropy by enumeration.
//!
//! Features are one-hot encodings of the latent context `x`, so a linear
//! softmax model can represent the exact posterior table and "zero
//! epistemic gap" evaluations are reachable in tests.

use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, RngSeed};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscreteTaskSpec {
    /// Marginal over the context, length `|X|` (small, at most 64).
    pub marginal_x: Vec<f64>,
    /// Conditional table: one row per context, each on the label simplex.
    pub cond_y_given_x: Vec<Vec<f64>>,
    /// Optional group channel `p(z | x, y)`, indexed `[x][y][z]`.
    pub group_given_xy: Option<Vec<Vec<Vec<f64>>>>,
}

impl DiscreteTaskSpec {
    pub fn new(marginal_x: Vec<f64>, cond_y_given_x: Vec<Vec<f64>>) -> Result<Self> {
        let spec = DiscreteTaskSpec { marginal_x, cond_y_given_x, group_given_xy: None };
        spec.validate()?;
        Ok(spec)
    }

    pub fn support_x(&self) -> usize {
        self.marginal_x.len()
    }

    pub fn num_labels(&self) -> usize {
        self.cond_y_given_x.first().map_or(0, Vec::len)
    }

    pub fn num_groups(&self) -> usize {
        self.group_given_xy
            .as_ref()
            .and_then(|g| g.first())
            .and_then(|row| row.first())
            .map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let sx = self.support_x();
        if sx == 0 || sx > 64 {
            return Err(Error::invalid("support of x must be in [1, 64]"));
        }
        check_simplex(&self.marginal_x, "marginal_x")?;
        if self.cond_y_given_x.len() != sx {
            return Err(Error::invalid("conditional table must have one row per context"));
        }
        let k = self.num_labels();
        for row in &self.cond_y_given_x {
            if row.len() != k {
                return Err(Error::invalid("ragged conditional table"));
            }
            check_simplex(row, "cond_y_given_x row")?;
        }
        if let Some(groups) = &self.group_given_xy {
            if groups.len() != sx {
                return Err(Error::invalid("group table must have one block per context"));
            }
            let g = self.num_groups();
            for block in groups {
                if block.len() != k {
                    return Err(Error::invalid("group table must have one row per label"));
                }
                for row in block {
                    if row.len() != g {
                        return Err(Error::invalid("ragged group table"));
                    }
                    check_simplex(row, "group row")?;
                }
            }
        }
        Ok(())
    }

    /// Exact posterior row for context `x`.
    pub fn posterior(&self, x: usize) -> &[f64] {
        &self.cond_y_given_x[x]
    }

    /// Context id recovered from a one-hot feature row.
    pub fn context_of(features: &[f64]) -> usize {
        features
            .iter()
            .position(|&v| v > 0.5)
            .expect("one-hot feature row")
    }
}

fn check_simplex(row: &[f64], what: &str) -> Result<()> {
    if row.iter().any(|&p| p < 0.0) {
        return Err(Error::invalid(format!("{what} has a negative entry")));
    }
    let total: f64 = row.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(Error::invalid(format!("{what} sums to {total}, not 1")));
    }
    Ok(())
}

/// Samples a dataset; features are one-hot in the context.
pub fn gen_discrete_task(spec: &DiscreteTaskSpec, n: usize, seed: RngSeed) -> Result<LabeledDataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::invalid("n must be at least 1"));
    }
    let sx = spec.support_x();
    let k = spec.num_labels();
    let g = spec.num_groups();
    let mut features = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut side = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = seed.derive(i as u64).rng();
        let x = rng.categorical(&spec.marginal_x);
        let y = rng.categorical(&spec.cond_y_given_x[x]);
        let z = spec.group_given_xy.as_ref().map(|tab| rng.categorical(&tab[x][y]));
        let mut row = vec![0.0; sx];
        row[x] = 1.0;
        features.push(row);
        labels.push(y);
        side.push(z);
    }
    LabeledDataset::new(features, labels, Some(side), k, g)
}

/// Exact `H(Y|X)` in nats: the marginal-weighted entropy of the rows.
pub fn discrete_exact_entropy(spec: &DiscreteTaskSpec) -> Result<f64> {
    spec.validate()?;
    let mut h = 0.0;
    for (x, row) in spec.cond_y_given_x.iter().enumerate() {
        let hx: f64 = row.iter().map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 }).sum();
        h += spec.marginal_x[x] * hx;
    }
    Ok(h)
}

/// A task whose labels fall into contiguous groups, with the context only
/// weakly informative about the label but the group resolving most of the
/// ambiguity. `sharpness` controls how peaked each row is on its in-group
/// favorite; `num_labels` must be divisible by `num_groups`.
pub fn grouped_task(num_labels: usize, num_groups: usize, sharpness: f64) -> Result<DiscreteTaskSpec> {
    if num_groups == 0 || !num_labels.is_multiple_of(num_groups) {
        return Err(Error::invalid("num_labels must be a positive multiple of num_groups"));
    }
    let per_group = num_labels / num_groups;
    let sx = num_labels;
    let mut cond = Vec::with_capacity(sx);
    for x in 0..sx {
        // Row peaked at label x with the rest of the mass spread over all
        // labels, so every group stays plausible from the context alone.
        let mut row = vec![(1.0 - sharpness) / (num_labels as f64 - 1.0); num_labels];
        row[x] = sharpness;
        cond.push(row);
    }
    let groups = (0..sx)
        .map(|_x| {
            (0..num_labels)
                .map(|y| {
                    let mut row = vec![0.0; num_groups];
                    row[y / per_group] = 1.0;
                    row
                })
                .collect()
        })
        .collect();
    let mut spec = DiscreteTaskSpec::new(vec![1.0 / sx as f64; sx], cond)?;
    spec.group_given_xy = Some(groups);
    spec.validate()?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::binary_entropy;

    #[test]
    fn deterministic_table_has_zero_entropy() {
        let spec = DiscreteTaskSpec::new(
            vec![0.5, 0.5],
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        )
        .unwrap();
        assert_eq!(discrete_exact_entropy(&spec).unwrap(), 0.0);
    }

    #[test]
    fn uniform_rows_have_ln_k_entropy() {
        let spec = DiscreteTaskSpec::new(
            vec![0.25, 0.75],
            vec![vec![1.0 / 3.0; 3], vec![1.0 / 3.0; 3]],
        )
        .unwrap();
        assert!((discrete_exact_entropy(&spec).unwrap() - 3.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn two_by_two_closed_form() {
        let spec = DiscreteTaskSpec::new(
            vec![0.5, 0.5],
            vec![vec![0.9, 0.1], vec![0.2, 0.8]],
        )
        .unwrap();
        let expect = 0.5 * binary_entropy(0.1) + 0.5 * binary_entropy(0.2);
        assert!((discrete_exact_entropy(&spec).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn one_hot_features_and_determinism() {
        let spec = grouped_task(6, 3, 0.5).unwrap();
        let a = gen_discrete_task(&spec, 100, RngSeed(5)).unwrap();
        let b = gen_discrete_task(&spec, 100, RngSeed(5)).unwrap();
        assert_eq!(a.labels(), b.labels());
        for i in 0..a.len() {
            let row = a.feature_row(i);
            assert_eq!(row.iter().filter(|&&v| v == 1.0).count(), 1);
            assert_eq!(row.iter().filter(|&&v| v == 0.0).count(), row.len() - 1);
            assert_eq!(a.side(i), b.side(i));
            // Groups are deterministic in the label for this builder.
            assert_eq!(a.side(i), Some(a.label(i) / 2));
        }
    }

    #[test]
    fn empirical_frequencies_match_table() {
        // Chi-squared sanity at n = 1e5: statistic stays below the p=0.001
        // critical value for the joint (x, y) cell counts.
        let spec = DiscreteTaskSpec::new(
            vec![0.3, 0.7],
            vec![vec![0.6, 0.3, 0.1], vec![0.2, 0.2, 0.6]],
        )
        .unwrap();
        let n = 100_000;
        let ds = gen_discrete_task(&spec, n, RngSeed(11)).unwrap();
        let mut counts = [[0usize; 3]; 2];
        for i in 0..ds.len() {
            let x = DiscreteTaskSpec::context_of(ds.feature_row(i));
            counts[x][ds.label(i)] += 1;
        }
        let mut chi2 = 0.0;
        for x in 0..2 {
            for y in 0..3 {
                let expect = n as f64 * spec.marginal_x[x] * spec.cond_y_given_x[x][y];
                let diff = counts[x][y] as f64 - expect;
                chi2 += diff * diff / expect;
            }
        }
        // 5 degrees of freedom, p = 0.001 critical value is 20.5.
        assert!(chi2 < 20.5, "chi2 = {chi2}");
    }

    #[test]
    fn invalid_tables_rejected() {
        assert!(DiscreteTaskSpec::new(vec![0.5, 0.6], vec![vec![1.0], vec![1.0]]).is_err());
        assert!(DiscreteTaskSpec::new(vec![1.0], vec![vec![0.7, 0.2]]).is_err());
    }
}
