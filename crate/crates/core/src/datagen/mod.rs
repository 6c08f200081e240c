//! Synthetic task generators with analytic entropy oracles, plus loaders
//! for CSV, IDX image files and the crate's columnar binary format.

mod columnar;
mod csv_load;
mod discrete;
mod gmm;
mod idx;

pub use columnar::{load_columnar, save_columnar};
pub use csv_load::{load_csv, CsvSchema};
pub use discrete::{discrete_exact_entropy, gen_discrete_task, grouped_task, DiscreteTaskSpec};
pub use gmm::{gen_gaussian_mixture, gmm_cond_entropy_mc, gmm_posterior, GaussianMixtureSpec, McEstimate};
pub use idx::load_idx;
