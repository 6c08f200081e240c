//! JSON configuration documents, one schema per subcommand.
//!
//! A config is a single archived JSON file; command-line flags only
//! override the top-level `out` directory and `seed` field.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use ecp_core::datagen::{CsvSchema, DiscreteTaskSpec, GaussianMixtureSpec};
use ecp_core::diffsort::RelaxConfig;
use ecp_core::scores::ScoreSpec;
use ecp_core::training::{LossKind, ModelSpec};

/// Synthetic task or file-backed dataset source.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TaskSource {
    Gmm { spec: GaussianMixtureSpec, n: usize },
    GmmCircle { num_labels: usize, radius: f64, var: f64, n: usize },
    Discrete { spec: DiscreteTaskSpec, n: usize },
    Grouped { num_labels: usize, num_groups: usize, sharpness: f64, n: usize },
    Columnar { path: PathBuf },
    Csv { path: PathBuf, schema: CsvSchema },
    Idx { images: PathBuf, labels: PathBuf },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenDataConfig {
    pub task: TaskSource,
    pub seed: u64,
    /// Output path for the columnar dataset.
    pub out: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrateConfig {
    pub dataset: TaskSource,
    /// Model checkpoint path; omit to score with the uniform model.
    pub model: Option<PathBuf>,
    pub score: ScoreSpec,
    pub alpha: f64,
    pub cal_fraction: f64,
    pub seed: u64,
    pub out: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateConfig {
    pub dataset: TaskSource,
    pub model: Option<PathBuf>,
    pub score: ScoreSpec,
    pub alphas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub cal_fraction: f64,
    pub out_dir: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsConfig {
    pub dataset: TaskSource,
    pub model: Option<PathBuf>,
    pub score: ScoreSpec,
    pub alphas: Vec<f64>,
    pub delta: f64,
    pub cal_fraction: f64,
    pub seed: u64,
    pub out_dir: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SetsizeConfig {
    pub dataset: TaskSource,
    pub model: Option<PathBuf>,
    pub score: ScoreSpec,
    pub alphas: Vec<f64>,
    /// Cluster count for the quantizer.
    pub k: usize,
    pub kmeans_iters: usize,
    pub cal_fraction: f64,
    pub seed: u64,
    pub out_dir: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainCommandConfig {
    pub dataset: TaskSource,
    pub model_spec: ModelSpec,
    pub loss: LossKind,
    pub alpha_train: f64,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    pub epochs: usize,
    pub relax: RelaxConfig,
    #[serde(default)]
    pub class_weight: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    pub seed: u64,
    pub out_dir: PathBuf,
}

fn default_momentum() -> f64 {
    0.9
}

fn default_delta() -> f64 {
    0.05
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SideInfoConfig {
    pub dataset: TaskSource,
    pub model: Option<PathBuf>,
    /// "table" fits smoothed counts; "linear" trains the linear head.
    pub side_model: SideModelKind,
    pub score: ScoreSpec,
    pub alpha: f64,
    pub availabilities: Vec<f64>,
    pub seeds: Vec<u64>,
    pub cal_fraction: f64,
    pub mondrian: bool,
    pub out_dir: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SideModelKind {
    Table,
    Linear { epochs: usize, lr: f64 },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FedTrainConfig {
    pub dataset: TaskSource,
    pub model_spec: ModelSpec,
    pub devices: usize,
    pub dirichlet_conc: f64,
    pub rounds: usize,
    #[serde(default = "default_local_epochs")]
    pub local_epochs: usize,
    pub loss: LossKind,
    pub alpha_train: f64,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    pub relax: RelaxConfig,
    #[serde(default)]
    pub class_weight: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    /// Evaluation level for the per-round hard-SCP report.
    pub alpha_eval: f64,
    /// Held-out pool size generated alongside the training pool
    /// (synthetic sources only).
    pub heldout_n: usize,
    /// Personalization epochs for the final per-device report.
    #[serde(default = "default_personalize_epochs")]
    pub personalize_epochs: usize,
    /// Personalization learning rate; defaults to lr / 10.
    #[serde(default)]
    pub personalize_lr: Option<f64>,
    pub seed: u64,
    pub out_dir: PathBuf,
}

fn default_local_epochs() -> usize {
    1
}

fn default_personalize_epochs() -> usize {
    5
}

pub fn load_config<T: serde::de::DeserializeOwned>(path: &std::path::Path) -> Result<T, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("reading {}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("config {}: {e}", path.display()))
}
