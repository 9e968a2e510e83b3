//! The declarative run configuration: a TOML file with dataset, model,
//! train, augment, eval, and output sections. Every field has a default, so
//! a minimal config is just a dataset source and an output directory.
//! Command-line flags override file values; the fully resolved config is
//! written next to the outputs for provenance.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use facehash_core::augment::AugmentationPolicy;
use facehash_core::evalkit::EvalSettings;
use facehash_core::losses::LossWeights;
use facehash_core::netcore::{BackboneScale, ModelConfig};
use facehash_core::trainer::{AdamParams, TermMask, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic,
    Folder,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub source: DatasetSource,
    /// Folder root for `source = "folder"`.
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default = "default_identities")]
    pub identities: usize,
    #[serde(default = "default_images_per_identity")]
    pub images_per_identity: usize,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    #[serde(default = "default_queries_per_identity")]
    pub queries_per_identity: usize,
    #[serde(default)]
    pub data_seed: u64,
    #[serde(default)]
    pub split_seed: u64,
    /// Optional directory to export the generated dataset as PNGs.
    #[serde(default)]
    pub export_images: Option<PathBuf>,
}

fn default_identities() -> usize {
    10
}
fn default_images_per_identity() -> usize {
    50
}
fn default_image_size() -> usize {
    32
}
fn default_queries_per_identity() -> usize {
    5
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            source: DatasetSource::Synthetic,
            path: None,
            identities: default_identities(),
            images_per_identity: default_images_per_identity(),
            image_size: default_image_size(),
            queries_per_identity: default_queries_per_identity(),
            data_seed: 0,
            split_seed: 0,
            export_images: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_backbone")]
    pub backbone: BackboneScale,
    #[serde(default = "default_code_bits")]
    pub code_bits: usize,
    /// Defaults depend on the backbone: 512 for paper, 128 for tiny.
    #[serde(default)]
    pub latent_dim: Option<usize>,
    #[serde(default = "default_projection_dim")]
    pub projection_dim: usize,
}

fn default_backbone() -> BackboneScale {
    BackboneScale::Tiny
}
fn default_code_bits() -> usize {
    16
}
fn default_projection_dim() -> usize {
    128
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            backbone: default_backbone(),
            code_bits: default_code_bits(),
            latent_dim: None,
            projection_dim: default_projection_dim(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_lr_decay")]
    pub lr_decay: f64,
    #[serde(default = "default_lr_decay_every")]
    pub lr_decay_every: usize,
    #[serde(default = "default_lambda1")]
    pub lambda1: f64,
    #[serde(default = "default_lambda2")]
    pub lambda2: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
}

fn default_epochs() -> usize {
    100
}
fn default_batch_size() -> usize {
    256
}
fn default_learning_rate() -> f64 {
    0.001
}
fn default_lr_decay() -> f64 {
    0.9
}
fn default_lr_decay_every() -> usize {
    50
}
fn default_lambda1() -> f64 {
    0.0002
}
fn default_lambda2() -> f64 {
    0.05
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_epsilon() -> f64 {
    1e-8
}
fn default_checkpoint_every() -> usize {
    10
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            learning_rate: default_learning_rate(),
            lr_decay: default_lr_decay(),
            lr_decay_every: default_lr_decay_every(),
            lambda1: default_lambda1(),
            lambda2: default_lambda2(),
            seed: 0,
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_epsilon(),
            checkpoint_every: default_checkpoint_every(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "default_map_cutoff")]
    pub map_cutoff: usize,
    #[serde(default = "default_hamming_radius")]
    pub hamming_radius: u32,
    #[serde(default = "default_top_m")]
    pub top_m: Vec<usize>,
}

fn default_map_cutoff() -> usize {
    50
}
fn default_hamming_radius() -> u32 {
    2
}
fn default_top_m() -> Vec<usize> {
    vec![1, 5, 10, 20, 50]
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            map_cutoff: default_map_cutoff(),
            hamming_radius: default_hamming_radius(),
            top_m: default_top_m(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub augment: AugmentationPolicy,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub output: OutputSection,
}

/// Flag overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub bits: Option<usize>,
    pub output: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("cannot parse config {}: {e}", path.display()))
    }

    pub fn apply(&mut self, ov: &Overrides) {
        if let Some(seed) = ov.seed {
            self.train.seed = seed;
            self.dataset.data_seed = seed;
            self.dataset.split_seed = seed;
        }
        if let Some(epochs) = ov.epochs {
            self.train.epochs = epochs;
        }
        if let Some(batch) = ov.batch_size {
            self.train.batch_size = batch;
        }
        if let Some(lr) = ov.learning_rate {
            self.train.learning_rate = lr;
        }
        if let Some(bits) = ov.bits {
            self.model.code_bits = bits;
        }
        if let Some(out) = &ov.output {
            self.output.dir = out.clone();
        }
    }

    /// Collect every violation instead of stopping at the first.
    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        let d = &self.dataset;
        match d.source {
            DatasetSource::Folder => match &d.path {
                None => problems.push("dataset.path is required when dataset.source = \"folder\"".into()),
                Some(p) if !p.is_dir() => {
                    problems.push(format!("dataset.path {} is not a directory", p.display()))
                }
                _ => {}
            },
            DatasetSource::Synthetic => {
                if d.identities < 2 {
                    problems.push("dataset.identities must be at least 2".into());
                }
                if d.images_per_identity < 2 {
                    problems.push("dataset.images_per_identity must be at least 2".into());
                }
                if d.images_per_identity <= d.queries_per_identity {
                    problems.push(format!(
                        "dataset.images_per_identity ({}) must exceed dataset.queries_per_identity ({})",
                        d.images_per_identity, d.queries_per_identity
                    ));
                }
            }
        }
        if d.queries_per_identity == 0 {
            problems.push("dataset.queries_per_identity must be at least 1".into());
        }
        if d.image_size < 8 {
            problems.push("dataset.image_size must be at least 8".into());
        }

        if let Err(e) = self.model_config(2).and_then(|c| c.validate().map(|_| c)) {
            problems.push(format!("model: {e}"));
        }
        if let Err(e) = self.train_config().validate() {
            problems.push(format!("train: {e}"));
        }
        if let Err(e) = self.augment.validate() {
            problems.push(format!("augment: {e}"));
        }
        if let Err(e) = self.eval_settings().validate() {
            problems.push(format!("eval: {e}"));
        }
        problems
    }

    pub fn model_config(&self, identity_count: usize) -> facehash_core::Result<ModelConfig> {
        let latent = self.model.latent_dim.unwrap_or(match self.model.backbone {
            BackboneScale::Paper => 512,
            BackboneScale::Tiny => 128,
        });
        Ok(ModelConfig {
            backbone: self.model.backbone,
            input_size: self.dataset.image_size,
            code_bits: self.model.code_bits,
            identity_count,
            latent_dim: latent,
            projection_dim: self.model.projection_dim,
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            lr_decay: t.lr_decay,
            lr_decay_every: t.lr_decay_every,
            weights: LossWeights {
                lambda1: t.lambda1,
                lambda2: t.lambda2,
            },
            seed: t.seed,
            adam: AdamParams {
                beta1: t.beta1,
                beta2: t.beta2,
                epsilon: t.epsilon,
            },
            terms: TermMask::default(),
        }
    }

    pub fn eval_settings(&self) -> EvalSettings {
        EvalSettings {
            map_cutoff: self.eval.map_cutoff,
            hamming_radius: self.eval.hamming_radius,
            top_m: self.eval.top_m.clone(),
        }
    }

    /// Serialize the resolved config for provenance.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_paper_values() {
        let cfg: RunConfig = toml::from_str("").unwrap();
        assert_eq!(cfg.train.lambda1, 0.0002);
        assert_eq!(cfg.train.lambda2, 0.05);
        assert_eq!(cfg.train.learning_rate, 0.001);
        assert_eq!(cfg.train.batch_size, 256);
        assert_eq!(cfg.train.lr_decay, 0.9);
        assert_eq!(cfg.train.lr_decay_every, 50);
        assert_eq!(cfg.augment, AugmentationPolicy::default());
    }

    #[test]
    fn folder_source_requires_path() {
        let cfg: RunConfig = toml::from_str("[dataset]\nsource = \"folder\"\n").unwrap();
        let problems = cfg.validate();
        assert!(problems.iter().any(|p| p.contains("dataset.path")), "{problems:?}");
    }

    #[test]
    fn violations_are_collected_not_short_circuited() {
        let cfg: RunConfig = toml::from_str(
            "[dataset]\nsource = \"synthetic\"\nidentities = 1\nimage_size = 4\n\n[train]\nepochs = 0\n",
        )
        .unwrap();
        let problems = cfg.validate();
        assert!(problems.len() >= 3, "want all violations listed: {problems:?}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<RunConfig>("[train]\nlearning_rte = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("learning_rte"));
    }

    #[test]
    fn roundtrips_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back.train.lambda2, cfg.train.lambda2);
        assert_eq!(back.augment, cfg.augment);
    }
}
