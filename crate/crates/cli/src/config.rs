//! The JSON run configuration shared by every subcommand. Unknown keys are
//! rejected at every nesting level.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use gliomkit::net::{NetSpec, OptimizerConfig, TrainConfig};
use gliomkit::phantom::PhantomConfig;
use gliomkit::radiomics::FeatureSpec;
use gliomkit::segmetrics::{Connectivity, TumorCoreMode};
use gliomkit::survival::{ModelConfig, ModelKind};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NetPreset {
    /// Four 8-channel blocks, one pool, every block tapped, 32-wide head.
    #[default]
    Toy,
    PaperScale,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub preset: NetPreset,
    /// Inline architecture; takes precedence over `preset`.
    pub spec: Option<NetSpec>,
    /// Forces batch norm on or off in every block.
    pub batch_norm: Option<bool>,
}

impl NetConfig {
    pub fn resolve(&self) -> NetSpec {
        let mut spec = self.spec.clone().unwrap_or_else(|| match self.preset {
            NetPreset::Toy => NetSpec::toy(&[8, 8, 8, 8], true, 32),
            NetPreset::PaperScale => NetSpec::paper_scale(),
        });
        if let Some(bn) = self.batch_norm {
            for b in &mut spec.blocks {
                b.batch_norm = bn;
            }
        }
        spec
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub pixels_per_image: usize,
    pub batch: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            pixels_per_image: 2000,
            batch: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Cohort root: one directory per subject.
    pub cohort_dir: Option<PathBuf>,
    /// Restricts the cohort to these ids.
    pub subjects: Option<Vec<String>>,
    /// Held-out cohort scored after every training epoch.
    pub validation_dir: Option<PathBuf>,
    /// Directory of `<id>_pred.nii.gz` segmentations.
    pub labels_dir: Option<PathBuf>,
    /// Cohort CSV with `BraTS18ID, Age, Survival`.
    pub survival_csv: Option<PathBuf>,
    pub features_csv: Option<PathBuf>,
    pub predictions_csv: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub seed: u64,

    pub net: NetConfig,
    pub sampler: SamplerConfig,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub flip_augment: bool,
    /// Also write a checkpoint every this many epochs (0: final only).
    pub checkpoint_every: usize,
    /// Stop once every tumor label reaches this validation Dice.
    pub target_dice: Option<f64>,

    pub largest_component: bool,
    pub connectivity: Connectivity,
    pub region_merge: TumorCoreMode,

    /// `paper50` or `all`.
    pub features: String,

    pub model_kind: ModelKind,
    /// Model kinds for a comparison run; empty means `model_kind` alone.
    pub compare: Vec<ModelKind>,
    pub survival: ModelConfig,
    /// Held-out share for comparison runs in `surv-eval`.
    pub holdout_fraction: f64,
    pub folds: usize,

    pub phantom: PhantomConfig,
    pub n_subjects: usize,
    pub first_index: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            cohort_dir: None,
            subjects: None,
            validation_dir: None,
            labels_dir: None,
            survival_csv: None,
            features_csv: None,
            predictions_csv: None,
            checkpoint: None,
            model: None,
            out_dir: None,
            seed: 0,
            net: NetConfig::default(),
            sampler: SamplerConfig::default(),
            optimizer: OptimizerConfig::default(),
            epochs: 20,
            flip_augment: true,
            checkpoint_every: 0,
            target_dice: None,
            largest_component: true,
            connectivity: Connectivity::default(),
            region_merge: TumorCoreMode::default(),
            features: "paper50".into(),
            model_kind: ModelKind::Ann,
            compare: Vec::new(),
            survival: ModelConfig::default(),
            holdout_fraction: 0.2,
            folds: 5,
            phantom: PhantomConfig::default(),
            n_subjects: 50,
            first_index: 0,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> anyhow::Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| anyhow::anyhow!("invalid config: {e}"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("config {}", path.display()))
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if FeatureSpec::by_name(&self.features).is_none() {
            bail!("key `features`: unknown feature spec {:?} (expected paper50 or all)", self.features);
        }
        if self.sampler.pixels_per_image == 0 || self.sampler.batch == 0 {
            bail!("key `sampler`: pixels_per_image and batch must be positive");
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            bail!("key `holdout_fraction`: must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn feature_spec(&self) -> FeatureSpec {
        FeatureSpec::by_name(&self.features).expect("validated")
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            pixels_per_image: self.sampler.pixels_per_image,
            batch_size: self.sampler.batch,
            epochs: self.epochs,
            optimizer: self.optimizer,
            flip_augment: self.flip_augment,
            seed: self.seed,
        }
    }

    pub fn kinds(&self) -> Vec<ModelKind> {
        if self.compare.is_empty() {
            vec![self.model_kind]
        } else {
            self.compare.clone()
        }
    }
}

pub fn require<'a>(v: &'a Option<PathBuf>, key: &str) -> anyhow::Result<&'a Path> {
    v.as_deref().with_context(|| format!("config key `{key}` is required for this command"))
}
