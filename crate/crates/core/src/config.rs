//! Run configuration, read from and written to TOML.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::{ExtractorConfig, GroupSpec, ToyVitConfig};
use crate::error::{Error, IoContext, Result};
use crate::inp::CoherenceMode;
use crate::metrics::MetricOptions;
use crate::optim::OptimizerConfig;
use crate::synthesis::PerlinRecipe;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// One model per category.
    SingleClass,
    /// One model for every category at once.
    MultiClass,
    /// Multi-class over `few_shot.shots` normals per category.
    FewShot,
    /// Multi-class with `semi_supervised.anomalies` real defects per category
    /// moved from test into training.
    SemiSupervised,
    /// Train on `categories`, evaluate prototype distance maps on
    /// `target_categories`.
    ZeroShotEval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    /// One normal-pattern step, then one segmentation step, per iteration.
    Interleaved,
    /// All normal-pattern steps first, then all segmentation steps.
    TwoPhase,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResidualConfig {
    pub enabled: bool,
    pub stop_gradient: bool,
    pub schedule: Schedule,
    /// Share of each segmentation batch that is anomalous.
    pub anomaly_fraction: f64,
    pub synthesis: PerlinRecipe,
    /// Blend textures; procedural patterns when unset.
    pub texture_dir: Option<PathBuf>,
}

impl Default for ResidualConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            stop_gradient: true,
            schedule: Schedule::Interleaved,
            anomaly_fraction: 0.5,
            synthesis: PerlinRecipe::default(),
            texture_dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FewShotConfig {
    pub shots: usize,
    /// Augmented views per selected image.
    pub expansion: usize,
    /// Largest translation in pixels.
    pub max_shift: i32,
}

impl Default for FewShotConfig {
    fn default() -> Self {
        Self { shots: 4, expansion: 8, max_shift: 4 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SemiSupervisedConfig {
    pub anomalies: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    /// Categories to train on; empty means all.
    pub categories: Vec<String>,
    pub target_categories: Vec<String>,
    pub seed: u64,
    pub prototypes: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub coherence: CoherenceMode,
    pub decoder_layers: usize,
    pub groups: GroupSpec,
    pub resize: usize,
    pub crop: usize,
    pub epochs: usize,
    /// Overrides `epochs` when set.
    pub steps: Option<usize>,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    /// Linear warmup steps before the constant learning rate.
    pub warmup_steps: usize,
    pub extractor: ExtractorConfig,
    pub residual: ResidualConfig,
    pub few_shot: FewShotConfig,
    pub semi_supervised: SemiSupervisedConfig,
    pub metrics: MetricOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::MultiClass,
            categories: Vec::new(),
            target_categories: Vec::new(),
            seed: 0,
            prototypes: 6,
            gamma: 3.0,
            lambda: 0.2,
            coherence: CoherenceMode::Soft,
            decoder_layers: 8,
            groups: GroupSpec {
                encoder: vec![vec![3, 4, 5, 6], vec![7, 8, 9, 10]],
                decoder: vec![vec![1, 2, 3, 4], vec![5, 6, 7, 8]],
            },
            resize: 448,
            crop: 392,
            epochs: 200,
            steps: None,
            batch_size: 16,
            optimizer: OptimizerConfig::default(),
            warmup_steps: 0,
            extractor: ExtractorConfig::Pretrained { name: "dinov2-reg-vit-base-14".into() },
            residual: ResidualConfig::default(),
            few_shot: FewShotConfig::default(),
            semi_supervised: SemiSupervisedConfig::default(),
            metrics: MetricOptions::default(),
        }
    }
}

impl RunConfig {
    /// Small settings for the bundled synthetic dataset and toy encoder.
    pub fn desk() -> Self {
        let mut residual = ResidualConfig::default();
        residual.synthesis.mask.min_scale = 1;
        residual.synthesis.mask.max_scale = 4;
        Self {
            groups: GroupSpec {
                encoder: vec![vec![1, 2, 3, 4], vec![5, 6, 7, 8]],
                decoder: vec![vec![1, 2, 3, 4], vec![5, 6, 7, 8]],
            },
            resize: 64,
            crop: 56,
            steps: Some(500),
            optimizer: OptimizerConfig { lr: 2e-3, ..OptimizerConfig::default() },
            warmup_steps: 20,
            extractor: ExtractorConfig::ToyVit(ToyVitConfig { patch: 4, dim: 16, layers: 8, ..ToyVitConfig::default() }),
            residual,
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path).at(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()).at(path)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.prototypes == 0 {
            return bad("prototypes must be positive".into());
        }
        if self.gamma < 0.0 || self.lambda < 0.0 {
            return bad(format!("gamma {} and lambda {} must be nonnegative", self.gamma, self.lambda));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.crop > self.resize {
            return bad(format!("crop {} larger than resize {}", self.crop, self.resize));
        }
        if let Some(k) = self.extractor.patch_size() {
            if self.crop % k != 0 {
                return bad(format!("crop {} is not a multiple of patch size {k}", self.crop));
            }
        }
        if !(0.0..=1.0).contains(&self.residual.anomaly_fraction) {
            return bad("residual.anomaly_fraction must lie in [0, 1]".into());
        }
        if self.mode == Mode::ZeroShotEval && self.target_categories.is_empty() {
            return bad("zero-shot-eval needs target_categories".into());
        }
        if self.mode == Mode::FewShot && (self.few_shot.shots == 0 || self.few_shot.expansion == 0) {
            return bad("few_shot.shots and few_shot.expansion must be positive".into());
        }
        let deepest = self.groups.encoder_layers().into_iter().max().unwrap_or(0);
        self.groups.validate(deepest, self.decoder_layers)?;
        Ok(())
    }

    /// Total normal-pattern steps for a training set of `n` images.
    pub fn total_steps(&self, n: usize) -> usize {
        self.steps.unwrap_or_else(|| self.epochs * n.div_ceil(self.batch_size))
    }
}
