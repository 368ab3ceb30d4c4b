//! Run configuration shared by every pipeline stage.
//!
//! Defaults follow the published training settings (epochs, batch sizes,
//! group size, clip range, KL weight, reward weights) except the learning
//! rates, which are raised for the small model trained here; the published
//! rates are kept as constants. Unknown keys are rejected when a config file
//! is parsed.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub encoders: EncoderConfig,
    pub evidence: EvidenceConfig,
    pub model: ModelConfig,
    pub rewards: RewardConfig,
    pub annotation: AnnotationConfig,
    pub sft: SftConfig,
    pub self_train: SelfTrainConfig,
    pub grpo: GrpoConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            encoders: EncoderConfig::default(),
            evidence: EvidenceConfig::default(),
            model: ModelConfig::default(),
            rewards: RewardConfig::default(),
            annotation: AnnotationConfig::default(),
            sft: SftConfig::default(),
            self_train: SelfTrainConfig::default(),
            grpo: GrpoConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, self.to_toml())?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let e = &self.encoders;
        if e.cutoffs.is_empty() || e.cutoffs.iter().any(|&r| !(r > 0.0 && r < 1.0)) {
            return bad(format!("filter cutoffs must lie in (0, 1): {:?}", e.cutoffs));
        }
        if e.spectral_channels == 0 || e.pixel_channels == 0 {
            return bad("encoder channel counts must be positive".into());
        }
        let m = &self.model;
        if m.heads == 0 || m.d_model % m.heads != 0 {
            return bad(format!("d_model {} not divisible by {} heads", m.d_model, m.heads));
        }
        if m.layers == 0 || m.context < 8 {
            return bad("model needs at least one layer and a context of 8 tokens".into());
        }
        if self.evidence.dim == 0 || self.evidence.hidden == 0 {
            return bad("evidence dims must be positive".into());
        }
        if !(1..=8).contains(&self.annotation.k_roi) {
            return bad(format!("k_roi must be in 1..=8, got {}", self.annotation.k_roi));
        }
        if self.annotation.clients < 2 {
            return bad("consensus filtering needs at least 2 perception clients".into());
        }
        if !(0.0..=1.0).contains(&self.annotation.hallucination_rate) {
            return bad("hallucination_rate must be in [0, 1]".into());
        }
        if self.grpo.group < 2 {
            return bad("GRPO group size must be at least 2".into());
        }
        if self.grpo.batch == 0 || self.sft.batch == 0 || self.self_train.batch == 0 {
            return bad("batch sizes must be positive".into());
        }
        if self.self_train.candidates == 0 {
            return bad("rejection sampling needs at least one candidate".into());
        }
        for t in [self.grpo.temperature, self.self_train.temperature] {
            if !(t > 0.0) {
                return bad(format!("sampling temperature must be positive, got {t}"));
            }
        }
        if self.data.image_size < 8 {
            return bad("images must be at least 8x8".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub image_size: usize,
    pub train_samples: usize,
    /// Test samples per level (half REAL, half FAKE).
    pub test_per_level: usize,
    pub hair_absent_prob: f64,
    /// Amplitude of the fine skin texture present on every real face.
    pub texture_amplitude: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            train_samples: 2000,
            test_per_level: 100,
            hair_absent_prob: 0.15,
            texture_amplitude: 0.03,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// High-pass cutoffs as fractions of the Nyquist radius.
    pub cutoffs: Vec<f64>,
    pub spectral_channels: usize,
    pub pixel_channels: usize,
    /// Gain applied to noise-normalized band responses before the spectral backbone.
    pub band_gain: f64,
    pub freeze_spectral: bool,
    pub freeze_pixel: bool,
    pub use_spectral: bool,
    pub use_pixel: bool,
    /// Directory of precomputed pixel feature maps (`<id>.pgt`) replacing the conv stack.
    pub pixel_features_dir: Option<String>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            cutoffs: vec![0.25, 0.5, 0.75],
            spectral_channels: 8,
            pixel_channels: 8,
            band_gain: 1.0,
            freeze_spectral: true,
            freeze_pixel: true,
            use_spectral: true,
            use_pixel: true,
            pixel_features_dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvidenceConfig {
    pub dim: usize,
    pub hidden: usize,
    pub per_part_mlp: bool,
}

impl Default for EvidenceConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            hidden: 64,
            per_part_mlp: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub context: usize,
    /// Inject part evidence only inside the part-evidence block.
    pub stage_gate: bool,
    /// Replace every evidence embedding with zeros (vocabulary unchanged).
    pub zero_evidence: bool,
    pub init_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            layers: 2,
            heads: 4,
            mlp_ratio: 4,
            context: 512,
            stage_gate: true,
            zero_evidence: false,
            init_scale: 0.02,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    pub lambda_part: f64,
    pub lambda_cons: f64,
    pub lambda_fmt: f64,
    pub f1_weight: f64,
    pub existence_weight: f64,
    /// Planned parts allowed before the quantity penalty applies.
    pub quantity_free: usize,
    pub quantity_slope: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            lambda_part: 0.4,
            lambda_cons: 0.4,
            lambda_fmt: 0.2,
            f1_weight: 0.5,
            existence_weight: 0.5,
            quantity_free: 4,
            quantity_slope: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnnotationConfig {
    pub k_roi: usize,
    pub clients: usize,
    pub hallucination_rate: f64,
}

impl Default for AnnotationConfig {
    fn default() -> Self {
        Self {
            k_roi: 3,
            clients: 3,
            hallucination_rate: 0.2,
        }
    }
}

/// Published Stage 1 and Stage 2 learning rate.
pub const PUBLISHED_SFT_LR: f64 = 5e-5;
/// Published GRPO learning rate.
pub const PUBLISHED_GRPO_LR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SftConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub optimizer: OptimizerKind,
    /// Train the unfrozen encoder branches during supervised fine-tuning.
    pub train_encoders: bool,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            lr: 1e-3,
            batch: 1,
            optimizer: OptimizerKind::Adam,
            train_encoders: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelfTrainConfig {
    pub candidates: usize,
    pub temperature: f64,
    pub max_len: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub optimizer: OptimizerKind,
}

impl Default for SelfTrainConfig {
    fn default() -> Self {
        Self {
            candidates: 8,
            temperature: 1.0,
            max_len: 96,
            epochs: 1,
            lr: 1e-3,
            batch: 1,
            optimizer: OptimizerKind::Adam,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrpoConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub group: usize,
    pub temperature: f64,
    pub clip: f64,
    pub beta: f64,
    /// Optimizer passes over each batch of rollouts.
    pub inner_epochs: usize,
    pub max_len: usize,
    pub optimizer: OptimizerKind,
    pub train_encoders: bool,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            lr: 1e-4,
            batch: 8,
            group: 8,
            temperature: 1.0,
            clip: 0.2,
            beta: 0.04,
            inner_epochs: 1,
            max_len: 96,
            optimizer: OptimizerKind::Adam,
            train_encoders: false,
        }
    }
}
