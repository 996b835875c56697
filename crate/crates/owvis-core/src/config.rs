//! Run configuration: one plain JSON document covering model dimensions,
//! objectness/pseudo-label knobs, loss weights, the training schedule and
//! data paths. Every output artifact embeds the fingerprint of the config
//! that produced it; evaluation refuses mixed fingerprints.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ModelConfig {
    /// Shared latent dimension of all feature scales and queries.
    pub d: usize,
    /// Number of instance queries.
    pub queries: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Channels of the dynamic-kernel mask head.
    pub mask_dim: usize,
    /// Widths of the five backbone stages (1/2 .. 1/32).
    pub backbone_channels: Vec<usize>,
    /// Output channels of the first ScratchNet stage (second stage is `d`).
    pub scratch_mid_channels: usize,
    /// Frame-index embedding table size; clips may not exceed this length.
    pub max_frames: usize,
    pub enable_scratch: bool,
    pub enable_fusion: bool,
    pub enable_sto: bool,
    pub freeze_backbone: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 256,
            queries: 300,
            enc_layers: 6,
            dec_layers: 6,
            heads: 8,
            ffn_dim: 1024,
            mask_dim: 16,
            backbone_channels: vec![32, 64, 128, 192, 256],
            scratch_mid_channels: 128,
            max_frames: 64,
            enable_scratch: true,
            enable_fusion: true,
            enable_sto: true,
            freeze_backbone: false,
        }
    }
}

impl ModelConfig {
    /// Toy dimensions for desk-scale runs and tests.
    pub fn desk() -> Self {
        ModelConfig {
            d: 64,
            queries: 20,
            enc_layers: 2,
            dec_layers: 2,
            heads: 4,
            ffn_dim: 128,
            mask_dim: 16,
            backbone_channels: vec![16, 32, 64, 96, 128],
            scratch_mid_channels: 32,
            max_frames: 16,
            ..Default::default()
        }
    }

    /// Disable the contributions (ScratchNet scale, encoder fusion, STO)
    /// leaving the plain pipeline with backbone-activation pseudo-labels.
    pub fn baseline_variant(mut self) -> Self {
        self.enable_scratch = false;
        self.enable_fusion = false;
        self.enable_sto = false;
        self
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct StoParams {
    /// Number of pseudo-unknown instances selected per clip.
    pub p_u: usize,
    /// Normalize foreground/background score sums by set size (study
    /// variant; the default keeps raw sums).
    pub normalize_scores: bool,
}

impl Default for StoParams {
    fn default() -> Self {
        StoParams { p_u: 5, normalize_scores: false }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct LossParams {
    /// Weight of the class-agnostic objectness loss.
    pub alpha: f64,
    /// Focal focusing parameter.
    pub gamma: f64,
    /// Focal positive-class weight.
    pub alpha_f: f64,
    pub w_cls: f64,
    pub w_box: f64,
    pub w_giou: f64,
    /// Replace the dice+focal mask loss with a literal L1 on mask
    /// probabilities.
    pub literal_l1_mask: bool,
}

impl Default for LossParams {
    fn default() -> Self {
        LossParams {
            alpha: 1.0,
            gamma: 2.0,
            alpha_f: 0.25,
            w_cls: 2.0,
            w_box: 5.0,
            w_giou: 2.0,
            literal_l1_mask: false,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ScheduleParams {
    pub task1_epochs: usize,
    pub task2_epochs: usize,
    pub finetune_epochs: usize,
    pub learning_rate: f64,
    pub grad_clip: f64,
    /// Exemplar clips kept per known category for replay finetuning.
    pub exemplars_per_class: usize,
    /// Training clip length M.
    pub clip_len: usize,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        ScheduleParams {
            task1_epochs: 18,
            task2_epochs: 12,
            finetune_epochs: 2,
            learning_rate: 1e-4,
            grad_clip: 1.0,
            exemplars_per_class: 20,
            clip_len: 5,
        }
    }
}

impl ScheduleParams {
    pub fn validate(&self) -> Result<()> {
        if self.task1_epochs == 0
            || self.task2_epochs == 0
            || self.finetune_epochs == 0
            || self.learning_rate <= 0.0
            || self.clip_len == 0
            || self.exemplars_per_class == 0
        {
            return Err(Error::Config("schedule values must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct InferParams {
    /// Known and unknown detections kept per clip.
    pub top_k: usize,
    /// Score threshold filtering final detections.
    pub score_threshold: f64,
}

impl Default for InferParams {
    fn default() -> Self {
        InferParams { top_k: 10, score_threshold: 0.05 }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DataPaths {
    pub annotations: Option<String>,
    pub split: Option<String>,
    pub output_dir: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub sto: StoParams,
    pub loss: LossParams,
    pub schedule: ScheduleParams,
    pub infer: InferParams,
    pub data: DataPaths,
    pub seed: u64,
    pub deterministic: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            sto: StoParams::default(),
            loss: LossParams::default(),
            schedule: ScheduleParams::default(),
            infer: InferParams::default(),
            data: DataPaths::default(),
            seed: 0,
            deterministic: true,
        }
    }
}

impl RunConfig {
    /// Desk-scale preset used by the end-to-end experiments and tests.
    /// `p_u` is raised so the contrastive foreground set (matched +
    /// pseudo-unknown) roughly balances the background set at q=20.
    pub fn desk(seed: u64) -> Self {
        RunConfig {
            model: ModelConfig::desk(),
            sto: StoParams { p_u: 7, normalize_scores: false },
            schedule: ScheduleParams {
                task1_epochs: 80,
                task2_epochs: 48,
                finetune_epochs: 8,
                learning_rate: 1e-3,
                exemplars_per_class: 2,
                clip_len: 3,
                ..Default::default()
            },
            infer: InferParams { top_k: 3, score_threshold: 0.05 },
            seed,
            ..Default::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("bad config: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Hash of the canonical JSON form (object keys sorted).
    pub fn fingerprint(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        fingerprint_value(&value)
    }

    pub fn schedule_fingerprint(&self) -> String {
        let value = serde_json::to_value(&self.schedule).expect("schedule serializes");
        fingerprint_value(&value)
    }

    /// Apply a `--set key.path=value` style override. The value is parsed
    /// as JSON when possible and treated as a string otherwise.
    pub fn with_override(&self, dotted: &str, raw: &str) -> Result<Self> {
        let mut value = serde_json::to_value(self).expect("config serializes");
        let parsed: serde_json::Value =
            serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        let mut cursor = &mut value;
        let parts: Vec<&str> = dotted.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let map = cursor
                .as_object_mut()
                .ok_or_else(|| Error::Config(format!("`{dotted}`: `{part}` is not an object")))?;
            if i + 1 == parts.len() {
                if !map.contains_key(*part) {
                    return Err(Error::Config(format!("unknown config key `{dotted}`")));
                }
                map.insert(part.to_string(), parsed);
                break;
            }
            cursor = map
                .get_mut(*part)
                .ok_or_else(|| Error::Config(format!("unknown config key `{dotted}`")))?;
        }
        serde_json::from_value(value).map_err(|e| Error::Config(format!("bad override: {e}")))
    }
}

/// Fingerprint of any JSON value in canonical (sorted-key, compact) form.
pub fn fingerprint_value(value: &serde_json::Value) -> String {
    let canonical = serde_json::to_string(value).expect("value serializes");
    let mut hasher = Sha256::new();
    hasher.update(canonical.as_bytes());
    let digest = hasher.finalize();
    let mut hex = String::with_capacity(16);
    for b in digest.iter().take(8) {
        hex.push_str(&format!("{b:02x}"));
    }
    hex
}
