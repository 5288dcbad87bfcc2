//! Run configuration.
//!
//! The on-disk format is flat TOML (`key = value` lines, no tables). Every key
//! is optional; missing keys take the defaults below, unknown keys are
//! rejected.
//!
//! | key | default | meaning |
//! |---|---|---|
//! | `num_capsules` | 6 | part capsules M, the last one models the background |
//! | `embed_dim` | 512 | global embedding width F |
//! | `part_dim` | 512 | part embedding width D |
//! | `image_size` | 64 | square input side H = W |
//! | `lambda_per` | 0.5 | perceptual loss weight |
//! | `lambda_contra` | 1e-5 | contrastive loss weight |
//! | `lambda_sparse` | 0.1 | sparsity loss weight |
//! | `lambda_bg` | 0.1 | background loss weight |
//! | `tau` | 0.07 | contrastive temperature |
//! | `gamma` | 1.08 | background depth threshold |
//! | `depth_min`, `depth_max` | 0.9, 1.1 | canonical depth range |
//! | `learning_rate` | 1e-4 | Adam step size |
//! | `adam_beta1`, `adam_beta2` | 0.9, 0.999 | Adam moment decay |
//! | `epochs` | 60 | passes over the training split |
//! | `batch_size` | 16 | images per step |
//! | `one_hot_enabled` | true | per-dimension one-hot attention in the GDM |
//! | `contrastive_enabled` | true | include the contrastive term |
//! | `bg_far_band` | true | background target is `depth > gamma` (false: `depth < gamma`) |
//! | `pose_source` | "shape" | embedding that drives the pose head: shape, albedo or both |
//! | `vis_temperature` | 0.01 | soft visibility temperature (depth units) |
//! | `fov_degrees` | 10 | camera field of view |
//! | `sigma_floor` | 1e-4 | lower bound of confidence maps |
//! | `encoder_channels` | [16, 32, 32, 64, 64] | widths of the stride-2 encoder stages |
//! | `decoder_channels` | [32, 32, 16, 8, 8] | widths of the 2x decoder stages |
//! | `perceptual_channels` | [8, 16] | widths of the fixed perceptual feature extractor |
//! | `perceptual_weights` | unset | checkpoint with pre-trained extractor weights |
//! | `train_fraction`, `val_fraction` | 0.9, 0.05 | split ratios, the rest is test |
//! | `checkpoint_every` | 1000 | steps between checkpoints |
//! | `seed` | 0 | seed for initialization, splits and batching |

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("invalid config value for `{field}`: {reason}")]
    Invalid { field: &'static str, reason: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoseSource {
    Shape,
    Albedo,
    Both,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub num_capsules: usize,
    pub embed_dim: usize,
    pub part_dim: usize,
    pub image_size: usize,
    pub lambda_per: f32,
    pub lambda_contra: f32,
    pub lambda_sparse: f32,
    pub lambda_bg: f32,
    pub tau: f32,
    pub gamma: f32,
    pub depth_min: f32,
    pub depth_max: f32,
    pub learning_rate: f32,
    pub adam_beta1: f32,
    pub adam_beta2: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub one_hot_enabled: bool,
    pub contrastive_enabled: bool,
    pub bg_far_band: bool,
    pub pose_source: PoseSource,
    pub vis_temperature: f32,
    pub fov_degrees: f32,
    pub sigma_floor: f32,
    pub encoder_channels: Vec<usize>,
    pub decoder_channels: Vec<usize>,
    pub perceptual_channels: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub perceptual_weights: Option<String>,
    pub train_fraction: f32,
    pub val_fraction: f32,
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            num_capsules: 6,
            embed_dim: 512,
            part_dim: 512,
            image_size: 64,
            lambda_per: 0.5,
            lambda_contra: 1e-5,
            lambda_sparse: 0.1,
            lambda_bg: 0.1,
            tau: 0.07,
            gamma: 1.08,
            depth_min: 0.9,
            depth_max: 1.1,
            learning_rate: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            epochs: 60,
            batch_size: 16,
            one_hot_enabled: true,
            contrastive_enabled: true,
            bg_far_band: true,
            pose_source: PoseSource::Shape,
            vis_temperature: 0.01,
            fov_degrees: 10.0,
            sigma_floor: 1e-4,
            encoder_channels: vec![16, 32, 32, 64, 64],
            decoder_channels: vec![32, 32, 16, 8, 8],
            perceptual_channels: vec![8, 16],
            perceptual_weights: None,
            train_fraction: 0.9,
            val_fraction: 0.05,
            checkpoint_every: 1000,
            seed: 0,
        }
    }
}

fn invalid(field: &'static str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field,
        reason: reason.into(),
    }
}

impl Config {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: Config = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("flat config always serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.num_capsules < 2 {
            return Err(invalid("num_capsules", "need at least 2 (one is the background)"));
        }
        if self.num_capsules > 254 {
            return Err(invalid("num_capsules", "labels are stored in 8 bits"));
        }
        for (field, v) in [
            ("lambda_per", self.lambda_per),
            ("lambda_contra", self.lambda_contra),
            ("lambda_sparse", self.lambda_sparse),
            ("lambda_bg", self.lambda_bg),
            ("learning_rate", self.learning_rate),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(field, format!("must be a finite value >= 0, got {v}")));
            }
        }
        if !(self.tau > 0.0) {
            return Err(invalid("tau", format!("must be > 0, got {}", self.tau)));
        }
        if !(self.depth_min > 0.0 && self.depth_min < self.depth_max) {
            return Err(invalid(
                "depth_min",
                format!("need 0 < depth_min < depth_max, got [{}, {}]", self.depth_min, self.depth_max),
            ));
        }
        if !(self.gamma > self.depth_min && self.gamma < self.depth_max) {
            return Err(invalid(
                "gamma",
                format!(
                    "must lie strictly inside the depth range ({}, {}), got {}",
                    self.depth_min, self.depth_max, self.gamma
                ),
            ));
        }
        if self.embed_dim == 0 || self.part_dim == 0 {
            return Err(invalid("embed_dim", "embedding widths must be positive"));
        }
        if self.encoder_channels.len() < 5 || self.encoder_channels.contains(&0) {
            return Err(invalid("encoder_channels", "need at least 5 non-zero stages"));
        }
        if self.decoder_channels.len() < 5 || self.decoder_channels.contains(&0) {
            return Err(invalid("decoder_channels", "need at least 5 non-zero stages"));
        }
        if self.perceptual_channels.is_empty() || self.perceptual_channels.contains(&0) {
            return Err(invalid("perceptual_channels", "need at least one non-zero stage"));
        }
        let down = 1usize << self.encoder_channels.len();
        let up = 1usize << self.decoder_channels.len();
        if !self.image_size.is_multiple_of(down) || !self.image_size.is_multiple_of(up) {
            return Err(invalid(
                "image_size",
                format!("{} is not divisible by the encoder/decoder scale factors", self.image_size),
            ));
        }
        if self.image_size >> self.perceptual_channels.len() < 4 {
            return Err(invalid("perceptual_channels", "too many stages for the image size"));
        }
        if !(self.adam_beta1 >= 0.0 && self.adam_beta1 < 1.0) {
            return Err(invalid("adam_beta1", "must lie in [0, 1)"));
        }
        if !(self.adam_beta2 >= 0.0 && self.adam_beta2 < 1.0) {
            return Err(invalid("adam_beta2", "must lie in [0, 1)"));
        }
        if self.batch_size < 2 {
            return Err(invalid("batch_size", "the contrastive term needs at least 2 images"));
        }
        if !(self.vis_temperature > 0.0) {
            return Err(invalid("vis_temperature", "must be > 0"));
        }
        if !(self.fov_degrees > 0.0 && self.fov_degrees < 170.0) {
            return Err(invalid("fov_degrees", "must lie in (0, 170)"));
        }
        if !(self.sigma_floor > 0.0) {
            return Err(invalid("sigma_floor", "must be > 0"));
        }
        let split_ok = self.train_fraction > 0.0
            && self.val_fraction >= 0.0
            && self.train_fraction + self.val_fraction <= 1.0;
        if !split_ok {
            return Err(invalid("train_fraction", "split fractions must be non-negative and sum to <= 1"));
        }
        if self.checkpoint_every == 0 {
            return Err(invalid("checkpoint_every", "must be positive"));
        }
        Ok(())
    }

    /// Index of the capsule that models the background.
    pub fn background_capsule(&self) -> usize {
        self.num_capsules - 1
    }

    pub fn depth_mid(&self) -> f32 {
        0.5 * (self.depth_min + self.depth_max)
    }

    pub fn depth_half_range(&self) -> f32 {
        0.5 * (self.depth_max - self.depth_min)
    }

    /// SHA-256 of the canonical serialization, hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml_string().as_bytes());
        let mut out = String::with_capacity(64);
        for b in digest.iter() {
            write!(out, "{b:02x}").unwrap();
        }
        out
    }
}
