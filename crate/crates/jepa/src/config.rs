//! The flat `key=value` training configuration: every hyperparameter of the
//! pretraining recipe plus masking/augmentation selectors and the seed.
//! Unknown keys are hard errors; the canonical serialization (sorted keys)
//! backs a digest that is stable under key reordering.

use crate::augment::{AugmentConfig, ViewStrategy};
use crate::error::{Error, Result};
use crate::masking::MaskStrategy;
use crate::model::ModelConfig;
use crate::transformer::BackboneConfig;
use sha2::{Digest, Sha256};
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    // model
    pub embed_dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub stem_mid_channels: usize,
    pub image_size: usize,
    // optimization
    pub epochs: usize,
    pub batch: usize,
    pub max_steps: usize, // 0 = run all epochs
    pub lr_start: f64,
    pub lr_peak: f64,
    pub lr_final: f64,
    pub warmup_epochs: usize,
    pub flat_fraction: f64,
    pub wd_start: f64,
    pub wd_end: f64,
    pub ema_start: f64,
    pub ema_end: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    // masking
    pub mask_strategy: MaskStrategy,
    pub mask_ratio: f64,
    // augmentation
    pub view_strategy: ViewStrategy,
    pub paired_views: bool,
    pub crop_area_min: f64,
    pub crop_area_max: f64,
    pub crop_aspect_min: f64,
    pub crop_aspect_max: f64,
    pub hflip_p: f64,
    pub jitter_brightness: f64,
    pub jitter_contrast: f64,
    pub jitter_saturation: f64,
    pub jitter_hue: f64,
    pub jitter_p: f64,
    pub grayscale_p: f64,
    pub blur_p: f64,
    pub blur_sigma_min: f64,
    pub blur_sigma_max: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let aug = AugmentConfig::default();
        TrainConfig {
            embed_dim: 384,
            blocks: 7,
            heads: 4,
            stem_mid_channels: 64,
            image_size: 224,
            epochs: 300,
            batch: 128,
            max_steps: 0,
            lr_start: 1e-6,
            lr_peak: 5e-4,
            lr_final: 1e-5,
            warmup_epochs: 40,
            flat_fraction: 0.72,
            wd_start: 0.04,
            wd_end: 0.4,
            ema_start: 0.996,
            ema_end: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            mask_strategy: MaskStrategy::Blockwise,
            mask_ratio: 0.6,
            view_strategy: ViewStrategy::Different,
            paired_views: false,
            crop_area_min: aug.area_min,
            crop_area_max: aug.area_max,
            crop_aspect_min: aug.aspect_min,
            crop_aspect_max: aug.aspect_max,
            hflip_p: aug.hflip_p,
            jitter_brightness: aug.jitter_brightness,
            jitter_contrast: aug.jitter_contrast,
            jitter_saturation: aug.jitter_saturation,
            jitter_hue: aug.jitter_hue,
            jitter_p: aug.jitter_p,
            grayscale_p: aug.grayscale_p,
            blur_p: aug.blur_p,
            blur_sigma_min: aug.blur_sigma_min,
            blur_sigma_max: aug.blur_sigma_max,
            seed: 0,
        }
    }
}

macro_rules! config_keys {
    ($($key:ident : $parse:ident),* $(,)?) => {
        fn set_key(cfg: &mut TrainConfig, key: &str, value: &str) -> Result<()> {
            match key {
                $(stringify!($key) => {
                    cfg.$key = $parse(key, value)?;
                    Ok(())
                })*
                _ => Err(Error::Config(format!("unknown config key {key:?}"))),
            }
        }

        fn key_value_pairs(cfg: &TrainConfig) -> Vec<(String, String)> {
            vec![
                $((stringify!($key).to_string(), render(&cfg.$key)),)*
            ]
        }
    };
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse().map_err(|_| Error::Config(format!("config key {key}: bad integer {v:?}")))
}

fn parse_u64(key: &str, v: &str) -> Result<u64> {
    v.parse().map_err(|_| Error::Config(format!("config key {key}: bad integer {v:?}")))
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.parse().map_err(|_| Error::Config(format!("config key {key}: bad number {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("config key {key}: bad bool {v:?}"))),
    }
}

fn parse_mask(key: &str, v: &str) -> Result<MaskStrategy> {
    v.parse().map_err(|_| Error::Config(format!("config key {key}: bad mask strategy {v:?}")))
}

fn parse_view(key: &str, v: &str) -> Result<ViewStrategy> {
    v.parse().map_err(|_| Error::Config(format!("config key {key}: bad view strategy {v:?}")))
}

trait Render {
    fn render(&self) -> String;
}

impl Render for usize {
    fn render(&self) -> String {
        self.to_string()
    }
}
impl Render for u64 {
    fn render(&self) -> String {
        self.to_string()
    }
}
impl Render for bool {
    fn render(&self) -> String {
        self.to_string()
    }
}
impl Render for f64 {
    // shortest round-trip float formatting keeps the canonical form stable
    fn render(&self) -> String {
        format!("{self}")
    }
}
impl Render for MaskStrategy {
    fn render(&self) -> String {
        match self {
            MaskStrategy::Blockwise => "blockwise".into(),
            MaskStrategy::Random => "random".into(),
        }
    }
}
impl Render for ViewStrategy {
    fn render(&self) -> String {
        match self {
            ViewStrategy::None => "none".into(),
            ViewStrategy::Same => "same".into(),
            ViewStrategy::Different => "different".into(),
        }
    }
}

fn render<R: Render>(v: &R) -> String {
    v.render()
}

config_keys! {
    embed_dim: parse_usize,
    blocks: parse_usize,
    heads: parse_usize,
    stem_mid_channels: parse_usize,
    image_size: parse_usize,
    epochs: parse_usize,
    batch: parse_usize,
    max_steps: parse_usize,
    lr_start: parse_f64,
    lr_peak: parse_f64,
    lr_final: parse_f64,
    warmup_epochs: parse_usize,
    flat_fraction: parse_f64,
    wd_start: parse_f64,
    wd_end: parse_f64,
    ema_start: parse_f64,
    ema_end: parse_f64,
    beta1: parse_f64,
    beta2: parse_f64,
    eps: parse_f64,
    mask_strategy: parse_mask,
    mask_ratio: parse_f64,
    view_strategy: parse_view,
    paired_views: parse_bool,
    crop_area_min: parse_f64,
    crop_area_max: parse_f64,
    crop_aspect_min: parse_f64,
    crop_aspect_max: parse_f64,
    hflip_p: parse_f64,
    jitter_brightness: parse_f64,
    jitter_contrast: parse_f64,
    jitter_saturation: parse_f64,
    jitter_hue: parse_f64,
    jitter_p: parse_f64,
    grayscale_p: parse_f64,
    blur_p: parse_f64,
    blur_sigma_min: parse_f64,
    blur_sigma_max: parse_f64,
    seed: parse_u64,
}

impl TrainConfig {
    /// Parse `key=value` lines; `#` starts a comment; blank lines ignored.
    /// Unknown or duplicate keys are errors that name the key.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected key=value, got {raw:?}",
                    lineno + 1
                )));
            };
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("duplicate config key {key:?}")));
            }
            set_key(&mut cfg, key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Canonical serialization: one `key=value` per line, keys sorted.
    pub fn canonical(&self) -> String {
        let mut pairs = key_value_pairs(self);
        pairs.sort();
        let mut out = String::new();
        for (k, v) in pairs {
            out.push_str(&k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    /// SHA-256 of the canonical form, hex-encoded.
    pub fn digest(&self) -> String {
        let hash = Sha256::digest(self.canonical().as_bytes());
        hash.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr_start > self.lr_peak {
            return Err(Error::Config("lr_start must not exceed lr_peak".into()));
        }
        if !(0.0..=1.0).contains(&self.flat_fraction) {
            return Err(Error::Config("flat_fraction must be in [0, 1]".into()));
        }
        for (name, v) in [("ema_start", self.ema_start), ("ema_end", self.ema_end)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must be in [0, 1]")));
            }
        }
        if self.ema_start > self.ema_end {
            return Err(Error::Config("ema schedule must be nondecreasing".into()));
        }
        if !(0.0 < self.mask_ratio && self.mask_ratio < 1.0) {
            return Err(Error::Config("mask_ratio must be in (0, 1)".into()));
        }
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::Config("epochs and batch must be positive".into()));
        }
        if self.warmup_epochs > self.epochs {
            return Err(Error::Config("warmup_epochs must not exceed epochs".into()));
        }
        if self.image_size % 16 != 0 {
            return Err(Error::Config(format!(
                "image_size {} not divisible by 16",
                self.image_size
            )));
        }
        self.backbone().validate()?;
        if self.embed_dim % 4 != 0 {
            return Err(Error::Config("embed_dim must be divisible by 4".into()));
        }
        self.augment().validate()
    }

    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            embed_dim: self.embed_dim,
            blocks: self.blocks,
            heads: self.heads,
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone(),
            stem_mid_channels: self.stem_mid_channels,
        }
    }

    pub fn augment(&self) -> AugmentConfig {
        AugmentConfig {
            area_min: self.crop_area_min,
            area_max: self.crop_area_max,
            aspect_min: self.crop_aspect_min,
            aspect_max: self.crop_aspect_max,
            hflip_p: self.hflip_p,
            jitter_brightness: self.jitter_brightness,
            jitter_contrast: self.jitter_contrast,
            jitter_saturation: self.jitter_saturation,
            jitter_hue: self.jitter_hue,
            jitter_p: self.jitter_p,
            grayscale_p: self.grayscale_p,
            blur_kernel: 9,
            blur_sigma_min: self.blur_sigma_min,
            blur_sigma_max: self.blur_sigma_max,
            blur_p: self.blur_p,
            mean: crate::augment::IMAGENET_MEAN,
            std: crate::augment::IMAGENET_STD,
            view_strategy: self.view_strategy,
        }
    }
}
