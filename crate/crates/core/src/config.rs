//! Run configuration: a TOML file with a preset plus sectioned overrides.
//!
//! `preset = "paper"` pins the published recipe (batch 2, 45 epochs, 5 warmup
//! epochs, lr 6e-4 with the encoder at 6e-5, weight decay 0.01, 1024 crops).
//! `preset = "desk"` is the same pipeline scaled to CPU minutes: 64x64 crops,
//! batch 4, up to 300 epochs. Explicit keys always win over the preset.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::data::augment::AugmentationConfig;
use crate::data::manifest::DEFAULT_IGNORE;
use crate::decoder::FuseMode;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Variant};
use crate::trainer::TrainOptions;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Paper,
    Desk,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    preset: String,
    seed: Option<u64>,
    out_dir: Option<String>,
    data: RawData,
    #[serde(default)]
    model: RawModel,
    #[serde(default)]
    train: RawTrain,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawData {
    train_manifest: String,
    val_manifest: Option<String>,
    classes: usize,
    ignore: Option<u32>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    input_size: Option<usize>,
    d_dec: Option<usize>,
    state_size: Option<usize>,
    scan_2d: Option<bool>,
    variant: Option<String>,
    fuse: Option<String>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTrain {
    batch_size: Option<usize>,
    max_epochs: Option<usize>,
    lr_decoder: Option<f64>,
    lr_encoder: Option<f64>,
    weight_decay: Option<f64>,
    warmup_epochs: Option<usize>,
    patience: Option<usize>,
    crop: Option<usize>,
    hflip_p: Option<f64>,
    vflip_p: Option<f64>,
    scale_min: Option<f64>,
    scale_max: Option<f64>,
    mosaic_p: Option<f64>,
}

/// Fully resolved run description; every field concrete.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub train_manifest: PathBuf,
    pub val_manifest: Option<PathBuf>,
    pub classes: usize,
    pub ignore: u32,
    pub model: ModelConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub lr_decoder: f64,
    pub lr_encoder: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub patience: usize,
    pub augment: AugmentationConfig,
}

struct PresetDefaults {
    input_size: usize,
    batch_size: usize,
    max_epochs: usize,
    crop: usize,
}

impl Preset {
    pub fn label(self) -> &'static str {
        match self {
            Preset::Paper => "paper",
            Preset::Desk => "desk",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            other => Err(Error::Config(format!("unknown preset {other:?}, expected paper|desk"))),
        }
    }

    fn defaults(self) -> PresetDefaults {
        match self {
            Preset::Paper => PresetDefaults {
                input_size: 1024,
                batch_size: 2,
                max_epochs: 45,
                crop: 1024,
            },
            Preset::Desk => PresetDefaults {
                input_size: 64,
                batch_size: 4,
                max_epochs: 300,
                crop: 64,
            },
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let raw: RawConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("run config: {e}")))?;
        let preset = Preset::parse(&raw.preset)?;
        let d = preset.defaults();

        let variant = match raw.model.variant.as_deref() {
            None => Variant::Full,
            Some(s) => Variant::parse(s)?,
        };
        let fuse = match raw.model.fuse.as_deref() {
            None | Some("sum") => FuseMode::Sum,
            Some("concat") => FuseMode::Concat,
            Some(other) => {
                return Err(Error::Config(format!("unknown fuse mode {other:?}, expected sum|concat")))
            }
        };
        let mut model = ModelConfig::desk(raw.data.classes);
        model.input_size = raw.model.input_size.unwrap_or(d.input_size);
        model.d_dec = raw.model.d_dec.unwrap_or(model.d_dec);
        model.state_size = raw.model.state_size.unwrap_or(model.state_size);
        model.scan_2d = raw.model.scan_2d.unwrap_or(true);
        model.variant = variant;
        model.fuse = fuse;
        model.validate()?;

        let crop = raw.train.crop.unwrap_or(d.crop);
        let augment = AugmentationConfig {
            hflip_p: raw.train.hflip_p.unwrap_or(0.5),
            vflip_p: raw.train.vflip_p.unwrap_or(0.5),
            scale: (raw.train.scale_min.unwrap_or(0.75), raw.train.scale_max.unwrap_or(1.25)),
            crop,
            mosaic_p: raw.train.mosaic_p.unwrap_or(0.25),
            ignore: raw.data.ignore.unwrap_or(DEFAULT_IGNORE),
        };
        augment.validate()?;
        if crop != model.input_size {
            return Err(Error::Config(format!(
                "crop {} must match the model input size {}",
                crop, model.input_size
            )));
        }

        let cfg = RunConfig {
            preset,
            seed: raw.seed.unwrap_or(0),
            out_dir: PathBuf::from(raw.out_dir.unwrap_or_else(|| "runs/out".into())),
            train_manifest: PathBuf::from(raw.data.train_manifest),
            val_manifest: raw.data.val_manifest.map(PathBuf::from),
            classes: raw.data.classes,
            ignore: raw.data.ignore.unwrap_or(DEFAULT_IGNORE),
            model,
            batch_size: raw.train.batch_size.unwrap_or(d.batch_size),
            max_epochs: raw.train.max_epochs.unwrap_or(d.max_epochs),
            lr_decoder: raw.train.lr_decoder.unwrap_or(6e-4),
            lr_encoder: raw.train.lr_encoder.unwrap_or(6e-5),
            weight_decay: raw.train.weight_decay.unwrap_or(0.01),
            warmup_epochs: raw.train.warmup_epochs.unwrap_or(5),
            patience: raw.train.patience.unwrap_or(10),
            augment,
        };
        if cfg.lr_decoder <= 0.0 || cfg.lr_encoder <= 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(cfg)
    }

    /// Reads a config file; also returns the raw text for checkpoint echoes.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        Ok((cfg, text))
    }

    /// Trainer options for this run; `echo` travels into checkpoints.
    pub fn train_options(&self, echo: String) -> TrainOptions {
        TrainOptions {
            max_epochs: self.max_epochs,
            batch_size: self.batch_size,
            lr_decoder: self.lr_decoder,
            lr_encoder: self.lr_encoder,
            weight_decay: self.weight_decay,
            warmup_epochs: self.warmup_epochs,
            patience: self.patience,
            augment: Some(self.augment),
            ignore: self.ignore,
            seed: self.seed,
            checkpoint_dir: Some(self.out_dir.clone()),
            config_echo: echo,
        }
    }
}
