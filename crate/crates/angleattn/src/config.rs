use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use angleattn_core::attention::{NormMode, ScoreVariant, DEFAULT_TEMPERATURE};
use angleattn_core::data::{SplitSpec, SynthSpec};
use angleattn_core::model::{ModelConfig, Positional};
use angleattn_core::train::{ClipMode, Experiment, TrainConfig};

use crate::raster::read_bytes;
use crate::{Error, Result};

/// Every knob of a run as one flat JSON object. Missing keys take the
/// reference protocol values; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub cube: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: u64,

    pub variant: String,
    /// Defaults to the variant's own mode when absent.
    pub norm_mode: Option<String>,
    pub temperature: f64,
    pub patch: usize,
    pub model_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    pub dropout: f64,
    pub positional: String,

    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub wd: f64,
    pub clip: f64,
    pub clip_mode: String,
    pub smoothing: f64,

    pub train_frac: f64,
    pub val_frac: f64,
    pub snr_db: Option<f64>,

    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub classes: usize,
    pub sites: usize,
    pub gain_lo: f64,
    pub gain_hi: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::new(1, 2, ScoreVariant::CosSq);
        let train = TrainConfig::default();
        let split = SplitSpec::default();
        let synth = SynthSpec::default();
        Self {
            cube: None,
            labels: None,
            out: None,
            seed: 0,
            variant: ScoreVariant::CosSq.tag().into(),
            norm_mode: None,
            temperature: DEFAULT_TEMPERATURE,
            patch: model.patch_size,
            model_dim: model.model_dim,
            depth: model.depth,
            heads: model.heads,
            mlp_dim: model.mlp_dim,
            dropout: model.dropout,
            positional: model.positional.tag().into(),
            epochs: train.epochs,
            batch: train.batch_size,
            lr: train.lr,
            wd: train.weight_decay,
            clip: train.clip_norm,
            clip_mode: train.clip_mode.tag().into(),
            smoothing: train.label_smoothing,
            train_frac: split.train_frac,
            val_frac: split.val_frac,
            snr_db: None,
            height: synth.height,
            width: synth.width,
            bands: synth.bands,
            classes: synth.classes,
            sites: synth.sites,
            gain_lo: synth.gain_lo,
            gain_hi: synth.gain_hi,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Usage(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_bytes(path)?;
        let text = String::from_utf8(bytes)
            .map_err(|_| Error::Usage(format!("{}: config is not UTF-8", path.display())))?;
        Self::from_json(&text).map_err(|e| Error::Usage(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn score_variant(&self) -> Result<ScoreVariant> {
        Ok(self.variant.parse()?)
    }

    pub fn resolved_norm_mode(&self) -> Result<NormMode> {
        match &self.norm_mode {
            Some(tag) => Ok(tag.parse()?),
            None => Ok(self.score_variant()?.default_norm_mode()),
        }
    }

    /// Model for a scene with `bands` bands and `classes` classes.
    pub fn model(&self, bands: usize, classes: usize) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            patch_size: self.patch,
            bands,
            model_dim: self.model_dim,
            depth: self.depth,
            heads: self.heads,
            mlp_dim: self.mlp_dim,
            dropout: self.dropout,
            num_classes: classes,
            variant: self.score_variant()?,
            norm_mode: self.resolved_norm_mode()?,
            temperature: self.temperature,
            positional: self.positional.parse::<Positional>()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch,
            lr: self.lr,
            weight_decay: self.wd,
            clip_norm: self.clip,
            clip_mode: self.clip_mode.parse::<ClipMode>()?,
            label_smoothing: self.smoothing,
            seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn split(&self) -> Result<SplitSpec> {
        let spec = SplitSpec {
            train_frac: self.train_frac,
            val_frac: self.val_frac,
            seed: self.seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn synth(&self) -> Result<SynthSpec> {
        let spec = SynthSpec {
            height: self.height,
            width: self.width,
            bands: self.bands,
            classes: self.classes,
            sites: self.sites,
            gain_lo: self.gain_lo,
            gain_hi: self.gain_hi,
            snr_db: self.snr_db,
            seed: self.seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn experiment(&self, bands: usize, classes: usize) -> Result<Experiment> {
        self.split()?;
        self.check_snr()?;
        Ok(Experiment {
            model: self.model(bands, classes)?,
            train: self.train()?,
            train_frac: self.train_frac,
            val_frac: self.val_frac,
            snr_db: self.snr_db,
        })
    }

    fn check_snr(&self) -> Result<()> {
        match self.snr_db {
            Some(s) if !s.is_finite() => Err(Error::Usage(format!("snr_db must be finite, got {s}"))),
            _ => Ok(()),
        }
    }

    /// Rejects any malformed tag or out-of-range value without needing data.
    pub fn validate(&self) -> Result<()> {
        self.model(1, 2)?;
        self.train()?;
        self.split()?;
        self.check_snr()
    }
}
