//! Run configuration: one TOML document with a default for every field.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::TransformParams;
use crate::contrastive::TrainConfig;
use crate::cst::CstConfig;
use crate::data::{DatasetFormat, Label, SplitRatios, SyntheticSpec};
use crate::detector::SimilarityScore;
use crate::error::{ClanError, Result};
use crate::nn::{EncoderConfig, HeadLayout};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    /// The labels in `known_labels` are known, the rest new.
    #[default]
    Fixed,
    /// Each class in turn is the only known class.
    OneClass,
    /// Random halves of the label set, `n_trials` times per seed.
    MultiClass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Where artifacts go; not part of the config hash.
    #[serde(skip_serializing)]
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub protocol: Protocol,
    pub known_labels: Vec<Label>,
    pub n_trials: usize,
    /// Worker threads for independent tasks; `None` = all cores.
    pub jobs: Option<usize>,
    /// Save a resumable tower checkpoint every this many epochs.
    pub checkpoint_every: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("clan-out"),
            seeds: vec![0],
            protocol: Protocol::Fixed,
            known_labels: Vec::new(),
            n_trials: 10,
            jobs: None,
            checkpoint_every: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub path: Option<PathBuf>,
    pub format: DatasetFormat,
    pub ratios: SplitRatios,
    /// Centered moving-average width; off when `None`.
    pub smoothing_width: Option<usize>,
    /// Sensor quantization levels; off when `None`.
    pub quantize_levels: Option<usize>,
    /// Padded length; defaults to the longest episode.
    pub l_max: Option<usize>,
    /// FFT length for the frequency tower; defaults to `l_max`.
    pub fft_length: Option<usize>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            path: None,
            format: DatasetFormat::EpisodeJsonl,
            ratios: SplitRatios::default(),
            smoothing_width: None,
            quantize_levels: None,
            l_max: None,
            fft_length: None,
        }
    }
}

/// Encoder settings; input sizes come from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSettings {
    pub model_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: Option<usize>,
    pub proj_dim: usize,
    pub dropout_rate: f64,
    pub layer_norm_eps: f64,
    pub batch_norm_eps: f64,
    pub batch_norm_momentum: f64,
}

impl Default for EncoderSettings {
    fn default() -> Self {
        let e = EncoderConfig::tower(1, 1, 2);
        Self {
            model_dim: e.model_dim,
            n_layers: e.n_layers,
            n_heads: e.n_heads,
            ffn_dim: e.ffn_dim,
            proj_dim: e.proj_dim,
            dropout_rate: e.dropout_rate,
            layer_norm_eps: e.layer_norm_eps,
            batch_norm_eps: e.batch_norm_eps,
            batch_norm_momentum: e.batch_norm_momentum,
        }
    }
}

impl EncoderSettings {
    pub fn build(&self, input_dim: usize, input_len: usize, head: HeadLayout) -> EncoderConfig {
        EncoderConfig {
            input_dim,
            input_len,
            model_dim: self.model_dim,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            ffn_dim: self.ffn_dim,
            proj_dim: self.proj_dim,
            dropout_rate: self.dropout_rate,
            layer_norm_eps: self.layer_norm_eps,
            batch_norm_eps: self.batch_norm_eps,
            batch_norm_momentum: self.batch_norm_momentum,
            head,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectSection {
    pub similarity: SimilarityScore,
    /// Score with the lowest-validation-loss parameters instead of the last.
    pub use_best_val: bool,
}

impl Default for DetectSection {
    fn default() -> Self {
        Self {
            similarity: SimilarityScore::Cosine,
            use_best_val: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub data: DataSection,
    pub synthetic: Option<SyntheticSpec>,
    pub transforms: TransformParams,
    pub encoder: EncoderSettings,
    pub cst: CstConfig,
    pub train: TrainConfig,
    pub detect: DetectSection,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ClanError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ClanError::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            ClanError::Config(m) => ClanError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| ClanError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.data.path, &self.synthetic) {
            (Some(_), Some(_)) => {
                return Err(ClanError::Config("set either data.path or [synthetic], not both".into()))
            }
            (None, None) => return Err(ClanError::Config("one of data.path or [synthetic] is required".into())),
            (None, Some(s)) => s.validate()?,
            _ => {}
        }
        if self.run.seeds.is_empty() {
            return Err(ClanError::Config("run.seeds must not be empty".into()));
        }
        let unique: BTreeSet<_> = self.run.seeds.iter().collect();
        if unique.len() != self.run.seeds.len() {
            return Err(ClanError::Config("run.seeds contains duplicates".into()));
        }
        if self.run.protocol == Protocol::Fixed && self.run.known_labels.is_empty() {
            return Err(ClanError::Config("the fixed protocol needs run.known_labels".into()));
        }
        if self.run.protocol == Protocol::MultiClass && self.run.n_trials == 0 {
            return Err(ClanError::Config("run.n_trials must be positive".into()));
        }
        if self.run.jobs == Some(0) {
            return Err(ClanError::Config("run.jobs must be positive".into()));
        }
        self.transforms.validate()?;
        self.train.validate()?;
        self.encoder.build(1, 2, HeadLayout::Tower { n_classes: 2 }).validate()?;
        if self.cst.thresholds.iter().any(|t| !(0.0..1.0).contains(t)) || self.cst.thresholds.is_empty() {
            return Err(ClanError::Config("cst.thresholds must be non-empty values in [0, 1)".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form (the output directory excluded).
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&canonical))
    }
}
