use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{ClanError, Result};

pub type Label = i64;
pub type EpisodeId = u64;

/// Value written into padded timesteps.
pub const PAD_VALUE: f64 = 0.0;

/// One segmented activity instance, stored channel-major (`D × L`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub id: EpisodeId,
    pub label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject: Option<String>,
    pub raw_len: usize,
    pub mask: Vec<bool>,
    pub values: Array2<f64>,
}

impl Episode {
    /// Builds an unpadded episode from channel-major values.
    pub fn new(id: EpisodeId, label: Label, values: Array2<f64>) -> Self {
        let raw_len = values.ncols();
        Self {
            id,
            label,
            subject: None,
            raw_len,
            mask: vec![true; raw_len],
            values,
        }
    }

    pub fn channels(&self) -> usize {
        self.values.nrows()
    }

    /// Padded length (`L_max` once padded, `raw_len` before).
    pub fn len(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.raw_len == 0
    }

    /// The real (unpadded) part of the signal.
    pub fn prefix(&self) -> ArrayView2<'_, f64> {
        self.values.slice(ndarray::s![.., ..self.raw_len])
    }

    pub fn validate(&self) -> Result<()> {
        let len = self.len();
        if self.channels() == 0 {
            return Err(ClanError::Invariant(format!("episode {} has no channels", self.id)));
        }
        if self.raw_len == 0 || self.raw_len > len {
            return Err(ClanError::Invariant(format!(
                "episode {}: raw_len {} outside 1..={len}",
                self.id, self.raw_len
            )));
        }
        if self.mask.len() != len {
            return Err(ClanError::Invariant(format!(
                "episode {}: mask length {} != {len}",
                self.id,
                self.mask.len()
            )));
        }
        let leading = self.mask.iter().take_while(|m| **m).count();
        if leading != self.raw_len || self.mask[leading..].iter().any(|m| *m) {
            return Err(ClanError::Invariant(format!(
                "episode {}: mask is not {} leading true entries",
                self.id, self.raw_len
            )));
        }
        let padding = self.values.slice(ndarray::s![.., self.raw_len..]);
        if padding.iter().any(|v| *v != PAD_VALUE) {
            return Err(ClanError::Invariant(format!(
                "episode {}: padded positions hold non-fill values",
                self.id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// Per-channel statistics used by z-score normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub episodes: Vec<Episode>,
    pub known_labels: BTreeSet<Label>,
    #[serde(default)]
    pub split: BTreeMap<EpisodeId, Split>,
    pub l_max: usize,
    pub channels: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalization: Option<ChannelStats>,
}

impl DatasetManifest {
    /// Wraps freshly parsed episodes; `l_max` is the longest raw length.
    pub fn from_episodes(episodes: Vec<Episode>) -> Result<Self> {
        let channels = match episodes.first() {
            Some(e) => e.channels(),
            None => return Err(ClanError::Schema("dataset has no episodes".into())),
        };
        if let Some(bad) = episodes.iter().find(|e| e.channels() != channels) {
            return Err(ClanError::Schema(format!(
                "episode {} has {} channels, expected {channels}",
                bad.id,
                bad.channels()
            )));
        }
        let l_max = episodes.iter().map(|e| e.raw_len).max().unwrap_or(0);
        Ok(Self {
            episodes,
            known_labels: BTreeSet::new(),
            split: BTreeMap::new(),
            l_max,
            channels,
            normalization: None,
        })
    }

    pub fn labels(&self) -> BTreeSet<Label> {
        self.episodes.iter().map(|e| e.label).collect()
    }

    pub fn split_of(&self, id: EpisodeId) -> Option<Split> {
        self.split.get(&id).copied()
    }

    pub fn is_known(&self, label: Label) -> bool {
        self.known_labels.contains(&label)
    }

    pub fn episodes_in(&self, split: Split) -> Vec<&Episode> {
        self.episodes
            .iter()
            .filter(|e| self.split_of(e.id) == Some(split))
            .collect()
    }

    /// Episodes of a split whose label is in the known set.
    pub fn known_in(&self, split: Split) -> Vec<&Episode> {
        self.episodes
            .iter()
            .filter(|e| self.split_of(e.id) == Some(split) && self.is_known(e.label))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        for e in &self.episodes {
            e.validate()?;
            if e.channels() != self.channels {
                return Err(ClanError::Invariant(format!(
                    "episode {} has {} channels, manifest declares {}",
                    e.id,
                    e.channels(),
                    self.channels
                )));
            }
            if e.len() > self.l_max {
                return Err(ClanError::Invariant(format!(
                    "episode {} longer than l_max {}",
                    e.id, self.l_max
                )));
            }
            if self.split_of(e.id) == Some(Split::Train) && !self.is_known(e.label) {
                return Err(ClanError::Invariant(format!(
                    "train split holds episode {} with unknown label {}",
                    e.id, e.label
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| ClanError::json("manifest", e))?;
        std::fs::write(path, text).map_err(|e| ClanError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ClanError::io(path, e))?;
        let manifest: Self = serde_json::from_str(&text)
            .map_err(|e| ClanError::json(path.display().to_string(), e))?;
        manifest.validate()?;
        Ok(manifest)
    }
}
