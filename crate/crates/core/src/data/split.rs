use std::collections::{BTreeMap, BTreeSet};

use log::warn;
use rand::seq::SliceRandom;

use super::episode::{DatasetManifest, EpisodeId, Label, Split};
use crate::error::{ClanError, Result};
use crate::rng::{Stream, StreamKey};

/// Train/val/test ratios; the default is 60:20:20.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        }
    }
}

/// Seeded per-class split.
///
/// Known classes are divided by `ratios`; every other class goes half to
/// validation and half to test, so the train split only ever holds known
/// labels.
pub fn split_dataset(
    manifest: &DatasetManifest,
    ratios: SplitRatios,
    known_labels: &BTreeSet<Label>,
    seed: u64,
) -> Result<DatasetManifest> {
    let total = ratios.train + ratios.val + ratios.test;
    if (total - 1.0).abs() > 1e-9 || ratios.train <= 0.0 || ratios.val < 0.0 || ratios.test < 0.0 {
        return Err(ClanError::Config(format!(
            "split ratios must be non-negative and sum to 1, got {total}"
        )));
    }
    let mut by_class: BTreeMap<Label, Vec<EpisodeId>> = BTreeMap::new();
    for e in &manifest.episodes {
        by_class.entry(e.label).or_default().push(e.id);
    }
    if let Some(missing) = known_labels.iter().find(|l| !by_class.contains_key(l)) {
        return Err(ClanError::Config(format!("known label {missing} has no episodes")));
    }

    let mut split = BTreeMap::new();
    for (label, mut ids) in by_class {
        let mut rng = StreamKey::new(seed, Stream::Split)
            .kind(label as u64)
            .rng();
        ids.shuffle(&mut rng);
        let n = ids.len();
        let (n_train, n_val) = if known_labels.contains(&label) {
            if n < 3 {
                warn!("known class {label} has only {n} episodes; assigning best effort");
            }
            let n_train = ((ratios.train * n as f64).round() as usize).clamp(1, n);
            let n_val = ((ratios.val * n as f64).round() as usize).min(n - n_train);
            (n_train, n_val)
        } else {
            if n < 2 {
                warn!("new class {label} has {n} episode(s); it cannot reach both val and test");
            }
            (0, n / 2)
        };
        for (rank, id) in ids.into_iter().enumerate() {
            let s = if rank < n_train {
                Split::Train
            } else if rank < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            split.insert(id, s);
        }
    }

    let mut out = manifest.clone();
    out.known_labels = known_labels.clone();
    out.split = split;
    Ok(out)
}
