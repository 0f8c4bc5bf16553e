//! Seeded time-series transforms used to build strong negatives and weak
//! positives.
//!
//! Every transform touches only the unpadded prefix `[0, raw_len)` of an
//! episode; shape, mask, raw length and label always pass through.

mod kinds;

use std::fmt;
use std::str::FromStr;

use log::warn;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Episode;
use crate::error::{ClanError, Result};
use crate::rng::{Stream, StreamKey};

pub use kinds::{flattop_window, reflect_index};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransformKind {
    Identity,
    AddNoise,
    Convolve,
    Permute,
    Drift,
    Dropout,
    Pool,
    Quantize,
    Scale,
    Reverse,
    TimeWarp,
}

impl TransformKind {
    pub const ALL: [TransformKind; 11] = [
        TransformKind::Identity,
        TransformKind::AddNoise,
        TransformKind::Convolve,
        TransformKind::Permute,
        TransformKind::Drift,
        TransformKind::Dropout,
        TransformKind::Pool,
        TransformKind::Quantize,
        TransformKind::Scale,
        TransformKind::Reverse,
        TransformKind::TimeWarp,
    ];

    /// The ten candidate transforms (everything except Identity).
    pub const CANDIDATES: [TransformKind; 10] = [
        TransformKind::AddNoise,
        TransformKind::Convolve,
        TransformKind::Permute,
        TransformKind::Drift,
        TransformKind::Dropout,
        TransformKind::Pool,
        TransformKind::Quantize,
        TransformKind::Scale,
        TransformKind::Reverse,
        TransformKind::TimeWarp,
    ];

    /// Position in the enumeration; also the tie-break order.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            TransformKind::Identity => "identity",
            TransformKind::AddNoise => "addnoise",
            TransformKind::Convolve => "convolve",
            TransformKind::Permute => "permute",
            TransformKind::Drift => "drift",
            TransformKind::Dropout => "dropout",
            TransformKind::Pool => "pool",
            TransformKind::Quantize => "quantize",
            TransformKind::Scale => "scale",
            TransformKind::Reverse => "reverse",
            TransformKind::TimeWarp => "timewarp",
        }
    }
}

impl fmt::Display for TransformKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TransformKind {
    type Err = ClanError;

    fn from_str(s: &str) -> Result<Self> {
        TransformKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| ClanError::Config(format!("unknown transform kind `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformParams {
    pub scale_num: f64,
    pub convolve_window: usize,
    pub permute_min_segments: usize,
    pub permute_max_segments: usize,
    pub max_drift: f64,
    pub n_drift_points: usize,
    pub dropout_p: f64,
    pub dropout_fill: f64,
    pub pool_size: usize,
    pub quantize_levels: usize,
    pub scale_loc: f64,
    pub scale_sigma: f64,
    pub n_speed_change: usize,
    pub max_speed_ratio: f64,
}

impl Default for TransformParams {
    fn default() -> Self {
        Self {
            scale_num: 0.01,
            convolve_window: 11,
            permute_min_segments: 1,
            permute_max_segments: 5,
            max_drift: 0.7,
            n_drift_points: 5,
            dropout_p: 0.10,
            dropout_fill: 0.0,
            pool_size: 4,
            quantize_levels: 20,
            scale_loc: 2.0,
            scale_sigma: 1.1,
            n_speed_change: 5,
            max_speed_ratio: 3.0,
        }
    }
}

impl TransformParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ClanError::Parameter(m.to_string()));
        let positive = [
            ("scale_num", self.scale_num),
            ("max_drift", self.max_drift),
            ("dropout_p", self.dropout_p),
            ("scale_loc", self.scale_loc),
            ("scale_sigma", self.scale_sigma),
            ("max_speed_ratio", self.max_speed_ratio),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return bad(&format!("{name} must be positive and finite, got {v}"));
            }
        }
        let counts = [
            ("convolve_window", self.convolve_window),
            ("permute_min_segments", self.permute_min_segments),
            ("n_drift_points", self.n_drift_points),
            ("pool_size", self.pool_size),
            ("n_speed_change", self.n_speed_change),
        ];
        for (name, v) in counts {
            if v == 0 {
                return bad(&format!("{name} must be positive"));
            }
        }
        if self.permute_max_segments < self.permute_min_segments {
            return bad("permute_max_segments < permute_min_segments");
        }
        if self.quantize_levels < 2 {
            return bad("quantize_levels must be >= 2");
        }
        if self.dropout_p >= 1.0 {
            return bad("dropout_p must be < 1");
        }
        if self.max_speed_ratio < 1.0 {
            return bad("max_speed_ratio must be >= 1");
        }
        if !self.dropout_fill.is_finite() {
            return bad("dropout_fill must be finite");
        }
        Ok(())
    }
}

/// Applies one transform to an episode, drawing randomness from `rng`.
pub fn apply_transform<R: Rng + ?Sized>(
    episode: &Episode,
    kind: TransformKind,
    params: &TransformParams,
    rng: &mut R,
) -> Result<Episode> {
    params.validate()?;
    let mut out = episode.clone();
    let n = episode.raw_len;
    if n < 2
        && matches!(
            kind,
            TransformKind::Permute | TransformKind::TimeWarp | TransformKind::Pool
        )
    {
        warn!("episode {}: raw_len {n} too short for {kind}; using identity", episode.id);
        return Ok(out);
    }
    if kind == TransformKind::Pool && params.pool_size > episode.len() {
        return Err(ClanError::Parameter(format!(
            "pool_size {} exceeds episode length {}",
            params.pool_size,
            episode.len()
        )));
    }
    let mut prefix = out.values.slice_mut(ndarray::s![.., ..n]);
    match kind {
        TransformKind::Identity => {}
        TransformKind::AddNoise => kinds::add_noise(&mut prefix, params.scale_num, rng),
        TransformKind::Convolve => kinds::convolve(&mut prefix, params.convolve_window),
        TransformKind::Permute => kinds::permute(
            &mut prefix,
            params.permute_min_segments,
            params.permute_max_segments,
            rng,
        ),
        TransformKind::Drift => {
            kinds::drift(&mut prefix, params.max_drift, params.n_drift_points, rng)
        }
        TransformKind::Dropout => {
            kinds::dropout(&mut prefix, params.dropout_p, params.dropout_fill, rng)
        }
        TransformKind::Pool => kinds::pool(&mut prefix, params.pool_size),
        TransformKind::Quantize => kinds::quantize(&mut prefix, params.quantize_levels),
        TransformKind::Scale => {
            kinds::scale(&mut prefix, params.scale_loc, params.scale_sigma, rng)
        }
        TransformKind::Reverse => kinds::reverse(&mut prefix),
        TransformKind::TimeWarp => kinds::time_warp(
            &mut prefix,
            params.n_speed_change,
            params.max_speed_ratio,
            rng,
        ),
    }
    Ok(out)
}

/// Applies a transform with the substream derived from `key`, whose episode
/// and kind fields are overwritten from the arguments.
pub fn apply_keyed(
    episode: &Episode,
    kind: TransformKind,
    params: &TransformParams,
    key: StreamKey,
) -> Result<Episode> {
    let mut rng = key.episode(episode.id).kind(kind.index() as u64).rng();
    apply_transform(episode, kind, params, &mut rng)
}

/// Transforms every episode independently; output `i` depends only on input
/// `i`, `kind`, `params` and `seed`.
pub fn transform_batch(
    episodes: &[Episode],
    kind: TransformKind,
    params: &TransformParams,
    seed: u64,
) -> Result<Vec<Episode>> {
    let key = StreamKey::new(seed, Stream::StrongView);
    episodes
        .par_iter()
        .map(|e| apply_keyed(e, kind, params, key))
        .collect()
}
