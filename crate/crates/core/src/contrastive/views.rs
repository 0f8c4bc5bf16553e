use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_keyed, apply_transform, TransformKind, TransformParams};
use crate::cst::CstSet;
use crate::data::Episode;
use crate::error::Result;
use crate::rng::{Stream, StreamKey};

/// Where the weak positive transform sits relative to the strong one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PositiveOrder {
    /// `P(T_j(x))`
    #[default]
    AfterStrong,
    /// `T_j(P(x))`
    BeforeStrong,
}

/// Both views of every (episode, transform) pair of a batch.
///
/// Row `view_row(i, j, v, K)` holds view `v` (0 = primary, 1 = positive)
/// of episode `i` under transform index `j`.
#[derive(Debug, Clone)]
pub struct ViewBatch {
    pub episodes: Vec<Episode>,
    /// Transform index of every row.
    pub labels: Vec<usize>,
    /// Per-row key for dropout masks.
    pub keys: Vec<u64>,
    pub batch: usize,
    pub k: usize,
}

pub fn view_row(i: usize, j: usize, v: usize, k: usize) -> usize {
    (i * (k + 1) + j) * 2 + v
}

/// Builds `2·B·(K+1)` views. `round` (the epoch during training) keys all
/// random draws, so the same round always yields the same views.
pub fn build_views(
    batch: &[&Episode],
    cst: &CstSet,
    positive: TransformKind,
    params: &TransformParams,
    order: PositiveOrder,
    seed: u64,
    round: u64,
) -> Result<ViewBatch> {
    let k = cst.k();
    let strong_key = StreamKey::new(seed, Stream::StrongView).counter(round);
    let per_episode: Vec<Vec<Episode>> = batch
        .par_iter()
        .map(|e| {
            let mut out = Vec::with_capacity(2 * (k + 1));
            for (j, kind) in cst.kinds().iter().enumerate() {
                let mut prng = StreamKey::new(seed, Stream::PositiveView)
                    .episode(e.id)
                    .kind(j as u64)
                    .counter(round)
                    .rng();
                let primary = apply_keyed(e, *kind, params, strong_key)?;
                let pos = match order {
                    PositiveOrder::AfterStrong => apply_transform(&primary, positive, params, &mut prng)?,
                    PositiveOrder::BeforeStrong => {
                        let weak = apply_transform(e, positive, params, &mut prng)?;
                        apply_keyed(&weak, *kind, params, strong_key)?
                    }
                };
                out.push(primary);
                out.push(pos);
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let episodes: Vec<Episode> = per_episode.into_iter().flatten().collect();
    let labels = (0..episodes.len()).map(|r| (r / 2) % (k + 1)).collect();
    let keys = batch
        .iter()
        .flat_map(|e| (0..2 * (k as u64 + 1)).map(move |r| e.id << 8 | r))
        .collect();
    Ok(ViewBatch {
        episodes,
        labels,
        keys,
        batch: batch.len(),
        k,
    })
}
