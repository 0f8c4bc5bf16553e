use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::augment::{apply_keyed, TransformKind, TransformParams};
use crate::cst::CstSet;
use crate::data::{Episode, EpisodeId};
use crate::domain::Domain;
use crate::error::{ClanError, Result};
use crate::nn::tape::softmax_rows;
use crate::nn::{forward_backbone, forward_classifier, forward_projection, Mode, ModelParams, NormMode, SeqBatch};
use crate::rng::{Stream, StreamKey};

/// Unit-normalized training representations, one matrix per transform index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepresentationBank {
    pub domain: Domain,
    pub kinds: Vec<TransformKind>,
    pub ids: Vec<EpisodeId>,
    /// `z[j]` has one unit row per training episode, under transform `j`.
    pub z: Vec<Array2<f64>>,
    pub seed: u64,
}

/// Evaluation-time views: the same key is used for the bank and for
/// scoring, so a training episode reproduces its own bank rows.
pub fn eval_views(episodes: &[Episode], kind: TransformKind, params: &TransformParams, seed: u64) -> Result<Vec<Episode>> {
    let key = StreamKey::new(seed, Stream::Evaluation);
    episodes.iter().map(|e| apply_keyed(e, kind, params, key)).collect()
}

/// Eval-mode outputs of a tower for a list of episodes.
pub struct TowerOutputs {
    /// ℓ2-normalized projections.
    pub z: Array2<f64>,
    /// Norms of the projections before normalization.
    pub norms: Vec<f64>,
    /// Softmax of the transform classifier.
    pub probs: Array2<f64>,
}

pub fn tower_outputs(params: &ModelParams<f32>, episodes: &[Episode]) -> Result<TowerOutputs> {
    let batch = SeqBatch::from_episodes(episodes)?;
    let feats = forward_backbone(params, &batch, Mode::Eval)?;
    let z = forward_projection(params, &feats, NormMode::Running)?.mapv(f64::from);
    let mut probs = forward_classifier(params, &feats)?.mapv(f64::from);
    softmax_rows(&mut probs);
    let norms: Vec<f64> = z.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    let mut unit = z;
    for (mut r, n) in unit.axis_iter_mut(Axis(0)).zip(&norms) {
        if !n.is_finite() {
            return Err(ClanError::Numeric("non-finite representation".into()));
        }
        r /= n.max(1e-12);
    }
    Ok(TowerOutputs {
        z: unit,
        norms,
        probs,
    })
}

pub fn build_representation_bank(
    params: &ModelParams<f32>,
    train: &[Episode],
    cst: &CstSet,
    tparams: &TransformParams,
    domain: Domain,
    seed: u64,
) -> Result<RepresentationBank> {
    if train.is_empty() {
        return Err(ClanError::Config("representation bank needs a non-empty train split".into()));
    }
    let z = cst
        .kinds()
        .iter()
        .map(|kind| Ok(tower_outputs(params, &eval_views(train, *kind, tparams, seed)?)?.z))
        .collect::<Result<Vec<_>>>()?;
    Ok(RepresentationBank {
        domain,
        kinds: cst.kinds().to_vec(),
        ids: train.iter().map(|e| e.id).collect(),
        z,
        seed,
    })
}
