use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::views::view_row;
use crate::error::{ClanError, Result};
use crate::nn::tape::{Anchor, AnchorPlan, Tape};

/// Which views of other batch episodes act as negatives for an anchor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NegativeMode {
    /// Only views under the anchor's own transform index.
    #[default]
    Matching,
    /// Views under every transform index.
    AllIndex,
}

/// Anchors of the multi-transform contrastive loss over `2·B·(K+1)` rows.
///
/// Anchor `(i, j, v)` has its other view `(i, j, 1-v)` as positive and as
/// negatives both views of `(i, k)` for `k ≠ j` plus both views of every
/// other episode `m ≠ i` (at index `j`, or at all indices in
/// [`NegativeMode::AllIndex`]).
pub fn anchor_plan(batch: usize, k: usize, mode: NegativeMode) -> AnchorPlan {
    let row = |i, j, v| view_row(i, j, v, k) as u32;
    let mut anchors = Vec::with_capacity(2 * batch * (k + 1));
    for i in 0..batch {
        for j in 0..=k {
            for v in 0..2 {
                let mut negatives = Vec::new();
                for kk in (0..=k).filter(|kk| *kk != j) {
                    negatives.extend([row(i, kk, 0), row(i, kk, 1)]);
                }
                for m in (0..batch).filter(|m| *m != i) {
                    match mode {
                        NegativeMode::Matching => negatives.extend([row(m, j, 0), row(m, j, 1)]),
                        NegativeMode::AllIndex => {
                            for kk in 0..=k {
                                negatives.extend([row(m, kk, 0), row(m, kk, 1)]);
                            }
                        }
                    }
                }
                anchors.push(Anchor {
                    row: row(i, j, v),
                    positive: row(i, j, 1 - v),
                    negatives,
                });
            }
        }
    }
    AnchorPlan {
        rows: 2 * batch * (k + 1),
        anchors,
    }
}

/// Contrastive loss of unit-norm representations.
pub fn loss_con(z: &Array2<f64>, plan: &AnchorPlan, tau: f64) -> Result<f64> {
    if let Some((i, n)) = z
        .rows()
        .into_iter()
        .map(|r| r.dot(&r).sqrt())
        .enumerate()
        .find(|(_, n)| (n - 1.0).abs() > 1e-6)
    {
        return Err(ClanError::Contract(format!("row {i} has norm {n}, expected unit vectors")));
    }
    if tau <= 0.0 {
        return Err(ClanError::Config("tau must be positive".into()));
    }
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let l = tape.info_nce(zv, Arc::new(plan.clone()), tau)?;
    Ok(tape.scalar(l))
}

/// Contrastive loss that ℓ2-normalizes rows first.
pub fn loss_con_normalizing(z: &Array2<f64>, plan: &AnchorPlan, tau: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let n = tape.l2_normalize(zv);
    loss_con(tape.value(n), plan, tau)
}

/// Mean cross-entropy of transform labels.
pub fn loss_cls(logits: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let loss = tape.softmax_xent(l, labels.to_vec())?;
    Ok(tape.scalar(loss))
}

/// Objective of the two towers together.
pub fn total_loss_clan(l_time: f64, l_frequency: f64) -> f64 {
    l_time + l_frequency
}
