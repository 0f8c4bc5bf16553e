use std::sync::Arc;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::loss::{anchor_plan, NegativeMode};
use super::views::{build_views, PositiveOrder, ViewBatch};
use crate::augment::{TransformKind, TransformParams};
use crate::cst::CstSet;
use crate::data::Episode;
use crate::domain::Domain;
use crate::error::{ClanError, Result};
use crate::nn::encoder::{
    bind, classifier, projection, train_step, update_running_stats, HeadOutput, NormMode, DEFAULT_MAX_ROWS,
};
use crate::nn::tape::{AnchorPlan, Tape};
use crate::nn::{adam_step, Real, init_params, AdamConfig, AdamState, EncoderConfig, Mode, ModelParams, SeqBatch};
use crate::rng::{Stream, StreamKey};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub tau: f64,
    pub adam: AdamConfig,
    pub con_weight: f64,
    pub cls_weight: f64,
    pub negatives: NegativeMode,
    pub positive_order: PositiveOrder,
    /// Packed rows per tape before the backbone is checkpointed in chunks.
    pub max_rows: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            epochs: 100,
            tau: 0.5,
            adam: AdamConfig::default(),
            con_weight: 1.0,
            cls_weight: 1.0,
            negatives: NegativeMode::Matching,
            positive_order: PositiveOrder::AfterStrong,
            max_rows: DEFAULT_MAX_ROWS,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(ClanError::Config("batch_size must be at least 2".into()));
        }
        if self.tau <= 0.0 || !self.tau.is_finite() {
            return Err(ClanError::Config("tau must be positive".into()));
        }
        if self.max_rows == 0 {
            return Err(ClanError::Config("max_rows must be positive".into()));
        }
        self.adam.validate()
    }
}

/// One row of the training log (epochs count from 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_con: f64,
    pub l_cls: f64,
    pub l_total: f64,
    pub val_total: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BestVal {
    pub epoch: usize,
    pub val_total: f64,
    pub params: ModelParams<f32>,
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TowerState {
    pub params: ModelParams<f32>,
    pub adam: AdamState<f32>,
    pub epochs_done: usize,
    pub log: Vec<EpochLog>,
    pub best: Option<BestVal>,
}

pub fn init_tower_state(encoder: &EncoderConfig, domain: Domain, seed: u64) -> Result<TowerState> {
    let init_seed = StreamKey::new(seed, Stream::Init).kind(0x100 | domain.tag()).rng().random();
    let params = init_params::<f32>(encoder, init_seed)?;
    let adam = AdamState::new(&params.tensors);
    Ok(TowerState {
        params,
        adam,
        epochs_done: 0,
        log: Vec::new(),
        best: None,
    })
}

struct Sums {
    con: f64,
    cls: f64,
    total: f64,
    n: f64,
}

/// Tower head: weighted `L_CON + L_CLS` over the backbone features.
/// `parts` holds the two unweighted losses.
pub fn tower_head<'a, T: Real>(
    model: &'a ModelParams<T>,
    plan: Arc<AnchorPlan>,
    labels: Vec<usize>,
    tau: f64,
    weights: (f64, f64),
) -> impl Fn(&mut Tape<T>, &crate::nn::encoder::Bound, crate::nn::Var) -> Result<HeadOutput<T>> + 'a {
    move |tape, p, f| {
        let (z, moments) = projection(tape, model, p, f, NormMode::Batch)?;
        let z = tape.l2_normalize(z);
        let con = tape.info_nce(z, Arc::clone(&plan), T::of(tau))?;
        let logits = classifier(tape, model, p, f)?;
        let cls = tape.softmax_xent(logits, labels.clone())?;
        let a = tape.scale(con, T::of(weights.0));
        let b = tape.scale(cls, T::of(weights.1));
        let loss = tape.add(a, b)?;
        Ok(HeadOutput {
            loss,
            parts: vec![con, cls],
            moments,
        })
    }
}

/// Loss of frozen parameters on views of `val` (running batch-norm stats).
fn validation_loss(
    state: &TowerState,
    val: &[Episode],
    cst: &CstSet,
    positive: TransformKind,
    tparams: &TransformParams,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<f64> {
    let model = &state.params;
    let mut sum = 0.0;
    for chunk in val.chunks(cfg.batch_size) {
        let refs: Vec<&Episode> = chunk.iter().collect();
        let views = build_views(&refs, cst, positive, tparams, cfg.positive_order, seed, u64::MAX)?;
        let batch = SeqBatch::<f32>::from_keyed(&views.episodes.iter().collect::<Vec<_>>(), views.keys.clone())?;
        let feats = crate::nn::encoder::forward_backbone_chunked(model, &batch, Mode::Eval, cfg.max_rows)?;
        let plan = Arc::new(anchor_plan(chunk.len(), views.k, cfg.negatives));
        let mut tape = Tape::new();
        let p = bind(&mut tape, model, model.index.backbone_end..model.len());
        let f = tape.constant(feats);
        let (z, _) = projection(&mut tape, model, &p, f, NormMode::Running)?;
        let z = tape.l2_normalize(z);
        let con = tape.info_nce(z, plan, cfg.tau as f32)?;
        let logits = classifier(&mut tape, model, &p, f)?;
        let cls = tape.softmax_xent(logits, views.labels.clone())?;
        let total = cfg.con_weight * tape.scalar(con) as f64 + cfg.cls_weight * tape.scalar(cls) as f64;
        sum += total * chunk.len() as f64;
    }
    Ok(sum / val.len() as f64)
}

/// Trains one tower from `state` until `cfg.epochs` epochs are done.
///
/// Shuffles and views are keyed by epoch, so resuming from a saved state
/// reproduces the uninterrupted run. `on_epoch` sees the state after every
/// epoch (for checkpointing); an error from it stops training.
#[allow(clippy::too_many_arguments)]
pub fn train_tower(
    train: &[Episode],
    val: Option<&[Episode]>,
    cst: &CstSet,
    positive: TransformKind,
    tparams: &TransformParams,
    cfg: &TrainConfig,
    seed: u64,
    domain: Domain,
    mut state: TowerState,
    on_epoch: &mut dyn FnMut(&TowerState) -> Result<()>,
) -> Result<TowerState> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(ClanError::Config("tower training needs a non-empty train split".into()));
    }
    if state.params.config.n_classes() != Some(cst.k() + 1) {
        return Err(ClanError::Config(format!(
            "classifier width {:?} does not match K+1 = {}",
            state.params.config.n_classes(),
            cst.k() + 1
        )));
    }
    let val = val.filter(|v| !v.is_empty());
    let n_batches = train.len().div_ceil(cfg.batch_size);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let shuffle_key = StreamKey::new(seed, Stream::Shuffle).kind(domain.tag());
    let view_seed = seed ^ (domain.tag() << 32);

    for epoch in state.epochs_done..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut shuffle_key.counter(epoch as u64).rng());
        let mut sums = Sums {
            con: 0.0,
            cls: 0.0,
            total: 0.0,
            n: 0.0,
        };
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let refs: Vec<&Episode> = idx.iter().map(|i| &train[*i]).collect();
            let views: ViewBatch = build_views(&refs, cst, positive, tparams, cfg.positive_order, view_seed, epoch as u64)?;
            let batch = SeqBatch::<f32>::from_keyed(&views.episodes.iter().collect::<Vec<_>>(), views.keys.clone())?;
            let plan = Arc::new(anchor_plan(refs.len(), views.k, cfg.negatives));
            let step = (epoch * n_batches + b) as u64;
            let mode = Mode::Train { seed: view_seed, step };
            let model = &state.params;
            let out = train_step(model, &batch, mode, cfg.max_rows, tower_head(model, plan, views.labels, cfg.tau, (cfg.con_weight, cfg.cls_weight)))
                .map_err(|e| match e {
                    ClanError::Numeric(m) => ClanError::Numeric(format!("{domain} tower, epoch {}: {m}", epoch + 1)),
                    other => other,
                })?;
            if let Some(m) = &out.moments {
                update_running_stats(&mut state.params, m);
            }
            adam_step(&mut state.params.tensors, &out.grads, &mut state.adam, &cfg.adam)?;
            let w = refs.len() as f64;
            sums.con += out.parts[0] as f64 * w;
            sums.cls += out.parts[1] as f64 * w;
            sums.total += out.loss as f64 * w;
            sums.n += w;
            debug!("{domain} epoch {} batch {b}: loss {}", epoch + 1, out.loss);
        }
        if !state.params.is_finite() {
            return Err(ClanError::Numeric(format!("{domain} tower parameters diverged in epoch {}", epoch + 1)));
        }
        state.epochs_done = epoch + 1;
        let val_total = match val {
            Some(v) => Some(validation_loss(&state, v, cst, positive, tparams, cfg, view_seed)?),
            None => None,
        };
        let row = EpochLog {
            epoch: epoch + 1,
            l_con: sums.con / sums.n,
            l_cls: sums.cls / sums.n,
            l_total: sums.total / sums.n,
            val_total,
        };
        if [row.l_con, row.l_cls, row.l_total].iter().chain(val_total.iter()).any(|v| !v.is_finite()) {
            return Err(ClanError::Numeric(format!("{domain} tower: non-finite loss in epoch {}", epoch + 1)));
        }
        info!(
            "{domain} epoch {:>3}: con {:.4} cls {:.4} total {:.4}{}",
            row.epoch,
            row.l_con,
            row.l_cls,
            row.l_total,
            val_total.map(|v| format!(" val {v:.4}")).unwrap_or_default()
        );
        state.log.push(row);
        if let Some(v) = val_total {
            if state.best.as_ref().is_none_or(|b| v < b.val_total) {
                state.best = Some(BestVal {
                    epoch: epoch + 1,
                    val_total: v,
                    params: state.params.clone(),
                });
            }
        }
        on_epoch(&state)?;
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, pad_and_mask, zscore_normalize, SplitRatios, SyntheticSpec};

    fn tiny_setup() -> (Vec<Episode>, Vec<Episode>, EncoderConfig, CstSet) {
        let spec = SyntheticSpec::separable(1, 1, 10, 2, 16, 0.1, 3);
        let m = generate_synthetic(&spec).unwrap();
        let known = [0].into_iter().collect();
        let m = crate::data::split_dataset(&m, SplitRatios::default(), &known, 3).unwrap();
        let m = zscore_normalize(&m).unwrap();
        let m = pad_and_mask(&m, 16).unwrap();
        let train = m.episodes_in(crate::data::Split::Train).into_iter().cloned().collect();
        let val = m.known_in(crate::data::Split::Val).into_iter().cloned().collect();
        let cst = CstSet::new(vec![TransformKind::Reverse, TransformKind::Scale]).unwrap();
        let mut enc = EncoderConfig::tower(2, 16, 3);
        enc.model_dim = 8;
        enc.proj_dim = 8;
        (train, val, enc, cst)
    }

    fn cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            epochs,
            ..TrainConfig::default()
        }
    }

    fn run(state: TowerState, epochs: usize) -> TowerState {
        let (train, val, _, cst) = tiny_setup();
        train_tower(
            &train,
            Some(&val),
            &cst,
            TransformKind::AddNoise,
            &TransformParams::default(),
            &cfg(epochs),
            5,
            Domain::Time,
            state,
            &mut |_| Ok(()),
        )
        .unwrap()
    }

    #[test]
    fn zero_epochs_returns_initial_params() {
        let (_, _, enc, _) = tiny_setup();
        let init = init_tower_state(&enc, Domain::Time, 5).unwrap();
        let out = run(init.clone(), 0);
        assert_eq!(out, init);
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let (_, _, enc, _) = tiny_setup();
        let init = init_tower_state(&enc, Domain::Time, 5).unwrap();
        let a = run(init.clone(), 4);
        let b = run(init.clone(), 4);
        assert_eq!(a, b);
        assert_eq!(a.log.len(), 4);
        assert!(a.log.iter().all(|r| r.val_total.is_some()));
        let half = run(init, 2);
        let resumed = run(half, 4);
        assert_eq!(resumed, a);
    }
}
