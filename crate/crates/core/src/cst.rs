//! Customized strong transformation (CST) selection.
//!
//! For every candidate transform a small binary discriminator learns to tell
//! original episodes from transformed ones. The held-out AUROC of that
//! discriminator measures how far the transform moves the data: transforms
//! above a threshold become negatives, the one with the lowest AUROC becomes
//! the positive (weak) transform.

use std::collections::BTreeSet;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_keyed, TransformKind, TransformParams};
use crate::data::Episode;
use crate::domain::Domain;
use crate::error::{ClanError, Result};
use crate::eval::auroc;
use crate::nn::encoder::{discriminator, forward_backbone, forward_discriminator, Bound, HeadOutput, DEFAULT_MAX_ROWS};
use crate::nn::tape::{sigmoid, Tape, Var};
use crate::nn::{adam_step, init_params, train_step, AdamConfig, AdamState, EncoderConfig, Real, Mode, ModelParams, SeqBatch};
use crate::rng::{Stream, StreamKey};

pub const DEFAULT_THRESHOLDS: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];

/// Ordered transform set with Identity at index 0.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<TransformKind>", into = "Vec<TransformKind>")]
pub struct CstSet {
    kinds: Vec<TransformKind>,
}

impl CstSet {
    /// A selected set: at least two distinct strong transforms.
    pub fn new(strong: Vec<TransformKind>) -> Result<Self> {
        if strong.len() < 2 {
            return Err(ClanError::Invariant(format!(
                "a CST needs at least two transforms, got {}",
                strong.len()
            )));
        }
        Self::with_min(strong, 2)
    }

    /// Reduced sets used by ablations; at least one strong transform.
    pub fn ablation(strong: Vec<TransformKind>) -> Result<Self> {
        Self::with_min(strong, 1)
    }

    fn with_min(strong: Vec<TransformKind>, min: usize) -> Result<Self> {
        if strong.len() < min {
            return Err(ClanError::Invariant(format!("CST needs at least {min} transforms")));
        }
        if strong.contains(&TransformKind::Identity) {
            return Err(ClanError::Invariant("identity cannot be a strong transform".into()));
        }
        let unique: BTreeSet<_> = strong.iter().collect();
        if unique.len() != strong.len() {
            return Err(ClanError::Invariant("duplicate transform in CST".into()));
        }
        let mut kinds = vec![TransformKind::Identity];
        kinds.extend(strong);
        Ok(Self { kinds })
    }

    /// All transform indices `0..=K`, Identity first.
    pub fn kinds(&self) -> &[TransformKind] {
        &self.kinds
    }

    pub fn strong(&self) -> &[TransformKind] {
        &self.kinds[1..]
    }

    /// Number of strong transforms.
    pub fn k(&self) -> usize {
        self.kinds.len() - 1
    }
}

impl TryFrom<Vec<TransformKind>> for CstSet {
    type Error = ClanError;

    fn try_from(kinds: Vec<TransformKind>) -> Result<Self> {
        match kinds.split_first() {
            Some((TransformKind::Identity, rest)) => CstSet::ablation(rest.to_vec()),
            _ => Err(ClanError::Invariant("CST must start with identity".into())),
        }
    }
}

impl From<CstSet> for Vec<TransformKind> {
    fn from(c: CstSet) -> Self {
        c.kinds
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AurocEntry {
    pub kind: TransformKind,
    pub auroc: f64,
}

/// How the strong set is chosen; `Auto` is the full method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CstMode {
    #[default]
    Auto,
    /// Random candidates instead of AUROC-ranked ones.
    Random,
    /// A fixed list of strong transforms.
    Fixed(Vec<TransformKind>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AurocReport {
    pub domain: Domain,
    pub entries: Vec<AurocEntry>,
    pub theta_cst: f64,
    pub selected: CstSet,
    pub positive_kind: TransformKind,
    /// True when no threshold admitted two transforms.
    pub fallback: bool,
    pub mode: CstMode,
    pub config_hash: String,
    pub seed: u64,
}

impl AurocReport {
    pub fn auroc_of(&self, kind: TransformKind) -> Option<f64> {
        self.entries.iter().find(|e| e.kind == kind).map(|e| e.auroc)
    }

    pub fn validate(&self) -> Result<()> {
        let kinds: BTreeSet<_> = self.entries.iter().map(|e| e.kind).collect();
        if kinds != TransformKind::CANDIDATES.into_iter().collect() {
            return Err(ClanError::Invariant("report must cover the ten candidate transforms".into()));
        }
        if self.entries.iter().any(|e| !(0.0..=1.0).contains(&e.auroc)) {
            return Err(ClanError::Invariant("AUROC outside [0, 1]".into()));
        }
        if self.mode == CstMode::Auto && !self.fallback {
            for k in self.selected.strong() {
                if self.auroc_of(*k).is_some_and(|a| a <= self.theta_cst) {
                    return Err(ClanError::Invariant(format!("{k} selected below threshold")));
                }
            }
        }
        Ok(())
    }

    /// Human-readable table, most shifting transform first.
    pub fn table(&self) -> String {
        let mut rows = self.entries.clone();
        rows.sort_by(|a, b| b.auroc.total_cmp(&a.auroc).then(a.kind.cmp(&b.kind)));
        let mut out = format!("{} domain (theta = {:.1})\n", self.domain, self.theta_cst);
        for e in rows {
            let tag = if self.selected.strong().contains(&e.kind) {
                "strong"
            } else if e.kind == self.positive_kind {
                "positive"
            } else {
                ""
            };
            out.push_str(&format!("  {:<9} {:.4}  {tag}\n", e.kind.name(), e.auroc));
        }
        out
    }
}

/// Training budget of each original-vs-transformed discriminator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub max_rows: usize,
}

impl Default for DiscConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            adam: AdamConfig::default(),
            max_rows: DEFAULT_MAX_ROWS,
        }
    }
}

fn job_key(seed: u64, domain: Domain, kind: TransformKind) -> StreamKey {
    StreamKey::new(seed, Stream::Discriminator).kind(domain.tag() << 8 | kind.index() as u64)
}

/// The transformed copy of `episodes` used as the positive class.
fn augmented(
    episodes: &[Episode],
    kind: TransformKind,
    params: &TransformParams,
    seed: u64,
    domain: Domain,
) -> Result<Vec<Episode>> {
    let key = StreamKey::new(seed, Stream::Discriminator).counter(domain.tag());
    episodes.iter().map(|e| apply_keyed(e, kind, params, key)).collect()
}

/// Binary cross-entropy head of a discriminator; label 1 = transformed.
pub fn discriminator_head<T: Real>(
    model: &ModelParams<T>,
    labels: Vec<T>,
) -> impl Fn(&mut Tape<T>, &Bound, Var) -> Result<HeadOutput<T>> + '_ {
    move |tape, p, f| {
        let logit = discriminator(tape, model, p, f)?;
        let loss = tape.bce_logits(logit, labels.clone())?;
        Ok(HeadOutput {
            loss,
            parts: vec![],
            moments: None,
        })
    }
}

/// Trains one discriminator on originals (label 0) and their transformed
/// copies (label 1) with binary cross-entropy.
pub fn train_aug_discriminator(
    train: &[Episode],
    kind: TransformKind,
    domain: Domain,
    params: &TransformParams,
    encoder: &EncoderConfig,
    cfg: &DiscConfig,
    seed: u64,
) -> Result<ModelParams<f32>> {
    if train.is_empty() {
        return Err(ClanError::Config("discriminator training needs a non-empty train split".into()));
    }
    if cfg.batch_size == 0 {
        return Err(ClanError::Config("discriminator batch_size must be positive".into()));
    }
    let key = job_key(seed, domain, kind);
    let mut model = init_params::<f32>(encoder, key.counter(u64::MAX).rng().random())?;
    let aug = augmented(train, kind, params, seed, domain)?;
    let pool: Vec<(&Episode, f32)> = train
        .iter()
        .map(|e| (e, 0.0))
        .chain(aug.iter().map(|e| (e, 1.0)))
        .collect();
    let mut adam = AdamState::new(&model.tensors);
    let mut order: Vec<usize> = (0..pool.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut key.counter(epoch as u64 + 1).rng());
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let eps: Vec<&Episode> = chunk.iter().map(|i| pool[*i].0).collect();
            let labels: Vec<f32> = chunk.iter().map(|i| pool[*i].1).collect();
            let batch = SeqBatch::from_keyed(&eps, chunk.iter().map(|i| *i as u64).collect())?;
            let step = (epoch * order.len().div_ceil(cfg.batch_size) + b) as u64;
            let m = &model;
            let out = train_step(m, &batch, Mode::Train { seed, step }, cfg.max_rows, discriminator_head(m, labels))
            .map_err(|e| match e {
                ClanError::Numeric(msg) => {
                    ClanError::Numeric(format!("{domain} discriminator for {kind}, epoch {epoch}: {msg}"))
                }
                other => other,
            })?;
            adam_step(&mut model.tensors, &out.grads, &mut adam, &cfg.adam)?;
        }
    }
    if !model.is_finite() {
        return Err(ClanError::Numeric(format!("{domain} discriminator for {kind} diverged")));
    }
    Ok(model)
}

/// Held-out AUROC of a discriminator: transformed episodes are the
/// positives, originals the negatives.
pub fn score_transform_auroc(
    disc: &ModelParams<f32>,
    val: &[Episode],
    kind: TransformKind,
    domain: Domain,
    params: &TransformParams,
    seed: u64,
) -> Result<f64> {
    if val.is_empty() {
        return Err(ClanError::Config("transform AUROC needs a non-empty validation split".into()));
    }
    let aug = augmented(val, kind, params, seed, domain)?;
    let score = |eps: &[Episode]| -> Result<Vec<f64>> {
        let feats = forward_backbone(disc, &SeqBatch::from_episodes(eps)?, Mode::Eval)?;
        let logits = forward_discriminator(disc, &feats)?;
        Ok(logits.column(0).iter().map(|l| sigmoid(*l as f64)).collect())
    };
    auroc(&score(&aug)?, &score(val)?)
}

/// θ_CST and the strong set for one list of AUROCs.
///
/// θ is the largest threshold that at least two transforms strictly exceed;
/// selected transforms are ordered by descending AUROC, ties by enum order.
/// When no threshold qualifies, the top two are taken with θ = 0.5 and the
/// returned flag is set.
pub fn select_cst(entries: &[AurocEntry], thresholds: &[f64]) -> Result<(f64, CstSet, bool)> {
    if entries.len() < 2 {
        return Err(ClanError::Invariant("need at least two AUROC entries".into()));
    }
    if thresholds.is_empty() {
        return Err(ClanError::Config("empty threshold set".into()));
    }
    let mut ranked = entries.to_vec();
    ranked.sort_by(|a, b| b.auroc.total_cmp(&a.auroc).then(a.kind.cmp(&b.kind)));
    let mut ths = thresholds.to_vec();
    ths.sort_by(|a, b| b.total_cmp(a));
    for theta in ths {
        let above: Vec<_> = ranked.iter().filter(|e| e.auroc > theta).map(|e| e.kind).collect();
        if above.len() >= 2 {
            return Ok((theta, CstSet::new(above)?, false));
        }
    }
    warn!("no AUROC threshold admits two transforms; falling back to the top two");
    let top = ranked.iter().take(2).map(|e| e.kind).collect();
    Ok((0.5, CstSet::new(top)?, true))
}

/// The transform with the lowest AUROC (earliest in enum order on ties).
pub fn select_positive_transform(entries: &[AurocEntry]) -> Result<TransformKind> {
    entries
        .iter()
        .min_by(|a, b| a.auroc.total_cmp(&b.auroc).then(a.kind.cmp(&b.kind)))
        .map(|e| e.kind)
        .ok_or_else(|| ClanError::Invariant("no AUROC entries".into()))
}

/// Settings of the CST stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CstConfig {
    pub thresholds: Vec<f64>,
    pub discriminator: DiscConfig,
    pub mode: CstMode,
    /// Keep at most this many strong transforms (ablations).
    pub limit: Option<usize>,
}

impl Default for CstConfig {
    fn default() -> Self {
        Self {
            thresholds: DEFAULT_THRESHOLDS.to_vec(),
            discriminator: DiscConfig::default(),
            mode: CstMode::Auto,
            limit: None,
        }
    }
}

/// Runs the ten discriminators of one domain and selects its CST.
///
/// `val` should hold known-label episodes only.
#[allow(clippy::too_many_arguments)]
pub fn build_cst_report(
    train: &[Episode],
    val: &[Episode],
    domain: Domain,
    params: &TransformParams,
    encoder: &EncoderConfig,
    cfg: &CstConfig,
    seed: u64,
    config_hash: &str,
) -> Result<AurocReport> {
    let entries = TransformKind::CANDIDATES
        .par_iter()
        .map(|&kind| {
            let disc = train_aug_discriminator(train, kind, domain, params, encoder, &cfg.discriminator, seed)?;
            let a = score_transform_auroc(&disc, val, kind, domain, params, seed)?;
            info!("{domain} {kind}: AUROC = {a:.4}");
            Ok(AurocEntry { kind, auroc: a })
        })
        .collect::<Result<Vec<_>>>()?;
    report_from_entries(domain, entries, cfg, seed, config_hash)
}

/// Applies the selection rule (and any ablation mode) to measured AUROCs.
pub fn report_from_entries(
    domain: Domain,
    entries: Vec<AurocEntry>,
    cfg: &CstConfig,
    seed: u64,
    config_hash: &str,
) -> Result<AurocReport> {
    let (theta, auto, fallback) = select_cst(&entries, &cfg.thresholds)?;
    let positive = select_positive_transform(&entries)?;
    let mut strong = match &cfg.mode {
        CstMode::Auto => auto.strong().to_vec(),
        CstMode::Random => {
            let n = auto.k();
            let mut pool = TransformKind::CANDIDATES.to_vec();
            let mut rng = StreamKey::new(seed, Stream::CstRandom).kind(domain.tag()).rng();
            pool.shuffle(&mut rng);
            pool.truncate(n);
            pool
        }
        CstMode::Fixed(kinds) => kinds.clone(),
    };
    if let Some(limit) = cfg.limit {
        strong.truncate(limit.max(1));
    }
    let selected = if cfg.mode == CstMode::Auto && cfg.limit.is_none() {
        auto
    } else {
        CstSet::ablation(strong)?
    };
    if selected.strong().contains(&positive) {
        warn!("{domain}: positive transform {positive} is also a strong transform");
    }
    let report = AurocReport {
        domain,
        entries,
        theta_cst: theta,
        selected,
        positive_kind: positive,
        fallback,
        mode: cfg.mode.clone(),
        config_hash: config_hash.into(),
        seed,
    };
    report.validate()?;
    Ok(report)
}
