//! Forward passes of the tower network and a memory-bounded training step.
//!
//! Episodes enter as a [`SeqBatch`]: the unpadded prefix of every episode,
//! transposed to `timesteps × channels` and stacked row-wise. Padding never
//! reaches the network, which is what masking the padded attention logits
//! to −∞ amounts to.

use std::io::Write;
use std::ops::Range;
use std::path::Path;
use std::sync::Arc;

use ndarray::{concatenate, s, Array1, Array2, Axis};
use rand::Rng;

use super::params::{BatchNormState, HeadIndex, ModelParams};
use super::scalar::Real;
use super::tape::{BatchMoments, SeqLayout, Tape, Var};
use crate::data::Episode;
use crate::error::{ClanError, Result};
use crate::rng::{Stream, StreamKey};

/// Default cap on packed rows per tape; bounds peak memory during training.
pub const DEFAULT_MAX_ROWS: usize = 24_576;

/// Packed variable-length sequences.
#[derive(Debug, Clone)]
pub struct SeqBatch<T> {
    pub x: Array2<T>,
    pub layout: Arc<SeqLayout>,
    /// Per-sequence identity used to key dropout masks.
    pub keys: Vec<u64>,
}

impl<T: Real> SeqBatch<T> {
    pub fn from_episodes<'a, I>(episodes: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a Episode>,
    {
        let eps: Vec<&Episode> = episodes.into_iter().collect();
        let keys = (0..eps.len() as u64).collect();
        Self::from_keyed(&eps, keys)
    }

    pub fn from_keyed(episodes: &[&Episode], keys: Vec<u64>) -> Result<Self> {
        if episodes.is_empty() {
            return Err(ClanError::Contract("empty batch".into()));
        }
        let d = episodes[0].channels();
        let mut lens = Vec::with_capacity(episodes.len());
        for e in episodes {
            if e.channels() != d {
                return Err(ClanError::Shape("mixed channel counts in one batch".into()));
            }
            if e.raw_len == 0 {
                return Err(ClanError::Contract(format!("episode {} is all padding", e.id)));
            }
            lens.push(e.raw_len);
        }
        let layout = SeqLayout::from_lens(lens);
        let mut x = Array2::zeros((layout.rows, d));
        for (s, e) in episodes.iter().enumerate() {
            let block = e.prefix().t().mapv(T::of);
            x.slice_mut(s![layout.range(s), ..]).assign(&block);
        }
        Ok(Self {
            x,
            layout: Arc::new(layout),
            keys,
        })
    }

    pub fn len(&self) -> usize {
        self.layout.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layout.is_empty()
    }

    /// Sequences `range` as their own batch.
    pub fn slice(&self, range: Range<usize>) -> Self {
        let lens = self.layout.lens[range.clone()].to_vec();
        let start = self.layout.offsets.get(range.start).copied().unwrap_or(self.layout.rows);
        let layout = SeqLayout::from_lens(lens);
        let x = self.x.slice(s![start..start + layout.rows, ..]).to_owned();
        Self {
            x,
            layout: Arc::new(layout),
            keys: self.keys[range].to_vec(),
        }
    }

    /// Consecutive sequence ranges holding at most `max_rows` rows each
    /// (a single longer sequence gets a chunk of its own).
    pub fn chunks(&self, max_rows: usize) -> Vec<Range<usize>> {
        let mut out = Vec::new();
        let mut start = 0;
        let mut rows = 0;
        for (s, len) in self.layout.lens.iter().enumerate() {
            if rows > 0 && rows + len > max_rows {
                out.push(start..s);
                start = s;
                rows = 0;
            }
            rows += len;
        }
        if start < self.layout.len() {
            out.push(start..self.layout.len());
        }
        out
    }
}

/// Sinusoidal positional encoding for positions `0..len`.
pub fn positional_encoding(len: usize, dim: usize) -> Array2<f64> {
    Array2::from_shape_fn((len, dim), |(t, i)| {
        let freq = 10_000f64.powf(-((i / 2 * 2) as f64) / dim as f64);
        let angle = t as f64 * freq;
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Training; `seed` and `step` key the dropout masks.
    Train { seed: u64, step: u64 },
}

/// Parameter leaves pushed onto a tape, by parameter id.
pub struct Bound(Vec<Option<Var>>);

impl Bound {
    pub fn get(&self, id: usize) -> Var {
        self.0[id].expect("parameter not bound on this tape")
    }
}

pub fn bind<T: Real>(tape: &mut Tape<T>, params: &ModelParams<T>, ids: Range<usize>) -> Bound {
    let mut vars = vec![None; params.len()];
    for id in ids {
        vars[id] = Some(tape.param(id, params.tensors[id].clone()));
    }
    Bound(vars)
}

fn backbone_ids<T: Real>(params: &ModelParams<T>) -> Range<usize> {
    0..params.index.backbone_end
}

fn head_ids<T: Real>(params: &ModelParams<T>) -> Range<usize> {
    params.index.backbone_end..params.len()
}

fn dropout_mask<T: Real>(
    layout: &SeqLayout,
    keys: &[u64],
    cols: usize,
    rate: f64,
    seed: u64,
    step: u64,
    site: u64,
) -> Array2<T> {
    let keep = T::of(1.0 / (1.0 - rate));
    let mut mask = Array2::zeros((layout.rows, cols));
    for s in 0..layout.len() {
        let mut rng = StreamKey::new(seed, Stream::Dropout)
            .episode(keys[s])
            .kind(site)
            .counter(step)
            .rng();
        for v in mask.slice_mut(s![layout.range(s), ..]).iter_mut() {
            if !rng.random_bool(rate) {
                *v = keep;
            }
        }
    }
    mask
}

/// Backbone output before pooling plus the attention nodes of each layer.
pub struct BackboneVars {
    pub pooled: Var,
    pub attention: Vec<Var>,
}

/// Embedding, positional encoding, pre-norm encoder layers, final layer
/// norm and masked mean pooling.
pub fn backbone<T: Real>(
    tape: &mut Tape<T>,
    params: &ModelParams<T>,
    p: &Bound,
    batch: &SeqBatch<T>,
    mode: Mode,
) -> Result<BackboneVars> {
    let cfg = &params.config;
    let idx = &params.index;
    if batch.x.ncols() != cfg.input_dim {
        return Err(ClanError::Shape(format!(
            "input has {} channels, encoder expects {}",
            batch.x.ncols(),
            cfg.input_dim
        )));
    }
    let layout = &batch.layout;
    let eps = T::of(cfg.layer_norm_eps);
    let max_len = layout.lens.iter().copied().max().unwrap_or(0);
    let pe_table = positional_encoding(max_len, cfg.model_dim);
    let mut pe = Array2::zeros((layout.rows, cfg.model_dim));
    for s in 0..layout.len() {
        let r = layout.range(s);
        pe.slice_mut(s![r, ..])
            .assign(&pe_table.slice(s![..layout.lens[s], ..]).mapv(T::of));
    }

    let x = tape.constant(batch.x.clone());
    let emb = tape.linear(x, p.get(idx.embed_w), Some(p.get(idx.embed_b)))?;
    let pe = tape.constant(pe);
    let mut h = tape.add(emb, pe)?;
    let mut attention = Vec::with_capacity(idx.layers.len());

    let drop = |tape: &mut Tape<T>, v: Var, site: u64| -> Result<Var> {
        match mode {
            Mode::Train { seed, step } if cfg.dropout_rate > 0.0 => {
                let cols = tape.value(v).ncols();
                let mask = dropout_mask(layout, &batch.keys, cols, cfg.dropout_rate, seed, step, site);
                tape.dropout(v, mask)
            }
            _ => Ok(v),
        }
    };

    for (li, l) in idx.layers.iter().enumerate() {
        let a = tape.layer_norm(h, p.get(l.ln1_g), p.get(l.ln1_b), eps);
        let q = tape.linear(a, p.get(l.wq), Some(p.get(l.bq)))?;
        let k = tape.linear(a, p.get(l.wk), Some(p.get(l.bk)))?;
        let v = tape.linear(a, p.get(l.wv), Some(p.get(l.bv)))?;
        let att = tape.attention(q, k, v, Arc::clone(layout))?;
        attention.push(att);
        let o = tape.linear(att, p.get(l.wo), Some(p.get(l.bo)))?;
        let o = drop(tape, o, 2 * li as u64)?;
        h = tape.add(h, o)?;

        let b = tape.layer_norm(h, p.get(l.ln2_g), p.get(l.ln2_b), eps);
        let f = tape.linear(b, p.get(l.ff1_w), Some(p.get(l.ff1_b)))?;
        let f = tape.relu(f);
        let f = tape.linear(f, p.get(l.ff2_w), Some(p.get(l.ff2_b)))?;
        let f = drop(tape, f, 2 * li as u64 + 1)?;
        h = tape.add(h, f)?;
    }
    let h = tape.layer_norm(h, p.get(idx.lnf_g), p.get(idx.lnf_b), eps);
    let pooled = tape.mean_pool(h, Arc::clone(layout))?;
    Ok(BackboneVars { pooled, attention })
}

/// How the projection head's batch norm normalizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Statistics of the current batch.
    Batch,
    /// Running statistics accumulated during training.
    Running,
}

/// Projection head output (before ℓ2 normalization) and, in batch mode,
/// the batch moments needed to update running statistics.
pub fn projection<T: Real>(
    tape: &mut Tape<T>,
    params: &ModelParams<T>,
    p: &Bound,
    feats: Var,
    norm: NormMode,
) -> Result<(Var, Option<BatchMoments<T>>)> {
    let HeadIndex::Tower(t) = params.index.head else {
        return Err(ClanError::Contract("model has no projection head".into()));
    };
    let eps = T::of(params.config.batch_norm_eps);
    let h = tape.linear(feats, p.get(t.p1_w), Some(p.get(t.p1_b)))?;
    let (h, moments) = match norm {
        NormMode::Batch => {
            let (h, m) = tape.batch_norm_train(h, p.get(t.bn_g), p.get(t.bn_b), eps);
            (h, Some(m))
        }
        NormMode::Running => {
            let Some(run) = &params.bn_running else {
                return Err(ClanError::Contract(
                    "batch-norm running statistics are uninitialized; train before evaluating".into(),
                ));
            };
            let h = tape.batch_norm_frozen(h, p.get(t.bn_g), p.get(t.bn_b), &run.mean, &run.var, eps);
            (h, None)
        }
    };
    let h = tape.relu(h);
    let z = tape.linear(h, p.get(t.p2_w), Some(p.get(t.p2_b)))?;
    Ok((z, moments))
}

pub fn classifier<T: Real>(tape: &mut Tape<T>, params: &ModelParams<T>, p: &Bound, feats: Var) -> Result<Var> {
    let HeadIndex::Tower(t) = params.index.head else {
        return Err(ClanError::Contract("model has no classifier head".into()));
    };
    tape.linear(feats, p.get(t.cls_w), Some(p.get(t.cls_b)))
}

pub fn discriminator<T: Real>(
    tape: &mut Tape<T>,
    params: &ModelParams<T>,
    p: &Bound,
    feats: Var,
) -> Result<Var> {
    let HeadIndex::Discriminator(d) = params.index.head else {
        return Err(ClanError::Contract("model has no discriminator head".into()));
    };
    tape.linear(feats, p.get(d.w), Some(p.get(d.b)))
}

/// Folds one batch's moments into the running statistics.
pub fn update_running_stats<T: Real>(params: &mut ModelParams<T>, m: &BatchMoments<T>) {
    let momentum = T::of(params.config.batch_norm_momentum);
    let n = m.n as f64;
    let unbiased = if m.n > 1 { T::of(n / (n - 1.0)) } else { T::one() };
    let dim = m.mean.len();
    let run = params.bn_running.get_or_insert_with(|| BatchNormState {
        mean: Array1::zeros(dim),
        var: Array1::ones(dim),
    });
    let keep = T::one() - momentum;
    run.mean = &run.mean * keep + &(&m.mean * momentum);
    run.var = &run.var * keep + &(&m.var * (momentum * unbiased));
}

/// Pooled backbone features `[B × model_dim]`, computed chunk by chunk.
pub fn forward_backbone<T: Real>(params: &ModelParams<T>, batch: &SeqBatch<T>, mode: Mode) -> Result<Array2<T>> {
    forward_backbone_chunked(params, batch, mode, DEFAULT_MAX_ROWS)
}

pub fn forward_backbone_chunked<T: Real>(
    params: &ModelParams<T>,
    batch: &SeqBatch<T>,
    mode: Mode,
    max_rows: usize,
) -> Result<Array2<T>> {
    let mut parts = Vec::new();
    for range in batch.chunks(max_rows) {
        let sub = batch.slice(range);
        let mut tape = Tape::new();
        let p = bind(&mut tape, params, backbone_ids(params));
        let out = backbone(&mut tape, params, &p, &sub, mode)?;
        parts.push(tape.value(out.pooled).clone());
    }
    let views: Vec<_> = parts.iter().map(|a| a.view()).collect();
    concatenate(Axis(0), &views).map_err(|e| ClanError::Shape(e.to_string()))
}

/// Projection head on precomputed features (no running-stat update).
pub fn forward_projection<T: Real>(params: &ModelParams<T>, feats: &Array2<T>, norm: NormMode) -> Result<Array2<T>> {
    let mut tape = Tape::new();
    let p = bind(&mut tape, params, head_ids(params));
    let f = tape.constant(feats.clone());
    let (z, _) = projection(&mut tape, params, &p, f, norm)?;
    Ok(tape.value(z).clone())
}

pub fn forward_classifier<T: Real>(params: &ModelParams<T>, feats: &Array2<T>) -> Result<Array2<T>> {
    let mut tape = Tape::new();
    let p = bind(&mut tape, params, head_ids(params));
    let f = tape.constant(feats.clone());
    let l = classifier(&mut tape, params, &p, f)?;
    Ok(tape.value(l).clone())
}

pub fn forward_discriminator<T: Real>(params: &ModelParams<T>, feats: &Array2<T>) -> Result<Array2<T>> {
    let mut tape = Tape::new();
    let p = bind(&mut tape, params, head_ids(params));
    let f = tape.constant(feats.clone());
    let l = discriminator(&mut tape, params, &p, f)?;
    Ok(tape.value(l).clone())
}

/// Loss graph built by a caller on top of pooled features.
pub struct HeadOutput<T> {
    pub loss: Var,
    /// Extra scalar nodes to report (e.g. loss components).
    pub parts: Vec<Var>,
    pub moments: Option<BatchMoments<T>>,
}

pub struct StepOutput<T> {
    pub loss: T,
    pub parts: Vec<T>,
    pub grads: Vec<Array2<T>>,
    pub moments: Option<BatchMoments<T>>,
}

/// Loss and exact gradients for one batch.
///
/// When the packed batch exceeds `max_rows`, the backbone runs chunk by
/// chunk: features are computed without keeping the graph, the head loss is
/// differentiated with respect to the features, and each chunk is then
/// recomputed and back-propagated with its slice of that gradient.
pub fn train_step<T, H>(
    params: &ModelParams<T>,
    batch: &SeqBatch<T>,
    mode: Mode,
    max_rows: usize,
    head: H,
) -> Result<StepOutput<T>>
where
    T: Real,
    H: Fn(&mut Tape<T>, &Bound, Var) -> Result<HeadOutput<T>>,
{
    let mut grads = params.zeros_like();
    let chunks = batch.chunks(max_rows);
    if chunks.len() == 1 {
        let mut tape = Tape::new();
        let p = bind(&mut tape, params, 0..params.len());
        let bb = backbone(&mut tape, params, &p, batch, mode)?;
        let out = head(&mut tape, &p, bb.pooled)?;
        tape.backward(out.loss, &mut grads)?;
        return Ok(StepOutput {
            loss: tape.scalar(out.loss),
            parts: out.parts.iter().map(|v| tape.scalar(*v)).collect(),
            grads,
            moments: out.moments,
        });
    }

    let feats = forward_backbone_chunked(params, batch, mode, max_rows)?;
    let mut head_tape = Tape::new();
    let p = bind(&mut head_tape, params, head_ids(params));
    let f = head_tape.tracked_input(feats);
    let out = head(&mut head_tape, &p, f)?;
    let back = head_tape.backward(out.loss, &mut grads)?;
    let dfeats = back
        .inputs
        .into_iter()
        .find(|(v, _)| *v == f)
        .map(|(_, g)| g)
        .unwrap_or_else(|| Array2::zeros(head_tape.value(f).dim()));

    for range in chunks {
        let seed = dfeats.slice(s![range.clone(), ..]).to_owned();
        let sub = batch.slice(range);
        let mut tape = Tape::new();
        let pb = bind(&mut tape, params, backbone_ids(params));
        let bb = backbone(&mut tape, params, &pb, &sub, mode)?;
        tape.backward_seeded(bb.pooled, seed, &mut grads)?;
    }
    Ok(StepOutput {
        loss: head_tape.scalar(out.loss),
        parts: out.parts.iter().map(|v| head_tape.scalar(*v)).collect(),
        grads,
        moments: out.moments,
    })
}

/// Attention weights of every layer for one episode (eval mode).
///
/// Each matrix is `raw_len × len`: rows are unpadded query positions,
/// columns all key positions, with padded key columns exactly zero.
pub fn export_attention<T: Real>(params: &ModelParams<T>, episode: &Episode) -> Result<Vec<Array2<T>>> {
    let batch = SeqBatch::from_episodes([episode])?;
    let mut tape = Tape::new();
    let p = bind(&mut tape, params, backbone_ids(params));
    let out = backbone(&mut tape, params, &p, &batch, Mode::Eval)?;
    let n = episode.raw_len;
    out.attention
        .iter()
        .map(|v| {
            let probs = tape
                .attention_probs(*v)
                .ok_or_else(|| ClanError::Invariant("attention node without weights".into()))?;
            let mut full = Array2::zeros((n, episode.len()));
            full.slice_mut(s![.., ..n]).assign(&probs[0]);
            Ok(full)
        })
        .collect()
}

/// Writes attention matrices as `layer,query,key,weight` rows.
pub fn write_attention_csv<T: Real>(path: &Path, maps: &[Array2<T>]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| ClanError::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io = |e| ClanError::io(path, e);
    writeln!(w, "layer,query,key,weight").map_err(io)?;
    for (l, m) in maps.iter().enumerate() {
        for ((q, k), v) in m.indexed_iter() {
            writeln!(w, "{l},{q},{k},{v}").map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

#[cfg(test)]
mod tests;
