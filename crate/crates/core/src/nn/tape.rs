//! Matrix-valued reverse-mode differentiation.
//!
//! A [`Tape`] records a forward computation as a list of nodes, each holding
//! its value (always a 2-D matrix) and the operation that produced it.
//! Operations are coarse (a whole linear layer, a whole attention block), each
//! with a hand-derived backward rule, so a tape for a Transformer step holds a
//! few dozen nodes rather than millions of scalars.
//!
//! Sequences of different lengths are packed row-wise into one matrix and
//! described by a [`SeqLayout`]; padded timesteps are simply absent.

use std::sync::Arc;

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rayon::prelude::*;

use super::scalar::Real;
use crate::error::{ClanError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Row ranges of sequences packed into one matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeqLayout {
    pub offsets: Vec<usize>,
    pub lens: Vec<usize>,
    pub rows: usize,
}

impl SeqLayout {
    pub fn from_lens(lens: Vec<usize>) -> Self {
        let mut offsets = Vec::with_capacity(lens.len());
        let mut rows = 0;
        for l in &lens {
            offsets.push(rows);
            rows += l;
        }
        Self {
            offsets,
            lens,
            rows,
        }
    }

    pub fn len(&self) -> usize {
        self.lens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lens.is_empty()
    }

    pub fn range(&self, seq: usize) -> std::ops::Range<usize> {
        self.offsets[seq]..self.offsets[seq] + self.lens[seq]
    }
}

/// One anchor of a multi-negative InfoNCE objective: the loss is
/// `-log softmax(sim / tau)[positive]` over `{positive} ∪ negatives`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Anchor {
    pub row: u32,
    pub positive: u32,
    pub negatives: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnchorPlan {
    pub rows: usize,
    pub anchors: Vec<Anchor>,
}

enum Op<T> {
    Leaf {
        param: Option<usize>,
        track: bool,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Dropout {
        x: Var,
        mask: Array2<T>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<T>,
        inv_std: Array1<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<T>,
        inv_std: Array1<T>,
        batch_stats: bool,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: Arc<SeqLayout>,
        probs: Vec<Array2<T>>,
        scale: T,
    },
    MeanPool {
        x: Var,
        layout: Arc<SeqLayout>,
    },
    L2Normalize {
        x: Var,
        norms: Array1<T>,
    },
    InfoNce {
        z: Var,
        plan: Arc<AnchorPlan>,
        tau: T,
        /// softmax weights per anchor, aligned with `[positive] ++ negatives`
        weights: Vec<Vec<T>>,
    },
    SoftmaxXent {
        logits: Var,
        labels: Vec<usize>,
        probs: Array2<T>,
    },
    BceLogits {
        logits: Var,
        labels: Vec<T>,
    },
    HalfSquaredNorm(Var),
}

struct Node<T> {
    value: Array2<T>,
    op: Op<T>,
}

/// Batch statistics produced by a train-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchMoments<T> {
    pub mean: Array1<T>,
    /// Population variance (divided by n).
    pub var: Array1<T>,
    pub n: usize,
}

pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Parameter gradients and gradients of tracked inputs from one backward pass.
pub struct Backward<T> {
    pub inputs: Vec<(Var, Array2<T>)>,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[[0, 0]]
    }

    /// A constant input (no gradient).
    pub fn constant(&mut self, value: Array2<T>) -> Var {
        self.push(value, Op::Leaf { param: None, track: false })
    }

    /// An input whose gradient is reported by [`Tape::backward_seeded`].
    pub fn tracked_input(&mut self, value: Array2<T>) -> Var {
        self.push(value, Op::Leaf { param: None, track: true })
    }

    /// A trainable tensor; gradients accumulate into slot `id`.
    pub fn param(&mut self, id: usize, value: Array2<T>) -> Var {
        self.push(value, Op::Leaf { param: Some(id), track: false })
    }

    /// Attention weights recorded by an attention node, one matrix per sequence.
    pub fn attention_probs(&self, v: Var) -> Option<&[Array2<T>]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.ncols() != wv.nrows() {
            return Err(ClanError::Shape(format!(
                "linear: input {:?} vs weight {:?}",
                xv.dim(),
                wv.dim()
            )));
        }
        let mut y = xv.dot(wv);
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.dim() != (1, wv.ncols()) {
                return Err(ClanError::Shape(format!("linear: bias {:?}", bv.dim())));
            }
            y += &bv.row(0);
        }
        Ok(self.push(y, Op::Linear { x, w, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).dim() != self.value(b).dim() {
            return Err(ClanError::Shape(format!(
                "add: {:?} vs {:?}",
                self.value(a).dim(),
                self.value(b).dim()
            )));
        }
        let y = self.value(a) + self.value(b);
        Ok(self.push(y, Op::Add(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let y = self.value(x) * factor;
        self.push(y, Op::Scale(x, factor))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).mapv(|v| v.max(T::zero()));
        self.push(y, Op::Relu(x))
    }

    /// Multiplies by a fixed mask (already scaled by `1 / keep`).
    pub fn dropout(&mut self, x: Var, mask: Array2<T>) -> Result<Var> {
        if mask.dim() != self.value(x).dim() {
            return Err(ClanError::Shape("dropout mask shape".into()));
        }
        let y = self.value(x) * &mask;
        Ok(self.push(y, Op::Dropout { x, mask }))
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (`1 × d`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Var {
        let xv = self.value(x);
        let d = T::of(xv.ncols() as f64);
        let mean = xv.sum_axis(Axis(1)) / d;
        let mut xhat = xv - &mean.view().insert_axis(Axis(1));
        let var = xhat.mapv(|v| v * v).sum_axis(Axis(1)) / d;
        let inv_std = var.mapv(|v| T::one() / (v + eps).sqrt());
        xhat *= &inv_std.view().insert_axis(Axis(1));
        let y = &xhat * &self.value(gamma).row(0) + &self.value(beta).row(0);
        self.push(
            y,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Column-wise batch normalization using the batch's own statistics.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> (Var, BatchMoments<T>) {
        let xv = self.value(x);
        let n = xv.nrows();
        let nt = T::of(n as f64);
        let mean = xv.sum_axis(Axis(0)) / nt;
        let mut xhat = xv - &mean;
        let var = xhat.mapv(|v| v * v).sum_axis(Axis(0)) / nt;
        let inv_std = var.mapv(|v| T::one() / (v + eps).sqrt());
        xhat *= &inv_std;
        let y = &xhat * &self.value(gamma).row(0) + &self.value(beta).row(0);
        let moments = BatchMoments { mean, var, n };
        let out = self.push(
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: true,
            },
        );
        (out, moments)
    }

    /// Column-wise batch normalization with frozen statistics.
    pub fn batch_norm_frozen(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &Array1<T>,
        var: &Array1<T>,
        eps: T,
    ) -> Var {
        let inv_std = var.mapv(|v| T::one() / (v + eps).sqrt());
        let xhat = (self.value(x) - mean) * &inv_std;
        let y = &xhat * &self.value(gamma).row(0) + &self.value(beta).row(0);
        self.push(
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: false,
            },
        )
    }

    /// Scaled dot-product self-attention, independently within each sequence.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: Arc<SeqLayout>) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if qv.nrows() != layout.rows || kv.dim() != qv.dim() || vv.nrows() != layout.rows {
            return Err(ClanError::Shape("attention inputs do not match layout".into()));
        }
        let scale = T::one() / T::of(qv.ncols() as f64).sqrt();
        let per_seq: Vec<(Array2<T>, Array2<T>)> = (0..layout.len())
            .into_par_iter()
            .map(|s| {
                let r = layout.range(s);
                let qs = qv.slice(s![r.clone(), ..]);
                let ks = kv.slice(s![r.clone(), ..]);
                let vs = vv.slice(s![r, ..]);
                let mut p = qs.dot(&ks.t());
                p *= scale;
                softmax_rows(&mut p);
                let o = p.dot(&vs);
                (p, o)
            })
            .collect();
        let mut out = Array2::zeros((layout.rows, vv.ncols()));
        let mut probs = Vec::with_capacity(per_seq.len());
        for (s, (p, o)) in per_seq.into_iter().enumerate() {
            out.slice_mut(s![layout.range(s), ..]).assign(&o);
            probs.push(p);
        }
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
                scale,
            },
        ))
    }

    /// Mean over the rows of each sequence: `(rows × d) -> (n_seq × d)`.
    pub fn mean_pool(&mut self, x: Var, layout: Arc<SeqLayout>) -> Result<Var> {
        let xv = self.value(x);
        if xv.nrows() != layout.rows {
            return Err(ClanError::Shape("mean_pool input does not match layout".into()));
        }
        if let Some(s) = layout.lens.iter().position(|l| *l == 0) {
            return Err(ClanError::Contract(format!("sequence {s} has no unpadded timesteps")));
        }
        let mut y = Array2::zeros((layout.len(), xv.ncols()));
        for s in 0..layout.len() {
            let block = xv.slice(s![layout.range(s), ..]);
            let mean = block.sum_axis(Axis(0)) / T::of(layout.lens[s] as f64);
            y.row_mut(s).assign(&mean);
        }
        Ok(self.push(y, Op::MeanPool { x, layout }))
    }

    /// Scales each row to unit Euclidean norm (norm floored at `1e-12`).
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let floor = T::of(1e-12);
        let norms = xv
            .rows()
            .into_iter()
            .map(|r| r.dot(&r).sqrt().max(floor))
            .collect::<Array1<T>>();
        let y = xv / &norms.view().insert_axis(Axis(1));
        self.push(y, Op::L2Normalize { x, norms })
    }

    /// Mean InfoNCE loss over the anchors of `plan`; rows of `z` are expected
    /// to be unit vectors so that `z zᵀ` holds cosine similarities.
    pub fn info_nce(&mut self, z: Var, plan: Arc<AnchorPlan>, tau: T) -> Result<Var> {
        let zv = self.value(z);
        if zv.nrows() != plan.rows {
            return Err(ClanError::Shape(format!(
                "info_nce: {} rows, plan expects {}",
                zv.nrows(),
                plan.rows
            )));
        }
        if plan.anchors.is_empty() {
            return Err(ClanError::Contract("info_nce plan has no anchors".into()));
        }
        let sim = zv.dot(&zv.t());
        let mut total = T::zero();
        let mut weights = Vec::with_capacity(plan.anchors.len());
        for a in &plan.anchors {
            let row = sim.row(a.row as usize);
            let logits: Vec<T> = std::iter::once(a.positive)
                .chain(a.negatives.iter().copied())
                .map(|c| row[c as usize] / tau)
                .collect();
            let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
            let exps: Vec<T> = logits.iter().map(|l| (*l - max).exp()).collect();
            let denom: T = exps.iter().copied().sum();
            total += denom.ln() + max - logits[0];
            weights.push(exps.into_iter().map(|e| e / denom).collect());
        }
        let loss = total / T::of(plan.anchors.len() as f64);
        Ok(self.push(
            Array2::from_elem((1, 1), loss),
            Op::InfoNce {
                z,
                plan,
                tau,
                weights,
            },
        ))
    }

    /// Mean softmax cross-entropy of integer `labels`.
    pub fn softmax_xent(&mut self, logits: Var, labels: Vec<usize>) -> Result<Var> {
        let lv = self.value(logits);
        if labels.len() != lv.nrows() {
            return Err(ClanError::Shape("softmax_xent: label count".into()));
        }
        if let Some(bad) = labels.iter().find(|l| **l >= lv.ncols()) {
            return Err(ClanError::Contract(format!(
                "label {bad} out of range for {} classes",
                lv.ncols()
            )));
        }
        let mut probs = lv.clone();
        softmax_rows(&mut probs);
        let n = T::of(labels.len() as f64);
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, l)| -log_softmax_at(lv.row(i).as_slice().expect("contiguous"), *l))
            .sum::<T>()
            / n;
        Ok(self.push(
            Array2::from_elem((1, 1), loss),
            Op::SoftmaxXent {
                logits,
                labels,
                probs,
            },
        ))
    }

    /// Mean binary cross-entropy on logits (`n × 1`) against 0/1 labels.
    pub fn bce_logits(&mut self, logits: Var, labels: Vec<T>) -> Result<Var> {
        let lv = self.value(logits);
        if lv.ncols() != 1 || lv.nrows() != labels.len() {
            return Err(ClanError::Shape("bce_logits expects n × 1 logits".into()));
        }
        let n = T::of(labels.len() as f64);
        let loss = lv
            .column(0)
            .iter()
            .zip(&labels)
            .map(|(l, y)| softplus(*l) - *y * *l)
            .sum::<T>()
            / n;
        Ok(self.push(Array2::from_elem((1, 1), loss), Op::BceLogits { logits, labels }))
    }

    pub fn half_squared_norm(&mut self, x: Var) -> Var {
        let v = self.value(x).iter().map(|v| *v * *v).sum::<T>() * T::of(0.5);
        self.push(Array2::from_elem((1, 1), v), Op::HalfSquaredNorm(x))
    }

    /// Backpropagates from a scalar node, accumulating parameter gradients
    /// into `param_grads` (indexed by parameter id).
    pub fn backward(&self, root: Var, param_grads: &mut [Array2<T>]) -> Result<Backward<T>> {
        if self.value(root).dim() != (1, 1) {
            return Err(ClanError::Contract("backward root must be a scalar".into()));
        }
        let loss = self.scalar(root);
        if !loss.is_finite() {
            return Err(ClanError::Numeric(format!("non-finite loss {loss}")));
        }
        self.backward_seeded(root, Array2::from_elem((1, 1), T::one()), param_grads)
    }

    /// Backpropagates an explicit upstream gradient `seed` for node `root`.
    pub fn backward_seeded(
        &self,
        root: Var,
        seed: Array2<T>,
        param_grads: &mut [Array2<T>],
    ) -> Result<Backward<T>> {
        if seed.dim() != self.value(root).dim() {
            return Err(ClanError::Shape("backward seed shape".into()));
        }
        let mut grads: Vec<Option<Array2<T>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(seed);
        let mut tracked = Vec::new();

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Leaf { param, track } => {
                    if let Some(id) = param {
                        let slot = param_grads.get_mut(*id).ok_or_else(|| {
                            ClanError::Shape(format!("no gradient slot for parameter {id}"))
                        })?;
                        if slot.dim() != g.dim() {
                            return Err(ClanError::Shape(format!("gradient slot {id} shape")));
                        }
                        *slot += &g;
                    } else if *track {
                        tracked.push((Var(idx), g));
                    }
                }
                Op::Linear { x, w, b } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    accumulate(&mut grads, *w, xv.t().dot(&g));
                    if let Some(b) = b {
                        accumulate(&mut grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    accumulate(&mut grads, *x, g.dot(&wv.t()));
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Scale(x, f) => accumulate(&mut grads, *x, g * *f),
                Op::Relu(x) => {
                    let y = &self.nodes[idx].value;
                    let mut dx = g;
                    Zip::from(&mut dx).and(y).for_each(|d, y| {
                        if *y <= T::zero() {
                            *d = T::zero();
                        }
                    });
                    accumulate(&mut grads, *x, dx);
                }
                Op::Dropout { x, mask } => accumulate(&mut grads, *x, g * mask),
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gamma);
                    accumulate(&mut grads, *gamma, (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    accumulate(&mut grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    let dxhat = g * &gv.row(0);
                    let dx = norm_backward(&dxhat, xhat, inv_std, Axis(1));
                    accumulate(&mut grads, *x, dx);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    let gv = self.value(*gamma);
                    accumulate(&mut grads, *gamma, (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    accumulate(&mut grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    let dxhat = g * &gv.row(0);
                    let dx = if *batch_stats {
                        norm_backward(&dxhat, xhat, inv_std, Axis(0))
                    } else {
                        dxhat * inv_std
                    };
                    accumulate(&mut grads, *x, dx);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    layout,
                    probs,
                    scale,
                } => {
                    let (dq, dk, dv) =
                        attention_backward(&g, self.value(*q), self.value(*k), self.value(*v), layout, probs, *scale);
                    accumulate(&mut grads, *q, dq);
                    accumulate(&mut grads, *k, dk);
                    accumulate(&mut grads, *v, dv);
                }
                Op::MeanPool { x, layout } => {
                    let mut dx = Array2::zeros((layout.rows, g.ncols()));
                    for s in 0..layout.len() {
                        let share = &g.row(s) / T::of(layout.lens[s] as f64);
                        dx.slice_mut(s![layout.range(s), ..]).assign(&share.broadcast((layout.lens[s], g.ncols())).expect("broadcast"));
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::L2Normalize { x, norms } => {
                    let y = &self.nodes[idx].value;
                    let dots = (&g * y).sum_axis(Axis(1));
                    let mut dx = g - &(y * &dots.view().insert_axis(Axis(1)));
                    dx /= &norms.view().insert_axis(Axis(1));
                    accumulate(&mut grads, *x, dx);
                }
                Op::InfoNce {
                    z,
                    plan,
                    tau,
                    weights,
                } => {
                    let zv = self.value(*z);
                    let upstream = g[[0, 0]];
                    let coef = upstream / (T::of(plan.anchors.len() as f64) * *tau);
                    let mut dsim = Array2::<T>::zeros((plan.rows, plan.rows));
                    for (a, w) in plan.anchors.iter().zip(weights) {
                        let r = a.row as usize;
                        dsim[[r, a.positive as usize]] += coef * (w[0] - T::one());
                        for (c, wc) in a.negatives.iter().zip(&w[1..]) {
                            dsim[[r, *c as usize]] += coef * *wc;
                        }
                    }
                    let sym = &dsim + &dsim.t();
                    accumulate(&mut grads, *z, sym.dot(zv));
                }
                Op::SoftmaxXent {
                    logits,
                    labels,
                    probs,
                } => {
                    let upstream = g[[0, 0]] / T::of(labels.len() as f64);
                    let mut d = probs.clone();
                    for (i, l) in labels.iter().enumerate() {
                        d[[i, *l]] -= T::one();
                    }
                    accumulate(&mut grads, *logits, d * upstream);
                }
                Op::BceLogits { logits, labels } => {
                    let upstream = g[[0, 0]] / T::of(labels.len() as f64);
                    let lv = self.value(*logits);
                    let d = Array2::from_shape_fn(lv.dim(), |(i, _)| {
                        (sigmoid(lv[[i, 0]]) - labels[i]) * upstream
                    });
                    accumulate(&mut grads, *logits, d);
                }
                Op::HalfSquaredNorm(x) => {
                    let upstream = g[[0, 0]];
                    accumulate(&mut grads, *x, self.value(*x) * upstream);
                }
            }
        }
        tracked.reverse();
        Ok(Backward { inputs: tracked })
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Array2<T>>], v: Var, g: Array2<T>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Backward of `xhat = (x - mean) * inv_std` along `axis`
/// (`Axis(1)` = per row, layer norm; `Axis(0)` = per column, batch norm).
fn norm_backward<T: Real>(
    dxhat: &Array2<T>,
    xhat: &Array2<T>,
    inv_std: &Array1<T>,
    axis: Axis,
) -> Array2<T> {
    let n = T::of(dxhat.len_of(axis) as f64);
    let sum_d = dxhat.sum_axis(axis);
    let sum_dx = (dxhat * xhat).sum_axis(axis);
    let (sum_d, sum_dx, inv) = (
        sum_d.insert_axis(axis),
        sum_dx.insert_axis(axis),
        inv_std.view().insert_axis(axis),
    );
    let mut dx = dxhat * n - &sum_d - &(xhat * &sum_dx);
    dx *= &inv;
    dx / n
}

fn attention_backward<T: Real>(
    g: &Array2<T>,
    q: &Array2<T>,
    k: &Array2<T>,
    v: &Array2<T>,
    layout: &SeqLayout,
    probs: &[Array2<T>],
    scale: T,
) -> (Array2<T>, Array2<T>, Array2<T>) {
    let per_seq: Vec<(Array2<T>, Array2<T>, Array2<T>)> = (0..layout.len())
        .into_par_iter()
        .map(|s| {
            let r = layout.range(s);
            let p = &probs[s];
            let go: ArrayView2<T> = g.slice(s![r.clone(), ..]);
            let qs = q.slice(s![r.clone(), ..]);
            let ks = k.slice(s![r.clone(), ..]);
            let vs = v.slice(s![r, ..]);
            let dv = p.t().dot(&go);
            let dp = go.dot(&vs.t());
            let row_dot = (&dp * p).sum_axis(Axis(1));
            let mut ds = dp - &row_dot.insert_axis(Axis(1));
            ds *= p;
            ds *= scale;
            let dq = ds.dot(&ks);
            let dk = ds.t().dot(&qs);
            (dq, dk, dv)
        })
        .collect();
    let mut dq = Array2::zeros(q.dim());
    let mut dk = Array2::zeros(k.dim());
    let mut dv = Array2::zeros(v.dim());
    for (s, (a, b, c)) in per_seq.into_iter().enumerate() {
        let r = layout.range(s);
        dq.slice_mut(s![r.clone(), ..]).assign(&a);
        dk.slice_mut(s![r.clone(), ..]).assign(&b);
        dv.slice_mut(s![r, ..]).assign(&c);
    }
    (dq, dk, dv)
}

/// In-place numerically stable softmax of every row.
pub fn softmax_rows<T: Real>(m: &mut Array2<T>) {
    for mut row in m.rows_mut() {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        row.mapv_inplace(|v| {
            let e = (v - max).exp();
            sum += e;
            e
        });
        row.mapv_inplace(|v| v / sum);
    }
}

pub fn log_softmax_at<T: Real>(row: &[T], idx: usize) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|v| (*v - max).exp()).sum::<T>().ln() + max;
    row[idx] - lse
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Real>(x: T) -> T {
    // log(1 + e^x) without overflow
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}
