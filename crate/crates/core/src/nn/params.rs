use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::scalar::Real;
use crate::error::{ClanError, Result};
use crate::rng::{Stream, StreamKey};

/// Which heads sit on top of the backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadLayout {
    /// Projection head plus a `(K+1)`-way transform classifier.
    Tower { n_classes: usize },
    /// One logit separating original from augmented episodes.
    Discriminator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Channels per timestep.
    pub input_dim: usize,
    /// Timesteps of the (padded) input; sets the default FFN width.
    pub input_len: usize,
    pub model_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Defaults to `2 * input_len`.
    pub ffn_dim: Option<usize>,
    pub proj_dim: usize,
    pub dropout_rate: f64,
    pub layer_norm_eps: f64,
    pub batch_norm_eps: f64,
    pub batch_norm_momentum: f64,
    pub head: HeadLayout,
}

impl EncoderConfig {
    pub fn tower(input_dim: usize, input_len: usize, n_classes: usize) -> Self {
        Self {
            input_dim,
            input_len,
            model_dim: 64,
            n_layers: 2,
            n_heads: 1,
            ffn_dim: None,
            proj_dim: 128,
            dropout_rate: 0.0,
            layer_norm_eps: 1e-5,
            batch_norm_eps: 1e-5,
            batch_norm_momentum: 0.1,
            head: HeadLayout::Tower { n_classes },
        }
    }

    pub fn discriminator(input_dim: usize, input_len: usize) -> Self {
        Self {
            head: HeadLayout::Discriminator,
            ..Self::tower(input_dim, input_len, 2)
        }
    }

    pub fn ffn_width(&self) -> usize {
        self.ffn_dim.unwrap_or(2 * self.input_len)
    }

    pub fn n_classes(&self) -> Option<usize> {
        match self.head {
            HeadLayout::Tower { n_classes } => Some(n_classes),
            HeadLayout::Discriminator => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ClanError::Config(format!("encoder: {m}")));
        if self.input_dim == 0 || self.input_len == 0 || self.model_dim == 0 {
            return bad("input_dim, input_len and model_dim must be positive");
        }
        if self.n_layers == 0 {
            return bad("n_layers must be at least 1");
        }
        if self.n_heads != 1 {
            return bad("only single-head attention is supported");
        }
        if self.ffn_width() == 0 || self.proj_dim == 0 {
            return bad("ffn_dim and proj_dim must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate must lie in [0, 1)");
        }
        if !(self.layer_norm_eps > 0.0 && self.batch_norm_eps > 0.0) {
            return bad("normalization epsilons must be positive");
        }
        if !(self.batch_norm_momentum > 0.0 && self.batch_norm_momentum <= 1.0) {
            return bad("batch_norm_momentum must lie in (0, 1]");
        }
        if let HeadLayout::Tower { n_classes } = self.head {
            if n_classes < 2 {
                return bad("n_classes must be at least 2");
            }
        }
        Ok(())
    }
}

/// Parameter ids of one encoder layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerIndex {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub ff1_w: usize,
    pub ff1_b: usize,
    pub ff2_w: usize,
    pub ff2_b: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TowerIndex {
    pub p1_w: usize,
    pub p1_b: usize,
    pub bn_g: usize,
    pub bn_b: usize,
    pub p2_w: usize,
    pub p2_b: usize,
    pub cls_w: usize,
    pub cls_b: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiscIndex {
    pub w: usize,
    pub b: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadIndex {
    Tower(TowerIndex),
    Discriminator(DiscIndex),
}

/// Positions of every tensor in [`ModelParams::tensors`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamIndex {
    pub embed_w: usize,
    pub embed_b: usize,
    pub layers: Vec<LayerIndex>,
    pub lnf_g: usize,
    pub lnf_b: usize,
    pub head: HeadIndex,
    /// Tensors belonging to the backbone: `0..backbone_end`.
    pub backbone_end: usize,
}

/// Shape and initializer of one tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    /// Uniform in `±sqrt(6 / rows)`.
    FanIn,
    Zeros,
    Ones,
}

struct Layout {
    names: Vec<String>,
    shapes: Vec<(usize, usize)>,
    inits: Vec<Init>,
}

impl Layout {
    fn add(&mut self, name: String, shape: (usize, usize), init: Init) -> usize {
        self.names.push(name);
        self.shapes.push(shape);
        self.inits.push(init);
        self.names.len() - 1
    }
}

fn layout(cfg: &EncoderConfig) -> (Layout, ParamIndex) {
    let mut l = Layout {
        names: Vec::new(),
        shapes: Vec::new(),
        inits: Vec::new(),
    };
    let d = cfg.model_dim;
    let f = cfg.ffn_width();
    let embed_w = l.add("embed.w".into(), (cfg.input_dim, d), Init::FanIn);
    let embed_b = l.add("embed.b".into(), (1, d), Init::Zeros);
    let mut layers = Vec::new();
    for i in 0..cfg.n_layers {
        let p = |s: &str| format!("layer{i}.{s}");
        layers.push(LayerIndex {
            ln1_g: l.add(p("ln1.g"), (1, d), Init::Ones),
            ln1_b: l.add(p("ln1.b"), (1, d), Init::Zeros),
            wq: l.add(p("attn.wq"), (d, d), Init::FanIn),
            bq: l.add(p("attn.bq"), (1, d), Init::Zeros),
            wk: l.add(p("attn.wk"), (d, d), Init::FanIn),
            bk: l.add(p("attn.bk"), (1, d), Init::Zeros),
            wv: l.add(p("attn.wv"), (d, d), Init::FanIn),
            bv: l.add(p("attn.bv"), (1, d), Init::Zeros),
            wo: l.add(p("attn.wo"), (d, d), Init::FanIn),
            bo: l.add(p("attn.bo"), (1, d), Init::Zeros),
            ln2_g: l.add(p("ln2.g"), (1, d), Init::Ones),
            ln2_b: l.add(p("ln2.b"), (1, d), Init::Zeros),
            ff1_w: l.add(p("ffn.w1"), (d, f), Init::FanIn),
            ff1_b: l.add(p("ffn.b1"), (1, f), Init::Zeros),
            ff2_w: l.add(p("ffn.w2"), (f, d), Init::FanIn),
            ff2_b: l.add(p("ffn.b2"), (1, d), Init::Zeros),
        });
    }
    let lnf_g = l.add("final_ln.g".into(), (1, d), Init::Ones);
    let lnf_b = l.add("final_ln.b".into(), (1, d), Init::Zeros);
    let backbone_end = l.names.len();
    let head = match cfg.head {
        HeadLayout::Tower { n_classes } => {
            let p = cfg.proj_dim;
            HeadIndex::Tower(TowerIndex {
                p1_w: l.add("proj.w1".into(), (d, p), Init::FanIn),
                p1_b: l.add("proj.b1".into(), (1, p), Init::Zeros),
                bn_g: l.add("proj.bn.g".into(), (1, p), Init::Ones),
                bn_b: l.add("proj.bn.b".into(), (1, p), Init::Zeros),
                p2_w: l.add("proj.w2".into(), (p, p), Init::FanIn),
                p2_b: l.add("proj.b2".into(), (1, p), Init::Zeros),
                cls_w: l.add("cls.w".into(), (d, n_classes), Init::FanIn),
                cls_b: l.add("cls.b".into(), (1, n_classes), Init::Zeros),
            })
        }
        HeadLayout::Discriminator => HeadIndex::Discriminator(DiscIndex {
            w: l.add("disc.w".into(), (d, 1), Init::FanIn),
            b: l.add("disc.b".into(), (1, 1), Init::Zeros),
        }),
    };
    (
        l,
        ParamIndex {
            embed_w,
            embed_b,
            layers,
            lnf_g,
            lnf_b,
            head,
            backbone_end,
        },
    )
}

/// Running statistics of the projection head's batch norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormState<T> {
    pub mean: Array1<T>,
    pub var: Array1<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T: Real> {
    pub config: EncoderConfig,
    pub names: Vec<String>,
    pub tensors: Vec<Array2<T>>,
    /// `None` until the first train-mode projection pass.
    pub bn_running: Option<BatchNormState<T>>,
    pub index: ParamIndex,
}

impl<T: Real> ModelParams<T> {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn zeros_like(&self) -> Vec<Array2<T>> {
        self.tensors.iter().map(|t| Array2::zeros(t.dim())).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn tensor(&self, name: &str) -> Option<&Array2<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    /// Same parameters in another float type.
    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        let conv1 = |a: &Array1<T>| a.mapv(|v| U::of(v.f64()));
        ModelParams {
            config: self.config.clone(),
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.mapv(|v| U::of(v.f64()))).collect(),
            bn_running: self.bn_running.as_ref().map(|s| BatchNormState {
                mean: conv1(&s.mean),
                var: conv1(&s.var),
            }),
            index: self.index.clone(),
        }
    }

    /// Rebuilds the index from the config and checks every tensor's shape.
    pub fn from_parts(
        config: EncoderConfig,
        tensors: Vec<Array2<T>>,
        bn_running: Option<BatchNormState<T>>,
    ) -> Result<Self> {
        config.validate()?;
        let (l, index) = layout(&config);
        if tensors.len() != l.shapes.len() {
            return Err(ClanError::Shape(format!(
                "expected {} tensors, found {}",
                l.shapes.len(),
                tensors.len()
            )));
        }
        for ((t, shape), name) in tensors.iter().zip(&l.shapes).zip(&l.names) {
            if t.dim() != *shape {
                return Err(ClanError::Shape(format!("{name}: {:?} vs {:?}", t.dim(), shape)));
            }
        }
        if let (Some(s), HeadIndex::Tower(_)) = (&bn_running, &index.head) {
            if s.mean.len() != config.proj_dim || s.var.len() != config.proj_dim {
                return Err(ClanError::Shape("batch-norm running statistics".into()));
            }
        }
        Ok(Self {
            config,
            names: l.names,
            tensors,
            bn_running,
            index,
        })
    }
}

/// Fan-in scaled uniform weights, zero biases, unit norm gains.
pub fn init_params<T: Real>(config: &EncoderConfig, seed: u64) -> Result<ModelParams<T>> {
    config.validate()?;
    let (l, index) = layout(config);
    let mut rng = StreamKey::new(seed, Stream::Init).rng();
    let tensors = l
        .shapes
        .iter()
        .zip(&l.inits)
        .map(|(&(r, c), init)| match init {
            Init::Zeros => Array2::zeros((r, c)),
            Init::Ones => Array2::ones((r, c)),
            Init::FanIn => {
                let bound = (6.0 / r as f64).sqrt();
                Array2::from_shape_simple_fn((r, c), || T::of(rng.random_range(-bound..bound)))
            }
        })
        .collect();
    Ok(ModelParams {
        config: config.clone(),
        names: l.names,
        tensors,
        bn_running: None,
        index,
    })
}
