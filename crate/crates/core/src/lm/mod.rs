//! A decoder-only causal language model trained from random initialization.
//!
//! Pre-norm RMS normalization, rotary positions on queries and keys, causal
//! multi-head attention and a SwiGLU feed-forward block, with no biases.

mod checkpoint;
mod forward;
mod train;

pub use checkpoint::{read_checkpoint_meta, Checkpoint, CheckpointMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use forward::{KvCache, Wanted};
pub use train::{batch_loss, cross_entropy, loss_and_grad, mean_loss, AdamConfig, StepMetrics, TrainConfig, Trainer};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    #[serde(default = "defaults::context_length")]
    pub context_length: usize,
    #[serde(default = "defaults::layers")]
    pub layers: usize,
    #[serde(default = "defaults::heads")]
    pub heads: usize,
    #[serde(default = "defaults::model_dim")]
    pub model_dim: usize,
    /// Feed-forward width; four times `model_dim` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mlp_hidden_dim: Option<usize>,
    #[serde(default)]
    pub tie_embeddings: bool,
    #[serde(default = "defaults::rope_base")]
    pub rope_base: f64,
    #[serde(default = "defaults::norm_eps")]
    pub norm_eps: f64,
    #[serde(default = "defaults::init_std")]
    pub init_std: f64,
}

mod defaults {
    pub fn context_length() -> usize {
        256
    }
    pub fn layers() -> usize {
        4
    }
    pub fn heads() -> usize {
        4
    }
    pub fn model_dim() -> usize {
        128
    }
    pub fn rope_base() -> f64 {
        10_000.0
    }
    pub fn norm_eps() -> f64 {
        1e-5
    }
    pub fn init_std() -> f64 {
        0.02
    }
}

impl ModelConfig {
    /// Desk-scale defaults for a given vocabulary size.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            context_length: defaults::context_length(),
            layers: defaults::layers(),
            heads: defaults::heads(),
            model_dim: defaults::model_dim(),
            mlp_hidden_dim: None,
            tie_embeddings: false,
            rope_base: defaults::rope_base(),
            norm_eps: defaults::norm_eps(),
            init_std: defaults::init_std(),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.mlp_hidden_dim.unwrap_or(4 * self.model_dim)
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        if self.vocab_size == 0 || self.layers == 0 || self.heads == 0 || self.model_dim == 0 || self.hidden_dim() == 0 {
            return fail("model sizes must be positive".into());
        }
        if self.model_dim % self.heads != 0 {
            return fail(format!("model_dim {} is not divisible by heads {}", self.model_dim, self.heads));
        }
        if self.head_dim() % 2 != 0 {
            return fail(format!("head dimension {} must be even for rotary positions", self.head_dim()));
        }
        if self.context_length < 2 {
            return fail("context_length must be at least 2".into());
        }
        if !(self.norm_eps > 0.0 && self.rope_base > 1.0 && self.init_std > 0.0) {
            return fail("norm_eps, rope_base and init_std must be positive (rope_base > 1)".into());
        }
        Ok(())
    }
}

/// One named tensor in the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Norm gains are vectors; every matrix is weight-decayed.
    pub fn decays(&self) -> bool {
        self.shape.len() >= 2
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct LayerOffsets {
    pub attn_norm: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub mlp_norm: usize,
    pub w_gate: usize,
    pub w_up: usize,
    pub w_down: usize,
}

#[derive(Clone, Debug)]
pub struct Layout {
    tensors: Vec<TensorSpec>,
    pub(crate) embed: usize,
    pub(crate) layers: Vec<LayerOffsets>,
    pub(crate) final_norm: usize,
    pub(crate) head: Option<usize>,
    total: usize,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let (v, d, h) = (cfg.vocab_size, cfg.model_dim, cfg.hidden_dim());
        let mut tensors = Vec::new();
        let mut total = 0;
        let mut add = |name: String, shape: Vec<usize>| {
            let offset = total;
            total += shape.iter().product::<usize>();
            tensors.push(TensorSpec { name, shape, offset });
            offset
        };
        let embed = add("tok_embedding".into(), vec![v, d]);
        let layers = (0..cfg.layers)
            .map(|l| LayerOffsets {
                attn_norm: add(format!("layers.{l}.attn_norm"), vec![d]),
                wq: add(format!("layers.{l}.wq"), vec![d, d]),
                wk: add(format!("layers.{l}.wk"), vec![d, d]),
                wv: add(format!("layers.{l}.wv"), vec![d, d]),
                wo: add(format!("layers.{l}.wo"), vec![d, d]),
                mlp_norm: add(format!("layers.{l}.mlp_norm"), vec![d]),
                w_gate: add(format!("layers.{l}.w_gate"), vec![d, h]),
                w_up: add(format!("layers.{l}.w_up"), vec![d, h]),
                w_down: add(format!("layers.{l}.w_down"), vec![h, d]),
            })
            .collect();
        let final_norm = add("final_norm".into(), vec![d]);
        let head = (!cfg.tie_embeddings).then(|| add("lm_head".into(), vec![d, v]));
        Self { tensors, embed, layers, final_norm, head, total }
    }

    pub fn tensors(&self) -> &[TensorSpec] {
        &self.tensors
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn get(&self, name: &str) -> Option<&TensorSpec> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Parameter groups used by gradient checks.
    pub fn group_of(name: &str) -> &'static str {
        if name == "tok_embedding" {
            "embedding"
        } else if name == "lm_head" {
            "output_head"
        } else if name.ends_with("norm") {
            "norm"
        } else if name.contains(".w_") {
            "mlp"
        } else {
            "attention"
        }
    }
}

/// Model parameters in one flat vector described by a [`Layout`].
#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    cfg: ModelConfig,
    layout: Layout,
    pub params: Vec<T>,
    rope_cos: Vec<T>,
    rope_sin: Vec<T>,
}

impl<T: Scalar> PartialEq for Model<T> {
    fn eq(&self, other: &Self) -> bool {
        self.cfg == other.cfg && self.params == other.params
    }
}

impl<T: Scalar> Model<T> {
    /// Random initialization: matrices from N(0, init_std), residual
    /// output projections scaled down by sqrt(2 * layers), gains at one.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(&cfg);
        let mut params = vec![T::zero(); layout.total()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = cfg.init_std;
        let residual_std = std / (2.0 * cfg.layers as f64).sqrt();
        for t in layout.tensors() {
            let slot = &mut params[t.offset..t.offset + t.len()];
            if t.shape.len() == 1 {
                slot.fill(T::one());
                continue;
            }
            let s = if t.name.ends_with(".wo") || t.name.ends_with(".w_down") { residual_std } else { std };
            let normal = Normal::new(0.0, s).expect("positive std");
            for p in slot {
                *p = T::from_f64_lossy(normal.sample(&mut rng));
            }
        }
        Self::from_params(cfg, params)
    }

    pub fn from_params(cfg: ModelConfig, params: Vec<T>) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(&cfg);
        if params.len() != layout.total() {
            return Err(Error::Shape(format!("expected {} parameters, got {}", layout.total(), params.len())));
        }
        let half = cfg.head_dim() / 2;
        let mut rope_cos = Vec::with_capacity(cfg.context_length * half);
        let mut rope_sin = Vec::with_capacity(cfg.context_length * half);
        for pos in 0..cfg.context_length {
            for i in 0..half {
                let freq = cfg.rope_base.powf(-2.0 * i as f64 / cfg.head_dim() as f64);
                let angle = pos as f64 * freq;
                rope_cos.push(T::from_f64_lossy(angle.cos()));
                rope_sin.push(T::from_f64_lossy(angle.sin()));
            }
        }
        Ok(Self { cfg, layout, params, rope_cos, rope_sin })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn tensor(&self, name: &str) -> Option<&[T]> {
        self.layout.get(name).map(|t| &self.params[t.offset..t.offset + t.len()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [T]> {
        let t = self.layout.get(name)?.clone();
        Some(&mut self.params[t.offset..t.offset + t.len()])
    }

    pub(crate) fn p(&self, offset: usize, len: usize) -> &[T] {
        &self.params[offset..offset + len]
    }

    /// The output projection as a `model_dim x vocab` view.
    pub(crate) fn head_offset(&self) -> Option<usize> {
        self.layout.head
    }
}
