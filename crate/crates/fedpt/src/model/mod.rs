mod checkpoint;
mod decode;
mod forward;
mod incremental;
mod optim;

pub use checkpoint::{load_model, save_model};
pub use decode::{greedy_decode, sample_decode, DecodeSession, LogitSource};
pub use forward::{backward_adapter, backward_full, batch_grads_adapter, batch_grads_full,
                  batch_nll, forward_logits, forward_with_cache, nll_loss, nll_dlogits,
                  ForwardCache};
pub use incremental::ModelSession;
pub use optim::{cosine_lr, AdamState, Optimizer, OptimizerKind};

use ndarray::{Array1, Array2};
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Token id. Byte-level vocabularies fit comfortably; u32 keeps arithmetic
/// simple at the FFI boundary.
pub type Token = u32;

/// Shared vocabulary: the 256 byte values followed by control tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Vocab {
    pub size: usize,
    pub pad: Token,
    pub begin: Token,
    pub end: Token,
}

impl Vocab {
    /// The byte-level vocabulary every model in a run shares.
    pub fn byte_level() -> Self {
        Vocab { size: 259, pad: 256, begin: 257, end: 258 }
    }

    pub fn is_special(&self, t: Token) -> bool {
        t == self.pad || t == self.begin || t == self.end
    }

    pub fn validate(&self) -> Result<()> {
        let ids = [self.pad, self.begin, self.end];
        for &id in &ids {
            if id as usize >= self.size {
                return Err(Error::input(format!(
                    "special token id {id} outside vocab of size {}",
                    self.size
                )));
            }
        }
        if ids[0] == ids[1] || ids[0] == ids[2] || ids[1] == ids[2] {
            return Err(Error::input("special token ids must be distinct"));
        }
        if self.size < 4 {
            return Err(Error::input("vocab must hold at least one regular token"));
        }
        Ok(())
    }
}

/// Architecture hyperparameters for one decoder-only transformer.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub context_len: usize,
    pub vocab: Vocab,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.vocab.validate()?;
        if self.layers == 0 || self.width == 0 || self.heads == 0 {
            return Err(Error::input("layers, width, and heads must be nonzero"));
        }
        if self.width % self.heads != 0 {
            return Err(Error::input(format!(
                "width {} not divisible by heads {}",
                self.width, self.heads
            )));
        }
        if self.context_len < 8 {
            return Err(Error::input("context_len must be at least 8"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub g: Array1<f64>,
    pub b: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttnParams {
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1: LayerNormParams,
    pub attn: AttnParams,
    pub ln2: LayerNormParams,
    pub mlp: MlpParams,
}

/// Full parameter set of a pre-norm decoder-only transformer with learned
/// positional embeddings and an untied output projection.
///
/// The same structure doubles as a gradient container: gradients of a model
/// have exactly the shapes of the model itself.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tok_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub lnf: LayerNormParams,
    pub out_w: Array2<f64>,
    pub out_b: Array1<f64>,
}

/// One named view over a tensor, used by checkpointing and flattening.
pub enum TensorRef<'a> {
    M(&'a Array2<f64>),
    V(&'a Array1<f64>),
}

pub enum TensorMut<'a> {
    M(&'a mut Array2<f64>),
    V(&'a mut Array1<f64>),
}

impl ModelParams {
    /// Gaussian init (std 0.02) for all weight matrices and embeddings;
    /// layer-norm gains start at one, every bias at zero.
    pub fn init(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let normal = Normal::new(0.0, 0.02).expect("std is finite");
        let w = config.width;
        let v = config.size();
        let mat = |r: usize, c: usize, rng: &mut Rng| {
            Array2::from_shape_fn((r, c), |_| normal.sample(rng))
        };
        let ln = |w: usize| LayerNormParams { g: Array1::ones(w), b: Array1::zeros(w) };
        let tok_emb = mat(v, w, rng);
        let pos_emb = mat(config.context_len, w, rng);
        let layers = (0..config.layers)
            .map(|_| LayerParams {
                ln1: ln(w),
                attn: AttnParams {
                    wq: mat(w, w, rng),
                    bq: Array1::zeros(w),
                    wk: mat(w, w, rng),
                    bk: Array1::zeros(w),
                    wv: mat(w, w, rng),
                    bv: Array1::zeros(w),
                    wo: mat(w, w, rng),
                    bo: Array1::zeros(w),
                },
                ln2: ln(w),
                mlp: MlpParams {
                    w1: mat(w, 4 * w, rng),
                    b1: Array1::zeros(4 * w),
                    w2: mat(4 * w, w, rng),
                    b2: Array1::zeros(w),
                },
            })
            .collect();
        Ok(ModelParams {
            config,
            tok_emb,
            pos_emb,
            layers,
            lnf: ln(w),
            out_w: mat(w, v, rng),
            out_b: Array1::zeros(v),
        })
    }

    /// All-zero tensors with the shapes of `config`; the gradient identity.
    pub fn zeros(config: ModelConfig) -> Self {
        let w = config.width;
        let v = config.size();
        let ln = || LayerNormParams { g: Array1::zeros(w), b: Array1::zeros(w) };
        ModelParams {
            config,
            tok_emb: Array2::zeros((v, w)),
            pos_emb: Array2::zeros((config.context_len, w)),
            layers: (0..config.layers)
                .map(|_| LayerParams {
                    ln1: ln(),
                    attn: AttnParams {
                        wq: Array2::zeros((w, w)),
                        bq: Array1::zeros(w),
                        wk: Array2::zeros((w, w)),
                        bk: Array1::zeros(w),
                        wv: Array2::zeros((w, w)),
                        bv: Array1::zeros(w),
                        wo: Array2::zeros((w, w)),
                        bo: Array1::zeros(w),
                    },
                    ln2: ln(),
                    mlp: MlpParams {
                        w1: Array2::zeros((w, 4 * w)),
                        b1: Array1::zeros(4 * w),
                        w2: Array2::zeros((4 * w, w)),
                        b2: Array1::zeros(w),
                    },
                })
                .collect(),
            lnf: ln(),
            out_w: Array2::zeros((w, v)),
            out_b: Array1::zeros(v),
        }
    }

    /// Stable iteration order shared by checkpoints, flattening, and the
    /// optimizer. Changing it is a file-format break.
    pub fn tensors(&self) -> Vec<(String, TensorRef<'_>)> {
        let mut out: Vec<(String, TensorRef<'_>)> = vec![
            ("tok_emb".into(), TensorRef::M(&self.tok_emb)),
            ("pos_emb".into(), TensorRef::M(&self.pos_emb)),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.ln1.g"), TensorRef::V(&l.ln1.g)));
            out.push((format!("layer{i}.ln1.b"), TensorRef::V(&l.ln1.b)));
            out.push((format!("layer{i}.attn.wq"), TensorRef::M(&l.attn.wq)));
            out.push((format!("layer{i}.attn.bq"), TensorRef::V(&l.attn.bq)));
            out.push((format!("layer{i}.attn.wk"), TensorRef::M(&l.attn.wk)));
            out.push((format!("layer{i}.attn.bk"), TensorRef::V(&l.attn.bk)));
            out.push((format!("layer{i}.attn.wv"), TensorRef::M(&l.attn.wv)));
            out.push((format!("layer{i}.attn.bv"), TensorRef::V(&l.attn.bv)));
            out.push((format!("layer{i}.attn.wo"), TensorRef::M(&l.attn.wo)));
            out.push((format!("layer{i}.attn.bo"), TensorRef::V(&l.attn.bo)));
            out.push((format!("layer{i}.ln2.g"), TensorRef::V(&l.ln2.g)));
            out.push((format!("layer{i}.ln2.b"), TensorRef::V(&l.ln2.b)));
            out.push((format!("layer{i}.mlp.w1"), TensorRef::M(&l.mlp.w1)));
            out.push((format!("layer{i}.mlp.b1"), TensorRef::V(&l.mlp.b1)));
            out.push((format!("layer{i}.mlp.w2"), TensorRef::M(&l.mlp.w2)));
            out.push((format!("layer{i}.mlp.b2"), TensorRef::V(&l.mlp.b2)));
        }
        out.push(("lnf.g".into(), TensorRef::V(&self.lnf.g)));
        out.push(("lnf.b".into(), TensorRef::V(&self.lnf.b)));
        out.push(("out.w".into(), TensorRef::M(&self.out_w)));
        out.push(("out.b".into(), TensorRef::V(&self.out_b)));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, TensorMut<'_>)> {
        let mut out: Vec<(String, TensorMut<'_>)> = vec![
            ("tok_emb".into(), TensorMut::M(&mut self.tok_emb)),
            ("pos_emb".into(), TensorMut::M(&mut self.pos_emb)),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{i}.ln1.g"), TensorMut::V(&mut l.ln1.g)));
            out.push((format!("layer{i}.ln1.b"), TensorMut::V(&mut l.ln1.b)));
            out.push((format!("layer{i}.attn.wq"), TensorMut::M(&mut l.attn.wq)));
            out.push((format!("layer{i}.attn.bq"), TensorMut::V(&mut l.attn.bq)));
            out.push((format!("layer{i}.attn.wk"), TensorMut::M(&mut l.attn.wk)));
            out.push((format!("layer{i}.attn.bk"), TensorMut::V(&mut l.attn.bk)));
            out.push((format!("layer{i}.attn.wv"), TensorMut::M(&mut l.attn.wv)));
            out.push((format!("layer{i}.attn.bv"), TensorMut::V(&mut l.attn.bv)));
            out.push((format!("layer{i}.attn.wo"), TensorMut::M(&mut l.attn.wo)));
            out.push((format!("layer{i}.attn.bo"), TensorMut::V(&mut l.attn.bo)));
            out.push((format!("layer{i}.ln2.g"), TensorMut::V(&mut l.ln2.g)));
            out.push((format!("layer{i}.ln2.b"), TensorMut::V(&mut l.ln2.b)));
            out.push((format!("layer{i}.mlp.w1"), TensorMut::M(&mut l.mlp.w1)));
            out.push((format!("layer{i}.mlp.b1"), TensorMut::V(&mut l.mlp.b1)));
            out.push((format!("layer{i}.mlp.w2"), TensorMut::M(&mut l.mlp.w2)));
            out.push((format!("layer{i}.mlp.b2"), TensorMut::V(&mut l.mlp.b2)));
        }
        out.push(("lnf.g".into(), TensorMut::V(&mut self.lnf.g)));
        out.push(("lnf.b".into(), TensorMut::V(&mut self.lnf.b)));
        out.push(("out.w".into(), TensorMut::M(&mut self.out_w)));
        out.push(("out.b".into(), TensorMut::V(&mut self.out_b)));
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors()
            .iter()
            .map(|(_, t)| match t {
                TensorRef::M(m) => m.len(),
                TensorRef::V(v) => v.len(),
            })
            .sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (_, t) in self.tensors() {
            match t {
                TensorRef::M(m) => out.extend(m.iter()),
                TensorRef::V(v) => out.extend(v.iter()),
            }
        }
        out
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::contract(format!(
                "flat buffer holds {} values, model has {} parameters",
                flat.len(),
                self.param_count()
            )));
        }
        let mut at = 0;
        for (_, t) in self.tensors_mut() {
            match t {
                TensorMut::M(m) => {
                    for x in m.iter_mut() {
                        *x = flat[at];
                        at += 1;
                    }
                }
                TensorMut::V(v) => {
                    for x in v.iter_mut() {
                        *x = flat[at];
                        at += 1;
                    }
                }
            }
        }
        Ok(())
    }

    /// Accumulates `scale * other` into self; used for gradient reduction.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        debug_assert_eq!(self.config, other.config);
        let dst = self.tensors_mut();
        let src = other.tensors();
        for ((_, d), (_, s)) in dst.into_iter().zip(src) {
            match (d, s) {
                (TensorMut::M(d), TensorRef::M(s)) => d.scaled_add(scale, s),
                (TensorMut::V(d), TensorRef::V(s)) => d.scaled_add(scale, s),
                _ => unreachable!("tensor orders match"),
            }
        }
    }
}

impl ModelConfig {
    fn size(&self) -> usize {
        self.vocab.size
    }
}
