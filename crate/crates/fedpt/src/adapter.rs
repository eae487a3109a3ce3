use std::sync::Arc;

use ndarray::Array2;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::rng::Rng;

/// Attention projection a low-rank delta attaches to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum AttnProj {
    Q,
    V,
}

/// One adapted weight matrix, addressed by layer index and projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct LoraTarget {
    pub layer: usize,
    pub proj: AttnProj,
}

impl LoraTarget {
    pub fn name(&self) -> String {
        let p = match self.proj {
            AttnProj::Q => "wq",
            AttnProj::V => "wv",
        };
        format!("layer{}.attn.{p}", self.layer)
    }

    pub fn parse(name: &str) -> Result<Self> {
        let rest = name
            .strip_prefix("layer")
            .ok_or_else(|| Error::input(format!("unknown adapter target {name:?}")))?;
        let (idx, proj) = rest
            .split_once(".attn.")
            .ok_or_else(|| Error::input(format!("unknown adapter target {name:?}")))?;
        let layer = idx
            .parse::<usize>()
            .map_err(|_| Error::input(format!("bad layer index in target {name:?}")))?;
        let proj = match proj {
            "wq" => AttnProj::Q,
            "wv" => AttnProj::V,
            _ => return Err(Error::input(format!("unknown projection in target {name:?}"))),
        };
        Ok(LoraTarget { layer, proj })
    }
}

/// Low-rank additive deltas for the attention query and value projections.
///
/// Each target holds a pair (B, A) with B of shape (width, rank) and A of
/// shape (rank, width); the effective weight is W0 + B·A with no extra
/// scaling. B starts at zero and A Gaussian, so a fresh adapter leaves the
/// base model's function unchanged while keeping nonzero gradient flow
/// through B.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub rank: usize,
    pub width: usize,
    pub targets: Vec<LoraTarget>,
    /// Parallel to `targets`: (B, A) per target.
    pub mats: Vec<(Array2<f64>, Array2<f64>)>,
}

impl LoraAdapter {
    /// Fresh adapter over the query and value projections of every layer.
    pub fn init(base: &ModelParams, rank: usize, rng: &mut Rng) -> Result<Self> {
        if rank == 0 {
            return Err(Error::input("adapter rank must be nonzero"));
        }
        let width = base.config.width;
        if rank > width {
            return Err(Error::input(format!("rank {rank} exceeds width {width}")));
        }
        let normal = Normal::new(0.0, 0.02).expect("std is finite");
        let mut targets = Vec::new();
        let mut mats = Vec::new();
        for layer in 0..base.config.layers {
            for proj in [AttnProj::Q, AttnProj::V] {
                targets.push(LoraTarget { layer, proj });
                let b = Array2::zeros((width, rank));
                let a = Array2::from_shape_fn((rank, width), |_| normal.sample(rng));
                mats.push((b, a));
            }
        }
        Ok(LoraAdapter { rank, width, targets, mats })
    }

    /// All-zero adapter with the same shape; the aggregation identity.
    pub fn zeros_like(&self) -> Self {
        LoraAdapter {
            rank: self.rank,
            width: self.width,
            targets: self.targets.clone(),
            mats: self
                .mats
                .iter()
                .map(|(b, a)| (Array2::zeros(b.dim()), Array2::zeros(a.dim())))
                .collect(),
        }
    }

    /// Checks that every target names an existing attention projection of
    /// `base` with matching dimensions.
    pub fn check_compatible(&self, base: &ModelParams) -> Result<()> {
        if self.width != base.config.width {
            return Err(Error::input(format!(
                "adapter width {} does not match model width {}",
                self.width, base.config.width
            )));
        }
        for (t, (b, a)) in self.targets.iter().zip(&self.mats) {
            if t.layer >= base.config.layers {
                return Err(Error::input(format!(
                    "adapter target {} outside model with {} layers",
                    t.name(),
                    base.config.layers
                )));
            }
            if b.dim() != (self.width, self.rank) || a.dim() != (self.rank, self.width) {
                return Err(Error::input(format!("adapter tensor shapes wrong for {}", t.name())));
            }
        }
        Ok(())
    }

    pub fn delta(&self, idx: usize) -> Array2<f64> {
        let (b, a) = &self.mats[idx];
        b.dot(a)
    }

    /// Finds the adapter slot for a layer projection, if adapted.
    pub fn slot(&self, layer: usize, proj: AttnProj) -> Option<usize> {
        self.targets.iter().position(|t| t.layer == layer && t.proj == proj)
    }

    /// Number of adapter parameters.
    pub fn param_count(&self) -> usize {
        self.mats.iter().map(|(b, a)| b.len() + a.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (b, a) in &self.mats {
            out.extend(b.iter());
            out.extend(a.iter());
        }
        out
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::contract(format!(
                "flat buffer holds {} values, adapter has {} parameters",
                flat.len(),
                self.param_count()
            )));
        }
        let mut at = 0;
        for (b, a) in &mut self.mats {
            for x in b.iter_mut().chain(a.iter_mut()) {
                *x = flat[at];
                at += 1;
            }
        }
        Ok(())
    }

    pub fn add_scaled(&mut self, other: &LoraAdapter, scale: f64) {
        debug_assert_eq!(self.targets, other.targets);
        for ((b, a), (ob, oa)) in self.mats.iter_mut().zip(&other.mats) {
            b.scaled_add(scale, ob);
            a.scaled_add(scale, oa);
        }
    }

    /// Serializes the adapter for transfer: a text header naming rank,
    /// width, and targets, then per target the B factor followed by the A
    /// factor as little-endian 64-bit floats in declaration order.
    pub fn to_wire(&self) -> Vec<u8> {
        let target_names: Vec<String> = self.targets.iter().map(LoraTarget::name).collect();
        let payload_bytes = self.param_count() * 8;
        let header = format!(
            "fedpt-adapter v1\nrank={}\nwidth={}\ntargets={}\npayload_bytes={}\nend-header\n",
            self.rank,
            self.width,
            target_names.join(","),
            payload_bytes
        );
        let mut out = Vec::with_capacity(header.len() + payload_bytes);
        out.extend_from_slice(header.as_bytes());
        for v in self.to_flat() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Inverse of [`to_wire`](Self::to_wire). Malformed headers, truncated
    /// payloads, and trailing bytes are format errors.
    pub fn from_wire(bytes: &[u8]) -> Result<Self> {
        let path = std::path::Path::new("<wire>");
        let bad = |reason: &str| Error::format(path, reason.to_string());
        let marker = b"end-header\n";
        let header_end = bytes
            .windows(marker.len())
            .position(|w| w == marker)
            .ok_or_else(|| bad("missing header terminator"))?
            + marker.len();
        let header = std::str::from_utf8(&bytes[..header_end])
            .map_err(|_| bad("header is not valid text"))?;
        let mut lines = header.lines();
        if lines.next() != Some("fedpt-adapter v1") {
            return Err(bad("unrecognized adapter format marker"));
        }
        let mut rank = None;
        let mut width = None;
        let mut targets: Option<Vec<LoraTarget>> = None;
        let mut payload_bytes = None;
        for line in lines {
            if line == "end-header" {
                break;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad("malformed header line"))?;
            match key {
                "rank" => rank = Some(value.parse::<usize>().map_err(|_| bad("bad rank"))?),
                "width" => width = Some(value.parse::<usize>().map_err(|_| bad("bad width"))?),
                "targets" => {
                    targets = Some(
                        value
                            .split(',')
                            .map(LoraTarget::parse)
                            .collect::<Result<Vec<_>>>()?,
                    )
                }
                "payload_bytes" => {
                    payload_bytes =
                        Some(value.parse::<usize>().map_err(|_| bad("bad payload size"))?)
                }
                _ => return Err(bad("unknown header key")),
            }
        }
        let rank = rank.ok_or_else(|| bad("header missing rank"))?;
        let width = width.ok_or_else(|| bad("header missing width"))?;
        let targets = targets.ok_or_else(|| bad("header missing targets"))?;
        let payload_bytes = payload_bytes.ok_or_else(|| bad("header missing payload size"))?;
        if rank == 0 || width == 0 || targets.is_empty() {
            return Err(bad("degenerate adapter dimensions"));
        }
        let expected = targets.len() * 2 * rank * width * 8;
        if payload_bytes != expected {
            return Err(bad("payload size does not match declared shape"));
        }
        let payload = &bytes[header_end..];
        if payload.len() != payload_bytes {
            return Err(bad("payload truncated or has trailing bytes"));
        }
        let mut values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
        let mats = targets
            .iter()
            .map(|_| {
                let b = Array2::from_shape_vec(
                    (width, rank),
                    values.by_ref().take(width * rank).collect(),
                )
                .expect("sized above");
                let a = Array2::from_shape_vec(
                    (rank, width),
                    values.by_ref().take(rank * width).collect(),
                )
                .expect("sized above");
                (b, a)
            })
            .collect();
        Ok(LoraAdapter {
            rank,
            width,
            targets,
            mats,
        })
    }

    /// Materializes base weights with every adapted matrix replaced by
    /// W0 + B·A. The result is a standalone model.
    pub fn merge(&self, base: &ModelParams) -> Result<ModelParams> {
        self.check_compatible(base)?;
        let mut merged = base.clone();
        for (i, t) in self.targets.iter().enumerate() {
            let delta = self.delta(i);
            let w = match t.proj {
                AttnProj::Q => &mut merged.layers[t.layer].attn.wq,
                AttnProj::V => &mut merged.layers[t.layer].attn.wv,
            };
            *w += &delta;
        }
        Ok(merged)
    }
}

/// Gradients of a loss with respect to adapter factors only. Base model
/// tensors are frozen during adapter training, so they have no slot here.
#[derive(Debug, Clone)]
pub struct AdapterGrads {
    pub mats: Vec<(Array2<f64>, Array2<f64>)>,
}

impl AdapterGrads {
    pub fn zeros_like(adapter: &LoraAdapter) -> Self {
        AdapterGrads {
            mats: adapter
                .mats
                .iter()
                .map(|(b, a)| (Array2::zeros(b.dim()), Array2::zeros(a.dim())))
                .collect(),
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (b, a) in &self.mats {
            out.extend(b.iter());
            out.extend(a.iter());
        }
        out
    }

    pub fn add_scaled(&mut self, other: &AdapterGrads, scale: f64) {
        for ((b, a), (ob, oa)) in self.mats.iter_mut().zip(&other.mats) {
            b.scaled_add(scale, ob);
            a.scaled_add(scale, oa);
        }
    }
}

/// A frozen base model plus a trainable adapter, evaluated together.
#[derive(Debug, Clone)]
pub struct AdaptedModel {
    pub base: Arc<ModelParams>,
    pub adapter: LoraAdapter,
}

impl AdaptedModel {
    pub fn new(base: Arc<ModelParams>, adapter: LoraAdapter) -> Result<Self> {
        adapter.check_compatible(&base)?;
        Ok(AdaptedModel { base, adapter })
    }
}
