use ndarray::{Array1, Array2};

use crate::adapter::{AttnProj, LoraAdapter};
use crate::error::{Error, Result};
use crate::model::forward::{gelu, LN_EPS};
use crate::model::{ModelParams, Token};

fn ln_vec(x: &Array1<f64>, g: &Array1<f64>, b: &Array1<f64>) -> Array1<f64> {
    let w = x.len();
    let mean = x.sum() / w as f64;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
    let is = 1.0 / (var + LN_EPS).sqrt();
    Array1::from_shape_fn(w, |j| g[j] * (x[j] - mean) * is + b[j])
}

/// Incremental decoder state over one sequence: per-layer key/value caches
/// plus the logits produced by the most recent token.
///
/// Feeding tokens one at a time computes exactly the per-position math of
/// the batch forward pass while paying only for the new position, which is
/// what makes generation-time evaluation affordable.
pub struct ModelSession<'a> {
    params: &'a ModelParams,
    eff: Vec<(Option<Array2<f64>>, Option<Array2<f64>>)>,
    k_cache: Vec<Array2<f64>>,
    v_cache: Vec<Array2<f64>>,
    len: usize,
    last_logits: Vec<f64>,
}

impl<'a> ModelSession<'a> {
    pub fn new(params: &'a ModelParams, adapter: Option<&LoraAdapter>) -> Result<Self> {
        if let Some(ad) = adapter {
            ad.check_compatible(params)?;
        }
        let w = params.config.width;
        let ctx = params.config.context_len;
        let eff = (0..params.config.layers)
            .map(|l| {
                let q = adapter
                    .and_then(|ad| ad.slot(l, AttnProj::Q))
                    .map(|i| &params.layers[l].attn.wq + &adapter.unwrap().delta(i));
                let v = adapter
                    .and_then(|ad| ad.slot(l, AttnProj::V))
                    .map(|i| &params.layers[l].attn.wv + &adapter.unwrap().delta(i));
                (q, v)
            })
            .collect();
        Ok(ModelSession {
            params,
            eff,
            k_cache: (0..params.config.layers).map(|_| Array2::zeros((ctx, w))).collect(),
            v_cache: (0..params.config.layers).map(|_| Array2::zeros((ctx, w))).collect(),
            len: 0,
            last_logits: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn remaining(&self) -> usize {
        self.params.config.context_len - self.len
    }

    /// Next-token logits after the last push; empty before the first push.
    pub fn logits(&self) -> &[f64] {
        &self.last_logits
    }

    pub fn push(&mut self, tok: Token) -> Result<()> {
        let cfg = &self.params.config;
        if tok as usize >= cfg.vocab.size {
            return Err(Error::input(format!(
                "token id {tok} outside vocab of size {}",
                cfg.vocab.size
            )));
        }
        if self.len >= cfg.context_len {
            return Err(Error::input(format!("context of {} positions exhausted", cfg.context_len)));
        }
        let pos = self.len;
        let w = cfg.width;
        let heads = cfg.heads;
        let hd = cfg.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();

        let mut x = Array1::from_shape_fn(w, |j| {
            self.params.tok_emb[[tok as usize, j]] + self.params.pos_emb[[pos, j]]
        });
        for (l, layer) in self.params.layers.iter().enumerate() {
            let wq = self.eff[l].0.as_ref().unwrap_or(&layer.attn.wq);
            let wv = self.eff[l].1.as_ref().unwrap_or(&layer.attn.wv);
            let an = ln_vec(&x, &layer.ln1.g, &layer.ln1.b);
            let q = an.dot(wq) + &layer.attn.bq;
            let k = an.dot(&layer.attn.wk) + &layer.attn.bk;
            let v = an.dot(wv) + &layer.attn.bv;
            self.k_cache[l].row_mut(pos).assign(&k);
            self.v_cache[l].row_mut(pos).assign(&v);

            let mut o = Array1::zeros(w);
            for h in 0..heads {
                let off = h * hd;
                let mut scores = Vec::with_capacity(pos + 1);
                for j in 0..=pos {
                    let mut s = 0.0;
                    for d in 0..hd {
                        s += q[off + d] * self.k_cache[l][[j, off + d]];
                    }
                    scores.push(s * scale);
                }
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - mx).exp();
                    sum += *s;
                }
                for (j, s) in scores.iter().enumerate() {
                    let p = s / sum;
                    for d in 0..hd {
                        o[off + d] += p * self.v_cache[l][[j, off + d]];
                    }
                }
            }
            let attn = o.dot(&layer.attn.wo) + &layer.attn.bo;
            let x_mid = &x + &attn;
            let mn = ln_vec(&x_mid, &layer.ln2.g, &layer.ln2.b);
            let u = mn.dot(&layer.mlp.w1) + &layer.mlp.b1;
            let gact = u.mapv(gelu);
            let f = gact.dot(&layer.mlp.w2) + &layer.mlp.b2;
            x = &x_mid + &f;
        }
        let hn = ln_vec(&x, &self.params.lnf.g, &self.params.lnf.b);
        let logits = hn.dot(&self.params.out_w) + &self.params.out_b;
        self.last_logits = logits.to_vec();
        self.len += 1;
        Ok(())
    }
}
