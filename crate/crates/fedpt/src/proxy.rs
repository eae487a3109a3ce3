use std::sync::Arc;

use ndarray::Array2;

use crate::adapter::AdaptedModel;
use crate::error::{Error, Result};
use crate::model::{DecodeSession, LogitSource, ModelParams, ModelSession, Token, Vocab};

/// The proxy-tuned large model: a frozen large base steered by the logit
/// offset between a tuned small model and its frozen pre-trained base.
///
/// Scoring a sequence combines three per-position logit vectors as
/// `g_large + alpha * (g_tuned - g_pre)`, and the softmax of that sum is the
/// proxy's next-token distribution. The combination happens independently at
/// every timestep; no sequence-level normalizer is ever formed.
#[derive(Debug, Clone)]
pub struct ProxyEnsemble {
    pub large_base: Arc<ModelParams>,
    pub small_base: Arc<ModelParams>,
    pub small_tuned: AdaptedModel,
    pub alpha: f64,
}

impl ProxyEnsemble {
    pub fn new(
        large_base: Arc<ModelParams>,
        small_base: Arc<ModelParams>,
        small_tuned: AdaptedModel,
        alpha: f64,
    ) -> Result<Self> {
        if !alpha.is_finite() || alpha < 0.0 {
            return Err(Error::input(format!("alpha must be finite and nonnegative, got {alpha}")));
        }
        let v = large_base.config.vocab;
        for (name, vocab) in [
            ("small base", small_base.config.vocab),
            ("tuned small base", small_tuned.base.config.vocab),
        ] {
            if vocab != v {
                return Err(Error::config(format!(
                    "{name} vocab {vocab:?} does not match large-model vocab {v:?}"
                )));
            }
        }
        if small_base.config.context_len != large_base.config.context_len
            || small_tuned.base.config.context_len != large_base.config.context_len
        {
            return Err(Error::config("all proxy members must share one context length"));
        }
        Ok(ProxyEnsemble { large_base, small_base, small_tuned, alpha })
    }

    /// Per-position combined logits, shape (len, vocab).
    pub fn proxy_logits(&self, tokens: &[Token]) -> Result<Array2<f64>> {
        let g_large = self.large_base.sequence_logits(tokens)?;
        let g_pre = self.small_base.sequence_logits(tokens)?;
        let g_tuned = self.small_tuned.sequence_logits(tokens)?;
        Ok(combine(&g_large, &g_tuned, &g_pre, self.alpha))
    }

    /// Softmax of the last position's combined logits; sums to one.
    pub fn next_distribution(&self, tokens: &[Token]) -> Result<Vec<f64>> {
        let logits = self.proxy_logits(tokens)?;
        let last = logits.row(logits.nrows() - 1);
        Ok(softmax(last.as_slice().expect("row is contiguous")))
    }
}

fn combine(g_large: &Array2<f64>, g_tuned: &Array2<f64>, g_pre: &Array2<f64>, alpha: f64) -> Array2<f64> {
    let mut out = g_large.clone();
    ndarray::Zip::from(&mut out)
        .and(g_tuned)
        .and(g_pre)
        .for_each(|o, &t, &p| *o += alpha * (t - p));
    out
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - mx).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Incremental decode state over all three proxy members in lockstep.
pub struct ProxySession<'a> {
    large: ModelSession<'a>,
    pre: ModelSession<'a>,
    tuned: ModelSession<'a>,
    alpha: f64,
    logits: Vec<f64>,
}

impl DecodeSession for ProxySession<'_> {
    fn push(&mut self, tok: Token) -> Result<()> {
        self.large.push(tok)?;
        self.pre.push(tok)?;
        self.tuned.push(tok)?;
        let gl = self.large.logits();
        let gp = self.pre.logits();
        let gt = self.tuned.logits();
        self.logits = gl
            .iter()
            .zip(gt.iter().zip(gp))
            .map(|(&l, (&t, &p))| l + self.alpha * (t - p))
            .collect();
        Ok(())
    }

    fn logits(&self) -> &[f64] {
        &self.logits
    }

    fn remaining(&self) -> usize {
        self.large.remaining()
    }
}

impl LogitSource for ProxyEnsemble {
    fn vocab(&self) -> Vocab {
        self.large_base.config.vocab
    }

    fn context_len(&self) -> usize {
        self.large_base.config.context_len
    }

    fn session(&self) -> Result<Box<dyn DecodeSession + '_>> {
        Ok(Box::new(ProxySession {
            large: ModelSession::new(&self.large_base, None)?,
            pre: ModelSession::new(&self.small_base, None)?,
            tuned: ModelSession::new(&self.small_tuned.base, Some(&self.small_tuned.adapter))?,
            alpha: self.alpha,
            logits: Vec::new(),
        }))
    }

    fn sequence_logits(&self, tokens: &[Token]) -> Result<Array2<f64>> {
        self.proxy_logits(tokens)
    }
}
