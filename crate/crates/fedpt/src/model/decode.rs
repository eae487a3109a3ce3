use ndarray::Array2;
use rand::RngExt as _;

use crate::adapter::AdaptedModel;
use crate::error::{Error, Result};
use crate::model::{forward_logits, ModelParams, ModelSession, Token, Vocab};
use crate::rng::Rng;

/// Incremental next-token state during generation.
pub trait DecodeSession {
    fn push(&mut self, tok: Token) -> Result<()>;
    /// Logits over the next token, valid after at least one push.
    fn logits(&self) -> &[f64];
    /// Positions left before the context window is full.
    fn remaining(&self) -> usize;
}

/// Anything that scores token sequences: a plain model, an adapted model,
/// or a proxy combination of several models.
pub trait LogitSource {
    fn vocab(&self) -> Vocab;
    fn context_len(&self) -> usize;
    /// Opens a fresh incremental session for generation.
    fn session(&self) -> Result<Box<dyn DecodeSession + '_>>;
    /// Per-position logits for a full sequence, shape (len, vocab).
    fn sequence_logits(&self, tokens: &[Token]) -> Result<Array2<f64>>;
}

impl DecodeSession for ModelSession<'_> {
    fn push(&mut self, tok: Token) -> Result<()> {
        ModelSession::push(self, tok)
    }

    fn logits(&self) -> &[f64] {
        ModelSession::logits(self)
    }

    fn remaining(&self) -> usize {
        ModelSession::remaining(self)
    }
}

impl LogitSource for ModelParams {
    fn vocab(&self) -> Vocab {
        self.config.vocab
    }

    fn context_len(&self) -> usize {
        self.config.context_len
    }

    fn session(&self) -> Result<Box<dyn DecodeSession + '_>> {
        Ok(Box::new(ModelSession::new(self, None)?))
    }

    fn sequence_logits(&self, tokens: &[Token]) -> Result<Array2<f64>> {
        forward_logits(self, None, tokens)
    }
}

impl LogitSource for AdaptedModel {
    fn vocab(&self) -> Vocab {
        self.base.config.vocab
    }

    fn context_len(&self) -> usize {
        self.base.config.context_len
    }

    fn session(&self) -> Result<Box<dyn DecodeSession + '_>> {
        Ok(Box::new(ModelSession::new(&self.base, Some(&self.adapter))?))
    }

    fn sequence_logits(&self, tokens: &[Token]) -> Result<Array2<f64>> {
        forward_logits(&self.base, Some(&self.adapter), tokens)
    }
}

fn argmax(logits: &[f64]) -> Token {
    let mut best = 0usize;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best as Token
}

fn start_session<'a>(
    source: &'a dyn LogitSource,
    prompt: &[Token],
    max_len: usize,
) -> Result<Box<dyn DecodeSession + 'a>> {
    if prompt.is_empty() {
        return Err(Error::input("prompt is empty"));
    }
    if max_len == 0 {
        return Err(Error::input("max_len must be at least 1"));
    }
    if prompt.len() > source.context_len() {
        return Err(Error::input(format!(
            "prompt of {} tokens exceeds context length {}",
            prompt.len(),
            source.context_len()
        )));
    }
    let mut sess = source.session()?;
    for &t in prompt {
        sess.push(t)?;
    }
    Ok(sess)
}

/// Deterministic generation: repeatedly append the highest-scoring token
/// (ties resolved toward the lowest id) until the end token, `max_len`
/// generated tokens, or a full context window. The end token is not part of
/// the returned sequence.
pub fn greedy_decode(
    source: &dyn LogitSource,
    prompt: &[Token],
    max_len: usize,
) -> Result<Vec<Token>> {
    let end = source.vocab().end;
    let mut sess = start_session(source, prompt, max_len)?;
    let mut out = Vec::new();
    loop {
        let tok = argmax(sess.logits());
        if tok == end {
            break;
        }
        out.push(tok);
        if out.len() == max_len || sess.remaining() == 0 {
            break;
        }
        sess.push(tok)?;
    }
    Ok(out)
}

/// Stochastic generation with temperature and nucleus filtering. With
/// temperature 1 and top_p 1 this samples the model's next-token
/// distribution unrestricted; it is exercised only when sampling is
/// explicitly requested.
pub fn sample_decode(
    source: &dyn LogitSource,
    prompt: &[Token],
    max_len: usize,
    temperature: f64,
    top_p: f64,
    rng: &mut Rng,
) -> Result<Vec<Token>> {
    if temperature <= 0.0 || !temperature.is_finite() {
        return Err(Error::input("temperature must be positive"));
    }
    if !(0.0 < top_p && top_p <= 1.0) {
        return Err(Error::input("top_p must lie in (0, 1]"));
    }
    let end = source.vocab().end;
    let mut sess = start_session(source, prompt, max_len)?;
    let mut out = Vec::new();
    loop {
        let logits = sess.logits();
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut probs: Vec<f64> = logits.iter().map(|&z| ((z - mx) / temperature).exp()).collect();
        let sum: f64 = probs.iter().sum();
        for p in probs.iter_mut() {
            *p /= sum;
        }
        let mut order: Vec<usize> = (0..probs.len()).collect();
        order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
        let mut kept = 0usize;
        let mut mass = 0.0;
        for &i in &order {
            kept += 1;
            mass += probs[i];
            if mass >= top_p {
                break;
            }
        }
        let draw: f64 = rng.random_range(0.0..mass);
        let mut acc = 0.0;
        let mut tok = order[kept - 1] as Token;
        for &i in order.iter().take(kept) {
            acc += probs[i];
            if draw < acc {
                tok = i as Token;
                break;
            }
        }
        if tok == end {
            break;
        }
        out.push(tok);
        if out.len() == max_len || sess.remaining() == 0 {
            break;
        }
        sess.push(tok)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::rng::stream;

    fn model() -> ModelParams {
        let config = ModelConfig {
            layers: 1,
            width: 8,
            heads: 2,
            context_len: 10,
            vocab: Vocab::byte_level(),
        };
        ModelParams::init(config, &mut stream(2, "init", &[])).unwrap()
    }

    /// Biases the output head so the next token is always `forced`.
    fn forcing(mut m: ModelParams, forced: Token) -> ModelParams {
        m.out_w.fill(0.0);
        m.out_b.fill(0.0);
        m.out_b[forced as usize] = 10.0;
        m
    }

    #[test]
    fn immediate_end_token_gives_empty_generation() {
        let m = forcing(model(), 258);
        let out = greedy_decode(&m, &[257, 5], 8).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn max_len_bounds_generation() {
        let m = forcing(model(), 7);
        let out = greedy_decode(&m, &[257], 5).unwrap();
        assert_eq!(out, vec![7, 7, 7, 7, 7]);
    }

    #[test]
    fn generation_stops_at_context_edge() {
        let m = forcing(model(), 7);
        let out = greedy_decode(&m, &[257, 1, 2], 100).unwrap();
        // 3 prompt positions leave 7 slots to fill, and the logits of the
        // final slot still yield one token that can no longer be fed back.
        assert_eq!(out.len(), 8);
    }

    #[test]
    fn greedy_is_deterministic() {
        let m = model();
        let a = greedy_decode(&m, &[257, 100, 101], 6).unwrap();
        let b = greedy_decode(&m, &[257, 100, 101], 6).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn argmax_ties_choose_lowest_id() {
        assert_eq!(argmax(&[0.0, 3.0, 3.0, 1.0]), 1);
    }

    #[test]
    fn decode_rejects_bad_args() {
        let m = model();
        assert!(greedy_decode(&m, &[], 4).is_err());
        assert!(greedy_decode(&m, &[257], 0).is_err());
        assert!(greedy_decode(&m, &vec![0; 11], 4).is_err());
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let m = model();
        let a =
            sample_decode(&m, &[257, 50], 6, 1.0, 1.0, &mut stream(9, "decode", &[0])).unwrap();
        let b =
            sample_decode(&m, &[257, 50], 6, 1.0, 1.0, &mut stream(9, "decode", &[0])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sampling_validates_knobs() {
        let m = model();
        let mut rng = stream(1, "decode", &[]);
        assert!(sample_decode(&m, &[257], 4, 0.0, 1.0, &mut rng).is_err());
        assert!(sample_decode(&m, &[257], 4, 1.0, 0.0, &mut rng).is_err());
        assert!(sample_decode(&m, &[257], 4, 1.0, 1.5, &mut rng).is_err());
    }
}
