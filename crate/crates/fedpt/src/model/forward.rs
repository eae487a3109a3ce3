use ndarray::{s, Array1, Array2, Axis};
use rayon::prelude::*;

use crate::adapter::{AdapterGrads, AttnProj, LoraAdapter};
use crate::error::{Error, Result};
use crate::model::{LayerNormParams, ModelParams, Token};

pub(crate) const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_prime(x: f64) -> f64 {
    let inner = GELU_C * (x + GELU_K * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// Row-wise layer norm; returns (out, xhat, invstd).
fn layer_norm(x: &Array2<f64>, g: &Array1<f64>, b: &Array1<f64>) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    let (t, w) = x.dim();
    let mut out = Array2::zeros((t, w));
    let mut xhat = Array2::zeros((t, w));
    let mut invstd = Array1::zeros(t);
    for i in 0..t {
        let row = x.row(i);
        let mean = row.sum() / w as f64;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        invstd[i] = is;
        for j in 0..w {
            let xh = (row[j] - mean) * is;
            xhat[[i, j]] = xh;
            out[[i, j]] = g[j] * xh + b[j];
        }
    }
    (out, xhat, invstd)
}

/// Backward through layer norm. Accumulates parameter grads when given and
/// returns the gradient with respect to the input rows.
fn layer_norm_backward(
    dy: &Array2<f64>,
    g: &Array1<f64>,
    xhat: &Array2<f64>,
    invstd: &Array1<f64>,
    mut dg: Option<&mut Array1<f64>>,
    mut db: Option<&mut Array1<f64>>,
) -> Array2<f64> {
    let (t, w) = dy.dim();
    let mut dx = Array2::zeros((t, w));
    for i in 0..t {
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for j in 0..w {
            let dxh = dy[[i, j]] * g[j];
            sum_dxhat += dxh;
            sum_dxhat_xhat += dxh * xhat[[i, j]];
            if let Some(dg) = dg.as_deref_mut() {
                dg[j] += dy[[i, j]] * xhat[[i, j]];
            }
            if let Some(db) = db.as_deref_mut() {
                db[j] += dy[[i, j]];
            }
        }
        let mean_dxhat = sum_dxhat / w as f64;
        let mean_dxhat_xhat = sum_dxhat_xhat / w as f64;
        for j in 0..w {
            let dxh = dy[[i, j]] * g[j];
            dx[[i, j]] = invstd[i] * (dxh - mean_dxhat - xhat[[i, j]] * mean_dxhat_xhat);
        }
    }
    dx
}

struct LayerCache {
    ln1_xhat: Array2<f64>,
    ln1_invstd: Array1<f64>,
    an: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    o_cat: Array2<f64>,
    ln2_xhat: Array2<f64>,
    ln2_invstd: Array1<f64>,
    mn: Array2<f64>,
    u: Array2<f64>,
    gact: Array2<f64>,
    eff_wq: Option<Array2<f64>>,
    eff_wv: Option<Array2<f64>>,
}

/// Activations recorded during a forward pass, consumed by backward.
pub struct ForwardCache {
    layers: Vec<LayerCache>,
    final_x: Array2<f64>,
    lnf_xhat: Array2<f64>,
    lnf_invstd: Array1<f64>,
    hn: Array2<f64>,
    tokens: Vec<Token>,
}

fn check_tokens(params: &ModelParams, tokens: &[Token]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::input("token sequence is empty"));
    }
    if tokens.len() > params.config.context_len {
        return Err(Error::input(format!(
            "sequence of {} tokens exceeds context length {}",
            tokens.len(),
            params.config.context_len
        )));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= params.config.vocab.size) {
        return Err(Error::input(format!(
            "token id {t} outside vocab of size {}",
            params.config.vocab.size
        )));
    }
    Ok(())
}

fn run_forward(
    params: &ModelParams,
    adapter: Option<&LoraAdapter>,
    tokens: &[Token],
    want_cache: bool,
) -> Result<(Array2<f64>, Option<ForwardCache>)> {
    check_tokens(params, tokens)?;
    if let Some(ad) = adapter {
        ad.check_compatible(params)?;
    }
    let t = tokens.len();
    let w = params.config.width;
    let heads = params.config.heads;
    let hd = params.config.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();

    let mut x = Array2::zeros((t, w));
    for (i, &tok) in tokens.iter().enumerate() {
        let e = params.tok_emb.row(tok as usize);
        let p = params.pos_emb.row(i);
        for j in 0..w {
            x[[i, j]] = e[j] + p[j];
        }
    }

    let mut caches = Vec::with_capacity(params.layers.len());
    for (l, layer) in params.layers.iter().enumerate() {
        let eff_wq = adapter
            .and_then(|ad| ad.slot(l, AttnProj::Q))
            .map(|i| &layer.attn.wq + &adapter.unwrap().delta(i));
        let eff_wv = adapter
            .and_then(|ad| ad.slot(l, AttnProj::V))
            .map(|i| &layer.attn.wv + &adapter.unwrap().delta(i));
        let wq = eff_wq.as_ref().unwrap_or(&layer.attn.wq);
        let wv = eff_wv.as_ref().unwrap_or(&layer.attn.wv);

        let (an, ln1_xhat, ln1_invstd) = layer_norm(&x, &layer.ln1.g, &layer.ln1.b);
        let q = an.dot(wq) + &layer.attn.bq;
        let k = an.dot(&layer.attn.wk) + &layer.attn.bk;
        let v = an.dot(wv) + &layer.attn.bv;

        let mut o_cat = Array2::zeros((t, w));
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = s![.., h * hd..(h + 1) * hd];
            let qh = q.slice(cols).to_owned();
            let kh = k.slice(cols).to_owned();
            let vh = v.slice(cols).to_owned();
            let mut sc = qh.dot(&kh.t());
            sc.mapv_inplace(|v| v * scale);
            // Causal softmax: row i attends to columns 0..=i only.
            for i in 0..t {
                let mut mx = f64::NEG_INFINITY;
                for j in 0..=i {
                    mx = mx.max(sc[[i, j]]);
                }
                let mut sum = 0.0;
                for j in 0..=i {
                    let e = (sc[[i, j]] - mx).exp();
                    sc[[i, j]] = e;
                    sum += e;
                }
                for j in 0..t {
                    if j <= i {
                        sc[[i, j]] /= sum;
                    } else {
                        sc[[i, j]] = 0.0;
                    }
                }
            }
            let oh = sc.dot(&vh);
            o_cat.slice_mut(cols).assign(&oh);
            probs.push(sc);
        }
        let attn_out = o_cat.dot(&layer.attn.wo) + &layer.attn.bo;
        let x_mid = &x + &attn_out;

        let (mn, ln2_xhat, ln2_invstd) = layer_norm(&x_mid, &layer.ln2.g, &layer.ln2.b);
        let u = mn.dot(&layer.mlp.w1) + &layer.mlp.b1;
        let gact = u.mapv(gelu);
        let f = gact.dot(&layer.mlp.w2) + &layer.mlp.b2;
        let x_out = &x_mid + &f;

        if want_cache {
            caches.push(LayerCache {
                ln1_xhat,
                ln1_invstd,
                an,
                q,
                k,
                v,
                probs,
                o_cat,
                ln2_xhat,
                ln2_invstd,
                mn,
                u,
                gact,
                eff_wq,
                eff_wv,
            });
        }
        x = x_out;
    }

    let (hn, lnf_xhat, lnf_invstd) = layer_norm(&x, &params.lnf.g, &params.lnf.b);
    let logits = hn.dot(&params.out_w) + &params.out_b;
    let cache = want_cache.then(|| ForwardCache {
        layers: caches,
        final_x: x,
        lnf_xhat,
        lnf_invstd,
        hn,
        tokens: tokens.to_vec(),
    });
    Ok((logits, cache))
}

/// Per-position next-token logits for one sequence, shape (len, vocab).
/// When an adapter is given, its targets act as W0 + B·A.
pub fn forward_logits(
    params: &ModelParams,
    adapter: Option<&LoraAdapter>,
    tokens: &[Token],
) -> Result<Array2<f64>> {
    run_forward(params, adapter, tokens, false).map(|(l, _)| l)
}

pub fn forward_with_cache(
    params: &ModelParams,
    adapter: Option<&LoraAdapter>,
    tokens: &[Token],
) -> Result<(Array2<f64>, ForwardCache)> {
    run_forward(params, adapter, tokens, true).map(|(l, c)| (l, c.expect("cache requested")))
}

/// Mean next-token negative log-likelihood of `target` given `prompt`, plus
/// the gradient of that loss with respect to the logits. Only positions that
/// predict target tokens contribute; prompt-internal transitions are masked.
pub fn nll_dlogits(
    logits: &Array2<f64>,
    tokens: &[Token],
    prompt_len: usize,
) -> Result<(f64, Array2<f64>)> {
    let t = tokens.len();
    if prompt_len == 0 || prompt_len >= t {
        return Err(Error::input("need a non-empty prompt and a non-empty target"));
    }
    let v = logits.ncols();
    let count = (t - prompt_len) as f64;
    let mut dlogits = Array2::zeros((t, v));
    let mut loss = 0.0;
    for pos in prompt_len - 1..t - 1 {
        let tgt = tokens[pos + 1] as usize;
        let row = logits.row(pos);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&z| (z - mx).exp()).sum();
        let lse = mx + sum.ln();
        loss += lse - row[tgt];
        for j in 0..v {
            let p = (row[j] - mx).exp() / sum;
            dlogits[[pos, j]] = (p - if j == tgt { 1.0 } else { 0.0 }) / count;
        }
    }
    Ok((loss / count, dlogits))
}

/// Mean NLL of a prompt/target pair under an optionally adapted model.
pub fn nll_loss(
    params: &ModelParams,
    adapter: Option<&LoraAdapter>,
    prompt: &[Token],
    target: &[Token],
) -> Result<f64> {
    if prompt.is_empty() || target.is_empty() {
        return Err(Error::input("need a non-empty prompt and a non-empty target"));
    }
    let mut tokens = prompt.to_vec();
    tokens.extend_from_slice(target);
    let logits = forward_logits(params, adapter, &tokens)?;
    let (loss, _) = nll_dlogits(&logits, &tokens, prompt.len())?;
    Ok(loss)
}

/// Mean of per-example NLL over a batch.
pub fn batch_nll(
    params: &ModelParams,
    adapter: Option<&LoraAdapter>,
    batch: &[(Vec<Token>, Vec<Token>)],
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::input("batch is empty"));
    }
    let losses: Vec<Result<f64>> = batch
        .par_iter()
        .map(|(p, t)| nll_loss(params, adapter, p, t))
        .collect();
    let mut sum = 0.0;
    for l in losses {
        sum += l?;
    }
    Ok(sum / batch.len() as f64)
}

enum GradSink<'a> {
    Full(&'a mut ModelParams),
    Adapter { adapter: &'a LoraAdapter, grads: &'a mut AdapterGrads },
}

fn run_backward(params: &ModelParams, cache: &ForwardCache, dlogits: &Array2<f64>, sink: &mut GradSink) {
    let t = cache.tokens.len();
    let w = params.config.width;
    let heads = params.config.heads;
    let hd = params.config.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();

    let mut d_hn = dlogits.dot(&params.out_w.t());
    if let GradSink::Full(g) = sink {
        g.out_w += &cache.hn.t().dot(dlogits);
        g.out_b += &dlogits.sum_axis(Axis(0));
    }
    let mut dx = match sink {
        GradSink::Full(g) => {
            let LayerNormParams { g: dg, b: db } = &mut g.lnf;
            layer_norm_backward(
                &d_hn,
                &params.lnf.g,
                &cache.lnf_xhat,
                &cache.lnf_invstd,
                Some(dg),
                Some(db),
            )
        }
        GradSink::Adapter { .. } => layer_norm_backward(
            &d_hn,
            &params.lnf.g,
            &cache.lnf_xhat,
            &cache.lnf_invstd,
            None,
            None,
        ),
    };
    d_hn.fill(0.0);

    let _ = &cache.final_x;
    for (l, layer) in params.layers.iter().enumerate().rev() {
        let lc = &cache.layers[l];

        // MLP block: x_out = x_mid + gelu(ln2(x_mid)·W1 + b1)·W2 + b2.
        let df = &dx;
        let dgact = df.dot(&layer.mlp.w2.t());
        let mut du = dgact.clone();
        ndarray::Zip::from(&mut du).and(&lc.u).for_each(|d, &u| *d *= gelu_prime(u));
        let dmn = du.dot(&layer.mlp.w1.t());
        if let GradSink::Full(g) = sink {
            g.layers[l].mlp.w2 += &lc.gact.t().dot(df);
            g.layers[l].mlp.b2 += &df.sum_axis(Axis(0));
            g.layers[l].mlp.w1 += &lc.mn.t().dot(&du);
            g.layers[l].mlp.b1 += &du.sum_axis(Axis(0));
        }
        let dx_mid_ln = match sink {
            GradSink::Full(g) => {
                let LayerNormParams { g: dg, b: db } = &mut g.layers[l].ln2;
                layer_norm_backward(&dmn, &layer.ln2.g, &lc.ln2_xhat, &lc.ln2_invstd, Some(dg), Some(db))
            }
            GradSink::Adapter { .. } => {
                layer_norm_backward(&dmn, &layer.ln2.g, &lc.ln2_xhat, &lc.ln2_invstd, None, None)
            }
        };
        let dx_mid = &dx_mid_ln + &dx;

        // Attention block: x_mid = x_in + attn(ln1(x_in))·Wo + bo.
        let d_attn = &dx_mid;
        let d_ocat = d_attn.dot(&layer.attn.wo.t());
        if let GradSink::Full(g) = sink {
            g.layers[l].attn.wo += &lc.o_cat.t().dot(d_attn);
            g.layers[l].attn.bo += &d_attn.sum_axis(Axis(0));
        }

        let mut dq = Array2::zeros((t, w));
        let mut dk = Array2::zeros((t, w));
        let mut dv = Array2::zeros((t, w));
        for h in 0..heads {
            let cols = s![.., h * hd..(h + 1) * hd];
            let doh = d_ocat.slice(cols).to_owned();
            let p = &lc.probs[h];
            let kh = lc.k.slice(cols).to_owned();
            let qh = lc.q.slice(cols).to_owned();
            let vh = lc.v.slice(cols).to_owned();

            let dvh = p.t().dot(&doh);
            let dp = doh.dot(&vh.t());
            // Softmax backward per causal row.
            let mut ds = Array2::zeros((t, t));
            for i in 0..t {
                let mut dot = 0.0;
                for j in 0..=i {
                    dot += dp[[i, j]] * p[[i, j]];
                }
                for j in 0..=i {
                    ds[[i, j]] = p[[i, j]] * (dp[[i, j]] - dot);
                }
            }
            let mut dqh = ds.dot(&kh);
            dqh.mapv_inplace(|v| v * scale);
            let mut dkh = ds.t().dot(&qh);
            dkh.mapv_inplace(|v| v * scale);

            dq.slice_mut(cols).assign(&dqh);
            dk.slice_mut(cols).assign(&dkh);
            dv.slice_mut(cols).assign(&dvh);
        }

        let wq = lc.eff_wq.as_ref().unwrap_or(&layer.attn.wq);
        let wv = lc.eff_wv.as_ref().unwrap_or(&layer.attn.wv);
        let dan = dq.dot(&wq.t()) + dk.dot(&layer.attn.wk.t()) + dv.dot(&wv.t());

        match sink {
            GradSink::Full(g) => {
                g.layers[l].attn.wq += &lc.an.t().dot(&dq);
                g.layers[l].attn.bq += &dq.sum_axis(Axis(0));
                g.layers[l].attn.wk += &lc.an.t().dot(&dk);
                g.layers[l].attn.bk += &dk.sum_axis(Axis(0));
                g.layers[l].attn.wv += &lc.an.t().dot(&dv);
                g.layers[l].attn.bv += &dv.sum_axis(Axis(0));
            }
            GradSink::Adapter { adapter, grads } => {
                if let Some(i) = adapter.slot(l, AttnProj::Q) {
                    let dw = lc.an.t().dot(&dq);
                    let (b, a) = &adapter.mats[i];
                    grads.mats[i].0 += &dw.dot(&a.t());
                    grads.mats[i].1 += &b.t().dot(&dw);
                }
                if let Some(i) = adapter.slot(l, AttnProj::V) {
                    let dw = lc.an.t().dot(&dv);
                    let (b, a) = &adapter.mats[i];
                    grads.mats[i].0 += &dw.dot(&a.t());
                    grads.mats[i].1 += &b.t().dot(&dw);
                }
            }
        }

        let dx_in_ln = match sink {
            GradSink::Full(g) => {
                let LayerNormParams { g: dg, b: db } = &mut g.layers[l].ln1;
                layer_norm_backward(&dan, &layer.ln1.g, &lc.ln1_xhat, &lc.ln1_invstd, Some(dg), Some(db))
            }
            GradSink::Adapter { .. } => {
                layer_norm_backward(&dan, &layer.ln1.g, &lc.ln1_xhat, &lc.ln1_invstd, None, None)
            }
        };
        dx = &dx_in_ln + &dx_mid;
    }

    if let GradSink::Full(g) = sink {
        for (i, &tok) in cache.tokens.iter().enumerate() {
            let mut te = g.tok_emb.row_mut(tok as usize);
            te += &dx.row(i);
            let mut pe = g.pos_emb.row_mut(i);
            pe += &dx.row(i);
        }
    }
}

/// Gradients of a scalar loss (given as d loss / d logits) with respect to
/// every model parameter.
pub fn backward_full(params: &ModelParams, cache: &ForwardCache, dlogits: &Array2<f64>) -> ModelParams {
    let mut grads = ModelParams::zeros(params.config);
    run_backward(params, cache, dlogits, &mut GradSink::Full(&mut grads));
    grads
}

/// Gradients with respect to adapter factors only. The full-weight gradient
/// of each adapted matrix is chained through the factorization:
/// dB = dW·Aᵀ and dA = Bᵀ·dW.
pub fn backward_adapter(
    params: &ModelParams,
    adapter: &LoraAdapter,
    cache: &ForwardCache,
    dlogits: &Array2<f64>,
) -> AdapterGrads {
    let mut grads = AdapterGrads::zeros_like(adapter);
    run_backward(params, cache, dlogits, &mut GradSink::Adapter { adapter, grads: &mut grads });
    grads
}

/// Mean loss and mean full-parameter gradient over a batch of
/// (prompt, target) pairs. Accumulation is sequential and ordered.
pub fn batch_grads_full(
    params: &ModelParams,
    batch: &[(Vec<Token>, Vec<Token>)],
) -> Result<(f64, ModelParams)> {
    if batch.is_empty() {
        return Err(Error::input("batch is empty"));
    }
    let mut total = ModelParams::zeros(params.config);
    let mut loss_sum = 0.0;
    let inv = 1.0 / batch.len() as f64;
    for (prompt, target) in batch {
        if prompt.is_empty() || target.is_empty() {
            return Err(Error::input("need a non-empty prompt and a non-empty target"));
        }
        let mut tokens = prompt.clone();
        tokens.extend_from_slice(target);
        let (logits, cache) = forward_with_cache(params, None, &tokens)?;
        let (loss, dlogits) = nll_dlogits(&logits, &tokens, prompt.len())?;
        loss_sum += loss;
        let g = backward_full(params, &cache, &dlogits);
        total.add_scaled(&g, inv);
    }
    Ok((loss_sum * inv, total))
}

/// Mean loss and mean adapter gradient over a batch. Examples run in
/// parallel; the reduction follows batch order, so results do not depend on
/// scheduling.
pub fn batch_grads_adapter(
    params: &ModelParams,
    adapter: &LoraAdapter,
    batch: &[(Vec<Token>, Vec<Token>)],
) -> Result<(f64, AdapterGrads)> {
    if batch.is_empty() {
        return Err(Error::input("batch is empty"));
    }
    let per: Vec<Result<(f64, AdapterGrads)>> = batch
        .par_iter()
        .map(|(prompt, target)| {
            if prompt.is_empty() || target.is_empty() {
                return Err(Error::input("need a non-empty prompt and a non-empty target"));
            }
            let mut tokens = prompt.clone();
            tokens.extend_from_slice(target);
            let (logits, cache) = forward_with_cache(params, Some(adapter), &tokens)?;
            let (loss, dlogits) = nll_dlogits(&logits, &tokens, prompt.len())?;
            let g = backward_adapter(params, adapter, &cache, &dlogits);
            Ok((loss, g))
        })
        .collect();
    let inv = 1.0 / batch.len() as f64;
    let mut total = AdapterGrads::zeros_like(adapter);
    let mut loss_sum = 0.0;
    for r in per {
        let (loss, g) = r?;
        loss_sum += loss;
        total.add_scaled(&g, inv);
    }
    Ok((loss_sum * inv, total))
}
