use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapter::{AdaptedModel, AdapterGrads, LoraAdapter};
use crate::error::{Error, Result};
use crate::model::{
    backward_adapter, forward_with_cache, ModelConfig, ModelParams, Optimizer, OptimizerKind,
    Token, Vocab,
};
use crate::proxy::ProxyEnsemble;
use crate::rng::{stream, Rng};

/// Server-side knowledge-distillation settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    /// Mixing weight: 0 is pure likelihood training, 1 is pure teacher KL.
    pub lambda: f64,
    /// How many public examples form the distillation set.
    pub kd_data_size: usize,
    pub kd_batch_size: usize,
    /// Optimizer steps per distillation call; 0 disables distillation.
    pub kd_iterations: usize,
    pub kd_lr: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            kd_data_size: 128,
            kd_batch_size: 16,
            kd_iterations: 8,
            kd_lr: 1e-3,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) || !self.lambda.is_finite() {
            return Err(Error::config(format!(
                "lambda must lie in [0, 1], got {}",
                self.lambda
            )));
        }
        if self.kd_data_size == 0 {
            return Err(Error::config("kd_data_size must be positive"));
        }
        if self.kd_batch_size == 0 {
            return Err(Error::config("kd_batch_size must be positive"));
        }
        if self.kd_batch_size > self.kd_data_size {
            return Err(Error::config(format!(
                "kd_batch_size {} exceeds kd_data_size {}",
                self.kd_batch_size, self.kd_data_size
            )));
        }
        if !self.kd_lr.is_finite() || self.kd_lr < 0.0 {
            return Err(Error::config(format!(
                "kd_lr must be finite and nonnegative, got {}",
                self.kd_lr
            )));
        }
        Ok(())
    }
}

/// The result of one distillation call: the updated student adapter plus the
/// batch loss at each optimizer step.
#[derive(Debug, Clone)]
pub struct DistillOutcome {
    pub adapter: LoraAdapter,
    pub losses: Vec<f64>,
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|&z| (z - mx).exp()).sum();
    let lse = mx + sum.ln();
    row.iter().map(|&z| z - lse).collect()
}

/// Forward KL divergence between two distributions given as log
/// probabilities, teacher first. Zero-probability teacher entries
/// contribute nothing.
fn kl_from_log(teacher_log: &[f64], student_log: &[f64]) -> f64 {
    teacher_log
        .iter()
        .zip(student_log)
        .map(|(&lt, &ls)| {
            let p = lt.exp();
            if p > 0.0 {
                p * (lt - ls)
            } else {
                0.0
            }
        })
        .sum()
}

fn check_shared_vocab(student: &ModelParams, teacher: &ProxyEnsemble) -> Result<()> {
    if student.config.vocab != teacher.large_base.config.vocab {
        return Err(Error::config(format!(
            "student vocab {:?} does not match teacher vocab {:?}",
            student.config.vocab, teacher.large_base.config.vocab
        )));
    }
    Ok(())
}

/// Per-example mixed loss and, when requested, its gradient with respect to
/// the student logits. Both loss terms average over target positions.
fn kd_example(
    base: &ModelParams,
    adapter: &LoraAdapter,
    teacher: &ProxyEnsemble,
    prompt: &[Token],
    target: &[Token],
    lambda: f64,
    want_grads: bool,
) -> Result<(f64, Option<AdapterGrads>)> {
    if prompt.is_empty() || target.is_empty() {
        return Err(Error::input("need a non-empty prompt and a non-empty target"));
    }
    let mut tokens = prompt.to_vec();
    tokens.extend_from_slice(target);
    let (student_logits, cache) = forward_with_cache(base, Some(adapter), &tokens)?;
    let teacher_logits = teacher.proxy_logits(&tokens)?;

    let t = tokens.len();
    let v = student_logits.ncols();
    let count = target.len() as f64;
    let mut nll_sum = 0.0;
    let mut kl_sum = 0.0;
    let mut dlogits = want_grads.then(|| Array2::<f64>::zeros((t, v)));
    for pos in prompt.len() - 1..t - 1 {
        let tgt = tokens[pos + 1] as usize;
        let s_log = log_softmax(student_logits.row(pos).as_slice().expect("contiguous row"));
        let t_log = log_softmax(teacher_logits.row(pos).as_slice().expect("contiguous row"));
        nll_sum += -s_log[tgt];
        kl_sum += kl_from_log(&t_log, &s_log);
        if let Some(d) = dlogits.as_mut() {
            for j in 0..v {
                let p_s = s_log[j].exp();
                let p_t = t_log[j].exp();
                let mle = p_s - if j == tgt { 1.0 } else { 0.0 };
                d[[pos, j]] = ((1.0 - lambda) * mle + lambda * (p_s - p_t)) / count;
            }
        }
    }
    let loss = (1.0 - lambda) * nll_sum / count + lambda * kl_sum / count;
    let grads = dlogits.map(|d| backward_adapter(base, adapter, &cache, &d));
    Ok((loss, grads))
}

fn kd_batch(
    base: &ModelParams,
    adapter: &LoraAdapter,
    teacher: &ProxyEnsemble,
    batch: &[(Vec<Token>, Vec<Token>)],
    lambda: f64,
    want_grads: bool,
) -> Result<(f64, Option<AdapterGrads>)> {
    if batch.is_empty() {
        return Err(Error::input("batch is empty"));
    }
    let per: Vec<Result<(f64, Option<AdapterGrads>)>> = batch
        .par_iter()
        .map(|(p, t)| kd_example(base, adapter, teacher, p, t, lambda, want_grads))
        .collect();
    let inv = 1.0 / batch.len() as f64;
    let mut loss_sum = 0.0;
    let mut total = want_grads.then(|| AdapterGrads::zeros_like(adapter));
    for r in per {
        let (loss, g) = r?;
        loss_sum += loss;
        if let (Some(total), Some(g)) = (total.as_mut(), g.as_ref()) {
            total.add_scaled(g, inv);
        }
    }
    Ok((loss_sum * inv, total))
}

/// The mixed distillation objective on one batch: `(1 - lambda)` times the
/// student's mean negative log-likelihood of the reference targets plus
/// `lambda` times the mean per-position forward KL from the teacher's
/// distribution to the student's. The teacher is never differentiated.
pub fn kd_loss(
    student: &AdaptedModel,
    teacher: &ProxyEnsemble,
    batch: &[(Vec<Token>, Vec<Token>)],
    lambda: f64,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda) || !lambda.is_finite() {
        return Err(Error::input(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    check_shared_vocab(&student.base, teacher)?;
    kd_batch(&student.base, &student.adapter, teacher, batch, lambda, false).map(|(l, _)| l)
}

/// `kd_loss` plus its gradient with respect to the student adapter.
pub fn kd_grads(
    student: &AdaptedModel,
    teacher: &ProxyEnsemble,
    batch: &[(Vec<Token>, Vec<Token>)],
    lambda: f64,
) -> Result<(f64, AdapterGrads)> {
    if !(0.0..=1.0).contains(&lambda) || !lambda.is_finite() {
        return Err(Error::input(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    check_shared_vocab(&student.base, teacher)?;
    let (loss, grads) =
        kd_batch(&student.base, &student.adapter, teacher, batch, lambda, true)?;
    Ok((loss, grads.expect("gradients requested")))
}

/// Runs `kd_iterations` optimizer steps of the mixed objective over seeded
/// mini-batches drawn from the first `kd_data_size` public pairs, updating
/// only the student's adapter. With zero iterations the adapter is returned
/// unchanged and the RNG is not advanced.
pub fn distill(
    student: &AdaptedModel,
    teacher: &ProxyEnsemble,
    public: &[(Vec<Token>, Vec<Token>)],
    config: &DistillConfig,
    rng: &mut Rng,
) -> Result<DistillOutcome> {
    config.validate()?;
    check_shared_vocab(&student.base, teacher)?;
    if config.kd_iterations == 0 {
        return Ok(DistillOutcome {
            adapter: student.adapter.clone(),
            losses: Vec::new(),
        });
    }
    if public.len() < config.kd_data_size {
        return Err(Error::config(format!(
            "public dataset has {} examples, need kd_data_size {}",
            public.len(),
            config.kd_data_size
        )));
    }
    let pool = &public[..config.kd_data_size];

    let mut adapter = student.adapter.clone();
    let mut optimizer = Optimizer::new(OptimizerKind::Adam, adapter.param_count(), 0.0);
    let mut losses = Vec::with_capacity(config.kd_iterations);
    for _ in 0..config.kd_iterations {
        let picks = rand::seq::index::sample(rng, pool.len(), config.kd_batch_size);
        let batch: Vec<(Vec<Token>, Vec<Token>)> =
            picks.iter().map(|i| pool[i].clone()).collect();
        let (loss, grads) =
            kd_batch(&student.base, &adapter, teacher, &batch, config.lambda, true)?;
        let grads = grads.expect("gradients requested");
        let mut flat = adapter.to_flat();
        optimizer.step(&mut flat, &grads.to_flat(), config.kd_lr)?;
        adapter.assign_flat(&flat)?;
        losses.push(loss);
    }
    Ok(DistillOutcome { adapter, losses })
}

/// Finite-difference validation of the distillation gradient on a
/// pocket-sized ensemble.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
}

/// Compares analytic adapter gradients of the mixed objective against
/// central finite differences on a tiny randomly initialized ensemble.
pub fn kd_gradient_check(seed: u64, lambda: f64) -> Result<GradCheckReport> {
    use rand::RngExt as _;

    let cfg = ModelConfig {
        layers: 1,
        width: 8,
        heads: 2,
        context_len: 16,
        vocab: Vocab::byte_level(),
    };
    let small = std::sync::Arc::new(ModelParams::init(cfg, &mut stream(seed, "gc-small", &[]))?);
    let large = std::sync::Arc::new(ModelParams::init(cfg, &mut stream(seed, "gc-large", &[]))?);

    let mut jitter = stream(seed, "gc-jitter", &[]);
    let randomized = |mut a: LoraAdapter, rng: &mut Rng| -> Result<LoraAdapter> {
        let mut flat = a.to_flat();
        for v in flat.iter_mut() {
            *v = 0.5 * (rng.random::<f64>() - 0.5);
        }
        a.assign_flat(&flat)?;
        Ok(a)
    };
    let teacher_adapter = randomized(
        LoraAdapter::init(&small, 2, &mut stream(seed, "gc-teacher", &[]))?,
        &mut jitter,
    )?;
    let student_adapter = randomized(
        LoraAdapter::init(&small, 2, &mut stream(seed, "gc-student", &[]))?,
        &mut jitter,
    )?;
    let teacher = ProxyEnsemble::new(
        large,
        small.clone(),
        AdaptedModel::new(small.clone(), teacher_adapter)?,
        1.5,
    )?;
    let student = AdaptedModel::new(small.clone(), student_adapter)?;

    let mut data_rng = stream(seed, "gc-data", &[]);
    let batch: Vec<(Vec<Token>, Vec<Token>)> = (0..2)
        .map(|_| {
            let prompt: Vec<Token> = (0..4).map(|_| data_rng.random_range(0..256u32)).collect();
            let target: Vec<Token> = (0..3).map(|_| data_rng.random_range(0..256u32)).collect();
            (prompt, target)
        })
        .collect();

    let (_, analytic) = kd_grads(&student, &teacher, &batch, lambda)?;
    let analytic = analytic.to_flat();

    let flat0 = student.adapter.to_flat();
    let mut coord_rng = stream(seed, "gc-coords", &[]);
    let h = 1e-4;
    let mut max_rel: f64 = 0.0;
    let coords = 40.min(flat0.len());
    for _ in 0..coords {
        let i = coord_rng.random_range(0..flat0.len());
        let eval = |delta: f64| -> Result<f64> {
            let mut flat = flat0.clone();
            flat[i] += delta;
            let mut a = student.adapter.clone();
            a.assign_flat(&flat)?;
            let m = AdaptedModel::new(small.clone(), a)?;
            kd_loss(&m, &teacher, &batch, lambda)
        };
        let numeric = (eval(h)? - eval(-h)?) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-6);
        max_rel = max_rel.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        coords_checked: coords,
    })
}
