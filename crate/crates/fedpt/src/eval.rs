use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::Serialize;

use crate::data::{encode_pair, ByteTokenizer, Example};
use crate::error::{Error, Result};
use crate::model::{greedy_decode, sample_decode, LogitSource};
use crate::rng::stream;

/// How generations are produced during evaluation.
#[derive(Debug, Clone, Serialize)]
pub struct GenSettings {
    /// Maximum number of generated tokens per example.
    pub max_len: usize,
    /// `None` decodes greedily; `Some` samples with (temperature, top_p).
    pub sampling: Option<(f64, f64)>,
}

impl Default for GenSettings {
    fn default() -> Self {
        Self {
            max_len: 64,
            sampling: None,
        }
    }
}

/// Aggregated evaluation results. Scores are kept in [0, 1]; multiply by 100
/// for percentage-style reporting.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub rouge_mean: f64,
    pub rouge_std: f64,
    /// Mean Rouge-L per evaluation seed, in input order.
    pub per_seed: Vec<f64>,
    /// Distinct-n-gram ratios averaged over seeds; absent when no seed
    /// produced any n-gram of that order.
    pub dist: BTreeMap<usize, f64>,
    /// Mean Rouge-L per category over all seeds and examples.
    pub per_category: BTreeMap<String, f64>,
    /// Examples that failed to decode, summed over seeds.
    pub decode_failures: usize,
    pub seeds: Vec<u64>,
    pub settings: GenSettings,
}

fn words(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.trim_matches(|c: char| !c.is_alphanumeric())
                .to_lowercase()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

/// Rouge-L F1 between two texts: longest common subsequence over lowercased
/// whitespace words (edge punctuation stripped), precision L/|candidate|,
/// recall L/|reference|, harmonic mean. Degenerate cases score 0.
pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    let a = words(candidate);
    let b = words(reference);
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let l = lcs_len(&a, &b) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let p = l / a.len() as f64;
    let r = l / b.len() as f64;
    2.0 * p * r / (p + r)
}

/// Two-row LCS dynamic program.
fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Fraction of distinct word n-grams across all texts. Texts shorter than
/// `n` words contribute no n-grams; returns `None` when nothing contributes.
pub fn dist_n(texts: &[String], n: usize) -> Result<Option<f64>> {
    if n == 0 {
        return Err(Error::input("n-gram order must be at least 1"));
    }
    let mut distinct: BTreeSet<Vec<String>> = BTreeSet::new();
    let mut total = 0usize;
    for text in texts {
        let w = words(text);
        if w.len() < n {
            continue;
        }
        for gram in w.windows(n) {
            distinct.insert(gram.to_vec());
            total += 1;
        }
    }
    if total == 0 {
        Ok(None)
    } else {
        Ok(Some(distinct.len() as f64 / total as f64))
    }
}

/// Decodes every example once; `None` marks an example whose generation
/// failed (for instance a prompt that does not fit the context window).
fn decode_all(
    source: &(dyn LogitSource + Sync),
    tokenizer: &ByteTokenizer,
    examples: &[Example],
    settings: &GenSettings,
    seed: u64,
) -> Vec<Option<String>> {
    examples
        .par_iter()
        .enumerate()
        .map(|(i, example)| {
            let (prompt, _) = encode_pair(tokenizer, example);
            let tokens = match settings.sampling {
                None => greedy_decode(source, &prompt, settings.max_len),
                Some((temperature, top_p)) => {
                    let mut rng = stream(seed, "eval-decode", &[i as u64]);
                    sample_decode(source, &prompt, settings.max_len, temperature, top_p, &mut rng)
                }
            };
            tokens.and_then(|t| tokenizer.detokenize(&t)).ok()
        })
        .collect()
}

/// Scores a model on a set of examples: for each seed, generate a response
/// per example and compare it to the reference with Rouge-L; aggregate the
/// per-seed means and report distinct-n-gram ratios (n = 3, 4, averaged over
/// seeds) plus per-category means. Greedy decoding ignores the seed values,
/// so each seed reproduces the same generations by construction. Examples
/// that fail to decode are counted and skipped.
pub fn evaluate(
    source: &(dyn LogitSource + Sync),
    examples: &[Example],
    seeds: &[u64],
    settings: &GenSettings,
) -> Result<EvalReport> {
    if examples.is_empty() {
        return Err(Error::input("evaluation set is empty"));
    }
    if seeds.is_empty() {
        return Err(Error::input("need at least one evaluation seed"));
    }
    if settings.max_len == 0 {
        return Err(Error::input("max_len must be positive"));
    }
    let tokenizer = ByteTokenizer::new(source.vocab())?;

    let mut per_seed = Vec::with_capacity(seeds.len());
    let mut dist_sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    let mut cat_sum: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    let mut failures = 0usize;

    let mut cached: Option<Vec<Option<String>>> = None;
    for &seed in seeds {
        let generations: Vec<Option<String>> = if settings.sampling.is_none() {
            if cached.is_none() {
                cached = Some(decode_all(source, &tokenizer, examples, settings, seed));
            }
            cached.clone().expect("just filled")
        } else {
            decode_all(source, &tokenizer, examples, settings, seed)
        };

        let mut sum = 0.0;
        let mut count = 0usize;
        let mut texts = Vec::with_capacity(examples.len());
        for (example, gen) in examples.iter().zip(&generations) {
            match gen {
                Some(text) => {
                    let score = rouge_l(text, &example.response);
                    sum += score;
                    count += 1;
                    let c = cat_sum.entry(example.category.clone()).or_default();
                    c.0 += score;
                    c.1 += 1;
                    texts.push(text.clone());
                }
                None => failures += 1,
            }
        }
        if count == 0 {
            return Err(Error::contract(
                "every example failed to decode in an evaluation pass",
            ));
        }
        per_seed.push(sum / count as f64);
        for n in [3usize, 4] {
            if let Some(ratio) = dist_n(&texts, n)? {
                let slot = dist_sums.entry(n).or_default();
                slot.0 += ratio;
                slot.1 += 1;
            }
        }
    }

    let mean = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
    let var = per_seed.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / per_seed.len() as f64;
    Ok(EvalReport {
        rouge_mean: mean,
        rouge_std: var.sqrt(),
        per_seed,
        dist: dist_sums
            .into_iter()
            .map(|(n, (s, c))| (n, s / c as f64))
            .collect(),
        per_category: cat_sum
            .into_iter()
            .map(|(k, (s, c))| (k, s / c as f64))
            .collect(),
        decode_failures: failures,
        seeds: seeds.to_vec(),
        settings: settings.clone(),
    })
}
