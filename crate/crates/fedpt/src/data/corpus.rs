use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::RngExt as _;
use serde::{Deserialize, Serialize};

use crate::data::tokenizer::ByteTokenizer;
use crate::error::{Error, Result};
use crate::model::Token;
use crate::rng::stream;

/// One instruction-following example. `category` is a free-form label; the
/// built-in generator uses the labels in [`CATEGORY_LABELS`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub instruction: String,
    pub input: String,
    pub response: String,
    pub category: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
    Public,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Val, Split::Test, Split::Public];

    fn rank(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
            Split::Public => 3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub split: Split,
    #[serde(flatten)]
    pub example: Example,
}

/// A full dataset: four labelled splits stored as one flat list.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub entries: Vec<CorpusEntry>,
}

impl Corpus {
    /// Indices (into `entries`) of one split, in stored order.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn examples_of(&self, split: Split) -> Vec<&Example> {
        self.entries
            .iter()
            .filter(|e| e.split == split)
            .map(|e| &e.example)
            .collect()
    }

    /// Sorted distinct category labels present in the training split.
    pub fn train_categories(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self
            .entries
            .iter()
            .filter(|e| e.split == Split::Train)
            .map(|e| e.example.category.as_str())
            .collect();
        set.into_iter().map(str::to_owned).collect()
    }
}

/// Sizing and seeding for the synthetic corpus generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub seed: u64,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub public: usize,
    /// How many task categories to draw from, a prefix of [`CATEGORY_LABELS`].
    pub categories: usize,
    /// Examples whose encoded length would exceed this are redrawn.
    pub context_len: usize,
}

/// Canonical task categories. Every response is a pure function of the input,
/// so generated data can be re-verified mechanically (see
/// [`expected_response`]).
pub const CATEGORY_LABELS: [&str; 8] = [
    "copy",
    "uppercase",
    "first_word",
    "last_word",
    "reverse",
    "count_words",
    "sort_letters",
    "arithmetic",
];

/// Shared lexicon. Slices of it are reserved per split so that evaluation
/// inputs never repeat a training input.
const LEXICON: [&str; 48] = [
    "apple", "river", "stone", "cloud", "grass", "light", "music", "paper", "table", "chair",
    "bread", "glass", "horse", "mouse", "plant", "train", "bridge", "candle", "dream", "field",
    "garden", "hammer", "island", "jacket", "kitten", "ladder", "meadow", "needle", "orange",
    "pencil", "quiet", "rabbit", "silver", "tiger", "velvet", "valley", "window", "yellow",
    "zebra", "basket", "copper", "dolphin", "engine", "forest", "guitar", "harbor", "ivory",
    "jungle",
];

fn word_pool(split: Split) -> &'static [&'static str] {
    match split {
        Split::Train => &LEXICON[0..28],
        Split::Val => &LEXICON[28..34],
        Split::Test => &LEXICON[34..40],
        Split::Public => &LEXICON[40..48],
    }
}

/// Operand pairs for the arithmetic task, bucketed so each split owns a
/// disjoint set of (a, b) problems.
fn arithmetic_pool(split: Split) -> Vec<(u32, u32)> {
    let mut out = Vec::new();
    for a in 0..=9u32 {
        for b in 0..=9u32 {
            let bucket = (a * 13 + b * 7) % 20;
            let keep = match split {
                Split::Train => bucket < 14,
                Split::Val => bucket == 14 || bucket == 15,
                Split::Test => bucket == 16 || bucket == 17,
                Split::Public => bucket >= 18,
            };
            if keep {
                out.push((a, b));
            }
        }
    }
    out
}

fn instruction_for(category: &str, pick: usize) -> &'static str {
    let variants: [&str; 2] = match category {
        "copy" => ["Copy the input text.", "Repeat the input exactly."],
        "uppercase" => [
            "Convert the input to uppercase.",
            "Rewrite the input in capital letters.",
        ],
        "first_word" => [
            "Output the first word of the input.",
            "Which word comes first in the input?",
        ],
        "last_word" => [
            "Output the last word of the input.",
            "Which word comes last in the input?",
        ],
        "reverse" => [
            "Reverse the order of the words in the input.",
            "Write the input words in reverse order.",
        ],
        "count_words" => [
            "Count the words in the input.",
            "How many words does the input contain?",
        ],
        "sort_letters" => [
            "Sort the letters of the input word alphabetically.",
            "Arrange the letters of the input in alphabetical order.",
        ],
        "arithmetic" => ["Add the two numbers.", "Compute the sum of the two numbers."],
        other => panic!("unknown generator category {other}"),
    };
    variants[pick % variants.len()]
}

fn sample_words(rng: &mut crate::rng::Rng, pool: &[&str], count: usize) -> String {
    let mut picked: Vec<&str> = Vec::with_capacity(count);
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(rng);
    for &i in order.iter().take(count) {
        picked.push(pool[i]);
    }
    picked.join(" ")
}

fn make_example(category: &str, split: Split, rng: &mut crate::rng::Rng) -> Example {
    let pool = word_pool(split);
    let pick = rng.random_range(0..2usize);
    let input = match category {
        "copy" | "uppercase" => {
            let n = rng.random_range(1..=3);
            sample_words(rng, pool, n)
        }
        "first_word" | "last_word" | "reverse" => {
            let n = rng.random_range(2..=4);
            sample_words(rng, pool, n)
        }
        "count_words" => {
            let n = rng.random_range(1..=5);
            sample_words(rng, pool, n)
        }
        "sort_letters" => sample_words(rng, pool, 1),
        "arithmetic" => {
            let pairs = arithmetic_pool(split);
            let (a, b) = pairs[rng.random_range(0..pairs.len())];
            format!("{a} + {b}")
        }
        other => panic!("unknown generator category {other}"),
    };
    let response = expected_response(category, &input)
        .expect("generator categories always have a task function");
    Example {
        instruction: instruction_for(category, pick).to_owned(),
        input,
        response,
        category: category.to_owned(),
    }
}

/// Recomputes the ground-truth response for a generator category from the
/// input alone. Returns `None` for unknown categories or malformed inputs.
pub fn expected_response(category: &str, input: &str) -> Option<String> {
    let words: Vec<&str> = input.split_whitespace().collect();
    match category {
        "copy" => Some(input.to_owned()),
        "uppercase" => Some(input.to_uppercase()),
        "first_word" => words.first().map(|w| (*w).to_owned()),
        "last_word" => words.last().map(|w| (*w).to_owned()),
        "reverse" => {
            if words.is_empty() {
                None
            } else {
                Some(words.iter().rev().copied().collect::<Vec<_>>().join(" "))
            }
        }
        "count_words" => Some(words.len().to_string()),
        "sort_letters" => {
            if words.len() != 1 {
                return None;
            }
            let mut chars: Vec<char> = words[0].chars().collect();
            chars.sort_unstable();
            Some(chars.into_iter().collect())
        }
        "arithmetic" => {
            if words.len() != 3 || words[1] != "+" {
                return None;
            }
            let a: u64 = words[0].parse().ok()?;
            let b: u64 = words[2].parse().ok()?;
            Some((a + b).to_string())
        }
        _ => None,
    }
}

/// Renders the evaluation prompt around an example. The response target is
/// everything the model should emit after this prompt; the optional input
/// block is omitted entirely when the example has no input.
pub fn wrap_prompt(example: &Example) -> String {
    let mut s = String::from(
        "Below is an instruction that describes a task.\n\
         Write a response that appropriately completes the request.\n\n",
    );
    s.push_str("[Instruction]\n");
    s.push_str(&example.instruction);
    s.push_str("\n\n");
    if !example.input.is_empty() {
        s.push_str("[Input]\n");
        s.push_str(&example.input);
        s.push_str("\n\n");
    }
    s.push_str("[Response]\n");
    s
}

/// Encodes an example as (prompt tokens, target tokens): the prompt opens
/// with the begin token, the target ends with the end token.
pub fn encode_pair(tokenizer: &ByteTokenizer, example: &Example) -> (Vec<Token>, Vec<Token>) {
    let v = tokenizer.vocab();
    let mut prompt = vec![v.begin as Token];
    prompt.extend(tokenizer.tokenize(&wrap_prompt(example)));
    let mut target = tokenizer.tokenize(&example.response);
    target.push(v.end as Token);
    (prompt, target)
}

/// Generates the four splits deterministically from `spec.seed`. Categories
/// are balanced within each split (counts differ by at most one) and each
/// split draws its inputs from a reserved slice of the lexicon.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    if spec.categories == 0 || spec.categories > CATEGORY_LABELS.len() {
        return Err(Error::input(format!(
            "categories must be in 1..={}, got {}",
            CATEGORY_LABELS.len(),
            spec.categories
        )));
    }
    for (name, n) in [
        ("train", spec.train),
        ("val", spec.val),
        ("test", spec.test),
        ("public", spec.public),
    ] {
        if n == 0 {
            return Err(Error::input(format!("split size {name} must be positive")));
        }
    }
    if spec.context_len < 96 {
        return Err(Error::input(format!(
            "context_len {} too small to hold a wrapped prompt",
            spec.context_len
        )));
    }

    let tokenizer = ByteTokenizer::new(crate::model::Vocab::byte_level())?;
    let mut entries = Vec::with_capacity(spec.train + spec.val + spec.test + spec.public);
    for (split, count) in [
        (Split::Train, spec.train),
        (Split::Val, spec.val),
        (Split::Test, spec.test),
        (Split::Public, spec.public),
    ] {
        let mut block = Vec::with_capacity(count);
        for i in 0..count {
            let category = CATEGORY_LABELS[i % spec.categories];
            let mut rng = stream(spec.seed, "corpus", &[split.rank(), i as u64]);
            let mut example = make_example(category, split, &mut rng);
            let mut attempts = 0;
            loop {
                let (prompt, target) = encode_pair(&tokenizer, &example);
                if prompt.len() + target.len() <= spec.context_len {
                    break;
                }
                attempts += 1;
                if attempts > 50 {
                    return Err(Error::input(format!(
                        "cannot fit a {category} example into context_len {}",
                        spec.context_len
                    )));
                }
                example = make_example(category, split, &mut rng);
            }
            block.push(CorpusEntry {
                split,
                example,
            });
        }
        let mut order = stream(spec.seed, "corpus-shuffle", &[split.rank()]);
        block.shuffle(&mut order);
        entries.extend(block);
    }
    Ok(Corpus { entries })
}

/// Plain-text documents for next-byte pretraining: word runs in varied
/// casing, digit runs, and lightly punctuated lines. No instruction
/// formatting and no task input/output pairings appear here.
pub fn generate_pretrain_docs(seed: u64, count: usize) -> Vec<String> {
    let mut docs = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = stream(seed, "pretrain-doc", &[i as u64]);
        let style = rng.random_range(0..10u32);
        let len = rng.random_range(6..=14usize);
        let mut items = Vec::with_capacity(len);
        for _ in 0..len {
            let word = LEXICON[rng.random_range(0..LEXICON.len())];
            let item = match style {
                0..=3 => word.to_owned(),
                4 | 5 => match rng.random_range(0..3u32) {
                    0 => word.to_owned(),
                    1 => word.to_uppercase(),
                    _ => {
                        let mut c = word.chars();
                        match c.next() {
                            Some(f) => f.to_uppercase().chain(c).collect(),
                            None => String::new(),
                        }
                    }
                },
                6 | 7 => rng.random_range(0..100u32).to_string(),
                8 => format!("[{word}]"),
                _ => {
                    if rng.random_range(0..2u32) == 0 {
                        word.to_owned()
                    } else {
                        rng.random_range(0..20u32).to_string()
                    }
                }
            };
            items.push(item);
        }
        let mut doc = items.join(" ");
        match rng.random_range(0..4u32) {
            0 => doc.push('.'),
            1 => {
                let mid = items.len() / 2;
                doc = format!("{}\n{}", items[..mid].join(" "), items[mid..].join(" "));
            }
            _ => {}
        }
        docs.push(doc);
    }
    docs
}

/// Writes a corpus as JSON Lines, one entry per line.
pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for entry in &corpus.entries {
        let line = serde_json::to_string(entry)
            .map_err(|e| Error::format(path, format!("serialize entry: {e}")))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads a JSON Lines corpus written by [`save_corpus`] (or any file in the
/// same record format). Blank lines are skipped; malformed lines or records
/// with an empty instruction or response are format errors.
pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut entries = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: CorpusEntry = serde_json::from_str(&line)
            .map_err(|e| Error::format(path, format!("line {}: {e}", lineno + 1)))?;
        if entry.example.instruction.is_empty() {
            return Err(Error::format(
                path,
                format!("line {}: empty instruction", lineno + 1),
            ));
        }
        if entry.example.response.is_empty() {
            return Err(Error::format(
                path,
                format!("line {}: empty response", lineno + 1),
            ));
        }
        entries.push(entry);
    }
    Ok(Corpus { entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn spec() -> CorpusSpec {
        CorpusSpec {
            seed: 11,
            train: 64,
            val: 16,
            test: 16,
            public: 16,
            categories: 8,
            context_len: 256,
        }
    }

    #[test]
    fn wrap_prompt_matches_template_exactly() {
        let e = Example {
            instruction: "Copy the input text.".into(),
            input: "apple river".into(),
            response: "apple river".into(),
            category: "copy".into(),
        };
        let expected = "Below is an instruction that describes a task.\n\
                        Write a response that appropriately completes the request.\n\n\
                        [Instruction]\nCopy the input text.\n\n\
                        [Input]\napple river\n\n\
                        [Response]\n";
        assert_eq!(wrap_prompt(&e), expected);
    }

    #[test]
    fn wrap_prompt_omits_empty_input_block() {
        let e = Example {
            instruction: "Say hi.".into(),
            input: String::new(),
            response: "hi".into(),
            category: "copy".into(),
        };
        let p = wrap_prompt(&e);
        assert!(!p.contains("[Input]"));
        assert!(p.contains("[Instruction]\nSay hi.\n\n[Response]\n"));
    }

    #[test]
    fn generated_responses_match_task_functions() {
        let corpus = generate_corpus(&spec()).unwrap();
        assert_eq!(corpus.entries.len(), 112);
        for entry in &corpus.entries {
            let e = &entry.example;
            assert!(!e.instruction.is_empty());
            assert!(!e.response.is_empty());
            assert_eq!(
                expected_response(&e.category, &e.input).as_deref(),
                Some(e.response.as_str()),
                "category {} input {:?}",
                e.category,
                e.input
            );
        }
    }

    #[test]
    fn categories_are_balanced_within_each_split() {
        let corpus = generate_corpus(&spec()).unwrap();
        for split in Split::ALL {
            let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
            for e in corpus.examples_of(split) {
                *counts.entry(e.category.as_str()).or_default() += 1;
            }
            assert_eq!(counts.len(), 8);
            let min = counts.values().min().unwrap();
            let max = counts.values().max().unwrap();
            assert!(max - min <= 1, "split {split:?}: {counts:?}");
        }
    }

    #[test]
    fn splits_use_disjoint_word_pools() {
        let corpus = generate_corpus(&spec()).unwrap();
        let words_of = |split: Split| -> BTreeSet<String> {
            corpus
                .examples_of(split)
                .iter()
                .filter(|e| e.category != "arithmetic")
                .flat_map(|e| e.input.split_whitespace().map(str::to_owned))
                .collect()
        };
        let train = words_of(Split::Train);
        for other in [Split::Val, Split::Test, Split::Public] {
            assert!(train.is_disjoint(&words_of(other)), "overlap with {other:?}");
        }
    }

    #[test]
    fn arithmetic_pools_are_disjoint_and_cover_all_pairs() {
        let mut seen = BTreeSet::new();
        let mut total = 0;
        for split in Split::ALL {
            for pair in arithmetic_pool(split) {
                assert!(seen.insert(pair), "pair {pair:?} in two splits");
                total += 1;
            }
        }
        assert_eq!(total, 100);
    }

    #[test]
    fn generation_is_deterministic_in_seed() {
        let a = generate_corpus(&spec()).unwrap();
        let b = generate_corpus(&spec()).unwrap();
        assert_eq!(a.entries.len(), b.entries.len());
        for (x, y) in a.entries.iter().zip(&b.entries) {
            assert_eq!(x.example, y.example);
            assert_eq!(x.split, y.split);
        }
        let mut other = spec();
        other.seed = 12;
        let c = generate_corpus(&other).unwrap();
        let differs = a
            .entries
            .iter()
            .zip(&c.entries)
            .any(|(x, y)| x.example != y.example);
        assert!(differs);
    }

    #[test]
    fn every_example_fits_the_context_budget() {
        let s = spec();
        let corpus = generate_corpus(&s).unwrap();
        let tok = ByteTokenizer::new(crate::model::Vocab::byte_level()).unwrap();
        for entry in &corpus.entries {
            let (p, t) = encode_pair(&tok, &entry.example);
            assert!(p.len() + t.len() <= s.context_len);
            assert_eq!(p[0], tok.vocab().begin as Token);
            assert_eq!(*t.last().unwrap(), tok.vocab().end as Token);
        }
    }

    #[test]
    fn rejects_bad_sizing() {
        let mut s = spec();
        s.categories = 0;
        assert!(generate_corpus(&s).is_err());
        let mut s = spec();
        s.categories = 9;
        assert!(generate_corpus(&s).is_err());
        let mut s = spec();
        s.train = 0;
        assert!(generate_corpus(&s).is_err());
        let mut s = spec();
        s.context_len = 32;
        assert!(generate_corpus(&s).is_err());
    }

    #[test]
    fn corpus_round_trips_through_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        let corpus = generate_corpus(&spec()).unwrap();
        save_corpus(&corpus, &path).unwrap();
        let loaded = load_corpus(&path).unwrap();
        assert_eq!(loaded.entries.len(), corpus.entries.len());
        for (a, b) in corpus.entries.iter().zip(&loaded.entries) {
            assert_eq!(a.split, b.split);
            assert_eq!(a.example, b.example);
        }
    }

    #[test]
    fn load_rejects_malformed_lines_and_empty_fields() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(&path, "{not json}\n").unwrap();
        assert!(matches!(
            load_corpus(&path).unwrap_err(),
            Error::Format { .. }
        ));
        std::fs::write(
            &path,
            "{\"split\":\"train\",\"instruction\":\"\",\"input\":\"x\",\"response\":\"y\",\"category\":\"copy\"}\n",
        )
        .unwrap();
        assert!(matches!(
            load_corpus(&path).unwrap_err(),
            Error::Format { .. }
        ));
    }

    #[test]
    fn pretrain_docs_are_plain_text() {
        let docs = generate_pretrain_docs(5, 200);
        assert_eq!(docs.len(), 200);
        assert!(docs.iter().all(|d| !d.is_empty()));
        assert!(docs.iter().all(|d| !d.contains("[Instruction]")));
        assert!(docs.iter().all(|d| !d.contains("[Response]")));
        let again = generate_pretrain_docs(5, 200);
        assert_eq!(docs, again);
        let upper = docs.iter().any(|d| d.chars().any(|c| c.is_ascii_uppercase()));
        let digit = docs.iter().any(|d| d.chars().any(|c| c.is_ascii_digit()));
        let bracket = docs.iter().any(|d| d.contains('['));
        assert!(upper && digit && bracket);
    }
}
