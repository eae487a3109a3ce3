use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::adapter::{AdaptedModel, LoraAdapter};
use crate::data::{
    encode_pair, generate_corpus, generate_pretrain_docs, load_corpus, partition_dirichlet,
    partition_pathological, save_corpus, wrap_prompt, ByteTokenizer, Corpus, CorpusSpec,
    DevicePartition, Example, Split, CATEGORY_LABELS,
};
use crate::distill::DistillConfig;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport, GenSettings};
use crate::federation::{
    devices_from_partition, run_round, FedConfig, FederationState, Mode, RoundRecord,
};
use crate::model::{
    batch_grads_full, batch_nll, greedy_decode, load_model, save_model, LogitSource, ModelConfig,
    ModelParams, Optimizer, OptimizerKind, Token, Vocab,
};
use crate::proxy::ProxyEnsemble;
use crate::rng::{stream, Rng};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

fn to_json<T: Serialize>(value: &T, pretty: bool) -> Result<String> {
    let out = if pretty {
        serde_json::to_string_pretty(value)
    } else {
        serde_json::to_string(value)
    };
    out.map_err(|e| Error::contract(format!("serialization failed: {e}")))
}

/// How training examples are spread across devices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PartitionStrategy {
    /// Each device holds exactly two categories.
    Pathological,
    /// Category proportions drawn from a Dirichlet distribution.
    Dirichlet,
}

/// Synthetic corpus and partition settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub seed: u64,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub public: usize,
    pub categories: usize,
    pub context_len: usize,
    pub partition: PartitionStrategy,
    /// Dirichlet concentration; ignored by the pathological strategy.
    pub concentration: f64,
    pub partition_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            train: 2000,
            val: 100,
            test: 48,
            public: 128,
            categories: 6,
            context_len: 256,
            partition: PartitionStrategy::Pathological,
            concentration: 0.5,
            partition_seed: 13,
        }
    }
}

impl DataConfig {
    pub fn corpus_spec(&self) -> CorpusSpec {
        CorpusSpec {
            seed: self.seed,
            train: self.train,
            val: self.val,
            test: self.test,
            public: self.public,
            categories: self.categories,
            context_len: self.context_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("data.train", self.train),
            ("data.val", self.val),
            ("data.test", self.test),
            ("data.public", self.public),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.categories < 2 || self.categories > CATEGORY_LABELS.len() {
            return Err(Error::config(format!(
                "data.categories must lie in 2..={}, got {}",
                CATEGORY_LABELS.len(),
                self.categories
            )));
        }
        if self.context_len < 96 {
            return Err(Error::config(
                "data.context_len must be at least 96 to fit the prompt template",
            ));
        }
        if !self.concentration.is_finite() || self.concentration <= 0.0 {
            return Err(Error::config("data.concentration must be finite and positive"));
        }
        Ok(())
    }

    pub fn partition(&self, corpus: &Corpus, num_devices: usize) -> Result<DevicePartition> {
        match self.partition {
            PartitionStrategy::Pathological => {
                partition_pathological(corpus, num_devices, self.partition_seed)
            }
            PartitionStrategy::Dirichlet => {
                partition_dirichlet(corpus, num_devices, self.concentration, self.partition_seed)
            }
        }
    }
}

/// Transformer shape; the context length comes from the data section.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetShape {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
}

impl NetShape {
    pub fn model_config(&self, context_len: usize) -> ModelConfig {
        ModelConfig {
            layers: self.layers,
            width: self.width,
            heads: self.heads,
            context_len,
            vocab: Vocab::byte_level(),
        }
    }

    fn validate(&self, section: &str) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::config(format!("{section}.layers must be positive")));
        }
        if self.width == 0 {
            return Err(Error::config(format!("{section}.width must be positive")));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::config(format!(
                "{section}.heads must be positive and divide {section}.width"
            )));
        }
        Ok(())
    }
}

/// Base-model training settings: both models train from scratch on generated
/// general text until they have seen `token_budget` target tokens.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub seed: u64,
    pub docs: usize,
    pub holdout_docs: usize,
    pub token_budget: u64,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            seed: 100,
            docs: 768,
            holdout_docs: 64,
            token_budget: 60_000,
            batch_size: 16,
            lr: 1e-3,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.token_budget == 0 {
            return Err(Error::input("pretrain.token_budget must be positive"));
        }
        if self.docs == 0 || self.holdout_docs == 0 {
            return Err(Error::config(
                "pretrain.docs and pretrain.holdout_docs must be positive",
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::config("pretrain.batch_size must be positive"));
        }
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(Error::config("pretrain.lr must be finite and positive"));
        }
        Ok(())
    }
}

/// Scoring settings used by evaluation commands.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub seeds: Vec<u64>,
    pub max_gen_len: usize,
    /// Set both to sample instead of decoding greedily.
    pub temperature: Option<f64>,
    pub top_p: Option<f64>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            max_gen_len: 48,
            temperature: None,
            top_p: None,
        }
    }
}

impl EvalSettings {
    pub fn gen_settings(&self) -> GenSettings {
        GenSettings {
            max_len: self.max_gen_len,
            sampling: self.temperature.zip(self.top_p),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("evaluation.seeds must not be empty"));
        }
        if self.max_gen_len == 0 {
            return Err(Error::config("evaluation.max_gen_len must be positive"));
        }
        if self.temperature.is_some() != self.top_p.is_some() {
            return Err(Error::config(
                "evaluation.temperature and evaluation.top_p must be set together",
            ));
        }
        Ok(())
    }
}

/// Which rounds snapshot the global adapter.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckpointConfig {
    /// One-indexed rounds after which the global adapter is checkpointed.
    /// Entries beyond the horizon are ignored.
    pub rounds: Vec<usize>,
}

impl Default for CheckpointConfig {
    fn default() -> Self {
        Self {
            rounds: vec![1, 5, 10, 15, 20],
        }
    }
}

/// Full experiment description, loadable from a TOML file. Unknown keys are
/// rejected; every section falls back to documented defaults when omitted.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub small_model: NetShape,
    pub large_model: NetShape,
    pub pretrain: PretrainConfig,
    pub federation: FedConfig,
    /// Distillation settings; its mixing weight is taken from
    /// `federation.lambda`, which is authoritative.
    pub distillation: DistillConfig,
    pub evaluation: EvalSettings,
    pub checkpoints: CheckpointConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            small_model: NetShape {
                layers: 2,
                width: 128,
                heads: 4,
            },
            large_model: NetShape {
                layers: 4,
                width: 256,
                heads: 8,
            },
            pretrain: PretrainConfig::default(),
            federation: FedConfig::default(),
            distillation: DistillConfig::default(),
            evaluation: EvalSettings::default(),
            checkpoints: CheckpointConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: ExperimentConfig =
            toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.small_model.validate("small_model")?;
        self.large_model.validate("large_model")?;
        self.pretrain.validate()?;
        self.federation.validate()?;
        self.distillation.validate()?;
        self.evaluation.validate()?;
        if self.checkpoints.rounds.iter().any(|&r| r == 0) {
            return Err(Error::config("checkpoints.rounds entries are one-indexed"));
        }
        Ok(())
    }

    /// Checkpoint rounds within the configured horizon, sorted and deduplicated.
    pub fn effective_checkpoint_rounds(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self
            .checkpoints
            .rounds
            .iter()
            .copied()
            .filter(|&r| r >= 1 && r <= self.federation.rounds)
            .collect();
        set.into_iter().collect()
    }
}

/// File names of the two pretrained checkpoints inside an output directory.
pub const SMALL_BASE_FILE: &str = "small-base.ckpt";
pub const LARGE_BASE_FILE: &str = "large-base.ckpt";
const CORPUS_FILE: &str = "corpus.jsonl";

/// What pretraining produced, with held-out quality for both bases.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainReport {
    pub small_tokens_trained: u64,
    pub large_tokens_trained: u64,
    pub small_final_train_loss: f64,
    pub large_final_train_loss: f64,
    pub small_holdout_nll: f64,
    pub large_holdout_nll: f64,
    pub small_path: String,
    pub large_path: String,
}

fn encode_docs(tokenizer: &ByteTokenizer, docs: &[String], context_len: usize) -> Vec<(Vec<Token>, Vec<Token>)> {
    let vocab = tokenizer.vocab();
    docs.iter()
        .map(|d| {
            let mut target = tokenizer.tokenize(d);
            target.truncate(context_len.saturating_sub(2));
            target.push(vocab.end as Token);
            (vec![vocab.begin as Token], target)
        })
        .collect()
}

fn pretrain_one(
    config: ModelConfig,
    pairs: &[(Vec<Token>, Vec<Token>)],
    settings: &PretrainConfig,
    init_rng: &mut Rng,
    order_rng: &mut Rng,
) -> Result<(ModelParams, u64, f64)> {
    if pairs.is_empty() {
        return Err(Error::input("no pretraining documents"));
    }
    let mut params = ModelParams::init(config, init_rng)?;
    let mut optimizer = Optimizer::new(OptimizerKind::Adam, params.param_count(), 0.0);
    let mut tokens_trained = 0u64;
    let last_loss;
    'outer: loop {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(order_rng);
        for chunk in order.chunks(settings.batch_size) {
            let batch: Vec<(Vec<Token>, Vec<Token>)> =
                chunk.iter().map(|&i| pairs[i].clone()).collect();
            let (loss, grads) = batch_grads_full(&params, &batch)?;
            let mut flat = params.to_flat();
            optimizer.step(&mut flat, &grads.to_flat(), settings.lr)?;
            params.assign_flat(&flat)?;
            tokens_trained += batch.iter().map(|(_, t)| t.len() as u64).sum::<u64>();
            if tokens_trained >= settings.token_budget {
                last_loss = loss;
                break 'outer;
            }
        }
    }
    Ok((params, tokens_trained, last_loss))
}

/// Trains both base models from scratch on generated general text until the
/// token budget, checks that the large base generalizes strictly better on a
/// held-out slice, and writes both checkpoints into `out_dir`.
pub fn cmd_pretrain(config: &ExperimentConfig, out_dir: &Path) -> Result<PretrainReport> {
    config.validate()?;
    let pt = &config.pretrain;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let tokenizer = ByteTokenizer::new(Vocab::byte_level())?;
    let docs = generate_pretrain_docs(pt.seed, pt.docs + pt.holdout_docs);
    let pairs = encode_docs(&tokenizer, &docs, config.data.context_len);
    let (train_pairs, holdout_pairs) = pairs.split_at(pt.docs);

    let (small, small_tokens, small_loss) = pretrain_one(
        config.small_model.model_config(config.data.context_len),
        train_pairs,
        pt,
        &mut stream(pt.seed, "pretrain-init", &[0]),
        &mut stream(pt.seed, "pretrain-order", &[0]),
    )?;
    let (large, large_tokens, large_loss) = pretrain_one(
        config.large_model.model_config(config.data.context_len),
        train_pairs,
        pt,
        &mut stream(pt.seed, "pretrain-init", &[1]),
        &mut stream(pt.seed, "pretrain-order", &[1]),
    )?;

    let small_holdout = batch_nll(&small, None, holdout_pairs)?;
    let large_holdout = batch_nll(&large, None, holdout_pairs)?;
    if large_holdout >= small_holdout {
        return Err(Error::contract(format!(
            "large base held-out NLL {large_holdout:.4} is not below the small base's \
             {small_holdout:.4}; raise pretrain.token_budget or shrink the small model"
        )));
    }

    let small_path = out_dir.join(SMALL_BASE_FILE);
    let large_path = out_dir.join(LARGE_BASE_FILE);
    save_model(&small, pt.seed, &small_path)?;
    save_model(&large, pt.seed, &large_path)?;

    let report = PretrainReport {
        small_tokens_trained: small_tokens,
        large_tokens_trained: large_tokens,
        small_final_train_loss: small_loss,
        large_final_train_loss: large_loss,
        small_holdout_nll: small_holdout,
        large_holdout_nll: large_holdout,
        small_path: SMALL_BASE_FILE.to_string(),
        large_path: LARGE_BASE_FILE.to_string(),
    };
    let report_path = out_dir.join("pretrain-report.json");
    let json = to_json(&report, true)?;
    fs::write(&report_path, json).map_err(|e| Error::io(&report_path, e))?;
    Ok(report)
}

/// A finished run's description: everything needed to re-execute it
/// bit-identically and to locate its artifacts. File names are relative to
/// the manifest's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub code_version: String,
    pub mode: Mode,
    pub config: ExperimentConfig,
    pub corpus: String,
    pub small_base: Option<String>,
    pub large_base: Option<String>,
    /// Adapter checkpoints keyed by one-indexed round.
    pub adapters: BTreeMap<usize, String>,
    pub metrics: String,
}

impl RunManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = to_json(self, true)?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    /// Loads a manifest and returns it with its directory, against which
    /// every stored file name resolves.
    pub fn load(path: &Path) -> Result<(Self, PathBuf)> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: RunManifest =
            serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        if manifest.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::format(
                path,
                format!(
                    "manifest schema version {} is not supported (expected {})",
                    manifest.schema_version, MANIFEST_SCHEMA_VERSION
                ),
            ));
        }
        let root = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        Ok((manifest, root))
    }
}

fn require_checkpoint(path: &Path) -> Result<()> {
    if !path.is_file() {
        return Err(Error::config(format!(
            "missing checkpoint {}; run pretrain first",
            path.display()
        )));
    }
    Ok(())
}

fn load_base(path: &Path, want: ModelConfig) -> Result<Arc<ModelParams>> {
    let (params, _) = load_model(path)?;
    if params.config != want {
        return Err(Error::config(format!(
            "checkpoint {} has shape {:?}, but the config asks for {:?}",
            path.display(),
            params.config,
            want
        )));
    }
    Ok(Arc::new(params))
}

fn public_pairs(corpus: &Corpus, tokenizer: &ByteTokenizer) -> Vec<(Vec<Token>, Vec<Token>)> {
    corpus
        .examples_of(Split::Public)
        .into_iter()
        .map(|e| encode_pair(tokenizer, e))
        .collect()
}

/// Builds the starting federation state for a run from already-loaded
/// artifacts. Shared by the run and rerun paths so both execute identically.
fn build_state(
    config: &ExperimentConfig,
    mode: Mode,
    corpus: &Corpus,
    small: Arc<ModelParams>,
    large: Option<Arc<ModelParams>>,
) -> Result<FederationState> {
    let tokenizer = ByteTokenizer::new(Vocab::byte_level())?;
    let partition = config.data.partition(corpus, config.federation.num_devices)?;
    let devices = devices_from_partition(corpus, &partition, &tokenizer)?;
    let public = public_pairs(corpus, &tokenizer);
    FederationState::new(
        config.federation.clone(),
        config.distillation.clone(),
        mode,
        small,
        large,
        devices,
        public,
    )
}

fn mode_file(prefix: &str, mode: Mode, suffix: &str) -> String {
    format!("{prefix}-{}{suffix}", mode.label())
}

/// Executes a full federated experiment: generates and saves the corpus,
/// loads the pretrained bases this mode needs, runs every round while
/// streaming one JSON record per line into the metrics log, checkpoints the
/// global adapter at the configured rounds, and writes the manifest.
pub fn cmd_run(config: &ExperimentConfig, mode: Mode, out_dir: &Path) -> Result<RunManifest> {
    config.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let needs_small = mode != Mode::Base;
    let needs_large = mode != Mode::FedavgSmall;
    let small_path = out_dir.join(SMALL_BASE_FILE);
    let large_path = out_dir.join(LARGE_BASE_FILE);
    if needs_small {
        require_checkpoint(&small_path)?;
    }
    if needs_large {
        require_checkpoint(&large_path)?;
    }

    let corpus = generate_corpus(&config.data.corpus_spec())?;
    let corpus_file = CORPUS_FILE.to_string();
    save_corpus(&corpus, &out_dir.join(&corpus_file))?;

    let metrics_file = mode_file("metrics", mode, ".jsonl");
    let metrics_path = out_dir.join(&metrics_file);
    let mut manifest = RunManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        mode,
        config: config.clone(),
        corpus: corpus_file,
        small_base: needs_small.then(|| SMALL_BASE_FILE.to_string()),
        large_base: needs_large.then(|| LARGE_BASE_FILE.to_string()),
        adapters: BTreeMap::new(),
        metrics: metrics_file,
    };

    let file = File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let mut log = BufWriter::new(file);

    if mode != Mode::Base {
        let small = load_base(
            &small_path,
            config.small_model.model_config(config.data.context_len),
        )?;
        let large = if needs_large {
            Some(load_base(
                &large_path,
                config.large_model.model_config(config.data.context_len),
            )?)
        } else {
            None
        };
        let mut state = build_state(config, mode, &corpus, small, large)?;
        let snapshot_rounds: BTreeSet<usize> =
            config.effective_checkpoint_rounds().into_iter().collect();
        for t in 0..config.federation.rounds {
            let record = run_round(&mut state, t)?;
            let line = to_json(&record, false)?;
            writeln!(log, "{line}").map_err(|e| Error::io(&metrics_path, e))?;
            let round_no = t + 1;
            if snapshot_rounds.contains(&round_no) {
                let name = mode_file(&format!("adapter-round{round_no:02}"), mode, ".bin");
                let path = out_dir.join(&name);
                fs::write(&path, state.adapter.to_wire()).map_err(|e| Error::io(&path, e))?;
                manifest.adapters.insert(round_no, name);
            }
        }
    }
    log.flush().map_err(|e| Error::io(&metrics_path, e))?;

    let manifest_path = out_dir.join(mode_file("manifest", mode, ".json"));
    manifest.save(&manifest_path)?;
    Ok(manifest)
}

/// Outcome of replaying a run from its manifest.
#[derive(Debug)]
pub struct RerunOutcome {
    pub identical: bool,
    pub original: Vec<RoundRecord>,
    pub replay: Vec<RoundRecord>,
}

fn read_metrics(path: &Path) -> Result<Vec<RoundRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::format(path, e.to_string())))
        .collect()
}

/// Re-executes a finished run from its manifest, writing nothing, and
/// compares the fresh round records with the stored metrics log.
pub fn rerun_manifest(manifest_path: &Path) -> Result<RerunOutcome> {
    let (manifest, root) = RunManifest::load(manifest_path)?;
    let config = &manifest.config;
    config.validate()?;
    let original = read_metrics(&root.join(&manifest.metrics))?;

    let replay = if manifest.mode == Mode::Base {
        Vec::new()
    } else {
        let corpus = load_corpus(&root.join(&manifest.corpus))?;
        let small_name = manifest
            .small_base
            .as_ref()
            .ok_or_else(|| Error::format(manifest_path, "manifest lists no small base"))?;
        let small = load_base(
            &root.join(small_name),
            config.small_model.model_config(config.data.context_len),
        )?;
        let large = match &manifest.large_base {
            Some(name) => Some(load_base(
                &root.join(name),
                config.large_model.model_config(config.data.context_len),
            )?),
            None => None,
        };
        let mut state = build_state(config, manifest.mode, &corpus, small, large)?;
        (0..config.federation.rounds)
            .map(|t| run_round(&mut state, t))
            .collect::<Result<Vec<_>>>()?
    };

    Ok(RerunOutcome {
        identical: original == replay,
        original,
        replay,
    })
}

/// Which trained or frozen system an evaluation scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SystemKind {
    /// The frozen large base alone.
    Base,
    /// The small base carrying the round's adapter.
    SmallTuned,
    /// The proxy combination of all three models.
    Proxy,
}

impl SystemKind {
    pub fn label(self) -> &'static str {
        match self {
            SystemKind::Base => "base",
            SystemKind::SmallTuned => "small-tuned",
            SystemKind::Proxy => "proxy",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(SystemKind::Base),
            "small-tuned" => Ok(SystemKind::SmallTuned),
            "proxy" => Ok(SystemKind::Proxy),
            other => Err(Error::input(format!(
                "unknown system {other:?}; expected base, small-tuned, or proxy"
            ))),
        }
    }
}

/// One scored (system, α, round, dataset) combination.
#[derive(Debug, Clone, Serialize)]
pub struct EvalRecord {
    pub system: String,
    pub alpha: Option<f64>,
    pub round: Option<usize>,
    pub dataset: String,
    pub report: EvalReport,
}

fn split_label(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
        Split::Public => "public",
    }
}

pub fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        "public" => Ok(Split::Public),
        other => Err(Error::input(format!(
            "unknown dataset {other:?}; expected train, val, test, or public"
        ))),
    }
}

/// Artifacts loaded from a manifest for scoring or decoding.
struct LoadedRun {
    root: PathBuf,
    manifest: RunManifest,
    corpus: Corpus,
    small: Option<Arc<ModelParams>>,
    large: Option<Arc<ModelParams>>,
}

fn load_run(manifest_path: &Path) -> Result<LoadedRun> {
    let (manifest, root) = RunManifest::load(manifest_path)?;
    manifest.config.validate()?;
    let config = &manifest.config;
    let corpus = load_corpus(&root.join(&manifest.corpus))?;
    let small = match &manifest.small_base {
        Some(name) => Some(load_base(
            &root.join(name),
            config.small_model.model_config(config.data.context_len),
        )?),
        None => None,
    };
    let large = match &manifest.large_base {
        Some(name) => Some(load_base(
            &root.join(name),
            config.large_model.model_config(config.data.context_len),
        )?),
        None => None,
    };
    Ok(LoadedRun {
        root,
        manifest,
        corpus,
        small,
        large,
    })
}

fn load_adapter(run: &LoadedRun, round: Option<usize>) -> Result<(usize, LoraAdapter)> {
    let round = match round {
        Some(r) => r,
        None => *run
            .manifest
            .adapters
            .keys()
            .next_back()
            .ok_or_else(|| Error::input("this run checkpointed no adapters"))?,
    };
    let name = run.manifest.adapters.get(&round).ok_or_else(|| {
        Error::input(format!(
            "unknown round {round}; checkpointed rounds are {:?}",
            run.manifest.adapters.keys().collect::<Vec<_>>()
        ))
    })?;
    let path = run.root.join(name);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok((round, LoraAdapter::from_wire(&bytes)?))
}

fn default_systems(mode: Mode) -> Vec<SystemKind> {
    match mode {
        Mode::Fedpt | Mode::FedavgPlusPt => vec![SystemKind::Proxy],
        Mode::FedavgSmall => vec![SystemKind::SmallTuned],
        Mode::Base => vec![SystemKind::Base],
    }
}

/// Scores a finished run on one corpus split. The proxy system produces one
/// report per α in the sweep; the other systems ignore α. With no explicit
/// systems the manifest's mode picks its natural one.
pub fn cmd_eval(
    manifest_path: &Path,
    round: Option<usize>,
    dataset: Split,
    alpha_sweep: &[f64],
    systems: &[SystemKind],
) -> Result<Vec<EvalRecord>> {
    let run = load_run(manifest_path)?;
    let config = &run.manifest.config;
    let examples: Vec<Example> = run
        .corpus
        .examples_of(dataset)
        .into_iter()
        .cloned()
        .collect();
    if examples.is_empty() {
        return Err(Error::input(format!(
            "the {} split is empty",
            split_label(dataset)
        )));
    }
    let systems = if systems.is_empty() {
        default_systems(run.manifest.mode)
    } else {
        systems.to_vec()
    };
    let alphas = if alpha_sweep.is_empty() {
        vec![config.federation.alpha]
    } else {
        alpha_sweep.to_vec()
    };
    let settings = config.evaluation.gen_settings();
    let seeds = &config.evaluation.seeds;

    let needs_adapter = systems
        .iter()
        .any(|s| matches!(s, SystemKind::SmallTuned | SystemKind::Proxy));
    let adapter = if needs_adapter {
        Some(load_adapter(&run, round)?)
    } else {
        None
    };

    let mut records = Vec::new();
    for system in systems {
        match system {
            SystemKind::Base => {
                let large = run.large.as_ref().ok_or_else(|| {
                    Error::input("this run has no large model to score as base")
                })?;
                let report = evaluate(large.as_ref(), &examples, seeds, &settings)?;
                records.push(EvalRecord {
                    system: system.label().to_string(),
                    alpha: None,
                    round: None,
                    dataset: split_label(dataset).to_string(),
                    report,
                });
            }
            SystemKind::SmallTuned => {
                let small = run
                    .small
                    .as_ref()
                    .ok_or_else(|| Error::input("this run has no small model"))?;
                let (round_no, adapter) = adapter.clone().expect("adapter loaded above");
                let tuned = AdaptedModel::new(small.clone(), adapter)?;
                let report = evaluate(&tuned, &examples, seeds, &settings)?;
                records.push(EvalRecord {
                    system: system.label().to_string(),
                    alpha: None,
                    round: Some(round_no),
                    dataset: split_label(dataset).to_string(),
                    report,
                });
            }
            SystemKind::Proxy => {
                let small = run
                    .small
                    .as_ref()
                    .ok_or_else(|| Error::input("this run has no small model"))?;
                let large = run
                    .large
                    .as_ref()
                    .ok_or_else(|| Error::input("this run has no large model"))?;
                let (round_no, adapter) = adapter.clone().expect("adapter loaded above");
                for &alpha in &alphas {
                    let tuned = AdaptedModel::new(small.clone(), adapter.clone())?;
                    let proxy = ProxyEnsemble::new(large.clone(), small.clone(), tuned, alpha)?;
                    let report = evaluate(&proxy, &examples, seeds, &settings)?;
                    records.push(EvalRecord {
                        system: system.label().to_string(),
                        alpha: Some(alpha),
                        round: Some(round_no),
                        dataset: split_label(dataset).to_string(),
                        report,
                    });
                }
            }
        }
    }
    Ok(records)
}

/// One generated completion, with the per-model comparison when asked for.
#[derive(Debug, Clone, Serialize)]
pub struct DecodeOutput {
    pub system: String,
    pub alpha: Option<f64>,
    pub round: Option<usize>,
    pub text: String,
    pub comparison: BTreeMap<String, String>,
}

fn decode_text(source: &dyn LogitSource, prompt_tokens: &[Token], max_len: usize) -> Result<String> {
    let tokenizer = ByteTokenizer::new(source.vocab())?;
    let out = greedy_decode(source, prompt_tokens, max_len)?;
    tokenizer.detokenize(&out)
}

/// Generates a completion from a finished run's artifacts. The prompt is
/// wrapped in the instruction template unless `raw` is set. With `compare`
/// the large-base and small-tuned outputs are produced alongside.
pub fn cmd_decode(
    manifest_path: &Path,
    prompt: &str,
    input: &str,
    raw: bool,
    alpha: Option<f64>,
    round: Option<usize>,
    compare: bool,
    max_len: usize,
) -> Result<DecodeOutput> {
    if prompt.trim().is_empty() {
        return Err(Error::input("prompt must not be empty"));
    }
    if max_len == 0 {
        return Err(Error::input("max_len must be at least 1"));
    }
    let run = load_run(manifest_path)?;
    let mode = run.manifest.mode;
    let config = &run.manifest.config;

    let text = if raw {
        prompt.to_string()
    } else {
        wrap_prompt(&Example {
            instruction: prompt.to_string(),
            input: input.to_string(),
            response: String::new(),
            category: String::new(),
        })
    };
    let tokenizer = ByteTokenizer::new(Vocab::byte_level())?;
    let mut prompt_tokens = vec![Vocab::byte_level().begin as Token];
    prompt_tokens.extend(tokenizer.tokenize(&text));
    if prompt_tokens.len() >= config.data.context_len {
        return Err(Error::input(format!(
            "prompt of {} tokens exceeds the context length {}",
            prompt_tokens.len(),
            config.data.context_len
        )));
    }

    let adapter = if mode == Mode::Base {
        None
    } else {
        Some(load_adapter(&run, round)?)
    };
    let alpha = alpha.unwrap_or(config.federation.alpha);

    let (system, round_no, text) = match mode {
        Mode::Base => {
            let large = run.large.as_ref().expect("base manifest lists the large model");
            (
                SystemKind::Base.label(),
                None,
                decode_text(large.as_ref(), &prompt_tokens, max_len)?,
            )
        }
        Mode::FedavgSmall => {
            let small = run.small.as_ref().expect("manifest lists the small model");
            let (round_no, adapter) = adapter.clone().expect("adapter loaded above");
            let tuned = AdaptedModel::new(small.clone(), adapter)?;
            (
                SystemKind::SmallTuned.label(),
                Some(round_no),
                decode_text(&tuned, &prompt_tokens, max_len)?,
            )
        }
        Mode::Fedpt | Mode::FedavgPlusPt => {
            let small = run.small.as_ref().expect("manifest lists the small model");
            let large = run.large.as_ref().expect("manifest lists the large model");
            let (round_no, adapter) = adapter.clone().expect("adapter loaded above");
            let tuned = AdaptedModel::new(small.clone(), adapter)?;
            let proxy = ProxyEnsemble::new(large.clone(), small.clone(), tuned, alpha)?;
            (
                SystemKind::Proxy.label(),
                Some(round_no),
                decode_text(&proxy, &prompt_tokens, max_len)?,
            )
        }
    };

    let mut comparison = BTreeMap::new();
    if compare {
        let large = run
            .large
            .as_ref()
            .ok_or_else(|| Error::input("comparison needs the large model in the manifest"))?;
        let small = run
            .small
            .as_ref()
            .ok_or_else(|| Error::input("comparison needs the small model in the manifest"))?;
        let (_, adapter) = adapter
            .clone()
            .ok_or_else(|| Error::input("comparison needs an adapter checkpoint"))?;
        comparison.insert(
            "large-base".to_string(),
            decode_text(large.as_ref(), &prompt_tokens, max_len)?,
        );
        let tuned = AdaptedModel::new(small.clone(), adapter)?;
        comparison.insert(
            "small-tuned".to_string(),
            decode_text(&tuned, &prompt_tokens, max_len)?,
        );
    }

    Ok(DecodeOutput {
        system: system.to_string(),
        alpha: (system == SystemKind::Proxy.label()).then_some(alpha),
        round: round_no,
        text,
        comparison,
    })
}

/// Per-device category histogram of the configured partition.
#[derive(Debug, Clone, Serialize)]
pub struct DeviceHistogram {
    pub device: usize,
    pub samples: usize,
    pub categories: BTreeMap<String, usize>,
}

/// Generates the corpus, partitions its training split as configured, and
/// reports how categories land on each device.
pub fn partition_inspect(config: &ExperimentConfig) -> Result<Vec<DeviceHistogram>> {
    config.validate()?;
    let corpus = generate_corpus(&config.data.corpus_spec())?;
    let partition = config.data.partition(&corpus, config.federation.num_devices)?;
    Ok(partition
        .histograms
        .iter()
        .enumerate()
        .map(|(device, hist)| DeviceHistogram {
            device,
            samples: hist.values().sum(),
            categories: hist.clone(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn fast_config() -> ExperimentConfig {
        ExperimentConfig {
            data: DataConfig {
                seed: 3,
                train: 24,
                val: 6,
                test: 6,
                public: 8,
                categories: 4,
                context_len: 256,
                partition: PartitionStrategy::Pathological,
                concentration: 1.0,
                partition_seed: 2,
            },
            small_model: NetShape {
                layers: 1,
                width: 16,
                heads: 2,
            },
            large_model: NetShape {
                layers: 1,
                width: 32,
                heads: 2,
            },
            pretrain: PretrainConfig {
                seed: 5,
                docs: 24,
                holdout_docs: 8,
                token_budget: 4000,
                batch_size: 8,
                lr: 3e-3,
            },
            federation: FedConfig {
                num_devices: 2,
                devices_per_round: 2,
                local_epochs: 1,
                rounds: 2,
                batch_size: 8,
                base_lr: 1e-3,
                seed: 9,
                alpha: 1.5,
                lambda: 0.1,
                ..FedConfig::default()
            },
            distillation: DistillConfig {
                kd_data_size: 4,
                kd_batch_size: 2,
                kd_iterations: 1,
                kd_lr: 1e-3,
                ..DistillConfig::default()
            },
            evaluation: EvalSettings {
                seeds: vec![0],
                max_gen_len: 8,
                temperature: None,
                top_p: None,
            },
            checkpoints: CheckpointConfig { rounds: vec![1, 2, 5] },
        }
    }

    #[test]
    fn toml_round_trip_preserves_config() {
        let config = fast_config();
        let text = toml::to_string(&config).unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(
            serde_json::to_string(&config).unwrap(),
            serde_json::to_string(&back).unwrap()
        );
    }

    #[test]
    fn toml_rejects_unknown_and_invalid_fields() {
        let err = toml::from_str::<ExperimentConfig>("[data]\nnonsense = 1\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("nonsense"), "{err}");

        let mut config = fast_config();
        config.data.categories = 1;
        let msg = config.validate().unwrap_err().to_string();
        assert!(msg.contains("data.categories"), "{msg}");

        let mut config = fast_config();
        config.small_model.heads = 3;
        let msg = config.validate().unwrap_err().to_string();
        assert!(msg.contains("small_model.heads"), "{msg}");

        let mut config = fast_config();
        config.evaluation.seeds.clear();
        let msg = config.validate().unwrap_err().to_string();
        assert!(msg.contains("evaluation.seeds"), "{msg}");
    }

    #[test]
    fn defaults_pass_validation_and_partial_toml_fills_in() {
        ExperimentConfig::default().validate().unwrap();
        let config: ExperimentConfig =
            toml::from_str("[federation]\nrounds = 3\nseed = 1\n").unwrap();
        assert_eq!(config.federation.rounds, 3);
        assert_eq!(config.data.train, DataConfig::default().train);
        assert_eq!(config.effective_checkpoint_rounds(), vec![1]);
    }

    #[test]
    fn pretrain_writes_checkpoints_and_orders_holdout_losses() {
        let dir = tempdir().unwrap();
        let config = fast_config();
        let report = cmd_pretrain(&config, dir.path()).unwrap();
        assert!(report.large_holdout_nll < report.small_holdout_nll);
        assert!(report.small_tokens_trained >= config.pretrain.token_budget);

        let (small, _) = load_model(&dir.path().join(SMALL_BASE_FILE)).unwrap();
        assert_eq!(small.config.width, 16);
        let (large, _) = load_model(&dir.path().join(LARGE_BASE_FILE)).unwrap();
        assert_eq!(large.config.width, 32);

        let report2 = cmd_pretrain(&config, dir.path()).unwrap();
        assert_eq!(report.small_holdout_nll, report2.small_holdout_nll);
        assert_eq!(report.large_holdout_nll, report2.large_holdout_nll);

        let mut bad = config;
        bad.pretrain.token_budget = 0;
        let err = cmd_pretrain(&bad, dir.path()).unwrap_err();
        assert!(matches!(err, Error::Input(_)), "{err}");
    }

    #[test]
    fn run_requires_checkpoints_and_writes_artifacts() {
        let dir = tempdir().unwrap();
        let config = fast_config();

        let err = cmd_run(&config, Mode::Fedpt, dir.path()).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");

        cmd_pretrain(&config, dir.path()).unwrap();
        let manifest = cmd_run(&config, Mode::Fedpt, dir.path()).unwrap();
        assert_eq!(manifest.mode, Mode::Fedpt);
        assert_eq!(
            manifest.adapters.keys().copied().collect::<Vec<_>>(),
            vec![1, 2]
        );
        let records = read_metrics(&dir.path().join(&manifest.metrics)).unwrap();
        assert_eq!(records.len(), 2);
        assert!(records.iter().all(|r| !r.kd_losses.is_empty()));

        let small_only = cmd_run(&config, Mode::FedavgSmall, dir.path()).unwrap();
        assert!(small_only.large_base.is_none());
        let base = cmd_run(&config, Mode::Base, dir.path()).unwrap();
        assert!(base.small_base.is_none());
        assert!(base.adapters.is_empty());
        assert!(read_metrics(&dir.path().join(&base.metrics))
            .unwrap()
            .is_empty());
    }

    #[test]
    fn rerun_from_manifest_reproduces_the_metrics_log() {
        let dir = tempdir().unwrap();
        let config = fast_config();
        cmd_pretrain(&config, dir.path()).unwrap();
        cmd_run(&config, Mode::Fedpt, dir.path()).unwrap();
        let manifest_path = dir.path().join("manifest-fedpt.json");
        let outcome = rerun_manifest(&manifest_path).unwrap();
        assert!(outcome.identical);
        assert_eq!(outcome.original.len(), 2);
    }

    #[test]
    fn eval_scores_systems_and_sweeps_alpha() {
        let dir = tempdir().unwrap();
        let config = fast_config();
        cmd_pretrain(&config, dir.path()).unwrap();
        cmd_run(&config, Mode::Fedpt, dir.path()).unwrap();
        let manifest_path = dir.path().join("manifest-fedpt.json");

        let sweep = cmd_eval(
            &manifest_path,
            Some(2),
            Split::Test,
            &[1.0, 1.5, 2.0],
            &[SystemKind::Proxy],
        )
        .unwrap();
        assert_eq!(sweep.len(), 3);
        assert_eq!(sweep[1].alpha, Some(1.5));
        let best = sweep
            .iter()
            .max_by(|a, b| a.report.rouge_mean.partial_cmp(&b.report.rouge_mean).unwrap())
            .unwrap();
        assert!(sweep.iter().all(|r| r.report.rouge_mean <= best.report.rouge_mean));

        let single = cmd_eval(&manifest_path, None, Split::Val, &[1.5], &[]).unwrap();
        assert_eq!(single.len(), 1);
        assert_eq!(single[0].system, "proxy");
        assert_eq!(single[0].round, Some(2));

        let err = cmd_eval(&manifest_path, Some(7), Split::Test, &[1.0], &[]).unwrap_err();
        assert!(matches!(err, Error::Input(_)), "{err}");
    }

    #[test]
    fn decode_is_deterministic_and_checks_the_prompt() {
        let dir = tempdir().unwrap();
        let config = fast_config();
        cmd_pretrain(&config, dir.path()).unwrap();
        cmd_run(&config, Mode::Fedpt, dir.path()).unwrap();
        let manifest_path = dir.path().join("manifest-fedpt.json");

        let a = cmd_decode(&manifest_path, "Copy the input.", "alpha", false, None, None, true, 8)
            .unwrap();
        let b = cmd_decode(&manifest_path, "Copy the input.", "alpha", false, None, None, true, 8)
            .unwrap();
        assert_eq!(a.text, b.text);
        assert_eq!(a.comparison, b.comparison);
        assert_eq!(a.system, "proxy");
        assert_eq!(a.comparison.len(), 2);

        let err =
            cmd_decode(&manifest_path, "  ", "", false, None, None, false, 8).unwrap_err();
        assert!(matches!(err, Error::Input(_)), "{err}");

        let long = "x".repeat(400);
        let err = cmd_decode(&manifest_path, &long, "", true, None, None, false, 8).unwrap_err();
        assert!(matches!(err, Error::Input(_)), "{err}");
    }

    #[test]
    fn partition_inspect_reports_two_categories_per_device() {
        let config = fast_config();
        let histograms = partition_inspect(&config).unwrap();
        assert_eq!(histograms.len(), 2);
        for h in &histograms {
            assert_eq!(h.categories.len(), 2);
            assert_eq!(h.samples, h.categories.values().sum::<usize>());
        }
    }
}
