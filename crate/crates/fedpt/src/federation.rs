use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::RngExt as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapter::{AdaptedModel, LoraAdapter};
use crate::data::{encode_pair, ByteTokenizer, Corpus, DevicePartition};
use crate::distill::{distill, DistillConfig};
use crate::error::{Error, Result};
use crate::model::{
    batch_grads_adapter, cosine_lr, ModelParams, Optimizer, OptimizerKind, Token,
};
use crate::proxy::ProxyEnsemble;
use crate::rng::{fnv1a, stream, Rng};

/// Federated training hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FedConfig {
    /// Total devices N.
    pub num_devices: usize,
    /// Devices selected per round K.
    pub devices_per_round: usize,
    /// Local passes over each device's shard per round E.
    pub local_epochs: usize,
    /// Federated rounds T.
    pub rounds: usize,
    pub batch_size: usize,
    /// Peak learning rate; rounds follow a cosine decay from it.
    pub base_lr: f64,
    pub seed: u64,
    /// Proxy combination strength.
    pub alpha: f64,
    /// Distillation mixing weight, forwarded into the distillation step.
    pub lambda: f64,
    /// Probability that a selected device fails before uploading; 0 by
    /// default.
    pub device_drop_prob: f64,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub adapter_rank: usize,
}

impl Default for FedConfig {
    fn default() -> Self {
        Self {
            num_devices: 10,
            devices_per_round: 10,
            local_epochs: 2,
            rounds: 20,
            batch_size: 64,
            base_lr: 1e-3,
            seed: 42,
            alpha: 1.0,
            lambda: 0.1,
            device_drop_prob: 0.0,
            optimizer: OptimizerKind::Adam,
            weight_decay: 0.0,
            adapter_rank: 4,
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_devices == 0 {
            return Err(Error::config("num_devices must be positive"));
        }
        if self.devices_per_round == 0 || self.devices_per_round > self.num_devices {
            return Err(Error::config(format!(
                "devices_per_round must lie in 1..={}, got {}",
                self.num_devices, self.devices_per_round
            )));
        }
        if self.local_epochs == 0 {
            return Err(Error::config("local_epochs must be at least 1"));
        }
        if self.rounds == 0 {
            return Err(Error::config("rounds must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !self.base_lr.is_finite() || self.base_lr < 0.0 {
            return Err(Error::config("base_lr must be finite and nonnegative"));
        }
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(Error::config("alpha must be finite and nonnegative"));
        }
        if !(0.0..=1.0).contains(&self.lambda) || !self.lambda.is_finite() {
            return Err(Error::config("lambda must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.device_drop_prob) {
            return Err(Error::config("device_drop_prob must lie in [0, 1)"));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(Error::config("weight_decay must be finite and nonnegative"));
        }
        if self.adapter_rank == 0 {
            return Err(Error::config("adapter_rank must be positive"));
        }
        Ok(())
    }
}

/// Which system an experiment trains and evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Full loop: federated LoRA tuning, proxy combination, distillation.
    Fedpt,
    /// Federated LoRA tuning of the small model only.
    FedavgSmall,
    /// Federated tuning plus proxy combination, no distillation.
    FedavgPlusPt,
    /// The frozen large model, no training at all.
    Base,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Fedpt, Mode::FedavgSmall, Mode::FedavgPlusPt, Mode::Base];

    pub fn label(self) -> &'static str {
        match self {
            Mode::Fedpt => "fedpt",
            Mode::FedavgSmall => "fedavg-small",
            Mode::FedavgPlusPt => "fedavg-plus-pt",
            Mode::Base => "base",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fedpt" => Ok(Mode::Fedpt),
            "fedavg-small" => Ok(Mode::FedavgSmall),
            "fedavg-plus-pt" => Ok(Mode::FedavgPlusPt),
            "base" => Ok(Mode::Base),
            other => Err(Error::input(format!(
                "unknown mode {other:?}; expected fedpt, fedavg-small, fedavg-plus-pt, or base"
            ))),
        }
    }

    /// Whether the server builds the proxy combination for this mode.
    pub fn uses_proxy(self) -> bool {
        matches!(self, Mode::Fedpt | Mode::FedavgPlusPt)
    }

    /// Whether the server distills after aggregation.
    pub fn uses_distillation(self) -> bool {
        matches!(self, Mode::Fedpt)
    }
}

/// One simulated device: an id and its local training pairs.
#[derive(Debug, Clone)]
pub struct DeviceState {
    pub id: usize,
    pub examples: Vec<(Vec<Token>, Vec<Token>)>,
}

impl DeviceState {
    pub fn sample_count(&self) -> usize {
        self.examples.len()
    }
}

/// Encodes each partition shard into ready-to-train (prompt, target) pairs,
/// one device per shard, ids in shard order.
pub fn devices_from_partition(
    corpus: &Corpus,
    partition: &DevicePartition,
    tokenizer: &ByteTokenizer,
) -> Result<Vec<DeviceState>> {
    partition
        .assignments
        .iter()
        .enumerate()
        .map(|(id, shard)| {
            let examples = shard
                .iter()
                .map(|&i| encode_pair(tokenizer, &corpus.entries[i].example))
                .collect();
            Ok(DeviceState { id, examples })
        })
        .collect()
}

/// What one round reports: who participated, how training went, and what
/// moved over the simulated network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub selected: Vec<usize>,
    /// Selected devices that failed before uploading.
    pub dropped: Vec<usize>,
    /// (device id, mean training loss over its final local epoch).
    pub local_losses: Vec<(usize, f64)>,
    /// Checksum of the aggregated adapter's wire bytes.
    pub adapter_checksum: u64,
    pub bytes_down: u64,
    pub bytes_up: u64,
    /// Distillation batch loss at each optimizer step; empty when
    /// distillation is disabled.
    pub kd_losses: Vec<f64>,
}

/// Uniform sample of `k` distinct device ids out of `0..n`, ascending.
pub fn select_devices(rng: &mut Rng, n: usize, k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > n {
        return Err(Error::input(format!(
            "cannot select {k} devices out of {n}"
        )));
    }
    let mut ids: Vec<usize> = rand::seq::index::sample(rng, n, k).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// Local adapter training on one device: per epoch, shuffle the shard once,
/// then take optimizer steps over successive mini-batches. Returns the
/// trained adapter and the mean batch loss over the final epoch. A fresh
/// optimizer is used per call; only the adapter changes.
pub fn local_update(
    base: &ModelParams,
    adapter_in: &LoraAdapter,
    device: &DeviceState,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    optimizer_kind: OptimizerKind,
    weight_decay: f64,
    rng: &mut Rng,
) -> Result<(LoraAdapter, f64)> {
    if epochs == 0 {
        return Err(Error::input("local_epochs must be at least 1"));
    }
    if batch_size == 0 {
        return Err(Error::input("batch_size must be positive"));
    }
    if device.examples.is_empty() {
        return Err(Error::input(format!(
            "device {} has an empty partition",
            device.id
        )));
    }
    adapter_in.check_compatible(base)?;

    let mut adapter = adapter_in.clone();
    let mut optimizer = Optimizer::new(optimizer_kind, adapter.param_count(), weight_decay);
    let mut last_epoch_loss = 0.0;
    for _ in 0..epochs {
        let mut order: Vec<usize> = (0..device.examples.len()).collect();
        order.shuffle(rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(batch_size) {
            let batch: Vec<(Vec<Token>, Vec<Token>)> =
                chunk.iter().map(|&i| device.examples[i].clone()).collect();
            let (loss, grads) = batch_grads_adapter(base, &adapter, &batch)?;
            let mut flat = adapter.to_flat();
            optimizer.step(&mut flat, &grads.to_flat(), lr)?;
            adapter.assign_flat(&flat)?;
            loss_sum += loss;
            batches += 1;
        }
        last_epoch_loss = loss_sum / batches as f64;
    }
    Ok((adapter, last_epoch_loss))
}

/// Weighted mean of adapters: B factors and A factors are each averaged
/// entrywise with weights normalized to sum one. The output is bitwise
/// independent of input order, and a single adapter passes through
/// unchanged regardless of its weight.
pub fn aggregate(adapters: &[LoraAdapter], weights: &[f64]) -> Result<LoraAdapter> {
    if adapters.is_empty() {
        return Err(Error::input("nothing to aggregate"));
    }
    if adapters.len() != weights.len() {
        return Err(Error::input(format!(
            "{} adapters but {} weights",
            adapters.len(),
            weights.len()
        )));
    }
    let first = &adapters[0];
    for a in &adapters[1..] {
        if a.rank != first.rank || a.width != first.width || a.targets != first.targets {
            return Err(Error::contract(
                "aggregation requires congruent adapter shapes",
            ));
        }
    }
    for &w in weights {
        if !w.is_finite() || w < 0.0 {
            return Err(Error::input(format!(
                "aggregation weights must be finite and nonnegative, got {w}"
            )));
        }
    }
    // Partial sums depend on addition order, so every reduction here runs
    // over values sorted ascending. That makes the result a function of the
    // multiset of (adapter, weight) pairs alone: permuting the inputs cannot
    // change any bit of the output.
    let mut sorted = weights.to_vec();
    sorted.sort_by(f64::total_cmp);
    let sum: f64 = sorted.iter().sum();
    if sum <= 0.0 {
        return Err(Error::input("aggregation weights sum to zero"));
    }
    let unit: Vec<f64> = weights.iter().map(|w| w / sum).collect();
    let flats: Vec<Vec<f64>> = adapters.iter().map(LoraAdapter::to_flat).collect();
    let mut out_flat = vec![0.0; flats[0].len()];
    let mut contrib = vec![0.0; adapters.len()];
    for (j, slot) in out_flat.iter_mut().enumerate() {
        for (share, (flat, &u)) in contrib.iter_mut().zip(flats.iter().zip(&unit)) {
            *share = flat[j] * u;
        }
        contrib.sort_by(f64::total_cmp);
        *slot = contrib
            .iter()
            .copied()
            .reduce(|x, y| x + y)
            .expect("adapter list is non-empty");
    }
    let mut out = first.zeros_like();
    out.assign_flat(&out_flat)?;
    Ok(out)
}

/// Everything a federated run carries between rounds.
pub struct FederationState {
    pub fed: FedConfig,
    pub distill: DistillConfig,
    pub mode: Mode,
    pub small_base: Arc<ModelParams>,
    /// Absent in the small-only mode, which never touches the large model.
    pub large_base: Option<Arc<ModelParams>>,
    pub devices: Vec<DeviceState>,
    pub public: Vec<(Vec<Token>, Vec<Token>)>,
    /// The current global adapter θ at round t; starts as the seeded fresh
    /// adapter, which leaves the small base functionally unchanged.
    pub adapter: LoraAdapter,
}

impl FederationState {
    pub fn new(
        fed: FedConfig,
        mut distill: DistillConfig,
        mode: Mode,
        small_base: Arc<ModelParams>,
        large_base: Option<Arc<ModelParams>>,
        devices: Vec<DeviceState>,
        public: Vec<(Vec<Token>, Vec<Token>)>,
    ) -> Result<Self> {
        fed.validate()?;
        distill.lambda = fed.lambda;
        distill.validate()?;
        if mode.uses_proxy() && large_base.is_none() {
            return Err(Error::config(format!(
                "mode {} needs a large model",
                mode.label()
            )));
        }
        if devices.len() != fed.num_devices {
            return Err(Error::config(format!(
                "config names {} devices but {} shards were provided",
                fed.num_devices,
                devices.len()
            )));
        }
        for (i, d) in devices.iter().enumerate() {
            if d.id != i {
                return Err(Error::config("device ids must be 0..N in order"));
            }
        }
        let adapter = LoraAdapter::init(
            &small_base,
            fed.adapter_rank,
            &mut stream(fed.seed, "adapter-init", &[]),
        )?;
        Ok(Self {
            fed,
            distill,
            mode,
            small_base,
            large_base,
            devices,
            public,
            adapter,
        })
    }

    /// The small model carrying the current adapter.
    pub fn tuned_small(&self) -> Result<AdaptedModel> {
        AdaptedModel::new(self.small_base.clone(), self.adapter.clone())
    }

    /// The proxy combination for the current adapter.
    pub fn proxy(&self) -> Result<ProxyEnsemble> {
        let large = self
            .large_base
            .clone()
            .ok_or_else(|| Error::contract("no large model is loaded"))?;
        ProxyEnsemble::new(
            large,
            self.small_base.clone(),
            self.tuned_small()?,
            self.fed.alpha,
        )
    }
}

/// One federated round: select devices, simulate failures, broadcast the
/// adapter, train locally in parallel, aggregate uploads by shard size, and
/// (in the full mode) distill the proxy teacher back into the aggregate.
pub fn run_round(state: &mut FederationState, t: usize) -> Result<RoundRecord> {
    if state.mode == Mode::Base {
        return Err(Error::input("the frozen-base mode has no training rounds"));
    }
    let fed = &state.fed;
    if t >= fed.rounds {
        return Err(Error::input(format!(
            "round {t} outside configured horizon {}",
            fed.rounds
        )));
    }
    let lr = cosine_lr(t, fed.rounds, fed.base_lr)?;

    let selected = select_devices(
        &mut stream(fed.seed, "select", &[t as u64]),
        fed.num_devices,
        fed.devices_per_round,
    )?;

    let mut dropped = Vec::new();
    let mut active = Vec::new();
    if fed.device_drop_prob > 0.0 {
        let mut drop_rng = stream(fed.seed, "drop", &[t as u64]);
        for &id in &selected {
            if drop_rng.random::<f64>() < fed.device_drop_prob {
                dropped.push(id);
            } else {
                active.push(id);
            }
        }
    } else {
        active.clone_from(&selected);
    }

    let payload = state.adapter.to_wire().len() as u64;
    let bytes_down = payload * selected.len() as u64;
    let bytes_up = payload * active.len() as u64;

    let results: Vec<Result<(usize, LoraAdapter, f64)>> = active
        .par_iter()
        .map(|&id| {
            let device = &state.devices[id];
            if device.examples.is_empty() {
                return Ok((id, state.adapter.clone(), f64::NAN));
            }
            let mut rng = stream(fed.seed, "local", &[t as u64, id as u64]);
            let (adapter, loss) = local_update(
                &state.small_base,
                &state.adapter,
                device,
                fed.local_epochs,
                fed.batch_size,
                lr,
                fed.optimizer,
                fed.weight_decay,
                &mut rng,
            )?;
            Ok((id, adapter, loss))
        })
        .collect();

    let mut local_losses = Vec::new();
    let mut adapters = Vec::new();
    let mut weights = Vec::new();
    for r in results {
        let (id, adapter, loss) = r?;
        let count = state.devices[id].sample_count();
        if count == 0 {
            continue;
        }
        local_losses.push((id, loss));
        adapters.push(adapter);
        weights.push(count as f64);
    }

    if !adapters.is_empty() {
        state.adapter = aggregate(&adapters, &weights)?;
    }

    let mut kd_losses = Vec::new();
    if state.mode.uses_distillation() {
        let student = state.tuned_small()?;
        let teacher = state.proxy()?;
        let mut kd_rng = stream(fed.seed, "kd", &[t as u64]);
        let outcome = distill(&student, &teacher, &state.public, &state.distill, &mut kd_rng)?;
        state.adapter = outcome.adapter;
        kd_losses = outcome.losses;
    }

    Ok(RoundRecord {
        round: t,
        selected,
        dropped,
        local_losses,
        adapter_checksum: fnv1a(&state.adapter.to_wire()),
        bytes_down,
        bytes_up,
        kd_losses,
    })
}

/// Runs every configured round in order. The frozen-base mode trains
/// nothing and returns no records.
pub fn run_rounds(state: &mut FederationState) -> Result<Vec<RoundRecord>> {
    if state.mode == Mode::Base {
        return Ok(Vec::new());
    }
    (0..state.fed.rounds).map(|t| run_round(state, t)).collect()
}
