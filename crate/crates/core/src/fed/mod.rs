//! Federated fine-tuning simulation: label-skewed partitioning, client
//! sampling, local adapter training, size-weighted aggregation, and the
//! round loop with periodic proxy re-alignment.
//!
//! Client work inside a round is embarrassingly parallel: every client reads
//! an immutable proxy snapshot and owns a private tape; its RNG stream is
//! derived from (seed, round, client id), so results are identical for any
//! worker count.

pub mod theory;

use crate::distill::{aggregate_apoz, apoz, in_fl_align, select_update_neurons, DistillConfig};
use crate::error::{Error, Result};
use crate::rng;
use crate::subfm::{plug_in_sync, PartitionTheta};
use crate::tensor::{Precision, Tape};
use crate::transformer::{
    checkpoint, ffn_hidden_activations, forward, merge_lora, AdapterSet, ForwardTrace, TrainScope,
    TransformerModel,
};
use base64::Engine;
use rand::Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

/// Pipeline variants: the full method, its ablations, the layer-drop
/// baseline, and an uncompressed reference.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "FedPFT")]
    FedPft,
    /// No alignment at all.
    #[serde(rename = "FedPFT_N")]
    FedPftN,
    /// Alignment before fine-tuning only.
    #[serde(rename = "FedPFT_B")]
    FedPftB,
    /// Alignment during fine-tuning only.
    #[serde(rename = "FedPFT_D")]
    FedPftD,
    #[serde(rename = "LayerDrop")]
    LayerDrop,
    #[serde(rename = "FullModel")]
    FullModel,
}

impl Mode {
    pub fn pre_fl_distillation(self) -> bool {
        matches!(self, Mode::FedPft | Mode::FedPftB | Mode::LayerDrop)
    }

    pub fn in_fl_alignment(self) -> bool {
        matches!(self, Mode::FedPft | Mode::FedPftD)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::FedPft => "FedPFT",
            Mode::FedPftN => "FedPFT_N",
            Mode::FedPftB => "FedPFT_B",
            Mode::FedPftD => "FedPFT_D",
            Mode::LayerDrop => "LayerDrop",
            Mode::FullModel => "FullModel",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationConfig {
    pub num_clients: usize,
    pub rounds: usize,
    pub clients_per_round: usize,
    pub dirichlet_alpha: f64,
    /// Alignment interval in rounds.
    pub alignment_interval: usize,
    /// Proportion of neurons updated per alignment.
    pub neuron_proportion: f64,
    pub local_epochs: usize,
    pub local_batch_size: usize,
    pub base_lr: f64,
    pub lora_rank: usize,
    pub mode: Mode,
    /// Run seed; populated from the experiment document's top-level seed.
    #[serde(skip)]
    pub seed: u64,
    /// Worker threads for the client phase.
    pub workers: usize,
}

impl Default for FederationConfig {
    /// Desk-scale defaults; the reference protocol uses 100 clients,
    /// 500 rounds and 10 sampled clients per round.
    fn default() -> Self {
        FederationConfig {
            num_clients: 20,
            rounds: 60,
            clients_per_round: 5,
            dirichlet_alpha: 10.0,
            alignment_interval: 10,
            neuron_proportion: 0.5,
            local_epochs: 1,
            local_batch_size: 8,
            base_lr: 2e-3,
            lora_rank: 4,
            mode: Mode::FedPft,
            seed: 7,
            workers: 1,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::config("federation.num_clients", "must be >= 1"));
        }
        if self.clients_per_round == 0 || self.clients_per_round > self.num_clients {
            return Err(Error::config(
                "federation.clients_per_round",
                format!(
                    "must lie in [1, {}], got {}",
                    self.num_clients, self.clients_per_round
                ),
            ));
        }
        if self.dirichlet_alpha <= 0.0 {
            return Err(Error::config("federation.dirichlet_alpha", "must be > 0"));
        }
        if self.alignment_interval == 0 {
            return Err(Error::config("federation.alignment_interval", "must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.neuron_proportion) {
            return Err(Error::config(
                "federation.neuron_proportion",
                "must lie in [0, 1]",
            ));
        }
        if self.local_batch_size == 0 {
            return Err(Error::config("federation.local_batch_size", "must be >= 1"));
        }
        if !(self.base_lr.is_finite() && self.base_lr >= 0.0) {
            return Err(Error::config("federation.base_lr", "must be finite and >= 0"));
        }
        if self.workers == 0 {
            return Err(Error::config("federation.workers", "must be >= 1"));
        }
        Ok(())
    }
}

/// How proxy layers map onto the full model, and which carry adapters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProxyPlan {
    /// `fm_layer_of[i]` = full-model layer index of proxy layer `i`.
    pub fm_layer_of: Vec<usize>,
    /// Whether proxy layer `i` carries trainable adapters.
    pub adapted: Vec<bool>,
}

impl ProxyPlan {
    /// Every proxy layer maps to the same-index model layer and is adapted.
    pub fn identity(num_layers: usize) -> Self {
        ProxyPlan {
            fm_layer_of: (0..num_layers).collect(),
            adapted: vec![true; num_layers],
        }
    }

    /// Layer-drop plan: only the verbatim-copied boundary layers are adapted.
    pub fn layer_drop(keep: &[usize], n_bottom: usize, n_top: usize) -> Self {
        let n = keep.len();
        ProxyPlan {
            fm_layer_of: keep.to_vec(),
            adapted: (0..n).map(|i| i < n_bottom || i >= n - n_top).collect(),
        }
    }

    /// Re-index proxy adapters onto full-model layer positions.
    pub fn project_adapters(
        &self,
        adapters: &AdapterSet,
        fm_num_layers: usize,
    ) -> Result<AdapterSet> {
        if adapters.layers.len() != self.fm_layer_of.len() {
            return Err(Error::contract(
                "ProxyPlan::project_adapters",
                "adapter set does not match the plan",
            ));
        }
        let mut layers = vec![None; fm_num_layers];
        for (proxy_idx, &fm_idx) in self.fm_layer_of.iter().enumerate() {
            if fm_idx >= fm_num_layers {
                return Err(Error::IndexOutOfRange {
                    op: "ProxyPlan::project_adapters",
                    index: fm_idx,
                    bound: fm_num_layers,
                });
            }
            layers[fm_idx] = adapters.layers[proxy_idx].clone();
        }
        Ok(AdapterSet {
            rank: adapters.rank,
            scaling: adapters.scaling,
            layers,
        })
    }
}

/// Client data partition with per-client label histograms.
#[derive(Clone, Debug, Serialize)]
pub struct ClientPartition {
    pub clients: Vec<Vec<usize>>,
    pub label_histograms: Vec<Vec<usize>>,
}

/// Label-skewed partition: per class, client shares are drawn from a
/// symmetric Dirichlet and samples are assigned by largest-remainder
/// rounding. Empty clients are repaired by taking one sample from the
/// largest client.
pub fn dirichlet_partition(
    labels: &[usize],
    num_clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<ClientPartition> {
    if num_clients == 0 {
        return Err(Error::contract("dirichlet_partition", "num_clients must be >= 1"));
    }
    if alpha <= 0.0 {
        return Err(Error::contract("dirichlet_partition", "alpha must be > 0"));
    }
    if labels.len() < num_clients {
        return Err(Error::contract(
            "dirichlet_partition",
            format!("{} samples cannot cover {} clients", labels.len(), num_clients),
        ));
    }
    let num_classes = labels.iter().copied().max().map(|m| m + 1).unwrap_or(0);
    let mut clients: Vec<Vec<usize>> = vec![Vec::new(); num_clients];
    for class in 0..num_classes {
        let mut members: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(i, _)| i)
            .collect();
        if members.is_empty() {
            continue;
        }
        let mut r = rng::stream(seed, "partition-class", class as u64, 0);
        rand::seq::SliceRandom::shuffle(&mut members[..], &mut r);
        let proportions = if num_clients == 1 {
            vec![1.0]
        } else {
            let dir = rand_distr::Dirichlet::new(&vec![alpha; num_clients])
                .map_err(|e| Error::contract("dirichlet_partition", e.to_string()))?;
            dir.sample(&mut rng::stream(seed, "partition-dirichlet", class as u64, 0))
        };
        // Largest-remainder rounding of proportions to counts.
        let n = members.len();
        let ideal: Vec<f64> = proportions.iter().map(|p| p * n as f64).collect();
        let mut counts: Vec<usize> = ideal.iter().map(|x| x.floor() as usize).collect();
        let assigned: usize = counts.iter().sum();
        let mut order: Vec<usize> = (0..num_clients).collect();
        order.sort_by(|&a, &b| {
            let fa = ideal[a] - ideal[a].floor();
            let fb = ideal[b] - ideal[b].floor();
            fb.partial_cmp(&fa).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
        });
        for &c in order.iter().take(n - assigned) {
            counts[c] += 1;
        }
        let mut offset = 0;
        for (c, &count) in counts.iter().enumerate() {
            clients[c].extend_from_slice(&members[offset..offset + count]);
            offset += count;
        }
    }
    // Repair empty clients.
    loop {
        let Some(empty) = clients.iter().position(|c| c.is_empty()) else {
            break;
        };
        let largest = (0..num_clients)
            .max_by_key(|&c| (clients[c].len(), usize::MAX - c))
            .expect("at least one client");
        let donated = clients[largest].pop().ok_or_else(|| {
            Error::contract("dirichlet_partition", "cannot repair empty client")
        })?;
        clients[empty].push(donated);
    }
    for c in clients.iter_mut() {
        c.sort_unstable();
    }
    let label_histograms = clients
        .iter()
        .map(|members| {
            let mut hist = vec![0usize; num_classes];
            for &i in members {
                hist[labels[i]] += 1;
            }
            hist
        })
        .collect();
    Ok(ClientPartition {
        clients,
        label_histograms,
    })
}

/// Uniform sample of `clients_per_round` distinct client ids, deterministic
/// in (seed, round), returned ascending.
pub fn sample_clients(round: usize, cfg: &FederationConfig, seed: u64) -> Vec<usize> {
    let n = cfg.num_clients;
    let k = cfg.clients_per_round;
    if k >= n {
        return (0..n).collect();
    }
    let mut r = rng::stream(seed, "sample-clients", round as u64, 0);
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = r.gen_range(i..n);
        pool.swap(i, j);
    }
    let mut picked: Vec<usize> = pool[..k].to_vec();
    picked.sort_unstable();
    picked
}

/// Linearly decayed learning rate: `base · (1 − round/R)`.
pub fn lr_schedule(round: usize, cfg: &FederationConfig) -> f64 {
    cfg.base_lr * (1.0 - round as f64 / cfg.rounds as f64)
}

// ── local fine-tuning ───────────────────────────────────────────────────

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const WEIGHT_DECAY: f64 = 0.01;

pub(crate) struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    step: usize,
}

impl AdamW {
    pub(crate) fn new(len: usize) -> Self {
        AdamW {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub(crate) fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64, precision: Precision) {
        self.step += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        for i in 0..params.len() {
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * grads[i];
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * grads[i] * grads[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            let update = mhat / (vhat.sqrt() + ADAM_EPS) + WEIGHT_DECAY * params[i];
            params[i] = precision.store(params[i] - lr * update);
        }
    }
}

/// AdamW fine-tuning of the adapter on one client's data; the proxy body
/// stays frozen. Returns the updated adapter and per-batch loss trajectory.
#[allow(clippy::too_many_arguments)]
pub fn local_finetune(
    subfm: &TransformerModel,
    adapter: &AdapterSet,
    tokens: &[Vec<u32>],
    labels: &[usize],
    epochs: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
    precision: Precision,
) -> Result<(AdapterSet, Vec<f64>)> {
    if tokens.is_empty() || tokens.len() != labels.len() {
        return Err(Error::contract(
            "local_finetune",
            format!("{} sequences vs {} labels", tokens.len(), labels.len()),
        ));
    }
    let mut current = adapter.clone();
    let mut losses = Vec::new();
    if epochs == 0 || lr == 0.0 {
        return Ok((current, losses));
    }
    let mut flat = current.flatten();
    let mut opt = AdamW::new(flat.len());
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..tokens.len()).collect();
        let mut r = rng::stream(seed, "local-epoch", epoch as u64, 0);
        rand::seq::SliceRandom::shuffle(&mut order[..], &mut r);
        for chunk in order.chunks(batch_size) {
            let batch: Vec<Vec<u32>> = chunk.iter().map(|&i| tokens[i].clone()).collect();
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new(precision);
            let mut trace =
                ForwardTrace::bind(&mut tape, subfm, Some(&current), TrainScope::AdaptersOnly)?;
            let logits = trace.run(&mut tape, &batch)?;
            let loss = tape.cross_entropy(logits, &batch_labels)?;
            losses.push(tape.value(loss)[0]);
            tape.backward(loss)?;
            let mut grads = Vec::with_capacity(flat.len());
            for handle in trace.adapter_handles() {
                grads.extend(tape.grad(handle));
            }
            opt.step(&mut flat, &grads, lr, precision);
            current = current.from_flat(&flat)?;
        }
    }
    Ok((current, losses))
}

/// Size-weighted elementwise mean of adapters. The summation order is
/// canonicalized internally, so the result is exactly permutation-invariant.
pub fn fedavg_aggregate(items: &[(AdapterSet, u64)], precision: Precision) -> Result<AdapterSet> {
    if items.is_empty() {
        return Err(Error::contract("fedavg_aggregate", "empty adapter list"));
    }
    let total: u64 = items.iter().map(|(_, n)| n).sum();
    if total == 0 {
        return Err(Error::contract("fedavg_aggregate", "zero total sample count"));
    }
    let template = &items[0].0;
    let flats: Vec<(Vec<f64>, u64)> = items
        .iter()
        .map(|(a, n)| (a.flatten(), *n))
        .collect();
    let len = flats[0].0.len();
    for (f, _) in &flats {
        if f.len() != len {
            return Err(Error::contract("fedavg_aggregate", "adapter shape mismatch"));
        }
    }
    let mut order: Vec<usize> = (0..flats.len()).collect();
    order.sort_by(|&a, &b| {
        flats[a]
            .1
            .cmp(&flats[b].1)
            .then_with(|| bits_of(&flats[a].0).cmp(&bits_of(&flats[b].0)))
    });
    let mut acc = vec![0.0f64; len];
    for &i in &order {
        let w = flats[i].1 as f64 / total as f64;
        for (a, v) in acc.iter_mut().zip(&flats[i].0) {
            *a += w * v;
        }
    }
    precision.store_slice(&mut acc);
    template.from_flat(&acc)
}

fn bits_of(xs: &[f64]) -> Vec<u64> {
    xs.iter().map(|x| x.to_bits()).collect()
}

// ── wire formats ────────────────────────────────────────────────────────

/// Client→server adapter message; tensors travel in the checkpoint byte
/// format, base64-embedded.
#[derive(Debug, Serialize, Deserialize)]
pub struct AdapterMessage {
    pub client_id: usize,
    pub num_samples: u64,
    pub tensors_b64: String,
}

pub fn encode_adapter_message(
    client_id: usize,
    num_samples: u64,
    adapters: &AdapterSet,
) -> Result<String> {
    let named = adapters.named_tensors();
    let bytes = checkpoint::tensors_to_bytes(&named);
    let msg = AdapterMessage {
        client_id,
        num_samples,
        tensors_b64: base64::engine::general_purpose::STANDARD.encode(bytes),
    };
    Ok(serde_json::to_string(&msg)?)
}

pub fn decode_adapter_message(
    json: &str,
    template: &AdapterSet,
) -> Result<(usize, u64, AdapterSet)> {
    let msg: AdapterMessage = serde_json::from_str(json)?;
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(&msg.tensors_b64)
        .map_err(|e| Error::Format(format!("bad adapter payload: {e}")))?;
    let tensors = checkpoint::tensors_from_bytes(&bytes)?;
    let adapters = template.from_named(&tensors)?;
    Ok((msg.client_id, msg.num_samples, adapters))
}

/// Client→server APoZ message.
#[derive(Debug, Serialize, Deserialize)]
pub struct ApozMessage {
    pub client_id: usize,
    pub position_count: u64,
    pub sample_count: u64,
    pub layers: Vec<Vec<f64>>,
}

// ── round records ───────────────────────────────────────────────────────

/// One row of the per-round metrics stream.
#[derive(Clone, Debug, Serialize)]
pub struct RoundRecord {
    pub round: usize,
    pub mode: Mode,
    pub lr: f64,
    pub sampled: Vec<usize>,
    pub mean_local_loss: f64,
    pub eval_acc: f64,
    pub delta_norm_sq: f64,
    /// ‖∇f‖² on the full-model side.
    pub grad_norm_sq: f64,
    /// ‖∇f′‖² on the proxy side.
    pub grad_sub_norm_sq: f64,
    pub cond11_main: bool,
    pub cond11_appendix: bool,
    pub aligned: bool,
}

/// Fixed metrics CSV header (10 columns).
pub const METRICS_HEADER: &str = "round,mode,lr,mean_local_loss,eval_acc,delta_norm_sq,grad_norm_sq,cond11_main,cond11_appendix,aligned_flag";

impl RoundRecord {
    /// Render as a CSV row; floats at 9 significant digits.
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.round,
            self.mode.as_str(),
            fmt_f64(self.lr),
            fmt_f64(self.mean_local_loss),
            fmt_f64(self.eval_acc),
            fmt_f64(self.delta_norm_sq),
            fmt_f64(self.grad_norm_sq),
            u8::from(self.cond11_main),
            u8::from(self.cond11_appendix),
            u8::from(self.aligned)
        )
    }
}

/// 9 significant digits, scientific.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.8e}")
}

// ── evaluation ──────────────────────────────────────────────────────────

/// Classification accuracy of (model, optional adapters) over a labeled set.
pub fn evaluate(
    model: &TransformerModel,
    adapters: Option<&AdapterSet>,
    tokens: &[Vec<u32>],
    labels: &[usize],
    precision: Precision,
) -> Result<f64> {
    if tokens.is_empty() {
        return Err(Error::contract("evaluate", "empty evaluation set"));
    }
    let mut correct = 0usize;
    for (chunk_t, chunk_l) in tokens.chunks(64).zip(labels.chunks(64)) {
        let mut tape = Tape::new(precision);
        let logits = forward(model, adapters, chunk_t, &mut tape)?;
        let c = tape.shape(logits)[1];
        let vals = tape.value(logits);
        for (i, &label) in chunk_l.iter().enumerate() {
            let row = &vals[i * c..(i + 1) * c];
            let pred = row
                .iter()
                .enumerate()
                .max_by(|(_, a), (_, b)| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal))
                .map(|(j, _)| j)
                .unwrap_or(0);
            if pred == label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / tokens.len() as f64)
}

// ── the round loop ──────────────────────────────────────────────────────

/// Everything the round loop needs to read.
pub struct FedData<'a> {
    pub train_tokens: &'a [Vec<u32>],
    pub train_labels: &'a [usize],
    pub eval_tokens: &'a [Vec<u32>],
    pub eval_labels: &'a [usize],
    pub distill_corpus: &'a [Vec<u32>],
}

/// Result of a federation run.
pub struct RunOutput {
    pub fm_final: TransformerModel,
    pub subfm_final: TransformerModel,
    pub adapters: AdapterSet,
    pub records: Vec<RoundRecord>,
    pub probe_log: theory::TheoryProbeLog,
    pub partition: ClientPartition,
    /// Accuracy of the final plugged-in full model on the eval split.
    pub final_fm_accuracy: f64,
}

struct ClientOutcome {
    message: String,
    mean_loss: f64,
}

/// Run the federated fine-tuning loop. `fm` is the source model, `subfm` the
/// (already pre-aligned, per mode) proxy the clients train on.
#[allow(clippy::too_many_arguments)]
pub fn run_federation(
    fm: &TransformerModel,
    subfm: &TransformerModel,
    plan: &ProxyPlan,
    partition_theta: &PartitionTheta,
    data: &FedData,
    cfg: &FederationConfig,
    dcfg: &DistillConfig,
    precision: Precision,
) -> Result<RunOutput> {
    cfg.validate()?;
    if plan.fm_layer_of.len() != subfm.num_layers() {
        return Err(Error::contract(
            "run_federation",
            "proxy plan does not match the proxy",
        ));
    }
    let partition = dirichlet_partition(
        data.train_labels,
        cfg.num_clients,
        cfg.dirichlet_alpha,
        cfg.seed,
    )?;
    let mut lora_rng = rng::stream(cfg.seed, "lora-init", 0, 0);
    let mut adapters = AdapterSet::init(
        &subfm.config,
        &plan.adapted,
        cfg.lora_rank,
        &mut lora_rng,
        precision,
    );
    let mut subfm_live = subfm.clone();
    let mut records = Vec::with_capacity(cfg.rounds);
    let mut probe_log = theory::TheoryProbeLog::default();
    let probe_n = data.eval_tokens.len().min(32);
    let probe_tokens = &data.eval_tokens[..probe_n];
    let probe_labels = &data.eval_labels[..probe_n];

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::contract("run_federation", e.to_string()))?;

    for round in 0..cfg.rounds {
        let lr = lr_schedule(round, cfg);
        let sampled = sample_clients(round, cfg, cfg.seed);
        // Server → clients: one broadcast message carrying the global adapter.
        let broadcast = encode_adapter_message(usize::MAX, 0, &adapters)?;

        let outcomes: Vec<Result<ClientOutcome>> = pool.install(|| {
            use rayon::prelude::*;
            sampled
                .par_iter()
                .map(|&cid| {
                    let (_, _, global) = decode_adapter_message(&broadcast, &adapters)?;
                    let members = &partition.clients[cid];
                    let tokens: Vec<Vec<u32>> =
                        members.iter().map(|&i| data.train_tokens[i].clone()).collect();
                    let labels: Vec<usize> =
                        members.iter().map(|&i| data.train_labels[i]).collect();
                    let client_seed = rng::derive_seed(cfg.seed, "client", round as u64, cid as u64);
                    let (updated, losses) = local_finetune(
                        &subfm_live,
                        &global,
                        &tokens,
                        &labels,
                        cfg.local_epochs,
                        cfg.local_batch_size,
                        lr,
                        client_seed,
                        precision,
                    )?;
                    let mean_loss = if losses.is_empty() {
                        0.0
                    } else {
                        losses.iter().sum::<f64>() / losses.len() as f64
                    };
                    Ok(ClientOutcome {
                        message: encode_adapter_message(cid, members.len() as u64, &updated)?,
                        mean_loss,
                    })
                })
                .collect()
        });
        let mut decoded = Vec::with_capacity(sampled.len());
        let mut loss_sum = 0.0;
        for outcome in outcomes {
            let outcome = outcome?;
            let (_, n, adapter) = decode_adapter_message(&outcome.message, &adapters)?;
            decoded.push((adapter, n));
            loss_sum += outcome.mean_loss;
        }
        let mean_local_loss = loss_sum / sampled.len() as f64;
        adapters = fedavg_aggregate(&decoded, precision)?;

        // Periodic neuron-level re-alignment.
        let mut aligned = false;
        if cfg.mode.in_fl_alignment() && (round + 1) % cfg.alignment_interval == 0 {
            let fm_current = plug_in_sync(fm, &subfm_live, &adapters, partition_theta, &plan.fm_layer_of, precision)?;
            let subfm_merged = merge_lora(&subfm_live, &adapters, precision)?;
            // Sampled clients report APoZ over their local data.
            let apoz_msgs: Vec<Result<String>> = pool.install(|| {
                use rayon::prelude::*;
                sampled
                    .par_iter()
                    .map(|&cid| {
                        let members = &partition.clients[cid];
                        let tokens: Vec<Vec<u32>> =
                            members.iter().map(|&i| data.train_tokens[i].clone()).collect();
                        let mut tape = Tape::new(precision);
                        let acts = ffn_hidden_activations(&subfm_merged, &tokens, &mut tape)?;
                        let arrays: Vec<_> =
                            acts.iter().map(|&t| tape.value_array(t)).collect();
                        let report = apoz(&arrays, dcfg.zero_threshold)?;
                        let msg = ApozMessage {
                            client_id: cid,
                            position_count: report.position_count,
                            sample_count: members.len() as u64,
                            layers: report.layers,
                        };
                        Ok(serde_json::to_string(&msg)?)
                    })
                    .collect()
            });
            let mut reports = Vec::with_capacity(sampled.len());
            for msg in apoz_msgs {
                let msg: ApozMessage = serde_json::from_str(&msg?)?;
                reports.push((
                    crate::distill::ApozReport {
                        layers: msg.layers,
                        position_count: msg.position_count,
                    },
                    msg.sample_count,
                ));
            }
            let aggregated = aggregate_apoz(&reports)?;
            let mask = select_update_neurons(&aggregated, cfg.neuron_proportion)?;
            let align_seed = rng::derive_seed(cfg.seed, "align", round as u64, 0);
            let aligned_merged = in_fl_align(
                &fm_current,
                &subfm_merged,
                &mask,
                data.distill_corpus,
                dcfg,
                align_seed,
                precision,
            )?;
            // Only the aligned FFN cores flow back into the live proxy.
            for (live, new) in subfm_live.layers.iter_mut().zip(&aligned_merged.layers) {
                live.ffn.w1 = new.ffn.w1.clone();
                live.ffn.b1 = new.ffn.b1.clone();
                live.ffn.w2 = new.ffn.w2.clone();
            }
            aligned = true;
        }

        // Theory probe and evaluation with the current adapter state.
        let probe = theory::theorem1_probe(
            fm,
            &subfm_live,
            plan,
            &adapters,
            probe_tokens,
            probe_labels,
            precision,
        )?;
        let fm_adapters = plan.project_adapters(&adapters, fm.num_layers())?;
        let eval_acc = evaluate(fm, Some(&fm_adapters), data.eval_tokens, data.eval_labels, precision)?;
        probe_log.push(round, lr, &probe);
        records.push(RoundRecord {
            round,
            mode: cfg.mode,
            lr,
            sampled,
            mean_local_loss,
            eval_acc,
            delta_norm_sq: probe.delta_norm_sq,
            grad_norm_sq: probe.grad_fm_norm_sq,
            grad_sub_norm_sq: probe.grad_sub_norm_sq,
            cond11_main: probe.cond11_main,
            cond11_appendix: probe.cond11_appendix,
            aligned,
        });
    }

    let fm_final = plug_in_sync(fm, &subfm_live, &adapters, partition_theta, &plan.fm_layer_of, precision)?;
    let final_fm_accuracy = evaluate(&fm_final, None, data.eval_tokens, data.eval_labels, precision)?;
    Ok(RunOutput {
        fm_final,
        subfm_final: subfm_live,
        adapters,
        records,
        probe_log,
        partition,
        final_fm_accuracy,
    })
}
