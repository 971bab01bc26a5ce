//! Experiment orchestration: configuration documents, synthetic data,
//! model construction, the mode-gated pipeline, and output files.

pub mod data;
pub mod metrics;
pub mod testbed;

use crate::distill::{pre_fl_distill, pre_fl_distill_mapped, DistillConfig};
use crate::error::{Error, Result};
use crate::fed::{
    run_federation, theory, FedData, FederationConfig, Mode, ProxyPlan, RunOutput,
};
use crate::rng;
use crate::subfm::{
    compress_model, cost_report, layer_drop_compress, CompressionSpec, CostReport,
    PartitionTheta, SaliencyReport,
};
use crate::tensor::{Precision, Tape};
use crate::transformer::{
    checkpoint, ForwardTrace, ModelConfig, TrainScope, TransformerModel,
};
use data::{generate_synthetic, DatasetSpec, GeneratorShape, SyntheticDataset};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Layer-drop baseline shape (bottom/top layers copied, middle subsampled).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerDropSpec {
    pub n_bottom: usize,
    pub n_top: usize,
    pub n_emulator: usize,
}

impl Default for LayerDropSpec {
    fn default() -> Self {
        LayerDropSpec {
            n_bottom: 1,
            n_top: 1,
            n_emulator: 1,
        }
    }
}

/// The whole experiment document; a run is a pure function of this plus the
/// `FEDPFT_PRECISION` environment selector.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub compression: CompressionSpec,
    pub distill: DistillConfig,
    pub federation: FederationConfig,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub layer_drop: LayerDropSpec,
    /// Server-side training of the full source model on the distillation
    /// domain before compression; the desk-scale stand-in for starting from
    /// a trained foundation model.
    #[serde(default = "default_pretrain_epochs")]
    pub pretrain_epochs: usize,
    #[serde(default = "default_pretrain_lr")]
    pub pretrain_lr: f64,
    #[serde(default = "default_head_warmup_epochs")]
    pub head_warmup_epochs: usize,
    #[serde(default = "default_head_warmup_lr")]
    pub head_warmup_lr: f64,
    pub output_dir: String,
    pub seed: u64,
}

fn default_pretrain_epochs() -> usize {
    6
}

fn default_pretrain_lr() -> f64 {
    3e-3
}

fn default_head_warmup_epochs() -> usize {
    1
}

fn default_head_warmup_lr() -> f64 {
    5e-3
}

impl ExperimentConfig {
    /// Desk-scale reference configuration.
    pub fn desk_default(seed: u64, mode: Mode, output_dir: &str) -> Self {
        let mut federation = FederationConfig::default();
        federation.mode = mode;
        federation.seed = seed;
        ExperimentConfig {
            model: ModelConfig {
                num_layers: 4,
                num_heads: 2,
                d_model: 32,
                d_ff: 128,
                vocab_size: 64,
                max_seq_len: 16,
                num_classes: 4,
            },
            compression: CompressionSpec::all(0.75),
            distill: DistillConfig::default(),
            federation,
            dataset: DatasetSpec {
                rule: data::RULE_MAJORITY_TOKEN.to_string(),
                num_train: 800,
                num_eval: 256,
                noise_rate: 0.0,
                label_rotation: 1,
            },
            layer_drop: LayerDropSpec::default(),
            pretrain_epochs: default_pretrain_epochs(),
            pretrain_lr: default_pretrain_lr(),
            head_warmup_epochs: default_head_warmup_epochs(),
            head_warmup_lr: default_head_warmup_lr(),
            output_dir: output_dir.to_string(),
            seed,
        }
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let mut cfg: ExperimentConfig = serde_json::from_str(text)
            .map_err(|e| Error::config("<document>", e.to_string()))?;
        cfg.federation.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.compression
            .validate(self.model.num_layers, self.model.d_ff)?;
        self.distill.validate()?;
        self.federation.validate()?;
        self.dataset.validate()?;
        if self.model.vocab_size < self.model.num_classes + 2 {
            return Err(Error::config(
                "model.vocab_size",
                format!(
                    "needs at least num_classes + 2 = {}",
                    self.model.num_classes + 2
                ),
            ));
        }
        if self.dataset.num_train < self.federation.num_clients {
            return Err(Error::config(
                "dataset.num_train",
                format!(
                    "must cover federation.num_clients = {}",
                    self.federation.num_clients
                ),
            ));
        }
        if self.federation.mode == Mode::LayerDrop {
            let ld = &self.layer_drop;
            if ld.n_bottom + ld.n_top > self.model.num_layers {
                return Err(Error::config(
                    "layer_drop",
                    "bottom + top layers exceed the model depth",
                ));
            }
            let middle = self.model.num_layers - ld.n_bottom - ld.n_top;
            if ld.n_emulator > middle {
                return Err(Error::config(
                    "layer_drop.n_emulator",
                    format!("must be <= middle block size {middle}"),
                ));
            }
        }
        if !(self.head_warmup_lr.is_finite() && self.head_warmup_lr >= 0.0) {
            return Err(Error::config("head_warmup_lr", "must be finite and >= 0"));
        }
        if !(self.pretrain_lr.is_finite() && self.pretrain_lr >= 0.0) {
            return Err(Error::config("pretrain_lr", "must be finite and >= 0"));
        }
        if self.dataset.label_rotation >= self.model.num_classes {
            return Err(Error::config(
                "dataset.label_rotation",
                format!("must be < num_classes = {}", self.model.num_classes),
            ));
        }
        Ok(())
    }

    pub fn generator_shape(&self) -> GeneratorShape {
        GeneratorShape {
            vocab_size: self.model.vocab_size,
            seq_len: self.model.max_seq_len,
            num_classes: self.model.num_classes,
        }
    }

    /// Cost report for this configuration (one forward and one backward pass
    /// per step).
    pub fn cost_report(&self) -> CostReport {
        cost_report(
            &self.model,
            &self.compression,
            self.federation.lora_rank,
            self.federation.alignment_interval,
            self.federation.neuron_proportion,
            1.0,
            1.0,
        )
    }
}

/// Full-model supervised training on the distillation-domain data: the
/// desk-scale analogue of a pretrained source model. All parameters update.
pub fn pretrain(
    model: &mut TransformerModel,
    tokens: &[Vec<u32>],
    labels: &[usize],
    epochs: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
    precision: Precision,
) -> Result<Vec<f64>> {
    let mut losses = Vec::new();
    if epochs == 0 || lr == 0.0 || tokens.is_empty() {
        return Ok(losses);
    }
    let mut flat = model.flatten_params();
    let mut opt = crate::fed::AdamW::new(flat.len());
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..tokens.len()).collect();
        let mut r = rng::stream(seed, "pretrain", epoch as u64, 0);
        rand::seq::SliceRandom::shuffle(&mut order[..], &mut r);
        for chunk in order.chunks(batch_size) {
            let batch: Vec<Vec<u32>> = chunk.iter().map(|&i| tokens[i].clone()).collect();
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new(precision);
            let mut trace = ForwardTrace::bind(&mut tape, model, None, TrainScope::All)?;
            let logits = trace.run(&mut tape, &batch)?;
            let loss = tape.cross_entropy(logits, &batch_labels)?;
            losses.push(tape.value(loss)[0]);
            tape.backward(loss)?;
            let mut grads = Vec::with_capacity(flat.len());
            for handle in trace.model_handles() {
                grads.extend(tape.grad(handle));
            }
            opt.step(&mut flat, &grads, lr, precision);
            model.write_flat_params(&flat)?;
        }
    }
    Ok(losses)
}

/// Train only the classification head on labeled warmup data.
pub fn head_warmup(
    model: &mut TransformerModel,
    tokens: &[Vec<u32>],
    labels: &[usize],
    epochs: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
    precision: Precision,
) -> Result<Vec<f64>> {
    let mut losses = Vec::new();
    if epochs == 0 || lr == 0.0 || tokens.is_empty() {
        return Ok(losses);
    }
    let head_len = model.head_weight.len() + model.head_bias.len();
    let mut opt = crate::fed::AdamW::new(head_len);
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..tokens.len()).collect();
        let mut r = rng::stream(seed, "head-warmup", epoch as u64, 0);
        rand::seq::SliceRandom::shuffle(&mut order[..], &mut r);
        for chunk in order.chunks(batch_size) {
            let batch: Vec<Vec<u32>> = chunk.iter().map(|&i| tokens[i].clone()).collect();
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new(precision);
            let mut trace = ForwardTrace::bind(&mut tape, model, None, TrainScope::HeadOnly)?;
            let logits = trace.run(&mut tape, &batch)?;
            let loss = tape.cross_entropy(logits, &batch_labels)?;
            losses.push(tape.value(loss)[0]);
            tape.backward(loss)?;
            let [hw, hb] = trace.head_handles();
            let mut flat: Vec<f64> = model
                .head_weight
                .data()
                .iter()
                .chain(model.head_bias.data())
                .copied()
                .collect();
            let mut grads = tape.grad(hw);
            grads.extend(tape.grad(hb));
            opt.step(&mut flat, &grads, lr, precision);
            let (w, b) = flat.split_at(model.head_weight.len());
            model.head_weight.data_mut().copy_from_slice(w);
            model.head_bias.data_mut().copy_from_slice(b);
        }
    }
    Ok(losses)
}

/// A proxy ready for federation, with its plan and parameter partition.
pub struct BuiltProxy {
    pub subfm: TransformerModel,
    pub plan: ProxyPlan,
    pub partition: PartitionTheta,
    pub saliency: Option<SaliencyReport>,
    /// Teacher layer matched to each proxy layer during distillation.
    pub layer_map: Vec<usize>,
}

/// Build the mode-appropriate proxy from the full model.
pub fn build_proxy(fm: &TransformerModel, cfg: &ExperimentConfig) -> Result<BuiltProxy> {
    match cfg.federation.mode {
        Mode::FullModel => Ok(BuiltProxy {
            subfm: fm.clone(),
            plan: ProxyPlan::identity(fm.num_layers()),
            partition: PartitionTheta::for_model(fm),
            saliency: None,
            layer_map: (0..fm.num_layers()).collect(),
        }),
        Mode::LayerDrop => {
            let ld = &cfg.layer_drop;
            let (subfm, keep) = layer_drop_compress(fm, ld.n_bottom, ld.n_top, ld.n_emulator)?;
            Ok(BuiltProxy {
                plan: ProxyPlan::layer_drop(&keep, ld.n_bottom, ld.n_top),
                partition: PartitionTheta::for_model(fm),
                saliency: None,
                layer_map: keep,
                subfm,
            })
        }
        _ => {
            let (subfm, saliency, partition) = compress_model(fm, &cfg.compression)?;
            Ok(BuiltProxy {
                plan: ProxyPlan::identity(fm.num_layers()),
                partition,
                saliency: Some(saliency),
                layer_map: (0..fm.num_layers()).collect(),
                subfm,
            })
        }
    }
}

/// Everything a finished experiment produced.
pub struct ExperimentOutput {
    pub run: RunOutput,
    pub fm_initial: TransformerModel,
    pub saliency: Option<SaliencyReport>,
    pub pre_fl_losses: Vec<f64>,
    pub inner_product: theory::InnerProductSummary,
    pub metrics_path: PathBuf,
    pub summary_path: PathBuf,
}

#[derive(Serialize)]
struct Summary<'a> {
    mode: &'a str,
    seed: u64,
    rounds: usize,
    /// Source-model accuracy on its own (distillation-domain) corpus.
    fm_domain_accuracy: f64,
    /// Source-model accuracy on the client eval split before any FL.
    fm_client_accuracy_before_fl: f64,
    final_fm_accuracy: f64,
    final_round_eval_acc: Option<f64>,
    pre_fl_loss_first: Option<f64>,
    pre_fl_loss_last: Option<f64>,
    inner_product: theory::InnerProductSummary,
    mean_delta_norm_sq: f64,
}

/// Build data and models, run the mode-gated pipeline, write output files.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let precision = Precision::from_env()?;
    let (train, eval, distill_corpus) = build_datasets(cfg)?;
    let fm = build_source_model(cfg, &distill_corpus, precision)?;
    let fm_initial = fm.clone();
    let fm_domain_accuracy = crate::fed::evaluate(
        &fm,
        None,
        &distill_corpus.tokens,
        &distill_corpus.labels,
        precision,
    )?;
    let fm_client_accuracy_before_fl =
        crate::fed::evaluate(&fm, None, &eval.tokens, &eval.labels, precision)?;

    let built = build_proxy(&fm, cfg)?;
    let distill_seed = rng::derive_seed(cfg.seed, "pre-distill", 0, 0);
    let (subfm, pre_fl_losses) = if cfg.federation.mode.pre_fl_distillation() {
        if cfg.federation.mode == Mode::LayerDrop {
            pre_fl_distill_mapped(
                &fm,
                &built.subfm,
                &built.layer_map,
                &distill_corpus.tokens,
                &cfg.distill,
                distill_seed,
                precision,
            )?
        } else {
            pre_fl_distill(
                &fm,
                &built.subfm,
                &distill_corpus.tokens,
                &cfg.distill,
                distill_seed,
                precision,
            )?
        }
    } else {
        (built.subfm.clone(), Vec::new())
    };

    let fed_data = FedData {
        train_tokens: &train.tokens,
        train_labels: &train.labels,
        eval_tokens: &eval.tokens,
        eval_labels: &eval.labels,
        distill_corpus: &distill_corpus.tokens,
    };
    let run = run_federation(
        &fm,
        &subfm,
        &built.plan,
        &built.partition,
        &fed_data,
        &cfg.federation,
        &cfg.distill,
        precision,
    )?;

    let out_dir = PathBuf::from(&cfg.output_dir);
    std::fs::create_dir_all(&out_dir)?;
    let metrics_path = out_dir.join("metrics.csv");
    metrics::write_metrics_csv(&metrics_path, &run.records)?;
    metrics::emit_plot_data(&run.records, &out_dir)?;
    checkpoint::save_model(&out_dir.join("fm_final.fpft"), &run.fm_final)?;
    checkpoint::save_model(&out_dir.join("subfm_final.fpft"), &run.subfm_final)?;
    if let Some(sal) = &built.saliency {
        checkpoint::write_atomic(
            &out_dir.join("saliency.json"),
            serde_json::to_string_pretty(sal)?.as_bytes(),
        )?;
    }
    checkpoint::write_atomic(
        &out_dir.join("cost_report.json"),
        serde_json::to_string_pretty(&cfg.cost_report())?.as_bytes(),
    )?;
    let inner_product = run.probe_log.inner_product_summary(&run.adapters.flatten());
    let mean_delta = if run.records.is_empty() {
        0.0
    } else {
        run.records.iter().map(|r| r.delta_norm_sq).sum::<f64>() / run.records.len() as f64
    };
    let summary = Summary {
        mode: cfg.federation.mode.as_str(),
        seed: cfg.seed,
        rounds: cfg.federation.rounds,
        fm_domain_accuracy,
        fm_client_accuracy_before_fl,
        final_fm_accuracy: run.final_fm_accuracy,
        final_round_eval_acc: run.records.last().map(|r| r.eval_acc),
        pre_fl_loss_first: pre_fl_losses.first().copied(),
        pre_fl_loss_last: pre_fl_losses.last().copied(),
        inner_product,
        mean_delta_norm_sq: mean_delta,
    };
    let summary_path = out_dir.join("summary.json");
    checkpoint::write_atomic(&summary_path, serde_json::to_string_pretty(&summary)?.as_bytes())?;

    Ok(ExperimentOutput {
        run,
        fm_initial,
        saliency: built.saliency,
        pre_fl_losses,
        inner_product,
        metrics_path,
        summary_path,
    })
}

/// Result of the theory-check battery.
#[derive(Serialize)]
pub struct TheoryCheckReport {
    pub quadratic_trials: usize,
    pub decrease_violations: usize,
    pub bound_violations: usize,
    pub bound_applicable_runs: usize,
    pub theorem2: theory::Theorem2Report,
    pub passed: bool,
}

/// Run the convergence-theory battery: perturbed descent on random SPD
/// quadratics plus the linearized-model gradient bound. `sabotage_k1`
/// deliberately breaks the bound constant to prove the check can fail.
pub fn check_theory(seed: u64, sabotage_k1: bool) -> Result<TheoryCheckReport> {
    let trials: usize = 20;
    let mut decrease_violations = 0;
    let mut bound_violations = 0;
    let mut bound_applicable = 0;
    for t in 0..trials as u64 {
        let tb = testbed::ConvexTestbed::random_spd(5, rng::derive_seed(seed, "ct-bed", t, 0));
        let mut r = rng::stream(seed, "ct-x0", t, 0);
        let x0: Vec<f64> = (0..5).map(|_| rand::Rng::gen_range(&mut r, -3.0..3.0)).collect();
        let report = testbed::convex_descent_experiment(
            &tb,
            1.0 / tb.l1,
            60,
            testbed::DeltaPolicy::PropGradFPrime(0.4),
            &x0,
        )?;
        decrease_violations += report.decrease_violations;
        if let Some(ok) = report.bound_satisfied {
            bound_applicable += 1;
            if !ok {
                bound_violations += 1;
            }
        }
    }
    let t2cfg = theory::Theorem2Config {
        seed,
        k1_scale: if sabotage_k1 { 1e-9 } else { 1.0 },
        ..theory::Theorem2Config::default()
    };
    let theorem2 = theory::theorem2_check(&t2cfg)?;
    let passed = decrease_violations == 0 && bound_violations == 0 && theorem2.passed();
    Ok(TheoryCheckReport {
        quadratic_trials: trials,
        decrease_violations,
        bound_violations,
        bound_applicable_runs: bound_applicable,
        theorem2,
        passed,
    })
}

/// The three data splits for a config: client train, client eval, and the
/// distillation/pretraining corpus (rotation 0, its own stream).
pub fn build_datasets(
    cfg: &ExperimentConfig,
) -> Result<(SyntheticDataset, SyntheticDataset, SyntheticDataset)> {
    let shape = cfg.generator_shape();
    let rot = cfg.dataset.label_rotation;
    Ok((
        generate_synthetic(
            shape,
            cfg.dataset.num_train,
            cfg.dataset.noise_rate,
            rot,
            cfg.seed,
            "train-data",
        )?,
        generate_synthetic(shape, cfg.dataset.num_eval, 0.0, rot, cfg.seed, "eval-data")?,
        generate_synthetic(shape, cfg.distill.corpus_size, 0.0, 0, cfg.seed, "distill-data")?,
    ))
}

/// Seeded init, distillation-domain pretraining, and head warmup: the source
/// model every pipeline stage starts from.
pub fn build_source_model(
    cfg: &ExperimentConfig,
    distill_corpus: &SyntheticDataset,
    precision: Precision,
) -> Result<TransformerModel> {
    let mut fm = TransformerModel::init(
        &cfg.model,
        &mut rng::stream(cfg.seed, "model-init", 0, 0),
        precision,
    )?;
    pretrain(
        &mut fm,
        &distill_corpus.tokens,
        &distill_corpus.labels,
        cfg.pretrain_epochs,
        cfg.pretrain_lr,
        cfg.distill.batch_size,
        rng::derive_seed(cfg.seed, "pretrain-seed", 0, 0),
        precision,
    )?;
    head_warmup(
        &mut fm,
        &distill_corpus.tokens,
        &distill_corpus.labels,
        cfg.head_warmup_epochs,
        cfg.head_warmup_lr,
        cfg.distill.batch_size,
        rng::derive_seed(cfg.seed, "head-warmup-seed", 0, 0),
        precision,
    )?;
    Ok(fm)
}
