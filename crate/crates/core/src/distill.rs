//! Two-step alignment of a proxy against its source model.
//!
//! Before federated fine-tuning, layer-level distillation minimizes per-layer
//! output MSE plus a regularizer on the FFN weight products. During
//! fine-tuning, neuron-level distillation re-runs the same loss but only
//! updates neurons selected by their average percentage of zero activations
//! (APoZ) on client data, so the proxy tracks the evolving full model without
//! forgetting local adaptation.

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Array, Precision, Tape, Tensor};
use crate::transformer::{forward_with_layer_outputs, ForwardTrace, TrainScope, TransformerModel};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

/// Knobs for both distillation phases.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    /// Regularization coefficient on the FFN product gap.
    pub mu: f64,
    /// Pre-fine-tuning distillation epochs over the corpus.
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Number of unlabeled corpus sequences to generate.
    pub corpus_size: usize,
    /// Gradient steps per in-fine-tuning alignment event.
    pub align_steps: usize,
    /// Activations at or below this value count as zero for APoZ.
    pub zero_threshold: f64,
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mu < 0.0 {
            return Err(Error::config("distill.mu", "must be >= 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("distill.batch_size", "must be >= 1"));
        }
        if self.corpus_size == 0 {
            return Err(Error::config("distill.corpus_size", "must be >= 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::config("distill.learning_rate", "must be finite and >= 0"));
        }
        if !(self.zero_threshold.is_finite()) {
            return Err(Error::config("distill.zero_threshold", "must be finite"));
        }
        Ok(())
    }
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            mu: 0.1,
            epochs: 8,
            learning_rate: 2e-3,
            batch_size: 32,
            corpus_size: 512,
            align_steps: 12,
            zero_threshold: 1e-3,
        }
    }
}

/// Per-layer outputs (and FFN products) of a frozen teacher over a corpus,
/// computed once and reused across distillation steps.
pub struct TeacherCache {
    /// `[sample][layer]` post-LN2 outputs, each `[seq, d_model]`.
    pub layer_outputs: Vec<Vec<Array>>,
    /// Per teacher layer: the product W1·W2, `[d_model, d_model]`.
    pub products: Vec<Array>,
    seq_len: usize,
    d_model: usize,
}

impl TeacherCache {
    pub fn build(teacher: &TransformerModel, corpus: &[Vec<u32>], precision: Precision) -> Result<Self> {
        let mut layer_outputs = Vec::with_capacity(corpus.len());
        for chunk in corpus.chunks(64) {
            let mut tape = Tape::new(precision);
            let (_, outs) = forward_with_layer_outputs(teacher, None, chunk, &mut tape)?;
            for (bi, _) in chunk.iter().enumerate() {
                let mut per_layer = Vec::with_capacity(outs.len());
                for &lo in &outs {
                    let shape = tape.shape(lo).to_vec();
                    let (s, d) = (shape[1], shape[2]);
                    let vals = tape.value(lo);
                    let sample = vals[bi * s * d..(bi + 1) * s * d].to_vec();
                    per_layer.push(Array::from_vec(&[s, d], sample)?);
                }
                layer_outputs.push(per_layer);
            }
        }
        let products = teacher
            .layers
            .iter()
            .map(|l| l.ffn.w1.matmul(&l.ffn.w2))
            .collect::<Result<Vec<_>>>()?;
        let seq_len = corpus.first().map(|s| s.len()).unwrap_or(0);
        Ok(TeacherCache {
            layer_outputs,
            products,
            seq_len,
            d_model: teacher.config.d_model,
        })
    }

    /// Stacked teacher outputs `[b, s, d]` for `layer` over the batch indices.
    fn stacked(&self, layer: usize, indices: &[usize]) -> Result<Array> {
        let mut data = Vec::with_capacity(indices.len() * self.seq_len * self.d_model);
        for &i in indices {
            data.extend_from_slice(self.layer_outputs[i][layer].data());
        }
        Array::from_vec(&[indices.len(), self.seq_len, self.d_model], data)
    }
}

/// Build the distillation loss on the student's tape:
/// (1/(L·M)) Σ_i [ Σ_j ‖O_j − O'_j‖² + μ·‖W1 W2 − W1' W2'‖² ].
/// `layer_map[i]` names the teacher layer matched to student layer `i`.
fn build_kd_loss(
    tape: &mut Tape,
    student: &ForwardTrace,
    teacher: &TeacherCache,
    batch_indices: &[usize],
    mu: f64,
    layer_map: &[usize],
) -> Result<Tensor> {
    let num_layers = layer_map.len();
    let m = batch_indices.len();
    let mut total: Option<Tensor> = None;
    for (i, &teacher_layer) in layer_map.iter().enumerate() {
        let t_out = teacher.stacked(teacher_layer, batch_indices)?;
        let t_const = tape.constant(&t_out);
        let diff = tape.sub(student.layer_outputs[i], t_const)?;
        let mut term = tape.sum_squares(diff)?;
        if mu > 0.0 {
            let [w1, _, w2] = student.layer_ffn_handles(i);
            let prod = tape.matmul(w1, w2)?;
            let t_prod = tape.constant(&teacher.products[teacher_layer]);
            let pdiff = tape.sub(prod, t_prod)?;
            let reg = tape.sum_squares(pdiff)?;
            let reg_scaled = tape.scale(reg, mu)?;
            term = tape.add(term, reg_scaled)?;
        }
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    let total = total.ok_or_else(|| Error::contract("layer_kd_loss", "no layers to match"))?;
    tape.scale(total, 1.0 / (num_layers as f64 * m as f64))
}

/// The layer-level distillation loss of `subfm` against `fm` on `batch`,
/// with gradients flowing only into the proxy's FFN core tensors.
/// Returns the loss handle; the caller owns the tape.
pub fn layer_kd_loss(
    fm: &TransformerModel,
    subfm: &TransformerModel,
    batch: &[Vec<u32>],
    mu: f64,
    tape: &mut Tape,
) -> Result<Tensor> {
    if fm.num_layers() != subfm.num_layers() {
        return Err(Error::contract(
            "layer_kd_loss",
            format!(
                "teacher has {} layers, student {}",
                fm.num_layers(),
                subfm.num_layers()
            ),
        ));
    }
    let teacher = TeacherCache::build(fm, batch, tape.precision())?;
    let mut student = ForwardTrace::bind(tape, subfm, None, TrainScope::FfnCore)?;
    student.run(tape, batch)?;
    let indices: Vec<usize> = (0..batch.len()).collect();
    let map: Vec<usize> = (0..fm.num_layers()).collect();
    build_kd_loss(tape, &student, &teacher, &indices, mu, &map)
}

fn sgd_update_ffn(
    model: &mut TransformerModel,
    trace: &ForwardTrace,
    tape: &Tape,
    lr: f64,
    mask: Option<&NeuronMask>,
    precision: Precision,
) {
    for (i, layer) in model.layers.iter_mut().enumerate() {
        let [w1_h, b1_h, w2_h] = trace.layer_ffn_handles(i);
        let gw1 = tape.grad(w1_h);
        let gb1 = tape.grad(b1_h);
        let gw2 = tape.grad(w2_h);
        let d = layer.ffn.d_model();
        let d_ff = layer.ffn.d_ff();
        for k in 0..d_ff {
            if let Some(m) = mask {
                if !m.layers[i][k] {
                    continue;
                }
            }
            for j in 0..d {
                let w1v = layer.ffn.w1.at2(j, k) - lr * gw1[j * d_ff + k];
                layer.ffn.w1.set2(j, k, precision.store(w1v));
                let w2v = layer.ffn.w2.at2(k, j) - lr * gw2[k * d + j];
                layer.ffn.w2.set2(k, j, precision.store(w2v));
            }
            let b1v = layer.ffn.b1.data()[k] - lr * gb1[k];
            layer.ffn.b1.data_mut()[k] = precision.store(b1v);
        }
    }
}

/// Pre-fine-tuning alignment: epochs of plain gradient descent on the
/// layer-level loss, updating every FFN core tensor of the proxy. Returns the
/// aligned proxy and the per-step loss trajectory.
pub fn pre_fl_distill(
    fm: &TransformerModel,
    subfm: &TransformerModel,
    corpus: &[Vec<u32>],
    cfg: &DistillConfig,
    seed: u64,
    precision: Precision,
) -> Result<(TransformerModel, Vec<f64>)> {
    if corpus.is_empty() {
        return Err(Error::contract("pre_fl_distill", "empty distillation corpus"));
    }
    if fm.num_layers() != subfm.num_layers() {
        return Err(Error::contract(
            "pre_fl_distill",
            "teacher/student layer counts differ",
        ));
    }
    let map: Vec<usize> = (0..fm.num_layers()).collect();
    distill_loop(fm, subfm, corpus, cfg, cfg.epochs, None, seed, &map, precision)
}

/// Shared descent loop for both phases. `steps_override` limits the total
/// number of gradient steps (in-FL alignment); `None` runs full epochs.
#[allow(clippy::too_many_arguments)]
fn distill_loop(
    teacher: &TransformerModel,
    student0: &TransformerModel,
    corpus: &[Vec<u32>],
    cfg: &DistillConfig,
    epochs: usize,
    mask_and_steps: Option<(&NeuronMask, usize)>,
    seed: u64,
    layer_map: &[usize],
    precision: Precision,
) -> Result<(TransformerModel, Vec<f64>)> {
    let mut student = student0.clone();
    let steps_limit = mask_and_steps.map(|(_, s)| s);
    let mask = mask_and_steps.map(|(m, _)| m);
    if epochs == 0 || steps_limit == Some(0) || corpus.is_empty() {
        return Ok((student, Vec::new()));
    }
    if let Some(m) = mask {
        if m.layers.iter().all(|l| l.iter().all(|&b| !b)) {
            return Ok((student, Vec::new()));
        }
    }
    let cache = TeacherCache::build(teacher, corpus, precision)?;
    let mut losses = Vec::new();
    let mut steps_done = 0usize;
    'outer: for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        let mut r = rng::stream(seed, "distill-epoch", epoch as u64, 0);
        order.shuffle(&mut r);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Vec<u32>> = chunk.iter().map(|&i| corpus[i].clone()).collect();
            let mut tape = Tape::new(precision);
            let mut trace = ForwardTrace::bind(&mut tape, &student, None, TrainScope::FfnCore)?;
            trace.run(&mut tape, &batch)?;
            let loss = build_kd_loss(&mut tape, &trace, &cache, chunk, cfg.mu, layer_map)?;
            losses.push(tape.value(loss)[0]);
            tape.backward(loss)?;
            sgd_update_ffn(&mut student, &trace, &tape, cfg.learning_rate, mask, precision);
            steps_done += 1;
            if let Some(limit) = steps_limit {
                if steps_done >= limit {
                    break 'outer;
                }
            }
        }
    }
    Ok((student, losses))
}

/// Per-layer, per-neuron APoZ values over activation stacks.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ApozReport {
    /// `layers[i][k]` = fraction of (sample, token) positions where neuron
    /// `k`'s activation was at or below the zero threshold.
    pub layers: Vec<Vec<f64>>,
    /// Number of (sample, token) positions behind each fraction.
    pub position_count: u64,
}

/// Compute APoZ from per-layer activation stacks `[batch, seq, d_ff]`.
pub fn apoz(activations: &[Array], zero_threshold: f64) -> Result<ApozReport> {
    let mut layers = Vec::with_capacity(activations.len());
    let mut position_count = 0u64;
    for act in activations {
        let shape = act.shape();
        if shape.len() != 3 {
            return Err(Error::contract(
                "apoz",
                format!("expected [batch, seq, d_ff] activations, got {shape:?}"),
            ));
        }
        let (b, s, d_ff) = (shape[0], shape[1], shape[2]);
        position_count = (b * s) as u64;
        let mut zeros = vec![0u64; d_ff];
        for pos in 0..b * s {
            let row = &act.data()[pos * d_ff..(pos + 1) * d_ff];
            for (k, &v) in row.iter().enumerate() {
                if v <= zero_threshold {
                    zeros[k] += 1;
                }
            }
        }
        layers.push(
            zeros
                .into_iter()
                .map(|z| z as f64 / (b * s) as f64)
                .collect(),
        );
    }
    Ok(ApozReport {
        layers,
        position_count,
    })
}

/// Sample-count-weighted mean of client APoZ reports.
pub fn aggregate_apoz(reports: &[(ApozReport, u64)]) -> Result<ApozReport> {
    if reports.is_empty() {
        return Err(Error::contract("aggregate_apoz", "empty report list"));
    }
    let total: u64 = reports.iter().map(|(_, n)| n).sum();
    if total == 0 {
        return Err(Error::contract("aggregate_apoz", "zero total sample count"));
    }
    let first = &reports[0].0;
    let mut layers: Vec<Vec<f64>> = first.layers.iter().map(|l| vec![0.0; l.len()]).collect();
    for (report, count) in reports {
        if report.layers.len() != layers.len() {
            return Err(Error::contract("aggregate_apoz", "layer count mismatch"));
        }
        let w = *count as f64 / total as f64;
        for (acc, src) in layers.iter_mut().zip(&report.layers) {
            if acc.len() != src.len() {
                return Err(Error::contract("aggregate_apoz", "neuron count mismatch"));
            }
            for (a, v) in acc.iter_mut().zip(src) {
                *a += w * v;
            }
        }
    }
    Ok(ApozReport {
        layers,
        position_count: total,
    })
}

/// Which neurons the in-fine-tuning alignment may update.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeuronMask {
    pub layers: Vec<Vec<bool>>,
}

impl NeuronMask {
    pub fn selected_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.iter().filter(|&&b| b).count())
            .sum()
    }
}

/// Select, per layer, the `round(p · d_ff)` neurons with the highest APoZ
/// (most often zero ⇒ least salient to local tasks); ties to lower index.
pub fn select_update_neurons(report: &ApozReport, p: f64) -> Result<NeuronMask> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::contract(
            "select_update_neurons",
            format!("proportion {p} outside [0, 1]"),
        ));
    }
    let layers = report
        .layers
        .iter()
        .map(|scores| {
            let count = (p * scores.len() as f64).round() as usize;
            let kept = crate::subfm::top_k_neurons(scores, count);
            let mut mask = vec![false; scores.len()];
            for k in kept {
                mask[k] = true;
            }
            mask
        })
        .collect();
    Ok(NeuronMask { layers })
}

/// In-fine-tuning alignment: `cfg.align_steps` masked descent steps of the
/// layer-level loss against the current full model (which must already carry
/// the plugged-in adapter deltas). Unmasked neuron parameters are returned
/// bitwise unchanged.
pub fn in_fl_align(
    fm_current: &TransformerModel,
    subfm: &TransformerModel,
    mask: &NeuronMask,
    corpus: &[Vec<u32>],
    cfg: &DistillConfig,
    seed: u64,
    precision: Precision,
) -> Result<TransformerModel> {
    if mask.layers.len() != subfm.num_layers() {
        return Err(Error::contract(
            "in_fl_align",
            format!(
                "mask covers {} layers, proxy has {}",
                mask.layers.len(),
                subfm.num_layers()
            ),
        ));
    }
    for (i, (m, layer)) in mask.layers.iter().zip(&subfm.layers).enumerate() {
        if m.len() != layer.ffn.d_ff() {
            return Err(Error::contract(
                "in_fl_align",
                format!("mask layer {i} has {} entries, ffn width {}", m.len(), layer.ffn.d_ff()),
            ));
        }
    }
    if fm_current.num_layers() != subfm.num_layers() {
        return Err(Error::contract(
            "in_fl_align",
            "teacher/student layer counts differ",
        ));
    }
    let map: Vec<usize> = (0..fm_current.num_layers()).collect();
    let (aligned, _) = distill_loop(
        fm_current,
        subfm,
        corpus,
        cfg,
        usize::MAX,
        Some((mask, cfg.align_steps)),
        seed,
        &map,
        precision,
    )?;
    Ok(aligned)
}

/// Layer-drop variant of the pre-fine-tuning distillation: student layer `i`
/// matches teacher layer `layer_map[i]`.
pub fn pre_fl_distill_mapped(
    fm: &TransformerModel,
    subfm: &TransformerModel,
    layer_map: &[usize],
    corpus: &[Vec<u32>],
    cfg: &DistillConfig,
    seed: u64,
    precision: Precision,
) -> Result<(TransformerModel, Vec<f64>)> {
    if layer_map.len() != subfm.num_layers() {
        return Err(Error::contract(
            "pre_fl_distill_mapped",
            "layer map does not cover the proxy",
        ));
    }
    distill_loop(fm, subfm, corpus, cfg, cfg.epochs, None, seed, layer_map, precision)
}
