//! Proxy sub-model construction.
//!
//! The proxy keeps every attention block, norm, embedding and head tensor of
//! the source model and shrinks each FFN by dropping low-saliency neurons at
//! a fixed ratio. Neuron `k`'s saliency is the L2 norm of its combined input
//! column (of W1) and output row (of W2). A layer-drop baseline and the
//! compute/communication report generator live here too.

use crate::error::{Error, Result};
use crate::tensor::Array;
use crate::transformer::{FfnParams, ModelConfig, TransformerModel};
use serde::Serialize;

/// How much of each FFN to remove, and where.
#[derive(Clone, Debug, PartialEq, serde::Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct CompressionSpec {
    /// Fraction of neurons eliminated per layer, in `[0, 1)`.
    pub ratio: f64,
    /// Half-open layer range `[start, end)` to compress; `None` = all layers.
    #[serde(default)]
    pub layer_range: Option<(usize, usize)>,
}

impl CompressionSpec {
    pub fn all(ratio: f64) -> Self {
        CompressionSpec {
            ratio,
            layer_range: None,
        }
    }

    pub fn validate(&self, num_layers: usize, d_ff: usize) -> Result<()> {
        if !(0.0..1.0).contains(&self.ratio) {
            return Err(Error::config(
                "compression.ratio",
                format!("ratio {} must lie in [0, 1)", self.ratio),
            ));
        }
        if compressed_d_ff(d_ff, self.ratio) == 0 {
            return Err(Error::config(
                "compression.ratio",
                "ratio eliminates every neuron",
            ));
        }
        if let Some((start, end)) = self.layer_range {
            if start > end || end > num_layers {
                return Err(Error::config(
                    "compression.layer_range",
                    format!("invalid range {start}..{end} for {num_layers} layers"),
                ));
            }
        }
        Ok(())
    }

    /// True when layer `i` falls inside the compressed range.
    pub fn covers(&self, i: usize) -> bool {
        match self.layer_range {
            Some((start, end)) => i >= start && i < end,
            None => true,
        }
    }
}

/// Width kept after eliminating `floor(ratio · d_ff)` neurons.
pub fn compressed_d_ff(d_ff: usize, ratio: f64) -> usize {
    d_ff - (ratio * d_ff as f64).floor() as usize
}

/// Per-layer neuron scores and the surviving index sets.
#[derive(Clone, Debug, Serialize)]
pub struct SaliencyReport {
    pub layers: Vec<LayerSaliency>,
}

#[derive(Clone, Debug, Serialize)]
pub struct LayerSaliency {
    pub layer: usize,
    pub scores: Vec<f64>,
    /// Kept neuron indices, ascending.
    pub kept: Vec<usize>,
}

/// Which side of the parameter split each tensor belongs to. The retained
/// side is synchronized back into the full model after fine-tuning; the
/// compressed side is never touched by it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum ThetaSide {
    Retained,
    Compressed,
}

/// Labeling of every named parameter tensor.
#[derive(Clone, Debug)]
pub struct PartitionTheta {
    pub assignments: Vec<(String, ThetaSide)>,
}

impl PartitionTheta {
    /// FFN core tensors (w1, b1, w2) are the compressed side; everything
    /// else (embeddings, attention, norms, head, ffn output bias) is retained.
    pub fn for_model(model: &TransformerModel) -> Self {
        let mut assignments = Vec::new();
        model.for_each_parameter(|name, _| {
            let side = if name.ends_with(".ffn.w1")
                || name.ends_with(".ffn.b1")
                || name.ends_with(".ffn.w2")
            {
                ThetaSide::Compressed
            } else {
                ThetaSide::Retained
            };
            assignments.push((name, side));
        });
        PartitionTheta { assignments }
    }

    pub fn side_of(&self, name: &str) -> Option<ThetaSide> {
        self.assignments
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| *s)
    }
}

/// L2 norm of each neuron's combined input/output weights.
pub fn neuron_saliency(ffn: &FfnParams) -> Vec<f64> {
    let d_ff = ffn.d_ff();
    let d = ffn.d_model();
    let mut scores = vec![0.0; d_ff];
    for (k, s) in scores.iter_mut().enumerate() {
        let mut acc = 0.0;
        for j in 0..d {
            let u = ffn.w1.at2(j, k);
            let w = ffn.w2.at2(k, j);
            acc += u * u + w * w;
        }
        *s = acc.sqrt();
    }
    scores
}

/// Indices of the `keep` highest-scoring neurons, ties to the lower index,
/// returned ascending.
pub fn top_k_neurons(scores: &[f64], keep: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = order.into_iter().take(keep).collect();
    kept.sort_unstable();
    kept
}

fn slice_ffn(ffn: &FfnParams, kept: &[usize]) -> FfnParams {
    let d = ffn.d_model();
    let mut w1 = Array::zeros(&[d, kept.len()]);
    let mut b1 = Array::zeros(&[kept.len()]);
    let mut w2 = Array::zeros(&[kept.len(), d]);
    for (new_k, &k) in kept.iter().enumerate() {
        for j in 0..d {
            w1.set2(j, new_k, ffn.w1.at2(j, k));
            w2.set2(new_k, j, ffn.w2.at2(k, j));
        }
        b1.data_mut()[new_k] = ffn.b1.data()[k];
    }
    FfnParams {
        w1,
        b1,
        w2,
        b2: ffn.b2.clone(),
    }
}

/// Build the proxy: slice each covered FFN down to its top-saliency neurons.
/// Retained tensors are value-identical copies of the source model's.
pub fn compress_model(
    fm: &TransformerModel,
    spec: &CompressionSpec,
) -> Result<(TransformerModel, SaliencyReport, PartitionTheta)> {
    spec.validate(fm.num_layers(), fm.config.d_ff)?;
    let mut sub = fm.clone();
    let mut layers = Vec::with_capacity(fm.num_layers());
    for (i, layer) in fm.layers.iter().enumerate() {
        let scores = neuron_saliency(&layer.ffn);
        let keep = if spec.covers(i) {
            compressed_d_ff(layer.ffn.d_ff(), spec.ratio)
        } else {
            layer.ffn.d_ff()
        };
        let kept = top_k_neurons(&scores, keep);
        if spec.covers(i) && keep < layer.ffn.d_ff() {
            sub.layers[i].ffn = slice_ffn(&layer.ffn, &kept);
        }
        layers.push(LayerSaliency {
            layer: i,
            scores,
            kept,
        });
    }
    let partition = PartitionTheta::for_model(fm);
    Ok((sub, SaliencyReport { layers }, partition))
}

/// Evaluate the FFN output (`gelu(x·W1+b1)·W2+b2`) directly, optionally
/// skipping one neuron; used to validate the neuron decomposition.
fn ffn_eval(ffn: &FfnParams, x: &Array, skip: Option<usize>) -> Array {
    let d = ffn.d_model();
    let d_ff = ffn.d_ff();
    let m = x.rows();
    let mut out = Array::zeros(&[m, d]);
    for r in 0..m {
        for j in 0..d {
            out.set2(r, j, ffn.b2.data()[j]);
        }
        for k in 0..d_ff {
            if skip == Some(k) {
                continue;
            }
            let mut pre = ffn.b1.data()[k];
            for j in 0..d {
                pre += x.at2(r, j) * ffn.w1.at2(j, k);
            }
            let act = crate::tensor::tape::gelu_scalar(pre);
            for j in 0..d {
                out.set2(r, j, out.at2(r, j) + act * ffn.w2.at2(k, j));
            }
        }
    }
    out
}

/// True iff removing neuron `k` leaves the FFN output unchanged within 1e-6
/// on the given input batch (`[m, d_model]`).
pub fn prune_zero_output_neuron_check(ffn: &FfnParams, batch: &Array, k: usize) -> bool {
    let full = ffn_eval(ffn, batch, None);
    let without = ffn_eval(ffn, batch, Some(k));
    full.max_abs_diff(&without) <= 1e-6
}

/// Apply the proxy's merged adapter deltas back into the full model's
/// retained side. Compressed-side tensors are returned untouched.
pub fn plug_in_sync(
    fm: &TransformerModel,
    subfm_trained: &TransformerModel,
    adapters: &crate::transformer::AdapterSet,
    partition: &PartitionTheta,
    fm_layer_of: &[usize],
    precision: crate::tensor::Precision,
) -> Result<TransformerModel> {
    if subfm_trained.num_layers() != fm_layer_of.len()
        || adapters.layers.len() != fm_layer_of.len()
    {
        return Err(Error::contract(
            "plug_in_sync",
            format!(
                "layer map covers {} layers, proxy has {}, adapters have {}",
                fm_layer_of.len(),
                subfm_trained.num_layers(),
                adapters.layers.len()
            ),
        ));
    }
    if partition.assignments.len() != fm.named_parameters().len() {
        return Err(Error::contract(
            "plug_in_sync",
            "partition does not cover the full model",
        ));
    }
    // Project the proxy-indexed adapters onto full-model layer indices, then
    // merge. Unmapped layers get no delta.
    let mut fm_adapters = crate::transformer::AdapterSet {
        rank: adapters.rank,
        scaling: adapters.scaling,
        layers: vec![None; fm.num_layers()],
    };
    for (proxy_idx, &fm_idx) in fm_layer_of.iter().enumerate() {
        if fm_idx >= fm.num_layers() {
            return Err(Error::IndexOutOfRange {
                op: "plug_in_sync",
                index: fm_idx,
                bound: fm.num_layers(),
            });
        }
        if let Some(layer) = &adapters.layers[proxy_idx] {
            fm_adapters.layers[fm_idx] = Some(layer.clone());
        }
    }
    crate::transformer::merge_lora(fm, &fm_adapters, precision)
}

/// Layer-drop baseline: keep `n_bottom` + `n_top` layers verbatim and
/// uniformly subsample the middle block down to `n_emulator` layers.
/// Returns the proxy and the proxy→source layer index map.
pub fn layer_drop_compress(
    fm: &TransformerModel,
    n_bottom: usize,
    n_top: usize,
    n_emulator: usize,
) -> Result<(TransformerModel, Vec<usize>)> {
    let l = fm.num_layers();
    if n_bottom + n_top > l {
        return Err(Error::contract(
            "layer_drop_compress",
            format!("bottom {n_bottom} + top {n_top} exceed {l} layers"),
        ));
    }
    let middle = l - n_bottom - n_top;
    if n_emulator > middle {
        return Err(Error::contract(
            "layer_drop_compress",
            format!("emulator {n_emulator} larger than middle block {middle}"),
        ));
    }
    let mut keep: Vec<usize> = (0..n_bottom).collect();
    keep.extend(middle_subsample(middle, n_emulator).iter().map(|o| n_bottom + o));
    keep.extend((l - n_top)..l);
    let mut proxy = fm.clone();
    proxy.layers = keep.iter().map(|&i| fm.layers[i].clone()).collect();
    proxy.config.num_layers = proxy.layers.len();
    Ok((proxy, keep))
}

/// Offsets of `e` uniformly spaced layers within a block of `m`, first and
/// last always included: offset_j = floor(j·(m−1)/(e−1)).
pub fn middle_subsample(m: usize, e: usize) -> Vec<usize> {
    if e == 0 || m == 0 {
        return Vec::new();
    }
    if e == 1 {
        return vec![0];
    }
    (0..e).map(|j| j * (m - 1) / (e - 1)).collect()
}

/// Numeric evaluation of the compute/communication complexity expressions.
#[derive(Clone, Debug, Serialize)]
pub struct CostReport {
    pub symbols: CostSymbols,
    /// Per-layer projection matmul terms: 4·S·d² + 2·S·d·d_ff.
    pub full_per_layer_matmul: f64,
    pub sub_per_layer_matmul: f64,
    /// sub / full per-layer matmul ratio; 0.5 at d_ff = 4d, d_ff' = d.
    pub sub_over_full_matmul_ratio: f64,
    /// FFN-only compute ratio, equals d_ff' / d_ff.
    pub ffn_compute_ratio: f64,
    /// Total time-cost expressions: d(V+S) + L(c_f+c_b)(per-layer matmul + S²d).
    pub full_total_time: f64,
    pub sub_total_time: f64,
    /// Space complexity d(V+S) + 12·L·d² + 2·L·d (and the d_ff' analogue).
    pub full_space: f64,
    pub sub_space: f64,
    /// Per-round communication with PEFT: 8·L·r·d + (2/t)·q·L·d².
    pub peft_communication: f64,
    /// Adapter-only term 8·L·r·d.
    pub peft_adapter_term: f64,
    /// Alignment rebroadcast term (2/t)·q·L·d².
    pub peft_alignment_term: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct CostSymbols {
    pub vocab_size: usize,
    pub seq_len: usize,
    pub num_layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub d_ff_sub: usize,
    pub forward_passes: f64,
    pub backward_passes: f64,
    pub lora_rank: usize,
    pub alignment_interval: usize,
    pub neuron_proportion: f64,
}

/// Evaluate the cost expressions for a model config and federation knobs.
pub fn cost_report(
    config: &ModelConfig,
    spec: &CompressionSpec,
    lora_rank: usize,
    alignment_interval: usize,
    neuron_proportion: f64,
    forward_passes: f64,
    backward_passes: f64,
) -> CostReport {
    let v = config.vocab_size as f64;
    let s = config.max_seq_len as f64;
    let l = config.num_layers as f64;
    let d = config.d_model as f64;
    let dff = config.d_ff as f64;
    let dffs = compressed_d_ff(config.d_ff, spec.ratio) as f64;
    let full_layer = 4.0 * s * d * d + 2.0 * s * d * dff;
    let sub_layer = 4.0 * s * d * d + 2.0 * s * d * dffs;
    let passes = forward_passes + backward_passes;
    let r = lora_rank as f64;
    let t = alignment_interval as f64;
    let q = neuron_proportion;
    let adapter_term = 8.0 * l * r * d;
    let alignment_term = if t > 0.0 { (2.0 / t) * q * l * d * d } else { 0.0 };
    CostReport {
        symbols: CostSymbols {
            vocab_size: config.vocab_size,
            seq_len: config.max_seq_len,
            num_layers: config.num_layers,
            d_model: config.d_model,
            d_ff: config.d_ff,
            d_ff_sub: compressed_d_ff(config.d_ff, spec.ratio),
            forward_passes,
            backward_passes,
            lora_rank,
            alignment_interval,
            neuron_proportion,
        },
        full_per_layer_matmul: full_layer,
        sub_per_layer_matmul: sub_layer,
        sub_over_full_matmul_ratio: sub_layer / full_layer,
        ffn_compute_ratio: dffs / dff,
        full_total_time: d * (v + s) + l * passes * (full_layer + s * s * d),
        sub_total_time: d * (v + s) + l * passes * (sub_layer + s * s * d),
        full_space: d * (v + s) + 12.0 * l * d * d + 2.0 * l * d,
        sub_space: d * (v + s) + (4.0 + 2.0 * dffs / d) * l * d * d + 2.0 * l * d,
        peft_communication: adapter_term + alignment_term,
        peft_adapter_term: adapter_term,
        peft_alignment_term: alignment_term,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::tensor::Precision;

    fn tiny_ffn(d: usize, d_ff: usize, seed: u64) -> FfnParams {
        let mut r = rng::stream(seed, "ffn", 0, 0);
        FfnParams {
            w1: Array::randn(&[d, d_ff], 0.5, &mut r, Precision::F64Verify),
            b1: Array::randn(&[d_ff], 0.5, &mut r, Precision::F64Verify),
            w2: Array::randn(&[d_ff, d], 0.5, &mut r, Precision::F64Verify),
            b2: Array::randn(&[d], 0.5, &mut r, Precision::F64Verify),
        }
    }

    #[test]
    fn saliency_of_a_single_sided_neuron() {
        // u_k = 0, w_k = (3, 4, 0, 0) → saliency 5.
        let d = 4;
        let d_ff = 3;
        let mut ffn = FfnParams {
            w1: Array::zeros(&[d, d_ff]),
            b1: Array::zeros(&[d_ff]),
            w2: Array::zeros(&[d_ff, d]),
            b2: Array::zeros(&[d]),
        };
        ffn.w2.set2(1, 0, 3.0);
        ffn.w2.set2(1, 1, 4.0);
        let scores = neuron_saliency(&ffn);
        assert_eq!(scores[1], 5.0);
        assert_eq!(scores[0], 0.0);
        assert_eq!(scores[2], 0.0);
    }

    #[test]
    fn saliency_ranking_matches_brute_force() {
        let ffn = tiny_ffn(5, 8, 42);
        let scores = neuron_saliency(&ffn);
        // Brute force: recompute norms independently and rank.
        let mut brute: Vec<(usize, f64)> = (0..8)
            .map(|k| {
                let mut acc = 0.0;
                for j in 0..5 {
                    acc += ffn.w1.data()[j * 8 + k].powi(2);
                    acc += ffn.w2.data()[k * 5 + j].powi(2);
                }
                (k, acc.sqrt())
            })
            .collect();
        brute.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        for keep in 1..=8 {
            let mut want: Vec<usize> = brute.iter().take(keep).map(|(k, _)| *k).collect();
            want.sort_unstable();
            assert_eq!(top_k_neurons(&scores, keep), want, "keep {keep}");
        }
    }

    #[test]
    fn saliency_ties_keep_lower_index() {
        let d = 2;
        let mut ffn = FfnParams {
            w1: Array::zeros(&[d, 4]),
            b1: Array::zeros(&[4]),
            w2: Array::zeros(&[4, d]),
            b2: Array::zeros(&[d]),
        };
        for k in 0..4 {
            ffn.w2.set2(k, 0, 1.0); // all neurons tie at saliency 1
        }
        assert_eq!(top_k_neurons(&neuron_saliency(&ffn), 2), vec![0, 1]);
    }

    #[test]
    fn saliency_is_permutation_invariant_over_d_model() {
        let ffn = tiny_ffn(6, 4, 7);
        let scores = neuron_saliency(&ffn);
        // Permute the d_model axis consistently on w1 rows and w2 columns.
        let perm = [3usize, 0, 5, 1, 4, 2];
        let mut w1 = Array::zeros(&[6, 4]);
        let mut w2 = Array::zeros(&[4, 6]);
        for (new_j, &j) in perm.iter().enumerate() {
            for k in 0..4 {
                w1.set2(new_j, k, ffn.w1.at2(j, k));
                w2.set2(k, new_j, ffn.w2.at2(k, j));
            }
        }
        let permuted = FfnParams {
            w1,
            b1: ffn.b1.clone(),
            w2,
            b2: ffn.b2.clone(),
        };
        let scores_p = neuron_saliency(&permuted);
        for (a, b) in scores.iter().zip(&scores_p) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn compressed_width_formula() {
        assert_eq!(compressed_d_ff(3072, 0.75), 768);
        assert_eq!(compressed_d_ff(128, 0.75), 32);
        assert_eq!(compressed_d_ff(8, 0.75), 2);
        assert_eq!(compressed_d_ff(10, 0.0), 10);
    }

    #[test]
    fn eight_neuron_compression_keeps_top_two() {
        let cfg = ModelConfig {
            num_layers: 1,
            num_heads: 1,
            d_model: 4,
            d_ff: 8,
            vocab_size: 6,
            max_seq_len: 3,
            num_classes: 2,
        };
        let mut r = rng::stream(9, "cmp8", 0, 0);
        let fm = TransformerModel::init(&cfg, &mut r, Precision::F64Verify).unwrap();
        let (sub, report, _) = compress_model(&fm, &CompressionSpec::all(0.75)).unwrap();
        assert_eq!(sub.layers[0].ffn.d_ff(), 2);
        // Exhaustive check of the kept pair.
        let scores = neuron_saliency(&fm.layers[0].ffn);
        let mut best_pair = (0usize, 1usize);
        let mut best = f64::NEG_INFINITY;
        for a in 0..8 {
            for b in (a + 1)..8 {
                let s = scores[a] + scores[b];
                if s > best {
                    best = s;
                    best_pair = (a, b);
                }
            }
        }
        assert_eq!(report.layers[0].kept, vec![best_pair.0, best_pair.1]);
    }

    #[test]
    fn zero_ratio_compression_is_identity() {
        let cfg = ModelConfig {
            num_layers: 2,
            num_heads: 2,
            d_model: 8,
            d_ff: 16,
            vocab_size: 10,
            max_seq_len: 4,
            num_classes: 2,
        };
        let mut r = rng::stream(10, "cmp0", 0, 0);
        let fm = TransformerModel::init(&cfg, &mut r, Precision::F32).unwrap();
        let (sub, _, _) = compress_model(&fm, &CompressionSpec::all(0.0)).unwrap();
        assert_eq!(sub, fm);
    }

    #[test]
    fn over_compression_is_rejected() {
        let cfg = ModelConfig {
            num_layers: 1,
            num_heads: 1,
            d_model: 4,
            d_ff: 4,
            vocab_size: 6,
            max_seq_len: 3,
            num_classes: 2,
        };
        let mut r = rng::stream(11, "cmpbad", 0, 0);
        let fm = TransformerModel::init(&cfg, &mut r, Precision::F32).unwrap();
        // ratio outside [0,1) is rejected; 0.99 still keeps one neuron.
        assert!(compress_model(&fm, &CompressionSpec::all(1.0)).is_err());
        let (sub, _, _) = compress_model(&fm, &CompressionSpec::all(0.99)).unwrap();
        assert_eq!(sub.layers[0].ffn.d_ff(), 1);
    }

    #[test]
    fn partition_covers_everything_disjointly() {
        let cfg = ModelConfig {
            num_layers: 2,
            num_heads: 1,
            d_model: 4,
            d_ff: 8,
            vocab_size: 6,
            max_seq_len: 3,
            num_classes: 2,
        };
        let mut r = rng::stream(12, "part", 0, 0);
        let fm = TransformerModel::init(&cfg, &mut r, Precision::F32).unwrap();
        let partition = PartitionTheta::for_model(&fm);
        let names: Vec<String> = fm.named_parameters().iter().map(|(n, _)| n.clone()).collect();
        assert_eq!(partition.assignments.len(), names.len());
        for name in &names {
            let side = partition.side_of(name).expect("every tensor labeled");
            let expect_compressed = name.ends_with(".ffn.w1")
                || name.ends_with(".ffn.b1")
                || name.ends_with(".ffn.w2");
            assert_eq!(side == ThetaSide::Compressed, expect_compressed, "{name}");
        }
    }

    #[test]
    fn zero_output_neuron_is_removable() {
        let mut ffn = tiny_ffn(4, 6, 21);
        // Zero the output row of neuron 2.
        for j in 0..4 {
            ffn.w2.set2(2, j, 0.0);
        }
        let mut r = rng::stream(21, "batch", 0, 0);
        let batch = Array::randn(&[3, 4], 1.0, &mut r, Precision::F64Verify);
        assert!(prune_zero_output_neuron_check(&ffn, &batch, 2));
        // A live neuron is not removable.
        assert!(!prune_zero_output_neuron_check(&ffn, &batch, 1));
    }

    #[test]
    fn removing_then_reinserting_a_neuron_restores_output() {
        let ffn = tiny_ffn(4, 6, 22);
        let (sub, report, _) = {
            let cfg = ModelConfig {
                num_layers: 1,
                num_heads: 1,
                d_model: 4,
                d_ff: 6,
                vocab_size: 6,
                max_seq_len: 3,
                num_classes: 2,
            };
            let mut r = rng::stream(22, "reins", 0, 0);
            let mut fm = TransformerModel::init(&cfg, &mut r, Precision::F64Verify).unwrap();
            fm.layers[0].ffn = ffn.clone();
            compress_model(&fm, &CompressionSpec::all(0.5)).unwrap()
        };
        // Re-insert the dropped neurons: reconstruct and compare outputs.
        let kept = &report.layers[0].kept;
        let mut rebuilt = FfnParams {
            w1: Array::zeros(&[4, 6]),
            b1: Array::zeros(&[6]),
            w2: Array::zeros(&[6, 4]),
            b2: ffn.b2.clone(),
        };
        for (new_k, &k) in kept.iter().enumerate() {
            for j in 0..4 {
                rebuilt.w1.set2(j, k, sub.layers[0].ffn.w1.at2(j, new_k));
                rebuilt.w2.set2(k, j, sub.layers[0].ffn.w2.at2(new_k, j));
            }
            rebuilt.b1.data_mut()[k] = sub.layers[0].ffn.b1.data()[new_k];
        }
        for k in 0..6 {
            if !kept.contains(&k) {
                for j in 0..4 {
                    rebuilt.w1.set2(j, k, ffn.w1.at2(j, k));
                    rebuilt.w2.set2(k, j, ffn.w2.at2(k, j));
                }
                rebuilt.b1.data_mut()[k] = ffn.b1.data()[k];
            }
        }
        let mut r = rng::stream(23, "reins2", 0, 0);
        let batch = Array::randn(&[2, 4], 1.0, &mut r, Precision::F64Verify);
        let orig = ffn_eval(&ffn, &batch, None);
        let back = ffn_eval(&rebuilt, &batch, None);
        assert_eq!(orig, back);
    }

    #[test]
    fn layer_drop_shapes_and_offsets() {
        assert_eq!(middle_subsample(8, 3), vec![0, 3, 7]);
        assert_eq!(middle_subsample(5, 5), vec![0, 1, 2, 3, 4]);
        assert_eq!(middle_subsample(4, 1), vec![0]);

        let cfg = ModelConfig {
            num_layers: 12,
            num_heads: 1,
            d_model: 4,
            d_ff: 8,
            vocab_size: 6,
            max_seq_len: 3,
            num_classes: 2,
        };
        let mut r = rng::stream(13, "drop", 0, 0);
        let fm = TransformerModel::init(&cfg, &mut r, Precision::F32).unwrap();
        let (proxy, map) = layer_drop_compress(&fm, 2, 2, 3).unwrap();
        assert_eq!(proxy.num_layers(), 7);
        assert_eq!(map, vec![0, 1, 2, 5, 9, 10, 11]);

        // Emulator equal to the middle block is the identity.
        let (full, map_full) = layer_drop_compress(&fm, 2, 2, 8).unwrap();
        assert_eq!(full, fm);
        assert_eq!(map_full, (0..12).collect::<Vec<_>>());

        assert!(layer_drop_compress(&fm, 7, 6, 0).is_err());
        assert!(layer_drop_compress(&fm, 2, 2, 9).is_err());
    }

    #[test]
    fn cost_report_reference_ratios() {
        let cfg = ModelConfig {
            num_layers: 12,
            num_heads: 12,
            d_model: 768,
            d_ff: 3072,
            vocab_size: 30000,
            max_seq_len: 128,
            num_classes: 2,
        };
        let report = cost_report(&cfg, &CompressionSpec::all(0.75), 8, 10, 0.5, 1.0, 2.0);
        assert_eq!(report.sub_over_full_matmul_ratio, 0.5);
        assert_eq!(report.ffn_compute_ratio, 0.25);
        // Hand-expanded PEFT communication: 8·L·r·d + (2/t)·q·L·d².
        let want_adapter = 8.0 * 12.0 * 8.0 * 768.0;
        let want_align = (2.0 / 10.0) * 0.5 * 12.0 * 768.0 * 768.0;
        assert_eq!(report.peft_adapter_term, want_adapter);
        assert_eq!(report.peft_alignment_term, want_align);
        assert_eq!(report.peft_communication, want_adapter + want_align);

        // r = 0, q = 0 → zero PEFT communication.
        let zero = cost_report(&cfg, &CompressionSpec::all(0.75), 0, 10, 0.0, 1.0, 2.0);
        assert_eq!(zero.peft_communication, 0.0);

        // JSON serializes.
        let json = serde_json::to_string(&report).unwrap();
        assert!(json.contains("sub_over_full_matmul_ratio"));
    }
}
