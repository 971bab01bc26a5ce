//! Low-rank adapters on the attention projections.
//!
//! Each adapted layer carries four (A, B) pairs, one per projection (query,
//! key, value, output), all full-width: `A: [d_model, r]`, `B: [r, d_model]`.
//! The per-head projections see the column block of the combined delta that
//! matches their head. `B` starts at zero, so a fresh adapter leaves the
//! forward pass untouched.

use crate::error::{Error, Result};
use crate::tensor::{Array, Precision};
use crate::transformer::{ModelConfig, TransformerModel};
use rand::Rng;

const ADAPTER_INIT_STD: f64 = 0.02;

/// One low-rank pair; the delta it encodes is `scaling · A · B`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraPair {
    pub a: Array,
    pub b: Array,
}

impl LoraPair {
    fn init(d_model: usize, rank: usize, rng: &mut impl Rng, precision: Precision) -> Self {
        LoraPair {
            a: Array::randn(&[d_model, rank], ADAPTER_INIT_STD, rng, precision),
            b: Array::zeros(&[rank, d_model]),
        }
    }

    /// The dense delta `scaling · A · B`.
    pub fn delta(&self, scaling: f64) -> Array {
        self.a
            .matmul(&self.b)
            .expect("lora pair shapes are consistent")
            .scale(scaling)
    }
}

/// Adapters for the four projections of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerAdapters {
    pub q: LoraPair,
    pub k: LoraPair,
    pub v: LoraPair,
    pub o: LoraPair,
}

/// LoRA adapters for a model; `layers[i] == None` means layer `i` is frozen
/// (the layer-drop baseline adapts only its copied boundary layers).
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterSet {
    pub rank: usize,
    pub scaling: f64,
    pub layers: Vec<Option<LayerAdapters>>,
}

impl AdapterSet {
    /// Fresh adapters (`A` Gaussian, `B` zero) for the layers flagged in
    /// `adapted`. Scaling is fixed at alpha/r with alpha = 2r.
    pub fn init(
        config: &ModelConfig,
        adapted: &[bool],
        rank: usize,
        rng: &mut impl Rng,
        precision: Precision,
    ) -> Self {
        let d = config.d_model;
        let layers = adapted
            .iter()
            .map(|&on| {
                on.then(|| LayerAdapters {
                    q: LoraPair::init(d, rank, rng, precision),
                    k: LoraPair::init(d, rank, rng, precision),
                    v: LoraPair::init(d, rank, rng, precision),
                    o: LoraPair::init(d, rank, rng, precision),
                })
            })
            .collect();
        AdapterSet {
            rank,
            scaling: 2.0,
            layers,
        }
    }

    /// Same structure with all-zero A and B.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for layer in out.layers.iter_mut().flatten() {
            for pair in [&mut layer.q, &mut layer.k, &mut layer.v, &mut layer.o] {
                *pair = LoraPair {
                    a: Array::zeros(pair.a.shape()),
                    b: Array::zeros(pair.b.shape()),
                };
            }
        }
        out
    }

    pub fn pairs(&self) -> Vec<&LoraPair> {
        self.layers
            .iter()
            .flatten()
            .flat_map(|l| [&l.q, &l.k, &l.v, &l.o])
            .collect()
    }

    fn pairs_mut(&mut self) -> Vec<&mut LoraPair> {
        self.layers
            .iter_mut()
            .flatten()
            .flat_map(|l| [&mut l.q, &mut l.k, &mut l.v, &mut l.o])
            .collect()
    }

    /// All adapter values as one flat vector, in layer/projection/A-then-B order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for pair in self.pairs() {
            out.extend_from_slice(pair.a.data());
            out.extend_from_slice(pair.b.data());
        }
        out
    }

    /// Rebuild from a flat vector with this set's shapes.
    pub fn from_flat(&self, data: &[f64]) -> Result<Self> {
        let mut out = self.clone();
        let mut offset = 0;
        for pair in out.pairs_mut() {
            for arr in [&mut pair.a, &mut pair.b] {
                let n = arr.len();
                if offset + n > data.len() {
                    return Err(Error::contract("AdapterSet::from_flat", "flat vector too short"));
                }
                arr.data_mut().copy_from_slice(&data[offset..offset + n]);
                offset += n;
            }
        }
        if offset != data.len() {
            return Err(Error::contract(
                "AdapterSet::from_flat",
                format!("flat vector has {} values, expected {}", data.len(), offset),
            ));
        }
        Ok(out)
    }

    /// Named tensors for wire/checkpoint serialization.
    pub fn named_tensors(&self) -> Vec<(String, &Array)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            if let Some(l) = layer {
                for (tag, pair) in [("q", &l.q), ("k", &l.k), ("v", &l.v), ("o", &l.o)] {
                    out.push((format!("layers.{i}.{tag}.a"), &pair.a));
                    out.push((format!("layers.{i}.{tag}.b"), &pair.b));
                }
            }
        }
        out
    }

    /// Rebuild from named tensors, using `self` as the shape template.
    pub fn from_named(&self, tensors: &[(String, Array)]) -> Result<Self> {
        let mut out = self.clone();
        for (i, layer) in out.layers.iter_mut().enumerate() {
            if let Some(l) = layer {
                for (tag, pair) in [
                    ("q", &mut l.q),
                    ("k", &mut l.k),
                    ("v", &mut l.v),
                    ("o", &mut l.o),
                ] {
                    for (suffix, arr) in [("a", &mut pair.a), ("b", &mut pair.b)] {
                        let name = format!("layers.{i}.{tag}.{suffix}");
                        let found = tensors
                            .iter()
                            .find(|(n, _)| *n == name)
                            .ok_or_else(|| Error::Format(format!("missing adapter tensor `{name}`")))?;
                        if found.1.shape() != arr.shape() {
                            return Err(Error::Format(format!(
                                "adapter tensor `{name}` has shape {:?}, expected {:?}",
                                found.1.shape(),
                                arr.shape()
                            )));
                        }
                        *arr = found.1.clone();
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Fold adapter deltas into a copy of the model: each adapted layer's
/// projections get `W += scaling · A · B` (per-head column blocks for q/k/v).
pub fn merge_lora(
    model: &TransformerModel,
    adapters: &AdapterSet,
    precision: Precision,
) -> Result<TransformerModel> {
    if adapters.layers.len() != model.layers.len() {
        return Err(Error::contract(
            "merge_lora",
            format!(
                "adapter set covers {} layers, model has {}",
                adapters.layers.len(),
                model.layers.len()
            ),
        ));
    }
    let d = model.config.d_model;
    let dk = model.config.d_k();
    let mut merged = model.clone();
    for (layer, ad) in merged.layers.iter_mut().zip(&adapters.layers) {
        let Some(ad) = ad else { continue };
        for pair in [&ad.q, &ad.k, &ad.v, &ad.o] {
            if pair.a.shape() != [d, adapters.rank] || pair.b.shape() != [adapters.rank, d] {
                return Err(Error::ShapeMismatch {
                    op: "merge_lora",
                    left: pair.a.shape().to_vec(),
                    right: vec![d, adapters.rank],
                });
            }
        }
        for (heads, pair) in [
            (&mut layer.attn.w_q, &ad.q),
            (&mut layer.attn.w_k, &ad.k),
            (&mut layer.attn.w_v, &ad.v),
        ] {
            let delta = pair.delta(adapters.scaling);
            for (h, w) in heads.iter_mut().enumerate() {
                for i in 0..d {
                    for j in 0..dk {
                        let v = w.at2(i, j) + delta.at2(i, h * dk + j);
                        w.set2(i, j, precision.store(v));
                    }
                }
            }
        }
        let delta_o = ad.o.delta(adapters.scaling);
        for i in 0..d {
            for j in 0..d {
                let v = layer.attn.w_o.at2(i, j) + delta_o.at2(i, j);
                layer.attn.w_o.set2(i, j, precision.store(v));
            }
        }
    }
    Ok(merged)
}
