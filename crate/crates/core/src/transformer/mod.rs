//! Encoder-style transformer with per-head attention parameters, post-norm
//! residual layers, LoRA adapters on the attention projections, and a binary
//! checkpoint format.

pub mod checkpoint;
mod forward;
mod lora;

pub use forward::{
    ffn_hidden_activations, forward, forward_with_layer_outputs, ForwardTrace, TrainScope,
};
pub use lora::{merge_lora, AdapterSet, LayerAdapters, LoraPair};

use crate::error::{Error, Result};
use crate::tensor::{Array, Precision};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Architecture hyper-parameters shared by a model and its compressed proxy.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub num_classes: usize,
}

impl ModelConfig {
    /// Per-head key/query/value width.
    pub fn d_k(&self) -> usize {
        self.d_model / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 {
            return Err(Error::config("model.num_heads", "must be >= 1"));
        }
        if self.d_model == 0 || self.d_model % self.num_heads != 0 {
            return Err(Error::config(
                "model.d_model",
                format!(
                    "d_model ({}) must be a positive multiple of num_heads ({})",
                    self.d_model, self.num_heads
                ),
            ));
        }
        if self.d_ff == 0 {
            return Err(Error::config("model.d_ff", "must be >= 1"));
        }
        if self.vocab_size == 0 {
            return Err(Error::config("model.vocab_size", "must be >= 1"));
        }
        if self.max_seq_len == 0 {
            return Err(Error::config("model.max_seq_len", "must be >= 1"));
        }
        if self.num_classes == 0 {
            return Err(Error::config("model.num_classes", "must be >= 1"));
        }
        Ok(())
    }
}

/// Per-head attention weights plus the shared output projection.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    /// Per-head query/key/value projections, each `[d_model, d_k]`.
    pub w_q: Vec<Array>,
    pub w_k: Vec<Array>,
    pub w_v: Vec<Array>,
    /// Per-head projection biases, each `[d_k]`.
    pub b_q: Vec<Array>,
    pub b_k: Vec<Array>,
    pub b_v: Vec<Array>,
    /// Output projection `[d_model, d_model]` and bias `[d_model]`.
    pub w_o: Array,
    pub b_o: Array,
}

/// Feed-forward weights. Storage follows `gelu(x·W1 + b1)·W2 + b2`:
/// `W1: [d_model, d_ff]`, `W2: [d_ff, d_model]`. Neuron `k` is the pair
/// (column `k` of `W1`, row `k` of `W2`) plus `b1[k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FfnParams {
    pub w1: Array,
    pub b1: Array,
    pub w2: Array,
    pub b2: Array,
}

impl FfnParams {
    pub fn d_ff(&self) -> usize {
        self.w1.cols()
    }

    pub fn d_model(&self) -> usize {
        self.w1.rows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gain: Array,
    pub bias: Array,
}

impl LayerNormParams {
    fn identity(d: usize) -> Self {
        LayerNormParams {
            gain: Array::filled(&[d], 1.0),
            bias: Array::zeros(&[d]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub attn: AttentionParams,
    pub ln1: LayerNormParams,
    pub ffn: FfnParams,
    pub ln2: LayerNormParams,
}

/// Full model: token/position embeddings, `L` transformer layers, and a
/// linear classification head applied to the first token's final state.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerModel {
    pub config: ModelConfig,
    /// `[vocab_size, d_model]`
    pub token_embedding: Array,
    /// `[max_seq_len, d_model]`
    pub pos_embedding: Array,
    pub layers: Vec<LayerParams>,
    /// `[d_model, num_classes]`
    pub head_weight: Array,
    /// `[num_classes]`
    pub head_bias: Array,
}

const INIT_STD: f64 = 0.02;

impl TransformerModel {
    /// Gaussian-initialized model (std 0.02 weights, zero biases, identity
    /// layer norms).
    pub fn init(config: &ModelConfig, rng: &mut impl Rng, precision: Precision) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let dk = config.d_k();
        let layers = (0..config.num_layers)
            .map(|_| LayerParams {
                attn: AttentionParams {
                    w_q: (0..config.num_heads)
                        .map(|_| Array::randn(&[d, dk], INIT_STD, rng, precision))
                        .collect(),
                    w_k: (0..config.num_heads)
                        .map(|_| Array::randn(&[d, dk], INIT_STD, rng, precision))
                        .collect(),
                    w_v: (0..config.num_heads)
                        .map(|_| Array::randn(&[d, dk], INIT_STD, rng, precision))
                        .collect(),
                    b_q: (0..config.num_heads).map(|_| Array::zeros(&[dk])).collect(),
                    b_k: (0..config.num_heads).map(|_| Array::zeros(&[dk])).collect(),
                    b_v: (0..config.num_heads).map(|_| Array::zeros(&[dk])).collect(),
                    w_o: Array::randn(&[d, d], INIT_STD, rng, precision),
                    b_o: Array::zeros(&[d]),
                },
                ln1: LayerNormParams::identity(d),
                ffn: FfnParams {
                    w1: Array::randn(&[d, config.d_ff], INIT_STD, rng, precision),
                    b1: Array::zeros(&[config.d_ff]),
                    w2: Array::randn(&[config.d_ff, d], INIT_STD, rng, precision),
                    b2: Array::zeros(&[d]),
                },
                ln2: LayerNormParams::identity(d),
            })
            .collect();
        Ok(TransformerModel {
            config: config.clone(),
            token_embedding: Array::randn(&[config.vocab_size, d], INIT_STD, rng, precision),
            pos_embedding: Array::randn(&[config.max_seq_len, d], INIT_STD, rng, precision),
            layers,
            head_weight: Array::randn(&[d, config.num_classes], INIT_STD, rng, precision),
            head_bias: Array::zeros(&[config.num_classes]),
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Visit every parameter in checkpoint order with its canonical name.
    pub fn for_each_parameter<'a>(&'a self, mut f: impl FnMut(String, &'a Array)) {
        f("embedding.token".into(), &self.token_embedding);
        f("embedding.position".into(), &self.pos_embedding);
        for (i, layer) in self.layers.iter().enumerate() {
            for (h, w) in layer.attn.w_q.iter().enumerate() {
                f(format!("layers.{i}.attn.w_q.{h}"), w);
            }
            for (h, b) in layer.attn.b_q.iter().enumerate() {
                f(format!("layers.{i}.attn.b_q.{h}"), b);
            }
            for (h, w) in layer.attn.w_k.iter().enumerate() {
                f(format!("layers.{i}.attn.w_k.{h}"), w);
            }
            for (h, b) in layer.attn.b_k.iter().enumerate() {
                f(format!("layers.{i}.attn.b_k.{h}"), b);
            }
            for (h, w) in layer.attn.w_v.iter().enumerate() {
                f(format!("layers.{i}.attn.w_v.{h}"), w);
            }
            for (h, b) in layer.attn.b_v.iter().enumerate() {
                f(format!("layers.{i}.attn.b_v.{h}"), b);
            }
            f(format!("layers.{i}.attn.w_o"), &layer.attn.w_o);
            f(format!("layers.{i}.attn.b_o"), &layer.attn.b_o);
            f(format!("layers.{i}.ln1.gain"), &layer.ln1.gain);
            f(format!("layers.{i}.ln1.bias"), &layer.ln1.bias);
            f(format!("layers.{i}.ffn.w1"), &layer.ffn.w1);
            f(format!("layers.{i}.ffn.b1"), &layer.ffn.b1);
            f(format!("layers.{i}.ffn.w2"), &layer.ffn.w2);
            f(format!("layers.{i}.ffn.b2"), &layer.ffn.b2);
            f(format!("layers.{i}.ln2.gain"), &layer.ln2.gain);
            f(format!("layers.{i}.ln2.bias"), &layer.ln2.bias);
        }
        f("head.weight".into(), &self.head_weight);
        f("head.bias".into(), &self.head_bias);
    }

    /// Named parameters in checkpoint order.
    pub fn named_parameters(&self) -> Vec<(String, &Array)> {
        let mut out = Vec::new();
        self.for_each_parameter(|name, a| out.push((name, a)));
        out
    }

    fn for_each_parameter_mut(&mut self, mut f: impl FnMut(&mut Array)) {
        f(&mut self.token_embedding);
        f(&mut self.pos_embedding);
        for layer in self.layers.iter_mut() {
            for w in layer.attn.w_q.iter_mut() {
                f(w);
            }
            for b in layer.attn.b_q.iter_mut() {
                f(b);
            }
            for w in layer.attn.w_k.iter_mut() {
                f(w);
            }
            for b in layer.attn.b_k.iter_mut() {
                f(b);
            }
            for w in layer.attn.w_v.iter_mut() {
                f(w);
            }
            for b in layer.attn.b_v.iter_mut() {
                f(b);
            }
            f(&mut layer.attn.w_o);
            f(&mut layer.attn.b_o);
            f(&mut layer.ln1.gain);
            f(&mut layer.ln1.bias);
            f(&mut layer.ffn.w1);
            f(&mut layer.ffn.b1);
            f(&mut layer.ffn.w2);
            f(&mut layer.ffn.b2);
            f(&mut layer.ln2.gain);
            f(&mut layer.ln2.bias);
        }
        f(&mut self.head_weight);
        f(&mut self.head_bias);
    }

    /// All parameter values as one flat vector, in checkpoint order.
    pub fn flatten_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.for_each_parameter(|_, a| out.extend_from_slice(a.data()));
        out
    }

    /// Overwrite every parameter from a flat vector in checkpoint order.
    pub fn write_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        let expected: usize = self.named_parameters().iter().map(|(_, a)| a.len()).sum();
        if flat.len() != expected {
            return Err(Error::contract(
                "write_flat_params",
                format!("flat vector has {} values, expected {expected}", flat.len()),
            ));
        }
        let mut offset = 0;
        self.for_each_parameter_mut(|a| {
            let n = a.len();
            a.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        });
        Ok(())
    }

    /// Rebuild a model from named tensors (e.g. a loaded checkpoint). Layer
    /// FFN widths are taken from the stored shapes so compressed proxies
    /// round-trip; everything else must match `config`.
    pub fn from_named(config: &ModelConfig, tensors: &[(String, Array)]) -> Result<Self> {
        config.validate()?;
        let lookup = |name: &str| -> Result<Array> {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, a)| a.clone())
                .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor `{name}`")))
        };
        let d = config.d_model;
        let mut layers = Vec::with_capacity(config.num_layers);
        for i in 0..config.num_layers {
            let attn = AttentionParams {
                w_q: (0..config.num_heads)
                    .map(|h| lookup(&format!("layers.{i}.attn.w_q.{h}")))
                    .collect::<Result<_>>()?,
                b_q: (0..config.num_heads)
                    .map(|h| lookup(&format!("layers.{i}.attn.b_q.{h}")))
                    .collect::<Result<_>>()?,
                w_k: (0..config.num_heads)
                    .map(|h| lookup(&format!("layers.{i}.attn.w_k.{h}")))
                    .collect::<Result<_>>()?,
                b_k: (0..config.num_heads)
                    .map(|h| lookup(&format!("layers.{i}.attn.b_k.{h}")))
                    .collect::<Result<_>>()?,
                w_v: (0..config.num_heads)
                    .map(|h| lookup(&format!("layers.{i}.attn.w_v.{h}")))
                    .collect::<Result<_>>()?,
                b_v: (0..config.num_heads)
                    .map(|h| lookup(&format!("layers.{i}.attn.b_v.{h}")))
                    .collect::<Result<_>>()?,
                w_o: lookup(&format!("layers.{i}.attn.w_o"))?,
                b_o: lookup(&format!("layers.{i}.attn.b_o"))?,
            };
            let ffn = FfnParams {
                w1: lookup(&format!("layers.{i}.ffn.w1"))?,
                b1: lookup(&format!("layers.{i}.ffn.b1"))?,
                w2: lookup(&format!("layers.{i}.ffn.w2"))?,
                b2: lookup(&format!("layers.{i}.ffn.b2"))?,
            };
            if ffn.w1.rows() != d || ffn.w2.cols() != d || ffn.w1.cols() != ffn.w2.rows() {
                return Err(Error::Format(format!(
                    "layer {i} ffn shapes are inconsistent: w1 {:?}, w2 {:?}",
                    ffn.w1.shape(),
                    ffn.w2.shape()
                )));
            }
            layers.push(LayerParams {
                attn,
                ln1: LayerNormParams {
                    gain: lookup(&format!("layers.{i}.ln1.gain"))?,
                    bias: lookup(&format!("layers.{i}.ln1.bias"))?,
                },
                ffn,
                ln2: LayerNormParams {
                    gain: lookup(&format!("layers.{i}.ln2.gain"))?,
                    bias: lookup(&format!("layers.{i}.ln2.bias"))?,
                },
            });
        }
        Ok(TransformerModel {
            config: config.clone(),
            token_embedding: lookup("embedding.token")?,
            pos_embedding: lookup("embedding.position")?,
            layers,
            head_weight: lookup("head.weight")?,
            head_bias: lookup("head.bias")?,
        })
    }
}

/// Exact parameter counts, split the way the cost analysis splits them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ParamCounts {
    /// All transformer-layer parameters (MHA + FFN + LayerNorm), biases included.
    pub transformer_exact: u64,
    /// Transformer-layer parameters without MHA/FFN bias vectors
    /// (LayerNorm affine pairs stay counted).
    pub transformer_no_bias: u64,
    pub embedding: u64,
    pub head: u64,
}

/// Closed-form parameter counts for a config (uniform `d_ff` across layers).
/// Matches [`count_parameters`] on a freshly built model to the digit.
pub fn count_parameters_config(config: &ModelConfig) -> ParamCounts {
    let (l, d, dff) = (
        config.num_layers as u64,
        config.d_model as u64,
        config.d_ff as u64,
    );
    let per_layer_weights = 4 * d * d + 2 * d * dff + 4 * d;
    let per_layer_biases = 4 * d + dff + d;
    ParamCounts {
        transformer_exact: l * (per_layer_weights + per_layer_biases),
        transformer_no_bias: l * per_layer_weights,
        embedding: (config.vocab_size as u64 + config.max_seq_len as u64) * d,
        head: d * config.num_classes as u64 + config.num_classes as u64,
    }
}

/// Count model parameters by section: transformer layers, embeddings, head.
pub fn count_parameters(model: &TransformerModel) -> ParamCounts {
    let mut counts = ParamCounts {
        transformer_exact: 0,
        transformer_no_bias: 0,
        embedding: 0,
        head: 0,
    };
    model.for_each_parameter(|name, a| {
        let n = a.len() as u64;
        if name.starts_with("embedding.") {
            counts.embedding += n;
        } else if name.starts_with("head.") {
            counts.head += n;
        } else {
            counts.transformer_exact += n;
            let is_proj_bias = name.contains(".attn.b_")
                || name.ends_with(".ffn.b1")
                || name.ends_with(".ffn.b2");
            if !is_proj_bias {
                counts.transformer_no_bias += n;
            }
        }
    });
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn config_validates_head_divisibility() {
        let bad = ModelConfig {
            num_layers: 1,
            num_heads: 3,
            d_model: 8,
            d_ff: 16,
            vocab_size: 10,
            max_seq_len: 4,
            num_classes: 2,
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn hand_counted_tiny_model() {
        // L=1, d_model=4, h=1, d_ff=8: weights 4·16 + 2·4·8 = 128, LN affine 16.
        let cfg = ModelConfig {
            num_layers: 1,
            num_heads: 1,
            d_model: 4,
            d_ff: 8,
            vocab_size: 6,
            max_seq_len: 3,
            num_classes: 2,
        };
        let mut r = rng::stream(1, "count", 0, 0);
        let m = TransformerModel::init(&cfg, &mut r, Precision::F64Verify).unwrap();
        let counts = count_parameters(&m);
        assert_eq!(counts.transformer_no_bias, 144);
        // Exact adds per-layer biases: 4·d_k·h + d_model (MHA) + d_ff + d_model (FFN).
        assert_eq!(counts.transformer_exact, 144 + (3 * 4 + 4) + (8 + 4));
        assert_eq!(counts.embedding, (6 + 3) * 4);
        assert_eq!(counts.head, 4 * 2 + 2);
    }

    #[test]
    fn zero_layer_model_counts_zero_transformer_params() {
        let cfg = ModelConfig {
            num_layers: 0,
            num_heads: 1,
            d_model: 4,
            d_ff: 8,
            vocab_size: 6,
            max_seq_len: 3,
            num_classes: 2,
        };
        let mut r = rng::stream(1, "count0", 0, 0);
        let m = TransformerModel::init(&cfg, &mut r, Precision::F64Verify).unwrap();
        assert_eq!(count_parameters(&m).transformer_exact, 0);
    }

    #[test]
    fn reference_config_counts_near_paper_values() {
        // BERT-base shape algebra, no allocation: weights only.
        let (l, d, dff) = (12u64, 768u64, 3072u64);
        let mha = 4 * d * d;
        let ffn_full = 2 * d * dff;
        let ln = 4 * d;
        let full = l * (mha + ffn_full + ln);
        let sub = l * (mha + 2 * d * 768 + ln);
        let within = |x: u64, target: f64| (x as f64 - target).abs() / target <= 0.15;
        assert!(within(full, 81e6), "full {full}");
        assert!(within(sub, 47e6), "sub {sub}");
    }
}
