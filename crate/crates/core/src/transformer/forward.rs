//! Forward passes over a tape, with per-layer tracing hooks for distillation
//! and a training-scope switch that decides which parameters receive
//! gradients.

use crate::error::{Error, Result};
use crate::tensor::{Array, Tape, Tensor};
use crate::transformer::{AdapterSet, TransformerModel};

/// Which parameter group is trainable for a given pass.
#[derive(Clone, Debug, PartialEq)]
pub enum TrainScope {
    /// Nothing receives gradients (teacher / evaluation passes).
    Frozen,
    /// Every model parameter (and any attached adapter) is trainable.
    All,
    /// Only the classification head.
    HeadOnly,
    /// Only the FFN core tensors (w1, b1, w2) of every layer.
    FfnCore,
    /// Only attached adapter tensors.
    AdaptersOnly,
}

struct BoundPair {
    a: Tensor,
    b: Tensor,
}

struct BoundLayerAdapters {
    q: BoundPair,
    k: BoundPair,
    v: BoundPair,
    o: BoundPair,
}

struct BoundLayer {
    w_q: Vec<Tensor>,
    b_q: Vec<Tensor>,
    w_k: Vec<Tensor>,
    b_k: Vec<Tensor>,
    w_v: Vec<Tensor>,
    b_v: Vec<Tensor>,
    w_o: Tensor,
    b_o: Tensor,
    ln1_gain: Tensor,
    ln1_bias: Tensor,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
    ln2_gain: Tensor,
    ln2_bias: Tensor,
    adapters: Option<BoundLayerAdapters>,
}

/// Model (and optional adapters) registered on a tape.
pub struct ForwardTrace {
    token_embedding: Tensor,
    pos_embedding: Tensor,
    layers: Vec<BoundLayer>,
    head_weight: Tensor,
    head_bias: Tensor,
    scaling: f64,
    num_heads: usize,
    d_k: usize,
    max_seq_len: usize,
    /// Stacked logits `[batch, num_classes]`, set by `run`.
    pub logits: Option<Tensor>,
    /// Per layer: stacked post-LN2 outputs `[batch, seq, d_model]`.
    pub layer_outputs: Vec<Tensor>,
    /// Per layer: stacked post-GELU FFN activations `[batch, seq, d_ff]`.
    pub ffn_hidden: Vec<Tensor>,
    /// Per layer, per head: attention probability matrices `[seq, seq]`,
    /// one entry per sample in order.
    pub attention_probs: Vec<Vec<Vec<Tensor>>>,
}

impl ForwardTrace {
    /// Register `model` (and optional `adapters`) on `tape` under `scope`.
    pub fn bind(
        tape: &mut Tape,
        model: &TransformerModel,
        adapters: Option<&AdapterSet>,
        scope: TrainScope,
    ) -> Result<Self> {
        if let Some(ad) = adapters {
            if ad.layers.len() != model.layers.len() {
                return Err(Error::contract(
                    "ForwardTrace::bind",
                    format!(
                        "adapter set covers {} layers, model has {}",
                        ad.layers.len(),
                        model.layers.len()
                    ),
                ));
            }
        }
        let all = scope == TrainScope::All;
        let emb_grad = all;
        let head_grad = all || scope == TrainScope::HeadOnly;
        let ffn_grad = all || scope == TrainScope::FfnCore;
        let adapter_grad = all || scope == TrainScope::AdaptersOnly;

        let token_embedding = tape.leaf(&model.token_embedding, emb_grad);
        let pos_embedding = tape.leaf(&model.pos_embedding, emb_grad);
        let mut layers = Vec::with_capacity(model.layers.len());
        for (i, layer) in model.layers.iter().enumerate() {
            let bind_vec = |tape: &mut Tape, xs: &[Array]| -> Vec<Tensor> {
                xs.iter().map(|x| tape.leaf(x, all)).collect()
            };
            let bound_adapters = match adapters.and_then(|a| a.layers[i].as_ref()) {
                Some(la) => {
                    let mut bp = |pair: &crate::transformer::LoraPair| BoundPair {
                        a: tape.leaf(&pair.a, adapter_grad),
                        b: tape.leaf(&pair.b, adapter_grad),
                    };
                    Some(BoundLayerAdapters {
                        q: bp(&la.q),
                        k: bp(&la.k),
                        v: bp(&la.v),
                        o: bp(&la.o),
                    })
                }
                None => None,
            };
            layers.push(BoundLayer {
                w_q: bind_vec(tape, &layer.attn.w_q),
                b_q: bind_vec(tape, &layer.attn.b_q),
                w_k: bind_vec(tape, &layer.attn.w_k),
                b_k: bind_vec(tape, &layer.attn.b_k),
                w_v: bind_vec(tape, &layer.attn.w_v),
                b_v: bind_vec(tape, &layer.attn.b_v),
                w_o: tape.leaf(&layer.attn.w_o, all),
                b_o: tape.leaf(&layer.attn.b_o, all),
                ln1_gain: tape.leaf(&layer.ln1.gain, all),
                ln1_bias: tape.leaf(&layer.ln1.bias, all),
                w1: tape.leaf(&layer.ffn.w1, ffn_grad),
                b1: tape.leaf(&layer.ffn.b1, ffn_grad),
                w2: tape.leaf(&layer.ffn.w2, ffn_grad),
                b2: tape.leaf(&layer.ffn.b2, all),
                ln2_gain: tape.leaf(&layer.ln2.gain, all),
                ln2_bias: tape.leaf(&layer.ln2.bias, all),
                adapters: bound_adapters,
            });
        }
        Ok(ForwardTrace {
            token_embedding,
            pos_embedding,
            layers,
            head_weight: tape.leaf(&model.head_weight, head_grad),
            head_bias: tape.leaf(&model.head_bias, head_grad),
            scaling: adapters.map(|a| a.scaling).unwrap_or(0.0),
            num_heads: model.config.num_heads,
            d_k: model.config.d_k(),
            max_seq_len: model.config.max_seq_len,
            logits: None,
            layer_outputs: Vec::new(),
            ffn_hidden: Vec::new(),
            attention_probs: Vec::new(),
        })
    }

    /// Run the forward pass over a batch of token sequences. Sequences are
    /// processed independently, so per-sample outputs do not depend on batch
    /// composition.
    pub fn run(&mut self, tape: &mut Tape, batch: &[Vec<u32>]) -> Result<Tensor> {
        if batch.is_empty() {
            return Err(Error::contract("forward", "empty batch"));
        }
        let num_layers = self.layers.len();
        let mut logit_rows = Vec::with_capacity(batch.len());
        let mut per_layer_out: Vec<Vec<Tensor>> = vec![Vec::new(); num_layers];
        let mut per_layer_hidden: Vec<Vec<Tensor>> = vec![Vec::new(); num_layers];
        self.attention_probs = vec![vec![Vec::new(); self.num_heads]; num_layers];
        let seq_len = batch[0].len();
        for tokens in batch {
            if tokens.is_empty() {
                return Err(Error::contract("forward", "empty token sequence"));
            }
            if tokens.len() > self.max_seq_len {
                return Err(Error::IndexOutOfRange {
                    op: "forward",
                    index: tokens.len(),
                    bound: self.max_seq_len + 1,
                });
            }
            if tokens.len() != seq_len {
                return Err(Error::contract(
                    "forward",
                    "all sequences in a batch must share one length",
                ));
            }
            let tok = tape.embed(self.token_embedding, tokens)?;
            let pos_ids: Vec<u32> = (0..tokens.len() as u32).collect();
            let pos = tape.embed(self.pos_embedding, &pos_ids)?;
            let mut x = tape.add(tok, pos)?;
            for (i, layer) in self.layers.iter().enumerate() {
                let (x2, hidden, probs) = Self::layer_forward(
                    tape,
                    layer,
                    x,
                    self.num_heads,
                    self.d_k,
                    self.scaling,
                )?;
                for (h, p) in probs.into_iter().enumerate() {
                    self.attention_probs[i][h].push(p);
                }
                per_layer_out[i].push(x2);
                per_layer_hidden[i].push(hidden);
                x = x2;
            }
            let cls = tape.slice_rows(x, 0, 1)?;
            let scores = tape.matmul(cls, self.head_weight)?;
            logit_rows.push(tape.add_row_bias(scores, self.head_bias)?);
        }
        let logits = tape.concat_rows(&logit_rows)?;
        self.layer_outputs = per_layer_out
            .into_iter()
            .map(|samples| {
                let stacked = tape.concat_rows(&samples)?;
                let d = tape.shape(stacked)[1];
                tape.reshape(stacked, &[batch.len(), seq_len, d])
            })
            .collect::<Result<_>>()?;
        self.ffn_hidden = per_layer_hidden
            .into_iter()
            .map(|samples| {
                let stacked = tape.concat_rows(&samples)?;
                let d = tape.shape(stacked)[1];
                tape.reshape(stacked, &[batch.len(), seq_len, d])
            })
            .collect::<Result<_>>()?;
        self.logits = Some(logits);
        Ok(logits)
    }

    fn layer_forward(
        tape: &mut Tape,
        layer: &BoundLayer,
        x: Tensor,
        num_heads: usize,
        d_k: usize,
        scaling: f64,
    ) -> Result<(Tensor, Tensor, Vec<Tensor>)> {
        let inv_sqrt_dk = 1.0 / (d_k as f64).sqrt();
        // Full-width adapter deltas, computed once and sliced per head.
        let deltas = match &layer.adapters {
            Some(ad) => {
                let mut delta = |pair: &BoundPair| -> Result<Tensor> {
                    let xa = tape.matmul(x, pair.a)?;
                    let xab = tape.matmul(xa, pair.b)?;
                    tape.scale(xab, scaling)
                };
                Some((delta(&ad.q)?, delta(&ad.k)?, delta(&ad.v)?))
            }
            None => None,
        };
        let mut heads = Vec::with_capacity(num_heads);
        let mut probs_out = Vec::with_capacity(num_heads);
        for h in 0..num_heads {
            let mut q = tape.matmul(x, layer.w_q[h])?;
            q = tape.add_row_bias(q, layer.b_q[h])?;
            let mut k = tape.matmul(x, layer.w_k[h])?;
            k = tape.add_row_bias(k, layer.b_k[h])?;
            let mut v = tape.matmul(x, layer.w_v[h])?;
            v = tape.add_row_bias(v, layer.b_v[h])?;
            if let Some((dq, dk_, dv)) = &deltas {
                let qs = tape.slice_cols(*dq, h * d_k, d_k)?;
                q = tape.add(q, qs)?;
                let ks = tape.slice_cols(*dk_, h * d_k, d_k)?;
                k = tape.add(k, ks)?;
                let vs = tape.slice_cols(*dv, h * d_k, d_k)?;
                v = tape.add(v, vs)?;
            }
            let scores = tape.matmul_nt(q, k)?;
            let scaled = tape.scale(scores, inv_sqrt_dk)?;
            let probs = tape.softmax_rows(scaled)?;
            let ctx = tape.matmul(probs, v)?;
            heads.push(ctx);
            probs_out.push(probs);
        }
        let cat = tape.concat_cols(&heads)?;
        let mut attn_out = tape.matmul(cat, layer.w_o)?;
        attn_out = tape.add_row_bias(attn_out, layer.b_o)?;
        if let Some(ad) = &layer.adapters {
            let ca = tape.matmul(cat, ad.o.a)?;
            let cab = tape.matmul(ca, ad.o.b)?;
            let delta_o = tape.scale(cab, scaling)?;
            attn_out = tape.add(attn_out, delta_o)?;
        }
        let res1 = tape.add(x, attn_out)?;
        let x1 = tape.layer_norm(res1, layer.ln1_gain, layer.ln1_bias)?;
        let pre = tape.matmul(x1, layer.w1)?;
        let pre_b = tape.add_row_bias(pre, layer.b1)?;
        let hidden = tape.gelu(pre_b)?;
        let ffn = tape.matmul(hidden, layer.w2)?;
        let ffn_b = tape.add_row_bias(ffn, layer.b2)?;
        let res2 = tape.add(x1, ffn_b)?;
        let x2 = tape.layer_norm(res2, layer.ln2_gain, layer.ln2_bias)?;
        Ok((x2, hidden, probs_out))
    }

    /// Tape handles of the FFN core tensors (w1, b1, w2) per layer.
    pub fn ffn_core_handles(&self) -> Vec<[Tensor; 3]> {
        self.layers.iter().map(|l| [l.w1, l.b1, l.w2]).collect()
    }

    /// Tape handles of the affine head tensors.
    pub fn head_handles(&self) -> [Tensor; 2] {
        [self.head_weight, self.head_bias]
    }

    /// Tape handles of adapter pairs, flattened in the same order as
    /// [`AdapterSet::flatten`]: per adapted layer, projections q/k/v/o,
    /// A before B.
    pub fn adapter_handles(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        for layer in &self.layers {
            if let Some(ad) = &layer.adapters {
                for pair in [&ad.q, &ad.k, &ad.v, &ad.o] {
                    out.push(pair.a);
                    out.push(pair.b);
                }
            }
        }
        out
    }

    /// Handle of layer `i`'s w1/b1/w2 (for masked updates).
    pub fn layer_ffn_handles(&self, i: usize) -> [Tensor; 3] {
        [self.layers[i].w1, self.layers[i].b1, self.layers[i].w2]
    }

    /// Tape handles of every model parameter, in checkpoint order (matching
    /// [`TransformerModel::flatten_params`]).
    pub fn model_handles(&self) -> Vec<Tensor> {
        let mut out = vec![self.token_embedding, self.pos_embedding];
        for layer in &self.layers {
            out.extend_from_slice(&layer.w_q);
            out.extend_from_slice(&layer.b_q);
            out.extend_from_slice(&layer.w_k);
            out.extend_from_slice(&layer.b_k);
            out.extend_from_slice(&layer.w_v);
            out.extend_from_slice(&layer.b_v);
            out.extend_from_slice(&[
                layer.w_o,
                layer.b_o,
                layer.ln1_gain,
                layer.ln1_bias,
                layer.w1,
                layer.b1,
                layer.w2,
                layer.b2,
                layer.ln2_gain,
                layer.ln2_bias,
            ]);
        }
        out.push(self.head_weight);
        out.push(self.head_bias);
        out
    }

    pub fn token_embedding_handle(&self) -> Tensor {
        self.token_embedding
    }

    pub fn attention_wq_handle(&self, layer: usize, head: usize) -> Tensor {
        self.layers[layer].w_q[head]
    }

    pub fn ln2_gain_handle(&self, layer: usize) -> Tensor {
        self.layers[layer].ln2_gain
    }
}

/// Logits of `model` on `batch` (frozen pass on a fresh trace).
pub fn forward(
    model: &TransformerModel,
    adapters: Option<&AdapterSet>,
    batch: &[Vec<u32>],
    tape: &mut Tape,
) -> Result<Tensor> {
    let mut trace = ForwardTrace::bind(tape, model, adapters, TrainScope::Frozen)?;
    trace.run(tape, batch)
}

/// Logits plus per-layer post-LN2 outputs (`[batch, seq, d_model]` each).
pub fn forward_with_layer_outputs(
    model: &TransformerModel,
    adapters: Option<&AdapterSet>,
    batch: &[Vec<u32>],
    tape: &mut Tape,
) -> Result<(Tensor, Vec<Tensor>)> {
    let mut trace = ForwardTrace::bind(tape, model, adapters, TrainScope::Frozen)?;
    let logits = trace.run(tape, batch)?;
    Ok((logits, trace.layer_outputs.clone()))
}

/// Per-layer post-GELU hidden activations (`[batch, seq, d_ff]` each).
pub fn ffn_hidden_activations(
    model: &TransformerModel,
    batch: &[Vec<u32>],
    tape: &mut Tape,
) -> Result<Vec<Tensor>> {
    let mut trace = ForwardTrace::bind(tape, model, None, TrainScope::Frozen)?;
    trace.run(tape, batch)?;
    Ok(trace.ffn_hidden.clone())
}
