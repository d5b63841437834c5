//! Miniature transformer family: encoder-only, encoder–decoder, and
//! decoder-only stacks with a switchable layer-norm placement and a per-part
//! quantization strategy.
//!
//! Parameter naming (all weights are `[d_out, d_in]`, applied as `x W^T + b`):
//!
//! ```text
//! tok_emb                      [vocab, h]
//! pos_emb                      [max_seq, h]
//! enc.{i}.qkv.{w,b}            [3h, h]      fused q/k/v projection
//! enc.{i}.attn_out.{w,b}       [h, h]
//! enc.{i}.mlp_int.{w,b}        [4h, h]
//! enc.{i}.mlp_out.{w,b}        [h, 4h]
//! enc.{i}.ln1.{g,b}  ln2.{g,b} [h]          ln1 = attention, ln2 = mlp
//! dec.{i}.*                    same, plus for encoder_decoder:
//! dec.{i}.cross_q.{w,b}        [h, h]
//! dec.{i}.cross_kv.{w,b}       [2h, h]
//! dec.{i}.cross_out.{w,b}      [h, h]
//! dec.{i}.ln3.{g,b}            [h]          cross-attention norm
//! ln_f.{g,b}, enc_ln_f.{g,b}   [h]          pre-LN final norms only
//! head.{w,b}                   [vocab, h]
//! ```
//!
//! Embeddings, layer norms, attention internals, and the LM head always run
//! in float; the strategy only touches the four linear parts.

pub mod config;
mod qlinear;

pub use qlinear::{effective_weight, EffectiveWeight};
mod reduce;

pub use config::{part_of_param, Arch, LnPlacement, ModelConfig, Part, QuantStrategy};
pub use reduce::{layer_reduce, reduce_model, CopyPolicy, LayerMapping};

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::quant::QTensor;
use crate::sparsity::{CompositionOrder, SparsityMask};
use crate::tensor::{MaskMode, NodeId, Tape, Tensor};

pub const LN_EPS: f32 = 1e-5;
const INIT_STD: f32 = 0.02;

/// Pruning masks for a subset of part weights plus the order in which they
/// compose with quantization.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    pub masks: BTreeMap<String, SparsityMask>,
    pub order: CompositionOrder,
}

/// A model is its config plus named parameters. `qweights` optionally holds
/// container-materialized integer weights for part weights; when present
/// they are used verbatim by enabled parts (and `params` keeps a dequantized
/// float mirror of the same values).
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: BTreeMap<String, Tensor>,
    pub qweights: BTreeMap<String, QTensor>,
    pub masks: Option<MaskSet>,
    /// Default execution strategy (persisted with the model); `forward`
    /// callers may override it per call.
    pub strategy: QuantStrategy,
}

/// Deterministically initialized model: linear and embedding weights are
/// N(0, 0.02) draws from one seeded stream, biases zero, LN gains one.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = config.hidden;
    let f = config.ffn_dim();
    let mut params: BTreeMap<String, Tensor> = BTreeMap::new();

    // Draw order is this fixed construction sequence, independent of map
    // iteration order.
    params.insert("tok_emb".into(), Tensor::randn(vec![config.vocab_size, h], INIT_STD, &mut rng));
    params.insert("pos_emb".into(), Tensor::randn(vec![config.max_seq, h], INIT_STD, &mut rng));

    let add_block = |params: &mut BTreeMap<String, Tensor>,
                         rng: &mut ChaCha8Rng,
                         prefix: &str,
                         with_cross: bool| {
        let lin = |rng: &mut ChaCha8Rng, o: usize, i: usize| Tensor::randn(vec![o, i], INIT_STD, rng);
        params.insert(format!("{prefix}.qkv.w"), lin(rng, 3 * h, h));
        params.insert(format!("{prefix}.qkv.b"), Tensor::zeros(vec![3 * h]));
        params.insert(format!("{prefix}.attn_out.w"), lin(rng, h, h));
        params.insert(format!("{prefix}.attn_out.b"), Tensor::zeros(vec![h]));
        if with_cross {
            params.insert(format!("{prefix}.cross_q.w"), lin(rng, h, h));
            params.insert(format!("{prefix}.cross_q.b"), Tensor::zeros(vec![h]));
            params.insert(format!("{prefix}.cross_kv.w"), lin(rng, 2 * h, h));
            params.insert(format!("{prefix}.cross_kv.b"), Tensor::zeros(vec![2 * h]));
            params.insert(format!("{prefix}.cross_out.w"), lin(rng, h, h));
            params.insert(format!("{prefix}.cross_out.b"), Tensor::zeros(vec![h]));
            params.insert(format!("{prefix}.ln3.g"), Tensor::full(vec![h], 1.0));
            params.insert(format!("{prefix}.ln3.b"), Tensor::zeros(vec![h]));
        }
        params.insert(format!("{prefix}.mlp_int.w"), lin(rng, f, h));
        params.insert(format!("{prefix}.mlp_int.b"), Tensor::zeros(vec![f]));
        params.insert(format!("{prefix}.mlp_out.w"), lin(rng, h, f));
        params.insert(format!("{prefix}.mlp_out.b"), Tensor::zeros(vec![h]));
        params.insert(format!("{prefix}.ln1.g"), Tensor::full(vec![h], 1.0));
        params.insert(format!("{prefix}.ln1.b"), Tensor::zeros(vec![h]));
        params.insert(format!("{prefix}.ln2.g"), Tensor::full(vec![h], 1.0));
        params.insert(format!("{prefix}.ln2.b"), Tensor::zeros(vec![h]));
    };

    for i in 0..config.num_encoder_layers {
        add_block(&mut params, &mut rng, &format!("enc.{i}"), false);
    }
    let cross = config.arch == Arch::EncoderDecoder;
    for i in 0..config.num_decoder_layers {
        add_block(&mut params, &mut rng, &format!("dec.{i}"), cross);
    }
    if config.ln_placement == LnPlacement::Pre {
        params.insert("ln_f.g".into(), Tensor::full(vec![h], 1.0));
        params.insert("ln_f.b".into(), Tensor::zeros(vec![h]));
        if cross {
            params.insert("enc_ln_f.g".into(), Tensor::full(vec![h], 1.0));
            params.insert("enc_ln_f.b".into(), Tensor::zeros(vec![h]));
        }
    }
    params.insert("head.w".into(), Tensor::randn(vec![config.vocab_size, h], INIT_STD, &mut rng));
    params.insert("head.b".into(), Tensor::zeros(vec![config.vocab_size]));

    Ok(Model {
        config: *config,
        params,
        qweights: BTreeMap::new(),
        masks: None,
        strategy: QuantStrategy::all_disabled(),
    })
}

impl Model {
    pub fn param_numel(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Names of the quantizable/prunable part weights, with their parts, in
    /// name order.
    pub fn part_weights(&self) -> Vec<(String, Part)> {
        self.params
            .keys()
            .filter_map(|name| part_of_param(name).map(|p| (name.clone(), p)))
            .collect()
    }

    /// Convenience eval pass on a fresh tape.
    pub fn run_eval(&self, batch: &Batch, strategy: &QuantStrategy) -> Result<(Tape, ForwardOut)> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, batch, strategy, None, Mode::Eval)?;
        Ok((tape, out))
    }

    /// Per-position next-token negative log-likelihoods for one window
    /// (`window[t]` predicts `window[t+1]`; length `len - 1`).
    pub fn next_token_nll(&self, window: &[u32], strategy: &QuantStrategy) -> Result<Vec<f64>> {
        if self.config.arch != Arch::DecoderOnly {
            return Err(Error::InvalidConfig(
                "next-token likelihood needs a decoder_only model".into(),
            ));
        }
        if window.len() < 2 {
            return Err(Error::InvalidConfig(format!(
                "need at least 2 tokens to score next-token prediction, got {}",
                window.len()
            )));
        }
        let batch = Batch::single(TokenBatch::new(1, window.len(), window.to_vec())?);
        let (tape, out) = self.run_eval(&batch, strategy)?;
        let logits = tape.value(out.logits);
        let v = self.config.vocab_size;
        let mut nll = Vec::with_capacity(window.len() - 1);
        for t in 0..window.len() - 1 {
            let row = &logits.data()[t * v..(t + 1) * v];
            nll.push(log_sum_exp(row) - row[window[t + 1] as usize] as f64);
        }
        Ok(nll)
    }

    /// `exp(mean NLL)` over the stream, scored in non-overlapping `max_seq`
    /// windows. A trailing window shorter than 2 tokens is dropped.
    pub fn perplexity(&self, stream: &[u32], strategy: &QuantStrategy) -> Result<f64> {
        let mut total = 0.0f64;
        let mut count = 0usize;
        for window in stream.chunks(self.config.max_seq) {
            if window.len() < 2 {
                continue;
            }
            let nll = self.next_token_nll(window, strategy)?;
            total += nll.iter().sum::<f64>();
            count += nll.len();
        }
        if count == 0 {
            return Err(Error::InvalidConfig(
                "token stream too short to score perplexity".into(),
            ));
        }
        Ok((total / count as f64).exp())
    }
}

/// Mean-NLL in f64 needs a correctly-rounded log-sum-exp over an f32 row.
pub(crate) fn log_sum_exp(row: &[f32]) -> f64 {
    let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let sum: f64 = row.iter().map(|&x| (x as f64 - max).exp()).sum();
    max + sum.ln()
}

/// `batch` rows of `seq` token ids, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    pub batch: usize,
    pub seq: usize,
    pub ids: Vec<u32>,
}

impl TokenBatch {
    pub fn new(batch: usize, seq: usize, ids: Vec<u32>) -> Result<Self> {
        if batch == 0 || seq == 0 || ids.len() != batch * seq {
            return Err(Error::ShapeMismatch {
                context: "TokenBatch",
                left: vec![batch, seq],
                right: vec![ids.len()],
            });
        }
        Ok(TokenBatch { batch, seq, ids })
    }

    pub fn row(&self, b: usize) -> &[u32] {
        &self.ids[b * self.seq..(b + 1) * self.seq]
    }
}

/// Input to one forward pass. `tokens` feeds the stack that produces logits
/// (the decoder for encoder_decoder); `src` is the encoder-side stream and is
/// required exactly for encoder_decoder models.
#[derive(Debug, Clone)]
pub struct Batch {
    pub tokens: TokenBatch,
    pub src: Option<TokenBatch>,
}

impl Batch {
    pub fn single(tokens: TokenBatch) -> Self {
        Batch { tokens, src: None }
    }

    pub fn pair(src: TokenBatch, tgt: TokenBatch) -> Self {
        Batch { tokens: tgt, src: Some(src) }
    }
}

/// Train mode enables dropout and marks parameters as requiring gradients;
/// the forward values themselves are identical to eval at `dropout = 0`.
pub enum Mode<'r> {
    Eval,
    Train { dropout: f32, rng: &'r mut ChaCha8Rng },
}

impl Mode<'_> {
    fn is_train(&self) -> bool {
        matches!(self, Mode::Train { .. })
    }
}

/// Tape handles for the input of each quantizable part of one layer (the
/// activation that would be quantized), for range probing.
#[derive(Debug, Clone, Copy)]
pub struct PartInputs {
    pub qkv: NodeId,
    pub attn_out: NodeId,
    pub mlp_int: NodeId,
    pub mlp_out: NodeId,
}

impl PartInputs {
    pub fn get(&self, part: Part) -> NodeId {
        match part {
            Part::QkvProj => self.qkv,
            Part::AttnOut => self.attn_out,
            Part::MlpIntermediate => self.mlp_int,
            Part::MlpOut => self.mlp_out,
        }
    }
}

/// Per-layer tape handles captured during a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct LayerTrace {
    /// Pre-softmax attention scores `[B, heads, Tq, Tk]` (masked positions
    /// hold the large negative fill).
    pub attn_scores: NodeId,
    /// Softmax attention probabilities, same shape.
    pub attn_probs: NodeId,
    pub cross_scores: Option<NodeId>,
    pub cross_probs: Option<NodeId>,
    /// Layer output hidden state, token-major `[B*T, h]`.
    pub hidden: NodeId,
    pub parts: PartInputs,
}

/// Everything a forward pass exposes: logits plus the traces distillation
/// and the failure-case analyses consume.
pub struct ForwardOut {
    /// `[B*T, vocab]`, token-major over the logits-producing stream.
    pub logits: NodeId,
    pub enc_layers: Vec<LayerTrace>,
    pub dec_layers: Vec<LayerTrace>,
    /// Encoder memory fed to cross-attention (encoder_decoder only).
    pub enc_memory: Option<NodeId>,
    /// Leaf node of every parameter, for the optimizer.
    pub params: Vec<(String, NodeId)>,
    pub batch: usize,
    pub seq: usize,
}

/// Forward executor: owns the name -> leaf map and the mode (with its RNG)
/// for the duration of one pass.
struct Exec<'m, 'r> {
    model: &'m Model,
    strategy: &'m QuantStrategy,
    masks: Option<&'m MaskSet>,
    ids: BTreeMap<String, NodeId>,
    mode: Mode<'r>,
}

impl Exec<'_, '_> {
    fn p(&self, name: &str) -> Result<NodeId> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidConfig(format!("model has no parameter '{name}'")))
    }

    /// One quantizable linear: `{prefix}.w` / `{prefix}.b` under the
    /// strategy slot for `part`.
    fn qlin(&self, tape: &mut Tape, x: NodeId, prefix: &str, part: Part) -> Result<NodeId> {
        let wname = format!("{prefix}.w");
        let w = self.p(&wname)?;
        let b = self.p(&format!("{prefix}.b"))?;
        let preq = self.model.qweights.get(&wname);
        let mask = self
            .masks
            .and_then(|ms| ms.masks.get(&wname).map(|m| (m, ms.order)));
        qlinear::quantized_linear(tape, x, w, Some(b), preq, mask, self.strategy, part)
    }

    fn dropout(&mut self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        match &mut self.mode {
            Mode::Train { dropout, rng } if *dropout > 0.0 => tape.dropout(x, *dropout, rng),
            _ => Ok(x),
        }
    }

    fn ln(&self, tape: &mut Tape, x: NodeId, prefix: &str) -> Result<NodeId> {
        let g = self.p(&format!("{prefix}.g"))?;
        let b = self.p(&format!("{prefix}.b"))?;
        tape.layer_norm(x, g, b, LN_EPS)
    }

    /// Token + position embeddings (positions tile `0..seq` per row).
    fn embed(&mut self, tape: &mut Tape, tokens: &TokenBatch) -> Result<NodeId> {
        let tok = tape.embedding(self.p("tok_emb")?, &tokens.ids)?;
        let pos_ids: Vec<u32> = (0..tokens.batch)
            .flat_map(|_| 0..tokens.seq as u32)
            .collect();
        let pos = tape.embedding(self.p("pos_emb")?, &pos_ids)?;
        let x = tape.add(tok, pos)?;
        self.dropout(tape, x)
    }

    /// `[B*T, h] -> [B, heads, T, head_dim]`.
    fn split_heads(&self, tape: &mut Tape, x: NodeId, b: usize, t: usize) -> Result<NodeId> {
        let heads = self.model.config.heads;
        let dh = self.model.config.head_dim();
        let r = tape.reshape(x, vec![b, t, heads, dh])?;
        tape.permute(r, &[0, 2, 1, 3])
    }

    /// `[B, heads, T, head_dim] -> [B*T, h]`.
    fn merge_heads(&self, tape: &mut Tape, x: NodeId, b: usize, t: usize) -> Result<NodeId> {
        let h = self.model.config.hidden;
        let p = tape.permute(x, &[0, 2, 1, 3])?;
        tape.reshape(p, vec![b * t, h])
    }

    /// Fused-QKV self-attention. Returns (projected output, scores, probs).
    fn self_attention(
        &mut self,
        tape: &mut Tape,
        x: NodeId,
        prefix: &str,
        b: usize,
        t: usize,
        mode: MaskMode,
    ) -> Result<(NodeId, NodeId, NodeId, NodeId)> {
        let h = self.model.config.hidden;
        let qkv = self.qlin(tape, x, &format!("{prefix}.qkv"), Part::QkvProj)?;
        let q = tape.slice_cols(qkv, 0, h)?;
        let k = tape.slice_cols(qkv, h, 2 * h)?;
        let v = tape.slice_cols(qkv, 2 * h, 3 * h)?;
        let q = self.split_heads(tape, q, b, t)?;
        let k = self.split_heads(tape, k, b, t)?;
        let v = self.split_heads(tape, v, b, t)?;
        let (ctx, scores, probs) = tape.attention(q, k, v, mode)?;
        let merged = self.merge_heads(tape, ctx, b, t)?;
        let out = self.qlin(tape, merged, &format!("{prefix}.attn_out"), Part::AttnOut)?;
        Ok((out, scores, probs, merged))
    }

    /// Decoder-to-encoder attention with a fused KV projection.
    fn cross_attention(
        &mut self,
        tape: &mut Tape,
        x: NodeId,
        memory: NodeId,
        prefix: &str,
        b: usize,
        tq: usize,
        tk: usize,
    ) -> Result<(NodeId, NodeId, NodeId)> {
        let h = self.model.config.hidden;
        let q = self.qlin(tape, x, &format!("{prefix}.cross_q"), Part::QkvProj)?;
        let kv = self.qlin(tape, memory, &format!("{prefix}.cross_kv"), Part::QkvProj)?;
        let k = tape.slice_cols(kv, 0, h)?;
        let v = tape.slice_cols(kv, h, 2 * h)?;
        let q = self.split_heads(tape, q, b, tq)?;
        let k = self.split_heads(tape, k, b, tk)?;
        let v = self.split_heads(tape, v, b, tk)?;
        let (ctx, scores, probs) = tape.attention(q, k, v, MaskMode::Cross)?;
        let merged = self.merge_heads(tape, ctx, b, tq)?;
        let out = self.qlin(tape, merged, &format!("{prefix}.cross_out"), Part::AttnOut)?;
        Ok((out, scores, probs))
    }

    /// Two-linear MLP with GELU. Returns (output, gelu activation node).
    fn mlp(&mut self, tape: &mut Tape, x: NodeId, prefix: &str) -> Result<(NodeId, NodeId)> {
        let a = self.qlin(tape, x, &format!("{prefix}.mlp_int"), Part::MlpIntermediate)?;
        let g = tape.gelu(a);
        let y = self.qlin(tape, g, &format!("{prefix}.mlp_out"), Part::MlpOut)?;
        Ok((y, g))
    }

    /// One transformer block. `memory = Some((node, t_src))` adds a
    /// cross-attention sublayer between self-attention and the MLP.
    fn layer(
        &mut self,
        tape: &mut Tape,
        mut x: NodeId,
        prefix: &str,
        b: usize,
        t: usize,
        attn_mode: MaskMode,
        memory: Option<(NodeId, usize)>,
    ) -> Result<(NodeId, LayerTrace)> {
        let pre = self.model.config.ln_placement == LnPlacement::Pre;

        // Self-attention sublayer (norm `ln1`).
        let attn_in = if pre { self.ln(tape, x, &format!("{prefix}.ln1"))? } else { x };
        let (attn, scores, probs, attn_out_in) =
            self.self_attention(tape, attn_in, prefix, b, t, attn_mode)?;
        let attn = self.dropout(tape, attn)?;
        x = tape.add(x, attn)?;
        if !pre {
            x = self.ln(tape, x, &format!("{prefix}.ln1"))?;
        }

        // Cross-attention sublayer (norm `ln3`), encoder_decoder decoders.
        let (mut cross_scores, mut cross_probs) = (None, None);
        if let Some((memory, tk)) = memory {
            let cross_in = if pre { self.ln(tape, x, &format!("{prefix}.ln3"))? } else { x };
            let (cross, cs, cp) =
                self.cross_attention(tape, cross_in, memory, prefix, b, t, tk)?;
            let cross = self.dropout(tape, cross)?;
            x = tape.add(x, cross)?;
            if !pre {
                x = self.ln(tape, x, &format!("{prefix}.ln3"))?;
            }
            cross_scores = Some(cs);
            cross_probs = Some(cp);
        }

        // MLP sublayer (norm `ln2`).
        let mlp_in = if pre { self.ln(tape, x, &format!("{prefix}.ln2"))? } else { x };
        let (mlp, gelu_act) = self.mlp(tape, mlp_in, prefix)?;
        let mlp = self.dropout(tape, mlp)?;
        x = tape.add(x, mlp)?;
        if !pre {
            x = self.ln(tape, x, &format!("{prefix}.ln2"))?;
        }

        let trace = LayerTrace {
            attn_scores: scores,
            attn_probs: probs,
            cross_scores,
            cross_probs,
            hidden: x,
            parts: PartInputs {
                qkv: attn_in,
                attn_out: attn_out_in,
                mlp_int: mlp_in,
                mlp_out: gelu_act,
            },
        };
        Ok((x, trace))
    }
}

impl Model {
    /// Runs the full stack and records it on `tape`. `masks` overrides the
    /// model's stored mask set when given.
    pub fn forward(
        &self,
        tape: &mut Tape,
        batch: &Batch,
        strategy: &QuantStrategy,
        masks: Option<&MaskSet>,
        mode: Mode<'_>,
    ) -> Result<ForwardOut> {
        let cfg = &self.config;
        strategy.validate_for(cfg)?;
        match (cfg.arch, batch.src.is_some()) {
            (Arch::EncoderDecoder, false) => {
                return Err(Error::InvalidConfig(
                    "encoder_decoder forward needs a source batch".into(),
                ))
            }
            (Arch::EncoderOnly | Arch::DecoderOnly, true) => {
                return Err(Error::InvalidConfig(format!(
                    "{} forward takes a single token stream",
                    cfg.arch.name()
                )))
            }
            _ => {}
        }
        for stream in [Some(&batch.tokens), batch.src.as_ref()].into_iter().flatten() {
            if stream.seq > cfg.max_seq {
                return Err(Error::InvalidConfig(format!(
                    "sequence length {} exceeds max_seq {}",
                    stream.seq, cfg.max_seq
                )));
            }
        }
        if let Some(src) = &batch.src {
            if src.batch != batch.tokens.batch {
                return Err(Error::ShapeMismatch {
                    context: "source/target batch size",
                    left: vec![src.batch],
                    right: vec![batch.tokens.batch],
                });
            }
        }

        let train = mode.is_train();
        let mut ids = BTreeMap::new();
        let mut param_nodes = Vec::with_capacity(self.params.len());
        for (name, value) in &self.params {
            let id = tape.leaf(value.clone(), train);
            ids.insert(name.clone(), id);
            param_nodes.push((name.clone(), id));
        }
        let mut exec = Exec { model: self, strategy, masks: masks.or(self.masks.as_ref()), ids, mode };

        let b = batch.tokens.batch;
        let t = batch.tokens.seq;
        let mut enc_layers = Vec::with_capacity(cfg.num_encoder_layers);
        let mut dec_layers = Vec::with_capacity(cfg.num_decoder_layers);
        let mut enc_memory = None;

        // Encoder stack (bidirectional attention).
        if cfg.arch != Arch::DecoderOnly {
            let src = batch.src.as_ref().unwrap_or(&batch.tokens);
            let mut x = exec.embed(tape, src)?;
            for i in 0..cfg.num_encoder_layers {
                let (next, trace) =
                    exec.layer(tape, x, &format!("enc.{i}"), src.batch, src.seq, MaskMode::Full, None)?;
                x = next;
                enc_layers.push(trace);
            }
            if cfg.arch == Arch::EncoderDecoder {
                if cfg.ln_placement == LnPlacement::Pre {
                    x = exec.ln(tape, x, "enc_ln_f")?;
                }
                enc_memory = Some(x);
            } else {
                // Encoder-only: the encoder stream feeds the head.
                enc_memory = Some(x);
            }
        }

        // Decoder stack (causal self-attention, optional cross-attention).
        let mut stream = match cfg.arch {
            Arch::EncoderOnly => enc_memory.expect("encoder ran"),
            _ => exec.embed(tape, &batch.tokens)?,
        };
        if cfg.arch != Arch::EncoderOnly {
            let memory = match cfg.arch {
                Arch::EncoderDecoder => {
                    let tk = batch.src.as_ref().expect("validated above").seq;
                    Some((enc_memory.expect("encoder ran"), tk))
                }
                _ => None,
            };
            for i in 0..cfg.num_decoder_layers {
                let (next, trace) =
                    exec.layer(tape, stream, &format!("dec.{i}"), b, t, MaskMode::Causal, memory)?;
                stream = next;
                dec_layers.push(trace);
            }
        }

        if cfg.ln_placement == LnPlacement::Pre {
            stream = exec.ln(tape, stream, "ln_f")?;
        }
        let logits = tape.linear(stream, exec.p("head.w")?, Some(exec.p("head.b")?))?;

        Ok(ForwardOut {
            logits,
            enc_layers,
            dec_layers,
            enc_memory: if cfg.arch == Arch::EncoderDecoder { enc_memory } else { None },
            params: param_nodes,
            batch: b,
            seq: t,
        })
    }
}
