//! Quantization-aware training with knowledge distillation: a frozen float
//! teacher, a student running the quantized forward, and a loss that aligns
//! logits, attention maps, and hidden representations.
//!
//! Also home to the synthetic tasks the toolkit trains on. Each task has a
//! known optimal baseline so experiment results can be judged in absolute
//! terms: majority classification is deterministic (Bayes accuracy 1),
//! the Markov LM's optimal perplexity is `exp(entropy rate)` computed from
//! the transition matrix, and a perfect copier scores perplexity 1 on the
//! copy region.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{
    log_sum_exp, Batch, ForwardOut, LayerMapping, MaskSet, Mode, Model, QuantStrategy, TokenBatch,
};
use crate::sparsity::{l1_mask, CompositionOrder, MaskStructure, MovementPruner};
use crate::tensor::{adam_step, AdamHyper, AdamState, NodeId, Tape, Tensor};

// ---------------------------------------------------------------------------
// Synthetic tasks
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    /// Classify a sequence by its most frequent token (ties break to the
    /// lowest id). Deterministic labels, so the optimal accuracy is 1.
    MajorityClassification,
    /// Tokens from a first-order Markov chain with a known transition
    /// matrix; optimal perplexity is `exp(entropy rate)`.
    MarkovLm,
    /// Second half of every sequence repeats the first half; a perfect
    /// copier reaches perplexity 1 on the copy region.
    CopyLm,
}

impl Task {
    pub fn name(&self) -> &'static str {
        match self {
            Task::MajorityClassification => "majority_classification",
            Task::MarkovLm => "markov_lm",
            Task::CopyLm => "copy_lm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "majority_classification" => Ok(Task::MajorityClassification),
            "markov_lm" => Ok(Task::MarkovLm),
            "copy_lm" => Ok(Task::CopyLm),
            other => Err(Error::InvalidConfig(format!("unknown task '{other}'"))),
        }
    }

    /// Metric direction: accuracy grows, perplexity shrinks.
    pub fn higher_is_better(&self) -> bool {
        matches!(self, Task::MajorityClassification)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DataSizes {
    pub train_rows: usize,
    pub eval_rows: usize,
    pub seq: usize,
    pub vocab: usize,
}

/// First-order Markov chain over `states` tokens, transition probabilities
/// row-major in f64.
#[derive(Debug, Clone)]
pub struct MarkovSpec {
    pub states: usize,
    pub transition: Vec<f64>,
}

impl MarkovSpec {
    /// Stationary distribution by power iteration (chains built here are
    /// strictly positive, hence ergodic).
    pub fn stationary(&self) -> Vec<f64> {
        let k = self.states;
        let mut pi = vec![1.0 / k as f64; k];
        for _ in 0..10_000 {
            let mut next = vec![0.0f64; k];
            for i in 0..k {
                for j in 0..k {
                    next[j] += pi[i] * self.transition[i * k + j];
                }
            }
            let delta: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
            pi = next;
            if delta < 1e-14 {
                break;
            }
        }
        pi
    }

    /// `H = -Σ_i π_i Σ_j P_ij ln P_ij`, in nats per token.
    pub fn entropy_rate(&self) -> f64 {
        let k = self.states;
        let pi = self.stationary();
        let mut h = 0.0f64;
        for i in 0..k {
            for j in 0..k {
                let p = self.transition[i * k + j];
                if p > 0.0 {
                    h -= pi[i] * p * p.ln();
                }
            }
        }
        h
    }

    /// Perplexity of the true-model predictor.
    pub fn optimal_ppl(&self) -> f64 {
        self.entropy_rate().exp()
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub task: Task,
    pub vocab: usize,
    pub seq: usize,
    pub train_inputs: Vec<Vec<u32>>,
    /// Classification labels, parallel to `train_inputs`; empty for LM tasks.
    pub train_labels: Vec<u32>,
    pub eval_inputs: Vec<Vec<u32>>,
    pub eval_labels: Vec<u32>,
    pub markov: Option<MarkovSpec>,
}

fn majority_label(row: &[u32], vocab: usize) -> u32 {
    let mut counts = vec![0usize; vocab];
    for &t in row {
        counts[t as usize] += 1;
    }
    let mut best = 0usize;
    for (id, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = id;
        }
    }
    best as u32
}

fn sample_discrete(p: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

/// Deterministic dataset for `task` from one seed.
pub fn synth_data(task: Task, seed: u64, sizes: &DataSizes) -> Result<Dataset> {
    if sizes.vocab < 2 {
        return Err(Error::InvalidConfig("need a vocabulary of at least 2 tokens".into()));
    }
    if sizes.seq < 2 || sizes.train_rows == 0 || sizes.eval_rows == 0 {
        return Err(Error::InvalidConfig(format!(
            "degenerate dataset sizes: seq {}, rows {}/{}",
            sizes.seq, sizes.train_rows, sizes.eval_rows
        )));
    }
    if task == Task::CopyLm && sizes.seq % 2 != 0 {
        return Err(Error::InvalidConfig("copy task needs an even sequence length".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut markov = None;

    let gen_rows = |n: usize,
                        rng: &mut ChaCha8Rng,
                        spec: Option<&MarkovSpec>|
     -> (Vec<Vec<u32>>, Vec<u32>) {
        let mut inputs = Vec::with_capacity(n);
        let mut labels = Vec::new();
        for _ in 0..n {
            let row: Vec<u32> = match task {
                Task::MajorityClassification => (0..sizes.seq)
                    .map(|_| rng.gen_range(0..sizes.vocab as u32))
                    .collect(),
                Task::CopyLm => {
                    let half: Vec<u32> = (0..sizes.seq / 2)
                        .map(|_| rng.gen_range(0..sizes.vocab as u32))
                        .collect();
                    let mut row = half.clone();
                    row.extend_from_slice(&half);
                    row
                }
                Task::MarkovLm => {
                    let spec = spec.expect("markov spec built before sampling");
                    let pi = spec.stationary();
                    let mut state = sample_discrete(&pi, rng);
                    let mut row = Vec::with_capacity(sizes.seq);
                    row.push(state as u32);
                    for _ in 1..sizes.seq {
                        let p = &spec.transition[state * spec.states..(state + 1) * spec.states];
                        state = sample_discrete(p, rng);
                        row.push(state as u32);
                    }
                    row
                }
            };
            if task == Task::MajorityClassification {
                labels.push(majority_label(&row, sizes.vocab));
            }
            inputs.push(row);
        }
        (inputs, labels)
    };

    if task == Task::MarkovLm {
        // Rows proportional to exp(3u) give transition ratios up to ~e^3,
        // peaky enough that the chain is clearly learnable but not trivial.
        let k = sizes.vocab;
        let mut transition = vec![0.0f64; k * k];
        for i in 0..k {
            let row = &mut transition[i * k..(i + 1) * k];
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (3.0 * rng.gen::<f64>()).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        markov = Some(MarkovSpec { states: k, transition });
    }

    let (train_inputs, train_labels) = gen_rows(sizes.train_rows, &mut rng, markov.as_ref());
    let (eval_inputs, eval_labels) = gen_rows(sizes.eval_rows, &mut rng, markov.as_ref());
    Ok(Dataset {
        task,
        vocab: sizes.vocab,
        seq: sizes.seq,
        train_inputs,
        train_labels,
        eval_inputs,
        eval_labels,
        markov,
    })
}

// ---------------------------------------------------------------------------
// Evaluation metrics
// ---------------------------------------------------------------------------

fn batch_from_rows(rows: &[Vec<u32>], seq: usize) -> Result<TokenBatch> {
    let ids: Vec<u32> = rows.iter().flat_map(|r| r.iter().copied()).collect();
    TokenBatch::new(rows.len(), seq, ids)
}

/// Sum and count of next-token NLL terms for predictions made at positions
/// `from_pos..seq-1` of every row (so the first scored target sits at
/// `from_pos + 1`).
fn region_nll(
    logits: &Tensor,
    rows: &[Vec<u32>],
    seq: usize,
    vocab: usize,
    from_pos: usize,
) -> Result<(f64, usize)> {
    if from_pos + 1 >= seq {
        return Err(Error::InvalidConfig(format!(
            "no predictions in region starting at {from_pos} of a {seq}-token sequence"
        )));
    }
    let lv = logits.data();
    let mut total = 0.0f64;
    let mut count = 0usize;
    for (b, row) in rows.iter().enumerate() {
        for t in from_pos..seq - 1 {
            let r = b * seq + t;
            let slice = &lv[r * vocab..(r + 1) * vocab];
            total += log_sum_exp(slice) - slice[row[t + 1] as usize] as f64;
            count += 1;
        }
    }
    Ok((total, count))
}

fn lm_region_ppl(
    model: &Model,
    rows: &[Vec<u32>],
    seq: usize,
    strategy: &QuantStrategy,
    from_pos: usize,
) -> Result<f64> {
    let batch = Batch::single(batch_from_rows(rows, seq)?);
    let (tape, out) = model.run_eval(&batch, strategy)?;
    let (total, count) =
        region_nll(tape.value(out.logits), rows, seq, model.config.vocab_size, from_pos)?;
    Ok((total / count as f64).exp())
}

fn classification_accuracy(
    model: &Model,
    rows: &[Vec<u32>],
    labels: &[u32],
    seq: usize,
    strategy: &QuantStrategy,
) -> Result<f64> {
    let batch = Batch::single(batch_from_rows(rows, seq)?);
    let (tape, out) = model.run_eval(&batch, strategy)?;
    let lv = tape.value(out.logits);
    let v = model.config.vocab_size;
    let mut correct = 0usize;
    for (b, &label) in labels.iter().enumerate() {
        // Position 0 is the classification slot.
        let row = &lv.data()[b * seq * v..(b * seq + 1) * v];
        let mut arg = 0usize;
        for (j, &x) in row.iter().enumerate() {
            if x > row[arg] {
                arg = j;
            }
        }
        if arg as u32 == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / labels.len() as f64)
}

/// Task metric on the eval split: accuracy for classification, perplexity
/// for the LM tasks (copy task scored on the copy region only).
pub fn eval_metric(model: &Model, data: &Dataset, strategy: &QuantStrategy) -> Result<f64> {
    match data.task {
        Task::MajorityClassification => classification_accuracy(
            model,
            &data.eval_inputs,
            &data.eval_labels,
            data.seq,
            strategy,
        ),
        Task::MarkovLm => lm_region_ppl(model, &data.eval_inputs, data.seq, strategy, 0),
        Task::CopyLm => {
            lm_region_ppl(model, &data.eval_inputs, data.seq, strategy, data.seq / 2 - 1)
        }
    }
}

// ---------------------------------------------------------------------------
// Distillation loss
// ---------------------------------------------------------------------------

/// Which attention tensors the attention-alignment term compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttVariant {
    /// Post-softmax attention probabilities.
    Normalized,
    /// Pre-softmax masked scores; causally masked positions are excluded
    /// from the mean (both sides hold the same fill constant there).
    Prenorm,
}

#[derive(Debug, Clone, Copy)]
pub struct KDConfig {
    pub w_logit: f32,
    pub w_att: f32,
    pub w_rep: f32,
    pub w_task: f32,
    pub temperature: f32,
    pub att_variant: AttVariant,
}

impl Default for KDConfig {
    fn default() -> Self {
        KDConfig {
            w_logit: 1.0,
            w_att: 0.0,
            w_rep: 0.0,
            w_task: 0.0,
            temperature: 1.0,
            att_variant: AttVariant::Normalized,
        }
    }
}

impl KDConfig {
    pub fn validate(&self) -> Result<()> {
        let ws = [self.w_logit, self.w_att, self.w_rep, self.w_task];
        if ws.iter().any(|w| *w < 0.0 || !w.is_finite()) {
            return Err(Error::InvalidConfig("loss weights must be finite and >= 0".into()));
        }
        if ws.iter().all(|&w| w == 0.0) {
            return Err(Error::InvalidConfig("at least one loss weight must be positive".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Total loss node plus the component values for logging.
pub struct KdTerms {
    pub total: NodeId,
    pub logit: f32,
    pub att: f32,
    pub rep: f32,
    pub task: f32,
}

/// Keep-mask over `[b, heads, t, t]` attention scores that drops the
/// causally blocked upper triangle.
fn causal_keep(b: usize, heads: usize, t: usize) -> Vec<bool> {
    let mut keep = vec![true; b * heads * t * t];
    for bh in 0..b * heads {
        for i in 0..t {
            for j in i + 1..t {
                keep[bh * t * t + i * t + j] = false;
            }
        }
    }
    keep
}

fn mean_of(tape: &mut Tape, terms: &[NodeId]) -> Result<NodeId> {
    let w = 1.0 / terms.len() as f32;
    let weighted: Vec<(NodeId, f32)> = terms.iter().map(|&t| (t, w)).collect();
    tape.weighted_sum(&weighted)
}

/// Distillation loss between one student and one teacher forward pass, both
/// recorded on `tape`. `mapping` aligns student layers to teacher layers and
/// may be omitted when depths match (identity). `task_loss`, if given, is a
/// scalar node weighted by `w_task`.
pub fn kd_loss(
    tape: &mut Tape,
    student: &ForwardOut,
    teacher: &ForwardOut,
    mapping: Option<&LayerMapping>,
    cfg: &KDConfig,
    task_loss: Option<NodeId>,
) -> Result<KdTerms> {
    cfg.validate()?;
    let identity;
    let mapping = match mapping {
        Some(m) => m,
        None => {
            if student.enc_layers.len() != teacher.enc_layers.len()
                || student.dec_layers.len() != teacher.dec_layers.len()
            {
                return Err(Error::InvalidConfig(format!(
                    "student stacks ({}/{}) differ from teacher ({}/{}); a layer mapping is required",
                    student.enc_layers.len(),
                    student.dec_layers.len(),
                    teacher.enc_layers.len(),
                    teacher.dec_layers.len()
                )));
            }
            identity = LayerMapping {
                encoder: (0..student.enc_layers.len()).collect(),
                decoder: (0..student.dec_layers.len()).collect(),
            };
            &identity
        }
    };
    if mapping.encoder.len() != student.enc_layers.len()
        || mapping.decoder.len() != student.dec_layers.len()
    {
        return Err(Error::InvalidConfig(format!(
            "layer mapping covers {}/{} layers but the student has {}/{}",
            mapping.encoder.len(),
            mapping.decoder.len(),
            student.enc_layers.len(),
            student.dec_layers.len()
        )));
    }

    let mut weighted: Vec<(NodeId, f32)> = Vec::new();
    let mut logit_val = 0.0f32;
    let mut att_val = 0.0f32;
    let mut rep_val = 0.0f32;
    let mut task_val = 0.0f32;

    if cfg.w_logit > 0.0 {
        let kl = tape.kl_soft_targets(student.logits, teacher.logits, cfg.temperature)?;
        logit_val = tape.value(kl).item()?;
        weighted.push((kl, cfg.w_logit));
    }

    let stacks: [(&[crate::model::LayerTrace], &[crate::model::LayerTrace], &[usize], bool); 2] = [
        (&student.enc_layers, &teacher.enc_layers, &mapping.encoder, false),
        (&student.dec_layers, &teacher.dec_layers, &mapping.decoder, true),
    ];

    if cfg.w_att > 0.0 {
        let mut terms = Vec::new();
        for (s_stack, t_stack, map, causal) in stacks {
            for (s_trace, &ti) in s_stack.iter().zip(map) {
                let t_trace = t_stack.get(ti).ok_or_else(|| {
                    Error::InvalidConfig(format!("mapping points at missing teacher layer {ti}"))
                })?;
                let term = match cfg.att_variant {
                    AttVariant::Normalized => {
                        tape.mse(s_trace.attn_probs, t_trace.attn_probs, None)?
                    }
                    AttVariant::Prenorm => {
                        let keep = if causal {
                            let shape = tape.value(s_trace.attn_scores).shape().to_vec();
                            Some(causal_keep(shape[0], shape[1], shape[2]))
                        } else {
                            None
                        };
                        tape.mse(s_trace.attn_scores, t_trace.attn_scores, keep.as_deref())?
                    }
                };
                terms.push(term);
                if let (Some(sc), Some(tc)) = (s_trace.cross_probs, t_trace.cross_probs) {
                    let term = match cfg.att_variant {
                        AttVariant::Normalized => tape.mse(sc, tc, None)?,
                        AttVariant::Prenorm => tape.mse(
                            s_trace.cross_scores.expect("scores accompany probs"),
                            t_trace.cross_scores.expect("scores accompany probs"),
                            None,
                        )?,
                    };
                    terms.push(term);
                }
            }
        }
        let att = mean_of(tape, &terms)?;
        att_val = tape.value(att).item()?;
        weighted.push((att, cfg.w_att));
    }

    if cfg.w_rep > 0.0 {
        let mut terms = Vec::new();
        for (s_stack, t_stack, map, _) in stacks {
            for (s_trace, &ti) in s_stack.iter().zip(map) {
                let t_trace = t_stack.get(ti).ok_or_else(|| {
                    Error::InvalidConfig(format!("mapping points at missing teacher layer {ti}"))
                })?;
                terms.push(tape.mse(s_trace.hidden, t_trace.hidden, None)?);
            }
        }
        let rep = mean_of(tape, &terms)?;
        rep_val = tape.value(rep).item()?;
        weighted.push((rep, cfg.w_rep));
    }

    if cfg.w_task > 0.0 {
        let task = task_loss.ok_or_else(|| {
            Error::InvalidConfig("w_task > 0 but no task loss was provided".into())
        })?;
        task_val = tape.value(task).item()?;
        weighted.push((task, cfg.w_task));
    }

    let total = tape.weighted_sum(&weighted)?;
    Ok(KdTerms { total, logit: logit_val, att: att_val, rep: rep_val, task: task_val })
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

/// Movement-pruning schedule: score learning rate and mask refresh cadence
/// (in optimizer steps).
#[derive(Debug, Clone, Copy)]
pub struct MovementConfig {
    pub score_lr: f32,
    pub refresh_every: usize,
}

/// Pruning applied during training: a static magnitude mask, or movement
/// pruning when `movement` is set.
#[derive(Debug, Clone, Copy)]
pub struct SparsityConfig {
    pub sparsity: f64,
    pub structure: MaskStructure,
    pub order: CompositionOrder,
    pub movement: Option<MovementConfig>,
}

#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub lr: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub dropout: f32,
    pub seed: u64,
    pub adam: AdamHyper,
    /// Evaluate (and log) every this many optimizer steps.
    pub eval_every: usize,
    pub strategy: QuantStrategy,
    pub sparsity: Option<SparsityConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            epochs: 1,
            batch_size: 8,
            dropout: 0.0,
            seed: 0,
            adam: AdamHyper::default(),
            eval_every: 100,
            strategy: QuantStrategy::all_disabled(),
            sparsity: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::InvalidConfig(format!("lr must be positive, got {}", self.lr)));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::InvalidConfig(
                "epochs, batch_size and eval_every must all be >= 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// One logged eval point.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub loss: f32,
    pub loss_logit: f32,
    pub loss_att: f32,
    pub loss_rep: f32,
    pub loss_task: f32,
    pub eval_metric: f64,
}

pub const TRAIN_CSV_HEADER: &str = "step,loss,loss_logit,loss_att,loss_rep,loss_task,eval_metric";

pub fn write_train_csv(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "{TRAIN_CSV_HEADER}")?;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{},{},{},{}",
            r.step, r.loss, r.loss_logit, r.loss_att, r.loss_rep, r.loss_task, r.eval_metric
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub log: Vec<LogRow>,
    pub steps_run: usize,
    pub best_step: usize,
    pub best_metric: f64,
    pub init_metric: f64,
    pub teacher_metric: f64,
}

fn metric_improves(task: Task, candidate: f64, best: f64) -> bool {
    if task.higher_is_better() {
        candidate > best
    } else {
        candidate < best
    }
}

/// Task loss node for one batch, or `None` when `w_task == 0`.
fn task_loss_node(
    tape: &mut Tape,
    out: &ForwardOut,
    data: &Dataset,
    rows: &[usize],
    kcfg: &KDConfig,
) -> Result<Option<NodeId>> {
    if kcfg.w_task == 0.0 {
        return Ok(None);
    }
    let seq = data.seq;
    let n_rows = rows.len() * seq;
    match data.task {
        Task::MajorityClassification => {
            let mut targets = vec![0u32; n_rows];
            let mut keep = vec![false; n_rows];
            for (b, &r) in rows.iter().enumerate() {
                targets[b * seq] = data.train_labels[r];
                keep[b * seq] = true;
            }
            Ok(Some(tape.cross_entropy_rows_masked(out.logits, &targets, &keep)?))
        }
        Task::MarkovLm | Task::CopyLm => {
            let mut targets = vec![0u32; n_rows];
            let mut keep = vec![false; n_rows];
            for (b, &r) in rows.iter().enumerate() {
                for t in 0..seq - 1 {
                    targets[b * seq + t] = data.train_inputs[r][t + 1];
                    keep[b * seq + t] = true;
                }
            }
            Ok(Some(tape.cross_entropy_rows_masked(out.logits, &targets, &keep)?))
        }
    }
}

struct StepOutcome {
    terms_total: f32,
    logit: f32,
    att: f32,
    rep: f32,
    task: f32,
    grads: BTreeMap<String, Vec<f32>>,
}

/// One distillation forward/backward. `collect_grads = false` runs the
/// forward only (used for the step-0 log row).
#[allow(clippy::too_many_arguments)]
fn distill_step(
    student: &Model,
    teacher: &Model,
    data: &Dataset,
    rows: &[usize],
    tcfg: &TrainConfig,
    kcfg: &KDConfig,
    mapping: Option<&LayerMapping>,
    dropout_rng: &mut ChaCha8Rng,
    collect_grads: bool,
    step: usize,
) -> Result<StepOutcome> {
    let row_data: Vec<Vec<u32>> = rows.iter().map(|&r| data.train_inputs[r].clone()).collect();
    let batch = Batch::single(batch_from_rows(&row_data, data.seq)?);
    let mut tape = Tape::new();
    let teacher_out =
        teacher.forward(&mut tape, &batch, &QuantStrategy::all_disabled(), None, Mode::Eval)?;
    let dropout = if collect_grads { tcfg.dropout } else { 0.0 };
    let student_out = student.forward(
        &mut tape,
        &batch,
        &tcfg.strategy,
        None,
        Mode::Train { dropout, rng: dropout_rng },
    )?;
    let task = task_loss_node(&mut tape, &student_out, data, rows, kcfg)?;
    let terms = kd_loss(&mut tape, &student_out, &teacher_out, mapping, kcfg, task)?;
    let total = tape.value(terms.total).item()?;
    if !total.is_finite() {
        return Err(Error::Training {
            step,
            message: format!("loss became non-finite ({total})"),
        });
    }
    let mut grads = BTreeMap::new();
    if collect_grads {
        tape.backward(terms.total)?;
        for (name, id) in &student_out.params {
            if let Some(g) = tape.grad(*id) {
                grads.insert(name.clone(), g.to_vec());
            }
        }
    }
    Ok(StepOutcome {
        terms_total: total,
        logit: terms.logit,
        att: terms.att,
        rep: terms.rep,
        task: terms.task,
        grads,
    })
}

/// QAT-with-KD training loop. The teacher is frozen; the student's
/// parameters (and masks, under movement pruning) are updated in place and
/// finish at the best-eval checkpoint.
pub fn qat_train(
    student: &mut Model,
    teacher: &Model,
    data: &Dataset,
    tcfg: &TrainConfig,
    kcfg: &KDConfig,
    mapping: Option<&LayerMapping>,
) -> Result<TrainReport> {
    tcfg.validate()?;
    kcfg.validate()?;
    tcfg.strategy.validate_for(&student.config)?;
    if student.config.vocab_size != teacher.config.vocab_size
        || student.config.hidden != teacher.config.hidden
        || student.config.heads != teacher.config.heads
        || student.config.arch != teacher.config.arch
    {
        return Err(Error::InvalidConfig(
            "student and teacher must share arch, hidden size, heads, and vocabulary".into(),
        ));
    }
    if data.vocab > student.config.vocab_size {
        return Err(Error::InvalidConfig(format!(
            "dataset vocabulary {} exceeds model vocabulary {}",
            data.vocab, student.config.vocab_size
        )));
    }
    if data.seq > student.config.max_seq {
        return Err(Error::InvalidConfig(format!(
            "dataset sequence length {} exceeds max_seq {}",
            data.seq, student.config.max_seq
        )));
    }

    // Pruning setup. Static masks are fixed up front; movement pruners keep
    // per-weight scores and refresh their masks on a cadence.
    let mut pruners: BTreeMap<String, MovementPruner> = BTreeMap::new();
    if let Some(sc) = &tcfg.sparsity {
        let mut masks = BTreeMap::new();
        for (name, _) in student.part_weights() {
            let w = &student.params[&name];
            match &sc.movement {
                None => {
                    masks.insert(name.clone(), l1_mask(w, sc.sparsity, sc.structure)?);
                }
                Some(mv) => {
                    let pruner = MovementPruner::new(
                        w.shape().to_vec(),
                        sc.sparsity,
                        sc.structure,
                        mv.score_lr,
                        mv.refresh_every,
                    )?;
                    masks.insert(name.clone(), pruner.mask().clone());
                    pruners.insert(name, pruner);
                }
            }
        }
        student.masks = Some(MaskSet { masks, order: sc.order });
    }

    let steps_per_epoch = data.train_inputs.len() / tcfg.batch_size;
    let total_steps = tcfg.epochs * steps_per_epoch;
    let hp = AdamHyper { lr: tcfg.lr, ..tcfg.adam };
    let mut adam: BTreeMap<String, AdamState> = student
        .params
        .iter()
        .map(|(name, v)| (name.clone(), AdamState::new(v.numel())))
        .collect();
    let mut order_rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(tcfg.seed.wrapping_add(0x9E37_79B9_7F4A_7C15));

    let init_metric = eval_metric(student, data, &tcfg.strategy)?;
    let teacher_metric = eval_metric(teacher, data, &QuantStrategy::all_disabled())?;

    let mut log = Vec::new();
    let first_rows: Vec<usize> = (0..tcfg.batch_size.min(data.train_inputs.len())).collect();
    let init_outcome = distill_step(
        student, teacher, data, &first_rows, tcfg, kcfg, mapping, &mut dropout_rng, false, 0,
    )?;
    log.push(LogRow {
        step: 0,
        loss: init_outcome.terms_total,
        loss_logit: init_outcome.logit,
        loss_att: init_outcome.att,
        loss_rep: init_outcome.rep,
        loss_task: init_outcome.task,
        eval_metric: init_metric,
    });

    let mut best_metric = init_metric;
    let mut best_step = 0usize;
    let mut best_params = student.params.clone();
    let mut best_masks = student.masks.clone();

    let mut step = 0usize;
    'epochs: for _ in 0..tcfg.epochs {
        // Deterministic shuffle of the row order, one permutation per epoch.
        let mut perm: Vec<usize> = (0..data.train_inputs.len()).collect();
        for i in (1..perm.len()).rev() {
            perm.swap(i, order_rng.gen_range(0..=i));
        }
        for chunk in perm.chunks_exact(tcfg.batch_size) {
            step += 1;
            let outcome = distill_step(
                student, teacher, data, chunk, tcfg, kcfg, mapping, &mut dropout_rng, true, step,
            )?;

            // Movement scores must see this step's gradient against the
            // pre-update weights.
            for (name, pruner) in pruners.iter_mut() {
                if let Some(g) = outcome.grads.get(name) {
                    pruner.update(&student.params[name], g)?;
                }
            }
            for (name, grad) in &outcome.grads {
                let param = student
                    .params
                    .get_mut(name)
                    .ok_or_else(|| Error::InvalidConfig(format!("unknown parameter '{name}'")))?;
                let state = adam.get_mut(name).expect("state allocated for every parameter");
                adam_step(param, grad, state, &hp, name)?;
            }
            if !pruners.is_empty() {
                let cadence = tcfg
                    .sparsity
                    .as_ref()
                    .and_then(|s| s.movement.as_ref())
                    .map(|m| m.refresh_every)
                    .unwrap_or(1);
                if step % cadence == 0 {
                    let mask_set = student.masks.as_mut().expect("movement installs masks");
                    for (name, pruner) in pruners.iter_mut() {
                        pruner.refresh()?;
                        mask_set.masks.insert(name.clone(), pruner.mask().clone());
                    }
                }
            }

            if step % tcfg.eval_every == 0 || step == total_steps {
                let metric = eval_metric(student, data, &tcfg.strategy)?;
                log.push(LogRow {
                    step,
                    loss: outcome.terms_total,
                    loss_logit: outcome.logit,
                    loss_att: outcome.att,
                    loss_rep: outcome.rep,
                    loss_task: outcome.task,
                    eval_metric: metric,
                });
                if metric_improves(data.task, metric, best_metric) {
                    best_metric = metric;
                    best_step = step;
                    best_params = student.params.clone();
                    best_masks = student.masks.clone();
                }
            }
            if step == total_steps {
                break 'epochs;
            }
        }
    }

    student.params = best_params;
    student.masks = best_masks;
    Ok(TrainReport {
        log,
        steps_run: step,
        best_step,
        best_metric,
        init_metric,
        teacher_metric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, Arch, LnPlacement, ModelConfig};
    use crate::quant::{Granularity, Mapping, QuantScheme};

    fn lm_cfg(vocab: usize, seq: usize) -> ModelConfig {
        ModelConfig {
            arch: Arch::DecoderOnly,
            num_encoder_layers: 0,
            num_decoder_layers: 2,
            hidden: 32,
            heads: 2,
            ffn_mult: 4,
            ln_placement: LnPlacement::Pre,
            vocab_size: vocab,
            max_seq: seq,
        }
    }

    #[test]
    fn kl_term_matches_high_precision_scalar_oracle() {
        let mut tape = Tape::new();
        let s = tape.leaf(Tensor::from_vec(vec![1, 3], vec![0.2, -1.1, 0.7]).unwrap(), true);
        let t = tape.constant(Tensor::from_vec(vec![1, 3], vec![1.0, 0.0, -0.5]).unwrap());
        let temp = 2.0f64;
        let kl = tape.kl_soft_targets(s, t, temp as f32).unwrap();

        let softmax = |v: &[f64]| {
            let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            e.iter().map(|x| x / z).collect::<Vec<f64>>()
        };
        let ps = softmax(&[0.2 / temp, -1.1 / temp, 0.7 / temp]);
        let pt = softmax(&[1.0 / temp, 0.0, -0.5 / temp]);
        let expected: f64 =
            temp * temp * pt.iter().zip(&ps).map(|(&a, &b)| a * (a / b).ln()).sum::<f64>();
        let got = tape.value(kl).item().unwrap() as f64;
        assert!((got - expected).abs() < 1e-6, "kl {got} vs oracle {expected}");
    }

    #[test]
    fn markov_entropy_rate_matches_hand_computation() {
        // P = [[0.9, 0.1], [0.5, 0.5]] has stationary (5/6, 1/6).
        let spec = MarkovSpec { states: 2, transition: vec![0.9, 0.1, 0.5, 0.5] };
        let pi = spec.stationary();
        assert!((pi[0] - 5.0 / 6.0).abs() < 1e-10);
        let h_row0 = -(0.9f64 * 0.9f64.ln() + 0.1 * 0.1f64.ln());
        let h_row1 = -(2.0 * 0.5 * 0.5f64.ln());
        let expected = (5.0 / 6.0) * h_row0 + (1.0 / 6.0) * h_row1;
        assert!((spec.entropy_rate() - expected).abs() < 1e-10);
        assert!((spec.optimal_ppl() - expected.exp()).abs() < 1e-10);
    }

    #[test]
    fn synthetic_datasets_are_deterministic_and_well_formed() {
        let sizes = DataSizes { train_rows: 12, eval_rows: 6, seq: 8, vocab: 5 };
        for task in [Task::MajorityClassification, Task::MarkovLm, Task::CopyLm] {
            let a = synth_data(task, 99, &sizes).unwrap();
            let b = synth_data(task, 99, &sizes).unwrap();
            assert_eq!(a.train_inputs, b.train_inputs, "{task:?} reseed");
            assert_eq!(a.train_labels, b.train_labels, "{task:?} labels reseed");
            assert!(a.train_inputs.iter().all(|r| r.len() == 8));
            assert!(a.train_inputs.iter().flatten().all(|&t| t < 5));
        }
        let copy = synth_data(Task::CopyLm, 7, &sizes).unwrap();
        for row in &copy.train_inputs {
            assert_eq!(&row[..4], &row[4..], "copy rows repeat their first half");
        }
        let maj = synth_data(Task::MajorityClassification, 7, &sizes).unwrap();
        for (row, &label) in maj.train_inputs.iter().zip(&maj.train_labels) {
            let count = |id: u32| row.iter().filter(|&&t| t == id).count();
            assert!((0..5u32).all(|c| count(c) <= count(label)));
        }
    }

    #[test]
    fn perfect_predictions_score_perplexity_one() {
        // Hand-built logits with a +25 margin on the true next token.
        let rows = vec![vec![3u32, 1, 2, 0], vec![0u32, 0, 1, 3]];
        let (seq, vocab) = (4usize, 4usize);
        let mut logits = vec![0.0f32; rows.len() * seq * vocab];
        for (b, row) in rows.iter().enumerate() {
            for t in 0..seq - 1 {
                logits[(b * seq + t) * vocab + row[t + 1] as usize] = 25.0;
            }
        }
        let lt = Tensor::from_vec(vec![rows.len() * seq, vocab], logits).unwrap();
        let (total, count) = region_nll(&lt, &rows, seq, vocab, 0).unwrap();
        let ppl = (total / count as f64).exp();
        assert!((ppl - 1.0).abs() < 1e-6, "perfect predictor ppl {ppl}");
        // Region restriction drops early positions from the count.
        let (_, copy_count) = region_nll(&lt, &rows, seq, vocab, 1).unwrap();
        assert_eq!(copy_count, 2 * 2);
    }

    #[test]
    fn kd_loss_is_zero_when_student_equals_teacher() {
        let cfg = lm_cfg(13, 6);
        let model = build_model(&cfg, 4).unwrap();
        let data = synth_data(
            Task::MarkovLm,
            5,
            &DataSizes { train_rows: 4, eval_rows: 2, seq: 6, vocab: 13 },
        )
        .unwrap();
        let batch = Batch::single(batch_from_rows(&data.train_inputs, 6).unwrap());
        let mut tape = Tape::new();
        let t_out = model
            .forward(&mut tape, &batch, &QuantStrategy::all_disabled(), None, Mode::Eval)
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s_out = model
            .forward(
                &mut tape,
                &batch,
                &QuantStrategy::all_disabled(),
                None,
                Mode::Train { dropout: 0.0, rng: &mut rng },
            )
            .unwrap();
        for variant in [AttVariant::Normalized, AttVariant::Prenorm] {
            let kcfg = KDConfig {
                w_logit: 1.0,
                w_att: 1.0,
                w_rep: 1.0,
                w_task: 0.0,
                temperature: 1.0,
                att_variant: variant,
            };
            let terms = kd_loss(&mut tape, &s_out, &t_out, None, &kcfg, None).unwrap();
            assert_eq!(terms.logit, 0.0, "{variant:?}");
            assert_eq!(terms.att, 0.0, "{variant:?}");
            assert_eq!(terms.rep, 0.0, "{variant:?}");
            assert_eq!(tape.value(terms.total).item().unwrap(), 0.0, "{variant:?}");
        }
    }

    #[test]
    fn mismatched_depths_without_mapping_are_rejected() {
        let teacher = build_model(&lm_cfg(13, 6), 4).unwrap();
        let mut shallow_cfg = lm_cfg(13, 6);
        shallow_cfg.num_decoder_layers = 1;
        let student = build_model(&shallow_cfg, 4).unwrap();
        let data = synth_data(
            Task::MarkovLm,
            5,
            &DataSizes { train_rows: 4, eval_rows: 2, seq: 6, vocab: 13 },
        )
        .unwrap();
        let batch = Batch::single(batch_from_rows(&data.train_inputs, 6).unwrap());
        let mut tape = Tape::new();
        let t_out = teacher
            .forward(&mut tape, &batch, &QuantStrategy::all_disabled(), None, Mode::Eval)
            .unwrap();
        let s_out = student
            .forward(&mut tape, &batch, &QuantStrategy::all_disabled(), None, Mode::Eval)
            .unwrap();
        let kcfg = KDConfig { w_rep: 1.0, ..KDConfig::default() };
        assert!(kd_loss(&mut tape, &s_out, &t_out, None, &kcfg, None).is_err());
    }

    fn quick_train_cfg(steps_ish: usize) -> TrainConfig {
        TrainConfig {
            lr: 5e-3,
            epochs: steps_ish,
            batch_size: 4,
            dropout: 0.0,
            seed: 11,
            eval_every: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_steps_leaves_student_at_initialization() {
        let cfg = lm_cfg(11, 6);
        let teacher = build_model(&cfg, 1).unwrap();
        let mut student = build_model(&cfg, 2).unwrap();
        let before = student.params.clone();
        let data = synth_data(
            Task::MarkovLm,
            3,
            &DataSizes { train_rows: 3, eval_rows: 3, seq: 6, vocab: 11 },
        )
        .unwrap();
        // batch_size 4 > 3 rows -> zero full batches per epoch.
        let tcfg = quick_train_cfg(1);
        let report =
            qat_train(&mut student, &teacher, &data, &tcfg, &KDConfig::default(), None).unwrap();
        assert_eq!(report.steps_run, 0);
        assert_eq!(report.best_step, 0);
        assert_eq!(report.best_metric, report.init_metric);
        assert_eq!(student.params, before);
        assert_eq!(report.log.len(), 1, "only the step-0 row");
    }

    #[test]
    fn same_seed_runs_produce_identical_logs() {
        let cfg = lm_cfg(11, 6);
        let teacher = build_model(&cfg, 1).unwrap();
        let data = synth_data(
            Task::MarkovLm,
            3,
            &DataSizes { train_rows: 16, eval_rows: 4, seq: 6, vocab: 11 },
        )
        .unwrap();
        let tcfg = TrainConfig { dropout: 0.1, ..quick_train_cfg(2) };
        let kcfg = KDConfig { w_rep: 0.5, w_att: 0.5, ..KDConfig::default() };
        let run = || {
            let mut student = build_model(&cfg, 2).unwrap();
            qat_train(&mut student, &teacher, &data, &tcfg, &kcfg, None).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.log, b.log);
        assert_eq!(a.best_step, b.best_step);
    }

    #[test]
    fn passthrough_strategy_trains_identically_to_disabled() {
        let cfg = lm_cfg(11, 6);
        let teacher = build_model(&cfg, 1).unwrap();
        let data = synth_data(
            Task::MarkovLm,
            3,
            &DataSizes { train_rows: 12, eval_rows: 4, seq: 6, vocab: 11 },
        )
        .unwrap();
        let run = |strategy: QuantStrategy| {
            let mut student = build_model(&cfg, 2).unwrap();
            let tcfg = TrainConfig { strategy, ..quick_train_cfg(2) };
            qat_train(&mut student, &teacher, &data, &tcfg, &KDConfig::default(), None).unwrap()
        };
        let disabled = run(QuantStrategy::all_disabled());
        let passthrough = run(QuantStrategy::all_enabled(
            QuantScheme::passthrough(),
            QuantScheme::passthrough(),
        ));
        assert_eq!(disabled.log, passthrough.log);
    }

    #[test]
    fn quantized_training_with_kd_improves_the_student() {
        let cfg = lm_cfg(8, 8);
        let teacher = build_model(&cfg, 21).unwrap();
        let data = synth_data(
            Task::MarkovLm,
            13,
            &DataSizes { train_rows: 32, eval_rows: 8, seq: 8, vocab: 8 },
        )
        .unwrap();
        // Student starts from the teacher (QAT-from-checkpoint).
        let mut student = teacher.clone();
        let tcfg = TrainConfig {
            lr: 2e-3,
            epochs: 4,
            batch_size: 8,
            eval_every: 4,
            strategy: QuantStrategy::all_enabled(
                QuantScheme::int4(Mapping::Symmetric, Granularity::PerGroup(8)),
                QuantScheme::int8(Mapping::Asymmetric, Granularity::PerToken),
            ),
            ..TrainConfig::default()
        };
        let kcfg = KDConfig { w_logit: 1.0, w_rep: 0.2, ..KDConfig::default() };
        let report = qat_train(&mut student, &teacher, &data, &tcfg, &kcfg, None).unwrap();
        assert!(report.steps_run > 0);
        assert!(report.log.iter().all(|r| r.loss.is_finite()));
        // Best checkpoint can't be worse than the unadapted quantized model.
        assert!(report.best_metric <= report.init_metric + 1e-9);
        assert!(metric_improves(Task::MarkovLm, report.best_metric, report.init_metric)
            || report.best_metric == report.init_metric);
    }

    #[test]
    fn movement_pruning_refreshes_masks_during_training() {
        let cfg = lm_cfg(11, 6);
        let teacher = build_model(&cfg, 1).unwrap();
        let mut student = teacher.clone();
        let data = synth_data(
            Task::MarkovLm,
            3,
            &DataSizes { train_rows: 16, eval_rows: 4, seq: 6, vocab: 11 },
        )
        .unwrap();
        let tcfg = TrainConfig {
            sparsity: Some(SparsityConfig {
                sparsity: 0.5,
                structure: MaskStructure::PairNm { n: 2, m: 4 },
                order: CompositionOrder::PruneThenQuant,
                movement: Some(MovementConfig { score_lr: 0.1, refresh_every: 2 }),
            }),
            ..quick_train_cfg(1)
        };
        qat_train(&mut student, &teacher, &data, &tcfg, &KDConfig::default(), None).unwrap();
        let masks = &student.masks.as_ref().unwrap().masks;
        assert!(!masks.is_empty());
        for (name, mask) in masks {
            assert!((mask.sparsity() - 0.5).abs() < 1e-9, "{name} sparsity");
            mask.check_structure().unwrap();
        }
    }

    #[test]
    fn train_log_csv_round_trips_the_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        let rows = vec![LogRow {
            step: 0,
            loss: 1.5,
            loss_logit: 1.0,
            loss_att: 0.25,
            loss_rep: 0.25,
            loss_task: 0.0,
            eval_metric: 7.25,
        }];
        write_train_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), TRAIN_CSV_HEADER);
        assert_eq!(lines.next().unwrap(), "0,1.5,1,0.25,0.25,0,7.25");
    }
}
