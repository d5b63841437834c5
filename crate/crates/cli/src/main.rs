//! `q4fg` — command-line front end for the quantization toolkit.
//!
//! Every subcommand is a thin wrapper over library calls: load a container,
//! run one operation, save or report. Exit codes: 0 on success, 2 for usage
//! errors (clap), 1 for runtime failures.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};

use q4fg_core::analysis;
use q4fg_core::container::{load_model, read_tokens, save_model};
use q4fg_core::distill::{
    qat_train, synth_data, write_train_csv, AttVariant, DataSizes, KDConfig, MovementConfig,
    SparsityConfig, Task, TrainConfig,
};
use q4fg_core::gemm::{bench_gemm, write_bench_csv, GemmShapeCase, GemmShapeKind};
use q4fg_core::model::{effective_weight, reduce_model, Batch, CopyPolicy, MaskSet, TokenBatch};
use q4fg_core::quant::quantize;
use q4fg_core::sparsity::{l1_mask, CompositionOrder, MaskStructure};
use q4fg_core::tune::{parse_shapes, tune_strategy, StrategyTuneResult};
use q4fg_core::{
    Arch, Granularity, LnPlacement, Mapping, Model, ModelConfig, Part, QuantScheme, QuantStrategy,
    Tensor,
};

#[derive(Parser)]
#[command(
    name = "q4fg",
    version,
    about = "CPU-native INT4/INT8 quantization toolkit for small transformers"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Create a freshly initialized model container.
    Init(InitArgs),
    /// Quantize part weights of a container (post-training).
    Quantize(QuantizeArgs),
    /// Run a forward pass and report logits.
    Infer(InferArgs),
    /// Time all sixteen per-part strategies per input shape.
    TuneStrategy(TuneArgs),
    /// Quantization-aware training with knowledge distillation.
    TrainQat(TrainArgs),
    /// Attach magnitude-pruning masks to part weights.
    Prune(PruneArgs),
    /// Shrink a model to fewer layers, copying teacher weights.
    ReduceLayers(ReduceArgs),
    /// Micro-benchmark the packed integer GEMM kernels.
    Bench(BenchArgs),
    /// Positional and quantization-error diagnostics.
    Analyze(AnalyzeArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.cmd {
        Cmd::Init(a) => cmd_init(a),
        Cmd::Quantize(a) => cmd_quantize(a),
        Cmd::Infer(a) => cmd_infer(a),
        Cmd::TuneStrategy(a) => cmd_tune(a),
        Cmd::TrainQat(a) => cmd_train(a),
        Cmd::Prune(a) => cmd_prune(a),
        Cmd::ReduceLayers(a) => cmd_reduce(a),
        Cmd::Bench(a) => cmd_bench(a),
        Cmd::Analyze(a) => cmd_analyze(a),
    }
}

const PART_NAMES: [&str; 4] = ["qkv_proj", "attn_out", "mlp_intermediate", "mlp_out"];

fn parse_parts(names: &[String]) -> anyhow::Result<Vec<Part>> {
    let mut parts = Vec::new();
    for n in names {
        let p = Part::parse(n)?;
        if !parts.contains(&p) {
            parts.push(p);
        }
    }
    Ok(parts)
}

fn mapping_of(s: &str) -> Mapping {
    if s == "asym" {
        Mapping::Asymmetric
    } else {
        Mapping::Symmetric
    }
}

// ---------------------------------------------------------------------------
// init
// ---------------------------------------------------------------------------

#[derive(Args)]
struct InitArgs {
    #[arg(long, value_parser = ["decoder_only", "encoder_only", "encoder_decoder"])]
    arch: String,
    /// Encoder layers (encoder-bearing architectures).
    #[arg(long, default_value_t = 0)]
    enc: usize,
    /// Decoder layers (decoder-bearing architectures).
    #[arg(long, default_value_t = 0)]
    dec: usize,
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 4)]
    ffn_mult: usize,
    #[arg(long, value_parser = ["post", "pre"], default_value = "post")]
    ln: String,
    #[arg(long, default_value_t = 64)]
    vocab: usize,
    #[arg(long, default_value_t = 32)]
    max_seq: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn cmd_init(a: InitArgs) -> anyhow::Result<()> {
    let config = ModelConfig {
        arch: Arch::parse(&a.arch)?,
        num_encoder_layers: a.enc,
        num_decoder_layers: a.dec,
        hidden: a.hidden,
        heads: a.heads,
        ffn_mult: a.ffn_mult,
        ln_placement: if a.ln == "pre" { LnPlacement::Pre } else { LnPlacement::Post },
        vocab_size: a.vocab,
        max_seq: a.max_seq,
    };
    let model = q4fg_core::model::build_model(&config, a.seed)?;
    save_model(&model, &a.out)?;
    println!("initialized {} model: {} parameters -> {}", a.arch, model.param_numel(), a.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// quantize
// ---------------------------------------------------------------------------

#[derive(Args)]
struct QuantizeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = ["4", "8"])]
    bits: String,
    #[arg(long, value_parser = ["sym", "asym"], default_value = "sym")]
    mapping: String,
    /// Group size in elements; `d_in` groups one weight row (row-wise).
    /// Omit for per-tensor parameters.
    #[arg(long)]
    groups: Option<String>,
    /// Fixed clip range `LO,HI` applied before computing scales.
    #[arg(long)]
    clip: Option<String>,
    /// Parts to quantize (comma separated). Default: all four.
    #[arg(long, value_delimiter = ',', value_parser = PART_NAMES)]
    parts: Vec<String>,
}

/// Group-count granularity for one weight from the CLI `--groups` value
/// (element count per group, or `d_in` for one row per group).
fn weight_granularity(groups: Option<&str>, shape: &[usize]) -> anyhow::Result<Granularity> {
    let numel: usize = shape.iter().product();
    let Some(spec) = groups else { return Ok(Granularity::PerTensor) };
    let size = if spec == "d_in" {
        *shape.last().ok_or_else(|| anyhow!("scalar weights have no rows"))?
    } else {
        spec.parse::<usize>().with_context(|| format!("--groups '{spec}'"))?
    };
    if size == 0 || numel % size != 0 {
        bail!("group size {size} does not divide weight of {numel} elements");
    }
    Ok(Granularity::PerGroup(numel / size))
}

fn cmd_quantize(a: QuantizeArgs) -> anyhow::Result<()> {
    let mut model = load_model(&a.model)?;
    let bits: u8 = a.bits.parse().expect("clap restricted to 4|8");
    let parts =
        if a.parts.is_empty() { Part::ALL.to_vec() } else { parse_parts(&a.parts)? };
    let clip = match &a.clip {
        None => None,
        Some(text) => {
            let (lo, hi) = text
                .split_once(',')
                .ok_or_else(|| anyhow!("--clip wants 'LO,HI', got '{text}'"))?;
            Some((
                lo.trim().parse::<f32>().with_context(|| format!("--clip low '{lo}'"))?,
                hi.trim().parse::<f32>().with_context(|| format!("--clip high '{hi}'"))?,
            ))
        }
    };

    let mut done = 0usize;
    for (name, part) in model.part_weights() {
        if !parts.contains(&part) {
            continue;
        }
        if model.qweights.contains_key(&name) {
            bail!("weight '{name}' ({}) is already quantized; refusing to requantize", part.name());
        }
        let w = &model.params[&name];
        let mut scheme = QuantScheme {
            bits,
            mapping: mapping_of(&a.mapping),
            granularity: weight_granularity(a.groups.as_deref(), w.shape())?,
            clip: None,
        };
        if let Some((lo, hi)) = clip {
            scheme = scheme.with_clip(lo, hi);
        }
        // A stored sparsity mask must end up baked into the codes: the eval
        // path feeds materialized integer weights straight to the kernels
        // and assumes composition already happened.
        let mask = model.masks.as_ref().and_then(|ms| ms.masks.get(&name).map(|m| (m, ms.order)));
        let (q, mirror) = match mask {
            Some(mo) => {
                let eff = effective_weight(
                    w,
                    None,
                    Some(mo),
                    &QuantStrategy::all_enabled(scheme, QuantScheme::passthrough()),
                )?;
                let mirror = Tensor::from_vec(w.shape().to_vec(), eff.w_hat)?;
                (eff.q, mirror)
            }
            None => {
                let q = quantize(w, &scheme)?;
                let mirror = q.dequantize();
                (q, mirror)
            }
        };
        model.qweights.insert(name.clone(), q);
        model.params.insert(name, mirror);
        done += 1;
    }
    if done == 0 {
        bail!("selected parts have no weights in this model");
    }
    for p in &parts {
        model.strategy = enable_part(model.strategy, *p);
    }
    save_model(&model, &a.out)?;
    println!(
        "quantized {done} weights ({}) at int{bits} {} -> {}",
        parts.iter().map(|p| p.name()).collect::<Vec<_>>().join(","),
        a.mapping,
        a.out.display()
    );
    Ok(())
}

fn enable_part(mut s: QuantStrategy, p: Part) -> QuantStrategy {
    match p {
        Part::QkvProj => s.qkv_proj = true,
        Part::AttnOut => s.attn_out = true,
        Part::MlpIntermediate => s.mlp_intermediate = true,
        Part::MlpOut => s.mlp_out = true,
    }
    s
}

// ---------------------------------------------------------------------------
// infer
// ---------------------------------------------------------------------------

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    model: PathBuf,
    /// Token file (little-endian u32), at most `max_seq` tokens.
    #[arg(long)]
    input: PathBuf,
    /// Encoder-side token file (encoder_decoder models only).
    #[arg(long)]
    src: Option<PathBuf>,
    /// `off`, `stored`, `auto`, or a path to a strategy JSON file.
    #[arg(long, default_value = "stored")]
    strategy: String,
    /// Tune result (JSON) backing `--strategy auto`.
    #[arg(long)]
    tune: Option<PathBuf>,
    /// Where to write the per-position logits CSV.
    #[arg(long)]
    report: Option<PathBuf>,
}

fn resolve_strategy(
    model: &Model,
    spec: &str,
    tune: Option<&Path>,
    m: usize,
) -> anyhow::Result<QuantStrategy> {
    let strategy = match spec {
        "off" => QuantStrategy::all_disabled(),
        "stored" => model.strategy,
        "auto" => {
            let path = tune.ok_or_else(|| {
                anyhow!("--strategy auto needs --tune pointing at a tune-strategy result")
            })?;
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading tune result {}", path.display()))?;
            StrategyTuneResult::from_json(&text)?.strategy_for(m)?
        }
        path => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading strategy file {path}"))?;
            serde_json::from_str(&text).with_context(|| format!("parsing strategy file {path}"))?
        }
    };
    strategy.validate_for(&model.config)?;
    Ok(strategy)
}

fn write_logits_csv(path: &Path, logits: &[f32], seq: usize, vocab: usize) -> anyhow::Result<()> {
    use std::io::Write;
    let mut f = std::fs::File::create(path)?;
    let header: Vec<String> =
        std::iter::once("position".to_string()).chain((0..vocab).map(|t| format!("t{t}"))).collect();
    writeln!(f, "{}", header.join(","))?;
    for p in 0..seq {
        let row: Vec<String> =
            logits[p * vocab..(p + 1) * vocab].iter().map(|x| format!("{x}")).collect();
        writeln!(f, "{p},{}", row.join(","))?;
    }
    Ok(())
}

fn cmd_infer(a: InferArgs) -> anyhow::Result<()> {
    let model = load_model(&a.model)?;
    let tokens = read_tokens(&a.input)?;
    if tokens.is_empty() {
        bail!("input token file is empty");
    }
    if tokens.len() > model.config.max_seq {
        bail!("input of {} tokens exceeds max_seq {}", tokens.len(), model.config.max_seq);
    }
    let seq = tokens.len();
    let strategy = resolve_strategy(&model, &a.strategy, a.tune.as_deref(), seq)?;
    let batch = match (model.config.arch, &a.src) {
        (Arch::EncoderDecoder, Some(src_path)) => {
            let src = read_tokens(src_path)?;
            if src.is_empty() || src.len() > model.config.max_seq {
                bail!("--src must hold between 1 and {} tokens", model.config.max_seq);
            }
            let src_len = src.len();
            Batch::pair(
                TokenBatch::new(1, src_len, src)?,
                TokenBatch::new(1, seq, tokens.clone())?,
            )
        }
        (Arch::EncoderDecoder, None) => bail!("encoder_decoder inference needs --src"),
        (_, Some(_)) => bail!("--src only applies to encoder_decoder models"),
        (_, None) => Batch::single(TokenBatch::new(1, seq, tokens.clone())?),
    };
    let (tape, out) = model.run_eval(&batch, &strategy)?;
    let logits = tape.value(out.logits);
    let vocab = model.config.vocab_size;
    let last = &logits.data()[(seq - 1) * vocab..seq * vocab];
    let argmax = last
        .iter()
        .enumerate()
        .max_by(|x, y| x.1.partial_cmp(y.1).unwrap().then(y.0.cmp(&x.0)))
        .map(|(i, _)| i)
        .unwrap();
    println!("tokens={seq}");
    println!("argmax_last={argmax}");
    if model.config.arch == Arch::DecoderOnly && seq >= 2 {
        let nll = model.next_token_nll(&tokens, &strategy)?;
        let ppl = (nll.iter().sum::<f64>() / nll.len() as f64).exp();
        println!("window_ppl={ppl}");
    }
    if let Some(report) = &a.report {
        write_logits_csv(report, logits.data(), seq, vocab)?;
        println!("report={}", report.display());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// tune-strategy
// ---------------------------------------------------------------------------

/// Shared scheme flags for strategies built on the command line. Weight
/// groups are a group *count* which must divide the hidden size (so groups
/// tile whole rows of every part weight).
#[derive(Args)]
struct SchemeArgs {
    #[arg(long, value_parser = ["4", "8", "32"], default_value = "4")]
    w_bits: String,
    #[arg(long, value_parser = ["sym", "asym"], default_value = "sym")]
    w_mapping: String,
    /// Weight group count (must divide hidden); omit for per-tensor scales.
    #[arg(long)]
    w_groups: Option<usize>,
    #[arg(long, value_parser = ["4", "8", "32"], default_value = "8")]
    a_bits: String,
    #[arg(long, value_parser = ["sym", "asym"], default_value = "asym")]
    a_mapping: String,
    /// Activation granularity.
    #[arg(long, value_parser = ["per_token", "per_tensor"], default_value = "per_token")]
    a_granularity: String,
}

impl SchemeArgs {
    fn weight_scheme(&self) -> QuantScheme {
        QuantScheme {
            bits: self.w_bits.parse().expect("clap restricted"),
            mapping: mapping_of(&self.w_mapping),
            granularity: match self.w_groups {
                Some(g) => Granularity::PerGroup(g),
                None => Granularity::PerTensor,
            },
            clip: None,
        }
    }

    fn activation_scheme(&self) -> QuantScheme {
        QuantScheme {
            bits: self.a_bits.parse().expect("clap restricted"),
            mapping: mapping_of(&self.a_mapping),
            granularity: if self.a_granularity == "per_tensor" {
                Granularity::PerTensor
            } else {
                Granularity::PerToken
            },
            clip: None,
        }
    }
}

#[derive(Args)]
struct TuneArgs {
    #[arg(long)]
    model: PathBuf,
    /// Shapes to tune for, `batch,seq` pairs separated by `;`.
    #[arg(long)]
    shapes: String,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[command(flatten)]
    schemes: SchemeArgs,
    #[arg(long)]
    out: PathBuf,
}

fn cmd_tune(a: TuneArgs) -> anyhow::Result<()> {
    let model = load_model(&a.model)?;
    let shapes = parse_shapes(&a.shapes)?;
    let result = tune_strategy(
        &model,
        &shapes,
        a.repeats,
        a.schemes.weight_scheme(),
        a.schemes.activation_scheme(),
    )?;
    std::fs::write(&a.out, result.to_json()?)?;
    for bucket in &result.shapes {
        let best = &bucket.timings[bucket.chosen_mask as usize];
        println!(
            "m={} chosen_mask={:#06b} median_ns={}",
            bucket.m, bucket.chosen_mask, best.median_ns
        );
    }
    println!("tune_result={}", a.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// train-qat
// ---------------------------------------------------------------------------

#[derive(Args)]
struct TrainArgs {
    /// Teacher container; also the student init when no reduction is asked.
    #[arg(long)]
    teacher: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = ["majority_classification", "markov_lm", "copy_lm"])]
    task: String,
    #[arg(long, default_value_t = 2)]
    epochs: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f32,
    #[arg(long, default_value_t = 0.0)]
    dropout: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    eval_every: usize,
    #[arg(long, default_value_t = 256)]
    train_rows: usize,
    #[arg(long, default_value_t = 64)]
    eval_rows: usize,
    /// Sequence length of synthesized rows (default: the model's max_seq).
    #[arg(long)]
    seq: Option<usize>,
    /// Parts to train quantized: `all`, `none`, or a comma list.
    #[arg(long, default_value = "none")]
    enable: String,
    #[command(flatten)]
    schemes: SchemeArgs,
    #[arg(long, default_value_t = 1.0)]
    w_logit: f32,
    #[arg(long, default_value_t = 0.0)]
    w_att: f32,
    #[arg(long, default_value_t = 0.0)]
    w_rep: f32,
    #[arg(long, default_value_t = 0.0)]
    w_task: f32,
    #[arg(long, default_value_t = 1.0)]
    temperature: f32,
    #[arg(long, value_parser = ["normalized", "prenorm"], default_value = "normalized")]
    att_variant: String,
    /// Reduce the student to this many encoder layers before training.
    #[arg(long)]
    enc: Option<usize>,
    /// Reduce the student to this many decoder layers before training.
    #[arg(long)]
    dec: Option<usize>,
    #[arg(long, value_parser = ["first_enc_spaced_dec", "spaced_both"], default_value = "first_enc_spaced_dec")]
    copy_policy: String,
    /// Target sparsity in [0,1); turns on pruning during training.
    #[arg(long)]
    prune_sparsity: Option<f64>,
    /// Structured pruning pattern `N:M` (implies 50% for 2:4 unless
    /// --prune-sparsity narrows it).
    #[arg(long)]
    nm: Option<String>,
    #[arg(long, value_parser = ["prune_then_quant", "quant_then_prune"], default_value = "prune_then_quant")]
    prune_order: String,
    /// Movement-pruning score learning rate; omit for static magnitude masks.
    #[arg(long)]
    movement_lr: Option<f32>,
    #[arg(long, default_value_t = 8)]
    movement_cadence: usize,
    /// Training log CSV destination.
    #[arg(long)]
    log: Option<PathBuf>,
}

fn parse_nm(text: &str) -> anyhow::Result<(usize, usize)> {
    let (n, m) = text.split_once(':').ok_or_else(|| anyhow!("--nm wants 'N:M', got '{text}'"))?;
    Ok((
        n.trim().parse().with_context(|| format!("--nm N '{n}'"))?,
        m.trim().parse().with_context(|| format!("--nm M '{m}'"))?,
    ))
}

fn build_strategy(enable: &str, schemes: &SchemeArgs) -> anyhow::Result<QuantStrategy> {
    if enable == "none" {
        return Ok(QuantStrategy::all_disabled());
    }
    let parts = if enable == "all" {
        Part::ALL.to_vec()
    } else {
        parse_parts(&enable.split(',').map(str::to_string).collect::<Vec<_>>())?
    };
    let mut s = QuantStrategy::from_mask(0, schemes.weight_scheme(), schemes.activation_scheme());
    for p in parts {
        s = enable_part(s, p);
    }
    Ok(s)
}

fn cmd_train(a: TrainArgs) -> anyhow::Result<()> {
    let teacher = load_model(&a.teacher)?;
    let task = Task::parse(&a.task)?;
    let sizes = DataSizes {
        train_rows: a.train_rows,
        eval_rows: a.eval_rows,
        seq: a.seq.unwrap_or(teacher.config.max_seq),
        vocab: teacher.config.vocab_size,
    };
    let data = synth_data(task, a.seed, &sizes)?;

    let (mut student, mapping) = match (a.enc, a.dec) {
        (None, None) => (teacher.clone(), None),
        (enc, dec) => {
            let policy = if a.copy_policy == "spaced_both" {
                CopyPolicy::SpacedBoth
            } else {
                CopyPolicy::FirstEncSpacedDec
            };
            let (s, m) = reduce_model(
                &teacher,
                enc.unwrap_or(teacher.config.num_encoder_layers),
                dec.unwrap_or(teacher.config.num_decoder_layers),
                policy,
            )?;
            (s, Some(m))
        }
    };

    let sparsity = match (&a.nm, a.prune_sparsity) {
        (None, None) => None,
        (nm, explicit) => {
            let structure = match nm {
                Some(text) => {
                    let (n, m) = parse_nm(text)?;
                    MaskStructure::PairNm { n, m }
                }
                None => MaskStructure::Unstructured,
            };
            let sparsity = match (explicit, &structure) {
                (Some(s), _) => s,
                (None, MaskStructure::PairNm { n, m }) => *n as f64 / *m as f64,
                (None, MaskStructure::Unstructured) => unreachable!("guarded above"),
            };
            Some(SparsityConfig {
                sparsity,
                structure,
                order: if a.prune_order == "quant_then_prune" {
                    CompositionOrder::QuantThenPrune
                } else {
                    CompositionOrder::PruneThenQuant
                },
                movement: a.movement_lr.map(|score_lr| MovementConfig {
                    score_lr,
                    refresh_every: a.movement_cadence,
                }),
            })
        }
    };

    let tcfg = TrainConfig {
        lr: a.lr,
        epochs: a.epochs,
        batch_size: a.batch,
        dropout: a.dropout,
        seed: a.seed,
        adam: Default::default(),
        eval_every: a.eval_every,
        strategy: build_strategy(&a.enable, &a.schemes)?,
        sparsity,
    };
    let kcfg = KDConfig {
        w_logit: a.w_logit,
        w_att: a.w_att,
        w_rep: a.w_rep,
        w_task: a.w_task,
        temperature: a.temperature,
        att_variant: if a.att_variant == "prenorm" {
            AttVariant::Prenorm
        } else {
            AttVariant::Normalized
        },
    };

    let report = qat_train(&mut student, &teacher, &data, &tcfg, &kcfg, mapping.as_ref())?;
    student.strategy = tcfg.strategy;
    save_model(&student, &a.out)?;
    if let Some(log) = &a.log {
        write_train_csv(log, &report.log)?;
    }
    println!(
        "steps={} best_step={} best_metric={} init_metric={} teacher_metric={}",
        report.steps_run, report.best_step, report.best_metric, report.init_metric,
        report.teacher_metric
    );
    println!("student={}", a.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// prune
// ---------------------------------------------------------------------------

#[derive(Args)]
#[group(required = true, multiple = true)]
struct PruneSpec {
    /// Structured pattern `N:M` (N zeros per M consecutive weights).
    #[arg(long, group = "spec")]
    nm: Option<String>,
    /// Fraction of weights to zero (default for `--nm N:M`: N/M).
    #[arg(long, group = "spec")]
    sparsity: Option<f64>,
}

#[derive(Args)]
struct PruneArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    spec: PruneSpec,
    #[arg(long, value_delimiter = ',', value_parser = PART_NAMES)]
    parts: Vec<String>,
    #[arg(long, value_parser = ["prune_then_quant", "quant_then_prune"], default_value = "prune_then_quant")]
    order: String,
}

fn cmd_prune(a: PruneArgs) -> anyhow::Result<()> {
    let mut model = load_model(&a.model)?;
    let parts =
        if a.parts.is_empty() { Part::ALL.to_vec() } else { parse_parts(&a.parts)? };
    let structure = match &a.spec.nm {
        Some(text) => {
            let (n, m) = parse_nm(text)?;
            MaskStructure::PairNm { n, m }
        }
        None => MaskStructure::Unstructured,
    };
    let sparsity = match (a.spec.sparsity, &structure) {
        (Some(s), _) => s,
        (None, MaskStructure::PairNm { n, m }) => *n as f64 / *m as f64,
        (None, MaskStructure::Unstructured) => unreachable!("clap group requires one"),
    };
    let order = if a.order == "quant_then_prune" {
        CompositionOrder::QuantThenPrune
    } else {
        CompositionOrder::PruneThenQuant
    };

    let mut masks = model.masks.take().map(|s| s.masks).unwrap_or_else(BTreeMap::new);
    let mut done = 0usize;
    for (name, part) in model.part_weights() {
        if !parts.contains(&part) {
            continue;
        }
        let mask = l1_mask(&model.params[&name], sparsity, structure)?;
        let kept = mask.keep.iter().filter(|&&k| k).count();
        println!("masked {name}: kept {kept}/{}", mask.keep.len());
        // Weights already materialized as integer codes have to be rebuilt:
        // the eval path consumes stored codes as-is, so masking only the
        // metadata would leave the forward pass unpruned.
        if let Some(qt) = model.qweights.get(&name) {
            let scheme = qt.scheme;
            let eff = effective_weight(
                &model.params[&name],
                None,
                Some((&mask, order)),
                &QuantStrategy::all_enabled(scheme, QuantScheme::passthrough()),
            )?;
            let shape = model.params[&name].shape().to_vec();
            model.qweights.insert(name.clone(), eff.q);
            model.params.insert(name.clone(), Tensor::from_vec(shape, eff.w_hat)?);
            println!("rebuilt stored int codes for {name} ({})", a.order);
        }
        masks.insert(name, mask);
        done += 1;
    }
    if done == 0 {
        bail!("selected parts have no weights in this model");
    }
    model.masks = Some(MaskSet { masks, order });
    save_model(&model, &a.out)?;
    println!("pruned={}", a.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// reduce-layers
// ---------------------------------------------------------------------------

#[derive(Args)]
struct ReduceArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Target encoder depth (default: unchanged).
    #[arg(long)]
    enc: Option<usize>,
    /// Target decoder depth (default: unchanged).
    #[arg(long)]
    dec: Option<usize>,
    #[arg(long, value_parser = ["first_enc_spaced_dec", "spaced_both"], default_value = "first_enc_spaced_dec")]
    policy: String,
}

fn cmd_reduce(a: ReduceArgs) -> anyhow::Result<()> {
    let teacher = load_model(&a.model)?;
    let policy = if a.policy == "spaced_both" {
        CopyPolicy::SpacedBoth
    } else {
        CopyPolicy::FirstEncSpacedDec
    };
    let (student, mapping) = reduce_model(
        &teacher,
        a.enc.unwrap_or(teacher.config.num_encoder_layers),
        a.dec.unwrap_or(teacher.config.num_decoder_layers),
        policy,
    )?;
    save_model(&student, &a.out)?;
    println!("encoder_map={:?}", mapping.encoder);
    println!("decoder_map={:?}", mapping.decoder);
    println!("reduced={}", a.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

#[derive(Args)]
struct BenchArgs {
    /// GEMM case, or `all` for the four block shapes.
    #[arg(long, value_parser = ["all", "qkv_proj", "attn_out", "mlp_intermediate", "mlp_out"], default_value = "all")]
    case: String,
    /// Comma-separated bit widths out of 4, 8, 32.
    #[arg(long, default_value = "4,8")]
    bits: String,
    /// Token rows M.
    #[arg(long, default_value_t = 64)]
    m: usize,
    /// Hidden size h; cases derive N and K from it.
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    /// CSV destination (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_bench(a: BenchArgs) -> anyhow::Result<()> {
    let kinds: Vec<GemmShapeKind> = if a.case == "all" {
        GemmShapeKind::ALL.to_vec()
    } else {
        vec![GemmShapeKind::parse(&a.case)?]
    };
    let mut bits = Vec::new();
    for piece in a.bits.split(',').filter(|p| !p.trim().is_empty()) {
        let b: u8 = piece.trim().parse().with_context(|| format!("--bits '{piece}'"))?;
        if !(b == 4 || b == 8 || b == 32) {
            bail!("--bits values must be 4, 8 or 32, got {b}");
        }
        bits.push(b);
    }
    if bits.is_empty() {
        bail!("--bits list is empty");
    }
    let mut records = Vec::new();
    for kind in &kinds {
        for &b in &bits {
            let case = GemmShapeCase { kind: *kind, m: a.m, hidden: a.hidden };
            records.push(bench_gemm(&case, b, a.repeats)?);
        }
    }
    match &a.out {
        Some(path) => {
            let mut f = std::fs::File::create(path)?;
            write_bench_csv(&records, &mut f)?;
            println!("bench={}", path.display());
        }
        None => {
            let stdout = std::io::stdout();
            write_bench_csv(&records, &mut stdout.lock())?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// analyze
// ---------------------------------------------------------------------------

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_parser = ["positional_ppl", "activation_range", "quant_error"])]
    mode: String,
    /// Token file feeding positional modes.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Strategy to analyze under: `off`, `stored`, `auto`, or a JSON file.
    #[arg(long, default_value = "stored")]
    strategy: String,
    #[arg(long)]
    tune: Option<PathBuf>,
    /// Layer probed by activation_range.
    #[arg(long, default_value_t = 0)]
    layer: usize,
    /// Part probed by activation_range.
    #[arg(long, value_parser = PART_NAMES, default_value = "mlp_out")]
    part: String,
    /// Stack probed by activation_range (default: decoder when present).
    #[arg(long, value_parser = ["encoder", "decoder"])]
    stack: Option<String>,
    /// Cap on probed batches for activation_range.
    #[arg(long, default_value_t = 8)]
    max_batches: usize,
    /// Weight inspected by quant_error (default: first part weight).
    #[arg(long)]
    param: Option<String>,
}

fn stream_batches(model: &Model, tokens: &[u32], cap: usize) -> anyhow::Result<Vec<Batch>> {
    let w = model.config.max_seq;
    let batches: Vec<Batch> = tokens
        .chunks_exact(w)
        .take(cap)
        .map(|chunk| {
            let t = TokenBatch::new(1, w, chunk.to_vec())?;
            Ok(match model.config.arch {
                Arch::EncoderDecoder => Batch::pair(t.clone(), t),
                _ => Batch::single(t),
            })
        })
        .collect::<q4fg_core::Result<_>>()?;
    if batches.is_empty() {
        bail!("token stream has no full {w}-token window");
    }
    Ok(batches)
}

fn cmd_analyze(a: AnalyzeArgs) -> anyhow::Result<()> {
    let model = load_model(&a.model)?;
    let strategy =
        resolve_strategy(&model, &a.strategy, a.tune.as_deref(), model.config.max_seq)?;
    let need_input =
        || a.input.clone().ok_or_else(|| anyhow!("--mode {} needs --input", a.mode));
    match a.mode.as_str() {
        "positional_ppl" => {
            let tokens = read_tokens(&need_input()?)?;
            let stats = analysis::positional_perplexity(&model, &tokens, &strategy)?;
            analysis::emit_report(&stats, &a.out)?;
        }
        "activation_range" => {
            let tokens = read_tokens(&need_input()?)?;
            let batches = stream_batches(&model, &tokens, a.max_batches)?;
            let stack = match a.stack.as_deref() {
                Some("encoder") => analysis::Stack::Encoder,
                Some("decoder") => analysis::Stack::Decoder,
                _ if model.config.num_decoder_layers > 0 => analysis::Stack::Decoder,
                _ => analysis::Stack::Encoder,
            };
            let stats = analysis::positional_activation_range(
                &model,
                &batches,
                stack,
                a.layer,
                Part::parse(&a.part)?,
                &strategy,
            )?;
            analysis::emit_report(&stats, &a.out)?;
        }
        "quant_error" => {
            let name = match &a.param {
                Some(n) => n.clone(),
                None => {
                    model
                        .part_weights()
                        .first()
                        .map(|(n, _)| n.clone())
                        .ok_or_else(|| anyhow!("model has no part weights"))?
                }
            };
            let w = model
                .params
                .get(&name)
                .ok_or_else(|| anyhow!("model has no parameter '{name}'"))?;
            let rows = w.shape()[0];
            let mut schemes = vec![QuantScheme::passthrough()];
            for bits in [4u8, 8] {
                for mapping in [Mapping::Symmetric, Mapping::Asymmetric] {
                    for granularity in [Granularity::PerTensor, Granularity::PerGroup(rows)] {
                        schemes.push(QuantScheme { bits, mapping, granularity, clip: None });
                    }
                }
            }
            let report = analysis::quant_error_report(w, &schemes)?;
            analysis::write_quant_error_csv(&report, &a.out)?;
        }
        other => unreachable!("clap restricted mode '{other}'"),
    }
    println!("analysis={}", a.out.display());
    Ok(())
}
