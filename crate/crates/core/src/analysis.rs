//! Failure-case diagnostics: positional activation ranges, positional
//! perplexity, and quantizer error reports.
//!
//! Everything here is pure measurement over an immutable model — these are
//! the instruments used to explain *why* a quantized configuration fails,
//! not part of the training or inference path.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Batch, Model, Part, QuantStrategy};
use crate::quant::{quantize, QTensor, QuantScheme};
use crate::tensor::Tensor;

/// Which stack of an encoder–decoder model to probe. Single-stack models
/// accept only their own stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stack {
    Encoder,
    Decoder,
}

/// Per-position curve: `mean[p]` ± `std[p]`. The position axis meaning
/// depends on the producing instrument (input position for activation
/// ranges, predicted-token position for perplexity).
#[derive(Debug, Clone, PartialEq)]
pub struct PositionalStats {
    pub positions: Vec<usize>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl PositionalStats {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

pub const POSITIONAL_CSV_HEADER: &str = "position,mean,std";

/// Writes `position,mean,std` rows, UTF-8 with LF line endings.
pub fn emit_report(stats: &PositionalStats, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "{POSITIONAL_CSV_HEADER}")?;
    for i in 0..stats.len() {
        writeln!(f, "{},{},{}", stats.positions[i], stats.mean[i], stats.std[i])?;
    }
    Ok(())
}

/// Parses a file produced by [`emit_report`].
pub fn parse_report(text: &str) -> Result<PositionalStats> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == POSITIONAL_CSV_HEADER => {}
        other => {
            return Err(Error::Format(format!(
                "expected header '{POSITIONAL_CSV_HEADER}', got {other:?}"
            )))
        }
    }
    let mut stats = PositionalStats { positions: Vec::new(), mean: Vec::new(), std: Vec::new() };
    for (n, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(Error::Format(format!("row {n} has {} fields", fields.len())));
        }
        let bad = |what: &str| Error::Format(format!("row {n}: bad {what} '{line}'"));
        stats.positions.push(fields[0].parse().map_err(|_| bad("position"))?);
        stats.mean.push(fields[1].parse().map_err(|_| bad("mean"))?);
        stats.std.push(fields[2].parse().map_err(|_| bad("std"))?);
    }
    Ok(stats)
}

fn mean_std(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    // Population standard deviation: a single batch reports exactly 0.
    let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per-position activation range of one part's input: for each sequence
/// position, `max - min` over everything the batch feeds that position
/// (feature dimension, pooled over batch rows), then mean ± std across
/// batches.
pub fn positional_activation_range(
    model: &Model,
    batches: &[Batch],
    stack: Stack,
    layer_index: usize,
    part: Part,
    strategy: &QuantStrategy,
) -> Result<PositionalStats> {
    if batches.is_empty() {
        return Err(Error::EmptyDimension { context: "positional_activation_range batches" });
    }
    let seq = batches[0].tokens.seq;
    if batches.iter().any(|b| b.tokens.seq != seq) {
        return Err(Error::InvalidConfig(
            "all probed batches must share one sequence length".into(),
        ));
    }
    // gaps[p] collects one value per batch.
    let mut gaps: Vec<Vec<f64>> = vec![Vec::with_capacity(batches.len()); seq];
    for batch in batches {
        let (tape, out) = model.run_eval(batch, strategy)?;
        let traces = match stack {
            Stack::Encoder => &out.enc_layers,
            Stack::Decoder => &out.dec_layers,
        };
        let trace = traces.get(layer_index).ok_or_else(|| {
            Error::InvalidConfig(format!(
                "layer {layer_index} out of range for a {}-layer stack",
                traces.len()
            ))
        })?;
        let act = tape.value(trace.parts.get(part));
        let (rows, feat) = act.dims2("probed activation")?;
        let b = batch.tokens.batch;
        debug_assert_eq!(rows, b * seq);
        for p in 0..seq {
            let mut lo = f32::INFINITY;
            let mut hi = f32::NEG_INFINITY;
            for r in 0..b {
                let row = &act.data()[(r * seq + p) * feat..(r * seq + p + 1) * feat];
                for &x in row {
                    lo = lo.min(x);
                    hi = hi.max(x);
                }
            }
            gaps[p].push((hi - lo) as f64);
        }
    }
    let mut stats = PositionalStats {
        positions: (0..seq).collect(),
        mean: Vec::with_capacity(seq),
        std: Vec::with_capacity(seq),
    };
    for samples in &gaps {
        let (m, s) = mean_std(samples);
        stats.mean.push(m);
        stats.std.push(s);
    }
    Ok(stats)
}

/// Per-position perplexity over non-overlapping full-length windows of
/// `stream`: position `p` (1-based target index inside each window) reports
/// `exp(mean over windows of NLL at p)`; `std` is the population std of the
/// per-window NLL in nats.
pub fn positional_perplexity(
    model: &Model,
    stream: &[u32],
    strategy: &QuantStrategy,
) -> Result<PositionalStats> {
    let w = model.config.max_seq;
    if w < 2 {
        return Err(Error::InvalidConfig("windows need at least 2 tokens".into()));
    }
    let windows: Vec<&[u32]> = stream.chunks_exact(w).collect();
    if windows.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "stream of {} tokens has no full {w}-token window",
            stream.len()
        )));
    }
    // nll[p - 1] holds one value per window for target position p.
    let mut nll: Vec<Vec<f64>> = vec![Vec::with_capacity(windows.len()); w - 1];
    for window in windows {
        let per_pos = model.next_token_nll(window, strategy)?;
        for (slot, v) in nll.iter_mut().zip(per_pos) {
            slot.push(v);
        }
    }
    let mut stats = PositionalStats {
        positions: (1..w).collect(),
        mean: Vec::with_capacity(w - 1),
        std: Vec::with_capacity(w - 1),
    };
    for samples in &nll {
        let (m, s) = mean_std(samples);
        stats.mean.push(m.exp());
        stats.std.push(s);
    }
    Ok(stats)
}

/// One row of [`quant_error_report`].
#[derive(Debug, Clone, PartialEq)]
pub struct QuantErrorRow {
    pub scheme: QuantScheme,
    pub rms_error: f64,
    pub max_error: f64,
    /// Fraction of the integer code book the tensor actually lands on
    /// (1.0 for passthrough, which has no code book to waste).
    pub range_utilization: f64,
}

pub const QUANT_ERROR_CSV_HEADER: &str =
    "bits,mapping,granularity,rms_error,max_error,range_utilization";

fn granularity_label(s: &QuantScheme) -> String {
    match s.granularity {
        crate::quant::Granularity::PerTensor => "per_tensor".into(),
        crate::quant::Granularity::PerGroup(g) => format!("per_group({g})"),
        crate::quant::Granularity::PerToken => "per_token".into(),
    }
}

fn utilization(q: &QTensor) -> f64 {
    match q.codes() {
        None => 1.0,
        Some(codes) => {
            let mut seen = std::collections::BTreeSet::new();
            for c in codes {
                seen.insert(c);
            }
            seen.len() as f64 / q.scheme.code_count() as f64
        }
    }
}

/// Roundtrip error and code-book utilization of `x` under each scheme.
pub fn quant_error_report(x: &Tensor, schemes: &[QuantScheme]) -> Result<Vec<QuantErrorRow>> {
    if schemes.is_empty() {
        return Err(Error::EmptyDimension { context: "quant_error_report schemes" });
    }
    let mut rows = Vec::with_capacity(schemes.len());
    for scheme in schemes {
        let q = quantize(x, scheme)?;
        let back = q.dequantize();
        rows.push(QuantErrorRow {
            scheme: *scheme,
            rms_error: x.rms_diff(&back)?,
            max_error: x.max_abs_diff(&back)?,
            range_utilization: utilization(&q),
        });
    }
    Ok(rows)
}

pub fn write_quant_error_csv(rows: &[QuantErrorRow], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "{QUANT_ERROR_CSV_HEADER}")?;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{},{},{}",
            r.scheme.bits,
            match r.scheme.mapping {
                crate::quant::Mapping::Symmetric => "symmetric",
                crate::quant::Mapping::Asymmetric => "asymmetric",
            },
            granularity_label(&r.scheme),
            r.rms_error,
            r.max_error,
            r.range_utilization
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, Arch, LnPlacement, ModelConfig, TokenBatch};
    use crate::quant::{Granularity, Mapping};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dec_cfg() -> ModelConfig {
        ModelConfig {
            arch: Arch::DecoderOnly,
            num_encoder_layers: 0,
            num_decoder_layers: 2,
            hidden: 32,
            heads: 2,
            ffn_mult: 4,
            ln_placement: LnPlacement::Post,
            vocab_size: 17,
            max_seq: 6,
        }
    }

    #[test]
    fn positional_and_overall_perplexity_agree_geometrically() {
        let model = build_model(&dec_cfg(), 3).unwrap();
        let strategy = QuantStrategy::all_disabled();
        // 5 full windows, no remainder, so every position has equal counts.
        let stream: Vec<u32> = (0..30).map(|i| ((i * 5 + 2) % 17) as u32).collect();
        let pos = positional_perplexity(&model, &stream, &strategy).unwrap();
        let overall = model.perplexity(&stream, &strategy).unwrap();
        let geo = (pos.mean.iter().map(|p| p.ln()).sum::<f64>() / pos.mean.len() as f64).exp();
        assert!(
            (geo - overall).abs() < 1e-6 * overall,
            "geometric mean {geo} vs overall {overall}"
        );
    }

    #[test]
    fn single_window_positional_ppl_is_exact_nll_exp() {
        let model = build_model(&dec_cfg(), 3).unwrap();
        let strategy = QuantStrategy::all_disabled();
        let stream: Vec<u32> = (0..6).map(|i| (i % 17) as u32).collect();
        let pos = positional_perplexity(&model, &stream, &strategy).unwrap();
        let nll = model.next_token_nll(&stream, &strategy).unwrap();
        assert_eq!(pos.len(), nll.len());
        for (p, (ppl, n)) in pos.mean.iter().zip(&nll).enumerate() {
            assert!((ppl - n.exp()).abs() < 1e-12, "position {p}");
            assert_eq!(pos.std[p], 0.0, "single window has no spread");
        }
    }

    #[test]
    fn activation_range_matches_brute_force_oracle() {
        let model = build_model(&dec_cfg(), 9).unwrap();
        let strategy = QuantStrategy::all_disabled();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let batches: Vec<Batch> = (0..3)
            .map(|_| {
                let ids = (0..6).map(|_| rng.gen_range(0..17u32)).collect();
                Batch::single(TokenBatch::new(1, 6, ids).unwrap())
            })
            .collect();
        let stats = positional_activation_range(
            &model,
            &batches,
            Stack::Decoder,
            1,
            Part::MlpOut,
            &strategy,
        )
        .unwrap();

        // Oracle: rerun the forwards and reduce by hand.
        let mut per_batch_gap: Vec<Vec<f64>> = Vec::new();
        for batch in &batches {
            let (tape, out) = model.run_eval(batch, &strategy).unwrap();
            let act = tape.value(out.dec_layers[1].parts.mlp_out);
            let feat = act.shape()[1];
            let gaps: Vec<f64> = (0..6)
                .map(|p| {
                    let row = &act.data()[p * feat..(p + 1) * feat];
                    let lo = row.iter().cloned().fold(f32::INFINITY, f32::min);
                    let hi = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                    (hi - lo) as f64
                })
                .collect();
            per_batch_gap.push(gaps);
        }
        for p in 0..6 {
            let samples: Vec<f64> = per_batch_gap.iter().map(|g| g[p]).collect();
            let mean = samples.iter().sum::<f64>() / samples.len() as f64;
            assert_eq!(stats.mean[p], mean, "position {p} mean");
            assert!(stats.std[p] >= 0.0);
        }
    }

    #[test]
    fn single_batch_activation_range_has_zero_std() {
        let model = build_model(&dec_cfg(), 9).unwrap();
        let batch = Batch::single(TokenBatch::new(1, 6, vec![1, 2, 3, 4, 5, 6]).unwrap());
        let stats = positional_activation_range(
            &model,
            std::slice::from_ref(&batch),
            Stack::Decoder,
            0,
            Part::QkvProj,
            &QuantStrategy::all_disabled(),
        )
        .unwrap();
        assert!(stats.std.iter().all(|&s| s == 0.0));
        assert!(stats.mean.iter().all(|&m| m >= 0.0));
    }

    #[test]
    fn report_round_trips_through_csv() {
        let stats = PositionalStats {
            positions: vec![0, 1],
            mean: vec![1.25, 3.5],
            std: vec![0.0, 0.125],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stats.csv");
        emit_report(&stats, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 3, "header + 2 rows");
        assert!(!text.contains('\r'), "LF endings only");
        assert_eq!(parse_report(&text).unwrap(), stats);
        // Deterministic bytes.
        emit_report(&stats, &path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), text);
    }

    #[test]
    fn error_report_orders_schemes_as_documented() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        // All-positive data: asymmetric spends its codes better.
        let x = Tensor::rand_uniform(vec![64, 16], 0.5, 4.0, &mut rng);
        let rows = quant_error_report(
            &x,
            &[
                QuantScheme::passthrough(),
                QuantScheme::int4(Mapping::Symmetric, Granularity::PerTensor),
                QuantScheme::int4(Mapping::Asymmetric, Granularity::PerTensor),
                QuantScheme::int4(Mapping::Symmetric, Granularity::PerGroup(64 * 16)),
            ],
        )
        .unwrap();
        assert_eq!(rows[0].rms_error, 0.0, "passthrough is exact");
        assert_eq!(rows[0].range_utilization, 1.0);
        assert!(rows[2].rms_error <= rows[1].rms_error, "asym beats sym on positive data");
        assert!(rows[2].range_utilization > rows[1].range_utilization);
        // Per-element groups reconstruct up to two f32 roundings (scale, then
        // scale * code), so the error is ulp-scale rather than zero.
        assert!(rows[3].rms_error < 1e-5, "per-element groups nearly exact");
        assert!(rows[3].rms_error < rows[1].rms_error, "refinement helps");
    }

    #[test]
    fn quant_error_csv_has_pinned_header() {
        let x = Tensor::from_vec(vec![4], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let rows =
            quant_error_report(&x, &[QuantScheme::int8(Mapping::Symmetric, Granularity::PerTensor)])
                .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("err.csv");
        write_quant_error_csv(&rows, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("bits,mapping,granularity,"));
    }
}
