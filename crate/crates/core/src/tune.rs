//! Strategy auto-tuning: measure every per-part quantization combination on
//! representative input shapes and remember the fastest one per shape bucket.
//!
//! There are four quantizable parts, so sixteen on/off combinations. For each
//! requested `(batch, seq)` shape the tuner times complete forward passes —
//! dynamic activation quantization and weight dequantization overhead
//! included, because that overhead is exactly what makes small-`M` buckets
//! prefer fewer quantized parts. Results serialize to JSON so a tuning run
//! can be reused across processes.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Batch, Model, QuantStrategy, TokenBatch};
use crate::quant::QuantScheme;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub batch: usize,
    pub seq: usize,
}

impl ShapeSpec {
    pub fn m(&self) -> usize {
        self.batch * self.seq
    }
}

/// Median forward-pass time for one part mask at one shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrategyTiming {
    pub mask: u8,
    pub median_ns: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeTuneResult {
    pub batch: usize,
    pub seq: usize,
    /// Token rows: `batch * seq`.
    pub m: usize,
    /// All sixteen measurements, indexed by part mask.
    pub timings: Vec<StrategyTiming>,
    /// Part mask with the smallest median; ties resolve to the lowest mask.
    pub chosen_mask: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyTuneResult {
    pub weight_scheme: QuantScheme,
    pub activation_scheme: QuantScheme,
    pub shapes: Vec<ShapeTuneResult>,
}

impl StrategyTuneResult {
    /// The bucket whose `m` is nearest to the query (ties pick the smaller
    /// bucket, matching the sorted order the tuner stores).
    pub fn pick(&self, m: usize) -> Result<&ShapeTuneResult> {
        self.shapes
            .iter()
            .min_by_key(|s| (s.m.abs_diff(m), s.m))
            .ok_or(Error::EmptyDimension { context: "tune result has no shape buckets" })
    }

    /// Strategy to run for a batch of `m` token rows.
    pub fn strategy_for(&self, m: usize) -> Result<QuantStrategy> {
        let bucket = self.pick(m)?;
        Ok(QuantStrategy::from_mask(bucket.chosen_mask, self.weight_scheme, self.activation_scheme))
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::Format(format!("tune result serialization: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("tune result parse: {e}")))
    }
}

fn median_ns(mut runs: Vec<u64>) -> u64 {
    runs.sort_unstable();
    let n = runs.len();
    if n % 2 == 1 {
        runs[n / 2]
    } else {
        (runs[n / 2 - 1] + runs[n / 2]) / 2
    }
}

fn fixed_tokens(batch: usize, seq: usize, vocab: usize) -> TokenBatch {
    let ids = (0..batch * seq).map(|i| ((i * 7 + 3) % vocab) as u32).collect();
    TokenBatch::new(batch, seq, ids).expect("shape arithmetic is consistent")
}

/// Times all sixteen part masks on each shape and records the argmin.
pub fn tune_strategy(
    model: &Model,
    shapes: &[ShapeSpec],
    repeats: usize,
    weight_scheme: QuantScheme,
    activation_scheme: QuantScheme,
) -> Result<StrategyTuneResult> {
    if shapes.is_empty() {
        return Err(Error::EmptyDimension { context: "tune_strategy shapes" });
    }
    if repeats == 0 {
        return Err(Error::InvalidConfig("tune_strategy needs repeats >= 1".into()));
    }
    let mut sorted: Vec<ShapeSpec> = shapes.to_vec();
    sorted.sort_by_key(|s| (s.m(), s.batch));
    let mut out = StrategyTuneResult { weight_scheme, activation_scheme, shapes: Vec::new() };
    for spec in &sorted {
        if spec.seq > model.config.max_seq || spec.batch == 0 || spec.seq == 0 {
            return Err(Error::InvalidConfig(format!(
                "shape {}x{} outside model limits (max_seq {})",
                spec.batch, spec.seq, model.config.max_seq
            )));
        }
        let batch = Batch::single(fixed_tokens(spec.batch, spec.seq, model.config.vocab_size));
        let mut timings = Vec::with_capacity(16);
        for mask in 0u8..16 {
            let strategy = QuantStrategy::from_mask(mask, weight_scheme, activation_scheme);
            strategy.validate_for(&model.config)?;
            // Warm-up run: first touch pays one-time allocation costs.
            model.run_eval(&batch, &strategy)?;
            let mut runs = Vec::with_capacity(repeats);
            for _ in 0..repeats {
                let t0 = Instant::now();
                model.run_eval(&batch, &strategy)?;
                runs.push(t0.elapsed().as_nanos() as u64);
            }
            timings.push(StrategyTiming { mask, median_ns: median_ns(runs) });
        }
        let chosen_mask = timings
            .iter()
            .min_by_key(|t| (t.median_ns, t.mask))
            .map(|t| t.mask)
            .expect("sixteen timings");
        out.shapes.push(ShapeTuneResult {
            batch: spec.batch,
            seq: spec.seq,
            m: spec.m(),
            timings,
            chosen_mask,
        });
    }
    Ok(out)
}

/// Parses `"bs,seq;bs,seq"` shape lists (CLI `--shapes` syntax).
pub fn parse_shapes(text: &str) -> Result<Vec<ShapeSpec>> {
    let mut out = Vec::new();
    for piece in text.split(';').filter(|p| !p.trim().is_empty()) {
        let (b, s) = piece
            .split_once(',')
            .ok_or_else(|| Error::Format(format!("shape '{piece}' is not 'batch,seq'")))?;
        let parse = |v: &str, what: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| Error::Format(format!("shape '{piece}': bad {what}")))
        };
        out.push(ShapeSpec { batch: parse(b, "batch")?, seq: parse(s, "seq")? });
    }
    if out.is_empty() {
        return Err(Error::Format("no shapes given".into()));
    }
    Ok(out)
}
