//! Uniform quantizers: symmetric and asymmetric mappings at per-tensor,
//! per-group, and per-token granularity.
//!
//! Conventions shared by every path:
//!
//! * optional clipping to fixed constants happens first; parameters are
//!   computed from the clipped values;
//! * symmetric: `scale = max|x| / (2^(b-1) - 1)`, `zero_point = 0`, signed
//!   codes in `[-2^(b-1), 2^(b-1) - 1]`;
//! * asymmetric: `zero_point = min(x)`, `scale = (max - min) / (2^b - 1)`,
//!   unsigned codes in `[0, 2^b - 1]`;
//! * rounding is half-to-even everywhere;
//! * degenerate groups (all equal, or empty) take `scale = 1` so dequantize
//!   reproduces the constant exactly;
//! * `bits == 32` is a float passthrough: values flow unchanged and carry no
//!   parameters.
//!
//! Weights are vectorized row-major for grouping, so "row-wise" weight
//! quantization for a `[d_out, d_in]` matrix is `per_group(d_out)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{NodeId, Tape, Tensor};

/// Which affine family maps floats to integer codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mapping {
    Symmetric,
    Asymmetric,
}

/// How many parameter sets describe one tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    /// One (scale, zero_point) for the whole tensor.
    PerTensor,
    /// `n` contiguous runs of the row-major flattened tensor, each with its
    /// own parameters. The run length is `ceil(numel / n)`; a short (or
    /// empty) tail run is allowed and empty runs take degenerate parameters.
    PerGroup(usize),
    /// One parameter set per row of the token-major view (all leading axes
    /// flattened, features on the last axis). Parameters are dynamic: they
    /// are recomputed from each tensor quantized. Activations only.
    PerToken,
}

/// A complete quantizer description. `clip` bounds are fixed constants
/// applied before parameter computation (activations use this; weights
/// normally do not).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantScheme {
    pub bits: u8,
    pub mapping: Mapping,
    pub granularity: Granularity,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip: Option<(f32, f32)>,
}

impl QuantScheme {
    pub fn int4(mapping: Mapping, granularity: Granularity) -> Self {
        QuantScheme { bits: 4, mapping, granularity, clip: None }
    }

    pub fn int8(mapping: Mapping, granularity: Granularity) -> Self {
        QuantScheme { bits: 8, mapping, granularity, clip: None }
    }

    /// Float passthrough; mapping/granularity/clip are ignored.
    pub fn passthrough() -> Self {
        QuantScheme {
            bits: 32,
            mapping: Mapping::Symmetric,
            granularity: Granularity::PerTensor,
            clip: None,
        }
    }

    pub fn with_clip(mut self, lo: f32, hi: f32) -> Self {
        self.clip = Some((lo, hi));
        self
    }

    pub fn is_passthrough(&self) -> bool {
        self.bits == 32
    }

    /// Signed code range for symmetric, unsigned for asymmetric.
    pub fn code_range(&self) -> (i32, i32) {
        match self.mapping {
            Mapping::Symmetric => {
                let hi = (1i32 << (self.bits - 1)) - 1;
                (-(1i32 << (self.bits - 1)), hi)
            }
            Mapping::Asymmetric => (0, (1i32 << self.bits) - 1),
        }
    }

    /// Number of representable codes, `2^bits`.
    pub fn code_count(&self) -> usize {
        1usize << self.bits
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bits == 32 || (2..=8).contains(&self.bits)) {
            return Err(Error::SchemeMisuse(format!(
                "bits must be 2..=8 or 32 (passthrough), got {}",
                self.bits
            )));
        }
        if let Some((lo, hi)) = self.clip {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::SchemeMisuse(format!(
                    "clip bounds must be finite with lo < hi, got ({lo}, {hi})"
                )));
            }
        }
        if let Granularity::PerGroup(0) = self.granularity {
            return Err(Error::SchemeMisuse("per_group(0) is meaningless".into()));
        }
        Ok(())
    }
}

/// Scale/zero-point pairs, one per group (or per token row). Symmetric
/// schemes store explicit zeros.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct QuantParams {
    pub scales: Vec<f32>,
    pub zero_points: Vec<f32>,
}

impl QuantParams {
    pub fn len(&self) -> usize {
        self.scales.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scales.is_empty()
    }
}

/// Integer payload of a quantized tensor.
#[derive(Debug, Clone, PartialEq)]
pub enum IntData {
    /// Symmetric codes (int4 codes also live here, one per byte; packing to
    /// nibbles happens at the GEMM/container boundary).
    Signed(Vec<i8>),
    /// Asymmetric codes.
    Unsigned(Vec<u8>),
    /// `bits == 32` passthrough.
    Float(Vec<f32>),
}

impl IntData {
    pub fn len(&self) -> usize {
        match self {
            IntData::Signed(v) => v.len(),
            IntData::Unsigned(v) => v.len(),
            IntData::Float(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A quantized tensor: integer codes plus the parameters and scheme needed
/// to map them back to floats.
#[derive(Debug, Clone, PartialEq)]
pub struct QTensor {
    pub shape: Vec<usize>,
    pub scheme: QuantScheme,
    pub params: QuantParams,
    pub data: IntData,
}

impl QTensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Integer codes widened to `i32`; `None` for passthrough.
    pub fn codes(&self) -> Option<Vec<i32>> {
        match &self.data {
            IntData::Signed(v) => Some(v.iter().map(|&x| x as i32).collect()),
            IntData::Unsigned(v) => Some(v.iter().map(|&x| x as i32).collect()),
            IntData::Float(_) => None,
        }
    }

    /// Flat index -> index into `params` for this tensor's granularity.
    pub fn param_index(&self, flat: usize) -> usize {
        match self.scheme.granularity {
            Granularity::PerTensor => 0,
            Granularity::PerGroup(_) | Granularity::PerToken => {
                let run = self.run_len();
                flat / run
            }
        }
    }

    /// Elements covered by each parameter set (`numel` for per-tensor).
    pub fn run_len(&self) -> usize {
        let numel = self.numel();
        match self.scheme.granularity {
            Granularity::PerTensor => numel.max(1),
            Granularity::PerGroup(g) => numel.div_ceil(g).max(1),
            Granularity::PerToken => *self.shape.last().unwrap_or(&1),
        }
    }

    pub fn dequantize(&self) -> Tensor {
        let data = match &self.data {
            IntData::Float(v) => v.clone(),
            IntData::Signed(v) => v
                .iter()
                .enumerate()
                .map(|(i, &k)| {
                    let p = self.param_index(i);
                    self.params.scales[p] * k as f32 + self.params.zero_points[p]
                })
                .collect(),
            IntData::Unsigned(v) => v
                .iter()
                .enumerate()
                .map(|(i, &k)| {
                    let p = self.param_index(i);
                    self.params.scales[p] * k as f32 + self.params.zero_points[p]
                })
                .collect(),
        };
        Tensor::from_vec(self.shape.clone(), data).expect("payload length matches shape")
    }
}

fn clip_value(x: f32, clip: Option<(f32, f32)>) -> f32 {
    match clip {
        Some((lo, hi)) => x.clamp(lo, hi),
        None => x,
    }
}

/// Working-precision parameters of one run. The stored `scale` is the f32
/// cast of `span / levels`, but the integer ratio is computed as
/// `(x - zero) * levels / span` in f64: a single correctly-rounded division
/// of exactly-representable products, so half-to-even ties land where the
/// defining formula puts them instead of where an f32 scale drifts them.
struct RunParams {
    zero: f64,
    levels: f64,
    span: f64,
}

impl RunParams {
    fn scale_f32(&self) -> f32 {
        (self.span / self.levels) as f32
    }
}

fn params_f64(values: &[f32], scheme: &QuantScheme) -> RunParams {
    match scheme.mapping {
        Mapping::Symmetric => {
            let qmax = ((1i64 << (scheme.bits - 1)) - 1) as f64;
            let max_abs = values.iter().fold(0.0f64, |m, &v| m.max((v as f64).abs()));
            // All-zero run: scale 1 (span == levels) keeps dequantize exact.
            let span = if max_abs > 0.0 { max_abs } else { qmax };
            RunParams { zero: 0.0, levels: qmax, span }
        }
        Mapping::Asymmetric => {
            let levels = ((1i64 << scheme.bits) - 1) as f64;
            if values.is_empty() {
                return RunParams { zero: 0.0, levels, span: levels };
            }
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for &v in values {
                lo = lo.min(v as f64);
                hi = hi.max(v as f64);
            }
            // Constant run: zero_point carries the value, scale 1.
            let span = if hi > lo { hi - lo } else { levels };
            RunParams { zero: lo, levels, span }
        }
    }
}

/// `(scale, 0)` for symmetric codes of pre-clipped values; an all-zero
/// (or empty) input takes scale 1.
pub fn compute_params_symmetric(values: &[f32], bits: u8) -> (f32, f32) {
    let scheme = QuantScheme { bits, ..QuantScheme::int8(Mapping::Symmetric, Granularity::PerTensor) };
    let p = params_f64(values, &scheme);
    (p.scale_f32(), 0.0)
}

/// `(scale, zero_point)` for asymmetric codes of pre-clipped values;
/// a constant (or empty) input takes scale 1 with the constant as zero.
pub fn compute_params_asymmetric(values: &[f32], bits: u8) -> (f32, f32) {
    let scheme = QuantScheme { bits, ..QuantScheme::int8(Mapping::Asymmetric, Granularity::PerTensor) };
    let p = params_f64(values, &scheme);
    (p.scale_f32(), p.zero as f32)
}

fn quantize_run(values: &[f32], p: &RunParams, range: (i32, i32), out: &mut Vec<i32>) {
    let (lo, hi) = (range.0 as f64, range.1 as f64);
    for &x in values {
        let t = (((x as f64 - p.zero) * p.levels) / p.span).clamp(lo, hi);
        out.push(t.round_ties_even() as i32);
    }
}

struct Runs {
    params: QuantParams,
    codes: Vec<i32>,
}

fn quantize_runs(clipped: &[f32], run_len: usize, n_runs: usize, scheme: &QuantScheme) -> Runs {
    let mut params = QuantParams::default();
    let mut codes = Vec::with_capacity(clipped.len());
    let range = scheme.code_range();
    for r in 0..n_runs {
        let start = (r * run_len).min(clipped.len());
        let end = ((r + 1) * run_len).min(clipped.len());
        let run = &clipped[start..end];
        let p = params_f64(run, scheme);
        params.scales.push(p.scale_f32());
        params.zero_points.push(p.zero as f32);
        quantize_run(run, &p, range, &mut codes);
    }
    Runs { params, codes }
}

fn finish(shape: Vec<usize>, scheme: QuantScheme, runs: Runs) -> QTensor {
    let data = match scheme.mapping {
        Mapping::Symmetric => IntData::Signed(runs.codes.iter().map(|&k| k as i8).collect()),
        Mapping::Asymmetric => IntData::Unsigned(runs.codes.iter().map(|&k| k as u8).collect()),
    };
    QTensor { shape, scheme, params: runs.params, data }
}

/// Quantizes a tensor under `scheme`. Per-token granularity requires a
/// tensor with at least two axes (a token-major view must exist).
pub fn quantize(x: &Tensor, scheme: &QuantScheme) -> Result<QTensor> {
    scheme.validate()?;
    if scheme.is_passthrough() {
        return Ok(QTensor {
            shape: x.shape().to_vec(),
            scheme: *scheme,
            params: QuantParams::default(),
            data: IntData::Float(x.data().to_vec()),
        });
    }
    let clipped: Vec<f32> = x.data().iter().map(|&v| clip_value(v, scheme.clip)).collect();
    let numel = x.numel();
    let runs = match scheme.granularity {
        Granularity::PerTensor => quantize_runs(&clipped, numel.max(1), 1, scheme),
        Granularity::PerGroup(g) => {
            if g > numel.max(1) {
                return Err(Error::SchemeMisuse(format!(
                    "per_group({g}) exceeds element count {numel}"
                )));
            }
            quantize_runs(&clipped, numel.div_ceil(g).max(1), g, scheme)
        }
        Granularity::PerToken => {
            let (tokens, features) = x.token_major()?;
            quantize_runs(&clipped, features, tokens, scheme)
        }
    };
    Ok(finish(x.shape().to_vec(), *scheme, runs))
}

/// Weight-side `quantize`: identical mapping but per-token granularity is a
/// scheme misuse (weights have no token axis).
pub fn quantize_weight(w: &Tensor, scheme: &QuantScheme) -> Result<QTensor> {
    if !scheme.is_passthrough() && matches!(scheme.granularity, Granularity::PerToken) {
        return Err(Error::SchemeMisuse(
            "per_token granularity applies to activations, not weights".into(),
        ));
    }
    quantize(w, scheme)
}

/// Dynamic per-row parameters of a token-major activation under `scheme`;
/// used when the integer GEMM quantizes activations on the fly.
pub fn tokenwise_activation_params(x: &Tensor, scheme: &QuantScheme) -> Result<QuantParams> {
    let (tokens, features) = x.token_major()?;
    let mut params = QuantParams::default();
    for t in 0..tokens {
        let row: Vec<f32> = x.data()[t * features..(t + 1) * features]
            .iter()
            .map(|&v| clip_value(v, scheme.clip))
            .collect();
        let (scale, zero) = match scheme.mapping {
            Mapping::Symmetric => compute_params_symmetric(&row, scheme.bits),
            Mapping::Asymmetric => compute_params_asymmetric(&row, scheme.bits),
        };
        params.scales.push(scale);
        params.zero_points.push(zero);
    }
    Ok(params)
}

/// Fake-quantize with a straight-through estimator: the forward value is
/// `dequantize(quantize(x))`; the gradient passes unchanged wherever the clip
/// did not bind (`clip(x) == x`) and is zeroed where it did. Passthrough
/// schemes reduce to the identity.
pub fn fake_quantize_ste(tape: &mut Tape, x: NodeId, scheme: &QuantScheme) -> Result<NodeId> {
    let q = quantize(tape.value(x), scheme)?;
    let forward = q.dequantize();
    let gate = ste_gate(tape.value(x), scheme);
    tape.gated_identity(x, forward, gate)
}

/// The clip gate used by [`fake_quantize_ste`]: 1 where the gradient passes.
pub fn ste_gate(x: &Tensor, scheme: &QuantScheme) -> Vec<f32> {
    match (scheme.is_passthrough(), scheme.clip) {
        (false, Some((lo, hi))) => x
            .data()
            .iter()
            .map(|&v| if (lo..=hi).contains(&v) { 1.0 } else { 0.0 })
            .collect(),
        _ => vec![1.0; x.numel()],
    }
}
