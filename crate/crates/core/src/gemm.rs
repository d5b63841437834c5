//! Packed INT4 / INT8 integer GEMM with a fused dequantize epilogue, plus the
//! benchmark harness over the four transformer projection shapes.
//!
//! Layout conventions:
//!
//! * packed int4 stores two two's-complement nibbles per byte, the element at
//!   the even column index in the LOW nibble; rows with an odd column count
//!   pad the final high nibble with zero;
//! * `gemm_int` multiplies `a[M,K] * b[K,N]` with 32-bit accumulation —
//!   overflow is precluded by the 4/8-bit operand ranges at desk scale;
//! * `gemm_fused` multiplies token-major quantized activations `[M,K]` by
//!   weights stored `[N,K]` (one output channel per row) and applies
//!   per-token × per-output-column scales, zero-point corrections for
//!   asymmetric operands, bias, and an optional GELU in one pass.
//!
//! All integer accumulation is order-independent, so results are identical
//! for any worker count; the float epilogue touches each output element in
//! exactly one thread, which keeps the full output thread-invariant too.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::quant::{Granularity, IntData, QTensor, QuantParams};
use crate::tensor::linalg::mm_nt;
use crate::tensor::ops::gelu_scalar;
use crate::tensor::Tensor;

/// Worker count for row-block parallel sections: the `Q4FG_THREADS`
/// environment variable when set to a positive integer, otherwise 1.
pub fn thread_count() -> usize {
    std::env::var("Q4FG_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

#[inline(always)]
fn sign_extend_nibble(n: u8) -> i8 {
    (((n & 0x0F) << 4) as i8) >> 4
}

/// Row-major matrix of 4-bit two's-complement values, two per byte.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedInt4Matrix {
    pub rows: usize,
    pub cols: usize,
    bytes: Vec<u8>,
}

impl PackedInt4Matrix {
    /// Packs a row-major `rows x cols` matrix; every entry must fit int4.
    pub fn pack(rows: usize, cols: usize, values: &[i32]) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                context: "pack_int4",
                left: vec![rows, cols],
                right: vec![values.len()],
            });
        }
        let bpr = cols.div_ceil(2);
        let mut bytes = vec![0u8; rows * bpr];
        for r in 0..rows {
            for c in 0..cols {
                let v = values[r * cols + c];
                if !(-8..=7).contains(&v) {
                    return Err(Error::Int4Range { row: r, col: c, value: v });
                }
                let nib = (v as u8) & 0x0F;
                let byte = &mut bytes[r * bpr + c / 2];
                if c % 2 == 0 {
                    *byte |= nib;
                } else {
                    *byte |= nib << 4;
                }
            }
        }
        Ok(PackedInt4Matrix { rows, cols, bytes })
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    /// Rebuilds from a raw payload (container load path).
    pub fn from_bytes(rows: usize, cols: usize, bytes: Vec<u8>) -> Result<Self> {
        if bytes.len() != rows * cols.div_ceil(2) {
            return Err(Error::Format(format!(
                "packed int4 payload is {} bytes, expected {} for {}x{}",
                bytes.len(),
                rows * cols.div_ceil(2),
                rows,
                cols
            )));
        }
        Ok(PackedInt4Matrix { rows, cols, bytes })
    }

    pub fn bytes_per_row(&self) -> usize {
        self.cols.div_ceil(2)
    }

    #[inline(always)]
    pub fn get(&self, r: usize, c: usize) -> i8 {
        let byte = self.bytes[r * self.bytes_per_row() + c / 2];
        if c % 2 == 0 {
            sign_extend_nibble(byte)
        } else {
            sign_extend_nibble(byte >> 4)
        }
    }

    pub fn unpack(&self) -> Vec<i8> {
        let mut out = Vec::with_capacity(self.rows * self.cols);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.push(self.get(r, c));
            }
        }
        out
    }
}

/// Packs an integer matrix into nibbles (free-function form of
/// [`PackedInt4Matrix::pack`]).
pub fn pack_int4(rows: usize, cols: usize, values: &[i32]) -> Result<PackedInt4Matrix> {
    PackedInt4Matrix::pack(rows, cols, values)
}

/// One integer operand of `gemm_int`.
#[derive(Debug, Clone, Copy)]
pub enum IntOperand<'a> {
    Int8 { rows: usize, cols: usize, data: &'a [i8] },
    PackedInt4(&'a PackedInt4Matrix),
}

impl<'a> IntOperand<'a> {
    pub fn dims(&self) -> (usize, usize) {
        match self {
            IntOperand::Int8 { rows, cols, .. } => (*rows, *cols),
            IntOperand::PackedInt4(p) => (p.rows, p.cols),
        }
    }

    fn widen(&self) -> Result<Vec<i32>> {
        match self {
            IntOperand::Int8 { rows, cols, data } => {
                if data.len() != rows * cols {
                    return Err(Error::ShapeMismatch {
                        context: "gemm_int operand",
                        left: vec![*rows, *cols],
                        right: vec![data.len()],
                    });
                }
                Ok(data.iter().map(|&v| v as i32).collect())
            }
            IntOperand::PackedInt4(p) => Ok(p.unpack().iter().map(|&v| v as i32).collect()),
        }
    }
}

/// Plain `int32` matrix result of `gemm_int`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Int32Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<i32>,
}

/// `a[M,K] * b[K,N]` with exact 32-bit accumulation.
pub fn gemm_int(a: &IntOperand, b: &IntOperand) -> Result<Int32Matrix> {
    let (m, k) = a.dims();
    let (k2, n) = b.dims();
    if k != k2 {
        return Err(Error::ShapeMismatch {
            context: "gemm_int inner dim",
            left: vec![m, k],
            right: vec![k2, n],
        });
    }
    let aw = a.widen()?;
    let bw = b.widen()?;
    let mut c = vec![0i32; m * n];
    for i in 0..m {
        for l in 0..k {
            let av = aw[i * k + l];
            if av == 0 {
                continue;
            }
            let brow = &bw[l * n..(l + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    Ok(Int32Matrix { rows: m, cols: n, data: c })
}

// ── fused GEMM ──────────────────────────────────────────────────────────────

/// Weight side of `gemm_fused`: either a quantized tensor shaped `[N, K]` or
/// a nibble-packed matrix with its dequantize parameters.
#[derive(Debug, Clone, Copy)]
pub enum WeightOperand<'a> {
    Quantized(&'a QTensor),
    Packed {
        mat: &'a PackedInt4Matrix,
        params: &'a QuantParams,
        /// Group count the params were computed with (`per_group` over the
        /// row-major weight); 1 means per-tensor.
        groups: usize,
    },
}

impl<'a> WeightOperand<'a> {
    fn dims(&self) -> Result<(usize, usize)> {
        match self {
            WeightOperand::Quantized(q) => match q.shape[..] {
                [n, k] => Ok((n, k)),
                _ => Err(Error::ShapeMismatch {
                    context: "gemm_fused weight",
                    left: q.shape.clone(),
                    right: vec![0, 0],
                }),
            },
            WeightOperand::Packed { mat, .. } => Ok((mat.rows, mat.cols)),
        }
    }

    fn is_passthrough(&self) -> bool {
        matches!(self, WeightOperand::Quantized(q) if q.scheme.is_passthrough())
    }
}

/// Per-token and per-output-column dequantize vectors plus bias/activation,
/// applied in one pass over the integer accumulator:
///
/// `y[i,j] = act( s_m[i]*s_n[j]*acc[i,j] + corrections + bias[j] )`
///
/// where the corrections re-add the affine zero-point terms for asymmetric
/// operands (`s_m z_n rowsum`, `z_m s_n colsum`, `K z_m z_n`).
#[derive(Debug, Clone, PartialEq)]
pub struct GemmEpilogue {
    /// Per-token scale, length M.
    pub scale_m: Vec<f32>,
    /// Per-output-column scale (group scales expanded per column), length N.
    pub scale_n: Vec<f32>,
    /// Per-token zero points (asymmetric activations), length M.
    pub zero_m: Option<Vec<f32>>,
    /// Per-column zero points (asymmetric weights), length N.
    pub zero_n: Option<Vec<f32>>,
    pub bias: Option<Vec<f32>>,
    pub gelu: bool,
}

impl GemmEpilogue {
    /// Unit scales, no zero points, no bias: the float cast of `gemm_int`.
    pub fn identity(m: usize, n: usize) -> Self {
        GemmEpilogue {
            scale_m: vec![1.0; m],
            scale_n: vec![1.0; n],
            zero_m: None,
            zero_n: None,
            bias: None,
            gelu: false,
        }
    }

    pub fn with_bias(mut self, bias: Vec<f32>) -> Self {
        self.bias = Some(bias);
        self
    }

    pub fn with_gelu(mut self) -> Self {
        self.gelu = true;
        self
    }

    /// Expands operand quantization params into per-row/per-column vectors.
    /// Weight groups must cover whole output rows (`run_len % K == 0`), the
    /// factorization the fused kernel relies on.
    pub fn from_operands(x_q: &QTensor, w: &WeightOperand) -> Result<Self> {
        let (n, k) = w.dims()?;
        let m = x_q.numel() / k.max(1);
        let (scale_m, zero_m) = expand_token_params(x_q, m)?;
        let (scale_n, zero_n) = match w {
            WeightOperand::Quantized(q) if q.scheme.is_passthrough() => {
                (vec![1.0; n], None)
            }
            WeightOperand::Quantized(q) => {
                expand_weight_params(&q.params, q.run_len(), n, k, !q.params.zero_points.iter().all(|&z| z == 0.0))?
            }
            WeightOperand::Packed { params, groups, .. } => {
                let run_len = (n * k).div_ceil(*groups).max(1);
                expand_weight_params(params, run_len, n, k, !params.zero_points.iter().all(|&z| z == 0.0))?
            }
        };
        Ok(GemmEpilogue { scale_m, scale_n, zero_m, zero_n, bias: None, gelu: false })
    }

    fn validate(&self, m: usize, n: usize) -> Result<()> {
        let ok = self.scale_m.len() == m
            && self.scale_n.len() == n
            && self.zero_m.as_ref().map_or(true, |z| z.len() == m)
            && self.zero_n.as_ref().map_or(true, |z| z.len() == n)
            && self.bias.as_ref().map_or(true, |b| b.len() == n);
        if ok {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                context: "gemm_fused epilogue vectors",
                left: vec![self.scale_m.len(), self.scale_n.len()],
                right: vec![m, n],
            })
        }
    }
}

fn expand_token_params(x_q: &QTensor, m: usize) -> Result<(Vec<f32>, Option<Vec<f32>>)> {
    if x_q.scheme.is_passthrough() {
        return Ok((vec![1.0; m], None));
    }
    let asym = !x_q.params.zero_points.iter().all(|&z| z == 0.0);
    match x_q.scheme.granularity {
        Granularity::PerToken => {
            if x_q.params.len() != m {
                return Err(Error::ShapeMismatch {
                    context: "per-token params",
                    left: vec![x_q.params.len()],
                    right: vec![m],
                });
            }
            let scales = x_q.params.scales.clone();
            let zeros = asym.then(|| x_q.params.zero_points.clone());
            Ok((scales, zeros))
        }
        Granularity::PerTensor => {
            let s = x_q.params.scales[0];
            let z = x_q.params.zero_points[0];
            Ok((vec![s; m], asym.then(|| vec![z; m])))
        }
        Granularity::PerGroup(_) => Err(Error::SchemeMisuse(
            "fused GEMM activations must be per_token or per_tensor".into(),
        )),
    }
}

fn expand_weight_params(
    params: &QuantParams,
    run_len: usize,
    n: usize,
    k: usize,
    asym: bool,
) -> Result<(Vec<f32>, Option<Vec<f32>>)> {
    if params.is_empty() {
        return Err(Error::SchemeMisuse("gemm_fused weight operand is missing params".into()));
    }
    if run_len % k != 0 {
        return Err(Error::InvalidConfig(format!(
            "weight quant groups must cover whole output rows: run of {run_len} \
             elements does not divide into rows of {k}"
        )));
    }
    let rows_per_group = run_len / k;
    let mut scale_n = Vec::with_capacity(n);
    let mut zero_n = Vec::with_capacity(n);
    for j in 0..n {
        let g = j / rows_per_group;
        if g >= params.len() {
            return Err(Error::ShapeMismatch {
                context: "weight group params",
                left: vec![params.len()],
                right: vec![n.div_ceil(rows_per_group)],
            });
        }
        scale_n.push(params.scales[g]);
        zero_n.push(params.zero_points[g]);
    }
    Ok((scale_n, asym.then_some(zero_n)))
}

/// Weight rows as an abstract accessor so packed nibbles are decoded inline
/// (the int4 path never materializes an unpacked copy).
enum WeightRows<'a> {
    I8(&'a [i8], usize),
    U8(&'a [u8], usize),
    Packed(&'a PackedInt4Matrix),
}

impl<'a> WeightRows<'a> {
    #[inline(always)]
    fn dot(&self, j: usize, x_row: &[i32]) -> i32 {
        match self {
            WeightRows::I8(w, k) => {
                let row = &w[j * k..(j + 1) * k];
                let mut acc = 0i32;
                for (l, &wv) in row.iter().enumerate() {
                    acc += x_row[l] * wv as i32;
                }
                acc
            }
            WeightRows::U8(w, k) => {
                let row = &w[j * k..(j + 1) * k];
                let mut acc = 0i32;
                for (l, &wv) in row.iter().enumerate() {
                    acc += x_row[l] * wv as i32;
                }
                acc
            }
            WeightRows::Packed(p) => {
                let bpr = p.bytes_per_row();
                let row = &p.bytes()[j * bpr..(j + 1) * bpr];
                let mut acc = 0i32;
                let mut l = 0usize;
                for &byte in row {
                    acc += x_row[l] * sign_extend_nibble(byte) as i32;
                    if l + 1 < p.cols {
                        acc += x_row[l + 1] * sign_extend_nibble(byte >> 4) as i32;
                    }
                    l += 2;
                }
                acc
            }
        }
    }

    fn row_sum(&self, j: usize) -> i32 {
        match self {
            WeightRows::I8(w, k) => w[j * k..(j + 1) * k].iter().map(|&v| v as i32).sum(),
            WeightRows::U8(w, k) => w[j * k..(j + 1) * k].iter().map(|&v| v as i32).sum(),
            WeightRows::Packed(p) => (0..p.cols).map(|c| p.get(j, c) as i32).sum(),
        }
    }
}

/// Quantized matmul with fused dequantize/bias/activation.
///
/// Activations are token-major `[M, K]` (leading axes flattened); weights
/// hold one output channel per row (`[N, K]`). If either operand is a float
/// passthrough the product runs in f32 over the dequantized values, with the
/// same bias/activation tail.
pub fn gemm_fused(x_q: &QTensor, w: &WeightOperand, epi: &GemmEpilogue) -> Result<Tensor> {
    gemm_fused_with_threads(x_q, w, epi, thread_count())
}

/// [`gemm_fused`] with an explicit worker count (results are identical for
/// any count; benchmarks and tests pin it).
pub fn gemm_fused_with_threads(
    x_q: &QTensor,
    w: &WeightOperand,
    epi: &GemmEpilogue,
    threads: usize,
) -> Result<Tensor> {
    let (n, k) = w.dims()?;
    if x_q.shape.is_empty() || x_q.shape.last() != Some(&k) {
        return Err(Error::ShapeMismatch {
            context: "gemm_fused activations",
            left: x_q.shape.clone(),
            right: vec![0, k],
        });
    }
    let m = x_q.numel() / k;
    let mut out_shape = x_q.shape.clone();
    *out_shape.last_mut().unwrap() = n;

    // Float path: a passthrough operand means there are no integer codes to
    // multiply; compute over dequantized values with the same tail.
    let x_float = matches!(x_q.data, IntData::Float(_));
    if x_float || w.is_passthrough() {
        let xf = x_q.dequantize();
        let wf = match w {
            WeightOperand::Quantized(q) => q.dequantize().into_data(),
            WeightOperand::Packed { mat, params, groups } => {
                let run_len = (n * k).div_ceil(*groups).max(1);
                let ints = mat.unpack();
                ints.iter()
                    .enumerate()
                    .map(|(i, &v)| {
                        let g = (i / run_len).min(params.len() - 1);
                        params.scales[g] * v as f32 + params.zero_points[g]
                    })
                    .collect()
            }
        };
        let mut y = mm_nt(xf.data(), &wf, m, k, n);
        finish_epilogue(&mut y, m, n, epi);
        return Tensor::from_vec(out_shape, y);
    }

    epi.validate(m, n)?;
    let x_codes: Vec<i32> = match &x_q.data {
        IntData::Signed(v) => v.iter().map(|&x| x as i32).collect(),
        IntData::Unsigned(v) => v.iter().map(|&x| x as i32).collect(),
        IntData::Float(_) => unreachable!("float path handled above"),
    };
    let wrows = match w {
        WeightOperand::Quantized(q) => match &q.data {
            IntData::Signed(v) => WeightRows::I8(v, k),
            IntData::Unsigned(v) => WeightRows::U8(v, k),
            IntData::Float(_) => unreachable!("passthrough handled above"),
        },
        WeightOperand::Packed { mat, .. } => WeightRows::Packed(mat),
    };

    // Zero-point corrections need operand sums; compute them once.
    let col_sums_w: Option<Vec<i32>> = epi
        .zero_m
        .as_ref()
        .map(|_| (0..n).map(|j| wrows.row_sum(j)).collect());
    let needs_row_sums = epi.zero_n.is_some();

    let mut y = vec![0.0f32; m * n];
    for_row_blocks(&mut y, n, threads.max(1), |i0, block| {
        for (di, yrow) in block.chunks_mut(n).enumerate() {
            let i = i0 + di;
            let x_row = &x_codes[i * k..(i + 1) * k];
            let row_sum: i32 = if needs_row_sums { x_row.iter().sum() } else { 0 };
            let s_m = epi.scale_m[i];
            let z_m = epi.zero_m.as_ref().map_or(0.0, |z| z[i]);
            for (j, slot) in yrow.iter_mut().enumerate() {
                let acc = wrows.dot(j, x_row);
                let s_n = epi.scale_n[j];
                let mut v = s_m * s_n * acc as f32;
                if let Some(zn) = &epi.zero_n {
                    v += s_m * zn[j] * row_sum as f32;
                }
                if let Some(cs) = &col_sums_w {
                    v += z_m * s_n * cs[j] as f32;
                }
                if epi.zero_m.is_some() && epi.zero_n.is_some() {
                    let zn = epi.zero_n.as_ref().unwrap()[j];
                    v += k as f32 * z_m * zn;
                }
                if let Some(b) = &epi.bias {
                    v += b[j];
                }
                *slot = if epi.gelu { gelu_scalar(v) } else { v };
            }
        }
    });
    Tensor::from_vec(out_shape, y)
}

fn finish_epilogue(y: &mut [f32], m: usize, n: usize, epi: &GemmEpilogue) {
    debug_assert_eq!(y.len(), m * n);
    for i in 0..m {
        for j in 0..n {
            let mut v = y[i * n + j];
            if let Some(b) = &epi.bias {
                v += b[j];
            }
            y[i * n + j] = if epi.gelu { gelu_scalar(v) } else { v };
        }
    }
}

/// Splits `out` into contiguous row blocks and runs `f(first_row, block)` on
/// each, across up to `threads` scoped workers. Each output row is written by
/// exactly one worker.
fn for_row_blocks<F>(out: &mut [f32], row_width: usize, threads: usize, f: F)
where
    F: Fn(usize, &mut [f32]) + Sync,
{
    let rows = if row_width == 0 { 0 } else { out.len() / row_width };
    if rows == 0 {
        return;
    }
    let workers = threads.min(rows);
    if workers <= 1 {
        f(0, out);
        return;
    }
    let per = rows.div_ceil(workers);
    std::thread::scope(|scope| {
        let mut rest = out;
        let mut row = 0usize;
        let fref = &f;
        while !rest.is_empty() {
            let take = per.min(rest.len() / row_width);
            let (head, tail) = rest.split_at_mut(take * row_width);
            let first = row;
            scope.spawn(move || fref(first, head));
            row += take;
            rest = tail;
        }
    });
}

// ── benchmark harness ───────────────────────────────────────────────────────

/// The four projection GEMMs of one transformer block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GemmShapeKind {
    QkvProj,
    AttnOut,
    MlpIntermediate,
    MlpOut,
}

impl GemmShapeKind {
    pub const ALL: [GemmShapeKind; 4] = [
        GemmShapeKind::QkvProj,
        GemmShapeKind::AttnOut,
        GemmShapeKind::MlpIntermediate,
        GemmShapeKind::MlpOut,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            GemmShapeKind::QkvProj => "qkv_proj",
            GemmShapeKind::AttnOut => "attn_out",
            GemmShapeKind::MlpIntermediate => "mlp_intermediate",
            GemmShapeKind::MlpOut => "mlp_out",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "qkv_proj" => Ok(GemmShapeKind::QkvProj),
            "attn_out" => Ok(GemmShapeKind::AttnOut),
            "mlp_intermediate" => Ok(GemmShapeKind::MlpIntermediate),
            "mlp_out" => Ok(GemmShapeKind::MlpOut),
            other => Err(Error::InvalidConfig(format!("unknown GEMM case '{other}'"))),
        }
    }
}

/// A concrete benchmark shape: `M = bs*seq` tokens against hidden size `h`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GemmShapeCase {
    pub kind: GemmShapeKind,
    /// `bs * seq`, the token count M.
    pub m: usize,
    /// Model hidden dimension h.
    pub hidden: usize,
}

impl GemmShapeCase {
    /// `(M, N, K)` per the case formula: qkv `(3h,h)`, attention output
    /// `(h,h)`, MLP intermediate `(4h,h)`, MLP output `(h,4h)`.
    pub fn mnk(&self) -> (usize, usize, usize) {
        let h = self.hidden;
        let (n, k) = match self.kind {
            GemmShapeKind::QkvProj => (3 * h, h),
            GemmShapeKind::AttnOut => (h, h),
            GemmShapeKind::MlpIntermediate => (4 * h, h),
            GemmShapeKind::MlpOut => (h, 4 * h),
        };
        (self.m, n, k)
    }
}

/// Weight bytes a single forward of this shape must read.
pub fn weight_bytes_moved(bits: u8, n: usize, k: usize) -> u64 {
    match bits {
        4 => ((n * k).div_ceil(2)) as u64,
        8 => (n * k) as u64,
        _ => (4 * n * k) as u64,
    }
}

/// One benchmark measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRecord {
    pub case: String,
    pub bits: u8,
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub median_ns: u128,
    pub bytes_moved: u64,
    pub gops: f64,
    /// Worker count the timing was taken with (not part of the CSV).
    pub threads: usize,
}

/// Times `gemm_fused` (or the f32 kernel for `bits == 32`) on one shape.
/// Operands are random but fixed by an internal seed; the timing is the
/// median over `repeats >= 3` runs.
pub fn bench_gemm(case: &GemmShapeCase, bits: u8, repeats: usize) -> Result<BenchRecord> {
    if !(bits == 4 || bits == 8 || bits == 32) {
        return Err(Error::InvalidConfig(format!("bench bits must be 4, 8 or 32, got {bits}")));
    }
    if repeats < 3 {
        return Err(Error::InvalidConfig(format!("bench repeats must be >= 3, got {repeats}")));
    }
    let (m, n, k) = case.mnk();
    let threads = thread_count();
    let mut rng = ChaCha8Rng::seed_from_u64(
        0x9e37_79b9 ^ (m as u64) << 32 ^ (n as u64) << 16 ^ (k as u64) ^ bits as u64,
    );

    let mut durations = Vec::with_capacity(repeats);
    match bits {
        32 => {
            let a: Vec<f32> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f32> = (0..n * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            for _ in 0..repeats {
                let t0 = Instant::now();
                let y = mm_nt(&a, &b, m, k, n);
                durations.push(t0.elapsed().as_nanos());
                std::hint::black_box(y);
            }
        }
        _ => {
            let x_codes: Vec<i8> = (0..m * k).map(|_| rng.gen_range(-127..=127)).collect();
            let x_q = QTensor {
                shape: vec![m, k],
                scheme: crate::quant::QuantScheme::int8(
                    crate::quant::Mapping::Symmetric,
                    Granularity::PerToken,
                ),
                params: QuantParams { scales: vec![1.0; m], zero_points: vec![0.0; m] },
                data: IntData::Signed(x_codes),
            };
            let epi = GemmEpilogue::identity(m, n);
            if bits == 4 {
                let w_codes: Vec<i32> = (0..n * k).map(|_| rng.gen_range(-8..=7)).collect();
                let packed = PackedInt4Matrix::pack(n, k, &w_codes)?;
                let params = QuantParams { scales: vec![1.0], zero_points: vec![0.0] };
                let w = WeightOperand::Packed { mat: &packed, params: &params, groups: 1 };
                for _ in 0..repeats {
                    let t0 = Instant::now();
                    let y = gemm_fused_with_threads(&x_q, &w, &epi, threads)?;
                    durations.push(t0.elapsed().as_nanos());
                    std::hint::black_box(y);
                }
            } else {
                let w_codes: Vec<i8> = (0..n * k).map(|_| rng.gen_range(-127..=127)).collect();
                let w_q = QTensor {
                    shape: vec![n, k],
                    scheme: crate::quant::QuantScheme::int8(
                        crate::quant::Mapping::Symmetric,
                        Granularity::PerTensor,
                    ),
                    params: QuantParams { scales: vec![1.0], zero_points: vec![0.0] },
                    data: IntData::Signed(w_codes),
                };
                let w = WeightOperand::Quantized(&w_q);
                for _ in 0..repeats {
                    let t0 = Instant::now();
                    let y = gemm_fused_with_threads(&x_q, &w, &epi, threads)?;
                    durations.push(t0.elapsed().as_nanos());
                    std::hint::black_box(y);
                }
            }
        }
    }
    durations.sort_unstable();
    let median_ns = durations[durations.len() / 2];
    let ops = 2.0 * m as f64 * n as f64 * k as f64;
    Ok(BenchRecord {
        case: case.kind.name().to_string(),
        bits,
        m,
        n,
        k,
        median_ns,
        bytes_moved: weight_bytes_moved(bits, n, k),
        gops: ops / median_ns.max(1) as f64,
        threads,
    })
}

/// Benchmark CSV header, fixed.
pub const BENCH_CSV_HEADER: &str = "case,bits,M,N,K,median_ns,bytes_moved,gops";

pub fn write_bench_csv<W: std::io::Write>(records: &[BenchRecord], out: &mut W) -> Result<()> {
    writeln!(out, "{BENCH_CSV_HEADER}")?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.case, r.bits, r.m, r.n, r.k, r.median_ns, r.bytes_moved, r.gops
        )?;
    }
    Ok(())
}
