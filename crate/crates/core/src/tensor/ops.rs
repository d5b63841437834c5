//! Standard differentiable ops, implemented as methods on [`Tape`].
//!
//! Each op runs its forward immediately, pushes the result onto the tape, and
//! registers a rule that holds exactly the forward state its backward needs.
//! Conventions:
//!
//! * weights are stored `[d_out, d_in]`, so `linear` computes `y = x W^T + b`;
//! * masked attention fills blocked scores with [`MASK_FILL`] (large, finite)
//!   instead of `-inf`, keeping the no-NaN/no-Inf invariant while the softmax
//!   still assigns those positions exactly zero probability;
//! * losses reduce to scalars (shape `[1]`) so they can seed `backward`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::linalg::{col_sums, mm, mm_nt, mm_tn, softmax_row};
use crate::tensor::tape::{BackwardRule, NodeId, Tape};
use crate::tensor::Tensor;

/// Finite stand-in for `-inf` when masking attention scores. Large enough
/// that `exp(MASK_FILL - row_max)` underflows to exactly `0.0`.
pub const MASK_FILL: f32 = -1.0e9;

/// Attention masking behavior.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    /// Lower-triangular visibility (position `i` sees `j <= i`); square only.
    Causal,
    /// Bidirectional self-attention; no positions blocked.
    Full,
    /// Decoder-to-encoder attention; no positions blocked, `Tq != Tk` allowed.
    Cross,
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

// ── elementwise and scalar ops ──────────────────────────────────────────────

#[derive(Debug)]
struct AddRule {
    n: usize,
}

impl BackwardRule for AddRule {
    fn backward(&self, out: &[Option<&[f32]>]) -> Vec<Option<Vec<f32>>> {
        let Some(g) = out[0] else { return vec![None, None] };
        debug_assert_eq!(g.len(), self.n);
        vec![Some(g.to_vec()), Some(g.to_vec())]
    }
}

#[derive(Debug)]
struct SubRule {
    n: usize,
}

impl BackwardRule for SubRule {
    fn backward(&self, out: &[Option<&[f32]>]) -> Vec<Option<Vec<f32>>> {
        let Some(g) = out[0] else { return vec![None, None] };
        debug_assert_eq!(g.len(), self.n);
        vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())]
    }
}

#[derive(Debug)]
struct MulRule {
    a: Vec<f32>,
    b: Vec<f32>,
}

impl BackwardRule for MulRule {
    fn backward(&self, out: &[Option<&[f32]>]) -> Vec<Option<Vec<f32>>> {
        let Some(g) = out[0] else { return vec![None, None] };
        let da = g.iter().zip(&self.b).map(|(&g, &b)| g * b).collect();
        let db = g.iter().zip(&self.a).map(|(&g, &a)| g * a).collect();
        vec![Some(da), Some(db)]
    }
}

#[derive(Debug)]
struct ScaleRule {
    c: f32,
}

impl BackwardRule for ScaleRule {
    fn backward(&self, out: &[Option<&[f32]>]) -> Vec<Option<Vec<f32>>> {
        let Some(g) = out[0] else { return vec![None] };
        vec![Some(g.iter().map(|v| v * self.c).collect())]
    }
}

/// Elementwise multiply by a fixed vector (dropout masks, sparsity masks).
#[derive(Debug)]
struct MulMaskRule {
    mask: Vec<f32>,
}

impl BackwardRule for MulMaskRule {
    fn backward(&self, out: &[Option<&[f32]>]) -> Vec<Option<Vec<f32>>> {
        let Some(g) = out[0] else { return vec![None] };
        vec![Some(g.iter().zip(&self.mask).map(|(&g, &m)| g * m).collect())]
    }
}

#[derive(Debug)]
struct WeightedSumRule {
    weights: Vec<f32>,
}

impl BackwardRule for WeightedSumRule {
    fn backward(&self, out: &[Option<&[f32]>]) -> Vec<Option<Vec<f32>>> {
        let Some(g) = out[0] else {
            return self.weights.iter().map(|_| None).collect();
        };
        self.weights.iter().map(|&w| Some(vec![g[0] * w])).collect()
    }
}

/// Identity value with a custom gradient gate: `dx = g * gate`. The building
/// block for straight-through estimators.
#[derive(Debug)]
struct GatedIdentityRule {
    gate: Vec<f32>,
}

impl BackwardRule for GatedIdentityRule {
    fn backward(&self, out: &[Option<&[f32]>]) -> Vec<Option<Vec<f32>>> {
        let Some(g) = out[0] else { return vec![None] };
        vec![Some(g.iter().zip(&self.gate).map(|(&g, &m)| g * m).collect())]
    }
}

// ── matmul family ───────────────────────────────────────────────────────────

#[derive(Debug)]
struct MatmulRule {
    a: Vec<f32>,
    b: Vec<f32>,
    m: usize,
    k: usize,
    n: usize,
}

impl BackwardRule for MatmulRule {
    fn backward(&self, out: &[Option<&[f32]>]) -> Vec<Option<Vec<f32>>> {
        let Some(g) = out[0] else { return vec![None, None] };
        // dA = dC B^T ; dB = A^T dC
        let da = mm_nt(g, &self.b, self.m, self.n, self.k);
        let db = mm_tn(&self.a, g, self.m, self.k, self.n);
        vec![Some(da), Some(db)]
    }
}

#[derive(Debug)]
struct LinearRule {
    x: Vec<f32>,
    w: Vec<f32>,
    m: usize,
    k: usize,
    n: usize,
    has_bias: bool,
}

impl BackwardRule for LinearRule {
    fn backward(&self, out: &[Option<&[f32]>]) -> Vec<Option<Vec<f32>>> {
        let Some(g) = out[0] else {
            return vec![None; if self.has_bias { 3 } else { 2 }];
        };
        // y = x W^T: dx = g W ; dW = g^T x ; db = column sums of g.
        let dx = mm(g, &self.w, self.m, self.n, self.k);
        let dw = mm_tn(g, &self.x, self.m, self.n, self.k);
        let mut grads = vec![Some(dx), Some(dw)];
        if self.has_bias {
            grads.push(Some(col_sums(g, self.m, self.n)));
        }
        grads
    }
}

// ── nonlinearities and normalization ────────────────────────────────────────

const GELU_C: f32 = 0.797_884_56; // sqrt(2/pi)
const GELU_A: f32 = 0.044715;

/// Tanh-approximated GELU on one value; shared by the tape op and the fused
/// GEMM epilogue so both paths apply bit-identical nonlinearities.
pub fn gelu_scalar(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f32) -> f32 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[derive(Debug)]
struct GeluRule {
    x: Vec<f32>,
}

impl BackwardRule for GeluRule {
    fn backward(&self, out: &[Option<&[f32]>]) -> Vec<Option<Vec<f32>>> {
        let Some(g) = out[0] else { return vec![None] };
        vec![Some(
            g.iter().zip(&self.x).map(|(&g, &x)| g * gelu_grad_scalar(x)).collect(),
        )]
    }
}

#[derive(Debug)]
struct LayerNormRule {
    xhat: Vec<f32>,
    rstd: Vec<f32>, // one per row
    gamma: Vec<f32>,
    rows: usize,
    h: usize,
}

impl BackwardRule for LayerNormRule {
    fn backward(&self, out: &[Option<&[f32]>]) -> Vec<Option<Vec<f32>>> {
        let Some(g) = out[0] else { return vec![None, None, None] };
        let (rows, h) = (self.rows, self.h);
        let mut dx = vec![0.0f32; rows * h];
        let mut dgamma = vec![0.0f32; h];
        let mut dbeta = vec![0.0f32; h];
        for r in 0..rows {
            let row = r * h;
            let mut mean_dxhat = 0.0f32;
            let mut mean_dxhat_xhat = 0.0f32;
            for j in 0..h {
                let go = g[row + j];
                let xh = self.xhat[row + j];
                let dxhat = go * self.gamma[j];
                mean_dxhat += dxhat;
                mean_dxhat_xhat += dxhat * xh;
                dgamma[j] += go * xh;
                dbeta[j] += go;
            }
            mean_dxhat /= h as f32;
            mean_dxhat_xhat /= h as f32;
            for j in 0..h {
                let dxhat = g[row + j] * self.gamma[j];
                dx[row + j] = self.rstd[r]
                    * (dxhat - mean_dxhat - self.xhat[row + j] * mean_dxhat_xhat);
            }
        }
        vec![Some(dx), Some(dgamma), Some(dbeta)]
    }
}

// ── embeddings, reshapes, slicing ───────────────────────────────────────────

#[derive(Debug)]
struct EmbeddingRule {
    ids: Vec<usize>,
    vocab: usize,
    h: usize,
}

impl BackwardRule for EmbeddingRule {
    fn backward(&self, out: &[Option<&[f32]>]) -> Vec<Option<Vec<f32>>> {
        let Some(g) = out[0] else { return vec![None] };
        let mut dtable = vec![0.0f32; self.vocab * self.h];
        for (pos, &id) in self.ids.iter().enumerate() {
            for j in 0..self.h {
                dtable[id * self.h + j] += g[pos * self.h + j];
            }
        }
        vec![Some(dtable)]
    }
}

#[derive(Debug)]
struct ReshapeRule;

impl BackwardRule for ReshapeRule {
    fn backward(&self, out: &[Option<&[f32]>]) -> Vec<Option<Vec<f32>>> {
        vec![out[0].map(|g| g.to_vec())]
    }
}

#[derive(Debug)]
struct PermuteRule {
    in_shape: Vec<usize>,
    axes: Vec<usize>,
}

fn permute_data(data: &[f32], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<f32>) {
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides = strides(shape);
    let out_strides = strides(&out_shape);
    let mut out = vec![0.0f32; data.len()];
    for (flat, slot) in out.iter_mut().enumerate() {
        let mut rem = flat;
        let mut src = 0usize;
        for (d, &os) in out_strides.iter().enumerate() {
            let coord = rem / os;
            rem %= os;
            src += coord * in_strides[axes[d]];
        }
        *slot = data[src];
    }
    (out_shape, out)
}

impl BackwardRule for PermuteRule {
    fn backward(&self, out: &[Option<&[f32]>]) -> Vec<Option<Vec<f32>>> {
        let Some(g) = out[0] else { return vec![None] };
        // Invert the permutation and push the gradient back through it.
        let mut inverse = vec![0usize; self.axes.len()];
        for (i, &a) in self.axes.iter().enumerate() {
            inverse[a] = i;
        }
        let out_shape: Vec<usize> = self.axes.iter().map(|&a| self.in_shape[a]).collect();
        let (_, dx) = permute_data(g, &out_shape, &inverse);
        vec![Some(dx)]
    }
}

#[derive(Debug)]
struct SliceLastRule {
    rows: usize,
    cols: usize,
    start: usize,
    width: usize,
}

impl BackwardRule for SliceLastRule {
    fn backward(&self, out: &[Option<&[f32]>]) -> Vec<Option<Vec<f32>>> {
        let Some(g) = out[0] else { return vec![None] };
        let mut dx = vec![0.0f32; self.rows * self.cols];
        for r in 0..self.rows {
            for j in 0..self.width {
                dx[r * self.cols + self.start + j] = g[r * self.width + j];
            }
        }
        vec![Some(dx)]
    }
}

// ── fused attention ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
struct AttnDims {
    b: usize,
    heads: usize,
    tq: usize,
    tk: usize,
    d: usize,
}

#[derive(Debug)]
struct AttentionRule {
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    probs: Vec<f32>,
    dims: AttnDims,
    mode: MaskMode,
}

impl AttentionRule {
    fn masked(&self, i: usize, j: usize) -> bool {
        matches!(self.mode, MaskMode::Causal) && j > i
    }
}

impl BackwardRule for AttentionRule {
    fn backward(&self, out: &[Option<&[f32]>]) -> Vec<Option<Vec<f32>>> {
        let AttnDims { b, heads, tq, tk, d } = self.dims;
        let scale = 1.0 / (d as f32).sqrt();
        let d_out = out[0];
        let d_scores_ext = out[1];
        let d_probs_ext = out[2];
        if d_out.is_none() && d_scores_ext.is_none() && d_probs_ext.is_none() {
            return vec![None, None, None];
        }
        let mut dq = vec![0.0f32; b * heads * tq * d];
        let mut dk = vec![0.0f32; b * heads * tk * d];
        let mut dv = vec![0.0f32; b * heads * tk * d];
        for bh in 0..b * heads {
            let qo = bh * tq * d;
            let ko = bh * tk * d;
            let so = bh * tq * tk;
            for i in 0..tq {
                // dP_total = dOut V^T + dP_ext, per query row.
                let mut dp = vec![0.0f32; tk];
                if let Some(gout) = d_out {
                    for j in 0..tk {
                        let mut acc = 0.0f32;
                        for l in 0..d {
                            acc += gout[qo + i * d + l] * self.v[ko + j * d + l];
                        }
                        dp[j] = acc;
                    }
                }
                if let Some(gp) = d_probs_ext {
                    for j in 0..tk {
                        dp[j] += gp[so + i * tk + j];
                    }
                }
                // Softmax jacobian: dS = P .* (dP - <dP, P>).
                let prow = &self.probs[so + i * tk..so + (i + 1) * tk];
                let inner: f32 = dp.iter().zip(prow).map(|(&a, &p)| a * p).sum();
                let mut ds = vec![0.0f32; tk];
                for j in 0..tk {
                    ds[j] = prow[j] * (dp[j] - inner);
                }
                if let Some(gs) = d_scores_ext {
                    for j in 0..tk {
                        ds[j] += gs[so + i * tk + j];
                    }
                }
                for j in 0..tk {
                    // Masked positions hold the constant fill; nothing to
                    // propagate through them.
                    if self.masked(i, j) {
                        continue;
                    }
                    let dsij = ds[j] * scale;
                    for l in 0..d {
                        dq[qo + i * d + l] += dsij * self.k[ko + j * d + l];
                        dk[ko + j * d + l] += dsij * self.q[qo + i * d + l];
                    }
                    if let Some(gout) = d_out {
                        let p = prow[j];
                        if p != 0.0 {
                            for l in 0..d {
                                dv[ko + j * d + l] += p * gout[qo + i * d + l];
                            }
                        }
                    }
                }
            }
        }
        vec![Some(dq), Some(dk), Some(dv)]
    }
}

// ── reductions and losses ───────────────────────────────────────────────────

#[derive(Debug)]
struct BroadcastScalarRule {
    n: usize,
    factor: f32,
}

impl BackwardRule for BroadcastScalarRule {
    fn backward(&self, out: &[Option<&[f32]>]) -> Vec<Option<Vec<f32>>> {
        let Some(g) = out[0] else { return vec![None] };
        vec![Some(vec![g[0] * self.factor; self.n])]
    }
}

#[derive(Debug)]
struct MseRule {
    diff: Vec<f32>,       // a - b, already zeroed at excluded positions
    inv_count: f32,
}

impl BackwardRule for MseRule {
    fn backward(&self, out: &[Option<&[f32]>]) -> Vec<Option<Vec<f32>>> {
        let Some(g) = out[0] else { return vec![None, None] };
        let c = 2.0 * self.inv_count * g[0];
        let da: Vec<f32> = self.diff.iter().map(|&d| c * d).collect();
        let db: Vec<f32> = da.iter().map(|&v| -v).collect();
        vec![Some(da), Some(db)]
    }
}

#[derive(Debug)]
struct CrossEntropyRule {
    probs: Vec<f32>,
    targets: Vec<usize>,
    /// dLoss/d(nll of row r): `1 / rows` unmasked, `1 / kept` for kept rows
    /// of a masked loss, `0` for excluded rows.
    row_weight: Vec<f32>,
    rows: usize,
    cols: usize,
}

impl BackwardRule for CrossEntropyRule {
    fn backward(&self, out: &[Option<&[f32]>]) -> Vec<Option<Vec<f32>>> {
        let Some(g) = out[0] else { return vec![None] };
        let mut dl = vec![0.0f32; self.rows * self.cols];
        for r in 0..self.rows {
            let w = g[0] * self.row_weight[r];
            if w == 0.0 {
                continue;
            }
            for c in 0..self.cols {
                let p = self.probs[r * self.cols + c];
                let y = if c == self.targets[r] { 1.0 } else { 0.0 };
                dl[r * self.cols + c] = w * (p - y);
            }
        }
        vec![Some(dl)]
    }
}

#[derive(Debug)]
struct KlSoftRule {
    p_student: Vec<f32>,
    p_teacher: Vec<f32>,
    rows: usize,
    temperature: f32,
}

impl BackwardRule for KlSoftRule {
    fn backward(&self, out: &[Option<&[f32]>]) -> Vec<Option<Vec<f32>>> {
        let Some(g) = out[0] else { return vec![None, None] };
        // d/dS of T^2 * mean_rows KL(p_t || p_s) = (T / rows) (p_s - p_t).
        let c = g[0] * self.temperature / self.rows as f32;
        let ds: Vec<f32> = self
            .p_student
            .iter()
            .zip(&self.p_teacher)
            .map(|(&s, &t)| c * (s - t))
            .collect();
        // Teacher logits are treated as targets; no gradient flows to them.
        vec![Some(ds), None]
    }
}

// ── op constructors ─────────────────────────────────────────────────────────

impl Tape {
    fn same_shape(&self, a: NodeId, b: NodeId, context: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                context,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let out = Tensor::from_vec(
            self.shape(a).to_vec(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(&x, &y)| x + y)
                .collect(),
        )?;
        let n = out.numel();
        Ok(self.record1(&[a, b], out, Box::new(AddRule { n })))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "sub")?;
        let out = Tensor::from_vec(
            self.shape(a).to_vec(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(&x, &y)| x - y)
                .collect(),
        )?;
        let n = out.numel();
        Ok(self.record1(&[a, b], out, Box::new(SubRule { n })))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let av = self.value(a).data().to_vec();
        let bv = self.value(b).data().to_vec();
        let out = Tensor::from_vec(
            self.shape(a).to_vec(),
            av.iter().zip(&bv).map(|(&x, &y)| x * y).collect(),
        )?;
        Ok(self.record1(&[a, b], out, Box::new(MulRule { a: av, b: bv })))
    }

    pub fn scale(&mut self, x: NodeId, c: f32) -> NodeId {
        let out = self.value(x).map(|v| v * c);
        self.record1(&[x], out, Box::new(ScaleRule { c }))
    }

    /// Elementwise multiply by a constant mask (no gradient to the mask).
    pub fn mul_mask(&mut self, x: NodeId, mask: &[f32]) -> Result<NodeId> {
        if mask.len() != self.value(x).numel() {
            return Err(Error::ShapeMismatch {
                context: "mul_mask",
                left: self.shape(x).to_vec(),
                right: vec![mask.len()],
            });
        }
        let out = Tensor::from_vec(
            self.shape(x).to_vec(),
            self.value(x).data().iter().zip(mask).map(|(&v, &m)| v * m).collect(),
        )?;
        Ok(self.record1(&[x], out, Box::new(MulMaskRule { mask: mask.to_vec() })))
    }

    /// Scalar `sum_i weights[i] * terms[i]`; every term must be scalar.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, f32)]) -> Result<NodeId> {
        let mut acc = 0.0f32;
        let mut inputs = Vec::with_capacity(terms.len());
        let mut weights = Vec::with_capacity(terms.len());
        for &(id, w) in terms {
            acc += w * self.value(id).item()?;
            inputs.push(id);
            weights.push(w);
        }
        Ok(self.record1(&inputs, Tensor::scalar(acc), Box::new(WeightedSumRule { weights })))
    }

    /// Replaces the value of `x` with `forward` while routing gradients as
    /// `dx = g * gate` — the straight-through estimator primitive.
    pub fn gated_identity(&mut self, x: NodeId, forward: Tensor, gate: Vec<f32>) -> Result<NodeId> {
        if forward.shape() != self.shape(x) || gate.len() != forward.numel() {
            return Err(Error::ShapeMismatch {
                context: "gated_identity",
                left: self.shape(x).to_vec(),
                right: forward.shape().to_vec(),
            });
        }
        Ok(self.record1(&[x], forward, Box::new(GatedIdentityRule { gate })))
    }

    /// `c[m,n] = a[m,k] b[k,n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.value(a).dims2("matmul lhs")?;
        let (k2, n) = self.value(b).dims2("matmul rhs")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                context: "matmul inner dim",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let av = self.value(a).data().to_vec();
        let bv = self.value(b).data().to_vec();
        let out = Tensor::from_vec(vec![m, n], mm(&av, &bv, m, k, n))?;
        Ok(self.record1(&[a, b], out, Box::new(MatmulRule { a: av, b: bv, m, k, n })))
    }

    /// `y[m,n] = x[m,k] W[n,k]^T (+ b[n])` — weights stored `[d_out, d_in]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let (m, k) = self.value(x).dims2("linear input")?;
        let (n, k2) = self.value(w).dims2("linear weight")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                context: "linear in_features",
                left: self.shape(x).to_vec(),
                right: self.shape(w).to_vec(),
            });
        }
        let xv = self.value(x).data().to_vec();
        let wv = self.value(w).data().to_vec();
        let mut y = mm_nt(&xv, &wv, m, k, n);
        let mut inputs = vec![x, w];
        if let Some(b) = bias {
            if self.shape(b) != [n] {
                return Err(Error::ShapeMismatch {
                    context: "linear bias",
                    left: self.shape(b).to_vec(),
                    right: vec![n],
                });
            }
            let bv = self.value(b).data();
            for i in 0..m {
                for j in 0..n {
                    y[i * n + j] += bv[j];
                }
            }
            inputs.push(b);
        }
        let out = Tensor::from_vec(vec![m, n], y)?;
        Ok(self.record1(
            &inputs,
            out,
            Box::new(LinearRule { x: xv, w: wv, m, k, n, has_bias: bias.is_some() }),
        ))
    }

    /// Tanh-approximated GELU, applied elementwise.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x).data().to_vec();
        let out = self.value(x).map(gelu_scalar);
        self.record1(&[x], out, Box::new(GeluRule { x: xv }))
    }

    /// Layer norm over the last axis with affine parameters.
    ///
    /// A constant row (zero variance) normalizes to zeros before the affine
    /// transform; `eps` keeps the reciprocal finite.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f32,
    ) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let h = *shape.last().ok_or(Error::EmptyDimension { context: "layer_norm" })?;
        if h == 0 {
            return Err(Error::EmptyDimension { context: "layer_norm" });
        }
        if self.shape(gamma) != [h] || self.shape(beta) != [h] {
            return Err(Error::ShapeMismatch {
                context: "layer_norm affine",
                left: self.shape(gamma).to_vec(),
                right: vec![h],
            });
        }
        let rows = self.value(x).numel() / h;
        let xv = self.value(x).data();
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data();
        let mut y = vec![0.0f32; rows * h];
        let mut xhat = vec![0.0f32; rows * h];
        let mut rstd = vec![0.0f32; rows];
        for r in 0..rows {
            let row = &xv[r * h..(r + 1) * h];
            let mean = row.iter().sum::<f32>() / h as f32;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() / h as f32;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..h {
                let xh = (row[j] - mean) * rs;
                xhat[r * h + j] = xh;
                y[r * h + j] = gv[j] * xh + bv[j];
            }
        }
        let out = Tensor::from_vec(shape, y)?;
        Ok(self.record1(
            &[x, gamma, beta],
            out,
            Box::new(LayerNormRule { xhat, rstd, gamma: gv, rows, h }),
        ))
    }

    /// Row gather from an embedding table `[vocab, h]`; output `[ids.len, h]`.
    pub fn embedding(&mut self, table: NodeId, ids: &[u32]) -> Result<NodeId> {
        let (vocab, h) = self.value(table).dims2("embedding table")?;
        let tv = self.value(table).data();
        let mut out = vec![0.0f32; ids.len() * h];
        let mut idx = Vec::with_capacity(ids.len());
        for (pos, &id) in ids.iter().enumerate() {
            let id = id as usize;
            if id >= vocab {
                return Err(Error::InvalidConfig(format!(
                    "token id {id} out of range for table with {vocab} rows"
                )));
            }
            out[pos * h..(pos + 1) * h].copy_from_slice(&tv[id * h..(id + 1) * h]);
            idx.push(id);
        }
        let out = Tensor::from_vec(vec![ids.len(), h], out)?;
        Ok(self.record1(&[table], out, Box::new(EmbeddingRule { ids: idx, vocab, h })))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(Error::ShapeMismatch {
                context: "reshape",
                left: self.shape(x).to_vec(),
                right: shape,
            });
        }
        let out = Tensor::from_vec(shape, self.value(x).data().to_vec())?;
        Ok(self.record1(&[x], out, Box::new(ReshapeRule)))
    }

    pub fn permute(&mut self, x: NodeId, axes: &[usize]) -> Result<NodeId> {
        let in_shape = self.shape(x).to_vec();
        let mut seen = vec![false; in_shape.len()];
        let valid = axes.len() == in_shape.len()
            && axes.iter().all(|&a| {
                if a >= in_shape.len() || seen[a] {
                    false
                } else {
                    seen[a] = true;
                    true
                }
            });
        if !valid {
            return Err(Error::InvalidConfig(format!(
                "permute axes {axes:?} invalid for shape {in_shape:?}"
            )));
        }
        let (out_shape, data) = permute_data(self.value(x).data(), &in_shape, axes);
        let out = Tensor::from_vec(out_shape, data)?;
        Ok(self.record1(
            &[x],
            out,
            Box::new(PermuteRule { in_shape, axes: axes.to_vec() }),
        ))
    }

    /// Columns `[start, end)` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let (rows, cols) = self.value(x).dims2("slice_cols")?;
        if start >= end || end > cols {
            return Err(Error::InvalidConfig(format!(
                "slice_cols [{start}, {end}) out of range for {cols} columns"
            )));
        }
        let width = end - start;
        let xv = self.value(x).data();
        let mut out = vec![0.0f32; rows * width];
        for r in 0..rows {
            out[r * width..(r + 1) * width]
                .copy_from_slice(&xv[r * cols + start..r * cols + end]);
        }
        let out = Tensor::from_vec(vec![rows, width], out)?;
        Ok(self.record1(&[x], out, Box::new(SliceLastRule { rows, cols, start, width })))
    }

    /// Scaled-dot-product attention over `[batch, heads, time, head_dim]`
    /// inputs. Returns `(context, scores, probs)` where `scores` are the
    /// masked pre-softmax logits `q k^T / sqrt(head_dim)` and `probs` their
    /// row softmax. All three outputs are differentiable.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        mode: MaskMode,
    ) -> Result<(NodeId, NodeId, NodeId)> {
        let qs = self.shape(q).to_vec();
        let ks = self.shape(k).to_vec();
        let vs = self.shape(v).to_vec();
        let ([b, heads, tq, d], [b2, h2, tk, d2]) = (match qs[..] {
            [a, b, c, e] => [a, b, c, e],
            _ => {
                return Err(Error::ShapeMismatch {
                    context: "attention q",
                    left: qs.clone(),
                    right: vec![0; 4],
                })
            }
        }, match ks[..] {
            [a, b, c, e] => [a, b, c, e],
            _ => {
                return Err(Error::ShapeMismatch {
                    context: "attention k",
                    left: ks.clone(),
                    right: vec![0; 4],
                })
            }
        });
        if b != b2 || heads != h2 || d != d2 || ks != vs {
            return Err(Error::ShapeMismatch { context: "attention kv", left: ks, right: vs });
        }
        if mode == MaskMode::Causal && tq != tk {
            return Err(Error::ShapeMismatch {
                context: "causal attention needs square scores",
                left: vec![tq],
                right: vec![tk],
            });
        }
        if d == 0 {
            return Err(Error::EmptyDimension { context: "attention head_dim" });
        }
        let scale = 1.0 / (d as f32).sqrt();
        let qv = self.value(q).data().to_vec();
        let kv = self.value(k).data().to_vec();
        let vv = self.value(v).data().to_vec();
        let mut scores = vec![0.0f32; b * heads * tq * tk];
        let mut probs = vec![0.0f32; b * heads * tq * tk];
        let mut context = vec![0.0f32; b * heads * tq * d];
        for bh in 0..b * heads {
            let qo = bh * tq * d;
            let ko = bh * tk * d;
            let so = bh * tq * tk;
            for i in 0..tq {
                for j in 0..tk {
                    let blocked = mode == MaskMode::Causal && j > i;
                    scores[so + i * tk + j] = if blocked {
                        MASK_FILL
                    } else {
                        let mut acc = 0.0f32;
                        for l in 0..d {
                            acc += qv[qo + i * d + l] * kv[ko + j * d + l];
                        }
                        acc * scale
                    };
                }
                let row = &mut probs[so + i * tk..so + (i + 1) * tk];
                row.copy_from_slice(&scores[so + i * tk..so + (i + 1) * tk]);
                softmax_row(row);
                for j in 0..tk {
                    let p = row[j];
                    if p != 0.0 {
                        for l in 0..d {
                            context[qo + i * d + l] += p * vv[ko + j * d + l];
                        }
                    }
                }
            }
        }
        let dims = AttnDims { b, heads, tq, tk, d };
        let outs = self.record(
            &[q, k, v],
            vec![
                Tensor::from_vec(vec![b, heads, tq, d], context)?,
                Tensor::from_vec(vec![b, heads, tq, tk], scores)?,
                Tensor::from_vec(vec![b, heads, tq, tk], probs.clone())?,
            ],
            Box::new(AttentionRule { q: qv, k: kv, v: vv, probs, dims, mode }),
        );
        Ok((outs[0], outs[1], outs[2]))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).numel();
        let s: f32 = self.value(x).data().iter().sum();
        self.record1(&[x], Tensor::scalar(s), Box::new(BroadcastScalarRule { n, factor: 1.0 }))
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).numel().max(1);
        let s: f32 = self.value(x).data().iter().sum::<f32>() / n as f32;
        self.record1(
            &[x],
            Tensor::scalar(s),
            Box::new(BroadcastScalarRule { n, factor: 1.0 / n as f32 }),
        )
    }

    /// Mean squared error over included positions; `mask` (same length)
    /// excludes positions where it is `false`.
    pub fn mse(&mut self, a: NodeId, b: NodeId, mask: Option<&[bool]>) -> Result<NodeId> {
        self.same_shape(a, b, "mse")?;
        let n = self.value(a).numel();
        if let Some(m) = mask {
            if m.len() != n {
                return Err(Error::ShapeMismatch {
                    context: "mse mask",
                    left: vec![m.len()],
                    right: vec![n],
                });
            }
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut diff = vec![0.0f32; n];
        let mut count = 0usize;
        let mut total = 0.0f64;
        for i in 0..n {
            let included = mask.map_or(true, |m| m[i]);
            if included {
                let d = av[i] - bv[i];
                diff[i] = d;
                total += (d as f64) * (d as f64);
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::EmptyDimension { context: "mse: empty mask" });
        }
        let loss = (total / count as f64) as f32;
        Ok(self.record1(
            &[a, b],
            Tensor::scalar(loss),
            Box::new(MseRule { diff, inv_count: 1.0 / count as f32 }),
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-softmaxed logits.
    pub fn cross_entropy_rows(&mut self, logits: NodeId, targets: &[u32]) -> Result<NodeId> {
        self.cross_entropy_rows_inner(logits, targets, None)
    }

    /// [`Self::cross_entropy_rows`] averaged over the rows where `keep` is
    /// true; excluded rows contribute nothing (their targets are ignored).
    pub fn cross_entropy_rows_masked(
        &mut self,
        logits: NodeId,
        targets: &[u32],
        keep: &[bool],
    ) -> Result<NodeId> {
        self.cross_entropy_rows_inner(logits, targets, Some(keep))
    }

    fn cross_entropy_rows_inner(
        &mut self,
        logits: NodeId,
        targets: &[u32],
        keep: Option<&[bool]>,
    ) -> Result<NodeId> {
        let (rows, cols) = self.value(logits).dims2("cross_entropy_rows")?;
        if targets.len() != rows || keep.is_some_and(|k| k.len() != rows) {
            return Err(Error::ShapeMismatch {
                context: "cross_entropy_rows targets",
                left: vec![targets.len()],
                right: vec![rows],
            });
        }
        let kept = match keep {
            Some(k) => k.iter().filter(|&&b| b).count(),
            None => rows,
        };
        if kept == 0 {
            return Err(Error::EmptyDimension { context: "cross_entropy_rows: empty mask" });
        }
        let inv = 1.0 / kept as f32;
        let lv = self.value(logits).data();
        let mut probs = vec![0.0f32; rows * cols];
        let mut tgt = Vec::with_capacity(rows);
        let mut row_weight = Vec::with_capacity(rows);
        let mut nll = 0.0f64;
        for r in 0..rows {
            if keep.is_some_and(|k| !k[r]) {
                tgt.push(0);
                row_weight.push(0.0);
                continue;
            }
            let t = targets[r] as usize;
            if t >= cols {
                return Err(Error::InvalidConfig(format!(
                    "target {t} out of range for {cols} classes"
                )));
            }
            tgt.push(t);
            row_weight.push(inv);
            let row = &lv[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f32;
            for (j, &x) in row.iter().enumerate() {
                let e = (x - max).exp();
                probs[r * cols + j] = e;
                sum += e;
            }
            for j in 0..cols {
                probs[r * cols + j] /= sum;
            }
            // log p[t] computed from the stabilized pieces, not from the
            // normalized prob, to avoid log(0) when the prob underflows.
            let logp = (row[t] - max) as f64 - (sum as f64).ln();
            nll -= logp;
        }
        let loss = (nll / kept as f64) as f32;
        Ok(self.record1(
            &[logits],
            Tensor::scalar(loss),
            Box::new(CrossEntropyRule { probs, targets: tgt, row_weight, rows, cols }),
        ))
    }

    /// `T^2 * mean_rows KL(softmax(teacher/T) || softmax(student/T))`.
    ///
    /// Gradient flows to the student logits only; the teacher side is a
    /// target distribution.
    pub fn kl_soft_targets(
        &mut self,
        student_logits: NodeId,
        teacher_logits: NodeId,
        temperature: f32,
    ) -> Result<NodeId> {
        self.same_shape(student_logits, teacher_logits, "kl_soft_targets")?;
        if temperature <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        let (rows, cols) = self.value(student_logits).dims2("kl_soft_targets")?;
        let sv = self.value(student_logits).data();
        let tv = self.value(teacher_logits).data();
        let mut p_s = vec![0.0f32; rows * cols];
        let mut p_t = vec![0.0f32; rows * cols];
        let mut kl = 0.0f64;
        let log_softmax = |row: &[f32], out_p: &mut [f32], out_lp: &mut [f64]| {
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f64;
            for &x in row {
                sum += ((x - max) as f64).exp();
            }
            let lse = sum.ln();
            for (j, &x) in row.iter().enumerate() {
                let lp = (x - max) as f64 - lse;
                out_lp[j] = lp;
                out_p[j] = lp.exp() as f32;
            }
        };
        let mut lp_s = vec![0.0f64; cols];
        let mut lp_t = vec![0.0f64; cols];
        for r in 0..rows {
            let srow: Vec<f32> = sv[r * cols..(r + 1) * cols]
                .iter()
                .map(|&x| x / temperature)
                .collect();
            let trow: Vec<f32> = tv[r * cols..(r + 1) * cols]
                .iter()
                .map(|&x| x / temperature)
                .collect();
            log_softmax(&srow, &mut p_s[r * cols..(r + 1) * cols], &mut lp_s);
            log_softmax(&trow, &mut p_t[r * cols..(r + 1) * cols], &mut lp_t);
            for j in 0..cols {
                let pt = p_t[r * cols + j] as f64;
                if pt > 0.0 {
                    kl += pt * (lp_t[j] - lp_s[j]);
                }
            }
        }
        let loss = (kl / rows as f64) as f32 * temperature * temperature;
        Ok(self.record1(
            &[student_logits, teacher_logits],
            Tensor::scalar(loss),
            Box::new(KlSoftRule { p_student: p_s, p_teacher: p_t, rows, temperature }),
        ))
    }

    /// Inverted dropout: keeps each element with probability `1 - rate` and
    /// rescales by `1 / (1 - rate)`. `rate == 0` is the identity.
    pub fn dropout<R: Rng>(&mut self, x: NodeId, rate: f32, rng: &mut R) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidConfig(format!(
                "dropout rate must be in [0, 1), got {rate}"
            )));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let scale = 1.0 / keep;
        let mask: Vec<f32> = (0..self.value(x).numel())
            .map(|_| if rng.gen::<f32>() < keep { scale } else { 0.0 })
            .collect();
        self.mul_mask(x, &mask)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape, shape: Vec<usize>, data: Vec<f32>) -> NodeId {
        tape.leaf(Tensor::from_vec(shape, data).unwrap(), true)
    }

    #[test]
    fn gelu_fixed_points() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![3], vec![0.0, 100.0, -100.0]);
        let y = tape.gelu(x);
        let out = tape.value(y).data();
        assert_eq!(out[0], 0.0);
        assert!((out[1] - 100.0).abs() < 1e-4); // identity for large x
        assert!(out[2].abs() < 1e-4); // ~0 for very negative x
    }

    #[test]
    fn layer_norm_constant_row_is_beta() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1, 4], vec![3.0; 4]);
        let g = leaf(&mut tape, vec![4], vec![2.0; 4]);
        let b = leaf(&mut tape, vec![4], vec![0.5; 4]);
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        for &v in tape.value(y).data() {
            assert_eq!(v, 0.5); // zero-variance row normalizes to zero
        }
    }

    #[test]
    fn linear_matches_manual() {
        let mut tape = Tape::new();
        // x [1,2] = [1, 2]; W [2,2] rows w0=[1,0], w1=[1,1]; b = [0.5, -0.5]
        let x = leaf(&mut tape, vec![1, 2], vec![1.0, 2.0]);
        let w = leaf(&mut tape, vec![2, 2], vec![1.0, 0.0, 1.0, 1.0]);
        let b = leaf(&mut tape, vec![2], vec![0.5, -0.5]);
        let y = tape.linear(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), &[1.5, 2.5]);
    }

    #[test]
    fn causal_attention_blocks_future() {
        let mut tape = Tape::new();
        // One batch, one head, two steps, d=1; q=k=v=[1, 1].
        let q = leaf(&mut tape, vec![1, 1, 2, 1], vec![1.0, 1.0]);
        let k = leaf(&mut tape, vec![1, 1, 2, 1], vec![1.0, 1.0]);
        let v = leaf(&mut tape, vec![1, 1, 2, 1], vec![5.0, 9.0]);
        let (out, scores, probs) = tape.attention(q, k, v, MaskMode::Causal).unwrap();
        let p = tape.value(probs).data();
        assert_eq!(p[1], 0.0); // step 0 cannot see step 1
        assert_eq!(tape.value(scores).data()[1], MASK_FILL);
        assert_eq!(tape.value(out).data()[0], 5.0);
        assert!((p[2] - 0.5).abs() < 1e-6 && (p[3] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_uniform_logits_is_log_vocab() {
        let mut tape = Tape::new();
        let logits = leaf(&mut tape, vec![2, 8], vec![0.0; 16]);
        let loss = tape.cross_entropy_rows(logits, &[3, 5]).unwrap();
        let expect = (8.0f32).ln();
        assert!((tape.value(loss).item().unwrap() - expect).abs() < 1e-6);
    }

    #[test]
    fn kl_identical_logits_is_zero() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, vec![2, 4], vec![0.3, -1.0, 2.0, 0.0, 1.0, 1.0, -2.0, 0.5]);
        let b = leaf(&mut tape, vec![2, 4], vec![0.3, -1.0, 2.0, 0.0, 1.0, 1.0, -2.0, 0.5]);
        let kl = tape.kl_soft_targets(a, b, 2.0).unwrap();
        assert!(tape.value(kl).item().unwrap().abs() < 1e-7);
    }

    #[test]
    fn mse_mask_excludes_positions() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, vec![4], vec![1.0, 2.0, 3.0, 4.0]);
        let b = leaf(&mut tape, vec![4], vec![0.0, 2.0, 0.0, 4.0]);
        let m = vec![true, true, false, true];
        let loss = tape.mse(a, b, Some(&m)).unwrap();
        // Only index 0 differs among included positions: 1^2 / 3.
        assert!((tape.value(loss).item().unwrap() - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn slice_and_permute_round_trip() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let s = tape.slice_cols(x, 1, 3).unwrap();
        assert_eq!(tape.value(s).data(), &[2.0, 3.0, 5.0, 6.0]);
        let p = tape.permute(s, &[1, 0]).unwrap();
        assert_eq!(tape.value(p).shape(), &[2, 2]);
        assert_eq!(tape.value(p).data(), &[2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn dropout_zero_rate_is_identity() {
        let mut tape = Tape::new();
        let mut rng = rand::rngs::mock::StepRng::new(0, 1);
        let x = leaf(&mut tape, vec![4], vec![1.0, 2.0, 3.0, 4.0]);
        let y = tape.dropout(x, 0.0, &mut rng).unwrap();
        assert_eq!(x, y);
    }
}
