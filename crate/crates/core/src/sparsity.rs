//! Pruning masks and their composition with quantization.
//!
//! Masks are binary keep/zero patterns over a weight tensor, either
//! unstructured (smallest magnitudes pruned globally per tensor) or
//! pair-structured: in every contiguous group of M weights along the input
//! (last) dimension, exactly N are zeroed. Static masks are computed once
//! from teacher magnitudes and stay frozen; movement pruning accumulates
//! `-lr_s * (w .* grad_w)` scores during training and refreshes its mask at a
//! fixed cadence.
//!
//! Tie-breaking is deterministic everywhere: among equal candidates the lower
//! flat index is pruned first.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{fake_quantize_ste, QuantScheme};
use crate::tensor::{NodeId, Tape, Tensor};

/// Mask pattern family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskStructure {
    Unstructured,
    /// N zeros in every group of M along the input dimension.
    PairNm { n: usize, m: usize },
}

/// How the mask was derived.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskOrigin {
    /// Frozen, computed from teacher weight magnitudes before training.
    TeacherMagnitude,
    /// Periodically refreshed from movement scores during training.
    Movement,
}

/// Whether pruning is applied before or after (fake-)quantization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompositionOrder {
    PruneThenQuant,
    QuantThenPrune,
}

/// A binary keep-mask over one weight tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsityMask {
    pub shape: Vec<usize>,
    /// `true` = keep, `false` = zero. Length equals the tensor's numel.
    pub keep: Vec<bool>,
    pub structure: MaskStructure,
    pub origin: MaskOrigin,
}

impl SparsityMask {
    pub fn all_ones(shape: Vec<usize>, structure: MaskStructure, origin: MaskOrigin) -> Self {
        let numel = shape.iter().product();
        SparsityMask { shape, keep: vec![true; numel], structure, origin }
    }

    /// Fraction of zeroed entries.
    pub fn sparsity(&self) -> f64 {
        if self.keep.is_empty() {
            return 0.0;
        }
        self.keep.iter().filter(|&&k| !k).count() as f64 / self.keep.len() as f64
    }

    /// Mask as 0.0/1.0 multipliers.
    pub fn as_f32(&self) -> Vec<f32> {
        self.keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect()
    }

    /// `w .* mask` as a plain tensor.
    pub fn apply(&self, w: &Tensor) -> Result<Tensor> {
        if w.shape() != self.shape {
            return Err(Error::ShapeMismatch {
                context: "mask apply",
                left: w.shape().to_vec(),
                right: self.shape.clone(),
            });
        }
        Tensor::from_vec(
            self.shape.clone(),
            w.data().iter().zip(&self.keep).map(|(&v, &k)| if k { v } else { 0.0 }).collect(),
        )
    }

    /// Verifies the pair-(N:M) structural invariant by exhaustive scan.
    pub fn check_structure(&self) -> Result<()> {
        let MaskStructure::PairNm { n, m } = self.structure else {
            return Ok(());
        };
        let last = *self.shape.last().unwrap_or(&0);
        if last == 0 || last % m != 0 {
            return Err(Error::InvalidConfig(format!(
                "pair_nm({n}:{m}) mask has input dim {last} not divisible by {m}"
            )));
        }
        for (g, group) in self.keep.chunks(m).enumerate() {
            let zeros = group.iter().filter(|&&k| !k).count();
            if zeros != n {
                return Err(Error::InvalidConfig(format!(
                    "pair_nm({n}:{m}) violated in group {g}: {zeros} zeros"
                )));
            }
        }
        Ok(())
    }
}

/// Flat indices of the `k` smallest values by `(value, index)` order —
/// deterministic tie-breaking, lower index selected first.
fn smallest_k_indices(values: &[f32], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| {
        values[a].partial_cmp(&values[b]).unwrap().then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

fn select_mask(values: &[f32], shape: &[usize], sparsity: f64, structure: MaskStructure) -> Result<Vec<bool>> {
    let numel = values.len();
    let mut keep = vec![true; numel];
    match structure {
        MaskStructure::Unstructured => {
            let k = (sparsity * numel as f64).round() as usize;
            for i in smallest_k_indices(values, k) {
                keep[i] = false;
            }
        }
        MaskStructure::PairNm { n, m } => {
            if m == 0 || n > m {
                return Err(Error::InvalidConfig(format!("invalid pair structure {n}:{m}")));
            }
            let expected = n as f64 / m as f64;
            if (sparsity - expected).abs() > 1e-9 {
                return Err(Error::InvalidConfig(format!(
                    "pair_nm({n}:{m}) implies sparsity {expected}, got {sparsity}"
                )));
            }
            let last = *shape.last().unwrap_or(&0);
            if last == 0 || last % m != 0 {
                return Err(Error::InvalidConfig(format!(
                    "input dimension {last} not divisible by group size {m}"
                )));
            }
            for (g, group) in values.chunks(m).enumerate() {
                for i in smallest_k_indices(group, n) {
                    keep[g * m + i] = false;
                }
            }
        }
    }
    Ok(keep)
}

/// Magnitude (L1) mask: prunes the smallest `|w|` to reach `sparsity`,
/// globally for unstructured masks or per M-group along the input dimension
/// for pair masks. The result is frozen (teacher-magnitude origin).
pub fn l1_mask(w: &Tensor, sparsity: f64, structure: MaskStructure) -> Result<SparsityMask> {
    if !(0.0..1.0).contains(&sparsity) {
        return Err(Error::InvalidConfig(format!(
            "sparsity must be in [0, 1), got {sparsity}"
        )));
    }
    let magnitudes: Vec<f32> = w.data().iter().map(|v| v.abs()).collect();
    let keep = select_mask(&magnitudes, w.shape(), sparsity, structure)?;
    Ok(SparsityMask {
        shape: w.shape().to_vec(),
        keep,
        structure,
        origin: MaskOrigin::TeacherMagnitude,
    })
}

/// Iterative movement pruning: scores accumulate `-lr_s * (w .* grad_w)` each
/// step (weights moving away from zero gain score), and the mask is re-selected
/// from the *lowest* scores every `cadence` steps.
#[derive(Debug, Clone)]
pub struct MovementPruner {
    pub scores: Vec<f32>,
    pub lr_s: f32,
    pub cadence: usize,
    pub sparsity: f64,
    pub structure: MaskStructure,
    shape: Vec<usize>,
    steps: usize,
    mask: SparsityMask,
}

impl MovementPruner {
    pub fn new(
        shape: Vec<usize>,
        sparsity: f64,
        structure: MaskStructure,
        lr_s: f32,
        cadence: usize,
    ) -> Result<Self> {
        if cadence == 0 {
            return Err(Error::InvalidConfig("movement cadence must be >= 1".into()));
        }
        let numel: usize = shape.iter().product();
        // The initial mask ranks all-equal scores, i.e. prunes the lowest
        // flat indices; it is refreshed as real movement signal arrives.
        let keep = select_mask(&vec![0.0; numel], &shape, sparsity, structure)?;
        let mask =
            SparsityMask { shape: shape.clone(), keep, structure, origin: MaskOrigin::Movement };
        Ok(MovementPruner {
            scores: vec![0.0; numel],
            lr_s,
            cadence,
            sparsity,
            structure,
            shape,
            steps: 0,
            mask,
        })
    }

    /// One optimizer step's score update; refreshes the mask when the step
    /// count hits the cadence.
    pub fn update(&mut self, w: &Tensor, grad_w: &[f32]) -> Result<()> {
        if w.numel() != self.scores.len() || grad_w.len() != self.scores.len() {
            return Err(Error::ShapeMismatch {
                context: "movement_scores_update",
                left: vec![w.numel(), grad_w.len()],
                right: vec![self.scores.len()],
            });
        }
        for (s, (&wv, &gv)) in self.scores.iter_mut().zip(w.data().iter().zip(grad_w)) {
            *s -= self.lr_s * wv * gv;
        }
        self.steps += 1;
        if self.steps % self.cadence == 0 {
            self.refresh()?;
        }
        Ok(())
    }

    /// Recomputes the mask from the current scores (the same selection a
    /// from-scratch recompute would produce).
    pub fn refresh(&mut self) -> Result<()> {
        let keep = select_mask(&self.scores, &self.shape, self.sparsity, self.structure)?;
        self.mask = SparsityMask {
            shape: self.shape.clone(),
            keep,
            structure: self.structure,
            origin: MaskOrigin::Movement,
        };
        Ok(())
    }

    pub fn mask(&self) -> &SparsityMask {
        &self.mask
    }
}

/// Differentiable masked fake-quantized weight for QAT:
///
/// * prune-then-quant: `fake_quantize(w .* mask)` — quantizer parameters are
///   computed on the masked tensor, and masked zeros land exactly on the
///   symmetric grid point 0;
/// * quant-then-prune: `fake_quantize(w) .* mask` — masked positions are
///   exactly 0 regardless of the quantizer grid.
pub fn masked_quantized_weight(
    tape: &mut Tape,
    w: NodeId,
    mask: &SparsityMask,
    scheme: &QuantScheme,
    order: CompositionOrder,
) -> Result<NodeId> {
    let mvec = mask.as_f32();
    match order {
        CompositionOrder::PruneThenQuant => {
            let pruned = tape.mul_mask(w, &mvec)?;
            fake_quantize_ste(tape, pruned, scheme)
        }
        CompositionOrder::QuantThenPrune => {
            let fq = fake_quantize_ste(tape, w, scheme)?;
            tape.mul_mask(fq, &mvec)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{Granularity, Mapping};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: Vec<usize>, data: Vec<f32>) -> Tensor {
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn pair_2_4_keeps_two_largest_magnitudes() {
        let w = t(vec![1, 4], vec![0.1, -0.5, 0.3, 0.05]);
        let mask = l1_mask(&w, 0.5, MaskStructure::PairNm { n: 2, m: 4 }).unwrap();
        assert_eq!(mask.keep, vec![false, true, true, false]);
        mask.check_structure().unwrap();
    }

    #[test]
    fn zero_sparsity_is_all_ones() {
        let w = t(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let mask = l1_mask(&w, 0.0, MaskStructure::Unstructured).unwrap();
        assert!(mask.keep.iter().all(|&k| k));
    }

    #[test]
    fn pair_mask_hits_exact_fraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Tensor::randn(vec![32, 128], 1.0, &mut rng);
        let mask = l1_mask(&w, 0.5, MaskStructure::PairNm { n: 2, m: 4 }).unwrap();
        assert_eq!(mask.sparsity(), 0.5);
        mask.check_structure().unwrap();
    }

    #[test]
    fn unstructured_fraction_within_one_over_numel() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = Tensor::randn(vec![3, 7], 1.0, &mut rng);
        for sparsity in [0.25, 0.5, 0.73] {
            let mask = l1_mask(&w, sparsity, MaskStructure::Unstructured).unwrap();
            assert!((mask.sparsity() - sparsity).abs() <= 1.0 / 21.0 + 1e-12);
        }
    }

    #[test]
    fn pair_rejects_indivisible_dim_and_wrong_fraction() {
        let w = t(vec![1, 6], vec![1.0; 6]);
        assert!(l1_mask(&w, 0.5, MaskStructure::PairNm { n: 2, m: 4 }).is_err());
        let w = t(vec![1, 8], vec![1.0; 8]);
        assert!(l1_mask(&w, 0.3, MaskStructure::PairNm { n: 2, m: 4 }).is_err());
    }

    #[test]
    fn l1_mask_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = Tensor::randn(vec![8, 16], 1.0, &mut rng);
        for structure in [MaskStructure::Unstructured, MaskStructure::PairNm { n: 2, m: 4 }] {
            let first = l1_mask(&w, 0.5, structure).unwrap();
            let masked = first.apply(&w).unwrap();
            let second = l1_mask(&masked, 0.5, structure).unwrap();
            assert_eq!(first.keep, second.keep);
        }
    }

    #[test]
    fn movement_scores_zero_grad_is_no_op_and_sign_behaves() {
        let mut p = MovementPruner::new(vec![1, 4], 0.5, MaskStructure::PairNm { n: 2, m: 4 }, 0.1, 10)
            .unwrap();
        let w = t(vec![1, 4], vec![1.0, -1.0, 2.0, 0.5]);
        p.update(&w, &[0.0; 4]).unwrap();
        assert_eq!(p.scores, vec![0.0; 4]);
        // positive w, negative grad -> weight moving away from zero -> score up
        p.update(&w, &[-1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(p.scores[0] > 0.0);
    }

    #[test]
    fn movement_mask_matches_recompute_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let shape = vec![4, 8];
        let mut p = MovementPruner::new(shape.clone(), 0.5, MaskStructure::PairNm { n: 2, m: 4 }, 0.05, 4)
            .unwrap();
        let w = Tensor::randn(shape.clone(), 1.0, &mut rng);
        for _ in 0..8 {
            let g: Vec<f32> = (0..32).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect();
            p.update(&w, &g).unwrap();
        }
        // Recompute from the raw scores and compare with the live mask
        // (step 8 is a refresh boundary for cadence 4).
        let expect = select_mask(&p.scores, &shape, 0.5, MaskStructure::PairNm { n: 2, m: 4 }).unwrap();
        assert_eq!(p.mask().keep, expect);
        p.mask().check_structure().unwrap();
    }

    #[test]
    fn composition_orders_agree_on_all_ones_mask() {
        let w = t(vec![2, 4], vec![0.9, -0.3, 0.2, 0.7, -0.8, 0.1, 0.05, -0.6]);
        let mask = SparsityMask::all_ones(vec![2, 4], MaskStructure::Unstructured, MaskOrigin::TeacherMagnitude);
        let scheme = QuantScheme::int4(Mapping::Symmetric, Granularity::PerTensor);
        let mut tape = Tape::new();
        let wn = tape.leaf(w.clone(), true);
        let a = masked_quantized_weight(&mut tape, wn, &mask, &scheme, CompositionOrder::PruneThenQuant).unwrap();
        let b = masked_quantized_weight(&mut tape, wn, &mask, &scheme, CompositionOrder::QuantThenPrune).unwrap();
        assert_eq!(tape.value(a), tape.value(b));
    }

    #[test]
    fn masked_positions_land_on_or_near_zero_per_order() {
        let w = t(vec![2, 4], vec![0.9, -0.3, 0.2, 0.7, -0.8, 0.1, 0.05, -0.6]);
        let mask = l1_mask(&w, 0.5, MaskStructure::PairNm { n: 2, m: 4 }).unwrap();
        // Symmetric prune-then-quant: masked zeros sit exactly on the grid.
        let sym = QuantScheme::int4(Mapping::Symmetric, Granularity::PerTensor);
        let mut tape = Tape::new();
        let wn = tape.leaf(w.clone(), true);
        let pq = masked_quantized_weight(&mut tape, wn, &mask, &sym, CompositionOrder::PruneThenQuant).unwrap();
        for (i, &keep) in mask.keep.iter().enumerate() {
            if !keep {
                assert_eq!(tape.value(pq).data()[i], 0.0);
            }
        }
        // Asymmetric prune-then-quant: zero may fall off-grid but must stay
        // within half a step.
        let asym = QuantScheme::int4(Mapping::Asymmetric, Granularity::PerTensor);
        let pq2 = masked_quantized_weight(&mut tape, wn, &mask, &asym, CompositionOrder::PruneThenQuant).unwrap();
        let step = {
            let masked = mask.apply(&w).unwrap();
            crate::quant::quantize(&masked, &asym).unwrap().params.scales[0]
        };
        for (i, &keep) in mask.keep.iter().enumerate() {
            if !keep {
                assert!(tape.value(pq2).data()[i].abs() <= step / 2.0 + 1e-6);
            }
        }
        // Quant-then-prune: exact zeros for any mapping.
        let qp = masked_quantized_weight(&mut tape, wn, &mask, &asym, CompositionOrder::QuantThenPrune).unwrap();
        for (i, &keep) in mask.keep.iter().enumerate() {
            if !keep {
                assert_eq!(tape.value(qp).data()[i], 0.0);
            }
        }
    }

    #[test]
    fn masked_quant_gradients_respect_mask_under_prune_then_quant() {
        let w = t(vec![1, 4], vec![0.4, -0.9, 0.2, 0.6]);
        let mask = l1_mask(&w, 0.5, MaskStructure::PairNm { n: 2, m: 4 }).unwrap();
        let scheme = QuantScheme::int4(Mapping::Symmetric, Granularity::PerTensor);
        let mut tape = Tape::new();
        let wn = tape.leaf(w, true);
        let out = masked_quantized_weight(&mut tape, wn, &mask, &scheme, CompositionOrder::PruneThenQuant).unwrap();
        let loss = tape.sum_all(out);
        tape.backward(loss).unwrap();
        let g = tape.grad(wn).unwrap();
        for (i, &keep) in mask.keep.iter().enumerate() {
            assert_eq!(g[i], if keep { 1.0 } else { 0.0 });
        }
    }
}
