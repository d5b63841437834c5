//! Depth reduction: build a shallower student from a trained teacher by
//! copying a subset of its layers.
//!
//! The default policy keeps the first `target_x` encoder layers and picks
//! decoder layers at evenly spaced teacher indices (`floor(i * y / y')`),
//! which includes the first layer and strides through the rest — a 6-layer
//! decoder reduced to 3 copies layers {0, 2, 4}. The policy is pluggable.

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::Model;

/// How student layer indices map onto teacher layers at copy time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CopyPolicy {
    /// First `target_x` encoder layers; evenly spaced decoder layers.
    FirstEncSpacedDec,
    /// Evenly spaced indices on both stacks.
    SpacedBoth,
}

impl Default for CopyPolicy {
    fn default() -> Self {
        CopyPolicy::FirstEncSpacedDec
    }
}

/// Which teacher layer each student layer was copied from. Distillation uses
/// this to align per-layer attention/hidden-state targets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerMapping {
    pub encoder: Vec<usize>,
    pub decoder: Vec<usize>,
}

fn spaced(teacher: usize, target: usize) -> Vec<usize> {
    (0..target).map(|i| i * teacher / target).collect()
}

/// Student config plus the teacher-layer mapping for `target_x` encoder and
/// `target_y` decoder layers.
pub fn layer_reduce(
    teacher_cfg: &ModelConfig,
    target_x: usize,
    target_y: usize,
    policy: CopyPolicy,
) -> Result<(ModelConfig, LayerMapping)> {
    teacher_cfg.validate()?;
    if target_x > teacher_cfg.num_encoder_layers || target_y > teacher_cfg.num_decoder_layers {
        return Err(Error::InvalidConfig(format!(
            "reduction targets {target_x}/{target_y} exceed teacher depth {}/{}",
            teacher_cfg.num_encoder_layers, teacher_cfg.num_decoder_layers
        )));
    }
    let mut cfg = *teacher_cfg;
    cfg.num_encoder_layers = target_x;
    cfg.num_decoder_layers = target_y;
    cfg.validate()?; // e.g. reducing a stack to zero breaks the arch contract
    let encoder = match policy {
        CopyPolicy::FirstEncSpacedDec => (0..target_x).collect(),
        CopyPolicy::SpacedBoth => spaced(teacher_cfg.num_encoder_layers, target_x),
    };
    let decoder = spaced(teacher_cfg.num_decoder_layers, target_y);
    Ok((cfg, LayerMapping { encoder, decoder }))
}

/// Builds the student model itself: shared parameters (embeddings, head,
/// final norms) are copied verbatim, layer parameters come from the mapped
/// teacher layers. Masks and integer weights do not carry over.
pub fn reduce_model(
    teacher: &Model,
    target_x: usize,
    target_y: usize,
    policy: CopyPolicy,
) -> Result<(Model, LayerMapping)> {
    let (cfg, mapping) = layer_reduce(&teacher.config, target_x, target_y, policy)?;
    // Seed is irrelevant: every parameter is overwritten below.
    let mut student = crate::model::build_model(&cfg, 0)?;
    let mut missing = Vec::new();
    for (name, value) in student.params.iter_mut() {
        let teacher_name = match split_layer_param(name) {
            Some(("enc", i, rest)) => format!("enc.{}.{}", mapping.encoder[i], rest),
            Some(("dec", i, rest)) => format!("dec.{}.{}", mapping.decoder[i], rest),
            _ => name.clone(),
        };
        match teacher.params.get(&teacher_name) {
            Some(t) => *value = t.clone(),
            None => missing.push(teacher_name),
        }
    }
    if !missing.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "teacher is missing parameters {missing:?}"
        )));
    }
    student.strategy = teacher.strategy;
    Ok((student, mapping))
}

/// `"enc.3.qkv.w"` -> `("enc", 3, "qkv.w")`.
fn split_layer_param(name: &str) -> Option<(&str, usize, &str)> {
    let (stack, rest) = name.split_once('.')?;
    if stack != "enc" && stack != "dec" {
        return None;
    }
    let (idx, rest) = rest.split_once('.')?;
    Some((stack, idx.parse().ok()?, rest))
}
