//! Model configuration, the per-part quantization strategy, and the mapping
//! from parameter names to quantizable parts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{Granularity, QuantScheme};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    EncoderOnly,
    EncoderDecoder,
    DecoderOnly,
}

impl Arch {
    pub fn name(&self) -> &'static str {
        match self {
            Arch::EncoderOnly => "encoder_only",
            Arch::EncoderDecoder => "encoder_decoder",
            Arch::DecoderOnly => "decoder_only",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "encoder_only" => Ok(Arch::EncoderOnly),
            "encoder_decoder" => Ok(Arch::EncoderDecoder),
            "decoder_only" => Ok(Arch::DecoderOnly),
            other => Err(Error::InvalidConfig(format!("unknown arch '{other}'"))),
        }
    }
}

/// Where layer norm sits relative to each sublayer. Pre-LN normalizes the
/// sublayer input and adds a final norm after the stack; post-LN normalizes
/// the residual sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LnPlacement {
    Pre,
    Post,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Arch,
    pub num_encoder_layers: usize,
    pub num_decoder_layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub ln_placement: LnPlacement,
    pub vocab_size: usize,
    pub max_seq: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(Error::InvalidConfig(msg));
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return err(format!(
                "hidden ({}) must be a nonzero multiple of heads ({})",
                self.hidden, self.heads
            ));
        }
        if self.ffn_mult == 0 {
            return err("ffn_mult must be >= 1".into());
        }
        if self.vocab_size < 2 {
            return err(format!("vocab_size must be >= 2, got {}", self.vocab_size));
        }
        if self.max_seq == 0 {
            return err("max_seq must be >= 1".into());
        }
        match self.arch {
            Arch::EncoderOnly => {
                if self.num_encoder_layers == 0 || self.num_decoder_layers != 0 {
                    return err(format!(
                        "encoder_only needs encoder layers >= 1 and zero decoder layers, \
                         got {}/{}",
                        self.num_encoder_layers, self.num_decoder_layers
                    ));
                }
            }
            Arch::DecoderOnly => {
                if self.num_decoder_layers == 0 || self.num_encoder_layers != 0 {
                    return err(format!(
                        "decoder_only needs decoder layers >= 1 and zero encoder layers, \
                         got {}/{}",
                        self.num_encoder_layers, self.num_decoder_layers
                    ));
                }
            }
            Arch::EncoderDecoder => {
                if self.num_encoder_layers == 0 || self.num_decoder_layers == 0 {
                    return err("encoder_decoder needs both stacks non-empty".into());
                }
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn ffn_dim(&self) -> usize {
        self.hidden * self.ffn_mult
    }

    /// Analytic parameter count (embeddings, layers, final norms, LM head).
    pub fn param_count(&self) -> usize {
        let h = self.hidden;
        let f = self.ffn_dim();
        let ln = 2 * h;
        let attn = (3 * h * h + 3 * h) + (h * h + h); // qkv + output projection
        let cross = (h * h + h) + (2 * h * h + 2 * h) + (h * h + h); // q, kv, out
        let mlp = (f * h + f) + (h * f + h);
        let enc_layer = attn + mlp + 2 * ln;
        let dec_layer = match self.arch {
            Arch::EncoderDecoder => attn + cross + mlp + 3 * ln,
            _ => attn + mlp + 2 * ln,
        };
        let mut total = self.vocab_size * h + self.max_seq * h; // embeddings
        total += self.num_encoder_layers * enc_layer;
        total += self.num_decoder_layers * dec_layer;
        if self.ln_placement == LnPlacement::Pre {
            total += ln; // final norm on the logits stack
            if self.arch == Arch::EncoderDecoder {
                total += ln; // final norm on the encoder memory
            }
        }
        total += self.vocab_size * h + self.vocab_size; // LM head
        total
    }
}

/// The four quantizable linear parts of a transformer block. Cross-attention
/// projections count with their self-attention analogue (q/kv with
/// `qkv_proj`, output with `attn_out`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Part {
    QkvProj,
    AttnOut,
    MlpIntermediate,
    MlpOut,
}

impl Part {
    pub const ALL: [Part; 4] = [Part::QkvProj, Part::AttnOut, Part::MlpIntermediate, Part::MlpOut];

    pub fn name(&self) -> &'static str {
        match self {
            Part::QkvProj => "qkv_proj",
            Part::AttnOut => "attn_out",
            Part::MlpIntermediate => "mlp_intermediate",
            Part::MlpOut => "mlp_out",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "qkv_proj" => Ok(Part::QkvProj),
            "attn_out" => Ok(Part::AttnOut),
            "mlp_intermediate" => Ok(Part::MlpIntermediate),
            "mlp_out" => Ok(Part::MlpOut),
            other => Err(Error::InvalidConfig(format!("unknown part '{other}'"))),
        }
    }
}

/// Part a weight parameter belongs to, from its name; `None` for embeddings,
/// layer norms, biases, and the LM head (never quantized).
pub fn part_of_param(name: &str) -> Option<Part> {
    if !name.ends_with(".w") {
        return None;
    }
    if name.contains(".qkv.") || name.contains(".cross_q.") || name.contains(".cross_kv.") {
        Some(Part::QkvProj)
    } else if name.contains(".attn_out.") || name.contains(".cross_out.") {
        Some(Part::AttnOut)
    } else if name.contains(".mlp_int.") {
        Some(Part::MlpIntermediate)
    } else if name.contains(".mlp_out.") {
        Some(Part::MlpOut)
    } else {
        None
    }
}

/// Which parts run quantized and with what schemes. A disabled part runs in
/// full float with no quantize/dequantize inserted anywhere.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantStrategy {
    pub qkv_proj: bool,
    pub attn_out: bool,
    pub mlp_intermediate: bool,
    pub mlp_out: bool,
    pub weight_scheme: QuantScheme,
    pub activation_scheme: QuantScheme,
}

impl QuantStrategy {
    /// Everything in float.
    pub fn all_disabled() -> Self {
        QuantStrategy {
            qkv_proj: false,
            attn_out: false,
            mlp_intermediate: false,
            mlp_out: false,
            weight_scheme: QuantScheme::passthrough(),
            activation_scheme: QuantScheme::passthrough(),
        }
    }

    /// All four parts enabled under the given schemes.
    pub fn all_enabled(weight_scheme: QuantScheme, activation_scheme: QuantScheme) -> Self {
        QuantStrategy {
            qkv_proj: true,
            attn_out: true,
            mlp_intermediate: true,
            mlp_out: true,
            weight_scheme,
            activation_scheme,
        }
    }

    /// Strategy from a 4-bit part mask (bit 0 = qkv_proj, 1 = attn_out,
    /// 2 = mlp_intermediate, 3 = mlp_out) — the tuner's combination index.
    pub fn from_mask(mask: u8, weight_scheme: QuantScheme, activation_scheme: QuantScheme) -> Self {
        QuantStrategy {
            qkv_proj: mask & 1 != 0,
            attn_out: mask & 2 != 0,
            mlp_intermediate: mask & 4 != 0,
            mlp_out: mask & 8 != 0,
            weight_scheme,
            activation_scheme,
        }
    }

    pub fn part_mask(&self) -> u8 {
        (self.qkv_proj as u8)
            | (self.attn_out as u8) << 1
            | (self.mlp_intermediate as u8) << 2
            | (self.mlp_out as u8) << 3
    }

    pub fn enabled(&self, part: Part) -> bool {
        match part {
            Part::QkvProj => self.qkv_proj,
            Part::AttnOut => self.attn_out,
            Part::MlpIntermediate => self.mlp_intermediate,
            Part::MlpOut => self.mlp_out,
        }
    }

    pub fn any_enabled(&self) -> bool {
        self.part_mask() != 0
    }

    /// Checks the schemes make sense for this model: weights cannot be
    /// per-token; activations cannot be per-group; weight groups must divide
    /// `hidden` so every part's `[N, K]` matrix splits into whole rows.
    pub fn validate_for(&self, config: &ModelConfig) -> Result<()> {
        self.weight_scheme.validate()?;
        self.activation_scheme.validate()?;
        if !self.weight_scheme.is_passthrough() {
            if matches!(self.weight_scheme.granularity, Granularity::PerToken) {
                return Err(Error::SchemeMisuse(
                    "weight scheme cannot use per_token granularity".into(),
                ));
            }
            if let Granularity::PerGroup(g) = self.weight_scheme.granularity {
                if g == 0 || config.hidden % g != 0 {
                    return Err(Error::InvalidConfig(format!(
                        "weight groups ({g}) must divide hidden ({})",
                        config.hidden
                    )));
                }
            }
        }
        if !self.activation_scheme.is_passthrough() {
            if matches!(self.activation_scheme.granularity, Granularity::PerGroup(_)) {
                return Err(Error::SchemeMisuse(
                    "activation scheme must be per_token or per_tensor".into(),
                ));
            }
        }
        Ok(())
    }
}

impl Default for QuantStrategy {
    fn default() -> Self {
        QuantStrategy::all_disabled()
    }
}
