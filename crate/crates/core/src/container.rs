//! On-disk model container.
//!
//! Layout:
//!
//! ```text
//! [0..4)    magic b"Q4FG"
//! [4..6)    format version, u16 LE
//! [6..10)   metadata length in bytes, u32 LE
//! [10..)    metadata: canonical JSON (sorted keys, no insignificant
//!           whitespace), UTF-8
//! ...       zero padding to the next 64-byte boundary
//! [P..)     payload region; every blob offset below is relative to P and
//!           aligned to 64 bytes
//! ```
//!
//! Float tensors are raw little-endian `f32`. Quantized weights store their
//! integer codes (4-bit codes packed two per byte, row padded), plus scale and
//! zero-point vectors. Sparsity masks are bit-packed LSB-first. Saving a just-
//! loaded container reproduces the input byte for byte: map iteration order is
//! sorted, offsets are assigned deterministically, and float parameters that
//! have a quantized twin are never written twice.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MaskSet, Model, ModelConfig, QuantStrategy};
use crate::quant::{IntData, QTensor, QuantParams, QuantScheme};
use crate::sparsity::{CompositionOrder, MaskOrigin, MaskStructure, SparsityMask};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"Q4FG";
pub const VERSION: u16 = 1;
const ALIGN: usize = 64;
const HEADER_LEN: usize = 10;

/// Location and type of one payload blob.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QWeightEntry {
    pub scheme: QuantScheme,
    pub shape: Vec<usize>,
    pub codes: BlobEntry,
    pub scales: BlobEntry,
    pub zero_points: BlobEntry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskEntry {
    pub shape: Vec<usize>,
    pub structure: MaskStructure,
    pub origin: MaskOrigin,
    pub bits: BlobEntry,
}

/// Everything in the metadata block. Field names become JSON keys; the
/// canonical writer sorts them, so on-disk order is alphabetical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContainerMeta {
    pub config: ModelConfig,
    pub strategy: QuantStrategy,
    pub mask_order: Option<CompositionOrder>,
    pub params: BTreeMap<String, BlobEntry>,
    pub qweights: BTreeMap<String, QWeightEntry>,
    pub masks: BTreeMap<String, MaskEntry>,
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1).max(1)
}

/// Packs 4-bit codes two per byte, low nibble first, each row starting on a
/// byte boundary. Works for signed codes (two's complement nibble) and
/// unsigned alike because only the low four bits are kept.
fn pack_nibbles(codes: impl Iterator<Item = u8>, rows: usize, cols: usize) -> Vec<u8> {
    let row_bytes = cols.div_ceil(2);
    let mut out = vec![0u8; rows * row_bytes];
    for (i, c) in codes.enumerate() {
        let (r, col) = (i / cols, i % cols);
        let byte = &mut out[r * row_bytes + col / 2];
        let nib = c & 0xF;
        if col % 2 == 0 {
            *byte |= nib;
        } else {
            *byte |= nib << 4;
        }
    }
    out
}

fn unpack_nibbles(bytes: &[u8], rows: usize, cols: usize, signed: bool) -> Vec<u8> {
    let row_bytes = cols.div_ceil(2);
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for col in 0..cols {
            let b = bytes[r * row_bytes + col / 2];
            let nib = if col % 2 == 0 { b & 0xF } else { b >> 4 };
            if signed && nib >= 8 {
                out.push(nib.wrapping_sub(16));
            } else {
                out.push(nib);
            }
        }
    }
    out
}

fn pack_bits(keep: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; keep.len().div_ceil(8)];
    for (i, &k) in keep.iter().enumerate() {
        if k {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

fn unpack_bits(bytes: &[u8], numel: usize) -> Vec<bool> {
    (0..numel).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect()
}

fn f32_bytes(data: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.len() * 4);
    for x in data {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

fn f32_from_bytes(bytes: &[u8]) -> Vec<f32> {
    bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect()
}

/// Accumulates blobs, handing out aligned offsets in call order.
struct PayloadWriter {
    buf: Vec<u8>,
}

impl PayloadWriter {
    fn new() -> Self {
        PayloadWriter { buf: Vec::new() }
    }

    fn push(&mut self, dtype: &str, shape: Vec<usize>, bytes: Vec<u8>) -> BlobEntry {
        let offset = align_up(self.buf.len());
        self.buf.resize(offset, 0);
        let entry = BlobEntry {
            dtype: dtype.to_string(),
            shape,
            offset: offset as u64,
            bytes: bytes.len() as u64,
        };
        self.buf.extend_from_slice(&bytes);
        entry
    }
}

fn encode_codes(q: &QTensor, w: &mut PayloadWriter) -> BlobEntry {
    let rows_cols = |shape: &[usize]| {
        let cols = last_dim(shape);
        (q.numel() / cols, cols)
    };
    match &q.data {
        IntData::Signed(codes) if q.scheme.bits == 4 => {
            let (r, c) = rows_cols(&q.shape);
            w.push("nib4s", q.shape.clone(), pack_nibbles(codes.iter().map(|&x| x as u8), r, c))
        }
        IntData::Signed(codes) => {
            w.push("i8", q.shape.clone(), codes.iter().map(|&x| x as u8).collect())
        }
        IntData::Unsigned(codes) if q.scheme.bits == 4 => {
            let (r, c) = rows_cols(&q.shape);
            w.push("nib4u", q.shape.clone(), pack_nibbles(codes.iter().copied(), r, c))
        }
        IntData::Unsigned(codes) => w.push("u8", q.shape.clone(), codes.clone()),
        IntData::Float(data) => w.push("f32", q.shape.clone(), f32_bytes(data)),
    }
}

fn decode_codes(entry: &BlobEntry, scheme: &QuantScheme, payload: &[u8]) -> Result<IntData> {
    let numel: usize = entry.shape.iter().product();
    let bytes = blob_slice(entry, payload)?;
    let cols = last_dim(&entry.shape);
    let rows = numel / cols.max(1);
    match entry.dtype.as_str() {
        "nib4s" => Ok(IntData::Signed(
            unpack_nibbles(bytes, rows, cols, true).into_iter().map(|b| b as i8).collect(),
        )),
        "nib4u" => Ok(IntData::Unsigned(unpack_nibbles(bytes, rows, cols, false))),
        "i8" => Ok(IntData::Signed(bytes.iter().map(|&b| b as i8).collect())),
        "u8" => Ok(IntData::Unsigned(bytes.to_vec())),
        "f32" => Ok(IntData::Float(f32_from_bytes(bytes))),
        other => Err(Error::Format(format!("unknown code dtype '{other}'"))),
    }
    .and_then(|data| {
        let n = match &data {
            IntData::Signed(v) => v.len(),
            IntData::Unsigned(v) => v.len(),
            IntData::Float(v) => v.len(),
        };
        if n != numel {
            return Err(Error::Format(format!(
                "code blob holds {n} values for shape {:?}",
                entry.shape
            )));
        }
        let _ = scheme;
        Ok(data)
    })
}

fn expected_bytes(entry: &BlobEntry) -> u64 {
    let numel: usize = entry.shape.iter().product();
    let cols = last_dim(&entry.shape);
    let rows = numel / cols.max(1);
    (match entry.dtype.as_str() {
        "f32" => numel * 4,
        "i8" | "u8" => numel,
        "nib4s" | "nib4u" => rows * cols.div_ceil(2),
        "bit" => numel.div_ceil(8),
        _ => return u64::MAX,
    }) as u64
}

fn blob_slice<'a>(entry: &BlobEntry, payload: &'a [u8]) -> Result<&'a [u8]> {
    let start = entry.offset as usize;
    let end = start + entry.bytes as usize;
    if entry.offset % ALIGN as u64 != 0 {
        return Err(Error::Format(format!("blob offset {} not 64-byte aligned", entry.offset)));
    }
    if end > payload.len() {
        return Err(Error::Format(format!(
            "blob [{start}, {end}) runs past payload of {} bytes",
            payload.len()
        )));
    }
    if expected_bytes(entry) != entry.bytes {
        return Err(Error::Format(format!(
            "blob of dtype {} shape {:?} should be {} bytes, index says {}",
            entry.dtype,
            entry.shape,
            expected_bytes(entry),
            entry.bytes
        )));
    }
    Ok(&payload[start..end])
}

fn check_no_overlap(meta: &ContainerMeta, payload_len: usize) -> Result<()> {
    let mut spans: Vec<(u64, u64)> = Vec::new();
    let mut add = |e: &BlobEntry| spans.push((e.offset, e.offset + e.bytes));
    for e in meta.params.values() {
        add(e);
    }
    for q in meta.qweights.values() {
        add(&q.codes);
        add(&q.scales);
        add(&q.zero_points);
    }
    for m in meta.masks.values() {
        add(&m.bits);
    }
    spans.sort_unstable();
    for w in spans.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(Error::Format(format!(
                "payload blobs overlap: [{}, {}) and [{}, {})",
                w[0].0, w[0].1, w[1].0, w[1].1
            )));
        }
    }
    if let Some(&(_, end)) = spans.last() {
        if end > payload_len as u64 {
            return Err(Error::Format(format!(
                "payload index ends at {end} but region holds {payload_len} bytes"
            )));
        }
    }
    Ok(())
}

fn canonical_json(meta: &ContainerMeta) -> Result<String> {
    // Round-tripping through `Value` sorts object keys; `to_string` emits no
    // insignificant whitespace.
    let value = serde_json::to_value(meta)
        .map_err(|e| Error::Format(format!("metadata serialization: {e}")))?;
    Ok(value.to_string())
}

/// Serializes a model to container bytes.
pub fn encode_model(model: &Model) -> Result<Vec<u8>> {
    let mut w = PayloadWriter::new();
    let mut meta = ContainerMeta {
        config: model.config.clone(),
        strategy: model.strategy,
        mask_order: model.masks.as_ref().map(|m| m.order),
        params: BTreeMap::new(),
        qweights: BTreeMap::new(),
        masks: BTreeMap::new(),
    };
    for (name, t) in &model.params {
        if model.qweights.contains_key(name) {
            continue; // the integer form is authoritative; the float mirror is derived
        }
        let entry = w.push("f32", t.shape().to_vec(), f32_bytes(t.data()));
        meta.params.insert(name.clone(), entry);
    }
    for (name, q) in &model.qweights {
        let codes = encode_codes(q, &mut w);
        let scales = w.push("f32", vec![q.params.scales.len()], f32_bytes(&q.params.scales));
        let zero_points =
            w.push("f32", vec![q.params.zero_points.len()], f32_bytes(&q.params.zero_points));
        meta.qweights.insert(
            name.clone(),
            QWeightEntry { scheme: q.scheme, shape: q.shape.clone(), codes, scales, zero_points },
        );
    }
    if let Some(set) = &model.masks {
        for (name, mask) in &set.masks {
            let bits = w.push("bit", mask.shape.clone(), pack_bits(&mask.keep));
            meta.masks.insert(
                name.clone(),
                MaskEntry {
                    shape: mask.shape.clone(),
                    structure: mask.structure,
                    origin: mask.origin,
                    bits,
                },
            );
        }
    }

    let meta_json = canonical_json(&meta)?;
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
    out.extend_from_slice(meta_json.as_bytes());
    out.resize(align_up(out.len()), 0);
    out.extend_from_slice(&w.buf);
    Ok(out)
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, encode_model(model)?)?;
    Ok(())
}

fn split_container(bytes: &[u8]) -> Result<(ContainerMeta, &[u8])> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!("container of {} bytes has no header", bytes.len())));
    }
    if bytes[0..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}, want {:?}", &bytes[0..4], MAGIC)));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::Format(format!(
            "container version {version} not supported (reader speaks {VERSION})"
        )));
    }
    let meta_len = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
    let meta_end = HEADER_LEN + meta_len;
    if meta_end > bytes.len() {
        return Err(Error::Format(format!(
            "metadata of {meta_len} bytes overruns file of {} bytes",
            bytes.len()
        )));
    }
    let meta: ContainerMeta = serde_json::from_slice(&bytes[HEADER_LEN..meta_end])
        .map_err(|e| Error::Format(format!("metadata parse: {e}")))?;
    let payload_start = align_up(meta_end);
    if payload_start > bytes.len() {
        return Err(Error::Format("file truncated before payload".into()));
    }
    let payload = &bytes[payload_start..];
    check_no_overlap(&meta, payload.len())?;
    Ok((meta, payload))
}

/// Parses the header and metadata without materializing tensors.
pub fn inspect(path: &Path) -> Result<ContainerMeta> {
    let bytes = std::fs::read(path)?;
    Ok(split_container(&bytes)?.0)
}

pub fn decode_model(bytes: &[u8]) -> Result<Model> {
    let (meta, payload) = split_container(bytes)?;
    meta.config.validate()?;
    let mut params = BTreeMap::new();
    for (name, entry) in &meta.params {
        if entry.dtype != "f32" {
            return Err(Error::Format(format!("param '{name}' has dtype {}", entry.dtype)));
        }
        let data = f32_from_bytes(blob_slice(entry, payload)?);
        params.insert(name.clone(), Tensor::from_vec(entry.shape.clone(), data)?);
    }
    let mut qweights = BTreeMap::new();
    for (name, q) in &meta.qweights {
        if q.codes.shape != q.shape {
            return Err(Error::Format(format!(
                "qweight '{name}': code shape {:?} != tensor shape {:?}",
                q.codes.shape, q.shape
            )));
        }
        let data = decode_codes(&q.codes, &q.scheme, payload)?;
        let scales = f32_from_bytes(blob_slice(&q.scales, payload)?);
        let zero_points = f32_from_bytes(blob_slice(&q.zero_points, payload)?);
        if scales.len() != zero_points.len() {
            return Err(Error::Format(format!(
                "qweight '{name}': {} scales vs {} zero points",
                scales.len(),
                zero_points.len()
            )));
        }
        let qt = QTensor {
            shape: q.shape.clone(),
            scheme: q.scheme,
            params: QuantParams { scales, zero_points },
            data,
        };
        params.insert(name.clone(), qt.dequantize());
        qweights.insert(name.clone(), qt);
    }
    let masks = if meta.masks.is_empty() {
        None
    } else {
        let order = meta.mask_order.ok_or_else(|| {
            Error::Format("container stores masks but no composition order".into())
        })?;
        let mut set = BTreeMap::new();
        for (name, m) in &meta.masks {
            let numel: usize = m.shape.iter().product();
            let keep = unpack_bits(blob_slice(&m.bits, payload)?, numel);
            set.insert(
                name.clone(),
                SparsityMask {
                    shape: m.shape.clone(),
                    keep,
                    structure: m.structure,
                    origin: m.origin,
                },
            );
        }
        Some(MaskSet { masks: set, order })
    };
    Ok(Model { config: meta.config, params, qweights, masks, strategy: meta.strategy })
}

pub fn load_model(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path)?;
    decode_model(&bytes)
}

/// Reads a token stream: little-endian `u32`, no header.
pub fn read_tokens(path: &Path) -> Result<Vec<u32>> {
    let bytes = std::fs::read(path)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Format(format!(
            "token file length {} is not a multiple of 4",
            bytes.len()
        )));
    }
    Ok(bytes.chunks_exact(4).map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

pub fn write_tokens(path: &Path, tokens: &[u32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(tokens.len() * 4);
    for t in tokens {
        bytes.extend_from_slice(&t.to_le_bytes());
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, part_of_param, Arch, LnPlacement, Part};
    use crate::quant::{quantize, Granularity, Mapping};
    use crate::sparsity::l1_mask;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            arch: Arch::DecoderOnly,
            num_encoder_layers: 0,
            num_decoder_layers: 2,
            hidden: 16,
            heads: 2,
            ffn_mult: 4,
            ln_placement: LnPlacement::Post,
            vocab_size: 19,
            max_seq: 8,
        }
    }

    /// A model exercising every payload kind: float params, signed int4 codes,
    /// unsigned int8 codes, scales/zero-points, and a 2:4 mask.
    fn rich_model() -> Model {
        let mut model = build_model(&small_cfg(), 5).unwrap();
        let w0 = model.params["dec.0.qkv.w"].clone();
        let q0 = quantize(&w0, &QuantScheme::int4(Mapping::Symmetric, Granularity::PerGroup(48)))
            .unwrap();
        model.qweights.insert("dec.0.qkv.w".into(), q0);
        let w1 = model.params["dec.1.mlp_out.w"].clone();
        let q1 =
            quantize(&w1, &QuantScheme::int8(Mapping::Asymmetric, Granularity::PerTensor)).unwrap();
        model.qweights.insert("dec.1.mlp_out.w".into(), q1);
        let m = l1_mask(&model.params["dec.0.mlp_int.w"], 0.5, MaskStructure::PairNm { n: 2, m: 4 })
            .unwrap();
        let mut masks = BTreeMap::new();
        masks.insert("dec.0.mlp_int.w".to_string(), m);
        model.masks = Some(MaskSet { masks, order: CompositionOrder::PruneThenQuant });
        model
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let model = rich_model();
        let bytes = encode_model(&model).unwrap();
        let loaded = decode_model(&bytes).unwrap();
        let again = encode_model(&loaded).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn loaded_model_matches_source() {
        let model = rich_model();
        let bytes = encode_model(&model).unwrap();
        let loaded = decode_model(&bytes).unwrap();
        assert_eq!(loaded.config, model.config);
        assert_eq!(loaded.strategy, model.strategy);
        assert_eq!(loaded.qweights.len(), 2);
        assert_eq!(loaded.qweights["dec.0.qkv.w"], model.qweights["dec.0.qkv.w"]);
        assert_eq!(loaded.qweights["dec.1.mlp_out.w"], model.qweights["dec.1.mlp_out.w"]);
        assert_eq!(loaded.masks, model.masks);
        // Float mirrors of quantized weights come back dequantized; everything
        // else must be bit-exact.
        for (name, t) in &model.params {
            if model.qweights.contains_key(name) {
                assert_eq!(
                    loaded.params[name].data(),
                    model.qweights[name].dequantize().data(),
                    "{name}"
                );
            } else {
                assert_eq!(loaded.params[name].data(), t.data(), "{name}");
            }
        }
    }

    #[test]
    fn header_and_alignment_contract() {
        let bytes = encode_model(&rich_model()).unwrap();
        assert_eq!(&bytes[0..4], b"Q4FG");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), VERSION);
        let (meta, _) = split_container(&bytes).unwrap();
        let mut offsets: Vec<u64> = meta.params.values().map(|e| e.offset).collect();
        for q in meta.qweights.values() {
            offsets.extend([q.codes.offset, q.scales.offset, q.zero_points.offset]);
        }
        for m in meta.masks.values() {
            offsets.push(m.bits.offset);
        }
        assert!(!offsets.is_empty());
        assert!(offsets.iter().all(|o| o % 64 == 0), "offsets: {offsets:?}");
    }

    #[test]
    fn metadata_is_canonical_json() {
        let bytes = encode_model(&rich_model()).unwrap();
        let meta_len = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
        let text = std::str::from_utf8(&bytes[HEADER_LEN..HEADER_LEN + meta_len]).unwrap();
        assert!(!text.contains(": "), "no whitespace after colons");
        assert!(!text.contains(", "), "no whitespace after commas");
        // Top-level keys appear in sorted order.
        let keys = ["\"config\"", "\"mask_order\"", "\"masks\"", "\"params\"", "\"qweights\"", "\"strategy\""];
        let idx: Vec<usize> = keys.iter().map(|k| text.find(k).expect(k)).collect();
        assert!(idx.windows(2).all(|w| w[0] < w[1]), "keys sorted: {idx:?}");
        // Parsing and re-serializing reproduces the exact text.
        let meta: ContainerMeta = serde_json::from_str(text).unwrap();
        assert_eq!(canonical_json(&meta).unwrap(), text);
    }

    #[test]
    fn version_mismatch_refuses_to_load() {
        let mut bytes = encode_model(&rich_model()).unwrap();
        bytes[4] = 2;
        bytes[5] = 0;
        match decode_model(&bytes) {
            Err(Error::Format(msg)) => assert!(msg.contains("version 2"), "{msg}"),
            other => panic!("expected version refusal, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_truncation_refuse_to_load() {
        let bytes = encode_model(&rich_model()).unwrap();
        let mut wrong = bytes.clone();
        wrong[0] = b'x';
        assert!(matches!(decode_model(&wrong), Err(Error::Format(_))));
        // Chop the payload: blob bounds checks must fire.
        let truncated = &bytes[..bytes.len() - 96];
        assert!(matches!(decode_model(truncated), Err(Error::Format(_))));
    }

    #[test]
    fn int4_payload_is_half_of_int8() {
        let model = build_model(&small_cfg(), 5).unwrap();
        let w = model.params["dec.0.qkv.w"].clone();
        let q4 =
            quantize(&w, &QuantScheme::int4(Mapping::Symmetric, Granularity::PerTensor)).unwrap();
        let q8 =
            quantize(&w, &QuantScheme::int8(Mapping::Symmetric, Granularity::PerTensor)).unwrap();
        let mut writer = PayloadWriter::new();
        let e4 = encode_codes(&q4, &mut writer);
        let e8 = encode_codes(&q8, &mut writer);
        // Even column count, so no row padding: exactly half the bytes.
        assert_eq!(e4.bytes * 2, e8.bytes);
    }

    #[test]
    fn packed_nibbles_round_trip_both_signs() {
        let signed: Vec<i8> = vec![-8, -1, 0, 7, 3, -5, 2, -8, 1, -2, 6, 0, -7, 4, -3, 5, 7, -6];
        let packed = pack_nibbles(signed.iter().map(|&x| x as u8), 3, 6);
        assert_eq!(packed.len(), 9);
        let back: Vec<i8> =
            unpack_nibbles(&packed, 3, 6, true).into_iter().map(|b| b as i8).collect();
        assert_eq!(back, signed);
        // Odd column count forces row padding.
        let unsigned: Vec<u8> = vec![0, 15, 7, 8, 1, 14, 3, 12, 5, 10, 9, 2, 11, 4, 13];
        let packed = pack_nibbles(unsigned.iter().copied(), 5, 3);
        assert_eq!(packed.len(), 5 * 2);
        assert_eq!(unpack_nibbles(&packed, 5, 3, false), unsigned);
    }

    #[test]
    fn mask_bits_round_trip() {
        let keep: Vec<bool> = (0..37).map(|i| i % 3 != 1).collect();
        let packed = pack_bits(&keep);
        assert_eq!(packed.len(), 5);
        assert_eq!(unpack_bits(&packed, 37), keep);
    }

    #[test]
    fn loaded_model_runs_and_masks_apply() {
        use crate::model::{Batch, TokenBatch};
        let model = rich_model();
        let bytes = encode_model(&model).unwrap();
        let loaded = decode_model(&bytes).unwrap();
        let batch = Batch::single(TokenBatch::new(1, 8, (0..8).map(|i| i % 19).collect()).unwrap());
        let (tape, out) = loaded.run_eval(&batch, &QuantStrategy::all_disabled()).unwrap();
        assert!(tape.value(out.logits).data().iter().all(|x| x.is_finite()));
        assert_eq!(part_of_param("dec.0.qkv.w"), Some(Part::QkvProj));
    }

    #[test]
    fn token_files_round_trip_little_endian() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toks.bin");
        let toks = vec![0u32, 1, 7, 513, u32::MAX];
        write_tokens(&path, &toks).unwrap();
        let raw = std::fs::read(&path).unwrap();
        assert_eq!(raw.len(), 20);
        assert_eq!(&raw[0..4], &[0, 0, 0, 0]);
        assert_eq!(&raw[12..16], &[1, 2, 0, 0], "513 stored little-endian");
        assert_eq!(read_tokens(&path).unwrap(), toks);
        std::fs::write(&path, [1, 2, 3]).unwrap();
        assert!(matches!(read_tokens(&path), Err(Error::Format(_))));
    }
}
