//! Bit-exact serialization of decomposed layers.
//!
//! A coefficient matrix is stored as a 1-bit sparsity bitmap (row-major,
//! MSB-first per byte) plus a canonical Huffman stream over the non-zero
//! `(sign, exponent)` symbols; the basis travels as 8-bit fixed point with
//! one f32 scale. The per-layer wire layout, in order:
//!
//! ```text
//! m, r, n          three little-endian u32
//! p_min, p_max     two signed bytes
//! bitmap           ceil(m*r / 8) bytes
//! codebook         1 count byte, then (symbol id, code length) byte pairs
//! payload          little-endian u32 bit length, then ceil(bits / 8) bytes
//! basis            r*n signed bytes, then the f32 scale (little-endian)
//! ```
//!
//! Symbol ids pack the sign into bit 4 and the exponent offset from `p_min`
//! into the low 4 bits. Huffman ties merge the lowest-frequency nodes first,
//! breaking by smallest contained symbol id, and codes are canonical
//! (assigned in `(length, symbol id)` order), so equal inputs always encode
//! to equal bytes.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::decompose::{SdForm, SdLayerGroup, SdModel, SdModelLayer};
use crate::mat::Mat;
use crate::quant::{
    dequantize_basis, quantize_basis, ExponentSet, FixedPointMatrix, Pow2Matrix, Pow2Value,
};
use crate::reshape::Provenance;
use crate::tensor_io::{read_envelope, write_envelope, IoError, TensorKind, WeightTensor};

pub const SDM1_MAGIC: &[u8; 4] = b"SDM1";
pub const MODEL_VERSION: u32 = 1;

/// Fixed per-layer header: dims (12) + exponent range (2) + payload bit
/// length prefix (4), in bits.
pub const LAYER_HEADER_BITS: u64 = 8 * (12 + 2 + 4);

// ---------------------------------------------------------------------------
// Symbols
// ---------------------------------------------------------------------------

/// Pack a non-zero value into its symbol id: `(sign_bit << 4) | (exp - p_min)`.
fn symbol_id(sign: i8, exp: i32, p: ExponentSet) -> Result<u8, CodecError> {
    if !p.contains(exp) {
        return Err(CodecError::Infeasible(format!(
            "exponent {exp} outside [{}, {}]",
            p.p_min, p.p_max
        )));
    }
    let offset = (exp - p.p_min) as u8;
    Ok(if sign < 0 { 0x10 | offset } else { offset })
}

/// Unpack a symbol id; the exponent is taken relative to `p_min` and may
/// exceed `p_max` for tampered inputs (caught by feasibility checks).
fn symbol_value(id: u8, p: ExponentSet) -> Result<Pow2Value, CodecError> {
    if id & 0xE0 != 0 {
        return Err(CodecError::Corrupt(format!("symbol id {id:#x} has reserved bits set")));
    }
    let sign = if id & 0x10 != 0 { -1 } else { 1 };
    Ok(Pow2Value::non_zero(sign, p.p_min + i32::from(id & 0x0F)))
}

// ---------------------------------------------------------------------------
// Bit stream helpers
// ---------------------------------------------------------------------------

struct BitWriter {
    bytes: Vec<u8>,
    bit_len: usize,
}

impl BitWriter {
    fn new() -> Self {
        BitWriter { bytes: Vec::new(), bit_len: 0 }
    }

    /// Append the low `len` bits of `code`, most significant first.
    fn push(&mut self, code: u32, len: u8) {
        for i in (0..len).rev() {
            let bit = (code >> i) & 1;
            if self.bit_len % 8 == 0 {
                self.bytes.push(0);
            }
            if bit == 1 {
                let byte = self.bit_len / 8;
                self.bytes[byte] |= 1 << (7 - self.bit_len % 8);
            }
            self.bit_len += 1;
        }
    }
}

struct BitReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    limit: usize,
}

impl<'a> BitReader<'a> {
    fn new(bytes: &'a [u8], bit_limit: usize) -> Self {
        BitReader { bytes, pos: 0, limit: bit_limit }
    }

    fn read_bit(&mut self) -> Option<u8> {
        if self.pos >= self.limit {
            return None;
        }
        let bit = (self.bytes[self.pos / 8] >> (7 - self.pos % 8)) & 1;
        self.pos += 1;
        Some(bit)
    }
}

// ---------------------------------------------------------------------------
// Huffman
// ---------------------------------------------------------------------------

/// Code lengths for the given symbol frequencies, deterministic: the two
/// lowest-frequency nodes merge first, ties by smallest contained symbol id.
/// A single-symbol alphabet gets code length 1.
fn huffman_code_lengths(freqs: &BTreeMap<u8, u64>) -> Vec<(u8, u8)> {
    if freqs.is_empty() {
        return Vec::new();
    }
    if freqs.len() == 1 {
        let (&id, _) = freqs.iter().next().unwrap();
        return vec![(id, 1)];
    }
    struct Node {
        freq: u64,
        min_id: u8,
        depths: Vec<(u8, u8)>,
    }
    let mut nodes: Vec<Node> = freqs
        .iter()
        .map(|(&id, &freq)| Node { freq, min_id: id, depths: vec![(id, 0)] })
        .collect();
    while nodes.len() > 1 {
        // Select the two smallest by (freq, min_id); the alphabet is tiny.
        let mut a = 0;
        for i in 1..nodes.len() {
            if (nodes[i].freq, nodes[i].min_id) < (nodes[a].freq, nodes[a].min_id) {
                a = i;
            }
        }
        let low = nodes.swap_remove(a);
        let mut b = 0;
        for i in 1..nodes.len() {
            if (nodes[i].freq, nodes[i].min_id) < (nodes[b].freq, nodes[b].min_id) {
                b = i;
            }
        }
        let high = nodes.swap_remove(b);
        let mut depths = Vec::with_capacity(low.depths.len() + high.depths.len());
        for (id, d) in low.depths.into_iter().chain(high.depths) {
            depths.push((id, d + 1));
        }
        nodes.push(Node {
            freq: low.freq + high.freq,
            min_id: low.min_id.min(high.min_id),
            depths,
        });
    }
    let mut lengths = nodes.pop().unwrap().depths;
    lengths.sort_by_key(|&(id, _)| id);
    lengths
}

/// Canonical code assignment: symbols ordered by `(length, id)`, first code
/// zero, each next code `(prev + 1) << (len - prev_len)`.
fn canonical_codes(codebook: &[(u8, u8)]) -> Result<Vec<(u8, u8, u32)>, CodecError> {
    let mut sorted: Vec<(u8, u8)> = codebook.to_vec();
    sorted.sort_by_key(|&(id, len)| (len, id));
    let mut out = Vec::with_capacity(sorted.len());
    let mut code: u32 = 0;
    let mut prev_len: u8 = 0;
    for &(id, len) in &sorted {
        if len == 0 || len > 32 {
            return Err(CodecError::Corrupt(format!("invalid code length {len}")));
        }
        if prev_len != 0 {
            code = (code + 1) << (len - prev_len);
        }
        if len < 32 && code >= (1u32 << len) {
            return Err(CodecError::Corrupt("codebook lengths violate the Kraft bound".into()));
        }
        out.push((id, len, code));
        prev_len = len;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Coefficient codec
// ---------------------------------------------------------------------------

/// Encoded coefficient stream plus accounting numbers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoeffEncoding {
    pub bitmap: Vec<u8>,
    /// `(symbol id, code length)`, sorted by symbol id.
    pub codebook: Vec<(u8, u8)>,
    pub payload: Vec<u8>,
    pub payload_bits: u32,
    /// Raw Huffman bits before byte padding (== payload_bits).
    pub code_bits: u64,
    pub nonzeros: u64,
}

/// Encode a feasible coefficient matrix into bitmap + canonical Huffman
/// payload.
pub fn encode_coeff(c: &Pow2Matrix, p: ExponentSet) -> Result<CoeffEncoding, CodecError> {
    let (m, r) = (c.rows(), c.cols());
    let mut bitmap = vec![0u8; (m * r).div_ceil(8)];
    let mut freqs: BTreeMap<u8, u64> = BTreeMap::new();
    let mut symbols = Vec::new();
    for i in 0..m {
        for j in 0..r {
            let idx = i * r + j;
            match c.get(i, j) {
                Pow2Value::Zero => {}
                Pow2Value::NonZero { sign, exp } => {
                    bitmap[idx / 8] |= 1 << (7 - idx % 8);
                    let id = symbol_id(sign, exp, p)?;
                    *freqs.entry(id).or_insert(0) += 1;
                    symbols.push(id);
                }
            }
        }
    }
    let codebook = huffman_code_lengths(&freqs);
    let canonical = canonical_codes(&codebook)?;
    let by_id: BTreeMap<u8, (u8, u32)> =
        canonical.iter().map(|&(id, len, code)| (id, (len, code))).collect();
    let mut writer = BitWriter::new();
    for id in &symbols {
        let (len, code) = by_id[id];
        writer.push(code, len);
    }
    Ok(CoeffEncoding {
        bitmap,
        codebook,
        payload_bits: writer.bit_len as u32,
        code_bits: writer.bit_len as u64,
        nonzeros: symbols.len() as u64,
        payload: writer.bytes,
    })
}

/// Exact inverse of [`encode_coeff`]. The declared payload bit length must
/// be consumed exactly and pad bits must be zero.
pub fn decode_coeff(
    bitmap: &[u8],
    codebook: &[(u8, u8)],
    payload: &[u8],
    payload_bits: u32,
    dims: (usize, usize),
    p: ExponentSet,
) -> Result<Pow2Matrix, CodecError> {
    let (m, r) = dims;
    let cells = m * r;
    if bitmap.len() != cells.div_ceil(8) {
        return Err(CodecError::Corrupt(format!(
            "bitmap is {} bytes, expected {}",
            bitmap.len(),
            cells.div_ceil(8)
        )));
    }
    // Pad bits beyond the valid region must be zero.
    for idx in cells..bitmap.len() * 8 {
        if (bitmap[idx / 8] >> (7 - idx % 8)) & 1 != 0 {
            return Err(CodecError::Corrupt("non-zero bitmap padding".into()));
        }
    }
    if payload.len() != (payload_bits as usize).div_ceil(8) {
        return Err(CodecError::Corrupt(format!(
            "payload is {} bytes for a declared {} bits",
            payload.len(),
            payload_bits
        )));
    }
    for idx in payload_bits as usize..payload.len() * 8 {
        if (payload[idx / 8] >> (7 - idx % 8)) & 1 != 0 {
            return Err(CodecError::Corrupt("non-zero payload padding".into()));
        }
    }
    let mut ids = std::collections::HashSet::new();
    for &(id, _) in codebook {
        if !ids.insert(id) {
            return Err(CodecError::Corrupt(format!("duplicate codebook symbol {id:#x}")));
        }
    }
    let canonical = canonical_codes(codebook)?;
    let by_code: BTreeMap<(u8, u32), u8> =
        canonical.iter().map(|&(id, len, code)| ((len, code), id)).collect();
    let max_len = canonical.iter().map(|&(_, len, _)| len).max().unwrap_or(0);

    let mut reader = BitReader::new(payload, payload_bits as usize);
    let mut out = Pow2Matrix::zeros(m, r);
    for idx in 0..cells {
        if (bitmap[idx / 8] >> (7 - idx % 8)) & 1 == 0 {
            continue;
        }
        let mut acc: u32 = 0;
        let mut len: u8 = 0;
        let id = loop {
            let bit = reader
                .read_bit()
                .ok_or_else(|| CodecError::Corrupt("payload exhausted early".into()))?;
            acc = (acc << 1) | u32::from(bit);
            len += 1;
            if let Some(&id) = by_code.get(&(len, acc)) {
                break id;
            }
            if len >= max_len {
                return Err(CodecError::Corrupt("unmatched Huffman prefix".into()));
            }
        };
        out.set(idx / r, idx % r, symbol_value(id, p)?);
    }
    if reader.pos != payload_bits as usize {
        return Err(CodecError::Corrupt(format!(
            "{} trailing payload bits",
            payload_bits as usize - reader.pos
        )));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Layer codec
// ---------------------------------------------------------------------------

/// Bit-exact serialized form of one decomposed block.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedLayer {
    pub m: u32,
    pub r: u32,
    pub n: u32,
    pub p_min: i8,
    pub p_max: i8,
    pub bitmap: Vec<u8>,
    pub codebook: Vec<(u8, u8)>,
    pub payload_bits: u32,
    pub payload: Vec<u8>,
    pub basis_q: Vec<i8>,
    pub basis_delta: f32,
    /// Non-zero coefficient count, carried for size accounting.
    pub nonzeros: u64,
}

/// Encode one form: coefficient codec plus fixed-point basis. Reuses an
/// existing fixed-point basis when the form carries one (decode -> encode
/// round trips are then byte-identical).
pub fn encode_layer(form: &SdForm) -> Result<EncodedLayer, CodecError> {
    let enc = encode_coeff(&form.c_e, form.pset)?;
    let fixed = match &form.basis_fixed {
        Some(f) => f.clone(),
        None => quantize_basis(&form.basis),
    };
    if fixed.rows() != form.c_e.cols() || fixed.cols() != form.basis.cols() {
        return Err(CodecError::Validation(format!(
            "basis is {}x{}, expected {}x{}",
            fixed.rows(),
            fixed.cols(),
            form.c_e.cols(),
            form.basis.cols()
        )));
    }
    let (p_min, p_max) = (form.pset.p_min, form.pset.p_max);
    Ok(EncodedLayer {
        m: form.c_e.rows() as u32,
        r: form.c_e.cols() as u32,
        n: fixed.cols() as u32,
        p_min: p_min as i8,
        p_max: p_max as i8,
        bitmap: enc.bitmap,
        codebook: enc.codebook,
        payload_bits: enc.payload_bits,
        payload: enc.payload,
        basis_q: fixed.q().to_vec(),
        basis_delta: fixed.delta(),
        nonzeros: enc.nonzeros,
    })
}

/// Decode one block back to a form. Coefficients are bit-identical; the
/// basis is the dequantized fixed point (lossy by at most delta/2 per
/// element). The fixed-point basis is retained so re-encoding reproduces
/// the exact bytes.
pub fn decode_layer_with_provenance(
    enc: &EncodedLayer,
    provenance: Provenance,
) -> Result<SdForm, CodecError> {
    let pset = ExponentSet::new(i32::from(enc.p_min), i32::from(enc.p_max))
        .map_err(|e| CodecError::Corrupt(e.to_string()))?;
    let c_e = decode_coeff(
        &enc.bitmap,
        &enc.codebook,
        &enc.payload,
        enc.payload_bits,
        (enc.m as usize, enc.r as usize),
        pset,
    )?;
    if enc.basis_q.len() != (enc.r * enc.n) as usize {
        return Err(CodecError::Corrupt("basis byte count does not match dims".into()));
    }
    if enc.basis_delta <= 0.0 || !enc.basis_delta.is_finite() {
        return Err(CodecError::Corrupt(format!("invalid basis scale {}", enc.basis_delta)));
    }
    let fixed = FixedPointMatrix::new(
        enc.r as usize,
        enc.n as usize,
        enc.basis_q.clone(),
        enc.basis_delta,
    );
    let basis = dequantize_basis(&fixed);
    Ok(SdForm {
        c_e,
        basis,
        basis_fixed: Some(fixed),
        scales_folded: true,
        recon_error: None,
        iterations_used: 0,
        pset,
        provenance,
    })
}

/// [`decode_layer_with_provenance`] for standalone blocks with no source
/// tensor context.
pub fn decode_layer(enc: &EncodedLayer) -> Result<SdForm, CodecError> {
    let (m, n) = (enc.m as usize, enc.n as usize);
    decode_layer_with_provenance(
        enc,
        Provenance {
            tensor: String::new(),
            kind: TensorKind::Dense2d,
            shape: vec![1, m * n],
            filter: 0,
            block: 0,
            row_offset: 0,
            total_rows: m,
            pad: 0,
        },
    )
}

impl EncodedLayer {
    /// Serialize to the wire layout documented at module level.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.byte_len());
        out.extend_from_slice(&self.m.to_le_bytes());
        out.extend_from_slice(&self.r.to_le_bytes());
        out.extend_from_slice(&self.n.to_le_bytes());
        out.push(self.p_min as u8);
        out.push(self.p_max as u8);
        out.extend_from_slice(&self.bitmap);
        out.push(self.codebook.len() as u8);
        for &(id, len) in &self.codebook {
            out.push(id);
            out.push(len);
        }
        out.extend_from_slice(&self.payload_bits.to_le_bytes());
        out.extend_from_slice(&self.payload);
        for &q in &self.basis_q {
            out.push(q as u8);
        }
        out.extend_from_slice(&self.basis_delta.to_le_bytes());
        out
    }

    pub fn byte_len(&self) -> usize {
        18 + self.bitmap.len()
            + 1
            + 2 * self.codebook.len()
            + self.payload.len()
            + self.basis_q.len()
            + 4
    }

    /// Parse one layer from an exact-length byte slice.
    pub fn from_bytes(bytes: &[u8]) -> Result<EncodedLayer, CodecError> {
        fn need(have: usize, want: usize) -> Result<(), CodecError> {
            if have < want {
                Err(CodecError::Corrupt("layer payload truncated".into()))
            } else {
                Ok(())
            }
        }
        need(bytes.len(), 18)?;
        let m = u32::from_le_bytes(bytes[0..4].try_into().unwrap());
        let r = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        let p_min = bytes[12] as i8;
        let p_max = bytes[13] as i8;
        let mut pos = 14;
        let bitmap_len = ((m as usize) * (r as usize)).div_ceil(8);
        need(bytes.len(), pos + bitmap_len + 1)?;
        let bitmap = bytes[pos..pos + bitmap_len].to_vec();
        pos += bitmap_len;
        let count = bytes[pos] as usize;
        pos += 1;
        need(bytes.len(), pos + 2 * count + 4)?;
        let mut codebook = Vec::with_capacity(count);
        for _ in 0..count {
            codebook.push((bytes[pos], bytes[pos + 1]));
            pos += 2;
        }
        let payload_bits = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap());
        pos += 4;
        let payload_len = (payload_bits as usize).div_ceil(8);
        let basis_len = (r as usize) * (n as usize);
        need(bytes.len(), pos + payload_len + basis_len + 4)?;
        let payload = bytes[pos..pos + payload_len].to_vec();
        pos += payload_len;
        let basis_q: Vec<i8> = bytes[pos..pos + basis_len].iter().map(|&b| b as i8).collect();
        pos += basis_len;
        let basis_delta = f32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap());
        pos += 4;
        if pos != bytes.len() {
            return Err(CodecError::Corrupt(format!(
                "{} trailing bytes after layer",
                bytes.len() - pos
            )));
        }
        let nonzeros = bitmap.iter().map(|b| u64::from(b.count_ones())).sum();
        Ok(EncodedLayer {
            m,
            r,
            n,
            p_min,
            p_max,
            bitmap,
            codebook,
            payload_bits,
            payload,
            basis_q,
            basis_delta,
            nonzeros,
        })
    }
}

// ---------------------------------------------------------------------------
// Size accounting
// ---------------------------------------------------------------------------

/// Bit counts by storage category plus derived rates. Categories sum to the
/// exact serialized size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SizeReport {
    pub original_bits: u64,
    pub bitmap_bits: u64,
    pub payload_bits: u64,
    pub codebook_bits: u64,
    pub basis_bits: u64,
    pub header_bits: u64,
    pub nonzeros: u64,
    /// Raw Huffman code bits before byte padding.
    pub code_bits: u64,
    pub compression_rate: f64,
    /// Average Huffman code length: `code_bits / nonzeros`.
    pub avg_bits_per_nonzero: f64,
}

impl SizeReport {
    pub fn encoded_bits(&self) -> u64 {
        self.bitmap_bits
            + self.payload_bits
            + self.codebook_bits
            + self.basis_bits
            + self.header_bits
    }

    fn finish(mut self) -> Self {
        self.compression_rate = self.original_bits as f64 / self.encoded_bits() as f64;
        self.avg_bits_per_nonzero =
            if self.nonzeros == 0 { 0.0 } else { self.code_bits as f64 / self.nonzeros as f64 };
        self
    }

    fn accumulate(&mut self, other: &SizeReport) {
        self.original_bits += other.original_bits;
        self.bitmap_bits += other.bitmap_bits;
        self.payload_bits += other.payload_bits;
        self.codebook_bits += other.codebook_bits;
        self.basis_bits += other.basis_bits;
        self.header_bits += other.header_bits;
        self.nonzeros += other.nonzeros;
        self.code_bits += other.code_bits;
    }
}

const EMPTY_REPORT: SizeReport = SizeReport {
    original_bits: 0,
    bitmap_bits: 0,
    payload_bits: 0,
    codebook_bits: 0,
    basis_bits: 0,
    header_bits: 0,
    nonzeros: 0,
    code_bits: 0,
    compression_rate: 0.0,
    avg_bits_per_nonzero: 0.0,
};

/// Size accounting for one encoded block. `payload_bits` counts the stored
/// padded bytes; the average bits per non-zero uses the raw code bits so it
/// obeys the Huffman optimality bound.
pub fn layer_size_report(enc: &EncodedLayer) -> SizeReport {
    SizeReport {
        original_bits: u64::from(enc.m) * u64::from(enc.n) * 32,
        bitmap_bits: 8 * enc.bitmap.len() as u64,
        payload_bits: 8 * enc.payload.len() as u64,
        codebook_bits: 8 * (1 + 2 * enc.codebook.len() as u64),
        basis_bits: 8 * enc.basis_q.len() as u64 + 32,
        header_bits: LAYER_HEADER_BITS,
        nonzeros: enc.nonzeros,
        code_bits: u64::from(enc.payload_bits),
        compression_rate: 0.0,
        avg_bits_per_nonzero: 0.0,
    }
    .finish()
}

/// Per-layer size reports plus totals for an encoded model.
#[derive(Debug, Clone, Serialize)]
pub struct ModelSizeReport {
    pub layers: Vec<LayerSizeEntry>,
    pub totals: SizeReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct LayerSizeEntry {
    pub name: String,
    pub mode: String,
    pub report: SizeReport,
}

/// Size accounting over a serialized model file. Totals include the
/// manifest and envelope share in `header_bits`, so the categories sum to
/// exactly `file bytes * 8`.
pub fn model_size_report(file: &SdModelFile) -> Result<ModelSizeReport, CodecError> {
    let mut layers = Vec::new();
    let mut totals = EMPTY_REPORT;
    for layer in &file.model.layers {
        match layer {
            SdModelLayer::Sd(group) => {
                let mut combined = EMPTY_REPORT;
                for form in &group.forms {
                    let enc = encode_layer(form)?;
                    combined.accumulate(&layer_size_report(&enc));
                }
                let combined = combined.finish();
                totals.accumulate(&combined);
                layers.push(LayerSizeEntry {
                    name: group.name.clone(),
                    mode: "sd".into(),
                    report: combined,
                });
            }
            SdModelLayer::Dense(t) => {
                let bits = 32 * t.element_count() as u64;
                let report =
                    SizeReport { original_bits: bits, payload_bits: bits, ..EMPTY_REPORT }
                        .finish();
                totals.accumulate(&report);
                layers.push(LayerSizeEntry {
                    name: t.name.clone(),
                    mode: "dense".into(),
                    report,
                });
            }
        }
    }
    totals.header_bits += 8 * (file.manifest_len as u64 + 8);
    Ok(ModelSizeReport { layers, totals: totals.finish() })
}

// ---------------------------------------------------------------------------
// SDM1 model files
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Sdm1Block {
    filter: usize,
    block: usize,
    row_offset: usize,
    total_rows: usize,
    pad: usize,
    m: u32,
    r: u32,
    n: u32,
    offset: u64,
    length: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Sdm1Layer {
    name: String,
    kind: TensorKind,
    shape: Vec<usize>,
    mode: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kept_channels: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    blocks: Vec<Sdm1Block>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    offset: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    length: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Sdm1Manifest {
    version: u32,
    layers: Vec<Sdm1Layer>,
}

/// A parsed model file: the model plus the manifest size (for accounting).
#[derive(Debug, Clone)]
pub struct SdModelFile {
    pub model: SdModel,
    pub manifest_len: usize,
}

/// Serialize a decomposed model to SDM1 bytes. Deterministic.
pub fn write_model(model: &SdModel) -> Result<Vec<u8>, CodecError> {
    let mut blob = Vec::new();
    let mut layers = Vec::new();
    for layer in &model.layers {
        match layer {
            SdModelLayer::Sd(group) => {
                let mut blocks = Vec::with_capacity(group.forms.len());
                for form in &group.forms {
                    let enc = encode_layer(form)?;
                    let bytes = enc.to_bytes();
                    blocks.push(Sdm1Block {
                        filter: form.provenance.filter,
                        block: form.provenance.block,
                        row_offset: form.provenance.row_offset,
                        total_rows: form.provenance.total_rows,
                        pad: form.provenance.pad,
                        m: enc.m,
                        r: enc.r,
                        n: enc.n,
                        offset: blob.len() as u64,
                        length: bytes.len() as u64,
                    });
                    blob.extend_from_slice(&bytes);
                }
                layers.push(Sdm1Layer {
                    name: group.name.clone(),
                    kind: group.kind,
                    shape: group.shape.clone(),
                    mode: "sd".into(),
                    kept_channels: group.kept_channels.clone(),
                    blocks,
                    offset: None,
                    length: None,
                });
            }
            SdModelLayer::Dense(t) => {
                let offset = blob.len() as u64;
                for v in &t.data {
                    blob.extend_from_slice(&v.to_le_bytes());
                }
                layers.push(Sdm1Layer {
                    name: t.name.clone(),
                    kind: t.kind,
                    shape: t.shape.clone(),
                    mode: "dense".into(),
                    kept_channels: None,
                    blocks: Vec::new(),
                    offset: Some(offset),
                    length: Some(blob.len() as u64 - offset),
                });
            }
        }
    }
    let manifest = serde_json::to_vec(&Sdm1Manifest { version: MODEL_VERSION, layers })
        .map_err(|e| CodecError::Validation(format!("manifest serialization failed: {e}")))?;
    Ok(write_envelope(SDM1_MAGIC, &manifest, &blob))
}

/// Parse SDM1 bytes back into a model. Coefficients decode bit-exactly; the
/// basis comes back as dequantized fixed point.
pub fn read_model(bytes: &[u8]) -> Result<SdModelFile, CodecError> {
    let (manifest_bytes, blob) = read_envelope(bytes, SDM1_MAGIC)?;
    let manifest: Sdm1Manifest = serde_json::from_slice(manifest_bytes)
        .map_err(|e| CodecError::Corrupt(format!("manifest does not parse: {e}")))?;
    if manifest.version != MODEL_VERSION {
        return Err(CodecError::Validation(format!(
            "unsupported model version {}",
            manifest.version
        )));
    }
    let slice = |offset: u64, length: u64| -> Result<&[u8], CodecError> {
        let end = offset
            .checked_add(length)
            .ok_or_else(|| CodecError::Corrupt("offset overflow".into()))?;
        if end > blob.len() as u64 {
            return Err(CodecError::Corrupt(format!(
                "payload [{offset}, {end}) extends past blob end {}",
                blob.len()
            )));
        }
        Ok(&blob[offset as usize..end as usize])
    };

    let mut layers = Vec::with_capacity(manifest.layers.len());
    for layer in &manifest.layers {
        match layer.mode.as_str() {
            "sd" => {
                // Blocks reference the post-pruning tensor shape.
                let mut shape = layer.shape.clone();
                if let Some(kept) = &layer.kept_channels {
                    shape[0] = kept.len();
                }
                let mut forms = Vec::with_capacity(layer.blocks.len());
                for b in &layer.blocks {
                    let enc = EncodedLayer::from_bytes(slice(b.offset, b.length)?)?;
                    let provenance = Provenance {
                        tensor: layer.name.clone(),
                        kind: layer.kind,
                        shape: shape.clone(),
                        filter: b.filter,
                        block: b.block,
                        row_offset: b.row_offset,
                        total_rows: b.total_rows,
                        pad: b.pad,
                    };
                    forms.push(decode_layer_with_provenance(&enc, provenance)?);
                }
                layers.push(SdModelLayer::Sd(SdLayerGroup {
                    name: layer.name.clone(),
                    kind: layer.kind,
                    shape: layer.shape.clone(),
                    kept_channels: layer.kept_channels.clone(),
                    forms,
                }));
            }
            "dense" => {
                let (offset, length) = match (layer.offset, layer.length) {
                    (Some(o), Some(l)) => (o, l),
                    _ => {
                        return Err(CodecError::Corrupt(format!(
                            "dense layer '{}' lacks offsets",
                            layer.name
                        )))
                    }
                };
                let raw = slice(offset, length)?;
                if raw.len() % 4 != 0 {
                    return Err(CodecError::Corrupt(format!(
                        "dense layer '{}' byte length not a multiple of 4",
                        layer.name
                    )));
                }
                let data: Vec<f32> = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                let tensor =
                    WeightTensor::new(layer.name.clone(), layer.kind, layer.shape.clone(), data)
                        .map_err(|e| CodecError::Validation(e.to_string()))?;
                layers.push(SdModelLayer::Dense(tensor));
            }
            other => {
                return Err(CodecError::Corrupt(format!("unknown layer mode '{other}'")));
            }
        }
    }
    Ok(SdModelFile { model: SdModel { layers }, manifest_len: manifest_bytes.len() })
}

/// Errors from encoding and decoding.
#[derive(Debug)]
pub enum CodecError {
    /// A coefficient violates the declared exponent range.
    Infeasible(String),
    /// Malformed or internally inconsistent bytes.
    Corrupt(String),
    Validation(String),
}

impl fmt::Display for CodecError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CodecError::Infeasible(m) => write!(f, "feasibility error: {m}"),
            CodecError::Corrupt(m) => write!(f, "corruption error: {m}"),
            CodecError::Validation(m) => write!(f, "validation error: {m}"),
        }
    }
}

impl std::error::Error for CodecError {}

impl From<IoError> for CodecError {
    fn from(e: IoError) -> Self {
        match e {
            IoError::Format(m) => CodecError::Validation(format!("format error: {m}")),
            IoError::Corrupt(m) => CodecError::Corrupt(m),
            IoError::Validation(m) => CodecError::Validation(m),
            IoError::Io(e) => CodecError::Corrupt(format!("i/o error: {e}")),
        }
    }
}

/// Build a feasible form from raw parts, for tests and standalone passes.
pub fn form_from_parts(
    c_e: Pow2Matrix,
    basis: Mat,
    pset: ExponentSet,
    provenance: Provenance,
) -> SdForm {
    SdForm {
        c_e,
        basis,
        basis_fixed: None,
        scales_folded: true,
        recon_error: None,
        iterations_used: 0,
        pset,
        provenance,
    }
}
