//! Hidden-state and attention traces, and the `VLMT` binary container.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! "VLMT"            4 bytes magic
//! version           u16, currently 1
//! header_len        u32, byte length of the JSON header
//! header            UTF-8 JSON, see `ContainerHeader`
//! sections          dense f32 LE payloads; offsets are relative to the end
//!                   of the header
//! ```
//!
//! The `hidden` section is row-major `[layer][token][dim]`. The optional
//! `attention` section is row-major `[query][block][head][key]`, where block
//! `b` is the transformer block whose output is hidden layer `b + 1`. A trace
//! with `layer_count` hidden layers therefore carries `layer_count - 1`
//! attention blocks.

use std::fmt;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"VLMT";
pub const FORMAT_VERSION: u16 = 1;

/// Row-normalization tolerance for stored attention rows.
pub const ROW_SUM_TOLERANCE: f64 = 1e-5;

/// Token modality tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Modality {
    Text,
    Vision,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::Text, Modality::Vision];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Text => "TEXT",
            Modality::Vision => "VISION",
        }
    }

    pub fn as_char(self) -> char {
        match self {
            Modality::Text => 'T',
            Modality::Vision => 'V',
        }
    }

    pub fn from_char(c: char) -> Option<Self> {
        match c {
            'T' => Some(Modality::Text),
            'V' => Some(Modality::Vision),
            _ => None,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "TEXT" | "T" => Some(Modality::Text),
            "VISION" | "V" => Some(Modality::Vision),
            _ => None,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Per-layer, per-token hidden states of one forward pass.
///
/// Layer 0 is the embedding output; layer `l >= 1` is the output of block `l`.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenTrace {
    pub layer_count: usize,
    pub token_count: usize,
    pub dim: usize,
    /// Row-major `[layer][token][dim]`.
    pub states: Vec<f32>,
    pub modality_mask: Vec<Modality>,
    pub sample_id: String,
    pub answer_token_index: Option<usize>,
}

impl HiddenTrace {
    pub fn state(&self, layer: usize, token: usize) -> &[f32] {
        let start = (layer * self.token_count + token) * self.dim;
        &self.states[start..start + self.dim]
    }

    /// Indices of tokens tagged with `modality`, in sequence order.
    pub fn tokens_of(&self, modality: Modality) -> Vec<usize> {
        self.modality_mask.iter().enumerate().filter_map(|(i, &m)| (m == modality).then_some(i)).collect()
    }

    pub fn count_of(&self, modality: Modality) -> usize {
        self.modality_mask.iter().filter(|&&m| m == modality).count()
    }

    pub fn mask_string(&self) -> String {
        self.modality_mask.iter().map(|m| m.as_char()).collect()
    }
}

/// Post-softmax attention rows for a set of designated query tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    /// Number of transformer blocks covered (hidden layer count minus one).
    pub layer_count: usize,
    pub head_count: usize,
    pub key_count: usize,
    pub query_token_ids: Vec<usize>,
    /// Row-major `[query][block][head][key]`.
    pub rows: Vec<f32>,
    pub vision_key_mask: Vec<Modality>,
}

impl AttentionTrace {
    /// Attention row of stored query `query_slot` in `block` for `head`.
    pub fn row(&self, query_slot: usize, block: usize, head: usize) -> &[f32] {
        let start = ((query_slot * self.layer_count + block) * self.head_count + head) * self.key_count;
        &self.rows[start..start + self.key_count]
    }

    pub fn query_slot(&self, query_token: usize) -> Option<usize> {
        self.query_token_ids.iter().position(|&q| q == query_token)
    }

    fn expected_len(&self) -> usize {
        self.query_token_ids.len() * self.layer_count * self.head_count * self.key_count
    }
}

/// Which invariant a [`Diagnostic`] reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Invariant {
    ZeroExtent,
    StateLength,
    NonFiniteState,
    MaskLength,
    MissingText,
    AnswerIndexRange,
    AnswerNotText,
    AttentionZeroExtent,
    AttentionLength,
    AttentionLayerCount,
    KeyCountMismatch,
    KeyMaskLength,
    QueryTokenRange,
    NegativeAttention,
    NonFiniteAttention,
    RowNormalization,
}

impl Invariant {
    pub fn name(self) -> &'static str {
        match self {
            Invariant::ZeroExtent => "zero-extent",
            Invariant::StateLength => "state-length",
            Invariant::NonFiniteState => "non-finite-state",
            Invariant::MaskLength => "mask-length",
            Invariant::MissingText => "missing-text",
            Invariant::AnswerIndexRange => "answer-index-range",
            Invariant::AnswerNotText => "answer-not-text",
            Invariant::AttentionZeroExtent => "attention-zero-extent",
            Invariant::AttentionLength => "attention-length",
            Invariant::AttentionLayerCount => "attention-layer-count",
            Invariant::KeyCountMismatch => "key-count-mismatch",
            Invariant::KeyMaskLength => "key-mask-length",
            Invariant::QueryTokenRange => "query-token-range",
            Invariant::NegativeAttention => "negative-attention",
            Invariant::NonFiniteAttention => "non-finite-attention",
            Invariant::RowNormalization => "row-normalization",
        }
    }
}

/// One violated invariant with its location.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostic {
    pub invariant: Invariant,
    pub location: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} at {}", self.invariant.name(), self.location)
    }
}

fn diag(invariant: Invariant, location: impl Into<String>) -> Diagnostic {
    Diagnostic { invariant, location: location.into() }
}

/// Checks every trace invariant. Returns an empty list iff the inputs are valid.
///
/// Value-level checks (finiteness, row sums) report the first offending
/// location together with the total number of offenders.
pub fn validate_trace(trace: &HiddenTrace, attention: Option<&AttentionTrace>) -> Vec<Diagnostic> {
    let mut out = Vec::new();

    if trace.layer_count == 0 || trace.token_count == 0 || trace.dim == 0 {
        out.push(diag(
            Invariant::ZeroExtent,
            format!("layer_count={} token_count={} dim={}", trace.layer_count, trace.token_count, trace.dim),
        ));
    }

    let expected = trace.layer_count * trace.token_count * trace.dim;
    let states_ok = trace.states.len() == expected;
    if !states_ok {
        out.push(diag(
            Invariant::StateLength,
            format!("states has {} values, expected {}", trace.states.len(), expected),
        ));
    } else if trace.dim > 0 && trace.token_count > 0 {
        let mut bad = trace.states.iter().enumerate().filter(|(_, v)| !v.is_finite());
        if let Some((first, _)) = bad.next() {
            let count = 1 + bad.count();
            let layer = first / (trace.token_count * trace.dim);
            let token = (first / trace.dim) % trace.token_count;
            out.push(diag(
                Invariant::NonFiniteState,
                format!("layer {layer}, token {token} ({count} non-finite values)"),
            ));
        }
    }

    if trace.modality_mask.len() != trace.token_count {
        out.push(diag(
            Invariant::MaskLength,
            format!("modality_mask has {} entries, token_count is {}", trace.modality_mask.len(), trace.token_count),
        ));
    }
    if !trace.modality_mask.contains(&Modality::Text) {
        out.push(diag(Invariant::MissingText, "modality_mask"));
    }

    if let Some(answer) = trace.answer_token_index {
        if answer >= trace.token_count {
            out.push(diag(
                Invariant::AnswerIndexRange,
                format!("answer_token_index {answer} >= token_count {}", trace.token_count),
            ));
        } else if trace.modality_mask.get(answer) != Some(&Modality::Text) {
            out.push(diag(Invariant::AnswerNotText, format!("token {answer}")));
        }
    }

    if let Some(att) = attention {
        validate_attention(trace, att, &mut out);
    }
    out
}

fn validate_attention(trace: &HiddenTrace, att: &AttentionTrace, out: &mut Vec<Diagnostic>) {
    if att.layer_count == 0 || att.head_count == 0 || att.key_count == 0 {
        out.push(diag(
            Invariant::AttentionZeroExtent,
            format!("layer_count={} head_count={} key_count={}", att.layer_count, att.head_count, att.key_count),
        ));
    }
    if att.layer_count + 1 != trace.layer_count {
        out.push(diag(
            Invariant::AttentionLayerCount,
            format!("attention covers {} blocks, hidden trace has {} layers", att.layer_count, trace.layer_count),
        ));
    }
    if att.key_count != trace.token_count {
        out.push(diag(
            Invariant::KeyCountMismatch,
            format!("key_count {} != token_count {}", att.key_count, trace.token_count),
        ));
    }
    if att.vision_key_mask.len() != att.key_count {
        out.push(diag(
            Invariant::KeyMaskLength,
            format!("vision_key_mask has {} entries, key_count is {}", att.vision_key_mask.len(), att.key_count),
        ));
    }
    for (slot, &q) in att.query_token_ids.iter().enumerate() {
        if q >= trace.token_count {
            out.push(diag(
                Invariant::QueryTokenRange,
                format!("query slot {slot}: token {q} >= token_count {}", trace.token_count),
            ));
        }
    }
    if att.rows.len() != att.expected_len() {
        out.push(diag(
            Invariant::AttentionLength,
            format!("rows has {} values, expected {}", att.rows.len(), att.expected_len()),
        ));
        return;
    }
    if att.key_count == 0 {
        return;
    }

    let locate = |row_index: usize| {
        let head = row_index % att.head_count;
        let block = (row_index / att.head_count) % att.layer_count;
        let slot = row_index / (att.head_count * att.layer_count);
        format!("query slot {slot}, block {block}, head {head}")
    };

    let mut non_finite = Vec::new();
    let mut negative = Vec::new();
    let mut unnormalized = Vec::new();
    for (row_index, row) in att.rows.chunks(att.key_count).enumerate() {
        if row.iter().any(|v| !v.is_finite()) {
            non_finite.push(row_index);
            continue;
        }
        if row.iter().any(|&v| v < 0.0) {
            negative.push(row_index);
        }
        let sum: f64 = row.iter().map(|&v| f64::from(v)).sum();
        if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
            unnormalized.push((row_index, sum));
        }
    }
    if let Some(&first) = non_finite.first() {
        out.push(diag(Invariant::NonFiniteAttention, format!("{} ({} rows)", locate(first), non_finite.len())));
    }
    if let Some(&first) = negative.first() {
        out.push(diag(Invariant::NegativeAttention, format!("{} ({} rows)", locate(first), negative.len())));
    }
    if let Some(&(first, sum)) = unnormalized.first() {
        out.push(diag(
            Invariant::RowNormalization,
            format!("{}: sum {sum:.6} ({} rows)", locate(first), unnormalized.len()),
        ));
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SectionEntry {
    name: String,
    offset: u64,
    byte_len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ContainerHeader {
    layer_count: usize,
    token_count: usize,
    dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    head_count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    key_count: Option<usize>,
    sample_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    answer_token_index: Option<usize>,
    modality_mask: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    vision_key_mask: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    query_token_ids: Option<Vec<usize>>,
    sections: Vec<SectionEntry>,
}

const HIDDEN_SECTION: &str = "hidden";
const ATTENTION_SECTION: &str = "attention";

fn reject_invalid(diagnostics: &[Diagnostic]) -> String {
    diagnostics.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

/// Serializes `trace` (and optional attention) into the container format.
///
/// Output bytes are a pure function of the inputs. Returns the number of
/// bytes written.
pub fn write_trace<W: Write>(trace: &HiddenTrace, attention: Option<&AttentionTrace>, sink: &mut W) -> Result<u64> {
    let diagnostics = validate_trace(trace, attention);
    if !diagnostics.is_empty() {
        return Err(Error::FormatRejected(reject_invalid(&diagnostics)));
    }

    let hidden_len = (trace.states.len() * 4) as u64;
    let mut sections = vec![SectionEntry { name: HIDDEN_SECTION.into(), offset: 0, byte_len: hidden_len }];
    if let Some(att) = attention {
        sections.push(SectionEntry {
            name: ATTENTION_SECTION.into(),
            offset: hidden_len,
            byte_len: (att.rows.len() * 4) as u64,
        });
    }

    let header = ContainerHeader {
        layer_count: trace.layer_count,
        token_count: trace.token_count,
        dim: trace.dim,
        head_count: attention.map(|a| a.head_count),
        key_count: attention.map(|a| a.key_count),
        sample_id: trace.sample_id.clone(),
        answer_token_index: trace.answer_token_index,
        modality_mask: trace.mask_string(),
        vision_key_mask: attention.map(|a| a.vision_key_mask.iter().map(|m| m.as_char()).collect()),
        query_token_ids: attention.map(|a| a.query_token_ids.clone()),
        sections,
    };
    let header_bytes =
        serde_json::to_vec(&header).map_err(|e| Error::FormatRejected(format!("header encoding: {e}")))?;
    let header_len =
        u32::try_from(header_bytes.len()).map_err(|_| Error::FormatRejected("header exceeds 4 GiB".into()))?;

    let mut written = 0u64;
    sink.write_all(MAGIC)?;
    sink.write_all(&FORMAT_VERSION.to_le_bytes())?;
    sink.write_all(&header_len.to_le_bytes())?;
    sink.write_all(&header_bytes)?;
    written += 4 + 2 + 4 + header_bytes.len() as u64;

    let mut buf = Vec::with_capacity(hidden_len as usize);
    for v in &trace.states {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    sink.write_all(&buf)?;
    written += buf.len() as u64;

    if let Some(att) = attention {
        buf.clear();
        for v in &att.rows {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        sink.write_all(&buf)?;
        written += buf.len() as u64;
    }
    sink.flush()?;
    Ok(written)
}

fn parse_mask(s: &str, what: &str) -> Result<Vec<Modality>> {
    s.chars()
        .map(|c| Modality::from_char(c).ok_or_else(|| Error::FormatRejected(format!("{what}: unknown tag {c:?}"))))
        .collect()
}

fn decode_f32(bytes: &[u8]) -> Vec<f32> {
    bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect()
}

/// Parses a container. Structurally malformed input is rejected, never repaired.
pub fn read_trace<R: Read>(source: &mut R) -> Result<(HiddenTrace, Option<AttentionTrace>)> {
    let mut magic = [0u8; 4];
    source.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::FormatRejected(format!("bad magic {magic:?}")));
    }
    let mut version = [0u8; 2];
    source.read_exact(&mut version)?;
    let version = u16::from_le_bytes(version);
    if version != FORMAT_VERSION {
        return Err(Error::FormatRejected(format!("unsupported version {version}")));
    }
    let mut len = [0u8; 4];
    source.read_exact(&mut len)?;
    let header_len = u32::from_le_bytes(len) as usize;
    let mut header_bytes = vec![0u8; header_len];
    source.read_exact(&mut header_bytes)?;
    let header: ContainerHeader =
        serde_json::from_slice(&header_bytes).map_err(|e| Error::FormatRejected(format!("header: {e}")))?;

    let hidden_values = header
        .layer_count
        .checked_mul(header.token_count)
        .and_then(|v| v.checked_mul(header.dim))
        .ok_or_else(|| Error::FormatRejected("hidden extent overflows".into()))?;
    let attention_values = match (header.head_count, header.key_count) {
        (Some(h), Some(k)) => {
            let queries = header.query_token_ids.as_ref().map_or(0, Vec::len);
            Some(queries * header.layer_count.saturating_sub(1) * h * k)
        }
        (None, None) => None,
        _ => return Err(Error::FormatRejected("head_count and key_count must be given together".into())),
    };

    let mut hidden_section = None;
    let mut attention_section = None;
    for s in &header.sections {
        match s.name.as_str() {
            HIDDEN_SECTION if hidden_section.is_none() => hidden_section = Some(s),
            ATTENTION_SECTION if attention_section.is_none() => attention_section = Some(s),
            other => return Err(Error::FormatRejected(format!("unexpected section {other:?}"))),
        }
    }
    let hidden_section = hidden_section.ok_or_else(|| Error::FormatRejected("missing hidden section".into()))?;
    if hidden_section.byte_len != (hidden_values * 4) as u64 {
        return Err(Error::FormatRejected(format!(
            "hidden section is {} bytes, header implies {}",
            hidden_section.byte_len,
            hidden_values * 4
        )));
    }
    match (attention_section, attention_values) {
        (Some(s), Some(n)) if s.byte_len == (n * 4) as u64 => {}
        (None, None) => {}
        (Some(s), Some(n)) => {
            return Err(Error::FormatRejected(format!(
                "attention section is {} bytes, header implies {}",
                s.byte_len,
                n * 4
            )))
        }
        _ => return Err(Error::FormatRejected("attention section and attention header fields disagree".into())),
    }

    let payload_len = header.sections.iter().map(|s| s.offset.saturating_add(s.byte_len)).max().unwrap_or(0) as usize;
    let mut payload = vec![0u8; payload_len];
    source.read_exact(&mut payload)?;

    let slice = |s: &SectionEntry| -> &[u8] {
        let start = s.offset as usize;
        &payload[start..start + s.byte_len as usize]
    };

    let trace = HiddenTrace {
        layer_count: header.layer_count,
        token_count: header.token_count,
        dim: header.dim,
        states: decode_f32(slice(hidden_section)),
        modality_mask: parse_mask(&header.modality_mask, "modality_mask")?,
        sample_id: header.sample_id.clone(),
        answer_token_index: header.answer_token_index,
    };
    let attention = match attention_section {
        Some(s) => Some(AttentionTrace {
            layer_count: header.layer_count.saturating_sub(1),
            head_count: header.head_count.unwrap_or(0),
            key_count: header.key_count.unwrap_or(0),
            query_token_ids: header.query_token_ids.clone().unwrap_or_default(),
            rows: decode_f32(slice(s)),
            vision_key_mask: parse_mask(header.vision_key_mask.as_deref().unwrap_or(""), "vision_key_mask")?,
        }),
        None => None,
    };

    let diagnostics = validate_trace(&trace, attention.as_ref());
    if !diagnostics.is_empty() {
        return Err(Error::Validation(reject_invalid(&diagnostics)));
    }
    Ok((trace, attention))
}

/// Reads a container from a file path.
pub fn read_trace_file(path: &std::path::Path) -> Result<(HiddenTrace, Option<AttentionTrace>)> {
    let file = std::fs::File::open(path)?;
    let mut reader = std::io::BufReader::new(file);
    read_trace(&mut reader)
}
