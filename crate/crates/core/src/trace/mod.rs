//! Routing-trace data model.
//!
//! A trace records, for every input sequence, its token stream and the set of
//! experts each MoE layer activated on each token. Activations are stored as a
//! compact column per layer: one `u8` count per token plus a flat run of expert
//! ids held at the narrowest integer width that fits the largest id seen.
//! Lists are stored exactly as given (including unsorted or duplicated
//! entries) so that [`validate`] can report every violation with coordinates.

mod binary;
mod jsonl;
mod stats;
mod validate;

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use binary::{decode_binary, encode_binary, parse_binary, FORMAT_VERSION, MAGIC};
pub use jsonl::{dump_jsonl, load_jsonl, parse_jsonl};
pub use stats::{corpus_stats, StatsReport};
pub use validate::{validate, Violation, ViolationKind};

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("bad magic: expected \"MOET\"")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("truncated input while reading {what} at byte offset {offset}")]
    Truncated { what: &'static str, offset: usize },
    #[error("{0} trailing bytes after the last sequence")]
    TrailingBytes(usize),
    #[error("unknown stream kind byte {0}")]
    UnknownStreamKind(u8),
    #[error("unknown sequence flag bits {0:#04x}")]
    UnknownFlags(u8),
    #[error("invalid UTF-8 in {0}")]
    InvalidUtf8(&'static str),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invariant violation: {0}")]
    InvariantViolation(Violation),
    #[error("token carries {0} activations; the format allows at most 255")]
    TooManyActivations(usize),
    #[error("unrecognized trace file extension for {0} (expected .moet or .jsonl)")]
    UnknownExtension(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Which token stream of the model a layer consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StreamKind {
    #[default]
    Decoder,
    Encoder,
}

impl StreamKind {
    pub(crate) fn to_byte(self) -> u8 {
        match self {
            StreamKind::Decoder => 0,
            StreamKind::Encoder => 1,
        }
    }

    pub(crate) fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(StreamKind::Decoder),
            1 => Some(StreamKind::Encoder),
            _ => None,
        }
    }
}

/// Configuration of one MoE layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub experts: u32,
    /// Activations per token of the original router; 0 means variable.
    pub top_k: u16,
    pub stream_kind: StreamKind,
}

impl LayerSpec {
    pub fn new(experts: u32, top_k: u16) -> Self {
        Self {
            experts,
            top_k,
            stream_kind: StreamKind::Decoder,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceHeader {
    pub format_version: u16,
    pub model_id: String,
    pub layers: Vec<LayerSpec>,
    /// 0 when unknown.
    pub vocab_size: u32,
}

impl TraceHeader {
    pub fn new(model_id: impl Into<String>, layers: Vec<LayerSpec>, vocab_size: u32) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            model_id: model_id.into(),
            layers,
            vocab_size,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn experts(&self, layer: usize) -> usize {
        self.layers[layer].experts as usize
    }

    pub fn total_experts(&self) -> usize {
        self.layers.iter().map(|l| l.experts as usize).sum()
    }

    /// All experts of the model ordered by (layer, index).
    pub fn expert_keys(&self) -> impl Iterator<Item = ExpertKey> + '_ {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(l, spec)| (0..spec.experts).map(move |i| ExpertKey::new(l as u32, i)))
    }

    /// All experts of one layer.
    pub fn layer_keys(&self, layer: usize) -> impl Iterator<Item = ExpertKey> {
        let experts = self.layers[layer].experts;
        (0..experts).map(move |i| ExpertKey::new(layer as u32, i))
    }

    pub fn contains(&self, key: ExpertKey) -> bool {
        self.layers
            .get(key.layer as usize)
            .is_some_and(|spec| key.index < spec.experts)
    }
}

/// Identifies one expert: its layer and its index within the layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ExpertKey {
    pub layer: u32,
    pub index: u32,
}

impl ExpertKey {
    pub const fn new(layer: u32, index: u32) -> Self {
        Self { layer, index }
    }
}

impl fmt::Display for ExpertKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}E{}", self.layer, self.index)
    }
}

/// The three token streams a sequence may carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenStream {
    Input,
    Predicted,
    GroundTruth,
}

impl TokenStream {
    pub const ALL: [TokenStream; 3] = [TokenStream::Input, TokenStream::Predicted, TokenStream::GroundTruth];

    pub fn name(self) -> &'static str {
        match self {
            TokenStream::Input => "input",
            TokenStream::Predicted => "predicted",
            TokenStream::GroundTruth => "ground_truth",
        }
    }
}

impl fmt::Display for TokenStream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub const UNKNOWN_DOMAIN: &str = "unknown";

/// One input sample with its routing decisions.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub domain: String,
    pub token_ids: Vec<u32>,
    pub predicted_ids: Option<Vec<u32>>,
    pub ground_truth_ids: Option<Vec<u32>>,
    /// One routing column per layer.
    pub layers: Vec<LayerRouting>,
}

impl Sequence {
    pub fn new(domain: impl Into<String>, token_ids: Vec<u32>, layers: Vec<LayerRouting>) -> Self {
        Self {
            domain: domain.into(),
            token_ids,
            predicted_ids: None,
            ground_truth_ids: None,
            layers,
        }
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn stream(&self, kind: TokenStream) -> Option<&[u32]> {
        match kind {
            TokenStream::Input => Some(&self.token_ids),
            TokenStream::Predicted => self.predicted_ids.as_deref(),
            TokenStream::GroundTruth => self.ground_truth_ids.as_deref(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutingTrace {
    pub header: TraceHeader,
    pub sequences: Vec<Sequence>,
}

impl RoutingTrace {
    pub fn new(header: TraceHeader) -> Self {
        Self {
            header,
            sequences: Vec::new(),
        }
    }

    pub fn total_tokens(&self) -> u64 {
        self.sequences.iter().map(|s| s.len() as u64).sum()
    }

    /// Loads a `.moet` or `.jsonl` file, chosen by extension.
    pub fn read_file(path: impl AsRef<Path>) -> Result<Self, TraceError> {
        let path = path.as_ref();
        match extension(path).as_deref() {
            Some("moet") => decode_binary(&std::fs::read(path)?),
            Some("jsonl") => load_jsonl(&std::fs::read_to_string(path)?),
            _ => Err(TraceError::UnknownExtension(path.display().to_string())),
        }
    }

    /// Like [`RoutingTrace::read_file`] but skips the invariant check, so
    /// that [`validate`] can report every violation.
    pub fn read_file_unchecked(path: impl AsRef<Path>) -> Result<Self, TraceError> {
        let path = path.as_ref();
        match extension(path).as_deref() {
            Some("moet") => parse_binary(&std::fs::read(path)?),
            Some("jsonl") => parse_jsonl(&std::fs::read_to_string(path)?),
            _ => Err(TraceError::UnknownExtension(path.display().to_string())),
        }
    }

    /// Writes a `.moet` or `.jsonl` file, chosen by extension.
    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<(), TraceError> {
        let path = path.as_ref();
        match extension(path).as_deref() {
            Some("moet") => std::fs::write(path, encode_binary(self))?,
            Some("jsonl") => std::fs::write(path, dump_jsonl(self))?,
            _ => return Err(TraceError::UnknownExtension(path.display().to_string())),
        }
        Ok(())
    }
}

fn extension(path: &Path) -> Option<String> {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
}

#[derive(Debug, Clone)]
enum ExpertIds {
    U8(Vec<u8>),
    U16(Vec<u16>),
    U32(Vec<u32>),
}

impl ExpertIds {
    fn len(&self) -> usize {
        match self {
            ExpertIds::U8(v) => v.len(),
            ExpertIds::U16(v) => v.len(),
            ExpertIds::U32(v) => v.len(),
        }
    }

    fn push(&mut self, id: u32) {
        self.widen_for(id);
        match self {
            ExpertIds::U8(v) => v.push(id as u8),
            ExpertIds::U16(v) => v.push(id as u16),
            ExpertIds::U32(v) => v.push(id),
        }
    }

    fn widen_for(&mut self, id: u32) {
        let widened = match self {
            ExpertIds::U8(v) if id > u8::MAX as u32 => {
                if id > u16::MAX as u32 {
                    ExpertIds::U32(v.iter().map(|&x| x as u32).collect())
                } else {
                    ExpertIds::U16(v.iter().map(|&x| x as u16).collect())
                }
            }
            ExpertIds::U16(v) if id > u16::MAX as u32 => ExpertIds::U32(v.iter().map(|&x| x as u32).collect()),
            _ => return,
        };
        *self = widened;
    }

    fn slice(&self, start: usize, len: usize) -> ExpertList<'_> {
        match self {
            ExpertIds::U8(v) => ExpertList::U8(&v[start..start + len]),
            ExpertIds::U16(v) => ExpertList::U16(&v[start..start + len]),
            ExpertIds::U32(v) => ExpertList::U32(&v[start..start + len]),
        }
    }
}

/// Per-token activated-expert lists of one layer over one sequence.
#[derive(Debug, Clone)]
pub struct LayerRouting {
    counts: Vec<u8>,
    ids: ExpertIds,
}

impl Default for LayerRouting {
    fn default() -> Self {
        Self::new()
    }
}

impl LayerRouting {
    pub fn new() -> Self {
        Self {
            counts: Vec::new(),
            ids: ExpertIds::U8(Vec::new()),
        }
    }

    /// Preallocates for `tokens` tokens and `activations` ids, sized for
    /// ids below `experts`.
    pub fn with_capacity(tokens: usize, activations: usize, experts: u32) -> Self {
        let ids = if experts <= 1 << 8 {
            ExpertIds::U8(Vec::with_capacity(activations))
        } else if experts <= 1 << 16 {
            ExpertIds::U16(Vec::with_capacity(activations))
        } else {
            ExpertIds::U32(Vec::with_capacity(activations))
        };
        Self {
            counts: Vec::with_capacity(tokens),
            ids,
        }
    }

    pub fn from_lists<I, L>(lists: I) -> Result<Self, TraceError>
    where
        I: IntoIterator<Item = L>,
        L: AsRef<[u32]>,
    {
        let mut routing = Self::new();
        for list in lists {
            routing.push_token(list.as_ref())?;
        }
        Ok(routing)
    }

    pub fn push_token(&mut self, experts: &[u32]) -> Result<(), TraceError> {
        let count = u8::try_from(experts.len()).map_err(|_| TraceError::TooManyActivations(experts.len()))?;
        self.counts.push(count);
        for &e in experts {
            self.ids.push(e);
        }
        Ok(())
    }

    pub fn num_tokens(&self) -> usize {
        self.counts.len()
    }

    pub fn num_activations(&self) -> usize {
        self.ids.len()
    }

    pub fn tokens(&self) -> TokenIter<'_> {
        TokenIter {
            routing: self,
            token: 0,
            offset: 0,
        }
    }

    pub fn to_lists(&self) -> Vec<Vec<u32>> {
        self.tokens().map(|l| l.to_vec()).collect()
    }

    /// Per-token activation counts and the concatenated expert ids.
    pub(crate) fn raw(&self) -> (&[u8], ExpertList<'_>) {
        (&self.counts, self.ids.slice(0, self.ids.len()))
    }

    /// Calls `f(token, expert)` for every activation in token order.
    pub fn for_each_activation(&self, mut f: impl FnMut(usize, u32)) {
        fn walk<T: Copy + Into<u32>>(counts: &[u8], ids: &[T], f: &mut impl FnMut(usize, u32)) {
            let mut offset = 0;
            for (t, &c) in counts.iter().enumerate() {
                for &id in &ids[offset..offset + c as usize] {
                    f(t, id.into());
                }
                offset += c as usize;
            }
        }
        match &self.ids {
            ExpertIds::U8(v) => walk(&self.counts, v, &mut f),
            ExpertIds::U16(v) => walk(&self.counts, v, &mut f),
            ExpertIds::U32(v) => walk(&self.counts, v, &mut f),
        }
    }
}

impl PartialEq for LayerRouting {
    fn eq(&self, other: &Self) -> bool {
        self.counts == other.counts && self.tokens().zip(other.tokens()).all(|(a, b)| a == b)
    }
}

/// Borrowed view of one token's activation list.
#[derive(Debug, Clone, Copy)]
pub enum ExpertList<'a> {
    U8(&'a [u8]),
    U16(&'a [u16]),
    U32(&'a [u32]),
}

impl<'a> ExpertList<'a> {
    pub fn len(&self) -> usize {
        match self {
            ExpertList::U8(s) => s.len(),
            ExpertList::U16(s) => s.len(),
            ExpertList::U32(s) => s.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize) -> u32 {
        match self {
            ExpertList::U8(s) => s[i] as u32,
            ExpertList::U16(s) => s[i] as u32,
            ExpertList::U32(s) => s[i],
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = u32> + 'a {
        let list = *self;
        (0..list.len()).map(move |i| list.get(i))
    }

    pub fn contains(&self, expert: u32) -> bool {
        self.iter().any(|e| e == expert)
    }

    pub fn to_vec(&self) -> Vec<u32> {
        self.iter().collect()
    }
}

impl PartialEq for ExpertList<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.len() == other.len() && self.iter().eq(other.iter())
    }
}

pub struct TokenIter<'a> {
    routing: &'a LayerRouting,
    token: usize,
    offset: usize,
}

impl<'a> Iterator for TokenIter<'a> {
    type Item = ExpertList<'a>;

    fn next(&mut self) -> Option<Self::Item> {
        let count = *self.routing.counts.get(self.token)? as usize;
        let list = self.routing.ids.slice(self.offset, count);
        self.token += 1;
        self.offset += count;
        Some(list)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let rest = self.routing.counts.len() - self.token;
        (rest, Some(rest))
    }
}

impl ExactSizeIterator for TokenIter<'_> {}
