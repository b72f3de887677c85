//! `.moet` binary trace format.
//!
//! All integers are little-endian and fixed width:
//!
//! ```text
//! "MOET" | version u16 | model_id (u16 len + UTF-8) | num_layers u32
//! | per layer: experts u32, top_k u16, stream_kind u8
//! | vocab_size u32 | num_sequences u64
//! | per sequence:
//!     domain (u16 len + UTF-8) | num_tokens u32 | flags u8
//!     | token_ids u32 x n | [predicted u32 x n] | [ground truth u32 x n]
//!     | per layer, per token: count u8, expert ids u32 x count
//! ```
//!
//! Flag bit 0 marks predicted ids, bit 1 ground-truth ids.

use super::{validate, LayerRouting, LayerSpec, RoutingTrace, Sequence, StreamKind, TraceError, TraceHeader};

pub const MAGIC: &[u8; 4] = b"MOET";
pub const FORMAT_VERSION: u16 = 1;

const FLAG_PREDICTED: u8 = 1;
const FLAG_GROUND_TRUTH: u8 = 1 << 1;

/// Serializes a valid trace.
///
/// # Panics
/// If a sequence's layer count or per-layer token count disagrees with the
/// header, or a string exceeds `u16::MAX` bytes; these are structural
/// preconditions the format cannot express.
pub fn encode_binary(trace: &RoutingTrace) -> Vec<u8> {
    let header = &trace.header;
    let mut out = Vec::with_capacity(estimate_size(trace));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_str(&mut out, &header.model_id);
    out.extend_from_slice(&(header.layers.len() as u32).to_le_bytes());
    for spec in &header.layers {
        out.extend_from_slice(&spec.experts.to_le_bytes());
        out.extend_from_slice(&spec.top_k.to_le_bytes());
        out.push(spec.stream_kind.to_byte());
    }
    out.extend_from_slice(&header.vocab_size.to_le_bytes());
    out.extend_from_slice(&(trace.sequences.len() as u64).to_le_bytes());

    for seq in &trace.sequences {
        let n = seq.len();
        assert_eq!(seq.layers.len(), header.layers.len(), "layer count mismatch");
        put_str(&mut out, &seq.domain);
        out.extend_from_slice(&(n as u32).to_le_bytes());
        let mut flags = 0;
        if seq.predicted_ids.is_some() {
            flags |= FLAG_PREDICTED;
        }
        if seq.ground_truth_ids.is_some() {
            flags |= FLAG_GROUND_TRUTH;
        }
        out.push(flags);
        put_ids(&mut out, &seq.token_ids);
        for ids in [&seq.predicted_ids, &seq.ground_truth_ids].into_iter().flatten() {
            assert_eq!(ids.len(), n, "token stream length mismatch");
            put_ids(&mut out, ids);
        }
        for routing in &seq.layers {
            assert_eq!(routing.num_tokens(), n, "activation list count mismatch");
            for list in routing.tokens() {
                out.push(list.len() as u8);
                for e in list.iter() {
                    out.extend_from_slice(&e.to_le_bytes());
                }
            }
        }
    }
    out
}

fn estimate_size(trace: &RoutingTrace) -> usize {
    trace
        .sequences
        .iter()
        .map(|s| {
            let streams = 1 + s.predicted_ids.is_some() as usize + s.ground_truth_ids.is_some() as usize;
            let acts: usize = s.layers.iter().map(|r| r.num_tokens() + 4 * r.num_activations()).sum();
            16 + s.domain.len() + 4 * streams * s.len() + acts
        })
        .sum::<usize>()
        + 64
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    let len = u16::try_from(s.len()).expect("string longer than 65535 bytes");
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_ids(out: &mut Vec<u8>, ids: &[u32]) {
    for id in ids {
        out.extend_from_slice(&id.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], TraceError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or(TraceError::Truncated { what, offset: self.pos })?;
        let bytes = &self.buf[self.pos..end];
        self.pos = end;
        Ok(bytes)
    }

    fn array<const N: usize>(&mut self, what: &'static str) -> Result<[u8; N], TraceError> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, TraceError> {
        Ok(self.array::<1>(what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, TraceError> {
        self.array(what).map(u16::from_le_bytes)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, TraceError> {
        self.array(what).map(u32::from_le_bytes)
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, TraceError> {
        self.array(what).map(u64::from_le_bytes)
    }

    fn string(&mut self, what: &'static str) -> Result<String, TraceError> {
        let len = self.u16(what)? as usize;
        let bytes = self.take(len, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| TraceError::InvalidUtf8(what))
    }

    fn ids(&mut self, n: usize, what: &'static str) -> Result<Vec<u32>, TraceError> {
        let bytes = self.take(
            n.checked_mul(4)
                .ok_or(TraceError::Truncated { what, offset: self.pos })?,
            what,
        )?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Parses a `.moet` byte stream and checks every trace invariant.
pub fn decode_binary(bytes: &[u8]) -> Result<RoutingTrace, TraceError> {
    checked(parse_binary(bytes)?)
}

pub(super) fn checked(trace: RoutingTrace) -> Result<RoutingTrace, TraceError> {
    match validate(&trace).into_iter().next() {
        Some(v) => Err(TraceError::InvariantViolation(v)),
        None => Ok(trace),
    }
}

/// Parses the byte layout only; the result may break trace invariants.
pub fn parse_binary(bytes: &[u8]) -> Result<RoutingTrace, TraceError> {
    if bytes.len() < MAGIC.len() || &bytes[..4] != MAGIC {
        return Err(TraceError::BadMagic);
    }
    let mut r = Reader { buf: bytes, pos: 4 };
    let version = r.u16("version")?;
    if version != FORMAT_VERSION {
        return Err(TraceError::UnsupportedVersion(version));
    }
    let model_id = r.string("model_id")?;
    let num_layers = r.u32("num_layers")? as usize;
    let mut layers = Vec::with_capacity(num_layers.min(1 << 16));
    for _ in 0..num_layers {
        let experts = r.u32("layer experts")?;
        let top_k = r.u16("layer top_k")?;
        let kind = r.u8("layer stream_kind")?;
        let stream_kind = StreamKind::from_byte(kind).ok_or(TraceError::UnknownStreamKind(kind))?;
        layers.push(LayerSpec {
            experts,
            top_k,
            stream_kind,
        });
    }
    let vocab_size = r.u32("vocab_size")?;
    let header = TraceHeader {
        format_version: version,
        model_id,
        layers,
        vocab_size,
    };

    let num_sequences = r.u64("num_sequences")?;
    let mut sequences = Vec::new();
    for _ in 0..num_sequences {
        sequences.push(read_sequence(&mut r, &header)?);
    }
    if r.pos != bytes.len() {
        return Err(TraceError::TrailingBytes(bytes.len() - r.pos));
    }

    Ok(RoutingTrace { header, sequences })
}

fn read_sequence(r: &mut Reader<'_>, header: &TraceHeader) -> Result<Sequence, TraceError> {
    let domain = r.string("domain")?;
    let n = r.u32("num_tokens")? as usize;
    let flags = r.u8("flags")?;
    if flags & !(FLAG_PREDICTED | FLAG_GROUND_TRUTH) != 0 {
        return Err(TraceError::UnknownFlags(flags));
    }
    let token_ids = r.ids(n, "token_ids")?;
    let predicted_ids = if flags & FLAG_PREDICTED != 0 {
        Some(r.ids(n, "predicted_ids")?)
    } else {
        None
    };
    let ground_truth_ids = if flags & FLAG_GROUND_TRUTH != 0 {
        Some(r.ids(n, "ground_truth_ids")?)
    } else {
        None
    };
    let mut layers = Vec::with_capacity(header.layers.len());
    let mut list = Vec::new();
    for spec in &header.layers {
        let mut routing = LayerRouting::with_capacity(n, n * spec.top_k as usize, spec.experts);
        for _ in 0..n {
            let count = r.u8("activation count")? as usize;
            list.clear();
            for _ in 0..count {
                list.push(r.u32("expert id")?);
            }
            routing.push_token(&list)?;
        }
        layers.push(routing);
    }
    Ok(Sequence {
        domain,
        token_ids,
        predicted_ids,
        ground_truth_ids,
        layers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::ViolationKind;

    fn tiny() -> RoutingTrace {
        let mut t = RoutingTrace::new(TraceHeader::new("m", vec![LayerSpec::new(4, 1)], 0));
        t.sequences.push(Sequence::new(
            "d",
            vec![7, 9],
            vec![LayerRouting::from_lists([[0u32], [3]]).unwrap()],
        ));
        t
    }

    #[test]
    fn empty_stream_is_bad_magic() {
        assert!(matches!(decode_binary(&[]), Err(TraceError::BadMagic)));
        assert!(matches!(decode_binary(b"MOEX\x01\x00"), Err(TraceError::BadMagic)));
    }

    #[test]
    fn unsupported_version() {
        let mut b = encode_binary(&tiny());
        b[4] = 2;
        assert!(matches!(decode_binary(&b), Err(TraceError::UnsupportedVersion(2))));
    }

    #[test]
    fn every_strict_prefix_is_truncated() {
        let b = encode_binary(&tiny());
        for cut in 4..b.len() {
            assert!(
                matches!(decode_binary(&b[..cut]), Err(TraceError::Truncated { .. })),
                "prefix of {cut} bytes"
            );
        }
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut b = encode_binary(&tiny());
        b.push(0);
        assert!(matches!(decode_binary(&b), Err(TraceError::TrailingBytes(1))));
    }

    #[test]
    fn expert_index_at_bound_is_violation() {
        let mut b = encode_binary(&tiny());
        // Last u32 in the file is the second token's expert id.
        let n = b.len();
        b[n - 4..].copy_from_slice(&4u32.to_le_bytes());
        match decode_binary(&b) {
            Err(TraceError::InvariantViolation(v)) => {
                assert_eq!((v.sequence, v.layer, v.token), (Some(0), Some(0), Some(1)));
                assert_eq!(v.kind, ViolationKind::ExpertOutOfRange { expert: 4, experts: 4 });
            }
            other => panic!("expected violation, got {other:?}"),
        }
    }

    #[test]
    fn header_only_trace_round_trips() {
        let t = RoutingTrace::new(TraceHeader::new("empty", vec![LayerSpec::new(8, 2)], 100));
        let b = encode_binary(&t);
        assert_eq!(b.len(), 4 + 2 + 2 + 5 + 4 + 7 + 4 + 8);
        assert_eq!(decode_binary(&b).unwrap(), t);
    }
}
