use std::fmt;

use rayon::prelude::*;
use serde::Serialize;

use super::{RoutingTrace, Sequence, TokenStream, TraceHeader};

/// A broken trace invariant, located as precisely as the invariant allows.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub sequence: Option<usize>,
    pub layer: Option<usize>,
    pub token: Option<usize>,
    pub kind: ViolationKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ViolationKind {
    NoLayers,
    ZeroExperts,
    TopKExceedsExperts {
        top_k: u16,
        experts: u32,
    },
    LayerCountMismatch {
        expected: usize,
        found: usize,
    },
    TokenCountMismatch {
        expected: usize,
        found: usize,
    },
    StreamLengthMismatch {
        stream: TokenStream,
        expected: usize,
        found: usize,
    },
    ExpertOutOfRange {
        expert: u32,
        experts: u32,
    },
    DuplicateExpert {
        expert: u32,
    },
    UnsortedExperts {
        previous: u32,
        next: u32,
    },
    TopKMismatch {
        expected: u16,
        found: usize,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut at = Vec::new();
        if let Some(s) = self.sequence {
            at.push(format!("sequence {s}"));
        }
        if let Some(l) = self.layer {
            at.push(format!("layer {l}"));
        }
        if let Some(t) = self.token {
            at.push(format!("token {t}"));
        }
        let at = if at.is_empty() {
            "header".to_string()
        } else {
            at.join(", ")
        };
        match &self.kind {
            ViolationKind::NoLayers => write!(f, "{at}: trace declares no layers"),
            ViolationKind::ZeroExperts => write!(f, "{at}: layer declares zero experts"),
            ViolationKind::TopKExceedsExperts { top_k, experts } => {
                write!(f, "{at}: top-k {top_k} exceeds {experts} experts")
            }
            ViolationKind::LayerCountMismatch { expected, found } => {
                write!(f, "{at}: {found} routing layers, header declares {expected}")
            }
            ViolationKind::TokenCountMismatch { expected, found } => {
                write!(f, "{at}: {found} activation lists for {expected} tokens")
            }
            ViolationKind::StreamLengthMismatch {
                stream,
                expected,
                found,
            } => write!(f, "{at}: {stream} stream has {found} ids, expected {expected}"),
            ViolationKind::ExpertOutOfRange { expert, experts } => {
                write!(f, "{at}: expert {expert} out of range (layer has {experts})")
            }
            ViolationKind::DuplicateExpert { expert } => {
                write!(f, "{at}: expert {expert} listed twice")
            }
            ViolationKind::UnsortedExperts { previous, next } => {
                write!(f, "{at}: expert {next} follows {previous} (list must increase)")
            }
            ViolationKind::TopKMismatch { expected, found } => {
                write!(f, "{at}: {found} activations, layer top-k is {expected}")
            }
        }
    }
}

/// Checks every trace invariant; an empty result means the trace is valid.
///
/// Sequences are checked in parallel and the result is ordered by sequence.
pub fn validate(trace: &RoutingTrace) -> Vec<Violation> {
    let mut out = validate_header(&trace.header);
    let per_sequence: Vec<Vec<Violation>> = trace
        .sequences
        .par_iter()
        .enumerate()
        .map(|(s, seq)| validate_sequence(&trace.header, s, seq))
        .collect();
    out.extend(per_sequence.into_iter().flatten());
    out
}

fn validate_header(header: &TraceHeader) -> Vec<Violation> {
    let mut out = Vec::new();
    let at_layer = |l: usize, kind| Violation {
        sequence: None,
        layer: Some(l),
        token: None,
        kind,
    };
    if header.layers.is_empty() {
        out.push(Violation {
            sequence: None,
            layer: None,
            token: None,
            kind: ViolationKind::NoLayers,
        });
    }
    for (l, spec) in header.layers.iter().enumerate() {
        if spec.experts == 0 {
            out.push(at_layer(l, ViolationKind::ZeroExperts));
        }
        if spec.top_k as u32 > spec.experts {
            out.push(at_layer(
                l,
                ViolationKind::TopKExceedsExperts {
                    top_k: spec.top_k,
                    experts: spec.experts,
                },
            ));
        }
    }
    out
}

fn validate_sequence(header: &TraceHeader, s: usize, seq: &Sequence) -> Vec<Violation> {
    let mut out = Vec::new();
    let n = seq.len();
    let violation = |layer, token, kind| Violation {
        sequence: Some(s),
        layer,
        token,
        kind,
    };

    for stream in [TokenStream::Predicted, TokenStream::GroundTruth] {
        if let Some(ids) = seq.stream(stream) {
            if ids.len() != n {
                out.push(violation(
                    None,
                    None,
                    ViolationKind::StreamLengthMismatch {
                        stream,
                        expected: n,
                        found: ids.len(),
                    },
                ));
            }
        }
    }

    if seq.layers.len() != header.num_layers() {
        out.push(violation(
            None,
            None,
            ViolationKind::LayerCountMismatch {
                expected: header.num_layers(),
                found: seq.layers.len(),
            },
        ));
    }

    for (l, (routing, spec)) in seq.layers.iter().zip(&header.layers).enumerate() {
        if routing.num_tokens() != n {
            out.push(violation(
                Some(l),
                None,
                ViolationKind::TokenCountMismatch {
                    expected: n,
                    found: routing.num_tokens(),
                },
            ));
        }
        for (t, list) in routing.tokens().enumerate() {
            let at = |kind| violation(Some(l), Some(t), kind);
            if spec.top_k > 0 && list.len() != spec.top_k as usize {
                out.push(at(ViolationKind::TopKMismatch {
                    expected: spec.top_k,
                    found: list.len(),
                }));
            }
            let mut previous: Option<u32> = None;
            for e in list.iter() {
                if e >= spec.experts {
                    out.push(at(ViolationKind::ExpertOutOfRange {
                        expert: e,
                        experts: spec.experts,
                    }));
                }
                match previous {
                    Some(p) if p == e => out.push(at(ViolationKind::DuplicateExpert { expert: e })),
                    Some(p) if p > e => out.push(at(ViolationKind::UnsortedExperts { previous: p, next: e })),
                    _ => {}
                }
                previous = Some(e);
            }
        }
    }
    out
}
