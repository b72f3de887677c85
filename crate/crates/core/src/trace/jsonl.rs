//! Line-delimited JSON debug format.
//!
//! Line 1 is the header object; every further non-blank line is one sequence:
//! `{"domain": str, "tokens": [...], "pred": [...]?, "truth": [...]?, "acts": [[[...]]]}`
//! where `acts[layer][token]` is that token's activated-expert list.

use serde::{Deserialize, Serialize};

use super::{
    binary::checked, LayerRouting, LayerSpec, RoutingTrace, Sequence, StreamKind, TraceError, TraceHeader,
    FORMAT_VERSION, UNKNOWN_DOMAIN,
};

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    #[serde(default = "default_version")]
    format_version: u16,
    model_id: String,
    num_layers: usize,
    experts_per_layer: Vec<u32>,
    nominal_top_k: Vec<u16>,
    #[serde(default)]
    stream_kind: Option<Vec<StreamKind>>,
    #[serde(default)]
    vocab_size: u32,
}

fn default_version() -> u16 {
    FORMAT_VERSION
}

fn default_domain() -> String {
    UNKNOWN_DOMAIN.to_string()
}

#[derive(Serialize, Deserialize)]
struct SequenceLine {
    #[serde(default = "default_domain")]
    domain: String,
    tokens: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pred: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    truth: Option<Vec<u32>>,
    acts: Vec<Vec<Vec<u32>>>,
}

pub fn dump_jsonl(trace: &RoutingTrace) -> String {
    let h = &trace.header;
    let header = HeaderLine {
        format_version: h.format_version,
        model_id: h.model_id.clone(),
        num_layers: h.layers.len(),
        experts_per_layer: h.layers.iter().map(|l| l.experts).collect(),
        nominal_top_k: h.layers.iter().map(|l| l.top_k).collect(),
        stream_kind: Some(h.layers.iter().map(|l| l.stream_kind).collect()),
        vocab_size: h.vocab_size,
    };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    for seq in &trace.sequences {
        let line = SequenceLine {
            domain: seq.domain.clone(),
            tokens: seq.token_ids.clone(),
            pred: seq.predicted_ids.clone(),
            truth: seq.ground_truth_ids.clone(),
            acts: seq.layers.iter().map(LayerRouting::to_lists).collect(),
        };
        out.push_str(&serde_json::to_string(&line).expect("sequence serializes"));
        out.push('\n');
    }
    out
}

/// Parses JSONL and checks every trace invariant.
pub fn load_jsonl(text: &str) -> Result<RoutingTrace, TraceError> {
    checked(parse_jsonl(text)?)
}

/// Parses JSONL only; the result may break trace invariants.
pub fn parse_jsonl(text: &str) -> Result<RoutingTrace, TraceError> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty());

    let (line_no, first) = lines.next().ok_or(TraceError::Parse {
        line: 1,
        message: "missing header line".into(),
    })?;
    let parse_err = |line: usize| {
        move |e: serde_json::Error| TraceError::Parse {
            line,
            message: e.to_string(),
        }
    };
    let h: HeaderLine = serde_json::from_str(first).map_err(parse_err(line_no))?;
    if h.format_version != FORMAT_VERSION {
        return Err(TraceError::UnsupportedVersion(h.format_version));
    }
    let kinds = h.stream_kind.unwrap_or_else(|| vec![StreamKind::Decoder; h.num_layers]);
    if h.experts_per_layer.len() != h.num_layers || h.nominal_top_k.len() != h.num_layers || kinds.len() != h.num_layers
    {
        return Err(TraceError::Parse {
            line: line_no,
            message: format!(
                "num_layers is {} but experts_per_layer, nominal_top_k and stream_kind have {}, {} and {} entries",
                h.num_layers,
                h.experts_per_layer.len(),
                h.nominal_top_k.len(),
                kinds.len()
            ),
        });
    }
    let layers = h
        .experts_per_layer
        .iter()
        .zip(&h.nominal_top_k)
        .zip(&kinds)
        .map(|((&experts, &top_k), &stream_kind)| LayerSpec {
            experts,
            top_k,
            stream_kind,
        })
        .collect();
    let header = TraceHeader {
        format_version: h.format_version,
        model_id: h.model_id,
        layers,
        vocab_size: h.vocab_size,
    };

    let mut sequences = Vec::new();
    for (line_no, line) in lines {
        let s: SequenceLine = serde_json::from_str(line).map_err(parse_err(line_no))?;
        let layers = s
            .acts
            .into_iter()
            .map(LayerRouting::from_lists)
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| TraceError::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
        sequences.push(Sequence {
            domain: s.domain,
            token_ids: s.tokens,
            predicted_ids: s.pred,
            ground_truth_ids: s.truth,
            layers,
        });
    }

    Ok(RoutingTrace { header, sequences })
}
