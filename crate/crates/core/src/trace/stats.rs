use std::collections::BTreeMap;

use serde::Serialize;

use super::RoutingTrace;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatsReport {
    pub model_id: String,
    pub num_sequences: u64,
    pub total_tokens: u64,
    pub tokens_per_domain: BTreeMap<String, u64>,
    pub sequences_per_domain: BTreeMap<String, u64>,
    pub min_sequence_len: Option<u64>,
    pub max_sequence_len: Option<u64>,
    pub per_layer_activations: Vec<u64>,
    pub per_layer_mean_activations: Vec<f64>,
}

pub fn corpus_stats(trace: &RoutingTrace) -> StatsReport {
    let layers = trace.header.num_layers();
    let mut tokens_per_domain = BTreeMap::<String, u64>::new();
    let mut sequences_per_domain = BTreeMap::<String, u64>::new();
    let mut per_layer_activations = vec![0u64; layers];
    for seq in &trace.sequences {
        *tokens_per_domain.entry(seq.domain.clone()).or_default() += seq.len() as u64;
        *sequences_per_domain.entry(seq.domain.clone()).or_default() += 1;
        for (total, routing) in per_layer_activations.iter_mut().zip(&seq.layers) {
            *total += routing.num_activations() as u64;
        }
    }
    let total_tokens = trace.total_tokens();
    let per_layer_mean_activations = per_layer_activations
        .iter()
        .map(|&a| {
            if total_tokens == 0 {
                0.0
            } else {
                a as f64 / total_tokens as f64
            }
        })
        .collect();
    StatsReport {
        model_id: trace.header.model_id.clone(),
        num_sequences: trace.sequences.len() as u64,
        total_tokens,
        tokens_per_domain,
        sequences_per_domain,
        min_sequence_len: trace.sequences.iter().map(|s| s.len() as u64).min(),
        max_sequence_len: trace.sequences.iter().map(|s| s.len() as u64).max(),
        per_layer_activations,
        per_layer_mean_activations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{LayerRouting, LayerSpec, Sequence, TraceHeader};

    #[test]
    fn counts_tokens_domains_and_activations() {
        let mut t = RoutingTrace::new(TraceHeader::new("m", vec![LayerSpec::new(4, 2)], 0));
        for d in ["a", "b"] {
            t.sequences.push(Sequence::new(
                d,
                vec![0, 1, 2],
                vec![LayerRouting::from_lists([[0u32, 1], [1, 2], [2, 3]]).unwrap()],
            ));
        }
        let s = corpus_stats(&t);
        assert_eq!(s.total_tokens, 6);
        assert_eq!(s.tokens_per_domain["a"], 3);
        assert_eq!(s.sequences_per_domain["b"], 1);
        assert_eq!(s.per_layer_activations, vec![12]);
        assert_eq!(s.per_layer_mean_activations, vec![2.0]);
    }
}
