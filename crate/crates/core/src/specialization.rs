//! Load balance and expert specialization statistics.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::trace::{ExpertKey, RoutingTrace, TokenStream};

pub const DEFAULT_MIN_SUPPORT: u64 = 16;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SpecError {
    #[error("trace has no tokens")]
    EmptyTrace,
    #[error("expert {0} is not part of the trace")]
    ExpertOutOfRange(ExpertKey),
    #[error("coefficient of variation is undefined (fewer than two domains or zero mean rate)")]
    UndefinedCv,
    #[error("trace does not carry the {0} token stream")]
    MissingTokenStream(TokenStream),
    #[error("vocabulary specialization is undefined (expert never active or no token meets support)")]
    UndefinedScore,
    #[error("correlation needs at least 3 pairs with nonzero variance")]
    DegenerateInput,
}

fn check_expert(trace: &RoutingTrace, expert: ExpertKey) -> Result<(), SpecError> {
    if !trace.header.contains(expert) {
        return Err(SpecError::ExpertOutOfRange(expert));
    }
    if trace.total_tokens() == 0 {
        return Err(SpecError::EmptyTrace);
    }
    Ok(())
}

fn expert_hits(trace: &RoutingTrace, expert: ExpertKey) -> impl Iterator<Item = (usize, Vec<bool>)> + '_ {
    trace.sequences.iter().enumerate().map(move |(s, seq)| {
        let bits = seq.layers[expert.layer as usize]
            .tokens()
            .map(|l| l.contains(expert.index))
            .collect();
        (s, bits)
    })
}

/// Activations of `expert` divided by total tokens.
pub fn activation_frequency(trace: &RoutingTrace, expert: ExpertKey) -> Result<f64, SpecError> {
    check_expert(trace, expert)?;
    let active: usize = expert_hits(trace, expert)
        .map(|(_, bits)| bits.iter().filter(|&&b| b).count())
        .sum();
    Ok(active as f64 / trace.total_tokens() as f64)
}

/// Population standard deviation.
pub fn population_sd(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

fn coefficient_of_variation(values: &[f64]) -> Option<f64> {
    if values.len() < 2 {
        return None;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    (mean > 0.0).then(|| population_sd(values) / mean)
}

/// Activation counts per (layer, expert, domain) from one pass.
#[derive(Debug, Clone)]
struct DomainCounts {
    domains: Vec<String>,
    domain_tokens: Vec<u64>,
    /// `counts[layer][expert * domains + d]`
    counts: Vec<Vec<u64>>,
}

impl DomainCounts {
    fn build(trace: &RoutingTrace) -> Self {
        let domains: Vec<String> = trace
            .sequences
            .iter()
            .map(|s| s.domain.clone())
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        let index: HashMap<&str, usize> = domains.iter().enumerate().map(|(i, d)| (d.as_str(), i)).collect();
        let d = domains.len();
        let mut domain_tokens = vec![0u64; d];
        for seq in &trace.sequences {
            domain_tokens[index[seq.domain.as_str()]] += seq.len() as u64;
        }
        let counts = (0..trace.header.num_layers())
            .into_par_iter()
            .map(|l| {
                let mut c = vec![0u64; trace.header.experts(l) * d];
                for seq in &trace.sequences {
                    let di = index[seq.domain.as_str()];
                    seq.layers[l].for_each_activation(|_, e| c[e as usize * d + di] += 1);
                }
                c
            })
            .collect();
        Self {
            domains,
            domain_tokens,
            counts,
        }
    }

    fn expert_counts(&self, key: ExpertKey) -> &[u64] {
        let d = self.domains.len();
        let start = key.index as usize * d;
        &self.counts[key.layer as usize][start..start + d]
    }

    fn total_tokens(&self) -> u64 {
        self.domain_tokens.iter().sum()
    }

    fn rate(&self, key: ExpertKey) -> f64 {
        self.expert_counts(key).iter().sum::<u64>() as f64 / self.total_tokens() as f64
    }

    fn domain_rates(&self, key: ExpertKey) -> BTreeMap<String, f64> {
        self.domains
            .iter()
            .zip(self.expert_counts(key))
            .zip(&self.domain_tokens)
            .filter(|(_, &t)| t > 0)
            .map(|((name, &a), &t)| (name.clone(), a as f64 / t as f64))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LoadBalanceReport {
    /// Population SD of each layer's expert activation rates.
    pub per_layer_sd: Vec<f64>,
    /// Unweighted mean of `per_layer_sd`.
    pub mean_sd: f64,
    /// Population SD over every expert of every layer at once.
    pub pooled_sd: f64,
    /// `per_expert_rates[layer][expert]`
    pub per_expert_rates: Vec<Vec<f64>>,
}

pub fn load_balance_sd(trace: &RoutingTrace) -> Result<LoadBalanceReport, SpecError> {
    let tokens = trace.total_tokens();
    if tokens == 0 {
        return Err(SpecError::EmptyTrace);
    }
    let per_expert_rates: Vec<Vec<f64>> = (0..trace.header.num_layers())
        .into_par_iter()
        .map(|l| {
            let mut c = vec![0u64; trace.header.experts(l)];
            for seq in &trace.sequences {
                seq.layers[l].for_each_activation(|_, e| c[e as usize] += 1);
            }
            c.into_iter().map(|a| a as f64 / tokens as f64).collect()
        })
        .collect();
    Ok(load_balance_from_rates(per_expert_rates))
}

fn load_balance_from_rates(per_expert_rates: Vec<Vec<f64>>) -> LoadBalanceReport {
    let per_layer_sd: Vec<f64> = per_expert_rates.iter().map(|r| population_sd(r)).collect();
    let mean_sd = if per_layer_sd.is_empty() {
        0.0
    } else {
        per_layer_sd.iter().sum::<f64>() / per_layer_sd.len() as f64
    };
    let all: Vec<f64> = per_expert_rates.iter().flatten().copied().collect();
    LoadBalanceReport {
        per_layer_sd,
        mean_sd,
        pooled_sd: population_sd(&all),
        per_expert_rates,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DomainSpecialization {
    /// Activations on the domain's tokens divided by the domain's tokens.
    pub domain_rates: BTreeMap<String, f64>,
    pub domain_cv: f64,
}

pub fn domain_specialization(trace: &RoutingTrace, expert: ExpertKey) -> Result<DomainSpecialization, SpecError> {
    check_expert(trace, expert)?;
    let mut active: BTreeMap<&str, (u64, u64)> = BTreeMap::new();
    for (s, bits) in expert_hits(trace, expert) {
        let entry = active.entry(trace.sequences[s].domain.as_str()).or_default();
        entry.0 += bits.iter().filter(|&&b| b).count() as u64;
        entry.1 += bits.len() as u64;
    }
    let domain_rates: BTreeMap<String, f64> = active
        .into_iter()
        .filter(|(_, (_, t))| *t > 0)
        .map(|(d, (a, t))| (d.to_string(), a as f64 / t as f64))
        .collect();
    let values: Vec<f64> = domain_rates.values().copied().collect();
    let domain_cv = coefficient_of_variation(&values).ok_or(SpecError::UndefinedCv)?;
    Ok(DomainSpecialization {
        domain_rates,
        domain_cv,
    })
}

fn stream_present(trace: &RoutingTrace, kind: TokenStream) -> bool {
    trace.sequences.iter().all(|s| s.stream(kind).is_some())
}

/// Largest lift `P(active | token = v) / P(active)` over token ids seen at
/// least `min_support` times in the chosen stream.
pub fn vocab_specialization(
    trace: &RoutingTrace,
    expert: ExpertKey,
    kind: TokenStream,
    min_support: u64,
) -> Result<f64, SpecError> {
    check_expert(trace, expert)?;
    if !stream_present(trace, kind) {
        return Err(SpecError::MissingTokenStream(kind));
    }
    let mut per_token: HashMap<u32, (u64, u64)> = HashMap::new();
    let (mut active, mut tokens) = (0u64, 0u64);
    for (s, bits) in expert_hits(trace, expert) {
        let ids = trace.sequences[s].stream(kind).expect("checked");
        for (&v, &b) in ids.iter().zip(&bits) {
            let entry = per_token.entry(v).or_default();
            entry.0 += 1;
            entry.1 += b as u64;
            active += b as u64;
            tokens += 1;
        }
    }
    max_lift(per_token.into_values(), active, tokens, min_support).ok_or(SpecError::UndefinedScore)
}

/// `rows` yields (occurrences, activations) per token id.
fn max_lift(rows: impl Iterator<Item = (u64, u64)>, active: u64, tokens: u64, min_support: u64) -> Option<f64> {
    if active == 0 {
        return None;
    }
    let base = active as f64 / tokens as f64;
    rows.filter(|&(occ, _)| occ >= min_support.max(1))
        .map(|(occ, act)| act as f64 / occ as f64 / base)
        .reduce(f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VocabScores {
    pub input: Option<f64>,
    pub predicted: Option<f64>,
    pub ground_truth: Option<f64>,
}

impl VocabScores {
    pub fn get(&self, kind: TokenStream) -> Option<f64> {
        match kind {
            TokenStream::Input => self.input,
            TokenStream::Predicted => self.predicted,
            TokenStream::GroundTruth => self.ground_truth,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpecializationProfile {
    pub expert: ExpertKey,
    pub activation_rate: f64,
    pub domain_rates: BTreeMap<String, f64>,
    pub domain_cv: Option<f64>,
    pub vocab_scores: VocabScores,
}

/// Profiles of every expert in one pass per layer and token stream.
pub fn specialization_profiles(
    trace: &RoutingTrace,
    min_support: u64,
) -> Result<Vec<SpecializationProfile>, SpecError> {
    if trace.total_tokens() == 0 {
        return Err(SpecError::EmptyTrace);
    }
    let domains = DomainCounts::build(trace);
    let mut vocab: Vec<Option<Vec<Vec<Option<f64>>>>> = Vec::new();
    for kind in TokenStream::ALL {
        vocab.push(stream_present(trace, kind).then(|| vocab_scores_all(trace, kind, min_support)));
    }
    let score = |k: usize, key: ExpertKey| -> Option<f64> {
        vocab[k]
            .as_ref()
            .and_then(|layers| layers[key.layer as usize][key.index as usize])
    };
    Ok(trace
        .header
        .expert_keys()
        .map(|key| {
            let domain_rates = domains.domain_rates(key);
            let values: Vec<f64> = domain_rates.values().copied().collect();
            SpecializationProfile {
                expert: key,
                activation_rate: domains.rate(key),
                domain_cv: coefficient_of_variation(&values),
                domain_rates,
                vocab_scores: VocabScores {
                    input: score(0, key),
                    predicted: score(1, key),
                    ground_truth: score(2, key),
                },
            }
        })
        .collect())
}

/// `scores[layer][expert]` for one token stream.
fn vocab_scores_all(trace: &RoutingTrace, kind: TokenStream, min_support: u64) -> Vec<Vec<Option<f64>>> {
    let mut remap: HashMap<u32, u32> = HashMap::new();
    let mut occurrences: Vec<u64> = Vec::new();
    let dense: Vec<Vec<u32>> = trace
        .sequences
        .iter()
        .map(|s| {
            s.stream(kind)
                .expect("stream checked")
                .iter()
                .map(|&v| {
                    let next = remap.len() as u32;
                    let id = *remap.entry(v).or_insert(next);
                    if id as usize == occurrences.len() {
                        occurrences.push(0);
                    }
                    occurrences[id as usize] += 1;
                    id
                })
                .collect()
        })
        .collect();
    let vocab = occurrences.len();
    let tokens = trace.total_tokens();
    (0..trace.header.num_layers())
        .into_par_iter()
        .map(|l| {
            let experts = trace.header.experts(l);
            let mut table = vec![0u32; vocab * experts];
            let mut totals = vec![0u64; experts];
            for (seq, ids) in trace.sequences.iter().zip(&dense) {
                seq.layers[l].for_each_activation(|t, e| {
                    table[ids[t] as usize * experts + e as usize] += 1;
                    totals[e as usize] += 1;
                });
            }
            (0..experts)
                .map(|e| {
                    let rows = (0..vocab).map(|v| (occurrences[v], table[v * experts + e] as u64));
                    max_lift(rows, totals[e], tokens, min_support)
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationMethod {
    Pearson,
    Spearman,
}

/// Correlation over the pairs where both values are defined.
pub fn correlate(xs: &[Option<f64>], ys: &[Option<f64>], method: CorrelationMethod) -> Result<f64, SpecError> {
    let (a, b): (Vec<f64>, Vec<f64>) = xs
        .iter()
        .zip(ys)
        .filter_map(|(x, y)| Some(((*x)?, (*y)?)))
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .unzip();
    match method {
        CorrelationMethod::Pearson => pearson(&a, &b),
        CorrelationMethod::Spearman => pearson(&average_ranks(&a), &average_ranks(&b)),
    }
}

fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64, SpecError> {
    if xs.len() < 3 {
        return Err(SpecError::DegenerateInput);
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(SpecError::DegenerateInput);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks, ties sharing their mean rank.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{LayerRouting, LayerSpec, Sequence, TraceHeader};

    fn seq(domain: &str, ids: &[u32], lists: &[&[u32]]) -> Sequence {
        Sequence::new(
            domain,
            ids.to_vec(),
            vec![LayerRouting::from_lists(lists.iter().map(|l| l.to_vec())).unwrap()],
        )
    }

    fn trace(experts: u32, seqs: Vec<Sequence>) -> RoutingTrace {
        let mut t = RoutingTrace::new(TraceHeader::new("s", vec![LayerSpec::new(experts, 0)], 0));
        t.sequences = seqs;
        t
    }

    const E0: ExpertKey = ExpertKey::new(0, 0);
    const E1: ExpertKey = ExpertKey::new(0, 1);

    #[test]
    fn frequency_examples() {
        let mut lists: Vec<&[u32]> = vec![&[]; 10];
        lists[1] = &[0];
        lists[4] = &[0];
        lists[8] = &[0];
        let t = trace(2, vec![seq("a", &[0; 10], &lists)]);
        assert!((activation_frequency(&t, E0).unwrap() - 0.3).abs() < 1e-12);
        assert_eq!(activation_frequency(&t, E1).unwrap(), 0.0);
        let empty = trace(2, vec![]);
        assert_eq!(activation_frequency(&empty, E0), Err(SpecError::EmptyTrace));
    }

    #[test]
    fn load_balance_examples() {
        // rates {0.5, 0.5, 0, 0}
        let t = trace(4, vec![seq("a", &[0, 0], &[&[0, 1], &[]])]);
        let lb = load_balance_sd(&t).unwrap();
        assert!((lb.per_layer_sd[0] - 0.25).abs() < 1e-12);
        assert_eq!(lb.mean_sd, lb.per_layer_sd[0]);
        let uniform = trace(2, vec![seq("a", &[0, 0], &[&[0], &[1]])]);
        assert_eq!(load_balance_sd(&uniform).unwrap().per_layer_sd, vec![0.0]);
    }

    #[test]
    fn domain_cv_examples() {
        // rates a: 0.2, b: 0.0
        let mut a: Vec<&[u32]> = vec![&[]; 5];
        a[0] = &[0];
        let t = trace(2, vec![seq("a", &[0; 5], &a), seq("b", &[0; 5], &[&[] as &[u32]; 5])]);
        let d = domain_specialization(&t, E0).unwrap();
        assert!((d.domain_cv - 1.0).abs() < 1e-12);
        assert_eq!(d.domain_rates["a"], 0.2);
        let same = trace(
            1,
            vec![seq("a", &[0; 2], &[&[0], &[]]), seq("b", &[0; 2], &[&[], &[0]])],
        );
        assert_eq!(domain_specialization(&same, E0).unwrap().domain_cv, 0.0);
        let single = trace(1, vec![seq("a", &[0; 2], &[&[0], &[]])]);
        assert_eq!(domain_specialization(&single, E0), Err(SpecError::UndefinedCv));
    }

    #[test]
    fn vocab_lift_of_token_locked_expert() {
        // 20 occurrences of token 42 (active), 180 other tokens (inactive)
        let mut ids = vec![7u32; 200];
        let mut lists: Vec<&[u32]> = vec![&[]; 200];
        for i in (0..200).step_by(10) {
            ids[i] = 42;
            lists[i] = &[0];
        }
        let t = trace(2, vec![seq("a", &ids, &lists)]);
        let s = vocab_specialization(&t, E0, TokenStream::Input, 16).unwrap();
        assert!((s - 10.0).abs() < 1e-9);
        assert_eq!(
            vocab_specialization(&t, E1, TokenStream::Input, 16),
            Err(SpecError::UndefinedScore)
        );
        assert_eq!(
            vocab_specialization(&t, E0, TokenStream::Predicted, 16),
            Err(SpecError::MissingTokenStream(TokenStream::Predicted))
        );
        let profiles = specialization_profiles(&t, 16).unwrap();
        assert_eq!(profiles[0].vocab_scores.input, Some(s));
        assert_eq!(profiles[0].vocab_scores.predicted, None);
        assert_eq!(profiles[1].vocab_scores.input, None);
    }

    #[test]
    fn profiles_agree_with_single_expert_ops() {
        let t = trace(
            3,
            vec![
                seq("a", &[1, 2, 1, 3], &[&[0], &[0, 2], &[1], &[2]]),
                seq("b", &[2, 2, 1], &[&[1], &[0, 1], &[]]),
            ],
        );
        for p in specialization_profiles(&t, 1).unwrap() {
            assert_eq!(p.activation_rate, activation_frequency(&t, p.expert).unwrap());
            let d = domain_specialization(&t, p.expert).ok();
            assert_eq!(p.domain_cv, d.as_ref().map(|d| d.domain_cv));
            assert_eq!(
                p.vocab_scores.input,
                vocab_specialization(&t, p.expert, TokenStream::Input, 1).ok()
            );
        }
    }

    #[test]
    fn correlation_examples() {
        let xs: Vec<Option<f64>> = (0..6).map(|i| Some(i as f64)).collect();
        let ys: Vec<Option<f64>> = xs.iter().map(|x| x.map(|x| 2.0 * x + 1.0)).collect();
        assert!((correlate(&xs, &ys, CorrelationMethod::Pearson).unwrap() - 1.0).abs() < 1e-12);
        let rev: Vec<Option<f64>> = xs.iter().rev().map(|x| x.map(|x| x * x)).collect();
        assert_eq!(correlate(&xs, &rev, CorrelationMethod::Spearman).unwrap(), -1.0);
        let flat = vec![Some(1.0); 6];
        assert_eq!(
            correlate(&flat, &ys, CorrelationMethod::Pearson),
            Err(SpecError::DegenerateInput)
        );
    }

    #[test]
    fn undefined_pairs_are_dropped() {
        let xs = [Some(1.0), None, Some(2.0), Some(3.0), Some(4.0)];
        let ys = [Some(2.0), Some(100.0), Some(4.0), None, Some(8.0)];
        assert!((correlate(&xs, &ys, CorrelationMethod::Pearson).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ties_share_average_rank() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }
}
