//! Brute-force references for SRP and SCH.
//!
//! Nothing here reuses the histogram, scan, or cache code: window frequencies
//! are recounted from the raw activation lists and every candidate prediction
//! set is evaluated directly. Budgets keep the enumerations tiny.

use num_rational::Ratio;
use serde::Serialize;
use thiserror::Error;

use crate::trace::{ExpertKey, RoutingTrace};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OracleError {
    #[error("enumeration needs {needed} decision bits, budget is {budget}")]
    BudgetExceeded { needed: u64, budget: u32 },
    #[error("expert {0} is not part of the trace")]
    ExpertOutOfRange(ExpertKey),
    #[error("segment length must be at least 1")]
    InvalidSegmentLength,
    #[error("expert group is empty")]
    EmptyGroup,
    #[error("layer {0} is not part of the trace")]
    LayerOutOfRange(usize),
    #[error("activation probability {0} outside [0, 1]")]
    InvalidProbability(f64),
    #[error("SRP is undefined for an expert that is never active")]
    UndefinedSrp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct EnumerationBudget {
    pub max_decision_bits: u32,
}

impl Default for EnumerationBudget {
    fn default() -> Self {
        Self { max_decision_bits: 20 }
    }
}

impl EnumerationBudget {
    fn check(&self, needed: u64) -> Result<(), OracleError> {
        if needed > self.max_decision_bits as u64 {
            Err(OracleError::BudgetExceeded {
                needed,
                budget: self.max_decision_bits,
            })
        } else {
            Ok(())
        }
    }
}

/// One (expert, window) decision of a segment router.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct WindowPrediction {
    pub expert: ExpertKey,
    pub sequence: usize,
    pub start: usize,
    /// Activations of the expert inside the window.
    pub frequency: usize,
    pub active: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SrpEnumeration {
    pub m: usize,
    /// `None` when the experts are never active (F1 is 0/0 everywhere).
    #[serde(serialize_with = "crate::srp::ser_opt_ratio")]
    pub best_f1: Option<Ratio<u64>>,
    /// A maximizing assignment; among maximizers, the one with the fewest
    /// active predictions (lowest mask on equal counts).
    pub witness: Vec<WindowPrediction>,
    pub assignments: u64,
}

impl SrpEnumeration {
    /// The threshold `alpha` with `active == (frequency >= alpha)` for every
    /// witness entry, if the witness has that form. `m + 1` means no window
    /// is active.
    pub fn threshold(&self) -> Option<usize> {
        let alpha = self
            .witness
            .iter()
            .filter(|w| w.active)
            .map(|w| w.frequency)
            .min()
            .unwrap_or(self.m + 1);
        if alpha == 0 {
            return None;
        }
        self.witness
            .iter()
            .all(|w| w.active == (w.frequency >= alpha))
            .then_some(alpha)
    }
}

fn check_experts(trace: &RoutingTrace, experts: &[ExpertKey]) -> Result<(), OracleError> {
    if experts.is_empty() {
        return Err(OracleError::EmptyGroup);
    }
    match experts.iter().find(|k| !trace.header.contains(**k)) {
        Some(&k) => Err(OracleError::ExpertOutOfRange(k)),
        None => Ok(()),
    }
}

/// Every length-`m` window of every sequence, for every expert, with its
/// activation count recounted token by token.
fn windows(trace: &RoutingTrace, experts: &[ExpertKey], m: usize) -> Vec<WindowPrediction> {
    let mut out = Vec::new();
    for &expert in experts {
        for (s, seq) in trace.sequences.iter().enumerate() {
            let bits: Vec<bool> = seq.layers[expert.layer as usize]
                .tokens()
                .map(|list| list.contains(expert.index))
                .collect();
            if bits.len() < m {
                continue;
            }
            for start in 0..=bits.len() - m {
                out.push(WindowPrediction {
                    expert,
                    sequence: s,
                    start,
                    frequency: bits[start..start + m].iter().filter(|&&b| b).count(),
                    active: false,
                });
            }
        }
    }
    out
}

/// Maximizes the segment-router F1 over every active/inactive assignment of
/// every (expert, window) pair.
///
/// For an assignment with predicted windows P, true positives are the
/// activations inside P, predicted positives are `m * |P|`, and actual
/// positives are the activations summed over all windows.
pub fn brute_force_srp_enum(
    trace: &RoutingTrace,
    experts: &[ExpertKey],
    m: usize,
    budget: EnumerationBudget,
) -> Result<SrpEnumeration, OracleError> {
    if m == 0 {
        return Err(OracleError::InvalidSegmentLength);
    }
    check_experts(trace, experts)?;
    let mut wins = windows(trace, experts, m);
    budget.check(wins.len() as u64)?;

    let total: u128 = wins.iter().map(|w| w.frequency as u128).sum();
    let n = wins.len();
    let assignments = 1u64 << n;
    if total == 0 {
        return Ok(SrpEnumeration {
            m,
            best_f1: None,
            witness: wins,
            assignments,
        });
    }

    // Best so far as num / den; starts at the empty prediction (F1 = 0).
    let (mut best_num, mut best_den) = (0u128, total);
    let (mut best_mask, mut best_count) = (0u64, 0u32);
    for mask in 1..assignments {
        let mut tp = 0u128;
        let mut predicted = 0u128;
        for (i, w) in wins.iter().enumerate() {
            if mask >> i & 1 == 1 {
                tp += w.frequency as u128;
                predicted += m as u128;
            }
        }
        let num = 2 * tp;
        let den = predicted + total;
        let count = mask.count_ones();
        let lhs = num * best_den;
        let rhs = best_num * den;
        if lhs > rhs || (lhs == rhs && count < best_count) {
            best_num = num;
            best_den = den;
            best_mask = mask;
            best_count = count;
        }
    }
    for (i, w) in wins.iter_mut().enumerate() {
        w.active = best_mask >> i & 1 == 1;
    }
    Ok(SrpEnumeration {
        m,
        best_f1: Some(Ratio::new(best_num as u64, best_den as u64)),
        witness: wins,
        assignments,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ThresholdEnumeration {
    #[serde(serialize_with = "crate::srp::ser_opt_ratio")]
    pub best_f1: Option<Ratio<u64>>,
    /// Per-expert thresholds of the maximizer (largest thresholds on ties).
    pub thresholds: Vec<(ExpertKey, usize)>,
}

/// Maximizes the pooled F1 over independent per-expert thresholds in
/// `1..=m + 1`. The budget bounds `experts * log2(m + 1)`.
pub fn brute_force_group_thresholds(
    trace: &RoutingTrace,
    experts: &[ExpertKey],
    m: usize,
    budget: EnumerationBudget,
) -> Result<ThresholdEnumeration, OracleError> {
    if m == 0 {
        return Err(OracleError::InvalidSegmentLength);
    }
    check_experts(trace, experts)?;
    let choices = (m + 1) as u64;
    let bits_per_expert = 64 - (choices - 1).leading_zeros() as u64;
    budget.check(bits_per_expert * experts.len() as u64)?;

    let per_expert: Vec<Vec<usize>> = experts
        .iter()
        .map(|&e| windows(trace, &[e], m).into_iter().map(|w| w.frequency).collect())
        .collect();
    let total: u128 = per_expert.iter().flatten().map(|&f| f as u128).sum();
    if total == 0 {
        return Ok(ThresholdEnumeration {
            best_f1: None,
            thresholds: experts.iter().map(|&e| (e, m + 1)).collect(),
        });
    }

    let combos = choices.pow(experts.len() as u32);
    let (mut best_num, mut best_den) = (0u128, total);
    let mut best = vec![m + 1; experts.len()];
    let mut alphas = vec![0usize; experts.len()];
    // Visit combinations from all thresholds m + 1 downward so the first
    // maximizer found has the largest thresholds.
    for code in 0..combos {
        let mut c = code;
        for a in alphas.iter_mut() {
            *a = m + 1 - (c % choices) as usize;
            c /= choices;
        }
        let (mut tp, mut predicted) = (0u128, 0u128);
        for (freqs, &alpha) in per_expert.iter().zip(&alphas) {
            for &f in freqs.iter().filter(|&&f| f >= alpha) {
                tp += f as u128;
                predicted += m as u128;
            }
        }
        let num = 2 * tp;
        let den = predicted + total;
        if num * best_den > best_num * den {
            best_num = num;
            best_den = den;
            best.copy_from_slice(&alphas);
        }
    }
    Ok(ThresholdEnumeration {
        best_f1: Some(Ratio::new(best_num as u64, best_den as u64)),
        thresholds: experts.iter().copied().zip(best).collect(),
    })
}

/// SRP of an unbounded i.i.d. Bernoulli(`p`) activation stream.
///
/// Window frequencies follow Binomial(m, p); the threshold scan runs on those
/// probability masses in floating point.
pub fn binomial_srp(p: f64, m: usize) -> Result<f64, OracleError> {
    if m == 0 {
        return Err(OracleError::InvalidSegmentLength);
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(OracleError::InvalidProbability(p));
    }
    if p == 0.0 {
        return Err(OracleError::UndefinedSrp);
    }
    let mass: Vec<f64> = (0..=m)
        .map(|f| binomial(m, f) * p.powi(f as i32) * (1.0 - p).powi((m - f) as i32))
        .collect();
    let total: f64 = (0..=m).map(|f| f as f64 * mass[f]).sum();
    let mut best = 0.0f64;
    let (mut tp, mut predicted) = (0.0, 0.0);
    for alpha in (1..=m).rev() {
        tp += alpha as f64 * mass[alpha];
        predicted += mass[alpha];
        let f1 = 2.0 * tp / (m as f64 * predicted + total);
        if f1 > best {
            best = f1;
        }
    }
    Ok(best)
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CacheEnumeration {
    pub hits: u64,
    pub total_activations: u64,
    /// Chosen cache per segment, in sequence order.
    pub caches: Vec<Vec<u32>>,
}

impl CacheEnumeration {
    /// 1.0 when there are no activations at all.
    pub fn hit_rate(&self) -> f64 {
        if self.total_activations == 0 {
            1.0
        } else {
            self.hits as f64 / self.total_activations as f64
        }
    }

    pub fn no_activations(&self) -> bool {
        self.total_activations == 0
    }
}

/// Best hit rate of a cache holding at most `capacity` experts that may be
/// refilled freely at every non-overlapping segment boundary, by trying every
/// subset for every segment.
pub fn brute_force_cache(
    trace: &RoutingTrace,
    layer: usize,
    capacity: usize,
    m: usize,
) -> Result<CacheEnumeration, OracleError> {
    const MAX_EXPERTS: usize = 6;
    const MAX_TOKENS: u64 = 12;
    if m == 0 {
        return Err(OracleError::InvalidSegmentLength);
    }
    if layer >= trace.header.num_layers() {
        return Err(OracleError::LayerOutOfRange(layer));
    }
    let experts = trace.header.experts(layer);
    if experts > MAX_EXPERTS {
        return Err(OracleError::BudgetExceeded {
            needed: experts as u64,
            budget: MAX_EXPERTS as u32,
        });
    }
    let tokens = trace.total_tokens();
    if tokens > MAX_TOKENS {
        return Err(OracleError::BudgetExceeded {
            needed: tokens,
            budget: MAX_TOKENS as u32,
        });
    }

    let mut result = CacheEnumeration {
        hits: 0,
        total_activations: 0,
        caches: Vec::new(),
    };
    for seq in &trace.sequences {
        let lists: Vec<Vec<u32>> = seq.layers[layer].to_lists();
        for segment in lists.chunks(m) {
            let activations: usize = segment.iter().map(Vec::len).sum();
            result.total_activations += activations as u64;
            let (mut best_hits, mut best_set) = (0u64, 0u32);
            for set in 0u32..1 << experts {
                if set.count_ones() as usize > capacity {
                    continue;
                }
                let hits = segment.iter().flatten().filter(|&&e| set >> e & 1 == 1).count() as u64;
                if hits > best_hits {
                    best_hits = hits;
                    best_set = set;
                }
            }
            result.hits += best_hits;
            result
                .caches
                .push((0..experts as u32).filter(|e| best_set >> e & 1 == 1).collect());
        }
    }
    Ok(result)
}
