//! Segment routing best performance (SRP).
//!
//! A segment router with segment length `m` predicts, for every window of `m`
//! consecutive tokens, either "active on all m tokens" or "inactive on all m
//! tokens" for an expert. SRP is the best F1 any such router reaches against
//! the real token-level routing. The optimum always activates exactly the
//! windows whose in-window activation count `f` reaches a threshold `alpha`,
//! so SRP only depends on the histogram of `f` over all windows:
//!
//! ```text
//! F1(alpha) = 2 * S(alpha) / (m * N(alpha) + M)
//! S(alpha) = sum_{f >= alpha} f * counts[f]
//! N(alpha) = sum_{f >= alpha} counts[f]
//! M        = sum_f f * counts[f]
//! ```
//!
//! Numerators and denominators are additive across experts, so a group of
//! experts is scored by scanning their pooled histogram with one threshold.

use std::collections::BTreeMap;

use num_rational::Ratio;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::trace::{ExpertKey, ExpertList, LayerRouting, RoutingTrace};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SrpError {
    #[error("segment length must be at least 1 (got {0})")]
    InvalidSegmentLength(usize),
    #[error("expert {0} is not part of the trace")]
    ExpertOutOfRange(ExpertKey),
    #[error("expert group is empty")]
    EmptyGroup,
    #[error("SRP is undefined: no window contains an activation")]
    UndefinedSrp,
    #[error("cannot merge histograms with segment lengths {0} and {1}")]
    SegmentLengthMismatch(usize, usize),
}

/// Histogram of per-window activation frequencies for one expert or a pooled
/// group of experts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SegmentHistogram {
    m: usize,
    counts: Vec<u64>,
    num_windows: u64,
    active_mass: u64,
    /// Expert-token slots behind the windows (tokens x experts pooled).
    tokens: u64,
    activations: u64,
    /// Sequences shorter than `m`, which contribute tokens but no windows.
    skipped_sequences: u64,
}

impl SegmentHistogram {
    pub fn new(m: usize) -> Result<Self, SrpError> {
        if m == 0 {
            return Err(SrpError::InvalidSegmentLength(m));
        }
        Ok(Self {
            m,
            counts: vec![0; m + 1],
            num_windows: 0,
            active_mass: 0,
            tokens: 0,
            activations: 0,
            skipped_sequences: 0,
        })
    }

    /// Builds a histogram from raw counts (`counts.len() == m + 1`).
    pub fn from_counts(m: usize, counts: Vec<u64>) -> Result<Self, SrpError> {
        let mut h = Self::new(m)?;
        assert_eq!(counts.len(), m + 1, "counts must have m + 1 entries");
        h.counts = counts;
        h.refresh_totals();
        Ok(h)
    }

    fn refresh_totals(&mut self) {
        self.num_windows = self.counts.iter().sum();
        self.active_mass = self.counts.iter().enumerate().map(|(f, &c)| f as u64 * c).sum();
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn num_windows(&self) -> u64 {
        self.num_windows
    }

    pub fn active_mass(&self) -> u64 {
        self.active_mass
    }

    pub fn tokens(&self) -> u64 {
        self.tokens
    }

    pub fn activations(&self) -> u64 {
        self.activations
    }

    pub fn skipped_sequences(&self) -> u64 {
        self.skipped_sequences
    }

    pub fn merge(&mut self, other: &SegmentHistogram) -> Result<(), SrpError> {
        if self.m != other.m {
            return Err(SrpError::SegmentLengthMismatch(self.m, other.m));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.num_windows += other.num_windows;
        self.active_mass += other.active_mass;
        self.tokens += other.tokens;
        self.activations += other.activations;
        self.skipped_sequences += other.skipped_sequences;
        Ok(())
    }

    /// Multiplies every count by `factor`.
    pub fn scaled(&self, factor: u64) -> Self {
        let mut h = self.clone();
        for c in &mut h.counts {
            *c *= factor;
        }
        h.tokens *= factor;
        h.activations *= factor;
        h.skipped_sequences *= factor;
        h.refresh_totals();
        h
    }
}

/// Adds every length-`m` window of one sequence's layer to `counts`, laid out
/// as `counts[expert * (m + 1) + f]`.
///
/// Window starts are visited in order; moving from start `p - 1` to `p` drops
/// token `p - 1` and adds token `p + m - 1`, so only the experts on those two
/// tokens change frequency. Each expert's current frequency is credited with
/// the number of starts it was held for whenever it changes.
fn sweep_windows(routing: &LayerRouting, m: usize, freq: &mut [u32], since: &mut [u32], counts: &mut [u64]) {
    let (per_token, ids) = routing.raw();
    match ids {
        ExpertList::U8(ids) => sweep_ids(per_token, ids, m, freq, since, counts),
        ExpertList::U16(ids) => sweep_ids(per_token, ids, m, freq, since, counts),
        ExpertList::U32(ids) => sweep_ids(per_token, ids, m, freq, since, counts),
    }
}

fn sweep_ids<T: Copy + Into<u32>>(
    per_token: &[u8],
    ids: &[T],
    m: usize,
    freq: &mut [u32],
    since: &mut [u32],
    counts: &mut [u64],
) {
    let len = per_token.len();
    if len < m {
        return;
    }
    let windows = (len - m + 1) as u32;
    let stride = m + 1;
    freq.fill(0);
    since.fill(0);
    let mut enter_at = 0usize;
    for &c in &per_token[..m - 1] {
        for &e in &ids[enter_at..enter_at + c as usize] {
            freq[e.into() as usize] += 1;
        }
        enter_at += c as usize;
    }
    let mut leave_at = 0usize;
    let mut credit = |e: usize, p: u32, freq: &mut [u32]| {
        counts[e * stride + freq[e] as usize] += (p - since[e]) as u64;
        since[e] = p;
    };
    for p in 0..windows {
        if p > 0 {
            let c = per_token[p as usize - 1] as usize;
            for &e in &ids[leave_at..leave_at + c] {
                let e = e.into() as usize;
                credit(e, p, freq);
                freq[e] -= 1;
            }
            leave_at += c;
        }
        let c = per_token[p as usize + m - 1] as usize;
        for &e in &ids[enter_at..enter_at + c] {
            let e = e.into() as usize;
            credit(e, p, freq);
            freq[e] += 1;
        }
        enter_at += c;
    }
    for (e, (&f, &t)) in freq.iter().zip(since.iter()).enumerate() {
        counts[e * stride + f as usize] += (windows - t) as u64;
    }
}

/// Outcome of the threshold scan over one histogram.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SrpScan {
    pub m: usize,
    /// Best F1 as an exact fraction.
    #[serde(serialize_with = "ser_ratio")]
    pub f1: Ratio<u64>,
    /// Smallest activation count at which a window is predicted active;
    /// `m + 1` means no window is.
    pub alpha: usize,
    /// Windows predicted active at `alpha`.
    pub predicted_windows: u64,
    pub num_windows: u64,
    pub active_mass: u64,
}

impl SrpScan {
    pub fn srp(&self) -> f64 {
        ratio_to_f64(&self.f1)
    }
}

pub(crate) fn ratio_to_f64(r: &Ratio<u64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

pub(crate) fn ser_opt_ratio<S: serde::Serializer>(r: &Option<Ratio<u64>>, s: S) -> Result<S::Ok, S::Error> {
    match r {
        Some(r) => ser_ratio(r, s),
        None => s.serialize_none(),
    }
}

pub(crate) fn ser_ratio<S: serde::Serializer>(r: &Ratio<u64>, s: S) -> Result<S::Ok, S::Error> {
    use serde::ser::SerializeStruct;
    let mut st = s.serialize_struct("Ratio", 2)?;
    st.serialize_field("num", r.numer())?;
    st.serialize_field("den", r.denom())?;
    st.end()
}

/// Finds the threshold maximizing F1.
///
/// Every candidate is compared exactly by cross-multiplication; on equal F1
/// the larger threshold wins, giving the sparsest optimal segment router.
pub fn srp_scan(hist: &SegmentHistogram) -> Result<SrpScan, SrpError> {
    let m = hist.m;
    let mass = hist.active_mass as u128;
    if mass == 0 {
        return Err(SrpError::UndefinedSrp);
    }
    let (mut best_num, mut best_den) = (0u128, 1u128);
    let mut best_alpha = m + 1;
    let mut best_predicted = 0u64;
    let (mut suffix_mass, mut suffix_windows) = (0u128, 0u128);
    for alpha in (1..=m).rev() {
        suffix_mass += alpha as u128 * hist.counts[alpha] as u128;
        suffix_windows += hist.counts[alpha] as u128;
        let num = 2 * suffix_mass;
        let den = m as u128 * suffix_windows + mass;
        if num * best_den > best_num * den {
            best_num = num;
            best_den = den;
            best_alpha = alpha;
            best_predicted = suffix_windows as u64;
        }
    }
    Ok(SrpScan {
        m,
        f1: Ratio::new(best_num as u64, best_den as u64),
        alpha: best_alpha,
        predicted_windows: best_predicted,
        num_windows: hist.num_windows,
        active_mass: hist.active_mass,
    })
}

/// SRP of one expert or group, with the segment routing size ratio.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SrpResult {
    #[serde(flatten)]
    pub scan: SrpScan,
    /// Mean experts the optimal segment router activates per window, divided
    /// by the mean experts the original router activated per token.
    pub size_ratio: f64,
    pub skipped_sequences: u64,
    /// Threshold per member expert (all equal to `scan.alpha`) for groups.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_expert_alpha: Option<BTreeMap<ExpertKey, usize>>,
}

impl SrpResult {
    pub fn srp(&self) -> f64 {
        self.scan.srp()
    }

    pub fn alpha(&self) -> usize {
        self.scan.alpha
    }

    fn from_histogram(hist: &SegmentHistogram) -> Result<Self, SrpError> {
        let scan = srp_scan(hist)?;
        let predicted_rate = scan.predicted_windows as f64 / hist.num_windows as f64;
        let observed_rate = hist.activations as f64 / hist.tokens as f64;
        Ok(Self {
            scan,
            size_ratio: predicted_rate / observed_rate,
            skipped_sequences: hist.skipped_sequences,
            per_expert_alpha: None,
        })
    }
}

/// Per-expert window histograms for a set of experts and segment lengths,
/// built in one pass over the trace.
#[derive(Debug, Clone)]
pub struct HistogramBank {
    m_values: Vec<usize>,
    keys: Vec<ExpertKey>,
    /// `hists[slot * m_values.len() + mi]`
    hists: Vec<SegmentHistogram>,
}

impl HistogramBank {
    /// Histograms for every expert of the trace.
    pub fn build(trace: &RoutingTrace, m_values: &[usize]) -> Result<Self, SrpError> {
        let keys: Vec<ExpertKey> = trace.header.expert_keys().collect();
        Self::build_for(trace, &keys, m_values)
    }

    /// Histograms for the given experts only.
    pub fn build_for(trace: &RoutingTrace, keys: &[ExpertKey], m_values: &[usize]) -> Result<Self, SrpError> {
        if let Some(&m) = m_values.iter().find(|&&m| m == 0) {
            return Err(SrpError::InvalidSegmentLength(m));
        }
        let header = &trace.header;
        if let Some(&k) = keys.iter().find(|k| !header.contains(**k)) {
            return Err(SrpError::ExpertOutOfRange(k));
        }
        let mut keys = keys.to_vec();
        keys.sort();
        keys.dedup();

        // slot_of[layer][index] -> slot in `keys`
        let mut slot_of: Vec<Vec<Option<usize>>> =
            header.layers.iter().map(|l| vec![None; l.experts as usize]).collect();
        for (slot, k) in keys.iter().enumerate() {
            slot_of[k.layer as usize][k.index as usize] = Some(slot);
        }
        let active_layers: Vec<usize> = (0..header.num_layers())
            .filter(|&l| slot_of[l].iter().any(Option::is_some))
            .collect();

        let width = m_values.len();
        let fresh = || LayerTotals::new(header, &active_layers, m_values);
        let totals = trace
            .sequences
            .par_iter()
            .fold(fresh, |mut acc, seq| {
                acc.add(seq, &active_layers, m_values);
                acc
            })
            .reduce(fresh, |mut a, b| {
                a.merge(&b);
                a
            });

        let hists = keys
            .iter()
            .flat_map(|k| {
                let li = active_layers
                    .binary_search(&(k.layer as usize))
                    .expect("layer of a key");
                let e = k.index as usize;
                let totals = &totals;
                m_values.iter().enumerate().map(move |(mi, &m)| {
                    let stride = m + 1;
                    let mut h = SegmentHistogram::new(m).expect("m checked");
                    h.counts = totals.counts[li][mi][e * stride..(e + 1) * stride].to_vec();
                    h.tokens = totals.tokens;
                    h.activations = totals.activations[li][e];
                    h.skipped_sequences = totals.skipped[mi];
                    h.refresh_totals();
                    h
                })
            })
            .collect::<Vec<_>>();
        debug_assert_eq!(hists.len(), keys.len() * width);

        Ok(Self {
            m_values: m_values.to_vec(),
            keys,
            hists,
        })
    }

    pub fn m_values(&self) -> &[usize] {
        &self.m_values
    }

    pub fn keys(&self) -> &[ExpertKey] {
        &self.keys
    }

    pub fn histogram(&self, key: ExpertKey, m: usize) -> Option<&SegmentHistogram> {
        let slot = self.keys.binary_search(&key).ok()?;
        let mi = self.m_values.iter().position(|&x| x == m)?;
        Some(&self.hists[slot * self.m_values.len() + mi])
    }

    /// Pooled histogram of a group of experts held by the bank.
    pub fn pooled(&self, keys: &[ExpertKey], m: usize) -> Result<SegmentHistogram, SrpError> {
        if keys.is_empty() {
            return Err(SrpError::EmptyGroup);
        }
        let mut pooled = SegmentHistogram::new(m)?;
        for &k in keys {
            let h = self.histogram(k, m).ok_or(SrpError::ExpertOutOfRange(k))?;
            pooled.merge(h)?;
        }
        Ok(pooled)
    }

    pub fn srp_single(&self, key: ExpertKey, m: usize) -> Result<SrpResult, SrpError> {
        let h = self.histogram(key, m).ok_or(SrpError::ExpertOutOfRange(key))?;
        SrpResult::from_histogram(h)
    }

    pub fn srp_group(&self, keys: &[ExpertKey], m: usize) -> Result<SrpResult, SrpError> {
        let mut result = SrpResult::from_histogram(&self.pooled(keys, m)?)?;
        let alpha = result.scan.alpha;
        result.per_expert_alpha = Some(keys.iter().map(|&k| (k, alpha)).collect());
        Ok(result)
    }
}

/// Dense per-layer window counts accumulated over sequences.
#[derive(Clone)]
struct LayerTotals {
    /// `counts[layer slot][m slot][expert * (m + 1) + f]`
    counts: Vec<Vec<Vec<u64>>>,
    /// `activations[layer slot][expert]`
    activations: Vec<Vec<u64>>,
    tokens: u64,
    /// Sequences shorter than each m.
    skipped: Vec<u64>,
    freq: Vec<u32>,
    since: Vec<u32>,
}

impl LayerTotals {
    fn new(header: &crate::trace::TraceHeader, layers: &[usize], m_values: &[usize]) -> Self {
        let widest = layers.iter().map(|&l| header.experts(l)).max().unwrap_or(0);
        Self {
            counts: layers
                .iter()
                .map(|&l| m_values.iter().map(|&m| vec![0; header.experts(l) * (m + 1)]).collect())
                .collect(),
            activations: layers.iter().map(|&l| vec![0; header.experts(l)]).collect(),
            tokens: 0,
            skipped: vec![0; m_values.len()],
            freq: vec![0; widest],
            since: vec![0; widest],
        }
    }

    fn add(&mut self, seq: &crate::trace::Sequence, layers: &[usize], m_values: &[usize]) {
        self.tokens += seq.len() as u64;
        for (mi, &m) in m_values.iter().enumerate() {
            if seq.len() < m {
                self.skipped[mi] += 1;
            }
        }
        for (li, &l) in layers.iter().enumerate() {
            let routing = &seq.layers[l];
            let experts = self.activations[li].len();
            let acts = &mut self.activations[li];
            routing.for_each_activation(|_, e| acts[e as usize] += 1);
            for (mi, &m) in m_values.iter().enumerate() {
                sweep_windows(
                    routing,
                    m,
                    &mut self.freq[..experts],
                    &mut self.since[..experts],
                    &mut self.counts[li][mi],
                );
            }
        }
    }

    fn merge(&mut self, other: &Self) {
        fn add(a: &mut [u64], b: &[u64]) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                add(x, y);
            }
        }
        for (a, b) in self.activations.iter_mut().zip(&other.activations) {
            add(a, b);
        }
        add(&mut self.skipped, &other.skipped);
        self.tokens += other.tokens;
    }
}

pub fn build_segment_histogram(
    trace: &RoutingTrace,
    expert: ExpertKey,
    m: usize,
) -> Result<SegmentHistogram, SrpError> {
    let bank = HistogramBank::build_for(trace, &[expert], &[m])?;
    Ok(bank.histogram(expert, m).expect("built").clone())
}

pub fn srp_single(trace: &RoutingTrace, expert: ExpertKey, m: usize) -> Result<SrpResult, SrpError> {
    SrpResult::from_histogram(&build_segment_histogram(trace, expert, m)?)
}

pub fn srp_group(trace: &RoutingTrace, experts: &[ExpertKey], m: usize) -> Result<SrpResult, SrpError> {
    if experts.is_empty() {
        return Err(SrpError::EmptyGroup);
    }
    HistogramBank::build_for(trace, experts, &[m])?.srp_group(experts, m)
}

pub fn srp_layer(trace: &RoutingTrace, layer: usize, m: usize) -> Result<SrpResult, SrpError> {
    let keys = layer_keys(trace, layer)?;
    srp_group(trace, &keys, m)
}

fn layer_keys(trace: &RoutingTrace, layer: usize) -> Result<Vec<ExpertKey>, SrpError> {
    if layer >= trace.header.num_layers() {
        return Err(SrpError::ExpertOutOfRange(ExpertKey::new(layer as u32, 0)));
    }
    Ok(trace.header.layer_keys(layer).collect())
}

/// Model-scope SRP: all experts of all layers pooled, plus per-layer values
/// and their unweighted mean.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelSrp {
    pub pooled: SrpResult,
    pub per_layer: Vec<Option<SrpResult>>,
    pub mean_layer_srp: Option<f64>,
    /// Mean single-expert SRP over experts with a defined value.
    pub mean_expert_srp: Option<f64>,
}

pub fn srp_model(trace: &RoutingTrace, m: usize) -> Result<ModelSrp, SrpError> {
    model_from_bank(trace, &HistogramBank::build(trace, &[m])?, m)
}

pub(crate) fn model_from_bank(trace: &RoutingTrace, bank: &HistogramBank, m: usize) -> Result<ModelSrp, SrpError> {
    let all: Vec<ExpertKey> = trace.header.expert_keys().collect();
    let mut pooled = bank.srp_group(&all, m)?;
    pooled.per_expert_alpha = None;
    let per_layer: Vec<Option<SrpResult>> = (0..trace.header.num_layers())
        .map(|l| {
            let keys: Vec<ExpertKey> = trace.header.layer_keys(l).collect();
            bank.srp_group(&keys, m).ok().map(|mut r| {
                r.per_expert_alpha = None;
                r
            })
        })
        .collect();
    let mean_layer_srp = mean(per_layer.iter().flatten().map(SrpResult::srp));
    let mean_expert_srp = mean(all.iter().filter_map(|&k| bank.srp_single(k, m).ok()).map(|r| r.srp()));
    Ok(ModelSrp {
        pooled,
        per_layer,
        mean_layer_srp,
        mean_expert_srp,
    })
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// SRP restricted to windows starting at each position.
///
/// Positions run up to the shortest sequence's last full window; `None`
/// marks positions whose windows hold no activation.
pub fn srp_per_position(
    trace: &RoutingTrace,
    experts: &[ExpertKey],
    m: usize,
) -> Result<Vec<Option<SrpScan>>, SrpError> {
    if m == 0 {
        return Err(SrpError::InvalidSegmentLength(m));
    }
    if experts.is_empty() {
        return Err(SrpError::EmptyGroup);
    }
    if let Some(&k) = experts.iter().find(|k| !trace.header.contains(**k)) {
        return Err(SrpError::ExpertOutOfRange(k));
    }
    let shortest = trace.sequences.iter().map(|s| s.len()).min().unwrap_or(0);
    if shortest < m {
        return Ok(Vec::new());
    }
    let positions = shortest - m + 1;
    let span = shortest;

    let counts = trace
        .sequences
        .par_iter()
        .fold(
            || (vec![vec![0u64; m + 1]; positions], vec![0u32; span + 1]),
            |(mut counts, mut prefix), seq| {
                for k in experts {
                    let routing = &seq.layers[k.layer as usize];
                    prefix.iter_mut().for_each(|p| *p = 0);
                    routing.for_each_activation(|t, e| {
                        if e == k.index && t < span {
                            prefix[t + 1] = 1;
                        }
                    });
                    for t in 0..span {
                        prefix[t + 1] += prefix[t];
                    }
                    for (p, row) in counts.iter_mut().enumerate() {
                        row[(prefix[p + m] - prefix[p]) as usize] += 1;
                    }
                }
                (counts, prefix)
            },
        )
        .map(|(c, _)| c)
        .reduce(
            || vec![vec![0u64; m + 1]; positions],
            |mut a, b| {
                for (x, y) in a.iter_mut().zip(&b) {
                    for (u, v) in x.iter_mut().zip(y) {
                        *u += v;
                    }
                }
                a
            },
        );

    Ok(counts
        .into_iter()
        .map(|row| {
            let h = SegmentHistogram::from_counts(m, row).expect("m checked");
            srp_scan(&h).ok()
        })
        .collect())
}
