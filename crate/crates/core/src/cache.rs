//! Per-layer expert cache simulation.
//!
//! The segment cache splits every sequence into consecutive non-overlapping
//! segments of `m` tokens (the last one may be shorter) and, at each segment
//! start, fills the cache with the `capacity` experts used most in that
//! segment, lower index first on ties. Its hit rate (SCH) is the best any
//! cache refilled once per segment can do. LRU is the online baseline: check,
//! then touch or insert, evicting the least recently used expert; it starts
//! empty for every sequence.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::trace::{LayerRouting, RoutingTrace};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CacheError {
    #[error("segment length must be at least 1")]
    InvalidSegmentLength,
    #[error("layer {0} is not part of the trace")]
    LayerOutOfRange(usize),
    #[error("capacity list is empty")]
    EmptyCapacities,
    #[error("capacity list must be sorted ascending")]
    UnsortedCapacities,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CachePolicy {
    OracleSegment,
    Lru,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CacheConfig {
    /// Experts held per layer.
    pub capacity: usize,
    /// Segment length; only used by the segment cache.
    pub m: usize,
    pub policy: CachePolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CacheResult {
    /// `hits / total_activations`, or 1.0 when there are no activations.
    pub hit_rate: f64,
    pub per_layer: Vec<f64>,
    pub hits: u64,
    pub total_activations: u64,
    pub no_activations: bool,
}

impl CacheResult {
    fn from_layers(layers: &[(u64, u64)]) -> Self {
        let hits = layers.iter().map(|l| l.0).sum();
        let total = layers.iter().map(|l| l.1).sum();
        Self {
            hit_rate: rate(hits, total),
            per_layer: layers.iter().map(|&(h, t)| rate(h, t)).collect(),
            hits,
            total_activations: total,
            no_activations: total == 0,
        }
    }

    pub fn misses(&self) -> u64 {
        self.total_activations - self.hits
    }
}

fn rate(hits: u64, total: u64) -> f64 {
    if total == 0 {
        1.0
    } else {
        hits as f64 / total as f64
    }
}

fn check_layer(trace: &RoutingTrace, layer: usize) -> Result<(), CacheError> {
    if layer < trace.header.num_layers() {
        Ok(())
    } else {
        Err(CacheError::LayerOutOfRange(layer))
    }
}

pub fn sch_oracle(trace: &RoutingTrace, layer: usize, capacity: usize, m: usize) -> Result<CacheResult, CacheError> {
    check_layer(trace, layer)?;
    let (hits, total) = segment_hits(trace, layer, &[capacity], m)?;
    Ok(CacheResult::from_layers(&[(hits[0], total)]))
}

pub fn lru_hit_rate(trace: &RoutingTrace, layer: usize, capacity: usize) -> Result<CacheResult, CacheError> {
    check_layer(trace, layer)?;
    let (hits, total) = trace
        .sequences
        .par_iter()
        .map(|seq| lru_simulate(&seq.layers[layer], capacity))
        .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    Ok(CacheResult::from_layers(&[(hits, total)]))
}

/// Every layer under one policy; the aggregate is activation-weighted.
pub fn simulate(trace: &RoutingTrace, config: &CacheConfig) -> Result<CacheResult, CacheError> {
    let layers = (0..trace.header.num_layers())
        .map(|l| {
            let r = match config.policy {
                CachePolicy::OracleSegment => sch_oracle(trace, l, config.capacity, config.m)?,
                CachePolicy::Lru => lru_hit_rate(trace, l, config.capacity)?,
            };
            Ok((r.hits, r.total_activations))
        })
        .collect::<Result<Vec<_>, CacheError>>()?;
    Ok(CacheResult::from_layers(&layers))
}

/// Returns (hits, activations) of an LRU cache over one sequence's layer.
fn lru_simulate(routing: &LayerRouting, capacity: usize) -> (u64, u64) {
    // Most recently used first.
    let mut cache: Vec<u32> = Vec::with_capacity(capacity + 1);
    let (mut hits, mut total) = (0u64, 0u64);
    routing.for_each_activation(|_, e| {
        total += 1;
        if let Some(pos) = cache.iter().position(|&c| c == e) {
            hits += 1;
            cache.remove(pos);
        }
        cache.insert(0, e);
        cache.truncate(capacity);
    });
    (hits, total)
}

/// Segment-cache hits for each capacity, plus total activations.
fn segment_hits(
    trace: &RoutingTrace,
    layer: usize,
    capacities: &[usize],
    m: usize,
) -> Result<(Vec<u64>, u64), CacheError> {
    if m == 0 {
        return Err(CacheError::InvalidSegmentLength);
    }
    let experts = trace.header.experts(layer);
    let fresh = || SegmentTally::new(experts, capacities.len());
    let tally = trace
        .sequences
        .par_iter()
        .fold(fresh, |mut tally, seq| {
            let mut segment = 0;
            seq.layers[layer].for_each_activation(|t, e| {
                if t / m != segment {
                    tally.flush(capacities);
                    segment = t / m;
                }
                tally.add(e);
            });
            tally.flush(capacities);
            tally
        })
        .reduce(fresh, |mut a, b| {
            a.total += b.total;
            for (x, y) in a.hits.iter_mut().zip(&b.hits) {
                *x += y;
            }
            a
        });
    Ok((tally.hits, tally.total))
}

struct SegmentTally {
    counts: Vec<u32>,
    touched: Vec<u32>,
    sorted: Vec<u32>,
    hits: Vec<u64>,
    total: u64,
}

impl SegmentTally {
    fn new(experts: usize, capacities: usize) -> Self {
        Self {
            counts: vec![0; experts],
            touched: Vec::new(),
            sorted: Vec::new(),
            hits: vec![0; capacities],
            total: 0,
        }
    }

    fn add(&mut self, e: u32) {
        let c = &mut self.counts[e as usize];
        if *c == 0 {
            self.touched.push(e);
        }
        *c += 1;
        self.total += 1;
    }

    /// Credits the closing segment: the best cache of size c holds the c
    /// largest counts.
    fn flush(&mut self, capacities: &[usize]) {
        if self.touched.is_empty() {
            return;
        }
        self.sorted.clear();
        for &e in &self.touched {
            self.sorted.push(std::mem::take(&mut self.counts[e as usize]));
        }
        self.touched.clear();
        self.sorted.sort_unstable_by(|a, b| b.cmp(a));
        let mut prefix = 0u64;
        let mut taken = 0usize;
        for (i, &cap) in capacities.iter().enumerate() {
            while taken < cap.min(self.sorted.len()) {
                prefix += self.sorted[taken] as u64;
                taken += 1;
            }
            self.hits[i] += prefix;
        }
    }
}

/// LRU hits for each capacity from reuse (stack) distances: an access hits a
/// cache of size c exactly when fewer than c distinct experts were used since
/// the previous access to the same expert.
fn lru_sweep_hits(trace: &RoutingTrace, layer: usize, capacities: &[usize]) -> (Vec<u64>, u64) {
    let experts = trace.header.experts(layer);
    let cold = experts as u32;
    let fresh = || (vec![0u64; experts + 1], vec![cold; experts]);
    let (distances, _) = trace
        .sequences
        .par_iter()
        .fold(fresh, |(mut distances, mut rank), seq| {
            rank.fill(cold);
            seq.layers[layer].for_each_activation(|_, e| {
                let r = rank[e as usize];
                distances[r as usize] += 1;
                for x in rank.iter_mut() {
                    *x += (*x < r) as u32;
                }
                rank[e as usize] = 0;
            });
            (distances, rank)
        })
        .reduce(fresh, |(mut a, r), (b, _)| {
            for (x, y) in a.iter_mut().zip(&b) {
                *x += y;
            }
            (a, r)
        });
    let total = distances.iter().sum();
    let hits = capacities
        .iter()
        .map(|&c| distances[..c.min(experts)].iter().sum())
        .collect();
    (hits, total)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub capacity: usize,
    pub sch: f64,
    pub lru: f64,
    pub sch_hits: u64,
    pub lru_hits: u64,
    /// True on the knee row.
    pub knee: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CapacitySweep {
    /// `None` for the activation-weighted aggregate over layers.
    pub layer: Option<usize>,
    pub m: usize,
    pub total_activations: u64,
    pub rows: Vec<SweepRow>,
    /// Smallest swept capacity whose SCH reaches 95% of the full-cache hit
    /// rate.
    pub knee: Option<usize>,
}

pub const KNEE_FRACTION: f64 = 0.95;

impl CapacitySweep {
    fn from_hits(layer: Option<usize>, m: usize, capacities: &[usize], sch: &[u64], lru: &[u64], total: u64) -> Self {
        // A cache holding every expert hits on every activation.
        let full = rate(total, total);
        let knee = capacities
            .iter()
            .zip(sch)
            .find(|&(_, &h)| rate(h, total) >= KNEE_FRACTION * full)
            .map(|(&c, _)| c);
        let rows = capacities
            .iter()
            .enumerate()
            .map(|(i, &capacity)| SweepRow {
                capacity,
                sch: rate(sch[i], total),
                lru: rate(lru[i], total),
                sch_hits: sch[i],
                lru_hits: lru[i],
                knee: knee == Some(capacity),
            })
            .collect();
        Self {
            layer,
            m,
            total_activations: total,
            rows,
            knee,
        }
    }
}

fn check_capacities(capacities: &[usize]) -> Result<(), CacheError> {
    if capacities.is_empty() {
        return Err(CacheError::EmptyCapacities);
    }
    if capacities.windows(2).any(|w| w[0] > w[1]) {
        return Err(CacheError::UnsortedCapacities);
    }
    Ok(())
}

pub fn capacity_sweep(
    trace: &RoutingTrace,
    layer: usize,
    capacities: &[usize],
    m: usize,
) -> Result<CapacitySweep, CacheError> {
    check_layer(trace, layer)?;
    check_capacities(capacities)?;
    let (sch, total) = segment_hits(trace, layer, capacities, m)?;
    let (lru, _) = lru_sweep_hits(trace, layer, capacities);
    Ok(CapacitySweep::from_hits(Some(layer), m, capacities, &sch, &lru, total))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelSweep {
    pub per_layer: Vec<CapacitySweep>,
    pub aggregate: CapacitySweep,
}

/// Sweeps every layer and adds the activation-weighted aggregate.
pub fn capacity_sweep_model(trace: &RoutingTrace, capacities: &[usize], m: usize) -> Result<ModelSweep, CacheError> {
    check_capacities(capacities)?;
    let mut sch_total = vec![0u64; capacities.len()];
    let mut lru_total = vec![0u64; capacities.len()];
    let mut activations = 0;
    let mut per_layer = Vec::with_capacity(trace.header.num_layers());
    for layer in 0..trace.header.num_layers() {
        let sweep = capacity_sweep(trace, layer, capacities, m)?;
        for (i, row) in sweep.rows.iter().enumerate() {
            sch_total[i] += row.sch_hits;
            lru_total[i] += row.lru_hits;
        }
        activations += sweep.total_activations;
        per_layer.push(sweep);
    }
    let aggregate = CapacitySweep::from_hits(None, m, capacities, &sch_total, &lru_total, activations);
    Ok(ModelSweep { per_layer, aggregate })
}
