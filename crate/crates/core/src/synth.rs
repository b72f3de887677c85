//! Seeded synthetic routing traces.
//!
//! All randomness comes from ChaCha8 (`rand_chacha`). The per-expert base
//! logits use stream 0 of the seed; sequence `i` uses stream `i + 1`, so a
//! trace does not depend on how sequences are scheduled across threads.
//!
//! Top-k selection samples k experts without replacement with probability
//! proportional to `exp(logit)`, one at a time. This has the same
//! distribution as adding independent Gumbel noise to the logits and keeping
//! the k largest.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::{LayerRouting, LayerSpec, RoutingTrace, Sequence, TraceHeader};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SynthError {
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    Iid,
    Sticky,
    Domain,
}

/// Domain labels used before falling back to `domain{i}`.
pub const DEFAULT_DOMAINS: [&str; 11] = [
    "C4",
    "CommonCrawl",
    "Books",
    "Wikipedia",
    "ArXiv",
    "StackExchange",
    "GitHub",
    "LMArena",
    "OpenMath",
    "OpenCode",
    "OpenScience",
];

pub const SYNTHETIC_DOMAIN: &str = "synthetic";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub generator: GeneratorKind,
    pub seed: u64,
    pub model_id: String,
    pub num_layers: usize,
    pub experts_per_layer: u32,
    pub top_k: u16,
    pub num_sequences: usize,
    pub seq_len: usize,
    pub vocab_size: u32,
    /// Standard deviation of the fixed per-expert logits.
    pub logit_skew: f64,
    /// Probability that a token reuses the previous token's expert set
    /// (sticky generator).
    pub persistence: f64,
    /// Domain generator: number of domains; sequence i belongs to domain
    /// `i % num_domains` and expert e is homed in domain `e % num_domains`.
    pub num_domains: usize,
    /// Logit added to homed experts inside their domain's sequences.
    pub domain_boost: f64,
    /// Optional explicit domain labels (length `num_domains`).
    pub domain_names: Option<Vec<String>>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            generator: GeneratorKind::Iid,
            seed: 0,
            model_id: "synthetic".to_string(),
            num_layers: 4,
            experts_per_layer: 64,
            top_k: 8,
            num_sequences: 256,
            seq_len: 512,
            vocab_size: 32_000,
            logit_skew: 0.0,
            persistence: 0.0,
            num_domains: 8,
            domain_boost: 0.0,
            domain_names: None,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |msg: String| Err(SynthError::InvalidConfig(msg));
        if self.num_layers == 0 {
            return bad("num_layers must be at least 1".into());
        }
        if self.experts_per_layer == 0 {
            return bad("experts_per_layer must be at least 1".into());
        }
        if self.top_k as u32 > self.experts_per_layer {
            return bad(format!(
                "top_k {} exceeds experts_per_layer {}",
                self.top_k, self.experts_per_layer
            ));
        }
        if self.top_k > u8::MAX as u16 {
            return bad(format!("top_k {} exceeds 255", self.top_k));
        }
        if self.vocab_size == 0 {
            return bad("vocab_size must be at least 1".into());
        }
        if !(self.logit_skew.is_finite() && self.logit_skew >= 0.0) {
            return bad(format!(
                "logit_skew {} must be finite and non-negative",
                self.logit_skew
            ));
        }
        if !(0.0..=1.0).contains(&self.persistence) {
            return bad(format!("persistence {} outside [0, 1]", self.persistence));
        }
        if !(self.domain_boost.is_finite() && self.domain_boost >= 0.0) {
            return bad(format!(
                "domain_boost {} must be finite and non-negative",
                self.domain_boost
            ));
        }
        if self.generator == GeneratorKind::Domain && self.num_domains < 2 {
            return bad("domain generator needs at least 2 domains".into());
        }
        if let Some(names) = &self.domain_names {
            if names.len() != self.num_domains {
                return bad(format!(
                    "{} domain names given for {} domains",
                    names.len(),
                    self.num_domains
                ));
            }
        }
        Ok(())
    }

    fn domain_name(&self, d: usize) -> String {
        match &self.domain_names {
            Some(names) => names[d].clone(),
            None => DEFAULT_DOMAINS
                .get(d)
                .map(|s| s.to_string())
                .unwrap_or_else(|| format!("domain{d}")),
        }
    }
}

/// Cumulative weights for drawing experts proportionally to `exp(logit)`.
#[derive(Debug, Clone)]
struct TopKSampler {
    weights: Vec<f64>,
    cumulative: Vec<f64>,
}

impl TopKSampler {
    fn new(logits: &[f64]) -> Self {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let cumulative = weights
            .iter()
            .scan(0.0, |acc, w| {
                *acc += w;
                Some(*acc)
            })
            .collect();
        Self { weights, cumulative }
    }

    /// Draws `k` distinct experts into `out`, sorted ascending.
    fn sample(&self, rng: &mut ChaCha8Rng, k: usize, out: &mut Vec<u32>) {
        const MAX_REJECTIONS: u32 = 16;
        let n = self.weights.len();
        let total = *self.cumulative.last().expect("at least one expert");
        out.clear();
        while out.len() < k {
            let mut rejections = 0;
            let pick = loop {
                if rejections == MAX_REJECTIONS {
                    break self.sample_remaining(rng, out);
                }
                let u = rng.random::<f64>() * total;
                let e = self.cumulative.partition_point(|&c| c <= u).min(n - 1) as u32;
                if !out.contains(&e) {
                    break e;
                }
                rejections += 1;
            };
            out.push(pick);
        }
        out.sort_unstable();
    }

    /// Exact draw restricted to experts not yet in `taken`.
    fn sample_remaining(&self, rng: &mut ChaCha8Rng, taken: &[u32]) -> u32 {
        let free = |e: usize| !taken.contains(&(e as u32));
        let total: f64 = (0..self.weights.len())
            .filter(|&e| free(e))
            .map(|e| self.weights[e])
            .sum();
        let mut u = rng.random::<f64>() * total;
        let mut last = 0;
        for e in (0..self.weights.len()).filter(|&e| free(e)) {
            last = e;
            if u < self.weights[e] {
                return e as u32;
            }
            u -= self.weights[e];
        }
        last as u32
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Fixed per-layer, per-expert logits drawn from Normal(0, skew^2).
fn base_logits(config: &GeneratorConfig) -> Vec<Vec<f64>> {
    let mut rng = stream_rng(config.seed, 0);
    let normal = Normal::new(0.0, config.logit_skew).expect("skew validated");
    (0..config.num_layers)
        .map(|_| {
            (0..config.experts_per_layer)
                .map(|_| {
                    if config.logit_skew == 0.0 {
                        0.0
                    } else {
                        normal.sample(&mut rng)
                    }
                })
                .collect()
        })
        .collect()
}

/// `samplers[group][layer]`; groups are domains for the domain generator.
fn build_samplers(config: &GeneratorConfig, boosted: bool) -> Vec<Vec<TopKSampler>> {
    let logits = base_logits(config);
    let groups = if boosted { config.num_domains } else { 1 };
    (0..groups)
        .map(|d| {
            logits
                .iter()
                .map(|layer| {
                    let adjusted: Vec<f64> = layer
                        .iter()
                        .enumerate()
                        .map(|(e, &l)| {
                            if boosted && e % config.num_domains == d {
                                l + config.domain_boost
                            } else {
                                l
                            }
                        })
                        .collect();
                    TopKSampler::new(&adjusted)
                })
                .collect()
        })
        .collect()
}

fn generate(config: &GeneratorConfig, kind: GeneratorKind) -> Result<RoutingTrace, SynthError> {
    let mut config = config.clone();
    config.generator = kind;
    config.validate()?;
    let boosted = kind == GeneratorKind::Domain;
    let persistence = if kind == GeneratorKind::Sticky {
        config.persistence
    } else {
        0.0
    };
    let samplers = build_samplers(&config, boosted);
    let k = config.top_k as usize;
    let len = config.seq_len;

    let header = TraceHeader::new(
        config.model_id.clone(),
        (0..config.num_layers)
            .map(|_| LayerSpec::new(config.experts_per_layer, config.top_k))
            .collect(),
        config.vocab_size,
    );

    let sequences = (0..config.num_sequences)
        .into_par_iter()
        .map_init(
            || (Vec::with_capacity(k), Vec::with_capacity(k)),
            |(current, previous): &mut (Vec<u32>, Vec<u32>), i| {
                let mut rng = stream_rng(config.seed, i as u64 + 1);
                let (group, domain) = if boosted {
                    let d = i % config.num_domains;
                    (d, config.domain_name(d))
                } else {
                    (0, SYNTHETIC_DOMAIN.to_string())
                };
                let token_ids: Vec<u32> = (0..len).map(|_| rng.random_range(0..config.vocab_size)).collect();
                let layers = samplers[group]
                    .iter()
                    .map(|sampler| {
                        let mut routing = LayerRouting::with_capacity(len, len * k, config.experts_per_layer);
                        previous.clear();
                        for t in 0..len {
                            let keep = t > 0 && persistence > 0.0 && rng.random::<f64>() < persistence;
                            if keep {
                                current.clone_from(previous);
                            } else {
                                sampler.sample(&mut rng, k, current);
                            }
                            routing.push_token(current).expect("top_k validated below 256");
                            std::mem::swap(current, previous);
                        }
                        routing
                    })
                    .collect();
                Sequence::new(domain, token_ids, layers)
            },
        )
        .collect();

    Ok(RoutingTrace { header, sequences })
}

/// Every token draws its experts independently from fixed logits.
pub fn gen_iid_topk(config: &GeneratorConfig) -> Result<RoutingTrace, SynthError> {
    generate(config, GeneratorKind::Iid)
}

/// Like [`gen_iid_topk`], but each token after the first keeps the previous
/// token's expert set with probability `persistence`, per layer.
pub fn gen_sticky(config: &GeneratorConfig) -> Result<RoutingTrace, SynthError> {
    generate(config, GeneratorKind::Sticky)
}

/// Like [`gen_iid_topk`], with sequences labeled round-robin by domain and
/// the domain's homed experts boosted by `domain_boost`.
pub fn gen_domain(config: &GeneratorConfig) -> Result<RoutingTrace, SynthError> {
    generate(config, GeneratorKind::Domain)
}

/// Dispatches on `config.generator`.
pub fn generate_trace(config: &GeneratorConfig) -> Result<RoutingTrace, SynthError> {
    generate(config, config.generator)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{encode_binary, validate};

    fn small(kind: GeneratorKind) -> GeneratorConfig {
        GeneratorConfig {
            generator: kind,
            seed: 11,
            num_layers: 2,
            experts_per_layer: 16,
            top_k: 4,
            num_sequences: 12,
            seq_len: 40,
            vocab_size: 100,
            persistence: 0.5,
            num_domains: 4,
            domain_boost: 2.0,
            logit_skew: 0.5,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn generated_traces_are_valid_and_deterministic() {
        for kind in [GeneratorKind::Iid, GeneratorKind::Sticky, GeneratorKind::Domain] {
            let c = small(kind);
            let a = generate_trace(&c).unwrap();
            assert!(validate(&a).is_empty(), "{kind:?}");
            assert_eq!(encode_binary(&a), encode_binary(&generate_trace(&c).unwrap()));
            assert_eq!(a.total_tokens(), 12 * 40);
        }
    }

    #[test]
    fn seeds_change_output() {
        let mut c = small(GeneratorKind::Iid);
        let a = gen_iid_topk(&c).unwrap();
        c.seed += 1;
        assert_ne!(a, gen_iid_topk(&c).unwrap());
    }

    #[test]
    fn full_persistence_freezes_routing() {
        let mut c = small(GeneratorKind::Sticky);
        c.persistence = 1.0;
        let t = gen_sticky(&c).unwrap();
        for seq in &t.sequences {
            for layer in &seq.layers {
                let first = layer.tokens().next().unwrap().to_vec();
                assert!(layer.tokens().all(|l| l.to_vec() == first));
            }
        }
    }

    #[test]
    fn domains_are_round_robin() {
        let t = gen_domain(&small(GeneratorKind::Domain)).unwrap();
        let labels: Vec<&str> = t.sequences.iter().take(5).map(|s| s.domain.as_str()).collect();
        assert_eq!(labels, ["C4", "CommonCrawl", "Books", "Wikipedia", "C4"]);
    }

    #[test]
    fn top_k_equal_to_experts_selects_all() {
        let mut c = small(GeneratorKind::Iid);
        c.top_k = 16;
        let t = gen_iid_topk(&c).unwrap();
        assert!(t.sequences[0].layers[0].tokens().all(|l| l.len() == 16));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = small(GeneratorKind::Iid);
        c.top_k = 17;
        assert!(gen_iid_topk(&c).is_err());
        let mut c = small(GeneratorKind::Sticky);
        c.persistence = 1.5;
        assert!(gen_sticky(&c).is_err());
        let mut c = small(GeneratorKind::Domain);
        c.num_domains = 1;
        assert!(gen_domain(&c).is_err());
        let mut c = small(GeneratorKind::Iid);
        c.logit_skew = -1.0;
        assert!(gen_iid_topk(&c).is_err());
    }

    #[test]
    fn sampler_matches_softmax_marginals_for_top_one() {
        let sampler = TopKSampler::new(&[0.0, 1.0, 2.0]);
        let mut rng = stream_rng(3, 9);
        let mut out = Vec::new();
        let mut counts = [0u32; 3];
        let n = 60_000;
        for _ in 0..n {
            sampler.sample(&mut rng, 1, &mut out);
            counts[out[0] as usize] += 1;
        }
        let z: f64 = [0.0f64, 1.0, 2.0].iter().map(|l| l.exp()).sum();
        for (e, &c) in counts.iter().enumerate() {
            let p = (e as f64).exp() / z;
            let sd = (p * (1.0 - p) / n as f64).sqrt();
            assert!((c as f64 / n as f64 - p).abs() < 4.0 * sd, "expert {e}");
        }
    }

    #[test]
    fn config_json_round_trip_with_defaults() {
        let c: GeneratorConfig = serde_json::from_str(r#"{"generator":"sticky","persistence":0.9}"#).unwrap();
        assert_eq!(c.generator, GeneratorKind::Sticky);
        assert_eq!(c.seq_len, 512);
        let back: GeneratorConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        assert!(serde_json::from_str::<GeneratorConfig>(r#"{"bogus":1}"#).is_err());
    }
}
