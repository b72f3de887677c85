//! Acceptance gate. Runs every criterion, prints one PASS/FAIL line each, and
//! exits non-zero if any fails.

use std::time::{Duration, Instant};

use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use moelab::cache::{capacity_sweep, lru_hit_rate, sch_oracle};
use moelab::oracle::{
    binomial_srp, brute_force_cache, brute_force_group_thresholds, brute_force_srp_enum, EnumerationBudget,
};
use moelab::report::{build_report, ReportOptions};
use moelab::specialization::{correlate, load_balance_sd, specialization_profiles, CorrelationMethod};
use moelab::srp::{srp_group, srp_model, srp_per_position, srp_single, HistogramBank, SrpError};
use moelab::synth::{gen_domain, gen_iid_topk, gen_sticky, GeneratorConfig};
use moelab::{ExpertKey, LayerRouting, LayerSpec, RoutingTrace, Sequence, TraceHeader};

// Tolerances and bounds.
const ORACLE_INSTANCES: usize = 240;
const ORACLE_TIME_LIMIT: Duration = Duration::from_secs(30);
const UNIT_M_TRACES: usize = 50;
const BINOMIAL_TOLERANCE: f64 = 0.01;
const BINOMIAL_MIN_TOKENS: u64 = 1_000_000;
const BINOMIAL_TIME_LIMIT: Duration = Duration::from_secs(60);
const STICKY_RHOS: [f64; 4] = [0.0, 0.5, 0.9, 0.99];
const SKEWS: [f64; 3] = [0.0, 1.0, 2.0];
const DOMAIN_BOOST: f64 = 2.0;
const DOMAIN_MIN_CORR: f64 = 0.5;
const NO_DOMAIN_MAX_ABS_CORR: f64 = 0.2;
const CACHE_INSTANCES: usize = 240;
const POSITION_MAX_SPREAD: f64 = 0.02;
const PERF_SEQUENCES: usize = 22_528;
const PERF_SEQ_LEN: usize = 512;
const PERF_TOTAL_TOKENS: u64 = 11_534_336;
const PERF_TIME_LIMIT: Duration = Duration::from_secs(600);
const PERF_MEMORY_LIMIT_BYTES: u64 = 4 * 1024 * 1024 * 1024;
const HEADLINE_M: usize = 16;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Single-layer trace where every (token, expert) pair is active with
/// probability `p`.
fn random_trace(rng: &mut ChaCha8Rng, experts: u32, seq_lens: &[usize], p: f64) -> RoutingTrace {
    let mut t = RoutingTrace::new(TraceHeader::new("rand", vec![LayerSpec::new(experts, 0)], 0));
    for &len in seq_lens {
        let lists: Vec<Vec<u32>> = (0..len)
            .map(|_| (0..experts).filter(|_| rng.random::<f64>() < p).collect())
            .collect();
        t.sequences.push(Sequence::new(
            "r",
            vec![0; len],
            vec![LayerRouting::from_lists(lists).unwrap()],
        ));
    }
    t
}

/// Splits `total` tokens into one or two sequences.
fn random_lengths(rng: &mut ChaCha8Rng, total: usize) -> Vec<usize> {
    if total >= 2 && rng.random::<bool>() {
        let cut = rng.random_range(1..total);
        vec![cut, total - cut]
    } else {
        vec![total]
    }
}

fn oracle_equality_srp() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let budget = EnumerationBudget::default();
    let mut defined = 0;
    for i in 0..ORACLE_INSTANCES {
        let tokens = rng.random_range(1..=8);
        let lens = random_lengths(&mut rng, tokens);
        let p = rng.random_range(0.1..0.9);
        let t = random_trace(&mut rng, 2, &lens, p);
        let m = rng.random_range(1..=4);
        let group: Vec<ExpertKey> = match rng.random_range(0..3) {
            0 => vec![ExpertKey::new(0, 0)],
            1 => vec![ExpertKey::new(0, 1)],
            _ => vec![ExpertKey::new(0, 0), ExpertKey::new(0, 1)],
        };
        let enumerated = brute_force_srp_enum(&t, &group, m, budget).map_err(|e| format!("instance {i}: {e}"))?;
        let alpha = enumerated.threshold();
        ensure(alpha.is_some(), || {
            format!("instance {i}: witness is not a threshold set")
        })?;
        match (srp_group(&t, &group, m), enumerated.best_f1) {
            (Ok(r), Some(best)) => {
                defined += 1;
                ensure(r.scan.f1 == best, || {
                    format!("instance {i}: scan {} vs enumeration {best}", r.scan.f1)
                })?;
                ensure(Some(r.alpha()) == alpha, || {
                    format!("instance {i}: scan alpha {} vs witness alpha {alpha:?}", r.alpha())
                })?;
            }
            (Err(SrpError::UndefinedSrp), None) => {}
            (Err(SrpError::InvalidSegmentLength(_)), _) | (_, None) | (Err(_), _) => {
                return Err(format!("instance {i}: scan and enumeration disagree on definedness"));
            }
        }
    }
    let elapsed = start.elapsed();
    ensure(elapsed < ORACLE_TIME_LIMIT, || format!("took {elapsed:?}"))?;
    Ok(format!(
        "{ORACLE_INSTANCES} instances ({defined} defined), exact rational equality, threshold witnesses, {:.2}s",
        elapsed.as_secs_f64()
    ))
}

fn unit_segment_is_perfect() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut checked = 0;
    for i in 0..UNIT_M_TRACES {
        let experts = rng.random_range(1..=6);
        let lens: Vec<usize> = (0..rng.random_range(1..=4)).map(|_| rng.random_range(1..=40)).collect();
        let p = rng.random_range(0.02..0.7);
        let t = random_trace(&mut rng, experts, &lens, p);
        let keys: Vec<ExpertKey> = t.header.expert_keys().collect();
        let bank = HistogramBank::build(&t, &[1, 2, 3, 5, 8]).unwrap();
        for &k in &keys {
            for &m in bank.m_values() {
                match bank.srp_single(k, m) {
                    Ok(r) => {
                        let v = r.srp();
                        ensure((0.0..=1.0).contains(&v), || format!("trace {i} {k} m={m}: srp {v}"))?;
                        if m == 1 {
                            checked += 1;
                            ensure(r.scan.f1 == Ratio::from_integer(1), || {
                                format!("trace {i} {k}: SRP(e,1) = {}", r.scan.f1)
                            })?;
                        }
                    }
                    Err(SrpError::UndefinedSrp) => {}
                    Err(e) => return Err(e.to_string()),
                }
            }
        }
        for &m in bank.m_values() {
            if let Ok(r) = bank.srp_group(&keys, m) {
                ensure((0.0..=1.0).contains(&r.srp()), || {
                    format!("trace {i} group m={m}: {}", r.srp())
                })?;
            }
        }
    }
    Ok(format!(
        "{UNIT_M_TRACES} traces, {checked} activated experts with SRP(e,1) = 1, all values in [0,1]"
    ))
}

fn iid_config(seed: u64) -> GeneratorConfig {
    GeneratorConfig {
        seed,
        num_layers: 2,
        experts_per_layer: 64,
        top_k: 8,
        num_sequences: 128,
        seq_len: 512,
        ..GeneratorConfig::default()
    }
}

fn binomial_match() -> Outcome {
    let start = Instant::now();
    let config = GeneratorConfig {
        num_layers: 1,
        num_sequences: 2048,
        ..iid_config(3)
    };
    let t = gen_iid_topk(&config).map_err(|e| e.to_string())?;
    ensure(t.total_tokens() >= BINOMIAL_MIN_TOKENS, || {
        format!("only {} tokens", t.total_tokens())
    })?;
    let measured = srp_model(&t, HEADLINE_M).map_err(|e| e.to_string())?.pooled.srp();
    let reference = binomial_srp(1.0 / 8.0, HEADLINE_M).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    ensure((measured - reference).abs() <= BINOMIAL_TOLERANCE, || {
        format!("model SRP {measured:.5} vs binomial {reference:.5}")
    })?;
    ensure(elapsed < BINOMIAL_TIME_LIMIT, || format!("took {elapsed:?}"))?;
    Ok(format!(
        "model SRP(m=16) {measured:.5} vs binomial {reference:.5} over {} tokens, {:.1}s",
        t.total_tokens(),
        elapsed.as_secs_f64()
    ))
}

fn sticky_direction() -> Outcome {
    let mut values = Vec::new();
    for rho in STICKY_RHOS {
        let t = gen_sticky(&GeneratorConfig {
            persistence: rho,
            ..iid_config(4)
        })
        .map_err(|e| e.to_string())?;
        values.push(srp_model(&t, HEADLINE_M).map_err(|e| e.to_string())?.pooled.srp());
    }
    let shown = format_pairs(&STICKY_RHOS, &values);
    ensure(values.windows(2).all(|w| w[0] < w[1]), || {
        format!("not strictly increasing: {shown}")
    })?;
    Ok(format!("SRP(m=16) by persistence: {shown}"))
}

fn format_pairs(keys: &[f64], values: &[f64]) -> String {
    keys.iter()
        .zip(values)
        .map(|(k, v)| format!("{k} -> {v:.4}"))
        .collect::<Vec<_>>()
        .join(", ")
}

fn load_balance_direction() -> Outcome {
    let (mut sds, mut srps) = (Vec::new(), Vec::new());
    for sigma in SKEWS {
        let t = gen_iid_topk(&GeneratorConfig {
            logit_skew: sigma,
            ..iid_config(5)
        })
        .map_err(|e| e.to_string())?;
        sds.push(load_balance_sd(&t).map_err(|e| e.to_string())?.mean_sd);
        srps.push(srp_model(&t, HEADLINE_M).map_err(|e| e.to_string())?.pooled.srp());
    }
    let shown = format!(
        "LB SD [{}], SRP [{}]",
        format_pairs(&SKEWS, &sds),
        format_pairs(&SKEWS, &srps)
    );
    ensure(sds.windows(2).all(|w| w[0] < w[1]), || {
        format!("LB SD not increasing: {shown}")
    })?;
    ensure(srps.windows(2).all(|w| w[0] < w[1]), || {
        format!("SRP not increasing: {shown}")
    })?;
    Ok(shown)
}

fn domain_correlation(boost: f64) -> Result<f64, String> {
    let t = gen_domain(&GeneratorConfig {
        num_layers: 4,
        num_domains: 8,
        domain_boost: boost,
        ..iid_config(6)
    })
    .map_err(|e| e.to_string())?;
    let profiles = specialization_profiles(&t, 16).map_err(|e| e.to_string())?;
    let bank = HistogramBank::build(&t, &[HEADLINE_M]).map_err(|e| e.to_string())?;
    let cv: Vec<Option<f64>> = profiles.iter().map(|p| p.domain_cv).collect();
    let srp: Vec<Option<f64>> = profiles
        .iter()
        .map(|p| bank.srp_single(p.expert, HEADLINE_M).ok().map(|r| r.srp()))
        .collect();
    correlate(&cv, &srp, CorrelationMethod::Pearson).map_err(|e| e.to_string())
}

fn specialization_correlation() -> Outcome {
    let boosted = domain_correlation(DOMAIN_BOOST)?;
    let flat = domain_correlation(0.0)?;
    let shown = format!("corr(domain CV, SRP m=16): boost {DOMAIN_BOOST} -> {boosted:.3}, boost 0 -> {flat:.3}");
    ensure(boosted > DOMAIN_MIN_CORR, || {
        format!("boosted correlation too low: {shown}")
    })?;
    ensure(flat.abs() < NO_DOMAIN_MAX_ABS_CORR, || {
        format!("unboosted correlation too high: {shown}")
    })?;
    Ok(shown)
}

/// In-budget instances for the segment cache checks.
fn cache_instances() -> Vec<(RoutingTrace, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    (0..CACHE_INSTANCES)
        .map(|_| {
            let experts = rng.random_range(1..=6);
            let tokens = rng.random_range(1..=12);
            let lens = random_lengths(&mut rng, tokens);
            let p = rng.random_range(0.1..0.8);
            (random_trace(&mut rng, experts, &lens, p), rng.random_range(1..=4))
        })
        .collect()
}

fn cache_correctness() -> Outcome {
    let mut compared = 0;
    for (i, (t, m)) in cache_instances().iter().enumerate() {
        let experts = t.header.experts(0);
        let capacities: Vec<usize> = (0..=experts).collect();
        let sweep = capacity_sweep(t, 0, &capacities, *m).map_err(|e| e.to_string())?;
        for (c, row) in capacities.iter().zip(&sweep.rows) {
            let brute = brute_force_cache(t, 0, *c, *m).map_err(|e| e.to_string())?;
            let sch = sch_oracle(t, 0, *c, *m).map_err(|e| e.to_string())?;
            ensure(
                sch.hits == brute.hits && sch.total_activations == brute.total_activations,
                || {
                    format!(
                        "instance {i} capacity {c}: sch {} vs brute force {}",
                        sch.hits, brute.hits
                    )
                },
            )?;
            ensure(row.sch_hits == sch.hits, || {
                format!("instance {i} capacity {c}: sweep disagrees")
            })?;
            let lru = lru_hit_rate(t, 0, *c).map_err(|e| e.to_string())?;
            ensure(row.lru_hits == lru.hits, || {
                format!("instance {i} capacity {c}: LRU sweep disagrees")
            })?;
            compared += 1;
        }
        ensure(
            sweep
                .rows
                .windows(2)
                .all(|w| w[0].sch <= w[1].sch && w[0].lru <= w[1].lru),
            || format!("instance {i}: hit rate not monotone in capacity"),
        )?;
        ensure(sweep.rows.last().unwrap().sch == 1.0, || {
            format!("instance {i}: full cache below 1.0")
        })?;
    }
    Ok(format!(
        "{CACHE_INSTANCES} instances, {compared} (instance, capacity) pairs: SCH == brute force, monotone, full cache = 1.0"
    ))
}

/// The SCH >= LRU part of the cache criterion, kept separate because it does
/// not hold for the segment cache as defined.
fn cache_dominance() -> Outcome {
    let mut violations = 0;
    let mut first = None;
    let mut pairs = 0;
    for (i, (t, m)) in cache_instances().iter().enumerate() {
        let capacities: Vec<usize> = (0..=t.header.experts(0)).collect();
        let sweep = capacity_sweep(t, 0, &capacities, *m).map_err(|e| e.to_string())?;
        for row in &sweep.rows {
            pairs += 1;
            if row.sch < row.lru {
                violations += 1;
                first.get_or_insert((i, row.capacity, row.sch, row.lru));
            }
        }
    }
    let sticky = gen_sticky(&GeneratorConfig {
        persistence: 0.9,
        ..iid_config(8)
    })
    .map_err(|e| e.to_string())?;
    let sweep = capacity_sweep(&sticky, 0, &[2, 4, 8, 16, 32, 64], HEADLINE_M).map_err(|e| e.to_string())?;
    let sticky_violations: Vec<String> = sweep
        .rows
        .iter()
        .filter(|r| r.sch < r.lru)
        .map(|r| format!("c={} sch {:.4} < lru {:.4}", r.capacity, r.sch, r.lru))
        .collect();
    let knee = sweep.knee.map(|k| k.to_string()).unwrap_or_else(|| "none".into());
    // One expert stays hot for half a segment and then hands over: the
    // segment cache must split its single slot, LRU just follows the switch.
    let mut handover = RoutingTrace::new(TraceHeader::new("handover", vec![LayerSpec::new(2, 0)], 0));
    let lists = [0u32, 0, 0, 1, 1, 1].map(|e| vec![e]);
    handover.sequences.push(Sequence::new(
        "h",
        vec![0; 6],
        vec![LayerRouting::from_lists(lists).unwrap()],
    ));
    let row = &capacity_sweep(&handover, 0, &[1], 6).map_err(|e| e.to_string())?.rows[0];
    let constructed =
        (row.sch < row.lru).then(|| format!("tokens 000111 m=6 c=1 sch {:.4} < lru {:.4}", row.sch, row.lru));
    if violations == 0 && sticky_violations.is_empty() && constructed.is_none() {
        return Ok(format!(
            "SCH >= LRU on {pairs} pairs and the sticky sweep (knee {knee})"
        ));
    }
    let mut parts = Vec::new();
    if let Some((i, c, s, l)) = first {
        parts.push(format!(
            "{violations}/{pairs} random pairs (first: instance {i}, capacity {c}, {s:.4} < {l:.4})"
        ));
    } else {
        parts.push(format!("0/{pairs} random pairs"));
    }
    if !sticky_violations.is_empty() {
        parts.push(format!(
            "sticky rho=0.9 m={HEADLINE_M}: [{}]",
            sticky_violations.join(", ")
        ));
    }
    parts.extend(constructed);
    Err(format!("SCH < LRU on {}", parts.join("; ")))
}

fn group_reduction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let budget = EnumerationBudget::default();
    let mut singletons = 0;
    let mut joint = 0;
    for i in 0..200 {
        let experts = rng.random_range(1..=3);
        let lens: Vec<usize> = (0..rng.random_range(1..=3)).map(|_| rng.random_range(1..=10)).collect();
        let p = rng.random_range(0.1..0.8);
        let t = random_trace(&mut rng, experts, &lens, p);
        let m = rng.random_range(1..=4);
        let keys: Vec<ExpertKey> = t.header.expert_keys().collect();
        for &k in &keys {
            singletons += 1;
            let mut group = srp_group(&t, &[k], m);
            if let Ok(r) = group.as_mut() {
                ensure(r.per_expert_alpha.as_ref().map(|a| a[&k]) == Some(r.alpha()), || {
                    format!("instance {i}: per-expert alpha map")
                })?;
                r.per_expert_alpha = None;
            }
            ensure(group == srp_single(&t, k, m), || {
                format!("instance {i} {k}: singleton group differs")
            })?;
        }
        let pooled = srp_group(&t, &keys, m);
        let thresholds = brute_force_group_thresholds(&t, &keys, m, budget).map_err(|e| e.to_string())?;
        joint += 1;
        match (pooled, thresholds.best_f1) {
            (Ok(r), Some(best)) => {
                ensure(r.scan.f1 == best, || {
                    format!("instance {i}: pooled {} vs joint {best}", r.scan.f1)
                })?;
                ensure(r.per_expert_alpha.unwrap().values().all(|&a| a == r.scan.alpha), || {
                    format!("instance {i}: non-uniform alpha map")
                })?;
            }
            (Err(SrpError::UndefinedSrp), None) => {}
            (r, b) => return Err(format!("instance {i}: pooled {r:?} vs joint {b:?}")),
        }
    }
    Ok(format!("{singletons} singleton groups identical to single-expert SRP; {joint} pooled scans == joint threshold enumeration"))
}

fn positional_flatness() -> Outcome {
    let t = gen_iid_topk(&GeneratorConfig {
        num_layers: 1,
        num_sequences: 1024,
        ..iid_config(10)
    })
    .map_err(|e| e.to_string())?;
    let keys: Vec<ExpertKey> = t.header.layer_keys(0).collect();
    let per = srp_per_position(&t, &keys, HEADLINE_M).map_err(|e| e.to_string())?;
    let values: Vec<f64> = per[1..]
        .iter()
        .map(|s| s.as_ref().map(|s| s.srp()).ok_or("undefined position"))
        .collect::<Result<_, _>>()?;
    let max = values.iter().copied().fold(f64::MIN, f64::max);
    let min = values.iter().copied().fold(f64::MAX, f64::min);
    let spread = max - min;
    ensure(spread < POSITION_MAX_SPREAD, || {
        format!("spread {spread:.4} over {} positions", values.len())
    })?;
    Ok(format!(
        "per-position SRP(m=16) spread {spread:.4} over {} positions",
        values.len()
    ))
}

fn peak_memory_bytes() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kib: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kib * 1024)
}

fn performance() -> Outcome {
    let start = Instant::now();
    let t = gen_sticky(&GeneratorConfig {
        seed: 11,
        num_layers: 16,
        experts_per_layer: 64,
        top_k: 8,
        num_sequences: PERF_SEQUENCES,
        seq_len: PERF_SEQ_LEN,
        persistence: 0.5,
        ..GeneratorConfig::default()
    })
    .map_err(|e| e.to_string())?;
    let generated = start.elapsed();
    let total = moelab::trace::corpus_stats(&t).total_tokens;
    ensure(total == PERF_TOTAL_TOKENS, || format!("corpus has {total} tokens"))?;
    let report = build_report(&t, &ReportOptions::default()).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let peak = peak_memory_bytes();
    ensure(report.srp.len() == 6 * (1 + 16 + 16 * 64), || {
        format!("{} SRP rows", report.srp.len())
    })?;
    ensure(elapsed < PERF_TIME_LIMIT, || format!("took {elapsed:?}"))?;
    let peak = peak.ok_or("peak memory unavailable")?;
    ensure(peak < PERF_MEMORY_LIMIT_BYTES, || {
        format!("peak memory {} MiB", peak >> 20)
    })?;
    Ok(format!(
        "{total} tokens, 16x64 top-8: generate {:.1}s, full report {:.1}s, total {:.1}s on {} thread(s), peak {} MiB",
        generated.as_secs_f64(),
        (elapsed - generated).as_secs_f64(),
        elapsed.as_secs_f64(),
        rayon::current_num_threads(),
        peak >> 20
    ))
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 11] = [
        ("oracle equality (SRP)", oracle_equality_srp),
        ("SRP(e,1) = 1 and SRP in [0,1]", unit_segment_is_perfect),
        ("statistical match with binomial SRP", binomial_match),
        ("consistency direction (sticky)", sticky_direction),
        ("load-balance trade-off direction", load_balance_direction),
        ("specialization correlation", specialization_correlation),
        ("cache correctness", cache_correctness),
        ("cache dominance (SCH >= LRU)", cache_dominance),
        ("group reduction", group_reduction),
        ("positional flatness", positional_flatness),
        ("performance", performance),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        match run() {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
