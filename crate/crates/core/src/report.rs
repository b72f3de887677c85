//! Result tables shared by the individual commands and the full report.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cache::{capacity_sweep_model, CacheError, CapacitySweep, ModelSweep};
use crate::specialization::{
    correlate, load_balance_sd, specialization_profiles, CorrelationMethod, LoadBalanceReport, SpecError,
    SpecializationProfile, DEFAULT_MIN_SUPPORT,
};
use crate::srp::{model_from_bank, HistogramBank, SrpError, SrpResult};
use crate::trace::{corpus_stats, ExpertKey, RoutingTrace, StatsReport};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const DEFAULT_M_VALUES: [usize; 6] = [1, 2, 4, 8, 16, 32];
pub const DEFAULT_SPECIALIZATION_M: usize = 16;
pub const DEFAULT_CACHE_M: usize = 16;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error(transparent)]
    Srp(#[from] SrpError),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    Spec(#[from] SpecError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Model,
    Layer,
    Expert,
}

impl Scope {
    pub const ALL: [Scope; 3] = [Scope::Model, Scope::Layer, Scope::Expert];

    pub fn name(self) -> &'static str {
        match self {
            Scope::Model => "model",
            Scope::Layer => "layer",
            Scope::Expert => "expert",
        }
    }
}

/// One SRP row. Undefined rows (never-activated experts) carry no value.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SrpRecord {
    pub scope: Scope,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layer: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub expert: Option<u32>,
    pub m: usize,
    pub srp: Option<f64>,
    pub srp_num: Option<u64>,
    pub srp_den: Option<u64>,
    pub alpha: Option<usize>,
    pub size_ratio: Option<f64>,
    pub num_windows: u64,
    pub active_mass: u64,
    pub undefined: bool,
}

impl SrpRecord {
    fn new(
        scope: Scope,
        layer: Option<u32>,
        expert: Option<u32>,
        m: usize,
        result: Result<SrpResult, SrpError>,
        windows: u64,
    ) -> Result<Self, SrpError> {
        let mut rec = Self {
            scope,
            layer,
            expert,
            m,
            srp: None,
            srp_num: None,
            srp_den: None,
            alpha: None,
            size_ratio: None,
            num_windows: windows,
            active_mass: 0,
            undefined: true,
        };
        match result {
            Ok(r) => {
                rec.srp = Some(r.srp());
                rec.srp_num = Some(*r.scan.f1.numer());
                rec.srp_den = Some(*r.scan.f1.denom());
                rec.alpha = Some(r.scan.alpha);
                rec.size_ratio = Some(r.size_ratio);
                rec.num_windows = r.scan.num_windows;
                rec.active_mass = r.scan.active_mass;
                rec.undefined = false;
            }
            Err(SrpError::UndefinedSrp) => {}
            Err(e) => return Err(e),
        }
        Ok(rec)
    }
}

/// SRP rows ordered by (scope, layer, expert, m).
pub fn srp_records(
    trace: &RoutingTrace,
    bank: &HistogramBank,
    m_values: &[usize],
    scopes: &[Scope],
) -> Result<Vec<SrpRecord>, SrpError> {
    let header = &trace.header;
    let all: Vec<ExpertKey> = header.expert_keys().collect();
    let windows = |keys: &[ExpertKey], m: usize| -> u64 { bank.pooled(keys, m).map(|h| h.num_windows()).unwrap_or(0) };
    let mut scopes = scopes.to_vec();
    scopes.sort();
    scopes.dedup();
    let mut out = Vec::new();
    for scope in scopes {
        match scope {
            Scope::Model => {
                for &m in m_values {
                    let r = bank.srp_group(&all, m).map(|mut r| {
                        r.per_expert_alpha = None;
                        r
                    });
                    out.push(SrpRecord::new(scope, None, None, m, r, windows(&all, m))?);
                }
            }
            Scope::Layer => {
                for l in 0..header.num_layers() {
                    let keys: Vec<ExpertKey> = header.layer_keys(l).collect();
                    for &m in m_values {
                        let r = bank.srp_group(&keys, m);
                        out.push(SrpRecord::new(scope, Some(l as u32), None, m, r, windows(&keys, m))?);
                    }
                }
            }
            Scope::Expert => {
                for &k in &all {
                    for &m in m_values {
                        let r = bank.srp_single(k, m);
                        out.push(SrpRecord::new(
                            scope,
                            Some(k.layer),
                            Some(k.index),
                            m,
                            r,
                            windows(&[k], m),
                        )?);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Model-scope averages reported next to the pooled value.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelSrpSummary {
    pub m: usize,
    pub pooled_srp: Option<f64>,
    pub per_layer_srp: Vec<Option<f64>>,
    pub mean_layer_srp: Option<f64>,
    pub mean_expert_srp: Option<f64>,
}

pub fn model_srp_summaries(
    trace: &RoutingTrace,
    bank: &HistogramBank,
    m_values: &[usize],
) -> Result<Vec<ModelSrpSummary>, SrpError> {
    m_values
        .iter()
        .map(|&m| match model_from_bank(trace, bank, m) {
            Ok(r) => Ok(ModelSrpSummary {
                m,
                pooled_srp: Some(r.pooled.srp()),
                per_layer_srp: r.per_layer.iter().map(|l| l.as_ref().map(SrpResult::srp)).collect(),
                mean_layer_srp: r.mean_layer_srp,
                mean_expert_srp: r.mean_expert_srp,
            }),
            Err(SrpError::UndefinedSrp) => Ok(ModelSrpSummary {
                m,
                pooled_srp: None,
                per_layer_srp: vec![None; trace.header.num_layers()],
                mean_layer_srp: None,
                mean_expert_srp: None,
            }),
            Err(e) => Err(e),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpecializationRow {
    pub layer: u32,
    pub index: u32,
    pub activation_rate: f64,
    pub domain_cv: Option<f64>,
    pub vocab_input: Option<f64>,
    pub vocab_pred: Option<f64>,
    pub vocab_truth: Option<f64>,
    /// Single-expert SRP at the specialization segment length.
    pub srp: Option<f64>,
}

pub fn specialization_rows(
    profiles: &[SpecializationProfile],
    bank: &HistogramBank,
    m: usize,
) -> Vec<SpecializationRow> {
    profiles
        .iter()
        .map(|p| SpecializationRow {
            layer: p.expert.layer,
            index: p.expert.index,
            activation_rate: p.activation_rate,
            domain_cv: p.domain_cv,
            vocab_input: p.vocab_scores.input,
            vocab_pred: p.vocab_scores.predicted,
            vocab_truth: p.vocab_scores.ground_truth,
            srp: bank.srp_single(p.expert, m).ok().map(|r| r.srp()),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationEntry {
    pub x: String,
    pub y: String,
    pub method: CorrelationMethod,
    pub value: Option<f64>,
    /// Pairs with both values defined.
    pub pairs: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Correlations of per-expert SRP with each specialization measure.
pub fn correlation_summary(rows: &[SpecializationRow]) -> Vec<CorrelationEntry> {
    let srp: Vec<Option<f64>> = rows.iter().map(|r| r.srp).collect();
    let measures: [(&str, Vec<Option<f64>>); 5] = [
        ("domain_cv", rows.iter().map(|r| r.domain_cv).collect()),
        ("vocab_input", rows.iter().map(|r| r.vocab_input).collect()),
        ("vocab_pred", rows.iter().map(|r| r.vocab_pred).collect()),
        ("vocab_truth", rows.iter().map(|r| r.vocab_truth).collect()),
        (
            "activation_rate",
            rows.iter().map(|r| Some(r.activation_rate)).collect(),
        ),
    ];
    let mut out = Vec::new();
    for (name, values) in &measures {
        let pairs = values
            .iter()
            .zip(&srp)
            .filter(|(a, b)| a.is_some() && b.is_some())
            .count();
        for method in [CorrelationMethod::Pearson, CorrelationMethod::Spearman] {
            let r = correlate(values, &srp, method);
            out.push(CorrelationEntry {
                x: name.to_string(),
                y: "srp".to_string(),
                method,
                value: r.as_ref().ok().copied(),
                pairs,
                error: r.err().map(|e| e.to_string()),
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportOptions {
    pub m_values: Vec<usize>,
    pub scopes: Vec<Scope>,
    pub min_support: u64,
    /// Segment length of the per-expert SRP correlated with specialization.
    pub specialization_m: usize,
    pub cache_m: usize,
    /// Cache capacities to sweep; every capacity from 0 to the widest layer
    /// when absent.
    pub capacities: Option<Vec<usize>>,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self {
            m_values: DEFAULT_M_VALUES.to_vec(),
            scopes: Scope::ALL.to_vec(),
            min_support: DEFAULT_MIN_SUPPORT,
            specialization_m: DEFAULT_SPECIALIZATION_M,
            cache_m: DEFAULT_CACHE_M,
            capacities: None,
        }
    }
}

pub fn default_capacities(trace: &RoutingTrace) -> Vec<usize> {
    let widest = trace
        .header
        .layers
        .iter()
        .map(|l| l.experts as usize)
        .max()
        .unwrap_or(0);
    (0..=widest).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportMetadata {
    pub tool: &'static str,
    pub version: &'static str,
    pub model_id: String,
    pub options: ReportOptions,
}

impl ReportMetadata {
    pub fn new(trace: &RoutingTrace, options: ReportOptions) -> Self {
        Self {
            tool: "moelab",
            version: TOOL_VERSION,
            model_id: trace.header.model_id.clone(),
            options,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportBundle {
    pub metadata: ReportMetadata,
    pub stats: StatsReport,
    pub srp: Vec<SrpRecord>,
    pub model_srp: Vec<ModelSrpSummary>,
    pub load_balance: LoadBalanceReport,
    pub specialization: Vec<SpecializationRow>,
    pub correlations: Vec<CorrelationEntry>,
    pub cache_sweep: ModelSweep,
}

/// Every segment length needed by the report, deduplicated and sorted.
pub fn bank_m_values(options: &ReportOptions) -> Vec<usize> {
    let mut ms = options.m_values.clone();
    ms.push(options.specialization_m);
    ms.sort_unstable();
    ms.dedup();
    ms
}

pub fn build_report(trace: &RoutingTrace, options: &ReportOptions) -> Result<ReportBundle, ReportError> {
    let mut options = options.clone();
    let capacities = options
        .capacities
        .get_or_insert_with(|| default_capacities(trace))
        .clone();
    let bank = HistogramBank::build(trace, &bank_m_values(&options))?;
    let srp = srp_records(trace, &bank, &options.m_values, &options.scopes)?;
    let model_srp = model_srp_summaries(trace, &bank, &options.m_values)?;
    let load_balance = load_balance_sd(trace)?;
    let profiles = specialization_profiles(trace, options.min_support)?;
    let specialization = specialization_rows(&profiles, &bank, options.specialization_m);
    let correlations = correlation_summary(&specialization);
    drop(bank);
    let cache_sweep = capacity_sweep_model(trace, &capacities, options.cache_m)?;
    Ok(ReportBundle {
        metadata: ReportMetadata::new(trace, options),
        stats: corpus_stats(trace),
        srp,
        model_srp,
        load_balance,
        specialization,
        correlations,
        cache_sweep,
    })
}

/// `x` with 6 significant digits; scientific notation outside [1e-4, 1e15).
pub fn format_sig(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let magnitude = x.abs().log10().floor() as i32;
    if !(-4..15).contains(&magnitude) {
        return format!("{x:.5e}");
    }
    let decimals = (5 - magnitude).max(0) as usize;
    format!("{x:.decimals$}")
}

fn opt_sig(x: Option<f64>) -> String {
    x.map(format_sig).unwrap_or_default()
}

fn opt<T: ToString>(x: Option<T>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

pub fn srp_csv(records: &[SrpRecord]) -> String {
    let mut out =
        String::from("scope,layer,expert,m,srp,srp_num,srp_den,alpha,size_ratio,num_windows,active_mass,undefined\n");
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.scope.name(),
            opt(r.layer),
            opt(r.expert),
            r.m,
            opt_sig(r.srp),
            opt(r.srp_num),
            opt(r.srp_den),
            opt(r.alpha),
            opt_sig(r.size_ratio),
            r.num_windows,
            r.active_mass,
            r.undefined
        );
    }
    out
}

fn sweep_rows(out: &mut String, sweep: &CapacitySweep) {
    let layer = sweep.layer.map(|l| l.to_string()).unwrap_or_else(|| "all".to_string());
    for row in &sweep.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            row.capacity,
            layer,
            format_sig(row.sch),
            format_sig(row.lru),
            row.knee
        );
    }
}

pub fn sweep_csv(sweep: &ModelSweep) -> String {
    let mut out = String::from("capacity,layer,sch,lru,knee\n");
    for s in &sweep.per_layer {
        sweep_rows(&mut out, s);
    }
    sweep_rows(&mut out, &sweep.aggregate);
    out
}

pub fn specialization_csv(rows: &[SpecializationRow], m: usize) -> String {
    let mut out = format!("layer,index,activation_rate,domain_cv,vocab_input,vocab_pred,vocab_truth,srp_m{m}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.layer,
            r.index,
            format_sig(r.activation_rate),
            opt_sig(r.domain_cv),
            opt_sig(r.vocab_input),
            opt_sig(r.vocab_pred),
            opt_sig(r.vocab_truth),
            opt_sig(r.srp)
        );
    }
    out
}

pub fn load_balance_csv(report: &LoadBalanceReport) -> String {
    let mut out = String::from("layer,sd\n");
    for (l, sd) in report.per_layer_sd.iter().enumerate() {
        let _ = writeln!(out, "{l},{}", format_sig(*sd));
    }
    let _ = writeln!(out, "mean,{}", format_sig(report.mean_sd));
    let _ = writeln!(out, "pooled,{}", format_sig(report.pooled_sd));
    out
}

pub fn correlation_csv(entries: &[CorrelationEntry]) -> String {
    let mut out = String::from("x,y,method,value,pairs\n");
    for e in entries {
        let method = match e.method {
            CorrelationMethod::Pearson => "pearson",
            CorrelationMethod::Spearman => "spearman",
        };
        let _ = writeln!(out, "{},{},{},{},{}", e.x, e.y, method, opt_sig(e.value), e.pairs);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gen_domain, GeneratorConfig};

    #[test]
    fn six_significant_digits() {
        assert_eq!(format_sig(6.0 / 7.0), "0.857143");
        assert_eq!(format_sig(1.0), "1.00000");
        assert_eq!(format_sig(123.456789), "123.457");
        assert_eq!(format_sig(0.0), "0");
        assert_eq!(format_sig(1.5e-7), "1.50000e-7");
    }

    fn tiny() -> RoutingTrace {
        gen_domain(&GeneratorConfig {
            seed: 5,
            num_layers: 2,
            experts_per_layer: 8,
            top_k: 2,
            num_sequences: 8,
            seq_len: 32,
            vocab_size: 20,
            num_domains: 2,
            domain_boost: 1.0,
            ..GeneratorConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn report_rows_are_ordered_and_complete() {
        let t = tiny();
        let options = ReportOptions {
            m_values: vec![1, 4],
            min_support: 4,
            ..ReportOptions::default()
        };
        let r = build_report(&t, &options).unwrap();
        assert_eq!(r.srp.len(), 2 + 2 * 2 + 16 * 2);
        assert_eq!(r.srp[0].scope, Scope::Model);
        assert_eq!(r.srp[0].srp, Some(1.0));
        assert_eq!(r.specialization.len(), 16);
        assert_eq!(r.cache_sweep.aggregate.rows.len(), 9);
        assert_eq!(r.metadata.options.capacities, Some((0..=8).collect()));
        let csv = srp_csv(&r.srp);
        assert_eq!(csv.lines().count(), 1 + r.srp.len());
        assert!(csv.lines().nth(1).unwrap().starts_with("model,,,1,1.00000,1,1,1,"));
    }

    #[test]
    fn layer_rows_match_srp_layer() {
        let t = tiny();
        let bank = HistogramBank::build(&t, &[4]).unwrap();
        let rows = srp_records(&t, &bank, &[4], &[Scope::Layer]).unwrap();
        for row in rows {
            let direct = crate::srp::srp_layer(&t, row.layer.unwrap() as usize, 4).unwrap();
            assert_eq!(row.srp, Some(direct.srp()));
            assert_eq!(row.alpha, Some(direct.alpha()));
        }
    }
}
