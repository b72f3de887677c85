use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use moelab::report::{Scope, DEFAULT_CACHE_M, DEFAULT_SPECIALIZATION_M};
use moelab::specialization::DEFAULT_MIN_SUPPORT;
use moelab::synth::GeneratorKind;

#[derive(Debug, Parser)]
#[command(
    name = "moelab",
    version,
    about = "Routing consistency analytics for MoE routing traces"
)]
pub struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "MOELAB_THREADS", value_parser = positive)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Rewrite a trace in the format given by the output extension.
    Convert {
        #[arg(long)]
        trace: PathBuf,
        /// Output trace (.moet or .jsonl).
        #[arg(long)]
        out: PathBuf,
    },
    /// Check every trace invariant; exits 1 when any is broken.
    Validate {
        #[arg(long)]
        trace: PathBuf,
        /// Also write the violation list as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Corpus statistics.
    Stats(TraceOut),
    /// Segment routing best performance.
    Srp {
        #[command(flatten)]
        io: TraceOut,
        #[command(flatten)]
        srp: SrpArgs,
    },
    /// Segment cache and LRU hit rates over a capacity sweep.
    Sch {
        #[command(flatten)]
        io: TraceOut,
        #[command(flatten)]
        cache: CacheArgs,
    },
    /// Per-expert specialization table.
    Spec {
        #[command(flatten)]
        io: TraceOut,
        #[command(flatten)]
        spec: SpecArgs,
    },
    /// Load-balance standard deviation.
    Lb(TraceOut),
    /// Correlation of specialization measures with per-expert SRP.
    Corr {
        #[command(flatten)]
        io: TraceOut,
        #[command(flatten)]
        spec: SpecArgs,
    },
    /// Generate a synthetic trace.
    Synth(SynthArgs),
    /// Every table at once: a directory of CSV files plus report.json, or a
    /// single JSON file when --out ends in .json.
    Report {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        srp: ReportSrpArgs,
        #[command(flatten)]
        spec: ReportSpecArgs,
        #[command(flatten)]
        cache: ReportCacheArgs,
    },
    /// Brute-force references, for debugging.
    #[command(hide = true, subcommand)]
    Oracle(OracleCommand),
}

#[derive(Debug, Args)]
pub struct TraceOut {
    /// Input trace (.moet or .jsonl).
    #[arg(long)]
    pub trace: PathBuf,
    /// Output file; .csv or .json. JSON on stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn positive(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(n) => Ok(n),
        Err(e) => Err(e.to_string()),
    }
}

#[derive(Debug, Args)]
pub struct SrpArgs {
    /// Segment lengths.
    #[arg(long = "m", value_delimiter = ',', default_value = "1,2,4,8,16,32", value_parser = positive)]
    pub m_values: Vec<usize>,
    #[arg(long = "scope", value_delimiter = ',', default_value = "model")]
    pub scopes: Vec<ScopeArg>,
}

#[derive(Debug, Args)]
pub struct ReportSrpArgs {
    #[arg(long = "m", value_delimiter = ',', default_value = "1,2,4,8,16,32", value_parser = positive)]
    pub m_values: Vec<usize>,
    #[arg(long = "scope", value_delimiter = ',', default_value = "model,layer,expert")]
    pub scopes: Vec<ScopeArg>,
}

#[derive(Debug, Args)]
pub struct SpecArgs {
    /// Segment length of the per-expert SRP column.
    #[arg(long = "m", default_value_t = DEFAULT_SPECIALIZATION_M, value_parser = positive)]
    pub m: usize,
    /// Minimum token occurrences for the vocabulary score.
    #[arg(long, default_value_t = DEFAULT_MIN_SUPPORT)]
    pub min_support: u64,
}

#[derive(Debug, Args)]
pub struct ReportSpecArgs {
    #[arg(long = "spec-m", default_value_t = DEFAULT_SPECIALIZATION_M, value_parser = positive)]
    pub spec_m: usize,
    #[arg(long, default_value_t = DEFAULT_MIN_SUPPORT)]
    pub min_support: u64,
}

#[derive(Debug, Args)]
pub struct CacheArgs {
    /// Ascending capacities (default: 0 up to the widest layer).
    #[arg(long, value_delimiter = ',')]
    pub capacities: Option<Vec<usize>>,
    /// Segment length of the segment cache.
    #[arg(long = "m", default_value_t = DEFAULT_CACHE_M, value_parser = positive)]
    pub m: usize,
}

#[derive(Debug, Args)]
pub struct ReportCacheArgs {
    #[arg(long, value_delimiter = ',')]
    pub capacities: Option<Vec<usize>>,
    #[arg(long = "cache-m", default_value_t = DEFAULT_CACHE_M, value_parser = positive)]
    pub cache_m: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ScopeArg {
    Model,
    Layer,
    Expert,
}

impl From<ScopeArg> for Scope {
    fn from(s: ScopeArg) -> Self {
        match s {
            ScopeArg::Model => Scope::Model,
            ScopeArg::Layer => Scope::Layer,
            ScopeArg::Expert => Scope::Expert,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum GenArg {
    Iid,
    Sticky,
    Domain,
}

impl From<GenArg> for GeneratorKind {
    fn from(g: GenArg) -> Self {
        match g {
            GenArg::Iid => GeneratorKind::Iid,
            GenArg::Sticky => GeneratorKind::Sticky,
            GenArg::Domain => GeneratorKind::Domain,
        }
    }
}

/// Flags override the values read from --config.
#[derive(Debug, Args)]
pub struct SynthArgs {
    /// JSON generator config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "gen")]
    pub generator: Option<GenArg>,
    /// Probability of reusing the previous token's experts (sticky).
    #[arg(long)]
    pub rho: Option<f64>,
    /// Standard deviation of the per-expert base logits.
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Logit boost of experts inside their home domain (domain).
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub domains: Option<usize>,
    #[arg(long)]
    pub experts: Option<u32>,
    #[arg(long)]
    pub topk: Option<u16>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub seqs: Option<usize>,
    #[arg(long)]
    pub len: Option<usize>,
    #[arg(long)]
    pub vocab: Option<u32>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub model_id: Option<String>,
    /// Output trace (.moet or .jsonl).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum OracleCommand {
    /// Enumerate every window prediction of a single expert and compare with
    /// the threshold scan.
    Srp {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        layer: u32,
        #[arg(long)]
        expert: u32,
        #[arg(long = "m", value_parser = positive)]
        m: usize,
        #[arg(long, default_value_t = 20)]
        max_bits: u32,
    },
    /// Enumerate every per-segment cache content and compare with the
    /// segment cache.
    Cache {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        layer: usize,
        #[arg(long)]
        capacity: usize,
        #[arg(long = "m", value_parser = positive)]
        m: usize,
    },
    /// SRP of an i.i.d. Bernoulli activation stream.
    Binomial {
        #[arg(long)]
        p: f64,
        #[arg(long = "m", value_parser = positive)]
        m: usize,
    },
}
