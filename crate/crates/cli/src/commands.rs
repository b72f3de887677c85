use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use moelab::cache::{capacity_sweep_model, sch_oracle};
use moelab::oracle::{binomial_srp, brute_force_cache, brute_force_srp_enum, EnumerationBudget};
use moelab::report::{
    build_report, correlation_csv, correlation_summary, default_capacities, format_sig, load_balance_csv,
    model_srp_summaries, specialization_csv, specialization_rows, srp_csv, srp_records, sweep_csv, ReportBundle,
    ReportMetadata, ReportOptions, Scope,
};
use moelab::specialization::{load_balance_sd, specialization_profiles};
use moelab::srp::{srp_single, HistogramBank, SrpError};
use moelab::synth::{generate_trace, GeneratorConfig};
use moelab::trace::{corpus_stats, validate, ExpertKey, StatsReport, TraceError};
use moelab::RoutingTrace;
use serde_json::json;

use crate::args::{CacheArgs, Command, OracleCommand, ScopeArg, SpecArgs, SrpArgs, SynthArgs, TraceOut};
use crate::output::{emit, format_of, json_string, write_text, Format};
use crate::Failure;

pub fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Convert { trace, out } => convert(&trace, &out),
        Command::Validate { trace, out } => validate_cmd(&trace, out.as_deref()),
        Command::Stats(io) => stats(&io),
        Command::Srp { io, srp } => srp_cmd(&io, &srp),
        Command::Sch { io, cache } => sch(&io, &cache),
        Command::Spec { io, spec } => spec_cmd(&io, &spec, false),
        Command::Lb(io) => lb(&io),
        Command::Corr { io, spec } => spec_cmd(&io, &spec, true),
        Command::Synth(args) => synth(&args),
        Command::Report {
            trace,
            out,
            srp,
            spec,
            cache,
        } => {
            let options = ReportOptions {
                m_values: srp.m_values,
                scopes: scopes(&srp.scopes),
                min_support: spec.min_support,
                specialization_m: spec.spec_m,
                cache_m: cache.cache_m,
                capacities: cache.capacities,
            };
            report(&trace, &out, options)
        }
        Command::Oracle(cmd) => oracle(cmd),
    }
}

/// Malformed or inconsistent trace contents are violations (exit 1); a
/// missing file or unknown extension is a usage error (exit 2).
fn trace_failure(path: &Path, e: TraceError) -> Failure {
    let error = anyhow::Error::new(e).context(format!("reading {}", path.display()));
    match error.downcast_ref::<TraceError>() {
        Some(TraceError::Io(_) | TraceError::UnknownExtension(_)) => Failure::usage(error),
        _ => Failure::violation(error),
    }
}

fn load(path: &Path) -> Result<RoutingTrace, Failure> {
    RoutingTrace::read_file(path).map_err(|e| trace_failure(path, e))
}

fn check_out(out: Option<&Path>) -> Result<(), Failure> {
    out.map(format_of).transpose().map(|_| ())
}

fn scopes(args: &[ScopeArg]) -> Vec<Scope> {
    args.iter().map(|&s| s.into()).collect()
}

fn metadata(trace: &RoutingTrace, options: ReportOptions) -> ReportMetadata {
    ReportMetadata::new(trace, options)
}

fn convert(input: &Path, out: &Path) -> Result<(), Failure> {
    let trace = load(input)?;
    trace.write_file(out).map_err(|e| trace_failure(out, e))
}

fn validate_cmd(input: &Path, out: Option<&Path>) -> Result<(), Failure> {
    let trace = RoutingTrace::read_file_unchecked(input).map_err(|e| trace_failure(input, e))?;
    let violations = validate(&trace);
    for v in &violations {
        eprintln!("violation: {v}");
    }
    if let Some(path) = out {
        write_text(path, &json_string(&violations))?;
    }
    if violations.is_empty() {
        println!(
            "{}: valid ({} sequences, {} tokens, {} layers)",
            input.display(),
            trace.sequences.len(),
            trace.total_tokens(),
            trace.header.num_layers()
        );
        Ok(())
    } else {
        Err(Failure::violation(anyhow!(
            "{} invariant violation(s)",
            violations.len()
        )))
    }
}

fn stats_csv(stats: &StatsReport) -> String {
    let mut out = String::from("domain,sequences,tokens\n");
    for (domain, tokens) in &stats.tokens_per_domain {
        let sequences = stats.sequences_per_domain.get(domain).copied().unwrap_or(0);
        out.push_str(&format!("{domain},{sequences},{tokens}\n"));
    }
    out
}

fn stats(io: &TraceOut) -> Result<(), Failure> {
    check_out(io.out.as_deref())?;
    let trace = load(&io.trace)?;
    let stats = corpus_stats(&trace);
    let body = json!({ "metadata": metadata(&trace, ReportOptions::default()), "stats": stats });
    emit(io.out.as_deref(), &body, || stats_csv(&stats))
}

fn srp_cmd(io: &TraceOut, args: &SrpArgs) -> Result<(), Failure> {
    check_out(io.out.as_deref())?;
    let trace = load(&io.trace)?;
    let options = ReportOptions {
        m_values: args.m_values.clone(),
        scopes: scopes(&args.scopes),
        ..ReportOptions::default()
    };
    let bank = HistogramBank::build(&trace, &options.m_values).map_err(Failure::usage)?;
    let records = srp_records(&trace, &bank, &options.m_values, &options.scopes).map_err(Failure::usage)?;
    let summaries = model_srp_summaries(&trace, &bank, &options.m_values).map_err(Failure::usage)?;
    let body = json!({
        "metadata": metadata(&trace, options),
        "srp": records,
        "model_srp": summaries,
    });
    emit(io.out.as_deref(), &body, || srp_csv(&records))
}

fn sch(io: &TraceOut, args: &CacheArgs) -> Result<(), Failure> {
    check_out(io.out.as_deref())?;
    let trace = load(&io.trace)?;
    let capacities = args.capacities.clone().unwrap_or_else(|| default_capacities(&trace));
    let sweep = capacity_sweep_model(&trace, &capacities, args.m).map_err(Failure::usage)?;
    let options = ReportOptions {
        cache_m: args.m,
        capacities: Some(capacities),
        ..ReportOptions::default()
    };
    let body = json!({ "metadata": metadata(&trace, options), "cache_sweep": sweep });
    emit(io.out.as_deref(), &body, || sweep_csv(&sweep))
}

fn spec_cmd(io: &TraceOut, args: &SpecArgs, correlations: bool) -> Result<(), Failure> {
    check_out(io.out.as_deref())?;
    let trace = load(&io.trace)?;
    let profiles = specialization_profiles(&trace, args.min_support).map_err(Failure::usage)?;
    let bank = HistogramBank::build(&trace, &[args.m]).map_err(Failure::usage)?;
    let rows = specialization_rows(&profiles, &bank, args.m);
    let options = ReportOptions {
        min_support: args.min_support,
        specialization_m: args.m,
        ..ReportOptions::default()
    };
    let meta = metadata(&trace, options);
    if correlations {
        let entries = correlation_summary(&rows);
        let body = json!({ "metadata": meta, "correlations": entries });
        emit(io.out.as_deref(), &body, || correlation_csv(&entries))
    } else {
        let body = json!({ "metadata": meta, "specialization": rows });
        emit(io.out.as_deref(), &body, || specialization_csv(&rows, args.m))
    }
}

fn lb(io: &TraceOut) -> Result<(), Failure> {
    check_out(io.out.as_deref())?;
    let trace = load(&io.trace)?;
    let report = load_balance_sd(&trace).map_err(Failure::usage)?;
    let body = json!({ "metadata": metadata(&trace, ReportOptions::default()), "load_balance": report });
    emit(io.out.as_deref(), &body, || load_balance_csv(&report))
}

fn synth_config(args: &SynthArgs) -> Result<GeneratorConfig, Failure> {
    let mut c = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))
                .map_err(Failure::usage)?;
            serde_json::from_str(&text)
                .with_context(|| format!("parsing {}", path.display()))
                .map_err(Failure::usage)?
        }
        None => GeneratorConfig::default(),
    };
    if let Some(g) = args.generator {
        c.generator = g.into();
    }
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => {
            $(if let Some(v) = &args.$flag {
                c.$field = v.clone();
            })*
        };
    }
    set!(
        rho => persistence,
        sigma => logit_skew,
        beta => domain_boost,
        domains => num_domains,
        experts => experts_per_layer,
        topk => top_k,
        layers => num_layers,
        seqs => num_sequences,
        len => seq_len,
        vocab => vocab_size,
        seed => seed,
        model_id => model_id
    );
    Ok(c)
}

fn synth(args: &SynthArgs) -> Result<(), Failure> {
    let config = synth_config(args)?;
    config.validate().map_err(Failure::usage)?;
    let out = &args.out;
    match out.extension().and_then(|e| e.to_str()) {
        Some("moet" | "jsonl") => {}
        _ => {
            return Err(Failure::usage(TraceError::UnknownExtension(out.display().to_string())));
        }
    }
    let trace = generate_trace(&config).map_err(Failure::usage)?;
    trace.write_file(out).map_err(|e| trace_failure(out, e))
}

fn report_files(bundle: &ReportBundle, dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir)
        .with_context(|| format!("creating {}", dir.display()))
        .map_err(Failure::usage)?;
    let path = |name: &str| -> PathBuf { dir.join(name) };
    let options = &bundle.metadata.options;
    write_text(&path("report.json"), &json_string(bundle))?;
    write_text(&path("stats.csv"), &stats_csv(&bundle.stats))?;
    write_text(&path("srp.csv"), &srp_csv(&bundle.srp))?;
    write_text(&path("sch.csv"), &sweep_csv(&bundle.cache_sweep))?;
    write_text(
        &path("spec.csv"),
        &specialization_csv(&bundle.specialization, options.specialization_m),
    )?;
    write_text(&path("lb.csv"), &load_balance_csv(&bundle.load_balance))?;
    write_text(&path("corr.csv"), &correlation_csv(&bundle.correlations))?;
    Ok(())
}

fn report(input: &Path, out: &Path, options: ReportOptions) -> Result<(), Failure> {
    let single_file = match out.extension().and_then(|e| e.to_str()) {
        None => false,
        Some(_) => {
            if format_of(out)? != Format::Json {
                return Err(Failure::usage(anyhow!(
                    "report writes a directory or a .json file, not {}",
                    out.display()
                )));
            }
            true
        }
    };
    let trace = load(input)?;
    let bundle = build_report(&trace, &options).map_err(Failure::usage)?;
    if single_file {
        write_text(out, &json_string(&bundle))
    } else {
        report_files(&bundle, out)
    }
}

fn oracle(cmd: OracleCommand) -> Result<(), Failure> {
    let (body, agree) = match cmd {
        OracleCommand::Srp {
            trace,
            layer,
            expert,
            m,
            max_bits,
        } => {
            let t = load(&trace)?;
            let key = ExpertKey::new(layer, expert);
            let budget = EnumerationBudget {
                max_decision_bits: max_bits,
            };
            let enumeration = brute_force_srp_enum(&t, &[key], m, budget).map_err(Failure::usage)?;
            let engine = match srp_single(&t, key, m) {
                Ok(r) => Some(r.scan.f1),
                Err(SrpError::UndefinedSrp) => None,
                Err(e) => return Err(Failure::usage(e)),
            };
            let agree = engine == enumeration.best_f1;
            let body = json!({
                "expert": key,
                "m": m,
                "engine_f1": engine.map(|r| r.to_string()),
                "enumerated_f1": enumeration.best_f1.map(|r| r.to_string()),
                "threshold": enumeration.threshold(),
                "assignments": enumeration.assignments,
                "witness": enumeration.witness,
                "agree": agree,
            });
            (body, agree)
        }
        OracleCommand::Cache {
            trace,
            layer,
            capacity,
            m,
        } => {
            let t = load(&trace)?;
            let enumeration = brute_force_cache(&t, layer, capacity, m).map_err(Failure::usage)?;
            let engine = sch_oracle(&t, layer, capacity, m).map_err(Failure::usage)?;
            let agree = engine.hits == enumeration.hits && engine.total_activations == enumeration.total_activations;
            let body = json!({
                "layer": layer,
                "capacity": capacity,
                "m": m,
                "engine_hits": engine.hits,
                "enumerated_hits": enumeration.hits,
                "total_activations": enumeration.total_activations,
                "caches": enumeration.caches,
                "agree": agree,
            });
            (body, agree)
        }
        OracleCommand::Binomial { p, m } => {
            let srp = binomial_srp(p, m).map_err(Failure::usage)?;
            (json!({ "p": p, "m": m, "srp": format_sig(srp) }), true)
        }
    };
    print!("{}", json_string(&body));
    if agree {
        Ok(())
    } else {
        Err(Failure::violation(anyhow!("engine and enumeration disagree")))
    }
}
