//! The `trove` command line: `trace`, `retrieve`, `eval`, `kappa`, `report`.
//!
//! Exit codes: 0 success, 1 unusable input or configuration, 2 when some
//! examples failed (the others are still written).

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::corpus::{load_dataset, load_predictions, Example, PredictionRecord};
use crate::metrics::{build_agreement_matrices, build_report, fleiss_kappa, AnnotationMatrix, MetricReport, MicroPooling};
use crate::providers::{
    embedder_from_config, sha256_hex, ChatProvider, EmbeddingProvider, MockChat, OpenAiChat, ProviderConfig,
    ResponseCache, BUILTIN_SCHEME, ENV_EMBED_BASE_URL,
};
use crate::retrieval::{RetrievalConfig, RetrieverKind};
use crate::tracer::{example_candidates, trace_example, Method, TraceConfig, TraceDiagnostics};

#[derive(Debug, Parser)]
#[command(name = "trove", version, about = "Trace target sentences to their source sentences and score the results")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Trace provenance with a chat model and write predictions.
    Trace(TraceArgs),
    /// Emit voted candidate sentences per target, without chat calls.
    Retrieve(RetrieveArgs),
    /// Score predictions against gold annotations.
    Eval(EvalArgs),
    /// Inter-annotator agreement (Fleiss' kappa) over annotation files.
    Kappa(KappaArgs),
    /// Re-render a saved JSON report.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MockEmbed {
    Builtin,
}

#[derive(Debug, Args)]
pub struct RetrievalArgs {
    /// Candidates kept per retriever.
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Retrievers that must agree on a candidate.
    #[arg(long = "vote-threshold", default_value_t = 2)]
    pub vote_threshold: usize,
    /// Comma-separated retrievers: bm25, lcs, dense.
    #[arg(long, value_delimiter = ',', default_value = "bm25,lcs,dense")]
    pub retrievers: Vec<RetrieverKind>,
    /// Use the offline hashed n-gram embedder for dense retrieval.
    #[arg(long = "mock-embed", value_enum)]
    pub mock_embed: Option<MockEmbed>,
}

impl RetrievalArgs {
    fn config(&self) -> RetrievalConfig {
        RetrievalConfig {
            k: self.k,
            vote_threshold: self.vote_threshold,
            retrievers: self.retrievers.iter().copied().collect(),
            ..RetrievalConfig::default()
        }
    }
}

#[derive(Debug, Args)]
pub struct TraceArgs {
    /// Dataset JSONL.
    #[arg(long)]
    pub data: PathBuf,
    /// Prediction JSONL to write; the manifest and diagnostics go next to it.
    #[arg(long)]
    pub out: PathBuf,
    /// Tracing paradigm: dp (direct prompting) or ra (retrieval-augmented).
    #[arg(long, default_value = "ra")]
    pub method: Method,
    /// Window length in tokens for chunks (dp) and candidate batches (ra).
    #[arg(long, default_value_t = 8000)]
    pub window: usize,
    /// Examples traced concurrently.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// JSONL of {"prompt_digest", "reply"} used instead of a chat endpoint.
    #[arg(long = "mock-chat")]
    pub mock_chat: Option<PathBuf>,
    /// Accept only cited sources among each target's candidates (ra).
    #[arg(long = "strict-candidates", default_value_t = true, action = ArgAction::Set)]
    pub strict_candidates: bool,
    #[command(flatten)]
    pub retrieval: RetrievalArgs,
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    /// Dataset JSONL.
    #[arg(long)]
    pub data: PathBuf,
    /// Candidate JSONL to write (stdout when omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Examples processed concurrently.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[command(flatten)]
    pub retrieval: RetrievalArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Prediction JSONL.
    #[arg(long)]
    pub pred: PathBuf,
    /// Dataset JSONL with gold annotations.
    #[arg(long)]
    pub gold: PathBuf,
    /// Output prefix; writes PREFIX.csv, PREFIX.txt and PREFIX.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Pool micro counts over the whole dataset instead of per example.
    #[arg(long = "global-micro")]
    pub global_micro: bool,
}

#[derive(Debug, Args)]
pub struct KappaArgs {
    /// Annotation JSONL files, one per annotator (at least two).
    pub files: Vec<PathBuf>,
    /// Write the kappa values as JSON to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// JSON report written by `eval --out`.
    pub report: PathBuf,
    /// Output prefix; writes PREFIX.csv and PREFIX.txt.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Failure that maps to a specific exit code.
#[derive(Debug)]
struct Exit(u8);

impl std::fmt::Display for Exit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "exit {}", self.0)
    }
}

impl std::error::Error for Exit {}

pub fn run() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => match e.downcast_ref::<Exit>() {
            Some(Exit(code)) => ExitCode::from(*code),
            None => {
                eprintln!("error: {e:#}");
                ExitCode::from(1)
            }
        },
    }
}

pub fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Trace(a) => cmd_trace(&a),
        Command::Retrieve(a) => cmd_retrieve(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Kappa(a) => cmd_kappa(&a),
        Command::Report(a) => cmd_report(&a),
    }
}

/// `path` with `suffix` appended to its file name.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .context("building worker pool")
}

/// The embedder plus the settings recorded in the manifest.
type EmbedderSetup = (Option<Box<dyn EmbeddingProvider>>, Option<ProviderConfig>);

fn build_embedder(
    args: &RetrievalArgs,
    needed: bool,
    cache: &Arc<ResponseCache>,
) -> Result<EmbedderSetup> {
    if !needed {
        return Ok((None, None));
    }
    let cfg = if args.mock_embed == Some(MockEmbed::Builtin) {
        ProviderConfig::new(BUILTIN_SCHEME, "hashed-char-3gram-256", "")
    } else {
        ProviderConfig::embed_from_env().with_context(|| {
            format!("dense retrieval needs {ENV_EMBED_BASE_URL} (or --mock-embed builtin)")
        })?
    };
    Ok((Some(embedder_from_config(&cfg, Arc::clone(cache))?), Some(cfg)))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunCounts {
    pub examples: usize,
    pub failed: usize,
    pub chat_calls: usize,
    pub cache_hits: usize,
    pub warnings: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub timestamp: String,
    pub command: String,
    pub trace_config: TraceConfig,
    pub chat_provider: serde_json::Value,
    pub embed_provider: Option<ProviderConfig>,
    pub temperature: f64,
    pub input_digest: String,
    pub counts: RunCounts,
}

fn cmd_trace(args: &TraceArgs) -> Result<()> {
    let data = fs::read(&args.data).with_context(|| format!("reading {}", args.data.display()))?;
    let examples = load_dataset(&args.data)?;
    let cfg = TraceConfig {
        method: args.method,
        window_len: args.window,
        strict_candidates: args.strict_candidates,
        retrieval: args.retrieval.config(),
    };
    cfg.validate()?;

    let cache = Arc::new(ResponseCache::from_env()?);
    let (chat, chat_meta): (Box<dyn ChatProvider>, serde_json::Value) = match &args.mock_chat {
        Some(path) => {
            let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
            (
                Box::new(MockChat::load(path)?),
                json!({"mock": path.display().to_string(), "digest": sha256_hex(&bytes)}),
            )
        }
        None => {
            let pcfg = ProviderConfig::chat_from_env();
            let client = OpenAiChat::new(pcfg.clone(), Arc::clone(&cache))?;
            (Box::new(client), serde_json::to_value(&pcfg)?)
        }
    };
    let needs_dense = cfg.method == Method::Ra && cfg.retrieval.retrievers.contains(&RetrieverKind::Dense);
    let (embedder, embed_meta) = build_embedder(&args.retrieval, needs_dense, &cache)?;

    let pool = thread_pool(args.jobs)?;
    let results: Vec<_> = pool.install(|| {
        examples
            .par_iter()
            .map(|ex| trace_example(ex, &cfg, chat.as_ref(), embedder.as_deref()))
            .collect()
    });

    let mut preds = String::new();
    let mut diags = String::new();
    let mut totals = TraceDiagnostics::default();
    let mut failures = Vec::new();
    for (i, (ex, result)) in examples.iter().zip(&results).enumerate() {
        match result {
            Ok(outcome) => {
                let d = &outcome.diagnostics;
                totals.merge(d);
                eprintln!(
                    "[{}/{}] {}: {} links, {} calls, {} warnings",
                    i + 1,
                    examples.len(),
                    ex.id,
                    outcome.links.len(),
                    d.chat_calls,
                    d.parse_warnings
                );
                let record = json!({
                    "id": ex.id,
                    "method": cfg.method.as_str(),
                    "links": outcome.links,
                    "warnings": d.parse_warnings,
                    "chat_calls": d.chat_calls,
                });
                preds.push_str(&record.to_string());
                preds.push('\n');
                diags.push_str(&json!({"id": ex.id, "ok": true, "diagnostics": d}).to_string());
            }
            Err(e) => {
                eprintln!("[{}/{}] {}: FAILED: {e}", i + 1, examples.len(), ex.id);
                failures.push(ex.id.clone());
                diags.push_str(&json!({"id": ex.id, "ok": false, "error": e.to_string()}).to_string());
            }
        }
        diags.push('\n');
    }
    write_file(&args.out, &preds)?;
    write_file(&sibling(&args.out, ".diagnostics.jsonl"), &diags)?;

    let input_digest = sha256_hex(&data);
    let config_json = serde_json::to_string(&(&cfg, &chat_meta, &embed_meta))?;
    let manifest = RunManifest {
        run_id: sha256_hex(format!("{input_digest}\0{config_json}").as_bytes())[..16].to_string(),
        timestamp: chrono::Utc::now().to_rfc3339(),
        command: "trace".into(),
        trace_config: cfg,
        chat_provider: chat_meta,
        embed_provider: embed_meta,
        temperature: 0.0,
        input_digest,
        counts: RunCounts {
            examples: examples.len(),
            failed: failures.len(),
            chat_calls: totals.chat_calls,
            cache_hits: totals.cache_hits,
            warnings: totals.parse_warnings,
        },
    };
    write_file(
        &sibling(&args.out, ".manifest.json"),
        &serde_json::to_string_pretty(&manifest)?,
    )?;
    if !failures.is_empty() {
        eprintln!("{} example(s) failed: {}", failures.len(), failures.join(", "));
        return Err(Exit(2).into());
    }
    Ok(())
}

fn cmd_retrieve(args: &RetrieveArgs) -> Result<()> {
    let examples = load_dataset(&args.data)?;
    let cfg = args.retrieval.config();
    cfg.validate()?;
    let cache = Arc::new(ResponseCache::from_env()?);
    let (embedder, _) = build_embedder(&args.retrieval, cfg.retrievers.contains(&RetrieverKind::Dense), &cache)?;
    let pool = thread_pool(args.jobs)?;
    let results: Vec<_> = pool.install(|| {
        examples
            .par_iter()
            .map(|ex| example_candidates(ex, &cfg, embedder.as_deref()))
            .collect()
    });
    let mut out = String::new();
    let mut failures = Vec::new();
    for (ex, result) in examples.iter().zip(results) {
        match result {
            Ok(sets) => {
                for set in sets {
                    let candidates: Vec<_> = set
                        .voted
                        .iter()
                        .map(|v| json!({"doc_idx": v.sref.doc_idx, "sent_idx": v.sref.sent_idx, "votes": v.votes}))
                        .collect();
                    out.push_str(&json!({"id": ex.id, "target_idx": set.target_idx, "candidates": candidates}).to_string());
                    out.push('\n');
                }
            }
            Err(e) => {
                eprintln!("{}: FAILED: {e}", ex.id);
                failures.push(ex.id.clone());
            }
        }
    }
    match &args.out {
        Some(path) => write_file(path, &out)?,
        None => print!("{out}"),
    }
    if !failures.is_empty() {
        return Err(Exit(2).into());
    }
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let gold: Vec<Example> = load_dataset(&args.gold)?;
    let preds: Vec<PredictionRecord> = load_predictions(&args.pred)?;
    let pooling = if args.global_micro {
        MicroPooling::Global
    } else {
        MicroPooling::PerExample
    };
    let report = build_report(&gold, &preds, pooling)?;
    emit_report(&report, args.out.as_deref(), true)
}

fn emit_report(report: &MetricReport, out: Option<&Path>, with_json: bool) -> Result<()> {
    let text = report.to_text();
    print!("{text}");
    if let Some(prefix) = out {
        write_file(&sibling(prefix, ".csv"), &report.to_csv())?;
        write_file(&sibling(prefix, ".txt"), &text)?;
        if with_json {
            write_file(&sibling(prefix, ".json"), &serde_json::to_string_pretty(report)?)?;
        }
    }
    Ok(())
}

fn cmd_report(args: &ReportArgs) -> Result<()> {
    let raw = fs::read_to_string(&args.report).with_context(|| format!("reading {}", args.report.display()))?;
    let report: MetricReport = serde_json::from_str(&raw).context("parsing report JSON")?;
    emit_report(&report, args.out.as_deref(), false)
}

fn kappa_of(m: &AnnotationMatrix) -> Option<f64> {
    if m.is_empty() {
        None
    } else {
        fleiss_kappa(m).ok()
    }
}

fn cmd_kappa(args: &KappaArgs) -> Result<()> {
    if args.files.len() < 2 {
        bail!("kappa needs at least 2 annotation files, got {}", args.files.len());
    }
    let unique: BTreeSet<_> = args.files.iter().collect();
    if unique.len() != args.files.len() {
        eprintln!("note: the same file is listed more than once");
    }
    let annotators = args
        .files
        .iter()
        .map(load_predictions)
        .collect::<Result<Vec<_>, _>>()?;
    let m = build_agreement_matrices(&annotators)?;
    for n in &m.notices {
        eprintln!("note: {n}");
    }
    let values = [
        ("trace", kappa_of(&m.trace), m.trace.items()),
        ("type", kappa_of(&m.relation_type), m.relation_type.items()),
        (
            "correction",
            m.correction.as_ref().and_then(kappa_of),
            m.correction.as_ref().map_or(0, AnnotationMatrix::items),
        ),
    ];
    for (name, kappa, items) in &values {
        match kappa {
            Some(k) => println!("{name:<11} kappa = {k:.4} ({items} items)"),
            None => println!("{name:<11} kappa = n/a"),
        }
    }
    if let Some(path) = &args.out {
        let obj: serde_json::Map<String, serde_json::Value> = values
            .iter()
            .map(|(name, k, _)| (name.to_string(), json!(k)))
            .collect();
        write_file(path, &serde_json::to_string_pretty(&obj)?)?;
    }
    Ok(())
}
