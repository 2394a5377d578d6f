//! LLM-backed provenance tracing.
//!
//! Two paradigms share one pipeline of prompt → model reply → parse → label
//! mapping → merge:
//!
//! * direct prompting (DP): the source is packed into sentence-aligned
//!   windows of at most `window_len` tokens, each window sent with every
//!   target sentence;
//! * retrieval-augmented (RA): each target is restricted to its voted
//!   candidate sentences, and targets are batched so the candidate text of a
//!   batch stays under `window_len`.
//!
//! The model answers with fine-grained pre-labels, one claim per line
//! (`T<i> -> D<d>-<s> : <LABEL>`), which are mapped down to the four relation
//! types.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{tokenize, Example, Language, ProvenanceLink, RelationType, SentenceRef};
use crate::providers::{ChatProvider, EmbeddingProvider, ProviderError};
use crate::retrieval::{build_index, retrieve_candidates, CandidateSet, RetrievalConfig, RetrievalError, RetrieverKind};

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("example `{example_id}`, {unit}: {source}")]
    Provider {
        example_id: String,
        unit: String,
        #[source]
        source: ProviderError,
    },
    #[error("example `{example_id}`: {source}")]
    Retrieval {
        example_id: String,
        #[source]
        source: RetrievalError,
    },
    #[error("invalid trace config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Dp,
    Ra,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Dp => "dp",
            Method::Ra => "ra",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "dp" => Ok(Method::Dp),
            "ra" => Ok(Method::Ra),
            other => Err(format!("unknown method `{other}` (expected dp or ra)")),
        }
    }
}

/// Fine-grained label requested from the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum PreLabel {
    Copy,
    Paraphrase,
    Reordering,
    Fusion,
    Summary,
    Distillation,
    Inference,
    Expansion,
    Generalization,
    Negation,
}

impl PreLabel {
    pub const ALL: [PreLabel; 10] = [
        PreLabel::Copy,
        PreLabel::Paraphrase,
        PreLabel::Reordering,
        PreLabel::Fusion,
        PreLabel::Summary,
        PreLabel::Distillation,
        PreLabel::Inference,
        PreLabel::Expansion,
        PreLabel::Generalization,
        PreLabel::Negation,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PreLabel::Copy => "COPY",
            PreLabel::Paraphrase => "PARAPHRASE",
            PreLabel::Reordering => "REORDERING",
            PreLabel::Fusion => "FUSION",
            PreLabel::Summary => "SUMMARY",
            PreLabel::Distillation => "DISTILLATION",
            PreLabel::Inference => "INFERENCE",
            PreLabel::Expansion => "EXPANSION",
            PreLabel::Generalization => "GENERALIZATION",
            PreLabel::Negation => "NEGATION",
        }
    }

    fn definition(self, language: Language) -> &'static str {
        match (language, self) {
            (Language::En, PreLabel::Copy) => "the target repeats the source verbatim or nearly verbatim.",
            (Language::En, PreLabel::Paraphrase) => "the target restates the source's meaning in different words.",
            (Language::En, PreLabel::Reordering) => "the target rearranges the source's content without changing it.",
            (Language::En, PreLabel::Fusion) => "the target merges this source's content with content from other sources.",
            (Language::En, PreLabel::Summary) => "the target condenses the source to its main point.",
            (Language::En, PreLabel::Distillation) => "the target extracts one specific detail from a longer source.",
            (Language::En, PreLabel::Inference) => "the target states a conclusion that logically follows from the source.",
            (Language::En, PreLabel::Expansion) => "the target elaborates on the source with added detail or explanation.",
            (Language::En, PreLabel::Generalization) => "the target abstracts the source's specifics into a broader claim.",
            (Language::En, PreLabel::Negation) => "the target contradicts or negates the source.",
            (Language::Zh, PreLabel::Copy) => "目标句逐字或几乎逐字重复源句。",
            (Language::Zh, PreLabel::Paraphrase) => "目标句用不同的措辞表达源句的意思。",
            (Language::Zh, PreLabel::Reordering) => "目标句调整了源句内容的顺序，但没有改变内容。",
            (Language::Zh, PreLabel::Fusion) => "目标句把该源句与其他源句的内容融合在一起。",
            (Language::Zh, PreLabel::Summary) => "目标句把源句浓缩为要点。",
            (Language::Zh, PreLabel::Distillation) => "目标句从较长的源句中提取某个具体细节。",
            (Language::Zh, PreLabel::Inference) => "目标句给出可由源句逻辑推出的结论。",
            (Language::Zh, PreLabel::Expansion) => "目标句在源句基础上补充了细节或解释。",
            (Language::Zh, PreLabel::Generalization) => "目标句把源句的具体内容概括为更宽泛的说法。",
            (Language::Zh, PreLabel::Negation) => "目标句与源句矛盾或否定源句。",
        }
    }
}

impl FromStr for PreLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let upper = s.trim().to_ascii_uppercase();
        PreLabel::ALL
            .into_iter()
            .find(|l| l.as_str() == upper)
            .ok_or_else(|| format!("unknown label `{s}`"))
    }
}

/// Collapses the ten pre-labels onto the four relation types.
pub fn map_prelabel(p: PreLabel) -> RelationType {
    match p {
        PreLabel::Copy | PreLabel::Paraphrase | PreLabel::Reordering => RelationType::Quotation,
        PreLabel::Fusion | PreLabel::Summary | PreLabel::Distillation => RelationType::Compression,
        PreLabel::Inference | PreLabel::Expansion | PreLabel::Generalization => RelationType::Inference,
        PreLabel::Negation => RelationType::Other,
    }
}

/// Conflict priority when one pair gets different relations; lower wins.
pub const RELATION_PRIORITY: [RelationType; 4] = [
    RelationType::Quotation,
    RelationType::Compression,
    RelationType::Inference,
    RelationType::Other,
];

fn priority_rank(r: RelationType) -> usize {
    RELATION_PRIORITY.iter().position(|&p| p == r).expect("closed set")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceConfig {
    pub method: Method,
    pub window_len: usize,
    pub strict_candidates: bool,
    pub retrieval: RetrievalConfig,
}

impl Default for TraceConfig {
    fn default() -> Self {
        Self {
            method: Method::Ra,
            window_len: 8000,
            strict_candidates: true,
            retrieval: RetrievalConfig::default(),
        }
    }
}

impl TraceConfig {
    pub fn validate(&self) -> Result<(), TraceError> {
        if self.window_len == 0 {
            return Err(TraceError::Config("window length must be positive".into()));
        }
        if self.method == Method::Ra {
            self.retrieval
                .validate()
                .map_err(|e| TraceError::Config(e.to_string()))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowChunk {
    pub chunk_idx: usize,
    pub sentences: Vec<(SentenceRef, String)>,
}

/// Greedy sentence-aligned packing: consecutive sentences are added until the
/// next one would push the window past `window_len` tokens. A sentence longer
/// than the window gets a chunk of its own.
pub fn chunk_source(example: &Example, window_len: usize) -> Vec<WindowChunk> {
    let mut chunks: Vec<WindowChunk> = Vec::new();
    let mut current: Vec<(SentenceRef, String)> = Vec::new();
    let mut used = 0usize;
    for (sref, text) in example.source_sentences() {
        let len = tokenize(text, example.language).len();
        if !current.is_empty() && used + len > window_len {
            chunks.push(WindowChunk {
                chunk_idx: chunks.len(),
                sentences: std::mem::take(&mut current),
            });
            used = 0;
        }
        current.push((sref, text.to_string()));
        used += len;
    }
    if !current.is_empty() {
        chunks.push(WindowChunk {
            chunk_idx: chunks.len(),
            sentences: current,
        });
    }
    chunks
}

#[derive(Debug, Clone, Copy)]
pub enum PromptSource<'a> {
    /// DP: a window of raw source sentences.
    Window(&'a WindowChunk),
    /// RA: voted candidates, one set per target.
    Candidates(&'a [CandidateSet]),
}

struct PromptText {
    task: &'static str,
    labels: &'static str,
    sources: &'static str,
    targets: &'static str,
    candidates_note: &'static str,
    candidates: &'static str,
    none: &'static str,
    format: &'static str,
    closing: &'static str,
}

const PROMPT_EN: PromptText = PromptText {
    task: "Task: trace the provenance of each target sentence. For every target sentence, find the source sentences it was derived from and label each target-source relationship with exactly one of the labels below. A target sentence may derive from several source sentences, and different sources may carry different labels.",
    labels: "Labels:",
    sources: "Source sentences:",
    targets: "Target sentences:",
    candidates_note: "Each target sentence lists its candidate source sentences. Only cite candidates of that target.",
    candidates: "candidates",
    none: "(none)",
    format: "Answer format: one line per target-source pair, exactly",
    closing: "Write nothing else. Omit target sentences that have no source.",
};

const PROMPT_ZH: PromptText = PromptText {
    task: "任务：追溯每个目标句的来源。对每个目标句，找出它所依据的源句，并为每一对目标句与源句的关系从下列标签中选择且仅选择一个。一个目标句可以来自多个源句，不同源句的标签可以不同。",
    labels: "标签：",
    sources: "源句：",
    targets: "目标句：",
    candidates_note: "每个目标句后列出了它的候选源句，只能引用该目标句的候选源句。",
    candidates: "候选",
    none: "（无）",
    format: "输出格式：每一对目标句与源句占一行，严格按照",
    closing: "不要输出其他任何内容。没有来源的目标句不必输出。",
};

/// Renders the tracing prompt. Source lines are labelled `D{doc}-{sent}` and
/// targets `T{i}`, both 1-based; target numbering is the example's own, so
/// batches of targets keep global indices.
pub fn build_prompt(example: &Example, targets: &[usize], source: PromptSource<'_>) -> String {
    use std::fmt::Write;

    let text = match example.language {
        Language::En => &PROMPT_EN,
        Language::Zh => &PROMPT_ZH,
    };
    let mut p = String::new();
    let _ = writeln!(p, "{}\n", text.task);
    let _ = writeln!(p, "{}", text.labels);
    for label in PreLabel::ALL {
        let _ = writeln!(p, "{}: {}", label.as_str(), label.definition(example.language));
    }
    let _ = writeln!(p, "\n{}", text.sources);
    match source {
        PromptSource::Window(chunk) => {
            for (sref, s) in &chunk.sentences {
                let _ = writeln!(p, "[{sref}] {s}");
            }
        }
        PromptSource::Candidates(sets) => {
            let refs: BTreeSet<SentenceRef> = sets
                .iter()
                .filter(|c| targets.contains(&c.target_idx))
                .flat_map(|c| c.voted.iter().map(|v| v.sref))
                .collect();
            for sref in refs {
                let _ = writeln!(p, "[{sref}] {}", example.sentence(sref).unwrap_or_default());
            }
        }
    }
    let _ = writeln!(p, "\n{}", text.targets);
    if let PromptSource::Candidates(_) = source {
        let _ = writeln!(p, "{}", text.candidates_note);
    }
    for &t in targets {
        let _ = writeln!(p, "[T{}] {}", t + 1, example.targets.get(t).map_or("", String::as_str));
        if let PromptSource::Candidates(sets) = source {
            let mut refs: Vec<SentenceRef> = sets
                .iter()
                .filter(|c| c.target_idx == t)
                .flat_map(|c| c.voted.iter().map(|v| v.sref))
                .collect();
            refs.sort();
            let listed = if refs.is_empty() {
                text.none.to_string()
            } else {
                refs.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
            };
            let _ = writeln!(p, "    {}: {listed}", text.candidates);
        }
    }
    let _ = writeln!(p, "\n{}", text.format);
    let _ = writeln!(p, "T<target> -> D<document>-<sentence> : <LABEL>");
    let _ = writeln!(p, "e.g. T1 -> D1-2 : PARAPHRASE");
    let _ = writeln!(p, "{}", text.closing);
    p
}

/// Which `(target, source)` claims a reply may make.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParseScope {
    allowed: BTreeMap<usize, BTreeSet<SentenceRef>>,
}

impl ParseScope {
    /// Every listed target may cite any of `refs`.
    pub fn uniform(targets: impl IntoIterator<Item = usize>, refs: &BTreeSet<SentenceRef>) -> Self {
        Self {
            allowed: targets.into_iter().map(|t| (t, refs.clone())).collect(),
        }
    }

    pub fn per_target(allowed: BTreeMap<usize, BTreeSet<SentenceRef>>) -> Self {
        Self { allowed }
    }

    pub fn permits(&self, target: usize, sref: SentenceRef) -> bool {
        self.allowed.get(&target).is_some_and(|refs| refs.contains(&sref))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RawItem {
    pub target_idx: usize,
    pub source: SentenceRef,
    pub label: PreLabel,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawTraceOutput {
    pub items: Vec<RawItem>,
    pub parse_warnings: usize,
}

fn answer_line() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"^T(\d+)\s*(?:->|→)\s*D(\d+)\s*-\s*(\d+)\s*[:：]\s*([A-Za-z]+)$").expect("valid regex")
    })
}

/// Extracts claims from a model reply. Blank lines and code fences are
/// ignored; every other line that is not a well-formed claim within `scope`
/// is dropped and counted as a warning.
pub fn parse_model_output(text: &str, scope: &ParseScope) -> RawTraceOutput {
    let mut out = RawTraceOutput::default();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with("```") {
            continue;
        }
        let line = line
            .trim_start_matches(['-', '*', '•'])
            .trim()
            .trim_matches('`')
            .trim();
        match parse_claim(line) {
            Some(item) if scope.permits(item.target_idx, item.source) => out.items.push(item),
            _ => out.parse_warnings += 1,
        }
    }
    out
}

fn parse_claim(line: &str) -> Option<RawItem> {
    let caps = answer_line().captures(line)?;
    let one_based = |i: usize| caps[i].parse::<usize>().ok().and_then(|n| n.checked_sub(1));
    Some(RawItem {
        target_idx: one_based(1)?,
        source: SentenceRef::new(one_based(2)?, one_based(3)?),
        label: caps[4].parse().ok()?,
    })
}

/// Union over `(target, source)`; conflicting relations resolve to the one
/// earliest in [`RELATION_PRIORITY`]. Sorted by target then source.
pub fn merge_chunk_predictions(per_chunk: &[Vec<ProvenanceLink>]) -> Vec<ProvenanceLink> {
    let mut merged: BTreeMap<(usize, SentenceRef), RelationType> = BTreeMap::new();
    for link in per_chunk.iter().flatten() {
        merged
            .entry((link.target_idx, link.source))
            .and_modify(|r| {
                if priority_rank(link.relation) < priority_rank(*r) {
                    *r = link.relation;
                }
            })
            .or_insert(link.relation);
    }
    merged
        .into_iter()
        .map(|((t, s), r)| ProvenanceLink::new(t, s, r))
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceDiagnostics {
    /// Chunks (DP) or target batches (RA) sent to the model.
    pub units: usize,
    pub chat_calls: usize,
    pub cache_hits: usize,
    pub prompt_tokens: usize,
    pub parse_warnings: usize,
}

impl TraceDiagnostics {
    pub fn merge(&mut self, other: &TraceDiagnostics) {
        self.units += other.units;
        self.chat_calls += other.chat_calls;
        self.cache_hits += other.cache_hits;
        self.prompt_tokens += other.prompt_tokens;
        self.parse_warnings += other.parse_warnings;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceOutcome {
    pub links: Vec<ProvenanceLink>,
    pub diagnostics: TraceDiagnostics,
}

struct Unit {
    label: String,
    targets: Vec<usize>,
    prompt: String,
    scope: ParseScope,
}

/// Candidate sets for every target of an example.
pub fn example_candidates(
    example: &Example,
    cfg: &RetrievalConfig,
    embedder: Option<&dyn EmbeddingProvider>,
) -> Result<Vec<CandidateSet>, RetrievalError> {
    cfg.validate()?;
    if cfg.retrievers.contains(&RetrieverKind::Dense) && embedder.is_none() {
        return Err(RetrievalError::NoEmbedder);
    }
    let index = build_index(example)?;
    example
        .targets
        .iter()
        .enumerate()
        .map(|(t, text)| retrieve_candidates(&index, t, text, cfg, embedder))
        .collect()
}

/// Groups targets so that the distinct candidate sentences of each batch fit
/// in `window_len` tokens. Targets without candidates are skipped.
fn batch_targets(example: &Example, sets: &[CandidateSet], window_len: usize) -> Vec<Vec<usize>> {
    let mut batches = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut seen: BTreeSet<SentenceRef> = BTreeSet::new();
    let mut used = 0usize;
    let cost = |r: &SentenceRef| tokenize(example.sentence(*r).unwrap_or_default(), example.language).len();
    for set in sets.iter().filter(|s| !s.voted.is_empty()) {
        let added: usize = set
            .voted
            .iter()
            .filter(|v| !seen.contains(&v.sref))
            .map(|v| cost(&v.sref))
            .sum();
        if !current.is_empty() && used + added > window_len {
            batches.push(std::mem::take(&mut current));
            seen.clear();
            used = set.voted.iter().map(|v| cost(&v.sref)).sum();
        } else {
            used += added;
        }
        seen.extend(set.voted.iter().map(|v| v.sref));
        current.push(set.target_idx);
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches
}

fn plan_units(
    example: &Example,
    cfg: &TraceConfig,
    embedder: Option<&dyn EmbeddingProvider>,
) -> Result<Vec<Unit>, TraceError> {
    let all_targets: Vec<usize> = (0..example.targets.len()).collect();
    let all_refs: BTreeSet<SentenceRef> = example.source_sentences().map(|(r, _)| r).collect();
    match cfg.method {
        Method::Dp => Ok(chunk_source(example, cfg.window_len)
            .iter()
            .map(|chunk| Unit {
                label: format!("chunk {}", chunk.chunk_idx + 1),
                prompt: build_prompt(example, &all_targets, PromptSource::Window(chunk)),
                targets: all_targets.clone(),
                scope: ParseScope::uniform(all_targets.iter().copied(), &all_refs),
            })
            .collect()),
        Method::Ra => {
            let sets = example_candidates(example, &cfg.retrieval, embedder).map_err(|source| {
                TraceError::Retrieval {
                    example_id: example.id.clone(),
                    source,
                }
            })?;
            Ok(batch_targets(example, &sets, cfg.window_len)
                .into_iter()
                .enumerate()
                .map(|(i, targets)| {
                    let scope = if cfg.strict_candidates {
                        ParseScope::per_target(
                            targets
                                .iter()
                                .map(|&t| (t, sets[t].voted_refs()))
                                .collect(),
                        )
                    } else {
                        ParseScope::uniform(targets.iter().copied(), &all_refs)
                    };
                    Unit {
                        label: format!("batch {}", i + 1),
                        prompt: build_prompt(example, &targets, PromptSource::Candidates(&sets)),
                        targets,
                        scope,
                    }
                })
                .collect())
        }
    }
}

/// Runs one example end to end: plan chunks or batches, one chat call each,
/// parse, map labels, merge.
pub fn trace_example(
    example: &Example,
    cfg: &TraceConfig,
    chat: &dyn ChatProvider,
    embedder: Option<&dyn EmbeddingProvider>,
) -> Result<TraceOutcome, TraceError> {
    cfg.validate()?;
    let units = plan_units(example, cfg, embedder)?;
    let mut diagnostics = TraceDiagnostics::default();
    let mut per_unit = Vec::with_capacity(units.len());
    for unit in &units {
        debug_assert!(!unit.targets.is_empty());
        let reply = chat.complete(&unit.prompt).map_err(|source| TraceError::Provider {
            example_id: example.id.clone(),
            unit: unit.label.clone(),
            source,
        })?;
        diagnostics.units += 1;
        diagnostics.chat_calls += 1;
        diagnostics.cache_hits += usize::from(reply.cached);
        diagnostics.prompt_tokens += tokenize(&unit.prompt, example.language).len();
        let raw = parse_model_output(&reply.text, &unit.scope);
        diagnostics.parse_warnings += raw.parse_warnings;
        per_unit.push(
            raw.items
                .iter()
                .map(|i| ProvenanceLink::new(i.target_idx, i.source, map_prelabel(i.label)))
                .collect::<Vec<_>>(),
        );
    }
    Ok(TraceOutcome {
        links: merge_chunk_predictions(&per_unit),
        diagnostics,
    })
}
