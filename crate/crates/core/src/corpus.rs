//! Data model, JSONL ingestion, sentence segmentation and tokenization.
//!
//! Source sentences are identified positionally by [`SentenceRef`], i.e. the
//! pair `(doc_idx, sent_idx)`. Every other module exchanges these references
//! rather than sentence text.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("line {line}: example `{id}`: {reason}")]
    Invalid {
        line: usize,
        id: String,
        reason: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Language {
    En,
    Zh,
}

impl Language {
    pub fn as_str(self) -> &'static str {
        match self {
            Language::En => "en",
            Language::Zh => "zh",
        }
    }
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Position of one source sentence: `sent_idx`-th sentence of the
/// `doc_idx`-th document. Ordered lexicographically.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SentenceRef {
    pub doc_idx: usize,
    pub sent_idx: usize,
}

impl SentenceRef {
    pub fn new(doc_idx: usize, sent_idx: usize) -> Self {
        Self { doc_idx, sent_idx }
    }
}

impl fmt::Display for SentenceRef {
    /// 1-based label, e.g. `D1-2` for `(0, 1)`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "D{}-{}", self.doc_idx + 1, self.sent_idx + 1)
    }
}

/// Four-way relation between a target sentence and one of its sources.
///
/// Declaration order is the merge priority: a more literal relation wins.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RelationType {
    Quotation,
    Compression,
    Inference,
    Other,
}

impl RelationType {
    pub const ALL: [RelationType; 4] = [
        RelationType::Quotation,
        RelationType::Compression,
        RelationType::Inference,
        RelationType::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RelationType::Quotation => "quotation",
            RelationType::Compression => "compression",
            RelationType::Inference => "inference",
            RelationType::Other => "other",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// One provenance claim: target sentence `target_idx` derives from `source`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "LinkRecord", into = "LinkRecord")]
pub struct ProvenanceLink {
    pub target_idx: usize,
    pub source: SentenceRef,
    pub relation: RelationType,
}

impl ProvenanceLink {
    pub fn new(target_idx: usize, source: SentenceRef, relation: RelationType) -> Self {
        Self {
            target_idx,
            source,
            relation,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct LinkRecord {
    target_idx: usize,
    doc_idx: usize,
    sent_idx: usize,
    relation: RelationType,
}

impl From<LinkRecord> for ProvenanceLink {
    fn from(r: LinkRecord) -> Self {
        ProvenanceLink::new(r.target_idx, SentenceRef::new(r.doc_idx, r.sent_idx), r.relation)
    }
}

impl From<ProvenanceLink> for LinkRecord {
    fn from(l: ProvenanceLink) -> Self {
        LinkRecord {
            target_idx: l.target_idx,
            doc_idx: l.source.doc_idx,
            sent_idx: l.source.sent_idx,
            relation: l.relation,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    pub raw_text: String,
    pub sentences: Vec<String>,
    pub language: Language,
}

impl Document {
    pub fn from_text(raw_text: impl Into<String>, language: Language) -> Self {
        let raw_text = raw_text.into();
        let sentences = segment_sentences(&raw_text, language);
        Self {
            raw_text,
            sentences,
            language,
        }
    }

    /// Pre-segmented document; `raw_text` is the sentences joined by newlines.
    pub fn from_sentences(sentences: Vec<String>, language: Language) -> Self {
        Self {
            raw_text: sentences.join("\n"),
            sentences,
            language,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LengthBucket {
    #[serde(rename = "0-5k")]
    B0To5k,
    #[serde(rename = "5k-10k")]
    B5kTo10k,
    #[serde(rename = "10k+")]
    B10kPlus,
}

impl LengthBucket {
    pub fn from_length(len: usize) -> Self {
        match len {
            0..=4_999 => LengthBucket::B0To5k,
            5_000..=9_999 => LengthBucket::B5kTo10k,
            _ => LengthBucket::B10kPlus,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LengthBucket::B0To5k => "0-5k",
            LengthBucket::B5kTo10k => "5k-10k",
            LengthBucket::B10kPlus => "10k+",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DocClass {
    Single,
    Multi,
}

impl DocClass {
    pub fn as_str(self) -> &'static str {
        match self {
            DocClass::Single => "single",
            DocClass::Multi => "multi",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub language: Language,
    pub scenario: String,
    pub documents: Vec<Document>,
    pub targets: Vec<String>,
    pub gold: Option<Vec<ProvenanceLink>>,
}

impl Example {
    /// Checks the structural invariants: non-empty targets, gold links in
    /// range and at most one relation per `(target, source)` pair.
    pub fn validate(&self) -> Result<(), String> {
        if self.targets.is_empty() {
            return Err("`targets` must not be empty".into());
        }
        if let Some(gold) = &self.gold {
            self.check_links(gold)?;
            let mut seen = BTreeSet::new();
            for link in gold {
                if !seen.insert((link.target_idx, link.source)) {
                    return Err(format!(
                        "duplicate gold pair (T{}, {})",
                        link.target_idx + 1,
                        link.source
                    ));
                }
            }
        }
        Ok(())
    }

    /// Range-checks links against this example's targets and documents.
    pub fn check_links(&self, links: &[ProvenanceLink]) -> Result<(), String> {
        for link in links {
            if link.target_idx >= self.targets.len() {
                return Err(format!(
                    "link target_idx {} out of range ({} targets)",
                    link.target_idx,
                    self.targets.len()
                ));
            }
            if !self.contains(link.source) {
                return Err(format!(
                    "link source doc_idx={} sent_idx={} out of range",
                    link.source.doc_idx, link.source.sent_idx
                ));
            }
        }
        Ok(())
    }

    pub fn contains(&self, r: SentenceRef) -> bool {
        self.documents
            .get(r.doc_idx)
            .is_some_and(|d| r.sent_idx < d.sentences.len())
    }

    pub fn sentence(&self, r: SentenceRef) -> Option<&str> {
        self.documents
            .get(r.doc_idx)
            .and_then(|d| d.sentences.get(r.sent_idx))
            .map(String::as_str)
    }

    /// All source sentences in `(doc_idx, sent_idx)` order.
    pub fn source_sentences(&self) -> impl Iterator<Item = (SentenceRef, &str)> {
        self.documents.iter().enumerate().flat_map(|(d, doc)| {
            doc.sentences
                .iter()
                .enumerate()
                .map(move |(s, text)| (SentenceRef::new(d, s), text.as_str()))
        })
    }

    pub fn sentence_count(&self) -> usize {
        self.documents.iter().map(|d| d.sentences.len()).sum()
    }

    pub fn length_bucket(&self) -> LengthBucket {
        bucketize_example(self).0
    }

    pub fn doc_class(&self) -> DocClass {
        bucketize_example(self).1
    }
}

/// Abbreviations whose trailing period never ends an English sentence.
/// Matching is case-insensitive on the whole word including its periods.
pub const ABBREVIATIONS: &[&str] = &[
    "mr.", "mrs.", "ms.", "dr.", "prof.", "sr.", "jr.", "st.", "mt.", "gen.", "col.", "lt.",
    "sgt.", "capt.", "gov.", "sen.", "rep.", "rev.", "hon.", "vs.", "no.", "vol.", "fig.", "figs.",
    "eq.", "ed.", "eds.", "approx.", "dept.", "est.", "inc.", "ltd.", "co.", "corp.", "jan.",
    "feb.", "mar.", "apr.", "jun.", "jul.", "aug.", "sep.", "sept.", "oct.", "nov.", "dec.", "e.g.",
    "i.e.", "cf.", "al.", "u.s.", "u.k.", "u.n.", "a.m.", "p.m.", "ph.d.",
];

const EN_TERMINATORS: &[char] = &['.', '!', '?'];
const ZH_TERMINATORS: &[char] = &['。', '！', '？', '；'];
const CLOSERS: &[char] = &['"', '\'', '”', '’', ')', ']', '」', '』', '）', '》', '»'];
const OPENERS: &[char] = &['"', '\'', '“', '‘', '(', '[', '「', '『', '（', '《', '«'];

/// Splits `text` into sentences. Deterministic; empty input gives an empty list.
///
/// English splits after `.`/`!`/`?` (plus any closing quotes) when followed by
/// whitespace and then an uppercase letter or opening quote, unless the word
/// ending in the period is listed in [`ABBREVIATIONS`]. Chinese splits after
/// `。！？；` and any closing quotes that follow. Sentences are trimmed.
pub fn segment_sentences(text: &str, language: Language) -> Vec<String> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut out = Vec::new();
    let mut start = 0usize;
    let mut i = 0usize;
    let terminators = match language {
        Language::En => EN_TERMINATORS,
        Language::Zh => ZH_TERMINATORS,
    };

    while i < chars.len() {
        let c = chars[i].1;
        if !terminators.contains(&c) {
            i += 1;
            continue;
        }
        let mut j = i + 1;
        while j < chars.len() && (terminators.contains(&chars[j].1) || CLOSERS.contains(&chars[j].1)) {
            j += 1;
        }
        let split = match language {
            Language::Zh => true,
            Language::En => en_boundary(&chars, i, j),
        };
        if split {
            let end = chars.get(j).map_or(text.len(), |&(b, _)| b);
            push_trimmed(&mut out, &text[start..end]);
            start = end;
        }
        i = j;
    }
    push_trimmed(&mut out, &text[start..]);
    out
}

fn en_boundary(chars: &[(usize, char)], term: usize, after: usize) -> bool {
    let mut k = after;
    while k < chars.len() && chars[k].1.is_whitespace() {
        k += 1;
    }
    if k == after || k == chars.len() {
        return false;
    }
    let next = chars[k].1;
    if !(next.is_uppercase() || OPENERS.contains(&next)) {
        return false;
    }
    if chars[term].1 == '.' {
        let mut w = term;
        while w > 0 && !chars[w - 1].1.is_whitespace() {
            w -= 1;
        }
        let word: String = chars[w..=term]
            .iter()
            .map(|&(_, c)| c)
            .skip_while(|c| !c.is_alphanumeric())
            .flat_map(char::to_lowercase)
            .collect();
        if ABBREVIATIONS.contains(&word.as_str()) {
            return false;
        }
    }
    true
}

fn push_trimmed(out: &mut Vec<String>, piece: &str) {
    let piece = piece.trim();
    if !piece.is_empty() {
        out.push(piece.to_string());
    }
}

/// English: lowercase alphanumeric runs, punctuation dropped.
/// Chinese: one token per non-whitespace character.
pub fn tokenize(sentence: &str, language: Language) -> Vec<String> {
    match language {
        Language::En => sentence
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(str::to_lowercase)
            .collect(),
        Language::Zh => sentence
            .chars()
            .filter(|c| !c.is_whitespace())
            .map(String::from)
            .collect(),
    }
}

/// Source length in words (English) or non-whitespace characters (Chinese),
/// bucketed at 5k and 10k, plus single/multi document class.
pub fn bucketize_example(example: &Example) -> (LengthBucket, DocClass) {
    let length: usize = example
        .documents
        .iter()
        .map(|d| match example.language {
            Language::En => d.raw_text.split_whitespace().count(),
            Language::Zh => d.raw_text.chars().filter(|c| !c.is_whitespace()).count(),
        })
        .sum();
    let class = if example.documents.len() >= 2 {
        DocClass::Multi
    } else {
        DocClass::Single
    };
    (LengthBucket::from_length(length), class)
}

#[derive(Serialize, Deserialize)]
struct RawDocument {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sentences: Option<Vec<String>>,
}

#[derive(Serialize, Deserialize)]
struct RawExample {
    id: String,
    language: Language,
    scenario: String,
    documents: Vec<RawDocument>,
    targets: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gold: Option<Vec<ProvenanceLink>>,
}

impl RawExample {
    fn into_example(self) -> Result<Example, (String, String)> {
        let language = self.language;
        let mut documents = Vec::with_capacity(self.documents.len());
        for (i, d) in self.documents.into_iter().enumerate() {
            let doc = match (d.text, d.sentences) {
                (Some(text), Some(sentences)) => Document {
                    raw_text: text,
                    sentences,
                    language,
                },
                (None, Some(sentences)) => Document::from_sentences(sentences, language),
                (Some(text), None) => Document::from_text(text, language),
                (None, None) => {
                    return Err((self.id, format!("document {i} has neither `text` nor `sentences`")))
                }
            };
            if doc.sentences.iter().any(|s| s.trim().is_empty()) {
                return Err((self.id, format!("document {i} contains an empty sentence")));
            }
            documents.push(doc);
        }
        let example = Example {
            id: self.id,
            language,
            scenario: self.scenario,
            documents,
            targets: self.targets,
            gold: self.gold,
        };
        match example.validate() {
            Ok(()) => Ok(example),
            Err(reason) => Err((example.id, reason)),
        }
    }

    fn from_example(e: &Example) -> Self {
        RawExample {
            id: e.id.clone(),
            language: e.language,
            scenario: e.scenario.clone(),
            documents: e
                .documents
                .iter()
                .map(|d| RawDocument {
                    text: Some(d.raw_text.clone()),
                    sentences: Some(d.sentences.clone()),
                })
                .collect(),
            targets: e.targets.clone(),
            gold: e.gold.clone(),
        }
    }
}

/// Reads a JSONL dataset, one example per line, in file order. Blank lines
/// are skipped; ids must be unique.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<Example>, CorpusError> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_dataset(BufReader::new(file)).map_err(|e| match e {
        CorpusError::Io { source, .. } => CorpusError::Io {
            path: path.display().to_string(),
            source,
        },
        other => other,
    })
}

pub fn read_dataset(reader: impl BufRead) -> Result<Vec<Example>, CorpusError> {
    let mut out: Vec<Example> = Vec::new();
    let mut ids = BTreeSet::new();
    for (n, line) in reader.lines().enumerate() {
        let line_no = n + 1;
        let line = line.map_err(|source| CorpusError::Io {
            path: String::new(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawExample = serde_json::from_str(&line).map_err(|source| CorpusError::Parse {
            line: line_no,
            source,
        })?;
        let example = raw.into_example().map_err(|(id, reason)| CorpusError::Invalid {
            line: line_no,
            id,
            reason,
        })?;
        if !ids.insert(example.id.clone()) {
            return Err(CorpusError::Invalid {
                line: line_no,
                id: example.id,
                reason: "duplicate example id".into(),
            });
        }
        out.push(example);
    }
    Ok(out)
}

/// Serializes one example as a single JSON line (no trailing newline).
/// Documents carry both `text` and `sentences` so reloading is lossless.
pub fn example_to_json(example: &Example) -> String {
    serde_json::to_string(&RawExample::from_example(example)).expect("example serializes")
}

pub fn write_dataset(mut w: impl Write, examples: &[Example]) -> std::io::Result<()> {
    for e in examples {
        writeln!(w, "{}", example_to_json(e))?;
    }
    Ok(())
}

/// One line of a prediction or annotation file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,
    pub links: Vec<ProvenanceLink>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warnings: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chat_calls: Option<usize>,
    /// Per-target flag: the annotator changed the model's proposal.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modified: Option<Vec<bool>>,
}

impl PredictionRecord {
    pub fn new(id: impl Into<String>, links: Vec<ProvenanceLink>) -> Self {
        Self {
            id: id.into(),
            method: None,
            links,
            warnings: None,
            chat_calls: None,
            modified: None,
        }
    }
}

pub fn load_predictions(path: impl AsRef<Path>) -> Result<Vec<PredictionRecord>, CorpusError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: PredictionRecord = serde_json::from_str(line).map_err(|source| CorpusError::Parse {
            line: n + 1,
            source,
        })?;
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seg_en(s: &str) -> Vec<String> {
        segment_sentences(s, Language::En)
    }

    #[test]
    fn segments_worked_examples() {
        assert!(seg_en("").is_empty());
        assert_eq!(seg_en("He left. She stayed."), vec!["He left.", "She stayed."]);
        assert_eq!(
            segment_sentences("天气很好。我们出发了！", Language::Zh),
            vec!["天气很好。", "我们出发了！"]
        );
    }

    #[test]
    fn english_abbreviations_do_not_split() {
        assert_eq!(
            seg_en("Mr. Smith went to the U.S. Army base. It was closed."),
            vec!["Mr. Smith went to the U.S. Army base.", "It was closed."]
        );
        assert_eq!(seg_en("Tools, e.g. Hammers, help."), vec!["Tools, e.g. Hammers, help."]);
    }

    #[test]
    fn english_requires_uppercase_or_quote_after_terminator() {
        assert_eq!(seg_en("It costs 3.5 dollars. then more"), vec!["It costs 3.5 dollars. then more"]);
        assert_eq!(seg_en("Why? \"Because.\" Fine!"), vec!["Why?", "\"Because.\"", "Fine!"]);
        assert_eq!(seg_en("Wait... What?! No."), vec!["Wait...", "What?!", "No."]);
    }

    #[test]
    fn chinese_absorbs_closing_quotes() {
        assert_eq!(
            segment_sentences("他说：“好。”然后走了；再见", Language::Zh),
            vec!["他说：“好。”", "然后走了；", "再见"]
        );
    }

    #[test]
    fn tokenizes() {
        assert_eq!(tokenize("The cat, the cat.", Language::En), vec!["the", "cat", "the", "cat"]);
        assert_eq!(tokenize("图书馆", Language::Zh), vec!["图", "书", "馆"]);
        assert!(tokenize("", Language::En).is_empty());
        assert_eq!(tokenize("图 书", Language::Zh), vec!["图", "书"]);
    }

    fn example_with_words(words: usize, docs: usize, language: Language) -> Example {
        let unit = match language {
            Language::En => "w ",
            Language::Zh => "字",
        };
        let per_doc = words / docs;
        let mut documents: Vec<Document> = (0..docs)
            .map(|_| Document::from_text(unit.repeat(per_doc), language))
            .collect();
        documents[0] = Document::from_text(unit.repeat(words - per_doc * (docs - 1)), language);
        Example {
            id: "x".into(),
            language,
            scenario: "s".into(),
            documents,
            targets: vec!["t".into()],
            gold: None,
        }
    }

    #[test]
    fn bucket_boundaries() {
        assert_eq!(
            bucketize_example(&example_with_words(4_999, 1, Language::En)),
            (LengthBucket::B0To5k, DocClass::Single)
        );
        assert_eq!(
            bucketize_example(&example_with_words(5_000, 3, Language::En)),
            (LengthBucket::B5kTo10k, DocClass::Multi)
        );
        assert_eq!(
            bucketize_example(&example_with_words(12_000, 1, Language::Zh)),
            (LengthBucket::B10kPlus, DocClass::Single)
        );
        assert_eq!(LengthBucket::from_length(10_000), LengthBucket::B10kPlus);
    }

    const VALID: &str = r#"{"id":"a","language":"en","scenario":"QMSum","documents":[{"text":"One. Two."},{"sentences":["Three.","Four."]}],"targets":["One."],"gold":[{"target_idx":0,"doc_idx":1,"sent_idx":1,"relation":"quotation"}]}"#;

    #[test]
    fn loads_valid_line() {
        let ex = read_dataset(VALID.as_bytes()).unwrap();
        assert_eq!(ex.len(), 1);
        assert_eq!(ex[0].documents[0].sentences, vec!["One.", "Two."]);
        assert_eq!(ex[0].documents[1].raw_text, "Three.\nFour.");
        assert_eq!(ex[0].sentence_count(), 4);
        assert_eq!(ex[0].doc_class(), DocClass::Multi);
    }

    #[test]
    fn missing_targets_names_line() {
        let input = format!("{VALID}\n{{\"id\":\"b\",\"language\":\"en\",\"scenario\":\"s\",\"documents\":[]}}\n");
        let err = read_dataset(input.as_bytes()).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, CorpusError::Parse { line: 2, .. }), "{msg}");
        assert!(msg.contains("targets"), "{msg}");
    }

    #[test]
    fn out_of_range_gold_names_example() {
        let input = r#"{"id":"ex-7","language":"en","scenario":"s","documents":[{"text":"A."},{"text":"B."}],"targets":["A."],"gold":[{"target_idx":0,"doc_idx":5,"sent_idx":0,"relation":"other"}]}"#;
        let err = read_dataset(input.as_bytes()).unwrap_err();
        assert!(matches!(&err, CorpusError::Invalid { id, line: 1, .. } if id == "ex-7"), "{err}");
    }

    #[test]
    fn rejects_empty_targets_and_duplicates() {
        let empty = r#"{"id":"e","language":"zh","scenario":"s","documents":[{"text":"好。"}],"targets":[]}"#;
        assert!(matches!(read_dataset(empty.as_bytes()), Err(CorpusError::Invalid { .. })));
        let dup = format!("{VALID}\n{VALID}");
        assert!(matches!(read_dataset(dup.as_bytes()), Err(CorpusError::Invalid { line: 2, .. })));
    }

    #[test]
    fn prediction_record_ignores_extra_fields() {
        let line = r#"{"id":"a","method":"ra","links":[],"warnings":2,"chat_calls":1,"extra":true}"#;
        let rec: PredictionRecord = serde_json::from_str(line).unwrap();
        assert_eq!(rec.warnings, Some(2));
        assert!(rec.links.is_empty());
    }

    fn non_ws(s: &str) -> String {
        s.chars().filter(|c| !c.is_whitespace()).collect()
    }

    fn text_strategy() -> impl Strategy<Value = String> {
        let pieces = prop::sample::select(vec![
            "He", "she", "Mr.", "e.g.", "U.S.", ".", "!", "?", " ", "  ", "\n", "\"", "”", "。", "！",
            "；", "天", "A", "b", "3.5", "...", "(", ")", "’",
        ]);
        prop::collection::vec(pieces, 0..40).prop_map(|v| v.concat())
    }

    proptest! {
        #[test]
        fn segmentation_preserves_non_whitespace(text in text_strategy(), zh in any::<bool>()) {
            let lang = if zh { Language::Zh } else { Language::En };
            let sents = segment_sentences(&text, lang);
            prop_assert_eq!(non_ws(&sents.concat()), non_ws(&text));
            prop_assert!(sents.iter().all(|s| !s.trim().is_empty()));
        }

        #[test]
        fn segmentation_is_idempotent(text in text_strategy(), zh in any::<bool>()) {
            let lang = if zh { Language::Zh } else { Language::En };
            for s in segment_sentences(&text, lang) {
                prop_assert_eq!(segment_sentences(&s, lang), vec![s.clone()]);
            }
        }

        #[test]
        fn arbitrary_unicode_round_trips(text in "\\PC{0,60}") {
            for lang in [Language::En, Language::Zh] {
                let sents = segment_sentences(&text, lang);
                prop_assert_eq!(non_ws(&sents.concat()), non_ws(&text));
                prop_assert_eq!(tokenize(&text, lang), tokenize(&text, lang));
            }
        }

        #[test]
        fn dataset_round_trip(
            texts in prop::collection::vec(text_strategy(), 1..4),
            targets in prop::collection::vec("[a-z ]{1,12}", 1..4),
            zh in any::<bool>(),
        ) {
            let lang = if zh { Language::Zh } else { Language::En };
            let documents: Vec<Document> = texts.iter().map(|t| Document::from_text(t.clone(), lang)).collect();
            let gold = documents
                .iter()
                .enumerate()
                .filter(|(_, d)| !d.sentences.is_empty())
                .map(|(i, _)| ProvenanceLink::new(0, SentenceRef::new(i, 0), RelationType::Inference))
                .collect();
            let ex = Example { id: "rt".into(), language: lang, scenario: "s".into(), documents, targets, gold: Some(gold) };
            let mut buf = Vec::new();
            write_dataset(&mut buf, std::slice::from_ref(&ex)).unwrap();
            let back = read_dataset(buf.as_slice()).unwrap();
            prop_assert_eq!(back, vec![ex]);
        }
    }
}
