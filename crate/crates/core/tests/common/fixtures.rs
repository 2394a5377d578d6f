//! Deterministic synthetic datasets.

use std::path::Path;

use trove::corpus::{write_dataset, Document, Example, Language, PredictionRecord, ProvenanceLink, RelationType, SentenceRef};

const EN_WORDS: [&str; 12] = [
    "river", "library", "council", "budget", "harvest", "engine", "festival", "museum", "archive", "bridge", "school",
    "market",
];
const ZH_WORDS: [&str; 12] = ["图书馆", "委员会", "预算", "收成", "引擎", "节日", "博物馆", "档案", "桥梁", "学校", "市场", "河流"];

/// Ten-word English sentence, distinct for every (doc, idx).
pub fn en_sentence(doc: usize, idx: usize) -> String {
    let a = EN_WORDS[(idx + doc) % 12];
    let b = EN_WORDS[(idx * 7 + 3) % 12];
    format!("The {a} report {doc} number {idx} describes the {b} carefully.")
}

/// Twenty-character Chinese sentence, distinct for every (doc, idx).
pub fn zh_sentence(doc: usize, idx: usize) -> String {
    let a = ZH_WORDS[(idx + doc) % 12];
    let b = ZH_WORDS[(idx * 5 + 1) % 12];
    let body = format!("第{doc}号文件第{idx}句讨论了{a}和{b}的情况");
    let mut s: String = body.chars().take(19).collect();
    while s.chars().count() < 19 {
        s.push('的');
    }
    s.push('。');
    s
}

/// `docs` documents of `sents` sentences each; three targets copying,
/// compressing and inferring from known sentences, with matching gold.
pub fn synthetic_example(id: &str, scenario: &str, language: Language, docs: usize, sents: usize) -> Example {
    let make = |d: usize, i: usize| match language {
        Language::En => en_sentence(d, i),
        Language::Zh => zh_sentence(d, i),
    };
    let documents: Vec<Document> = (0..docs)
        .map(|d| Document::from_sentences((0..sents).map(|i| make(d, i)).collect(), language))
        .collect();
    let last_doc = docs - 1;
    let mid = sents / 2;
    let targets = vec![
        make(0, 1),
        match language {
            Language::En => format!("{} Also, {}", make(0, 2), make(last_doc, mid)),
            Language::Zh => format!("{}{}", make(0, 2), make(last_doc, mid)),
        },
        match language {
            Language::En => "Therefore the council will review the budget.".to_string(),
            Language::Zh => "因此委员会将审查预算。".to_string(),
        },
    ];
    let gold = vec![
        ProvenanceLink::new(0, SentenceRef::new(0, 1), RelationType::Quotation),
        ProvenanceLink::new(1, SentenceRef::new(0, 2), RelationType::Compression),
        ProvenanceLink::new(1, SentenceRef::new(last_doc, mid), RelationType::Compression),
        ProvenanceLink::new(2, SentenceRef::new(0, 0), RelationType::Inference),
    ];
    Example {
        id: id.to_string(),
        language,
        scenario: scenario.to_string(),
        documents,
        targets,
        gold: Some(gold),
    }
}

/// Ten examples covering both languages, all three length buckets and
/// single/multi documents.
pub fn ten_example_dataset() -> Vec<Example> {
    use Language::*;
    vec![
        synthetic_example("en-short-single", "QMSum", En, 1, 30),
        synthetic_example("en-short-multi", "MultiNews", En, 2, 40),
        synthetic_example("en-mid-single", "GovReport", En, 1, 600),
        synthetic_example("en-mid-multi", "MultiNews", En, 3, 200),
        synthetic_example("en-long-single", "LongSum", En, 1, 1_100),
        synthetic_example("zh-short-single", "QA1doc", Zh, 1, 40),
        synthetic_example("zh-short-multi", "QA2doc", Zh, 2, 30),
        synthetic_example("zh-mid-multi", "QA3doc", Zh, 3, 120),
        synthetic_example("zh-long-single", "VCSum", Zh, 1, 560),
        synthetic_example("en-short-single-2", "SAMSum", En, 1, 12),
    ]
}

pub fn write_examples(path: &Path, examples: &[Example]) {
    let mut buf = Vec::new();
    write_dataset(&mut buf, examples).unwrap();
    std::fs::write(path, buf).unwrap();
}

/// Prediction file whose links equal each example's gold.
pub fn write_gold_as_predictions(path: &Path, examples: &[Example]) {
    let lines: Vec<String> = examples
        .iter()
        .map(|e| serde_json::to_string(&PredictionRecord::new(e.id.clone(), e.gold.clone().unwrap())).unwrap())
        .collect();
    std::fs::write(path, lines.join("\n") + "\n").unwrap();
}

pub fn write_records(path: &Path, records: &[PredictionRecord]) {
    let lines: Vec<String> = records.iter().map(|r| serde_json::to_string(r).unwrap()).collect();
    std::fs::write(path, lines.join("\n") + "\n").unwrap();
}
