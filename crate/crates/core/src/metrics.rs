//! Evaluation: macro/micro Track and Relation precision/recall, their F1s,
//! the overall F1, report breakdowns, and Fleiss' kappa.
//!
//! Per target sentence, TRACK compares the sets of predicted and gold source
//! sentences; RELATION compares `(source, relation)` pairs. An empty side is
//! handled as: both empty gives P = R = 1, one empty gives 0 for the ratio
//! whose denominator is zero.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Example, PredictionRecord, ProvenanceLink, RelationType, SentenceRef};
use crate::tracer::merge_chunk_predictions;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("prediction/gold id mismatch; missing predictions: [{}]; unknown ids: [{}]", missing.join(", "), unknown.join(", "))]
    IdMismatch { missing: Vec<String>, unknown: Vec<String> },
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("example `{0}` has no gold annotation")]
    MissingGold(String),
    #[error("example `{id}`: {reason}")]
    InvalidLinks { id: String, reason: String },
    #[error("annotation matrix: {0}")]
    Matrix(String),
    #[error("kappa undefined: {0}")]
    Undefined(String),
    #[error("need at least 2 annotators, got {0}")]
    TooFewAnnotators(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchMode {
    Track,
    Relation,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairCounts {
    pub tp: usize,
    pub pred: usize,
    pub gold: usize,
}

impl PairCounts {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.pred, self.gold)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.gold, self.pred)
    }

    pub fn add(&mut self, other: PairCounts) {
        self.tp += other.tp;
        self.pred += other.pred;
        self.gold += other.gold;
    }
}

fn ratio(tp: usize, denom: usize, other_side: usize) -> f64 {
    match (denom, other_side) {
        (0, 0) => 1.0,
        (0, _) => 0.0,
        _ => tp as f64 / denom as f64,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum PairKey {
    Track(SentenceRef),
    Relation(SentenceRef, RelationType),
}

fn key(link: &ProvenanceLink, mode: MatchMode) -> PairKey {
    match mode {
        MatchMode::Track => PairKey::Track(link.source),
        MatchMode::Relation => PairKey::Relation(link.source, link.relation),
    }
}

/// Counts for one target sentence.
pub fn match_pairs(
    pred: &[ProvenanceLink],
    gold: &[ProvenanceLink],
    target_idx: usize,
    mode: MatchMode,
) -> PairCounts {
    let side = |links: &[ProvenanceLink]| -> BTreeSet<PairKey> {
        links
            .iter()
            .filter(|l| l.target_idx == target_idx)
            .map(|l| key(l, mode))
            .collect()
    };
    let (p, g) = (side(pred), side(gold));
    PairCounts {
        tp: p.intersection(&g).count(),
        pred: p.len(),
        gold: g.len(),
    }
}

/// One example's predictions aligned with its gold annotation.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalPair {
    pub id: String,
    pub n_targets: usize,
    pub pred: Vec<ProvenanceLink>,
    pub gold: Vec<ProvenanceLink>,
}

impl EvalPair {
    /// Counts for every target sentence `0..n_targets`.
    pub fn target_counts(&self, mode: MatchMode) -> Vec<PairCounts> {
        let group = |links: &[ProvenanceLink]| {
            let mut m: HashMap<usize, BTreeSet<PairKey>> = HashMap::new();
            for l in links {
                m.entry(l.target_idx).or_default().insert(key(l, mode));
            }
            m
        };
        let (pred, gold) = (group(&self.pred), group(&self.gold));
        let empty = BTreeSet::new();
        (0..self.n_targets)
            .map(|t| {
                let p = pred.get(&t).unwrap_or(&empty);
                let g = gold.get(&t).unwrap_or(&empty);
                PairCounts {
                    tp: p.intersection(g).count(),
                    pred: p.len(),
                    gold: g.len(),
                }
            })
            .collect()
    }
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values
        .into_iter()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Per-sentence P/R averaged within each example, then over examples.
pub fn macro_metrics(pairs: &[EvalPair], mode: MatchMode) -> (f64, f64) {
    let per_example: Vec<(f64, f64)> = pairs
        .iter()
        .map(|pair| {
            let counts = pair.target_counts(mode);
            (
                mean(counts.iter().map(PairCounts::precision)),
                mean(counts.iter().map(PairCounts::recall)),
            )
        })
        .collect();
    (
        mean(per_example.iter().map(|x| x.0)),
        mean(per_example.iter().map(|x| x.1)),
    )
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MicroPooling {
    /// Counts summed within each example; example scores averaged.
    #[default]
    PerExample,
    /// Counts summed over the whole dataset.
    Global,
}

pub fn micro_metrics(pairs: &[EvalPair], mode: MatchMode, pooling: MicroPooling) -> (f64, f64) {
    let sums: Vec<PairCounts> = pairs
        .iter()
        .map(|pair| {
            let mut total = PairCounts::default();
            pair.target_counts(mode).into_iter().for_each(|c| total.add(c));
            total
        })
        .collect();
    match pooling {
        MicroPooling::PerExample => (
            mean(sums.iter().map(PairCounts::precision)),
            mean(sums.iter().map(PairCounts::recall)),
        ),
        MicroPooling::Global => {
            let mut total = PairCounts::default();
            sums.into_iter().for_each(|c| total.add(c));
            (total.precision(), total.recall())
        }
    }
}

pub fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Arithmetic mean of the four F1 scores.
pub fn overall_f1(f1s: [f64; 4]) -> f64 {
    f1s.iter().sum::<f64>() / 4.0
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub p: f64,
    pub r: f64,
    pub f1: f64,
}

impl Prf {
    pub fn new((p, r): (f64, f64)) -> Self {
        Self { p, r, f1: f1(p, r) }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricScores {
    pub macro_track: Prf,
    pub micro_track: Prf,
    pub macro_relation: Prf,
    pub micro_relation: Prf,
    pub overall_f1: f64,
}

impl MetricScores {
    pub fn compute(pairs: &[EvalPair], pooling: MicroPooling) -> Self {
        let macro_track = Prf::new(macro_metrics(pairs, MatchMode::Track));
        let micro_track = Prf::new(micro_metrics(pairs, MatchMode::Track, pooling));
        let macro_relation = Prf::new(macro_metrics(pairs, MatchMode::Relation));
        let micro_relation = Prf::new(micro_metrics(pairs, MatchMode::Relation, pooling));
        Self {
            overall_f1: overall_f1([macro_track.f1, micro_track.f1, macro_relation.f1, micro_relation.f1]),
            macro_track,
            micro_track,
            macro_relation,
            micro_relation,
        }
    }

    /// The thirteen reported numbers in CSV column order.
    pub fn values(&self) -> [f64; 13] {
        let [a, b, c, d] = [self.macro_track, self.micro_track, self.macro_relation, self.micro_relation];
        [a.p, a.r, a.f1, b.p, b.r, b.f1, c.p, c.r, c.f1, d.p, d.r, d.f1, self.overall_f1]
    }
}

pub const CSV_COLUMNS: [&str; 14] = [
    "cell",
    "macro_track_p",
    "macro_track_r",
    "macro_track_f1",
    "micro_track_p",
    "micro_track_r",
    "micro_track_f1",
    "macro_relation_p",
    "macro_relation_r",
    "macro_relation_f1",
    "micro_relation_p",
    "micro_relation_r",
    "micro_relation_f1",
    "overall_f1",
];

/// Axes along which reports are broken down, in output order.
pub const BREAKDOWN_AXES: [&str; 4] = ["scenario", "language", "length", "docs"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreakdownCell {
    pub axis: String,
    pub value: String,
    pub n_examples: usize,
    pub scores: MetricScores,
}

impl BreakdownCell {
    pub fn label(&self) -> String {
        format!("{}={}", self.axis, self.value)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    /// Dataset-level averaging unit.
    pub aggregation: String,
    pub micro_pooling: MicroPooling,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metadata: ReportMetadata,
    pub n_examples: usize,
    pub overall: MetricScores,
    pub breakdowns: Vec<BreakdownCell>,
}

/// Aligns predictions with gold examples by id. Every gold example needs
/// exactly one prediction record and vice versa. Prediction links are range
/// checked and deduplicated.
pub fn pair_predictions(gold: &[Example], preds: &[PredictionRecord]) -> Result<Vec<EvalPair>, MetricsError> {
    let mut by_id: HashMap<&str, &PredictionRecord> = HashMap::new();
    for p in preds {
        if by_id.insert(p.id.as_str(), p).is_some() {
            return Err(MetricsError::DuplicateId(p.id.clone()));
        }
    }
    let gold_ids: BTreeSet<&str> = gold.iter().map(|e| e.id.as_str()).collect();
    let missing: Vec<String> = gold
        .iter()
        .filter(|e| !by_id.contains_key(e.id.as_str()))
        .map(|e| e.id.clone())
        .collect();
    let unknown: Vec<String> = preds
        .iter()
        .filter(|p| !gold_ids.contains(p.id.as_str()))
        .map(|p| p.id.clone())
        .collect();
    if !missing.is_empty() || !unknown.is_empty() {
        return Err(MetricsError::IdMismatch { missing, unknown });
    }
    gold.iter()
        .map(|e| {
            let g = e.gold.as_ref().ok_or_else(|| MetricsError::MissingGold(e.id.clone()))?;
            let p = by_id[e.id.as_str()];
            e.check_links(&p.links).map_err(|reason| MetricsError::InvalidLinks {
                id: e.id.clone(),
                reason,
            })?;
            Ok(EvalPair {
                id: e.id.clone(),
                n_targets: e.targets.len(),
                pred: merge_chunk_predictions(std::slice::from_ref(&p.links)),
                gold: g.clone(),
            })
        })
        .collect()
}

fn axis_value(example: &Example, axis: &str) -> String {
    match axis {
        "scenario" => example.scenario.clone(),
        "language" => example.language.as_str().to_string(),
        "length" => example.length_bucket().as_str().to_string(),
        "docs" => example.doc_class().as_str().to_string(),
        _ => unreachable!("unknown axis {axis}"),
    }
}

/// Full report: overall scores plus one cell per observed value of each
/// breakdown axis. Length cells follow bucket order; other values sort
/// lexically.
pub fn build_report(
    gold: &[Example],
    preds: &[PredictionRecord],
    pooling: MicroPooling,
) -> Result<MetricReport, MetricsError> {
    let pairs = pair_predictions(gold, preds)?;
    let mut breakdowns = Vec::new();
    for axis in BREAKDOWN_AXES {
        let mut groups: BTreeMap<(u8, String), Vec<EvalPair>> = BTreeMap::new();
        for (example, pair) in gold.iter().zip(&pairs) {
            let order = if axis == "length" { example.length_bucket() as u8 } else { 0 };
            groups
                .entry((order, axis_value(example, axis)))
                .or_default()
                .push(pair.clone());
        }
        for ((_, value), members) in groups {
            breakdowns.push(BreakdownCell {
                axis: axis.to_string(),
                value,
                n_examples: members.len(),
                scores: MetricScores::compute(&members, pooling),
            });
        }
    }
    Ok(MetricReport {
        metadata: ReportMetadata {
            aggregation: "example-weighted".into(),
            micro_pooling: pooling,
        },
        n_examples: pairs.len(),
        overall: MetricScores::compute(&pairs, pooling),
        breakdowns,
    })
}

impl MetricReport {
    fn rows(&self) -> Vec<(String, usize, &MetricScores)> {
        std::iter::once(("all".to_string(), self.n_examples, &self.overall))
            .chain(self.breakdowns.iter().map(|c| (c.label(), c.n_examples, &c.scores)))
            .collect()
    }

    /// Header plus one row per cell, 14 columns, values to 6 decimals.
    pub fn to_csv(&self) -> String {
        let mut out = CSV_COLUMNS.join(",");
        out.push('\n');
        for (label, _, scores) in self.rows() {
            out.push_str(&csv_field(&label));
            for v in scores.values() {
                let _ = write!(out, ",{v:.6}");
            }
            out.push('\n');
        }
        out
    }

    /// Aligned plain-text table, values in percent.
    pub fn to_text(&self) -> String {
        let header = [
            "Cell", "N", "MaT-P", "MaT-R", "MaT-F1", "MiT-P", "MiT-R", "MiT-F1", "MaR-P", "MaR-R", "MaR-F1", "MiR-P",
            "MiR-R", "MiR-F1", "F1",
        ];
        let rows = self.rows();
        let width = rows
            .iter()
            .map(|r| r.0.chars().count())
            .chain(std::iter::once(4))
            .max()
            .unwrap_or(4);
        let mut out = String::new();
        let _ = write!(out, "{:<width$} {:>5}", header[0], header[1]);
        for h in &header[2..] {
            let _ = write!(out, " {h:>7}");
        }
        out.push('\n');
        for (label, n, scores) in rows {
            let _ = write!(out, "{:<width$} {n:>5}", label);
            for v in scores.values() {
                let _ = write!(out, " {:>7.2}", v * 100.0);
            }
            out.push('\n');
        }
        let _ = writeln!(
            out,
            "aggregation: {}; micro pooling: {}",
            self.metadata.aggregation,
            match self.metadata.micro_pooling {
                MicroPooling::PerExample => "per-example",
                MicroPooling::Global => "global",
            }
        );
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// `counts[i][c]`: annotators who put item `i` in category `c`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationMatrix {
    counts: Vec<Vec<usize>>,
    categories: usize,
    annotators: usize,
}

impl AnnotationMatrix {
    pub fn new(counts: Vec<Vec<usize>>, categories: usize, annotators: usize) -> Result<Self, MetricsError> {
        if annotators < 2 {
            return Err(MetricsError::Matrix(format!("need at least 2 annotators per item, got {annotators}")));
        }
        for (i, row) in counts.iter().enumerate() {
            if row.len() != categories {
                return Err(MetricsError::Matrix(format!("row {i} has {} columns, expected {categories}", row.len())));
            }
            let sum: usize = row.iter().sum();
            if sum != annotators {
                return Err(MetricsError::Matrix(format!("row {i} sums to {sum}, expected {annotators}")));
            }
        }
        Ok(Self {
            counts,
            categories,
            annotators,
        })
    }

    pub fn counts(&self) -> &[Vec<usize>] {
        &self.counts
    }

    pub fn items(&self) -> usize {
        self.counts.len()
    }

    pub fn categories(&self) -> usize {
        self.categories
    }

    pub fn annotators(&self) -> usize {
        self.annotators
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }
}

/// Fleiss' kappa, `(P̄ − P̄e) / (1 − P̄e)`. When every rating falls in one
/// category (`P̄e = 1`) agreement is perfect and kappa is 1.
pub fn fleiss_kappa(m: &AnnotationMatrix) -> Result<f64, MetricsError> {
    let items = m.items();
    if items == 0 {
        return Err(MetricsError::Undefined("no items".into()));
    }
    let n = m.annotators as f64;
    let p_bar = mean(m.counts.iter().map(|row| {
        let sq: usize = row.iter().map(|c| c * c).sum();
        (sq as f64 - n) / (n * (n - 1.0))
    }));
    let total = items * m.annotators;
    let column = |c: usize| m.counts.iter().map(|row| row[c]).sum::<usize>();
    if (0..m.categories).any(|c| column(c) == total) {
        return if p_bar == 1.0 {
            Ok(1.0)
        } else {
            Err(MetricsError::Undefined("expected agreement is 1 but items disagree".into()))
        };
    }
    let p_e: f64 = (0..m.categories)
        .map(|c| {
            let p = column(c) as f64 / total as f64;
            p * p
        })
        .sum();
    Ok((p_bar - p_e) / (1.0 - p_e))
}

/// The three agreement views over a set of annotators.
#[derive(Debug, Clone, PartialEq)]
pub struct AgreementMatrices {
    /// Items: every `(example, target, source)` traced by anyone;
    /// columns: traced, not traced.
    pub trace: AnnotationMatrix,
    /// Items: pairs traced by every annotator; columns: relation types.
    pub relation_type: AnnotationMatrix,
    /// Items: `(example, target)`; columns: modified, kept. `None` when any
    /// annotation lacks per-target `modified` flags.
    pub correction: Option<AnnotationMatrix>,
    pub notices: Vec<String>,
}

/// Builds the agreement matrices. `annotators[a]` is annotator `a`'s records;
/// all annotators must cover the same example ids.
pub fn build_agreement_matrices(annotators: &[Vec<PredictionRecord>]) -> Result<AgreementMatrices, MetricsError> {
    let n = annotators.len();
    if n < 2 {
        return Err(MetricsError::TooFewAnnotators(n));
    }
    let mut maps: Vec<BTreeMap<&str, &PredictionRecord>> = Vec::with_capacity(n);
    for records in annotators {
        let mut m = BTreeMap::new();
        for r in records {
            if m.insert(r.id.as_str(), r).is_some() {
                return Err(MetricsError::DuplicateId(r.id.clone()));
            }
        }
        maps.push(m);
    }
    let ids: BTreeSet<&str> = maps[0].keys().copied().collect();
    for m in &maps[1..] {
        let other: BTreeSet<&str> = m.keys().copied().collect();
        if other != ids {
            return Err(MetricsError::IdMismatch {
                missing: ids.difference(&other).map(|s| s.to_string()).collect(),
                unknown: other.difference(&ids).map(|s| s.to_string()).collect(),
            });
        }
    }

    type Pair<'a> = (&'a str, usize, SentenceRef);
    let per_annotator: Vec<BTreeMap<Pair, RelationType>> = maps
        .iter()
        .map(|m| {
            m.iter()
                .flat_map(|(id, r)| {
                    merge_chunk_predictions(std::slice::from_ref(&r.links))
                        .into_iter()
                        .map(move |l| ((*id, l.target_idx, l.source), l.relation))
                })
                .collect()
        })
        .collect();
    let universe: BTreeSet<Pair> = per_annotator.iter().flat_map(|a| a.keys().copied()).collect();

    let trace_rows = universe
        .iter()
        .map(|p| {
            let k = per_annotator.iter().filter(|a| a.contains_key(p)).count();
            vec![k, n - k]
        })
        .collect();
    let type_rows = universe
        .iter()
        .filter(|p| per_annotator.iter().all(|a| a.contains_key(p)))
        .map(|p| {
            let mut row = vec![0; RelationType::ALL.len()];
            for a in &per_annotator {
                row[a[p].index()] += 1;
            }
            row
        })
        .collect();

    let mut notices = Vec::new();
    let correction = correction_matrix(&maps, &ids, &mut notices)?;
    Ok(AgreementMatrices {
        trace: AnnotationMatrix::new(trace_rows, 2, n)?,
        relation_type: AnnotationMatrix::new(type_rows, RelationType::ALL.len(), n)?,
        correction,
        notices,
    })
}

fn correction_matrix(
    maps: &[BTreeMap<&str, &PredictionRecord>],
    ids: &BTreeSet<&str>,
    notices: &mut Vec<String>,
) -> Result<Option<AnnotationMatrix>, MetricsError> {
    let mut rows = Vec::new();
    for id in ids {
        let flags: Option<Vec<&Vec<bool>>> = maps.iter().map(|m| m[id].modified.as_ref()).collect();
        let Some(flags) = flags else {
            notices.push(format!("correction agreement skipped: example `{id}` lacks `modified` flags"));
            return Ok(None);
        };
        let len = flags[0].len();
        if flags.iter().any(|f| f.len() != len) {
            notices.push(format!(
                "correction agreement skipped: example `{id}` has `modified` arrays of different lengths"
            ));
            return Ok(None);
        }
        for t in 0..len {
            let k = flags.iter().filter(|f| f[t]).count();
            rows.push(vec![k, maps.len() - k]);
        }
    }
    Ok(Some(AnnotationMatrix::new(rows, 2, maps.len())?))
}
