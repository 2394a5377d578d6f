//! Brute-force references, independent of the library's set-based code paths.

use num_rational::Ratio;
use rand::rngs::StdRng;
use rand::Rng;
use trove::corpus::{ProvenanceLink, RelationType, SentenceRef};
use trove::metrics::EvalPair;

#[derive(Debug, Clone)]
pub struct Instance {
    pub n_targets: usize,
    pub sources: Vec<SentenceRef>,
    pub pred: Vec<ProvenanceLink>,
    pub gold: Vec<ProvenanceLink>,
}

impl Instance {
    pub fn eval_pair(&self, id: &str) -> EvalPair {
        EvalPair {
            id: id.to_string(),
            n_targets: self.n_targets,
            pred: self.pred.clone(),
            gold: self.gold.clone(),
        }
    }
}

/// At most `max_links` links per target, one relation per (target, source).
fn random_links(rng: &mut StdRng, n_targets: usize, sources: &[SentenceRef], max_links: usize) -> Vec<ProvenanceLink> {
    let mut out: Vec<ProvenanceLink> = Vec::new();
    for t in 0..n_targets {
        for _ in 0..rng.gen_range(0..=max_links) {
            let s = sources[rng.gen_range(0..sources.len())];
            let rel = RelationType::ALL[rng.gen_range(0..4)];
            if !out.iter().any(|l| l.target_idx == t && l.source == s) {
                out.push(ProvenanceLink::new(t, s, rel));
            }
        }
    }
    out
}

/// ≤5 targets, ≤10 sources over ≤3 documents, ≤3 links per target per side.
pub fn random_instance(rng: &mut StdRng) -> Instance {
    let n_targets = rng.gen_range(1..=5);
    let n_docs = rng.gen_range(1..=3);
    let n_sources = rng.gen_range(n_docs..=10);
    let sources: Vec<SentenceRef> = (0..n_sources).map(|i| SentenceRef::new(i % n_docs, i / n_docs)).collect();
    let pred = random_links(rng, n_targets, &sources, 3);
    let gold = random_links(rng, n_targets, &sources, 3);
    Instance {
        n_targets,
        sources,
        pred,
        gold,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

/// Walks the full universe of (source[, relation]) items for one target and
/// classifies each by linear membership scans of the link lists.
pub fn enumerate_target(inst: &Instance, target: usize, relation_mode: bool) -> Confusion {
    let mut c = Confusion::default();
    let relations: Vec<Option<RelationType>> = if relation_mode {
        RelationType::ALL.iter().copied().map(Some).collect()
    } else {
        vec![None]
    };
    let has = |links: &[ProvenanceLink], s: SentenceRef, r: Option<RelationType>| {
        links
            .iter()
            .any(|l| l.target_idx == target && l.source == s && r.is_none_or(|r| l.relation == r))
    };
    for &s in &inst.sources {
        for &r in &relations {
            match (has(&inst.pred, s, r), has(&inst.gold, s, r)) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => {}
            }
        }
    }
    c
}

fn pr_float(c: Confusion) -> (f64, f64) {
    let pred = c.tp + c.fp;
    let gold = c.tp + c.fn_;
    let side = |num: u64, den: u64, other: u64| match (den, other) {
        (0, 0) => 1.0,
        (0, _) => 0.0,
        _ => num as f64 / den as f64,
    };
    (side(c.tp, pred, gold), side(c.tp, gold, pred))
}

fn pr_exact(c: Confusion) -> (Ratio<i128>, Ratio<i128>) {
    let pred = (c.tp + c.fp) as i128;
    let gold = (c.tp + c.fn_) as i128;
    let side = |num: i128, den: i128, other: i128| match (den, other) {
        (0, 0) => Ratio::from_integer(1),
        (0, _) => Ratio::from_integer(0),
        _ => Ratio::new(num, den),
    };
    (side(c.tp as i128, pred, gold), side(c.tp as i128, gold, pred))
}

fn avg_f(values: &[f64]) -> f64 {
    let mut s = 0.0;
    for v in values {
        s += v;
    }
    s / values.len() as f64
}

fn avg_q(values: &[Ratio<i128>]) -> Ratio<i128> {
    values.iter().fold(Ratio::from_integer(0), |a, b| a + b) / Ratio::from_integer(values.len() as i128)
}

/// Macro (P, R): per-target ratios averaged per example, then over examples.
pub fn macro_float(instances: &[Instance], relation_mode: bool) -> (f64, f64) {
    let per_ex: Vec<(f64, f64)> = instances
        .iter()
        .map(|inst| {
            let prs: Vec<(f64, f64)> = (0..inst.n_targets)
                .map(|t| pr_float(enumerate_target(inst, t, relation_mode)))
                .collect();
            (
                avg_f(&prs.iter().map(|x| x.0).collect::<Vec<_>>()),
                avg_f(&prs.iter().map(|x| x.1).collect::<Vec<_>>()),
            )
        })
        .collect();
    (
        avg_f(&per_ex.iter().map(|x| x.0).collect::<Vec<_>>()),
        avg_f(&per_ex.iter().map(|x| x.1).collect::<Vec<_>>()),
    )
}

pub fn macro_exact(instances: &[Instance], relation_mode: bool) -> (Ratio<i128>, Ratio<i128>) {
    let per_ex: Vec<(Ratio<i128>, Ratio<i128>)> = instances
        .iter()
        .map(|inst| {
            let prs: Vec<_> = (0..inst.n_targets)
                .map(|t| pr_exact(enumerate_target(inst, t, relation_mode)))
                .collect();
            (
                avg_q(&prs.iter().map(|x| x.0).collect::<Vec<_>>()),
                avg_q(&prs.iter().map(|x| x.1).collect::<Vec<_>>()),
            )
        })
        .collect();
    (
        avg_q(&per_ex.iter().map(|x| x.0).collect::<Vec<_>>()),
        avg_q(&per_ex.iter().map(|x| x.1).collect::<Vec<_>>()),
    )
}

fn summed(inst: &Instance, relation_mode: bool) -> Confusion {
    (0..inst.n_targets)
        .map(|t| enumerate_target(inst, t, relation_mode))
        .fold(Confusion::default(), |a, c| Confusion {
            tp: a.tp + c.tp,
            fp: a.fp + c.fp,
            fn_: a.fn_ + c.fn_,
        })
}

/// Micro (P, R) from per-example summed confusion counts; `global` pools
/// counts over all instances instead.
pub fn micro_float(instances: &[Instance], relation_mode: bool, global: bool) -> (f64, f64) {
    if global {
        let total = instances.iter().map(|i| summed(i, relation_mode)).fold(Confusion::default(), |a, c| Confusion {
            tp: a.tp + c.tp,
            fp: a.fp + c.fp,
            fn_: a.fn_ + c.fn_,
        });
        return pr_float(total);
    }
    let prs: Vec<(f64, f64)> = instances.iter().map(|i| pr_float(summed(i, relation_mode))).collect();
    (
        avg_f(&prs.iter().map(|x| x.0).collect::<Vec<_>>()),
        avg_f(&prs.iter().map(|x| x.1).collect::<Vec<_>>()),
    )
}

pub fn micro_exact(instances: &[Instance], relation_mode: bool) -> (Ratio<i128>, Ratio<i128>) {
    let prs: Vec<_> = instances.iter().map(|i| pr_exact(summed(i, relation_mode))).collect();
    (
        avg_q(&prs.iter().map(|x| x.0).collect::<Vec<_>>()),
        avg_q(&prs.iter().map(|x| x.1).collect::<Vec<_>>()),
    )
}

pub fn ratio_to_f64(q: Ratio<i128>) -> f64 {
    *q.numer() as f64 / *q.denom() as f64
}

/// Fleiss' kappa by explicit rater expansion: each item becomes a list of
/// labels, observed agreement is the share of agreeing ordered rater pairs,
/// chance agreement the sum of squared label shares.
pub fn brute_kappa(counts: &[Vec<usize>]) -> Option<f64> {
    let labels: Vec<Vec<usize>> = counts
        .iter()
        .map(|row| row.iter().enumerate().flat_map(|(c, &k)| std::iter::repeat_n(c, k)).collect())
        .collect();
    let n = labels.first()?.len();
    let mut agree_sum = 0.0;
    for item in &labels {
        let mut agree = 0usize;
        for a in 0..n {
            for b in 0..n {
                if a != b && item[a] == item[b] {
                    agree += 1;
                }
            }
        }
        agree_sum += agree as f64 / (n * (n - 1)) as f64;
    }
    let p_obs = agree_sum / labels.len() as f64;
    let all: Vec<usize> = labels.iter().flatten().copied().collect();
    let categories = counts[0].len();
    let p_exp: f64 = (0..categories)
        .map(|c| {
            let share = all.iter().filter(|&&x| x == c).count() as f64 / all.len() as f64;
            share * share
        })
        .sum();
    if all.iter().all(|&x| x == all[0]) {
        return Some(1.0);
    }
    Some((p_obs - p_exp) / (1.0 - p_exp))
}

/// Length of the longest subsequence of `a` (all 2^|a| masks) that is also a
/// subsequence of `b`.
pub fn brute_lcs<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut best = 0;
    for mask in 0u32..(1u32 << a.len()) {
        let len = mask.count_ones() as usize;
        if len <= best {
            continue;
        }
        let mut it = b.iter();
        let ok = (0..a.len())
            .filter(|i| mask >> i & 1 == 1)
            .all(|i| it.any(|y| *y == a[i]));
        if ok {
            best = len;
        }
    }
    best
}
