//! Scoring: entity and relation matching under exact-match and any-overlap
//! criteria, precision/recall/F1 with micro-averaging, confusion pairs,
//! recall by span length, run aggregation, and Welch's t-test.
//!
//! Matching is one-to-one and always maximum-cardinality: gold entities are
//! processed in position order and each takes its most-overlapping available
//! partner, but a pairing is only accepted when it provably preserves the
//! maximum achievable number of matches (checked with an augmenting-path
//! matcher on the remainder). Pure greedy can otherwise strand a later gold
//! entity whose only partner was taken.

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::corpus::{Document, Entity, Relation};
use crate::schema::{LabelSchema, FINDING_LABEL};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("each sample needs at least two values")]
    SampleTooSmall,
    #[error("combined variance is zero; t statistic undefined")]
    DegenerateVariance,
    #[error("at least one run required")]
    NoRuns,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchCriterion {
    /// Identical token span and identical label.
    Exact,
    /// At least one shared token and identical label.
    AnyOverlap,
}

impl MatchCriterion {
    pub fn name(&self) -> &'static str {
        match self {
            MatchCriterion::Exact => "exact",
            MatchCriterion::AnyOverlap => "overlap",
        }
    }
}

/// Shared-token count between two spans in the same sentence.
fn overlap_tokens(a: &Entity, b: &Entity) -> usize {
    if a.sentence_index != b.sentence_index {
        return 0;
    }
    let lo = a.span.0.max(b.span.0);
    let hi = a.span.1.min(b.span.1);
    if lo <= hi {
        hi - lo + 1
    } else {
        0
    }
}

fn compatible(gold: &Entity, pred: &Entity, criterion: MatchCriterion) -> bool {
    if gold.sentence_index != pred.sentence_index || gold.label != pred.label {
        return false;
    }
    match criterion {
        MatchCriterion::Exact => gold.span == pred.span,
        MatchCriterion::AnyOverlap => overlap_tokens(gold, pred) > 0,
    }
}

/// One-to-one entity matching for a single document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntityMatching {
    /// Matched (gold index, pred index) pairs.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_gold: Vec<usize>,
    pub unmatched_pred: Vec<usize>,
}

impl EntityMatching {
    pub fn tp(&self) -> usize {
        self.pairs.len()
    }

    /// gold index -> pred index
    pub fn gold_to_pred(&self) -> BTreeMap<usize, usize> {
        self.pairs.iter().copied().collect()
    }
}

fn kuhn_augment(
    g: usize,
    adj: &[Vec<usize>],
    banned_pred: &[bool],
    visited: &mut [bool],
    match_of_pred: &mut [Option<usize>],
) -> bool {
    for &p in &adj[g] {
        if banned_pred[p] || visited[p] {
            continue;
        }
        visited[p] = true;
        let free = match match_of_pred[p] {
            None => true,
            Some(g2) => kuhn_augment(g2, adj, banned_pred, visited, match_of_pred),
        };
        if free {
            match_of_pred[p] = Some(g);
            return true;
        }
    }
    false
}

/// Maximum bipartite matching cardinality over the active gold rows,
/// avoiding banned pred columns.
fn max_matching_size(
    adj: &[Vec<usize>],
    n_pred: usize,
    active_gold: &[bool],
    banned_pred: &[bool],
) -> usize {
    let mut match_of_pred: Vec<Option<usize>> = vec![None; n_pred];
    let mut size = 0;
    for (g, &active) in active_gold.iter().enumerate() {
        if !active {
            continue;
        }
        let mut visited = vec![false; n_pred];
        if kuhn_augment(g, adj, banned_pred, &mut visited, &mut match_of_pred) {
            size += 1;
        }
    }
    size
}

/// Match gold against predicted entities. Gold entities are resolved in
/// position order; candidates are preferred by larger token overlap, then by
/// earlier predicted span. Every accepted pair is verified to preserve the
/// maximum total number of matches.
pub fn match_entities(
    gold: &[Entity],
    pred: &[Entity],
    criterion: MatchCriterion,
) -> EntityMatching {
    let n_gold = gold.len();
    let n_pred = pred.len();
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n_gold];
    for (gi, g) in gold.iter().enumerate() {
        let mut cands: Vec<usize> = (0..n_pred)
            .filter(|&pi| compatible(g, &pred[pi], criterion))
            .collect();
        cands.sort_by_key(|&pi| {
            (
                std::cmp::Reverse(overlap_tokens(g, &pred[pi])),
                pred[pi].span,
                pi,
            )
        });
        adj[gi] = cands;
    }
    let mut gold_order: Vec<usize> = (0..n_gold).collect();
    gold_order.sort_by_key(|&gi| (gold[gi].sentence_index, gold[gi].span, gold[gi].label, gi));

    let mut undecided = vec![true; n_gold];
    let mut taken = vec![false; n_pred];
    let target = max_matching_size(&adj, n_pred, &undecided, &taken);
    let mut pairs = Vec::new();
    for &gi in &gold_order {
        undecided[gi] = false;
        for &pi in &adj[gi] {
            if taken[pi] {
                continue;
            }
            taken[pi] = true;
            let rest = max_matching_size(&adj, n_pred, &undecided, &taken);
            if pairs.len() + 1 + rest == target {
                pairs.push((gi, pi));
                break;
            }
            taken[pi] = false;
        }
    }
    debug_assert_eq!(pairs.len(), target);
    let matched_gold: Vec<usize> = pairs.iter().map(|&(g, _)| g).collect();
    let matched_pred: Vec<usize> = pairs.iter().map(|&(_, p)| p).collect();
    EntityMatching {
        unmatched_gold: (0..n_gold).filter(|g| !matched_gold.contains(g)).collect(),
        unmatched_pred: (0..n_pred).filter(|p| !matched_pred.contains(p)).collect(),
        pairs,
    }
}

/// Relation matching induced by an entity matching: a gold and a predicted
/// relation match iff their heads were matched to each other, their tails
/// were matched to each other, and the labels are equal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelationMatching {
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_gold: Vec<usize>,
    pub unmatched_pred: Vec<usize>,
}

impl RelationMatching {
    pub fn tp(&self) -> usize {
        self.pairs.len()
    }
}

pub fn match_relations(
    gold: &[Relation],
    pred: &[Relation],
    entities: &EntityMatching,
) -> RelationMatching {
    let map = entities.gold_to_pred();
    let mut used_pred = vec![false; pred.len()];
    let mut pairs = Vec::new();
    for (gi, g) in gold.iter().enumerate() {
        let (Some(&h), Some(&t)) = (map.get(&g.head), map.get(&g.tail)) else {
            continue;
        };
        let hit = pred
            .iter()
            .position(|p| p.head == h && p.tail == t && p.label == g.label);
        if let Some(pi) = hit {
            if !used_pred[pi] {
                used_pred[pi] = true;
                pairs.push((gi, pi));
            }
        }
    }
    let matched_gold: Vec<usize> = pairs.iter().map(|&(g, _)| g).collect();
    RelationMatching {
        unmatched_gold: (0..gold.len())
            .filter(|g| !matched_gold.contains(g))
            .collect(),
        unmatched_pred: (0..pred.len()).filter(|p| !used_pred[*p]).collect(),
        pairs,
    }
}

/// Precision/recall/F1 from match counts. All zero when undefined.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Prf {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn prf(tp: usize, fp: usize, fn_: usize) -> Prf {
    let precision = if tp + fp > 0 {
        tp as f64 / (tp + fp) as f64
    } else {
        0.0
    };
    let recall = if tp + fn_ > 0 {
        tp as f64 / (tp + fn_) as f64
    } else {
        0.0
    };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Prf {
        tp,
        fp,
        fn_,
        precision,
        recall,
        f1,
    }
}

/// Sum tp/fp/fn over labels, then compute one PRF.
pub fn micro_average(counts: &[(usize, usize, usize)]) -> Prf {
    let tp = counts.iter().map(|c| c.0).sum();
    let fp = counts.iter().map(|c| c.1).sum();
    let fn_ = counts.iter().map(|c| c.2).sum();
    prf(tp, fp, fn_)
}

/// Counts of (gold label, predicted label) disagreements over span-identical,
/// label-free matched entities. Sorted by descending count, then labels.
pub fn confusion_pairs(gold: &[Entity], pred: &[Entity]) -> Vec<(usize, usize, usize)> {
    let mut counts: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut used = vec![false; pred.len()];
    for g in gold {
        let hit = pred.iter().enumerate().position(|(pi, p)| {
            !used[pi] && p.sentence_index == g.sentence_index && p.span == g.span
        });
        if let Some(pi) = hit {
            used[pi] = true;
            if pred[pi].label != g.label {
                *counts.entry((g.label, pred[pi].label)).or_default() += 1;
            }
        }
    }
    let mut out: Vec<(usize, usize, usize)> =
        counts.into_iter().map(|((g, p), n)| (g, p, n)).collect();
    out.sort_by(|a, b| b.2.cmp(&a.2).then_with(|| (a.0, a.1).cmp(&(b.0, b.1))));
    out
}

/// Share of confusion errors that involve any of the given labels as either
/// the gold or the predicted side (0 when there are no errors).
pub fn error_share_involving(confusion: &[(usize, usize, usize)], labels: &[usize]) -> f64 {
    let total: usize = confusion.iter().map(|&(_, _, n)| n).sum();
    if total == 0 {
        return 0.0;
    }
    let involving: usize = confusion
        .iter()
        .filter(|&&(g, p, _)| labels.contains(&g) || labels.contains(&p))
        .map(|&(_, _, n)| n)
        .sum();
    involving as f64 / total as f64
}

/// Recall per gold span length in tokens. Lengths above `max_bin` are pooled
/// into one final bin.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LengthRecall {
    /// 1..=max_bin, then one entry for everything longer.
    pub length: usize,
    pub overflow: bool,
    pub gold: usize,
    pub matched: usize,
    pub recall: f64,
}

pub fn recall_by_length(
    per_doc: &[(&[Entity], &EntityMatching)],
    max_bin: usize,
) -> Vec<LengthRecall> {
    let mut gold_count = vec![0usize; max_bin + 1];
    let mut matched_count = vec![0usize; max_bin + 1];
    for (gold, matching) in per_doc {
        let matched: Vec<usize> = matching.pairs.iter().map(|&(g, _)| g).collect();
        for (gi, g) in gold.iter().enumerate() {
            let len = g.width();
            let bin = if len > max_bin { max_bin } else { len - 1 };
            gold_count[bin] += 1;
            if matched.contains(&gi) {
                matched_count[bin] += 1;
            }
        }
    }
    (0..=max_bin)
        .map(|bin| LengthRecall {
            length: if bin < max_bin { bin + 1 } else { max_bin + 1 },
            overflow: bin == max_bin,
            gold: gold_count[bin],
            matched: matched_count[bin],
            recall: if gold_count[bin] > 0 {
                matched_count[bin] as f64 / gold_count[bin] as f64
            } else {
                0.0
            },
        })
        .collect()
}

/// Welch's two-sample t-test with unequal variances; returns the t statistic
/// and the two-sided p-value.
pub fn welch_ttest(sample_a: &[f64], sample_b: &[f64]) -> Result<(f64, f64), EvalError> {
    if sample_a.len() < 2 || sample_b.len() < 2 {
        return Err(EvalError::SampleTooSmall);
    }
    let (ma, va, na) = mean_var(sample_a);
    let (mb, vb, nb) = mean_var(sample_b);
    let sa = va / na;
    let sb = vb / nb;
    if sa + sb <= 0.0 {
        return Err(EvalError::DegenerateVariance);
    }
    let t = (ma - mb) / (sa + sb).sqrt();
    // Welch-Satterthwaite degrees of freedom
    let df = (sa + sb) * (sa + sb) / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    let p = student_t_two_sided_p(t, df);
    Ok((t, p))
}

fn mean_var(xs: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var, n)
}

/// Two-sided p-value from the t distribution:
/// `p = I_{df/(df+t^2)}(df/2, 1/2)` via the regularized incomplete beta.
pub fn student_t_two_sided_p(t: f64, df: f64) -> f64 {
    incomplete_beta(df / 2.0, 0.5, df / (df + t * t))
}

/// Regularized incomplete beta function I_x(a, b), continued-fraction
/// evaluation after Lentz. Absolute error well below 1e-10 over the
/// arguments used here.
pub fn incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 500;
    const EPS: f64 = 1e-14;
    const FPMIN: f64 = 1e-300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < FPMIN {
        d = FPMIN;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Lanczos approximation (g = 7, 9 coefficients).
pub fn ln_gamma(x: f64) -> f64 {
    #[allow(clippy::excessive_precision)]
    const COEF: [f64; 9] = [
        0.99999999999980993,
        676.5203681218851,
        -1259.1392167224028,
        771.32342877765313,
        -176.61502916214059,
        12.507343278686905,
        -0.13857109526572012,
        9.9843695780195716e-6,
        1.5056327351493116e-7,
    ];
    if x < 0.5 {
        // reflection
        return (std::f64::consts::PI / (std::f64::consts::PI * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    for (i, &c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Mean and sample standard deviation (n-1 denominator, 0 for a single run).
pub fn aggregate_runs(values: &[f64]) -> Result<(f64, f64), EvalError> {
    if values.is_empty() {
        return Err(EvalError::NoRuns);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Ok((mean, 0.0));
    }
    let var = values.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Ok((mean, var.sqrt()))
}

/// Predictions for one document, in the same representation as gold.
#[derive(Debug, Clone, PartialEq)]
pub struct DocPrediction {
    pub doc_id: String,
    pub entities: Vec<Entity>,
    pub relations: Vec<Relation>,
}

/// Per-label PRF row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LabelRow {
    pub label: String,
    pub prf: Prf,
}

/// The full scoring report for one criterion.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub criterion: MatchCriterion,
    pub finding: Prf,
    /// All subtypes collapsed to one Anatomy label before matching.
    pub anatomy: Prf,
    pub per_subtype: Vec<LabelRow>,
    /// Micro-average over the subtype labels.
    pub micro_subtype: Prf,
    /// Relations with subtype-sensitive endpoints.
    pub relation_subtype: Prf,
    /// Relations with anatomy-collapsed endpoints.
    pub relation_anatomy: Prf,
    /// (gold label name, predicted label name, count), subtype confusions.
    pub confusion: Vec<(String, String, usize)>,
    pub length_recall_all: Vec<LengthRecall>,
    pub length_recall_finding: Vec<LengthRecall>,
    pub length_recall_anatomy: Vec<LengthRecall>,
}

/// Sentinel used when subtype labels are collapsed: every subtype becomes
/// the first subtype index. Finding and the collapsed label never collide.
fn collapse(entities: &[Entity], schema: &LabelSchema) -> Vec<Entity> {
    entities
        .iter()
        .map(|e| {
            let mut e = *e;
            if schema.is_subtype(e.label) {
                e.label = 2;
            }
            e
        })
        .collect()
}

fn filter_by_label(entities: &[Entity], keep: impl Fn(usize) -> bool) -> Vec<Entity> {
    entities.iter().filter(|e| keep(e.label)).copied().collect()
}

/// Score predictions against gold documents under one criterion.
pub fn evaluate(
    gold_docs: &[Document],
    predictions: &[DocPrediction],
    criterion: MatchCriterion,
    schema: &LabelSchema,
    length_max_bin: usize,
) -> EvalReport {
    let empty = DocPrediction {
        doc_id: String::new(),
        entities: Vec::new(),
        relations: Vec::new(),
    };
    let by_id: BTreeMap<&str, &DocPrediction> =
        predictions.iter().map(|p| (p.doc_id.as_str(), p)).collect();

    let n_labels = schema.n_span_labels();
    let mut label_counts = vec![(0usize, 0usize, 0usize); n_labels];
    let mut anatomy_counts = (0usize, 0usize, 0usize);
    let mut rel_subtype = (0usize, 0usize, 0usize);
    let mut rel_anatomy = (0usize, 0usize, 0usize);
    let mut confusion_raw: BTreeMap<(usize, usize), usize> = BTreeMap::new();

    let mut len_all: Vec<(Vec<Entity>, EntityMatching)> = Vec::new();
    let mut len_finding: Vec<(Vec<Entity>, EntityMatching)> = Vec::new();
    let mut len_anatomy: Vec<(Vec<Entity>, EntityMatching)> = Vec::new();

    for doc in gold_docs {
        let pred = by_id.get(doc.id.as_str()).copied().unwrap_or(&empty);

        // full label space
        let m = match_entities(&doc.entities, &pred.entities, criterion);
        for &(g, _) in &m.pairs {
            label_counts[doc.entities[g].label].0 += 1;
        }
        for &g in &m.unmatched_gold {
            label_counts[doc.entities[g].label].2 += 1;
        }
        for &p in &m.unmatched_pred {
            label_counts[pred.entities[p].label].1 += 1;
        }
        let rm = match_relations(&doc.relations, &pred.relations, &m);
        rel_subtype.0 += rm.tp();
        rel_subtype.2 += rm.unmatched_gold.len();
        rel_subtype.1 += rm.unmatched_pred.len();

        // anatomy-collapsed label space
        let gold_c = collapse(&doc.entities, schema);
        let pred_c = collapse(&pred.entities, schema);
        let mc = match_entities(&gold_c, &pred_c, criterion);
        for &(g, _) in &mc.pairs {
            if gold_c[g].label == 2 {
                anatomy_counts.0 += 1;
            }
        }
        for &g in &mc.unmatched_gold {
            if gold_c[g].label == 2 {
                anatomy_counts.2 += 1;
            }
        }
        for &p in &mc.unmatched_pred {
            if pred_c[p].label == 2 {
                anatomy_counts.1 += 1;
            }
        }
        let rmc = match_relations(&doc.relations, &pred.relations, &mc);
        rel_anatomy.0 += rmc.tp();
        rel_anatomy.2 += rmc.unmatched_gold.len();
        rel_anatomy.1 += rmc.unmatched_pred.len();

        // subtype confusion over span-identical label-free matches
        let gold_sub = filter_by_label(&doc.entities, |l| schema.is_subtype(l));
        let pred_sub = filter_by_label(&pred.entities, |l| schema.is_subtype(l));
        for (g, p, n) in confusion_pairs(&gold_sub, &pred_sub) {
            *confusion_raw.entry((g, p)).or_default() += n;
        }

        // recall-by-length inputs
        len_all.push((doc.entities.clone(), m));
        let gold_f = filter_by_label(&doc.entities, |l| l == FINDING_LABEL);
        let pred_f = filter_by_label(&pred.entities, |l| l == FINDING_LABEL);
        let mf = match_entities(&gold_f, &pred_f, criterion);
        len_finding.push((gold_f, mf));
        let gold_a = filter_by_label(&gold_c, |l| l == 2);
        let pred_a = filter_by_label(&pred_c, |l| l == 2);
        let ma = match_entities(&gold_a, &pred_a, criterion);
        len_anatomy.push((gold_a, ma));
    }

    let per_subtype: Vec<LabelRow> = schema
        .subtype_indices()
        .map(|l| LabelRow {
            label: schema.span_label_name(l).to_string(),
            prf: prf(label_counts[l].0, label_counts[l].1, label_counts[l].2),
        })
        .collect();
    let subtype_counts: Vec<(usize, usize, usize)> =
        schema.subtype_indices().map(|l| label_counts[l]).collect();

    let mut confusion: Vec<(String, String, usize)> = confusion_raw
        .into_iter()
        .map(|((g, p), n)| {
            (
                schema.span_label_name(g).to_string(),
                schema.span_label_name(p).to_string(),
                n,
            )
        })
        .collect();
    confusion.sort_by(|a, b| b.2.cmp(&a.2).then_with(|| (&a.0, &a.1).cmp(&(&b.0, &b.1))));

    let as_refs = |v: &[(Vec<Entity>, EntityMatching)]| -> Vec<LengthRecall> {
        let refs: Vec<(&[Entity], &EntityMatching)> =
            v.iter().map(|(g, m)| (g.as_slice(), m)).collect();
        recall_by_length(&refs, length_max_bin)
    };

    EvalReport {
        criterion,
        finding: prf(
            label_counts[FINDING_LABEL].0,
            label_counts[FINDING_LABEL].1,
            label_counts[FINDING_LABEL].2,
        ),
        anatomy: prf(anatomy_counts.0, anatomy_counts.1, anatomy_counts.2),
        micro_subtype: micro_average(&subtype_counts),
        per_subtype,
        relation_subtype: prf(rel_subtype.0, rel_subtype.1, rel_subtype.2),
        relation_anatomy: prf(rel_anatomy.0, rel_anatomy.1, rel_anatomy.2),
        confusion,
        length_recall_all: as_refs(&len_all),
        length_recall_finding: as_refs(&len_finding),
        length_recall_anatomy: as_refs(&len_anatomy),
    }
}
