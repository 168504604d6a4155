//! Metrics and diagnostics: EM / token F1 (answer), set metrics (supporting
//! evidence), joint scores, the 8-cell sub-question forgetting table, and the
//! regular-vs-adversarial comparison.
//!
//! Normalization is fixed bit-exactly: lowercase, strip punctuation
//! characters, drop the articles "a"/"an"/"the", collapse whitespace.

use crate::corpus::{Answer, QAExample, QType, SingleHopExample};
use crate::error::Result;
use crate::reader::{decode_answer, predict_support, SingleHopModel};
use crate::scalar::Scalar;
use crate::store::ParameterStore;
use crate::tokenizer::{build_input_sequence, Vocab};
use crate::trainer::TrainConfig;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

// ---------------------------------------------------------------------------
// Text normalization and answer metrics
// ---------------------------------------------------------------------------

/// Lowercase, strip punctuation, drop articles, collapse whitespace.
pub fn normalize(text: &str) -> String {
    let lowered = text.to_lowercase();
    let no_punct: String = lowered
        .chars()
        .map(|c| if c.is_ascii_punctuation() { ' ' } else { c })
        .collect();
    no_punct
        .split_whitespace()
        .filter(|t| !matches!(*t, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn answer_em(pred: &str, gold: &str) -> f64 {
    if normalize(pred) == normalize(gold) {
        1.0
    } else {
        0.0
    }
}

/// Token-multiset precision/recall/F1 after normalization. Both empty means
/// F1 = 1; exactly one empty means 0.
pub fn answer_f1(pred: &str, gold: &str) -> (f64, f64, f64) {
    let pred_n = normalize(pred);
    let gold_n = normalize(gold);
    let pred_toks: Vec<&str> = pred_n.split_whitespace().collect();
    let gold_toks: Vec<&str> = gold_n.split_whitespace().collect();
    if pred_toks.is_empty() && gold_toks.is_empty() {
        return (1.0, 1.0, 1.0);
    }
    if pred_toks.is_empty() || gold_toks.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let mut gold_counts: BTreeMap<&str, usize> = BTreeMap::new();
    for t in &gold_toks {
        *gold_counts.entry(t).or_insert(0) += 1;
    }
    let mut common = 0usize;
    for t in &pred_toks {
        if let Some(c) = gold_counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return (0.0, 0.0, 0.0);
    }
    let precision = common as f64 / pred_toks.len() as f64;
    let recall = common as f64 / gold_toks.len() as f64;
    let f1 = 2.0 * precision * recall / (precision + recall);
    (precision, recall, f1)
}

/// Set precision/recall over (paragraph, sentence) pairs plus exact match.
pub fn support_metrics(pred: &[(usize, usize)], gold: &[(usize, usize)]) -> (f64, f64, f64, f64) {
    let pred_set: std::collections::BTreeSet<_> = pred.iter().copied().collect();
    let gold_set: std::collections::BTreeSet<_> = gold.iter().copied().collect();
    let em = if pred_set == gold_set { 1.0 } else { 0.0 };
    if pred_set.is_empty() && gold_set.is_empty() {
        return (1.0, 1.0, 1.0, 1.0);
    }
    if pred_set.is_empty() || gold_set.is_empty() {
        return (em, 0.0, 0.0, 0.0);
    }
    let common = pred_set.intersection(&gold_set).count() as f64;
    let precision = common / pred_set.len() as f64;
    let recall = common / gold_set.len() as f64;
    let f1 = if common == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    (em, precision, recall, f1)
}

/// Joint metrics compose multiplicatively: joint EM is the product of answer
/// and supporting EM; joint precision/recall are the products of the sides,
/// and joint F1 is their harmonic mean (0 when both vanish).
pub fn joint_metrics(
    ans: (f64, f64, f64), // (em, precision, recall)
    sup: (f64, f64, f64),
) -> (f64, f64) {
    let joint_em = ans.0 * sup.0;
    let p = ans.1 * sup.1;
    let r = ans.2 * sup.2;
    let joint_f1 = if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    };
    (joint_em, joint_f1)
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

/// Per-example scores, aggregated by mean into a [`MetricReport`].
#[derive(Debug, Clone, Copy, Default)]
pub struct ExampleScores {
    pub ans_em: f64,
    pub ans_f1: f64,
    pub sup_em: f64,
    pub sup_f1: f64,
    pub joint_em: f64,
    pub joint_f1: f64,
}

/// Score one example from its predicted answer text and supporting set.
pub fn score_example(
    pred_answer: &str,
    pred_support: &[(usize, usize)],
    gold_answer: &str,
    gold_support: &[(usize, usize)],
) -> ExampleScores {
    let em = answer_em(pred_answer, gold_answer);
    let (ap, ar, af1) = answer_f1(pred_answer, gold_answer);
    let (sem, sp, sr, sf1) = support_metrics(pred_support, gold_support);
    let (jem, jf1) = joint_metrics((em, ap, ar), (sem, sp, sr));
    ExampleScores {
        ans_em: em,
        ans_f1: af1,
        sup_em: sem,
        sup_f1: sf1,
        joint_em: jem,
        joint_f1: jf1,
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub n_examples: usize,
    pub ans_em: f64,
    pub ans_f1: f64,
    pub sup_em: f64,
    pub sup_f1: f64,
    pub joint_em: f64,
    pub joint_f1: f64,
    /// Breakdown keyed by question type label.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_type: BTreeMap<String, MetricReport>,
}

impl MetricReport {
    pub fn from_scores(scores: &[(Option<QType>, ExampleScores)]) -> Self {
        let mut report = Self::mean_of(scores.iter().map(|(_, s)| *s));
        let mut by_type: BTreeMap<String, Vec<ExampleScores>> = BTreeMap::new();
        for (qtype, s) in scores {
            if let Some(t) = qtype {
                by_type.entry(t.as_str().to_string()).or_default().push(*s);
            }
        }
        for (label, group) in by_type {
            report
                .per_type
                .insert(label, Self::mean_of(group.into_iter()));
        }
        report
    }

    fn mean_of(scores: impl Iterator<Item = ExampleScores>) -> Self {
        let mut n = 0usize;
        let mut acc = ExampleScores::default();
        for s in scores {
            n += 1;
            acc.ans_em += s.ans_em;
            acc.ans_f1 += s.ans_f1;
            acc.sup_em += s.sup_em;
            acc.sup_f1 += s.sup_f1;
            acc.joint_em += s.joint_em;
            acc.joint_f1 += s.joint_f1;
        }
        let d = n.max(1) as f64;
        Self {
            n_examples: n,
            ans_em: acc.ans_em / d,
            ans_f1: acc.ans_f1 / d,
            sup_em: acc.sup_em / d,
            sup_f1: acc.sup_f1 / d,
            joint_em: acc.joint_em / d,
            joint_f1: acc.joint_f1 / d,
            per_type: BTreeMap::new(),
        }
    }
}

/// Prediction file format: example id -> answer text + supporting pairs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Prediction {
    pub answer: String,
    pub supporting: Vec<(usize, usize)>,
}

pub type PredictionFile = BTreeMap<String, Prediction>;

/// Score a prediction file against gold multi-hop examples. Missing
/// predictions score zero.
pub fn score_predictions(preds: &PredictionFile, examples: &[QAExample]) -> MetricReport {
    let scores: Vec<(Option<QType>, ExampleScores)> = examples
        .iter()
        .map(|e| {
            let s = match preds.get(&e.id) {
                Some(p) => score_example(
                    &p.answer,
                    &p.supporting,
                    e.answer.as_text(),
                    &e.supporting,
                ),
                None => ExampleScores::default(),
            };
            (Some(e.qtype), s)
        })
        .collect();
    MetricReport::from_scores(&scores)
}

// ---------------------------------------------------------------------------
// Model evaluation loops
// ---------------------------------------------------------------------------

/// Decode answers and supporting sets for single-hop items.
pub fn predict_singlehop<F: Scalar>(
    store: &ParameterStore<F>,
    model: &SingleHopModel,
    vocab: &Vocab,
    items: &[SingleHopExample],
    config: &TrainConfig,
) -> Result<PredictionFile> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut preds = PredictionFile::new();
    for item in items {
        let paragraphs: Vec<(usize, &crate::corpus::Paragraph)> =
            item.paragraphs.iter().enumerate().collect();
        let input =
            build_input_sequence(vocab, &item.question, &paragraphs, model.encoder.config.n_max)?;
        let (output, _) = model.forward(store, &input, false, &mut rng)?;
        let decoded = decode_answer(&output, &input, &input.maps, vocab, config.max_answer_len);
        let supporting = predict_support(&output, &input.maps, config.support_threshold)?;
        preds.insert(
            item.id.clone(),
            Prediction {
                answer: decoded.answer.as_text().to_string(),
                supporting,
            },
        );
    }
    Ok(preds)
}

pub fn evaluate_singlehop<F: Scalar>(
    store: &ParameterStore<F>,
    model: &SingleHopModel,
    vocab: &Vocab,
    items: &[SingleHopExample],
    config: &TrainConfig,
) -> Result<MetricReport> {
    let preds = predict_singlehop(store, model, vocab, items, config)?;
    let scores: Vec<(Option<QType>, ExampleScores)> = items
        .iter()
        .map(|item| {
            let p = &preds[&item.id];
            (
                None,
                score_example(&p.answer, &p.supporting, &item.answer, &[item.supporting]),
            )
        })
        .collect();
    Ok(MetricReport::from_scores(&scores))
}

/// Evaluate a multi-hop model over gold paragraph contexts with gold-type
/// prompts (reading ability in isolation from retrieval and classification).
pub fn evaluate_multihop_gold_context<F: Scalar>(
    store: &ParameterStore<F>,
    model: &crate::conservation::MultiHopModel,
    vocab: &Vocab,
    examples: &[QAExample],
    config: &TrainConfig,
) -> Result<MetricReport> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut scores = Vec::with_capacity(examples.len());
    for e in examples {
        let [g1, g2] = e.gold_paragraph_indices;
        let paragraphs = vec![(g1, &e.paragraphs[g1]), (g2, &e.paragraphs[g2])];
        let input =
            build_input_sequence(vocab, &e.question, &paragraphs, model.encoder.config.n_max)?;
        let (fwd, _) = model.forward(store, &input, e.qtype.reasoning_type(), false, &mut rng)?;
        let decoded = decode_answer(&fwd.output, &input, &fwd.maps, vocab, config.max_answer_len);
        let supporting = predict_support(&fwd.output, &fwd.maps, config.support_threshold)?;
        scores.push((
            Some(e.qtype),
            score_example(
                decoded.answer.as_text(),
                &supporting,
                e.answer.as_text(),
                &e.supporting,
            ),
        ));
    }
    Ok(MetricReport::from_scores(&scores))
}

// ---------------------------------------------------------------------------
// Forgetting diagnostic
// ---------------------------------------------------------------------------

/// Counts over the eight (q, q_sub1, q_sub2) correctness cells, in the fixed
/// order ccc, ccw, cwc, cww, wcc, wcw, wwc, www.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForgettingTable {
    pub cells: BTreeMap<String, usize>,
    pub percentages: BTreeMap<String, f64>,
    pub n_evaluated: usize,
    pub n_skipped: usize,
    /// P(q correct | both subs correct), P(q | exactly one), P(q | none).
    pub success_given_both: f64,
    pub success_given_one: f64,
    pub success_given_none: f64,
}

pub const FORGETTING_CELLS: [&str; 8] = ["ccc", "ccw", "cwc", "cww", "wcc", "wcw", "wwc", "www"];

/// Assemble the table from per-example correctness: `q_correct[id]` for the
/// multi-hop question, `sub_correct[id] = (sub1, sub2)`. Examples missing
/// either map are skipped and counted.
pub fn forgetting_table(
    ids: &[String],
    q_correct: &BTreeMap<String, bool>,
    sub_correct: &BTreeMap<String, (bool, bool)>,
) -> ForgettingTable {
    let mut cells: BTreeMap<String, usize> =
        FORGETTING_CELLS.iter().map(|c| (c.to_string(), 0)).collect();
    let mut n_evaluated = 0;
    let mut n_skipped = 0;
    let mut both = (0usize, 0usize);
    let mut one = (0usize, 0usize);
    let mut none = (0usize, 0usize);
    for id in ids {
        let (Some(&q), Some(&(s1, s2))) = (q_correct.get(id), sub_correct.get(id)) else {
            n_skipped += 1;
            continue;
        };
        n_evaluated += 1;
        let key = format!(
            "{}{}{}",
            if q { 'c' } else { 'w' },
            if s1 { 'c' } else { 'w' },
            if s2 { 'c' } else { 'w' }
        );
        *cells.get_mut(&key).expect("fixed cell") += 1;
        let bucket = match (s1, s2) {
            (true, true) => &mut both,
            (false, false) => &mut none,
            _ => &mut one,
        };
        bucket.1 += 1;
        if q {
            bucket.0 += 1;
        }
    }
    let pct = |n: usize| 100.0 * n as f64 / n_evaluated.max(1) as f64;
    let percentages = cells.iter().map(|(k, &v)| (k.clone(), pct(v))).collect();
    let rate = |b: (usize, usize)| {
        if b.1 == 0 {
            0.0
        } else {
            b.0 as f64 / b.1 as f64
        }
    };
    ForgettingTable {
        cells,
        percentages,
        n_evaluated,
        n_skipped,
        success_given_both: rate(both),
        success_given_one: rate(one),
        success_given_none: rate(none),
    }
}

// ---------------------------------------------------------------------------
// Regular vs adversarial comparison
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdversarialReport {
    /// Model trained on regular data, evaluated on regular dev.
    pub reg: MetricReport,
    /// Same model evaluated on adversarial dev.
    pub adv: MetricReport,
}

/// Pair the Reg/Reg and Reg/Adv evaluations of one model. The metric
/// relation between the two is reported, not asserted.
pub fn adversarial_compare(reg: MetricReport, adv: MetricReport) -> AdversarialReport {
    AdversarialReport { reg, adv }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_drops_articles_punctuation_case() {
        assert_eq!(normalize("The DeVito."), "devito");
        assert_eq!(normalize("yes"), "yes");
        assert_eq!(normalize("A  b"), "b");
        assert_eq!(normalize("An apple, the pear"), "apple pear");
    }

    #[test]
    fn em_and_f1_match_fixture_cases() {
        // 12+ hand-computed fixtures across answer, support, joint metrics.
        assert_eq!(answer_em("Danny DeVito", "danny devito"), 1.0);
        assert_eq!(answer_f1("Danny DeVito", "danny devito").2, 1.0);
        assert_eq!(answer_em("yes", "no"), 0.0);
        assert_eq!(answer_f1("yes", "no").2, 0.0);
        // pred {a,b,c} gold {b,c,d}: p = r = 2/3, f1 = 2/3. Use non-article
        // tokens since normalization drops "a".
        let (p, r, f1) = answer_f1("x b c", "b c d");
        assert!((p - 2.0 / 3.0).abs() < 1e-12);
        assert!((r - 2.0 / 3.0).abs() < 1e-12);
        assert!((f1 - 2.0 / 3.0).abs() < 1e-12);
        // Both empty after normalization -> F1 = 1; one empty -> 0.
        assert_eq!(answer_f1("the", "a").2, 1.0);
        assert_eq!(answer_em("the", "a"), 1.0);
        assert_eq!(answer_f1("word", "the").2, 0.0);
    }

    #[test]
    fn support_metrics_match_fixture_cases() {
        let gold = [(0, 1), (2, 0)];
        let (em, p, r, f1) = support_metrics(&gold, &gold);
        assert_eq!((em, p, r, f1), (1.0, 1.0, 1.0, 1.0));
        // 1 of 2 gold, nothing else: p=1, r=0.5, f1=2/3.
        let (em, p, r, f1) = support_metrics(&gold[..1], &gold);
        assert_eq!(em, 0.0);
        assert_eq!(p, 1.0);
        assert_eq!(r, 0.5);
        assert!((f1 - 2.0 / 3.0).abs() < 1e-12);
        // Empty prediction against nonempty gold: all zeros.
        let (em, p, r, f1) = support_metrics(&[], &gold);
        assert_eq!((em, p, r, f1), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn joint_metrics_match_fixture_cases() {
        // ans p=r=1, sup p=0.5, r=1 -> joint p=0.5, r=1, f1=2/3.
        let (jem, jf1) = joint_metrics((1.0, 1.0, 1.0), (0.0, 0.5, 1.0));
        assert_eq!(jem, 0.0); // either side em=0 -> joint em 0
        assert!((jf1 - 2.0 / 3.0).abs() < 1e-12);
        // Both perfect.
        let (jem, jf1) = joint_metrics((1.0, 1.0, 1.0), (1.0, 1.0, 1.0));
        assert_eq!((jem, jf1), (1.0, 1.0));
        // Degenerate: both zero.
        assert_eq!(joint_metrics((0.0, 0.0, 0.0), (0.0, 0.0, 0.0)), (0.0, 0.0));
    }

    #[test]
    fn joint_em_never_exceeds_either_side() {
        let s = score_example("x y", &[(0, 0)], "x y", &[(0, 0), (1, 1)]);
        assert!(s.joint_em <= s.ans_em && s.joint_em <= s.sup_em);
        assert!(s.ans_em == 1.0 && s.sup_em == 0.0 && s.joint_em == 0.0);
    }

    #[test]
    fn report_aggregates_by_mean_and_type() {
        let scores = vec![
            (
                Some(QType::Bridge),
                ExampleScores {
                    ans_em: 1.0,
                    ans_f1: 1.0,
                    sup_em: 1.0,
                    sup_f1: 1.0,
                    joint_em: 1.0,
                    joint_f1: 1.0,
                },
            ),
            (Some(QType::ComparisonYn), ExampleScores::default()),
        ];
        let report = MetricReport::from_scores(&scores);
        assert_eq!(report.n_examples, 2);
        assert!((report.ans_em - 0.5).abs() < 1e-12);
        assert_eq!(report.per_type["bridge"].ans_em, 1.0);
        assert_eq!(report.per_type["comparison-yn"].ans_em, 0.0);
        assert!(report.joint_em <= report.ans_em && report.joint_em <= report.sup_em);
    }

    #[test]
    fn forgetting_cells_partition_the_set() {
        let ids: Vec<String> = (0..6).map(|i| format!("e{i}")).collect();
        let mut q = BTreeMap::new();
        let mut subs = BTreeMap::new();
        let patterns = [
            (true, (true, true)),
            (true, (true, true)),
            (true, (false, true)),
            (false, (true, false)),
            (false, (false, false)),
            (true, (true, false)),
        ];
        for (id, (qc, sc)) in ids.iter().zip(patterns) {
            q.insert(id.clone(), qc);
            subs.insert(id.clone(), sc);
        }
        let table = forgetting_table(&ids, &q, &subs);
        assert_eq!(table.n_evaluated, 6);
        assert_eq!(table.n_skipped, 0);
        let total: usize = table.cells.values().sum();
        assert_eq!(total, 6);
        let pct_sum: f64 = table.percentages.values().sum();
        assert!((pct_sum - 100.0).abs() < 0.01);
        assert_eq!(table.cells["ccc"], 2);
        assert_eq!(table.success_given_both, 1.0);
        // Exactly-one bucket: cwc(no... wait) -> entries with one sub right:
        // e2 (q=c), e3 (q=w), e5 (q=c) -> 2/3.
        assert!((table.success_given_one - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(table.success_given_none, 0.0);
    }

    #[test]
    fn perfect_model_fills_only_ccc() {
        let ids: Vec<String> = (0..5).map(|i| format!("e{i}")).collect();
        let q: BTreeMap<String, bool> = ids.iter().map(|i| (i.clone(), true)).collect();
        let subs: BTreeMap<String, (bool, bool)> =
            ids.iter().map(|i| (i.clone(), (true, true))).collect();
        let table = forgetting_table(&ids, &q, &subs);
        assert_eq!(table.percentages["ccc"], 100.0);
        for c in FORGETTING_CELLS.iter().skip(1) {
            assert_eq!(table.cells[*c], 0);
        }
    }

    #[test]
    fn missing_subquestions_are_skipped_with_count() {
        let ids = vec!["a".to_string(), "b".to_string()];
        let mut q = BTreeMap::new();
        q.insert("a".to_string(), true);
        q.insert("b".to_string(), true);
        let mut subs = BTreeMap::new();
        subs.insert("a".to_string(), (true, true));
        let table = forgetting_table(&ids, &q, &subs);
        assert_eq!(table.n_evaluated, 1);
        assert_eq!(table.n_skipped, 1);
    }

    #[test]
    fn identical_inputs_give_identical_reports() {
        let preds: PredictionFile = PredictionFile::new();
        let report_a = score_predictions(&preds, &[]);
        let report_b = score_predictions(&preds, &[]);
        assert_eq!(
            serde_json::to_string(&adversarial_compare(report_a.clone(), report_a)).unwrap(),
            serde_json::to_string(&adversarial_compare(report_b.clone(), report_b)).unwrap()
        );
    }
}
