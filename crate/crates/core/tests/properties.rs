//! Property tests over the corpus, tokenizer, enumeration, and matching
//! invariants.

use proptest::prelude::*;

use radspan::corpus::{parse_standoff, serialize_ann, Entity};
use radspan::encoder::{build_vocab, tokenize};
use radspan::eval::{evaluate, match_entities, prf, DocPrediction, MatchCriterion};
use radspan::schema::LabelSchema;
use radspan::spanmodel::enumerate_spans;
use radspan::synth::{generate, GrammarConfig};

fn schema() -> LabelSchema {
    LabelSchema::full()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn enumeration_count_matches_closed_form(n in 0usize..50, l in 1usize..=10) {
        let spans = enumerate_spans(n, l);
        let expected: usize = (1..=l.min(n)).map(|k| n + 1 - k).sum();
        prop_assert_eq!(spans.len(), expected);
    }

    #[test]
    fn tokenize_alignment_covers_all_pieces(words in prop::collection::vec("[a-z]{1,8}", 0..12)) {
        let docs = vec![radspan::corpus::Document::from_text(
            "a",
            "the lungs are clear. mass in rib and lobe.",
        )];
        let vocab = build_vocab(&docs, 200, &schema()).unwrap();
        let tokens: Vec<&str> = words.iter().map(|s| s.as_str()).collect();
        let seq = tokenize(&tokens, &vocab);
        // piece ranges concatenated over tokens exactly cover pieces 1..n
        let mut covered = Vec::new();
        for &(first, last) in &seq.piece_range_of_token {
            prop_assert!(first <= last);
            covered.extend(first..=last);
        }
        let expected: Vec<usize> = (1..seq.piece_ids.len()).collect();
        prop_assert_eq!(covered, expected);
        for (p, &t) in seq.token_of_piece.iter().enumerate() {
            let (first, last) = seq.piece_range_of_token[t];
            let piece_index = p + 1;
            prop_assert!((first..=last).contains(&piece_index));
        }
    }

    #[test]
    fn matching_bounds_and_monotonicity(
        gold_raw in prop::collection::vec((0usize..3, 0usize..10, 1usize..4, 1usize..5), 0..8),
        pred_raw in prop::collection::vec((0usize..3, 0usize..10, 1usize..4, 1usize..5), 0..8),
    ) {
        let build = |raw: &[(usize, usize, usize, usize)]| -> Vec<Entity> {
            raw.iter()
                .map(|&(s, start, len, label)| Entity {
                    sentence_index: s,
                    span: (start, start + len - 1),
                    label,
                })
                .collect()
        };
        let gold = build(&gold_raw);
        let pred = build(&pred_raw);
        let exact = match_entities(&gold, &pred, MatchCriterion::Exact);
        let overlap = match_entities(&gold, &pred, MatchCriterion::AnyOverlap);
        // one-to-one bookkeeping
        prop_assert_eq!(exact.tp() + exact.unmatched_gold.len(), gold.len());
        prop_assert_eq!(exact.tp() + exact.unmatched_pred.len(), pred.len());
        prop_assert!(exact.tp() <= gold.len().min(pred.len()));
        // the exact criterion can never match more than any-overlap
        prop_assert!(exact.tp() <= overlap.tp());
        // every exact pair is also overlap-compatible
        for &(g, p) in &exact.pairs {
            prop_assert_eq!(gold[g].span, pred[p].span);
            prop_assert_eq!(gold[g].label, pred[p].label);
        }
    }

    #[test]
    fn alignment_is_minimal_cover(start in 0usize..40, len in 1usize..12) {
        let text = "no acute fracture of the right lower lobe seen today";
        let sents = radspan::corpus::segment(text);
        let sent = &sents[0];
        let end = (start + len).min(text.len());
        if start >= end {
            return Ok(());
        }
        match radspan::corpus::align_entity(sent, (start, end)) {
            Ok((first, last)) => {
                // every token overlapping the span lies inside the range and
                // the boundary tokens really do overlap (no smaller cover)
                for (i, &(ts, te)) in sent.tokens.iter().enumerate() {
                    let overlaps = ts < end && start < te;
                    prop_assert_eq!(overlaps, (first..=last).contains(&i), "token {}", i);
                }
                let (fs, fe) = sent.tokens[first];
                let (ls, le) = sent.tokens[last];
                prop_assert!(fs < end && start < fe);
                prop_assert!(ls < end && start < le);
            }
            Err(_) => {
                // only legal when the span touches no token at all
                for &(ts, te) in &sent.tokens {
                    prop_assert!(!(ts < end && start < te));
                }
            }
        }
    }

    #[test]
    fn prf_values_stay_in_unit_range(tp in 0usize..50, fp in 0usize..50, fn_ in 0usize..50) {
        let p = prf(tp, fp, fn_);
        prop_assert!((0.0..=1.0).contains(&p.precision));
        prop_assert!((0.0..=1.0).contains(&p.recall));
        prop_assert!((0.0..=1.0).contains(&p.f1));
    }

    #[test]
    fn generated_corpus_round_trips(seed in 0u64..500) {
        let mut cfg = GrammarConfig::default_config(seed);
        cfg.sentences_per_doc = (2, 4);
        let (docs, _) = generate(&cfg, 3, &schema()).unwrap();
        for doc in &docs {
            let ann = serialize_ann(doc, &schema());
            let again = parse_standoff(&doc.id, &doc.text, &ann, &schema()).unwrap();
            prop_assert_eq!(doc, &again);
            prop_assert_eq!(serialize_ann(&again, &schema()), ann);
        }
    }

    #[test]
    fn report_counts_invariant_under_document_order(seed in 0u64..200) {
        let mut cfg = GrammarConfig::default_config(seed);
        cfg.sentences_per_doc = (2, 4);
        let (docs, _) = generate(&cfg, 6, &schema()).unwrap();
        // predictions: gold with the last entity dropped per doc
        let preds: Vec<DocPrediction> = docs
            .iter()
            .map(|d| {
                let mut entities = d.entities.clone();
                entities.pop();
                let relations = d
                    .relations
                    .iter()
                    .filter(|r| r.head < entities.len() && r.tail < entities.len())
                    .copied()
                    .collect();
                DocPrediction {
                    doc_id: d.id.clone(),
                    entities,
                    relations,
                }
            })
            .collect();
        let forward = evaluate(&docs, &preds, MatchCriterion::Exact, &schema(), 10);
        let mut docs_rev = docs.clone();
        docs_rev.reverse();
        let mut preds_rev = preds.clone();
        preds_rev.reverse();
        let backward = evaluate(&docs_rev, &preds_rev, MatchCriterion::Exact, &schema(), 10);
        prop_assert_eq!(forward, backward);
    }
}
