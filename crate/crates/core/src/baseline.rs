//! The multi-step baseline: BIO sequence tagging over word pieces for
//! entities, then relation classification over marker-rewritten sentences,
//! both heads sharing one encoder.
//!
//! Tags live at the word-piece level; decoding aggregates to tokens by
//! taking the label of each token's first piece. For relation
//! classification the head entity's pieces are replaced by the two-piece
//! marker `(@Finding, $)` and the tail's by `(@<subtype>, $)`; the sentence
//! classifier reads the rewritten sequence's `[CLS]` embedding.

use rand::seq::index::sample as index_sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::{Document, Entity, Relation};
use crate::encoder::{tokenize, TransformerEncoder, Vocab, WordPieceSequence};
use crate::eval::DocPrediction;
use crate::graph::{Graph, NodeId};
use crate::params::{ParamId, ParamStore};
use crate::schema::{LabelSchema, FINDING_LABEL, NULL_LABEL};
use crate::spanmodel::{
    argmax, prepare_sentences, softmax_values, spans_overlap, EpochLog, ModelConfig, TrainConfig,
    TrainError, TrainSentence,
};

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("head and tail spans overlap; instance skipped")]
    OverlappingPair,
    #[error("marker piece for label `{0}` missing from vocab")]
    MissingMarker(String),
}

/// Tag index layout: 0 is O; each non-null span label `l` (1-based over the
/// schema) owns B at `2l - 1` and I at `2l`.
pub fn n_tags(schema: &LabelSchema) -> usize {
    1 + 2 * (schema.n_span_labels() - 1)
}

pub fn b_tag(label: usize) -> usize {
    2 * label - 1
}

pub fn i_tag(label: usize) -> usize {
    2 * label
}

/// Which span label a tag belongs to, and whether it is a B tag.
fn tag_info(tag: usize) -> Option<(usize, bool)> {
    if tag == 0 {
        None
    } else {
        Some((tag.div_ceil(2), tag % 2 == 1))
    }
}

/// Per-piece BIO tags (excluding `[CLS]`) for a sentence's gold entities.
/// Overlaps cannot be represented: the longer span wins, ties go to the
/// earlier start.
pub fn bio_encode(pieces: &WordPieceSequence, gold: &[((usize, usize), usize)]) -> Vec<usize> {
    let n_tokens = pieces.n_tokens();
    let mut order: Vec<usize> = (0..gold.len()).collect();
    order.sort_by_key(|&i| {
        let ((s, e), _) = gold[i];
        (std::cmp::Reverse(e - s + 1), s)
    });
    let mut owner: Vec<Option<usize>> = vec![None; n_tokens];
    for &i in &order {
        let ((s, e), _) = gold[i];
        if owner[s..=e].iter().all(Option::is_none) {
            owner[s..=e].fill(Some(i));
        }
    }
    let mut tags = vec![0usize; pieces.n_pieces() - 1];
    for (i, &((s, e), label)) in gold.iter().enumerate() {
        if owner.get(s) != Some(&Some(i)) {
            continue;
        }
        let span_pieces = pieces.pieces_of_span(s, e);
        for (k, &p) in span_pieces.iter().enumerate() {
            tags[p - 1] = if k == 0 { b_tag(label) } else { i_tag(label) };
        }
    }
    tags
}

/// Decode piece-level tags to entities: token tags come from each token's
/// first piece; runs of B followed by I of the same label form entities, and
/// a dangling I starts a new entity (lenient decoding).
pub fn bio_decode(tags: &[usize], pieces: &WordPieceSequence) -> Vec<((usize, usize), usize)> {
    let token_tags: Vec<usize> = pieces
        .piece_range_of_token
        .iter()
        .map(|&(first, _)| tags[first - 1])
        .collect();
    let mut out = Vec::new();
    let mut current: Option<((usize, usize), usize)> = None;
    for (t, &tag) in token_tags.iter().enumerate() {
        match tag_info(tag) {
            None => {
                if let Some(e) = current.take() {
                    out.push(e);
                }
            }
            Some((label, is_b)) => match current {
                Some(((s, _), cur_label)) if !is_b && cur_label == label => {
                    current = Some(((s, t), label));
                }
                _ => {
                    if let Some(e) = current.take() {
                        out.push(e);
                    }
                    current = Some(((t, t), label));
                }
            },
        }
    }
    if let Some(e) = current {
        out.push(e);
    }
    out
}

/// Rewrite a piece sequence, replacing the head span's pieces with
/// `(@Finding, $)` and the tail span's with `(@<subtype>, $)`. Markers are
/// placed in surface order; the head/tail roles live in the caller.
pub fn make_relation_instance(
    pieces: &WordPieceSequence,
    vocab: &Vocab,
    head: ((usize, usize), &str),
    tail: ((usize, usize), &str),
) -> Result<Vec<usize>, BaselineError> {
    let (head_span, head_label) = head;
    let (tail_span, tail_label) = tail;
    if spans_overlap(head_span, tail_span) {
        return Err(BaselineError::OverlappingPair);
    }
    let closer = vocab
        .marker_close()
        .ok_or_else(|| BaselineError::MissingMarker("$".into()))?;
    let head_open = vocab
        .marker_open(head_label)
        .ok_or_else(|| BaselineError::MissingMarker(head_label.to_string()))?;
    let tail_open = vocab
        .marker_open(tail_label)
        .ok_or_else(|| BaselineError::MissingMarker(tail_label.to_string()))?;

    let head_range = {
        let ps = pieces.pieces_of_span(head_span.0, head_span.1);
        (ps[0], *ps.last().unwrap())
    };
    let tail_range = {
        let ps = pieces.pieces_of_span(tail_span.0, tail_span.1);
        (ps[0], *ps.last().unwrap())
    };
    let mut out = Vec::with_capacity(pieces.n_pieces());
    let mut p = 0;
    while p < pieces.n_pieces() {
        if p == head_range.0 {
            out.push(head_open);
            out.push(closer);
            p = head_range.1 + 1;
        } else if p == tail_range.0 {
            out.push(tail_open);
            out.push(closer);
            p = tail_range.1 + 1;
        } else {
            out.push(pieces.piece_ids[p]);
            p += 1;
        }
    }
    Ok(out)
}

/// Baseline model: tagging head plus sentence-level relation head over the
/// shared encoder.
pub struct MultiModel {
    pub encoder: TransformerEncoder,
    pub tag_w: ParamId,
    pub tag_b: ParamId,
    pub rel_w: ParamId,
    pub rel_b: ParamId,
    pub n_tags: usize,
}

impl MultiModel {
    pub fn new(
        store: &mut ParamStore,
        vocab_size: usize,
        schema: &LabelSchema,
        model_cfg: &ModelConfig,
        rng: &mut ChaCha8Rng,
    ) -> MultiModel {
        let encoder = TransformerEncoder::new(store, vocab_size, model_cfg.encoder_config(), rng);
        let d = model_cfg.d_model;
        let tags = n_tags(schema);
        let tag_w = store.register_normal("multi.tag.w", d, tags, rng);
        let tag_b = store.register_zeros("multi.tag.b", 1, tags);
        let rel_w = store.register_normal("multi.rel.w", d, schema.n_relation_labels(), rng);
        let rel_b = store.register_zeros("multi.rel.b", 1, schema.n_relation_labels());
        MultiModel {
            encoder,
            tag_w,
            tag_b,
            rel_w,
            rel_b,
            n_tags: tags,
        }
    }

    /// Tag logits for every piece after `[CLS]`.
    pub fn tag_logits(
        &self,
        g: &mut Graph,
        enc: NodeId,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> NodeId {
        let n = g.value(enc).rows();
        let body = g.gather_rows(enc, (1..n).collect());
        let body = g.dropout(body, dropout, rng);
        let w = g.param(self.tag_w);
        let b = g.param(self.tag_b);
        let logits = g.matmul(body, w);
        g.add_bias_row(logits, b)
    }

    /// Relation logits from the `[CLS]` embedding of a rewritten instance.
    pub fn relation_logits_for_instance(
        &self,
        g: &mut Graph,
        instance_pieces: &[usize],
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> NodeId {
        let enc = self.encoder.forward(g, instance_pieces);
        let cls = g.gather_rows(enc, vec![0]);
        let cls = g.dropout(cls, dropout, rng);
        let w = g.param(self.rel_w);
        let b = g.param(self.rel_b);
        let logits = g.matmul(cls, w);
        g.add_bias_row(logits, b)
    }
}

/// A relation training example for the baseline: gold spans with labels and
/// the binary target.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiRelExample {
    pub head: ((usize, usize), usize),
    pub tail: ((usize, usize), usize),
    pub label: usize,
}

/// Positive instances from gold relations plus up to
/// `negative_relation_count` unconnected Finding-to-subtype ordered pairs.
pub fn sample_relation_instances(
    sentence: &TrainSentence,
    schema: &LabelSchema,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<MultiRelExample> {
    let label_of = |span: (usize, usize)| {
        sentence
            .gold_spans
            .iter()
            .find(|&&(s, _)| s == span)
            .map(|&(_, l)| l)
    };
    let mut out: Vec<MultiRelExample> = sentence
        .gold_relations
        .iter()
        .filter_map(|&(h, t, label)| {
            Some(MultiRelExample {
                head: (h, label_of(h)?),
                tail: (t, label_of(t)?),
                label,
            })
        })
        .collect();
    let linked: Vec<((usize, usize), (usize, usize))> = sentence
        .gold_relations
        .iter()
        .map(|&(h, t, _)| (h, t))
        .collect();
    let mut pool = Vec::new();
    for &(h, hl) in &sentence.gold_spans {
        if hl != FINDING_LABEL {
            continue;
        }
        for &(t, tl) in &sentence.gold_spans {
            if !schema.is_subtype(tl) || spans_overlap(h, t) || linked.contains(&(h, t)) {
                continue;
            }
            pool.push(MultiRelExample {
                head: (h, hl),
                tail: (t, tl),
                label: NULL_LABEL,
            });
        }
    }
    let take = pool.len().min(cfg.negative_relation_count);
    if take > 0 {
        for idx in index_sample(rng, pool.len(), take) {
            out.push(pool[idx].clone());
        }
    }
    if out.len() > cfg.max_span_pairs {
        out.truncate(cfg.max_span_pairs);
    }
    out
}

/// Batch loss: mean tagging cross-entropy over all pieces plus mean relation
/// cross-entropy over all rewritten instances, backpropagated together.
pub fn multi_batch_loss(
    g: &mut Graph,
    model: &MultiModel,
    vocab: &Vocab,
    batch: &[(&TrainSentence, &[MultiRelExample])],
    schema: &LabelSchema,
    dropout: f64,
    rng: &mut ChaCha8Rng,
) -> NodeId {
    let mut tag_logit_nodes = Vec::new();
    let mut tag_targets = Vec::new();
    let mut rel_logit_nodes = Vec::new();
    let mut rel_targets = Vec::new();
    for (sentence, rels) in batch {
        if sentence.pieces.n_pieces() < 2 {
            continue;
        }
        let enc = model.encoder.forward(g, &sentence.pieces.piece_ids);
        tag_logit_nodes.push(model.tag_logits(g, enc, dropout, rng));
        tag_targets.extend(bio_encode(&sentence.pieces, &sentence.gold_spans));
        for ex in rels.iter() {
            let head = (ex.head.0, schema.span_label_name(ex.head.1));
            let tail = (ex.tail.0, schema.span_label_name(ex.tail.1));
            let Ok(mut instance) = make_relation_instance(&sentence.pieces, vocab, head, tail)
            else {
                continue;
            };
            instance.truncate(model.encoder.config.max_len);
            rel_logit_nodes.push(model.relation_logits_for_instance(g, &instance, dropout, rng));
            rel_targets.push(ex.label);
        }
    }
    assert!(
        !tag_logit_nodes.is_empty(),
        "batch needs at least one sentence"
    );
    let tag_logits = g.concat_rows(&tag_logit_nodes);
    let tag_loss = g.cross_entropy_mean(tag_logits, tag_targets);
    if rel_logit_nodes.is_empty() {
        return tag_loss;
    }
    let rel_logits = g.concat_rows(&rel_logit_nodes);
    let rel_loss = g.cross_entropy_mean(rel_logits, rel_targets);
    g.add(tag_loss, rel_loss)
}

pub struct TrainedMulti {
    pub store: ParamStore,
    pub model: MultiModel,
    pub vocab: Vocab,
    pub log: Vec<EpochLog>,
}

pub fn train_multi(
    train_docs: &[Document],
    dev_docs: &[Document],
    schema: &LabelSchema,
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
) -> Result<TrainedMulti, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let vocab = crate::encoder::build_vocab(train_docs, model_cfg.vocab_max, schema)?;
    let mut store = ParamStore::new();
    let model = MultiModel::new(&mut store, vocab.len(), schema, model_cfg, &mut rng);
    let sentences = prepare_sentences(train_docs, &vocab, &model.encoder);
    if sentences.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let steps_per_epoch = sentences.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut adam = crate::optim::Adam::new(
        crate::optim::AdamConfig::new(
            cfg.learning_rate,
            cfg.warmup_fraction,
            cfg.weight_decay,
            cfg.max_grad_norm,
            total_steps,
        ),
        &store,
    );

    let mut log = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..sentences.len()).collect();
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut loss_n = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let sampled: Vec<(&TrainSentence, Vec<MultiRelExample>)> = chunk
                .iter()
                .map(|&i| {
                    let s = &sentences[i];
                    (s, sample_relation_instances(s, schema, cfg, &mut rng))
                })
                .collect();
            let refs: Vec<(&TrainSentence, &[MultiRelExample])> =
                sampled.iter().map(|(s, r)| (*s, r.as_slice())).collect();
            if refs.iter().all(|(s, _)| s.pieces.n_pieces() < 2) {
                continue;
            }
            let mut g = Graph::new(&store);
            let loss =
                multi_batch_loss(&mut g, &model, &vocab, &refs, schema, cfg.dropout, &mut rng);
            let loss_value = g.value(loss).item();
            if !loss_value.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    step,
                    epoch,
                    loss: loss_value,
                });
            }
            let grads = g.backward(loss);
            adam.step(&mut store, grads);
            loss_sum += loss_value;
            loss_n += 1;
            step += 1;
        }
        let dev = evaluate_dev(&store, &model, &vocab, schema, cfg, dev_docs);
        log.push(EpochLog {
            epoch,
            mean_loss: loss_sum / loss_n.max(1) as f64,
            dev_finding_f1: dev.0,
            dev_micro_subtype_f1: dev.1,
            dev_relation_f1: dev.2,
        });
    }
    Ok(TrainedMulti {
        store,
        model,
        vocab,
        log,
    })
}

fn evaluate_dev(
    store: &ParamStore,
    model: &MultiModel,
    vocab: &Vocab,
    schema: &LabelSchema,
    cfg: &TrainConfig,
    dev_docs: &[Document],
) -> (f64, f64, f64) {
    if dev_docs.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let preds: Vec<DocPrediction> = dev_docs
        .iter()
        .map(|d| predict_multi(store, model, vocab, schema, cfg, d).0)
        .collect();
    let report = crate::eval::evaluate(
        dev_docs,
        &preds,
        crate::eval::MatchCriterion::Exact,
        schema,
        cfg.max_span_width,
    );
    (
        report.finding.f1,
        report.micro_subtype.f1,
        report.relation_subtype.f1,
    )
}

/// Inference diagnostics for the baseline.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MultiPredictDiag {
    pub capped_pairs: usize,
}

/// Tag, decode, then classify Finding-to-subtype candidate pairs over
/// marker-rewritten instances.
pub fn predict_multi(
    store: &ParamStore,
    model: &MultiModel,
    vocab: &Vocab,
    schema: &LabelSchema,
    cfg: &TrainConfig,
    doc: &Document,
) -> (DocPrediction, MultiPredictDiag) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut entities = Vec::new();
    let mut relations = Vec::new();
    let mut diag = MultiPredictDiag::default();
    for s in 0..doc.sentences.len() {
        let tokens = doc.sentence_tokens(s);
        if tokens.is_empty() {
            continue;
        }
        let (pieces, _) = model.encoder.fit_length(&tokenize(&tokens, vocab));
        let mut g = Graph::new(store);
        let enc = model.encoder.forward(&mut g, &pieces.piece_ids);
        let logits = model.tag_logits(&mut g, enc, 0.0, &mut rng);
        let tags: Vec<usize> = {
            let m = g.value(logits);
            (0..m.rows()).map(|r| argmax(m.row(r))).collect()
        };
        let decoded = bio_decode(&tags, &pieces);
        let base = entities.len();
        for &(span, label) in &decoded {
            entities.push(Entity {
                sentence_index: s,
                span,
                label,
            });
        }
        let heads: Vec<usize> = (0..decoded.len())
            .filter(|&i| decoded[i].1 == FINDING_LABEL)
            .collect();
        let tails: Vec<usize> = (0..decoded.len())
            .filter(|&i| schema.is_subtype(decoded[i].1))
            .collect();
        let mut pairs: Vec<(usize, usize)> = Vec::new();
        for &h in &heads {
            for &t in &tails {
                pairs.push((h, t));
            }
        }
        pairs.sort_by_key(|&(h, t)| (decoded[h].0, decoded[t].0));
        if pairs.len() > cfg.max_span_pairs {
            diag.capped_pairs += pairs.len() - cfg.max_span_pairs;
            pairs.truncate(cfg.max_span_pairs);
        }
        for (h, t) in pairs {
            let head = (decoded[h].0, schema.span_label_name(decoded[h].1));
            let tail = (decoded[t].0, schema.span_label_name(decoded[t].1));
            let Ok(mut instance) = make_relation_instance(&pieces, vocab, head, tail) else {
                continue;
            };
            instance.truncate(model.encoder.config.max_len);
            let mut g = Graph::new(store);
            let logits = model.relation_logits_for_instance(&mut g, &instance, 0.0, &mut rng);
            let dist = softmax_values(&mut g, logits);
            let label = argmax(&dist[0]);
            if label != NULL_LABEL {
                relations.push(Relation {
                    head: base + h,
                    label,
                    tail: base + t,
                });
            }
        }
    }
    (
        DocPrediction {
            doc_id: doc.id.clone(),
            entities,
            relations,
        },
        diag,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Document;
    use crate::encoder::build_vocab;

    fn schema() -> LabelSchema {
        LabelSchema::full()
    }

    fn vocab() -> Vocab {
        let docs = vec![Document::from_text(
            "a",
            "lungs : atelectasis of the right lower lobe. mass rib gas.",
        )];
        build_vocab(&docs, 400, &schema()).unwrap()
    }

    #[test]
    fn tag_vocabulary_size_full_schema() {
        assert_eq!(n_tags(&schema()), 115);
    }

    #[test]
    fn bio_encode_no_entities_all_o() {
        let v = vocab();
        let seq = tokenize(&["mass", "rib"], &v);
        assert_eq!(bio_encode(&seq, &[]), vec![0, 0]);
    }

    #[test]
    fn bio_encode_two_token_finding() {
        let v = vocab();
        let seq = tokenize(&["lower", "lobe", "mass"], &v);
        let tags = bio_encode(&seq, &[((0, 1), FINDING_LABEL)]);
        assert_eq!(tags, vec![b_tag(FINDING_LABEL), i_tag(FINDING_LABEL), 0]);
    }

    #[test]
    fn bio_encode_multi_piece_token() {
        let v = vocab();
        // "gash" is unseen and splits into char pieces; all pieces after the
        // first get I
        let seq = tokenize(&["gash", "rib"], &v);
        let n_pieces = seq.piece_range_of_token[0].1 - seq.piece_range_of_token[0].0 + 1;
        assert!(n_pieces > 1);
        let tags = bio_encode(&seq, &[((0, 0), FINDING_LABEL)]);
        assert_eq!(tags[0], b_tag(FINDING_LABEL));
        for t in &tags[1..n_pieces] {
            assert_eq!(*t, i_tag(FINDING_LABEL));
        }
        assert_eq!(tags[n_pieces], 0);
    }

    #[test]
    fn bio_encode_overlap_longer_wins_tie_earlier() {
        let v = vocab();
        let seq = tokenize(&["right", "lower", "lobe", "mass"], &v);
        let lung = schema().span_label_index("Lung").unwrap();
        // 3-token Lung span beats the overlapping 1-token Finding
        let tags = bio_encode(&seq, &[((1, 1), FINDING_LABEL), ((0, 2), lung)]);
        assert_eq!(tags, vec![b_tag(lung), i_tag(lung), i_tag(lung), 0]);
        // equal lengths: earlier start wins
        let tags = bio_encode(&seq, &[((1, 2), FINDING_LABEL), ((0, 1), lung)]);
        assert_eq!(tags, vec![b_tag(lung), i_tag(lung), 0, 0]);
    }

    #[test]
    fn bio_decode_cases() {
        let v = vocab();
        let seq = tokenize(&["right", "lower", "lobe"], &v);
        let lung = schema().span_label_index("Lung").unwrap();
        assert!(bio_decode(&[0, 0, 0], &seq).is_empty());
        assert_eq!(
            bio_decode(&[b_tag(lung), i_tag(lung), 0], &seq),
            vec![((0, 1), lung)]
        );
        // lenient: dangling I starts an entity
        assert_eq!(bio_decode(&[0, i_tag(lung), 0], &seq), vec![((1, 1), lung)]);
        // B after I starts a fresh entity
        assert_eq!(
            bio_decode(&[b_tag(lung), b_tag(lung), i_tag(lung)], &seq),
            vec![((0, 0), lung), ((1, 2), lung)]
        );
    }

    #[test]
    fn bio_round_trip_non_overlapping_gold() {
        let v = vocab();
        let seq = tokenize(
            &[
                "lungs",
                ":",
                "atelectasis",
                "of",
                "the",
                "right",
                "lower",
                "lobe",
            ],
            &v,
        );
        let lung = schema().span_label_index("Lung").unwrap();
        let gold = vec![((2, 2), FINDING_LABEL), ((5, 7), lung)];
        let decoded = bio_decode(&bio_encode(&seq, &gold), &seq);
        let mut gold_sorted = gold.clone();
        gold_sorted.sort();
        let mut dec_sorted = decoded.clone();
        dec_sorted.sort();
        assert_eq!(gold_sorted, dec_sorted);
    }

    #[test]
    fn relation_instance_matches_worked_example() {
        let v = vocab();
        let tokens = [
            "lungs",
            ":",
            "atelectasis",
            "of",
            "the",
            "right",
            "lower",
            "lobe",
        ];
        let seq = tokenize(&tokens, &v);
        let instance =
            make_relation_instance(&seq, &v, ((2, 2), "Finding"), ((5, 7), "Lung")).unwrap();
        let rendered: Vec<&str> = instance.iter().map(|&id| v.piece(id)).collect();
        assert_eq!(
            rendered,
            vec!["[CLS]", "lungs", ":", "@Finding", "$MARK$", "of", "the", "@Lung", "$MARK$"]
        );
    }

    #[test]
    fn relation_instance_adjacent_and_reversed_order() {
        let v = vocab();
        let seq = tokenize(&["atelectasis", "lobe"], &v);
        let inst = make_relation_instance(&seq, &v, ((0, 0), "Finding"), ((1, 1), "Lung")).unwrap();
        let rendered: Vec<&str> = inst.iter().map(|&id| v.piece(id)).collect();
        assert_eq!(
            rendered,
            vec!["[CLS]", "@Finding", "$MARK$", "@Lung", "$MARK$"]
        );

        // tail before head in surface order: markers follow surface order
        let seq2 = tokenize(&["lobe", "of", "atelectasis"], &v);
        let inst2 =
            make_relation_instance(&seq2, &v, ((2, 2), "Finding"), ((0, 0), "Lung")).unwrap();
        let rendered2: Vec<&str> = inst2.iter().map(|&id| v.piece(id)).collect();
        assert_eq!(
            rendered2,
            vec!["[CLS]", "@Lung", "$MARK$", "of", "@Finding", "$MARK$"]
        );
    }

    #[test]
    fn relation_instance_rejects_overlap() {
        let v = vocab();
        let seq = tokenize(&["right", "lower", "lobe"], &v);
        assert!(matches!(
            make_relation_instance(&seq, &v, ((0, 1), "Finding"), ((1, 2), "Lung")),
            Err(BaselineError::OverlappingPair)
        ));
    }

    #[test]
    fn relation_sampling_respects_type_constraint() {
        let v = vocab();
        let seq = tokenize(&["atelectasis", "of", "lobe", "and", "rib"], &v);
        let lung = schema().span_label_index("Lung").unwrap();
        let msk = schema().span_label_index("MSK").unwrap();
        let sentence = TrainSentence {
            pieces: seq,
            gold_spans: vec![((0, 0), FINDING_LABEL), ((2, 2), lung), ((4, 4), msk)],
            gold_relations: vec![((0, 0), (2, 2), 1)],
        };
        let cfg = TrainConfig::bert_multi(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let examples = sample_relation_instances(&sentence, &schema(), &cfg, &mut rng);
        assert_eq!(examples[0].label, 1);
        // only Finding->subtype negatives: exactly ((0,0),(4,4))
        assert_eq!(examples.len(), 2);
        assert_eq!(examples[1].head.0, (0, 0));
        assert_eq!(examples[1].tail.0, (4, 4));
        assert_eq!(examples[1].label, NULL_LABEL);
    }

    fn tiny_multi() -> (ParamStore, MultiModel, Vocab) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let v = vocab();
        let model_cfg = ModelConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 32,
            max_len: 64,
            width_dim: 4,
            vocab_max: 400,
        };
        let model = MultiModel::new(&mut store, v.len(), &schema(), &model_cfg, &mut rng);
        (store, model, v)
    }

    #[test]
    fn predict_no_findings_no_relations() {
        let (mut store, model, v) = tiny_multi();
        // push every tag toward O
        store.value_mut(model.tag_b).set(0, 0, 50.0);
        let doc = Document::from_text("d", "atelectasis of the lobe.");
        let cfg = TrainConfig::bert_multi(1);
        let (pred, _) = predict_multi(&store, &model, &v, &schema(), &cfg, &doc);
        assert!(pred.entities.is_empty());
        assert!(pred.relations.is_empty());
    }

    #[test]
    fn candidate_pairs_are_finding_times_anatomy() {
        // 2 findings x 3 anatomy tails = 6 instances
        let decoded = [
            ((0usize, 0usize), FINDING_LABEL),
            ((2, 2), FINDING_LABEL),
            ((4, 4), 23),
            ((6, 6), 27),
            ((8, 8), 23),
        ];
        let heads: Vec<usize> = (0..decoded.len())
            .filter(|&i| decoded[i].1 == FINDING_LABEL)
            .collect();
        let tails: Vec<usize> = (0..decoded.len())
            .filter(|&i| schema().is_subtype(decoded[i].1))
            .collect();
        assert_eq!(heads.len() * tails.len(), 6);
    }

    #[test]
    fn baseline_gradients_match_finite_differences() {
        let (mut store, model, v) = tiny_multi();
        let seq = tokenize(&["atelectasis", "of", "the", "lobe"], &v);
        let lung = schema().span_label_index("Lung").unwrap();
        let sentence = TrainSentence {
            pieces: seq,
            gold_spans: vec![((0, 0), FINDING_LABEL), ((3, 3), lung)],
            gold_relations: vec![((0, 0), (3, 3), 1)],
        };
        let cfg = TrainConfig::bert_multi(1);
        let rels = sample_relation_instances(
            &sentence,
            &schema(),
            &cfg,
            &mut ChaCha8Rng::seed_from_u64(3),
        );

        let loss_of = |store: &ParamStore| {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut g = Graph::new(store);
            let batch = [(&sentence, rels.as_slice())];
            let node = multi_batch_loss(&mut g, &model, &v, &batch, &schema(), 0.0, &mut rng);
            g.value(node).item()
        };
        let grads = {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut g = Graph::new(&store);
            let batch = [(&sentence, rels.as_slice())];
            let node = multi_batch_loss(&mut g, &model, &v, &batch, &schema(), 0.0, &mut rng);
            g.backward(node)
        };
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let h = 1e-6;
        for name in [
            "multi.tag.w",
            "multi.tag.b",
            "multi.rel.w",
            "multi.rel.b",
            "enc.tok_emb",
        ] {
            let id = store.by_name(name).unwrap();
            let (rows, cols) = store.value(id).shape();
            for _ in 0..4 {
                let r = (rng.random::<u64>() as usize) % rows;
                let c = (rng.random::<u64>() as usize) % cols;
                let orig = store.value(id).get(r, c);
                store.value_mut(id).set(r, c, orig + h);
                let lp = loss_of(&store);
                store.value_mut(id).set(r, c, orig - h);
                let lm = loss_of(&store);
                store.value_mut(id).set(r, c, orig);
                let fd = (lp - lm) / (2.0 * h);
                let an = grads.get(id).map(|m| m.get(r, c)).unwrap_or(0.0);
                if fd.abs().max(an.abs()) < 1e-10 {
                    continue;
                }
                let rel = (fd - an).abs() / fd.abs().max(an.abs());
                assert!(rel < 1e-4, "{name} ({r},{c}): fd={fd} an={an}");
            }
        }
    }
}
