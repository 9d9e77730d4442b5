//! The span-based joint extractor: span enumeration, max-pooled span
//! embeddings with width buckets, a linear span classifier over the full
//! label set, a linear relation classifier over span pairs with max-pooled
//! between-span context, negative sampling, the joint loss, training, and
//! inference.

use rand::seq::index::sample as index_sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Document, Entity, Relation};
use crate::encoder::{tokenize, EncoderConfig, TransformerEncoder, Vocab, WordPieceSequence};
use crate::eval::DocPrediction;
use crate::graph::{Graph, NodeId};
use crate::params::{ParamId, ParamStore};
use crate::schema::{LabelSchema, NULL_LABEL};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training corpus has no usable sentences")]
    EmptyCorpus,
    #[error("non-finite loss at step {step} (epoch {epoch}): {loss}")]
    NonFiniteLoss {
        step: usize,
        epoch: usize,
        loss: f64,
    },
    #[error(transparent)]
    Encoder(#[from] crate::encoder::EncoderError),
}

/// Hyperparameters shared by the training loops. The constructors carry the
/// per-system defaults.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub negative_entity_count: usize,
    pub negative_relation_count: usize,
    pub max_span_width: usize,
    pub max_span_pairs: usize,
    pub dropout: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub max_grad_norm: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn spert(seed: u64) -> TrainConfig {
        TrainConfig {
            negative_entity_count: 100,
            negative_relation_count: 100,
            max_span_width: 10,
            max_span_pairs: 1000,
            dropout: 0.2,
            batch_size: 20,
            epochs: 20,
            learning_rate: 2e-4,
            warmup_fraction: 0.1,
            weight_decay: 0.01,
            max_grad_norm: 1.0,
            seed,
        }
    }

    pub fn bert_multi(seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: 50,
            ..TrainConfig::spert(seed)
        }
    }

    pub fn normalization(seed: u64) -> TrainConfig {
        TrainConfig {
            dropout: 0.05,
            batch_size: 50,
            epochs: 15,
            ..TrainConfig::spert(seed)
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.batch_size == 0 || self.epochs == 0 || self.max_span_width == 0 {
            return Err("batch_size, epochs and max_span_width must be positive".into());
        }
        if self.negative_entity_count == 0
            || self.negative_relation_count == 0
            || self.max_span_pairs == 0
        {
            return Err("negative sample counts and max_span_pairs must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err("warmup_fraction must lie in [0, 1]".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err("dropout must lie in [0, 1)".into());
        }
        if self.learning_rate <= 0.0 || self.max_grad_norm <= 0.0 {
            return Err("learning_rate and max_grad_norm must be positive".into());
        }
        Ok(())
    }
}

/// Sizes that shape the trainable tensors, fixed per checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub width_dim: usize,
    pub vocab_max: usize,
}

impl Default for ModelConfig {
    fn default() -> ModelConfig {
        let enc = EncoderConfig::default();
        ModelConfig {
            d_model: enc.d_model,
            n_layers: enc.n_layers,
            n_heads: enc.n_heads,
            d_ff: enc.d_ff,
            max_len: enc.max_len,
            width_dim: 16,
            vocab_max: 2000,
        }
    }
}

impl ModelConfig {
    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            max_len: self.max_len,
        }
    }
}

/// Inclusive (start, end) token span within one sentence.
pub type TokenSpan = (usize, usize);
/// A span plus its gold or predicted span-label index.
pub type LabeledSpan = (TokenSpan, usize);
/// (head span, tail span, relation label).
pub type SpanPairExample = (TokenSpan, TokenSpan, usize);

/// A candidate token span; `width_bucket` counts tokens and stays within the
/// configured maximum by construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpanCandidate {
    pub span: (usize, usize),
    pub width_bucket: usize,
}

/// Every span of 1..=max_width tokens, in lexicographic order.
pub fn enumerate_spans(n_tokens: usize, max_width: usize) -> Vec<SpanCandidate> {
    assert!(max_width >= 1);
    let mut out = Vec::new();
    for start in 0..n_tokens {
        for end in start..n_tokens.min(start + max_width) {
            out.push(SpanCandidate {
                span: (start, end),
                width_bucket: end - start + 1,
            });
        }
    }
    out
}

/// The span-based extractor's trainable pieces on top of the shared encoder.
pub struct SpertModel {
    pub encoder: TransformerEncoder,
    pub width_table: ParamId,
    pub span_w: ParamId,
    pub span_b: ParamId,
    pub rel_w: ParamId,
    pub rel_b: ParamId,
    pub max_width: usize,
    pub width_dim: usize,
    pub n_span_labels: usize,
}

impl SpertModel {
    pub fn new(
        store: &mut ParamStore,
        vocab_size: usize,
        schema: &LabelSchema,
        model_cfg: &ModelConfig,
        max_width: usize,
        rng: &mut ChaCha8Rng,
    ) -> SpertModel {
        let encoder = TransformerEncoder::new(store, vocab_size, model_cfg.encoder_config(), rng);
        let d = model_cfg.d_model;
        let wd = model_cfg.width_dim;
        let width_table = store.register_normal("spert.width", max_width, wd, rng);
        let span_in = d + wd + d;
        let span_w = store.register_normal("spert.span.w", span_in, schema.n_span_labels(), rng);
        let span_b = store.register_zeros("spert.span.b", 1, schema.n_span_labels());
        let rel_in = 2 * (d + wd) + d;
        let rel_w = store.register_normal("spert.rel.w", rel_in, schema.n_relation_labels(), rng);
        let rel_b = store.register_zeros("spert.rel.b", 1, schema.n_relation_labels());
        SpertModel {
            encoder,
            width_table,
            span_w,
            span_b,
            rel_w,
            rel_b,
            max_width,
            width_dim: wd,
            n_span_labels: schema.n_span_labels(),
        }
    }

    /// Width bucket for an arbitrary span; spans wider than the table clamp
    /// to the last bucket.
    pub fn width_bucket(&self, span: (usize, usize)) -> usize {
        (span.1 - span.0 + 1).min(self.max_width)
    }

    /// Max-pooled span representations `e(s) = pool(span pieces) . width`,
    /// one row per span. `enc` must be the encoder output for `pieces`.
    pub fn span_reprs(
        &self,
        g: &mut Graph,
        enc: NodeId,
        pieces: &WordPieceSequence,
        spans: &[(usize, usize)],
    ) -> NodeId {
        let groups: Vec<Vec<usize>> = spans
            .iter()
            .map(|&(s, e)| pieces.pieces_of_span(s, e))
            .collect();
        let pooled = g.max_over_groups(enc, &groups);
        let width_idx: Vec<usize> = spans.iter().map(|&sp| self.width_bucket(sp) - 1).collect();
        let table = g.param(self.width_table);
        let widths = g.gather_rows(table, width_idx);
        g.concat_cols(&[pooled, widths])
    }

    /// Span classifier logits for a batch of candidate spans in one sentence:
    /// input is `e(s) . e_cls`, with dropout when `dropout > 0`.
    pub fn span_logits(
        &self,
        g: &mut Graph,
        enc: NodeId,
        pieces: &WordPieceSequence,
        spans: &[(usize, usize)],
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> NodeId {
        span_head_logits(
            g,
            enc,
            pieces,
            spans,
            self.width_table,
            self.span_w,
            self.span_b,
            self.max_width,
            dropout,
            rng,
        )
    }

    /// Relation classifier logits for ordered (head, tail) span pairs.
    /// The context part max-pools the pieces strictly between the spans and
    /// is zero when the spans are adjacent.
    pub fn relation_logits(
        &self,
        g: &mut Graph,
        enc: NodeId,
        pieces: &WordPieceSequence,
        pairs: &[(TokenSpan, TokenSpan)],
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> NodeId {
        let head_spans: Vec<TokenSpan> = pairs.iter().map(|p| p.0).collect();
        let tail_spans: Vec<TokenSpan> = pairs.iter().map(|p| p.1).collect();
        let heads = self.span_reprs(g, enc, pieces, &head_spans);
        let tails = self.span_reprs(g, enc, pieces, &tail_spans);
        let between: Vec<Vec<usize>> = pairs
            .iter()
            .map(|&(h, t)| pieces.pieces_between(h, t))
            .collect();
        let context = g.max_over_groups(enc, &between);
        let x = g.concat_cols(&[heads, context, tails]);
        let x = g.dropout(x, dropout, rng);
        let w = g.param(self.rel_w);
        let b = g.param(self.rel_b);
        let logits = g.matmul(x, w);
        g.add_bias_row(logits, b)
    }
}

/// The shared span classifier: `softmax(W . (e(s) . e_cls) + b)` with the
/// span embedding built from max pooling and the width table. Used by both
/// the joint extractor and the normalization-only models.
#[allow(clippy::too_many_arguments)]
pub fn span_head_logits(
    g: &mut Graph,
    enc: NodeId,
    pieces: &WordPieceSequence,
    spans: &[(usize, usize)],
    width_table: ParamId,
    span_w: ParamId,
    span_b: ParamId,
    max_width: usize,
    dropout: f64,
    rng: &mut ChaCha8Rng,
) -> NodeId {
    let groups: Vec<Vec<usize>> = spans
        .iter()
        .map(|&(s, e)| pieces.pieces_of_span(s, e))
        .collect();
    let pooled = g.max_over_groups(enc, &groups);
    let width_idx: Vec<usize> = spans
        .iter()
        .map(|&(s, e)| (e - s + 1).min(max_width) - 1)
        .collect();
    let table = g.param(width_table);
    let widths = g.gather_rows(table, width_idx);
    let cls = g.gather_rows(enc, vec![0; spans.len()]);
    let x = g.concat_cols(&[pooled, widths, cls]);
    let x = g.dropout(x, dropout, rng);
    let w = g.param(span_w);
    let b = g.param(span_b);
    let logits = g.matmul(x, w);
    g.add_bias_row(logits, b)
}

/// Row-wise softmax of a logits node, returned as plain values.
pub fn softmax_values(g: &mut Graph, logits: NodeId) -> Vec<Vec<f64>> {
    let s = g.softmax_rows(logits);
    let m = g.value(s);
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

/// Argmax with ties broken toward the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean span cross-entropy plus mean relation cross-entropy, computed on
/// plain probability rows. The training path assembles the same quantity in
/// the graph; this value-level twin exists for tests and reporting.
pub fn joint_loss(
    span_dists: &[Vec<f64>],
    span_gold: &[usize],
    rel_dists: &[Vec<f64>],
    rel_gold: &[usize],
) -> f64 {
    assert_eq!(span_dists.len(), span_gold.len());
    assert_eq!(rel_dists.len(), rel_gold.len());
    assert!(!span_dists.is_empty(), "joint loss needs span examples");
    let span: f64 = span_dists
        .iter()
        .zip(span_gold)
        .map(|(d, &t)| -d[t].max(1e-300).ln())
        .sum::<f64>()
        / span_dists.len() as f64;
    let rel: f64 = if rel_dists.is_empty() {
        0.0
    } else {
        rel_dists
            .iter()
            .zip(rel_gold)
            .map(|(d, &t)| -d[t].max(1e-300).ln())
            .sum::<f64>()
            / rel_dists.len() as f64
    };
    span + rel
}

/// One sentence of training material: gold spans/relations expressed over
/// token spans, plus the tokenized pieces.
#[derive(Debug, Clone)]
pub struct TrainSentence {
    pub pieces: WordPieceSequence,
    /// (span, label) for every gold entity in the sentence.
    pub gold_spans: Vec<LabeledSpan>,
    /// (head span, tail span, label) for every gold relation in the sentence.
    pub gold_relations: Vec<SpanPairExample>,
}

/// A sampled batch entry: classifier examples for one sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledSentence {
    pub span_examples: Vec<LabeledSpan>,
    pub rel_examples: Vec<SpanPairExample>,
}

/// Negative sampling for one sentence: all gold spans stay positive, up to
/// `negative_entity_count` non-gold enumerated spans become null examples,
/// and unconnected ordered gold-entity pairs become null relations, capped
/// at `negative_relation_count`.
pub fn sample_training_batch(
    sentence: &TrainSentence,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> SampledSentence {
    let n_tokens = sentence.pieces.n_tokens();
    let mut span_examples: Vec<LabeledSpan> = sentence.gold_spans.clone();
    let gold_set: Vec<TokenSpan> = sentence.gold_spans.iter().map(|&(s, _)| s).collect();
    let pool: Vec<TokenSpan> = enumerate_spans(n_tokens, cfg.max_span_width)
        .into_iter()
        .map(|c| c.span)
        .filter(|s| !gold_set.contains(s))
        .collect();
    let take = pool.len().min(cfg.negative_entity_count);
    if take > 0 {
        for idx in index_sample(rng, pool.len(), take) {
            span_examples.push((pool[idx], NULL_LABEL));
        }
    }

    let mut rel_examples: Vec<SpanPairExample> = sentence.gold_relations.clone();
    let linked: Vec<(TokenSpan, TokenSpan)> = sentence
        .gold_relations
        .iter()
        .map(|&(h, t, _)| (h, t))
        .collect();
    let mut neg_pool: Vec<((usize, usize), (usize, usize))> = Vec::new();
    for (i, &(a, _)) in sentence.gold_spans.iter().enumerate() {
        for (j, &(b, _)) in sentence.gold_spans.iter().enumerate() {
            if i == j || spans_overlap(a, b) || linked.contains(&(a, b)) {
                continue;
            }
            neg_pool.push((a, b));
        }
    }
    let take = neg_pool.len().min(cfg.negative_relation_count);
    if take > 0 {
        for idx in index_sample(rng, neg_pool.len(), take) {
            let (h, t) = neg_pool[idx];
            rel_examples.push((h, t, NULL_LABEL));
        }
    }
    // the pair cap applies at training time too; positives are kept first
    if rel_examples.len() > cfg.max_span_pairs {
        rel_examples.truncate(cfg.max_span_pairs);
    }
    SampledSentence {
        span_examples,
        rel_examples,
    }
}

pub fn spans_overlap(a: (usize, usize), b: (usize, usize)) -> bool {
    a.0 <= b.1 && b.0 <= a.1
}

/// Build the joint batch loss inside `g`: mean span cross-entropy over all
/// span examples in the batch plus mean relation cross-entropy over all
/// relation examples (zero when there are none).
pub fn batch_loss(
    g: &mut Graph,
    model: &SpertModel,
    batch: &[(&TrainSentence, &SampledSentence)],
    dropout: f64,
    rng: &mut ChaCha8Rng,
) -> NodeId {
    let mut span_logit_nodes = Vec::new();
    let mut span_targets = Vec::new();
    let mut rel_logit_nodes = Vec::new();
    let mut rel_targets = Vec::new();
    for (sentence, sampled) in batch {
        if sampled.span_examples.is_empty() && sampled.rel_examples.is_empty() {
            continue;
        }
        let enc = model.encoder.forward(g, &sentence.pieces.piece_ids);
        if !sampled.span_examples.is_empty() {
            let spans: Vec<(usize, usize)> =
                sampled.span_examples.iter().map(|&(s, _)| s).collect();
            span_logit_nodes.push(model.span_logits(
                g,
                enc,
                &sentence.pieces,
                &spans,
                dropout,
                rng,
            ));
            span_targets.extend(sampled.span_examples.iter().map(|&(_, l)| l));
        }
        if !sampled.rel_examples.is_empty() {
            let pairs: Vec<((usize, usize), (usize, usize))> = sampled
                .rel_examples
                .iter()
                .map(|&(h, t, _)| (h, t))
                .collect();
            rel_logit_nodes.push(model.relation_logits(
                g,
                enc,
                &sentence.pieces,
                &pairs,
                dropout,
                rng,
            ));
            rel_targets.extend(sampled.rel_examples.iter().map(|&(_, _, l)| l));
        }
    }
    assert!(
        !span_logit_nodes.is_empty(),
        "batch loss needs at least one span example"
    );
    let span_logits = g.concat_rows(&span_logit_nodes);
    let span_loss = g.cross_entropy_mean(span_logits, span_targets);
    if rel_logit_nodes.is_empty() {
        return span_loss;
    }
    let rel_logits = g.concat_rows(&rel_logit_nodes);
    let rel_loss = g.cross_entropy_mean(rel_logits, rel_targets);
    g.add(span_loss, rel_loss)
}

/// Turn documents into per-sentence training material; entities that fall
/// outside a length-truncated sentence are dropped along with their
/// relations.
pub fn prepare_sentences(
    docs: &[Document],
    vocab: &Vocab,
    encoder: &TransformerEncoder,
) -> Vec<TrainSentence> {
    let mut out = Vec::new();
    for doc in docs {
        for s in 0..doc.sentences.len() {
            let tokens = doc.sentence_tokens(s);
            if tokens.is_empty() {
                continue;
            }
            let (pieces, _truncated) = encoder.fit_length(&tokenize(&tokens, vocab));
            let n_tokens = pieces.n_tokens();
            let mut kept: Vec<(usize, LabeledSpan)> = Vec::new();
            for (ei, e) in doc.entities.iter().enumerate() {
                if e.sentence_index == s && e.span.1 < n_tokens {
                    kept.push((ei, (e.span, e.label)));
                }
            }
            let gold_spans: Vec<((usize, usize), usize)> = kept.iter().map(|&(_, g)| g).collect();
            let index_of = |ei: usize| kept.iter().position(|&(k, _)| k == ei);
            let gold_relations = doc
                .relations
                .iter()
                .filter_map(|r| {
                    let h = index_of(r.head)?;
                    let t = index_of(r.tail)?;
                    Some((gold_spans[h].0, gold_spans[t].0, r.label))
                })
                .collect();
            out.push(TrainSentence {
                pieces,
                gold_spans,
                gold_relations,
            });
        }
    }
    out
}

/// One epoch line of the training log.
#[derive(Debug, Clone, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub dev_finding_f1: f64,
    pub dev_micro_subtype_f1: f64,
    pub dev_relation_f1: f64,
}

/// A trained span extractor bundled with everything inference needs.
pub struct TrainedSpert {
    pub store: ParamStore,
    pub model: SpertModel,
    pub vocab: Vocab,
    pub log: Vec<EpochLog>,
}

pub fn train_spert(
    train_docs: &[Document],
    dev_docs: &[Document],
    schema: &LabelSchema,
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
) -> Result<TrainedSpert, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let vocab = crate::encoder::build_vocab(train_docs, model_cfg.vocab_max, schema)
        .map_err(TrainError::Encoder)?;
    let mut store = ParamStore::new();
    let model = SpertModel::new(
        &mut store,
        vocab.len(),
        schema,
        model_cfg,
        cfg.max_span_width,
        &mut rng,
    );
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
            let batch: Vec<(&TrainSentence, SampledSentence)> = chunk
                .iter()
                .map(|&i| {
                    let s = &sentences[i];
                    (s, sample_training_batch(s, cfg, &mut rng))
                })
                .collect();
            let refs: Vec<(&TrainSentence, &SampledSentence)> =
                batch.iter().map(|(s, b)| (*s, b)).collect();
            if refs.iter().all(|(_, b)| b.span_examples.is_empty()) {
                continue;
            }
            let mut g = Graph::new(&store);
            let loss = batch_loss(&mut g, &model, &refs, cfg.dropout, &mut rng);
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
    Ok(TrainedSpert {
        store,
        model,
        vocab,
        log,
    })
}

fn evaluate_dev(
    store: &ParamStore,
    model: &SpertModel,
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
        .map(|d| predict_spert(store, model, vocab, cfg, d).0)
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

/// Inference diagnostics.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PredictDiag {
    /// Ordered pairs skipped because head and tail spans overlap.
    pub skipped_overlapping_pairs: usize,
    /// Pairs dropped by the pair cap.
    pub capped_pairs: usize,
}

/// Inference: classify every candidate span, keep non-null argmaxes, then
/// classify all ordered pairs of surviving spans (capped, lowest positions
/// first) and keep pairs whose argmax is a real relation label.
pub fn predict_spert(
    store: &ParamStore,
    model: &SpertModel,
    vocab: &Vocab,
    cfg: &TrainConfig,
    doc: &Document,
) -> (DocPrediction, PredictDiag) {
    let mut rng = ChaCha8Rng::seed_from_u64(0); // dropout is off at inference
    let mut entities = Vec::new();
    let mut relations = Vec::new();
    let mut diag = PredictDiag::default();

    for s in 0..doc.sentences.len() {
        let tokens = doc.sentence_tokens(s);
        if tokens.is_empty() {
            continue;
        }
        let (pieces, _) = model.encoder.fit_length(&tokenize(&tokens, vocab));
        let candidates = enumerate_spans(pieces.n_tokens(), model.max_width);
        if candidates.is_empty() {
            continue;
        }
        let mut g = Graph::new(store);
        let enc = model.encoder.forward(&mut g, &pieces.piece_ids);
        let spans: Vec<(usize, usize)> = candidates.iter().map(|c| c.span).collect();
        let logits = model.span_logits(&mut g, enc, &pieces, &spans, 0.0, &mut rng);
        let dists = softmax_values(&mut g, logits);

        let mut surviving: Vec<((usize, usize), usize)> = Vec::new();
        for (c, dist) in candidates.iter().zip(&dists) {
            let label = argmax(dist);
            if label != NULL_LABEL {
                surviving.push((c.span, label));
            }
        }
        let base = entities.len();
        for &(span, label) in &surviving {
            entities.push(Entity {
                sentence_index: s,
                span,
                label,
            });
        }
        if surviving.len() < 2 {
            continue;
        }
        let mut pairs: Vec<(usize, usize)> = Vec::new();
        for i in 0..surviving.len() {
            for j in 0..surviving.len() {
                if i == j {
                    continue;
                }
                if spans_overlap(surviving[i].0, surviving[j].0) {
                    diag.skipped_overlapping_pairs += 1;
                    continue;
                }
                pairs.push((i, j));
            }
        }
        pairs.sort_by_key(|&(i, j)| (surviving[i].0, surviving[j].0));
        if pairs.len() > cfg.max_span_pairs {
            diag.capped_pairs += pairs.len() - cfg.max_span_pairs;
            pairs.truncate(cfg.max_span_pairs);
        }
        if pairs.is_empty() {
            continue;
        }
        let span_pairs: Vec<((usize, usize), (usize, usize))> = pairs
            .iter()
            .map(|&(i, j)| (surviving[i].0, surviving[j].0))
            .collect();
        let rel_logits = model.relation_logits(&mut g, enc, &pieces, &span_pairs, 0.0, &mut rng);
        let rel_dists = softmax_values(&mut g, rel_logits);
        for (&(i, j), dist) in pairs.iter().zip(&rel_dists) {
            let label = argmax(dist);
            if label != NULL_LABEL {
                relations.push(Relation {
                    head: base + i,
                    label,
                    tail: base + j,
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

    fn tiny_model() -> (ParamStore, SpertModel, Vocab) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let docs = vec![Document::from_text(
            "a",
            "mass in the right lower lobe. no fracture of the rib.",
        )];
        let vocab = build_vocab(&docs, 400, &schema()).unwrap();
        let model_cfg = ModelConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 32,
            max_len: 64,
            width_dim: 4,
            vocab_max: 400,
        };
        let model = SpertModel::new(&mut store, vocab.len(), &schema(), &model_cfg, 10, &mut rng);
        (store, model, vocab)
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        assert!(TrainConfig::spert(1).validate().is_ok());
        assert!(TrainConfig::bert_multi(1).validate().is_ok());
        assert!(TrainConfig::normalization(1).validate().is_ok());
        let mut bad = TrainConfig::spert(1);
        bad.warmup_fraction = 1.5;
        assert!(bad.validate().is_err());
        let mut bad = TrainConfig::spert(1);
        bad.negative_entity_count = 0;
        assert!(bad.validate().is_err());
        let mut bad = TrainConfig::spert(1);
        bad.dropout = 1.0;
        assert!(bad.validate().is_err());
        let mut bad = TrainConfig::spert(1);
        bad.learning_rate = 0.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn enumerate_empty_sentence() {
        assert!(enumerate_spans(0, 10).is_empty());
    }

    #[test]
    fn enumerate_counts_match_brute_force() {
        // independent oracle: count (start, end) pairs by exhaustive loops
        let brute = |n: usize, l: usize| -> usize {
            let mut count = 0;
            for s in 0..n {
                for e in s..n {
                    if e - s < l {
                        count += 1;
                    }
                }
            }
            count
        };
        assert_eq!(enumerate_spans(5, 3).len(), 12);
        assert_eq!(brute(5, 3), 12);
        assert_eq!(enumerate_spans(3, 10).len(), 6);
        assert_eq!(brute(3, 10), 6);
        for n in 0..20 {
            for l in 1..=10 {
                assert_eq!(enumerate_spans(n, l).len(), brute(n, l), "n={n} l={l}");
            }
        }
    }

    #[test]
    fn enumerate_is_lexicographic_and_within_width() {
        let spans = enumerate_spans(6, 3);
        let mut sorted = spans.clone();
        sorted.sort_by_key(|c| c.span);
        assert_eq!(spans, sorted);
        assert!(spans
            .iter()
            .all(|c| c.width_bucket == c.span.1 - c.span.0 + 1));
        assert!(spans.iter().all(|c| c.width_bucket <= 3));
    }

    #[test]
    fn span_embedding_singleton_equals_piece_embedding() {
        let (store, model, vocab) = tiny_model();
        let seq = tokenize(&["mass", "in", "the", "rib"], &vocab);
        assert_eq!(seq.n_pieces(), 5, "fixture needs single-piece tokens");
        let mut g = Graph::new(&store);
        let enc = model.encoder.forward(&mut g, &seq.piece_ids);
        let reprs = model.span_reprs(&mut g, enc, &seq, &[(1, 1)]);
        let d = model.encoder.config.d_model;
        let pooled: Vec<f64> = g.value(reprs).row(0)[..d].to_vec();
        let direct: Vec<f64> = g.value(enc).row(2).to_vec(); // token 1 = piece row 2
        assert_eq!(pooled, direct);
    }

    #[test]
    fn span_embedding_matches_scalar_loop_oracle() {
        let (store, model, vocab) = tiny_model();
        let seq = tokenize(&["mass", "in", "the", "right", "lower", "lobe"], &vocab);
        let mut g = Graph::new(&store);
        let enc = model.encoder.forward(&mut g, &seq.piece_ids);
        let span = (1usize, 4usize);
        let reprs = model.span_reprs(&mut g, enc, &seq, &[span]);
        let d = model.encoder.config.d_model;
        let pooled = &g.value(reprs).row(0)[..d];
        let rows = seq.pieces_of_span(span.0, span.1);
        for (c, &got) in pooled.iter().enumerate() {
            let mut expect = f64::NEG_INFINITY;
            for &r in &rows {
                expect = expect.max(g.value(enc).get(r, c));
            }
            assert_eq!(got, expect, "coordinate {c}");
            assert!(rows.iter().any(|&r| g.value(enc).get(r, c) == got));
            assert!(rows.iter().all(|&r| g.value(enc).get(r, c) <= got));
        }
    }

    #[test]
    fn pooling_is_order_invariant() {
        let (store, model, vocab) = tiny_model();
        let seq = tokenize(&["mass", "in", "the", "rib"], &vocab);
        let mut g = Graph::new(&store);
        let enc = model.encoder.forward(&mut g, &seq.piece_ids);
        let a = model.span_reprs(&mut g, enc, &seq, &[(0, 3)]);
        let b = model.span_reprs(&mut g, enc, &seq, &[(0, 3)]);
        assert_eq!(g.value(a), g.value(b));
    }

    #[test]
    fn span_distributions_normalize_and_count_58() {
        let (store, model, vocab) = tiny_model();
        let seq = tokenize(&["mass", "in", "the", "rib"], &vocab);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::new(&store);
        let enc = model.encoder.forward(&mut g, &seq.piece_ids);
        let logits = model.span_logits(&mut g, enc, &seq, &[(0, 0), (1, 3)], 0.0, &mut rng);
        let dists = softmax_values(&mut g, logits);
        for d in &dists {
            assert_eq!(d.len(), 58);
            let sum: f64 = d.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert!(d.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn zero_weights_give_uniform_distribution() {
        let (mut store, model, vocab) = tiny_model();
        for v in store.value_mut(model.span_w).data_mut() {
            *v = 0.0;
        }
        for v in store.value_mut(model.span_b).data_mut() {
            *v = 0.0;
        }
        let seq = tokenize(&["mass"], &vocab);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::new(&store);
        let enc = model.encoder.forward(&mut g, &seq.piece_ids);
        let logits = model.span_logits(&mut g, enc, &seq, &[(0, 0)], 0.0, &mut rng);
        let dists = softmax_values(&mut g, logits);
        for &p in &dists[0] {
            assert!((p - 1.0 / 58.0).abs() < 1e-12);
        }
    }

    #[test]
    fn relation_outputs_two_scores_and_adjacent_context_is_zero() {
        let (store, model, vocab) = tiny_model();
        let seq = tokenize(&["mass", "rib", "the", "lobe"], &vocab);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::new(&store);
        let enc = model.encoder.forward(&mut g, &seq.piece_ids);
        // adjacent spans: context part must be all zeros; verify through the
        // graph by reconstructing the context pool directly
        let between = seq.pieces_between((0, 0), (1, 1));
        assert!(between.is_empty());
        let ctx = g.max_over_groups(enc, &[between]);
        assert!(g.value(ctx).row(0).iter().all(|&v| v == 0.0));
        let logits = model.relation_logits(&mut g, enc, &seq, &[((0, 0), (1, 1))], 0.0, &mut rng);
        let dists = softmax_values(&mut g, logits);
        assert_eq!(dists[0].len(), 2);
    }

    #[test]
    fn relation_input_is_direction_sensitive() {
        let (store, model, vocab) = tiny_model();
        let seq = tokenize(&["mass", "in", "the", "lobe"], &vocab);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::new(&store);
        let enc = model.encoder.forward(&mut g, &seq.piece_ids);
        let ab = model.relation_logits(&mut g, enc, &seq, &[((0, 0), (3, 3))], 0.0, &mut rng);
        let ba = model.relation_logits(&mut g, enc, &seq, &[((3, 3), (0, 0))], 0.0, &mut rng);
        assert_ne!(g.value(ab), g.value(ba));
    }

    fn sentence_fixture(vocab: &Vocab) -> TrainSentence {
        let seq = tokenize(&["mass", "in", "the", "rib", "and", "lobe"], vocab);
        TrainSentence {
            pieces: seq,
            gold_spans: vec![((0, 0), 1), ((3, 3), 27), ((5, 5), 23)],
            gold_relations: vec![((0, 0), (3, 3), 1)],
        }
    }

    #[test]
    fn sampling_excludes_gold_and_caps_counts() {
        let (_, _, vocab) = tiny_model();
        let s = sentence_fixture(&vocab);
        let cfg = TrainConfig::spert(1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sampled = sample_training_batch(&s, &cfg, &mut rng);
        // positives first, then negatives with null label
        assert_eq!(&sampled.span_examples[..3], &s.gold_spans[..]);
        let negatives = &sampled.span_examples[3..];
        // pool = 51 candidates (6 tokens, width<=10 -> 21) minus 3 gold = 18
        assert_eq!(negatives.len(), 18.min(cfg.negative_entity_count));
        for &(span, label) in negatives {
            assert_eq!(label, NULL_LABEL);
            assert!(!s.gold_spans.iter().any(|&(g, _)| g == span));
        }
        // relation negatives: ordered gold pairs minus the linked one
        let rel_neg: Vec<_> = sampled.rel_examples[1..].to_vec();
        assert!(rel_neg.iter().all(|&(_, _, l)| l == NULL_LABEL));
        assert!(rel_neg.iter().any(|&(h, t, _)| h == (0, 0) && t == (5, 5)));
        assert!(!rel_neg.iter().any(|&(h, t, _)| h == (0, 0) && t == (3, 3)));
        assert_eq!(rel_neg.len(), 5); // 3*2 ordered pairs minus the gold link
    }

    #[test]
    fn sampling_exhausted_pool_gives_no_negatives() {
        let (_, _, vocab) = tiny_model();
        let seq = tokenize(&["mass"], &vocab);
        let s = TrainSentence {
            pieces: seq,
            gold_spans: vec![((0, 0), 1)],
            gold_relations: vec![],
        };
        let cfg = TrainConfig::spert(1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sampled = sample_training_batch(&s, &cfg, &mut rng);
        assert_eq!(sampled.span_examples.len(), 1);
        assert!(sampled.rel_examples.is_empty());
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let (_, _, vocab) = tiny_model();
        let s = sentence_fixture(&vocab);
        let cfg = TrainConfig::spert(1);
        let a = sample_training_batch(&s, &cfg, &mut ChaCha8Rng::seed_from_u64(4));
        let b = sample_training_batch(&s, &cfg, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(a, b);
    }

    #[test]
    fn joint_loss_perfect_predictions_is_zero() {
        let span_dists = vec![one_hot(58, 1), one_hot(58, 0)];
        let rel_dists = vec![one_hot(2, 1)];
        let loss = joint_loss(&span_dists, &[1, 0], &rel_dists, &[1]);
        assert!(loss.abs() < 1e-9);
    }

    #[test]
    fn joint_loss_uniform_spans_no_relations_is_ln_58() {
        let uniform = vec![vec![1.0 / 58.0; 58]; 4];
        let loss = joint_loss(&uniform, &[0, 5, 10, 57], &[], &[]);
        assert!((loss - (58f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn graph_loss_matches_scalar_oracle() {
        let (store, model, vocab) = tiny_model();
        let sentence = sentence_fixture(&vocab);
        let cfg = TrainConfig::spert(1);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let sampled = sample_training_batch(&sentence, &cfg, &mut rng);
        let mut g = Graph::new(&store);
        let batch = [(&sentence, &sampled)];
        let loss_node = batch_loss(&mut g, &model, &batch, 0.0, &mut rng);
        let graph_loss = g.value(loss_node).item();

        // independent recomputation from the softmax outputs
        let mut g2 = Graph::new(&store);
        let enc = model.encoder.forward(&mut g2, &sentence.pieces.piece_ids);
        let spans: Vec<(usize, usize)> = sampled.span_examples.iter().map(|&(s, _)| s).collect();
        let span_gold: Vec<usize> = sampled.span_examples.iter().map(|&(_, l)| l).collect();
        let logits = model.span_logits(&mut g2, enc, &sentence.pieces, &spans, 0.0, &mut rng);
        let span_dists = softmax_values(&mut g2, logits);
        let pairs: Vec<_> = sampled
            .rel_examples
            .iter()
            .map(|&(h, t, _)| (h, t))
            .collect();
        let rel_gold: Vec<usize> = sampled.rel_examples.iter().map(|&(_, _, l)| l).collect();
        let rlogits = model.relation_logits(&mut g2, enc, &sentence.pieces, &pairs, 0.0, &mut rng);
        let rel_dists = softmax_values(&mut g2, rlogits);
        let oracle = joint_loss(&span_dists, &span_gold, &rel_dists, &rel_gold);
        assert!(
            (graph_loss - oracle).abs() < 1e-6,
            "graph={graph_loss} oracle={oracle}"
        );
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let (mut store, model, vocab) = tiny_model();
        let sentence = sentence_fixture(&vocab);
        let cfg = TrainConfig::spert(1);
        let sampled = sample_training_batch(&sentence, &cfg, &mut ChaCha8Rng::seed_from_u64(7));

        let loss_of = |store: &ParamStore| {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut g = Graph::new(store);
            let batch = [(&sentence, &sampled)];
            let node = batch_loss(&mut g, &model, &batch, 0.0, &mut rng);
            g.value(node).item()
        };
        let grads = {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut g = Graph::new(&store);
            let batch = [(&sentence, &sampled)];
            let node = batch_loss(&mut g, &model, &batch, 0.0, &mut rng);
            g.backward(node)
        };
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-6;
        for name in [
            "spert.width",
            "spert.span.w",
            "spert.span.b",
            "spert.rel.w",
            "spert.rel.b",
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

    #[test]
    fn predict_empty_when_all_null() {
        let (mut store, model, vocab) = tiny_model();
        // bias the null logit up massively so every span argmaxes to null
        store.value_mut(model.span_b).set(0, 0, 50.0);
        let doc = Document::from_text("d", "mass in the rib.");
        let cfg = TrainConfig::spert(1);
        let (pred, diag) = predict_spert(&store, &model, &vocab, &cfg, &doc);
        assert!(pred.entities.is_empty());
        assert!(pred.relations.is_empty());
        assert_eq!(diag.skipped_overlapping_pairs, 0);
    }

    #[test]
    fn predict_pair_enumeration_is_capped_and_ordered() {
        // pure pair-arithmetic check: k spans -> min(k*(k-1), cap) pairs when
        // no spans overlap
        let spans: Vec<(usize, usize)> = (0..40).map(|i| (2 * i, 2 * i)).collect();
        let mut pairs = Vec::new();
        for i in 0..spans.len() {
            for j in 0..spans.len() {
                if i != j && !spans_overlap(spans[i], spans[j]) {
                    pairs.push((i, j));
                }
            }
        }
        assert_eq!(pairs.len(), 40 * 39);
        pairs.sort_by_key(|&(i, j)| (spans[i], spans[j]));
        pairs.truncate(1000);
        // 40 * 39 ordered pairs exceed the cap, so exactly the cap survive
        assert_eq!(pairs.len(), 1000);
    }

    #[test]
    fn predict_is_deterministic() {
        let (store, model, vocab) = tiny_model();
        let doc = Document::from_text("d", "mass in the right lower lobe.");
        let cfg = TrainConfig::spert(1);
        let a = predict_spert(&store, &model, &vocab, &cfg, &doc);
        let b = predict_spert(&store, &model, &vocab, &cfg, &doc);
        assert_eq!(a.0, b.0);
    }

    fn one_hot(n: usize, at: usize) -> Vec<f64> {
        let mut v = vec![0.0; n];
        v[at] = 1.0;
        v
    }
}
