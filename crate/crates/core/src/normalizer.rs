//! Normalization-only modes: predict the anatomy subtype of a gold anatomy
//! phrase, either from the phrase alone or with the phrase contextualized in
//! its sentence. Both reuse the span classifier; the null and Finding
//! outputs are masked to negative infinity so the argmax is always one of
//! the 56 subtypes.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::encoder::{tokenize, TransformerEncoder, Vocab, WordPieceSequence};
use crate::graph::{Graph, NodeId};
use crate::params::{ParamId, ParamStore};
use crate::schema::LabelSchema;
use crate::spanmodel::{argmax, span_head_logits, EpochLog, ModelConfig, TrainConfig, TrainError};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormContext {
    /// The anatomy phrase alone is the encoder input.
    Phrase,
    /// The full sentence is encoded and the gold span classified inside it.
    Sentence,
}

impl NormContext {
    pub fn name(&self) -> &'static str {
        match self {
            NormContext::Phrase => "phrase",
            NormContext::Sentence => "sentence",
        }
    }
}

/// Span classifier over the shared encoder, trained on gold anatomy phrases.
pub struct NormModel {
    pub encoder: TransformerEncoder,
    pub width_table: ParamId,
    pub span_w: ParamId,
    pub span_b: ParamId,
    pub max_width: usize,
    pub context: NormContext,
    n_span_labels: usize,
}

impl NormModel {
    pub fn new(
        store: &mut ParamStore,
        vocab_size: usize,
        schema: &LabelSchema,
        model_cfg: &ModelConfig,
        max_width: usize,
        context: NormContext,
        rng: &mut ChaCha8Rng,
    ) -> NormModel {
        let encoder = TransformerEncoder::new(store, vocab_size, model_cfg.encoder_config(), rng);
        let d = model_cfg.d_model;
        let wd = model_cfg.width_dim;
        let width_table = store.register_normal("norm.width", max_width, wd, rng);
        let span_w = store.register_normal("norm.span.w", d + wd + d, schema.n_span_labels(), rng);
        let span_b = store.register_zeros("norm.span.b", 1, schema.n_span_labels());
        NormModel {
            encoder,
            width_table,
            span_w,
            span_b,
            max_width,
            context,
            n_span_labels: schema.n_span_labels(),
        }
    }

    /// Mask row that pins the null and Finding logits to -inf.
    fn subtype_mask(&self, g: &mut Graph) -> NodeId {
        let mut mask = vec![0.0; self.n_span_labels];
        mask[0] = -1e30;
        mask[1] = -1e30;
        g.input(Matrix::from_vec(1, self.n_span_labels, mask))
    }

    /// Masked span logits for gold spans in one encoded sentence.
    pub fn masked_logits(
        &self,
        g: &mut Graph,
        enc: NodeId,
        pieces: &WordPieceSequence,
        spans: &[(usize, usize)],
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> NodeId {
        let logits = span_head_logits(
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
        );
        let mask = self.subtype_mask(g);
        g.add_bias_row(logits, mask)
    }
}

/// Predict the subtype of a phrase given alone; phrases longer than the
/// width table clamp to the widest bucket.
pub fn normalize_phrase(
    store: &ParamStore,
    model: &NormModel,
    vocab: &Vocab,
    phrase_tokens: &[&str],
) -> usize {
    assert!(!phrase_tokens.is_empty(), "phrase must be non-empty");
    let (pieces, _) = model.encoder.fit_length(&tokenize(phrase_tokens, vocab));
    let span = (0, pieces.n_tokens() - 1);
    classify_span(store, model, &pieces, span)
}

/// Predict the subtype of a gold span inside its full sentence.
pub fn normalize_in_context(
    store: &ParamStore,
    model: &NormModel,
    vocab: &Vocab,
    sentence_tokens: &[&str],
    span: (usize, usize),
) -> usize {
    let (pieces, _) = model.encoder.fit_length(&tokenize(sentence_tokens, vocab));
    let span = (span.0, span.1.min(pieces.n_tokens() - 1));
    classify_span(store, model, &pieces, span)
}

fn classify_span(
    store: &ParamStore,
    model: &NormModel,
    pieces: &WordPieceSequence,
    span: (usize, usize),
) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = Graph::new(store);
    let enc = model.encoder.forward(&mut g, &pieces.piece_ids);
    let logits = model.masked_logits(&mut g, enc, pieces, &[span], 0.0, &mut rng);
    argmax(g.value(logits).row(0))
}

/// One gold anatomy phrase with its prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NormPrediction {
    pub doc_id: String,
    pub sentence_index: usize,
    pub span: (usize, usize),
    pub phrase: String,
    pub gold: usize,
    pub predicted: usize,
}

/// Run the model over every gold anatomy phrase in `docs`.
pub fn predict_all(
    store: &ParamStore,
    model: &NormModel,
    vocab: &Vocab,
    schema: &LabelSchema,
    docs: &[Document],
) -> Vec<NormPrediction> {
    let mut out = Vec::new();
    for doc in docs {
        for e in &doc.entities {
            if !schema.is_subtype(e.label) {
                continue;
            }
            let sentence_tokens = doc.sentence_tokens(e.sentence_index);
            let predicted = match model.context {
                NormContext::Phrase => {
                    let phrase: Vec<&str> = sentence_tokens[e.span.0..=e.span.1].to_vec();
                    normalize_phrase(store, model, vocab, &phrase)
                }
                NormContext::Sentence => {
                    normalize_in_context(store, model, vocab, &sentence_tokens, e.span)
                }
            };
            out.push(NormPrediction {
                doc_id: doc.id.clone(),
                sentence_index: e.sentence_index,
                span: e.span,
                phrase: doc.entity_surface(e).to_string(),
                gold: e.label,
                predicted,
            });
        }
    }
    out
}

/// Accuracy over predictions; with one prediction per gold phrase this
/// equals micro-averaged subtype F1, which `micro_f1` computes the long way.
pub fn accuracy(preds: &[NormPrediction]) -> f64 {
    if preds.is_empty() {
        return 0.0;
    }
    preds.iter().filter(|p| p.gold == p.predicted).count() as f64 / preds.len() as f64
}

/// Micro-averaged subtype F1 from per-label tp/fp/fn counts.
pub fn micro_f1(preds: &[NormPrediction], schema: &LabelSchema) -> f64 {
    let mut counts = vec![(0usize, 0usize, 0usize); schema.n_span_labels()];
    for p in preds {
        if p.gold == p.predicted {
            counts[p.gold].0 += 1;
        } else {
            counts[p.predicted].1 += 1;
            counts[p.gold].2 += 1;
        }
    }
    let subtype_counts: Vec<(usize, usize, usize)> =
        schema.subtype_indices().map(|l| counts[l]).collect();
    crate::eval::micro_average(&subtype_counts).f1
}

/// A training example: input pieces plus the spans to classify (the whole
/// phrase in phrase mode, each gold span in sentence mode).
#[derive(Debug, Clone)]
struct NormExample {
    pieces: WordPieceSequence,
    spans: Vec<((usize, usize), usize)>,
}

pub struct TrainedNorm {
    pub store: ParamStore,
    pub model: NormModel,
    pub vocab: Vocab,
    pub log: Vec<EpochLog>,
}

pub fn train_norm(
    train_docs: &[Document],
    dev_docs: &[Document],
    schema: &LabelSchema,
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    context: NormContext,
) -> Result<TrainedNorm, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let vocab = crate::encoder::build_vocab(train_docs, model_cfg.vocab_max, schema)?;
    let mut store = ParamStore::new();
    let model = NormModel::new(
        &mut store,
        vocab.len(),
        schema,
        model_cfg,
        cfg.max_span_width,
        context,
        &mut rng,
    );

    let mut examples: Vec<NormExample> = Vec::new();
    for doc in train_docs {
        match context {
            NormContext::Phrase => {
                for e in &doc.entities {
                    if !schema.is_subtype(e.label) {
                        continue;
                    }
                    let sentence_tokens = doc.sentence_tokens(e.sentence_index);
                    let phrase: Vec<&str> = sentence_tokens[e.span.0..=e.span.1].to_vec();
                    let (pieces, _) = model.encoder.fit_length(&tokenize(&phrase, &vocab));
                    let span = (0, pieces.n_tokens() - 1);
                    examples.push(NormExample {
                        pieces,
                        spans: vec![(span, e.label)],
                    });
                }
            }
            NormContext::Sentence => {
                for s in 0..doc.sentences.len() {
                    let tokens = doc.sentence_tokens(s);
                    if tokens.is_empty() {
                        continue;
                    }
                    let (pieces, _) = model.encoder.fit_length(&tokenize(&tokens, &vocab));
                    let n_tokens = pieces.n_tokens();
                    let spans: Vec<((usize, usize), usize)> = doc
                        .entities
                        .iter()
                        .filter(|e| {
                            e.sentence_index == s
                                && schema.is_subtype(e.label)
                                && e.span.1 < n_tokens
                        })
                        .map(|e| (e.span, e.label))
                        .collect();
                    if !spans.is_empty() {
                        examples.push(NormExample { pieces, spans });
                    }
                }
            }
        }
    }
    if examples.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }

    let steps_per_epoch = examples.len().div_ceil(cfg.batch_size);
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
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut loss_n = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let mut g = Graph::new(&store);
            let mut logit_nodes = Vec::new();
            let mut targets = Vec::new();
            for &i in chunk {
                let ex = &examples[i];
                let enc = model.encoder.forward(&mut g, &ex.pieces.piece_ids);
                let spans: Vec<(usize, usize)> = ex.spans.iter().map(|&(s, _)| s).collect();
                logit_nodes.push(model.masked_logits(
                    &mut g,
                    enc,
                    &ex.pieces,
                    &spans,
                    cfg.dropout,
                    &mut rng,
                ));
                targets.extend(ex.spans.iter().map(|&(_, l)| l));
            }
            let logits = g.concat_rows(&logit_nodes);
            let loss = g.cross_entropy_mean(logits, targets);
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
        let dev_acc = if dev_docs.is_empty() {
            0.0
        } else {
            accuracy(&predict_all(&store, &model, &vocab, schema, dev_docs))
        };
        log.push(EpochLog {
            epoch,
            mean_loss: loss_sum / loss_n.max(1) as f64,
            dev_finding_f1: 0.0,
            dev_micro_subtype_f1: dev_acc,
            dev_relation_f1: 0.0,
        });
    }
    Ok(TrainedNorm {
        store,
        model,
        vocab,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Document;
    use crate::encoder::build_vocab;

    fn schema() -> LabelSchema {
        LabelSchema::full()
    }

    fn fixture() -> (ParamStore, NormModel, Vocab) {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut store = ParamStore::new();
        let docs = vec![Document::from_text(
            "a",
            "atelectasis of the right lower lobe. fracture of the rib.",
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
        let model = NormModel::new(
            &mut store,
            vocab.len(),
            &schema(),
            &model_cfg,
            10,
            NormContext::Phrase,
            &mut rng,
        );
        (store, model, vocab)
    }

    #[test]
    fn output_is_always_a_subtype() {
        let (store, model, vocab) = fixture();
        // random untrained weights: the masking alone must keep the argmax
        // inside the subtype range
        for phrase in [vec!["right", "lower", "lobe"], vec!["rib"], vec!["of"]] {
            let label = normalize_phrase(&store, &model, &vocab, &phrase);
            assert!(schema().is_subtype(label), "label {label} not a subtype");
        }
    }

    #[test]
    fn degenerate_context_equals_phrase_mode() {
        let (store, model, vocab) = fixture();
        let phrase = ["right", "lower", "lobe"];
        let a = normalize_phrase(&store, &model, &vocab, &phrase);
        let b = normalize_in_context(&store, &model, &vocab, &phrase, (0, 2));
        assert_eq!(a, b);
    }

    #[test]
    fn over_long_phrase_clamps_width_bucket() {
        let (store, model, vocab) = fixture();
        let long: Vec<&str> = std::iter::repeat_n("rib", 14).collect();
        let label = normalize_phrase(&store, &model, &vocab, &long);
        assert!(schema().is_subtype(label));
    }

    #[test]
    fn micro_f1_equals_accuracy() {
        let lung = schema().span_label_index("Lung").unwrap();
        let msk = schema().span_label_index("MSK").unwrap();
        let mk = |gold: usize, predicted: usize| NormPrediction {
            doc_id: "d".into(),
            sentence_index: 0,
            span: (0, 0),
            phrase: "x".into(),
            gold,
            predicted,
        };
        let preds = vec![mk(lung, lung), mk(lung, msk), mk(msk, msk), mk(msk, msk)];
        let acc = accuracy(&preds);
        let f1 = micro_f1(&preds, &schema());
        assert!((acc - 0.75).abs() < 1e-12);
        assert!((acc - f1).abs() < 1e-12);
    }
}
