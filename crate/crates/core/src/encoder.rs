//! Word-piece tokenization over a corpus-derived vocabulary and a small
//! trainable self-attention encoder.
//!
//! The encoder maps a piece sequence (with `[CLS]` at position 0) to one
//! contextual embedding per piece; the `[CLS]` output doubles as the
//! sentence-level representation. Pre-norm blocks, learned positional
//! embeddings, GELU feed-forward.

use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::Document;
use crate::graph::{Graph, NodeId};
use crate::params::{ParamId, ParamStore};
use crate::schema::LabelSchema;
use crate::tensor::Matrix;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
const RESERVED: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];
const CONT_PREFIX: &str = "##";
/// Tokens longer than this are mapped straight to `[UNK]`.
const MAX_TOKEN_CHARS: usize = 64;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("piece sequence length {0} exceeds maximum {1}")]
    TooLong(usize, usize),
    #[error("vocab must reserve room for special pieces (max_size > 8)")]
    VocabTooSmall,
    #[error("bad vocab file: {0}")]
    BadVocab(String),
}

/// Word-piece vocabulary. Indices 0-3 are the reserved pieces, followed by
/// the baseline marker pieces (`@Finding`, one `@<subtype>` opener per
/// anatomy subtype, and the `$MARK$` closer), then content pieces.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    pieces: Vec<String>,
    index: HashMap<String, usize>,
    n_markers: usize,
}

impl Vocab {
    fn from_pieces(pieces: Vec<String>, n_markers: usize) -> Vocab {
        let index = pieces
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), i))
            .collect();
        Vocab {
            pieces,
            index,
            n_markers,
        }
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn piece(&self, id: usize) -> &str {
        &self.pieces[id]
    }

    pub fn lookup(&self, piece: &str) -> Option<usize> {
        self.index.get(piece).copied()
    }

    /// Id of the `@<label>` opener marker piece.
    pub fn marker_open(&self, label_name: &str) -> Option<usize> {
        self.lookup(&format!("@{label_name}"))
    }

    /// Id of the closer marker piece.
    pub fn marker_close(&self) -> Option<usize> {
        self.lookup("$MARK$")
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{}\n", self.n_markers);
        for p in &self.pieces {
            out.push_str(p);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Vocab, EncoderError> {
        let mut lines = text.lines();
        let n_markers: usize = lines
            .next()
            .and_then(|l| l.parse().ok())
            .ok_or_else(|| EncoderError::BadVocab("missing marker count".into()))?;
        let pieces: Vec<String> = lines.map(|l| l.to_string()).collect();
        if pieces.len() < RESERVED.len() + n_markers {
            return Err(EncoderError::BadVocab("truncated piece list".into()));
        }
        for (i, r) in RESERVED.iter().enumerate() {
            if pieces[i] != *r {
                return Err(EncoderError::BadVocab(format!(
                    "reserved piece {i} is `{}`, expected `{r}`",
                    pieces[i]
                )));
            }
        }
        Ok(Vocab::from_pieces(pieces, n_markers))
    }
}

/// Frequency-based vocabulary over lowercased whole tokens, with single
/// characters (and their continuation forms) always present as the
/// decomposition fallback. Deterministic: frequency descending, then
/// lexicographic.
pub fn build_vocab(
    corpus: &[Document],
    max_size: usize,
    schema: &LabelSchema,
) -> Result<Vocab, EncoderError> {
    if max_size <= 8 {
        return Err(EncoderError::VocabTooSmall);
    }
    let mut freq: HashMap<String, usize> = HashMap::new();
    let mut chars: std::collections::BTreeSet<char> = Default::default();
    for doc in corpus {
        for s in 0..doc.sentences.len() {
            for tok in doc.sentence_tokens(s) {
                let lower = tok.to_lowercase();
                chars.extend(lower.chars());
                *freq.entry(lower).or_default() += 1;
            }
        }
    }

    let mut pieces: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    // marker pieces: one opener per non-null span label, plus the closer
    pieces.push("@Finding".to_string());
    for idx in schema.subtype_indices() {
        pieces.push(format!("@{}", schema.span_label_name(idx)));
    }
    pieces.push("$MARK$".to_string());
    let n_markers = pieces.len() - RESERVED.len();

    for c in &chars {
        pieces.push(c.to_string());
        pieces.push(format!("{CONT_PREFIX}{c}"));
    }

    let mut by_freq: Vec<(&String, usize)> = freq.iter().map(|(t, &n)| (t, n)).collect();
    by_freq.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    for (tok, _) in by_freq {
        if pieces.len() >= max_size {
            break;
        }
        if tok.chars().count() > 1 && !pieces.contains(tok) {
            pieces.push(tok.clone());
        }
    }
    Ok(Vocab::from_pieces(pieces, n_markers))
}

/// A tokenized sentence with both directions of the token/piece alignment.
/// `piece_ids[0]` is always `[CLS]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordPieceSequence {
    pub piece_ids: Vec<usize>,
    /// Source token of each piece from position 1 on.
    pub token_of_piece: Vec<usize>,
    /// Inclusive (first_piece, last_piece) range per token.
    pub piece_range_of_token: Vec<(usize, usize)>,
}

impl WordPieceSequence {
    pub fn n_pieces(&self) -> usize {
        self.piece_ids.len()
    }

    pub fn n_tokens(&self) -> usize {
        self.piece_range_of_token.len()
    }

    /// Piece indices belonging to the inclusive token span.
    pub fn pieces_of_span(&self, token_start: usize, token_end: usize) -> Vec<usize> {
        let (first, _) = self.piece_range_of_token[token_start];
        let (_, last) = self.piece_range_of_token[token_end];
        (first..=last).collect()
    }

    /// Piece indices strictly between two token spans, in surface order
    /// regardless of which span comes first.
    pub fn pieces_between(&self, a: (usize, usize), b: (usize, usize)) -> Vec<usize> {
        let (earlier, later) = if a.0 <= b.0 { (a, b) } else { (b, a) };
        let after = self.piece_range_of_token[earlier.1].1 + 1;
        let before = self.piece_range_of_token[later.0].0;
        if after >= before {
            Vec::new()
        } else {
            (after..before).collect()
        }
    }

    /// Drop trailing whole tokens until at most `max_pieces` pieces remain.
    fn truncate_tokens(&mut self, max_pieces: usize) {
        while self.piece_ids.len() > max_pieces {
            let (first, last) = self
                .piece_range_of_token
                .pop()
                .expect("cannot truncate below [CLS]");
            let n = last - first + 1;
            self.piece_ids.truncate(self.piece_ids.len() - n);
            self.token_of_piece.truncate(self.token_of_piece.len() - n);
        }
    }
}

/// Lowercased longest-match-first word-piece tokenization of one sentence's
/// tokens, with `[CLS]` prepended.
pub fn tokenize(tokens: &[&str], vocab: &Vocab) -> WordPieceSequence {
    let mut piece_ids = vec![CLS];
    let mut token_of_piece = Vec::new();
    let mut piece_range_of_token = Vec::with_capacity(tokens.len());

    for (t, tok) in tokens.iter().enumerate() {
        let lower = tok.to_lowercase();
        let first = piece_ids.len();
        for id in split_token(&lower, vocab) {
            piece_ids.push(id);
            token_of_piece.push(t);
        }
        piece_range_of_token.push((first, piece_ids.len() - 1));
    }
    WordPieceSequence {
        piece_ids,
        token_of_piece,
        piece_range_of_token,
    }
}

fn split_token(lower: &str, vocab: &Vocab) -> Vec<usize> {
    if lower.chars().count() > MAX_TOKEN_CHARS {
        return vec![UNK];
    }
    if let Some(id) = vocab.lookup(lower) {
        return vec![id];
    }
    let chars: Vec<char> = lower.chars().collect();
    let mut out = Vec::new();
    let mut at = 0;
    while at < chars.len() {
        let mut len = chars.len() - at;
        let mut found = None;
        while len > 0 {
            let cand: String = chars[at..at + len].iter().collect();
            let key = if at == 0 {
                cand
            } else {
                format!("{CONT_PREFIX}{cand}")
            };
            if let Some(id) = vocab.lookup(&key) {
                found = Some((id, len));
                break;
            }
            len -= 1;
        }
        match found {
            Some((id, len)) => {
                out.push(id);
                at += len;
            }
            // unmatchable character: the whole token becomes [UNK]
            None => return vec![UNK],
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
}

impl Default for EncoderConfig {
    fn default() -> EncoderConfig {
        EncoderConfig {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            max_len: 128,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LengthPolicy {
    /// Error when a sequence exceeds the maximum length.
    Strict,
    /// Truncate at a token boundary and flag the output.
    Lenient,
}

struct LayerParams {
    ln1_gain: ParamId,
    ln1_bias: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_gain: ParamId,
    ln2_bias: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Trainable encoder parameters. Registration order is fixed so that
/// checkpoints can be rebuilt by name.
pub struct TransformerEncoder {
    pub config: EncoderConfig,
    tok_emb: ParamId,
    pos_emb: ParamId,
    layers: Vec<LayerParams>,
    final_gain: ParamId,
    final_bias: ParamId,
}

/// Per-piece contextual embeddings with the sentence-level vector first.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSentence {
    pub cls_embedding: Vec<f64>,
    pub piece_embeddings: Vec<Vec<f64>>,
    pub truncated: bool,
}

impl TransformerEncoder {
    pub fn new(
        store: &mut ParamStore,
        vocab_size: usize,
        config: EncoderConfig,
        rng: &mut ChaCha8Rng,
    ) -> TransformerEncoder {
        assert_eq!(config.d_model % config.n_heads, 0);
        let tok_emb = store.register_normal("enc.tok_emb", vocab_size, config.d_model, rng);
        let pos_emb = store.register_normal("enc.pos_emb", config.max_len, config.d_model, rng);
        let layers = (0..config.n_layers)
            .map(|l| {
                let d = config.d_model;
                LayerParams {
                    ln1_gain: store.register_ones(&format!("enc.l{l}.ln1.gain"), d),
                    ln1_bias: store.register_zeros(&format!("enc.l{l}.ln1.bias"), 1, d),
                    wq: store.register_normal(&format!("enc.l{l}.attn.wq"), d, d, rng),
                    bq: store.register_zeros(&format!("enc.l{l}.attn.bq"), 1, d),
                    wk: store.register_normal(&format!("enc.l{l}.attn.wk"), d, d, rng),
                    bk: store.register_zeros(&format!("enc.l{l}.attn.bk"), 1, d),
                    wv: store.register_normal(&format!("enc.l{l}.attn.wv"), d, d, rng),
                    bv: store.register_zeros(&format!("enc.l{l}.attn.bv"), 1, d),
                    wo: store.register_normal(&format!("enc.l{l}.attn.wo"), d, d, rng),
                    bo: store.register_zeros(&format!("enc.l{l}.attn.bo"), 1, d),
                    ln2_gain: store.register_ones(&format!("enc.l{l}.ln2.gain"), d),
                    ln2_bias: store.register_zeros(&format!("enc.l{l}.ln2.bias"), 1, d),
                    w1: store.register_normal(&format!("enc.l{l}.ffn.w1"), d, config.d_ff, rng),
                    b1: store.register_zeros(&format!("enc.l{l}.ffn.b1"), 1, config.d_ff),
                    w2: store.register_normal(&format!("enc.l{l}.ffn.w2"), config.d_ff, d, rng),
                    b2: store.register_zeros(&format!("enc.l{l}.ffn.b2"), 1, d),
                }
            })
            .collect();
        let final_gain = store.register_ones("enc.final.gain", config.d_model);
        let final_bias = store.register_zeros("enc.final.bias", 1, config.d_model);
        TransformerEncoder {
            config,
            tok_emb,
            pos_emb,
            layers,
            final_gain,
            final_bias,
        }
    }

    /// Forward pass inside an existing graph. Returns the `n_pieces x d`
    /// output; row 0 is the `[CLS]` embedding.
    pub fn forward(&self, g: &mut Graph, piece_ids: &[usize]) -> NodeId {
        let n = piece_ids.len();
        assert!(n >= 1 && n <= self.config.max_len, "sequence length {n}");
        let tok = g.param(self.tok_emb);
        let pos = g.param(self.pos_emb);
        let te = g.gather_rows(tok, piece_ids.to_vec());
        let pe = g.gather_rows(pos, (0..n).collect());
        let mut x = g.add(te, pe);

        let d = self.config.d_model;
        let dh = d / self.config.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        for layer in &self.layers {
            let gain = g.param(layer.ln1_gain);
            let bias = g.param(layer.ln1_bias);
            let h = g.layer_norm(x, gain, bias);
            let (wq, bq) = (g.param(layer.wq), g.param(layer.bq));
            let (wk, bk) = (g.param(layer.wk), g.param(layer.bk));
            let (wv, bv) = (g.param(layer.wv), g.param(layer.bv));
            let q = g.matmul(h, wq);
            let q = g.add_bias_row(q, bq);
            let k = g.matmul(h, wk);
            let k = g.add_bias_row(k, bk);
            let v = g.matmul(h, wv);
            let v = g.add_bias_row(v, bv);
            let mut heads = Vec::with_capacity(self.config.n_heads);
            for hd in 0..self.config.n_heads {
                let (s, e) = (hd * dh, (hd + 1) * dh);
                let qh = g.slice_cols(q, s, e);
                let kh = g.slice_cols(k, s, e);
                let vh = g.slice_cols(v, s, e);
                let scores = g.matmul_nt(qh, kh);
                let scores = g.scale(scores, scale);
                let attn = g.softmax_rows(scores);
                heads.push(g.matmul(attn, vh));
            }
            let merged = g.concat_cols(&heads);
            let wo = g.param(layer.wo);
            let bo = g.param(layer.bo);
            let proj = g.matmul(merged, wo);
            let proj = g.add_bias_row(proj, bo);
            x = g.add(x, proj);

            let gain2 = g.param(layer.ln2_gain);
            let bias2 = g.param(layer.ln2_bias);
            let h2 = g.layer_norm(x, gain2, bias2);
            let w1 = g.param(layer.w1);
            let b1 = g.param(layer.b1);
            let w2 = g.param(layer.w2);
            let b2 = g.param(layer.b2);
            let f = g.matmul(h2, w1);
            let f = g.add_bias_row(f, b1);
            let f = g.gelu(f);
            let f = g.matmul(f, w2);
            let f = g.add_bias_row(f, b2);
            x = g.add(x, f);
        }
        let fg = g.param(self.final_gain);
        let fb = g.param(self.final_bias);
        g.layer_norm(x, fg, fb)
    }

    /// Inference-facing encode: plain values, no gradient bookkeeping.
    pub fn encode(
        &self,
        store: &ParamStore,
        pieces: &WordPieceSequence,
        policy: LengthPolicy,
    ) -> Result<EncodedSentence, EncoderError> {
        let mut pieces = pieces.clone();
        let mut truncated = false;
        if pieces.n_pieces() > self.config.max_len {
            match policy {
                LengthPolicy::Strict => {
                    return Err(EncoderError::TooLong(
                        pieces.n_pieces(),
                        self.config.max_len,
                    ))
                }
                LengthPolicy::Lenient => {
                    pieces.truncate_tokens(self.config.max_len);
                    truncated = true;
                }
            }
        }
        let mut g = Graph::new(store);
        let out = self.forward(&mut g, &pieces.piece_ids);
        let m: &Matrix = g.value(out);
        Ok(EncodedSentence {
            cls_embedding: m.row(0).to_vec(),
            piece_embeddings: (1..m.rows()).map(|r| m.row(r).to_vec()).collect(),
            truncated,
        })
    }

    /// Clamp a piece sequence to the encoder's maximum length, flagging
    /// whether anything was dropped.
    pub fn fit_length(&self, pieces: &WordPieceSequence) -> (WordPieceSequence, bool) {
        if pieces.n_pieces() <= self.config.max_len {
            return (pieces.clone(), false);
        }
        let mut p = pieces.clone();
        p.truncate_tokens(self.config.max_len);
        (p, true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Document;
    use rand::{Rng, SeedableRng};

    fn schema() -> LabelSchema {
        LabelSchema::full()
    }

    fn small_corpus() -> Vec<Document> {
        vec![
            Document::from_text("a", "mass in the lung. lung mass stable."),
            Document::from_text("b", "no mass. clear lungs bilaterally."),
        ]
    }

    #[test]
    fn vocab_reserved_indices_fixed() {
        let v = build_vocab(&small_corpus(), 500, &schema()).unwrap();
        assert_eq!(v.piece(PAD), "[PAD]");
        assert_eq!(v.piece(UNK), "[UNK]");
        assert_eq!(v.piece(CLS), "[CLS]");
        assert_eq!(v.piece(SEP), "[SEP]");
        assert!(v.marker_open("Finding").is_some());
        assert!(v.marker_open("Lung").is_some());
        assert!(v.marker_close().is_some());
    }

    #[test]
    fn vocab_contains_frequent_whole_tokens() {
        let v = build_vocab(&small_corpus(), 500, &schema()).unwrap();
        assert!(v.lookup("mass").is_some());
        assert!(v.lookup("lung").is_some());
    }

    #[test]
    fn vocab_is_deterministic() {
        let a = build_vocab(&small_corpus(), 500, &schema()).unwrap();
        let b = build_vocab(&small_corpus(), 500, &schema()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn vocab_under_budget_keeps_all_tokens() {
        let v = build_vocab(&small_corpus(), 500, &schema()).unwrap();
        for tok in ["mass", "lung", "stable", "clear", "bilaterally"] {
            assert!(v.lookup(tok).is_some(), "missing {tok}");
        }
    }

    #[test]
    fn vocab_text_round_trip() {
        let v = build_vocab(&small_corpus(), 500, &schema()).unwrap();
        let again = Vocab::from_text(&v.to_text()).unwrap();
        assert_eq!(v, again);
    }

    #[test]
    fn unseen_token_decomposes_to_char_pieces() {
        let v = build_vocab(&small_corpus(), 500, &schema()).unwrap();
        let seq = tokenize(&["gas"], &v); // unseen word, seen chars
        assert!(seq.piece_ids.len() > 2, "expected char decomposition");
        assert!(seq.piece_ids[1..].iter().all(|&id| id != UNK));
        let seq = tokenize(&["Xÿz"], &v); // ÿ never seen
        assert_eq!(&seq.piece_ids[1..], &[UNK]);
    }

    #[test]
    fn tokenize_empty_sentence_is_just_cls() {
        let v = build_vocab(&small_corpus(), 500, &schema()).unwrap();
        let seq = tokenize(&[], &v);
        assert_eq!(seq.piece_ids, vec![CLS]);
        assert!(seq.piece_range_of_token.is_empty());
    }

    #[test]
    fn in_vocab_token_is_single_piece() {
        let v = build_vocab(&small_corpus(), 500, &schema()).unwrap();
        let seq = tokenize(&["Lung"], &v); // lowercased lookup
        assert_eq!(seq.piece_ids.len(), 2);
        assert_eq!(seq.token_of_piece, vec![0]);
        assert_eq!(seq.piece_range_of_token, vec![(1, 1)]);
    }

    #[test]
    fn multi_piece_token_alignment() {
        // "lung" is whole, "gas" decomposes to char pieces, "in" is whole:
        // ranges by hand: [(1,1),(2,4),(5,5)]
        let v = build_vocab(&small_corpus(), 500, &schema()).unwrap();
        let seq = tokenize(&["lung", "gas", "in"], &v);
        assert_eq!(seq.piece_range_of_token, vec![(1, 1), (2, 4), (5, 5)]);
        assert_eq!(seq.token_of_piece, vec![0, 1, 1, 1, 2]);
    }

    #[test]
    fn alignment_maps_are_mutually_consistent() {
        let v = build_vocab(&small_corpus(), 500, &schema()).unwrap();
        let seq = tokenize(&["the", "lungs", "are", "grossly", "clear"], &v);
        let mut covered = Vec::new();
        for (t, &(f, l)) in seq.piece_range_of_token.iter().enumerate() {
            for p in f..=l {
                covered.push(p);
                assert_eq!(seq.token_of_piece[p - 1], t);
            }
        }
        let expected: Vec<usize> = (1..seq.piece_ids.len()).collect();
        assert_eq!(covered, expected);
    }

    #[test]
    fn pieces_between_spans() {
        let v = build_vocab(&small_corpus(), 500, &schema()).unwrap();
        let seq = tokenize(&["mass", "in", "the", "lung"], &v);
        assert_eq!(seq.pieces_between((0, 0), (3, 3)), vec![2, 3]);
        assert_eq!(seq.pieces_between((3, 3), (0, 0)), vec![2, 3]);
        assert!(seq.pieces_between((0, 0), (1, 1)).is_empty());
    }

    fn encoder_fixture() -> (ParamStore, TransformerEncoder, Vocab) {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let vocab = build_vocab(&small_corpus(), 300, &schema()).unwrap();
        let cfg = EncoderConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 32,
            max_len: 32,
        };
        let enc = TransformerEncoder::new(&mut store, vocab.len(), cfg, &mut rng);
        (store, enc, vocab)
    }

    #[test]
    fn encode_shapes_and_finiteness() {
        let (store, enc, vocab) = encoder_fixture();
        let seq = tokenize(&["no", "mass", "in", "the", "lung"], &vocab);
        let out = enc.encode(&store, &seq, LengthPolicy::Strict).unwrap();
        assert_eq!(out.piece_embeddings.len(), seq.n_pieces() - 1);
        assert_eq!(out.cls_embedding.len(), 16);
        assert!(out.cls_embedding.iter().all(|v| v.is_finite()));
        assert!(!out.truncated);
    }

    #[test]
    fn encode_is_contextual() {
        let (store, enc, vocab) = encoder_fixture();
        let a = tokenize(&["mass", "in", "the", "lung"], &vocab);
        let b = tokenize(&["mass", "in", "the", "clear"], &vocab);
        let ea = enc.encode(&store, &a, LengthPolicy::Strict).unwrap();
        let eb = enc.encode(&store, &b, LengthPolicy::Strict).unwrap();
        // embedding of "mass" (position 1) differs because a distant token does
        assert_ne!(ea.piece_embeddings[0], eb.piece_embeddings[0]);
    }

    #[test]
    fn encode_deterministic() {
        let (store, enc, vocab) = encoder_fixture();
        let seq = tokenize(&["no", "mass"], &vocab);
        let a = enc.encode(&store, &seq, LengthPolicy::Strict).unwrap();
        let b = enc.encode(&store, &seq, LengthPolicy::Strict).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn too_long_strict_errors_lenient_truncates() {
        let (store, enc, vocab) = encoder_fixture();
        let tokens: Vec<&str> = std::iter::repeat_n("mass", 40).collect();
        let seq = tokenize(&tokens, &vocab);
        assert!(matches!(
            enc.encode(&store, &seq, LengthPolicy::Strict),
            Err(EncoderError::TooLong(41, 32))
        ));
        let out = enc.encode(&store, &seq, LengthPolicy::Lenient).unwrap();
        assert!(out.truncated);
        assert_eq!(out.piece_embeddings.len(), 31);
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let (mut store, enc, vocab) = encoder_fixture();
        let seq = tokenize(&["no", "mass", "in", "lung"], &vocab);
        let targets = vec![1usize; seq.n_pieces()];

        let loss_of = |store: &ParamStore| {
            let mut g = Graph::new(store);
            let out = enc.forward(&mut g, &seq.piece_ids);
            let loss = g.cross_entropy_mean(out, targets.clone());
            g.value(loss).item()
        };
        let grads = {
            let mut g = Graph::new(&store);
            let out = enc.forward(&mut g, &seq.piece_ids);
            let loss = g.cross_entropy_mean(out, targets.clone());
            g.backward(loss)
        };

        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let h = 1e-6;
        for pid in 0..store.len() {
            let id = crate::params::ParamId(pid);
            let (rows, cols) = store.value(id).shape();
            // sample a few coordinates per tensor
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
                assert!(
                    rel < 1e-4,
                    "param {pid} ({r},{c}): fd={fd} an={an} rel={rel}"
                );
            }
        }
    }
}
