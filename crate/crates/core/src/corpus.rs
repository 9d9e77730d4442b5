//! Corpus data model and standoff-annotation ingestion.
//!
//! Documents are stored as raw text plus sentence/token offsets; entities are
//! token spans inside one sentence and relations are directed
//! Finding-to-anatomy links between entities. Annotations arrive in a
//! two-file standoff form (`<id>.txt` + `<id>.ann`) with entity lines
//! `T<k>\t<Label> <start> <end>\t<surface>` and relation lines
//! `R<k>\t<Label> Arg1:T<i> Arg2:T<j>`.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::schema::{LabelSchema, FINDING_LABEL, NULL_LABEL};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("{doc}: annotation line {line}: {msg}")]
    BadAnnotation {
        doc: String,
        line: usize,
        msg: String,
    },
    #[error("{doc}: entity T{id}: unknown span label `{label}`")]
    UnknownLabel {
        doc: String,
        id: String,
        label: String,
    },
    #[error("{doc}: entity T{id}: span label may not be null")]
    NullEntityLabel { doc: String, id: String },
    #[error("{doc}: entity T{id}: offsets {start}..{end} invalid for text of length {len}")]
    OffsetsOutOfRange {
        doc: String,
        id: String,
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("{doc}: entity T{id}: surface `{expected}` does not match text `{actual}`")]
    SurfaceMismatch {
        doc: String,
        id: String,
        expected: String,
        actual: String,
    },
    #[error("{doc}: entity T{id}: span does not lie within a single sentence")]
    CrossSentence { doc: String, id: String },
    #[error("character span overlaps no token")]
    NoTokenOverlap,
    #[error("{doc}: relation R{id}: references missing entity T{arg}")]
    MissingEntity {
        doc: String,
        id: String,
        arg: String,
    },
    #[error("{doc}: relation R{id}: head entity must be a Finding")]
    HeadNotFinding { doc: String, id: String },
    #[error("{doc}: relation R{id}: tail entity must be an anatomy subtype")]
    TailNotSubtype { doc: String, id: String },
    #[error("{doc}: relation R{id}: head and tail are the same entity")]
    SelfRelation { doc: String, id: String },
    #[error("{doc}: relation R{id}: duplicate relation triple")]
    DuplicateRelation { doc: String, id: String },
    #[error("split ratios must be non-negative and sum to 1 (got {0:?})")]
    BadRatios((f64, f64, f64)),
    #[error("{docs} documents cannot fill {partitions} non-empty partitions")]
    TooFewDocuments { docs: usize, partitions: usize },
    #[error("{0}: missing companion file {1}")]
    MissingCompanion(String, String),
}

/// A sentence as character offsets into the document text plus token ranges.
/// All character ranges are end-exclusive; token ranges are absolute within
/// the document text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence {
    pub char_start: usize,
    pub char_end: usize,
    pub tokens: Vec<(usize, usize)>,
}

impl Sentence {
    pub fn token_count(&self) -> usize {
        self.tokens.len()
    }
}

/// A labeled token span: `span` is (token_start, token_end_inclusive) within
/// the sentence at `sentence_index`, `label` indexes the schema's span labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Entity {
    pub sentence_index: usize,
    pub span: (usize, usize),
    pub label: usize,
}

impl Entity {
    pub fn width(&self) -> usize {
        self.span.1 - self.span.0 + 1
    }
}

/// A directed relation between entities, by index into a document's entity
/// list. The head is always a Finding and the tail an anatomy subtype.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Relation {
    pub head: usize,
    pub label: usize,
    pub tail: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    pub id: String,
    pub text: String,
    pub sentences: Vec<Sentence>,
    pub entities: Vec<Entity>,
    pub relations: Vec<Relation>,
}

impl Document {
    /// Segment `text` and return a document with no annotations.
    pub fn from_text(id: &str, text: &str) -> Document {
        Document {
            id: id.to_string(),
            text: text.to_string(),
            sentences: segment(text),
            entities: Vec::new(),
            relations: Vec::new(),
        }
    }

    /// The surface string of an entity, covering all its tokens.
    pub fn entity_surface(&self, entity: &Entity) -> &str {
        let sent = &self.sentences[entity.sentence_index];
        let start = sent.tokens[entity.span.0].0;
        let end = sent.tokens[entity.span.1].1;
        &self.text[start..end]
    }

    /// Tokens of one sentence as surface strings.
    pub fn sentence_tokens(&self, sentence_index: usize) -> Vec<&str> {
        self.sentences[sentence_index]
            .tokens
            .iter()
            .map(|&(s, e)| &self.text[s..e])
            .collect()
    }

    pub fn token_count(&self) -> usize {
        self.sentences.iter().map(|s| s.tokens.len()).sum()
    }
}

/// Sentence segmentation: break on newlines and on `.` or `:` followed by
/// whitespace. Sentence ranges are trimmed to their first and last token
/// characters, so inter-sentence whitespace belongs to no sentence. All
/// offsets are byte positions into `text`.
pub fn segment(text: &str) -> Vec<Sentence> {
    let mut sentences = Vec::new();
    let mut start = 0usize;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        let next = chars.peek().map(|&(_, n)| n);
        let boundary =
            c == '\n' || ((c == '.' || c == ':') && next.is_some_and(|n| n.is_whitespace()));
        if boundary {
            let end = i + c.len_utf8();
            push_sentence(text, start, end, &mut sentences);
            start = end;
        }
    }
    push_sentence(text, start, text.len(), &mut sentences);
    sentences
}

fn push_sentence(text: &str, start: usize, end: usize, out: &mut Vec<Sentence>) {
    let tokens = tokenize_range(text, start, end);
    if let (Some(first), Some(last)) = (tokens.first(), tokens.last()) {
        out.push(Sentence {
            char_start: first.0,
            char_end: last.1,
            tokens,
        });
    }
}

/// Tokens are maximal runs of alphanumerics or single punctuation marks.
pub fn tokenize_range(text: &str, start: usize, end: usize) -> Vec<(usize, usize)> {
    let mut tokens = Vec::new();
    let s = &text[start..end];
    let mut run_start: Option<usize> = None;
    for (off, c) in s.char_indices() {
        let abs = start + off;
        if c.is_alphanumeric() {
            if run_start.is_none() {
                run_start = Some(abs);
            }
        } else {
            if let Some(rs) = run_start.take() {
                tokens.push((rs, abs));
            }
            if !c.is_whitespace() {
                tokens.push((abs, abs + c.len_utf8()));
            }
        }
    }
    if let Some(rs) = run_start {
        tokens.push((rs, end));
    }
    tokens
}

/// Smallest token range covering every token that overlaps the character
/// span. Errors when the span touches no token at all.
pub fn align_entity(
    sentence: &Sentence,
    char_span: (usize, usize),
) -> Result<(usize, usize), CorpusError> {
    let (s, e) = char_span;
    let mut first = None;
    let mut last = None;
    for (i, &(ts, te)) in sentence.tokens.iter().enumerate() {
        if ts < e && s < te {
            if first.is_none() {
                first = Some(i);
            }
            last = Some(i);
        }
    }
    match (first, last) {
        (Some(f), Some(l)) => Ok((f, l)),
        _ => Err(CorpusError::NoTokenOverlap),
    }
}

/// Parse one standoff pair into a validated document.
pub fn parse_standoff(
    id: &str,
    text_content: &str,
    ann_content: &str,
    schema: &LabelSchema,
) -> Result<Document, CorpusError> {
    let mut doc = Document::from_text(id, text_content);
    let mut entity_ids: BTreeMap<String, usize> = BTreeMap::new();
    let mut relation_lines: Vec<(usize, String, String)> = Vec::new();

    for (line_no, raw) in ann_content.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let bad = |msg: &str| CorpusError::BadAnnotation {
            doc: id.to_string(),
            line: line_no + 1,
            msg: msg.to_string(),
        };
        if let Some(rest) = line.strip_prefix('T') {
            let (tid, body) = rest
                .split_once('\t')
                .ok_or_else(|| bad("expected tab after id"))?;
            let (spec, surface) = body
                .split_once('\t')
                .ok_or_else(|| bad("expected `<Label> <start> <end>\\t<surface>`"))?;
            let mut parts = spec.rsplitn(3, ' ');
            let end: usize = parts
                .next()
                .and_then(|p| p.parse().ok())
                .ok_or_else(|| bad("bad end offset"))?;
            let start: usize = parts
                .next()
                .and_then(|p| p.parse().ok())
                .ok_or_else(|| bad("bad start offset"))?;
            let label_name = parts.next().ok_or_else(|| bad("missing label"))?;
            let entity = build_entity(&doc, id, tid, label_name, start, end, surface, schema)?;
            if entity_ids.contains_key(tid) {
                return Err(bad(&format!("duplicate entity id T{tid}")));
            }
            entity_ids.insert(tid.to_string(), doc.entities.len());
            doc.entities.push(entity);
        } else if let Some(rest) = line.strip_prefix('R') {
            let (rid, body) = rest
                .split_once('\t')
                .ok_or_else(|| bad("expected tab after id"))?;
            relation_lines.push((line_no + 1, rid.to_string(), body.to_string()));
        } else {
            return Err(bad("unsupported annotation line"));
        }
    }

    for (line_no, rid, body) in relation_lines {
        let relation = build_relation(&doc, id, line_no, &rid, &body, schema, &entity_ids)?;
        if doc.relations.contains(&relation) {
            return Err(CorpusError::DuplicateRelation {
                doc: id.to_string(),
                id: rid,
            });
        }
        doc.relations.push(relation);
    }
    Ok(doc)
}

#[allow(clippy::too_many_arguments)]
fn build_entity(
    doc: &Document,
    doc_id: &str,
    tid: &str,
    label_name: &str,
    start: usize,
    end: usize,
    surface: &str,
    schema: &LabelSchema,
) -> Result<Entity, CorpusError> {
    let label = schema
        .span_label_index(label_name)
        .ok_or_else(|| CorpusError::UnknownLabel {
            doc: doc_id.to_string(),
            id: tid.to_string(),
            label: label_name.to_string(),
        })?;
    if label == NULL_LABEL {
        return Err(CorpusError::NullEntityLabel {
            doc: doc_id.to_string(),
            id: tid.to_string(),
        });
    }
    if start >= end || end > doc.text.len() {
        return Err(CorpusError::OffsetsOutOfRange {
            doc: doc_id.to_string(),
            id: tid.to_string(),
            start,
            end,
            len: doc.text.len(),
        });
    }
    let actual = &doc.text[start..end];
    if actual != surface {
        return Err(CorpusError::SurfaceMismatch {
            doc: doc_id.to_string(),
            id: tid.to_string(),
            expected: surface.to_string(),
            actual: actual.to_string(),
        });
    }
    let sentence_index = doc
        .sentences
        .iter()
        .position(|s| s.char_start <= start && end <= s.char_end)
        .ok_or_else(|| CorpusError::CrossSentence {
            doc: doc_id.to_string(),
            id: tid.to_string(),
        })?;
    let span = align_entity(&doc.sentences[sentence_index], (start, end))?;
    Ok(Entity {
        sentence_index,
        span,
        label,
    })
}

fn build_relation(
    doc: &Document,
    doc_id: &str,
    line_no: usize,
    rid: &str,
    body: &str,
    schema: &LabelSchema,
    entity_ids: &BTreeMap<String, usize>,
) -> Result<Relation, CorpusError> {
    let bad = |msg: &str| CorpusError::BadAnnotation {
        doc: doc_id.to_string(),
        line: line_no,
        msg: msg.to_string(),
    };
    let mut parts = body.split_whitespace();
    let label_name = parts.next().ok_or_else(|| bad("missing relation label"))?;
    let arg1 = parts
        .next()
        .and_then(|p| p.strip_prefix("Arg1:T"))
        .ok_or_else(|| bad("expected Arg1:T<id>"))?;
    let arg2 = parts
        .next()
        .and_then(|p| p.strip_prefix("Arg2:T"))
        .ok_or_else(|| bad("expected Arg2:T<id>"))?;
    let label = schema
        .relation_label_index(label_name)
        .filter(|&l| l != NULL_LABEL)
        .ok_or_else(|| bad(&format!("unknown relation label `{label_name}`")))?;
    let head = *entity_ids
        .get(arg1)
        .ok_or_else(|| CorpusError::MissingEntity {
            doc: doc_id.to_string(),
            id: rid.to_string(),
            arg: arg1.to_string(),
        })?;
    let tail = *entity_ids
        .get(arg2)
        .ok_or_else(|| CorpusError::MissingEntity {
            doc: doc_id.to_string(),
            id: rid.to_string(),
            arg: arg2.to_string(),
        })?;
    if head == tail {
        return Err(CorpusError::SelfRelation {
            doc: doc_id.to_string(),
            id: rid.to_string(),
        });
    }
    if doc.entities[head].label != FINDING_LABEL {
        return Err(CorpusError::HeadNotFinding {
            doc: doc_id.to_string(),
            id: rid.to_string(),
        });
    }
    if !schema.is_subtype(doc.entities[tail].label) {
        return Err(CorpusError::TailNotSubtype {
            doc: doc_id.to_string(),
            id: rid.to_string(),
        });
    }
    Ok(Relation { head, label, tail })
}

/// Serialize annotations to the `.ann` format. Entity ids are `T1..` in
/// entity order, relations `R1..` in relation order.
pub fn serialize_ann(doc: &Document, schema: &LabelSchema) -> String {
    let mut out = String::new();
    for (i, e) in doc.entities.iter().enumerate() {
        let sent = &doc.sentences[e.sentence_index];
        let start = sent.tokens[e.span.0].0;
        let end = sent.tokens[e.span.1].1;
        out.push_str(&format!(
            "T{}\t{} {} {}\t{}\n",
            i + 1,
            schema.span_label_name(e.label),
            start,
            end,
            &doc.text[start..end]
        ));
    }
    for (i, r) in doc.relations.iter().enumerate() {
        out.push_str(&format!(
            "R{}\t{} Arg1:T{} Arg2:T{}\n",
            i + 1,
            schema.relation_label_name(r.label),
            r.head + 1,
            r.tail + 1
        ));
    }
    out
}

/// Write `<id>.txt` and `<id>.ann` for a document.
pub fn write_standoff(doc: &Document, dir: &Path, schema: &LabelSchema) -> Result<(), CorpusError> {
    fs::write(dir.join(format!("{}.txt", doc.id)), &doc.text)?;
    fs::write(
        dir.join(format!("{}.ann", doc.id)),
        serialize_ann(doc, schema),
    )?;
    Ok(())
}

/// Load every `.txt`/`.ann` pair in a directory, sorted by document id.
pub fn load_corpus_dir(dir: &Path, schema: &LabelSchema) -> Result<Vec<Document>, CorpusError> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "txt") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    let mut docs = Vec::with_capacity(ids.len());
    for id in ids {
        let txt = fs::read_to_string(dir.join(format!("{id}.txt")))?;
        let ann_path = dir.join(format!("{id}.ann"));
        if !ann_path.exists() {
            let missing = format!("{id}.ann");
            return Err(CorpusError::MissingCompanion(id, missing));
        }
        let ann = fs::read_to_string(ann_path)?;
        docs.push(parse_standoff(&id, &txt, &ann, schema)?);
    }
    Ok(docs)
}

/// (train, dev, test) document partitions.
pub type SplitDocs = (Vec<Document>, Vec<Document>, Vec<Document>);

/// Deterministic document-level split. `ratios` are (train, dev, test),
/// non-negative and summing to 1; dev and test sizes are `round(ratio * n)`
/// and the remainder goes to train.
pub fn split_corpus(
    docs: Vec<Document>,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<SplitDocs, CorpusError> {
    let (rt, rd, re) = ratios;
    if rt < 0.0 || rd < 0.0 || re < 0.0 || (rt + rd + re - 1.0).abs() > 1e-9 {
        return Err(CorpusError::BadRatios(ratios));
    }
    let non_zero = [rt, rd, re].iter().filter(|&&r| r > 0.0).count();
    if docs.len() < non_zero {
        return Err(CorpusError::TooFewDocuments {
            docs: docs.len(),
            partitions: non_zero,
        });
    }
    let n = docs.len();
    let n_dev = (rd * n as f64).round() as usize;
    let n_test = (re * n as f64).round() as usize;
    let n_train = n - n_dev - n_test;

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let mut slots: Vec<u8> = vec![0; n];
    for &i in order.iter().skip(n_train).take(n_dev) {
        slots[i] = 1;
    }
    for &i in order.iter().skip(n_train + n_dev) {
        slots[i] = 2;
    }
    let mut train = Vec::with_capacity(n_train);
    let mut dev = Vec::with_capacity(n_dev);
    let mut test = Vec::with_capacity(n_test);
    for (doc, slot) in docs.into_iter().zip(slots) {
        match slot {
            0 => train.push(doc),
            1 => dev.push(doc),
            _ => test.push(doc),
        }
    }
    Ok((train, dev, test))
}

/// Corpus summary counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusStats {
    pub documents: usize,
    pub sentences: usize,
    pub tokens: usize,
    pub entities_total: usize,
    /// Gold entity count per span label index.
    pub entities_per_label: Vec<usize>,
    pub relations: usize,
    /// Unique lowercased surface strings per span label index.
    pub unique_spans_per_label: Vec<usize>,
}

pub fn corpus_stats(docs: &[Document], schema: &LabelSchema) -> CorpusStats {
    let n_labels = schema.n_span_labels();
    let mut entities_per_label = vec![0usize; n_labels];
    let mut uniques: Vec<std::collections::BTreeSet<String>> = vec![Default::default(); n_labels];
    let mut sentences = 0;
    let mut tokens = 0;
    let mut relations = 0;
    for doc in docs {
        sentences += doc.sentences.len();
        tokens += doc.token_count();
        relations += doc.relations.len();
        for e in &doc.entities {
            entities_per_label[e.label] += 1;
            uniques[e.label].insert(doc.entity_surface(e).to_lowercase());
        }
    }
    CorpusStats {
        documents: docs.len(),
        sentences,
        tokens,
        entities_total: entities_per_label.iter().sum(),
        entities_per_label,
        relations,
        unique_spans_per_label: uniques.iter().map(|s| s.len()).collect(),
    }
}
