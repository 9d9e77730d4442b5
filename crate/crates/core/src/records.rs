//! Artifact formats: prediction record files, normalization record files,
//! report rendering, and the provenance header every artifact starts with.
//!
//! Prediction files are line-delimited and tab-separated. Entity records:
//! `<doc>\tE\t<id>\t<sentence>\t<start>\t<end>\t<label>\t<surface>\t<system>`
//! and relation records:
//! `<doc>\tR\t<id>\t<head_id>\t<tail_id>\t<label>\t<system>`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Document, Entity, Relation};
use crate::eval::{DocPrediction, EvalReport, Prf};
use crate::normalizer::NormPrediction;
use crate::schema::LabelSchema;

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("line {0}: {1}")]
    Bad(usize, String),
    #[error("unknown system `{0}`")]
    UnknownSystem(String),
}

/// Which trained system produced an artifact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum System {
    Spert,
    BertMulti,
    NormPhrase,
    NormSentence,
}

impl System {
    pub fn name(&self) -> &'static str {
        match self {
            System::Spert => "spert",
            System::BertMulti => "bert-multi",
            System::NormPhrase => "norm-phrase",
            System::NormSentence => "norm-sentence",
        }
    }

    pub fn parse(s: &str) -> Result<System, RecordError> {
        match s {
            "spert" => Ok(System::Spert),
            "bert-multi" => Ok(System::BertMulti),
            "norm-phrase" => Ok(System::NormPhrase),
            "norm-sentence" => Ok(System::NormSentence),
            other => Err(RecordError::UnknownSystem(other.to_string())),
        }
    }
}

/// Provenance header written at the top of every artifact file as `#`
/// comment lines: tool version, seed, config digest, input digests.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArtifactHeader {
    pub tool_version: String,
    pub seed: u64,
    pub config_digest: String,
    pub input_digests: BTreeMap<String, String>,
    pub extra: BTreeMap<String, String>,
}

impl ArtifactHeader {
    pub fn new(seed: u64, config_digest: &str) -> ArtifactHeader {
        ArtifactHeader {
            tool_version: crate::VERSION.to_string(),
            seed,
            config_digest: config_digest.to_string(),
            input_digests: BTreeMap::new(),
            extra: BTreeMap::new(),
        }
    }

    pub fn with_input(mut self, name: &str, digest: &str) -> ArtifactHeader {
        self.input_digests
            .insert(name.to_string(), digest.to_string());
        self
    }

    pub fn with_extra(mut self, key: &str, value: &str) -> ArtifactHeader {
        self.extra.insert(key.to_string(), value.to_string());
        self
    }

    pub fn render(&self) -> String {
        let mut out = format!(
            "# radspan {} seed={} config_digest={}\n",
            self.tool_version, self.seed, self.config_digest
        );
        for (name, digest) in &self.input_digests {
            let _ = writeln!(out, "# input {name}={digest}");
        }
        for (key, value) in &self.extra {
            let _ = writeln!(out, "# {key}={value}");
        }
        out
    }
}

/// Serialize predictions, one entity/relation record per line.
pub fn write_predictions(
    header: &ArtifactHeader,
    predictions: &[DocPrediction],
    gold_docs: &[Document],
    schema: &LabelSchema,
    system: System,
) -> String {
    let docs: BTreeMap<&str, &Document> = gold_docs.iter().map(|d| (d.id.as_str(), d)).collect();
    let mut out = header.render();
    for pred in predictions {
        for (ei, e) in pred.entities.iter().enumerate() {
            let surface = docs
                .get(pred.doc_id.as_str())
                .map(|d| surface_of(d, e))
                .unwrap_or_default();
            let _ = writeln!(
                out,
                "{}\tE\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                pred.doc_id,
                ei,
                e.sentence_index,
                e.span.0,
                e.span.1,
                schema.span_label_name(e.label),
                surface,
                system.name()
            );
        }
        for (ri, r) in pred.relations.iter().enumerate() {
            let _ = writeln!(
                out,
                "{}\tR\t{}\t{}\t{}\t{}\t{}",
                pred.doc_id,
                ri,
                r.head,
                r.tail,
                schema.relation_label_name(r.label),
                system.name()
            );
        }
    }
    out
}

fn surface_of(doc: &Document, e: &Entity) -> String {
    if e.sentence_index >= doc.sentences.len() {
        return String::new();
    }
    let sent = &doc.sentences[e.sentence_index];
    if e.span.1 >= sent.tokens.len() {
        return String::new();
    }
    doc.entity_surface(e).to_string()
}

/// Parse a prediction record file back into per-document predictions.
pub fn parse_predictions(
    content: &str,
    schema: &LabelSchema,
) -> Result<Vec<DocPrediction>, RecordError> {
    let mut by_doc: BTreeMap<String, DocPrediction> = BTreeMap::new();
    // relation records reference entity ids; collect then resolve
    let mut entity_ids: BTreeMap<(String, usize), usize> = BTreeMap::new();
    let mut relations: Vec<(String, usize, usize, usize, usize)> = Vec::new();
    for (no, raw) in content.lines().enumerate() {
        let line = raw.trim_end();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let bad = |msg: &str| RecordError::Bad(no + 1, msg.to_string());
        if fields.len() < 2 {
            return Err(bad("too few fields"));
        }
        let doc_id = fields[0].to_string();
        match fields[1] {
            "E" => {
                if fields.len() < 9 {
                    return Err(bad("entity record needs 9 fields"));
                }
                let id: usize = fields[2].parse().map_err(|_| bad("bad entity id"))?;
                let sentence_index: usize =
                    fields[3].parse().map_err(|_| bad("bad sentence index"))?;
                let start: usize = fields[4].parse().map_err(|_| bad("bad span start"))?;
                let end: usize = fields[5].parse().map_err(|_| bad("bad span end"))?;
                let label = schema
                    .span_label_index(fields[6])
                    .ok_or_else(|| bad(&format!("unknown label `{}`", fields[6])))?;
                let entry = by_doc
                    .entry(doc_id.clone())
                    .or_insert_with(|| DocPrediction {
                        doc_id: doc_id.clone(),
                        entities: Vec::new(),
                        relations: Vec::new(),
                    });
                entity_ids.insert((doc_id, id), entry.entities.len());
                entry.entities.push(Entity {
                    sentence_index,
                    span: (start, end),
                    label,
                });
            }
            "R" => {
                if fields.len() < 7 {
                    return Err(bad("relation record needs 7 fields"));
                }
                let id: usize = fields[2].parse().map_err(|_| bad("bad relation id"))?;
                let head: usize = fields[3].parse().map_err(|_| bad("bad head id"))?;
                let tail: usize = fields[4].parse().map_err(|_| bad("bad tail id"))?;
                let label = schema
                    .relation_label_index(fields[5])
                    .ok_or_else(|| bad(&format!("unknown relation label `{}`", fields[5])))?;
                relations.push((doc_id, id, head, tail, label));
            }
            other => return Err(bad(&format!("unknown record type `{other}`"))),
        }
    }
    for (doc_id, id, head, tail, label) in relations {
        let h = *entity_ids
            .get(&(doc_id.clone(), head))
            .ok_or_else(|| RecordError::Bad(0, format!("relation {doc_id}/{id}: missing head")))?;
        let t = *entity_ids
            .get(&(doc_id.clone(), tail))
            .ok_or_else(|| RecordError::Bad(0, format!("relation {doc_id}/{id}: missing tail")))?;
        let entry = by_doc
            .get_mut(&doc_id)
            .expect("doc exists for its entities");
        let rel = Relation {
            head: h,
            label,
            tail: t,
        };
        if !entry.relations.contains(&rel) {
            entry.relations.push(rel);
        }
    }
    Ok(by_doc.into_values().collect())
}

/// Normalization records: one line per gold anatomy phrase.
pub fn write_norm_records(
    header: &ArtifactHeader,
    preds: &[NormPrediction],
    schema: &LabelSchema,
    system: System,
) -> String {
    let mut out = header.render();
    for p in preds {
        let _ = writeln!(
            out,
            "{}\tN\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            p.doc_id,
            p.sentence_index,
            p.span.0,
            p.span.1,
            p.phrase,
            schema.span_label_name(p.gold),
            schema.span_label_name(p.predicted),
            system.name()
        );
    }
    out
}

fn fmt_prf(label: &str, p: &Prf) -> String {
    format!(
        "{label:<22} P {:>6.4}  R {:>6.4}  F1 {:>6.4}   tp {:>5} fp {:>5} fn {:>5}\n",
        p.precision, p.recall, p.f1, p.tp, p.fp, p.fn_
    )
}

/// Human-readable rendering of a scoring report.
pub fn render_report_text(report: &EvalReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "== span labeling ({}) ==", report.criterion.name());
    out.push_str(&fmt_prf("Finding", &report.finding));
    out.push_str(&fmt_prf("Anatomy", &report.anatomy));
    out.push_str(&fmt_prf("Anatomy Subtype (micro)", &report.micro_subtype));
    for row in &report.per_subtype {
        if row.prf.tp + row.prf.fp + row.prf.fn_ > 0 {
            out.push_str(&fmt_prf(&format!("  {}", row.label), &row.prf));
        }
    }
    let _ = writeln!(out, "== relations ({}) ==", report.criterion.name());
    out.push_str(&fmt_prf("Finding-Anatomy", &report.relation_anatomy));
    out.push_str(&fmt_prf("Finding-Subtype", &report.relation_subtype));
    if !report.confusion.is_empty() {
        let _ = writeln!(out, "== confused subtype pairs (gold -> predicted) ==");
        for (gold, pred, n) in &report.confusion {
            let _ = writeln!(out, "{gold} -> {pred}: {n}");
        }
    }
    let _ = writeln!(out, "== recall by gold span length (all labels) ==");
    for bin in &report.length_recall_all {
        if bin.gold == 0 {
            continue;
        }
        let name = if bin.overflow {
            format!(">{}", bin.length - 1)
        } else {
            format!("{}", bin.length)
        };
        let _ = writeln!(
            out,
            "len {name:>3}: recall {:>6.4} ({}/{})",
            bin.recall, bin.matched, bin.gold
        );
    }
    out
}

/// Machine-readable report with the artifact header fields inlined.
pub fn render_report_json(
    header: &ArtifactHeader,
    report: &EvalReport,
) -> Result<String, serde_json::Error> {
    let value = serde_json::json!({
        "header": {
            "tool_version": header.tool_version,
            "seed": header.seed,
            "config_digest": header.config_digest,
            "input_digests": header.input_digests,
            "extra": header.extra,
        },
        "report": report,
    });
    serde_json::to_string_pretty(&value)
}
