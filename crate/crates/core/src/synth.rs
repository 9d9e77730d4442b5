//! Deterministic generator of radiology-like annotated documents.
//!
//! Sentences come from weighted templates with finding/anatomy slots.
//! Relations are wired per template. The default grammar deliberately
//! includes the phenomena the evaluation probes: findings linked to several
//! anatomies, negated findings with no relation, anatomy mentions that are
//! only annotated when connected to a finding, ambiguous anatomy surfaces
//! whose subtype is recoverable only from an in-sentence disambiguator word
//! (split 50/50 between their two subtypes), and gold spans of 11-12 tokens,
//! beyond the extractor's maximum span width.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{parse_standoff, Document};
use crate::schema::LabelSchema;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("template `{0}`: slot `{1}` cannot be filled")]
    Unsatisfiable(String, String),
    #[error("template `{0}`: relation references unknown slot `{1}`")]
    BadWiring(String, String),
    #[error("unknown subtype `{0}` in grammar")]
    UnknownSubtype(String),
    #[error("generated document failed validation: {0}")]
    Invalid(#[from] crate::corpus::CorpusError),
    #[error("ambiguous surface `{0}` lost its disambiguator in `{1}`")]
    MissingDisambiguator(String, String),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AnatomyEntry {
    pub surface: String,
    pub subtype: String,
    pub weight: f64,
}

/// An anatomy surface that maps to two or more subtypes; each option carries
/// the context word that licenses it. Occurrences alternate between the
/// options so every surface is split evenly.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AmbiguousEntry {
    pub surface: String,
    /// (subtype, disambiguator word)
    pub options: Vec<(String, String)>,
    pub weight: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TemplateEntry {
    /// Whitespace-separated tokens; `{slot}` tokens are filled from the
    /// lexicons. `.` and `,` attach to the preceding token in the text.
    pub pattern: String,
    pub weight: f64,
    /// (head slot, tail slot) pairs wired as has-relations.
    pub relations: Vec<(String, String)>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GrammarConfig {
    pub seed: u64,
    pub n_documents: usize,
    pub sentences_per_doc: (usize, usize),
    pub findings: Vec<(String, f64)>,
    /// Long finding surfaces as (surface, prefix token count). With
    /// probability `long_prefix_rate` the gold annotation covers only the
    /// prefix, mimicking the boundary inconsistency long spans show in real
    /// annotation.
    pub long_findings: Vec<(String, usize)>,
    pub long_prefix_rate: f64,
    pub anatomies: Vec<AnatomyEntry>,
    pub ambiguous: Vec<AmbiguousEntry>,
    pub templates: Vec<TemplateEntry>,
}

impl GrammarConfig {
    /// The default grammar: 12 finding surfaces, 14 anatomy surfaces over 6
    /// subtypes (2 of them ambiguous), 8 templates, 400 documents.
    pub fn default_config(seed: u64) -> GrammarConfig {
        let findings = [
            ("atelectasis", 2.0),
            ("compressive atelectasis", 1.2),
            ("severe compressive atelectasis", 0.8),
            ("mass", 2.0),
            ("large mass", 1.0),
            ("mass with septations", 0.8),
            ("fracture", 1.5),
            ("effusion", 1.5),
            ("loculated small effusion", 0.8),
            ("consolidation", 1.5),
            ("consolidation with volume loss", 0.8),
            ("scattered ground glass opacity", 0.8),
        ]
        .into_iter()
        .map(|(s, w)| (s.to_string(), w))
        .collect();
        // long surfaces embed an exact short gold surface as a prefix, the
        // same annotation-inconsistency pressure long spans carry in real
        // corpora; half the occurrences annotate only the prefix
        let long_findings = vec![
            // 11 tokens; prefix "consolidation with volume loss" is gold elsewhere
            (
                "consolidation with volume loss in the dependent portions of both lungs"
                    .to_string(),
                4,
            ),
            // 12 tokens; prefix "large mass with septations" overlaps two short surfaces
            (
                "large mass with septations extending into the adjacent deep soft tissue planes"
                    .to_string(),
                4,
            ),
        ];
        let anatomies = [
            ("right lower lobe", "Lung", 3.0),
            ("left upper lobe", "Lung", 2.0),
            ("lingula", "Lung", 1.0),
            ("rib", "MSK", 3.0),
            ("thoracic spine", "MSK", 2.5),
            ("right femur", "MSK", 1.0),
            ("main pulmonary artery", "Cardio", 2.5),
            ("thoracic aorta", "Cardio", 2.5),
            ("right atrium", "Cardio", 1.5),
            ("upper abdomen", "Abdomen", 1.0),
            ("periumbilical region", "Abdomen", 0.7),
            ("endometrial cavity", "Uterus", 0.5),
        ]
        .into_iter()
        .map(|(s, t, w)| AnatomyEntry {
            surface: s.to_string(),
            subtype: t.to_string(),
            weight: w,
        })
        .collect();
        let ambiguous = vec![
            AmbiguousEntry {
                surface: "cervical region".to_string(),
                options: vec![
                    ("Neck".to_string(), "neck".to_string()),
                    ("Uterus".to_string(), "pelvis".to_string()),
                ],
                weight: 1.8,
            },
            AmbiguousEntry {
                surface: "lateral wall".to_string(),
                options: vec![
                    ("Cardio".to_string(), "precordium".to_string()),
                    ("MSK".to_string(), "musculature".to_string()),
                ],
                weight: 1.8,
            },
        ];
        let t = |pattern: &str, weight: f64, relations: &[(&str, &str)]| TemplateEntry {
            pattern: pattern.to_string(),
            weight,
            relations: relations
                .iter()
                .map(|&(h, t)| (h.to_string(), t.to_string()))
                .collect(),
        };
        let templates = vec![
            t(
                "There is {finding} in the {anatomy} .",
                3.0,
                &[("finding", "anatomy")],
            ),
            t(
                "{finding} and {finding2} are seen in the {anatomy} .",
                1.2,
                &[("finding", "anatomy"), ("finding2", "anatomy")],
            ),
            t(
                "{finding} involving the {anatomy} and the {anatomy2} .",
                1.2,
                &[("finding", "anatomy"), ("finding", "anatomy2")],
            ),
            t("No {finding} .", 1.0, &[]),
            t(
                "There is {long_finding} in the {anatomy} .",
                0.5,
                &[("long_finding", "anatomy")],
            ),
            t("The {anatomy_plain} is unremarkable .", 0.8, &[]),
            t(
                "In the {disambiguator} , there is {finding} of the {ambiguous} .",
                1.6,
                &[("finding", "ambiguous")],
            ),
            t("Stable examination without change .", 0.6, &[]),
        ];
        GrammarConfig {
            seed,
            n_documents: 400,
            sentences_per_doc: (3, 7),
            findings,
            long_findings,
            long_prefix_rate: 0.5,
            anatomies,
            ambiguous,
            templates,
        }
    }

    pub fn validate(&self, schema: &LabelSchema) -> Result<(), SynthError> {
        for a in &self.anatomies {
            if schema
                .span_label_index(&a.subtype)
                .map(|l| schema.is_subtype(l))
                != Some(true)
            {
                return Err(SynthError::UnknownSubtype(a.subtype.clone()));
            }
        }
        for a in &self.ambiguous {
            for (t, _) in &a.options {
                if schema.span_label_index(t).map(|l| schema.is_subtype(l)) != Some(true) {
                    return Err(SynthError::UnknownSubtype(t.clone()));
                }
            }
            let mut disambiguators: Vec<&String> = a.options.iter().map(|(_, d)| d).collect();
            disambiguators.sort();
            disambiguators.dedup();
            if disambiguators.len() != a.options.len() {
                return Err(SynthError::MissingDisambiguator(
                    a.surface.clone(),
                    "options must carry distinct disambiguators".to_string(),
                ));
            }
        }
        Ok(())
    }
}

/// Generator bookkeeping, written alongside the corpus as a manifest.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct GenManifest {
    pub documents: usize,
    pub sentences: usize,
    pub tokens: usize,
    pub entities_per_label: BTreeMap<String, usize>,
    pub relations: usize,
    pub unique_spans_per_label: BTreeMap<String, usize>,
    /// surface -> subtype -> occurrences
    pub ambiguous_occurrences: BTreeMap<String, BTreeMap<String, usize>>,
    /// gold spans wider than 10 tokens
    pub long_gold_spans: usize,
}

struct SlotFill {
    surface: String,
    /// span label name; None for unannotated slots
    label: Option<String>,
    /// annotate only the first n whitespace words of the surface
    annotate_words: Option<usize>,
}

/// One generated sentence before document assembly.
struct BuiltSentence {
    text: String,
    /// (char_start, char_end, label) relative to the sentence text
    entities: Vec<(usize, usize, String)>,
    /// slot-name indices into `entities`
    relations: Vec<(usize, usize)>,
    ambiguous_used: Vec<(String, String)>,
}

fn weighted_pick<'a, T>(items: &'a [(T, f64)], rng: &mut ChaCha8Rng) -> &'a T {
    let total: f64 = items.iter().map(|(_, w)| w).sum();
    let mut x = rng.random::<f64>() * total;
    for (item, w) in items {
        x -= w;
        if x <= 0.0 {
            return item;
        }
    }
    &items.last().expect("non-empty weighted list").0
}

struct GenState {
    /// alternation counters for ambiguous surfaces
    ambiguous_counters: BTreeMap<String, usize>,
}

fn fill_slot(
    slot: &str,
    cfg: &GrammarConfig,
    state: &mut GenState,
    taken: &[String],
    rng: &mut ChaCha8Rng,
    template: &str,
) -> Result<(SlotFill, Option<String>), SynthError> {
    let unsat = || SynthError::Unsatisfiable(template.to_string(), slot.to_string());
    match slot {
        "finding" | "finding2" => {
            let pool: Vec<(&String, f64)> = cfg
                .findings
                .iter()
                .filter(|(s, _)| !taken.contains(s))
                .map(|(s, w)| (s, *w))
                .collect();
            if pool.is_empty() {
                return Err(unsat());
            }
            let surface = *weighted_pick(&pool, rng);
            Ok((
                SlotFill {
                    surface: surface.clone(),
                    label: Some("Finding".to_string()),
                    annotate_words: None,
                },
                None,
            ))
        }
        "long_finding" => {
            let pool: Vec<(&(String, usize), f64)> =
                cfg.long_findings.iter().map(|s| (s, 1.0)).collect();
            if pool.is_empty() {
                return Err(unsat());
            }
            let (surface, prefix_words) = *weighted_pick(&pool, rng);
            let annotate_words = if rng.random::<f64>() < cfg.long_prefix_rate {
                Some(*prefix_words)
            } else {
                None
            };
            Ok((
                SlotFill {
                    surface: surface.clone(),
                    label: Some("Finding".to_string()),
                    annotate_words,
                },
                None,
            ))
        }
        "anatomy" | "anatomy2" | "anatomy_plain" => {
            let pool: Vec<(&AnatomyEntry, f64)> = cfg
                .anatomies
                .iter()
                .filter(|a| !taken.contains(&a.surface))
                .map(|a| (a, a.weight))
                .collect();
            if pool.is_empty() {
                return Err(unsat());
            }
            let entry = *weighted_pick(&pool, rng);
            let label = if slot == "anatomy_plain" {
                None
            } else {
                Some(entry.subtype.clone())
            };
            Ok((
                SlotFill {
                    surface: entry.surface.clone(),
                    label,
                    annotate_words: None,
                },
                None,
            ))
        }
        "ambiguous" => {
            let pool: Vec<(&AmbiguousEntry, f64)> =
                cfg.ambiguous.iter().map(|a| (a, a.weight)).collect();
            if pool.is_empty() {
                return Err(unsat());
            }
            let entry = *weighted_pick(&pool, rng);
            let counter = state
                .ambiguous_counters
                .entry(entry.surface.clone())
                .or_insert(0);
            let (subtype, disambiguator) = &entry.options[*counter % entry.options.len()];
            *counter += 1;
            Ok((
                SlotFill {
                    surface: entry.surface.clone(),
                    label: Some(subtype.clone()),
                    annotate_words: None,
                },
                Some(disambiguator.clone()),
            ))
        }
        other => Err(SynthError::Unsatisfiable(
            template.to_string(),
            other.to_string(),
        )),
    }
}

fn build_sentence(
    template: &TemplateEntry,
    cfg: &GrammarConfig,
    state: &mut GenState,
    rng: &mut ChaCha8Rng,
) -> Result<BuiltSentence, SynthError> {
    let pattern_tokens: Vec<&str> = template.pattern.split_whitespace().collect();
    // resolve slot fills first; the disambiguator depends on the ambiguous pick
    let mut fills: BTreeMap<String, SlotFill> = BTreeMap::new();
    let mut disambiguator: Option<String> = None;
    let mut taken: Vec<String> = Vec::new();
    for tok in &pattern_tokens {
        if let Some(slot) = tok.strip_prefix('{').and_then(|t| t.strip_suffix('}')) {
            if slot == "disambiguator" {
                continue;
            }
            let (fill, disamb) = fill_slot(slot, cfg, state, &taken, rng, &template.pattern)?;
            taken.push(fill.surface.clone());
            if let Some(d) = disamb {
                disambiguator = Some(d);
            }
            fills.insert(slot.to_string(), fill);
        }
    }

    let mut text = String::new();
    let mut entities: Vec<(usize, usize, String)> = Vec::new();
    let mut slot_entity: BTreeMap<String, usize> = BTreeMap::new();
    let mut ambiguous_used = Vec::new();
    for tok in &pattern_tokens {
        let (word, slot_name) = match tok.strip_prefix('{').and_then(|t| t.strip_suffix('}')) {
            Some("disambiguator") => {
                let d = disambiguator.clone().ok_or_else(|| {
                    SynthError::Unsatisfiable(template.pattern.clone(), "disambiguator".into())
                })?;
                (d, None)
            }
            Some(slot) => {
                let fill = &fills[slot];
                (fill.surface.clone(), Some(slot.to_string()))
            }
            None => (tok.to_string(), None),
        };
        if !text.is_empty() && !matches!(word.as_str(), "." | ",") {
            text.push(' ');
        }
        let start = text.len();
        text.push_str(&word);
        let end = text.len();
        if let Some(slot) = slot_name {
            let fill = &fills[&slot];
            if let Some(label) = &fill.label {
                let ann_end = match fill.annotate_words {
                    Some(n) => {
                        let prefix: Vec<&str> = fill.surface.split_whitespace().take(n).collect();
                        start + prefix.join(" ").len()
                    }
                    None => end,
                };
                slot_entity.insert(slot.clone(), entities.len());
                entities.push((start, ann_end, label.clone()));
                if slot == "ambiguous" {
                    ambiguous_used.push((fill.surface.clone(), label.clone()));
                }
            }
        }
    }

    let mut relations = Vec::new();
    for (head_slot, tail_slot) in &template.relations {
        let h = *slot_entity
            .get(head_slot)
            .ok_or_else(|| SynthError::BadWiring(template.pattern.clone(), head_slot.clone()))?;
        let t = *slot_entity
            .get(tail_slot)
            .ok_or_else(|| SynthError::BadWiring(template.pattern.clone(), tail_slot.clone()))?;
        relations.push((h, t));
    }
    Ok(BuiltSentence {
        text,
        entities,
        relations,
        ambiguous_used,
    })
}

/// Generate `n_documents` documents (overriding the config's count). Every
/// document is emitted as standoff text, parsed back through the ingestion
/// path, and validated, so the returned documents satisfy all corpus
/// invariants by construction.
pub fn generate(
    config: &GrammarConfig,
    n_documents: usize,
    schema: &LabelSchema,
) -> Result<(Vec<Document>, GenManifest), SynthError> {
    config.validate(schema)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = GenState {
        ambiguous_counters: BTreeMap::new(),
    };
    let disamb_of: BTreeMap<(String, String), String> = config
        .ambiguous
        .iter()
        .flat_map(|a| {
            a.options
                .iter()
                .map(|(t, d)| ((a.surface.clone(), t.clone()), d.clone()))
        })
        .collect();

    let mut docs = Vec::with_capacity(n_documents);
    let mut manifest = GenManifest {
        documents: n_documents,
        ..Default::default()
    };
    let mut uniques: BTreeMap<String, std::collections::BTreeSet<String>> = BTreeMap::new();
    let templates: Vec<(&TemplateEntry, f64)> =
        config.templates.iter().map(|t| (t, t.weight)).collect();

    for d in 0..n_documents {
        let (lo, hi) = config.sentences_per_doc;
        let n_sentences = rng.random_range(lo..=hi.max(lo));
        let mut text = String::new();
        let mut ann = String::new();
        let mut entity_counter = 0usize;
        let mut relation_counter = 0usize;
        for _ in 0..n_sentences {
            let template = *weighted_pick(&templates, &mut rng);
            let built = build_sentence(template, config, &mut state, &mut rng)?;
            let offset = text.len();
            // machine check: every ambiguous occurrence carries its
            // disambiguator inside the sentence
            for (surface, subtype) in &built.ambiguous_used {
                let d = &disamb_of[&(surface.clone(), subtype.clone())];
                let has = built
                    .text
                    .split(|c: char| !c.is_alphanumeric())
                    .any(|t| t == d);
                if !has {
                    return Err(SynthError::MissingDisambiguator(
                        surface.clone(),
                        built.text.clone(),
                    ));
                }
                *manifest
                    .ambiguous_occurrences
                    .entry(surface.clone())
                    .or_default()
                    .entry(subtype.clone())
                    .or_default() += 1;
            }
            let entity_base = entity_counter;
            for &(s, e, ref label) in &built.entities {
                entity_counter += 1;
                ann.push_str(&format!(
                    "T{}\t{} {} {}\t{}\n",
                    entity_counter,
                    label,
                    offset + s,
                    offset + e,
                    &built.text[s..e]
                ));
                *manifest
                    .entities_per_label
                    .entry(label.clone())
                    .or_default() += 1;
                uniques
                    .entry(label.clone())
                    .or_default()
                    .insert(built.text[s..e].to_lowercase());
                let width = built.text[s..e].split_whitespace().count();
                if width > 10 {
                    manifest.long_gold_spans += 1;
                }
            }
            for &(h, t) in &built.relations {
                relation_counter += 1;
                ann.push_str(&format!(
                    "R{}\thas Arg1:T{} Arg2:T{}\n",
                    relation_counter,
                    entity_base + h + 1,
                    entity_base + t + 1
                ));
                manifest.relations += 1;
            }
            text.push_str(&built.text);
            text.push('\n');
        }
        let id = format!("doc{d:04}");
        let doc = parse_standoff(&id, &text, &ann, schema)?;
        manifest.sentences += doc.sentences.len();
        manifest.tokens += doc.token_count();
        docs.push(doc);
    }
    manifest.unique_spans_per_label = uniques
        .into_iter()
        .map(|(label, set)| (label, set.len()))
        .collect();
    Ok((docs, manifest))
}
