//! Label schema: the ordered span label set (null, Finding, anatomy
//! subtypes) and the relation label set (null, has).
//!
//! The schema is loaded from a plain text config file rather than hard-coded;
//! [`LabelSchema::full`] returns the bundled default carrying the complete
//! 58-label set with external concept identifiers where known.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

/// Index of the null span/relation label. Fixed by construction.
pub const NULL_LABEL: usize = 0;
/// Index of the Finding span label. Fixed by construction.
pub const FINDING_LABEL: usize = 1;
/// Index of the `has` relation label.
pub const HAS_LABEL: usize = 1;

/// Bundled schema config with the full anatomy subtype list.
const FULL_SCHEMA: &str = include_str!("../data/schema_full.txt");

#[derive(Debug, Error)]
pub enum SchemaError {
    #[error("schema line {0}: {1}")]
    Parse(usize, String),
    #[error("duplicate span label `{0}`")]
    DuplicateLabel(String),
    #[error("span labels must start with `null` followed by `Finding`")]
    BadReservedLabels,
    #[error("relation labels must be exactly `null` then `has`")]
    BadRelationLabels,
    #[error("schema needs at least one anatomy subtype")]
    NoSubtypes,
}

/// Ordered label sets for spans and relations.
///
/// `span_labels[0]` is always the null label (no prediction) and
/// `span_labels[1]` is Finding; everything after that is an anatomy subtype.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSchema {
    span_labels: Vec<String>,
    relation_labels: Vec<String>,
    subtype_metadata: BTreeMap<String, String>,
}

impl LabelSchema {
    /// Parse the schema config format: a `[spans]` section with one label per
    /// line (optionally `label<TAB>concept_id`), then a `[relations]` section.
    pub fn parse(content: &str) -> Result<LabelSchema, SchemaError> {
        #[derive(PartialEq)]
        enum Section {
            None,
            Spans,
            Relations,
        }
        let mut section = Section::None;
        let mut span_labels = Vec::new();
        let mut relation_labels = Vec::new();
        let mut subtype_metadata = BTreeMap::new();

        for (idx, raw) in content.lines().enumerate() {
            let line = raw.trim_end();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            match line {
                "[spans]" => section = Section::Spans,
                "[relations]" => section = Section::Relations,
                _ => {
                    let (label, concept) = match line.split_once('\t') {
                        Some((l, c)) => (l.trim(), Some(c.trim())),
                        None => (line.trim(), None),
                    };
                    match section {
                        Section::Spans => {
                            if span_labels.contains(&label.to_string()) {
                                return Err(SchemaError::DuplicateLabel(label.to_string()));
                            }
                            if let Some(c) = concept.filter(|c| !c.is_empty()) {
                                subtype_metadata.insert(label.to_string(), c.to_string());
                            }
                            span_labels.push(label.to_string());
                        }
                        Section::Relations => relation_labels.push(label.to_string()),
                        Section::None => {
                            return Err(SchemaError::Parse(
                                idx + 1,
                                "label outside a [spans]/[relations] section".into(),
                            ))
                        }
                    }
                }
            }
        }
        LabelSchema::new(span_labels, relation_labels, subtype_metadata)
    }

    pub fn new(
        span_labels: Vec<String>,
        relation_labels: Vec<String>,
        subtype_metadata: BTreeMap<String, String>,
    ) -> Result<LabelSchema, SchemaError> {
        if span_labels.len() < 2 || span_labels[0] != "null" || span_labels[1] != "Finding" {
            return Err(SchemaError::BadReservedLabels);
        }
        if span_labels.len() < 3 {
            return Err(SchemaError::NoSubtypes);
        }
        for (i, l) in span_labels.iter().enumerate() {
            if span_labels[..i].contains(l) {
                return Err(SchemaError::DuplicateLabel(l.clone()));
            }
        }
        if relation_labels != ["null", "has"] {
            return Err(SchemaError::BadRelationLabels);
        }
        Ok(LabelSchema {
            span_labels,
            relation_labels,
            subtype_metadata,
        })
    }

    /// The bundled full schema: null, Finding, and 56 anatomy subtypes.
    pub fn full() -> LabelSchema {
        LabelSchema::parse(FULL_SCHEMA).expect("bundled schema is valid")
    }

    /// Serialize back to the config file format.
    pub fn to_config(&self) -> String {
        let mut out = String::from("[spans]\n");
        for l in &self.span_labels {
            match self.subtype_metadata.get(l) {
                Some(c) => out.push_str(&format!("{l}\t{c}\n")),
                None => out.push_str(&format!("{l}\n")),
            }
        }
        out.push_str("[relations]\n");
        for l in &self.relation_labels {
            out.push_str(&format!("{l}\n"));
        }
        out
    }

    pub fn span_labels(&self) -> &[String] {
        &self.span_labels
    }

    pub fn relation_labels(&self) -> &[String] {
        &self.relation_labels
    }

    pub fn n_span_labels(&self) -> usize {
        self.span_labels.len()
    }

    pub fn n_relation_labels(&self) -> usize {
        self.relation_labels.len()
    }

    /// Number of anatomy subtypes (span labels minus null and Finding).
    pub fn n_subtypes(&self) -> usize {
        self.span_labels.len() - 2
    }

    /// Indices of the anatomy subtype labels.
    pub fn subtype_indices(&self) -> impl Iterator<Item = usize> {
        2..self.span_labels.len()
    }

    pub fn is_subtype(&self, label: usize) -> bool {
        label >= 2 && label < self.span_labels.len()
    }

    pub fn span_label_index(&self, name: &str) -> Option<usize> {
        self.span_labels.iter().position(|l| l == name)
    }

    pub fn span_label_name(&self, index: usize) -> &str {
        &self.span_labels[index]
    }

    pub fn relation_label_index(&self, name: &str) -> Option<usize> {
        self.relation_labels.iter().position(|l| l == name)
    }

    pub fn relation_label_name(&self, index: usize) -> &str {
        &self.relation_labels[index]
    }

    pub fn concept_id(&self, label: &str) -> Option<&str> {
        self.subtype_metadata.get(label).map(|s| s.as_str())
    }
}

impl fmt::Display for LabelSchema {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} span labels ({} subtypes), {} relation labels",
            self.span_labels.len(),
            self.n_subtypes(),
            self.relation_labels.len()
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_schema_has_58_span_and_2_relation_labels() {
        let s = LabelSchema::full();
        assert_eq!(s.n_span_labels(), 58);
        assert_eq!(s.n_relation_labels(), 2);
        assert_eq!(s.n_subtypes(), 56);
        assert_eq!(s.span_label_name(NULL_LABEL), "null");
        assert_eq!(s.span_label_name(FINDING_LABEL), "Finding");
        assert_eq!(s.relation_label_name(HAS_LABEL), "has");
    }

    #[test]
    fn config_round_trip() {
        let s = LabelSchema::full();
        let again = LabelSchema::parse(&s.to_config()).unwrap();
        assert_eq!(s, again);
    }

    #[test]
    fn rejects_duplicates_and_bad_reserved() {
        assert!(
            LabelSchema::parse("[spans]\nnull\nFinding\nLung\nLung\n[relations]\nnull\nhas")
                .is_err()
        );
        assert!(
            LabelSchema::parse("[spans]\nFinding\nnull\nLung\n[relations]\nnull\nhas").is_err()
        );
        assert!(LabelSchema::parse("[spans]\nnull\nFinding\nLung\n[relations]\nhas").is_err());
    }

    #[test]
    fn concept_ids_looked_up_by_label() {
        let s = LabelSchema::full();
        assert_eq!(s.concept_id("Lung"), Some("39607008"));
        assert_eq!(s.concept_id("Finding"), None);
    }
}
