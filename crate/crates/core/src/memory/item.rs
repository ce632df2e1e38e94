use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoders::Query;
use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemKind {
    Passage,
    Caption,
    QaPairs,
    KgTriplets,
}

/// `(subject, relation, object)`.
pub type Triplet = (String, String, String);

/// One entry of a knowledge corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeItem {
    pub id: String,
    pub corpus_id: usize,
    pub kind: ItemKind,
    #[serde(default)]
    pub text: String,
    #[serde(default)]
    pub image_descriptor: Option<String>,
    #[serde(default)]
    pub triplets: Vec<Triplet>,
}

impl KnowledgeItem {
    pub fn passage(id: impl Into<String>, corpus_id: usize, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            corpus_id,
            kind: ItemKind::Passage,
            text: text.into(),
            image_descriptor: None,
            triplets: Vec::new(),
        }
    }

    pub fn caption(id: impl Into<String>, corpus_id: usize, text: impl Into<String>, image: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            corpus_id,
            kind: ItemKind::Caption,
            text: text.into(),
            image_descriptor: Some(image.into()),
            triplets: Vec::new(),
        }
    }

    pub fn triplets(id: impl Into<String>, corpus_id: usize, triplets: Vec<Triplet>) -> Self {
        Self {
            id: id.into(),
            corpus_id,
            kind: ItemKind::KgTriplets,
            text: String::new(),
            image_descriptor: None,
            triplets,
        }
    }

    pub fn validate(&self, num_corpora: usize) -> Result<()> {
        if self.corpus_id >= num_corpora {
            return Err(Error::InvalidArgument(format!(
                "item {:?}: corpus {} out of range (have {num_corpora})",
                self.id, self.corpus_id
            )));
        }
        if self.kind == ItemKind::KgTriplets && self.triplets.is_empty() {
            return Err(Error::InvalidArgument(format!("item {:?}: kg_triplets item without triplets", self.id)));
        }
        if self.text.trim().is_empty() && self.image_descriptor.is_none() && self.triplets.is_empty() {
            return Err(Error::InvalidArgument(format!("item {:?} has no content", self.id)));
        }
        Ok(())
    }

    /// Text fed to the tokenizer: linearized triplets for KG items.
    pub fn content_text(&self) -> String {
        if self.kind == ItemKind::KgTriplets && !self.triplets.is_empty() {
            let lin = linearize_triplets(&self.triplets).expect("non-empty triplets");
            if self.text.trim().is_empty() {
                lin
            } else {
                format!("{} {lin}", self.text.trim())
            }
        } else {
            self.text.clone()
        }
    }

    /// Featurized encoder input.
    pub fn featurize(&self, cfg: &ModelConfig) -> Query {
        Query::from_raw(self.id.clone(), &self.content_text(), self.image_descriptor.as_deref(), cfg)
    }
}

/// Renders triplets as `"s r o."` sentences joined by spaces, in input order.
pub fn linearize_triplets(triplets: &[Triplet]) -> Result<String> {
    if triplets.is_empty() {
        return Err(Error::EmptyInput("triplet list"));
    }
    Ok(triplets
        .iter()
        .map(|(s, r, o)| format!("{s} {r} {o}."))
        .collect::<Vec<_>>()
        .join(" "))
}

/// One manifest line. `corpus` is optional; when present it must match the
/// manifest's position.
#[derive(Debug, Deserialize)]
struct ManifestRecord {
    id: String,
    kind: ItemKind,
    #[serde(default)]
    corpus: Option<usize>,
    #[serde(default)]
    text: String,
    #[serde(default)]
    image: Option<String>,
    #[serde(default)]
    triplets: Vec<[String; 3]>,
}

/// Parses a JSON-lines corpus manifest; blank lines and `#` comments are skipped.
pub fn parse_manifest(src: &str, corpus_id: usize, num_corpora: usize) -> Result<Vec<KnowledgeItem>> {
    let mut items = Vec::new();
    for (i, line) in src.lines().enumerate() {
        let line_no = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(trimmed).map_err(|e| Error::Manifest {
            line: line_no,
            message: e.to_string(),
        })?;
        if let Some(c) = rec.corpus {
            if c != corpus_id {
                return Err(Error::Manifest {
                    line: line_no,
                    message: format!("record {:?} declares corpus {c} but manifest is corpus {corpus_id}", rec.id),
                });
            }
        }
        let item = KnowledgeItem {
            id: rec.id,
            corpus_id,
            kind: rec.kind,
            text: rec.text,
            image_descriptor: rec.image,
            triplets: rec.triplets.into_iter().map(|[s, r, o]| (s, r, o)).collect(),
        };
        item.validate(num_corpora).map_err(|e| Error::Manifest {
            line: line_no,
            message: e.to_string(),
        })?;
        items.push(item);
    }
    Ok(items)
}

/// Loads one manifest per corpus; corpus ids follow argument order.
pub fn load_manifests<P: AsRef<Path>>(paths: &[P]) -> Result<Vec<KnowledgeItem>> {
    let mut all = Vec::new();
    let mut seen = HashSet::new();
    for (corpus, path) in paths.iter().enumerate() {
        let src = std::fs::read_to_string(path)?;
        for item in parse_manifest(&src, corpus, paths.len())? {
            if !seen.insert(item.id.clone()) {
                return Err(Error::DuplicateId(item.id));
            }
            all.push(item);
        }
    }
    Ok(all)
}

/// Serializes an item as one manifest line.
pub fn manifest_line(item: &KnowledgeItem) -> String {
    let mut v = serde_json::json!({
        "id": item.id,
        "kind": item.kind,
        "corpus": item.corpus_id,
    });
    if !item.text.is_empty() {
        v["text"] = item.text.clone().into();
    }
    if let Some(img) = &item.image_descriptor {
        v["image"] = img.clone().into();
    }
    if !item.triplets.is_empty() {
        v["triplets"] = item
            .triplets
            .iter()
            .map(|(s, r, o)| serde_json::json!([s, r, o]))
            .collect::<Vec<_>>()
            .into();
    }
    v.to_string()
}
