use std::collections::{HashMap, HashSet};

use rayon::prelude::*;

use super::KnowledgeItem;
use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::scalar::Scalar;

/// One key/value pair of the knowledge memory.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryEntry<T> {
    /// Unit-norm key of width `d`.
    pub key: Vec<T>,
    /// `[c, d]` compressed value.
    pub value: Tensor<T>,
    pub item_id: String,
    pub corpus_id: usize,
    pub encoded_at_version: u32,
}

/// Immutable, versioned memory; entries are sharded by `index % num_shards`.
#[derive(Clone, Debug)]
pub struct MemorySnapshot<T> {
    version: u32,
    d: usize,
    c: usize,
    num_shards: usize,
    entries: Vec<MemoryEntry<T>>,
    corpora: Vec<Vec<usize>>,
    by_id: HashMap<String, usize>,
}

impl<T: Scalar> MemorySnapshot<T> {
    /// Assembles a snapshot from already-encoded entries.
    pub fn from_entries(
        version: u32,
        d: usize,
        c: usize,
        num_corpora: usize,
        num_shards: usize,
        entries: Vec<MemoryEntry<T>>,
    ) -> Result<Self> {
        if num_shards == 0 {
            return Err(Error::InvalidArgument("num_shards must be at least 1".into()));
        }
        let mut corpora = vec![Vec::new(); num_corpora];
        let mut by_id = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if e.key.len() != d {
                return Err(Error::DimensionMismatch {
                    what: "key width",
                    expected: d,
                    found: e.key.len(),
                });
            }
            if e.value.shape() != [c, d] {
                return Err(Error::DimensionMismatch {
                    what: "value rows",
                    expected: c,
                    found: e.value.rows(),
                });
            }
            if e.corpus_id >= num_corpora {
                return Err(Error::InvalidArgument(format!(
                    "entry {:?} in corpus {} but only {num_corpora} corpora",
                    e.item_id, e.corpus_id
                )));
            }
            if e.encoded_at_version > version {
                return Err(Error::InvalidArgument(format!(
                    "entry {:?} encoded at version {} after snapshot version {version}",
                    e.item_id, e.encoded_at_version
                )));
            }
            if by_id.insert(e.item_id.clone(), i).is_some() {
                return Err(Error::DuplicateId(e.item_id.clone()));
            }
            corpora[e.corpus_id].push(i);
        }
        Ok(Self {
            version,
            d,
            c,
            num_shards,
            entries,
            corpora,
            by_id,
        })
    }

    pub fn version(&self) -> u32 {
        self.version
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.d, self.c)
    }

    pub fn num_shards(&self) -> usize {
        self.num_shards
    }

    pub fn num_corpora(&self) -> usize {
        self.corpora.len()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[MemoryEntry<T>] {
        &self.entries
    }

    pub fn entry(&self, i: usize) -> &MemoryEntry<T> {
        &self.entries[i]
    }

    pub fn index_of(&self, item_id: &str) -> Option<usize> {
        self.by_id.get(item_id).copied()
    }

    pub fn get(&self, item_id: &str) -> Option<&MemoryEntry<T>> {
        self.index_of(item_id).map(|i| &self.entries[i])
    }

    /// Entry indices of corpus `j`.
    pub fn corpus(&self, j: usize) -> &[usize] {
        &self.corpora[j]
    }

    pub fn corpus_counts(&self) -> Vec<usize> {
        self.corpora.iter().map(Vec::len).collect()
    }

    pub fn shard_of(&self, entry: usize) -> usize {
        entry % self.num_shards
    }

    /// Entry indices held by shard `s`.
    pub fn shard(&self, s: usize) -> Vec<usize> {
        (s..self.entries.len()).step_by(self.num_shards).collect()
    }

    /// Same entries under a different shard count.
    pub fn resharded(&self, num_shards: usize) -> Result<Self> {
        if num_shards == 0 {
            return Err(Error::InvalidArgument("num_shards must be at least 1".into()));
        }
        Ok(Self {
            num_shards,
            ..self.clone()
        })
    }

    /// Bitwise comparison of all keys, values, ids and versions.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.version == other.version
            && self.dims() == other.dims()
            && self.corpus_counts() == other.corpus_counts()
            && self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.item_id == b.item_id
                    && a.corpus_id == b.corpus_id
                    && a.encoded_at_version == b.encoded_at_version
                    && bits_eq(&a.key, &b.key)
                    && bits_eq(a.value.data(), b.value.data())
            })
    }
}

fn bits_eq<T: Scalar>(a: &[T], b: &[T]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits())
}

/// Encodes one item under frozen parameters.
pub fn encode_entry<T: Scalar>(item: &KnowledgeItem, model: &Model<T>, version: u32) -> Result<MemoryEntry<T>> {
    let input = item.featurize(&model.config);
    let mut g = Graph::no_grad();
    let (key, value, _) = model.encode_knowledge(&mut g, &model.params, &input)?;
    Ok(MemoryEntry {
        key: g.value(key).data().to_vec(),
        value: g.value(value).clone(),
        item_id: item.id.clone(),
        corpus_id: item.corpus_id,
        encoded_at_version: version,
    })
}

fn encode_all<T: Scalar>(items: &[KnowledgeItem], model: &Model<T>, version: u32) -> Result<Vec<MemoryEntry<T>>> {
    items
        .par_iter()
        .map(|item| encode_entry(item, model, version))
        .collect()
}

fn check_items(items: &[KnowledgeItem], num_corpora: usize) -> Result<()> {
    let mut seen = HashSet::with_capacity(items.len());
    for item in items {
        item.validate(num_corpora)?;
        if !seen.insert(item.id.as_str()) {
            return Err(Error::DuplicateId(item.id.clone()));
        }
    }
    Ok(())
}

/// Encodes every item into a version-0 snapshot.
pub fn build_snapshot<T: Scalar>(items: &[KnowledgeItem], model: &Model<T>, num_shards: usize) -> Result<MemorySnapshot<T>> {
    if items.is_empty() {
        return Err(Error::EmptyInput("knowledge items"));
    }
    if num_shards == 0 {
        return Err(Error::InvalidArgument("num_shards must be at least 1".into()));
    }
    check_items(items, model.config.num_corpora)?;
    let entries = encode_all(items, model, 0)?;
    MemorySnapshot::from_entries(0, model.config.d, model.config.c, model.config.num_corpora, num_shards, entries)
}

/// Re-encodes every item with the current parameters into a new snapshot
/// whose version is one past `old`. `old` is left untouched.
pub fn refresh_snapshot<T: Scalar>(
    old: &MemorySnapshot<T>,
    items: &[KnowledgeItem],
    model: &Model<T>,
) -> Result<MemorySnapshot<T>> {
    check_items(items, model.config.num_corpora)?;
    let version = old.version() + 1;
    let entries = encode_all(items, model, version)?;
    MemorySnapshot::from_entries(
        version,
        model.config.d,
        model.config.c,
        model.config.num_corpora,
        old.num_shards(),
        entries,
    )
}
