//! Items, interaction sequences, and the datasets built from them.

mod io;
mod split;
pub mod synthetic;

use std::collections::BTreeMap;
use std::sync::Arc;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use io::{load_catalog, load_interactions, write_catalog, write_interactions};
pub use split::{leave_one_out_split, subsample, HeldOut, Split, SplitView, UserSplit};
pub use synthetic::{generate_synthetic_world, PreferenceOracle, SyntheticWorld, SyntheticWorldConfig};

/// Minimum sequence length that leave-one-out can split.
pub const MIN_SPLITTABLE_LEN: usize = 3;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: malformed record: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("duplicate item id `{0}`")]
    DuplicateItemId(String),
    #[error("item `{item_id}`: token id {token} outside vocabulary of {vocab_size}")]
    TokenOutOfRange { item_id: String, token: i64, vocab_size: usize },
    #[error("item `{item_id}`: image shape {found:?} does not match declared {expected:?}")]
    BadImageShape { item_id: String, expected: [usize; 3], found: Vec<usize> },
    #[error("user `{user_id}` references unknown item `{item_id}`")]
    UnknownItemRef { user_id: String, item_id: String },
    #[error("dataset has no usable users")]
    EmptyDataset,
    #[error("user `{0}` has fewer than {MIN_SPLITTABLE_LEN} interactions")]
    SequenceTooShort(String),
    #[error("subsample fraction {0} is outside (0, 1]")]
    BadFraction(f64),
    #[error("invalid synthetic world config: {0}")]
    ConfigInvalid(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Vision,
    Id,
}

/// Channel-major 8-bit image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageGrid {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl ImageGrid {
    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> u8 {
        self.pixels[(c * self.height + y) * self.width + x]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Item {
    pub item_id: String,
    pub modality: Modality,
    pub text_tokens: Option<Vec<u32>>,
    pub image: Option<ImageGrid>,
    pub features: BTreeMap<String, u32>,
}

/// Declared constraints that every catalog record is validated against.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CatalogSchema {
    pub vocab_size: Option<usize>,
    /// `[channels, height, width]`; when absent the first image fixes it.
    pub image_shape: Option<[usize; 3]>,
}

/// Items keyed by id; insertion order defines the item index used for
/// ID embeddings, softmax classes, and rank tie-breaking.
#[derive(Clone, Debug, Default)]
pub struct Catalog {
    items: IndexMap<String, Item>,
    pub schema: CatalogSchema,
}

impl Catalog {
    pub fn new(schema: CatalogSchema) -> Self {
        Self { items: IndexMap::new(), schema }
    }

    pub fn insert(&mut self, item: Item) -> Result<usize, CorpusError> {
        if self.items.contains_key(&item.item_id) {
            return Err(CorpusError::DuplicateItemId(item.item_id));
        }
        let (idx, _) = self.items.insert_full(item.item_id.clone(), item);
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn index_of(&self, item_id: &str) -> Option<usize> {
        self.items.get_index_of(item_id)
    }

    pub fn item(&self, idx: usize) -> &Item {
        &self.items[idx]
    }

    pub fn get(&self, item_id: &str) -> Option<&Item> {
        self.items.get(item_id)
    }

    pub fn items(&self) -> impl Iterator<Item = &Item> {
        self.items.values()
    }

    pub fn modalities(&self) -> Vec<Modality> {
        let mut m: Vec<Modality> = self.items.values().map(|i| i.modality).collect();
        m.sort();
        m.dedup();
        m
    }

    /// Image shape shared by every vision item, if any.
    pub fn image_shape(&self) -> Option<[usize; 3]> {
        self.schema
            .image_shape
            .or_else(|| self.items.values().find_map(|i| i.image.as_ref().map(|g| g.shape())))
    }

    /// Cardinality (max id + 1) of each categorical item feature.
    pub fn feature_cardinalities(&self) -> BTreeMap<String, usize> {
        cardinalities(self.items.values().map(|i| &i.features))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InteractionSequence {
    pub user_id: String,
    /// Catalog indices in interaction order.
    pub items: Vec<usize>,
    pub features: BTreeMap<String, u32>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub catalog: Arc<Catalog>,
    pub users: Vec<InteractionSequence>,
    pub domain_name: String,
    pub max_seq_len: usize,
    /// Users discarded at load time for being too short to split.
    pub dropped_users: usize,
}

impl Dataset {
    /// Builds a dataset, truncating each sequence to its most recent
    /// `max_seq_len` items and dropping unsplittable users.
    pub fn new(
        catalog: Arc<Catalog>,
        users: Vec<InteractionSequence>,
        domain_name: impl Into<String>,
        max_seq_len: usize,
    ) -> Result<Self, CorpusError> {
        let mut kept = Vec::with_capacity(users.len());
        let mut dropped = 0;
        for mut u in users {
            if u.items.len() < MIN_SPLITTABLE_LEN {
                dropped += 1;
                continue;
            }
            if u.items.len() > max_seq_len {
                u.items.drain(..u.items.len() - max_seq_len);
            }
            kept.push(u);
        }
        if dropped > 0 {
            log::warn!("dropped {dropped} users with fewer than {MIN_SPLITTABLE_LEN} interactions");
        }
        if kept.is_empty() {
            return Err(CorpusError::EmptyDataset);
        }
        Ok(Self { catalog, users: kept, domain_name: domain_name.into(), max_seq_len, dropped_users: dropped })
    }

    pub fn num_items(&self) -> usize {
        self.catalog.len()
    }

    pub fn user_feature_cardinalities(&self) -> BTreeMap<String, usize> {
        cardinalities(self.users.iter().map(|u| &u.features))
    }

    pub fn num_interactions(&self) -> usize {
        self.users.iter().map(|u| u.items.len()).sum()
    }
}

fn cardinalities<'a>(maps: impl Iterator<Item = &'a BTreeMap<String, u32>>) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for m in maps {
        for (k, &v) in m {
            let e = out.entry(k.clone()).or_insert(0usize);
            *e = (*e).max(v as usize + 1);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn text_item(id: &str) -> Item {
        Item {
            item_id: id.into(),
            modality: Modality::Text,
            text_tokens: Some(vec![1]),
            image: None,
            features: BTreeMap::new(),
        }
    }

    fn catalog(n: usize) -> Arc<Catalog> {
        let mut c = Catalog::new(CatalogSchema::default());
        for i in 0..n {
            c.insert(text_item(&format!("i{i}"))).unwrap();
        }
        Arc::new(c)
    }

    #[test]
    fn truncation_keeps_most_recent_suffix() {
        let seq: Vec<usize> = (0..30).map(|i| i % 40).collect();
        let users = vec![InteractionSequence { user_id: "u".into(), items: seq.clone(), features: BTreeMap::new() }];
        let ds = Dataset::new(catalog(40), users, "d", 25).unwrap();
        assert_eq!(ds.users[0].items, seq[5..].to_vec());
    }

    #[test]
    fn short_users_are_dropped_and_counted() {
        let users = vec![
            InteractionSequence { user_id: "a".into(), items: vec![0, 1], features: BTreeMap::new() },
            InteractionSequence { user_id: "b".into(), items: vec![0, 1, 2], features: BTreeMap::new() },
        ];
        let ds = Dataset::new(catalog(3), users, "d", 25).unwrap();
        assert_eq!(ds.users.len(), 1);
        assert_eq!(ds.dropped_users, 1);
    }

    #[test]
    fn all_short_is_empty_dataset() {
        let users = vec![InteractionSequence { user_id: "a".into(), items: vec![0], features: BTreeMap::new() }];
        assert!(matches!(Dataset::new(catalog(3), users, "d", 25), Err(CorpusError::EmptyDataset)));
    }

    #[test]
    fn duplicate_insert_is_rejected() {
        let mut c = Catalog::new(CatalogSchema::default());
        c.insert(text_item("a1")).unwrap();
        assert!(matches!(c.insert(text_item("a1")), Err(CorpusError::DuplicateItemId(id)) if id == "a1"));
    }
}
