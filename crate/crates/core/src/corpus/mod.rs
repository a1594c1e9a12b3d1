//! Session data: ingestion, preprocessing, the head/tail item split, and the
//! session partitions used by curriculum fine-tuning.

mod dataset;
mod ingest;
mod partition;
mod preprocess;
mod synth;

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use dataset::{Dataset, DatasetStats, DATASET_MAGIC, DATASET_VERSION};
pub use ingest::{ingest, parse_events, IngestReport, RawEvent};
pub use partition::{kfold_index, split_by_threshold, validation_split, Partition};
pub use preprocess::{assemble, preprocess, PreprocessConfig};
pub use synth::{synth_generate, SynthConfig};

/// Share of the catalog flagged as head items.
pub const HEAD_FRACTION: f64 = 0.2;

/// A prefix sample: the observed items of a session and the item that
/// followed them.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Session {
    pub items: Vec<usize>,
    pub target: usize,
}

impl Session {
    pub fn new(items: Vec<usize>, target: usize) -> Self {
        Session { items, target }
    }
}

/// Two-point distribution over {head, tail}; index 0 is head, 1 is tail.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PopDistribution {
    pub head: f64,
    pub tail: f64,
}

impl PopDistribution {
    pub const HEAD: PopDistribution = PopDistribution { head: 1.0, tail: 0.0 };
    pub const TAIL: PopDistribution = PopDistribution { head: 0.0, tail: 1.0 };

    /// Distribution of a collection with `tail` tail members out of `total`.
    pub fn from_counts(tail: usize, total: usize) -> Self {
        assert!(total > 0 && tail <= total);
        let t = tail as f64 / total as f64;
        PopDistribution { head: 1.0 - t, tail: t }
    }

    pub fn as_array(&self) -> [f64; 2] {
        [self.head, self.tail]
    }
}

/// Item vocabulary with training popularity and the head/tail flag.
#[derive(Clone, Debug, PartialEq)]
pub struct Catalog {
    keys: Vec<String>,
    counts: Vec<u64>,
    head: Vec<bool>,
    index: HashMap<String, usize>,
}

impl Catalog {
    /// Builds a catalog from item keys (dense index = position) and their
    /// training counts, flagging the head set.
    pub fn new(keys: Vec<String>, counts: Vec<u64>) -> Result<Self> {
        let head = head_tail_partition(&counts);
        Self::from_parts(keys, counts, head)
    }

    pub(crate) fn from_parts(keys: Vec<String>, counts: Vec<u64>, head: Vec<bool>) -> Result<Self> {
        if keys.len() != counts.len() || keys.len() != head.len() {
            return Err(Error::Data("catalog columns have different lengths".into()));
        }
        if keys.len() < 5 {
            return Err(Error::Data(format!(
                "catalog needs at least 5 items for a non-empty head set, got {}",
                keys.len()
            )));
        }
        let expected = head_count_for(keys.len());
        let flagged = head.iter().filter(|&&h| h).count();
        if flagged != expected {
            return Err(Error::Data(format!(
                "catalog flags {flagged} head items, expected {expected}"
            )));
        }
        let mut index = HashMap::with_capacity(keys.len());
        for (i, k) in keys.iter().enumerate() {
            if k.is_empty() {
                return Err(Error::Data(format!("item {i} has an empty key")));
            }
            if index.insert(k.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate item key {k:?}")));
            }
        }
        Ok(Catalog {
            keys,
            counts,
            head,
            index,
        })
    }

    pub fn item_count(&self) -> usize {
        self.keys.len()
    }

    pub fn key(&self, item: usize) -> &str {
        &self.keys[item]
    }

    pub fn index_of(&self, key: &str) -> Option<usize> {
        self.index.get(key).copied()
    }

    pub fn count(&self, item: usize) -> u64 {
        self.counts[item]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn is_head(&self, item: usize) -> bool {
        self.head[item]
    }

    pub fn is_tail(&self, item: usize) -> bool {
        !self.head[item]
    }

    pub fn head_flags(&self) -> &[bool] {
        &self.head
    }

    pub fn head_count(&self) -> usize {
        self.head.iter().filter(|&&h| h).count()
    }

    pub fn tail_count(&self) -> usize {
        self.item_count() - self.head_count()
    }

    /// Items ordered by (count desc, index asc).
    pub fn by_popularity(&self) -> Vec<usize> {
        popularity_order(&self.counts)
    }

    /// SHA-256 over the item table; identifies the catalog in checkpoints
    /// and registry manifests.
    pub fn hash(&self) -> String {
        let mut buf = Vec::new();
        for i in 0..self.item_count() {
            buf.extend_from_slice(self.keys[i].as_bytes());
            buf.push(0);
            buf.extend_from_slice(&self.counts[i].to_le_bytes());
            buf.push(self.head[i] as u8);
        }
        crate::io::sha256_hex(&buf)
    }
}

fn popularity_order(counts: &[u64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    order
}

pub(crate) fn head_count_for(items: usize) -> usize {
    (HEAD_FRACTION * items as f64).floor() as usize
}

/// Flags the `floor(0.2·n)` most popular items as head, breaking count ties
/// by lower index.
pub fn head_tail_partition(counts: &[u64]) -> Vec<bool> {
    let mut flags = vec![false; counts.len()];
    for &i in popularity_order(counts).iter().take(head_count_for(counts.len())) {
        flags[i] = true;
    }
    flags
}

/// `[1, 0]` for a head item, `[0, 1]` for a tail item.
pub fn pop_vector(item: usize, catalog: &Catalog) -> Result<PopDistribution> {
    if item >= catalog.item_count() {
        return Err(Error::Data(format!(
            "item {item} out of range for catalog of {}",
            catalog.item_count()
        )));
    }
    Ok(if catalog.is_head(item) {
        PopDistribution::HEAD
    } else {
        PopDistribution::TAIL
    })
}

/// Head/tail mix of the observed items of `session` (the target is excluded).
pub fn session_distribution(session: &Session, catalog: &Catalog) -> PopDistribution {
    let tail = session.items.iter().filter(|&&i| catalog.is_tail(i)).count();
    PopDistribution::from_counts(tail, session.items.len())
}

/// Head/tail mix of a top-N list; lists must not repeat items.
pub fn list_distribution(list: &[usize], catalog: &Catalog) -> Result<PopDistribution> {
    if list.is_empty() {
        return Err(Error::Data("empty recommendation list".into()));
    }
    let mut seen = HashSet::with_capacity(list.len());
    for &i in list {
        if !seen.insert(i) {
            return Err(Error::Data(format!("recommendation list repeats item {i}")));
        }
        if i >= catalog.item_count() {
            return Err(Error::Data(format!("item {i} out of range")));
        }
    }
    let tail = list.iter().filter(|&&i| catalog.is_tail(i)).count();
    Ok(PopDistribution::from_counts(tail, list.len()))
}
