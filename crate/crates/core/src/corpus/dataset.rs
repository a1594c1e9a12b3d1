//! Processed dataset container: line-delimited JSON with a header line, one
//! line per catalog item, then one line per sample.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Catalog, Session};
use crate::error::{Error, Result};
use crate::io::{read_to_string, write_atomic};

pub const DATASET_MAGIC: &str = "TCALDATA";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub clicks: usize,
    pub train_sessions: usize,
    pub test_sessions: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    pub avg_session_len: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub catalog: Catalog,
    pub train: Vec<Session>,
    pub test: Vec<Session>,
    pub stats: DatasetStats,
}

#[derive(Serialize, Deserialize)]
struct Header {
    magic: String,
    version: u32,
    item_count: usize,
    train_samples: usize,
    test_samples: usize,
    catalog_hash: String,
    stats: DatasetStats,
}

#[derive(Serialize, Deserialize)]
struct ItemLine {
    key: String,
    count: u64,
    head: bool,
}

#[derive(Serialize, Deserialize)]
struct SampleLine {
    split: String,
    items: Vec<usize>,
    target: usize,
}

impl Dataset {
    pub fn new(catalog: Catalog, train: Vec<Session>, test: Vec<Session>, mut stats: DatasetStats) -> Self {
        stats.train_samples = train.len();
        stats.test_samples = test.len();
        Dataset {
            catalog,
            train,
            test,
            stats,
        }
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let header = Header {
            magic: DATASET_MAGIC.into(),
            version: DATASET_VERSION,
            item_count: self.catalog.item_count(),
            train_samples: self.train.len(),
            test_samples: self.test.len(),
            catalog_hash: self.catalog.hash(),
            stats: self.stats.clone(),
        };
        let push = |out: &mut String, v: String| {
            out.push_str(&v);
            out.push('\n');
        };
        push(&mut out, serde_json::to_string(&header).expect("header serializes"));
        for i in 0..self.catalog.item_count() {
            let line = ItemLine {
                key: self.catalog.key(i).to_string(),
                count: self.catalog.count(i),
                head: self.catalog.is_head(i),
            };
            push(&mut out, serde_json::to_string(&line).expect("item serializes"));
        }
        for (split, samples) in [("train", &self.train), ("test", &self.test)] {
            for s in samples {
                let line = SampleLine {
                    split: split.into(),
                    items: s.items.clone(),
                    target: s.target,
                };
                push(&mut out, serde_json::to_string(&line).expect("sample serializes"));
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_jsonl().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_jsonl(&read_to_string(path)?, path)
    }

    pub fn from_jsonl(text: &str, origin: &Path) -> Result<Self> {
        let mut lines = text.lines();
        let header: Header = serde_json::from_str(
            lines
                .next()
                .ok_or_else(|| Error::format(origin, "empty dataset file"))?,
        )?;
        if header.magic != DATASET_MAGIC {
            return Err(Error::format(origin, "not a dataset file (bad magic)"));
        }
        if header.version != DATASET_VERSION {
            return Err(Error::format(origin, format!("unsupported dataset version {}", header.version)));
        }
        let mut keys = Vec::with_capacity(header.item_count);
        let mut counts = Vec::with_capacity(header.item_count);
        let mut head = Vec::with_capacity(header.item_count);
        for _ in 0..header.item_count {
            let line = lines
                .next()
                .ok_or_else(|| Error::format(origin, "truncated item table"))?;
            let item: ItemLine = serde_json::from_str(line)?;
            keys.push(item.key);
            counts.push(item.count);
            head.push(item.head);
        }
        let catalog = Catalog::from_parts(keys, counts, head)?;
        if catalog.hash() != header.catalog_hash {
            return Err(Error::format(origin, "catalog hash mismatch"));
        }
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let s: SampleLine = serde_json::from_str(line)?;
            if s.items.is_empty() {
                return Err(Error::format(origin, "sample with no observed items"));
            }
            if s.items.iter().chain(std::iter::once(&s.target)).any(|&i| i >= catalog.item_count()) {
                return Err(Error::format(origin, "sample references an unknown item"));
            }
            let session = Session::new(s.items, s.target);
            match s.split.as_str() {
                "train" => train.push(session),
                "test" => test.push(session),
                other => return Err(Error::format(origin, format!("unknown split {other:?}"))),
            }
        }
        if train.len() != header.train_samples || test.len() != header.test_samples {
            return Err(Error::format(origin, "sample counts disagree with header"));
        }
        Ok(Dataset {
            catalog,
            train,
            test,
            stats: header.stats,
        })
    }
}
