use std::collections::HashMap;

use super::{Catalog, Dataset, DatasetStats, RawEvent, Session};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PreprocessConfig {
    pub min_item_count: u64,
    pub min_session_len: usize,
    /// Share of sessions, latest first, held out for testing.
    pub test_fraction: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            min_item_count: 5,
            min_session_len: 2,
            test_fraction: 0.1,
        }
    }
}

impl PreprocessConfig {
    fn validate(&self) -> Result<()> {
        if self.min_item_count < 1 {
            return Err(Error::Config("min_item_count must be at least 1".into()));
        }
        if self.min_session_len < 2 {
            return Err(Error::Config("min_session_len must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::Config("test_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Groups events into sessions, holds out the latest sessions for testing,
/// filters rare items and short sessions, and expands every surviving
/// session into prefix samples.
pub fn preprocess(events: &[RawEvent], config: &PreprocessConfig) -> Result<Dataset> {
    config.validate()?;
    // group by key in first-appearance order; stable sort keeps file order on ties
    let mut order: Vec<&str> = Vec::new();
    let mut groups: HashMap<&str, Vec<(i64, &str)>> = HashMap::new();
    for ev in events {
        groups
            .entry(ev.session_key.as_str())
            .or_insert_with(|| {
                order.push(ev.session_key.as_str());
                Vec::new()
            })
            .push((ev.timestamp, ev.item_key.as_str()));
    }
    let mut sessions: Vec<(i64, Vec<String>)> = order
        .iter()
        .map(|k| {
            let mut clicks = groups.remove(k).expect("grouped key");
            clicks.sort_by_key(|&(ts, _)| ts);
            let end = clicks.last().map(|c| c.0).unwrap_or(0);
            (end, clicks.into_iter().map(|(_, item)| item.to_string()).collect())
        })
        .collect();
    sessions.sort_by_key(|s| s.0);
    let n_test = (config.test_fraction * sessions.len() as f64).floor() as usize;
    let split = sessions.len() - n_test;
    let test: Vec<Vec<String>> = sessions.split_off(split).into_iter().map(|s| s.1).collect();
    let train: Vec<Vec<String>> = sessions.into_iter().map(|s| s.1).collect();
    assemble(train, test, config)
}

/// Shared tail of preprocessing for already-split raw sessions.
///
/// Items with fewer than `min_item_count` training occurrences are dropped,
/// then sessions shorter than `min_session_len`. The catalog holds the items
/// of the surviving training sessions, indexed by first appearance, with
/// counts taken over those sessions. Test clicks on unknown items are
/// dropped.
pub fn assemble(train: Vec<Vec<String>>, test: Vec<Vec<String>>, config: &PreprocessConfig) -> Result<Dataset> {
    config.validate()?;
    let mut raw_counts: HashMap<&str, u64> = HashMap::new();
    for s in &train {
        for item in s {
            *raw_counts.entry(item.as_str()).or_default() += 1;
        }
    }
    let keep = |item: &str| raw_counts.get(item).copied().unwrap_or(0) >= config.min_item_count;
    let train_kept: Vec<Vec<&str>> = train
        .iter()
        .map(|s| s.iter().map(String::as_str).filter(|i| keep(i)).collect::<Vec<_>>())
        .filter(|s: &Vec<&str>| s.len() >= config.min_session_len)
        .collect();

    let mut keys: Vec<String> = Vec::new();
    let mut counts: Vec<u64> = Vec::new();
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut train_idx: Vec<Vec<usize>> = Vec::with_capacity(train_kept.len());
    for s in &train_kept {
        let mut seq = Vec::with_capacity(s.len());
        for &item in s {
            let i = *index.entry(item).or_insert_with(|| {
                keys.push(item.to_string());
                counts.push(0);
                keys.len() - 1
            });
            counts[i] += 1;
            seq.push(i);
        }
        train_idx.push(seq);
    }
    if train_idx.is_empty() {
        return Err(Error::Data(format!(
            "no training sessions survive filtering ({} raw sessions, min_item_count {}, min_session_len {})",
            train.len(),
            config.min_item_count,
            config.min_session_len
        )));
    }
    let test_idx: Vec<Vec<usize>> = test
        .iter()
        .map(|s| s.iter().filter_map(|i| index.get(i.as_str()).copied()).collect::<Vec<_>>())
        .filter(|s: &Vec<usize>| s.len() >= config.min_session_len)
        .collect();
    let catalog = Catalog::new(keys, counts)?;

    let clicks: usize = train_idx.iter().chain(&test_idx).map(Vec::len).sum();
    let stats = DatasetStats {
        clicks,
        train_sessions: train_idx.len(),
        test_sessions: test_idx.len(),
        avg_session_len: clicks as f64 / (train_idx.len() + test_idx.len()) as f64,
        train_samples: 0,
        test_samples: 0,
    };
    let train = expand_prefixes(&train_idx);
    let test = expand_prefixes(&test_idx);
    Ok(Dataset::new(catalog, train, test, stats))
}

/// `[x1..xm]` → `([x1]→x2, [x1,x2]→x3, …)`: m−1 samples per session.
pub(crate) fn expand_prefixes(sessions: &[Vec<usize>]) -> Vec<Session> {
    let mut out = Vec::new();
    for s in sessions {
        for i in 1..s.len() {
            out.push(Session::new(s[..i].to_vec(), s[i]));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::parse_events;

    #[test]
    fn prefix_augmentation() {
        let samples = expand_prefixes(&[vec![0, 1, 2]]);
        assert_eq!(samples, vec![Session::new(vec![0], 1), Session::new(vec![0, 1], 2)]);
    }

    fn events(text: &str) -> Vec<RawEvent> {
        parse_events(text).unwrap().events
    }

    #[test]
    fn rare_items_are_dropped() {
        let mut text = String::new();
        // ten sessions "a b" plus one rare item seen three times
        for s in 0..10 {
            text.push_str(&format!("s{s}\ta\t{}\ns{s}\tb\t{}\n", s * 10, s * 10 + 1));
        }
        for s in 0..3 {
            text.push_str(&format!("r{s}\tc\t{}\nr{s}\trare\t{}\n", 1000 + s, 1001 + s));
        }
        for (s, item) in ["d", "e", "f"].iter().enumerate() {
            for k in 0..5 {
                text.push_str(&format!("t{s}{k}\t{item}\t{}\nt{s}{k}\ta\t{}\n", 2000 + k, 2001 + k));
            }
        }
        let cfg = PreprocessConfig {
            test_fraction: 0.0,
            ..PreprocessConfig::default()
        };
        let ds = preprocess(&events(&text), &cfg).unwrap();
        assert!(ds.catalog.index_of("rare").is_none());
        assert!(ds.catalog.index_of("a").is_some());
    }

    #[test]
    fn clicks_are_ordered_by_timestamp_with_file_order_ties() {
        let text = "s\tc\t30\ns\ta\t10\ns\tb\t10\nx\ta\t1\nx\tb\t2\nx\tc\t3\nx\td\t4\nx\te\t5\n";
        let cfg = PreprocessConfig {
            min_item_count: 1,
            test_fraction: 0.0,
            ..PreprocessConfig::default()
        };
        let ds = preprocess(&events(text), &cfg).unwrap();
        let key = |i: usize| ds.catalog.key(i).to_string();
        // session "x" ends first, so it indexes items first
        let first_s = ds.train.iter().find(|s| s.items.len() == 2 && key(s.items[0]) == "a" && key(s.target) == "c");
        assert!(first_s.is_some(), "expected prefix [a,b] -> c from session s");
    }

    #[test]
    fn latest_sessions_are_held_out() {
        let mut text = String::new();
        for s in 0..10 {
            for (k, item) in ["a", "b", "c", "d", "e"].iter().enumerate() {
                text.push_str(&format!("s{s}\t{item}\t{}\n", s * 100 + k));
            }
        }
        let cfg = PreprocessConfig {
            min_item_count: 1,
            ..PreprocessConfig::default()
        };
        let ds = preprocess(&events(&text), &cfg).unwrap();
        assert_eq!(ds.stats.train_sessions, 9);
        assert_eq!(ds.stats.test_sessions, 1);
        assert_eq!(ds.test.len(), 4);
    }

    #[test]
    fn empty_result_is_an_error() {
        let err = preprocess(&events("s\ta\t1\n"), &PreprocessConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }
}
