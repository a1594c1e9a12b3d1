use std::path::Path;

use log::warn;

use crate::error::{Error, Result};

/// One click: `session_key<TAB>item_key<TAB>timestamp_ms`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawEvent {
    pub session_key: String,
    pub item_key: String,
    pub timestamp: i64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct IngestReport {
    pub events: Vec<RawEvent>,
    /// 1-based line numbers of skipped lines.
    pub malformed: Vec<usize>,
}

/// Largest tolerated share of malformed lines.
const MAX_MALFORMED_FRACTION: f64 = 0.1;

pub fn ingest(path: &Path) -> Result<IngestReport> {
    let text = crate::io::read_to_string(path)?;
    let report = parse_events(&text).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    })?;
    if report.events.is_empty() {
        warn!("{} contains no events", path.display());
    }
    Ok(report)
}

fn parse_line(line: &str) -> Option<RawEvent> {
    let mut fields = line.split('\t');
    let session_key = fields.next()?.trim();
    let item_key = fields.next()?.trim();
    let timestamp: i64 = fields.next()?.trim().parse().ok()?;
    if fields.next().is_some() || session_key.is_empty() || item_key.is_empty() || timestamp < 0 {
        return None;
    }
    Some(RawEvent {
        session_key: session_key.to_string(),
        item_key: item_key.to_string(),
        timestamp,
    })
}

/// Parses event-log text, skipping blank lines. Malformed lines are counted;
/// more than 10% of them is an error listing their line numbers.
pub fn parse_events(text: &str) -> Result<IngestReport> {
    let mut report = IngestReport::default();
    let mut nonblank = 0usize;
    for (no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        nonblank += 1;
        match parse_line(line) {
            Some(ev) => report.events.push(ev),
            None => report.malformed.push(no + 1),
        }
    }
    if !report.malformed.is_empty() {
        let share = report.malformed.len() as f64 / nonblank as f64;
        if share > MAX_MALFORMED_FRACTION {
            let shown: Vec<String> = report.malformed.iter().take(20).map(|n| n.to_string()).collect();
            return Err(Error::Data(format!(
                "{} of {nonblank} lines malformed (lines {}{})",
                report.malformed.len(),
                shown.join(", "),
                if report.malformed.len() > 20 { ", ..." } else { "" }
            )));
        }
        warn!("skipped {} malformed lines", report.malformed.len());
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_valid_lines_in_order() {
        let r = parse_events("s1\ta\t10\ns1\tb\t20\ns2\ta\t5\n").unwrap();
        assert_eq!(r.events.len(), 3);
        assert_eq!(r.events[2].session_key, "s2");
        assert_eq!(r.events[1].timestamp, 20);
        assert!(r.malformed.is_empty());
    }

    #[test]
    fn empty_input_gives_no_events() {
        assert!(parse_events("").unwrap().events.is_empty());
    }

    #[test]
    fn bad_timestamp_is_skipped_and_counted() {
        let mut text = String::new();
        for i in 0..20 {
            text.push_str(&format!("s{i}\tx\t{i}\n"));
        }
        text.push_str("s9\ty\tnoon\n");
        let r = parse_events(&text).unwrap();
        assert_eq!(r.events.len(), 20);
        assert_eq!(r.malformed, vec![21]);
    }

    #[test]
    fn too_many_malformed_lines_is_fatal_with_line_numbers() {
        let err = parse_events("a\tb\t1\nbad\nalso bad\t\t\nc\td\t-4\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("lines 2, 3, 4"), "{msg}");
    }
}
