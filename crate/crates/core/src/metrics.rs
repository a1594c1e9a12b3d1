//! Accuracy, long-tail and calibration metrics over top-N lists.
//!
//! Every metric is a sequential fold over records in input order, so
//! reports are bit-stable across runs.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{kfold_index, list_distribution, Catalog, PopDistribution};
use crate::error::{Error, Result};
use crate::io::write_atomic;

pub const REPORT_MAGIC: &str = "TCALREPORT";
pub const REPORT_VERSION: u32 = 1;

/// Smoothed value replacing an endpoint of `q` before taking logs.
pub const Q_SMOOTHING: f64 = 0.001;

/// Which model produced a list.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelId {
    Base,
    /// Fine-tuned model `j` (1-based; threshold mode and the single
    /// all-data model use 1).
    Fold(usize),
}

impl fmt::Display for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelId::Base => write!(f, "base"),
            ModelId::Fold(j) => write!(f, "fold-{j}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    /// Position of the session in the evaluated set.
    pub session: usize,
    pub list: Vec<usize>,
    pub target: usize,
    pub q: PopDistribution,
    pub p: PopDistribution,
    pub model: ModelId,
}

impl EvalRecord {
    pub fn new(
        session: usize,
        list: Vec<usize>,
        target: usize,
        q: PopDistribution,
        catalog: &Catalog,
        model: ModelId,
    ) -> Result<Self> {
        let p = list_distribution(&list, catalog)?;
        Ok(EvalRecord {
            session,
            list,
            target,
            q,
            p,
            model,
        })
    }

    /// 1-based position of the target, if listed.
    pub fn rank(&self) -> Option<usize> {
        self.list.iter().position(|&i| i == self.target).map(|r| r + 1)
    }
}

fn list_len(records: &[EvalRecord], what: &str) -> Result<usize> {
    let first = records
        .first()
        .ok_or_else(|| Error::Data(format!("{what} over an empty record set")))?;
    let n = first.list.len();
    if n == 0 || records.iter().any(|r| r.list.len() != n) {
        return Err(Error::Data(format!("{what} needs lists of one common non-zero length")));
    }
    Ok(n)
}

pub fn recall_at_n(records: &[EvalRecord]) -> Result<f64> {
    list_len(records, "recall")?;
    let hits = records.iter().filter(|r| r.rank().is_some()).count();
    Ok(hits as f64 / records.len() as f64)
}

pub fn mrr_at_n(records: &[EvalRecord]) -> Result<f64> {
    list_len(records, "mrr")?;
    let sum = records.iter().filter_map(|r| r.rank()).fold(0.0, |acc, k| acc + 1.0 / k as f64);
    Ok(sum / records.len() as f64)
}

fn recommended(records: &[EvalRecord], catalog: &Catalog) -> Result<Vec<bool>> {
    let mut seen = vec![false; catalog.item_count()];
    for r in records {
        for &i in &r.list {
            *seen
                .get_mut(i)
                .ok_or_else(|| Error::Data(format!("item {i} outside the catalog")))? = true;
        }
    }
    Ok(seen)
}

/// Distinct recommended items over the catalog size.
pub fn coverage_at_n(records: &[EvalRecord], catalog: &Catalog) -> Result<f64> {
    list_len(records, "coverage")?;
    let seen = recommended(records, catalog)?;
    Ok(seen.iter().filter(|&&s| s).count() as f64 / catalog.item_count() as f64)
}

/// Distinct recommended tail items over the tail size.
pub fn tail_coverage_at_n(records: &[EvalRecord], catalog: &Catalog) -> Result<f64> {
    list_len(records, "tail coverage")?;
    let seen = recommended(records, catalog)?;
    let hit = seen
        .iter()
        .zip(catalog.head_flags())
        .filter(|(&s, &head)| s && !head)
        .count();
    Ok(hit as f64 / catalog.tail_count() as f64)
}

/// Mean share of tail items per list.
pub fn tail_at_n(records: &[EvalRecord], catalog: &Catalog) -> Result<f64> {
    let n = list_len(records, "tail ratio")?;
    let mut sum = 0.0;
    for r in records {
        let tails = r.list.iter().filter(|&&i| catalog.is_tail(i)).count();
        sum += tails as f64 / n as f64;
    }
    Ok(sum / records.len() as f64)
}

/// `q` with endpoints moved to `0.001 / 0.999`.
pub fn smooth_q(q: &PopDistribution) -> [f64; 2] {
    if q.tail == 1.0 {
        [Q_SMOOTHING, 1.0 - Q_SMOOTHING]
    } else if q.tail == 0.0 {
        [1.0 - Q_SMOOTHING, Q_SMOOTHING]
    } else {
        q.as_array()
    }
}

/// `KL(p ‖ q)` with `q` smoothed at the endpoints and `0·ln 0 = 0` for `p`.
pub fn calibration_kl(p: &PopDistribution, q: &PopDistribution) -> f64 {
    let q = smooth_q(q);
    p.as_array()
        .iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .fold(0.0, |acc, (&pi, qi)| acc + pi * (pi / qi).ln())
}

/// Mean calibration divergence between list and session mixes.
pub fn c_kl(records: &[EvalRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Data("C_KL over an empty record set".into()));
    }
    let sum = records.iter().fold(0.0, |acc, r| acc + calibration_kl(&r.p, &r.q));
    Ok(sum / records.len() as f64)
}

/// Relative gain `(ours − other) / other`.
pub fn improvement(ours: f64, other: f64) -> Result<f64> {
    if other == 0.0 {
        return Err(Error::Data("improvement against a zero baseline is undefined".into()));
    }
    Ok((ours - other) / other)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "index")]
pub enum Scope {
    All,
    Tail,
    Head,
    /// Records with `kfold_index(q) = j` at the bucket count of the report.
    Bucket(usize),
    /// Records whose observed items are all tail.
    AllTail,
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scope::All => write!(f, "all"),
            Scope::Tail => write!(f, "tail"),
            Scope::Head => write!(f, "head"),
            Scope::Bucket(j) => write!(f, "bucket-{j}"),
            Scope::AllTail => write!(f, "q1"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scope: Scope,
    pub n: usize,
    pub records: usize,
    pub recall: f64,
    pub mrr: f64,
    pub coverage: f64,
    pub tail_coverage: f64,
    pub tail_ratio: f64,
    pub c_kl: f64,
}

impl MetricsReport {
    pub fn compute(scope: Scope, records: &[EvalRecord], catalog: &Catalog) -> Result<Self> {
        Ok(MetricsReport {
            scope,
            n: list_len(records, "report")?,
            records: records.len(),
            recall: recall_at_n(records)?,
            mrr: mrr_at_n(records)?,
            coverage: coverage_at_n(records, catalog)?,
            tail_coverage: tail_coverage_at_n(records, catalog)?,
            tail_ratio: tail_at_n(records, catalog)?,
            c_kl: c_kl(records)?,
        })
    }

    /// `(name, value)` pairs in report order.
    pub fn metrics(&self) -> [(&'static str, f64); 6] {
        [
            ("recall", self.recall),
            ("mrr", self.mrr),
            ("coverage", self.coverage),
            ("tail_coverage", self.tail_coverage),
            ("tail_ratio", self.tail_ratio),
            ("c_kl", self.c_kl),
        ]
    }
}

/// Reports for the records with `q(1) > 0` grouped by `kfold_index(q, k)`,
/// ascending, empty buckets omitted; then the `q(1) = 1` subset if present.
pub fn bucketed_report(records: &[EvalRecord], catalog: &Catalog, k: usize) -> Result<Vec<MetricsReport>> {
    if k == 0 {
        return Err(Error::Config("bucket count must be at least 1".into()));
    }
    let mut buckets: Vec<Vec<EvalRecord>> = vec![Vec::new(); k];
    for r in records.iter().filter(|r| r.q.tail > 0.0) {
        buckets[kfold_index(r.q.tail, k) - 1].push(r.clone());
    }
    let mut out = Vec::new();
    for (j, b) in buckets.iter().enumerate() {
        if !b.is_empty() {
            out.push(MetricsReport::compute(Scope::Bucket(j + 1), b, catalog)?);
        }
    }
    let full: Vec<EvalRecord> = records.iter().filter(|r| r.q.tail == 1.0).cloned().collect();
    if !full.is_empty() {
        out.push(MetricsReport::compute(Scope::AllTail, &full, catalog)?);
    }
    Ok(out)
}

/// Overall, tail (`q(1) > θ`) and head scopes followed by the buckets.
/// Empty scopes are omitted.
pub fn scoped_reports(records: &[EvalRecord], catalog: &Catalog, theta: f64, buckets: usize) -> Result<Vec<MetricsReport>> {
    let mut out = vec![MetricsReport::compute(Scope::All, records, catalog)?];
    let (tail, head): (Vec<EvalRecord>, Vec<EvalRecord>) = records.iter().cloned().partition(|r| r.q.tail > theta);
    if !tail.is_empty() {
        out.push(MetricsReport::compute(Scope::Tail, &tail, catalog)?);
    }
    if !head.is_empty() {
        out.push(MetricsReport::compute(Scope::Head, &head, catalog)?);
    }
    out.extend(bucketed_report(records, catalog, buckets)?);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub magic: String,
    pub version: u32,
    pub theta: f64,
    pub buckets: usize,
    pub reports: Vec<MetricsReport>,
}

impl ReportFile {
    pub fn new(theta: f64, buckets: usize, reports: Vec<MetricsReport>) -> Self {
        ReportFile {
            magic: REPORT_MAGIC.into(),
            version: REPORT_VERSION,
            theta,
            buckets,
            reports,
        }
    }

    pub fn find(&self, scope: &Scope) -> Option<&MetricsReport> {
        self.reports.iter().find(|r| &r.scope == scope)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// One row per (scope, metric), after a `# magic version` line.
    pub fn to_csv(&self) -> String {
        let mut out = format!("# {REPORT_MAGIC} {REPORT_VERSION}\nscope,records,n,metric,value\n");
        for r in &self.reports {
            for (name, v) in r.metrics() {
                out.push_str(&format!("{},{},{},{},{}\n", r.scope, r.records, r.n, name, v));
            }
        }
        out
    }

    pub fn save(&self, json: &Path, csv: &Path) -> Result<()> {
        write_atomic(json, self.to_json().as_bytes())?;
        write_atomic(csv, self.to_csv().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = crate::io::read_to_string(path)?;
        let file: ReportFile = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        if file.magic != REPORT_MAGIC || file.version != REPORT_VERSION {
            return Err(Error::format(path, format!("not a version {REPORT_VERSION} report")));
        }
        Ok(file)
    }
}

/// Side-by-side table of several runs with improvement columns for every
/// run against `baseline`. Rows are (scope, metric) in the baseline's order;
/// a cell is empty when a run lacks that scope or the baseline value is 0.
pub fn comparison_csv(runs: &[(String, ReportFile)], baseline: usize) -> Result<String> {
    let (base_name, base) = runs
        .get(baseline)
        .ok_or_else(|| Error::Config(format!("baseline run {baseline} out of range")))?;
    let others: Vec<&(String, ReportFile)> = runs.iter().enumerate().filter(|(i, _)| *i != baseline).map(|(_, r)| r).collect();
    let mut out = format!("# {REPORT_MAGIC}-COMPARISON {REPORT_VERSION}\nscope,metric");
    for (name, _) in runs {
        out.push_str(&format!(",{name}"));
    }
    for (name, _) in &others {
        out.push_str(&format!(",improvement:{name}_vs_{base_name}"));
    }
    out.push('\n');
    for rep in &base.reports {
        for (mi, (metric, bv)) in rep.metrics().into_iter().enumerate() {
            out.push_str(&format!("{},{}", rep.scope, metric));
            let value = |f: &ReportFile| f.find(&rep.scope).map(|r| r.metrics()[mi].1);
            for (_, f) in runs {
                match value(f) {
                    Some(v) => out.push_str(&format!(",{v}")),
                    None => out.push(','),
                }
            }
            for (_, f) in &others {
                match value(f).map(|v| improvement(v, bv)) {
                    Some(Ok(g)) => out.push_str(&format!(",{g}")),
                    _ => out.push(','),
                }
            }
            out.push('\n');
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::test_support::ranked_catalog;
    use proptest::prelude::*;
    use rand::seq::index::sample;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rec(list: Vec<usize>, target: usize, q_tail: f64, cat: &Catalog) -> EvalRecord {
        let q = PopDistribution {
            head: 1.0 - q_tail,
            tail: q_tail,
        };
        EvalRecord::new(0, list, target, q, cat, ModelId::Base).unwrap()
    }

    fn random_records(seed: u64, count: usize, items: usize, n: usize, cat: &Catalog) -> Vec<EvalRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                let list = sample(&mut rng, items, n).into_vec();
                let len = rng.gen_range(1..8);
                let tails = rng.gen_range(0..=len);
                rec(list, rng.gen_range(0..items), tails as f64 / len as f64, cat)
            })
            .collect()
    }

    #[test]
    fn recall_and_mrr_examples() {
        let cat = ranked_catalog(100);
        let r = rec(vec![5, 6, 7, 8, 9], 8, 0.0, &cat);
        assert_eq!(mrr_at_n(std::slice::from_ref(&r)).unwrap(), 0.25);
        assert_eq!(recall_at_n(std::slice::from_ref(&r)).unwrap(), 1.0);
        let miss = rec(vec![5, 6, 7, 8, 9], 50, 0.0, &cat);
        assert_eq!(mrr_at_n(std::slice::from_ref(&miss)).unwrap(), 0.0);
        assert_eq!(recall_at_n(&[miss]).unwrap(), 0.0);
        assert!(recall_at_n(&[]).is_err());
        assert!(mrr_at_n(&[]).is_err());
    }

    #[test]
    fn coverage_examples() {
        let cat = ranked_catalog(100);
        let list: Vec<usize> = (0..20).collect();
        let one = [rec(list.clone(), 0, 0.0, &cat)];
        assert_eq!(coverage_at_n(&one, &cat).unwrap(), 0.20);
        let many = vec![one[0].clone(); 5];
        assert_eq!(coverage_at_n(&many, &cat).unwrap(), 0.20);
        // items 0..20 are exactly the head of a 100-item ranked catalog
        assert_eq!(tail_coverage_at_n(&one, &cat).unwrap(), 0.0);
        assert_eq!(tail_at_n(&one, &cat).unwrap(), 0.0);
        let all_tail: Vec<EvalRecord> = (20..100).collect::<Vec<_>>().chunks(20).map(|c| rec(c.to_vec(), 0, 0.0, &cat)).collect();
        assert_eq!(tail_coverage_at_n(&all_tail, &cat).unwrap(), 1.0);
        let mixed: Vec<usize> = (0..15).chain(20..25).collect();
        assert_eq!(tail_at_n(&[rec(mixed, 0, 0.0, &cat)], &cat).unwrap(), 0.25);
    }

    #[test]
    fn c_kl_examples() {
        let cat = ranked_catalog(100);
        // p = [0.9, 0.1]: 18 head and 2 tail items
        let list: Vec<usize> = (0..18).chain(20..22).collect();
        let r = rec(list, 0, 0.5, &cat);
        let v = c_kl(&[r]).unwrap();
        assert!((v - 0.3681).abs() < 5e-5, "{v}");
        let direct = 0.9 * (0.9f64 / 0.5).ln() + 0.1 * (0.1f64 / 0.5).ln();
        assert_eq!(v, direct);

        let same = rec((0..15).chain(20..25).collect(), 0, 0.25, &cat);
        assert_eq!(c_kl(&[same]).unwrap(), 0.0);

        let all_tail = rec((20..40).collect(), 0, 1.0, &cat);
        let v = c_kl(&[all_tail]).unwrap();
        assert_eq!(v, (1.0f64 / 0.999).ln());
        assert!(v > 0.0 && v < 0.0011);
        assert!(c_kl(&[]).is_err());
    }

    #[test]
    fn improvement_examples() {
        assert!((improvement(6.73, 6.43).unwrap() - 0.0467).abs() < 5e-5);
        assert_eq!(improvement(3.0, 3.0).unwrap(), 0.0);
        assert!(improvement(1.0, 0.0).is_err());
    }

    #[test]
    fn buckets() {
        let cat = ranked_catalog(100);
        let list: Vec<usize> = (0..20).collect();
        let recs: Vec<EvalRecord> = (0..4).map(|_| rec(list.clone(), 0, 0.05, &cat)).collect();
        let b = bucketed_report(&recs, &cat, 10).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].scope, Scope::Bucket(1));
        assert_eq!(b[0].records, 4);

        let recs = random_records(3, 500, 100, 20, &cat);
        let b = bucketed_report(&recs, &cat, 10).unwrap();
        let in_buckets: usize = b.iter().filter(|r| matches!(r.scope, Scope::Bucket(_))).map(|r| r.records).sum();
        assert_eq!(in_buckets, recs.iter().filter(|r| r.q.tail > 0.0).count());
        let q1 = b.iter().find(|r| r.scope == Scope::AllTail).unwrap();
        assert_eq!(q1.records, recs.iter().filter(|r| r.q.tail == 1.0).count());
    }

    #[test]
    fn scopes_partition_records() {
        let cat = ranked_catalog(100);
        let recs = random_records(4, 300, 100, 20, &cat);
        let reps = scoped_reports(&recs, &cat, 0.0, 10).unwrap();
        let get = |s: Scope| reps.iter().find(|r| r.scope == s).unwrap().records;
        assert_eq!(get(Scope::Tail) + get(Scope::Head), get(Scope::All));
    }

    #[test]
    fn matches_brute_force_oracle() {
        let cat = ranked_catalog(200);
        let recs = random_records(5, 1000, 200, 20, &cat);
        let mut hits = 0.0;
        let mut rr = 0.0;
        let mut tails = 0.0;
        let mut seen = std::collections::HashSet::new();
        for r in &recs {
            for (pos, &i) in r.list.iter().enumerate() {
                seen.insert(i);
                if i == r.target {
                    hits += 1.0;
                    rr += 1.0 / (pos + 1) as f64;
                }
                if !cat.is_head(i) {
                    tails += 1.0 / 20.0;
                }
            }
        }
        let m = recs.len() as f64;
        assert!((recall_at_n(&recs).unwrap() - hits / m).abs() < 1e-12);
        assert!((mrr_at_n(&recs).unwrap() - rr / m).abs() < 1e-12);
        assert!((tail_at_n(&recs, &cat).unwrap() - tails / m).abs() < 1e-12);
        assert!((coverage_at_n(&recs, &cat).unwrap() - seen.len() as f64 / 200.0).abs() < 1e-12);
        let tail_seen = seen.iter().filter(|&&i| !cat.is_head(i)).count();
        assert!((tail_coverage_at_n(&recs, &cat).unwrap() - tail_seen as f64 / 160.0).abs() < 1e-12);
    }

    #[test]
    fn report_files_round_trip_and_compare() {
        let cat = ranked_catalog(100);
        let recs = random_records(6, 200, 100, 20, &cat);
        let file = ReportFile::new(0.0, 10, scoped_reports(&recs, &cat, 0.0, 10).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let (j, c) = (dir.path().join("r.json"), dir.path().join("r.csv"));
        file.save(&j, &c).unwrap();
        assert_eq!(ReportFile::load(&j).unwrap(), file);
        let csv = std::fs::read_to_string(&c).unwrap();
        assert_eq!(csv.lines().count(), 2 + 6 * file.reports.len());

        let single = comparison_csv(&[("a".into(), file.clone())], 0).unwrap();
        assert!(!single.contains("improvement"));
        let mut better = file.clone();
        better.reports[0].tail_ratio *= 1.5;
        let table = comparison_csv(&[("base".into(), file.clone()), ("ours".into(), better)], 0).unwrap();
        let row = table.lines().find(|l| l.starts_with("all,tail_ratio,")).unwrap();
        let gain: f64 = row.rsplit(',').next().unwrap().parse().unwrap();
        assert!((gain - 0.5).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn ratios_stay_in_range(seed in 0u64..1000, count in 1usize..60) {
            let cat = ranked_catalog(60);
            let recs = random_records(seed, count, 60, 10, &cat);
            let rep = MetricsReport::compute(Scope::All, &recs, &cat).unwrap();
            for (_, v) in rep.metrics() {
                prop_assert!(v >= 0.0);
            }
            for v in [rep.recall, rep.mrr, rep.coverage, rep.tail_coverage, rep.tail_ratio] {
                prop_assert!(v <= 1.0);
            }
            prop_assert!(rep.mrr <= rep.recall);
            let sub = MetricsReport::compute(Scope::All, &recs[..count / 2 + 1], &cat).unwrap();
            prop_assert!(sub.coverage <= rep.coverage);
        }
    }
}
