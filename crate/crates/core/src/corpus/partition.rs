use rand::seq::SliceRandom;

use super::{session_distribution, Catalog, Session};
use crate::error::{Error, Result};
use crate::rng::stage_rng;

/// Session indices split by tail share. `folds[j]` holds the tail sessions
/// of fold `j + 1`; the threshold split has a single fold.
#[derive(Clone, Debug, PartialEq)]
pub struct Partition {
    pub theta: f64,
    pub k: usize,
    pub head: Vec<usize>,
    pub folds: Vec<Vec<usize>>,
}

impl Partition {
    /// All tail-side indices in ascending order.
    pub fn tail(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.folds.iter().flatten().copied().collect();
        all.sort_unstable();
        all
    }

    /// K-fold organization: sessions with no tail item go to `head`, the
    /// rest to fold `kfold_index(q_tail, k)`. No threshold applies.
    pub fn kfold(sessions: &[Session], catalog: &Catalog, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        let mut head = Vec::new();
        let mut folds = vec![Vec::new(); k];
        for (i, s) in sessions.iter().enumerate() {
            let q = session_distribution(s, catalog).tail;
            if q > 0.0 {
                folds[kfold_index(q, k) - 1].push(i);
            } else {
                head.push(i);
            }
        }
        Ok(Partition {
            theta: 0.0,
            k,
            head,
            folds,
        })
    }
}

/// Tail subset: sessions whose tail share strictly exceeds `theta`.
pub fn split_by_threshold(sessions: &[Session], catalog: &Catalog, theta: f64) -> Result<Partition> {
    if !(0.0..=1.0).contains(&theta) {
        return Err(Error::Config(format!("theta must lie in [0, 1], got {theta}")));
    }
    let (mut head, mut tail) = (Vec::new(), Vec::new());
    for (i, s) in sessions.iter().enumerate() {
        if session_distribution(s, catalog).tail > theta {
            tail.push(i);
        } else {
            head.push(i);
        }
    }
    Ok(Partition {
        theta,
        k: 1,
        head,
        folds: vec![tail],
    })
}

/// Tolerance absorbing rounding in `q·k` when `q` is a ratio of small
/// integers, so that e.g. 3/10 with k = 10 lands in fold 3.
const FOLD_EPS: f64 = 1e-9;

/// `⌈q·k⌉` clamped to `1..=k`. Callers route `q = 0` to the base model.
pub fn kfold_index(q_tail: f64, k: usize) -> usize {
    debug_assert!(q_tail > 0.0 && k >= 1);
    let v = (q_tail * k as f64 - FOLD_EPS).ceil();
    (v.max(1.0) as usize).min(k)
}

/// Deterministic seeded split: `round(fraction·n)` sessions go to
/// validation; both halves keep the input order.
pub fn validation_split(sessions: Vec<Session>, fraction: f64, seed: u64) -> Result<(Vec<Session>, Vec<Session>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("validation fraction must lie in (0, 1), got {fraction}")));
    }
    let n = sessions.len();
    let n_valid = (fraction * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stage_rng(seed, "validation_split"));
    let mut is_valid = vec![false; n];
    for &i in &order[..n_valid] {
        is_valid[i] = true;
    }
    let (mut train, mut valid) = (Vec::with_capacity(n - n_valid), Vec::with_capacity(n_valid));
    for (s, v) in sessions.into_iter().zip(is_valid) {
        if v {
            valid.push(s);
        } else {
            train.push(s);
        }
    }
    Ok((train, valid))
}
