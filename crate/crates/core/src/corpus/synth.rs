//! Seeded synthetic click logs with Zipf item popularity and sequential
//! structure.
//!
//! Item `r` has popularity weight `(r + 1)^-s`. Every item owns a short list
//! of successors; each next click follows a successor of the current item
//! with probability [`FOLLOW_PROB`] and is otherwise a fresh draw. Items in
//! the long tail (rank ≥ 20% of the catalog) link to other tail items half
//! of the time. A `tail_affinity_fraction` of sessions draw half of their
//! fresh clicks uniformly from the tail.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{assemble, Dataset, PreprocessConfig};
use crate::error::{Error, Result};
use crate::rng::stage_rng;

const SUCCESSORS: usize = 4;
const FOLLOW_PROB: f64 = 0.6;
const TAIL_DRAW_PROB: f64 = 0.5;
const MAX_SESSION_LEN: usize = 40;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub item_count: usize,
    pub session_count: usize,
    pub zipf_exponent: f64,
    pub mean_session_len: f64,
    pub tail_affinity_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            item_count: 500,
            session_count: 20_000,
            zipf_exponent: 1.1,
            mean_session_len: 5.0,
            tail_affinity_fraction: 0.3,
            seed: 42,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.item_count < 10 {
            return Err(Error::Config("synthetic catalog needs at least 10 items".into()));
        }
        if self.session_count < 10 {
            return Err(Error::Config("need at least 10 synthetic sessions".into()));
        }
        if !(self.zipf_exponent.is_finite() && self.zipf_exponent >= 0.0) {
            return Err(Error::Config("zipf exponent must be finite and non-negative".into()));
        }
        if !(self.mean_session_len >= 2.0 && self.mean_session_len < MAX_SESSION_LEN as f64) {
            return Err(Error::Config(format!(
                "mean session length must lie in [2, {MAX_SESSION_LEN})"
            )));
        }
        if !(0.0..=1.0).contains(&self.tail_affinity_fraction) {
            return Err(Error::Config("tail affinity fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

struct Sampler {
    cdf: Vec<f64>,
    tail_start: usize,
    successors: Vec<[usize; SUCCESSORS]>,
}

impl Sampler {
    fn new(cfg: &SynthConfig) -> Self {
        let n = cfg.item_count;
        let mut cdf = Vec::with_capacity(n);
        let mut acc = 0.0;
        for r in 0..n {
            acc += ((r + 1) as f64).powf(-cfg.zipf_exponent);
            cdf.push(acc);
        }
        for v in &mut cdf {
            *v /= acc;
        }
        let tail_start = (0.2 * n as f64).ceil() as usize;
        let mut s = Sampler {
            cdf,
            tail_start,
            successors: Vec::new(),
        };
        let mut rng = stage_rng(cfg.seed, "synth/successors");
        s.successors = (0..n)
            .map(|item| {
                let mut next = [0; SUCCESSORS];
                for slot in &mut next {
                    *slot = if item >= tail_start && rng.gen::<f64>() < TAIL_DRAW_PROB {
                        s.uniform_tail(&mut rng)
                    } else {
                        s.zipf(&mut rng)
                    };
                }
                next
            })
            .collect();
        s
    }

    fn zipf(&self, rng: &mut ChaCha8Rng) -> usize {
        let u: f64 = rng.gen();
        self.cdf.partition_point(|&c| c < u).min(self.cdf.len() - 1)
    }

    fn uniform_tail(&self, rng: &mut ChaCha8Rng) -> usize {
        rng.gen_range(self.tail_start..self.cdf.len())
    }

    fn fresh(&self, rng: &mut ChaCha8Rng, tail_affine: bool) -> usize {
        if tail_affine && rng.gen::<f64>() < TAIL_DRAW_PROB {
            self.uniform_tail(rng)
        } else {
            self.zipf(rng)
        }
    }

    fn session(&self, rng: &mut ChaCha8Rng, mean_len: f64, tail_affinity: f64) -> Vec<usize> {
        let tail_affine = rng.gen::<f64>() < tail_affinity;
        // 2 + geometric extra clicks with the requested mean
        let extra_mean = mean_len - 2.0;
        let cont = extra_mean / (1.0 + extra_mean);
        let mut len = 2;
        while len < MAX_SESSION_LEN && rng.gen::<f64>() < cont {
            len += 1;
        }
        let mut items = Vec::with_capacity(len);
        let mut cur = self.fresh(rng, tail_affine);
        items.push(cur);
        while items.len() < len {
            cur = if rng.gen::<f64>() < FOLLOW_PROB {
                self.successors[cur][rng.gen_range(0..SUCCESSORS)]
            } else {
                self.fresh(rng, tail_affine)
            };
            items.push(cur);
        }
        items
    }
}

/// Generates raw sessions, splits them 90/10 by seeded shuffle, and runs
/// them through [`assemble`] with `min_item_count = 1`.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let sampler = Sampler::new(cfg);
    let raw: Vec<Vec<usize>> = (0..cfg.session_count)
        .map(|i| {
            let mut rng = stage_rng(cfg.seed, &format!("synth/session/{i}"));
            sampler.session(&mut rng, cfg.mean_session_len, cfg.tail_affinity_fraction)
        })
        .collect();
    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.shuffle(&mut stage_rng(cfg.seed, "synth/split"));
    let n_test = raw.len() / 10;
    let mut is_test = vec![false; raw.len()];
    for &i in &order[..n_test] {
        is_test[i] = true;
    }
    let keyed = |s: &Vec<usize>| s.iter().map(|i| format!("item{i}")).collect::<Vec<_>>();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (s, t) in raw.iter().zip(is_test) {
        if t {
            test.push(keyed(s));
        } else {
            train.push(keyed(s));
        }
    }
    let pre = PreprocessConfig {
        min_item_count: 1,
        min_session_len: 2,
        test_fraction: 0.0,
    };
    assemble(train, test, &pre)
}
