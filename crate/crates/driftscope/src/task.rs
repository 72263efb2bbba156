//! Synthetic training data: a Markov-chain "story" corpus for the language
//! modelling term, plus codeword->value retrieval probe sequences. A probe
//! sequence plants a (codeword, value) pair early, repeats the codeword at a
//! configurable gap, and scores the model's prediction of the value at the
//! repeated position. Training gaps and evaluation OOD gaps are disjoint.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// Successors per filler token in the synthetic corpus chain. Small enough
/// that the LM loss has room to fall well below the uniform baseline.
const BRANCHING: usize = 4;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TaskConfig {
    pub p_probe: f64,
    /// Codeword ids [start, end).
    pub codewords: (u32, u32),
    /// Value ids [start, end).
    pub values: (u32, u32),
    /// Training gap distances, inclusive.
    pub train_gaps: (usize, usize),
    /// Out-of-distribution gap distances, inclusive; disjoint from training.
    pub ood_gaps: (usize, usize),
    /// First-pair start positions [min, max], inclusive.
    pub pair_pos: (usize, usize),
    pub corpus_seed: u64,
}

impl TaskConfig {
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_probe) {
            return Err(Error::InvalidConfig("p_probe must be in [0,1]".into()));
        }
        let v = cfg.vocab as u32;
        if self.codewords.0 >= self.codewords.1
            || self.values.0 >= self.values.1
            || self.values.1 > v
            || self.codewords.1 > self.values.0 && self.codewords.0 < self.values.1
        {
            return Err(Error::InvalidConfig(
                "codeword/value ranges must be non-empty, disjoint, within vocab".into(),
            ));
        }
        if self.codewords.0 == 0 {
            return Err(Error::InvalidConfig(
                "codewords must leave room for filler tokens below them".into(),
            ));
        }
        if self.train_gaps.0 < 2 || self.train_gaps.0 > self.train_gaps.1 {
            return Err(Error::InvalidConfig("bad training gap range".into()));
        }
        if self.ood_gaps.0 > self.ood_gaps.1
            || (self.ood_gaps.0 <= self.train_gaps.1 && self.ood_gaps.1 >= self.train_gaps.0)
        {
            return Err(Error::InvalidConfig(
                "OOD gap range must be non-empty and disjoint from training gaps".into(),
            ));
        }
        if self.pair_pos.0 < 1 || self.pair_pos.0 > self.pair_pos.1 {
            return Err(Error::InvalidConfig("bad pair position range".into()));
        }
        let worst = self.pair_pos.1 + self.train_gaps.1.max(self.ood_gaps.1) + 1;
        if worst > cfg.seq_len - 1 {
            return Err(Error::GapRange {
                lo: self.pair_pos.1,
                hi: worst,
                seq_len: cfg.seq_len,
            });
        }
        Ok(())
    }

    /// Defaults scaled to a given model shape. For the desk model (V=256,
    /// S=64): filler tokens 0..192, codewords 192..224, values 224..256,
    /// training gaps 2..=10, OOD gaps 12..=32.
    pub fn desk_for(cfg: &ModelConfig) -> Self {
        let v = cfg.vocab as u32;
        let s = cfg.seq_len;
        let train_hi = (s / 6).max(3);
        let ood_hi = s / 2;
        let pair_hi = (s - 1 - ood_hi - 1).min(s / 8).max(1);
        TaskConfig {
            p_probe: 0.10,
            codewords: (3 * v / 4, 7 * v / 8),
            values: (7 * v / 8, v),
            train_gaps: (2, train_hi),
            ood_gaps: (train_hi + 2, ood_hi),
            pair_pos: (1, pair_hi),
            corpus_seed: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchMode {
    Train,
    EvalId,
    EvalOod,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub batch_size: usize,
    /// Row-major [batch_size, seq_len].
    pub tokens: Vec<u32>,
    pub is_probe: Vec<bool>,
    /// Scored position for probe rows: the repeated codeword, whose
    /// next-token target is the value. Unused for non-probe rows.
    pub probe_pos: Vec<usize>,
}

/// Per-token successor table for the filler chain, derived deterministically
/// from the corpus seed.
struct Corpus {
    filler: u32,
    successors: Vec<u32>,
}

impl Corpus {
    fn build(task: &TaskConfig) -> Self {
        let filler = task.codewords.0;
        let mut rng = ChaCha8Rng::seed_from_u64(task.corpus_seed);
        let successors = (0..filler as usize * BRANCHING)
            .map(|_| rng.gen_range(0..filler))
            .collect();
        Corpus { filler, successors }
    }

    fn fill<R: Rng>(&self, row: &mut [u32], rng: &mut R) {
        let mut cur = rng.gen_range(0..self.filler);
        for t in row.iter_mut() {
            *t = cur;
            let branch = rng.gen_range(0..BRANCHING);
            cur = self.successors[cur as usize * BRANCHING + branch];
        }
    }
}

pub fn generate_batch<R: Rng>(
    task: &TaskConfig,
    cfg: &ModelConfig,
    rng: &mut R,
    mode: BatchMode,
    batch_size: usize,
) -> Result<Batch> {
    task.validate(cfg)?;
    if batch_size == 0 {
        return Err(Error::InvalidConfig("batch size must be >= 1".into()));
    }
    let s = cfg.seq_len;
    let corpus = Corpus::build(task);
    let mut tokens = vec![0u32; batch_size * s];
    let mut is_probe = vec![false; batch_size];
    let mut probe_pos = vec![0usize; batch_size];
    for bi in 0..batch_size {
        let row = &mut tokens[bi * s..(bi + 1) * s];
        corpus.fill(row, rng);
        let probe = match mode {
            BatchMode::Train => rng.gen_bool(task.p_probe),
            BatchMode::EvalId | BatchMode::EvalOod => true,
        };
        if !probe {
            continue;
        }
        let gaps = match mode {
            BatchMode::EvalOod => task.ood_gaps,
            _ => task.train_gaps,
        };
        let k = rng.gen_range(task.pair_pos.0..=task.pair_pos.1);
        let gap = rng.gen_range(gaps.0..=gaps.1);
        let codeword = rng.gen_range(task.codewords.0..task.codewords.1);
        let value = rng.gen_range(task.values.0..task.values.1);
        let q = k + gap;
        row[k] = codeword;
        row[k + 1] = value;
        row[q] = codeword;
        row[q + 1] = value;
        is_probe[bi] = true;
        probe_pos[bi] = q;
    }
    Ok(Batch {
        batch_size,
        tokens,
        is_probe,
        probe_pos,
    })
}
