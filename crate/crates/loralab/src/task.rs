//! Synthetic sequence-classification tasks. Each task partitions the
//! vocabulary into signal and distractor tokens and derives the label
//! deterministically from the sequence, so token-level relevance is the
//! thing a model has to learn.

use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream;

/// Which label rule generates the data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Exactly one signal token hides among distractors; the label is the
    /// signal token's class. Tokenwise relevance is everything.
    NeedleToken,
    /// Label is the parity of the count of marked tokens. Relevance is
    /// spread over several positions.
    ParityOfMarked,
    /// Label is the majority class over all tokens, every token counting
    /// equally. A control task where relevance filtering should help little.
    MajorityPlain,
}

/// A synthetic dataset recipe: label rule plus shape and size parameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    pub seq_len: usize,
    pub vocab_size: usize,
    pub num_classes: usize,
    pub train_size: usize,
    pub val_size: usize,
}

impl Default for SyntheticTask {
    fn default() -> Self {
        SyntheticTask {
            kind: TaskKind::NeedleToken,
            seq_len: 12,
            vocab_size: 64,
            num_classes: 4,
            train_size: 512,
            val_size: 256,
        }
    }
}

/// Generated sequences with their labels, in generation order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub sequences: Vec<Vec<usize>>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }
}

impl SyntheticTask {
    /// Reject shapes where the vocabulary cannot be partitioned: every task
    /// needs nonempty signal and distractor sets and enough classes.
    pub fn validate(&self) -> Result<()> {
        if self.seq_len == 0 {
            return Err(Error::InvalidConfig("task seq_len must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidConfig("task needs at least 2 classes".into()));
        }
        if self.train_size == 0 || self.val_size == 0 {
            return Err(Error::InvalidConfig("train_size and val_size must be positive".into()));
        }
        match self.kind {
            TaskKind::NeedleToken => {
                if self.vocab_size <= 2 * self.num_classes {
                    return Err(Error::InvalidConfig(format!(
                        "needle_token needs vocab_size > {} so distractor tokens exist \
                         alongside {} signal tokens",
                        2 * self.num_classes,
                        2 * self.num_classes
                    )));
                }
            }
            TaskKind::ParityOfMarked => {
                if self.vocab_size < 2 {
                    return Err(Error::InvalidConfig(
                        "parity_of_marked needs at least one marked and one unmarked token".into(),
                    ));
                }
            }
            TaskKind::MajorityPlain => {
                if self.vocab_size < self.num_classes {
                    return Err(Error::InvalidConfig(format!(
                        "majority_plain needs vocab_size >= num_classes ({} < {})",
                        self.vocab_size, self.num_classes
                    )));
                }
            }
        }
        Ok(())
    }

    /// Tokens that carry label information: per-class needles, the marked
    /// set for parity, and every token for majority (where no token is
    /// privileged).
    pub fn signal_tokens(&self) -> Vec<usize> {
        match self.kind {
            TaskKind::NeedleToken => (0..2 * self.num_classes).collect(),
            TaskKind::ParityOfMarked => (0..self.marked_count()).collect(),
            TaskKind::MajorityPlain => (0..self.vocab_size).collect(),
        }
    }

    /// Tokens that never affect the label.
    pub fn distractor_tokens(&self) -> Vec<usize> {
        let signal: HashSet<usize> = self.signal_tokens().into_iter().collect();
        (0..self.vocab_size).filter(|t| !signal.contains(t)).collect()
    }

    fn marked_count(&self) -> usize {
        (self.vocab_size / 8).max(1)
    }

    /// Apply the label rule to a sequence. Errors on sequences the task
    /// could not have generated (wrong length, malformed needle count).
    pub fn label_of(&self, sequence: &[usize]) -> Result<usize> {
        if sequence.len() != self.seq_len {
            return Err(Error::InvalidInput(format!(
                "sequence length {} does not match task seq_len {}",
                sequence.len(),
                self.seq_len
            )));
        }
        if let Some(&bad) = sequence.iter().find(|&&t| t >= self.vocab_size) {
            return Err(Error::InvalidInput(format!(
                "token id {bad} outside vocabulary of size {}",
                self.vocab_size
            )));
        }
        match self.kind {
            TaskKind::NeedleToken => {
                let needles: Vec<usize> =
                    sequence.iter().copied().filter(|&t| t < 2 * self.num_classes).collect();
                match needles.as_slice() {
                    [s] => Ok(s % self.num_classes),
                    _ => Err(Error::InvalidInput(format!(
                        "needle_token sequence must contain exactly one signal token, found {}",
                        needles.len()
                    ))),
                }
            }
            TaskKind::ParityOfMarked => {
                let marked = self.marked_count();
                Ok(sequence.iter().filter(|&&t| t < marked).count() % 2)
            }
            TaskKind::MajorityPlain => {
                let mut votes = vec![0usize; self.num_classes];
                for &t in sequence {
                    votes[t % self.num_classes] += 1;
                }
                let best = votes.iter().copied().max().unwrap_or(0);
                Ok(votes.iter().position(|&v| v == best).unwrap_or(0))
            }
        }
    }

    fn sample_sequence(&self, rng: &mut impl Rng) -> Vec<usize> {
        match self.kind {
            TaskKind::NeedleToken => {
                let distractors = self.distractor_tokens();
                let mut seq: Vec<usize> = (0..self.seq_len)
                    .map(|_| distractors[rng.random_range(0..distractors.len())])
                    .collect();
                let class = rng.random_range(0..self.num_classes);
                let variant = rng.random_range(0..2usize);
                seq[rng.random_range(0..self.seq_len)] = class + variant * self.num_classes;
                seq
            }
            TaskKind::ParityOfMarked | TaskKind::MajorityPlain => {
                (0..self.seq_len).map(|_| rng.random_range(0..self.vocab_size)).collect()
            }
        }
    }
}

/// Generate disjoint train and validation splits. Deterministic given the
/// seed; no sequence appears in both splits.
pub fn generate_task(task: &SyntheticTask, seed: u64) -> Result<(Dataset, Dataset)> {
    task.validate()?;
    let mut train_rng = stream(seed, "task.train");
    let mut train = Dataset { sequences: Vec::new(), labels: Vec::new() };
    for _ in 0..task.train_size {
        let seq = task.sample_sequence(&mut train_rng);
        train.labels.push(task.label_of(&seq)?);
        train.sequences.push(seq);
    }

    let taken: HashSet<Vec<usize>> = train.sequences.iter().cloned().collect();
    let mut val_rng = stream(seed, "task.val");
    let mut val = Dataset { sequences: Vec::new(), labels: Vec::new() };
    let mut attempts = 0usize;
    while val.sequences.len() < task.val_size {
        let seq = task.sample_sequence(&mut val_rng);
        if taken.contains(&seq) {
            attempts += 1;
            if attempts > 100 * task.val_size {
                return Err(Error::InvalidConfig(
                    "sequence space too small to build a validation split disjoint from \
                     training data; shrink the splits or grow seq_len/vocab_size"
                        .into(),
                ));
            }
            continue;
        }
        val.labels.push(task.label_of(&seq)?);
        val.sequences.push(seq);
    }
    Ok((train, val))
}
