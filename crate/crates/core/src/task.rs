//! Seeded synthetic classification tasks that a tiny encoder can learn.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    /// Binary: parity of how many tokens come from the marked set
    /// `0..vocab/4`. Sequences carry at most [`MAX_MARKS`] marked tokens.
    ParityOfMarkedTokens,
    /// Token `t` votes for class `t % n_classes`; the label is the class with
    /// the most votes, ties to the lower class.
    MajorityClass,
    /// Class `c ≥ 1` owns the bigram `(2c − 2, 2c − 1)`; the label is the class
    /// of the earliest planted bigram, or 0 when none occurs.
    PatternMatch,
}

pub const MAX_MARKS: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    pub vocab: usize,
    pub seq_len: usize,
    pub n_classes: usize,
    pub train_size: usize,
    pub dev_size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Dataset {
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn class_counts(&self, n_classes: usize) -> Vec<usize> {
        let mut c = vec![0; n_classes];
        for e in &self.examples {
            c[e.label] += 1;
        }
        c
    }

    /// Accuracy of always predicting the most frequent class.
    pub fn majority_baseline(&self, n_classes: usize) -> f64 {
        let c = self.class_counts(n_classes);
        *c.iter().max().unwrap_or(&0) as f64 / self.len().max(1) as f64
    }

    /// Tokens and labels of examples `idx`.
    pub fn batch(&self, idx: &[usize]) -> (Vec<Vec<usize>>, Vec<usize>) {
        idx.iter()
            .map(|&i| (self.examples[i].tokens.clone(), self.examples[i].label))
            .unzip()
    }
}

impl SyntheticTask {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.train_size == 0 || self.dev_size == 0 {
            return bad("train_size and dev_size must be at least 1".into());
        }
        if self.seq_len == 0 || self.n_classes < 2 {
            return bad("seq_len must be positive and n_classes at least 2".into());
        }
        match self.kind {
            TaskKind::ParityOfMarkedTokens => {
                if self.n_classes != 2 || self.vocab < 8 || self.seq_len < MAX_MARKS {
                    return bad("parity task needs n_classes = 2, vocab >= 8, seq_len >= 3".into());
                }
            }
            TaskKind::MajorityClass => {
                if self.vocab < self.n_classes {
                    return bad("majority task needs vocab >= n_classes".into());
                }
            }
            TaskKind::PatternMatch => {
                if self.vocab < 2 * (self.n_classes - 1) + 2 || self.seq_len < 2 {
                    return bad("pattern task needs vocab >= 2 * n_classes and seq_len >= 2".into());
                }
            }
        }
        Ok(())
    }

    /// The label is a pure function of the tokens.
    pub fn label(&self, tokens: &[usize]) -> usize {
        match self.kind {
            TaskKind::ParityOfMarkedTokens => {
                tokens.iter().filter(|&&t| t < self.vocab / 4).count() % 2
            }
            TaskKind::MajorityClass => {
                let mut votes = vec![0usize; self.n_classes];
                for &t in tokens {
                    votes[t % self.n_classes] += 1;
                }
                let best = *votes.iter().max().expect("n_classes >= 2");
                votes.iter().position(|&v| v == best).expect("max exists")
            }
            TaskKind::PatternMatch => tokens
                .windows(2)
                .find_map(|w| {
                    let c = w[0] / 2 + 1;
                    (w[0] % 2 == 0 && w[1] == w[0] + 1 && c < self.n_classes).then_some(c)
                })
                .unwrap_or(0),
        }
    }

    /// A sequence drawn so that its label is likely `class`.
    fn propose(&self, rng: &mut ChaCha8Rng, class: usize) -> Vec<usize> {
        let (v, s) = (self.vocab, self.seq_len);
        match self.kind {
            TaskKind::ParityOfMarkedTokens => {
                let marked = v / 4;
                let k = {
                    let options: Vec<usize> = (0..=MAX_MARKS.min(s)).filter(|k| k % 2 == class).collect();
                    options[rng.random_range(0..options.len())]
                };
                let mut t: Vec<usize> = (0..s).map(|_| rng.random_range(marked..v)).collect();
                let mut pos: Vec<usize> = (0..s).collect();
                pos.shuffle(rng);
                for &p in &pos[..k] {
                    t[p] = rng.random_range(0..marked);
                }
                t
            }
            TaskKind::MajorityClass => {
                let own: Vec<usize> = (0..v).filter(|t| t % self.n_classes == class).collect();
                (0..s)
                    .map(|_| {
                        if rng.random_bool(0.5) {
                            own[rng.random_range(0..own.len())]
                        } else {
                            rng.random_range(0..v)
                        }
                    })
                    .collect()
            }
            TaskKind::PatternMatch => {
                let mut t: Vec<usize> = (0..s).map(|_| rng.random_range(0..v)).collect();
                if class > 0 {
                    let p = rng.random_range(0..s - 1);
                    t[p] = 2 * class - 2;
                    t[p + 1] = 2 * class - 1;
                }
                t
            }
        }
    }

    /// Disjoint train/dev splits with per-class counts differing by at most
    /// one. Identical for identical task specs.
    pub fn generate(&self) -> Result<(Dataset, Dataset)> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut seen = HashSet::new();
        let mut split = |size: usize, rng: &mut ChaCha8Rng| -> Result<Dataset> {
            let mut examples = Vec::with_capacity(size);
            for i in 0..size {
                let class = i % self.n_classes;
                let mut tries = 0usize;
                loop {
                    tries += 1;
                    if tries > 100_000 {
                        return Err(Error::Config(format!(
                            "could not draw {size} distinct examples of class {class}; the task space is too small"
                        )));
                    }
                    let tokens = self.propose(rng, class);
                    if self.label(&tokens) == class && seen.insert(tokens.clone()) {
                        examples.push(Example { tokens, label: class });
                        break;
                    }
                }
            }
            examples.shuffle(rng);
            Ok(Dataset { examples })
        };
        let train = split(self.train_size, &mut rng)?;
        let dev = split(self.dev_size, &mut rng)?;
        Ok((train, dev))
    }
}
