//! Synthetic sequence tasks: selective copy and three classification rules.
//!
//! Every task shares a vocabulary layout: `BLANK`, `SEP` and the two label
//! tokens are reserved, content tokens start at [`FIRST_CONTENT`].

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BLANK: usize = 0;
pub const SEP: usize = 1;
pub const LABEL_TOKENS: [usize; 2] = [2, 3];
pub const FIRST_CONTENT: usize = 4;
/// Bumped whenever generated data changes for a given seed.
pub const GENERATOR_VERSION: u64 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Sequence(Vec<usize>),
    Class(usize),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub tokens: Vec<usize>,
    pub target: Target,
    /// Positions whose next-token prediction is scored.
    pub mask: Vec<usize>,
}

impl TaskInstance {
    pub fn validate(&self, vocab: usize) -> Result<()> {
        if self.mask.is_empty() {
            return Err(Error::contract("task instance has an empty loss mask"));
        }
        if let Some(&t) = self.tokens.iter().find(|&&t| t >= vocab) {
            return Err(Error::Index { what: "token", index: t, size: vocab });
        }
        if let Some(&p) = self.mask.iter().find(|&&p| p >= self.tokens.len()) {
            return Err(Error::Index { what: "mask position", index: p, size: self.tokens.len() });
        }
        let want = match &self.target {
            Target::Sequence(s) => s.len(),
            Target::Class(_) => 1,
        };
        if want != self.mask.len() {
            return Err(Error::contract(format!("{} targets for {} masked positions", want, self.mask.len())));
        }
        Ok(())
    }

    /// `(position, expected token)` pairs for the loss.
    pub fn loss_targets(&self) -> Vec<(usize, usize)> {
        match &self.target {
            Target::Sequence(s) => self.mask.iter().copied().zip(s.iter().copied()).collect(),
            Target::Class(c) => vec![(self.mask[0], LABEL_TOKENS[*c])],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassRule {
    MajorityToken,
    FirstVsLastMatch,
    ParityOfMarkerCount,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum TaskKind {
    SelectiveCopy { n_marked: usize },
    Classification { rule: ClassRule },
}

/// A task generator. `alphabet_seed` permutes the content alphabet (the
/// majority partition, the copy output alphabet); `flip_labels` swaps the
/// two label tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub seq_len: usize,
    pub vocab: usize,
    #[serde(default = "default_marker")]
    pub marker: usize,
    #[serde(default)]
    pub alphabet_seed: u64,
    #[serde(default)]
    pub flip_labels: bool,
}

fn default_marker() -> usize {
    FIRST_CONTENT
}

fn rng_for(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (GENERATOR_VERSION << 56))
}

fn content_size(vocab: usize) -> usize {
    vocab.saturating_sub(FIRST_CONTENT)
}

/// Permutation of the content alphabet; seed 0 is the identity.
fn alphabet(vocab: usize, seed: u64) -> Vec<usize> {
    let mut p: Vec<usize> = (FIRST_CONTENT..vocab).collect();
    if seed != 0 {
        p.shuffle(&mut rng_for(seed, 0xA1));
    }
    p
}

impl TaskSpec {
    pub fn selective_copy(seq_len: usize, n_marked: usize, vocab: usize) -> Self {
        TaskSpec {
            kind: TaskKind::SelectiveCopy { n_marked },
            seq_len,
            vocab,
            marker: FIRST_CONTENT,
            alphabet_seed: 0,
            flip_labels: false,
        }
    }

    pub fn classification(seq_len: usize, rule: ClassRule, vocab: usize) -> Self {
        TaskSpec {
            kind: TaskKind::Classification { rule },
            ..Self::selective_copy(seq_len, 1, vocab)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: String| Error::Config { path: format!("task.{field}"), message };
        if self.seq_len == 0 {
            return Err(bad("seq_len", "must be at least 1".into()));
        }
        if content_size(self.vocab) < 2 {
            return Err(bad("vocab", format!("needs at least {} tokens", FIRST_CONTENT + 2)));
        }
        if !(FIRST_CONTENT..self.vocab).contains(&self.marker) {
            return Err(bad("marker", format!("{} is not a content token", self.marker)));
        }
        if let TaskKind::SelectiveCopy { n_marked } = self.kind {
            if n_marked == 0 || n_marked >= self.seq_len {
                return Err(bad("kind.n_marked", format!("needs 0 < n_marked < seq_len, got {n_marked}")));
            }
        }
        Ok(())
    }

    /// Class of a content token under this spec's alphabet.
    pub fn token_class(&self, token: usize) -> usize {
        let perm = alphabet(self.vocab, self.alphabet_seed);
        perm[token - FIRST_CONTENT] % 2
    }

    pub fn generate(&self, seed: u64) -> Result<TaskInstance> {
        self.validate()?;
        let mut rng = rng_for(seed, 0x51);
        let inst = match self.kind {
            TaskKind::SelectiveCopy { n_marked } => self.copy_instance(&mut rng, n_marked),
            TaskKind::Classification { rule } => self.class_instance(&mut rng, rule),
        };
        debug_assert!(inst.validate(self.vocab).is_ok());
        Ok(inst)
    }

    /// Instances for seeds `first_seed..first_seed + n`, in seed order.
    pub fn dataset(&self, first_seed: u64, n: usize) -> Result<Vec<TaskInstance>> {
        self.validate()?;
        (0..n as u64).into_par_iter().map(|i| self.generate(first_seed + i)).collect()
    }

    fn copy_instance(&self, rng: &mut ChaCha8Rng, n_marked: usize) -> TaskInstance {
        let t = self.seq_len;
        let content = content_size(self.vocab);
        let mut positions: Vec<usize> = (0..t).collect();
        positions.shuffle(rng);
        let mut positions = positions[..n_marked].to_vec();
        positions.sort_unstable();
        let payload: Vec<usize> = (0..n_marked).map(|_| FIRST_CONTENT + rng.random_range(0..content)).collect();
        let mut tokens = vec![BLANK; t];
        for (&p, &tok) in positions.iter().zip(&payload) {
            tokens[p] = tok;
        }
        let perm = alphabet(self.vocab, self.alphabet_seed);
        let out: Vec<usize> = payload.iter().map(|&tok| perm[tok - FIRST_CONTENT]).collect();
        tokens.push(SEP);
        tokens.extend_from_slice(&out[..n_marked - 1]);
        TaskInstance {
            tokens,
            target: Target::Sequence(out),
            mask: (t..t + n_marked).collect(),
        }
    }

    fn class_instance(&self, rng: &mut ChaCha8Rng, rule: ClassRule) -> TaskInstance {
        let t = self.seq_len;
        let content = content_size(self.vocab);
        let draw = |rng: &mut ChaCha8Rng| FIRST_CONTENT + rng.random_range(0..content);
        let (tokens, label) = match rule {
            ClassRule::MajorityToken => {
                let tokens: Vec<usize> = (0..t).map(|_| draw(rng)).collect();
                let ones = tokens.iter().filter(|&&x| self.token_class(x) == 1).count();
                let label = match (2 * ones).cmp(&t) {
                    std::cmp::Ordering::Greater => 1,
                    std::cmp::Ordering::Less => 0,
                    std::cmp::Ordering::Equal => self.token_class(tokens[t - 1]),
                };
                (tokens, label)
            }
            ClassRule::FirstVsLastMatch => {
                let label = rng.random_range(0..2);
                let mut tokens: Vec<usize> = (0..t).map(|_| draw(rng)).collect();
                if t == 1 {
                    // a lone token is both first and last
                    (tokens, 1)
                } else {
                    if label == 1 {
                        tokens[t - 1] = tokens[0];
                    } else {
                        while tokens[t - 1] == tokens[0] {
                            tokens[t - 1] = draw(rng);
                        }
                    }
                    (tokens, label)
                }
            }
            ClassRule::ParityOfMarkerCount => {
                let label = rng.random_range(0..2usize);
                let counts: Vec<usize> = (0..=t).filter(|k| k % 2 == label).collect();
                let k = counts[rng.random_range(0..counts.len())];
                let mut tokens: Vec<usize> = (0..t)
                    .map(|_| loop {
                        let tok = draw(rng);
                        if tok != self.marker {
                            break tok;
                        }
                    })
                    .collect();
                let mut positions: Vec<usize> = (0..t).collect();
                positions.shuffle(rng);
                for &p in &positions[..k] {
                    tokens[p] = self.marker;
                }
                (tokens, label)
            }
        };
        let label = if self.flip_labels { 1 - label } else { label };
        let mut tokens = tokens;
        tokens.push(SEP);
        TaskInstance {
            tokens,
            target: Target::Class(label),
            mask: vec![t],
        }
    }
}

pub fn gen_selective_copy(seed: u64, seq_len: usize, n_marked: usize, vocab: usize) -> Result<TaskInstance> {
    TaskSpec::selective_copy(seq_len, n_marked, vocab).generate(seed)
}

pub fn gen_sequence_classification(seed: u64, seq_len: usize, rule: ClassRule, vocab: usize) -> Result<TaskInstance> {
    TaskSpec::classification(seq_len, rule, vocab).generate(seed)
}

/// Pairs a source and a target task over one vocabulary.
pub fn domain_shift(a: &TaskSpec, b: &TaskSpec) -> Result<(TaskSpec, TaskSpec)> {
    a.validate()?;
    b.validate()?;
    if a == b {
        return Err(Error::contract("domain shift needs the two task specs to differ"));
    }
    if a.vocab != b.vocab {
        return Err(Error::contract(format!("vocabulary mismatch: {} vs {}", a.vocab, b.vocab)));
    }
    Ok((*a, *b))
}

pub fn write_jsonl<W: Write>(mut out: W, instances: &[TaskInstance]) -> Result<()> {
    for inst in instances {
        serde_json::to_writer(&mut out, inst)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<TaskInstance>> {
    let mut v = Vec::new();
    for line in input.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            v.push(serde_json::from_str(&line)?);
        }
    }
    Ok(v)
}
