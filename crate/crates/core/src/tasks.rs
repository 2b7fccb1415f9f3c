//! Deterministic synthetic sequence tasks.
//!
//! Every example is `prompt ++ [SEP] ++ answer`, where the prompt is drawn
//! uniformly from the symbol alphabet `0..vocab_size-1` and `SEP` is the
//! last vocabulary id. The base task answer is the prompt (copy) or the
//! reversed prompt (reverse). The fine-tune task passes the base answer
//! through a fixed cipher that cycles a random subset of the alphabet, so
//! each answer position is either unchanged (in-distribution) or remapped
//! (out-of-distribution).

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskName {
    Copy,
    Reverse,
    /// Copy as the base task; the cipher applies on fine-tuning.
    Cipher,
}

impl fmt::Display for TaskName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskName::Copy => "copy",
            TaskName::Reverse => "reverse",
            TaskName::Cipher => "cipher",
        })
    }
}

impl FromStr for TaskName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(TaskName::Copy),
            "reverse" => Ok(TaskName::Reverse),
            "cipher" => Ok(TaskName::Cipher),
            _ => Err(Error::Config(format!(
                "unknown task '{s}', expected copy, reverse or cipher"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    pub name: TaskName,
    pub vocab_size: usize,
    pub prompt_len: usize,
    pub answer_len: usize,
    pub shift_fraction: f64,
    /// Seeds the cipher; fixed per task, independent of run seeds.
    pub cipher_seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            name: TaskName::Cipher,
            vocab_size: 32,
            prompt_len: 8,
            answer_len: 8,
            shift_fraction: 0.5,
            cipher_seed: 0x6a7e,
        }
    }
}

/// One sequence with per-token masks aligned to `tokens`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeqExample {
    pub tokens: Vec<usize>,
    /// Set on answer tokens, the supervised targets.
    pub loss_mask: Vec<bool>,
    /// Set where the token differs from the base-task token.
    pub ood_mask: Vec<bool>,
}

impl SeqExample {
    /// Model input: every token but the last.
    pub fn input(&self) -> &[usize] {
        &self.tokens[..self.tokens.len() - 1]
    }

    /// Next-token targets for [`SeqExample::input`].
    pub fn targets(&self) -> &[usize] {
        &self.tokens[1..]
    }

    /// Supervision mask for [`SeqExample::targets`].
    pub fn target_mask(&self) -> &[bool] {
        &self.loss_mask[1..]
    }

    /// OOD flags for [`SeqExample::targets`].
    pub fn target_ood(&self) -> &[bool] {
        &self.ood_mask[1..]
    }
}

impl TaskSpec {
    pub fn seq_len(&self) -> usize {
        self.prompt_len + 1 + self.answer_len
    }

    pub fn separator(&self) -> usize {
        self.vocab_size - 1
    }

    pub fn n_symbols(&self) -> usize {
        self.vocab_size - 1
    }

    pub fn validate(&self, max_seq_len: usize) -> Result<()> {
        if self.vocab_size < 3 {
            return Err(Error::Config("task vocabulary needs at least 3 ids".into()));
        }
        if self.prompt_len == 0 || self.answer_len == 0 || self.answer_len > self.prompt_len {
            return Err(Error::Config(format!(
                "need 0 < answer_len ({}) <= prompt_len ({})",
                self.answer_len, self.prompt_len
            )));
        }
        if self.seq_len() > max_seq_len {
            return Err(Error::Config(format!(
                "prompt_len + answer_len + 1 = {} exceeds max_seq_len {max_seq_len}",
                self.seq_len()
            )));
        }
        if !(0.0..=1.0).contains(&self.shift_fraction) {
            return Err(Error::Config(format!(
                "shift_fraction {} outside [0, 1]",
                self.shift_fraction
            )));
        }
        Ok(())
    }

    /// Symbol map applied to fine-tune answers. A random subset of
    /// `round(shift_fraction · n_symbols)` symbols is cycled among itself;
    /// every other symbol maps to itself.
    pub fn cipher(&self) -> Vec<usize> {
        let n = self.n_symbols();
        let mut map: Vec<usize> = (0..n).collect();
        let k = libm::round(self.shift_fraction * n as f64) as usize;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(self.cipher_seed));
        let subset = &order[..k.min(n)];
        for (i, &s) in subset.iter().enumerate() {
            map[s] = subset[(i + 1) % subset.len()];
        }
        map
    }

    /// Fraction of symbols the cipher actually moves.
    pub fn remapped_fraction(&self) -> f64 {
        let moved = self
            .cipher()
            .iter()
            .enumerate()
            .filter(|(s, &t)| *s != t)
            .count();
        moved as f64 / self.n_symbols() as f64
    }

    fn base_answer(&self, prompt: &[usize]) -> Vec<usize> {
        let mut a: Vec<usize> = match self.name {
            TaskName::Copy | TaskName::Cipher => prompt.to_vec(),
            TaskName::Reverse => prompt.iter().rev().copied().collect(),
        };
        a.truncate(self.answer_len);
        a
    }

    fn assemble(&self, prompt: &[usize], answer: &[usize], base: &[usize]) -> SeqExample {
        let mut tokens = prompt.to_vec();
        tokens.push(self.separator());
        tokens.extend_from_slice(answer);
        let mut loss_mask = vec![false; prompt.len() + 1];
        loss_mask.extend(core::iter::repeat_n(true, answer.len()));
        let mut ood_mask = vec![false; prompt.len() + 1];
        ood_mask.extend(answer.iter().zip(base).map(|(a, b)| a != b));
        SeqExample {
            tokens,
            loss_mask,
            ood_mask,
        }
    }

    /// Base-task example for a given prompt.
    pub fn pretrain_example(&self, prompt: &[usize]) -> SeqExample {
        let base = self.base_answer(prompt);
        self.assemble(prompt, &base, &base)
    }

    /// Shifted-task example for a given prompt.
    pub fn finetune_example(&self, prompt: &[usize], cipher: &[usize]) -> SeqExample {
        let base = self.base_answer(prompt);
        let shifted: Vec<usize> = base.iter().map(|&s| cipher[s]).collect();
        self.assemble(prompt, &shifted, &base)
    }

    fn prompts(&self, n: usize, seed: u64) -> Vec<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                (0..self.prompt_len)
                    .map(|_| rng.random_range(0..self.n_symbols()))
                    .collect()
            })
            .collect()
    }
}

/// `n` base-task examples; a pure function of `(spec, n, seed)`.
pub fn gen_pretrain(spec: &TaskSpec, n: usize, seed: u64) -> Result<Vec<SeqExample>> {
    spec.validate(usize::MAX)?;
    if n == 0 {
        return Err(Error::Config("corpus size must be positive".into()));
    }
    Ok(spec
        .prompts(n, seed)
        .iter()
        .map(|p| spec.pretrain_example(p))
        .collect())
}

/// `n` shifted-task examples over the same prompts `gen_pretrain` draws
/// for the same seed.
pub fn gen_finetune(spec: &TaskSpec, n: usize, seed: u64) -> Result<Vec<SeqExample>> {
    spec.validate(usize::MAX)?;
    if n == 0 {
        return Err(Error::Config("corpus size must be positive".into()));
    }
    let cipher = spec.cipher();
    Ok(spec
        .prompts(n, seed)
        .iter()
        .map(|p| spec.finetune_example(p, &cipher))
        .collect())
}
