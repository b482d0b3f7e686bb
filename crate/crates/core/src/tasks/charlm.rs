use std::sync::Arc;

use crate::error::{config_err, Result};
use crate::numerics::RngStream;

use super::Example;

/// Public-domain text used when no corpus file is given.
pub const DEFAULT_TEXT: &str = include_str!("../../data/corpus.txt");

/// Character-level corpus split into a training head and a validation tail.
#[derive(Debug, PartialEq)]
pub struct CharCorpus {
    pub alphabet: Vec<char>,
    pub ids: Vec<usize>,
    /// First validation index.
    pub split: usize,
}

impl CharCorpus {
    pub fn new(text: &str, valid_fraction: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&valid_fraction) {
            return config_err(format!(
                "validation fraction {valid_fraction} outside [0, 1)"
            ));
        }
        let mut alphabet: Vec<char> = text.chars().collect();
        alphabet.sort_unstable();
        alphabet.dedup();
        let ids: Vec<usize> = text
            .chars()
            .map(|c| alphabet.binary_search(&c).unwrap())
            .collect();
        let split = ids.len() - (ids.len() as f64 * valid_fraction).round() as usize;
        Ok(Self {
            alphabet,
            ids,
            split,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.alphabet.len()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.alphabet[i]).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CharSplit {
    Train,
    Valid,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CharLmConfig {
    pub seq_len: usize,
    pub split: CharSplit,
    pub corpus: Arc<CharCorpus>,
}

impl CharLmConfig {
    pub fn range(&self) -> (usize, usize) {
        match self.split {
            CharSplit::Train => (0, self.corpus.split),
            CharSplit::Valid => (self.corpus.split, self.corpus.ids.len()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.range();
        if self.seq_len == 0 || hi - lo < self.seq_len + 1 {
            return config_err(format!(
                "character split of {} characters is too short for windows of {}",
                hi - lo,
                self.seq_len
            ));
        }
        Ok(())
    }
}

/// Random window; every next character carries loss.
pub fn generate_one(cfg: &CharLmConfig, rng: &mut RngStream) -> Example {
    let (lo, hi) = cfg.range();
    let start = lo + rng.below(hi - lo - cfg.seq_len);
    let w = &cfg.corpus.ids[start..start + cfg.seq_len + 1];
    Example {
        tokens: w[..cfg.seq_len].to_vec(),
        targets: w[1..].to_vec(),
        loss_mask: vec![true; cfg.seq_len],
    }
}
