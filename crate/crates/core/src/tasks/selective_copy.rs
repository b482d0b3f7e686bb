use crate::error::{config_err, Result};
use crate::numerics::RngStream;

use super::{Example, LabeledBatch};

#[derive(Clone, Debug, PartialEq)]
pub struct SelectiveCopyConfig {
    /// Content tokens are `0..vocab_size − 2`; then blank, then separator.
    pub vocab_size: usize,
    pub n_content: usize,
    pub n_blanks: usize,
}

impl Default for SelectiveCopyConfig {
    fn default() -> Self {
        Self {
            vocab_size: 16,
            n_content: 256,
            n_blanks: 256,
        }
    }
}

impl SelectiveCopyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 3 {
            return config_err(format!(
                "selective copy needs at least one content token besides blank and separator, vocab_size={}",
                self.vocab_size
            ));
        }
        if self.n_content == 0 {
            return config_err("task.n_content must be positive");
        }
        Ok(())
    }

    pub fn blank(&self) -> usize {
        self.vocab_size - 2
    }

    pub fn separator(&self) -> usize {
        self.vocab_size - 1
    }

    pub fn seq_len(&self) -> usize {
        2 * self.n_content + self.n_blanks
    }
}

/// Layout `input ‖ separator ‖ output` as next-token pairs; only targets in
/// the output region carry loss.
pub fn example_from_input(cfg: &SelectiveCopyConfig, input: &[usize]) -> Example {
    let kept: Vec<usize> = input
        .iter()
        .copied()
        .filter(|&t| t != cfg.blank())
        .collect();
    let mut stream = input.to_vec();
    stream.push(cfg.separator());
    stream.extend_from_slice(&kept);
    let tokens = stream[..stream.len() - 1].to_vec();
    let targets = stream[1..].to_vec();
    let loss_mask = (0..tokens.len()).map(|t| t + 1 > input.len()).collect();
    Example {
        tokens,
        targets,
        loss_mask,
    }
}

pub fn generate_one(cfg: &SelectiveCopyConfig, rng: &mut RngStream) -> Example {
    let len = cfg.n_content + cfg.n_blanks;
    // Partial Fisher–Yates: the first n_content slots of a shuffled index
    // list hold content.
    let mut slots: Vec<usize> = (0..len).collect();
    for k in 0..cfg.n_content {
        let j = k + rng.below(len - k);
        slots.swap(k, j);
    }
    let mut input = vec![cfg.blank(); len];
    for &s in &slots[..cfg.n_content] {
        input[s] = rng.below(cfg.vocab_size - 2);
    }
    example_from_input(cfg, &input)
}

pub fn gen_selective_copy(
    cfg: &SelectiveCopyConfig,
    n_sequences: usize,
    rng: &mut RngStream,
) -> Result<LabeledBatch> {
    cfg.validate()?;
    Ok(LabeledBatch {
        examples: (0..n_sequences).map(|_| generate_one(cfg, rng)).collect(),
    })
}
