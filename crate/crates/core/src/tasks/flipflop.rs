use crate::error::{config_err, Result};
use crate::numerics::RngStream;

use super::{Example, LabeledBatch};

pub const W: usize = 0;
pub const I: usize = 1;
pub const R: usize = 2;
pub const ZERO: usize = 3;
pub const ONE: usize = 4;
pub const VOCAB: usize = 5;

/// Which next-token targets carry loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlipFlopLoss {
    /// Only the bit following each `r`.
    ReadOnly,
    All,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlipFlopConfig {
    /// Instruction–bit pairs per sequence.
    pub n_pairs: usize,
    /// Probability that an instruction after the first is `i`.
    pub p_ignore: f64,
    pub loss: FlipFlopLoss,
}

impl Default for FlipFlopConfig {
    fn default() -> Self {
        Self {
            n_pairs: 256,
            p_ignore: 0.8,
            loss: FlipFlopLoss::ReadOnly,
        }
    }
}

impl FlipFlopConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_pairs < 2 {
            return config_err("task.n_pairs must be at least 2");
        }
        if !(0.0..=1.0).contains(&self.p_ignore) {
            return config_err(format!(
                "flip-flop ignore probability {} outside [0, 1]",
                self.p_ignore
            ));
        }
        Ok(())
    }

    pub fn seq_len(&self) -> usize {
        2 * self.n_pairs - 1
    }
}

/// Encodes a string such as `"w0i1r0"`.
pub fn encode(s: &str) -> Result<Vec<usize>> {
    s.chars()
        .map(|c| match c {
            'w' => Ok(W),
            'i' => Ok(I),
            'r' => Ok(R),
            '0' => Ok(ZERO),
            '1' => Ok(ONE),
            other => config_err(format!(
                "flip-flop symbol {other:?} not in {{w, i, r, 0, 1}}"
            )),
        })
        .collect()
}

/// Bit stored by the most recent `w` before the final instruction of a
/// prefix that ends on an `r`.
pub fn read_answer(prefix: &[usize]) -> Option<usize> {
    prefix
        .chunks(2)
        .filter(|p| p.len() == 2 && p[0] == W)
        .map(|p| p[1])
        .last()
}

/// Builds the training example for a full instruction/bit stream.
pub fn example_from_stream(stream: &[usize], loss: FlipFlopLoss) -> Example {
    let tokens = stream[..stream.len() - 1].to_vec();
    let targets = stream[1..].to_vec();
    let loss_mask = tokens
        .iter()
        .enumerate()
        .map(|(t, &tok)| match loss {
            FlipFlopLoss::ReadOnly => t % 2 == 0 && tok == R,
            FlipFlopLoss::All => true,
        })
        .collect();
    Example {
        tokens,
        targets,
        loss_mask,
    }
}

pub fn generate_one(cfg: &FlipFlopConfig, rng: &mut RngStream) -> Example {
    let n = cfg.n_pairs;
    let mut stream = Vec::with_capacity(2 * n);
    let mut memory = ZERO;
    for k in 0..n {
        let instr = if k == 0 {
            W
        } else if k == n - 1 {
            R
        } else if rng.bernoulli(cfg.p_ignore) {
            I
        } else if rng.bernoulli(0.5) {
            W
        } else {
            R
        };
        let bit = if instr == R {
            memory
        } else {
            ZERO + rng.below(2)
        };
        if instr == W {
            memory = bit;
        }
        stream.push(instr);
        stream.push(bit);
    }
    example_from_stream(&stream, cfg.loss)
}

pub fn gen_flipflop(
    cfg: &FlipFlopConfig,
    n_sequences: usize,
    rng: &mut RngStream,
) -> Result<LabeledBatch> {
    cfg.validate()?;
    Ok(LabeledBatch {
        examples: (0..n_sequences).map(|_| generate_one(cfg, rng)).collect(),
    })
}
