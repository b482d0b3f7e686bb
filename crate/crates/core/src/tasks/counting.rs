use crate::error::{config_err, Result};
use crate::numerics::RngStream;

use super::{Example, LabeledBatch};

/// Digits `0..=10` are their own ids.
pub const VAR_BASE: usize = 11;
pub const MAX_VARS: usize = 5;
pub const SET: usize = VAR_BASE + MAX_VARS;
pub const INCR: usize = SET + 1;
pub const PASS: usize = SET + 2;
pub const PRINT: usize = SET + 3;
pub const VOCAB: usize = PRINT + 1;

#[derive(Clone, Debug, PartialEq)]
pub struct CountingConfig {
    pub n_vars: usize,
    pub w_set: f64,
    pub w_incr: f64,
    pub w_pass: f64,
    pub max_value: usize,
    /// Upper bound on operations before the final print.
    pub max_ops: usize,
}

impl Default for CountingConfig {
    fn default() -> Self {
        Self {
            n_vars: 1,
            w_set: 1.0,
            w_incr: 7.0,
            w_pass: 50.0,
            max_value: 10,
            max_ops: 512,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Op {
    Set(usize),
    Incr(usize),
    Pass,
}

impl CountingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_vars == 0 || self.n_vars > MAX_VARS {
            return config_err(format!(
                "task.n_vars={} outside 1..={MAX_VARS}",
                self.n_vars
            ));
        }
        if self.max_ops < 2 {
            return config_err("task.max_ops must be at least 2");
        }
        if self.max_value > 10 {
            return config_err("task.max_value is limited to 10 (digit tokens 0..=10)");
        }
        let w = [self.w_set, self.w_incr, self.w_pass];
        if w.iter().any(|&x| !(x >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
            return config_err(
                "counting operation weights must be non-negative with a positive sum",
            );
        }
        if self.w_set + self.w_pass <= 0.0 {
            return config_err(
                "counting needs w_set or w_pass positive so a full variable can be skipped",
            );
        }
        Ok(())
    }

    /// Longest possible token sequence.
    pub fn seq_len(&self) -> usize {
        2 * (self.max_ops - 1) + 2
    }
}

pub fn tokenize(ops: &[Op], print_var: usize, answer: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(2 * ops.len() + 3);
    for op in ops {
        match *op {
            Op::Set(v) => out.extend([VAR_BASE + v, SET]),
            Op::Incr(v) => out.extend([VAR_BASE + v, INCR]),
            Op::Pass => out.push(PASS),
        }
    }
    out.extend([PRINT, VAR_BASE + print_var, answer]);
    out
}

/// Value of `var` after running `ops` from all-zero variables.
pub fn interpret(ops: &[Op], var: usize) -> usize {
    let mut value = 0;
    for op in ops {
        match *op {
            Op::Set(v) if v == var => value = 0,
            Op::Incr(v) if v == var => value += 1,
            _ => {}
        }
    }
    value
}

/// Example whose only loss-carrying target is the printed answer.
pub fn example_from_stream(stream: &[usize]) -> Example {
    let tokens = stream[..stream.len() - 1].to_vec();
    let targets = stream[1..].to_vec();
    let mut loss_mask = vec![false; tokens.len()];
    *loss_mask.last_mut().unwrap() = true;
    Example {
        tokens,
        targets,
        loss_mask,
    }
}

pub fn generate_ops(cfg: &CountingConfig, rng: &mut RngStream) -> (Vec<Op>, usize) {
    let n_ops = rng.int_inclusive(1, cfg.max_ops - 1);
    let weights = [cfg.w_set, cfg.w_incr, cfg.w_pass];
    let mut values = vec![0usize; cfg.n_vars];
    let mut ops = Vec::with_capacity(n_ops);
    while ops.len() < n_ops {
        let kind = rng.weighted(&weights);
        let op = match kind {
            0 => Op::Set(rng.below(cfg.n_vars)),
            1 => Op::Incr(rng.below(cfg.n_vars)),
            _ => Op::Pass,
        };
        match op {
            Op::Incr(v) if values[v] >= cfg.max_value => continue,
            Op::Incr(v) => values[v] += 1,
            Op::Set(v) => values[v] = 0,
            Op::Pass => {}
        }
        ops.push(op);
    }
    let var = rng.below(cfg.n_vars);
    (ops, var)
}

pub fn generate_one(cfg: &CountingConfig, rng: &mut RngStream) -> Example {
    let (ops, var) = generate_ops(cfg, rng);
    let answer = interpret(&ops, var);
    example_from_stream(&tokenize(&ops, var, answer))
}

pub fn gen_counting(
    cfg: &CountingConfig,
    n_sequences: usize,
    rng: &mut RngStream,
) -> Result<LabeledBatch> {
    cfg.validate()?;
    Ok(LabeledBatch {
        examples: (0..n_sequences).map(|_| generate_one(cfg, rng)).collect(),
    })
}
