//! Synthetic diagnostic tasks (Flip-Flop, Selective Copy, Counting) and a
//! tiny character-level corpus, each producing next-token examples with a
//! loss mask over answer positions.

pub mod charlm;
pub mod counting;
pub mod flipflop;
pub mod selective_copy;

use std::io::{self, Read, Write};

use crate::error::{config_err, domain_err, Error, Result};
use crate::numerics::{stream_id, Purpose, RngStream, Tensor};
use crate::scalar::Scalar;

pub use charlm::{CharCorpus, CharLmConfig, CharSplit};
pub use counting::{gen_counting, CountingConfig};
pub use flipflop::{gen_flipflop, FlipFlopConfig, FlipFlopLoss};
pub use selective_copy::{gen_selective_copy, SelectiveCopyConfig};

/// One sequence: `targets[t]` is the token following `tokens[t]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub targets: Vec<usize>,
    pub loss_mask: Vec<bool>,
}

impl Example {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn n_masked(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LabeledBatch {
    pub examples: Vec<Example>,
}

impl LabeledBatch {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn token_slices(&self) -> Vec<&[usize]> {
        self.examples.iter().map(|e| e.tokens.as_slice()).collect()
    }

    pub fn flat_targets(&self) -> Vec<usize> {
        self.examples
            .iter()
            .flat_map(|e| e.targets.iter().copied())
            .collect()
    }

    pub fn flat_mask(&self) -> Vec<bool> {
        self.examples
            .iter()
            .flat_map(|e| e.loss_mask.iter().copied())
            .collect()
    }

    pub fn n_masked(&self) -> usize {
        self.examples.iter().map(Example::n_masked).sum()
    }
}

/// A task generator with its full configuration.
#[derive(Clone, Debug, PartialEq)]
pub enum Task {
    FlipFlop(FlipFlopConfig),
    SelectiveCopy(SelectiveCopyConfig),
    Counting(CountingConfig),
    CharLm(CharLmConfig),
}

impl Task {
    pub fn name(&self) -> &'static str {
        match self {
            Task::FlipFlop(_) => "flipflop",
            Task::SelectiveCopy(_) => "selective_copy",
            Task::Counting(_) => "counting",
            Task::CharLm(_) => "charlm",
        }
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            Task::FlipFlop(_) => flipflop::VOCAB,
            Task::SelectiveCopy(c) => c.vocab_size,
            Task::Counting(_) => counting::VOCAB,
            Task::CharLm(c) => c.corpus.vocab_size(),
        }
    }

    /// Longest sequence the generator can emit.
    pub fn max_len(&self) -> usize {
        match self {
            Task::FlipFlop(c) => c.seq_len(),
            Task::SelectiveCopy(c) => c.seq_len(),
            Task::Counting(c) => c.seq_len(),
            Task::CharLm(c) => c.seq_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Task::FlipFlop(c) => c.validate(),
            Task::SelectiveCopy(c) => c.validate(),
            Task::Counting(c) => c.validate(),
            Task::CharLm(c) => c.validate(),
        }
    }

    pub fn generate_one(&self, rng: &mut RngStream) -> Example {
        match self {
            Task::FlipFlop(c) => flipflop::generate_one(c, rng),
            Task::SelectiveCopy(c) => selective_copy::generate_one(c, rng),
            Task::Counting(c) => counting::generate_one(c, rng),
            Task::CharLm(c) => charlm::generate_one(c, rng),
        }
    }

    /// Sequences `first..first + n`, each from its own stream
    /// `(seed, purpose, index)`.
    pub fn generate(
        &self,
        seed: u64,
        purpose: Purpose,
        first: u64,
        n: usize,
    ) -> Result<LabeledBatch> {
        self.validate()?;
        let examples = (0..n as u64)
            .map(|k| self.generate_one(&mut RngStream::new(seed, stream_id(purpose, first + k))))
            .collect();
        Ok(LabeledBatch { examples })
    }
}

/// Index of the largest entry, the lowest index on ties.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Fraction of masked rows whose argmax differs from the target.
pub fn masked_token_error<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[usize],
    loss_mask: &[bool],
) -> Result<f64> {
    let (wrong, total) = masked_token_errors(logits, targets, loss_mask)?;
    Ok(wrong as f64 / total as f64)
}

/// `(wrong, masked)` counts behind [`masked_token_error`].
pub fn masked_token_errors<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[usize],
    loss_mask: &[bool],
) -> Result<(usize, usize)> {
    let rows = logits.rows();
    if targets.len() != rows || loss_mask.len() != rows {
        return config_err(format!(
            "error metric: {rows} logit rows, {} targets, {} mask entries",
            targets.len(),
            loss_mask.len()
        ));
    }
    let mut wrong = 0;
    let mut total = 0;
    for r in 0..rows {
        if loss_mask[r] {
            total += 1;
            if argmax(logits.row(r)) != targets[r] {
                wrong += 1;
            }
        }
    }
    if total == 0 {
        return domain_err("error metric: loss mask selects no positions");
    }
    Ok((wrong, total))
}

// Record stream: per sequence `len: u32`, then `len` token ids, `len`
// target ids and `len` mask flags (0 or 1), all little-endian u32.

pub fn write_records<W: Write>(mut w: W, examples: &[Example]) -> Result<()> {
    let put = |w: &mut W, v: usize| -> Result<()> {
        let v = u32::try_from(v)
            .map_err(|_| Error::Format(format!("value {v} does not fit in u32")))?;
        w.write_all(&v.to_le_bytes())?;
        Ok(())
    };
    for e in examples {
        if e.targets.len() != e.len() || e.loss_mask.len() != e.len() {
            return config_err("record: tokens, targets and mask lengths differ");
        }
        put(&mut w, e.len())?;
        for &t in &e.tokens {
            put(&mut w, t)?;
        }
        for &t in &e.targets {
            put(&mut w, t)?;
        }
        for &m in &e.loss_mask {
            put(&mut w, m as usize)?;
        }
    }
    Ok(())
}

pub fn read_records<R: Read>(mut r: R) -> Result<Vec<Example>> {
    fn get<R: Read>(r: &mut R) -> Result<Option<u32>> {
        let mut buf = [0u8; 4];
        let mut filled = 0;
        while filled < 4 {
            match r.read(&mut buf[filled..]) {
                Ok(0) if filled == 0 => return Ok(None),
                Ok(0) => return Err(Error::Format("record stream ends inside a value".into())),
                Ok(n) => filled += n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        Ok(Some(u32::from_le_bytes(buf)))
    }
    let need = |r: &mut R| -> Result<usize> {
        get(r)?
            .map(|v| v as usize)
            .ok_or_else(|| Error::Format("record stream truncated".into()))
    };
    let mut out = Vec::new();
    while let Some(len) = get(&mut r)? {
        let len = len as usize;
        let tokens = (0..len).map(|_| need(&mut r)).collect::<Result<Vec<_>>>()?;
        let targets = (0..len).map(|_| need(&mut r)).collect::<Result<Vec<_>>>()?;
        let mut loss_mask = Vec::with_capacity(len);
        for _ in 0..len {
            loss_mask.push(match need(&mut r)? {
                0 => false,
                1 => true,
                v => return Err(Error::Format(format!("mask flag {v} is not 0 or 1"))),
            });
        }
        out.push(Example {
            tokens,
            targets,
            loss_mask,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::counting::{Op, INCR, PASS, PRINT, SET, VAR_BASE};
    use super::flipflop::{encode, read_answer, ONE, R, W, ZERO};
    use super::*;
    use proptest::prelude::*;

    fn rng(i: u64) -> RngStream {
        RngStream::for_purpose(11, Purpose::Test, i)
    }

    #[test]
    fn flipflop_worked_examples() {
        assert_eq!(read_answer(&encode("w0i1r0w1i0i1i1r").unwrap()), Some(ONE));
        assert_eq!(read_answer(&encode("w1r").unwrap()), Some(ONE));
        assert!(encode("w2").is_err());
    }

    #[test]
    fn flipflop_matches_simulation() {
        let cfg = FlipFlopConfig {
            n_pairs: 64,
            ..Default::default()
        };
        let batch = gen_flipflop(&cfg, 1000, &mut rng(1)).unwrap();
        for e in &batch.examples {
            assert_eq!(e.tokens[0], W);
            assert_eq!(e.tokens[e.len() - 1], R);
            assert!(e.n_masked() >= 1);
            let mut memory = None;
            for t in 0..e.len() {
                if t % 2 == 1 && e.tokens[t - 1] == W {
                    memory = Some(e.tokens[t]);
                }
                if e.loss_mask[t] {
                    assert_eq!(e.tokens[t], R);
                    assert_eq!(Some(e.targets[t]), memory);
                }
            }
        }
    }

    #[test]
    fn flipflop_loss_all_masks_everything() {
        let cfg = FlipFlopConfig {
            n_pairs: 4,
            loss: FlipFlopLoss::All,
            ..Default::default()
        };
        let e = flipflop::generate_one(&cfg, &mut rng(2));
        assert!(e.loss_mask.iter().all(|&m| m));
    }

    #[test]
    fn flipflop_rejects_bad_probabilities() {
        let cfg = FlipFlopConfig {
            p_ignore: 1.5,
            ..Default::default()
        };
        assert!(matches!(
            gen_flipflop(&cfg, 1, &mut rng(3)),
            Err(Error::Config(_))
        ));
    }

    fn letters(s: &str, blank: char) -> (Vec<usize>, SelectiveCopyConfig) {
        let cfg = SelectiveCopyConfig {
            vocab_size: 16,
            n_content: 5,
            n_blanks: 4,
        };
        let ids = s
            .chars()
            .map(|c| {
                if c == blank {
                    cfg.blank()
                } else {
                    c as usize - 'A' as usize
                }
            })
            .collect();
        (ids, cfg)
    }

    #[test]
    fn selective_copy_worked_example() {
        let (input, cfg) = letters("DBBCFBFBE", 'B');
        let e = selective_copy::example_from_input(&cfg, &input);
        let out: String = e
            .targets
            .iter()
            .zip(&e.loss_mask)
            .filter(|(_, &m)| m)
            .map(|(&t, _)| (b'A' + t as u8) as char)
            .collect();
        assert_eq!(out, "DCFFE");
    }

    #[test]
    fn selective_copy_without_blanks_is_identity() {
        let cfg = SelectiveCopyConfig {
            vocab_size: 16,
            n_content: 12,
            n_blanks: 0,
        };
        let e = selective_copy::generate_one(&cfg, &mut rng(4));
        let input = &e.tokens[..12];
        let out: Vec<usize> = e
            .targets
            .iter()
            .zip(&e.loss_mask)
            .filter(|(_, &m)| m)
            .map(|(&t, _)| t)
            .collect();
        assert_eq!(out, input);
    }

    #[test]
    fn selective_copy_matches_filter_oracle() {
        let cfg = SelectiveCopyConfig {
            vocab_size: 16,
            n_content: 16,
            n_blanks: 24,
        };
        let batch = gen_selective_copy(&cfg, 200, &mut rng(5)).unwrap();
        for e in &batch.examples {
            let n_in = cfg.n_content + cfg.n_blanks;
            assert_eq!(e.len(), cfg.seq_len());
            assert_eq!(e.tokens[n_in], cfg.separator());
            let filtered: Vec<usize> = e.tokens[..n_in]
                .iter()
                .copied()
                .filter(|&t| t != cfg.blank())
                .collect();
            assert_eq!(filtered.len(), cfg.n_content);
            let out: Vec<usize> = e
                .targets
                .iter()
                .zip(&e.loss_mask)
                .filter(|(_, &m)| m)
                .map(|(&t, _)| t)
                .collect();
            assert_eq!(out, filtered);
            assert!(out.iter().all(|&t| t != cfg.blank()));
        }
    }

    #[test]
    fn selective_copy_needs_a_content_alphabet() {
        let cfg = SelectiveCopyConfig {
            vocab_size: 2,
            n_content: 4,
            n_blanks: 4,
        };
        assert!(matches!(
            gen_selective_copy(&cfg, 1, &mut rng(6)),
            Err(Error::Config(_))
        ));
    }

    /// Parses the `; `-separated program notation used in the examples.
    fn program(s: &str) -> (Vec<Op>, usize) {
        let mut ops = Vec::new();
        let mut print = 0;
        for stmt in s.split(';').map(str::trim).filter(|x| !x.is_empty()) {
            let var = |c: &str| c.chars().next().unwrap() as usize - 'a' as usize;
            if stmt == "pass" {
                ops.push(Op::Pass);
            } else if let Some(v) = stmt.strip_suffix("++") {
                ops.push(Op::Incr(var(v.trim())));
            } else if let Some(v) = stmt.strip_suffix("= 0") {
                ops.push(Op::Set(var(v.trim())));
            } else if let Some(v) = stmt.strip_prefix("print") {
                print = var(v.trim());
            }
        }
        (ops, print)
    }

    #[test]
    fn counting_worked_examples() {
        let (ops, v) = program("pass; pass; a = 0 ; pass; a ++; pass; pass; a ++; print a");
        assert_eq!(counting::interpret(&ops, v), 2);
        let (ops, v) = program("a = 0; print a");
        assert_eq!(counting::interpret(&ops, v), 0);
        let stream = counting::tokenize(&ops, v, 0);
        assert_eq!(stream, vec![VAR_BASE, SET, PRINT, VAR_BASE, 0]);
    }

    /// Token-level interpreter independent of the generator's op list.
    fn run_tokens(tokens: &[usize]) -> (usize, Vec<usize>) {
        let mut vals = [0usize; 5];
        let mut t = 0;
        while tokens[t] != PRINT {
            if tokens[t] == PASS {
                t += 1;
                continue;
            }
            let v = tokens[t] - VAR_BASE;
            match tokens[t + 1] {
                SET => vals[v] = 0,
                INCR => vals[v] += 1,
                other => panic!("unexpected token {other}"),
            }
            t += 2;
        }
        (vals[tokens[t + 1] - VAR_BASE], vals.to_vec())
    }

    #[test]
    fn counting_matches_interpreter() {
        let cfg = CountingConfig {
            n_vars: 3,
            max_ops: 128,
            ..Default::default()
        };
        let batch = gen_counting(&cfg, 1000, &mut rng(7)).unwrap();
        for e in &batch.examples {
            assert_eq!(e.n_masked(), 1);
            assert!(*e.loss_mask.last().unwrap());
            let (answer, vals) = run_tokens(&e.tokens);
            assert_eq!(*e.targets.last().unwrap(), answer);
            assert!(answer <= 10 && vals.iter().all(|&v| v <= 10));
            assert!(e.len() <= cfg.seq_len());
        }
    }

    #[test]
    fn counting_value_never_exceeds_limit_with_frequent_increments() {
        let cfg = CountingConfig {
            n_vars: 1,
            w_pass: 0.5,
            w_set: 0.1,
            max_ops: 200,
            ..Default::default()
        };
        let batch = gen_counting(&cfg, 50, &mut rng(8)).unwrap();
        for e in &batch.examples {
            let mut v = 0;
            for w in e.tokens.windows(2) {
                if w[1] == INCR {
                    v += 1;
                    assert!(v <= 10);
                } else if w[1] == SET {
                    v = 0;
                }
            }
        }
    }

    #[test]
    fn counting_rejects_too_many_variables() {
        let cfg = CountingConfig {
            n_vars: 6,
            ..Default::default()
        };
        assert!(matches!(
            gen_counting(&cfg, 1, &mut rng(9)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn generators_are_reproducible() {
        for task in [
            Task::FlipFlop(FlipFlopConfig {
                n_pairs: 16,
                ..Default::default()
            }),
            Task::SelectiveCopy(SelectiveCopyConfig {
                n_content: 8,
                n_blanks: 8,
                ..Default::default()
            }),
            Task::Counting(CountingConfig {
                max_ops: 32,
                ..Default::default()
            }),
        ] {
            let a = task.generate(5, Purpose::TrainData, 10, 20).unwrap();
            let b = task.generate(5, Purpose::TrainData, 10, 20).unwrap();
            assert_eq!(a, b);
            let c = task.generate(6, Purpose::TrainData, 10, 20).unwrap();
            assert_ne!(a, c);
            // Index k of a range equals index k generated alone.
            let one = task.generate(5, Purpose::TrainData, 15, 1).unwrap();
            assert_eq!(one.examples[0], a.examples[5]);
        }
    }

    #[test]
    fn charlm_windows_come_from_their_split() {
        let corpus = std::sync::Arc::new(CharCorpus::new(charlm::DEFAULT_TEXT, 0.1).unwrap());
        let cfg = CharLmConfig {
            seq_len: 32,
            split: CharSplit::Valid,
            corpus: corpus.clone(),
        };
        let e = charlm::generate_one(&cfg, &mut rng(10));
        let text = corpus.decode(&e.tokens);
        assert!(charlm::DEFAULT_TEXT[charlm::DEFAULT_TEXT.len() / 2..].contains(&text));
        assert_eq!(e.tokens[1..], e.targets[..31]);
    }

    #[test]
    fn error_metric_examples() {
        let targets = [0usize, 2, 1];
        let mask = [true, true, true];
        let onehot = |idx: &[usize]| {
            let mut t = Tensor::<f64>::zeros(vec![3, 3]);
            for (r, &c) in idx.iter().enumerate() {
                t.data_mut()[r * 3 + c] = 1.0;
            }
            t
        };
        assert_eq!(
            masked_token_error(&onehot(&targets), &targets, &mask).unwrap(),
            0.0
        );
        assert_eq!(
            masked_token_error(&onehot(&[1, 0, 2]), &targets, &mask).unwrap(),
            1.0
        );
        // All-equal rows resolve to token 0.
        let flat = Tensor::<f64>::zeros(vec![3, 3]);
        assert!((masked_token_error(&flat, &targets, &mask).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!(matches!(
            masked_token_error(&flat, &targets, &[false; 3]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn error_metric_matches_loop_count() {
        let mut r = rng(12);
        let logits = Tensor::<f64>::randn(vec![40, 5], 1.0, &mut r);
        let targets: Vec<usize> = (0..40).map(|_| r.below(5)).collect();
        let mask: Vec<bool> = (0..40).map(|_| r.bernoulli(0.6)).collect();
        let mut wrong = 0;
        let mut total = 0;
        for i in 0..40 {
            if !mask[i] {
                continue;
            }
            total += 1;
            let row = logits.row(i);
            let mut best = 0;
            for j in 0..5 {
                if row[j] > row[best] {
                    best = j;
                }
            }
            wrong += (best != targets[i]) as usize;
        }
        assert_eq!(
            masked_token_error(&logits, &targets, &mask).unwrap(),
            wrong as f64 / total as f64
        );
    }

    #[test]
    fn records_reject_truncation_and_bad_flags() {
        let e = Example {
            tokens: vec![1, 2],
            targets: vec![2, 3],
            loss_mask: vec![false, true],
        };
        let mut buf = Vec::new();
        write_records(&mut buf, &[e.clone()]).unwrap();
        assert_eq!(buf.len(), 4 * 7);
        assert_eq!(&buf[..4], &2u32.to_le_bytes());
        assert!(matches!(
            read_records(&buf[..buf.len() - 2]),
            Err(Error::Format(_))
        ));
        let mut bad = buf.clone();
        bad[4 * 6] = 7;
        assert!(matches!(read_records(&bad[..]), Err(Error::Format(_))));
        assert_eq!(read_records(&buf[..]).unwrap(), vec![e]);
    }

    proptest! {
        #[test]
        fn records_round_trip(seed in 0u64..1000, n in 0usize..6) {
            let task = Task::Counting(CountingConfig { n_vars: 3, max_ops: 20, ..Default::default() });
            let batch = task.generate(seed, Purpose::Test, 0, n).unwrap();
            let mut buf = Vec::new();
            write_records(&mut buf, &batch.examples).unwrap();
            prop_assert_eq!(read_records(&buf[..]).unwrap(), batch.examples);
        }

        #[test]
        fn flipflop_bits_are_binary(seed in 0u64..1000) {
            let cfg = FlipFlopConfig { n_pairs: 10, ..Default::default() };
            let e = flipflop::generate_one(&cfg, &mut rng(seed));
            for (t, &tok) in e.tokens.iter().enumerate() {
                if t % 2 == 1 {
                    prop_assert!(tok == ZERO || tok == ONE);
                }
            }
        }
    }
}
