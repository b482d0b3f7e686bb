//! Training loop, evaluation, checkpoint resume and seed sweeps.

use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::error::{config_err, domain_err, Error, Result};
use crate::numerics::{AdamWState, Graph, Purpose, RngStream, Tensor};
use crate::scalar::Scalar;
use crate::tasks::{masked_token_errors, Example, LabeledBatch, Task};
use crate::transformer::{ForwardOptions, Model};

use super::checkpoint::{float_entry, u64_entry, Checkpoint, Entry, EntryData};
use super::config::{parse_config, DTypeChoice, RunConfig, Split};
use super::metrics::{MetricsRecord, MetricsWriter};

/// Sequences per forward pass during evaluation.
const EVAL_CHUNK: usize = 32;

/// Gap between the stream indices of consecutive evaluation splits.
const SPLIT_STRIDE: u64 = 1 << 40;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct Interval {
    loss_sum: f64,
    batches: u64,
    wrong: u64,
    masked: u64,
}

/// Model, optimizer and data position of one seed's run.
pub struct Trainer<T: Scalar> {
    pub config: RunConfig,
    config_text: String,
    pub seed: u64,
    pub model: Model<T>,
    pub opt: AdamWState<T>,
    pub step: u64,
    /// Set once early stopping triggered.
    pub stopped: bool,
    acc: Interval,
    train_task: Task,
    splits: Vec<Split>,
    pool: Option<Vec<Example>>,
    eval_sets: Option<Vec<LabeledBatch>>,
}

/// Loss, error and masked-position count of one split.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitScore {
    pub loss: f64,
    pub error: f64,
    pub positions: u64,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: RunConfig, seed: u64) -> Result<Self> {
        let model = Model::new(config.model.clone(), seed)?;
        let opt = AdamWState::new(model.params());
        let (train_task, splits) = config.task.build()?;
        let pool = (config.train_pool > 0)
            .then(|| {
                train_task
                    .generate(seed, Purpose::Pool, 0, config.train_pool)
                    .map(|b| b.examples)
            })
            .transpose()?;
        Ok(Self {
            config_text: config.to_text(),
            config,
            seed,
            model,
            opt,
            step: 0,
            stopped: false,
            acc: Interval::default(),
            train_task,
            splits,
            pool,
            eval_sets: None,
        })
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    /// The batch consumed by step `step`.
    pub fn train_batch(&self, step: u64) -> Result<LabeledBatch> {
        let b = self.config.batch_size;
        match &self.pool {
            Some(pool) => {
                let mut rng = RngStream::for_purpose(self.seed, Purpose::PoolSample, step);
                let examples = (0..b)
                    .map(|_| pool[rng.below(pool.len())].clone())
                    .collect();
                Ok(LabeledBatch { examples })
            }
            None => self
                .train_task
                .generate(self.seed, Purpose::TrainData, step * b as u64, b),
        }
    }

    /// Held-out sets, generated from the evaluation seed so every training
    /// seed sees the same sequences.
    pub fn eval_sets(&mut self) -> Result<&[LabeledBatch]> {
        if self.eval_sets.is_none() {
            let mut sets = Vec::with_capacity(self.splits.len());
            for (i, s) in self.splits.iter().enumerate() {
                let first = i as u64 * SPLIT_STRIDE;
                sets.push(s.task.generate(
                    self.config.eval_seed,
                    Purpose::EvalData,
                    first,
                    self.config.eval_size,
                )?);
            }
            self.eval_sets = Some(sets);
        }
        Ok(self.eval_sets.as_deref().unwrap())
    }

    fn lr_at(&self, step: u64) -> f64 {
        let base = self.config.optim.lr;
        if self.config.linear_decay && self.config.total_steps > 0 {
            base * (1.0 - step as f64 / self.config.total_steps as f64)
        } else {
            base
        }
    }

    /// One optimizer update; returns the batch loss.
    pub fn train_step(&mut self) -> Result<f64> {
        let batch = self.train_batch(self.step)?;
        let seqs = batch.token_slices();
        let targets = batch.flat_targets();
        let mask = batch.flat_mask();
        let (loss, counts, grads) = {
            let mut g = Graph::with_params(self.model.params());
            let (loss, fwd) =
                self.model
                    .loss(&mut g, &seqs, &targets, &mask, &ForwardOptions::default())?;
            let loss_value = g.value(loss).data()[0].as_f64();
            if !loss_value.is_finite() {
                return domain_err(format!("non-finite training loss at step {}", self.step));
            }
            let counts = masked_token_errors(g.value(fwd.logits), &targets, &mask)?;
            (loss_value, counts, g.backward(loss)?)
        };
        let lr = self.lr_at(self.step);
        let params = self.model.params_mut();
        params.zero_grads();
        grads.accumulate_into(params, T::one());
        if self.config.clip > 0.0 {
            let norm = params.grad_global_norm().as_f64();
            if norm > self.config.clip {
                params.scale_grads(T::lit(self.config.clip / norm));
            }
        }
        self.opt.step(params, &self.config.optim, lr)?;
        self.step += 1;
        self.acc.loss_sum += loss;
        self.acc.batches += 1;
        self.acc.wrong += counts.0 as u64;
        self.acc.masked += counts.1 as u64;
        Ok(loss)
    }

    /// Scores the model on `batch` without touching any state.
    pub fn score(&self, batch: &LabeledBatch) -> Result<SplitScore> {
        let mut loss_sum = 0.0;
        let (mut wrong, mut total) = (0usize, 0usize);
        for chunk in batch.examples.chunks(EVAL_CHUNK) {
            let part = LabeledBatch {
                examples: chunk.to_vec(),
            };
            let targets = part.flat_targets();
            let mask = part.flat_mask();
            let mut g = Graph::with_params(self.model.params());
            let (loss, fwd) = self.model.loss(
                &mut g,
                &part.token_slices(),
                &targets,
                &mask,
                &ForwardOptions::default(),
            )?;
            let (w, n) = masked_token_errors(g.value(fwd.logits), &targets, &mask)?;
            loss_sum += g.value(loss).data()[0].as_f64() * n as f64;
            wrong += w;
            total += n;
        }
        if total == 0 {
            return domain_err("evaluation set has no loss-masked positions");
        }
        Ok(SplitScore {
            loss: loss_sum / total as f64,
            error: wrong as f64 / total as f64,
            positions: total as u64,
        })
    }

    fn record(&self, split: &str, s: SplitScore, start: Option<Instant>) -> MetricsRecord {
        MetricsRecord {
            seed: self.seed,
            step: self.step,
            split: split.to_string(),
            loss: s.loss,
            error: s.error,
            positions: s.positions,
            wall_clock: start.map(|t| t.elapsed().as_secs_f64()),
            config: self.config_text.clone(),
        }
    }

    /// Records for every evaluation split at the current step.
    pub fn evaluate(&mut self, start: Option<Instant>) -> Result<Vec<MetricsRecord>> {
        self.eval_sets()?;
        let sets = self.eval_sets.as_ref().unwrap();
        let mut out = Vec::with_capacity(sets.len());
        for (split, set) in self.splits.iter().zip(sets) {
            out.push(self.record(&split.name, self.score(set)?, start));
        }
        Ok(out)
    }

    /// Trains until `total_steps`, early stopping, or `stop_at`, writing
    /// records to `sink` and a checkpoint at every evaluation and at the
    /// end. Returns the last evaluation's records.
    pub fn run(
        &mut self,
        sink: &mut dyn FnMut(&MetricsRecord) -> Result<()>,
        checkpoint: Option<&Path>,
        stop_at: Option<u64>,
    ) -> Result<Vec<MetricsRecord>> {
        let start = self.config.wall_clock.then(Instant::now);
        let total = self.config.total_steps;
        let mut last = Vec::new();
        if total == 0 {
            last = self.evaluate(start)?;
            for r in &last {
                sink(r)?;
            }
        }
        while self.step < total && !self.stopped && stop_at.is_none_or(|s| self.step < s) {
            self.train_step()?;
            if self.step % self.config.eval_every == 0 || self.step == total {
                let a = self.acc;
                let train = SplitScore {
                    loss: a.loss_sum / a.batches as f64,
                    error: a.wrong as f64 / a.masked.max(1) as f64,
                    positions: a.masked,
                };
                sink(&self.record("train", train, start))?;
                self.acc = Interval::default();
                last = self.evaluate(start)?;
                for r in &last {
                    sink(r)?;
                }
                if let Some(th) = self.config.early_stop {
                    if last[0].error <= th {
                        self.stopped = true;
                    }
                }
                if let Some(p) = checkpoint {
                    self.to_checkpoint().save(p)?;
                }
            }
        }
        if let Some(p) = checkpoint {
            self.to_checkpoint().save(p)?;
        }
        Ok(last)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut entries = Vec::new();
        let params: Vec<_> = self.model.params().iter().collect();
        for (_, p) in &params {
            entries.push(float_entry(
                format!("param.{}", p.name),
                p.tensor.shape().to_vec(),
                p.tensor.data(),
            ));
        }
        for (which, moments) in [("m", &self.opt.m), ("v", &self.opt.v)] {
            for ((_, p), buf) in params.iter().zip(moments.iter()) {
                entries.push(float_entry(
                    format!("adam.{which}.{}", p.name),
                    p.tensor.shape().to_vec(),
                    buf,
                ));
            }
        }
        entries.push(u64_entry(
            "state.step",
            vec![self.step, self.opt.step, self.stopped as u64],
        ));
        // Every data stream is indexed by (seed, purpose, step), so seed and
        // step fully determine the generator state.
        entries.push(u64_entry("rng.state", vec![self.seed, self.step]));
        let a = self.acc;
        entries.push(Entry {
            name: "state.interval".into(),
            dims: vec![4],
            data: EntryData::F64(vec![
                a.loss_sum,
                a.batches as f64,
                a.wrong as f64,
                a.masked as f64,
            ]),
        });
        Checkpoint {
            config_text: self.config_text.clone(),
            entries,
        }
    }

    /// Restores a run; `config` overrides the stored configuration when
    /// given (evaluation on other splits).
    pub fn from_checkpoint(ck: &Checkpoint, config: Option<RunConfig>) -> Result<Self> {
        let stored = parse_config(&ck.config_text, &[])?;
        let mut config = config.unwrap_or(stored.clone());
        if config.model.vocab_size != stored.model.vocab_size {
            return config_err(format!(
                "vocabulary mismatch: checkpoint model has {} tokens, task {} needs {}",
                stored.model.vocab_size,
                config.task.name(),
                config.model.vocab_size
            ));
        }
        // Evaluation overrides change the data, never the network.
        config.model = stored.model.clone();
        config.context_t_setting = stored.context_t_setting;
        let rng = ck.u64s("rng.state")?;
        let state = ck.u64s("state.step")?;
        if rng.len() != 2 || state.len() != 3 {
            return Err(Error::Format("malformed rng.state or state.step".into()));
        }
        let mut t = Self::new(config, rng[0])?;
        let names: Vec<(usize, String, Vec<usize>)> = t
            .model
            .params()
            .iter()
            .map(|(id, p)| (id.0, p.name.clone(), p.tensor.shape().to_vec()))
            .collect();
        let mut expected = vec![
            "state.step".to_string(),
            "rng.state".to_string(),
            "state.interval".to_string(),
        ];
        for (i, name, shape) in &names {
            let data = ck.floats::<T>(&format!("param.{name}"), shape)?;
            t.model.set_param(name, Tensor::new(shape.clone(), data)?)?;
            t.opt.m[*i] = ck.floats::<T>(&format!("adam.m.{name}"), shape)?;
            t.opt.v[*i] = ck.floats::<T>(&format!("adam.v.{name}"), shape)?;
            expected.extend([
                format!("param.{name}"),
                format!("adam.m.{name}"),
                format!("adam.v.{name}"),
            ]);
        }
        if let Some(extra) = ck.entries.iter().find(|e| !expected.contains(&e.name)) {
            return config_err(format!(
                "tensor {} in the checkpoint has no counterpart in the model",
                extra.name
            ));
        }
        t.step = state[0];
        t.opt.step = state[1];
        t.stopped = state[2] != 0;
        if rng[1] != t.step {
            return Err(Error::Format("rng.state and state.step disagree".into()));
        }
        match &ck.get("state.interval")?.data {
            EntryData::F64(v) if v.len() == 4 => {
                t.acc = Interval {
                    loss_sum: v[0],
                    batches: v[1] as u64,
                    wrong: v[2] as u64,
                    masked: v[3] as u64,
                };
            }
            _ => return Err(Error::Format("malformed state.interval".into())),
        }
        Ok(t)
    }
}

/// Files and final scores of one seed.
#[derive(Clone, Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub dir: PathBuf,
    pub steps: u64,
    pub final_records: Vec<MetricsRecord>,
}

impl SeedRun {
    pub fn error(&self, split: &str) -> Option<f64> {
        self.final_records
            .iter()
            .find(|r| r.split == split)
            .map(|r| r.error)
    }

    pub fn loss(&self, split: &str) -> Option<f64> {
        self.final_records
            .iter()
            .find(|r| r.split == split)
            .map(|r| r.loss)
    }
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}"))
}

fn train_seed<T: Scalar>(
    config: &RunConfig,
    seed: u64,
    dir: &Path,
    stop_at: Option<u64>,
) -> Result<SeedRun> {
    std::fs::create_dir_all(dir)?;
    let metrics = dir.join("metrics.jsonl");
    if metrics.exists() {
        std::fs::remove_file(&metrics)?;
    }
    let mut w = MetricsWriter::append(&metrics)?;
    let mut t = Trainer::<T>::new(config.clone(), seed)?;
    let final_records = t.run(
        &mut |r| w.write(r),
        Some(&dir.join("checkpoint.bin")),
        stop_at,
    )?;
    Ok(SeedRun {
        seed,
        dir: dir.to_path_buf(),
        steps: t.step,
        final_records,
    })
}

/// Trains every configured seed in sequence under `out/seed_<s>/`.
pub fn run_train(config: &RunConfig, out: &Path, stop_at: Option<u64>) -> Result<Vec<SeedRun>> {
    config
        .seeds
        .iter()
        .map(|&s| train_seed_dispatch(config, s, &seed_dir(out, s), stop_at))
        .collect()
}

fn train_seed_dispatch(
    config: &RunConfig,
    seed: u64,
    dir: &Path,
    stop_at: Option<u64>,
) -> Result<SeedRun> {
    match config.dtype {
        DTypeChoice::F32 => train_seed::<f32>(config, seed, dir, stop_at),
        DTypeChoice::F64 => train_seed::<f64>(config, seed, dir, stop_at),
    }
}

fn resume_typed<T: Scalar>(ck: &Checkpoint, ckpt: &Path, stop_at: Option<u64>) -> Result<SeedRun> {
    let dir = ckpt.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut w = MetricsWriter::append(&dir.join("metrics.jsonl"))?;
    let mut t = Trainer::<T>::from_checkpoint(ck, None)?;
    let final_records = t.run(&mut |r| w.write(r), Some(ckpt), stop_at)?;
    Ok(SeedRun {
        seed: t.seed,
        dir,
        steps: t.step,
        final_records,
    })
}

/// Continues the run stored at `ckpt`, appending to the metrics file next
/// to it and overwriting the checkpoint as it goes.
pub fn resume_train(ckpt: &Path, stop_at: Option<u64>) -> Result<SeedRun> {
    let ck = Checkpoint::load(ckpt)?;
    match parse_config(&ck.config_text, &[])?.dtype {
        DTypeChoice::F32 => resume_typed::<f32>(&ck, ckpt, stop_at),
        DTypeChoice::F64 => resume_typed::<f64>(&ck, ckpt, stop_at),
    }
}

fn eval_typed<T: Scalar>(ck: &Checkpoint, config: Option<RunConfig>) -> Result<Vec<MetricsRecord>> {
    Trainer::<T>::from_checkpoint(ck, config)?.evaluate(None)
}

/// Evaluates a checkpoint on the splits of its own configuration with
/// `overrides` applied.
pub fn run_eval(ckpt: &Path, overrides: &[(String, String)]) -> Result<Vec<MetricsRecord>> {
    let ck = Checkpoint::load(ckpt)?;
    let config = if overrides.is_empty() {
        None
    } else {
        Some(parse_config(&ck.config_text, overrides)?)
    };
    match parse_config(&ck.config_text, &[])?.dtype {
        DTypeChoice::F32 => eval_typed::<f32>(&ck, config),
        DTypeChoice::F64 => eval_typed::<f64>(&ck, config),
    }
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Per-split `mean (std)` of the final errors in percent, one line each.
pub fn summarize(runs: &[SeedRun]) -> String {
    let mut out = String::from("split error_percent_mean (std) seeds\n");
    let Some(first) = runs.first() else {
        return out;
    };
    for r in &first.final_records {
        let errs: Vec<f64> = runs
            .iter()
            .filter_map(|s| s.error(&r.split))
            .map(|e| 100.0 * e)
            .collect();
        let (m, s) = mean_std(&errs);
        out.push_str(&format!("{} {m:.1} ({s:.1}) {}\n", r.split, errs.len()));
    }
    out
}

/// Trains every seed once per value of `key`, returning CSV rows
/// `value,seed,step,split,loss,error`.
pub fn run_sweep(config: &RunConfig, key: &str, values: &[String], out: &Path) -> Result<String> {
    let mut csv = String::from("value,seed,step,split,loss,error\n");
    for v in values {
        let cfg = config.with(key, v)?;
        let runs = run_train(&cfg, &out.join(format!("{key}={v}")), None)?;
        for r in &runs {
            for rec in &r.final_records {
                csv.push_str(&format!(
                    "{v},{},{},{},{},{}\n",
                    r.seed, rec.step, rec.split, rec.loss, rec.error
                ));
            }
        }
    }
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("sweep.csv"), &csv)?;
    Ok(csv)
}
