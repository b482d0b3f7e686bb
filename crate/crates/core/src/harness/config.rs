//! Flat `key=value` run configuration.

use std::collections::BTreeMap;
use std::fmt::{Display, Write as _};
use std::str::FromStr;
use std::sync::Arc;

use crate::error::{config_err, Error, Result};
use crate::numerics::AdamWConfig;
use crate::position_encoding::{
    AlibiSlopes, Combine, CopeConfig, GateSource, PeConfig, PeKind, PeVariant,
};
use crate::tasks::{
    CharCorpus, CharLmConfig, CharSplit, CountingConfig, FlipFlopConfig, FlipFlopLoss,
    SelectiveCopyConfig, Task,
};
use crate::transformer::ModelConfig;

/// Every key the parser understands, in canonical output order.
pub const KNOWN_KEYS: &[&str] = &[
    "task",
    "task.n_pairs",
    "task.p_ignore_train",
    "task.p_ignore_ood",
    "task.loss",
    "task.vocab_size",
    "task.n_content",
    "task.n_blanks",
    "task.n_blanks_dense",
    "task.n_blanks_sparse",
    "task.n_vars",
    "task.w_set",
    "task.w_incr",
    "task.w_pass",
    "task.max_value",
    "task.max_ops",
    "task.ood_w_pass",
    "task.seq_len",
    "task.corpus",
    "task.valid_fraction",
    "data.train_pool",
    "data.eval_size",
    "data.eval_seed",
    "model.d_model",
    "model.n_heads",
    "model.n_layers",
    "model.ffn_mult",
    "model.context_t",
    "model.tie_embeddings",
    "model.init_std",
    "pe.kind",
    "pe.combine_with",
    "pe.p_max",
    "pe.gate_source",
    "pe.share_across_layers",
    "pe.alibi_slopes",
    "pe.rope_base",
    "pe.relative_cap",
    "optim.lr",
    "optim.beta1",
    "optim.beta2",
    "optim.eps",
    "optim.weight_decay",
    "optim.linear_decay",
    "optim.clip",
    "train.batch_size",
    "train.total_steps",
    "train.eval_every",
    "train.seeds",
    "train.early_stop",
    "train.dtype",
    "train.wall_clock",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DTypeChoice {
    F32,
    F64,
}

/// Task generator settings for training plus the knobs of its OOD splits.
#[derive(Clone, Debug, PartialEq)]
pub enum TaskSpec {
    FlipFlop {
        base: FlipFlopConfig,
        p_ignore_ood: f64,
    },
    SelectiveCopy {
        base: SelectiveCopyConfig,
        n_blanks_dense: usize,
        n_blanks_sparse: usize,
    },
    Counting {
        base: CountingConfig,
        ood_w_pass: Vec<f64>,
    },
    CharLm {
        seq_len: usize,
        corpus: Option<String>,
        valid_fraction: f64,
    },
}

/// A named evaluation split.
#[derive(Clone, Debug)]
pub struct Split {
    pub name: String,
    pub task: Task,
}

impl TaskSpec {
    pub fn name(&self) -> &'static str {
        match self {
            TaskSpec::FlipFlop { .. } => "flipflop",
            TaskSpec::SelectiveCopy { .. } => "selective_copy",
            TaskSpec::Counting { .. } => "counting",
            TaskSpec::CharLm { .. } => "charlm",
        }
    }

    fn corpus(corpus: &Option<String>, valid_fraction: f64) -> Result<Arc<CharCorpus>> {
        let text = match corpus {
            Some(path) => std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("task.corpus: cannot read {path}: {e}")))?,
            None => crate::tasks::charlm::DEFAULT_TEXT.to_string(),
        };
        Ok(Arc::new(CharCorpus::new(&text, valid_fraction)?))
    }

    /// Training generator and evaluation splits; the first split is the
    /// in-distribution one.
    pub fn build(&self) -> Result<(Task, Vec<Split>)> {
        let split = |name: &str, task: Task| Split {
            name: name.to_string(),
            task,
        };
        let out = match self {
            TaskSpec::FlipFlop { base, p_ignore_ood } => {
                let train = Task::FlipFlop(base.clone());
                let ood = Task::FlipFlop(FlipFlopConfig {
                    p_ignore: *p_ignore_ood,
                    ..base.clone()
                });
                (
                    train.clone(),
                    vec![split("in_dist", train), split("ood", ood)],
                )
            }
            TaskSpec::SelectiveCopy {
                base,
                n_blanks_dense,
                n_blanks_sparse,
            } => {
                let train = Task::SelectiveCopy(base.clone());
                let with = |n| {
                    Task::SelectiveCopy(SelectiveCopyConfig {
                        n_blanks: n,
                        ..base.clone()
                    })
                };
                (
                    train.clone(),
                    vec![
                        split("in_dist", train),
                        split("ood_dense", with(*n_blanks_dense)),
                        split("ood_sparse", with(*n_blanks_sparse)),
                    ],
                )
            }
            TaskSpec::Counting { base, ood_w_pass } => {
                let train = Task::Counting(base.clone());
                let mut splits = vec![split("in_dist", train.clone())];
                for &w in ood_w_pass {
                    let t = Task::Counting(CountingConfig {
                        w_pass: w,
                        ..base.clone()
                    });
                    splits.push(split(&format!("ood_w_pass_{w}"), t));
                }
                (train, splits)
            }
            TaskSpec::CharLm {
                seq_len,
                corpus,
                valid_fraction,
            } => {
                let corpus = Self::corpus(corpus, *valid_fraction)?;
                let cfg = |split| CharLmConfig {
                    seq_len: *seq_len,
                    split,
                    corpus: corpus.clone(),
                };
                (
                    Task::CharLm(cfg(CharSplit::Train)),
                    vec![split("valid", Task::CharLm(cfg(CharSplit::Valid)))],
                )
            }
        };
        out.0.validate()?;
        for s in &out.1 {
            s.task.validate()?;
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub task: TaskSpec,
    /// Fixed training pool size; 0 draws fresh sequences every step.
    pub train_pool: usize,
    pub eval_size: usize,
    pub eval_seed: u64,
    pub model: ModelConfig,
    /// `model.context_t` as written; 0 means "longest sequence of any split".
    pub context_t_setting: usize,
    pub optim: AdamWConfig,
    pub linear_decay: bool,
    /// Global gradient-norm clip; 0 disables.
    pub clip: f64,
    pub batch_size: usize,
    pub total_steps: u64,
    pub eval_every: u64,
    pub seeds: Vec<u64>,
    /// Stop once the in-distribution error is at or below this value.
    pub early_stop: Option<f64>,
    pub dtype: DTypeChoice,
    pub wall_clock: bool,
}

/// Raw entries with the line each came from, consumed as the config is
/// built so leftovers can be reported.
struct Entries {
    map: BTreeMap<String, (String, String)>,
}

impl Entries {
    fn take_str(&mut self, key: &str) -> Option<(String, String)> {
        self.map.remove(key)
    }

    fn take<T: FromStr>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        match self.map.remove(key) {
            None => Ok(default),
            Some((v, origin)) => v
                .parse::<T>()
                .map_err(|e| Error::Config(format!("{origin}: {key}={v:?} is not valid: {e}"))),
        }
    }

    fn take_list<T: FromStr>(&mut self, key: &str, default: Vec<T>) -> Result<Vec<T>>
    where
        T::Err: Display,
    {
        match self.map.remove(key) {
            None => Ok(default),
            Some((v, _)) if v.trim().is_empty() => Ok(Vec::new()),
            Some((v, origin)) => v
                .split(',')
                .map(|p| {
                    p.trim().parse::<T>().map_err(|e| {
                        Error::Config(format!("{origin}: {key}: {p:?} is not valid: {e}"))
                    })
                })
                .collect(),
        }
    }
}

fn suggest(key: &str) -> Option<&'static str> {
    KNOWN_KEYS
        .iter()
        .map(|k| (strsim::levenshtein(key, k), *k))
        .filter(|(d, _)| *d <= 3.max(key.len() / 3))
        .min()
        .map(|(_, k)| k)
}

/// Parses `key=value` lines (`#` starts a comment) then applies overrides
/// in order.
pub fn parse_config(text: &str, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut map = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return config_err(format!(
                "line {}: expected key=value, found {line:?}",
                n + 1
            ));
        };
        map.insert(
            k.trim().to_string(),
            (v.trim().to_string(), format!("line {}", n + 1)),
        );
    }
    for (k, v) in overrides {
        map.insert(
            k.trim().to_string(),
            (v.trim().to_string(), format!("override --{k}")),
        );
    }
    for (k, (_, origin)) in &map {
        if !KNOWN_KEYS.contains(&k.as_str()) {
            return Err(Error::Config(match suggest(k) {
                Some(s) => format!("{origin}: unknown key {k:?}; did you mean {s:?}?"),
                None => format!("{origin}: unknown key {k:?}"),
            }));
        }
    }
    let mut e = Entries { map };
    let cfg = build(&mut e)?;
    if let Some((k, (_, origin))) = e.map.iter().next() {
        return config_err(format!(
            "{origin}: key {k} does not apply to task={} with pe.kind={}",
            cfg.task.name(),
            cfg.model.pe.variant.kind
        ));
    }
    Ok(cfg)
}

fn parse_loss(s: &str) -> Result<FlipFlopLoss> {
    match s {
        "read_only" => Ok(FlipFlopLoss::ReadOnly),
        "all" => Ok(FlipFlopLoss::All),
        _ => config_err(format!("task.loss must be read_only or all, not {s:?}")),
    }
}

fn build(e: &mut Entries) -> Result<RunConfig> {
    let Some((task_name, _)) = e.take_str("task") else {
        return config_err(
            "missing required key task (flipflop, selective_copy, counting or charlm)",
        );
    };
    let (task, default_steps, default_pool) = match task_name.as_str() {
        "flipflop" => {
            let d = FlipFlopConfig::default();
            let loss = match e.take_str("task.loss") {
                Some((v, _)) => parse_loss(&v)?,
                None => d.loss,
            };
            let base = FlipFlopConfig {
                n_pairs: e.take("task.n_pairs", d.n_pairs)?,
                p_ignore: e.take("task.p_ignore_train", d.p_ignore)?,
                loss,
            };
            (
                TaskSpec::FlipFlop {
                    base,
                    p_ignore_ood: e.take("task.p_ignore_ood", 0.98)?,
                },
                10_000,
                0,
            )
        }
        "selective_copy" => {
            let d = SelectiveCopyConfig::default();
            let base = SelectiveCopyConfig {
                vocab_size: e.take("task.vocab_size", d.vocab_size)?,
                n_content: e.take("task.n_content", d.n_content)?,
                n_blanks: e.take("task.n_blanks", d.n_blanks)?,
            };
            let dense = e.take("task.n_blanks_dense", base.n_blanks / 2)?;
            let sparse = e.take("task.n_blanks_sparse", base.n_blanks * 2)?;
            (
                TaskSpec::SelectiveCopy {
                    base,
                    n_blanks_dense: dense,
                    n_blanks_sparse: sparse,
                },
                100_000,
                0,
            )
        }
        "counting" => {
            let d = CountingConfig::default();
            let base = CountingConfig {
                n_vars: e.take("task.n_vars", d.n_vars)?,
                w_set: e.take("task.w_set", d.w_set)?,
                w_incr: e.take("task.w_incr", d.w_incr)?,
                w_pass: e.take("task.w_pass", d.w_pass)?,
                max_value: e.take("task.max_value", d.max_value)?,
                max_ops: e.take("task.max_ops", d.max_ops)?,
            };
            let ood = e.take_list("task.ood_w_pass", vec![100.0, 10.0])?;
            (
                TaskSpec::Counting {
                    base,
                    ood_w_pass: ood,
                },
                10_000,
                10_000,
            )
        }
        "charlm" => {
            let corpus = e
                .take_str("task.corpus")
                .map(|(v, _)| v)
                .filter(|v| !v.is_empty());
            let spec = TaskSpec::CharLm {
                seq_len: e.take("task.seq_len", 64)?,
                corpus,
                valid_fraction: e.take("task.valid_fraction", 0.1)?,
            };
            (spec, 2_000, 0)
        }
        other => {
            return config_err(format!(
                "unknown task {other:?}; expected flipflop, selective_copy, counting or charlm"
            ))
        }
    };

    let kind: PeKind = e.take("pe.kind", PeKind::Cope)?;
    let combine_with = match e.take_str("pe.combine_with") {
        Some((v, _)) if v == "none" || v.is_empty() => None,
        Some((v, _)) => Some(v.parse::<Combine>()?),
        None => None,
    };
    let variant = PeVariant { kind, combine_with };
    variant.validate()?;
    let mut pe = PeConfig {
        variant,
        ..Default::default()
    };
    if variant.uses_cope() {
        let d = CopeConfig::default();
        pe.cope = CopeConfig {
            p_max: e.take("pe.p_max", d.p_max)?,
            gate_source: e.take("pe.gate_source", GateSource::AttnKeys)?,
            share_across_layers: e.take("pe.share_across_layers", false)?,
            alibi_slopes: None,
        };
        if kind == PeKind::CopeAlibi {
            pe.cope.alibi_slopes = Some(e.take("pe.alibi_slopes", AlibiSlopes::Learned)?);
        }
    }
    if variant.uses_rope() {
        pe.rope_base = e.take("pe.rope_base", pe.rope_base)?;
    }
    if kind == PeKind::RelativeCapped {
        let cap: usize = e.take("pe.relative_cap", 0)?;
        pe.relative_cap = (cap > 0).then_some(cap);
    }

    let dm = ModelConfig::default();
    let context_t_setting = e.take("model.context_t", 0usize)?;
    let model = ModelConfig {
        vocab_size: 0,
        d_model: e.take("model.d_model", dm.d_model)?,
        n_heads: e.take("model.n_heads", dm.n_heads)?,
        n_layers: e.take("model.n_layers", dm.n_layers)?,
        context_t: context_t_setting,
        ffn_mult: e.take("model.ffn_mult", dm.ffn_mult)?,
        pe,
        tie_embeddings: e.take("model.tie_embeddings", dm.tie_embeddings)?,
        init_std: e.take("model.init_std", dm.init_std)?,
    };

    let od = AdamWConfig::default();
    let optim = AdamWConfig {
        lr: e.take("optim.lr", od.lr)?,
        beta1: e.take("optim.beta1", od.beta1)?,
        beta2: e.take("optim.beta2", od.beta2)?,
        eps: e.take("optim.eps", od.eps)?,
        weight_decay: e.take("optim.weight_decay", od.weight_decay)?,
    };
    let early_stop = match e.take_str("train.early_stop") {
        None => None,
        Some((v, _)) if v == "none" => None,
        Some((v, origin)) => Some(v.parse::<f64>().map_err(|_| {
            Error::Config(format!(
                "{origin}: train.early_stop={v:?} is not a number or none"
            ))
        })?),
    };
    let dtype = match e.take_str("train.dtype") {
        None => DTypeChoice::F32,
        Some((v, _)) if v == "f32" => DTypeChoice::F32,
        Some((v, _)) if v == "f64" => DTypeChoice::F64,
        Some((v, origin)) => {
            return config_err(format!(
                "{origin}: train.dtype must be f32 or f64, not {v:?}"
            ))
        }
    };
    let mut cfg = RunConfig {
        task,
        train_pool: e.take("data.train_pool", default_pool)?,
        eval_size: e.take("data.eval_size", 1000)?,
        eval_seed: e.take("data.eval_seed", 20_240_529)?,
        model,
        context_t_setting,
        optim,
        linear_decay: e.take("optim.linear_decay", true)?,
        clip: e.take("optim.clip", 1.0)?,
        batch_size: e.take("train.batch_size", 16)?,
        total_steps: e.take("train.total_steps", default_steps)?,
        eval_every: e.take("train.eval_every", 1000)?,
        seeds: e.take_list("train.seeds", vec![1])?,
        early_stop,
        dtype,
        wall_clock: e.take("train.wall_clock", false)?,
    };
    cfg.resolve()?;
    Ok(cfg)
}

impl RunConfig {
    /// Fills the derived model fields (vocabulary, context length) and
    /// validates everything.
    pub fn resolve(&mut self) -> Result<()> {
        let (train, splits) = self.task.build()?;
        self.model.vocab_size = train.vocab_size();
        let longest = splits
            .iter()
            .map(|s| s.task.max_len())
            .chain([train.max_len()])
            .max()
            .unwrap_or(1);
        self.model.context_t = if self.context_t_setting == 0 {
            longest
        } else {
            self.context_t_setting
        };
        if self.model.context_t < longest && self.model.pe.variant.kind == PeKind::Absolute {
            return config_err(format!(
                "model.context_t={} is shorter than the longest sequence ({longest}) and pe.kind=absolute",
                self.model.context_t
            ));
        }
        self.model.validate()?;
        if self.batch_size == 0 {
            return config_err("train.batch_size must be positive");
        }
        if self.eval_every == 0 {
            return config_err("train.eval_every must be positive");
        }
        if self.eval_size == 0 {
            return config_err("data.eval_size must be positive");
        }
        if self.seeds.is_empty() {
            return config_err("train.seeds must list at least one seed");
        }
        if !(self.optim.lr >= 0.0) || !(self.clip >= 0.0) {
            return config_err("optim.lr and optim.clip must be non-negative");
        }
        Ok(())
    }

    /// Canonical text form; parsing it yields an equal config.
    pub fn to_text(&self) -> String {
        let mut kv: Vec<(&str, String)> = vec![("task", self.task.name().to_string())];
        match &self.task {
            TaskSpec::FlipFlop { base, p_ignore_ood } => {
                kv.push(("task.n_pairs", base.n_pairs.to_string()));
                kv.push(("task.p_ignore_train", base.p_ignore.to_string()));
                kv.push(("task.p_ignore_ood", p_ignore_ood.to_string()));
                let loss = match base.loss {
                    FlipFlopLoss::ReadOnly => "read_only",
                    FlipFlopLoss::All => "all",
                };
                kv.push(("task.loss", loss.to_string()));
            }
            TaskSpec::SelectiveCopy {
                base,
                n_blanks_dense,
                n_blanks_sparse,
            } => {
                kv.push(("task.vocab_size", base.vocab_size.to_string()));
                kv.push(("task.n_content", base.n_content.to_string()));
                kv.push(("task.n_blanks", base.n_blanks.to_string()));
                kv.push(("task.n_blanks_dense", n_blanks_dense.to_string()));
                kv.push(("task.n_blanks_sparse", n_blanks_sparse.to_string()));
            }
            TaskSpec::Counting { base, ood_w_pass } => {
                kv.push(("task.n_vars", base.n_vars.to_string()));
                kv.push(("task.w_set", base.w_set.to_string()));
                kv.push(("task.w_incr", base.w_incr.to_string()));
                kv.push(("task.w_pass", base.w_pass.to_string()));
                kv.push(("task.max_value", base.max_value.to_string()));
                kv.push(("task.max_ops", base.max_ops.to_string()));
                let list: Vec<String> = ood_w_pass.iter().map(|w| w.to_string()).collect();
                kv.push(("task.ood_w_pass", list.join(",")));
            }
            TaskSpec::CharLm {
                seq_len,
                corpus,
                valid_fraction,
            } => {
                kv.push(("task.seq_len", seq_len.to_string()));
                kv.push(("task.corpus", corpus.clone().unwrap_or_default()));
                kv.push(("task.valid_fraction", valid_fraction.to_string()));
            }
        }
        kv.push(("data.train_pool", self.train_pool.to_string()));
        kv.push(("data.eval_size", self.eval_size.to_string()));
        kv.push(("data.eval_seed", self.eval_seed.to_string()));
        let m = &self.model;
        kv.push(("model.d_model", m.d_model.to_string()));
        kv.push(("model.n_heads", m.n_heads.to_string()));
        kv.push(("model.n_layers", m.n_layers.to_string()));
        kv.push(("model.ffn_mult", m.ffn_mult.to_string()));
        kv.push(("model.context_t", self.context_t_setting.to_string()));
        kv.push(("model.tie_embeddings", m.tie_embeddings.to_string()));
        kv.push(("model.init_std", m.init_std.to_string()));
        let pe = &m.pe;
        kv.push(("pe.kind", pe.variant.kind.to_string()));
        if let Some(c) = pe.variant.combine_with {
            kv.push(("pe.combine_with", c.to_string()));
        }
        if pe.variant.uses_cope() {
            kv.push(("pe.p_max", pe.cope.p_max.to_string()));
            kv.push(("pe.gate_source", pe.cope.gate_source.to_string()));
            kv.push((
                "pe.share_across_layers",
                pe.cope.share_across_layers.to_string(),
            ));
            if let Some(s) = &pe.cope.alibi_slopes {
                kv.push(("pe.alibi_slopes", s.to_string()));
            }
        }
        if pe.variant.uses_rope() {
            kv.push(("pe.rope_base", pe.rope_base.to_string()));
        }
        if pe.variant.kind == PeKind::RelativeCapped {
            kv.push(("pe.relative_cap", pe.relative_cap.unwrap_or(0).to_string()));
        }
        let o = &self.optim;
        kv.push(("optim.lr", o.lr.to_string()));
        kv.push(("optim.beta1", o.beta1.to_string()));
        kv.push(("optim.beta2", o.beta2.to_string()));
        kv.push(("optim.eps", o.eps.to_string()));
        kv.push(("optim.weight_decay", o.weight_decay.to_string()));
        kv.push(("optim.linear_decay", self.linear_decay.to_string()));
        kv.push(("optim.clip", self.clip.to_string()));
        kv.push(("train.batch_size", self.batch_size.to_string()));
        kv.push(("train.total_steps", self.total_steps.to_string()));
        kv.push(("train.eval_every", self.eval_every.to_string()));
        let seeds: Vec<String> = self.seeds.iter().map(|s| s.to_string()).collect();
        kv.push(("train.seeds", seeds.join(",")));
        kv.push((
            "train.early_stop",
            self.early_stop
                .map_or("none".to_string(), |x| x.to_string()),
        ));
        kv.push((
            "train.dtype",
            if self.dtype == DTypeChoice::F64 {
                "f64"
            } else {
                "f32"
            }
            .to_string(),
        ));
        kv.push(("train.wall_clock", self.wall_clock.to_string()));
        let mut out = String::new();
        for (k, v) in kv {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    /// Copy with one more override applied.
    pub fn with(&self, key: &str, value: &str) -> Result<RunConfig> {
        parse_config(&self.to_text(), &[(key.to_string(), value.to_string())])
    }
}

/// Splits `key=value` command-line arguments.
pub fn parse_overrides<S: AsRef<str>>(args: &[S]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = args.iter().map(|a| a.as_ref());
    while let Some(a) = it.next() {
        let bare = a.trim_start_matches("--");
        if let Some((k, v)) = bare.split_once('=') {
            out.push((k.to_string(), v.to_string()));
        } else if a.starts_with("--") {
            let v = it
                .next()
                .ok_or_else(|| Error::Config(format!("override {a} has no value")))?;
            out.push((bare.to_string(), v.to_string()));
        } else {
            return Err(Error::Config(format!(
                "override {a:?} is neither key=value nor --key value"
            )));
        }
    }
    Ok(out)
}
