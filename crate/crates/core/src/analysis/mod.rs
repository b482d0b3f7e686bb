//! Introspection of trained CoPE models: position-only attention maps, gate
//! maps, and an exact-arithmetic demonstration of why token-offset
//! position encodings cannot always reach the right token.

use std::fmt::Write as _;
use std::path::Path;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{Signed, ToPrimitive, Zero};

use crate::error::{config_err, Error, Result};
use crate::harness::checkpoint::Checkpoint;
use crate::harness::{parse_config, DTypeChoice, Trainer};
use crate::numerics::{Graph, Tensor};
use crate::scalar::Scalar;
use crate::transformer::{ForwardOptions, HeadTrace, Model};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DumpMode {
    /// Softmax over the positional logit term alone, rows scaled to max 1.
    Position,
    /// Gate values `g_ij`, zero above the diagonal.
    Gates,
}

impl std::str::FromStr for DumpMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "position" => Ok(DumpMode::Position),
            "gates" => Ok(DumpMode::Gates),
            other => config_err(format!(
                "unknown dump mode {other:?} (expected position or gates)"
            )),
        }
    }
}

impl std::fmt::Display for DumpMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DumpMode::Position => "position",
            DumpMode::Gates => "gates",
        })
    }
}

/// Raw CoPE quantities of one head on one input, in f64.
#[derive(Clone, Debug, PartialEq)]
pub struct CopeHead {
    pub tokens: Vec<usize>,
    /// `T×T`, zero above the diagonal.
    pub gates: Vec<Vec<f64>>,
    /// Clamped positions `p_ij`, zero above the diagonal.
    pub positions: Vec<Vec<f64>>,
    /// Positional logit term actually added to the content logits.
    pub position_logits: Vec<Vec<f64>>,
    /// `z_i[p]` at integer `p`, `T×p_max`; `None` for CoPE-ALiBi.
    pub table: Option<Vec<Vec<f64>>>,
}

/// Rows of a dump, aligned with the input tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Dump {
    pub mode: DumpMode,
    pub layer: usize,
    pub head: usize,
    pub tokens: Vec<usize>,
    pub rows: Vec<Vec<f64>>,
}

fn rows_of<T: Scalar>(t: &Tensor<T>) -> Vec<Vec<f64>> {
    (0..t.rows())
        .map(|i| t.row(i).iter().map(|x| x.as_f64()).collect())
        .collect()
}

fn causal(rows: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    rows.into_iter()
        .enumerate()
        .map(|(i, r)| {
            r.into_iter()
                .enumerate()
                .map(|(j, v)| if j <= i { v } else { 0.0 })
                .collect()
        })
        .collect()
}

/// Runs `tokens` through `model` and returns the CoPE quantities of
/// `(layer, head)`.
pub fn cope_head<T: Scalar>(
    model: &Model<T>,
    tokens: &[usize],
    layer: usize,
    head: usize,
    gate_override: Option<T>,
) -> Result<CopeHead> {
    let c = model.config();
    if !c.pe.variant.uses_cope() {
        return config_err(format!(
            "attention dumps need a CoPE model, this one uses pe.kind={}",
            c.pe.variant.kind
        ));
    }
    if layer >= c.n_layers || head >= c.n_heads {
        return config_err(format!(
            "layer {layer} head {head} out of range (model has {} layers, {} heads)",
            c.n_layers, c.n_heads
        ));
    }
    let mut g = Graph::with_params(model.params());
    let opts = ForwardOptions {
        gate_override,
        trace: true,
    };
    let fwd = model.forward(&mut g, &[tokens], &opts)?;
    let trace = fwd
        .trace
        .ok_or_else(|| Error::Invariant("forward returned no trace".into()))?;
    let h: &HeadTrace<T> = &trace.layers[layer][head];
    let missing = || Error::Invariant("CoPE head trace is incomplete".into());
    Ok(CopeHead {
        tokens: tokens.to_vec(),
        gates: causal(rows_of(h.gates.as_ref().ok_or_else(missing)?)),
        positions: causal(rows_of(h.positions.as_ref().ok_or_else(missing)?)),
        position_logits: causal(rows_of(h.position_logits.as_ref().ok_or_else(missing)?)),
        table: h.position_table.as_ref().map(rows_of),
    })
}

/// Causal softmax over each row's positional term, then each row divided
/// by its maximum. Masked entries are 0.
pub fn position_attention_rows(position_logits: &[Vec<f64>]) -> Vec<Vec<f64>> {
    position_logits
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let live = &row[..=i];
            let m = live.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = live.iter().map(|&x| (x - m).exp()).collect();
            let s: f64 = e.iter().sum();
            let a: Vec<f64> = e.iter().map(|x| x / s).collect();
            let top = a.iter().copied().fold(0.0, f64::max);
            let mut out: Vec<f64> = a.iter().map(|x| x / top).collect();
            out.resize(row.len(), 0.0);
            out
        })
        .collect()
}

pub fn dump_position_attention<T: Scalar>(
    model: &Model<T>,
    tokens: &[usize],
    layer: usize,
    head: usize,
) -> Result<Dump> {
    let h = cope_head(model, tokens, layer, head, None)?;
    Ok(Dump {
        mode: DumpMode::Position,
        layer,
        head,
        tokens: tokens.to_vec(),
        rows: position_attention_rows(&h.position_logits),
    })
}

pub fn dump_gates<T: Scalar>(
    model: &Model<T>,
    tokens: &[usize],
    layer: usize,
    head: usize,
    gate_override: Option<T>,
) -> Result<Dump> {
    let h = cope_head(model, tokens, layer, head, gate_override)?;
    Ok(Dump {
        mode: DumpMode::Gates,
        layer,
        head,
        tokens: tokens.to_vec(),
        rows: h.gates,
    })
}

fn dump_with<T: Scalar>(
    ck: &Checkpoint,
    tokens: &[usize],
    layer: usize,
    head: usize,
    mode: DumpMode,
) -> Result<Dump> {
    let t = Trainer::<T>::from_checkpoint(ck, None)?;
    match mode {
        DumpMode::Position => dump_position_attention(&t.model, tokens, layer, head),
        DumpMode::Gates => dump_gates(&t.model, tokens, layer, head, None),
    }
}

/// Dump from a checkpoint file in whichever precision it was trained.
pub fn dump_checkpoint(
    path: &Path,
    tokens: &[usize],
    layer: usize,
    head: usize,
    mode: DumpMode,
) -> Result<Dump> {
    let ck = Checkpoint::load(path)?;
    match parse_config(&ck.config_text, &[])?.dtype {
        DTypeChoice::F32 => dump_with::<f32>(&ck, tokens, layer, head, mode),
        DTypeChoice::F64 => dump_with::<f64>(&ck, tokens, layer, head, mode),
    }
}

/// `%g` with six significant digits.
pub fn format_g6(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return v.to_string();
    }
    let sci = format!("{v:.5e}");
    let (mant, exp) = sci.split_once('e').unwrap();
    let exp: i32 = exp.parse().unwrap();
    if (-4..6).contains(&exp) {
        let s = format!("{v:.*}", (5 - exp) as usize);
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        let mant = if mant.contains('.') {
            mant.trim_end_matches('0').trim_end_matches('.')
        } else {
            mant
        };
        format!("{mant}e{}{:02}", if exp < 0 { '-' } else { '+' }, exp.abs())
    }
}

impl Dump {
    /// Header line, then one line per query: index, token id, `T` values.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let what = match self.mode {
            DumpMode::Position => {
                "softmax of the positional term alone, causal mask applied before the softmax, rows scaled to max 1"
            }
            DumpMode::Gates => "gate values g_ij, entries above the diagonal are 0",
        };
        let _ = writeln!(
            s,
            "# mode={} layer={} head={} fields: query token v_0..v_{} ({what})",
            self.mode,
            self.layer,
            self.head,
            self.tokens.len().saturating_sub(1)
        );
        for (i, (tok, row)) in self.tokens.iter().zip(&self.rows).enumerate() {
            let _ = write!(s, "{i} {tok}");
            for &v in row {
                s.push(' ');
                s.push_str(&format_g6(v));
            }
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("empty dump".into()))?;
        let field = |key: &str| -> Result<&str> {
            header
                .split_whitespace()
                .find_map(|w| w.strip_prefix(key))
                .ok_or_else(|| Error::Format(format!("dump header lacks {key}")))
        };
        let num = |key: &str| -> Result<usize> {
            field(key)?
                .parse()
                .map_err(|_| Error::Format(format!("bad {key} in dump header")))
        };
        let mode = field("mode=")?.parse()?;
        let (layer, head) = (num("layer=")?, num("head=")?);
        let (mut tokens, mut rows) = (Vec::new(), Vec::new());
        for (n, line) in lines.enumerate() {
            let bad = || Error::Format(format!("dump line {}: malformed", n + 2));
            let mut w = line.split_whitespace();
            let _query: usize = w.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
            tokens.push(w.next().ok_or_else(bad)?.parse().map_err(|_| bad())?);
            rows.push(
                w.map(|x| x.parse::<f64>().map_err(|_| bad()))
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        Ok(Self {
            mode,
            layer,
            head,
            tokens,
            rows,
        })
    }
}

/// Reads whitespace-separated token ids.
pub fn read_tokens(text: &str) -> Result<Vec<usize>> {
    let toks = text
        .split_whitespace()
        .map(|w| {
            w.parse::<usize>()
                .map_err(|_| Error::Format(format!("not a token id: {w:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if toks.is_empty() {
        return Err(Error::Format("no tokens in input".into()));
    }
    Ok(toks)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundRow {
    pub i: usize,
    /// `a_x[i] / a_y[0] = exp(Δ − iδ)`.
    pub ratio: f64,
    /// Whether `x` strictly outweighs the nearest `y`.
    pub attends_to_x: bool,
}

fn exact(v: f64, name: &str) -> Result<BigRational> {
    if !(v.is_finite() && v > 0.0) {
        return Err(Error::Domain(format!(
            "{name} must be positive and finite, got {v}"
        )));
    }
    Ok(BigRational::from_float(v).expect("finite float"))
}

/// For token offsets `i = 0..=i_max`, compares `x` at offset `i` (content
/// logit higher by `delta`) with the copy of `y` at offset 0, when the
/// positional logit falls by `small_delta` per token. The exponent
/// `Δ − iδ` is evaluated in exact rationals, so ties are detected exactly.
pub fn relative_pe_bound_demo(delta: f64, small_delta: f64, i_max: usize) -> Result<Vec<BoundRow>> {
    let (big, small) = (exact(delta, "Δ")?, exact(small_delta, "δ")?);
    Ok((0..=i_max)
        .map(|i| {
            let e = &big - &small * BigRational::from_integer(BigInt::from(i));
            BoundRow {
                i,
                ratio: e.to_f64().unwrap_or(f64::NAN).exp(),
                attends_to_x: e.is_positive(),
            }
        })
        .collect())
}

/// First offset at which `x` no longer wins, `⌈Δ/δ⌉`, computed exactly.
pub fn bound_threshold(delta: f64, small_delta: f64) -> Result<BigInt> {
    let r = exact(delta, "Δ")? / exact(small_delta, "δ")?;
    let c = r.ceil().to_integer();
    debug_assert!(!(r - BigRational::from_integer(c.clone())).is_positive() || c.is_zero());
    Ok(c)
}
