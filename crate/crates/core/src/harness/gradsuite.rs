//! The finite-difference suite behind `cope gradcheck`: every
//! differentiable graph op, CoPE attention per gate source, and end-to-end
//! tiny models for each position-encoding variant.

use std::rc::Rc;

use crate::error::Result;
use crate::numerics::{
    causal_mask, check_param_gradients, finite_difference_check, GradCheckReport, Graph, Mask,
    Purpose, RngStream, Tensor, Var,
};
use crate::position_encoding::{
    cope_attention_logits, AlibiSlopes, Combine, GateInput, GateSource, PeConfig, PeKind, PeVariant,
};
use crate::transformer::{ForwardOptions, Model, ModelConfig};

pub const EPS: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;

/// Parameters of the end-to-end models are redrawn at this scale. Near 0.6
/// some derivatives fall to ~1e-8, where central differences at `EPS`
/// drown in roundoff; near 0.3 the layer norms see tiny variances and the
/// O(eps²) truncation term passes 1e-4.
pub const MODEL_PARAM_STD: f64 = 0.4;

#[derive(Clone, Debug)]
pub struct SuiteCase {
    pub name: String,
    pub report: GradCheckReport,
}

impl SuiteCase {
    pub fn passes(&self) -> bool {
        self.report.passes(TOLERANCE)
    }
}

fn randn(shape: &[usize], std: f64, seed: u64) -> Tensor<f64> {
    let mut r = RngStream::for_purpose(seed, Purpose::Test, 0);
    Tensor::randn(shape.to_vec(), std, &mut r)
}

const OPS: &[&str] = &[
    "add",
    "mul",
    "add_row",
    "scale",
    "sigmoid",
    "gelu",
    "layer_norm",
    "slice_concat",
    "masked_softmax",
    "reversed_cumsum",
    "clamp_max",
    "rope",
    "matmul",
    "matmul_nt",
    "embedding",
    "cross_entropy",
    "interp",
    "gather_cols",
    "mul_scalar",
];

fn op_case(op: &str, (r, c): (usize, usize), seed: u64) -> Result<GradCheckReport> {
    let x = randn(&[r, c], 1.0, seed);
    let y = randn(&[r, c], 1.0, seed + 1);
    let w = randn(&[r, c], 1.0, seed + 2);
    let row = randn(&[c], 1.0, seed + 3);
    let row2 = randn(&[c], 1.0, seed + 4);
    let square = randn(&[r, r], 1.0, seed + 5);
    let other = randn(&[c, r], 1.0, seed + 6);
    let mut prng = RngStream::for_purpose(seed, Purpose::Test, 9);
    // Interpolation positions avoid integers, where the map has kinks.
    let pos = Tensor::new(
        vec![r, r],
        (0..r * r)
            .map(|_| prng.below(c - 1) as f64 + 0.1 + 0.8 * prng.uniform())
            .collect(),
    )?;
    let ids: Vec<usize> = (0..r).map(|_| prng.below(r)).collect();
    let targets: Vec<usize> = (0..r).map(|_| prng.below(c)).collect();
    let ce_mask: Vec<bool> = (0..r).map(|i| i == 0 || prng.bernoulli(0.7)).collect();
    let gather: Rc<[usize]> = (0..r * r).map(|_| prng.below(c)).collect::<Vec<_>>().into();
    let mask: Mask = causal_mask(r);
    let f = |g: &mut Graph<f64>, v: &[Var]| -> Result<Var> {
        let out = match op {
            "add" => g.add(v[0], v[1])?,
            "mul" => g.mul(v[0], v[1])?,
            "add_row" => g.add_row(v[0], v[2])?,
            "scale" => g.scale(v[0], 0.7),
            "sigmoid" => g.sigmoid(v[0]),
            "gelu" => g.gelu(v[0]),
            "layer_norm" => g.layer_norm(v[0], v[2], v[3])?,
            "slice_concat" => {
                let s = g.slice_cols(v[0], c / 2, c - c / 2)?;
                let t = g.slice_cols(v[1], 0, c / 2 + 1)?;
                let cat = g.concat_cols(&[t, s])?;
                let left = g.slice_cols(cat, 0, c)?;
                let top = g.slice_rows(left, 0, r / 2 + 1)?;
                if r / 2 + 1 < r {
                    let rest = g.slice_rows(v[0], r / 2 + 1, r - r / 2 - 1)?;
                    g.concat_rows(&[top, rest])?
                } else {
                    top
                }
            }
            "masked_softmax" | "matmul" | "matmul_nt" | "interp" | "gather_cols" => {
                let out = match op {
                    "masked_softmax" => {
                        let filled = g.masked_fill(v[4], &mask)?;
                        g.masked_softmax(filled, &mask)?
                    }
                    "matmul" => g.matmul(v[0], v[5])?,
                    "matmul_nt" => g.matmul_nt(v[0], v[1])?,
                    "interp" => g.interp(v[0], v[6])?,
                    _ => g.gather_cols(v[0], gather.clone(), r)?,
                };
                let wv = g.input(randn(&[r, r], 1.0, seed + 7));
                let p = g.mul(out, wv)?;
                return Ok(g.sum(p));
            }
            "reversed_cumsum" => g.reversed_cumsum(v[0]),
            "clamp_max" => g.clamp_max(v[0], 0.3),
            "rope" => g.rope(v[0], 10000.0, 2)?,
            "embedding" => {
                let e = g.embedding(v[0], &ids)?;
                let wv = g.input(randn(&[r, c], 1.0, seed + 8));
                let p = g.mul(e, wv)?;
                return Ok(g.sum(p));
            }
            "cross_entropy" => return g.cross_entropy(v[0], &targets, &ce_mask),
            "mul_scalar" => g.mul_scalar(v[0], v[3], c - 1)?,
            other => unreachable!("unknown op {other}"),
        };
        let wv = g.input(w.clone());
        let p = g.mul(out, wv)?;
        Ok(g.sum(p))
    };
    finite_difference_check(f, &[x, y, row, row2, square, other, pos], EPS)
}

/// Ten shapes per op.
pub fn op_cases() -> Result<Vec<SuiteCase>> {
    let shapes = [
        (2, 4),
        (3, 6),
        (5, 2),
        (4, 8),
        (1, 2),
        (6, 4),
        (3, 2),
        (2, 10),
        (7, 6),
        (4, 4),
    ];
    let mut out = Vec::new();
    let mut seed = 1000;
    for op in OPS {
        for &shape in &shapes {
            seed += 10;
            let report = op_case(op, shape, seed)?;
            out.push(SuiteCase {
                name: format!("op {op} {}x{}", shape.0, shape.1),
                report,
            });
        }
    }
    Ok(out)
}

/// Two-head CoPE attention logits on `T = 6` for each gate source.
pub fn cope_attention_cases() -> Result<Vec<SuiteCase>> {
    let (t, d, p_max) = (6, 4, 4);
    let mut out = Vec::new();
    for (k, source) in [
        GateSource::AttnKeys,
        GateSource::SepKeys,
        GateSource::ValGates,
    ]
    .into_iter()
    .enumerate()
    {
        let seed = 500 + 10 * k as u64;
        let params = vec![
            randn(&[t, 2 * d], 1.0, seed),
            randn(&[t, 2 * d], 1.0, seed + 1),
            randn(&[t, 2 * d], 1.0, seed + 2),
            randn(&[p_max, d], 1.0, seed + 3),
            randn(&[t, t], 1.0, seed + 4),
        ];
        let mask = causal_mask(t);
        let report = finite_difference_check(
            |g, v| {
                let mut total = None;
                for h in 0..2 {
                    let q = g.slice_cols(v[0], h * d, d)?;
                    let kk = g.slice_cols(v[1], h * d, d)?;
                    let gv = g.slice_cols(v[2], h * d, d)?;
                    let input = match source {
                        GateSource::AttnKeys => GateInput::AttnKeys,
                        _ => GateInput::Keys(gv),
                    };
                    let terms = cope_attention_logits(g, q, kk, &mask, v[3], p_max, input)?;
                    let a = g.masked_softmax(terms.logits, &mask)?;
                    let p = g.mul(a, v[4])?;
                    let s = g.sum(p);
                    total = Some(match total {
                        None => s,
                        Some(prev) => g.add(prev, s)?,
                    });
                }
                Ok(total.unwrap())
            },
            &params,
            EPS,
        )?;
        out.push(SuiteCase {
            name: format!("cope attention gate_source={source}"),
            report,
        });
    }
    Ok(out)
}

/// Position-encoding settings covered by the end-to-end checks.
pub fn model_variants() -> Vec<PeConfig> {
    let mut out: Vec<PeConfig> = [
        PeKind::None,
        PeKind::Absolute,
        PeKind::Relative,
        PeKind::Rope,
        PeKind::Cope,
    ]
    .into_iter()
    .map(PeConfig::of_kind)
    .collect();
    let mut capped = PeConfig::of_kind(PeKind::RelativeCapped);
    capped.relative_cap = Some(3);
    out.push(capped);
    for source in [GateSource::SepKeys, GateSource::ValGates] {
        let mut c = PeConfig::of_kind(PeKind::Cope);
        c.cope.gate_source = source;
        c.cope.p_max = 4;
        out.push(c);
    }
    let mut shared = PeConfig::of_kind(PeKind::Cope);
    shared.cope.share_across_layers = true;
    shared.cope.p_max = 4;
    out.push(shared);
    for with in [Combine::Relative, Combine::Rope] {
        let mut c = PeConfig::of_kind(PeKind::Cope);
        c.variant = PeVariant {
            kind: PeKind::Cope,
            combine_with: Some(with),
        };
        c.cope.p_max = 5;
        out.push(c);
    }
    for slopes in [AlibiSlopes::Learned, AlibiSlopes::Fixed(vec![1.0, 0.5])] {
        let mut c = PeConfig::of_kind(PeKind::CopeAlibi);
        c.cope.alibi_slopes = Some(slopes);
        c.cope.p_max = 4;
        out.push(c);
    }
    out
}

fn variant_name(pe: &PeConfig) -> String {
    let mut s = pe.variant.kind.to_string();
    if let Some(c) = pe.variant.combine_with {
        s.push_str(&format!("+{c}"));
    }
    if pe.variant.uses_cope() {
        s.push_str(&format!(" gates={}", pe.cope.gate_source));
        if pe.cope.share_across_layers {
            s.push_str(" shared");
        }
        if let Some(a) = &pe.cope.alibi_slopes {
            s.push_str(&format!(" slopes={a}"));
        }
    }
    s
}

/// Whole-model loss (`d_model = 8`, two heads, two layers, `T = 6`,
/// vocabulary 5) for every variant.
pub fn model_cases() -> Result<Vec<SuiteCase>> {
    let tokens = [0usize, 3, 1, 4, 2, 2];
    let targets = [3usize, 1, 4, 2, 2, 0];
    let mask = [true; 6];
    let mut out = Vec::new();
    for (k, pe) in model_variants().into_iter().enumerate() {
        let name = format!("model {}", variant_name(&pe));
        let cfg = ModelConfig {
            vocab_size: 5,
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            context_t: 6,
            pe,
            ..Default::default()
        };
        let mut model = Model::<f64>::new(cfg, 1)?;
        let shapes: Vec<(String, Vec<usize>)> = model
            .params()
            .iter()
            .map(|(_, p)| (p.name.clone(), p.tensor.shape().to_vec()))
            .collect();
        for (i, (pname, shape)) in shapes.into_iter().enumerate() {
            let mut t = randn(&shape, MODEL_PARAM_STD, 100 * k as u64 + i as u64);
            if pname.ends_with("gamma") {
                t = t.map(|v| 1.0 + v);
            }
            model.set_param(&pname, t)?;
        }
        let mut store = model.params().clone();
        let report = check_param_gradients(&mut store, EPS, |g| {
            Ok(model
                .loss(g, &[&tokens], &targets, &mask, &ForwardOptions::default())?
                .0)
        })?;
        out.push(SuiteCase { name, report });
    }
    Ok(out)
}

/// The complete suite.
pub fn gradcheck_suite() -> Result<Vec<SuiteCase>> {
    let mut out = op_cases()?;
    out.extend(cope_attention_cases()?);
    out.extend(model_cases()?);
    Ok(out)
}
