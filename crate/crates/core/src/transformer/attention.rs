use std::collections::HashMap;

use crate::error::{config_err, Result};
use crate::numerics::{causal_mask, Graph, Mask, Tensor, Var};
use crate::position_encoding::{
    cope_alibi_logits, cope_attention_logits, relative_capped_logits, relative_pe_logits,
    relative_term, scaled_masked_logits, AlibiSlopes, Combine, CopeTerms, GateInput, GateSource,
    PeConfig, PeKind, Slope,
};
use crate::scalar::Scalar;

/// Graph nodes of one attention layer. Projections are `d_model × (H·d_head)`
/// (`Wo` is the transpose shape); `d_head` is inferred from `wq`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    /// Gate-key projection for `sep_keys`.
    pub wg: Option<(Var, Var)>,
    pub cope_table: Option<Var>,
    pub rel_table: Option<Var>,
    pub alibi_slopes: Option<Var>,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions<T> {
    /// Forces every unmasked CoPE gate to this value. Test and analysis hook.
    pub gate_override: Option<T>,
    /// Record per-head intermediate values of the first sequence.
    pub trace: bool,
}

impl<T> Default for ForwardOptions<T> {
    fn default() -> Self {
        Self {
            gate_override: None,
            trace: false,
        }
    }
}

/// Intermediate values of one head on one sequence.
#[derive(Clone, Debug)]
pub struct HeadTrace<T> {
    pub content: Tensor<T>,
    pub logits: Tensor<T>,
    pub attention: Tensor<T>,
    pub gates: Option<Tensor<T>>,
    pub positions: Option<Tensor<T>>,
    pub position_logits: Option<Tensor<T>>,
    /// Per-query positional logits at integer positions, `T×p_max`.
    pub position_table: Option<Tensor<T>>,
}

/// `trace.layers[l][h]` for the first sequence of a forward pass.
#[derive(Clone, Debug, Default)]
pub struct AttentionTrace<T> {
    pub layers: Vec<Vec<HeadTrace<T>>>,
}

#[derive(Default)]
pub(crate) struct MaskCache(HashMap<usize, Mask>);

impl MaskCache {
    pub(crate) fn get(&mut self, t: usize) -> Mask {
        self.0.entry(t).or_insert_with(|| causal_mask(t)).clone()
    }
}

fn linear<T: Scalar>(g: &mut Graph<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

/// Multi-head causal self-attention over row-stacked sequences: `h` holds
/// `Σ lengths` rows, sequence `s` occupying a contiguous block.
#[allow(clippy::too_many_arguments)]
pub fn attention_layer<T: Scalar>(
    g: &mut Graph<T>,
    h: Var,
    lengths: &[usize],
    w: &AttentionParams,
    n_heads: usize,
    pe: &PeConfig,
    opts: &ForwardOptions<T>,
    mut trace: Option<&mut Vec<HeadTrace<T>>>,
) -> Result<Var> {
    let mut masks = MaskCache::default();
    attention_layer_cached(
        g,
        h,
        lengths,
        w,
        n_heads,
        pe,
        opts,
        trace.as_deref_mut(),
        &mut masks,
    )
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_layer_cached<T: Scalar>(
    g: &mut Graph<T>,
    h: Var,
    lengths: &[usize],
    w: &AttentionParams,
    n_heads: usize,
    pe: &PeConfig,
    opts: &ForwardOptions<T>,
    mut trace: Option<&mut Vec<HeadTrace<T>>>,
    masks: &mut MaskCache,
) -> Result<Var> {
    let total: usize = lengths.iter().sum();
    if g.shape(h)[0] != total {
        return config_err(format!(
            "attention: {} rows for sequence lengths summing to {total}",
            g.shape(h)[0]
        ));
    }
    let width = g.shape(w.wq)[1];
    if n_heads == 0 || width % n_heads != 0 {
        return config_err(format!(
            "attention: projection width {width} not divisible by {n_heads} heads"
        ));
    }
    let dh = width / n_heads;
    let q_all = linear(g, h, w.wq, w.bq)?;
    let k_all = linear(g, h, w.wk, w.bk)?;
    let v_all = linear(g, h, w.wv, w.bv)?;
    let gk_all = match (pe.cope.gate_source, w.wg) {
        (GateSource::SepKeys, Some((wg, bg))) if pe.variant.uses_cope() => {
            Some(linear(g, h, wg, bg)?)
        }
        (GateSource::SepKeys, None) if pe.variant.uses_cope() => {
            return config_err("gate_source=sep_keys needs a gate-key projection");
        }
        _ => None,
    };

    let mut outputs = Vec::with_capacity(lengths.len());
    let mut off = 0;
    for (s, &t) in lengths.iter().enumerate() {
        let mask = masks.get(t);
        let rows = |g: &mut Graph<T>, x: Var| g.slice_rows(x, off, t);
        let (qs, ks, vs) = (rows(g, q_all)?, rows(g, k_all)?, rows(g, v_all)?);
        let gks = match gk_all {
            Some(x) => Some(rows(g, x)?),
            None => None,
        };
        let mut heads = Vec::with_capacity(n_heads);
        for head in 0..n_heads {
            let mut q = g.slice_cols(qs, head * dh, dh)?;
            let mut k = g.slice_cols(ks, head * dh, dh)?;
            let v = g.slice_cols(vs, head * dh, dh)?;
            if pe.variant.uses_rope() {
                let base = T::lit(pe.rope_base);
                q = g.rope(q, base, 0)?;
                k = g.rope(k, base, 0)?;
            }
            let gate_input = match (opts.gate_override, pe.cope.gate_source) {
                (Some(c), _) => GateInput::Override(c),
                (None, GateSource::AttnKeys) => GateInput::AttnKeys,
                (None, GateSource::SepKeys) => {
                    GateInput::Keys(g.slice_cols(gks.expect("gate keys"), head * dh, dh)?)
                }
                (None, GateSource::ValGates) => GateInput::Keys(v),
            };
            let mut terms: Option<CopeTerms> = None;
            let logits = match pe.variant.kind {
                PeKind::None | PeKind::Absolute | PeKind::Rope => {
                    scaled_masked_logits(g, q, k, &mask)?
                }
                PeKind::Relative => {
                    relative_pe_logits(g, q, k, need(w.rel_table, "relative table")?, &mask)?
                }
                PeKind::RelativeCapped => {
                    relative_capped_logits(g, q, k, need(w.rel_table, "relative table")?, &mask)?
                }
                PeKind::Cope => {
                    let table = need(w.cope_table, "CoPE table")?;
                    let ct =
                        cope_attention_logits(g, q, k, &mask, table, pe.cope.p_max, gate_input)?;
                    terms = Some(ct);
                    if pe.variant.combine_with == Some(Combine::Relative) {
                        let rel = relative_term(g, q, need(w.rel_table, "relative table")?, false)?;
                        g.add(ct.logits, rel)?
                    } else {
                        ct.logits
                    }
                }
                PeKind::CopeAlibi => {
                    let slope = match &pe.cope.alibi_slopes {
                        Some(AlibiSlopes::Fixed(m)) => Slope::Fixed(T::lit(m[head])),
                        Some(AlibiSlopes::Learned) => Slope::Learned {
                            slopes: need(w.alibi_slopes, "ALiBi slopes")?,
                            head,
                        },
                        None => return config_err("pe.kind=cope_alibi needs pe.alibi_slopes"),
                    };
                    let ct = cope_alibi_logits(g, q, k, &mask, slope, pe.cope.p_max, gate_input)?;
                    terms = Some(ct);
                    ct.logits
                }
            };
            let a = g.masked_softmax(logits, &mask)?;
            let o = g.matmul(a, v)?;
            heads.push(o);
            if s == 0 {
                if let Some(tr) = trace.as_deref_mut() {
                    let content = match terms {
                        Some(ct) => ct.content,
                        None => scaled_masked_logits(g, q, k, &mask)?,
                    };
                    tr.push(HeadTrace {
                        content: g.value(content).clone(),
                        logits: g.value(logits).clone(),
                        attention: g.value(a).clone(),
                        gates: terms.map(|ct| g.value(ct.gates).clone()),
                        positions: terms.map(|ct| g.value(ct.positions).clone()),
                        position_logits: terms
                            .and_then(|ct| ct.position_logits)
                            .map(|v| g.value(v).clone()),
                        position_table: terms
                            .and_then(|ct| ct.position_table)
                            .map(|v| g.value(v).clone()),
                    });
                }
            }
        }
        outputs.push(if n_heads == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)?
        });
        off += t;
    }
    let cat = if outputs.len() == 1 {
        outputs[0]
    } else {
        g.concat_rows(&outputs)?
    };
    linear(g, cat, w.wo, w.bo)
}

fn need(v: Option<Var>, what: &str) -> Result<Var> {
    match v {
        Some(v) => Ok(v),
        None => config_err(format!("attention layer is missing its {what}")),
    }
}
