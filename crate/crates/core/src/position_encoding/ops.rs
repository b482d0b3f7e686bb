//! Graph-level position-encoding operations.
//!
//! Score matrices are `rows × T` where `rows` is `T` for one head or `H·T`
//! for stacked heads; every operation here is row-wise, so both layouts
//! work. Content logits are divided by `√d_head`; positional terms are
//! added unscaled afterwards.

use std::rc::Rc;

use crate::error::{config_err, Result};
use crate::numerics::{Graph, Mask, Tensor, Var};
use crate::scalar::Scalar;

/// `(q·kᵀ)/√d_head` with masked entries replaced by the fill value.
pub fn scaled_masked_logits<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    mask: &Mask,
) -> Result<Var> {
    let d = g.shape(q)[1];
    let raw = g.matmul_nt(q, k)?;
    let scaled = g.scale(raw, T::one() / T::from_usize(d).unwrap().sqrt());
    g.masked_fill(scaled, mask)
}

/// Sigmoid gates from the attention logits, or from `aux` when the gate
/// source is not the attention keys. Masked pairs come out exactly zero.
pub fn compute_gates<T: Scalar>(
    g: &mut Graph<T>,
    scaled_masked_logits: Var,
    aux: Option<Var>,
) -> Var {
    g.sigmoid(aux.unwrap_or(scaled_masked_logits))
}

/// Constant gates at unmasked pairs and zero elsewhere. Only reachable from
/// tests and analysis hooks.
pub fn constant_gates<T: Scalar>(
    g: &mut Graph<T>,
    rows: usize,
    cols: usize,
    mask: &Mask,
    value: T,
) -> Result<Var> {
    let data = mask
        .iter()
        .map(|&keep| if keep { value } else { T::zero() })
        .collect();
    let t = Tensor::new(vec![rows, cols], data)?;
    Ok(g.input(t))
}

/// `p_ij = Σ_{k=j}^{i} g_ik` (a reversed cumulative sum over keys, the
/// diagonal included) clamped to `p_max − 1`.
pub fn compute_positions<T: Scalar>(g: &mut Graph<T>, gates: Var, p_max: usize) -> Result<Var> {
    if p_max == 0 {
        return config_err("p_max must be at least 1");
    }
    let pos = g.reversed_cumsum(gates);
    Ok(g.clamp_max(pos, T::from_usize(p_max - 1).unwrap()))
}

/// `z_i[p] = q_i·e[p]` for every integer `p`, then linear interpolation at
/// the fractional positions.
pub fn position_logits<T: Scalar>(
    g: &mut Graph<T>,
    query: Var,
    table: Var,
    positions: Var,
) -> Result<Var> {
    let z = g.matmul_nt(query, table)?;
    g.interp(z, positions)
}

/// Intermediate values of one CoPE head.
#[derive(Clone, Copy, Debug)]
pub struct CopeTerms {
    /// Final attention logits (content + positional).
    pub logits: Var,
    /// Scaled, masked content logits.
    pub content: Var,
    pub gates: Var,
    /// Clamped positions.
    pub positions: Var,
    /// Positional term alone: `z_i[p_ij]`, or `m·p_ij` for CoPE-ALiBi.
    pub position_logits: Option<Var>,
    /// `z_i[p] = q_i·e[p]` at integer positions (absent for CoPE-ALiBi).
    pub position_table: Option<Var>,
}

/// Where the gate logits of a CoPE head come from.
#[derive(Clone, Copy, Debug)]
pub enum GateInput<T> {
    AttnKeys,
    /// Alternative key matrix (the `W_g h` projection or the values).
    Keys(Var),
    /// Test hook: every unmasked gate equals the constant.
    Override(T),
}

fn gates_for<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    content: Var,
    mask: &Mask,
    gate_input: GateInput<T>,
) -> Result<Var> {
    match gate_input {
        GateInput::AttnKeys => Ok(compute_gates(g, content, None)),
        GateInput::Keys(alt) => {
            let aux = scaled_masked_logits(g, q, alt, mask)?;
            Ok(compute_gates(g, content, Some(aux)))
        }
        GateInput::Override(c) => {
            let (r, t) = (g.shape(content)[0], g.shape(content)[1]);
            constant_gates(g, r, t, mask, c)
        }
    }
}

/// CoPE attention logits for one head: content logits, gates, clamped
/// positions, interpolated positional logits, sum.
pub fn cope_attention_logits<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    mask: &Mask,
    table: Var,
    p_max: usize,
    gate_input: GateInput<T>,
) -> Result<CopeTerms> {
    if g.shape(table)[0] != p_max {
        return config_err(format!(
            "CoPE table has {} rows, p_max is {p_max}",
            g.shape(table)[0]
        ));
    }
    let content = scaled_masked_logits(g, q, k, mask)?;
    let gates = gates_for(g, q, content, mask, gate_input)?;
    let positions = compute_positions(g, gates, p_max)?;
    let z = g.matmul_nt(q, table)?;
    let pl = g.interp(z, positions)?;
    let logits = g.add(content, pl)?;
    Ok(CopeTerms {
        logits,
        content,
        gates,
        positions,
        position_logits: Some(pl),
        position_table: Some(z),
    })
}

/// Slope applied by CoPE-ALiBi: a fixed number or entry `head` of a
/// trainable vector.
#[derive(Clone, Copy, Debug)]
pub enum Slope<T> {
    Fixed(T),
    Learned { slopes: Var, head: usize },
}

/// `(q·kᵀ)/√d + m·p_ij` with CoPE positions and no embedding table.
pub fn cope_alibi_logits<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    mask: &Mask,
    slope: Slope<T>,
    p_max: usize,
    gate_input: GateInput<T>,
) -> Result<CopeTerms> {
    let content = scaled_masked_logits(g, q, k, mask)?;
    let gates = gates_for(g, q, content, mask, gate_input)?;
    let positions = compute_positions(g, gates, p_max)?;
    let bias = match slope {
        Slope::Fixed(m) => g.scale(positions, m),
        Slope::Learned { slopes, head } => g.mul_scalar(positions, slopes, head)?,
    };
    let logits = g.add(content, bias)?;
    Ok(CopeTerms {
        logits,
        content,
        gates,
        positions,
        position_logits: Some(bias),
        position_table: None,
    })
}

/// Lookup indices `min(i − j, cap − 1)` for a causal `t×t` score matrix
/// (zero above the diagonal, where the mask applies anyway).
pub fn relative_indices(t: usize, cap: usize) -> Rc<[usize]> {
    (0..t * t)
        .map(|k| {
            let (i, j) = (k / t, k % t);
            if j <= i {
                (i - j).min(cap - 1)
            } else {
                0
            }
        })
        .collect::<Vec<_>>()
        .into()
}

/// `q_i·e[i−j]`, the relative positional term alone.
pub fn relative_term<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    rel_table: Var,
    capped: bool,
) -> Result<Var> {
    let t = g.shape(q)[0];
    let rows = g.shape(rel_table)[0];
    if !capped && rows < t {
        return config_err(format!(
            "relative table covers offsets 0..{} but the sequence needs offsets up to {}",
            rows - 1,
            t - 1
        ));
    }
    let z = g.matmul_nt(q, rel_table)?;
    let cap = if capped { rows } else { usize::MAX };
    g.gather_cols(z, relative_indices(t, cap), t)
}

/// `q_i·k_j/√d + q_i·e[i−j]`, masked.
pub fn relative_pe_logits<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    rel_table: Var,
    mask: &Mask,
) -> Result<Var> {
    let content = scaled_masked_logits(g, q, k, mask)?;
    let term = relative_term(g, q, rel_table, false)?;
    g.add(content, term)
}

/// As [`relative_pe_logits`] with offsets capped at the last table row.
pub fn relative_capped_logits<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    rel_table: Var,
    mask: &Mask,
) -> Result<Var> {
    let content = scaled_masked_logits(g, q, k, mask)?;
    let term = relative_term(g, q, rel_table, true)?;
    g.add(content, term)
}

/// Rotary embedding of a `T×d` query or key matrix, positions `0..T`.
pub fn rope_apply<T: Scalar>(g: &mut Graph<T>, x: Var, base: T) -> Result<Var> {
    g.rope(x, base, 0)
}

/// `h_j + P(j)` for the first `T` rows of an absolute table.
pub fn absolute_pe_add<T: Scalar>(g: &mut Graph<T>, h: Var, table: Var) -> Result<Var> {
    let t = g.shape(h)[0];
    let rows = g.shape(table)[0];
    if t > rows {
        return config_err(format!(
            "sequence of length {t} exceeds the absolute position table ({rows} rows)"
        ));
    }
    let ids: Vec<usize> = (0..t).collect();
    let p = g.embedding(table, &ids)?;
    g.add(h, p)
}
