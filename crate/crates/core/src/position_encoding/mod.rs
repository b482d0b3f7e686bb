//! Position encodings behind one interface: each maps queries, keys and a
//! causal mask to attention logits (or, for absolute PE, to an additive
//! embedding term).
//!
//! CoPE computes a sigmoid gate for every query–key pair, turns gates into
//! positions with a reversed cumulative sum, clamps them to `p_max − 1`,
//! and adds an interpolated positional logit `z_i[p_ij]` where
//! `z_i[p] = q_i·e[p]`.

mod config;
mod ops;

pub use config::{AlibiSlopes, Combine, CopeConfig, GateSource, PeConfig, PeKind, PeVariant};
pub use ops::{
    absolute_pe_add, compute_gates, compute_positions, constant_gates, cope_alibi_logits,
    cope_attention_logits, position_logits, relative_capped_logits, relative_indices,
    relative_pe_logits, relative_term, rope_apply, scaled_masked_logits, CopeTerms, GateInput,
    Slope,
};
