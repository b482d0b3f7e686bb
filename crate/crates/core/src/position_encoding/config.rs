use std::fmt;
use std::str::FromStr;

use crate::error::{config_err, Error, Result};

/// Which position encoding an attention layer uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PeKind {
    None,
    Absolute,
    Relative,
    RelativeCapped,
    Rope,
    Cope,
    CopeAlibi,
}

/// Second encoding stacked on top of CoPE.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Combine {
    /// Both positional logit terms are added.
    Relative,
    /// Queries and keys are rotated before the CoPE pipeline.
    Rope,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PeVariant {
    pub kind: PeKind,
    pub combine_with: Option<Combine>,
}

impl PeVariant {
    pub fn new(kind: PeKind) -> Self {
        Self {
            kind,
            combine_with: None,
        }
    }

    pub fn combined(kind: PeKind, with: Combine) -> Result<Self> {
        let v = Self {
            kind,
            combine_with: Some(with),
        };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        if self.combine_with.is_some() && self.kind != PeKind::Cope {
            return config_err(format!(
                "pe.combine_with is only valid with pe.kind=cope, not {}",
                self.kind
            ));
        }
        Ok(())
    }

    pub fn uses_cope(&self) -> bool {
        matches!(self.kind, PeKind::Cope | PeKind::CopeAlibi)
    }

    pub fn uses_cope_table(&self) -> bool {
        self.kind == PeKind::Cope
    }

    pub fn uses_relative_table(&self) -> bool {
        matches!(self.kind, PeKind::Relative | PeKind::RelativeCapped)
            || self.combine_with == Some(Combine::Relative)
    }

    pub fn uses_rope(&self) -> bool {
        self.kind == PeKind::Rope || self.combine_with == Some(Combine::Rope)
    }
}

/// Where gate logits come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateSource {
    /// Reuse the scaled, masked attention logits.
    AttnKeys,
    /// Dedicated key projection `W_g h`.
    SepKeys,
    /// Query–value products.
    ValGates,
}

#[derive(Clone, Debug, PartialEq)]
pub enum AlibiSlopes {
    /// One fixed slope per head.
    Fixed(Vec<f64>),
    /// One trainable slope per head and layer, initialised at zero.
    Learned,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CopeConfig {
    /// Number of learnable integer positions `0..p_max`.
    pub p_max: usize,
    pub gate_source: GateSource,
    pub share_across_layers: bool,
    pub alibi_slopes: Option<AlibiSlopes>,
}

impl Default for CopeConfig {
    fn default() -> Self {
        Self {
            p_max: 64,
            gate_source: GateSource::AttnKeys,
            share_across_layers: false,
            alibi_slopes: None,
        }
    }
}

impl CopeConfig {
    pub fn validate(&self, n_heads: usize) -> Result<()> {
        if self.p_max == 0 {
            return config_err("pe.p_max must be at least 1");
        }
        if let Some(AlibiSlopes::Fixed(s)) = &self.alibi_slopes {
            if s.len() != n_heads {
                return config_err(format!(
                    "{} alibi slopes given for {n_heads} heads",
                    s.len()
                ));
            }
        }
        Ok(())
    }
}

/// Full position-encoding configuration of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct PeConfig {
    pub variant: PeVariant,
    pub cope: CopeConfig,
    pub rope_base: f64,
    /// Table size of relative-capped; offsets at or beyond it reuse the
    /// last row.
    pub relative_cap: Option<usize>,
}

impl Default for PeConfig {
    fn default() -> Self {
        Self {
            variant: PeVariant::new(PeKind::Cope),
            cope: CopeConfig::default(),
            rope_base: 10000.0,
            relative_cap: None,
        }
    }
}

impl PeConfig {
    pub fn of_kind(kind: PeKind) -> Self {
        Self {
            variant: PeVariant::new(kind),
            ..Default::default()
        }
    }

    pub fn validate(&self, n_heads: usize) -> Result<()> {
        self.variant.validate()?;
        if self.variant.uses_cope() {
            self.cope.validate(n_heads)?;
        }
        if self.variant.kind == PeKind::CopeAlibi && self.cope.alibi_slopes.is_none() {
            return config_err("pe.kind=cope_alibi needs pe.alibi_slopes (a list or \"learned\")");
        }
        if self.variant.kind == PeKind::RelativeCapped && self.relative_cap == Some(0) {
            return config_err("pe.relative_cap must be at least 1");
        }
        Ok(())
    }
}

macro_rules! string_enum {
    ($ty:ty, $what:expr, { $($variant:path => $name:expr),+ $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($variant => $name),+ })
            }
        }

        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($variant),)+
                    other => Err(Error::Config(format!(
                        "unknown {} {other:?}; expected one of: {}",
                        $what,
                        [$($name),+].join(", ")
                    ))),
                }
            }
        }
    };
}

string_enum!(PeKind, "pe.kind", {
    PeKind::None => "none",
    PeKind::Absolute => "absolute",
    PeKind::Relative => "relative",
    PeKind::RelativeCapped => "relative_capped",
    PeKind::Rope => "rope",
    PeKind::Cope => "cope",
    PeKind::CopeAlibi => "cope_alibi",
});

string_enum!(Combine, "pe.combine_with", {
    Combine::Relative => "relative",
    Combine::Rope => "rope",
});

string_enum!(GateSource, "pe.gate_source", {
    GateSource::AttnKeys => "attn_keys",
    GateSource::SepKeys => "sep_keys",
    GateSource::ValGates => "val_gates",
});

impl fmt::Display for AlibiSlopes {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AlibiSlopes::Learned => f.write_str("learned"),
            AlibiSlopes::Fixed(v) => {
                let parts: Vec<String> = v.iter().map(|x| format!("{x}")).collect();
                f.write_str(&parts.join(","))
            }
        }
    }
}

impl FromStr for AlibiSlopes {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "learned" {
            return Ok(AlibiSlopes::Learned);
        }
        s.split(',')
            .map(|p| {
                p.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("pe.alibi_slopes: {p:?} is not a number")))
            })
            .collect::<Result<Vec<_>>>()
            .map(AlibiSlopes::Fixed)
    }
}
