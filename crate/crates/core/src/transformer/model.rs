use crate::error::{config_err, domain_err, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Purpose, RngStream, Tensor, Var};
use crate::position_encoding::{AlibiSlopes, GateSource, PeKind};
use crate::scalar::Scalar;

use super::attention::{
    attention_layer_cached, AttentionParams, AttentionTrace, ForwardOptions, MaskCache,
};
use super::config::ModelConfig;

#[derive(Clone, Debug)]
struct LayerIds {
    ln1: (ParamId, ParamId),
    wq: (ParamId, ParamId),
    wk: (ParamId, ParamId),
    wv: (ParamId, ParamId),
    wo: (ParamId, ParamId),
    wg: Option<(ParamId, ParamId)>,
    cope_table: Option<ParamId>,
    rel_table: Option<ParamId>,
    alibi_slopes: Option<ParamId>,
    ln2: (ParamId, ParamId),
    ffn1: (ParamId, ParamId),
    ffn2: (ParamId, ParamId),
}

/// Pre-norm decoder-only transformer with its parameters.
#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    config: ModelConfig,
    params: ParamStore<T>,
    tok_emb: ParamId,
    abs_pe: Option<ParamId>,
    layers: Vec<LayerIds>,
    ln_f: (ParamId, ParamId),
    head_w: Option<ParamId>,
    head_b: ParamId,
}

/// Output of [`Model::forward`].
#[derive(Debug)]
pub struct Forward<T> {
    /// `Σ lengths × vocab`.
    pub logits: Var,
    pub trace: Option<AttentionTrace<T>>,
}

/// Parameter layout collected in creation order before values are drawn;
/// the index of a spec is its [`ParamId`].
#[derive(Default)]
struct Specs(Vec<(String, Vec<usize>, InitKind)>);

#[derive(Clone, Copy)]
enum InitKind {
    Normal,
    Zeros,
    Ones,
}

impl Specs {
    fn add(&mut self, name: String, shape: Vec<usize>, kind: InitKind) -> usize {
        self.0.push((name, shape, kind));
        self.0.len() - 1
    }

    fn linear(&mut self, prefix: &str, rows: usize, cols: usize) -> (usize, usize) {
        (
            self.add(format!("{prefix}.w"), vec![rows, cols], InitKind::Normal),
            self.add(format!("{prefix}.b"), vec![cols], InitKind::Zeros),
        )
    }

    fn norm(&mut self, prefix: &str, d: usize) -> (usize, usize) {
        (
            self.add(format!("{prefix}.gamma"), vec![d], InitKind::Ones),
            self.add(format!("{prefix}.beta"), vec![d], InitKind::Zeros),
        )
    }
}

fn pid(i: usize) -> ParamId {
    ParamId(i)
}

fn pair(p: (usize, usize)) -> (ParamId, ParamId) {
    (pid(p.0), pid(p.1))
}

impl<T: Scalar> Model<T> {
    /// Builds a model with freshly initialised parameters. Weight matrices
    /// are drawn from `normal(0, init_std)`, biases and position tables are
    /// zero, layer-norm scales one.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let (d, dh, h) = (c.d_model, c.d_head(), c.n_heads);
        let mut b = Specs::default();

        let tok_emb = b.add("tok_emb".into(), vec![c.vocab_size, d], InitKind::Normal);
        let abs_pe = (c.pe.variant.kind == PeKind::Absolute)
            .then(|| b.add("abs_pe".into(), vec![c.context_t, d], InitKind::Zeros));
        let shared_cope =
            (c.pe.variant.uses_cope_table() && c.pe.cope.share_across_layers).then(|| {
                b.add(
                    "pe.cope_table".into(),
                    vec![c.pe.cope.p_max, dh],
                    InitKind::Zeros,
                )
            });

        let mut layers = Vec::with_capacity(c.n_layers);
        for l in 0..c.n_layers {
            let p = format!("layers.{l}");
            let ln1 = b.norm(&format!("{p}.ln1"), d);
            let wq = b.linear(&format!("{p}.attn.q"), d, d);
            let wk = b.linear(&format!("{p}.attn.k"), d, d);
            let wv = b.linear(&format!("{p}.attn.v"), d, d);
            let wo = b.linear(&format!("{p}.attn.o"), d, d);
            let wg = (c.pe.variant.uses_cope() && c.pe.cope.gate_source == GateSource::SepKeys)
                .then(|| b.linear(&format!("{p}.attn.g"), d, d));
            let cope_table = if c.pe.variant.uses_cope_table() {
                Some(shared_cope.unwrap_or_else(|| {
                    b.add(
                        format!("{p}.pe.cope_table"),
                        vec![c.pe.cope.p_max, dh],
                        InitKind::Zeros,
                    )
                }))
            } else {
                None
            };
            let rel_table = c.pe.variant.uses_relative_table().then(|| {
                b.add(
                    format!("{p}.pe.rel_table"),
                    vec![c.relative_rows(), dh],
                    InitKind::Zeros,
                )
            });
            let alibi_slopes = (c.pe.variant.kind == PeKind::CopeAlibi
                && c.pe.cope.alibi_slopes == Some(AlibiSlopes::Learned))
            .then(|| b.add(format!("{p}.pe.alibi_slopes"), vec![h], InitKind::Zeros));
            let ln2 = b.norm(&format!("{p}.ln2"), d);
            let ffn1 = b.linear(&format!("{p}.ffn.up"), d, c.d_ffn());
            let ffn2 = b.linear(&format!("{p}.ffn.down"), c.d_ffn(), d);
            layers.push(LayerIds {
                ln1: pair(ln1),
                wq: pair(wq),
                wk: pair(wk),
                wv: pair(wv),
                wo: pair(wo),
                wg: wg.map(pair),
                cope_table: cope_table.map(pid),
                rel_table: rel_table.map(pid),
                alibi_slopes: alibi_slopes.map(pid),
                ln2: pair(ln2),
                ffn1: pair(ffn1),
                ffn2: pair(ffn2),
            });
        }
        let ln_f = b.norm("ln_f", d);
        let head_w = (!c.tie_embeddings)
            .then(|| b.add("head.w".into(), vec![d, c.vocab_size], InitKind::Normal));
        let head_b = b.add("head.b".into(), vec![c.vocab_size], InitKind::Zeros);

        let mut rng = RngStream::for_purpose(seed, Purpose::Init, 0);
        let mut params = ParamStore::new();
        for (name, shape, kind) in b.0 {
            let decay = matches!(kind, InitKind::Normal) && shape.len() == 2 && name != "tok_emb";
            let t = match kind {
                InitKind::Normal => Tensor::randn(shape, config.init_std, &mut rng),
                InitKind::Zeros => Tensor::zeros(shape),
                InitKind::Ones => Tensor::full(shape, T::one()),
            };
            params.add(name, t, decay)?;
        }
        Ok(Self {
            config,
            params,
            tok_emb: pid(tok_emb),
            abs_pe: abs_pe.map(pid),
            layers,
            ln_f: pair(ln_f),
            head_w: head_w.map(pid),
            head_b: pid(head_b),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Replaces the value of a named parameter; shapes must agree.
    pub fn set_param(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let Some(id) = self.params.id(name) else {
            return config_err(format!("model has no parameter named {name:?}"));
        };
        let cur = self.params.tensor(id).shape().to_vec();
        if cur != value.shape() {
            return config_err(format!(
                "parameter {name}: expected shape {cur:?}, found {:?}",
                value.shape()
            ));
        }
        *self.params.tensor_mut(id) = value;
        Ok(())
    }

    /// Logits for row-stacked sequences. Sequences never attend to each
    /// other.
    pub fn forward(
        &self,
        g: &mut Graph<'_, T>,
        seqs: &[&[usize]],
        opts: &ForwardOptions<T>,
    ) -> Result<Forward<T>> {
        let c = &self.config;
        if seqs.is_empty() || seqs.iter().any(|s| s.is_empty()) {
            return domain_err("forward: empty batch or empty sequence");
        }
        let lengths: Vec<usize> = seqs.iter().map(|s| s.len()).collect();
        let ids: Vec<usize> = seqs.iter().flat_map(|s| s.iter().copied()).collect();
        if let Some(&bad) = ids.iter().find(|&&t| t >= c.vocab_size) {
            return config_err(format!(
                "token id {bad} outside vocabulary of {}",
                c.vocab_size
            ));
        }
        let tok = g.param(self.tok_emb);
        let mut x = g.embedding(tok, &ids)?;
        if let Some(abs) = self.abs_pe {
            let longest = *lengths.iter().max().unwrap();
            if longest > c.context_t {
                return config_err(format!(
                    "sequence of length {longest} exceeds the absolute position table ({} rows)",
                    c.context_t
                ));
            }
            let pos: Vec<usize> = lengths.iter().flat_map(|&t| 0..t).collect();
            let table = g.param(abs);
            let p = g.embedding(table, &pos)?;
            x = g.add(x, p)?;
        }

        let mut trace = opts.trace.then(AttentionTrace::default);
        let mut masks = MaskCache::default();
        for layer in &self.layers {
            let (g1, b1) = (g.param(layer.ln1.0), g.param(layer.ln1.1));
            let hn = g.layer_norm(x, g1, b1)?;
            let w = AttentionParams {
                wq: g.param(layer.wq.0),
                bq: g.param(layer.wq.1),
                wk: g.param(layer.wk.0),
                bk: g.param(layer.wk.1),
                wv: g.param(layer.wv.0),
                bv: g.param(layer.wv.1),
                wo: g.param(layer.wo.0),
                bo: g.param(layer.wo.1),
                wg: layer.wg.map(|(w, b)| (g.param(w), g.param(b))),
                cope_table: layer.cope_table.map(|id| g.param(id)),
                rel_table: layer.rel_table.map(|id| g.param(id)),
                alibi_slopes: layer.alibi_slopes.map(|id| g.param(id)),
            };
            let mut heads = Vec::new();
            let tr = trace.as_ref().map(|_| &mut heads);
            let a = attention_layer_cached(
                g, hn, &lengths, &w, c.n_heads, &c.pe, opts, tr, &mut masks,
            )?;
            if let Some(t) = trace.as_mut() {
                t.layers.push(heads);
            }
            x = g.add(x, a)?;

            let (g2, b2) = (g.param(layer.ln2.0), g.param(layer.ln2.1));
            let hn = g.layer_norm(x, g2, b2)?;
            let (w1, bb1) = (g.param(layer.ffn1.0), g.param(layer.ffn1.1));
            let up = g.matmul(hn, w1)?;
            let up = g.add_row(up, bb1)?;
            let act = g.gelu(up);
            let (w2, bb2) = (g.param(layer.ffn2.0), g.param(layer.ffn2.1));
            let down = g.matmul(act, w2)?;
            let down = g.add_row(down, bb2)?;
            x = g.add(x, down)?;
        }
        let (gf, bf) = (g.param(self.ln_f.0), g.param(self.ln_f.1));
        let x = g.layer_norm(x, gf, bf)?;
        let logits = match self.head_w {
            Some(w) => {
                let w = g.param(w);
                g.matmul(x, w)?
            }
            None => g.matmul_nt(x, tok)?,
        };
        let hb = g.param(self.head_b);
        let logits = g.add_row(logits, hb)?;
        Ok(Forward { logits, trace })
    }

    /// Mean masked cross-entropy over row-stacked sequences; `targets` and
    /// `loss_mask` are concatenated in the same order.
    pub fn loss(
        &self,
        g: &mut Graph<'_, T>,
        seqs: &[&[usize]],
        targets: &[usize],
        loss_mask: &[bool],
        opts: &ForwardOptions<T>,
    ) -> Result<(Var, Forward<T>)> {
        let fwd = self.forward(g, seqs, opts)?;
        if targets.iter().any(|&t| t >= self.config.vocab_size) {
            return config_err("target id outside the vocabulary");
        }
        let loss = g.cross_entropy(fwd.logits, targets, loss_mask)?;
        Ok((loss, fwd))
    }
}

/// Loss and logits of a single sequence.
pub fn model_forward_loss<T: Scalar>(
    model: &Model<T>,
    tokens: &[usize],
    targets: &[usize],
    loss_mask: &[bool],
) -> Result<(T, Tensor<T>)> {
    if tokens.len() != targets.len() || tokens.len() != loss_mask.len() {
        return config_err("tokens, targets and loss mask must have equal length");
    }
    if !loss_mask.iter().any(|&m| m) {
        return domain_err("loss mask selects no positions");
    }
    let mut g = Graph::with_params(model.params());
    let (loss, fwd) = model.loss(
        &mut g,
        &[tokens],
        targets,
        loss_mask,
        &ForwardOptions::default(),
    )?;
    Ok((g.value(loss).data()[0], g.value(fwd.logits).clone()))
}
