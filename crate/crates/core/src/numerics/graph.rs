//! Tensor-level reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its nodes. Values are
//! computed eagerly; [`Graph::backward`] walks the record in reverse and
//! returns the gradient of a scalar root with respect to every node that
//! depends on a leaf or a parameter.
//!
//! Operations work on matrices: the last dimension is the column axis and
//! all leading dimensions are flattened into rows.

use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{config_err, domain_err, Error, Result};
use crate::scalar::Scalar;

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Boolean selector shared between nodes; `true` keeps an entry.
pub type Mask = Rc<[bool]>;

enum Value<T> {
    Owned(Tensor<T>),
    Param(ParamId),
}

enum Op<T> {
    Input,
    Leaf,
    Param,
    MatMul {
        a: usize,
        b: usize,
        ta: bool,
        tb: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(usize, usize),
    AddRow(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Sigmoid(usize),
    Gelu(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    SliceCols {
        x: usize,
        start: usize,
    },
    ConcatCols(Vec<usize>),
    SliceRows {
        x: usize,
        start: usize,
    },
    ConcatRows(Vec<usize>),
    MaskedFill {
        x: usize,
        mask: Mask,
    },
    MaskedSoftmax {
        x: usize,
    },
    ReversedCumsum(usize),
    ClampMax {
        x: usize,
        max: T,
    },
    Interp {
        z: usize,
        pos: usize,
    },
    GatherCols {
        src: usize,
        idx: Rc<[usize]>,
    },
    Rope {
        x: usize,
        base: T,
        offset: usize,
    },
    MulScalar {
        x: usize,
        s: usize,
        index: usize,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<T>,
        count: usize,
    },
    Sum(usize),
}

struct Node<T> {
    value: Value<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// The value written into masked attention logits.
pub fn mask_fill_value<T: Scalar>() -> T {
    T::min_value()
}

/// Numerically stable logistic function; saturates to exactly 0 at the
/// mask fill value.
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(0.044715);
    let half = T::lit(0.5);
    let inner = c * (x + a * x * x * x);
    let two = T::lit(2.0);
    let t = T::one() - two / ((two * inner).exp() + T::one());
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t)
        + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x);
    (y, dy)
}

pub struct Graph<'p, T: Scalar> {
    params: Option<&'p ParamStore<T>>,
    nodes: Vec<Node<T>>,
    param_nodes: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn of(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient with respect to each parameter that took part in the graph.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[T])> {
        self.params
            .iter()
            .filter_map(move |&(id, node)| self.grads[node].as_deref().map(|g| (id, g)))
    }

    /// Adds `weight * grad` into each parameter's grad buffer.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>, weight: T) {
        for (id, g) in self.params() {
            store.accumulate(id, g, weight);
        }
    }
}

/// Floor index, ceiling index and fractional weight of a non-negative position.
#[inline]
fn split_position<T: Scalar>(p: T) -> (usize, usize, T) {
    let fi = p.to_usize().unwrap();
    let w = p - T::from_usize(fi).unwrap();
    (fi, if w > T::zero() { fi + 1 } else { fi }, w)
}

/// Adds `src` into a gradient slot, copying on the first contribution.
fn add_slice<T: Scalar>(dst: &mut Option<Vec<T>>, src: &[T]) {
    match dst {
        Some(g) => {
            for (a, &d) in g.iter_mut().zip(src) {
                *a += d;
            }
        }
        None => *dst = Some(src.to_vec()),
    }
}

fn add_into<T: Scalar>(dst: &mut Option<Vec<T>>, len: usize) -> &mut Vec<T> {
    dst.get_or_insert_with(|| vec![T::zero(); len])
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new() -> Self {
        Self {
            params: None,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn with_params(store: &'p ParamStore<T>) -> Self {
        Self {
            params: Some(store),
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    /// Constant input; no gradient is tracked through it.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input, false)
    }

    /// Differentiable leaf whose gradient can be read back.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Node bound to a parameter of the attached store. Repeated calls return
    /// the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        assert!(
            self.params.is_some(),
            "graph has no parameter store attached"
        );
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.params.expect("parameter store").tensor(*id),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn data(&self, i: usize) -> &[T] {
        self.value(Var(i)).data()
    }

    fn rows_cols(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return config_err(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn matrix(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return config_err(format!("{what}: expected a matrix, got shape {s:?}"));
        }
        Ok((s[0], s[1]))
    }

    // ----- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, false, b, false)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, false, b, true)
    }

    pub fn matmul_ex(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let (ar, ac) = self.matrix(a, "matmul")?;
        let (br, bc) = self.matrix(b, "matmul")?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            let sa = if ta {
                format!("[{ar}x{ac}]ᵀ")
            } else {
                format!("[{ar}x{ac}]")
            };
            let sb = if tb {
                format!("[{br}x{bc}]ᵀ")
            } else {
                format!("[{br}x{bc}]")
            };
            return config_err(format!("matmul inner dimensions disagree: {sa} · {sb}"));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.data(a.0),
            ta,
            self.data(b.0),
            tb,
            &mut out,
            false,
        );
        let needs = self.needs(&[a.0, b.0]);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul {
                a: a.0,
                b: b.0,
                ta,
                tb,
                m,
                k,
                n,
            },
            needs,
        ))
    }

    // ----- elementwise ----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out: Vec<T> = self
            .data(a.0)
            .iter()
            .zip(self.data(b.0))
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        let needs = self.needs(&[a.0, b.0]);
        Ok(self.push(t, Op::Add(a.0, b.0), needs))
    }

    /// Adds a vector to every row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, c) = self.rows_cols(x);
        if self.value(bias).len() != c {
            return config_err(format!(
                "add_row: bias shape {:?} vs rows of width {c}",
                self.shape(bias)
            ));
        }
        let b = self.data(bias.0);
        let mut out = self.data(x.0).to_vec();
        for row in out.chunks_mut(c) {
            for (v, &bb) in row.iter_mut().zip(b) {
                *v += bb;
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let needs = self.needs(&[x.0, bias.0]);
        Ok(self.push(t, Op::AddRow(x.0, bias.0), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out: Vec<T> = self
            .data(a.0)
            .iter()
            .zip(self.data(b.0))
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        let needs = self.needs(&[a.0, b.0]);
        Ok(self.push(t, Op::Mul(a.0, b.0), needs))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let t = self.value(x).map(|v| v * c);
        let needs = self.needs(&[x.0]);
        self.push(t, Op::Scale(x.0, c), needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(sigmoid);
        let needs = self.needs(&[x.0]);
        self.push(t, Op::Sigmoid(x.0), needs)
    }

    /// GeLU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| gelu_parts(v).0);
        let needs = self.needs(&[x.0]);
        self.push(t, Op::Gelu(x.0), needs)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (r, c) = self.rows_cols(x);
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return config_err(format!(
                "layer_norm: scale {:?}/offset {:?} vs width {c}",
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        let eps = T::lit(1e-5);
        let xs = self.data(x.0);
        let (g, b) = (self.data(gamma.0), self.data(beta.0));
        let mut out = vec![T::zero(); r * c];
        let mut xhat = vec![T::zero(); r * c];
        let mut rstd = vec![T::zero(); r];
        let cn = T::from_usize(c).unwrap();
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let mean = row.iter().fold(T::zero(), |s, &v| s + v) / cn;
            let var = row
                .iter()
                .fold(T::zero(), |s, &v| s + (v - mean) * (v - mean))
                / cn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let needs = self.needs(&[x.0, gamma.0, beta.0]);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                rstd,
            },
            needs,
        ))
    }

    /// Row lookup: `out[t] = table[ids[t]]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.matrix(table, "embedding")?;
        if ids.is_empty() {
            return config_err("embedding: empty id list");
        }
        let tab = self.data(table.0);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return config_err(format!("embedding: id {id} outside table of {v} rows"));
            }
            out.extend_from_slice(&tab[id * d..(id + 1) * d]);
        }
        let t = Tensor::new(vec![ids.len(), d], out)?;
        let needs = self.needs(&[table.0]);
        Ok(self.push(
            t,
            Op::Embedding {
                table: table.0,
                ids: ids.to_vec(),
            },
            needs,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.rows_cols(x);
        if len == 0 || start + len > c {
            return config_err(format!(
                "slice_cols: [{start}, {}) outside width {c}",
                start + len
            ));
        }
        let xs = self.data(x.0);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&xs[i * c + start..i * c + start + len]);
        }
        let t = Tensor::new(vec![r, len], out)?;
        let needs = self.needs(&[x.0]);
        Ok(self.push(t, Op::SliceCols { x: x.0, start }, needs))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return config_err("concat_cols: no inputs");
        };
        let r = self.rows_cols(first).0;
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.rows_cols(p);
            if pr != r {
                return config_err(format!("concat_cols: row counts {r} and {pr} differ"));
            }
            total += pc;
        }
        let mut out = vec![T::zero(); r * total];
        let mut off = 0;
        for &p in parts {
            let pc = self.rows_cols(p).1;
            let src = self.data(p.0);
            for i in 0..r {
                out[i * total + off..i * total + off + pc]
                    .copy_from_slice(&src[i * pc..(i + 1) * pc]);
            }
            off += pc;
        }
        let t = Tensor::new(vec![r, total], out)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let needs = self.needs(&ids);
        Ok(self.push(t, Op::ConcatCols(ids), needs))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.rows_cols(x);
        if len == 0 || start + len > r {
            return config_err(format!(
                "slice_rows: [{start}, {}) outside {r} rows",
                start + len
            ));
        }
        let out = self.data(x.0)[start * c..(start + len) * c].to_vec();
        let t = Tensor::new(vec![len, c], out)?;
        let needs = self.needs(&[x.0]);
        Ok(self.push(t, Op::SliceRows { x: x.0, start }, needs))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return config_err("concat_rows: no inputs");
        };
        let c = self.rows_cols(first).1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (pr, pc) = self.rows_cols(p);
            if pc != c {
                return config_err(format!("concat_rows: widths {c} and {pc} differ"));
            }
            out.extend_from_slice(self.data(p.0));
            rows += pr;
        }
        let t = Tensor::new(vec![rows, c], out)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let needs = self.needs(&ids);
        Ok(self.push(t, Op::ConcatRows(ids), needs))
    }

    // ----- attention plumbing ---------------------------------------------

    /// Replaces entries whose mask bit is `false` by [`mask_fill_value`].
    pub fn masked_fill(&mut self, x: Var, mask: &Mask) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return config_err(format!(
                "masked_fill: mask of {} for shape {:?}",
                mask.len(),
                self.shape(x)
            ));
        }
        let fill = mask_fill_value::<T>();
        let out: Vec<T> = self
            .data(x.0)
            .iter()
            .zip(mask.iter())
            .map(|(&v, &keep)| if keep { v } else { fill })
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let needs = self.needs(&[x.0]);
        Ok(self.push(
            t,
            Op::MaskedFill {
                x: x.0,
                mask: mask.clone(),
            },
            needs,
        ))
    }

    pub fn masked_softmax(&mut self, x: Var, mask: &Mask) -> Result<Var> {
        let out = masked_softmax_rows(self.value(x), mask)?;
        let needs = self.needs(&[x.0]);
        Ok(self.push(out, Op::MaskedSoftmax { x: x.0 }, needs))
    }

    pub fn reversed_cumsum(&mut self, x: Var) -> Var {
        let out = reversed_cumsum(self.value(x));
        let needs = self.needs(&[x.0]);
        self.push(out, Op::ReversedCumsum(x.0), needs)
    }

    pub fn clamp_max(&mut self, x: Var, max: T) -> Var {
        let t = self.value(x).map(|v| if v > max { max } else { v });
        let needs = self.needs(&[x.0]);
        self.push(t, Op::ClampMax { x: x.0, max }, needs)
    }

    /// Linear interpolation of per-row tables at fractional indices:
    /// `out[r,s] = w·z[r,⌈p⌉] + (1−w)·z[r,⌊p⌋]` with `p = pos[r,s]` and
    /// `w = p − ⌊p⌋`.
    pub fn interp(&mut self, z: Var, pos: Var) -> Result<Var> {
        let (zr, zc) = self.rows_cols(z);
        let (pr, pc) = self.rows_cols(pos);
        if zr != pr {
            return config_err(format!("interp: table rows {zr} vs position rows {pr}"));
        }
        let zs = self.data(z.0);
        let ps = self.data(pos.0);
        let top = T::from_usize(zc - 1).unwrap();
        let mut out = vec![T::zero(); pr * pc];
        for r in 0..pr {
            let zrow = &zs[r * zc..(r + 1) * zc];
            for s in 0..pc {
                let p = ps[r * pc + s];
                if !(p >= T::zero() && p <= top) {
                    return Err(Error::Invariant(format!(
                        "position {p} at ({r},{s}) outside [0, {}]",
                        zc - 1
                    )));
                }
                let (fi, ci, w) = split_position(p);
                out[r * pc + s] = zrow[ci] * w + zrow[fi] * (T::one() - w);
            }
        }
        let t = Tensor::new(self.shape(pos).to_vec(), out)?;
        let needs = self.needs(&[z.0, pos.0]);
        Ok(self.push(t, Op::Interp { z: z.0, pos: pos.0 }, needs))
    }

    /// `out[r,s] = src[r, idx[r,s]]`.
    pub fn gather_cols(&mut self, src: Var, idx: Rc<[usize]>, out_cols: usize) -> Result<Var> {
        let (r, c) = self.rows_cols(src);
        if idx.len() != r * out_cols {
            return config_err(format!(
                "gather_cols: {} indices for {r}x{out_cols} output",
                idx.len()
            ));
        }
        let ss = self.data(src.0);
        let mut out = vec![T::zero(); r * out_cols];
        for i in 0..r {
            for s in 0..out_cols {
                let j = idx[i * out_cols + s];
                if j >= c {
                    return config_err(format!(
                        "gather_cols: index {j} outside table of {c} entries"
                    ));
                }
                out[i * out_cols + s] = ss[i * c + j];
            }
        }
        let t = Tensor::new(vec![r, out_cols], out)?;
        let needs = self.needs(&[src.0]);
        Ok(self.push(t, Op::GatherCols { src: src.0, idx }, needs))
    }

    /// Rotary embedding of a `T×d` matrix: row `t` has each coordinate pair
    /// `(2m, 2m+1)` rotated by `(t + offset)·base^(−2m/d)`.
    pub fn rope(&mut self, x: Var, base: T, offset: usize) -> Result<Var> {
        let t = rope_rotate(self.value(x), base, offset, false)?;
        let needs = self.needs(&[x.0]);
        Ok(self.push(
            t,
            Op::Rope {
                x: x.0,
                base,
                offset,
            },
            needs,
        ))
    }

    /// `x · s[index]` for a vector node `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var, index: usize) -> Result<Var> {
        let sv = self.data(s.0);
        if index >= sv.len() {
            return config_err(format!(
                "mul_scalar: index {index} outside {} scalars",
                sv.len()
            ));
        }
        let c = sv[index];
        let t = self.value(x).map(|v| v * c);
        let needs = self.needs(&[x.0, s.0]);
        Ok(self.push(
            t,
            Op::MulScalar {
                x: x.0,
                s: s.0,
                index,
            },
            needs,
        ))
    }

    // ----- reductions -----------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x.0).iter().fold(T::zero(), |a, &b| a + b);
        let needs = self.needs(&[x.0]);
        self.push(Tensor::scalar(s), Op::Sum(x.0), needs)
    }

    /// Mean cross-entropy over rows whose mask bit is set.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (r, v) = self.matrix(logits, "cross_entropy")?;
        if targets.len() != r || mask.len() != r {
            return config_err(format!(
                "cross_entropy: {r} rows, {} targets, {} mask entries",
                targets.len(),
                mask.len()
            ));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return domain_err("cross_entropy: loss mask selects no position");
        }
        let ls = self.data(logits.0);
        let mut probs = vec![T::zero(); r * v];
        let mut total = T::zero();
        for i in 0..r {
            if !mask[i] {
                continue;
            }
            if targets[i] >= v {
                return config_err(format!(
                    "cross_entropy: target {} outside vocabulary {v}",
                    targets[i]
                ));
            }
            let row = &ls[i * v..(i + 1) * v];
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut z = T::zero();
            for (j, &x) in row.iter().enumerate() {
                let e = (x - m).exp();
                probs[i * v + j] = e;
                z += e;
            }
            for p in &mut probs[i * v..(i + 1) * v] {
                *p /= z;
            }
            total += z.ln() + m - row[targets[i]];
        }
        let loss = total / T::from_usize(count).unwrap();
        let needs = self.needs(&[logits.0]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            needs,
        ))
    }

    // ----- backward -------------------------------------------------------

    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        self.backward_seeded(root, T::one())
    }

    /// Reverse sweep from a scalar root whose own gradient is `seed`.
    pub fn backward_seeded(&self, root: Var, seed: T) -> Result<Gradients<T>> {
        if self.value(root).len() != 1 {
            return config_err(format!(
                "backward: root has shape {:?}, expected a scalar",
                self.shape(root)
            ));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(vec![seed]);
        for i in (0..=root.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backprop_node(i, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        let params = self
            .param_nodes
            .iter()
            .map(|(&id, &v)| (id, v.0))
            .collect::<std::collections::BTreeMap<_, _>>()
            .into_iter()
            .collect();
        Ok(Gradients { grads, params })
    }

    fn len_of(&self, i: usize) -> usize {
        self.value(Var(i)).len()
    }

    fn backprop_node(&self, i: usize, dy: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let y = self.data(i);
        match &node.op {
            Op::Input | Op::Leaf | Op::Param => {}
            &Op::MatMul {
                a,
                b,
                ta,
                tb,
                m,
                k,
                n,
            } => {
                if self.nodes[a].needs_grad {
                    let len = self.len_of(a);
                    let ga = add_into(&mut grads[a], len);
                    if !ta {
                        T::gemm(m, n, k, dy, false, self.data(b), !tb, ga, true);
                    } else {
                        T::gemm(k, n, m, self.data(b), tb, dy, true, ga, true);
                    }
                }
                if self.nodes[b].needs_grad {
                    let len = self.len_of(b);
                    let gb = add_into(&mut grads[b], len);
                    if !tb {
                        T::gemm(k, m, n, self.data(a), !ta, dy, false, gb, true);
                    } else {
                        T::gemm(n, m, k, dy, true, self.data(a), ta, gb, true);
                    }
                }
            }
            &Op::Add(a, b) => {
                for src in [a, b] {
                    if self.nodes[src].needs_grad {
                        add_slice(&mut grads[src], dy);
                    }
                }
            }
            &Op::AddRow(x, bias) => {
                if self.nodes[x].needs_grad {
                    add_slice(&mut grads[x], dy);
                }
                if self.nodes[bias].needs_grad {
                    let c = self.len_of(bias);
                    let g = add_into(&mut grads[bias], c);
                    for row in dy.chunks(c) {
                        for (a, &d) in g.iter_mut().zip(row) {
                            *a += d;
                        }
                    }
                }
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.data(a), self.data(b));
                if self.nodes[a].needs_grad {
                    let g = add_into(&mut grads[a], dy.len());
                    for j in 0..dy.len() {
                        g[j] += dy[j] * bv[j];
                    }
                }
                if self.nodes[b].needs_grad {
                    let g = add_into(&mut grads[b], dy.len());
                    for j in 0..dy.len() {
                        g[j] += dy[j] * av[j];
                    }
                }
            }
            &Op::Scale(x, c) => {
                let g = add_into(&mut grads[x], dy.len());
                for (a, &d) in g.iter_mut().zip(dy) {
                    *a += d * c;
                }
            }
            &Op::Sigmoid(x) => {
                let g = add_into(&mut grads[x], dy.len());
                for j in 0..dy.len() {
                    g[j] += dy[j] * y[j] * (T::one() - y[j]);
                }
            }
            &Op::Gelu(x) => {
                let xv = self.data(x);
                let g = add_into(&mut grads[x], dy.len());
                for j in 0..dy.len() {
                    g[j] += dy[j] * gelu_parts(xv[j]).1;
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let c = self.len_of(gamma);
                let r = dy.len() / c;
                let gv = self.data(gamma);
                if self.nodes[gamma].needs_grad {
                    let g = add_into(&mut grads[gamma], c);
                    for (j, (&d, &h)) in dy.iter().zip(xhat.iter()).enumerate() {
                        g[j % c] += d * h;
                    }
                }
                if self.nodes[beta].needs_grad {
                    let g = add_into(&mut grads[beta], c);
                    for (j, &d) in dy.iter().enumerate() {
                        g[j % c] += d;
                    }
                }
                if self.nodes[x].needs_grad {
                    let cn = T::from_usize(c).unwrap();
                    let g = add_into(&mut grads[x], dy.len());
                    for i in 0..r {
                        let mut mean_d = T::zero();
                        let mut mean_dh = T::zero();
                        for j in 0..c {
                            let dh = dy[i * c + j] * gv[j];
                            mean_d += dh;
                            mean_dh += dh * xhat[i * c + j];
                        }
                        mean_d /= cn;
                        mean_dh /= cn;
                        for j in 0..c {
                            let dh = dy[i * c + j] * gv[j];
                            g[i * c + j] += rstd[i] * (dh - mean_d - xhat[i * c + j] * mean_dh);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let table = *table;
                let len = self.len_of(table);
                let d = dy.len() / ids.len();
                let g = add_into(&mut grads[table], len);
                for (t, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        g[id * d + j] += dy[t * d + j];
                    }
                }
            }
            &Op::SliceCols { x, start } => {
                let (r, c) = self.rows_cols(Var(x));
                let len = dy.len() / r;
                let g = add_into(&mut grads[x], r * c);
                for i in 0..r {
                    for j in 0..len {
                        g[i * c + start + j] += dy[i * len + j];
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = self.rows_cols(Var(i)).1;
                let r = dy.len() / total;
                let mut off = 0;
                for &p in parts {
                    let pc = self.rows_cols(Var(p)).1;
                    if self.nodes[p].needs_grad {
                        let g = add_into(&mut grads[p], r * pc);
                        for row in 0..r {
                            for j in 0..pc {
                                g[row * pc + j] += dy[row * total + off + j];
                            }
                        }
                    }
                    off += pc;
                }
            }
            &Op::SliceRows { x, start } => {
                let c = self.rows_cols(Var(x)).1;
                let len = self.len_of(x);
                let g = add_into(&mut grads[x], len);
                for (k, &d) in dy.iter().enumerate() {
                    g[start * c + k] += d;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.len_of(p);
                    if self.nodes[p].needs_grad {
                        let g = add_into(&mut grads[p], len);
                        for (k, &d) in dy[off..off + len].iter().enumerate() {
                            g[k] += d;
                        }
                    }
                    off += len;
                }
            }
            Op::MaskedFill { x, mask } => {
                let g = add_into(&mut grads[*x], dy.len());
                for j in 0..dy.len() {
                    if mask[j] {
                        g[j] += dy[j];
                    }
                }
            }
            Op::MaskedSoftmax { x } => {
                let c = self.rows_cols(Var(i)).1;
                let g = add_into(&mut grads[*x], dy.len());
                for (yr, (dr, gr)) in y.chunks(c).zip(dy.chunks(c).zip(g.chunks_mut(c))) {
                    let dot = yr.iter().zip(dr).fold(T::zero(), |s, (&a, &b)| s + a * b);
                    for j in 0..c {
                        gr[j] += yr[j] * (dr[j] - dot);
                    }
                }
            }
            &Op::ReversedCumsum(x) => {
                let c = self.rows_cols(Var(i)).1;
                let g = add_into(&mut grads[x], dy.len());
                for (dr, gr) in dy.chunks(c).zip(g.chunks_mut(c)) {
                    let mut acc = T::zero();
                    for j in 0..c {
                        acc += dr[j];
                        gr[j] += acc;
                    }
                }
            }
            &Op::ClampMax { x, max } => {
                let xv = self.data(x);
                let g = add_into(&mut grads[x], dy.len());
                for j in 0..dy.len() {
                    if xv[j] <= max {
                        g[j] += dy[j];
                    }
                }
            }
            &Op::Interp { z, pos } => {
                let (zr, zc) = self.rows_cols(Var(z));
                let pc = dy.len() / zr;
                let zs = self.data(z);
                let ps = self.data(pos);
                if self.nodes[z].needs_grad {
                    let g = add_into(&mut grads[z], zr * zc);
                    for r in 0..zr {
                        for s in 0..pc {
                            let p = ps[r * pc + s];
                            let (fi, ci, w) = split_position(p);
                            let d = dy[r * pc + s];
                            g[r * zc + ci] += d * w;
                            g[r * zc + fi] += d * (T::one() - w);
                        }
                    }
                }
                if self.nodes[pos].needs_grad {
                    let g = add_into(&mut grads[pos], dy.len());
                    for r in 0..zr {
                        for s in 0..pc {
                            let p = ps[r * pc + s];
                            let (fi, ci, _) = split_position(p);
                            g[r * pc + s] += dy[r * pc + s] * (zs[r * zc + ci] - zs[r * zc + fi]);
                        }
                    }
                }
            }
            Op::GatherCols { src, idx } => {
                let (r, c) = self.rows_cols(Var(*src));
                let oc = dy.len() / r;
                let g = add_into(&mut grads[*src], r * c);
                for row in 0..r {
                    for s in 0..oc {
                        g[row * c + idx[row * oc + s]] += dy[row * oc + s];
                    }
                }
            }
            &Op::Rope { x, base, offset } => {
                let shape = self.shape(Var(i)).to_vec();
                let dt = Tensor::new(shape, dy.to_vec()).expect("gradient shape");
                let back = rope_rotate(&dt, base, offset, true).expect("validated in forward");
                let g = add_into(&mut grads[x], dy.len());
                for (a, &b) in g.iter_mut().zip(back.data()) {
                    *a += b;
                }
            }
            &Op::MulScalar { x, s, index } => {
                let c = self.data(s)[index];
                if self.nodes[x].needs_grad {
                    let g = add_into(&mut grads[x], dy.len());
                    for (a, &d) in g.iter_mut().zip(dy) {
                        *a += d * c;
                    }
                }
                if self.nodes[s].needs_grad {
                    let xv = self.data(x);
                    let dot = xv
                        .iter()
                        .zip(dy)
                        .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                    let len = self.len_of(s);
                    add_into(&mut grads[s], len)[index] += dot;
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                let len = self.len_of(*logits);
                let v = len / targets.len();
                let scale = dy[0] / T::from_usize(*count).unwrap();
                let g = add_into(&mut grads[*logits], len);
                for (r, &m) in mask.iter().enumerate() {
                    if !m {
                        continue;
                    }
                    for j in 0..v {
                        let onehot = if j == targets[r] { T::one() } else { T::zero() };
                        g[r * v + j] += scale * (probs[r * v + j] - onehot);
                    }
                }
            }
            &Op::Sum(x) => {
                let len = self.len_of(x);
                let g = add_into(&mut grads[x], len);
                for a in g.iter_mut() {
                    *a += dy[0];
                }
            }
        }
    }
}

/// Row-wise softmax over entries whose mask bit is `true`; masked entries
/// are exactly zero.
pub fn masked_softmax_rows<T: Scalar>(logits: &Tensor<T>, mask: &[bool]) -> Result<Tensor<T>> {
    if mask.len() != logits.len() {
        return config_err(format!(
            "masked_softmax: mask of {} for shape {:?}",
            mask.len(),
            logits.shape()
        ));
    }
    let c = logits.cols();
    let mut out = vec![T::zero(); logits.len()];
    for (r, (row, mrow)) in logits.data().chunks(c).zip(mask.chunks(c)).enumerate() {
        let mut m = T::neg_infinity();
        for (&x, &keep) in row.iter().zip(mrow) {
            if keep && x > m {
                m = x;
            }
        }
        if m == T::neg_infinity() {
            if mrow.iter().any(|&k| k) {
                return domain_err(format!(
                    "masked_softmax: row {r} has no finite unmasked logit"
                ));
            }
            return domain_err(format!("masked_softmax: row {r} is fully masked"));
        }
        let orow = &mut out[r * c..(r + 1) * c];
        let mut z = T::zero();
        for j in 0..c {
            if mrow[j] {
                let e = (row[j] - m).exp();
                orow[j] = e;
                z += e;
            }
        }
        for v in orow.iter_mut() {
            *v /= z;
        }
    }
    Tensor::new(logits.shape().to_vec(), out)
}

/// `out[…, j] = Σ_{k ≥ j} x[…, k]` along the last axis.
pub fn reversed_cumsum<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let c = x.cols();
    let mut out = vec![T::zero(); x.len()];
    for (src, dst) in x.data().chunks(c).zip(out.chunks_mut(c)) {
        let mut acc = T::zero();
        for j in (0..c).rev() {
            acc += src[j];
            dst[j] = acc;
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape as input")
}

pub(crate) fn rope_rotate<T: Scalar>(
    x: &Tensor<T>,
    base: T,
    offset: usize,
    inverse: bool,
) -> Result<Tensor<T>> {
    let d = x.cols();
    if d % 2 != 0 {
        return config_err(format!("rope: head dimension {d} is odd"));
    }
    let rows = x.rows();
    let mut out = x.data().to_vec();
    let dn = T::from_usize(d).unwrap();
    for t in 0..rows {
        let pos = T::from_usize(t + offset).unwrap();
        for m in 0..d / 2 {
            let freq = base.powf(-T::lit(2.0) * T::from_usize(m).unwrap() / dn);
            let mut theta = pos * freq;
            if inverse {
                theta = -theta;
            }
            let (s, c) = theta.sin_cos();
            let a = x.data()[t * d + 2 * m];
            let b = x.data()[t * d + 2 * m + 1];
            out[t * d + 2 * m] = a * c - b * s;
            out[t * d + 2 * m + 1] = a * s + b * c;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}
