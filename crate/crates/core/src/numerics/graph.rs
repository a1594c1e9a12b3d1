//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records forward ops in execution order, which is already a
//! topological order, and `backward` walks it once in reverse. Parameters
//! are borrowed from a [`ParamStore`] and only receive gradient when they
//! are selected by the [`ParamMask`] passed to `backward`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::{dot, matmul, matmul_at, matmul_bt, softmax_into, Tensor};
use crate::error::{Error, Result};

/// Named parameter tensors, ordered by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Copy of the parameters whose names start with `prefix`.
    pub fn filtered(&self, prefix: &str) -> ParamStore {
        ParamStore {
            params: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }
}

/// Selects which parameters receive gradient during a backward pass.
#[derive(Clone, Debug)]
pub enum ParamMask {
    All,
    None,
    Prefix(String),
    Names(BTreeSet<String>),
}

impl ParamMask {
    pub fn prefix(p: &str) -> Self {
        ParamMask::Prefix(p.to_string())
    }

    pub fn contains(&self, name: &str) -> bool {
        match self {
            ParamMask::All => true,
            ParamMask::None => false,
            ParamMask::Prefix(p) => name.starts_with(p.as_str()),
            ParamMask::Names(set) => set.contains(name),
        }
    }
}

/// Accumulated gradients keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    grads: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    fn accumulate(&mut self, name: &str, g: Tensor) {
        match self.grads.get_mut(name) {
            Some(acc) => acc.add_assign(&g),
            None => {
                self.grads.insert(name.to_string(), g);
            }
        }
    }
}

/// Handle to a node in a specific [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    graph: u64,
    index: usize,
}

#[derive(Debug)]
enum Op {
    Input,
    Param(String),
    MatMul(usize, usize),
    MatMulBt { a: usize, b: usize, offset: usize },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulCol(usize, usize),
    Scale(usize, f64),
    Sigmoid(usize),
    Tanh(usize),
    ConcatCols(Vec<usize>),
    SliceCols { a: usize, start: usize },
    SliceRows { a: usize, start: usize },
    Softmax { a: usize },
    Gather { table: usize, indices: Vec<usize> },
    Select { mask: Vec<bool>, a: usize, b: usize },
    CrossEntropy { logits: usize, targets: Vec<usize> },
    KlRows { p: usize, target: Tensor },
    WeightedMean { x: usize, weights: Vec<f64> },
}

enum Value<'p> {
    Owned(Tensor),
    Borrowed(&'p Tensor),
}

impl Value<'_> {
    fn tensor(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

struct Node<'p> {
    value: Value<'p>,
    op: Op,
}

static GRAPH_IDS: AtomicU64 = AtomicU64::new(1);

/// Lower clamp applied inside `ln` for the KL target distribution.
pub const KL_LOG_CLAMP: f64 = 1e-6;

pub struct Graph<'p> {
    id: u64,
    store: &'p ParamStore,
    nodes: Vec<Node<'p>>,
    param_nodes: HashMap<String, usize>,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Graph {
            id: GRAPH_IDS.fetch_add(1, Ordering::Relaxed),
            store,
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
        });
        Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(Error::Graph(format!(
                "variable {v:?} was not traced by graph {}",
                self.id
            )));
        }
        Ok(v.index)
    }

    fn t(&self, i: usize) -> &Tensor {
        self.nodes[i].value.tensor()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.graph, self.id, "variable from another graph");
        self.t(v.index)
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&i) = self.param_nodes.get(name) {
            return Ok(Var {
                graph: self.id,
                index: i,
            });
        }
        let t = self
            .store
            .get(name)
            .ok_or_else(|| Error::Graph(format!("unknown parameter {name}")))?;
        self.nodes.push(Node {
            value: Value::Borrowed(t),
            op: Op::Param(name.to_string()),
        });
        let i = self.nodes.len() - 1;
        self.param_nodes.insert(name.to_string(), i);
        Ok(Var {
            graph: self.id,
            index: i,
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let out = matmul(self.t(ia), self.t(ib))?;
        Ok(self.push(out, Op::MatMul(ia, ib)))
    }

    /// `a · b[offset..]ᵀ`, used to score against embedding rows past padding.
    pub fn matmul_bt(&mut self, a: Var, b: Var, offset: usize) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let out = matmul_bt(self.t(ia), self.t(ib), offset)?;
        Ok(self.push(out, Op::MatMulBt { a: ia, b: ib, offset }))
    }

    fn same_shape(&self, op: &'static str, ia: usize, ib: usize) -> Result<()> {
        if !self.t(ia).same_shape(self.t(ib)) {
            return Err(Error::Shape {
                op,
                left: self.t(ia).shape().to_vec(),
                right: self.t(ib).shape().to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<(usize, usize, Tensor)> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        self.same_shape(name, ia, ib)?;
        let (ta, tb) = (self.t(ia), self.t(ib));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok((ia, ib, Tensor::new(ta.shape().to_vec(), data)?))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, out) = self.zip_with(a, b, "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(ia, ib)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, out) = self.zip_with(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(ia, ib)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, out) = self.zip_with(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(ia, ib)))
    }

    /// Adds a `1×n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(row)?);
        let (ta, tb) = (self.t(ia), self.t(ib));
        if tb.rows() != 1 || tb.cols() != ta.cols() {
            return Err(Error::Shape {
                op: "add_row",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let mut out = ta.clone();
        let bias = tb.data();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(bias) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow(ia, ib)))
    }

    /// Scales row `r` of `a` by `col[r]` for a `B×1` column.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (ia, ic) = (self.idx(a)?, self.idx(col)?);
        let (ta, tc) = (self.t(ia), self.t(ic));
        if tc.cols() != 1 || tc.rows() != ta.rows() {
            return Err(Error::Shape {
                op: "mul_col",
                left: ta.shape().to_vec(),
                right: tc.shape().to_vec(),
            });
        }
        let mut out = ta.clone();
        for r in 0..out.rows() {
            let s = tc.data()[r];
            for o in out.row_mut(r) {
                *o *= s;
            }
        }
        Ok(self.push(out, Op::MulCol(ia, ic)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.t(ia).map(|v| v * c);
        Ok(self.push(out, Op::Scale(ia, c)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.t(ia).map(|v| 1.0 / (1.0 + (-v).exp()));
        Ok(self.push(out, Op::Sigmoid(ia)))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.t(ia).map(f64::tanh);
        Ok(self.push(out, Op::Tanh(ia)))
    }

    /// Column-wise concatenation of equally tall operands.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let idx: Vec<usize> = parts.iter().map(|&v| self.idx(v)).collect::<Result<_>>()?;
        let rows = self.t(idx[0]).rows();
        for &i in &idx {
            if self.t(i).rows() != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    left: self.t(idx[0]).shape().to_vec(),
                    right: self.t(i).shape().to_vec(),
                });
            }
        }
        let total: usize = idx.iter().map(|&i| self.t(i).cols()).sum();
        let mut out = Tensor::zeros(rows, total);
        for r in 0..rows {
            let mut c0 = 0;
            for &i in &idx {
                let src = self.t(i).row(r);
                out.row_mut(r)[c0..c0 + src.len()].copy_from_slice(src);
                c0 += src.len();
            }
        }
        Ok(self.push(out, Op::ConcatCols(idx)))
    }

    /// Columns `start..start + width` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let ia = self.idx(a)?;
        let ta = self.t(ia);
        if start + width > ta.cols() {
            return Err(Error::Shape {
                op: "slice_cols",
                left: ta.shape().to_vec(),
                right: vec![start, width],
            });
        }
        let mut out = Tensor::zeros(ta.rows(), width);
        for r in 0..ta.rows() {
            out.row_mut(r).copy_from_slice(&ta.row(r)[start..start + width]);
        }
        Ok(self.push(out, Op::SliceCols { a: ia, start }))
    }

    /// Rows `start..start + count` of `a`.
    pub fn slice_rows(&mut self, a: Var, start: usize, count: usize) -> Result<Var> {
        let ia = self.idx(a)?;
        let ta = self.t(ia);
        if start + count > ta.rows() {
            return Err(Error::Shape {
                op: "slice_rows",
                left: ta.shape().to_vec(),
                right: vec![start, count],
            });
        }
        let c = ta.cols();
        let data = ta.data()[start * c..(start + count) * c].to_vec();
        let out = Tensor::from_rows(count, c, data)?;
        Ok(self.push(out, Op::SliceRows { a: ia, start }))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let ta = self.t(ia);
        let mut out = Tensor::zeros(ta.rows(), ta.cols());
        for r in 0..ta.rows() {
            softmax_into(ta.row(r), out.row_mut(r));
        }
        Ok(self.push(out, Op::Softmax { a: ia }))
    }

    /// Row softmax restricted to entries where `mask` is true; masked-out
    /// entries are exactly zero. Every row needs at least one live entry.
    pub fn masked_softmax_rows(&mut self, a: Var, mask: Vec<bool>) -> Result<Var> {
        let ia = self.idx(a)?;
        let ta = self.t(ia);
        if mask.len() != ta.len() {
            return Err(Error::Shape {
                op: "masked_softmax_rows",
                left: ta.shape().to_vec(),
                right: vec![mask.len()],
            });
        }
        let c = ta.cols();
        let mut out = Tensor::zeros(ta.rows(), c);
        for r in 0..ta.rows() {
            let row = ta.row(r);
            let m = &mask[r * c..(r + 1) * c];
            let max = row
                .iter()
                .zip(m)
                .filter(|(_, &keep)| keep)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            if !m.contains(&true) {
                return Err(Error::Graph(format!("masked softmax row {r} has no live entry")));
            }
            let o = out.row_mut(r);
            let mut sum = 0.0;
            for j in 0..c {
                if m[j] {
                    o[j] = (row[j] - max).exp();
                    sum += o[j];
                }
            }
            for v in o.iter_mut() {
                *v /= sum;
            }
        }
        Ok(self.push(out, Op::Softmax { a: ia }))
    }

    /// Row `i` of the result is row `indices[i]` of `table`.
    pub fn gather(&mut self, table: Var, indices: Vec<usize>) -> Result<Var> {
        let it = self.idx(table)?;
        let tt = self.t(it);
        let c = tt.cols();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in &indices {
            if i >= tt.rows() {
                return Err(Error::Shape {
                    op: "gather",
                    left: tt.shape().to_vec(),
                    right: vec![i],
                });
            }
            data.extend_from_slice(tt.row(i));
        }
        let out = Tensor::from_rows(indices.len(), c, data)?;
        Ok(self.push(out, Op::Gather { table: it, indices }))
    }

    /// Row-wise choice: row `r` from `a` where `mask[r]`, else from `b`.
    pub fn select_rows(&mut self, mask: Vec<bool>, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        self.same_shape("select_rows", ia, ib)?;
        let (ta, tb) = (self.t(ia), self.t(ib));
        if mask.len() != ta.rows() {
            return Err(Error::Shape {
                op: "select_rows",
                left: ta.shape().to_vec(),
                right: vec![mask.len()],
            });
        }
        let mut out = tb.clone();
        for (r, &m) in mask.iter().enumerate() {
            if m {
                out.row_mut(r).copy_from_slice(ta.row(r));
            }
        }
        Ok(self.push(out, Op::Select { mask, a: ia, b: ib }))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<usize>) -> Result<Var> {
        let il = self.idx(logits)?;
        let tl = self.t(il);
        if targets.len() != tl.rows() || targets.iter().any(|&t| t >= tl.cols()) {
            return Err(Error::Shape {
                op: "cross_entropy",
                left: tl.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = tl.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let out = Tensor::scalar(total / targets.len() as f64);
        Ok(self.push(out, Op::CrossEntropy { logits: il, targets }))
    }

    /// Per-row `Σ_i p_i ln(p_i / t_i)` with the constant target clamped to
    /// `[KL_LOG_CLAMP, 1 - KL_LOG_CLAMP]`. Returns a `B×1` column.
    pub fn kl_rows(&mut self, p: Var, target: Tensor) -> Result<Var> {
        let ip = self.idx(p)?;
        let tp = self.t(ip);
        if !tp.same_shape(&target) {
            return Err(Error::Shape {
                op: "kl_rows",
                left: tp.shape().to_vec(),
                right: target.shape().to_vec(),
            });
        }
        let target = target.map(|v| v.clamp(KL_LOG_CLAMP, 1.0 - KL_LOG_CLAMP));
        let mut out = Tensor::zeros(tp.rows(), 1);
        for r in 0..tp.rows() {
            out.data_mut()[r] = tp
                .row(r)
                .iter()
                .zip(target.row(r))
                .map(|(&pi, &ti)| if pi > 0.0 { pi * (pi.ln() - ti.ln()) } else { 0.0 })
                .sum();
        }
        Ok(self.push(out, Op::KlRows { p: ip, target }))
    }

    /// `Σ_b weights[b]·x[b] / B` for a `B×1` column.
    pub fn weighted_mean(&mut self, x: Var, weights: Vec<f64>) -> Result<Var> {
        let ix = self.idx(x)?;
        let tx = self.t(ix);
        if tx.cols() != 1 || weights.len() != tx.rows() {
            return Err(Error::Shape {
                op: "weighted_mean",
                left: tx.shape().to_vec(),
                right: vec![weights.len()],
            });
        }
        let n = weights.len() as f64;
        let s: f64 = tx.data().iter().zip(&weights).map(|(x, w)| x * w).sum();
        let out = Tensor::scalar(s / n);
        Ok(self.push(out, Op::WeightedMean { x: ix, weights }))
    }

    /// Reverse pass from the scalar `loss`, accumulating into `grads` the
    /// gradient of every parameter selected by `mask`. Parameters outside
    /// the mask are not touched, and subgraphs that cannot reach a masked
    /// parameter are skipped.
    pub fn backward(&self, loss: Var, mask: &ParamMask, grads: &mut Gradients) -> Result<()> {
        let li = self.idx(loss)?;
        if self.t(li).len() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.t(li).shape()
            )));
        }
        let mut needs = vec![false; li + 1];
        for i in 0..=li {
            needs[i] = match &self.nodes[i].op {
                Op::Input => false,
                Op::Param(name) => mask.contains(name),
                op => inputs_of(op).iter().any(|&j| needs[j]),
            };
        }
        if !needs[li] {
            return Ok(());
        }
        let mut adj: Vec<Option<Tensor>> = (0..=li).map(|_| None).collect();
        adj[li] = Some(Tensor::new(self.t(li).shape().to_vec(), vec![1.0])?);
        for i in (0..=li).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !needs[i] {
                continue;
            }
            self.propagate(i, g, &needs, &mut adj, grads)?;
        }
        Ok(())
    }

    fn propagate(
        &self,
        i: usize,
        g: Tensor,
        needs: &[bool],
        adj: &mut [Option<Tensor>],
        grads: &mut Gradients,
    ) -> Result<()> {
        let send = |j: usize, t: Tensor, adj: &mut [Option<Tensor>]| {
            if !needs[j] {
                return;
            }
            match &mut adj[j] {
                Some(acc) => acc.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let y = self.t(i);
        match &self.nodes[i].op {
            Op::Input => {}
            Op::Param(name) => grads.accumulate(name, g),
            Op::MatMul(a, b) => {
                if needs[*a] {
                    send(*a, matmul_bt(&g, self.t(*b), 0)?, adj);
                }
                if needs[*b] {
                    send(*b, matmul_at(self.t(*a), &g)?, adj);
                }
            }
            Op::MatMulBt { a, b, offset } => {
                let tb = self.t(*b);
                if needs[*a] {
                    // g · b[offset..]
                    let k = tb.cols();
                    let n = g.cols();
                    let mut da = Tensor::zeros(g.rows(), k);
                    for r in 0..g.rows() {
                        let grow = g.row(r);
                        let drow = da.row_mut(r);
                        for (j, &gv) in grow.iter().enumerate().take(n) {
                            if gv == 0.0 {
                                continue;
                            }
                            for (d, &bv) in drow.iter_mut().zip(tb.row(j + offset)) {
                                *d += gv * bv;
                            }
                        }
                    }
                    send(*a, da, adj);
                }
                if needs[*b] {
                    let partial = matmul_at(&g, self.t(*a))?;
                    let mut db = Tensor::zeros(tb.rows(), tb.cols());
                    let c = tb.cols();
                    db.data_mut()[offset * c..].copy_from_slice(partial.data());
                    send(*b, db, adj);
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone(), adj);
                send(*b, g, adj);
            }
            Op::Sub(a, b) => {
                send(*b, g.map(|v| -v), adj);
                send(*a, g, adj);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.t(*a), self.t(*b));
                if needs[*a] {
                    let d = zip(&g, tb, |x, y| x * y);
                    send(*a, d, adj);
                }
                if needs[*b] {
                    let d = zip(&g, ta, |x, y| x * y);
                    send(*b, d, adj);
                }
            }
            Op::AddRow(a, row) => {
                if needs[*row] {
                    let mut d = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, v) in d.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    send(*row, d, adj);
                }
                send(*a, g, adj);
            }
            Op::MulCol(a, col) => {
                let (ta, tc) = (self.t(*a), self.t(*col));
                if needs[*col] {
                    let mut d = Tensor::zeros(g.rows(), 1);
                    for r in 0..g.rows() {
                        d.data_mut()[r] = dot(g.row(r), ta.row(r));
                    }
                    send(*col, d, adj);
                }
                if needs[*a] {
                    let mut d = g;
                    for r in 0..d.rows() {
                        let s = tc.data()[r];
                        for v in d.row_mut(r) {
                            *v *= s;
                        }
                    }
                    send(*a, d, adj);
                }
            }
            Op::Scale(a, c) => send(*a, g.map(|v| v * c), adj),
            Op::Sigmoid(a) => send(*a, zip(&g, y, |gv, yv| gv * yv * (1.0 - yv)), adj),
            Op::Tanh(a) => send(*a, zip(&g, y, |gv, yv| gv * (1.0 - yv * yv)), adj),
            Op::ConcatCols(parts) => {
                let mut c0 = 0;
                for &p in parts {
                    let w = self.t(p).cols();
                    if needs[p] {
                        let mut d = Tensor::zeros(g.rows(), w);
                        for r in 0..g.rows() {
                            d.row_mut(r).copy_from_slice(&g.row(r)[c0..c0 + w]);
                        }
                        send(p, d, adj);
                    }
                    c0 += w;
                }
            }
            Op::SliceCols { a, start } => {
                let ta = self.t(*a);
                let mut d = Tensor::zeros(ta.rows(), ta.cols());
                let w = g.cols();
                for r in 0..g.rows() {
                    d.row_mut(r)[*start..start + w].copy_from_slice(g.row(r));
                }
                send(*a, d, adj);
            }
            Op::SliceRows { a, start } => {
                let ta = self.t(*a);
                let mut d = Tensor::zeros(ta.rows(), ta.cols());
                let c = ta.cols();
                d.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                send(*a, d, adj);
            }
            Op::Softmax { a, .. } => {
                // masked entries have y = 0, so they get zero gradient
                let mut d = Tensor::zeros(g.rows(), g.cols());
                for r in 0..g.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let s = dot(gr, yr);
                    for ((o, &gv), &yv) in d.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *o = yv * (gv - s);
                    }
                }
                send(*a, d, adj);
            }
            Op::Gather { table, indices } => {
                let tt = self.t(*table);
                let mut d = Tensor::zeros(tt.rows(), tt.cols());
                for (r, &ix) in indices.iter().enumerate() {
                    for (o, v) in d.row_mut(ix).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                send(*table, d, adj);
            }
            Op::Select { mask, a, b } => {
                let mut da = Tensor::zeros(g.rows(), g.cols());
                let mut db = Tensor::zeros(g.rows(), g.cols());
                for (r, &m) in mask.iter().enumerate() {
                    let dst = if m { da.row_mut(r) } else { db.row_mut(r) };
                    dst.copy_from_slice(g.row(r));
                }
                send(*a, da, adj);
                send(*b, db, adj);
            }
            Op::CrossEntropy { logits, targets } => {
                let tl = self.t(*logits);
                let scale = g.data()[0] / targets.len() as f64;
                let mut d = Tensor::zeros(tl.rows(), tl.cols());
                for (r, &t) in targets.iter().enumerate() {
                    let row = d.row_mut(r);
                    softmax_into(tl.row(r), row);
                    row[t] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                send(*logits, d, adj);
            }
            Op::KlRows { p, target } => {
                let tp = self.t(*p);
                let mut d = Tensor::zeros(tp.rows(), tp.cols());
                for r in 0..tp.rows() {
                    let gr = g.data()[r];
                    for ((o, &pi), &ti) in d.row_mut(r).iter_mut().zip(tp.row(r)).zip(target.row(r)) {
                        *o = gr * (pi.max(f64::MIN_POSITIVE).ln() - ti.ln() + 1.0);
                    }
                }
                send(*p, d, adj);
            }
            Op::WeightedMean { x, weights } => {
                let n = weights.len() as f64;
                let gv = g.data()[0];
                let data = weights.iter().map(|w| gv * w / n).collect();
                send(*x, Tensor::from_rows(weights.len(), 1, data)?, adj);
            }
        }
        Ok(())
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("operands share a shape")
}

fn inputs_of(op: &Op) -> Vec<usize> {
    match op {
        Op::Input | Op::Param(_) => vec![],
        Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
        Op::MatMulBt { a, b, .. } => vec![*a, *b],
        Op::AddRow(a, b) | Op::MulCol(a, b) => vec![*a, *b],
        Op::Scale(a, _) | Op::Sigmoid(a) | Op::Tanh(a) => vec![*a],
        Op::ConcatCols(parts) => parts.clone(),
        Op::SliceCols { a, .. } | Op::SliceRows { a, .. } | Op::Softmax { a, .. } => vec![*a],
        Op::Gather { table, .. } => vec![*table],
        Op::Select { a, b, .. } => vec![*a, *b],
        Op::CrossEntropy { logits, .. } => vec![*logits],
        Op::KlRows { p, .. } => vec![*p],
        Op::WeightedMean { x, .. } => vec![*x],
    }
}
