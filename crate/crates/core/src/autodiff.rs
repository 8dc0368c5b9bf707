//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] borrows a [`ParamStore`] immutably while the forward pass is
//! recorded; parameter nodes read their values straight from the store, so
//! no parameter storage is copied onto the tape. [`Tape::backward`] returns
//! a [`Gradients`] set that is written back with
//! [`ParamStore::set_gradients`] once the tape is dropped.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{self, dot, log_sum_exp, softmax_into, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Parameter {
    name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

impl Parameter {
    pub fn name(&self) -> &str {
        &self.name
    }
}

/// Named parameters of one model. Names are unique.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Usage(format!("duplicate parameter name {name:?}")));
        }
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name,
            value,
            grad,
            trainable,
        });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    /// Overwrites every gradient slot; parameters absent from `grads`
    /// get zeros.
    pub fn set_gradients(&mut self, grads: Gradients) {
        for (param, grad) in self.params.iter_mut().zip(grads.grads) {
            param.grad = grad.unwrap_or_else(|| Tensor::zeros(param.value.shape()));
        }
    }

    pub fn zero_grads(&mut self) {
        for param in &mut self.params {
            param.grad.data_mut().fill(0.0);
        }
    }

    /// SHA-256 over names and value bytes of the selected parameters.
    pub fn digest(&self, select: impl Fn(&Parameter) -> bool) -> String {
        let mut hasher = Sha256::new();
        for param in self.params.iter().filter(|p| select(p)) {
            hasher.update(param.name.as_bytes());
            hasher.update([0u8]);
            for value in param.value.data() {
                hasher.update(value.to_le_bytes());
            }
        }
        hex(&hasher.finalize())
    }

    pub fn frozen_digest(&self) -> String {
        self.digest(|p| !p.trainable)
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    use std::fmt::Write;
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut out, b| {
        let _ = write!(out, "{b:02x}");
        out
    })
}

/// Which parameters receive gradients during backward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradScope {
    /// Every parameter, trainable or not.
    All,
    /// Only parameters with `trainable == true`; frozen ones get zeros.
    TrainableOnly,
    /// Inference; backward is rejected.
    None,
}

#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }
}

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(usize, usize),
    Add(usize, usize),
    AddBias(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Sum(usize),
    Gelu(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(usize),
    Attention {
        qkv: usize,
        heads: usize,
        segments: Vec<usize>,
        probs: Vec<f64>,
    },
    Gather {
        tables: Vec<usize>,
        rows: Vec<(usize, usize)>,
    },
    TiedLogits {
        hidden: usize,
        tables: Vec<usize>,
        biases: Vec<usize>,
        columns: Vec<Option<(usize, usize)>>,
    },
    MaskedCrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        positions: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

pub struct Tape<'s> {
    id: u64,
    store: &'s ParamStore,
    scope: GradScope,
    nodes: Vec<Node>,
    param_nodes: HashMap<usize, usize>,
}

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParamStore, scope: GradScope) -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            store,
            scope,
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

    fn idx(&self, var: Var) -> Result<usize> {
        if var.tape != self.id || var.index >= self.nodes.len() {
            return Err(Error::Usage("variable does not belong to this tape".into()));
        }
        Ok(var.index)
    }

    fn node_value(&self, index: usize) -> &Tensor {
        let node = &self.nodes[index];
        match (&node.value, &node.op) {
            (Some(value), _) => value,
            (None, Op::Param(id)) => &self.store.get(*id).value,
            _ => unreachable!("non-parameter node without a value"),
        }
    }

    pub fn value(&self, var: Var) -> Result<&Tensor> {
        Ok(self.node_value(self.idx(var)?))
    }

    fn push(&mut self, value: Option<Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn any_grad(&self, inputs: &[usize]) -> bool {
        inputs.iter().any(|&i| self.nodes[i].requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Some(value), Op::Constant, false)
    }

    /// Node reading a parameter from the store. Repeated calls for the same
    /// parameter return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&index) = self.param_nodes.get(&id.0) {
            return Var { tape: self.id, index };
        }
        let requires_grad = match self.scope {
            GradScope::All => true,
            GradScope::TrainableOnly => self.store.get(id).trainable,
            GradScope::None => false,
        };
        let var = self.push(None, Op::Param(id), requires_grad);
        self.param_nodes.insert(id.0, var.index);
        var
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let value = tensor::matmul(self.node_value(ia), self.node_value(ib))?;
        let rg = self.any_grad(&[ia, ib]);
        Ok(self.push(Some(value), Op::MatMul(ia, ib), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (va, vb) = (self.node_value(ia), self.node_value(ib));
        if va.shape() != vb.shape() {
            return Err(Error::Shape {
                op: "add",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.any_grad(&[ia, ib]);
        Ok(self.push(Some(value), Op::Add(ia, ib), rg))
    }

    /// `x[r×c] + bias[c]`, broadcasting the bias over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (ix, ib) = (self.idx(x)?, self.idx(bias)?);
        let (vx, vb) = (self.node_value(ix), self.node_value(ib));
        if vb.numel() != vx.cols() {
            return Err(Error::Shape {
                op: "add_bias",
                lhs: vx.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let mut value = vx.clone();
        let cols = vx.cols();
        for row in value.data_mut().chunks_mut(cols) {
            for (v, b) in row.iter_mut().zip(vb.data()) {
                *v += b;
            }
        }
        let rg = self.any_grad(&[ix, ib]);
        Ok(self.push(Some(value), Op::AddBias(ix, ib), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (va, vb) = (self.node_value(ia), self.node_value(ib));
        if va.shape() != vb.shape() {
            return Err(Error::Shape {
                op: "mul",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.any_grad(&[ia, ib]);
        Ok(self.push(Some(value), Op::Mul(ia, ib), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        let va = self.node_value(ia);
        let data = va.data().iter().map(|x| x * factor).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.any_grad(&[ia]);
        Ok(self.push(Some(value), Op::Scale(ia, factor), rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let total = self.node_value(ia).data().iter().sum();
        let rg = self.any_grad(&[ia]);
        Ok(self.push(Some(Tensor::scalar(total)), Op::Sum(ia), rg))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let va = self.node_value(ia);
        let data = va
            .data()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()))
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.any_grad(&[ia]);
        Ok(self.push(Some(value), Op::Gelu(ia), rg))
    }

    /// Row-wise layer normalisation with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (ix, ig, ib) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let (vx, vg, vb) = (self.node_value(ix), self.node_value(ig), self.node_value(ib));
        let cols = vx.cols();
        if vg.numel() != cols || vb.numel() != cols {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: vx.shape().to_vec(),
                rhs: vg.shape().to_vec(),
            });
        }
        let rows = vx.rows();
        let mut xhat = vec![0.0; vx.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; vx.numel()];
        for r in 0..rows {
            let row = vx.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = inv;
            for c in 0..cols {
                let h = (row[c] - mean) * inv;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * vg.data()[c] + vb.data()[c];
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), out)?;
        let rg = self.any_grad(&[ix, ig, ib]);
        Ok(self.push(
            Some(value),
            Op::LayerNorm {
                x: ix,
                gamma: ig,
                beta: ib,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let value = tensor::softmax(self.node_value(ia));
        let rg = self.any_grad(&[ia]);
        Ok(self.push(Some(value), Op::Softmax(ia), rg))
    }

    /// Bidirectional multi-head self-attention.
    ///
    /// `qkv` is `[N, 3d]` holding queries, keys and values side by side;
    /// rows are split into independent sequences by `segments` (lengths
    /// summing to `N`). Returns `[N, d]`.
    pub fn attention(&mut self, qkv: Var, heads: usize, segments: &[usize]) -> Result<Var> {
        let iq = self.idx(qkv)?;
        let vq = self.node_value(iq);
        let (rows, width) = vq.expect_matrix("attention")?;
        if width % 3 != 0 || heads == 0 || (width / 3) % heads != 0 {
            return Err(Error::Shape {
                op: "attention",
                lhs: vq.shape().to_vec(),
                rhs: vec![heads],
            });
        }
        if segments.iter().sum::<usize>() != rows || segments.contains(&0) {
            return Err(Error::Precondition(format!(
                "attention segments {segments:?} do not tile {rows} rows"
            )));
        }
        let d = width / 3;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let data = vq.data();
        let mut out = vec![0.0; rows * d];
        let mut probs = Vec::with_capacity(segments.iter().map(|l| l * l * heads).sum());
        let mut start = 0;
        let mut scores = Vec::new();
        for &len in segments {
            for h in 0..heads {
                let qo = h * dh;
                let ko = d + h * dh;
                let vo = 2 * d + h * dh;
                for t in 0..len {
                    let q = &data[(start + t) * width + qo..][..dh];
                    scores.clear();
                    scores.extend((0..len).map(|u| dot(q, &data[(start + u) * width + ko..][..dh]) * scale));
                    let base = probs.len();
                    probs.resize(base + len, 0.0);
                    softmax_into(&scores, &mut probs[base..]);
                    let o = &mut out[(start + t) * d + h * dh..][..dh];
                    for u in 0..len {
                        let p = probs[base + u];
                        let v = &data[(start + u) * width + vo..][..dh];
                        for (oi, vi) in o.iter_mut().zip(v) {
                            *oi += p * vi;
                        }
                    }
                }
            }
            start += len;
        }
        let value = Tensor::matrix(rows, d, out)?;
        let rg = self.any_grad(&[iq]);
        Ok(self.push(
            Some(value),
            Op::Attention {
                qkv: iq,
                heads,
                segments: segments.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Row lookup across several tables stacked along the row axis without
    /// materialising the stack: row `i` of the virtual concatenation reads
    /// table `t` at local row `i - offset(t)`.
    pub fn gather_rows(&mut self, tables: &[Var], rows: &[usize]) -> Result<Var> {
        let indices = tables.iter().map(|&t| self.idx(t)).collect::<Result<Vec<_>>>()?;
        let locate = self.row_locator(&indices, "gather_rows")?;
        let width = self.node_value(indices[0]).cols();
        let mut out = Vec::with_capacity(rows.len() * width);
        let mut sources = Vec::with_capacity(rows.len());
        for &row in rows {
            let (t, local) = locate(row).ok_or_else(|| {
                Error::Range(format!("row {row} outside stacked tables"))
            })?;
            out.extend_from_slice(self.node_value(indices[t]).row(local));
            sources.push((t, local));
        }
        if rows.is_empty() {
            return Err(Error::Precondition("gather of zero rows".into()));
        }
        let value = Tensor::matrix(rows.len(), width, out)?;
        let rg = self.any_grad(&indices);
        Ok(self.push(
            Some(value),
            Op::Gather {
                tables: indices,
                rows: sources,
            },
            rg,
        ))
    }

    fn row_locator(&self, tables: &[usize], op: &'static str) -> Result<impl Fn(usize) -> Option<(usize, usize)>> {
        if tables.is_empty() {
            return Err(Error::Precondition(format!("{op} needs at least one table")));
        }
        let width = self.node_value(tables[0]).cols();
        let mut offsets = Vec::with_capacity(tables.len());
        let mut total = 0;
        for &t in tables {
            let v = self.node_value(t);
            let (r, c) = v.expect_matrix(op)?;
            if c != width {
                return Err(Error::Shape {
                    op,
                    lhs: vec![r, c],
                    rhs: vec![width],
                });
            }
            offsets.push((total, r));
            total += r;
        }
        Ok(move |row: usize| {
            offsets
                .iter()
                .enumerate()
                .find(|(_, (start, len))| row >= *start && row < start + len)
                .map(|(t, (start, _))| (t, row - start))
        })
    }

    /// Output projection tied to the stacked embedding tables:
    /// `logits[i, j] = hidden[i] · row_j + bias_j`, with `masked[j]` columns
    /// set to `-inf`. `biases[t]` has one entry per row of `tables[t]`.
    pub fn tied_logits(&mut self, hidden: Var, tables: &[Var], biases: &[Var], masked: &[bool]) -> Result<Var> {
        let ih = self.idx(hidden)?;
        let it = tables.iter().map(|&t| self.idx(t)).collect::<Result<Vec<_>>>()?;
        let ib = biases.iter().map(|&b| self.idx(b)).collect::<Result<Vec<_>>>()?;
        if it.len() != ib.len() {
            return Err(Error::Precondition("one bias vector per table".into()));
        }
        let mut columns = Vec::new();
        for (k, (&t, &b)) in it.iter().zip(&ib).enumerate() {
            let (rows, _) = self.node_value(t).expect_matrix("tied_logits")?;
            if self.node_value(b).numel() != rows {
                return Err(Error::Shape {
                    op: "tied_logits",
                    lhs: self.node_value(t).shape().to_vec(),
                    rhs: self.node_value(b).shape().to_vec(),
                });
            }
            columns.extend((0..rows).map(|r| Some((k, r))));
        }
        if masked.len() != columns.len() {
            return Err(Error::Shape {
                op: "tied_logits mask",
                lhs: vec![columns.len()],
                rhs: vec![masked.len()],
            });
        }
        for (column, &m) in columns.iter_mut().zip(masked) {
            if m {
                *column = None;
            }
        }
        let vh = self.node_value(ih);
        let (n, width) = vh.expect_matrix("tied_logits")?;
        if self.node_value(it[0]).cols() != width {
            return Err(Error::Shape {
                op: "tied_logits",
                lhs: vh.shape().to_vec(),
                rhs: self.node_value(it[0]).shape().to_vec(),
            });
        }
        let c = columns.len();
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            let h = vh.row(i);
            for (j, column) in columns.iter().enumerate() {
                out[i * c + j] = match column {
                    Some((k, r)) => {
                        dot(h, self.node_value(it[*k]).row(*r)) + self.node_value(ib[*k]).data()[*r]
                    }
                    None => f64::NEG_INFINITY,
                };
            }
        }
        let value = Tensor::matrix(n, c, out)?;
        let mut inputs = vec![ih];
        inputs.extend(&it);
        inputs.extend(&ib);
        let rg = self.any_grad(&inputs);
        Ok(self.push(
            Some(value),
            Op::TiedLogits {
                hidden: ih,
                tables: it,
                biases: ib,
                columns,
            },
            rg,
        ))
    }

    /// Mean negative log-likelihood of `targets[i]` at row `positions[i]`.
    pub fn masked_cross_entropy(&mut self, logits: Var, targets: &[usize], positions: &[usize]) -> Result<Var> {
        let il = self.idx(logits)?;
        let vl = self.node_value(il);
        let (rows, cols) = vl.expect_matrix("masked_cross_entropy")?;
        if positions.is_empty() {
            return Err(Error::Precondition(
                "masked cross-entropy needs at least one masked position".into(),
            ));
        }
        if targets.len() != positions.len() {
            return Err(Error::Precondition(format!(
                "{} targets for {} masked positions",
                targets.len(),
                positions.len()
            )));
        }
        if let Some(&p) = positions.iter().find(|&&p| p >= rows) {
            return Err(Error::Range(format!("masked position {p} >= {rows} rows")));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= cols) {
            return Err(Error::Range(format!("target {t} >= {cols} classes")));
        }
        let mut probs = vec![0.0; positions.len() * cols];
        let mut total = 0.0;
        for (k, (&p, &t)) in positions.iter().zip(targets).enumerate() {
            let row = vl.row(p);
            total += log_sum_exp(row) - row[t];
            softmax_into(row, &mut probs[k * cols..(k + 1) * cols]);
        }
        let loss = total / positions.len() as f64;
        let rg = self.any_grad(&[il]);
        Ok(self.push(
            Some(Tensor::scalar(loss)),
            Op::MaskedCrossEntropy {
                logits: il,
                targets: targets.to_vec(),
                positions: positions.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Propagates adjoints from the scalar `loss` back to every parameter
    /// node, visiting each recorded op once in reverse order.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.scope == GradScope::None {
            return Err(Error::Usage("backward on an inference-only tape".into()));
        }
        let root = self.idx(loss)?;
        if matches!(self.nodes[root].op, Op::Constant | Op::Param(_)) {
            return Err(Error::Usage("backward from a value that was not produced by a taped op".into()));
        }
        if self.node_value(root).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.node_value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(Tensor::full(self.node_value(root).shape(), 1.0));

        for index in (0..=root).rev() {
            let Some(g) = grads[index].take() else { continue };
            if !self.nodes[index].requires_grad {
                continue;
            }
            match &self.nodes[index].op {
                Op::Constant => {}
                Op::Param(_) => {
                    grads[index] = Some(g);
                }
                op => self.backprop(op, index, &g, &mut grads),
            }
        }

        let mut out: Vec<Option<Tensor>> = (0..self.store.len()).map(|_| None).collect();
        for (index, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                out[id.0] = grads[index].take();
            }
        }
        Ok(Gradients { grads: out })
    }

    fn wants(&self, index: usize) -> bool {
        self.nodes[index].requires_grad
    }

    fn backprop(&self, op: &Op, index: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let acc = |grads: &mut [Option<Tensor>], target: usize, delta: Tensor| match &mut grads[target] {
            Some(existing) => existing.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        };
        match op {
            Op::Constant | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.node_value(*a), self.node_value(*b));
                let (r, k) = (va.shape()[0], va.shape()[1]);
                let c = vb.shape()[1];
                if self.wants(*a) {
                    let mut da = Tensor::zeros(va.shape());
                    tensor::mm_a_bt_acc(g.data(), vb.data(), da.data_mut(), r, k, c);
                    acc(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = Tensor::zeros(vb.shape());
                    tensor::mm_at_b_acc(va.data(), g.data(), db.data_mut(), r, k, c);
                    acc(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    acc(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    acc(grads, *b, g.clone());
                }
            }
            Op::AddBias(x, b) => {
                if self.wants(*x) {
                    acc(grads, *x, g.clone());
                }
                if self.wants(*b) {
                    let vb = self.node_value(*b);
                    let mut db = Tensor::zeros(vb.shape());
                    for row in g.data().chunks(vb.numel()) {
                        for (d, v) in db.data_mut().iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    acc(grads, *b, db);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.node_value(*a), self.node_value(*b));
                if self.wants(*a) {
                    let data = g.data().iter().zip(vb.data()).map(|(g, y)| g * y).collect();
                    acc(grads, *a, Tensor::new(va.shape().to_vec(), data).expect("shape"));
                }
                if self.wants(*b) {
                    let data = g.data().iter().zip(va.data()).map(|(g, x)| g * x).collect();
                    acc(grads, *b, Tensor::new(vb.shape().to_vec(), data).expect("shape"));
                }
            }
            Op::Scale(a, factor) => {
                let data = g.data().iter().map(|v| v * factor).collect();
                acc(grads, *a, Tensor::new(g.shape().to_vec(), data).expect("shape"));
            }
            Op::Sum(a) => {
                acc(grads, *a, Tensor::full(self.node_value(*a).shape(), g.item()));
            }
            Op::Gelu(a) => {
                let va = self.node_value(*a);
                let data = va
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gy)| {
                        let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        gy * (0.5 * (1.0 + t) + 0.5 * x * dt)
                    })
                    .collect();
                acc(grads, *a, Tensor::new(va.shape().to_vec(), data).expect("shape"));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let vg = self.node_value(*gamma);
                let cols = vg.numel();
                let rows = inv_std.len();
                if self.wants(*gamma) {
                    let mut dg = Tensor::zeros(vg.shape());
                    for r in 0..rows {
                        for c in 0..cols {
                            dg.data_mut()[c] += g.data()[r * cols + c] * xhat[r * cols + c];
                        }
                    }
                    acc(grads, *gamma, dg);
                }
                if self.wants(*beta) {
                    let mut db = Tensor::zeros(self.node_value(*beta).shape());
                    for row in g.data().chunks(cols) {
                        for (d, v) in db.data_mut().iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    acc(grads, *beta, db);
                }
                if self.wants(*x) {
                    let mut dx = Tensor::zeros(g.shape());
                    let mut dxhat = vec![0.0; cols];
                    for r in 0..rows {
                        let gr = &g.data()[r * cols..(r + 1) * cols];
                        let xr = &xhat[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            dxhat[c] = gr[c] * vg.data()[c];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / cols as f64;
                        let mean_dx = dot(&dxhat, xr) / cols as f64;
                        let out = dx.row_mut(r);
                        for c in 0..cols {
                            out[c] = inv_std[r] * (dxhat[c] - mean_d - xr[c] * mean_dx);
                        }
                    }
                    acc(grads, *x, dx);
                }
            }
            Op::Softmax(a) => {
                let y = self.node_value(index);
                let cols = y.cols();
                let mut dx = Tensor::zeros(y.shape());
                for ((yr, gr), out) in y
                    .data()
                    .chunks(cols)
                    .zip(g.data().chunks(cols))
                    .zip(dx.data_mut().chunks_mut(cols))
                {
                    let inner = dot(yr, gr);
                    for c in 0..cols {
                        out[c] = yr[c] * (gr[c] - inner);
                    }
                }
                acc(grads, *a, dx);
            }
            Op::Attention {
                qkv,
                heads,
                segments,
                probs,
            } => {
                let vq = self.node_value(*qkv);
                let width = vq.cols();
                let d = width / 3;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let data = vq.data();
                let go = g.data();
                let mut dq = Tensor::zeros(vq.shape());
                let dqd = dq.data_mut();
                let mut start = 0;
                let mut offset = 0;
                let mut dp = Vec::new();
                for &len in segments {
                    for h in 0..*heads {
                        let qo = h * dh;
                        let ko = d + h * dh;
                        let vo = 2 * d + h * dh;
                        for t in 0..len {
                            let p = &probs[offset + t * len..][..len];
                            let gt = &go[(start + t) * d + h * dh..][..dh];
                            dp.clear();
                            dp.extend((0..len).map(|u| dot(gt, &data[(start + u) * width + vo..][..dh])));
                            let inner = dot(p, &dp);
                            for u in 0..len {
                                // dV_u += P[t,u] dO_t
                                let dv = &mut dqd[(start + u) * width + vo..][..dh];
                                for (x, y) in dv.iter_mut().zip(gt) {
                                    *x += p[u] * y;
                                }
                                let ds = p[u] * (dp[u] - inner) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                for i in 0..dh {
                                    let k_ui = data[(start + u) * width + ko + i];
                                    let q_ti = data[(start + t) * width + qo + i];
                                    dqd[(start + t) * width + qo + i] += ds * k_ui;
                                    dqd[(start + u) * width + ko + i] += ds * q_ti;
                                }
                            }
                        }
                        offset += len * len;
                    }
                    start += len;
                }
                acc(grads, *qkv, dq);
            }
            Op::Gather { tables, rows } => {
                let width = g.cols();
                let mut deltas: Vec<Option<Tensor>> = tables.iter().map(|_| None).collect();
                for (r, &(t, local)) in rows.iter().enumerate() {
                    if !self.wants(tables[t]) {
                        continue;
                    }
                    let delta = deltas[t].get_or_insert_with(|| Tensor::zeros(self.node_value(tables[t]).shape()));
                    let src = &g.data()[r * width..(r + 1) * width];
                    for (d, s) in delta.row_mut(local).iter_mut().zip(src) {
                        *d += s;
                    }
                }
                for (t, delta) in deltas.into_iter().enumerate() {
                    if let Some(delta) = delta {
                        acc(grads, tables[t], delta);
                    }
                }
            }
            Op::TiedLogits {
                hidden,
                tables,
                biases,
                columns,
            } => {
                let vh = self.node_value(*hidden);
                let (n, width) = (vh.rows(), vh.cols());
                let c = columns.len();
                let mut dh = self.wants(*hidden).then(|| Tensor::zeros(vh.shape()));
                let mut dt: Vec<Option<Tensor>> = tables
                    .iter()
                    .map(|&t| self.wants(t).then(|| Tensor::zeros(self.node_value(t).shape())))
                    .collect();
                let mut db: Vec<Option<Tensor>> = biases
                    .iter()
                    .map(|&b| self.wants(b).then(|| Tensor::zeros(self.node_value(b).shape())))
                    .collect();
                for (j, column) in columns.iter().enumerate() {
                    let Some((k, r)) = *column else { continue };
                    let row = self.node_value(tables[k]).row(r);
                    for i in 0..n {
                        let gij = g.data()[i * c + j];
                        if gij == 0.0 {
                            continue;
                        }
                        if let Some(dh) = dh.as_mut() {
                            for (d, w) in dh.row_mut(i).iter_mut().zip(row) {
                                *d += gij * w;
                            }
                        }
                        if let Some(dt) = dt[k].as_mut() {
                            for (d, h) in dt.row_mut(r).iter_mut().zip(&vh.data()[i * width..(i + 1) * width]) {
                                *d += gij * h;
                            }
                        }
                        if let Some(db) = db[k].as_mut() {
                            db.data_mut()[r] += gij;
                        }
                    }
                }
                if let Some(dh) = dh {
                    acc(grads, *hidden, dh);
                }
                for (k, delta) in dt.into_iter().enumerate() {
                    if let Some(delta) = delta {
                        acc(grads, tables[k], delta);
                    }
                }
                for (k, delta) in db.into_iter().enumerate() {
                    if let Some(delta) = delta {
                        acc(grads, biases[k], delta);
                    }
                }
            }
            Op::MaskedCrossEntropy {
                logits,
                targets,
                positions,
                probs,
            } => {
                let vl = self.node_value(*logits);
                let cols = vl.cols();
                let mut dl = Tensor::zeros(vl.shape());
                let weight = g.item() / positions.len() as f64;
                for (k, (&p, &t)) in positions.iter().zip(targets).enumerate() {
                    let row = dl.row_mut(p);
                    let pr = &probs[k * cols..(k + 1) * cols];
                    for c in 0..cols {
                        row[c] += weight * pr[c];
                    }
                    row[t] -= weight;
                }
                acc(grads, *logits, dl);
            }
        }
    }
}
