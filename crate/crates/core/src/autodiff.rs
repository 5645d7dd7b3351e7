//! Reverse-mode differentiation over a per-forward-pass tape.
//!
//! Every operation appends a node holding its output value; `backward` walks
//! the tape in reverse. A tape is meant to be built, differentiated once and
//! dropped.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{gemm, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    index: usize,
    tape: u64,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Elu(Var),
    Abs(Var),
    Square(Var),
    Exp(Var),
    Sum(Var),
    SumCols(Var),
    Gather(Var, Vec<usize>),
    LogSoftmax(Var),
    Min(Var, Var),
    Clamp(Var, f64, f64),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    MixWeights(Var, Var, usize),
    RowDot(Var, Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

struct ParamLeaf {
    node: usize,
    store: String,
    name: String,
}

/// Gradient of a loss with respect to one bound parameter.
#[derive(Debug, Clone)]
pub struct ParamGrad {
    pub store: String,
    pub name: String,
    pub grad: Tensor,
}

pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    params: Vec<ParamLeaf>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            index: self.nodes.len() - 1,
            tape: self.id,
        }
    }

    fn node(&self, v: Var) -> &Node {
        debug_assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.index]
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.node(v).value.shape()
    }

    fn ng(&self, v: Var) -> bool {
        self.node(v).needs_grad
    }

    /// A constant input; receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// An input whose gradient can be queried with [`Tape::gradients_wrt`].
    pub fn watched(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a trainable parameter. Its gradient is routed back to the store
    /// with the same tag by [`Tape::backward`].
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Var {
        let value = store.value(name).clone();
        let v = self.push(value, Op::Leaf, true);
        self.params.push(ParamLeaf {
            node: v.index,
            store: store.tag().to_string(),
            name: name.to_string(),
        });
        v
    }

    /// Binds a parameter either as trainable or as a frozen constant.
    pub fn bind(&mut self, store: &ParamStore, name: &str, trainable: bool) -> Var {
        if trainable {
            self.param(store, name)
        } else {
            self.constant(store.value(name).clone())
        }
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        let ng = self.ng(a);
        self.push(value, op, ng)
    }

    fn check_same(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        let ng = self.ng(a) || self.ng(b);
        self.push(value, op, ng)
    }

    /// `[m,k] · [k,n] -> [m,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape(format!("matmul {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            0.0,
            &mut out,
        );
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), ng))
    }

    /// Adds a bias vector `[c]` to every row of `[r,c]`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(bias));
        if va.shape().len() != 2 || vb.len() != va.cols() {
            return Err(Error::Shape(format!(
                "add_row {:?} + {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let c = va.cols();
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(c) {
            for (x, b) in row.iter_mut().zip(vb.data()) {
                *x += b;
            }
        }
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(bias);
        Ok(self.push(value, Op::AddRow(a, bias), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "add")?;
        Ok(self.zip(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "sub")?;
        Ok(self.zip(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "mul")?;
        Ok(self.zip(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn min(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "min")?;
        Ok(self.zip(a, b, Op::Min(a, b), f64::min))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn offset(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::Offset(a), |x| x + s)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn elu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Elu(a), elu)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Row sums of a matrix, `[r,c] -> [r,1]`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let c = va.cols();
        let data = va.data().chunks(c.max(1)).map(|r| r.iter().sum()).collect::<Vec<_>>();
        let r = data.len();
        let ng = self.ng(a);
        self.push(Tensor::new(vec![r, 1], data).unwrap(), Op::SumCols(a), ng)
    }

    /// Picks one column per row, `[r,c] -> [r,1]`.
    pub fn gather(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let va = self.value(a);
        if cols.len() != va.rows() || cols.iter().any(|&c| c >= va.cols()) {
            return Err(Error::Shape(format!(
                "gather {} indices from {:?}",
                cols.len(),
                va.shape()
            )));
        }
        let data = cols.iter().enumerate().map(|(r, &c)| va.get(r, c)).collect();
        let value = Tensor::new(vec![cols.len(), 1], data)?;
        let ng = self.ng(a);
        Ok(self.push(value, Op::Gather(a, cols.to_vec()), ng))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let c = va.cols();
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(c) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let value = Tensor::new(va.shape().to_vec(), data).unwrap();
        let ng = self.ng(a);
        self.push(value, Op::LogSoftmax(a), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let va = self.value(a);
        let c = va.cols();
        if start + len > va.rows() {
            return Err(Error::Shape(format!(
                "rows {start}..{} of {:?}",
                start + len,
                va.shape()
            )));
        }
        let data = va.data()[start * c..(start + len) * c].to_vec();
        let value = Tensor::new(vec![len, c], data)?;
        let ng = self.ng(a);
        Ok(self.push(value, Op::SliceRows(a, start), ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let va = self.value(a);
        let (r, c) = (va.rows(), va.cols());
        if start + len > c {
            return Err(Error::Shape(format!(
                "cols {start}..{} of {:?}",
                start + len,
                va.shape()
            )));
        }
        let mut data = Vec::with_capacity(r * len);
        for row in va.data().chunks(c) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let value = Tensor::new(vec![r, len], data)?;
        let ng = self.ng(a);
        Ok(self.push(value, Op::SliceCols(a, start), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = parts.first().map_or(0, |&p| self.value(p).cols());
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != c {
                return Err(Error::Shape("concat_rows column mismatch".into()));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            Tensor::new(vec![rows, c], data)?,
            Op::ConcatRows(parts.to_vec()),
            ng,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = parts.first().map_or(0, |&p| self.value(p).rows());
        if parts.iter().any(|&p| self.value(p).rows() != r) {
            return Err(Error::Shape("concat_cols row mismatch".into()));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            Tensor::new(vec![r, total], data)?,
            Op::ConcatCols(parts.to_vec()),
            ng,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let ng = self.ng(a);
        Ok(self.push(value, Op::Reshape(a), ng))
    }

    /// Per-sample vector-matrix product: row `b` of `q: [B,n]` times the
    /// `[n,e]` matrix stored row-major in row `b` of `w: [B,n*e]`.
    pub fn mix_weights(&mut self, q: Var, w: Var, embed: usize) -> Result<Var> {
        let (vq, vw) = (self.value(q), self.value(w));
        let (b, n) = (vq.rows(), vq.cols());
        if vw.rows() != b || vw.cols() != n * embed {
            return Err(Error::Shape(format!(
                "mix_weights {:?} with {:?} (embed {embed})",
                vq.shape(),
                vw.shape()
            )));
        }
        let mut out = vec![0.0; b * embed];
        for s in 0..b {
            let qs = vq.row(s);
            let ws = vw.row(s);
            let o = &mut out[s * embed..(s + 1) * embed];
            for (i, &qi) in qs.iter().enumerate() {
                for (oj, wj) in o.iter_mut().zip(&ws[i * embed..(i + 1) * embed]) {
                    *oj += qi * wj;
                }
            }
        }
        let ng = self.ng(q) || self.ng(w);
        Ok(self.push(
            Tensor::new(vec![b, embed], out)?,
            Op::MixWeights(q, w, embed),
            ng,
        ))
    }

    /// Row-wise dot product, `[B,e]·[B,e] -> [B,1]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "row_dot")?;
        let (va, vb) = (self.value(a), self.value(b));
        let c = va.cols();
        let data: Vec<f64> = va
            .data()
            .chunks(c)
            .zip(vb.data().chunks(c))
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum())
            .collect();
        let r = data.len();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![r, 1], data)?, Op::RowDot(a, b), ng))
    }

    fn check_var(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Graph(
                "variable was not recorded on this tape".into(),
            ));
        }
        Ok(())
    }

    fn run_backward(&self, loss: Var) -> Result<Vec<Option<Tensor>>> {
        self.check_var(loss)?;
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got {:?}",
                lv.shape()
            )));
        }
        if !lv.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.index] = Some(Tensor::full(lv.shape(), 1.0));
        for i in (0..=loss.index).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        Ok(grads)
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &node.value;
        let val = |v: Var| &self.nodes[v.index].value;
        let wants = |v: Var| self.nodes[v.index].needs_grad;
        let elementwise = |grads: &mut [Option<Tensor>], a: Var, f: &dyn Fn(usize) -> f64| {
            if !wants(a) {
                return;
            }
            match &mut grads[a.index] {
                Some(slot) => {
                    for (k, b) in slot.data_mut().iter_mut().enumerate() {
                        *b += g.data()[k] * f(k);
                    }
                }
                empty => {
                    let data = g.data().iter().enumerate().map(|(k, x)| x * f(k)).collect();
                    *empty = Some(Tensor::new(val(a).shape().to_vec(), data).expect("same shape"));
                }
            }
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (va, vb) = (val(a), val(b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                if wants(a) {
                    acc(grads, a, va.shape(), |buf| {
                        gemm(m, n, k, g.data(), false, vb.data(), true, 1.0, buf)
                    });
                }
                if wants(b) {
                    acc(grads, b, vb.shape(), |buf| {
                        gemm(k, m, n, va.data(), true, g.data(), false, 1.0, buf)
                    });
                }
            }
            &Op::AddRow(a, bias) => {
                elementwise(grads, a, &|_| 1.0);
                if wants(bias) {
                    let c = val(a).cols();
                    acc(grads, bias, val(bias).shape(), |buf| {
                        for row in g.data().chunks(c) {
                            for (b, x) in buf.iter_mut().zip(row) {
                                *b += x;
                            }
                        }
                    });
                }
            }
            &Op::Add(a, b) => {
                elementwise(grads, a, &|_| 1.0);
                elementwise(grads, b, &|_| 1.0);
            }
            &Op::Sub(a, b) => {
                elementwise(grads, a, &|_| 1.0);
                elementwise(grads, b, &|_| -1.0);
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (val(a).data(), val(b).data());
                elementwise(grads, a, &|k| vb[k]);
                elementwise(grads, b, &|k| va[k]);
            }
            &Op::Min(a, b) => {
                let (va, vb) = (val(a).data(), val(b).data());
                elementwise(grads, a, &|k| f64::from(u8::from(va[k] <= vb[k])));
                elementwise(grads, b, &|k| f64::from(u8::from(va[k] > vb[k])));
            }
            &Op::Scale(a, s) => elementwise(grads, a, &|_| s),
            &Op::Offset(a) => elementwise(grads, a, &|_| 1.0),
            &Op::Sigmoid(a) => {
                let yd = y.data();
                elementwise(grads, a, &|k| yd[k] * (1.0 - yd[k]))
            }
            &Op::Tanh(a) => {
                let yd = y.data();
                elementwise(grads, a, &|k| 1.0 - yd[k] * yd[k])
            }
            &Op::Relu(a) => {
                let xd = val(a).data();
                elementwise(grads, a, &|k| f64::from(u8::from(xd[k] > 0.0)))
            }
            &Op::Elu(a) => {
                let (xd, yd) = (val(a).data(), y.data());
                elementwise(grads, a, &|k| if xd[k] > 0.0 { 1.0 } else { yd[k] + 1.0 })
            }
            &Op::Abs(a) => {
                let xd = val(a).data();
                elementwise(grads, a, &|k| {
                    if xd[k] > 0.0 {
                        1.0
                    } else if xd[k] < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                })
            }
            &Op::Square(a) => {
                let xd = val(a).data();
                elementwise(grads, a, &|k| 2.0 * xd[k])
            }
            &Op::Exp(a) => {
                let yd = y.data();
                elementwise(grads, a, &|k| yd[k])
            }
            &Op::Clamp(a, lo, hi) => {
                let xd = val(a).data();
                elementwise(grads, a, &|k| f64::from(u8::from(xd[k] >= lo && xd[k] <= hi)))
            }
            &Op::Sum(a) => {
                let s = g.item();
                if wants(a) {
                    acc(grads, a, val(a).shape(), |buf| {
                        buf.iter_mut().for_each(|b| *b += s)
                    });
                }
            }
            &Op::SumCols(a) => {
                if wants(a) {
                    let c = val(a).cols();
                    acc(grads, a, val(a).shape(), |buf| {
                        for (row, gr) in buf.chunks_mut(c).zip(g.data()) {
                            row.iter_mut().for_each(|b| *b += gr);
                        }
                    });
                }
            }
            Op::Gather(a, cols) => {
                let a = *a;
                if wants(a) {
                    let c = val(a).cols();
                    acc(grads, a, val(a).shape(), |buf| {
                        for (r, (&col, gr)) in cols.iter().zip(g.data()).enumerate() {
                            buf[r * c + col] += gr;
                        }
                    });
                }
            }
            &Op::LogSoftmax(a) => {
                if wants(a) {
                    let c = y.cols();
                    acc(grads, a, val(a).shape(), |buf| {
                        for ((brow, yrow), grow) in buf
                            .chunks_mut(c)
                            .zip(y.data().chunks(c))
                            .zip(g.data().chunks(c))
                        {
                            let gs: f64 = grow.iter().sum();
                            for j in 0..c {
                                brow[j] += grow[j] - yrow[j].exp() * gs;
                            }
                        }
                    });
                }
            }
            &Op::SliceRows(a, start) => {
                if wants(a) {
                    let c = val(a).cols();
                    acc(grads, a, val(a).shape(), |buf| {
                        for (b, x) in buf[start * c..].iter_mut().zip(g.data()) {
                            *b += x;
                        }
                    });
                }
            }
            &Op::SliceCols(a, start) => {
                if wants(a) {
                    let c = val(a).cols();
                    let len = y.cols();
                    acc(grads, a, val(a).shape(), |buf| {
                        for (brow, grow) in buf.chunks_mut(c).zip(g.data().chunks(len)) {
                            for (b, x) in brow[start..start + len].iter_mut().zip(grow) {
                                *b += x;
                            }
                        }
                    });
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).len();
                    if wants(p) {
                        let src = &g.data()[offset..offset + n];
                        acc(grads, p, val(p).shape(), |buf| {
                            for (b, x) in buf.iter_mut().zip(src) {
                                *b += x;
                            }
                        });
                    }
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = y.cols();
                let mut col = 0;
                for &p in parts {
                    let pc = val(p).cols();
                    if wants(p) {
                        acc(grads, p, val(p).shape(), |buf| {
                            for (brow, grow) in buf.chunks_mut(pc).zip(g.data().chunks(total)) {
                                for (b, x) in brow.iter_mut().zip(&grow[col..col + pc]) {
                                    *b += x;
                                }
                            }
                        });
                    }
                    col += pc;
                }
            }
            &Op::Reshape(a) => elementwise(grads, a, &|_| 1.0),
            &Op::MixWeights(q, w, embed) => {
                let (vq, vw) = (val(q), val(w));
                let n = vq.cols();
                if wants(q) {
                    acc(grads, q, vq.shape(), |buf| {
                        for s in 0..vq.rows() {
                            let gs = &g.data()[s * embed..(s + 1) * embed];
                            let ws = vw.row(s);
                            for i in 0..n {
                                buf[s * n + i] += gs
                                    .iter()
                                    .zip(&ws[i * embed..(i + 1) * embed])
                                    .map(|(a, b)| a * b)
                                    .sum::<f64>();
                            }
                        }
                    });
                }
                if wants(w) {
                    acc(grads, w, vw.shape(), |buf| {
                        for s in 0..vq.rows() {
                            let gs = &g.data()[s * embed..(s + 1) * embed];
                            let row = &mut buf[s * n * embed..(s + 1) * n * embed];
                            for (i, &qi) in vq.row(s).iter().enumerate() {
                                for (b, gj) in row[i * embed..(i + 1) * embed].iter_mut().zip(gs) {
                                    *b += qi * gj;
                                }
                            }
                        }
                    });
                }
            }
            &Op::RowDot(a, b) => {
                let (va, vb) = (val(a), val(b));
                let c = va.cols();
                for (target, other) in [(a, vb), (b, va)] {
                    if wants(target) {
                        acc(grads, target, val(target).shape(), |buf| {
                            for ((brow, orow), gr) in buf
                                .chunks_mut(c)
                                .zip(other.data().chunks(c))
                                .zip(g.data())
                            {
                                for (x, o) in brow.iter_mut().zip(orow) {
                                    *x += gr * o;
                                }
                            }
                        });
                    }
                }
            }
        }
    }

    /// Gradients of `loss` for every bound parameter, summed per
    /// `(store, name)` when a parameter was bound more than once.
    pub fn param_gradients(&self, loss: Var) -> Result<Vec<ParamGrad>> {
        let mut grads = self.run_backward(loss)?;
        let mut out: Vec<ParamGrad> = Vec::new();
        for leaf in &self.params {
            let Some(g) = grads[leaf.node].take() else { continue };
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", leaf.name)));
            }
            match out
                .iter_mut()
                .find(|p| p.store == leaf.store && p.name == leaf.name)
            {
                Some(p) => p.grad.add_assign(&g),
                None => out.push(ParamGrad {
                    store: leaf.store.clone(),
                    name: leaf.name.clone(),
                    grad: g,
                }),
            }
        }
        Ok(out)
    }

    /// Accumulates `∂loss/∂param` into the grad slot of every bound parameter
    /// whose store tag matches one of `stores`.
    pub fn backward(&self, loss: Var, stores: &mut [&mut ParamStore]) -> Result<()> {
        for pg in self.param_gradients(loss)? {
            if let Some(store) = stores.iter_mut().find(|s| s.tag() == pg.store) {
                store.accumulate_grad(&pg.name, &pg.grad)?;
            }
        }
        Ok(())
    }

    /// Gradients of `loss` with respect to arbitrary recorded variables.
    pub fn gradients_wrt(&self, loss: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        for &v in wrt {
            self.check_var(v)?;
        }
        let mut grads = self.run_backward(loss)?;
        Ok(wrt
            .iter()
            .map(|v| {
                grads[v.index]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(self.value(*v).shape()))
            })
            .collect())
    }
}

fn acc(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], f: impl FnOnce(&mut [f64])) {
    let slot = grads[v.index].get_or_insert_with(|| Tensor::zeros(shape));
    f(slot.data_mut());
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}
