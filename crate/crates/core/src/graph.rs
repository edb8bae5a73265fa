//! Reverse-mode automatic differentiation over [`Mat`] values.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value and
//! enough context to push gradients back to its inputs. Graphs are built per
//! forward pass and dropped afterwards. Parameters enter through
//! [`Graph::param`], which reads the shared [`ParamStore`] once per graph, so a
//! layer used twice in one pass accumulates both gradient contributions into
//! the same parameter.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Mat};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum LeafKind {
    Constant,
    Variable,
    Param(ParamId),
}

struct LstmCache {
    /// Unmasked row indices in processing order.
    positions: Vec<usize>,
    /// Activated gates `[i | f | g | o]`, one row per processed step.
    gates: Mat,
    cell: Mat,
    tanh_cell: Mat,
    hidden: Mat,
}

enum Op {
    Leaf(LeafKind),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddConst(Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Log(Var),
    Exp(Var),
    Clamp(Var, f64, f64),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Gather {
        table: Var,
        ids: Vec<usize>,
        pad: usize,
    },
    MaskedSoftmax(Var, Vec<bool>),
    LogSoftmax(Var),
    RowNormalize(Var, f64),
    Lstm {
        x: Var,
        w: Var,
        u: Var,
        b: Var,
        cache: LstmCache,
    },
    MaskedMeanRows(Var, Vec<bool>),
    MaskedMaxRows(Var, Vec<usize>),
    Sum(Var),
    MaxElem(Var, usize),
    Pick(Var, usize, usize),
}

struct Node {
    value: Rc<Mat>,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'p> {
    store: Option<&'p ParamStore>,
    nodes: RefCell<Vec<Node>>,
    param_leaves: RefCell<HashMap<ParamId, Var>>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    vars: HashMap<usize, Mat>,
    params: BTreeMap<ParamId, Mat>,
}

impl Gradients {
    /// Gradient of a variable leaf created with [`Graph::variable`] or [`Graph::param`].
    pub fn of(&self, v: Var) -> Option<&Mat> {
        self.vars.get(&v.0)
    }

    pub fn param(&self, id: ParamId) -> Option<&Mat> {
        self.params.get(&id)
    }

    pub fn params(&self) -> &BTreeMap<ParamId, Mat> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<ParamId, Mat> {
        self.params
    }
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Graph {
            store: Some(store),
            nodes: RefCell::new(Vec::new()),
            param_leaves: RefCell::new(HashMap::new()),
        }
    }

    /// A graph with no parameter store; only constants and variables.
    pub fn detached() -> Graph<'static> {
        Graph {
            store: None,
            nodes: RefCell::new(Vec::new()),
            param_leaves: RefCell::new(HashMap::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    pub fn value(&self, v: Var) -> Rc<Mat> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes.borrow()[v.0].value.shape()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.item()
    }

    fn push(&self, value: Mat, op: Op, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    fn push_op(&self, value: Mat, op: Op, inputs: &[Var]) -> Var {
        let needs = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| nodes[v.0].needs_grad)
        };
        self.push(value, op, needs)
    }

    pub fn constant(&self, m: Mat) -> Var {
        self.push(m, Op::Leaf(LeafKind::Constant), false)
    }

    /// A leaf whose gradient is reported by [`Gradients::of`].
    pub fn variable(&self, m: Mat) -> Var {
        self.push(m, Op::Leaf(LeafKind::Variable), true)
    }

    /// Leaf for a stored parameter. Repeated calls within one graph return the same node.
    pub fn param(&self, id: ParamId) -> Var {
        if let Some(&v) = self.param_leaves.borrow().get(&id) {
            return v;
        }
        let store = self
            .store
            .expect("Graph::param called on a detached graph");
        let trainable = store.is_trainable(id);
        let v = self.push(
            store.get(id).clone(),
            Op::Leaf(LeafKind::Param(id)),
            trainable,
        );
        self.param_leaves.borrow_mut().insert(id, v);
        v
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let out = av.matmul(&bv);
        self.push_op(out, Op::MatMul(a, b), &[a, b])
    }

    /// `a * b^T`.
    pub fn matmul_bt(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Mat::zeros(av.rows(), bv.rows());
        gemm(&av, false, &bv, true, &mut out, 0.0);
        self.push_op(out, Op::MatMulBt(a, b), &[a, b])
    }

    pub fn transpose(&self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push_op(out, Op::Transpose(a), &[a])
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, name: &str) -> Mat {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(
            av.shape(),
            bv.shape(),
            "{name}: shape mismatch {:?} vs {:?}",
            av.shape(),
            bv.shape()
        );
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Mat::from_vec(av.rows(), av.cols(), data)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x + y, "add");
        self.push_op(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x - y, "sub");
        self.push_op(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x * y, "mul");
        self.push_op(out, Op::Mul(a, b), &[a, b])
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!(rv.rows(), 1, "add_row: bias must be a row vector");
        assert_eq!(av.cols(), rv.cols(), "add_row: width mismatch");
        let mut out = (*av).clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(rv.data()) {
                *o += b;
            }
        }
        self.push_op(out, Op::AddRow(a, row), &[a, row])
    }

    pub fn add_const(&self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v + c);
        self.push_op(out, Op::AddConst(a), &[a])
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v * s);
        self.push_op(out, Op::Scale(a, s), &[a])
    }

    /// Multiplies every entry of `a` by the `1 x 1` value `s`.
    pub fn scale_by(&self, a: Var, s: Var) -> Var {
        let sv = self.scalar_value(s);
        let out = self.value(a).map(|v| v * sv);
        self.push_op(out, Op::ScaleBy(a, s), &[a, s])
    }

    pub fn relu(&self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push_op(out, Op::Relu(a), &[a])
    }

    pub fn tanh(&self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push_op(out, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push_op(out, Op::Sigmoid(a), &[a])
    }

    pub fn log(&self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        self.push_op(out, Op::Log(a), &[a])
    }

    pub fn exp(&self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push_op(out, Op::Exp(a), &[a])
    }

    /// Clamps into `[lo, hi]`; gradient flows only where the input lies inside the interval.
    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).map(|v| v.clamp(lo, hi));
        self.push_op(out, Op::Clamp(a, lo, hi), &[a])
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let vals: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let rows = vals[0].rows();
        let cols: usize = vals.iter().map(|v| v.cols()).sum();
        let mut out = Mat::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for v in &vals {
                assert_eq!(v.rows(), rows, "concat_cols: row count mismatch");
                out.row_mut(r)[off..off + v.cols()].copy_from_slice(v.row(r));
                off += v.cols();
            }
        }
        self.push_op(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let vals: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let cols = vals[0].cols();
        let mut data = Vec::with_capacity(vals.iter().map(|v| v.len()).sum());
        for v in &vals {
            assert_eq!(v.cols(), cols, "concat_rows: column count mismatch");
            data.extend_from_slice(v.data());
        }
        let rows = vals.iter().map(|v| v.rows()).sum();
        self.push_op(
            Mat::from_vec(rows, cols, data),
            Op::ConcatRows(parts.to_vec()),
            parts,
        )
    }

    pub fn slice_rows(&self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice_rows(start, len);
        self.push_op(out, Op::SliceRows(a, start), &[a])
    }

    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.cols(), "column slice out of bounds");
        let mut out = Mat::zeros(av.rows(), len);
        for r in 0..av.rows() {
            out.row_mut(r).copy_from_slice(&av.row(r)[start..start + len]);
        }
        self.push_op(out, Op::SliceCols(a, start), &[a])
    }

    /// Row lookup; rows for `pad` are all zero and receive no gradient.
    pub fn gather(&self, table: Var, ids: &[usize], pad: usize) -> Var {
        let tv = self.value(table);
        let mut out = Mat::zeros(ids.len(), tv.cols());
        for (r, &id) in ids.iter().enumerate() {
            assert!(id < tv.rows(), "gather: id {id} out of range {}", tv.rows());
            if id != pad {
                out.row_mut(r).copy_from_slice(tv.row(id));
            }
        }
        self.push_op(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
                pad,
            },
            &[table],
        )
    }

    /// Row-wise softmax restricted to columns where `col_mask` is true; other entries are exactly 0.
    /// A row with no unmasked column is all zeros.
    pub fn masked_softmax(&self, a: Var, col_mask: &[bool]) -> Var {
        let av = self.value(a);
        assert_eq!(av.cols(), col_mask.len(), "masked_softmax: mask width mismatch");
        let mut out = Mat::zeros(av.rows(), av.cols());
        for r in 0..av.rows() {
            softmax_into(av.row(r), col_mask, out.row_mut(r));
        }
        self.push_op(out, Op::MaskedSoftmax(a, col_mask.to_vec()), &[a])
    }

    pub fn softmax(&self, a: Var) -> Var {
        let cols = self.shape(a).1;
        self.masked_softmax(a, &vec![true; cols])
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = Mat::zeros(av.rows(), av.cols());
        for r in 0..av.rows() {
            let row = av.row(r);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for (o, v) in out.row_mut(r).iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        self.push_op(out, Op::LogSoftmax(a), &[a])
    }

    /// `a_ij / (sum_k a_ik + eps)`.
    pub fn row_normalize(&self, a: Var, eps: f64) -> Var {
        let av = self.value(a);
        let mut out = (*av).clone();
        for r in 0..out.rows() {
            let s: f64 = av.row(r).iter().sum::<f64>() + eps;
            for o in out.row_mut(r) {
                *o /= s;
            }
        }
        self.push_op(out, Op::RowNormalize(a, eps), &[a])
    }

    /// One LSTM direction over the rows of `x` where `mask` is true; masked rows of the
    /// output are zero and the recurrence skips them entirely. Gate order is `[i, f, g, o]`.
    pub fn lstm(&self, x: Var, w: Var, u: Var, b: Var, mask: &[bool], reverse: bool) -> Var {
        let (xv, wv, uv, bv) = (self.value(x), self.value(w), self.value(u), self.value(b));
        let hidden = uv.rows();
        assert_eq!(uv.cols(), 4 * hidden, "lstm: recurrent weight shape");
        assert_eq!(wv.cols(), 4 * hidden, "lstm: input weight shape");
        assert_eq!(wv.rows(), xv.cols(), "lstm: input width mismatch");
        assert_eq!(bv.shape(), (1, 4 * hidden), "lstm: bias shape");
        assert_eq!(mask.len(), xv.rows(), "lstm: mask length mismatch");

        let mut positions: Vec<usize> = (0..xv.rows()).filter(|&t| mask[t]).collect();
        if reverse {
            positions.reverse();
        }
        let steps = positions.len();
        let mut xs = Mat::zeros(steps, xv.cols());
        for (s, &t) in positions.iter().enumerate() {
            xs.row_mut(s).copy_from_slice(xv.row(t));
        }
        let mut pre = Mat::zeros(steps, 4 * hidden);
        gemm(&xs, false, &wv, false, &mut pre, 0.0);

        let mut gates = Mat::zeros(steps, 4 * hidden);
        let mut cell = Mat::zeros(steps, hidden);
        let mut tanh_cell = Mat::zeros(steps, hidden);
        let mut hid = Mat::zeros(steps, hidden);
        let mut out = Mat::zeros(xv.rows(), hidden);
        let mut z = vec![0.0; 4 * hidden];
        for s in 0..steps {
            for (zj, (p, bj)) in z.iter_mut().zip(pre.row(s).iter().zip(bv.data())) {
                *zj = p + bj;
            }
            if s > 0 {
                vec_mat_acc(hid.row(s - 1), &uv, &mut z);
            }
            let grow = gates.row_mut(s);
            for j in 0..hidden {
                grow[j] = sigmoid(z[j]);
                grow[hidden + j] = sigmoid(z[hidden + j]);
                grow[2 * hidden + j] = z[2 * hidden + j].tanh();
                grow[3 * hidden + j] = sigmoid(z[3 * hidden + j]);
            }
            for j in 0..hidden {
                let prev = if s > 0 { cell.get(s - 1, j) } else { 0.0 };
                let c = gates.get(s, hidden + j) * prev + gates.get(s, j) * gates.get(s, 2 * hidden + j);
                cell.set(s, j, c);
                let tc = c.tanh();
                tanh_cell.set(s, j, tc);
                hid.set(s, j, gates.get(s, 3 * hidden + j) * tc);
            }
            out.row_mut(positions[s]).copy_from_slice(hid.row(s));
        }
        let cache = LstmCache {
            positions,
            gates,
            cell,
            tanh_cell,
            hidden: hid,
        };
        self.push_op(out, Op::Lstm { x, w, u, b, cache }, &[x, w, u, b])
    }

    /// Mean over rows where `mask` is true, as a `1 x cols` row.
    pub fn masked_mean_rows(&self, a: Var, mask: &[bool]) -> Var {
        let av = self.value(a);
        assert_eq!(av.rows(), mask.len(), "masked_mean_rows: mask length");
        let count = mask.iter().filter(|&&m| m).count();
        let mut out = Mat::zeros(1, av.cols());
        if count > 0 {
            for r in (0..av.rows()).filter(|&r| mask[r]) {
                for (o, v) in out.data_mut().iter_mut().zip(av.row(r)) {
                    *o += v;
                }
            }
            out.scale_assign(1.0 / count as f64);
        }
        self.push_op(out, Op::MaskedMeanRows(a, mask.to_vec()), &[a])
    }

    /// Column-wise max over rows where `mask` is true (lowest row wins ties), as a `1 x cols` row.
    pub fn masked_max_rows(&self, a: Var, mask: &[bool]) -> Var {
        let av = self.value(a);
        assert_eq!(av.rows(), mask.len(), "masked_max_rows: mask length");
        let mut out = Mat::zeros(1, av.cols());
        let mut argmax = vec![usize::MAX; av.cols()];
        for c in 0..av.cols() {
            let mut best = f64::NEG_INFINITY;
            for r in (0..av.rows()).filter(|&r| mask[r]) {
                let v = av.get(r, c);
                if v > best {
                    best = v;
                    argmax[c] = r;
                }
            }
            if argmax[c] != usize::MAX {
                out.set(0, c, best);
            }
        }
        self.push_op(out, Op::MaskedMaxRows(a, argmax), &[a])
    }

    pub fn sum(&self, a: Var) -> Var {
        let out = Mat::scalar(self.value(a).sum());
        self.push_op(out, Op::Sum(a), &[a])
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Largest entry as a `1 x 1`; ties go to the lowest row-major index.
    pub fn max_elem(&self, a: Var) -> Var {
        let av = self.value(a);
        let mut best = 0;
        for (i, &v) in av.data().iter().enumerate() {
            if v > av.data()[best] {
                best = i;
            }
        }
        let out = Mat::scalar(av.data()[best]);
        self.push_op(out, Op::MaxElem(a, best), &[a])
    }

    pub fn pick(&self, a: Var, r: usize, c: usize) -> Var {
        let out = Mat::scalar(self.value(a).get(r, c));
        self.push_op(out, Op::Pick(a, r, c), &[a])
    }

    /// Runs reverse accumulation from the `1 x 1` node `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.0].value.shape(), (1, 1), "backward from a non-scalar");
        let mut grads: Vec<Option<Mat>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Mat::scalar(1.0));
        let mut out = Gradients {
            vars: HashMap::new(),
            params: BTreeMap::new(),
        };

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            let val = |v: Var| -> &Mat { &nodes[v.0].value };
            let wants = |v: Var| nodes[v.0].needs_grad;
            let mut acc = |v: Var, m: Mat| {
                if !nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.add_assign(&m),
                    slot @ None => *slot = Some(m),
                }
            };
            match &node.op {
                Op::Leaf(LeafKind::Constant) => {}
                Op::Leaf(LeafKind::Variable) => {
                    out.vars.insert(i, g);
                }
                Op::Leaf(LeafKind::Param(id)) => {
                    out.vars.insert(i, g.clone());
                    out.params.insert(*id, g);
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    if wants(*a) {
                        let mut da = Mat::zeros(av.rows(), av.cols());
                        gemm(&g, false, bv, true, &mut da, 0.0);
                        acc(*a, da);
                    }
                    if wants(*b) {
                        let mut db = Mat::zeros(bv.rows(), bv.cols());
                        gemm(av, true, &g, false, &mut db, 0.0);
                        acc(*b, db);
                    }
                }
                Op::MatMulBt(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    if wants(*a) {
                        let mut da = Mat::zeros(av.rows(), av.cols());
                        gemm(&g, false, bv, false, &mut da, 0.0);
                        acc(*a, da);
                    }
                    if wants(*b) {
                        let mut db = Mat::zeros(bv.rows(), bv.cols());
                        gemm(&g, true, av, false, &mut db, 0.0);
                        acc(*b, db);
                    }
                }
                Op::Transpose(a) => acc(*a, g.transpose()),
                Op::Add(a, b) => {
                    acc(*b, g.clone());
                    acc(*a, g);
                }
                Op::Sub(a, b) => {
                    acc(*b, g.map(|v| -v));
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    if wants(*a) {
                        acc(*a, hadamard(&g, bv));
                    }
                    if wants(*b) {
                        acc(*b, hadamard(&g, av));
                    }
                }
                Op::AddRow(a, row) => {
                    if wants(*row) {
                        let mut dr = Mat::zeros(1, g.cols());
                        for r in 0..g.rows() {
                            for (d, v) in dr.data_mut().iter_mut().zip(g.row(r)) {
                                *d += v;
                            }
                        }
                        acc(*row, dr);
                    }
                    acc(*a, g);
                }
                Op::AddConst(a) => acc(*a, g),
                Op::Scale(a, s) => acc(*a, g.map(|v| v * s)),
                Op::ScaleBy(a, s) => {
                    let (av, sv) = (val(*a), val(*s).item());
                    if wants(*s) {
                        let ds: f64 = g.data().iter().zip(av.data()).map(|(x, y)| x * y).sum();
                        acc(*s, Mat::scalar(ds));
                    }
                    acc(*a, g.map(|v| v * sv));
                }
                Op::Relu(a) => {
                    let y = &node.value;
                    acc(*a, zip_map(&g, y, |gv, yv| if yv > 0.0 { gv } else { 0.0 }));
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    acc(*a, zip_map(&g, y, |gv, yv| gv * (1.0 - yv * yv)));
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    acc(*a, zip_map(&g, y, |gv, yv| gv * yv * (1.0 - yv)));
                }
                Op::Log(a) => {
                    let x = val(*a);
                    acc(*a, zip_map(&g, x, |gv, xv| gv / xv));
                }
                Op::Exp(a) => {
                    let y = &node.value;
                    acc(*a, zip_map(&g, y, |gv, yv| gv * yv));
                }
                Op::Clamp(a, lo, hi) => {
                    let x = val(*a);
                    let (lo, hi) = (*lo, *hi);
                    acc(
                        *a,
                        zip_map(&g, x, |gv, xv| if xv >= lo && xv <= hi { gv } else { 0.0 }),
                    );
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = val(p).cols();
                        if wants(p) {
                            let mut d = Mat::zeros(g.rows(), w);
                            for r in 0..g.rows() {
                                d.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                            }
                            acc(p, d);
                        }
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let h = val(p).rows();
                        if wants(p) {
                            acc(p, g.slice_rows(off, h));
                        }
                        off += h;
                    }
                }
                Op::SliceRows(a, start) => {
                    let av = val(*a);
                    let mut d = Mat::zeros(av.rows(), av.cols());
                    for r in 0..g.rows() {
                        d.row_mut(start + r).copy_from_slice(g.row(r));
                    }
                    acc(*a, d);
                }
                Op::SliceCols(a, start) => {
                    let av = val(*a);
                    let mut d = Mat::zeros(av.rows(), av.cols());
                    for r in 0..g.rows() {
                        d.row_mut(r)[*start..start + g.cols()].copy_from_slice(g.row(r));
                    }
                    acc(*a, d);
                }
                Op::Gather { table, ids, pad } => {
                    let tv = val(*table);
                    let mut d = Mat::zeros(tv.rows(), tv.cols());
                    for (r, &id) in ids.iter().enumerate() {
                        if id != *pad {
                            for (dv, gv) in d.row_mut(id).iter_mut().zip(g.row(r)) {
                                *dv += gv;
                            }
                        }
                    }
                    acc(*table, d);
                }
                Op::MaskedSoftmax(a, mask) => {
                    let y = &node.value;
                    let mut d = Mat::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                        for c in (0..y.cols()).filter(|&c| mask[c]) {
                            d.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                        }
                    }
                    acc(*a, d);
                }
                Op::LogSoftmax(a) => {
                    let y = &node.value;
                    let mut d = Mat::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let gs: f64 = g.row(r).iter().sum();
                        for c in 0..y.cols() {
                            d.set(r, c, g.get(r, c) - y.get(r, c).exp() * gs);
                        }
                    }
                    acc(*a, d);
                }
                Op::RowNormalize(a, eps) => {
                    let (x, y) = (val(*a), &node.value);
                    let mut d = Mat::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let s: f64 = x.row(r).iter().sum::<f64>() + eps;
                        let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                        for c in 0..y.cols() {
                            d.set(r, c, (g.get(r, c) - dot) / s);
                        }
                    }
                    acc(*a, d);
                }
                Op::Lstm { x, w, u, b, cache } => {
                    let (dx, dw, du, db) = lstm_backward(&g, val(*x), val(*w), val(*u), cache);
                    if wants(*x) {
                        acc(*x, dx);
                    }
                    acc(*w, dw);
                    acc(*u, du);
                    acc(*b, db);
                }
                Op::MaskedMeanRows(a, mask) => {
                    let av = val(*a);
                    let count = mask.iter().filter(|&&m| m).count();
                    let mut d = Mat::zeros(av.rows(), av.cols());
                    if count > 0 {
                        let inv = 1.0 / count as f64;
                        for r in (0..av.rows()).filter(|&r| mask[r]) {
                            for (dv, gv) in d.row_mut(r).iter_mut().zip(g.data()) {
                                *dv = gv * inv;
                            }
                        }
                    }
                    acc(*a, d);
                }
                Op::MaskedMaxRows(a, argmax) => {
                    let av = val(*a);
                    let mut d = Mat::zeros(av.rows(), av.cols());
                    for (c, &r) in argmax.iter().enumerate() {
                        if r != usize::MAX {
                            d.set(r, c, g.get(0, c));
                        }
                    }
                    acc(*a, d);
                }
                Op::Sum(a) => {
                    let (r, c) = val(*a).shape();
                    acc(*a, Mat::filled(r, c, g.item()));
                }
                Op::MaxElem(a, idx) => {
                    let (r, c) = val(*a).shape();
                    let mut d = Mat::zeros(r, c);
                    d.data_mut()[*idx] = g.item();
                    acc(*a, d);
                }
                Op::Pick(a, r, c) => {
                    let (rows, cols) = val(*a).shape();
                    let mut d = Mat::zeros(rows, cols);
                    d.set(*r, *c, g.item());
                    acc(*a, d);
                }
            }
        }
        out
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmax of `row` over `mask`, written into `out`; masked entries are 0.
pub fn softmax_into(row: &[f64], mask: &[bool], out: &mut [f64]) {
    let m = row
        .iter()
        .zip(mask)
        .filter(|(_, &k)| k)
        .map(|(&v, _)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    out.fill(0.0);
    if m == f64::NEG_INFINITY {
        return;
    }
    let mut z = 0.0;
    for ((o, &v), &k) in out.iter_mut().zip(row).zip(mask) {
        if k {
            *o = (v - m).exp();
            z += *o;
        }
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

fn hadamard(a: &Mat, b: &Mat) -> Mat {
    zip_map(a, b, |x, y| x * y)
}

fn zip_map(a: &Mat, b: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Mat::from_vec(a.rows(), a.cols(), data)
}

/// `out += v * m` for a row vector `v`.
fn vec_mat_acc(v: &[f64], m: &Mat, out: &mut [f64]) {
    for (k, &vk) in v.iter().enumerate() {
        if vk == 0.0 {
            continue;
        }
        for (o, mv) in out.iter_mut().zip(m.row(k)) {
            *o += vk * mv;
        }
    }
}

/// `out = v * m^T`.
fn vec_mat_t(v: &[f64], m: &Mat, out: &mut [f64]) {
    for (k, o) in out.iter_mut().enumerate() {
        *o = m.row(k).iter().zip(v).map(|(a, b)| a * b).sum();
    }
}

fn lstm_backward(g: &Mat, x: &Mat, w: &Mat, u: &Mat, cache: &LstmCache) -> (Mat, Mat, Mat, Mat) {
    let hidden = u.rows();
    let steps = cache.positions.len();
    let mut dz = Mat::zeros(steps, 4 * hidden);
    let mut dh_next = vec![0.0; hidden];
    let mut dc_next = vec![0.0; hidden];
    let mut dh = vec![0.0; hidden];
    for s in (0..steps).rev() {
        let t = cache.positions[s];
        for j in 0..hidden {
            dh[j] = g.get(t, j) + dh_next[j];
        }
        let gates = cache.gates.row(s);
        let zrow = dz.row_mut(s);
        for j in 0..hidden {
            let (i, f, gg, o) = (
                gates[j],
                gates[hidden + j],
                gates[2 * hidden + j],
                gates[3 * hidden + j],
            );
            let tc = cache.tanh_cell.get(s, j);
            let c_prev = if s > 0 { cache.cell.get(s - 1, j) } else { 0.0 };
            let d_o = dh[j] * tc;
            let dc = dh[j] * o * (1.0 - tc * tc) + dc_next[j];
            zrow[j] = dc * gg * i * (1.0 - i);
            zrow[hidden + j] = dc * c_prev * f * (1.0 - f);
            zrow[2 * hidden + j] = dc * i * (1.0 - gg * gg);
            zrow[3 * hidden + j] = d_o * o * (1.0 - o);
            dc_next[j] = dc * f;
        }
        vec_mat_t(dz.row(s), u, &mut dh_next);
    }

    let mut xs = Mat::zeros(steps, x.cols());
    let mut h_prev = Mat::zeros(steps, hidden);
    for (s, &t) in cache.positions.iter().enumerate() {
        xs.row_mut(s).copy_from_slice(x.row(t));
        if s > 0 {
            h_prev.row_mut(s).copy_from_slice(cache.hidden.row(s - 1));
        }
    }
    let mut dw = Mat::zeros(w.rows(), w.cols());
    gemm(&xs, true, &dz, false, &mut dw, 0.0);
    let mut du = Mat::zeros(u.rows(), u.cols());
    gemm(&h_prev, true, &dz, false, &mut du, 0.0);
    let mut db = Mat::zeros(1, 4 * hidden);
    for s in 0..steps {
        for (d, v) in db.data_mut().iter_mut().zip(dz.row(s)) {
            *d += v;
        }
    }
    let mut dxs = Mat::zeros(steps, x.cols());
    gemm(&dz, false, w, true, &mut dxs, 0.0);
    let mut dx = Mat::zeros(x.rows(), x.cols());
    for (s, &t) in cache.positions.iter().enumerate() {
        dx.row_mut(t).copy_from_slice(dxs.row(s));
    }
    (dx, dw, du, db)
}
