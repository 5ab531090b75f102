use std::sync::Arc;

use super::param::{ParamLayout, ParamVector};
use super::scalar::Scalar;
use super::{DiffError, Result};

pub type NodeId = usize;

/// Dense row-major matrix of scalars. Vectors are `1 x n` or `n x 1`,
/// scalars `1 x 1`.
#[derive(Clone, Debug)]
pub struct Buffer<S> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<S>,
}

impl<S: Scalar> Buffer<S> {
    pub fn new(rows: usize, cols: usize, data: Vec<S>) -> Self {
        assert_eq!(data.len(), rows * cols, "buffer data does not match shape");
        Buffer { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Buffer { rows, cols, data: vec![S::zero(); rows * cols] }
    }

    pub fn scalar(v: S) -> Self {
        Buffer { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn from_f64_slice(rows: usize, cols: usize, data: &[f64]) -> Self {
        Buffer::new(rows, cols, data.iter().map(|&v| S::from_f64(v)).collect())
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }

    pub fn primal_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.primal()).collect()
    }

    pub fn tangent_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.tangent()).collect()
    }
}

/// Recorded operation. Input node ids are stored inline; index vectors are
/// shared so cloning an op during backward is cheap.
#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// a * x + b, elementwise with constants.
    Affine { x: NodeId, a: f64, b: f64 },
    /// x[m,n] + row[1,n] broadcast over rows.
    AddRow { x: NodeId, row: NodeId },
    RowSum(NodeId),
    ColSum(NodeId),
    BroadcastRow { row: NodeId, rows: usize },
    BroadcastCol { col: NodeId, cols: usize },
    BroadcastAll { s: NodeId, rows: usize, cols: usize },
    SumAll(NodeId),
    /// Per-row max treated as a constant (no gradient); used for the
    /// log-sum-exp shift, where the derivative cancels exactly.
    RowMaxDetached(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Recip(NodeId),
    Sqrt(NodeId),
    /// Row gather from a table: out[i, :] = table[idx[i], :].
    GatherRows { table: NodeId, idx: Arc<Vec<usize>> },
    /// Scatter-add rows of src into a zero [rows, n] output.
    ScatterAddRows { src: NodeId, idx: Arc<Vec<usize>>, rows: usize },
    /// Per-row column pick: out[i, 0] = x[i, idx[i]].
    GatherCol { x: NodeId, idx: Arc<Vec<usize>> },
    /// Inverse of GatherCol into a zero [m, cols] output.
    ScatterAddCol { src: NodeId, idx: Arc<Vec<usize>>, cols: usize },
    SliceCols { x: NodeId, start: usize, len: usize },
    PadCols { x: NodeId, start: usize, total: usize },
    Clamp { x: NodeId, lo: f64, hi: f64 },
    /// Elementwise min by primal value; ties take the left branch.
    MinElem(NodeId, NodeId),
}

struct Node<S> {
    op: Op,
    value: Buffer<S>,
    needs_grad: bool,
}

/// Leaf node ids for every segment of a [`ParamVector`], in layout order.
#[derive(Clone)]
pub struct ParamNodes {
    pub layout: Arc<ParamLayout>,
    pub ids: Vec<NodeId>,
}

impl ParamNodes {
    pub fn id(&self, name: &str) -> NodeId {
        let i = self
            .layout
            .position(name)
            .unwrap_or_else(|| panic!("no segment `{name}`"));
        self.ids[i]
    }

    pub fn get(&self, name: &str) -> Option<NodeId> {
        self.layout.position(name).map(|i| self.ids[i])
    }
}

/// Adjoint node ids produced by one backward pass, indexed by node id.
pub struct Adjoints {
    adj: Vec<Option<NodeId>>,
}

impl Adjoints {
    pub fn of(&self, id: NodeId) -> Option<NodeId> {
        self.adj.get(id).copied().flatten()
    }
}

#[derive(Clone, Debug)]
struct Fault {
    context: String,
}

/// Expression tape with eager evaluation.
///
/// Every builder method computes its value immediately and records the op, so
/// reading `value(id)` is always valid. `backward` emits adjoints as new tape
/// nodes, which makes repeated differentiation (gradients of gradients)
/// available for free.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    fault: Option<Fault>,
    peak_scalars: usize,
    live_scalars: usize,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), fault: None, peak_scalars: 0, live_scalars: 0 }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Total scalars held by tape buffers (monotone; buffers are never freed).
    pub fn peak_scalars(&self) -> usize {
        self.peak_scalars
    }

    pub fn value(&self, id: NodeId) -> &Buffer<S> {
        &self.nodes[id].value
    }

    pub fn rows(&self, id: NodeId) -> usize {
        self.nodes[id].value.rows
    }

    pub fn cols(&self, id: NodeId) -> usize {
        self.nodes[id].value.cols
    }

    /// Scalar value of a `1 x 1` node, failing if a numeric fault was recorded
    /// anywhere in the computation.
    pub fn scalar_value(&self, id: NodeId) -> Result<S> {
        self.check_fault()?;
        let b = &self.nodes[id].value;
        assert!(b.is_scalar(), "scalar_value on a {}x{} node", b.rows, b.cols);
        Ok(b.data[0])
    }

    pub fn check_fault(&self) -> Result<()> {
        match &self.fault {
            Some(f) => Err(DiffError::NumericFault {
                segment: "<intermediate>".into(),
                context: f.context.clone(),
            }),
            None => Ok(()),
        }
    }

    pub fn has_fault(&self) -> bool {
        self.fault.is_some()
    }

    fn push(&mut self, op: Op, value: Buffer<S>, needs_grad: bool) -> NodeId {
        self.live_scalars += value.len();
        if self.live_scalars > self.peak_scalars {
            self.peak_scalars = self.live_scalars;
        }
        self.nodes.push(Node { op, value, needs_grad });
        self.nodes.len() - 1
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    fn scan_finite(&mut self, id: NodeId, what: &'static str) {
        if self.fault.is_some() {
            return;
        }
        if self.nodes[id].value.data.iter().any(|v| !v.is_finite_all()) {
            self.fault = Some(Fault { context: format!("{what} (node {id})") });
        }
    }

    // ── Leaves ───────────────────────────────────────────────────────

    pub fn leaf(&mut self, value: Buffer<S>, requires_grad: bool) -> NodeId {
        self.push(Op::Leaf, value, requires_grad)
    }

    pub fn constant(&mut self, rows: usize, cols: usize, data: &[f64]) -> NodeId {
        self.leaf(Buffer::from_f64_slice(rows, cols, data), false)
    }

    pub fn constant_scalar(&mut self, v: f64) -> NodeId {
        self.leaf(Buffer::scalar(S::from_f64(v)), false)
    }

    /// One leaf per segment of `v`. Optional per-entry tangent seed (for dual
    /// evaluation) must share `v`'s layout.
    pub fn param_leaves(
        &mut self,
        v: &ParamVector,
        tangent: Option<&ParamVector>,
        requires_grad: bool,
    ) -> Result<ParamNodes> {
        if let Some(t) = tangent {
            if !v.same_layout(t) {
                return Err(DiffError::LayoutMismatch(
                    "tangent layout differs from primal layout".into(),
                ));
            }
        }
        let layout = v.layout().clone();
        let mut ids = Vec::with_capacity(layout.num_segments());
        for i in 0..layout.num_segments() {
            let seg = layout.segment(i);
            let off = layout.offset(i);
            let data: Vec<S> = match tangent {
                Some(t) => v.data()[off..off + seg.len()]
                    .iter()
                    .zip(&t.data()[off..off + seg.len()])
                    .map(|(&p, &dx)| S::from_parts(p, dx))
                    .collect(),
                None => v.data()[off..off + seg.len()].iter().map(|&p| S::from_f64(p)).collect(),
            };
            ids.push(self.leaf(Buffer::new(seg.rows, seg.cols, data), requires_grad));
        }
        Ok(ParamNodes { layout, ids })
    }

    // ── Arithmetic ───────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = (self.rows(a), self.cols(a));
        let (k2, n) = (self.rows(b), self.cols(b));
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = vec![S::zero(); m * n];
        {
            let av = &self.nodes[a].value.data;
            let bv = &self.nodes[b].value.data;
            for i in 0..m {
                let arow = &av[i * k..(i + 1) * k];
                let orow = &mut out[i * n..(i + 1) * n];
                for (p, &a_ip) in arow.iter().enumerate() {
                    let brow = &bv[p * n..(p + 1) * n];
                    for j in 0..n {
                        orow[j] += a_ip * brow[j];
                    }
                }
            }
        }
        let needs = self.needs(a) || self.needs(b);
        let id = self.push(Op::MatMul(a, b), Buffer::new(m, n, out), needs);
        self.scan_finite(id, "matmul");
        id
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let (m, n) = (self.rows(x), self.cols(x));
        let mut out = vec![S::zero(); m * n];
        {
            let xv = &self.nodes[x].value.data;
            for i in 0..m {
                for j in 0..n {
                    out[j * m + i] = xv[i * n + j];
                }
            }
        }
        let needs = self.needs(x);
        self.push(Op::Transpose(x), Buffer::new(n, m, out), needs)
    }

    fn binary_same_shape(&mut self, a: NodeId, b: NodeId, f: impl Fn(S, S) -> S, op: Op) -> NodeId {
        let (m, n) = (self.rows(a), self.cols(a));
        assert_eq!((m, n), (self.rows(b), self.cols(b)), "shape mismatch in elementwise op");
        let data: Vec<S> = self.nodes[a]
            .value
            .data
            .iter()
            .zip(self.nodes[b].value.data.iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let needs = self.needs(a) || self.needs(b);
        self.push(op, Buffer::new(m, n, data), needs)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_same_shape(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_same_shape(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_same_shape(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn min_elem(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_same_shape(
            a,
            b,
            |x, y| if x.primal() <= y.primal() { x } else { y },
            Op::MinElem(a, b),
        )
    }

    pub fn affine(&mut self, x: NodeId, a: f64, b: f64) -> NodeId {
        let (m, n) = (self.rows(x), self.cols(x));
        let (sa, sb) = (S::from_f64(a), S::from_f64(b));
        let data: Vec<S> = self.nodes[x].value.data.iter().map(|&v| sa * v + sb).collect();
        let needs = self.needs(x);
        self.push(Op::Affine { x, a, b }, Buffer::new(m, n, data), needs)
    }

    pub fn neg(&mut self, x: NodeId) -> NodeId {
        self.affine(x, -1.0, 0.0)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        self.affine(x, c, 0.0)
    }

    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> NodeId {
        let (m, n) = (self.rows(x), self.cols(x));
        assert_eq!((self.rows(row), self.cols(row)), (1, n), "add_row shape mismatch");
        let mut data = Vec::with_capacity(m * n);
        {
            let xv = &self.nodes[x].value.data;
            let rv = &self.nodes[row].value.data;
            for i in 0..m {
                for j in 0..n {
                    data.push(xv[i * n + j] + rv[j]);
                }
            }
        }
        let needs = self.needs(x) || self.needs(row);
        self.push(Op::AddRow { x, row }, Buffer::new(m, n, data), needs)
    }

    // ── Reductions and broadcasts ────────────────────────────────────

    pub fn row_sum(&mut self, x: NodeId) -> NodeId {
        let (m, n) = (self.rows(x), self.cols(x));
        let mut out = vec![S::zero(); m];
        {
            let xv = &self.nodes[x].value.data;
            for i in 0..m {
                let mut acc = S::zero();
                for j in 0..n {
                    acc += xv[i * n + j];
                }
                out[i] = acc;
            }
        }
        let needs = self.needs(x);
        let id = self.push(Op::RowSum(x), Buffer::new(m, 1, out), needs);
        self.scan_finite(id, "row_sum");
        id
    }

    pub fn col_sum(&mut self, x: NodeId) -> NodeId {
        let (m, n) = (self.rows(x), self.cols(x));
        let mut out = vec![S::zero(); n];
        {
            let xv = &self.nodes[x].value.data;
            for i in 0..m {
                for j in 0..n {
                    out[j] += xv[i * n + j];
                }
            }
        }
        let needs = self.needs(x);
        let id = self.push(Op::ColSum(x), Buffer::new(1, n, out), needs);
        self.scan_finite(id, "col_sum");
        id
    }

    pub fn broadcast_row(&mut self, row: NodeId, rows: usize) -> NodeId {
        let n = self.cols(row);
        assert_eq!(self.rows(row), 1, "broadcast_row input must be 1 x n");
        let mut data = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            data.extend_from_slice(&self.nodes[row].value.data);
        }
        let needs = self.needs(row);
        self.push(Op::BroadcastRow { row, rows }, Buffer::new(rows, n, data), needs)
    }

    pub fn broadcast_col(&mut self, col: NodeId, cols: usize) -> NodeId {
        let m = self.rows(col);
        assert_eq!(self.cols(col), 1, "broadcast_col input must be m x 1");
        let mut data = Vec::with_capacity(m * cols);
        {
            let cv = &self.nodes[col].value.data;
            for i in 0..m {
                for _ in 0..cols {
                    data.push(cv[i]);
                }
            }
        }
        let needs = self.needs(col);
        self.push(Op::BroadcastCol { col, cols }, Buffer::new(m, cols, data), needs)
    }

    pub fn broadcast_all(&mut self, s: NodeId, rows: usize, cols: usize) -> NodeId {
        assert!(self.nodes[s].value.is_scalar(), "broadcast_all input must be scalar");
        let v = self.nodes[s].value.data[0];
        let needs = self.needs(s);
        self.push(Op::BroadcastAll { s, rows, cols }, Buffer::new(rows, cols, vec![v; rows * cols]), needs)
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let mut acc = S::zero();
        for &v in &self.nodes[x].value.data {
            acc += v;
        }
        let needs = self.needs(x);
        let id = self.push(Op::SumAll(x), Buffer::scalar(acc), needs);
        self.scan_finite(id, "sum_all");
        id
    }

    pub fn row_max_detached(&mut self, x: NodeId) -> NodeId {
        let (m, n) = (self.rows(x), self.cols(x));
        assert!(n > 0);
        let mut out = Vec::with_capacity(m);
        {
            let xv = &self.nodes[x].value.data;
            for i in 0..m {
                let mut best = xv[i * n];
                for j in 1..n {
                    if xv[i * n + j].primal() > best.primal() {
                        best = xv[i * n + j];
                    }
                }
                // Detached: value only, no tangent and no gradient.
                out.push(S::from_f64(best.primal()));
            }
        }
        self.push(Op::RowMaxDetached(x), Buffer::new(m, 1, out), false)
    }

    // ── Elementwise nonlinearities ───────────────────────────────────

    fn unary(&mut self, x: NodeId, f: impl Fn(S) -> S, op: Op, scan: Option<&'static str>) -> NodeId {
        let (m, n) = (self.rows(x), self.cols(x));
        let data: Vec<S> = self.nodes[x].value.data.iter().map(|&v| f(v)).collect();
        let needs = self.needs(x);
        let id = self.push(op, Buffer::new(m, n, data), needs);
        if let Some(what) = scan {
            self.scan_finite(id, what);
        }
        id
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| v.exp(), Op::Exp(x), Some("exp"))
    }

    pub fn ln(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| v.ln(), Op::Ln(x), Some("ln"))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| v.tanh(), Op::Tanh(x), None)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| v.sigmoid(), Op::Sigmoid(x), None)
    }

    pub fn recip(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| v.recip(), Op::Recip(x), Some("recip"))
    }

    pub fn sqrt(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| v.sqrt(), Op::Sqrt(x), Some("sqrt"))
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        self.unary(
            x,
            |v| {
                let p = v.primal();
                if p < lo {
                    S::from_f64(lo)
                } else if p > hi {
                    S::from_f64(hi)
                } else {
                    v
                }
            },
            Op::Clamp { x, lo, hi },
            None,
        )
    }

    // ── Gather / scatter / slicing ───────────────────────────────────

    pub fn gather_rows(&mut self, table: NodeId, idx: Arc<Vec<usize>>) -> NodeId {
        let (rows, n) = (self.rows(table), self.cols(table));
        let mut data = Vec::with_capacity(idx.len() * n);
        {
            let tv = &self.nodes[table].value.data;
            for &r in idx.iter() {
                assert!(r < rows, "gather_rows index {r} out of {rows}");
                data.extend_from_slice(&tv[r * n..(r + 1) * n]);
            }
        }
        let needs = self.needs(table);
        let m = idx.len();
        self.push(Op::GatherRows { table, idx }, Buffer::new(m, n, data), needs)
    }

    pub fn scatter_add_rows(&mut self, src: NodeId, idx: Arc<Vec<usize>>, rows: usize) -> NodeId {
        let (m, n) = (self.rows(src), self.cols(src));
        assert_eq!(m, idx.len());
        let mut data = vec![S::zero(); rows * n];
        {
            let sv = &self.nodes[src].value.data;
            for (i, &r) in idx.iter().enumerate() {
                for j in 0..n {
                    data[r * n + j] += sv[i * n + j];
                }
            }
        }
        let needs = self.needs(src);
        self.push(Op::ScatterAddRows { src, idx, rows }, Buffer::new(rows, n, data), needs)
    }

    pub fn gather_col(&mut self, x: NodeId, idx: Arc<Vec<usize>>) -> NodeId {
        let (m, n) = (self.rows(x), self.cols(x));
        assert_eq!(m, idx.len(), "gather_col needs one index per row");
        let mut data = Vec::with_capacity(m);
        {
            let xv = &self.nodes[x].value.data;
            for (i, &c) in idx.iter().enumerate() {
                assert!(c < n);
                data.push(xv[i * n + c]);
            }
        }
        let needs = self.needs(x);
        self.push(Op::GatherCol { x, idx }, Buffer::new(m, 1, data), needs)
    }

    pub fn scatter_add_col(&mut self, src: NodeId, idx: Arc<Vec<usize>>, cols: usize) -> NodeId {
        let m = self.rows(src);
        assert_eq!(self.cols(src), 1);
        assert_eq!(m, idx.len());
        let mut data = vec![S::zero(); m * cols];
        {
            let sv = &self.nodes[src].value.data;
            for (i, &c) in idx.iter().enumerate() {
                data[i * cols + c] += sv[i];
            }
        }
        let needs = self.needs(src);
        self.push(Op::ScatterAddCol { src, idx, cols }, Buffer::new(m, cols, data), needs)
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let (m, n) = (self.rows(x), self.cols(x));
        assert!(start + len <= n);
        let mut data = Vec::with_capacity(m * len);
        {
            let xv = &self.nodes[x].value.data;
            for i in 0..m {
                data.extend_from_slice(&xv[i * n + start..i * n + start + len]);
            }
        }
        let needs = self.needs(x);
        self.push(Op::SliceCols { x, start, len }, Buffer::new(m, len, data), needs)
    }

    pub fn pad_cols(&mut self, x: NodeId, start: usize, total: usize) -> NodeId {
        let (m, n) = (self.rows(x), self.cols(x));
        assert!(start + n <= total);
        let mut data = vec![S::zero(); m * total];
        {
            let xv = &self.nodes[x].value.data;
            for i in 0..m {
                for j in 0..n {
                    data[i * total + start + j] = xv[i * n + j];
                }
            }
        }
        let needs = self.needs(x);
        self.push(Op::PadCols { x, start, total }, Buffer::new(m, total, data), needs)
    }

    // ── Composites ───────────────────────────────────────────────────

    /// Row-wise softmax with a detached max shift.
    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let m = self.row_max_detached(x);
        let mb = self.broadcast_col(m, self.cols(x));
        let z = self.sub(x, mb);
        let e = self.exp(z);
        let s = self.row_sum(e);
        let r = self.recip(s);
        let rb = self.broadcast_col(r, self.cols(x));
        self.mul(e, rb)
    }

    /// Row-wise log-softmax with a detached max shift (exact derivative).
    pub fn log_softmax_rows(&mut self, x: NodeId) -> NodeId {
        let m = self.row_max_detached(x);
        let mb = self.broadcast_col(m, self.cols(x));
        let z = self.sub(x, mb);
        let e = self.exp(z);
        let s = self.row_sum(e);
        let ls = self.ln(s);
        let lsb = self.broadcast_col(ls, self.cols(x));
        self.sub(z, lsb)
    }

    /// Dot product of two same-shape nodes, as a scalar node.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let p = self.mul(a, b);
        self.sum_all(p)
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse pass from a scalar root. Adjoints are emitted as new nodes, so
    /// the result of one backward pass can be differentiated again.
    pub fn backward(&mut self, root: NodeId) -> Result<Adjoints> {
        self.check_fault()?;
        assert!(self.nodes[root].value.is_scalar(), "backward root must be scalar");
        let mut adj: Vec<Option<NodeId>> = vec![None; root + 1];
        if !self.needs(root) {
            return Ok(Adjoints { adj });
        }
        let one = self.leaf(Buffer::scalar(S::one()), false);
        adj[root] = Some(one);

        for i in (0..=root).rev() {
            if !self.needs(i) {
                continue;
            }
            let d = match adj[i] {
                Some(d) => d,
                None => continue,
            };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    if self.needs(a) {
                        let bt = self.transpose(b);
                        let da = self.matmul(d, bt);
                        accumulate(self, &mut adj, a, da);
                    }
                    if self.needs(b) {
                        let at = self.transpose(a);
                        let db = self.matmul(at, d);
                        accumulate(self, &mut adj, b, db);
                    }
                }
                Op::Transpose(x) => {
                    if self.needs(x) {
                        let dx = self.transpose(d);
                        accumulate(self, &mut adj, x, dx);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(a) {
                        accumulate(self, &mut adj, a, d);
                    }
                    if self.needs(b) {
                        accumulate(self, &mut adj, b, d);
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(a) {
                        accumulate(self, &mut adj, a, d);
                    }
                    if self.needs(b) {
                        let nd = self.neg(d);
                        accumulate(self, &mut adj, b, nd);
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(a) {
                        let da = self.mul(d, b);
                        accumulate(self, &mut adj, a, da);
                    }
                    if self.needs(b) {
                        let db = self.mul(d, a);
                        accumulate(self, &mut adj, b, db);
                    }
                }
                Op::Affine { x, a, .. } => {
                    if self.needs(x) {
                        let dx = self.scale(d, a);
                        accumulate(self, &mut adj, x, dx);
                    }
                }
                Op::AddRow { x, row } => {
                    if self.needs(x) {
                        accumulate(self, &mut adj, x, d);
                    }
                    if self.needs(row) {
                        let dr = self.col_sum(d);
                        accumulate(self, &mut adj, row, dr);
                    }
                }
                Op::RowSum(x) => {
                    if self.needs(x) {
                        let dx = self.broadcast_col(d, self.cols(x));
                        accumulate(self, &mut adj, x, dx);
                    }
                }
                Op::ColSum(x) => {
                    if self.needs(x) {
                        let dx = self.broadcast_row(d, self.rows(x));
                        accumulate(self, &mut adj, x, dx);
                    }
                }
                Op::BroadcastRow { row, .. } => {
                    if self.needs(row) {
                        let dr = self.col_sum(d);
                        accumulate(self, &mut adj, row, dr);
                    }
                }
                Op::BroadcastCol { col, .. } => {
                    if self.needs(col) {
                        let dc = self.row_sum(d);
                        accumulate(self, &mut adj, col, dc);
                    }
                }
                Op::BroadcastAll { s, .. } => {
                    if self.needs(s) {
                        let ds = self.sum_all(d);
                        accumulate(self, &mut adj, s, ds);
                    }
                }
                Op::SumAll(x) => {
                    if self.needs(x) {
                        let dx = self.broadcast_all(d, self.rows(x), self.cols(x));
                        accumulate(self, &mut adj, x, dx);
                    }
                }
                Op::RowMaxDetached(_) => {}
                Op::Exp(x) => {
                    if self.needs(x) {
                        let dx = self.mul(d, i);
                        accumulate(self, &mut adj, x, dx);
                    }
                }
                Op::Ln(x) => {
                    if self.needs(x) {
                        let r = self.recip(x);
                        let dx = self.mul(d, r);
                        accumulate(self, &mut adj, x, dx);
                    }
                }
                Op::Tanh(x) => {
                    if self.needs(x) {
                        let y2 = self.mul(i, i);
                        let g = self.affine(y2, -1.0, 1.0);
                        let dx = self.mul(d, g);
                        accumulate(self, &mut adj, x, dx);
                    }
                }
                Op::Sigmoid(x) => {
                    if self.needs(x) {
                        let om = self.affine(i, -1.0, 1.0);
                        let g = self.mul(i, om);
                        let dx = self.mul(d, g);
                        accumulate(self, &mut adj, x, dx);
                    }
                }
                Op::Recip(x) => {
                    if self.needs(x) {
                        let y2 = self.mul(i, i);
                        let dy = self.mul(d, y2);
                        let dx = self.neg(dy);
                        accumulate(self, &mut adj, x, dx);
                    }
                }
                Op::Sqrt(x) => {
                    if self.needs(x) {
                        let r = self.recip(i);
                        let h = self.mul(d, r);
                        let dx = self.scale(h, 0.5);
                        accumulate(self, &mut adj, x, dx);
                    }
                }
                Op::GatherRows { table, idx } => {
                    if self.needs(table) {
                        let rows = self.rows(table);
                        let dt = self.scatter_add_rows(d, idx, rows);
                        accumulate(self, &mut adj, table, dt);
                    }
                }
                Op::ScatterAddRows { src, idx, .. } => {
                    if self.needs(src) {
                        let ds = self.gather_rows(d, idx);
                        accumulate(self, &mut adj, src, ds);
                    }
                }
                Op::GatherCol { x, idx } => {
                    if self.needs(x) {
                        let cols = self.cols(x);
                        let dx = self.scatter_add_col(d, idx, cols);
                        accumulate(self, &mut adj, x, dx);
                    }
                }
                Op::ScatterAddCol { src, idx, .. } => {
                    if self.needs(src) {
                        let ds = self.gather_col(d, idx);
                        accumulate(self, &mut adj, src, ds);
                    }
                }
                Op::SliceCols { x, start, .. } => {
                    if self.needs(x) {
                        let total = self.cols(x);
                        let dx = self.pad_cols(d, start, total);
                        accumulate(self, &mut adj, x, dx);
                    }
                }
                Op::PadCols { x, start, .. } => {
                    if self.needs(x) {
                        let len = self.cols(x);
                        let dx = self.slice_cols(d, start, len);
                        accumulate(self, &mut adj, x, dx);
                    }
                }
                Op::Clamp { x, lo, hi } => {
                    if self.needs(x) {
                        // Branch mask frozen at current values; zero outside the band.
                        let mask: Vec<f64> = self.nodes[x]
                            .value
                            .data
                            .iter()
                            .map(|v| {
                                let p = v.primal();
                                if p >= lo && p <= hi {
                                    1.0
                                } else {
                                    0.0
                                }
                            })
                            .collect();
                        let mnode = self.constant(self.rows(x), self.cols(x), &mask);
                        let dx = self.mul(d, mnode);
                        accumulate(self, &mut adj, x, dx);
                    }
                }
                Op::MinElem(a, b) => {
                    let pick_a: Vec<f64> = self.nodes[a]
                        .value
                        .data
                        .iter()
                        .zip(self.nodes[b].value.data.iter())
                        .map(|(x, y)| if x.primal() <= y.primal() { 1.0 } else { 0.0 })
                        .collect();
                    if self.needs(a) {
                        let mnode = self.constant(self.rows(a), self.cols(a), &pick_a);
                        let da = self.mul(d, mnode);
                        accumulate(self, &mut adj, a, da);
                    }
                    if self.needs(b) {
                        let inv: Vec<f64> = pick_a.iter().map(|&v| 1.0 - v).collect();
                        let mnode = self.constant(self.rows(b), self.cols(b), &inv);
                        let db = self.mul(d, mnode);
                        accumulate(self, &mut adj, b, db);
                    }
                }
            }
        }
        self.check_fault()?;
        Ok(Adjoints { adj })
    }
}

fn accumulate<S: Scalar>(
    tape: &mut Tape<S>,
    adj: &mut [Option<NodeId>],
    target: NodeId,
    contribution: NodeId,
) {
    adj[target] = Some(match adj[target] {
        Some(existing) => tape.add(existing, contribution),
        None => contribution,
    });
}
