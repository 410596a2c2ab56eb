use super::{DiffError, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Ln(Var),
    Square(Var),
    ClampMin(Var, f64),
    Sum(Var),
    RowSum(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    StackRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    LogSoftmaxRows(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softplus(..) => "softplus",
            Op::Exp(..) => "exp",
            Op::Ln(..) => "ln",
            Op::Square(..) => "square",
            Op::ClampMin(..) => "clamp_min",
            Op::Sum(..) => "sum",
            Op::RowSum(..) => "row_sum",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceCols(..) => "slice_cols",
            Op::StackRows(..) => "stack_rows",
            Op::GatherRows(..) => "gather_rows",
            Op::LogSoftmaxRows(..) => "log_softmax_rows",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Every node's inputs precede it, so a single reverse sweep propagates
/// adjoints. Values are checked for finiteness as they are produced.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints of every node reachable from a scalar loss.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v` or zeros of the given length when `v` was unreachable.
    pub fn wrt_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.wrt(v).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
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

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<(), DiffError> {
    if a.shape() != b.shape() {
        return Err(DiffError::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded at or after position `len`. Handles to the
    /// dropped nodes must not be used again.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var, DiffError> {
        let id = self.nodes.len();
        if !value.is_finite() {
            return Err(DiffError::NonFinite { node: id, op: op.name() });
        }
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(id))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a constant. No gradient flows into it.
    pub fn constant(&mut self, t: Tensor) -> Result<Var, DiffError> {
        self.push(t, Op::Leaf, false)
    }

    /// Records a differentiable leaf.
    pub fn param(&mut self, t: Tensor) -> Result<Var, DiffError> {
        self.push(t, Op::Leaf, true)
    }

    /// Copies the value of `v` into a new constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Result<Var, DiffError> {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = (ta.rows(), ta.cols());
        let (k2, n) = (tb.rows(), tb.cols());
        if k != k2 || tb.shape().len() != 2 {
            return Err(DiffError::Shape(format!(
                "matmul: {:?} x {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let (ad, bd) = (ta.data(), tb.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = ad[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::matrix(m, n, out), Op::MatMul(a, b), rg)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var, DiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta, tb, op.name())?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(t, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    fn row_broadcast(
        &mut self,
        a: Var,
        row: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var, DiffError> {
        let (ta, tr) = (self.value(a), self.value(row));
        let n = ta.cols();
        if tr.len() != n {
            return Err(DiffError::Shape(format!(
                "{}: {:?} with row {:?}",
                op.name(),
                ta.shape(),
                tr.shape()
            )));
        }
        let rd = tr.data();
        let data = ta
            .data()
            .chunks(n)
            .flat_map(|r| r.iter().zip(rd).map(|(&x, &y)| f(x, y)))
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(row);
        self.push(t, op, rg)
    }

    /// `a[i, j] + row[j]` for every row `i`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, DiffError> {
        self.row_broadcast(a, row, Op::AddRow(a, row), |x, y| x + y)
    }

    /// `a[i, j] * row[j]` for every row `i`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var, DiffError> {
        self.row_broadcast(a, row, Op::MulRow(a, row), |x, y| x * y)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var, DiffError> {
        let t = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(t, op, rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var, DiffError> {
        self.unary(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var, DiffError> {
        self.unary(a, Op::AddScalar(a), |x| x + s)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var, DiffError> {
        self.scale(a, -1.0)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, DiffError> {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, DiffError> {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var, DiffError> {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, DiffError> {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn ln(&mut self, a: Var) -> Result<Var, DiffError> {
        self.unary(a, Op::Ln(a), f64::ln)
    }

    pub fn square(&mut self, a: Var) -> Result<Var, DiffError> {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// `max(a, floor)` elementwise; the gradient is zero where the floor binds.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Result<Var, DiffError> {
        self.unary(a, Op::ClampMin(a, floor), |x| x.max(floor))
    }

    /// Sum of all entries as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var, DiffError> {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Per-row sums as a `[rows, 1]` matrix.
    pub fn row_sum(&mut self, a: Var) -> Result<Var, DiffError> {
        let ta = self.value(a);
        let (m, n) = (ta.rows(), ta.cols());
        let data = ta.data().chunks(n).map(|r| r.iter().sum()).collect();
        let rg = self.rg(a);
        self.push(Tensor::matrix(m, 1, data), Op::RowSum(a), rg)
    }

    /// Horizontal concatenation of matrices sharing a row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        let first = parts
            .first()
            .ok_or_else(|| DiffError::Shape("concat_cols of nothing".into()))?;
        let m = self.value(*first).rows();
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != m {
                return Err(DiffError::Shape(format!(
                    "concat_cols: row count {} vs {m}",
                    t.rows()
                )));
            }
            total += t.cols();
        }
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::matrix(m, total, out), Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, DiffError> {
        let ta = self.value(a);
        let (m, n) = (ta.rows(), ta.cols());
        if start >= end || end > n {
            return Err(DiffError::Shape(format!("slice_cols {start}..{end} of {n}")));
        }
        let data = ta.data().chunks(n).flat_map(|r| r[start..end].iter().copied()).collect();
        let rg = self.rg(a);
        self.push(Tensor::matrix(m, end - start, data), Op::SliceCols(a, start), rg)
    }

    /// Vertical concatenation of matrices sharing a column count.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        let first = parts
            .first()
            .ok_or_else(|| DiffError::Shape("stack_rows of nothing".into()))?;
        let n = self.value(*first).cols();
        let mut out = Vec::new();
        let mut m = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != n {
                return Err(DiffError::Shape(format!("stack_rows: cols {} vs {n}", t.cols())));
            }
            m += t.rows();
            out.extend_from_slice(t.data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::matrix(m, n, out), Op::StackRows(parts.to_vec()), rg)
    }

    /// Selects rows by index (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var, DiffError> {
        let ta = self.value(a);
        let (m, n) = (ta.rows(), ta.cols());
        if idx.is_empty() {
            return Err(DiffError::Shape("gather_rows with no indices".into()));
        }
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= m {
                return Err(DiffError::Shape(format!("gather_rows index {i} >= {m}")));
            }
            out.extend_from_slice(ta.row(i));
        }
        let rg = self.rg(a);
        self.push(Tensor::matrix(idx.len(), n, out), Op::GatherRows(a, idx.to_vec()), rg)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var, DiffError> {
        let ta = self.value(a);
        let (m, n) = (ta.rows(), ta.cols());
        let mut out = Vec::with_capacity(m * n);
        for r in ta.data().chunks(n) {
            let mx = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + r.iter().map(|&v| (v - mx).exp()).sum::<f64>().ln();
            out.extend(r.iter().map(|&v| v - lse));
        }
        let rg = self.rg(a);
        self.push(Tensor::matrix(m, n, out), Op::LogSoftmaxRows(a), rg)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, DiffError> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(DiffError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            if !g.iter().all(|v| v.is_finite()) {
                return Err(DiffError::NonFinite { node: id, op: "backward" });
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.rg(v) {
            return;
        }
        let len = self.value(v).len();
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
        f(slot);
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                let (ad, bd) = (ta.data(), tb.data());
                // dA = G B^T
                self.accumulate(grads, *a, |ga| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            let s: f64 = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                            ga[i * k + p] += s;
                        }
                    }
                });
                // dB = A^T G
                self.accumulate(grads, *b, |gb| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = ad[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for (o, &gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += aip * gv;
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(o, v)| *o += v));
                self.accumulate(grads, *b, |gb| gb.iter_mut().zip(g).for_each(|(o, v)| *o += v));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(o, v)| *o += v));
                self.accumulate(grads, *b, |gb| gb.iter_mut().zip(g).for_each(|(o, v)| *o -= v));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |ga| {
                    for ((o, gv), bv) in ga.iter_mut().zip(g).zip(bd) {
                        *o += gv * bv;
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for ((o, gv), av) in gb.iter_mut().zip(g).zip(ad) {
                        *o += gv * av;
                    }
                });
            }
            Op::Div(a, b) => {
                let bd = self.value(*b).data();
                self.accumulate(grads, *a, |ga| {
                    for ((o, gv), bv) in ga.iter_mut().zip(g).zip(bd) {
                        *o += gv / bv;
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for (((o, gv), bv), ov) in gb.iter_mut().zip(g).zip(bd).zip(out) {
                        *o -= gv * ov / bv;
                    }
                });
            }
            Op::AddRow(a, row) => {
                let n = self.value(*a).cols();
                self.accumulate(grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(o, v)| *o += v));
                self.accumulate(grads, *row, |gr| {
                    for chunk in g.chunks(n) {
                        gr.iter_mut().zip(chunk).for_each(|(o, v)| *o += v);
                    }
                });
            }
            Op::MulRow(a, row) => {
                let ta = self.value(*a);
                let n = ta.cols();
                let (ad, rd) = (ta.data(), self.value(*row).data());
                self.accumulate(grads, *a, |ga| {
                    for (gi, (o, gv)) in ga.iter_mut().zip(g).enumerate() {
                        *o += gv * rd[gi % n];
                    }
                });
                self.accumulate(grads, *row, |gr| {
                    for (gi, (gv, av)) in g.iter().zip(ad).enumerate() {
                        gr[gi % n] += gv * av;
                    }
                });
            }
            Op::Scale(a, s) => {
                self.accumulate(grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(o, v)| *o += v * s));
            }
            Op::AddScalar(a) => {
                self.accumulate(grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(o, v)| *o += v));
            }
            Op::Tanh(a) => {
                self.accumulate(grads, *a, |ga| {
                    for ((o, gv), y) in ga.iter_mut().zip(g).zip(out) {
                        *o += gv * (1.0 - y * y);
                    }
                });
            }
            Op::Sigmoid(a) => {
                self.accumulate(grads, *a, |ga| {
                    for ((o, gv), y) in ga.iter_mut().zip(g).zip(out) {
                        *o += gv * y * (1.0 - y);
                    }
                });
            }
            Op::Softplus(a) => {
                let ad = self.value(*a).data();
                self.accumulate(grads, *a, |ga| {
                    for ((o, gv), x) in ga.iter_mut().zip(g).zip(ad) {
                        *o += gv * sigmoid(*x);
                    }
                });
            }
            Op::Exp(a) => {
                self.accumulate(grads, *a, |ga| {
                    for ((o, gv), y) in ga.iter_mut().zip(g).zip(out) {
                        *o += gv * y;
                    }
                });
            }
            Op::Ln(a) => {
                let ad = self.value(*a).data();
                self.accumulate(grads, *a, |ga| {
                    for ((o, gv), x) in ga.iter_mut().zip(g).zip(ad) {
                        *o += gv / x;
                    }
                });
            }
            Op::Square(a) => {
                let ad = self.value(*a).data();
                self.accumulate(grads, *a, |ga| {
                    for ((o, gv), x) in ga.iter_mut().zip(g).zip(ad) {
                        *o += 2.0 * gv * x;
                    }
                });
            }
            Op::ClampMin(a, floor) => {
                let ad = self.value(*a).data();
                self.accumulate(grads, *a, |ga| {
                    for ((o, gv), x) in ga.iter_mut().zip(g).zip(ad) {
                        if *x > *floor {
                            *o += gv;
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let gv = g[0];
                self.accumulate(grads, *a, |ga| ga.iter_mut().for_each(|o| *o += gv));
            }
            Op::RowSum(a) => {
                let n = self.value(*a).cols();
                self.accumulate(grads, *a, |ga| {
                    for (r, chunk) in ga.chunks_mut(n).enumerate() {
                        chunk.iter_mut().for_each(|o| *o += g[r]);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    self.accumulate(grads, p, |gp| {
                        for (r, chunk) in gp.chunks_mut(w).enumerate() {
                            let src = &g[r * total + off..r * total + off + w];
                            chunk.iter_mut().zip(src).for_each(|(o, v)| *o += v);
                        }
                    });
                    off += w;
                }
            }
            Op::SliceCols(a, start) => {
                let n = self.value(*a).cols();
                let w = node.value.cols();
                self.accumulate(grads, *a, |ga| {
                    for (r, gr) in g.chunks(w).enumerate() {
                        let dst = &mut ga[r * n + start..r * n + start + w];
                        dst.iter_mut().zip(gr).for_each(|(o, v)| *o += v);
                    }
                });
            }
            Op::StackRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.accumulate(grads, p, |gp| {
                        gp.iter_mut().zip(&g[off..off + len]).for_each(|(o, v)| *o += v);
                    });
                    off += len;
                }
            }
            Op::GatherRows(a, idx) => {
                let n = self.value(*a).cols();
                self.accumulate(grads, *a, |ga| {
                    for (r, &i) in idx.iter().enumerate() {
                        let dst = &mut ga[i * n..(i + 1) * n];
                        dst.iter_mut().zip(&g[r * n..(r + 1) * n]).for_each(|(o, v)| *o += v);
                    }
                });
            }
            Op::LogSoftmaxRows(a) => {
                let n = node.value.cols();
                self.accumulate(grads, *a, |ga| {
                    for ((gar, gr), yr) in ga.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n)) {
                        let gs: f64 = gr.iter().sum();
                        for ((o, gv), y) in gar.iter_mut().zip(gr).zip(yr) {
                            *o += gv - y.exp() * gs;
                        }
                    }
                });
            }
        }
    }
}
