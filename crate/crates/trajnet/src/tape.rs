//! Taped reverse-mode differentiation over dense tensors.
//!
//! Define-by-run: every forward pass records its operations on a fresh
//! [`Tape`]; `backward` replays the record reversed exactly once. Creation
//! order is the topological order. Gradients accumulate with `+=`, so a
//! second `backward` without `zero_grads` doubles them.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a tape. Only meaningful for the tape that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryKind {
    Tanh,
    Sigmoid,
    Relu,
    Exp,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// [m×k]·[k×n] → [m×n]
    Matmul { a: NodeId, b: NodeId },
    /// [p×q]·[q] → [p]
    MatVec { w: NodeId, x: NodeId },
    /// [n]·[n] → [1]
    Dot { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    /// Elementwise product.
    Mul { a: NodeId, b: NodeId },
    /// Constant scale.
    Scale { x: NodeId, c: f64 },
    /// Product with a scalar node, broadcast over x.
    MulScalar { x: NodeId, s: NodeId },
    Unary { x: NodeId, kind: UnaryKind },
    /// Stable softmax over a vector.
    Softmax { x: NodeId },
    /// Concatenation along `axis`; shapes agree elsewhere.
    Concat { a: NodeId, b: NodeId, axis: usize },
    /// Stack T vectors of length m into a [T×m] matrix.
    ConcatRows { rows: Vec<NodeId> },
    /// Contiguous slice of the flat data, yielding a vector.
    Slice { x: NodeId, start: usize, len: usize },
    /// Total sum → scalar.
    Sum { x: NodeId },
    /// Non-overlapping max over temporal pairs of a [T×C] matrix.
    /// `argmax[j*C+c]` is the winning row of output element (j, c);
    /// ties go to the earlier row.
    MaxPoolTime { x: NodeId, argmax: Vec<usize> },
    /// Scatter-add vectors into cells of a flattened grid:
    /// out[cells[i]*d .. +d] += sources[i]. Cell assignment carries no
    /// gradient; the sources do.
    GridScatter {
        sources: Vec<NodeId>,
        cells: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    grad: Tensor,
    op: Op,
}

/// Ordered record of nodes; creation order is a valid topological order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].grad
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad.fill(0.0);
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let grad = Tensor::zeros(value.shape().to_vec());
        self.nodes.push(Node { value, grad, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, x: f64) -> NodeId {
        self.leaf(Tensor::scalar(x))
    }

    pub fn zeros(&mut self, shape: Vec<usize>) -> NodeId {
        self.leaf(Tensor::zeros(shape))
    }

    // ---- arithmetic ----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::Matmul { a, b }))
    }

    pub fn matvec(&mut self, w: NodeId, x: NodeId) -> Result<NodeId> {
        let (sw, sx) = (self.value(w).shape(), self.value(x).shape());
        if sw.len() != 2 || sx.len() != 1 || sw[1] != sx[0] {
            return Err(Error::shape("matvec", sw, sx));
        }
        let (p, q) = (sw[0], sw[1]);
        let wd = self.value(w).data();
        let xd = self.value(x).data();
        let mut out = vec![0.0; p];
        for i in 0..p {
            let row = &wd[i * q..(i + 1) * q];
            out[i] = row.iter().zip(xd).map(|(a, b)| a * b).sum();
        }
        Ok(self.push(Tensor::vector(out), Op::MatVec { w, x }))
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 1 || sa != sb {
            return Err(Error::shape("dot", sa, sb));
        }
        let v = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .sum();
        Ok(self.push(Tensor::scalar(v), Op::Dot { a, b }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise("add", a, b, |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise("sub", a, b, |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise("mul", a, b, |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: impl Fn(NodeId, NodeId) -> Op,
    ) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(name, sa, sb));
        }
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(sa.to_vec(), data)?;
        Ok(self.push(value, op(a, b)))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let data: Vec<f64> = self.value(x).data().iter().map(|v| v * c).collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), data).unwrap();
        self.push(value, Op::Scale { x, c })
    }

    pub fn mul_scalar(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        if !self.value(s).is_scalar() {
            return Err(Error::shape("mul_scalar", self.value(x).shape(), self.value(s).shape()));
        }
        let sv = self.value(s).data()[0];
        let data: Vec<f64> = self.value(x).data().iter().map(|v| v * sv).collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), data)?;
        Ok(self.push(value, Op::MulScalar { x, s }))
    }

    pub fn unary(&mut self, x: NodeId, kind: UnaryKind) -> NodeId {
        let data: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .map(|&v| match kind {
                UnaryKind::Tanh => v.tanh(),
                UnaryKind::Sigmoid => sigmoid(v),
                UnaryKind::Relu => v.max(0.0),
                UnaryKind::Exp => v.exp(),
            })
            .collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), data).unwrap();
        self.push(value, Op::Unary { x, kind })
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.unary(x, UnaryKind::Tanh)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(x, UnaryKind::Sigmoid)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, UnaryKind::Relu)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.unary(x, UnaryKind::Exp)
    }

    /// Max-subtracted softmax over a vector.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let sx = self.value(x).shape();
        if sx.len() != 1 {
            return Err(Error::shape("softmax", sx, &[]));
        }
        let d = self.value(x).data();
        let max = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = d.iter().map(|&v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let out: Vec<f64> = exps.iter().map(|e| e / sum).collect();
        Ok(self.push(Tensor::vector(out), Op::Softmax { x }))
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId, axis: usize) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if sa.len() != sb.len()
            || axis >= sa.len()
            || sa.iter()
                .zip(&sb)
                .enumerate()
                .any(|(i, (x, y))| i != axis && x != y)
        {
            return Err(Error::shape("concat", &sa, &sb));
        }
        let inner: usize = sa[axis + 1..].iter().product();
        let outer: usize = sa[..axis].iter().product();
        let a_block = sa[axis] * inner;
        let b_block = sb[axis] * inner;
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut data = Vec::with_capacity(ad.len() + bd.len());
        for o in 0..outer {
            data.extend_from_slice(&ad[o * a_block..(o + 1) * a_block]);
            data.extend_from_slice(&bd[o * b_block..(o + 1) * b_block]);
        }
        let mut shape = sa.clone();
        shape[axis] += sb[axis];
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Concat { a, b, axis }))
    }

    /// Stack equal-length vectors into a [T×m] matrix.
    pub fn concat_rows(&mut self, rows: &[NodeId]) -> Result<NodeId> {
        if rows.is_empty() {
            return Err(Error::Contract("concat_rows: no rows".into()));
        }
        let m = self.value(rows[0]).len();
        let mut data = Vec::with_capacity(rows.len() * m);
        for &r in rows {
            let v = self.value(r);
            if v.rank() != 1 || v.len() != m {
                return Err(Error::shape("concat_rows", &[m], v.shape()));
            }
            data.extend_from_slice(v.data());
        }
        let value = Tensor::new(vec![rows.len(), m], data)?;
        Ok(self.push(value, Op::ConcatRows { rows: rows.to_vec() }))
    }

    /// Contiguous slice of the flat storage, as a vector.
    pub fn slice(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let total = self.value(x).len();
        if len == 0 || start + len > total {
            return Err(Error::Contract(format!(
                "slice [{start}, {start}+{len}) out of bounds for {total} elements"
            )));
        }
        let data = self.value(x).data()[start..start + len].to_vec();
        Ok(self.push(Tensor::vector(data), Op::Slice { x, start, len }))
    }

    /// Row `r` of a matrix node, as a vector.
    pub fn row(&mut self, x: NodeId, r: usize) -> Result<NodeId> {
        let shape = self.value(x).shape();
        if shape.len() != 2 {
            return Err(Error::shape("row", shape, &[]));
        }
        let cols = shape[1];
        self.slice(x, r * cols, cols)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(v), Op::Sum { x })
    }

    /// Non-overlapping temporal max pooling (size 2, stride 2) over [T×C].
    /// Ties route the gradient to the earlier row.
    pub fn maxpool_time(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.value(x).shape();
        if shape.len() != 2 || shape[0] < 2 {
            return Err(Error::shape("maxpool_time", shape, &[2, 0]));
        }
        let (t, c) = (shape[0], shape[1]);
        let t2 = t / 2;
        let d = self.value(x).data();
        let mut out = vec![0.0; t2 * c];
        let mut argmax = vec![0usize; t2 * c];
        for j in 0..t2 {
            for ch in 0..c {
                let (r0, r1) = (2 * j, 2 * j + 1);
                let (v0, v1) = (d[r0 * c + ch], d[r1 * c + ch]);
                if v1 > v0 {
                    out[j * c + ch] = v1;
                    argmax[j * c + ch] = r1;
                } else {
                    out[j * c + ch] = v0;
                    argmax[j * c + ch] = r0;
                }
            }
        }
        let value = Tensor::new(vec![t2, c], out)?;
        Ok(self.push(value, Op::MaxPoolTime { x, argmax }))
    }

    /// Scatter-add equal-length vectors into grid cells; output is the
    /// flattened grid of `num_cells` cells, each `d` wide.
    pub fn grid_scatter(
        &mut self,
        sources: &[NodeId],
        cells: &[usize],
        num_cells: usize,
        d: usize,
    ) -> Result<NodeId> {
        if sources.len() != cells.len() {
            return Err(Error::Contract(format!(
                "grid_scatter: {} sources vs {} cells",
                sources.len(),
                cells.len()
            )));
        }
        let mut out = vec![0.0; num_cells * d];
        for (&src, &cell) in sources.iter().zip(cells) {
            let v = self.value(src);
            if v.rank() != 1 || v.len() != d {
                return Err(Error::shape("grid_scatter", &[d], v.shape()));
            }
            if cell >= num_cells {
                return Err(Error::Contract(format!(
                    "grid_scatter: cell {cell} out of {num_cells}"
                )));
            }
            for (o, s) in out[cell * d..(cell + 1) * d].iter_mut().zip(v.data()) {
                *o += s;
            }
        }
        Ok(self.push(
            Tensor::vector(out),
            Op::GridScatter {
                sources: sources.to_vec(),
                cells: cells.to_vec(),
            },
        ))
    }

    // ---- backward ----

    /// Reverse sweep from a scalar root. Adds d(root)/d(node) into every
    /// reachable node's grad; unreachable grads are untouched. Each call
    /// contributes one full gradient, so two calls without `zero_grads`
    /// double the stored values.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if !self.nodes[root.0].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        let mut adj: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|n| vec![0.0; n.value.len()])
            .collect();
        adj[root.0][0] = 1.0;
        for i in (0..=root.0).rev() {
            let g = adj[i].clone();
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            self.propagate(i, &g, &mut adj);
        }
        for (node, a) in self.nodes.iter_mut().zip(&adj) {
            for (gv, av) in node.grad.data_mut().iter_mut().zip(a) {
                *gv += av;
            }
        }
        Ok(())
    }

    fn propagate(&self, node: usize, g: &[f64], adj: &mut [Vec<f64>]) {
        fn acc(adj: &mut [Vec<f64>], id: NodeId, contribution: &[f64]) {
            let a = &mut adj[id.index()];
            debug_assert_eq!(a.len(), contribution.len());
            for (x, y) in a.iter_mut().zip(contribution) {
                *x += y;
            }
        }
        match self.nodes[node].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let sa = self.value(a).shape().to_vec();
                let sb = self.value(b).shape().to_vec();
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let bt = transpose_raw(self.value(b).data(), k, n);
                let da = matmul_raw(g, &bt, m, n, k);
                let at = transpose_raw(self.value(a).data(), m, k);
                let db = matmul_raw(&at, g, k, m, n);
                acc(adj, a, &da);
                acc(adj, b, &db);
            }
            Op::MatVec { w, x } => {
                let (p, q) = {
                    let s = self.value(w).shape();
                    (s[0], s[1])
                };
                let xd = self.value(x).data().to_vec();
                let wd = self.value(w).data().to_vec();
                let gd = g;
                let mut dw = vec![0.0; p * q];
                for i in 0..p {
                    for j in 0..q {
                        dw[i * q + j] = gd[i] * xd[j];
                    }
                }
                let mut dx = vec![0.0; q];
                for i in 0..p {
                    for j in 0..q {
                        dx[j] += wd[i * q + j] * gd[i];
                    }
                }
                acc(adj, w, &dw);
                acc(adj, x, &dx);
            }
            Op::Dot { a, b } => {
                let g0 = g[0];
                let da: Vec<f64> = self.value(b).data().iter().map(|v| g0 * v).collect();
                let db: Vec<f64> = self.value(a).data().iter().map(|v| g0 * v).collect();
                acc(adj, a, &da);
                acc(adj, b, &db);
            }
            Op::Add { a, b } => {
                acc(adj, a, g);
                acc(adj, b, g);
            }
            Op::Sub { a, b } => {
                acc(adj, a, g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                acc(adj, b, &neg);
            }
            Op::Mul { a, b } => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.value(b).data())
                    .map(|(x, y)| x * y)
                    .collect();
                let db: Vec<f64> = g
                    .iter()
                    .zip(self.value(a).data())
                    .map(|(x, y)| x * y)
                    .collect();
                acc(adj, a, &da);
                acc(adj, b, &db);
            }
            Op::Scale { x, c } => {
                let dx: Vec<f64> = g.iter().map(|v| v * c).collect();
                acc(adj, x, &dx);
            }
            Op::MulScalar { x, s } => {
                let sv = self.value(s).data()[0];
                let dx: Vec<f64> = g.iter().map(|v| v * sv).collect();
                let ds: f64 = g
                    .iter()
                    .zip(self.value(x).data())
                    .map(|(gv, xv)| gv * xv)
                    .sum();
                acc(adj, x, &dx);
                acc(adj, s, &[ds]);
            }
            Op::Unary { x, kind } => {
                let xd = self.value(x).data();
                let dx: Vec<f64> = g
                    .iter()
                    .zip(xd)
                    .map(|(&gv, &xv)| {
                        gv * match kind {
                            UnaryKind::Tanh => {
                                let t = xv.tanh();
                                1.0 - t * t
                            }
                            UnaryKind::Sigmoid => {
                                let s = sigmoid(xv);
                                s * (1.0 - s)
                            }
                            UnaryKind::Relu => {
                                if xv > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            UnaryKind::Exp => xv.exp(),
                        }
                    })
                    .collect();
                acc(adj, x, &dx);
            }
            Op::Softmax { x } => {
                // Recompute y from x; dx_i = y_i (g_i - sum_j g_j y_j).
                let xd = self.value(x).data();
                let max = xd.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = xd.iter().map(|&v| (v - max).exp()).collect();
                let sum: f64 = exps.iter().sum();
                let y: Vec<f64> = exps.iter().map(|e| e / sum).collect();
                let dot: f64 = g.iter().zip(&y).map(|(a, b)| a * b).sum();
                let dx: Vec<f64> = y
                    .iter()
                    .zip(g)
                    .map(|(&yi, &gi)| yi * (gi - dot))
                    .collect();
                acc(adj, x, &dx);
            }
            Op::Concat { a, b, axis } => {
                let sa = self.value(a).shape().to_vec();
                let sb = self.value(b).shape().to_vec();
                let inner: usize = sa[axis + 1..].iter().product();
                let outer: usize = sa[..axis].iter().product();
                let a_block = sa[axis] * inner;
                let b_block = sb[axis] * inner;
                let gd = g;
                let mut da = vec![0.0; outer * a_block];
                let mut db = vec![0.0; outer * b_block];
                let stride = a_block + b_block;
                for o in 0..outer {
                    da[o * a_block..(o + 1) * a_block]
                        .copy_from_slice(&gd[o * stride..o * stride + a_block]);
                    db[o * b_block..(o + 1) * b_block]
                        .copy_from_slice(&gd[o * stride + a_block..(o + 1) * stride]);
                }
                acc(adj, a, &da);
                acc(adj, b, &db);
            }
            Op::ConcatRows { ref rows } => {
                let m = self.value(rows[0]).len();
                let rows = rows.clone();
                for (r, &id) in rows.iter().enumerate() {
                    let slice = g[r * m..(r + 1) * m].to_vec();
                    acc(adj, id, &slice);
                }
            }
            Op::Slice { x, start, len } => {
                let total = self.value(x).len();
                let mut dx = vec![0.0; total];
                dx[start..start + len].copy_from_slice(g);
                acc(adj, x, &dx);
            }
            Op::Sum { x } => {
                let g0 = g[0];
                let dx = vec![g0; self.value(x).len()];
                acc(adj, x, &dx);
            }
            Op::MaxPoolTime { x, ref argmax } => {
                let c = self.value(x).cols();
                let total = self.value(x).len();
                let argmax = argmax.clone();
                let mut dx = vec![0.0; total];
                for (out_idx, &row) in argmax.iter().enumerate() {
                    let ch = out_idx % c;
                    dx[row * c + ch] += g[out_idx];
                }
                acc(adj, x, &dx);
            }
            Op::GridScatter {
                ref sources,
                ref cells,
            } => {
                let sources = sources.clone();
                let cells = cells.clone();
                for (&src, &cell) in sources.iter().zip(&cells) {
                    let d = self.value(src).len();
                    let slice = g[cell * d..(cell + 1) * d].to_vec();
                    acc(adj, src, &slice);
                }
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for l in 0..k {
            let av = a[i * k + l];
            if av == 0.0 {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

// ---- gradient checking ----

/// Per-coordinate comparison of the taped gradient against central finite
/// differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_coord: Vec<f64>,
    pub max_rel_err: f64,
    pub worst_coord: usize,
    pub pass: bool,
}

/// Check d(f)/d(x) against (f(x+h e_i) - f(x-h e_i)) / 2h for every
/// coordinate. Relative error denominators are floored at 1e-8.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64, tol: f64) -> GradCheckReport
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    assert!(
        (1e-6..=1e-4).contains(&h),
        "grad_check step h={h} outside [1e-6, 1e-4]"
    );

    let mut tape = Tape::new();
    let xid = tape.leaf(x.clone());
    let root = f(&mut tape, xid).expect("grad_check: closure failed on the base point");
    tape.backward(root).expect("grad_check: backward failed");
    let taped = tape.grad(xid).clone();

    let eval = |t: &Tensor| -> f64 {
        let mut tape = Tape::new();
        let id = tape.leaf(t.clone());
        let root = f(&mut tape, id).expect("grad_check: closure failed on a probe point");
        tape.value(root).data()[0]
    };

    let mut per_coord = Vec::with_capacity(x.len());
    let (mut max_rel_err, mut worst_coord) = (0.0_f64, 0usize);
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
        let gi = taped.data()[i];
        let denom = gi.abs().max(fd.abs()).max(1e-8);
        let rel = (gi - fd).abs() / denom;
        if rel > max_rel_err {
            max_rel_err = rel;
            worst_coord = i;
        }
        per_coord.push(rel);
    }
    GradCheckReport {
        per_coord,
        max_rel_err,
        worst_coord,
        pass: max_rel_err < tol,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;

    fn rand_tensor(rng: &mut ChaCha12Rng, shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(shape, data).unwrap()
    }

    /// Naive triple-loop product, the independent oracle for matmul.
    fn matmul_oracle(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = Tensor::zeros(vec![m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for l in 0..k {
                    acc += a.at2(i, l) * b.at2(l, j);
                }
                out.data_mut()[i * n + j] = acc;
            }
        }
        out
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let eye = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let m = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let out = tape.matmul(eye, m).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_scalar_case() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::new(vec![1, 1], vec![2.0]).unwrap());
        let b = tape.leaf(Tensor::new(vec![1, 1], vec![3.0]).unwrap());
        let out = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(out).data(), &[6.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for _ in 0..20 {
            let a = rand_tensor(&mut rng, vec![4, 5]);
            let b = rand_tensor(&mut rng, vec![5, 3]);
            let expect = matmul_oracle(&a, &b);
            let mut tape = Tape::new();
            let (ia, ib) = (tape.leaf(a), tape.leaf(b));
            let out = tape.matmul(ia, ib).unwrap();
            for (x, y) in tape.value(out).data().iter().zip(expect.data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.zeros(vec![2, 3]);
        let b = tape.zeros(vec![2, 3]);
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "error should name shapes: {err}");
    }

    #[test]
    fn unary_fixed_points() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::vector(vec![0.0]));
        let t = tape.tanh(z);
        assert_eq!(tape.value(t).data(), &[0.0]);
        let s = tape.sigmoid(z);
        assert_eq!(tape.value(s).data(), &[0.5]);
    }

    #[test]
    fn tanh_derivative_matches_finite_difference() {
        let f = |tape: &mut Tape, x: NodeId| -> crate::error::Result<NodeId> {
            let t = tape.tanh(x);
            Ok(tape.sum(t))
        };
        let x = Tensor::vector(vec![0.3]);
        let report = grad_check(f, &x, 1e-5, 1e-8);
        assert!(
            report.pass,
            "tanh'(0.3) rel err {} too large",
            report.max_rel_err
        );
    }

    #[test]
    fn softmax_uniform_case() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.0, 0.0, 0.0]));
        let y = tape.softmax(x).unwrap();
        for v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_hand_case() {
        // [ln 1, ln 3] -> [1/4, 3/4]
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.0, 3.0_f64.ln()]));
        let y = tape.softmax(x).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - 0.25).abs() < 1e-12);
        assert!((d[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariance_and_sum() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for _ in 0..50 {
            let n = rng.random_range(1..6);
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1e3..1e3)).collect();
            let c = rng.random_range(-1e3..1e3);
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let mut tape = Tape::new();
            let a = tape.leaf(Tensor::vector(v));
            let b = tape.leaf(Tensor::vector(shifted));
            let ya = tape.softmax(a).unwrap();
            let yb = tape.softmax(b).unwrap();
            let sum: f64 = tape.value(ya).data().iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12);
            for (x, y) in tape.value(ya).data().iter().zip(tape.value(yb).data()) {
                assert!((x - y).abs() < 1e-9);
                assert!((0.0..=1.0).contains(x));
            }
        }
    }

    #[test]
    fn concat_basic_and_roundtrip() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.leaf(Tensor::vector(vec![3.0]));
        let c = tape.concat(a, b, 0).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0]);
        let back_a = tape.slice(c, 0, 2).unwrap();
        let back_b = tape.slice(c, 2, 1).unwrap();
        assert_eq!(tape.value(back_a).data(), &[1.0, 2.0]);
        assert_eq!(tape.value(back_b).data(), &[3.0]);
    }

    #[test]
    fn concat_axis1() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::new(vec![2, 1], vec![1.0, 3.0]).unwrap());
        let b = tape.leaf(Tensor::new(vec![2, 2], vec![10.0, 11.0, 30.0, 31.0]).unwrap());
        let c = tape.concat(a, b, 1).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 3]);
        assert_eq!(tape.value(c).data(), &[1.0, 10.0, 11.0, 3.0, 30.0, 31.0]);
    }

    #[test]
    fn concat_gradient_splits_back() {
        let f_sum_concat = |tape: &mut Tape, x: NodeId| -> crate::error::Result<NodeId> {
            let fixed = tape.leaf(Tensor::vector(vec![5.0, 6.0]));
            let c = tape.concat(x, fixed, 0)?;
            Ok(tape.sum(c))
        };
        let x = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let report = grad_check(f_sum_concat, &x, 1e-5, 1e-6);
        assert!(report.pass, "max rel err {}", report.max_rel_err);

        // gradient of sum(concat(a,b)) is all-ones into both inputs
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.leaf(Tensor::vector(vec![3.0]));
        let c = tape.concat(a, b, 0).unwrap();
        let s = tape.sum(c);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).data(), &[1.0, 1.0]);
        assert_eq!(tape.grad(b).data(), &[1.0]);
    }

    #[test]
    fn backward_identity_and_analytic() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(4.2));
        tape.backward(x).unwrap();
        assert_eq!(tape.grad(x).data(), &[1.0]);

        // root = sum(x .* x) -> grad = 2x
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, -2.0, 3.0]));
        let sq = tape.mul(x, x).unwrap();
        let root = tape.sum(sq);
        tape.backward(root).unwrap();
        assert_eq!(tape.grad(x).data(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn backward_twice_doubles_grads_unless_zeroed() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let sq = tape.mul(x, x).unwrap();
        let root = tape.sum(sq);
        tape.backward(root).unwrap();
        assert_eq!(tape.grad(x).data(), &[2.0, 4.0]);
        tape.backward(root).unwrap();
        assert_eq!(tape.grad(x).data(), &[4.0, 8.0]);
        tape.zero_grads();
        tape.backward(root).unwrap();
        assert_eq!(tape.grad(x).data(), &[2.0, 4.0]);
    }

    #[test]
    fn composite_expression_matches_finite_differences() {
        // f(x) = sum(softmax(W x) . tanh(x[0..2])) with a fixed W
        let f = |tape: &mut Tape, x: NodeId| -> crate::error::Result<NodeId> {
            let w = tape.leaf(
                Tensor::new(vec![2, 3], vec![0.3, -0.8, 0.5, 1.1, 0.2, -0.4]).unwrap(),
            );
            let wx = tape.matvec(w, x)?;
            let sm = tape.softmax(wx)?;
            let head = tape.slice(x, 0, 2)?;
            let th = tape.tanh(head);
            let prod = tape.mul(sm, th)?;
            Ok(tape.sum(prod))
        };
        let x = Tensor::vector(vec![0.4, -0.7, 0.9]);
        let report = grad_check(f, &x, 1e-5, 1e-6);
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn grad_check_linear_is_machine_precision() {
        let f = |tape: &mut Tape, x: NodeId| -> crate::error::Result<NodeId> { Ok(tape.sum(x)) };
        let x = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let report = grad_check(f, &x, 1e-5, 1e-9);
        assert!(report.pass, "linear f rel err {}", report.max_rel_err);
    }

    #[test]
    fn grad_check_composite_softmax_dot() {
        let f = |tape: &mut Tape, x: NodeId| -> crate::error::Result<NodeId> {
            let sm = tape.softmax(x)?;
            let w = tape.leaf(Tensor::vector(vec![0.2, -1.3, 0.7]));
            tape.dot(sm, w)
        };
        let x = Tensor::vector(vec![0.5, -0.1, 0.8]);
        let report = grad_check(f, &x, 1e-5, 1e-4);
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn grad_check_catches_corrupted_rule() {
        // The detached leaf copies x's current value, so finite differences
        // see slope 3 while the tape only backprops through the scale-by-2
        // path and reports 2. The checker must flag the mismatch.
        let corrupted = |tape: &mut Tape, x: NodeId| -> crate::error::Result<NodeId> {
            let scaled = tape.scale(x, 2.0);
            let detached = tape.leaf(tape.value(x).clone());
            let s1 = tape.sum(scaled);
            let s2 = tape.sum(detached);
            tape.add(s1, s2)
        };
        let x = Tensor::vector(vec![0.4, -0.2]);
        let report = grad_check(corrupted, &x, 1e-5, 1e-4);
        assert!(!report.pass, "corrupted rule must be caught");
    }

    #[test]
    fn maxpool_time_hand_case_and_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![4, 1], vec![1.0, 5.0, 2.0, 3.0]).unwrap());
        let p = tape.maxpool_time(x).unwrap();
        assert_eq!(tape.value(p).shape(), &[2, 1]);
        assert_eq!(tape.value(p).data(), &[5.0, 3.0]);
        let s = tape.sum(p);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).data(), &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn maxpool_tie_routes_to_first() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2, 1], vec![2.0, 2.0]).unwrap());
        let p = tape.maxpool_time(x).unwrap();
        let s = tape.sum(p);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).data(), &[1.0, 0.0]);
    }

    #[test]
    fn grid_scatter_additivity_and_grad() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.leaf(Tensor::vector(vec![10.0, 20.0]));
        let g = tape.grid_scatter(&[a, b, a], &[0, 2, 0], 3, 2).unwrap();
        assert_eq!(
            tape.value(g).data(),
            &[2.0, 4.0, 0.0, 0.0, 10.0, 20.0]
        );
        let s = tape.sum(g);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).data(), &[2.0, 2.0]);
        assert_eq!(tape.grad(b).data(), &[1.0, 1.0]);
    }

    #[test]
    fn forward_values_stay_finite_for_large_inputs() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1e3, -1e3, 999.0]));
        let sm = tape.softmax(x).unwrap();
        assert!(tape.value(sm).all_finite());
        let t = tape.tanh(x);
        assert!(tape.value(t).all_finite());
        let s = tape.sigmoid(x);
        assert!(tape.value(s).all_finite());
    }
}
