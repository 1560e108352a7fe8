//! Dense float64 tensors with tape-based reverse-mode automatic
//! differentiation.
//!
//! A [`Graph`] records every operation during the forward pass in
//! topological order; [`Graph::backward`] replays the tape in reverse and
//! accumulates gradients into every node with `requires_grad`. Input
//! activations (for instance token embeddings) can be registered as leaves
//! on demand, so gradients with respect to intermediates are available
//! without differentiating the table they were gathered from.
//!
//! The engine is deliberately unfused: correctness and bit-reproducibility
//! over speed. Two backward passes over identical graphs produce identical
//! bits because traversal order is the construction order and accumulation
//! order inside each kernel is fixed.

use crate::error::{Error, Result};

/// A plain value tensor: row-major float64 data plus shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape/data length mismatch"
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    /// `[r,c] + [c]`, the row vector added to every row.
    AddRow(NodeId, NodeId),
    Matmul(NodeId, NodeId),
    /// `a @ b^T` with `a: [m,k]`, `b: [n,k]`.
    MatmulNT(NodeId, NodeId),
    GatherRows(NodeId, Vec<usize>),
    SelectRows(NodeId, Vec<usize>),
    ConcatRows(Vec<NodeId>),
    SliceCols(NodeId, usize, usize),
    ConcatCols(Vec<NodeId>),
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    /// `(x, gain, bias)` row-wise layer norm.
    LayerNorm(NodeId, NodeId, NodeId, f64),
    Gelu(NodeId),
    Exp(NodeId),
    Clamp(NodeId, f64, f64),
    MinElem(NodeId, NodeId),
    PickPerRow(NodeId, Vec<usize>),
    Sum(NodeId),
    Mean(NodeId),
    MeanRows(NodeId),
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Tape of recorded operations. Single-threaded per instance.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires: bool) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node { shape, data, op, requires_grad: requires });
        self.grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    fn req(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> NodeId {
        self.push(t.shape, t.data, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.leaf(t, false)
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Gradient of the last backward pass; `None` before backward or for
    /// nodes without `requires_grad`.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    /// Clears accumulated gradients so backward can be re-run.
    pub fn reset_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    fn dims2(&self, id: NodeId) -> (usize, usize) {
        let s = &self.nodes[id.0].shape;
        assert_eq!(s.len(), 2, "expected 2-D node, got shape {s:?}");
        (s[0], s[1])
    }

    // ── forward ops ──────────────────────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b));
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let req = self.req(a) || self.req(b);
        self.push(self.nodes[a.0].shape.clone(), data, Op::Add(a, b), req)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b));
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x - y)
            .collect();
        let req = self.req(a) || self.req(b);
        self.push(self.nodes[a.0].shape.clone(), data, Op::Sub(a, b), req)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b));
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        let req = self.req(a) || self.req(b);
        self.push(self.nodes[a.0].shape.clone(), data, Op::Mul(a, b), req)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x * c).collect();
        let req = self.req(a);
        self.push(self.nodes[a.0].shape.clone(), data, Op::Scale(a, c), req)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x + c).collect();
        let req = self.req(a);
        self.push(self.nodes[a.0].shape.clone(), data, { let _ = c; Op::AddScalar(a) }, req)
    }

    pub fn add_row(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (r, c) = self.dims2(a);
        assert_eq!(self.nodes[b.0].data.len(), c);
        let mut data = self.nodes[a.0].data.clone();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] += self.nodes[b.0].data[j];
            }
        }
        let req = self.req(a) || self.req(b);
        self.push(vec![r, c], data, Op::AddRow(a, b), req)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = self.dims2(a);
        let (k2, n) = self.dims2(b);
        assert_eq!(k, k2, "matmul inner dims");
        let mut out = vec![0.0; m * n];
        kernels::matmul(&self.nodes[a.0].data, m, k, &self.nodes[b.0].data, n, &mut out);
        let req = self.req(a) || self.req(b);
        self.push(vec![m, n], out, Op::Matmul(a, b), req)
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = self.dims2(a);
        let (n, k2) = self.dims2(b);
        assert_eq!(k, k2, "matmul_nt inner dims");
        let mut out = vec![0.0; m * n];
        kernels::matmul_nt(&self.nodes[a.0].data, m, k, &self.nodes[b.0].data, n, &mut out);
        let req = self.req(a) || self.req(b);
        self.push(vec![m, n], out, Op::MatmulNT(a, b), req)
    }

    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let (rows, c) = self.dims2(table);
        let mut data = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            assert!(i < rows, "gather row {i} out of {rows}");
            data.extend_from_slice(&self.nodes[table.0].data[i * c..(i + 1) * c]);
        }
        let req = self.req(table);
        self.push(vec![ids.len(), c], data, Op::GatherRows(table, ids.to_vec()), req)
    }

    pub fn select_rows(&mut self, a: NodeId, ids: &[usize]) -> NodeId {
        let (rows, c) = self.dims2(a);
        let mut data = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            assert!(i < rows);
            data.extend_from_slice(&self.nodes[a.0].data[i * c..(i + 1) * c]);
        }
        let req = self.req(a);
        self.push(vec![ids.len(), c], data, Op::SelectRows(a, ids.to_vec()), req)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let (_, c) = self.dims2(parts[0]);
        let mut data = Vec::new();
        let mut rows = 0;
        let mut req = false;
        for &p in parts {
            let (r, pc) = self.dims2(p);
            assert_eq!(pc, c);
            rows += r;
            req |= self.req(p);
            data.extend_from_slice(&self.nodes[p.0].data);
        }
        self.push(vec![rows, c], data, Op::ConcatRows(parts.to_vec()), req)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let (r, c) = self.dims2(a);
        assert!(start + len <= c);
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&self.nodes[a.0].data[i * c + start..i * c + start + len]);
        }
        let req = self.req(a);
        self.push(vec![r, len], data, Op::SliceCols(a, start, len), req)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let (r, _) = self.dims2(parts[0]);
        let total: usize = parts.iter().map(|&p| self.dims2(p).1).sum();
        let mut data = vec![0.0; r * total];
        let mut off = 0;
        let mut req = false;
        for &p in parts {
            let (pr, pc) = self.dims2(p);
            assert_eq!(pr, r);
            req |= self.req(p);
            for i in 0..r {
                data[i * total + off..i * total + off + pc]
                    .copy_from_slice(&self.nodes[p.0].data[i * pc..(i + 1) * pc]);
            }
            off += pc;
        }
        self.push(vec![r, total], data, Op::ConcatCols(parts.to_vec()), req)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.dims2(a);
        let mut data = self.nodes[a.0].data.clone();
        for i in 0..r {
            kernels::softmax_row(&mut data[i * c..(i + 1) * c]);
        }
        let req = self.req(a);
        self.push(vec![r, c], data, Op::SoftmaxRows(a), req)
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.dims2(a);
        let mut data = self.nodes[a.0].data.clone();
        for i in 0..r {
            kernels::log_softmax_row(&mut data[i * c..(i + 1) * c]);
        }
        let req = self.req(a);
        self.push(vec![r, c], data, Op::LogSoftmaxRows(a), req)
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> NodeId {
        let (r, c) = self.dims2(x);
        assert_eq!(self.nodes[gain.0].data.len(), c);
        assert_eq!(self.nodes[bias.0].data.len(), c);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &self.nodes[x.0].data[i * c..(i + 1) * c];
            let (mu, sigma) = kernels::row_moments(row, eps);
            for j in 0..c {
                data[i * c + j] =
                    self.nodes[gain.0].data[j] * (row[j] - mu) / sigma + self.nodes[bias.0].data[j];
            }
        }
        let req = self.req(x) || self.req(gain) || self.req(bias);
        self.push(vec![r, c], data, Op::LayerNorm(x, gain, bias, eps), req)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| kernels::gelu(x)).collect();
        let req = self.req(a);
        self.push(self.nodes[a.0].shape.clone(), data, Op::Gelu(a), req)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x.exp()).collect();
        let req = self.req(a);
        self.push(self.nodes[a.0].shape.clone(), data, Op::Exp(a), req)
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x.clamp(lo, hi)).collect();
        let req = self.req(a);
        self.push(self.nodes[a.0].shape.clone(), data, Op::Clamp(a, lo, hi), req)
    }

    /// Elementwise minimum; on ties the gradient flows to `a`.
    pub fn min_elem(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b));
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| if x <= y { *x } else { *y })
            .collect();
        let req = self.req(a) || self.req(b);
        self.push(self.nodes[a.0].shape.clone(), data, Op::MinElem(a, b), req)
    }

    /// `[r,c] -> [r]`, picking one column per row.
    pub fn pick_per_row(&mut self, a: NodeId, cols: &[usize]) -> NodeId {
        let (r, c) = self.dims2(a);
        assert_eq!(cols.len(), r);
        let data: Vec<f64> =
            cols.iter().enumerate().map(|(i, &j)| self.nodes[a.0].data[i * c + j]).collect();
        let req = self.req(a);
        self.push(vec![r], data, Op::PickPerRow(a, cols.to_vec()), req)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.nodes[a.0].data.iter().sum();
        let req = self.req(a);
        self.push(vec![1], vec![s], Op::Sum(a), req)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.nodes[a.0].data.len().max(1);
        let s: f64 = self.nodes[a.0].data.iter().sum();
        let req = self.req(a);
        self.push(vec![1], vec![s / n as f64], Op::Mean(a), req)
    }

    /// Mean over rows: `[r,c] -> [1,c]`.
    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.dims2(a);
        let mut data = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                data[j] += self.nodes[a.0].data[i * c + j];
            }
        }
        for v in &mut data {
            *v /= r as f64;
        }
        let req = self.req(a);
        self.push(vec![1, c], data, Op::MeanRows(a), req)
    }

    // ── backward ──────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Every `requires_grad` node gets a
    /// gradient buffer (zeros when it does not participate).
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        for (i, node) in self.nodes.iter().enumerate() {
            self.grads[i] = if node.requires_grad { Some(vec![0.0; node.data.len()]) } else { None };
        }
        if let Some(g) = self.grads[loss.0].as_mut() {
            g[0] = 1.0;
        }
        for i in (0..self.nodes.len()).rev() {
            if self.grads[i].is_none() {
                continue;
            }
            let gy = self.grads[i].take().unwrap();
            self.propagate(i, &gy);
            self.grads[i] = Some(gy);
        }
        Ok(())
    }

    fn acc(&mut self, id: NodeId, f: impl FnOnce(&mut [f64])) {
        if let Some(g) = self.grads[id.0].as_mut() {
            f(g);
        }
    }

    fn propagate(&mut self, i: usize, gy: &[f64]) {
        // Parents always have smaller indices; their grads are untouched
        // while we hold gy.
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(a, |g| add_assign(g, gy));
                self.acc(b, |g| add_assign(g, gy));
            }
            Op::Sub(a, b) => {
                self.acc(a, |g| add_assign(g, gy));
                self.acc(b, |g| sub_assign(g, gy));
            }
            Op::Mul(a, b) => {
                let bd = self.nodes[b.0].data.clone();
                let ad = self.nodes[a.0].data.clone();
                self.acc(a, |g| {
                    for (k, gv) in g.iter_mut().enumerate() {
                        *gv += gy[k] * bd[k];
                    }
                });
                self.acc(b, |g| {
                    for (k, gv) in g.iter_mut().enumerate() {
                        *gv += gy[k] * ad[k];
                    }
                });
            }
            Op::Scale(a, c) => self.acc(a, |g| {
                for (k, gv) in g.iter_mut().enumerate() {
                    *gv += gy[k] * c;
                }
            }),
            Op::AddScalar(a) => self.acc(a, |g| add_assign(g, gy)),
            Op::AddRow(a, b) => {
                let (r, c) = self.dims2(a);
                self.acc(a, |g| add_assign(g, gy));
                self.acc(b, |g| {
                    for i in 0..r {
                        for j in 0..c {
                            g[j] += gy[i * c + j];
                        }
                    }
                });
            }
            Op::Matmul(a, b) => {
                let (m, k) = self.dims2(a);
                let (_, n) = self.dims2(b);
                if self.req(a) {
                    let bd = self.nodes[b.0].data.clone();
                    self.acc(a, |g| kernels::matmul_nt(gy, m, n, &bd, k, g));
                }
                if self.req(b) {
                    let ad = self.nodes[a.0].data.clone();
                    self.acc(b, |g| kernels::atb(&ad, m, k, gy, n, g));
                }
            }
            Op::MatmulNT(a, b) => {
                let (m, k) = self.dims2(a);
                let (n, _) = self.dims2(b);
                if self.req(a) {
                    let bd = self.nodes[b.0].data.clone();
                    self.acc(a, |g| kernels::matmul(gy, m, n, &bd, k, g));
                }
                if self.req(b) {
                    let ad = self.nodes[a.0].data.clone();
                    self.acc(b, |g| kernels::atb(gy, m, n, &ad, k, g));
                }
            }
            Op::GatherRows(table, ids) => {
                let c = self.dims2(table).1;
                self.acc(table, |g| {
                    for (i, &row) in ids.iter().enumerate() {
                        for j in 0..c {
                            g[row * c + j] += gy[i * c + j];
                        }
                    }
                });
            }
            Op::SelectRows(a, ids) => {
                let c = self.dims2(a).1;
                self.acc(a, |g| {
                    for (i, &row) in ids.iter().enumerate() {
                        for j in 0..c {
                            g[row * c + j] += gy[i * c + j];
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in &parts {
                    let len = self.nodes[p.0].data.len();
                    self.acc(p, |g| add_assign(g, &gy[off..off + len]));
                    off += len;
                }
            }
            Op::SliceCols(a, start, len) => {
                let (r, c) = self.dims2(a);
                self.acc(a, |g| {
                    for i in 0..r {
                        for j in 0..len {
                            g[i * c + start + j] += gy[i * len + j];
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total: usize = parts.iter().map(|&p| self.dims2(p).1).sum();
                let r = self.dims2(parts[0]).0;
                let mut off = 0;
                for &p in &parts {
                    let pc = self.dims2(p).1;
                    self.acc(p, |g| {
                        for i in 0..r {
                            for j in 0..pc {
                                g[i * pc + j] += gy[i * total + off + j];
                            }
                        }
                    });
                    off += pc;
                }
            }
            Op::SoftmaxRows(a) => {
                let (r, c) = self.dims2(a);
                let y = self.nodes[i].data.clone();
                self.acc(a, |g| {
                    for row in 0..r {
                        let ys = &y[row * c..(row + 1) * c];
                        let gys = &gy[row * c..(row + 1) * c];
                        let dot: f64 = ys.iter().zip(gys).map(|(v, gv)| v * gv).sum();
                        for j in 0..c {
                            g[row * c + j] += ys[j] * (gys[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmaxRows(a) => {
                let (r, c) = self.dims2(a);
                let y = self.nodes[i].data.clone();
                self.acc(a, |g| {
                    for row in 0..r {
                        let ys = &y[row * c..(row + 1) * c];
                        let gys = &gy[row * c..(row + 1) * c];
                        let gsum: f64 = gys.iter().sum();
                        for j in 0..c {
                            g[row * c + j] += gys[j] - ys[j].exp() * gsum;
                        }
                    }
                });
            }
            Op::LayerNorm(x, gain, bias, eps) => {
                let (r, c) = self.dims2(x);
                let xd = self.nodes[x.0].data.clone();
                let gd = self.nodes[gain.0].data.clone();
                self.acc(x, |g| {
                    for row in 0..r {
                        let xs = &xd[row * c..(row + 1) * c];
                        let (mu, sigma) = kernels::row_moments(xs, eps);
                        let gys = &gy[row * c..(row + 1) * c];
                        let mut m1 = 0.0; // mean(gain * gy)
                        let mut m2 = 0.0; // mean(gain * gy * xhat)
                        for j in 0..c {
                            let xh = (xs[j] - mu) / sigma;
                            m1 += gd[j] * gys[j];
                            m2 += gd[j] * gys[j] * xh;
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        for j in 0..c {
                            let xh = (xs[j] - mu) / sigma;
                            g[row * c + j] += (gd[j] * gys[j] - m1 - xh * m2) / sigma;
                        }
                    }
                });
                self.acc(gain, |g| {
                    for row in 0..r {
                        let xs = &xd[row * c..(row + 1) * c];
                        let (mu, sigma) = kernels::row_moments(xs, eps);
                        for j in 0..c {
                            g[j] += gy[row * c + j] * (xs[j] - mu) / sigma;
                        }
                    }
                });
                self.acc(bias, |g| {
                    for row in 0..r {
                        for j in 0..c {
                            g[j] += gy[row * c + j];
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let xd = self.nodes[a.0].data.clone();
                self.acc(a, |g| {
                    for (k, gv) in g.iter_mut().enumerate() {
                        *gv += gy[k] * kernels::gelu_derivative(xd[k]);
                    }
                });
            }
            Op::Exp(a) => {
                let y = self.nodes[i].data.clone();
                self.acc(a, |g| {
                    for (k, gv) in g.iter_mut().enumerate() {
                        *gv += gy[k] * y[k];
                    }
                });
            }
            Op::Clamp(a, lo, hi) => {
                let xd = self.nodes[a.0].data.clone();
                self.acc(a, |g| {
                    for (k, gv) in g.iter_mut().enumerate() {
                        if xd[k] >= lo && xd[k] <= hi {
                            *gv += gy[k];
                        }
                    }
                });
            }
            Op::MinElem(a, b) => {
                let ad = self.nodes[a.0].data.clone();
                let bd = self.nodes[b.0].data.clone();
                self.acc(a, |g| {
                    for (k, gv) in g.iter_mut().enumerate() {
                        if ad[k] <= bd[k] {
                            *gv += gy[k];
                        }
                    }
                });
                self.acc(b, |g| {
                    for (k, gv) in g.iter_mut().enumerate() {
                        if ad[k] > bd[k] {
                            *gv += gy[k];
                        }
                    }
                });
            }
            Op::PickPerRow(a, cols) => {
                let c = self.dims2(a).1;
                self.acc(a, |g| {
                    for (i, &j) in cols.iter().enumerate() {
                        g[i * c + j] += gy[i];
                    }
                });
            }
            Op::Sum(a) => self.acc(a, |g| {
                for gv in g.iter_mut() {
                    *gv += gy[0];
                }
            }),
            Op::Mean(a) => {
                let n = self.nodes[a.0].data.len().max(1) as f64;
                self.acc(a, |g| {
                    for gv in g.iter_mut() {
                        *gv += gy[0] / n;
                    }
                });
            }
            Op::MeanRows(a) => {
                let (r, c) = self.dims2(a);
                self.acc(a, |g| {
                    for i in 0..r {
                        for j in 0..c {
                            g[i * c + j] += gy[j] / r as f64;
                        }
                    }
                });
            }
        }
    }
}

fn add_assign(g: &mut [f64], gy: &[f64]) {
    for (gv, y) in g.iter_mut().zip(gy) {
        *gv += y;
    }
}

fn sub_assign(g: &mut [f64], gy: &[f64]) {
    for (gv, y) in g.iter_mut().zip(gy) {
        *gv -= y;
    }
}

/// Shared numeric kernels; each output row depends only on its own input
/// row and the second operand, with a fixed accumulation order, so stacked
/// and per-sequence evaluation produce identical bits.
pub mod kernels {
    /// `out += a @ b` with `a: [m,k]`, `b: [k,n]`.
    pub fn matmul(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, out: &mut [f64]) {
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (p, &av) in arow.iter().enumerate() {
                let brow = &b[p * n..(p + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
    }

    /// `out += a @ b^T` with `a: [m,k]`, `b: [n,k]`.
    pub fn matmul_nt(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, out: &mut [f64]) {
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &b[j * k..(j + 1) * k];
                let mut acc = 0.0;
                for p in 0..k {
                    acc += arow[p] * brow[p];
                }
                out[i * n + j] += acc;
            }
        }
    }

    /// `out += a^T @ b` with `a: [m,k]`, `b: [m,n]`, `out: [k,n]`.
    pub fn atb(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, out: &mut [f64]) {
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let brow = &b[i * n..(i + 1) * n];
            for (p, &av) in arow.iter().enumerate() {
                let orow = &mut out[p * n..(p + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
    }

    /// In-place stable softmax of one row.
    pub fn softmax_row(row: &mut [f64]) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }

    /// In-place stable log-softmax of one row.
    pub fn log_softmax_row(row: &mut [f64]) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter() {
            sum += (*v - max).exp();
        }
        let lse = max + sum.ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }

    /// Row mean and `sqrt(var + eps)`.
    pub fn row_moments(row: &[f64], eps: f64) -> (f64, f64) {
        let n = row.len() as f64;
        let mu = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / n;
        (mu, (var + eps).sqrt())
    }

    /// Tanh-approximation GELU.
    pub fn gelu(x: f64) -> f64 {
        const C: f64 = 0.7978845608028654; // sqrt(2/pi)
        0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
    }

    pub fn gelu_derivative(x: f64) -> f64 {
        const C: f64 = 0.7978845608028654;
        let inner = C * (x + 0.044715 * x * x * x);
        let t = inner.tanh();
        0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
    }
}

/// Max relative error between the analytic gradient of `f` at `x` and a
/// central finite difference with step `h`.
///
/// `f` rebuilds its computation on the supplied graph from the input leaf;
/// the analytic side runs one backward pass, the numeric side probes
/// `f(x ± h e_i)` coordinate by coordinate.
pub fn finite_difference_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, NodeId) -> NodeId,
{
    assert!(h > 0.0);
    let mut g = Graph::new();
    let leaf = g.leaf(x.clone(), true);
    let loss = f(&mut g, leaf);
    if g.value(loss).len() != 1 {
        return Err(Error::Contract("finite_difference_check requires scalar f".into()));
    }
    g.backward(loss)?;
    let analytic = g.grad(leaf).expect("leaf requires grad").to_vec();

    let eval = |data: &[f64]| -> Result<f64> {
        let mut g = Graph::new();
        let leaf = g.leaf(Tensor::new(x.shape.clone(), data.to_vec()), false);
        let loss = f(&mut g, leaf);
        Ok(g.value(loss)[0])
    };

    let mut max_rel = 0.0f64;
    let mut probe = x.data.clone();
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = eval(&probe)?;
        probe[i] = orig - h;
        let fm = eval(&probe)?;
        probe[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!("f non-finite at probe index {i}")));
        }
        let numeric = (fp - fm) / (2.0 * h);
        let rel = (analytic[i] - numeric).abs() / (analytic[i].abs() + 1e-8);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}
