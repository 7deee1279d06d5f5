//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! Every primitive appends a node holding its value and the handles of its
//! operands. Nodes are created in evaluation order, so walking the tape
//! backwards from the loss is already a topological order and each node is
//! visited exactly once.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Abs(Var),
    Square(Var),
    Sqrt(Var),
    Huber(Var, f64),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    /// Column-wise max over rows within each segment; stores the winning row
    /// per (segment, column).
    MaxPool(Var, Vec<usize>),
    ConcatCols(Var, Var),
    ConcatRows(Vec<Var>),
    Gather(Var, Vec<usize>),
    BroadcastRows(Var),
    Reshape(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_str(t: &Tensor) -> String {
    format!("{:?}", t.shape())
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Adds an input tensor. Gradients are only tracked when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of `v`, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn scalar_value(&self, v: Var) -> Result<f64> {
        self.value(v).item()
    }

    // ---------------------------------------------------------------- ops

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.value(a).dims2("matmul")?;
        let (k2, m) = self.value(b).dims2("matmul")?;
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("{} x {}", shape_str(self.value(a)), shape_str(self.value(b))),
            ));
        }
        let mut out = vec![0.0; n * m];
        gemm(
            n,
            k,
            m,
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (m as isize, 1),
            &mut out,
            0.0,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::dim(
                op,
                format!("{} vs {}", shape_str(self.value(a)), shape_str(self.value(b))),
            ));
        }
        Ok(())
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(op, a, b)?;
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let va = self.value(a);
        Tensor::new(va.shape().to_vec(), va.data().iter().map(|&x| f(x)).collect())
            .expect("unary preserves shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    /// `a (n×m) + b (1×m)`, broadcasting `b` over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, m) = self.value(a).dims2("add_row")?;
        let (r, m2) = self.value(b).dims2("add_row")?;
        if r != 1 || m != m2 {
            return Err(Error::dim(
                "add_row",
                format!("{} + {}", shape_str(self.value(a)), shape_str(self.value(b))),
            ));
        }
        let bias = self.value(b).data();
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_exact_mut(m) {
            for (o, &bb) in row.iter_mut().zip(bias) {
                *o += bb;
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::AddRow(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.unary(a, |x| x * s);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, s), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.unary(a, |x| if x > 0.0 { x } else { 0.0 });
        let rg = self.rg(a);
        self.push(t, Op::Relu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.unary(a, f64::tanh);
        let rg = self.rg(a);
        self.push(t, Op::Tanh(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let t = self.unary(a, f64::abs);
        let rg = self.rg(a);
        self.push(t, Op::Abs(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let t = self.unary(a, |x| x * x);
        let rg = self.rg(a);
        self.push(t, Op::Square(a), rg)
    }

    /// Elementwise square root. Negative inputs are a numeric error; the
    /// derivative at exactly zero is taken as zero.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x < 0.0) {
            return Err(Error::Numeric("sqrt of a negative value".into()));
        }
        let t = self.unary(a, f64::sqrt);
        let rg = self.rg(a);
        Ok(self.push(t, Op::Sqrt(a), rg))
    }

    /// Elementwise Huber function with threshold `delta`.
    pub fn huber(&mut self, a: Var, delta: f64) -> Result<Var> {
        if !(delta > 0.0) {
            return Err(Error::Contract(format!("huber delta must be positive, got {delta}")));
        }
        let t = self.unary(a, |x| crate::geometry::huber(x, delta));
        let rg = self.rg(a);
        Ok(self.push(t, Op::Huber(a, delta), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::Contract("mean of an empty tensor".into()));
        }
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(s / n as f64), Op::Mean(a), rg))
    }

    /// Row sums: `n×m → n×1`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let (n, m) = self.value(a).dims2("sum_cols")?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .chunks_exact(m.max(1))
            .map(|r| r.iter().sum())
            .collect();
        let out = if m == 0 { vec![0.0; n] } else { out };
        let rg = self.rg(a);
        Ok(self.push(Tensor::matrix(n, 1, out)?, Op::SumCols(a), rg))
    }

    /// Column-wise max over all rows: `n×m → 1×m`. Ties go to the lowest row.
    pub fn max_pool(&mut self, a: Var) -> Result<Var> {
        let (n, _) = self.value(a).dims2("max_pool")?;
        self.max_pool_segments(a, &[n])
    }

    /// Column-wise max over consecutive row segments of the given lengths:
    /// `(Σ len)×m → segments×m`.
    pub fn max_pool_segments(&mut self, a: Var, lens: &[usize]) -> Result<Var> {
        let (n, m) = self.value(a).dims2("max_pool")?;
        if lens.iter().sum::<usize>() != n || lens.iter().any(|&l| l == 0) {
            return Err(Error::dim(
                "max_pool",
                format!("segments {:?} do not tile {} rows", lens, n),
            ));
        }
        let data = self.value(a).data();
        let mut out = Vec::with_capacity(lens.len() * m);
        let mut arg = Vec::with_capacity(lens.len() * m);
        let mut start = 0;
        for &len in lens {
            let base = out.len();
            out.extend_from_slice(&data[start * m..(start + 1) * m]);
            arg.extend(std::iter::repeat(start).take(m));
            for r in start + 1..start + len {
                let row = &data[r * m..(r + 1) * m];
                for j in 0..m {
                    if row[j] > out[base + j] {
                        out[base + j] = row[j];
                        arg[base + j] = r;
                    }
                }
            }
            start += len;
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::matrix(lens.len(), m, out)?, Op::MaxPool(a, arg), rg))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, p) = self.value(a).dims2("concat_cols")?;
        let (n2, q) = self.value(b).dims2("concat_cols")?;
        if n != n2 {
            return Err(Error::dim(
                "concat_cols",
                format!("{} | {}", shape_str(self.value(a)), shape_str(self.value(b))),
            ));
        }
        let da = self.value(a).data();
        let db = self.value(b).data();
        let mut out = Vec::with_capacity(n * (p + q));
        for i in 0..n {
            out.extend_from_slice(&da[i * p..(i + 1) * p]);
            out.extend_from_slice(&db[i * q..(i + 1) * q]);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(n, p + q, out)?, Op::ConcatCols(a, b), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_rows of nothing".into()));
        }
        let (_, m) = self.value(parts[0]).dims2("concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.value(p).dims2("concat_rows")?;
            if c != m {
                return Err(Error::dim(
                    "concat_rows",
                    format!("column count {} vs {}", c, m),
                ));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::matrix(rows, m, out)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Selects rows of `a` by index (indices may repeat).
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (n, m) = self.value(a).dims2("gather")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::dim("gather", format!("row {} out of {}", bad, n)));
        }
        let da = self.value(a).data();
        let mut out = Vec::with_capacity(idx.len() * m);
        for &i in idx {
            out.extend_from_slice(&da[i * m..(i + 1) * m]);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::matrix(idx.len(), m, out)?, Op::Gather(a, idx.to_vec()), rg))
    }

    /// Rows `start..start + len` of `a`.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let idx: Vec<usize> = (start..start + len).collect();
        self.gather(a, &idx)
    }

    /// Repeats a `1×m` row `n` times.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let (r, m) = self.value(a).dims2("broadcast_rows")?;
        if r != 1 {
            return Err(Error::dim(
                "broadcast_rows",
                format!("expected 1×m, got {}", shape_str(self.value(a))),
            ));
        }
        let row = self.value(a).data().to_vec();
        let mut out = Vec::with_capacity(n * m);
        for _ in 0..n {
            out.extend_from_slice(&row);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::BroadcastRows(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let data = self.value(a).data().to_vec();
        let t = Tensor::new(shape, data).map_err(|_| {
            Error::dim("reshape", format!("cannot view {} with new shape", shape_str(self.value(a))))
        })?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    // ----------------------------------------------------------- backward

    /// Propagates d(loss)/d(node) to every node that requires gradients.
    /// Gradients accumulate across calls until [`Tape::zero_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if !self.rg(loss) {
            return Ok(());
        }
        let mut local: Vec<Option<Vec<f64>>> = Vec::new();
        local.resize_with(loss.0 + 1, || None);
        local[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = local[i].take() else { continue };
            self.propagate(i, &g, &mut local);
            // Keep the node's own gradient for accumulation below.
            local[i] = Some(g);
        }

        for (node, g) in self.nodes.iter_mut().zip(local) {
            if let Some(g) = g {
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(g),
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], local: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        // Returns the accumulation buffer for an operand, or None if it does
        // not need gradients.
        fn slot<'a>(
            nodes: &[Node],
            local: &'a mut [Option<Vec<f64>>],
            v: Var,
        ) -> Option<&'a mut Vec<f64>> {
            if !nodes[v.0].requires_grad {
                return None;
            }
            let len = nodes[v.0].value.len();
            Some(local[v.0].get_or_insert_with(|| vec![0.0; len]))
        }
        let val = |v: Var| nodes[v.0].value.data();

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (n, k) = (nodes[a.0].value.rows(), nodes[a.0].value.cols());
                let m = nodes[b.0].value.cols();
                if let Some(ga) = slot(nodes, local, *a) {
                    // ga += g (n×m) · bᵀ (m×k)
                    gemm(n, m, k, g, (m as isize, 1), val(*b), (1, m as isize), ga, 1.0);
                }
                if let Some(gb) = slot(nodes, local, *b) {
                    // gb += aᵀ (k×n) · g (n×m)
                    gemm(k, n, m, val(*a), (1, k as isize), g, (m as isize, 1), gb, 1.0);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gv) = slot(nodes, local, *v) {
                        add_into(gv, g);
                    }
                }
            }
            Op::AddRow(a, b) => {
                if let Some(ga) = slot(nodes, local, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = slot(nodes, local, *b) {
                    let m = gb.len();
                    for row in g.chunks_exact(m) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = slot(nodes, local, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = slot(nodes, local, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = slot(nodes, local, *a) {
                    for ((x, gy), bv) in ga.iter_mut().zip(g).zip(val(*b)) {
                        *x += gy * bv;
                    }
                }
                if let Some(gb) = slot(nodes, local, *b) {
                    for ((x, gy), av) in gb.iter_mut().zip(g).zip(val(*a)) {
                        *x += gy * av;
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = slot(nodes, local, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y);
                }
            }
            Op::Relu(a) => {
                if let Some(ga) = slot(nodes, local, *a) {
                    for ((x, gy), av) in ga.iter_mut().zip(g).zip(val(*a)) {
                        if *av > 0.0 {
                            *x += gy;
                        }
                    }
                }
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                if let Some(ga) = slot(nodes, local, *a) {
                    for ((x, gy), yv) in ga.iter_mut().zip(g).zip(y) {
                        *x += gy * (1.0 - yv * yv);
                    }
                }
            }
            Op::Abs(a) => {
                if let Some(ga) = slot(nodes, local, *a) {
                    for ((x, gy), av) in ga.iter_mut().zip(g).zip(val(*a)) {
                        if *av > 0.0 {
                            *x += gy;
                        } else if *av < 0.0 {
                            *x -= gy;
                        }
                    }
                }
            }
            Op::Square(a) => {
                if let Some(ga) = slot(nodes, local, *a) {
                    for ((x, gy), av) in ga.iter_mut().zip(g).zip(val(*a)) {
                        *x += 2.0 * av * gy;
                    }
                }
            }
            Op::Sqrt(a) => {
                let y = node.value.data();
                if let Some(ga) = slot(nodes, local, *a) {
                    for ((x, gy), yv) in ga.iter_mut().zip(g).zip(y) {
                        if *yv > 0.0 {
                            *x += gy / (2.0 * yv);
                        }
                    }
                }
            }
            Op::Huber(a, delta) => {
                if let Some(ga) = slot(nodes, local, *a) {
                    for ((x, gy), av) in ga.iter_mut().zip(g).zip(val(*a)) {
                        let d = if av.abs() <= *delta {
                            *av
                        } else {
                            delta * av.signum()
                        };
                        *x += gy * d;
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = slot(nodes, local, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(ga) = slot(nodes, local, *a) {
                    let s = g[0] / ga.len() as f64;
                    ga.iter_mut().for_each(|x| *x += s);
                }
            }
            Op::SumCols(a) => {
                let m = nodes[a.0].value.cols();
                if let Some(ga) = slot(nodes, local, *a) {
                    for (row, gy) in ga.chunks_exact_mut(m).zip(g) {
                        row.iter_mut().for_each(|x| *x += gy);
                    }
                }
            }
            Op::MaxPool(a, arg) => {
                let m = nodes[a.0].value.cols();
                if let Some(ga) = slot(nodes, local, *a) {
                    for (k, (&r, gy)) in arg.iter().zip(g).enumerate() {
                        ga[r * m + k % m] += gy;
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let p = nodes[a.0].value.cols();
                let q = nodes[b.0].value.cols();
                if let Some(ga) = slot(nodes, local, *a) {
                    for (dst, src) in ga.chunks_exact_mut(p).zip(g.chunks_exact(p + q)) {
                        add_into(dst, &src[..p]);
                    }
                }
                if let Some(gb) = slot(nodes, local, *b) {
                    for (dst, src) in gb.chunks_exact_mut(q).zip(g.chunks_exact(p + q)) {
                        add_into(dst, &src[p..]);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = nodes[p.0].value.len();
                    if let Some(gp) = slot(nodes, local, *p) {
                        add_into(gp, &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::Gather(a, idx) => {
                let m = nodes[a.0].value.cols();
                if let Some(ga) = slot(nodes, local, *a) {
                    for (&r, src) in idx.iter().zip(g.chunks_exact(m)) {
                        add_into(&mut ga[r * m..(r + 1) * m], src);
                    }
                }
            }
            Op::BroadcastRows(a) => {
                if let Some(ga) = slot(nodes, local, *a) {
                    let m = ga.len();
                    for row in g.chunks_exact(m) {
                        add_into(ga, row);
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = slot(nodes, local, *a) {
                    add_into(ga, g);
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// `c = a·b + beta·c` with `a: n×k`, `b: k×m`, strides given as
/// (row stride, column stride).
#[allow(clippy::too_many_arguments)]
fn gemm(
    n: usize,
    k: usize,
    m: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
    beta: f64,
) {
    if n == 0 || m == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.iter_mut().for_each(|x| *x = 0.0);
        }
        return;
    }
    // SAFETY: the slices cover the strided extents: `a` holds n*k values,
    // `b` k*m and `c` n*m, and callers pass strides describing exactly those
    // row-major (or transposed row-major) layouts.
    unsafe {
        matrixmultiply::dgemm(
            n,
            k,
            m,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            m as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(t: &mut Tape, r: usize, c: usize, d: &[f64], rg: bool) -> Var {
        t.leaf(Tensor::matrix(r, c, d.to_vec()).unwrap(), rg)
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let a = m(&mut t, 2, 2, &[1., 2., 3., 4.], false);
        let i = m(&mut t, 2, 2, &[1., 0., 0., 1.], false);
        let y = t.matmul(a, i).unwrap();
        assert_eq!(t.value(y).data(), &[1., 2., 3., 4.]);
    }

    #[test]
    fn analytic_values() {
        let mut t = Tape::new();
        let x = m(&mut t, 1, 2, &[0.0, -3.0], false);
        let th = t.tanh(x);
        let ab = t.abs(x);
        assert_eq!(t.value(th).data()[0], 0.0);
        assert_eq!(t.value(ab).data()[1], 3.0);
    }

    #[test]
    fn max_pool_over_points() {
        let mut t = Tape::new();
        let p = m(&mut t, 2, 3, &[1., 0., 0., 0., 2., 0.], false);
        let y = t.max_pool(p).unwrap();
        assert_eq!(t.value(y).data(), &[1., 2., 0.]);
    }

    #[test]
    fn shape_errors_name_the_primitive() {
        let mut t = Tape::new();
        let a = m(&mut t, 2, 3, &[0.; 6], false);
        let b = m(&mut t, 2, 3, &[0.; 6], false);
        let err = t.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("matmul"), "{err}");
        assert!(err.to_string().contains("[2, 3]"), "{err}");
        let c = m(&mut t, 3, 2, &[0.; 6], false);
        assert!(t.add(a, c).unwrap_err().to_string().contains("add"));
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut t = Tape::new();
        let x = m(&mut t, 1, 3, &[1., 2., 3.], true);
        let sq = t.square(x);
        let l = t.sum(sq);
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2., 4., 6.]);
    }

    #[test]
    fn mean_relu_gradient() {
        let mut t = Tape::new();
        let x = m(&mut t, 1, 2, &[-1., 1.], true);
        let r = t.relu(x);
        let l = t.mean(r).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[0., 0.5]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut t = Tape::new();
        let x = m(&mut t, 1, 3, &[1., 2., 3.], true);
        let sq = t.square(x);
        let l = t.sum(sq);
        t.backward(l).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[4., 8., 12.]);
        t.zero_grads();
        assert!(t.grad(x).is_none());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let x = m(&mut t, 1, 3, &[1., 2., 3.], true);
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn matmul_gradients_match_hand_values() {
        // L = sum(A·B); dL/dA = 1·Bᵀ, dL/dB = Aᵀ·1
        let mut t = Tape::new();
        let a = m(&mut t, 2, 3, &[1., 2., 3., 4., 5., 6.], true);
        let b = m(&mut t, 3, 2, &[1., -1., 2., 0., 0.5, 3.], true);
        let y = t.matmul(a, b).unwrap();
        let l = t.sum(y);
        t.backward(l).unwrap();
        assert_eq!(t.grad(a).unwrap(), &[0., 2., 3.5, 0., 2., 3.5]);
        assert_eq!(t.grad(b).unwrap(), &[5., 5., 7., 7., 9., 9.]);
    }

    #[test]
    fn segmented_pool_and_gather_route_gradients() {
        let mut t = Tape::new();
        let x = m(&mut t, 4, 2, &[1., 5., 3., 2., 0., 0., 7., -1.], true);
        let p = t.max_pool_segments(x, &[2, 2]).unwrap();
        assert_eq!(t.value(p).data(), &[3., 5., 7., 0.]);
        let g = t.gather(p, &[1, 1, 0]).unwrap();
        let l = t.sum(g);
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[0., 1., 1., 0., 0., 2., 2., 0.]);
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let mut t = Tape::new();
        let w = m(&mut t, 2, 1, &[1., 2.], false);
        let x = m(&mut t, 1, 2, &[3., 4.], true);
        let y = t.matmul(x, w).unwrap();
        let l = t.sum(y);
        t.backward(l).unwrap();
        assert!(t.grad(w).is_none());
        assert_eq!(t.grad(x).unwrap(), &[1., 2.]);
    }
}
