//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in creation order. Because inputs
//! always precede outputs on the tape, replaying it backwards is a valid
//! topological order. A graph is built for one forward pass, back-propagated
//! at most once, and then dropped.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Norms below this are treated as zero by the cosine operations, which then
/// return 0 and pass no gradient.
pub const COSINE_EPS: f64 = 1e-12;

/// Handle to a node on a [`Graph`] tape.
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
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Relu(Var),
    Sum(Var),
    Reshape(Var),
    Concat(Vec<Var>),
    GatherRows(Var, Vec<Option<usize>>),
    MaskRows(Var, Vec<bool>),
    MeanRows(Var, Vec<bool>),
    Softmax(Var, Option<Vec<bool>>),
    Cosine { a: Var, b: Var, na: f64, nb: f64 },
    CosineRows { m: Var, v: Var, row_norms: Vec<f64>, vnorm: f64 },
    Index(Var, usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backpropagated: bool,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn check_mask(op: &'static str, mask: &[bool], n: usize) -> Result<()> {
    if mask.len() != n {
        return Err(Error::Shape {
            op,
            left: vec![n],
            right: vec![mask.len()],
        });
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::InvalidMask { op });
    }
    Ok(())
}

/// Masked, max-shifted softmax over a flat slice. Masked entries are `false`
/// in `mask` and come out exactly zero.
pub fn softmax_values(x: &[f64], mask: Option<&[bool]>) -> Result<Vec<f64>> {
    let live = |i: usize| mask.is_none_or(|m| m[i]);
    if let Some(m) = mask {
        check_mask("softmax", m, x.len())?;
    } else if x.is_empty() {
        return Err(Error::InvalidMask { op: "softmax" });
    }
    let max = (0..x.len())
        .filter(|&i| live(i))
        .map(|i| x[i])
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = (0..x.len())
        .map(|i| if live(i) { (x[i] - max).exp() } else { 0.0 })
        .collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= total);
    Ok(out)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Graph {
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
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that receives gradients.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that is detached from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the back-propagated loss with respect to `v`; all zeros
    /// for nodes that are not on a path to the loss.
    pub fn grad(&self, v: Var) -> Tensor {
        let shape = self.nodes[v.0].value.shape().to_vec();
        match self.grads.get(v.0).and_then(Option::as_ref) {
            Some(g) => Tensor::new(shape, g.clone()).expect("grad shape"),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(shape_err("matmul", ta, tb));
        }
        let (p, q, r) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let (ad, bd) = (ta.data(), tb.data());
        let mut out = vec![0.0; p * r];
        for i in 0..p {
            let row = &mut out[i * r..(i + 1) * r];
            for k in 0..q {
                let aik = ad[i * q + k];
                if aik == 0.0 {
                    continue;
                }
                for (o, &bv) in row.iter_mut().zip(&bd[k * r..(k + 1) * r]) {
                    *o += aik * bv;
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(p, r, out), Op::MatMul(a, b), rg))
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a length-`k` vector to every row of an `n x k` matrix.
    pub fn add_row(&mut self, m: Var, row: Var) -> Result<Var> {
        let (tm, tr) = (self.value(m), self.value(row));
        if tm.shape().len() != 2 || tr.shape() != [tm.shape()[1]] {
            return Err(shape_err("add_row", tm, tr));
        }
        let k = tm.shape()[1];
        let mut data = tm.data().to_vec();
        for chunk in data.chunks_mut(k) {
            chunk.iter_mut().zip(tr.data()).for_each(|(o, &r)| *o += r);
        }
        let value = Tensor::matrix(tm.shape()[0], k, data);
        let rg = self.rg(m) || self.rg(row);
        Ok(self.push(value, Op::AddRow(m, row), rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        Ok(self.sum(p))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape.to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Concatenates scalars and vectors into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.shape().len() > 1 {
                return Err(Error::Shape {
                    op: "concat",
                    left: vec![],
                    right: t.shape().to_vec(),
                });
            }
            data.extend_from_slice(t.data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::vector(data), Op::Concat(parts.to_vec()), rg))
    }

    /// Builds a matrix whose row `j` is row `rows[j]` of `src`, or zeros for
    /// `None`. Zero rows pass no gradient.
    pub fn gather_rows(&mut self, src: Var, rows: &[Option<usize>]) -> Result<Var> {
        let t = self.value(src);
        if t.shape().len() != 2 {
            return Err(Error::Shape {
                op: "gather_rows",
                left: vec![0, 0],
                right: t.shape().to_vec(),
            });
        }
        let (n, k) = (t.shape()[0], t.shape()[1]);
        let mut data = vec![0.0; rows.len() * k];
        for (j, r) in rows.iter().enumerate() {
            if let Some(i) = *r {
                if i >= n {
                    return Err(Error::Index { index: i, bound: n });
                }
                data[j * k..(j + 1) * k].copy_from_slice(t.row(i));
            }
        }
        let rg = self.rg(src);
        Ok(self.push(
            Tensor::matrix(rows.len(), k, data),
            Op::GatherRows(src, rows.to_vec()),
            rg,
        ))
    }

    /// Rows `start..start + len` of a matrix.
    pub fn slice_rows(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let rows: Vec<Option<usize>> = (start..start + len).map(Some).collect();
        self.gather_rows(src, &rows)
    }

    /// Zeroes rows whose mask entry is `false`.
    pub fn mask_rows(&mut self, src: Var, mask: &[bool]) -> Result<Var> {
        let t = self.value(src);
        let n = t.rows();
        if t.shape().len() != 2 || mask.len() != n {
            return Err(Error::Shape {
                op: "mask_rows",
                left: t.shape().to_vec(),
                right: vec![mask.len()],
            });
        }
        let k = t.cols();
        let mut data = t.data().to_vec();
        for (i, &keep) in mask.iter().enumerate() {
            if !keep {
                data[i * k..(i + 1) * k].fill(0.0);
            }
        }
        let rg = self.rg(src);
        Ok(self.push(
            Tensor::matrix(n, k, data),
            Op::MaskRows(src, mask.to_vec()),
            rg,
        ))
    }

    /// Mean of the unmasked rows of an `n x k` matrix.
    pub fn mean_rows(&mut self, src: Var, mask: &[bool]) -> Result<Var> {
        let t = self.value(src);
        if t.shape().len() != 2 {
            return Err(Error::Shape {
                op: "mean_rows",
                left: vec![mask.len(), 0],
                right: t.shape().to_vec(),
            });
        }
        check_mask("mean_rows", mask, t.rows())?;
        let k = t.cols();
        let count = mask.iter().filter(|&&m| m).count() as f64;
        let mut out = vec![0.0; k];
        for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            out.iter_mut().zip(t.row(i)).for_each(|(o, &v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= count);
        let rg = self.rg(src);
        Ok(self.push(Tensor::vector(out), Op::MeanRows(src, mask.to_vec()), rg))
    }

    /// Softmax over a vector; masked (`false`) positions are exactly zero.
    pub fn softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() != 1 {
            return Err(Error::Shape {
                op: "softmax",
                left: vec![t.len()],
                right: t.shape().to_vec(),
            });
        }
        let out = softmax_values(t.data(), mask)?;
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::vector(out),
            Op::Softmax(x, mask.map(<[bool]>::to_vec)),
            rg,
        ))
    }

    /// Cosine similarity of two equal-length vectors; 0 when either norm is
    /// below [`COSINE_EPS`].
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 1 || ta.shape() != tb.shape() {
            return Err(shape_err("cosine", ta, tb));
        }
        let (na, nb) = (ta.norm(), tb.norm());
        let c = if na < COSINE_EPS || nb < COSINE_EPS {
            0.0
        } else {
            dot(ta.data(), tb.data()) / (na * nb)
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(c), Op::Cosine { a, b, na, nb }, rg))
    }

    /// Cosine similarity of every row of `m` (`n x k`) with `v` (`k`).
    pub fn cosine_rows(&mut self, m: Var, v: Var) -> Result<Var> {
        let (tm, tv) = (self.value(m), self.value(v));
        if tm.shape().len() != 2 || tv.shape() != [tm.shape()[1]] {
            return Err(shape_err("cosine_rows", tm, tv));
        }
        let vnorm = tv.norm();
        let n = tm.rows();
        let row_norms: Vec<f64> = (0..n).map(|i| dot(tm.row(i), tm.row(i)).sqrt()).collect();
        let out = (0..n)
            .map(|i| {
                if row_norms[i] < COSINE_EPS || vnorm < COSINE_EPS {
                    0.0
                } else {
                    dot(tm.row(i), tv.data()) / (row_norms[i] * vnorm)
                }
            })
            .collect();
        let rg = self.rg(m) || self.rg(v);
        Ok(self.push(
            Tensor::vector(out),
            Op::CosineRows {
                m,
                v,
                row_norms,
                vnorm,
            },
            rg,
        ))
    }

    /// Element `i` of a flat tensor, as a scalar.
    pub fn index(&mut self, a: Var, i: usize) -> Result<Var> {
        let t = self.value(a);
        if i >= t.len() {
            return Err(Error::Index {
                index: i,
                bound: t.len(),
            });
        }
        let value = Tensor::scalar(t.data()[i]);
        let rg = self.rg(a);
        Ok(self.push(value, Op::Index(a, i), rg))
    }

    /// `sum_n w_n * rows_n` for weights `w` (`n`) and `rows` (`n x k`).
    pub fn weighted_rows(&mut self, w: Var, rows: Var) -> Result<Var> {
        let n = self.value(w).len();
        let w2 = self.reshape(w, &[1, n])?;
        let out = self.matmul(w2, rows)?;
        let k = self.value(out).len();
        self.reshape(out, &[k])
    }

    /// Populates gradients of `loss` with respect to every node that requires
    /// them. May run only once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backpropagated {
            return Err(Error::AlreadyBackpropagated);
        }
        let lt = self.value(loss);
        if lt.len() != 1 || lt.shape().len() > 1 {
            return Err(Error::NotScalar(lt.shape().to_vec()));
        }
        self.backpropagated = true;
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, f: impl FnOnce(&mut [f64], &[Node])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.len();
        let buf = self.grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(buf, &self.nodes);
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        // Temporarily move the op out so inputs can be borrowed mutably.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (p, q) = {
                    let s = self.nodes[a.0].value.shape();
                    (s[0], s[1])
                };
                let r = self.nodes[b.0].value.shape()[1];
                self.accumulate(a, |da, nodes| {
                    let bd = nodes[b.0].value.data();
                    for ii in 0..p {
                        let grow = &g[ii * r..(ii + 1) * r];
                        for k in 0..q {
                            da[ii * q + k] += dot(grow, &bd[k * r..(k + 1) * r]);
                        }
                    }
                });
                self.accumulate(b, |db, nodes| {
                    let ad = nodes[a.0].value.data();
                    for ii in 0..p {
                        let grow = &g[ii * r..(ii + 1) * r];
                        for k in 0..q {
                            let aik = ad[ii * q + k];
                            if aik == 0.0 {
                                continue;
                            }
                            for (o, &gv) in db[k * r..(k + 1) * r].iter_mut().zip(grow) {
                                *o += aik * gv;
                            }
                        }
                    }
                });
            }
            &Op::Add(a, b) => {
                self.accumulate(a, |d, _| d.iter_mut().zip(g).for_each(|(o, &x)| *o += x));
                self.accumulate(b, |d, _| d.iter_mut().zip(g).for_each(|(o, &x)| *o += x));
            }
            &Op::Sub(a, b) => {
                self.accumulate(a, |d, _| d.iter_mut().zip(g).for_each(|(o, &x)| *o += x));
                self.accumulate(b, |d, _| d.iter_mut().zip(g).for_each(|(o, &x)| *o -= x));
            }
            &Op::Mul(a, b) => {
                self.accumulate(a, |d, nodes| {
                    let bd = nodes[b.0].value.data();
                    for ((o, &x), &y) in d.iter_mut().zip(g).zip(bd) {
                        *o += x * y;
                    }
                });
                self.accumulate(b, |d, nodes| {
                    let ad = nodes[a.0].value.data();
                    for ((o, &x), &y) in d.iter_mut().zip(g).zip(ad) {
                        *o += x * y;
                    }
                });
            }
            &Op::AddRow(m, row) => {
                self.accumulate(m, |d, _| d.iter_mut().zip(g).for_each(|(o, &x)| *o += x));
                self.accumulate(row, |d, _| {
                    let k = d.len();
                    for chunk in g.chunks(k) {
                        d.iter_mut().zip(chunk).for_each(|(o, &x)| *o += x);
                    }
                });
            }
            &Op::Scale(a, c) => {
                self.accumulate(a, |d, _| d.iter_mut().zip(g).for_each(|(o, &x)| *o += c * x));
            }
            &Op::AddScalar(a) | &Op::Reshape(a) => {
                self.accumulate(a, |d, _| d.iter_mut().zip(g).for_each(|(o, &x)| *o += x));
            }
            &Op::Tanh(a) => {
                let y = self.nodes[i].value.data().to_vec();
                self.accumulate(a, |d, _| {
                    for ((o, &x), &yv) in d.iter_mut().zip(g).zip(&y) {
                        *o += x * (1.0 - yv * yv);
                    }
                });
            }
            &Op::Relu(a) => {
                self.accumulate(a, |d, nodes| {
                    let xin = nodes[a.0].value.data();
                    for ((o, &x), &xv) in d.iter_mut().zip(g).zip(xin) {
                        if xv > 0.0 {
                            *o += x;
                        }
                    }
                });
            }
            &Op::Sum(a) => {
                self.accumulate(a, |d, _| d.iter_mut().for_each(|o| *o += g[0]));
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.len();
                    let slice = &g[offset..offset + n];
                    self.accumulate(p, |d, _| {
                        d.iter_mut().zip(slice).for_each(|(o, &x)| *o += x)
                    });
                    offset += n;
                }
            }
            Op::GatherRows(src, rows) => {
                let k = self.nodes[src.0].value.cols();
                self.accumulate(*src, |d, _| {
                    for (j, r) in rows.iter().enumerate() {
                        if let Some(r) = *r {
                            let gr = &g[j * k..(j + 1) * k];
                            d[r * k..(r + 1) * k]
                                .iter_mut()
                                .zip(gr)
                                .for_each(|(o, &x)| *o += x);
                        }
                    }
                });
            }
            Op::MaskRows(src, mask) => {
                let k = self.nodes[src.0].value.cols();
                self.accumulate(*src, |d, _| {
                    for (j, &keep) in mask.iter().enumerate() {
                        if keep {
                            d[j * k..(j + 1) * k]
                                .iter_mut()
                                .zip(&g[j * k..(j + 1) * k])
                                .for_each(|(o, &x)| *o += x);
                        }
                    }
                });
            }
            Op::MeanRows(src, mask) => {
                let k = self.nodes[src.0].value.cols();
                let count = mask.iter().filter(|&&m| m).count() as f64;
                self.accumulate(*src, |d, _| {
                    for (j, &keep) in mask.iter().enumerate() {
                        if keep {
                            d[j * k..(j + 1) * k]
                                .iter_mut()
                                .zip(g)
                                .for_each(|(o, &x)| *o += x / count);
                        }
                    }
                });
            }
            Op::Softmax(x, mask) => {
                let y = self.nodes[i].value.data().to_vec();
                let inner = dot(&y, g);
                self.accumulate(*x, |d, _| {
                    for (j, o) in d.iter_mut().enumerate() {
                        if mask.as_ref().is_none_or(|m| m[j]) {
                            *o += y[j] * (g[j] - inner);
                        }
                    }
                });
            }
            &Op::Cosine { a, b, na, nb } => {
                if na >= COSINE_EPS && nb >= COSINE_EPS {
                    let c = self.nodes[i].value.item();
                    let gs = g[0];
                    self.accumulate(a, |d, nodes| {
                        let (ad, bd) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                        for ((o, &av), &bv) in d.iter_mut().zip(ad).zip(bd) {
                            *o += gs * (bv / (na * nb) - c * av / (na * na));
                        }
                    });
                    self.accumulate(b, |d, nodes| {
                        let (ad, bd) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                        for ((o, &av), &bv) in d.iter_mut().zip(ad).zip(bd) {
                            *o += gs * (av / (na * nb) - c * bv / (nb * nb));
                        }
                    });
                }
            }
            Op::CosineRows {
                m,
                v,
                row_norms,
                vnorm,
            } => {
                let (m, v, vnorm) = (*m, *v, *vnorm);
                if vnorm >= COSINE_EPS {
                    let c = self.nodes[i].value.data().to_vec();
                    let k = self.nodes[v.0].value.len();
                    self.accumulate(m, |d, nodes| {
                        let (md, vd) = (nodes[m.0].value.data(), nodes[v.0].value.data());
                        for (t, &rn) in row_norms.iter().enumerate() {
                            if rn < COSINE_EPS {
                                continue;
                            }
                            let row = &md[t * k..(t + 1) * k];
                            for ((o, &mv), &vv) in
                                d[t * k..(t + 1) * k].iter_mut().zip(row).zip(vd)
                            {
                                *o += g[t] * (vv / (rn * vnorm) - c[t] * mv / (rn * rn));
                            }
                        }
                    });
                    self.accumulate(v, |d, nodes| {
                        let (md, vd) = (nodes[m.0].value.data(), nodes[v.0].value.data());
                        for (t, &rn) in row_norms.iter().enumerate() {
                            if rn < COSINE_EPS {
                                continue;
                            }
                            let row = &md[t * k..(t + 1) * k];
                            for ((o, &mv), &vv) in d.iter_mut().zip(row).zip(vd) {
                                *o += g[t] * (mv / (rn * vnorm) - c[t] * vv / (vnorm * vnorm));
                            }
                        }
                    });
                }
            }
            &Op::Index(a, j) => {
                self.accumulate(a, |d, _| d[j] += g[0]);
            }
        }
        self.nodes[i].op = op;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn matmul_identity_and_small_product() {
        let mut g = Graph::new();
        let id = g.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]));
        let col = g.constant(Tensor::matrix(2, 1, vec![3.0, 4.0]));
        let out = g.matmul(id, col).unwrap();
        assert_eq!(g.value(out).data(), &[3.0, 4.0]);
        assert_eq!(g.value(out).shape(), &[2, 1]);

        let row = g.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]));
        let out = g.matmul(row, col).unwrap();
        assert_eq!(g.value(out).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        match g.matmul(a, b) {
            Err(Error::Shape { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn softmax_examples() {
        let out = softmax_values(&[0.0, 0.0], None).unwrap();
        assert!(close(&out, &[0.5, 0.5], 1e-15));
        let out = softmax_values(&[2f64.ln(), 0.0], None).unwrap();
        assert!(close(&out, &[2.0 / 3.0, 1.0 / 3.0], 1e-15));
        let out = softmax_values(&[1000.0, 0.0], None).unwrap();
        assert!(out.iter().all(|v| v.is_finite()));
        assert!(close(&out, &[1.0, 0.0], 1e-15));
    }

    #[test]
    fn softmax_mask() {
        let out = softmax_values(&[5.0, 1.0, 1.0], Some(&[false, true, true])).unwrap();
        assert_eq!(out[0], 0.0);
        assert!(close(&out[1..], &[0.5, 0.5], 1e-15));
        assert!(matches!(
            softmax_values(&[1.0, 2.0], Some(&[false, false])),
            Err(Error::InvalidMask { .. })
        ));
    }

    #[test]
    fn cosine_examples() {
        let mut g = Graph::new();
        let mut cos = |a: Vec<f64>, b: Vec<f64>| {
            let a = g.constant(Tensor::vector(a));
            let b = g.constant(Tensor::vector(b));
            let c = g.cosine(a, b).unwrap();
            g.scalar(c)
        };
        assert!((cos(vec![1.0, 0.0], vec![1.0, 0.0]) - 1.0).abs() < 1e-15);
        assert_eq!(cos(vec![1.0, 0.0], vec![0.0, 1.0]), 0.0);
        assert!((cos(vec![1.0, 1.0], vec![1.0, 0.0]) - 0.707_106_78).abs() < 1e-8);
        assert_eq!(cos(vec![0.0, 0.0], vec![1.0, 0.0]), 0.0);
    }

    #[test]
    fn zero_norm_cosine_has_zero_gradient() {
        let mut g = Graph::new();
        let a = g.variable(Tensor::vector(vec![0.0, 0.0]));
        let b = g.variable(Tensor::vector(vec![1.0, 2.0]));
        let c = g.cosine(a, b).unwrap();
        g.backward(c).unwrap();
        assert_eq!(g.grad(a).data(), &[0.0, 0.0]);
        assert_eq!(g.grad(b).data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::vector(vec![1.0, -2.0, 3.0]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn self_cosine_has_zero_gradient() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::vector(vec![0.3, -1.2, 2.0]));
        let c = g.cosine(x, x).unwrap();
        g.backward(c).unwrap();
        assert!((g.scalar(c) - 1.0).abs() < 1e-15);
        assert!(g.grad(x).data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::vector(vec![1.0]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::AlreadyBackpropagated)));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::NotScalar(_))));
    }

    #[test]
    fn off_path_and_detached_nodes_get_zero_grad() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::vector(vec![1.0, 2.0]));
        let unused = g.variable(Tensor::vector(vec![5.0, 6.0]));
        let c = g.constant(Tensor::vector(vec![3.0, 4.0]));
        let p = g.mul(x, c).unwrap();
        let _dangling = g.tanh(unused);
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).data(), &[3.0, 4.0]);
        assert_eq!(g.grad(unused).data(), &[0.0, 0.0]);
        assert_eq!(g.grad(c).data(), &[0.0, 0.0]);
    }

    #[test]
    fn gather_rows_padding_row_is_zero() {
        let mut g = Graph::new();
        let t = g.variable(Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let rows = g.gather_rows(t, &[Some(2), None, Some(2)]).unwrap();
        assert_eq!(g.value(rows).data(), &[5.0, 6.0, 0.0, 0.0, 5.0, 6.0]);
        let s = g.sum(rows);
        g.backward(s).unwrap();
        assert_eq!(g.grad(t).data(), &[0.0, 0.0, 0.0, 0.0, 2.0, 2.0]);
        assert!(matches!(
            g.gather_rows(t, &[Some(3)]),
            Err(Error::Index { index: 3, bound: 3 })
        ));
    }

    #[test]
    fn mean_rows_respects_mask() {
        let mut g = Graph::new();
        let t = g.constant(Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 100.0, 100.0]));
        let m = g.mean_rows(t, &[true, true, false]).unwrap();
        assert_eq!(g.value(m).data(), &[2.0, 3.0]);
        assert!(matches!(
            g.mean_rows(t, &[false, false, false]),
            Err(Error::InvalidMask { .. })
        ));
    }
}
