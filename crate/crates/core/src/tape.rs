//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value and the recipe
//! for pushing gradients back to its inputs. Inputs always precede their
//! consumers, so walking the node list from the end is a reverse
//! topological traversal. Parameters are registered as borrowed leaves, so
//! building a tape never copies the (possibly large) embedding table.

use alloc::borrow::Cow;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{self, axpy, dot, Tensor};

/// Floor applied to probabilities before taking a logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Token id whose embedding lookup is always the zero vector.
pub const PAD_ID: u32 = 0;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => tensor::sigmoid(x),
            Activation::Tanh => tensor::tanh(x),
            Activation::Relu => tensor::relu(x),
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Mul(Var, Var),
    Affine { a: Var, scale: f64 },
    AddConst(Var),
    LogClamped(Var),
    Activation { a: Var, kind: Activation },
    Softmax(Var),
    Concat { parts: Vec<Var>, axis: usize },
    SliceCols { a: Var, start: usize },
    Rows { a: Var, start: usize },
    Embed { table: Var, ids: Vec<u32> },
    Conv { x: Var, kernel: Var, bias: Var, batch: usize },
    RowMix { weights: Var, a: Var, b: Var },
    BroadcastRows(Var),
    DotConst { a: Var, w: Tensor },
    Sum(Var),
    Square(Var),
    CrossEntropy { probs: Var, labels: Vec<usize> },
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
}

/// Ordered record of executed operations. Single-threaded; several tapes
/// may share the same borrowed parameters concurrently.
#[derive(Default)]
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
}

/// Gradient slots produced by [`Tape::backward`], one per recorded value.
#[derive(Debug, Clone)]
pub struct Gradients {
    slots: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of `v`, or `None` if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.slots.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, zero-filled when unreachable from the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn slot<'g>(slots: &'g mut [Option<Tensor>], shapes: &[Vec<usize>], v: Var) -> &'g mut Tensor {
    slots[v.0].get_or_insert_with(|| Tensor::zeros(&shapes[v.0]))
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an owned input value.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Records a borrowed input value, typically a model parameter.
    pub fn param(&mut self, value: &'p Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `x W^T + b` for `x: [n x in]`, `W: [out x in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (n, input) = xv.dims2("linear")?;
        let (outputs, win) = wv.dims2("linear")?;
        if input != win {
            return Err(shape_err("linear", xv, wv));
        }
        let bias = match b {
            Some(b) => {
                let bv = self.value(b);
                if bv.len() != outputs {
                    return Err(shape_err("linear", wv, bv));
                }
                Some(bv.data())
            }
            None => None,
        };
        let mut out = vec![0.0; n * outputs];
        for i in 0..n {
            tensor::matvec_bias(
                wv.data(),
                bias,
                xv.row(i),
                &mut out[i * outputs..(i + 1) * outputs],
            );
        }
        let out = Tensor::matrix(n, outputs, out)?;
        Ok(self.push(out, Op::Linear { x, w, b }))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(op, av, bv));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// `scale * a + shift`, elementwise.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|x| scale * x + shift).collect();
        let out = Tensor::new(av.shape().to_vec(), data).expect("same length");
        self.push(out, Op::Affine { a, scale })
    }

    /// Adds a constant tensor that receives no gradient.
    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        let av = self.value(a);
        if av.shape() != c.shape() {
            return Err(shape_err("add_const", av, c));
        }
        let mut out = av.clone();
        out.add_assign(c);
        Ok(self.push(out, Op::AddConst(a)))
    }

    /// `ln(max(a, 1e-12))`, elementwise.
    pub fn log_clamped(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .map(|&x| libm::log(x.max(PROB_FLOOR)))
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data).expect("same length");
        self.push(out, Op::LogClamped(a))
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| kind.apply(x)).collect();
        let out = Tensor::new(av.shape().to_vec(), data).expect("same length");
        self.push(out, Op::Activation { a, kind })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Tanh)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Relu)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        if out.last_dim() == 0 {
            return Err(Error::Empty("softmax over a zero-length axis"));
        }
        for r in 0..out.rows() {
            tensor::softmax_in_place(out.row_mut(r));
        }
        Ok(self.push(out, Op::Softmax(a)))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = match parts.first() {
            Some(&p) => self.value(p),
            None => return Err(Error::Empty("concat of zero parts")),
        };
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::Axis {
                op: "concat",
                axis,
                rank,
            });
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = 0;
        for &p in parts {
            let pv = self.value(p);
            let compatible = pv.rank() == rank
                && pv
                    .shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(shape_err("concat", first, pv));
            }
            shape[axis] += pv.shape()[axis];
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let pv = self.value(p);
                let chunk = pv.shape()[axis] * inner;
                data.extend_from_slice(&pv.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let out = Tensor::new(shape, data)?;
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        let (rows, cols) = av.dims2("slice_cols")?;
        if start + len > cols {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: av.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&av.row(r)[start..start + len]);
        }
        let out = Tensor::matrix(rows, len, data)?;
        Ok(self.push(out, Op::SliceCols { a, start }))
    }

    /// Rows `start..start + count` of a matrix.
    pub fn rows(&mut self, a: Var, start: usize, count: usize) -> Result<Var> {
        let av = self.value(a);
        let (rows, cols) = av.dims2("rows")?;
        if start + count > rows {
            return Err(Error::Shape {
                op: "rows",
                lhs: av.shape().to_vec(),
                rhs: vec![start, count],
            });
        }
        let data = av.data()[start * cols..(start + count) * cols].to_vec();
        let out = Tensor::matrix(count, cols, data)?;
        Ok(self.push(out, Op::Rows { a, start }))
    }

    /// Looks up rows of an embedding table; [`PAD_ID`] yields a zero row
    /// and never receives gradient.
    pub fn embed(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let tv = self.value(table);
        let (vocab, dim) = tv.dims2("embed")?;
        let mut data = vec![0.0; ids.len() * dim];
        for (i, &id) in ids.iter().enumerate() {
            if id as usize >= vocab {
                return Err(Error::Token { id, vocab });
            }
            if id != PAD_ID {
                data[i * dim..(i + 1) * dim].copy_from_slice(tv.row(id as usize));
            }
        }
        let out = Tensor::matrix(ids.len(), dim, data)?;
        Ok(self.push(
            out,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// One-dimensional convolution along time over a time-major batch.
    ///
    /// `x` is `[(T*batch) x d]` with row `t*batch + b` holding position `t`
    /// of sequence `b`. `kernel` is `[w x d x F]`, `bias` is `[F]`. Output
    /// row `t*batch + b` sees positions `t..t+w`; positions past `T` are
    /// treated as zeros.
    pub fn conv1d(&mut self, x: Var, kernel: Var, bias: Var, batch: usize) -> Result<Var> {
        let (xv, kv, bv) = (self.value(x), self.value(kernel), self.value(bias));
        let (rows, d) = xv.dims2("conv1d")?;
        let (width, kd, filters) = match kv.shape() {
            [w, kd, f] => (*w, *kd, *f),
            _ => return Err(shape_err("conv1d", xv, kv)),
        };
        if kd != d || bv.len() != filters || batch == 0 || rows % batch != 0 {
            return Err(shape_err("conv1d", xv, kv));
        }
        let steps = rows / batch;
        let mut out = vec![0.0; rows * filters];
        for t in 0..steps {
            for b in 0..batch {
                let o = &mut out[(t * batch + b) * filters..(t * batch + b + 1) * filters];
                o.copy_from_slice(bv.data());
                for j in 0..width.min(steps - t) {
                    let xr = xv.row((t + j) * batch + b);
                    for (i, &xi) in xr.iter().enumerate() {
                        if xi != 0.0 {
                            let k = &kv.data()[(j * d + i) * filters..(j * d + i + 1) * filters];
                            axpy(xi, k, o);
                        }
                    }
                }
            }
        }
        let out = Tensor::matrix(rows, filters, out)?;
        Ok(self.push(
            out,
            Op::Conv {
                x,
                kernel,
                bias,
                batch,
            },
        ))
    }

    /// Per-row convex-style mixture `w[i,0] * a[i,:] + w[i,1] * b[i,:]`.
    pub fn row_mix(&mut self, weights: Var, a: Var, b: Var) -> Result<Var> {
        self.same_shape("row_mix", a, b)?;
        let (wv, av, bv) = (self.value(weights), self.value(a), self.value(b));
        let (rows, cols) = av.dims2("row_mix")?;
        if wv.shape() != [rows, 2] {
            return Err(shape_err("row_mix", wv, av));
        }
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let (w0, w1) = (wv.row(r)[0], wv.row(r)[1]);
            let o = &mut data[r * cols..(r + 1) * cols];
            for ((slot, x), y) in o.iter_mut().zip(av.row(r)).zip(bv.row(r)) {
                *slot = w0 * x + w1 * y;
            }
        }
        let out = Tensor::matrix(rows, cols, data)?;
        Ok(self.push(out, Op::RowMix { weights, a, b }))
    }

    /// Repeats a vector as `n` rows.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Var {
        let av = self.value(a);
        let cols = av.len();
        let mut data = Vec::with_capacity(n * cols);
        for _ in 0..n {
            data.extend_from_slice(av.data());
        }
        let out = Tensor::matrix(n, cols, data).expect("consistent");
        self.push(out, Op::BroadcastRows(a))
    }

    /// Scalar `sum(a * w)` with a constant weight tensor.
    pub fn dot_const(&mut self, a: Var, w: Tensor) -> Result<Var> {
        let av = self.value(a);
        if av.shape() != w.shape() {
            return Err(shape_err("dot_const", av, &w));
        }
        let out = Tensor::scalar(dot(av.data(), w.data()));
        Ok(self.push(out, Op::DotConst { a, w }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|x| x * x).collect();
        let out = Tensor::new(av.shape().to_vec(), data).expect("same length");
        self.push(out, Op::Square(a))
    }

    /// Mean over rows of `-ln(max(probs[row, label], 1e-12))`.
    pub fn cross_entropy(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let pv = self.value(probs);
        let (rows, classes) = pv.dims2("cross_entropy")?;
        if rows != labels.len() {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: pv.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if rows == 0 {
            return Err(Error::Empty("cross_entropy over zero rows"));
        }
        let mut total = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            if label >= classes {
                return Err(Error::Label { label, classes });
            }
            total -= libm::log(pv.row(r)[label].max(PROB_FLOOR));
        }
        let out = Tensor::scalar(total / rows as f64);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                probs,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Gumbel-softmax relaxation of sampling from the rows of `pi` with
    /// fixed noise `gumbel` (same shape) and temperature `tau`. The noise is
    /// a constant; gradients flow through `pi`.
    pub fn gumbel_softmax(&mut self, pi: Var, gumbel: &Tensor, tau: f64) -> Result<Var> {
        if !(tau > 0.0) {
            return Err(Error::Parameter {
                name: "tau",
                value: tau,
            });
        }
        let logp = self.log_clamped(pi);
        let perturbed = self.add_const(logp, gumbel)?;
        let scaled = self.affine(perturbed, 1.0 / tau, 0.0);
        self.softmax(scaled)
    }

    /// Propagates gradients from the scalar `loss` back through the tape.
    /// The tape is left untouched, so replaying gives identical results.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NotScalar {
                shape: lv.shape().to_vec(),
            });
        }
        let shapes: Vec<Vec<usize>> = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let mut slots: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        slots[loss.0] = Some(Tensor::filled(lv.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let g = match slots[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(i, &g, &mut slots, &shapes);
            slots[i] = Some(g);
        }
        Ok(Gradients { slots, shapes })
    }

    fn backprop_node(
        &self,
        i: usize,
        g: &Tensor,
        slots: &mut [Option<Tensor>],
        shapes: &[Vec<usize>],
    ) {
        let out = &self.nodes[i].value;
        let val = |v: Var| -> &Tensor { &self.nodes[v.0].value };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                {
                    let ga = slot(slots, shapes, *a);
                    for r in 0..m {
                        let grow = &g.data()[r * n..(r + 1) * n];
                        for p in 0..k {
                            ga.data_mut()[r * k + p] += dot(grow, &bv.data()[p * n..(p + 1) * n]);
                        }
                    }
                }
                let gb = slot(slots, shapes, *b);
                for r in 0..m {
                    let grow = &g.data()[r * n..(r + 1) * n];
                    for p in 0..k {
                        let a_rp = av.data()[r * k + p];
                        if a_rp != 0.0 {
                            axpy(a_rp, grow, &mut gb.data_mut()[p * n..(p + 1) * n]);
                        }
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (val(*x), val(*w));
                let n = xv.shape()[0];
                let input = xv.shape()[1];
                let outputs = wv.shape()[0];
                {
                    let gx = slot(slots, shapes, *x);
                    for r in 0..n {
                        let grow = &g.data()[r * outputs..(r + 1) * outputs];
                        let dst = &mut gx.data_mut()[r * input..(r + 1) * input];
                        for (o, &go) in grow.iter().enumerate() {
                            if go != 0.0 {
                                axpy(go, &wv.data()[o * input..(o + 1) * input], dst);
                            }
                        }
                    }
                }
                {
                    let gw = slot(slots, shapes, *w);
                    for r in 0..n {
                        let grow = &g.data()[r * outputs..(r + 1) * outputs];
                        let xrow = xv.row(r);
                        for (o, &go) in grow.iter().enumerate() {
                            if go != 0.0 {
                                axpy(go, xrow, &mut gw.data_mut()[o * input..(o + 1) * input]);
                            }
                        }
                    }
                }
                if let Some(b) = b {
                    let gb = slot(slots, shapes, *b);
                    for r in 0..n {
                        axpy(1.0, &g.data()[r * outputs..(r + 1) * outputs], gb.data_mut());
                    }
                }
            }
            Op::Add(a, b) => {
                slot(slots, shapes, *a).add_assign(g);
                slot(slots, shapes, *b).add_assign(g);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                {
                    let ga = slot(slots, shapes, *a);
                    for ((s, gi), bi) in ga.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                        *s += gi * bi;
                    }
                }
                let gb = slot(slots, shapes, *b);
                for ((s, gi), ai) in gb.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                    *s += gi * ai;
                }
            }
            Op::Affine { a, scale } => {
                axpy(*scale, g.data(), slot(slots, shapes, *a).data_mut());
            }
            Op::AddConst(a) => {
                slot(slots, shapes, *a).add_assign(g);
            }
            Op::LogClamped(a) => {
                let av = val(*a);
                let ga = slot(slots, shapes, *a);
                for ((s, gi), &x) in ga.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                    if x > PROB_FLOOR {
                        *s += gi / x;
                    }
                }
            }
            Op::Activation { a, kind } => {
                let av = val(*a);
                let ga = slot(slots, shapes, *a);
                for (((s, gi), &x), &y) in ga
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .zip(av.data())
                    .zip(out.data())
                {
                    *s += gi * kind.derivative(x, y);
                }
            }
            Op::Softmax(a) => {
                let n = out.last_dim();
                let ga = slot(slots, shapes, *a);
                for r in 0..out.rows() {
                    let y = out.row(r);
                    let gr = &g.data()[r * n..(r + 1) * n];
                    let inner = dot(gr, y);
                    let dst = &mut ga.data_mut()[r * n..(r + 1) * n];
                    for j in 0..n {
                        dst[j] += y[j] * (gr[j] - inner);
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let shape = out.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let mut offset = 0;
                for o in 0..outer {
                    for p in parts {
                        let chunk = shapes[p.0][*axis] * inner;
                        let gp = slot(slots, shapes, *p);
                        axpy(
                            1.0,
                            &g.data()[offset..offset + chunk],
                            &mut gp.data_mut()[o * chunk..(o + 1) * chunk],
                        );
                        offset += chunk;
                    }
                }
            }
            Op::SliceCols { a, start } => {
                let len = out.last_dim();
                let cols = shapes[a.0][1];
                let ga = slot(slots, shapes, *a);
                for r in 0..out.rows() {
                    axpy(
                        1.0,
                        &g.data()[r * len..(r + 1) * len],
                        &mut ga.data_mut()[r * cols + start..r * cols + start + len],
                    );
                }
            }
            Op::Rows { a, start } => {
                let cols = out.last_dim();
                let ga = slot(slots, shapes, *a);
                let begin = start * cols;
                axpy(1.0, g.data(), &mut ga.data_mut()[begin..begin + g.len()]);
            }
            Op::Embed { table, ids } => {
                let dim = out.last_dim();
                let gt = slot(slots, shapes, *table);
                for (r, &id) in ids.iter().enumerate() {
                    if id != PAD_ID {
                        let id = id as usize;
                        axpy(
                            1.0,
                            &g.data()[r * dim..(r + 1) * dim],
                            &mut gt.data_mut()[id * dim..(id + 1) * dim],
                        );
                    }
                }
            }
            Op::Conv {
                x,
                kernel,
                bias,
                batch,
            } => {
                let (xv, kv) = (val(*x), val(*kernel));
                let (rows, d) = (xv.shape()[0], xv.shape()[1]);
                let (width, filters) = (kv.shape()[0], kv.shape()[2]);
                let steps = rows / batch;
                {
                    let gb = slot(slots, shapes, *bias);
                    for r in 0..rows {
                        axpy(1.0, &g.data()[r * filters..(r + 1) * filters], gb.data_mut());
                    }
                }
                {
                    let gx = slot(slots, shapes, *x);
                    for t in 0..steps {
                        for b in 0..*batch {
                            let grow = &g.data()[(t * batch + b) * filters..(t * batch + b + 1) * filters];
                            for j in 0..width.min(steps - t) {
                                let xr = (t + j) * batch + b;
                                let dst = &mut gx.data_mut()[xr * d..(xr + 1) * d];
                                for (i, slot_i) in dst.iter_mut().enumerate() {
                                    let k = &kv.data()[(j * d + i) * filters..(j * d + i + 1) * filters];
                                    *slot_i += dot(grow, k);
                                }
                            }
                        }
                    }
                }
                let gk = slot(slots, shapes, *kernel);
                for t in 0..steps {
                    for b in 0..*batch {
                        let grow = &g.data()[(t * batch + b) * filters..(t * batch + b + 1) * filters];
                        for j in 0..width.min(steps - t) {
                            let xrow = xv.row((t + j) * batch + b);
                            for (i, &xi) in xrow.iter().enumerate() {
                                if xi != 0.0 {
                                    axpy(
                                        xi,
                                        grow,
                                        &mut gk.data_mut()[(j * d + i) * filters..(j * d + i + 1) * filters],
                                    );
                                }
                            }
                        }
                    }
                }
            }
            Op::RowMix { weights, a, b } => {
                let (wv, av, bv) = (val(*weights), val(*a), val(*b));
                let cols = out.last_dim();
                let rows = out.rows();
                {
                    let gw = slot(slots, shapes, *weights);
                    for r in 0..rows {
                        let gr = &g.data()[r * cols..(r + 1) * cols];
                        gw.data_mut()[2 * r] += dot(gr, av.row(r));
                        gw.data_mut()[2 * r + 1] += dot(gr, bv.row(r));
                    }
                }
                {
                    let ga = slot(slots, shapes, *a);
                    for r in 0..rows {
                        let w0 = wv.row(r)[0];
                        if w0 != 0.0 {
                            axpy(w0, &g.data()[r * cols..(r + 1) * cols], ga.row_mut(r));
                        }
                    }
                }
                let gb = slot(slots, shapes, *b);
                for r in 0..rows {
                    let w1 = wv.row(r)[1];
                    if w1 != 0.0 {
                        axpy(w1, &g.data()[r * cols..(r + 1) * cols], gb.row_mut(r));
                    }
                }
            }
            Op::BroadcastRows(a) => {
                let ga = slot(slots, shapes, *a);
                let cols = ga.len();
                for r in 0..out.rows() {
                    axpy(1.0, &g.data()[r * cols..(r + 1) * cols], ga.data_mut());
                }
            }
            Op::DotConst { a, w } => {
                axpy(g.data()[0], w.data(), slot(slots, shapes, *a).data_mut());
            }
            Op::Sum(a) => {
                let s = g.data()[0];
                for v in slot(slots, shapes, *a).data_mut() {
                    *v += s;
                }
            }
            Op::Square(a) => {
                let av = val(*a);
                let ga = slot(slots, shapes, *a);
                for ((s, gi), x) in ga.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                    *s += 2.0 * x * gi;
                }
            }
            Op::CrossEntropy { probs, labels } => {
                let pv = val(*probs);
                let n = labels.len() as f64;
                let scale = g.data()[0] / n;
                let gp = slot(slots, shapes, *probs);
                for (r, &label) in labels.iter().enumerate() {
                    let p = pv.row(r)[label];
                    if p > PROB_FLOOR {
                        gp.row_mut(r)[label] -= scale / p;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::matrix(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap());
        let loss = tape.sum(p);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.wrt(p).data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn zero_times_function_gives_zero_gradient() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::vector(vec![0.3, -0.7]));
        let f = tape.tanh(p);
        let s = tape.sum(f);
        let loss = tape.affine(s, 0.0, 0.0);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.wrt(p).data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn unreachable_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let q = tape.leaf(Tensor::vector(vec![3.0]));
        let loss = tape.sum(p);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(q).is_none());
        assert_eq!(grads.wrt(q).data(), &[0.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(p), Err(Error::NotScalar { .. })));
    }

    #[test]
    fn activation_values() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.0, -3.2, 3.2]));
        let s = tape.sigmoid(x);
        let r = tape.relu(x);
        assert_eq!(tape.value(s).data()[0], 0.5);
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 3.2]);
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::matrix(3, 2, vec![0.0, 0.0, 1000.0, 1000.0, 0.0, libm::log(3.0)]).unwrap());
        let s = tape.softmax(a).unwrap();
        let v = tape.value(s).data();
        assert_eq!(&v[..4], &[0.5, 0.5, 0.5, 0.5]);
        assert!(approx(v[4], 0.25, 1e-15) && approx(v[5], 0.75, 1e-15));
    }

    #[test]
    fn concat_single_part_is_identity() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let c = tape.concat(&[a], 1).unwrap();
        assert_eq!(tape.value(c), tape.value(a));
    }

    #[test]
    fn concat_feature_sizes() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 300]));
        let h = tape.leaf(Tensor::zeros(&[1, 300]));
        let f = tape.leaf(Tensor::zeros(&[1, 200]));
        let c = tape.concat(&[x, h, f], 1).unwrap();
        assert_eq!(tape.value(c).shape(), &[1, 800]);
    }

    #[test]
    fn concat_errors() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 2]));
        let b = tape.leaf(Tensor::zeros(&[3, 3]));
        assert!(matches!(tape.concat(&[a, b], 1), Err(Error::Shape { .. })));
        assert!(matches!(tape.concat(&[a], 2), Err(Error::Axis { .. })));
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::matrix(1, 3, vec![0.0, 1.0, 0.0]).unwrap());
        let l = tape.cross_entropy(p, &[1]).unwrap();
        assert_eq!(tape.value(l).data()[0], 0.0);
        let u = tape.leaf(Tensor::filled(&[2, 4], 0.25));
        let l = tape.cross_entropy(u, &[0, 3]).unwrap();
        assert!(approx(tape.value(l).data()[0], libm::log(4.0), 1e-15));
        assert!(matches!(tape.cross_entropy(u, &[0, 4]), Err(Error::Label { .. })));
    }

    #[test]
    fn gumbel_softmax_rejects_nonpositive_tau() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::matrix(1, 2, vec![0.5, 0.5]).unwrap());
        let g = Tensor::zeros(&[1, 2]);
        assert!(tape.gumbel_softmax(p, &g, 0.0).is_err());
        assert!(tape.gumbel_softmax(p, &g, -1.0).is_err());
    }

    #[test]
    fn gumbel_softmax_low_temperature_is_argmax() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::matrix(1, 2, vec![0.5, 0.5]).unwrap());
        let g = Tensor::matrix(1, 2, vec![0.3, 0.1]).unwrap();
        let y = tape.gumbel_softmax(p, &g, 1e-4).unwrap();
        let v = tape.value(y).data();
        assert!(approx(v[0], 1.0, 1e-12) && approx(v[1], 0.0, 1e-12));
    }

    #[test]
    fn embed_pad_is_zero_and_bad_ids_fail() {
        let mut tape = Tape::new();
        let t = tape.leaf(Tensor::matrix(3, 2, vec![9.0, 9.0, 1.0, 2.0, 3.0, 4.0]).unwrap());
        let e = tape.embed(t, &[2, 0, 1]).unwrap();
        assert_eq!(tape.value(e).data(), &[3.0, 4.0, 0.0, 0.0, 1.0, 2.0]);
        assert!(matches!(tape.embed(t, &[3]), Err(Error::Token { .. })));
    }

    #[test]
    fn replaying_backward_is_identical() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::matrix(2, 2, vec![0.1, 0.2, -0.3, 0.4]).unwrap());
        let b = tape.leaf(Tensor::matrix(2, 2, vec![1.0, -1.0, 0.5, 2.0]).unwrap());
        let m = tape.matmul(a, b).unwrap();
        let t = tape.tanh(m);
        let loss = tape.sum(t);
        let g1 = tape.backward(loss).unwrap();
        let g2 = tape.backward(loss).unwrap();
        assert_eq!(g1.wrt(a), g2.wrt(a));
        assert_eq!(g1.wrt(b), g2.wrt(b));
    }
}
