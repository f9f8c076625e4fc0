//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`GradTape`] records every operation executed through it, in execution
//! order. Each recorded node keeps its forward value and the handles of its
//! parents, so [`GradTape::backward`] can walk the nodes in reverse and
//! accumulate vector-Jacobian products into every node that depends on a
//! `requires_grad` leaf.
//!
//! The tape is meant to be rebuilt for every forward pass:
//!
//! ```
//! use plasticity::autodiff::GradTape;
//! use plasticity::tensor::Tensor;
//!
//! let mut tape = GradTape::new();
//! let w = tape.leaf(Tensor::scalar(3.0).with_requires_grad(true)).unwrap();
//! let y = tape.square(w).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(w).unwrap(), &[6.0]);
//! ```
//!
//! ReLU's derivative at exactly zero is taken to be zero.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`GradTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    /// `x · wᵀ + b` with `x: [n × in]`, `w: [out × in]`, `b: [out]`.
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `[n × d] + [d]`, broadcast over rows.
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Minimum(Var, Var),
    /// `[n × d] -> [n × 1]`
    SumRows(Var),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of executed operations.
#[derive(Debug, Default)]
pub struct GradTape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by [`GradTape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to `var`, if it depends on a `requires_grad` leaf.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{op}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = slot.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, var: Var) -> f64 {
        self.nodes[var.0].value.data()[0]
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Result<Var> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        value.ensure_finite(op_name(&op))?;
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records an input. It participates in differentiation iff
    /// `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Result<Var> {
        let rg = tensor.requires_grad();
        self.push(tensor, Op::Leaf, rg)
    }

    /// Records a non-differentiable input.
    pub fn constant(&mut self, tensor: Tensor) -> Result<Var> {
        self.push(tensor.with_requires_grad(false), Op::Leaf, false)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        if xv.shape().len() != 2 || wv.shape().len() != 2 || xv.cols() != wv.cols() {
            return Err(Error::Shape(format!(
                "linear: input {:?} against weights {:?}",
                xv.shape(),
                wv.shape()
            )));
        }
        let (n, d_in, d_out) = (xv.rows(), xv.cols(), wv.rows());
        if let Some(b) = b {
            if self.value(b).len() != d_out {
                return Err(Error::Shape(format!(
                    "linear: bias {:?} for {d_out} outputs",
                    self.value(b).shape()
                )));
            }
        }
        let mut out = vec![0.0; n * d_out];
        let (xd, wd) = (xv.data(), wv.data());
        for k in 0..n {
            let xr = &xd[k * d_in..(k + 1) * d_in];
            let or = &mut out[k * d_out..(k + 1) * d_out];
            for (i, o) in or.iter_mut().enumerate() {
                let wr = &wd[i * d_in..(i + 1) * d_in];
                *o = dot(xr, wr);
            }
        }
        if let Some(b) = b {
            let bd = self.value(b).data();
            for row in out.chunks_mut(d_out) {
                for (o, bb) in row.iter_mut().zip(bd) {
                    *o += bb;
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(
            Tensor::matrix(n, d_out, out)?,
            Op::Linear { x, w, b },
            needs,
        )
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(av, bv, name)?;
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        self.push(t, op, needs)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let t = self.value(a).map(f);
        let needs = self.needs(a);
        self.push(t, op, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "minimum", f64::min, Op::Minimum(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        if av.cols() != rv.len() {
            return Err(Error::Shape(format!(
                "add_row: {:?} + {:?}",
                av.shape(),
                rv.shape()
            )));
        }
        let d = av.cols();
        let mut data = av.data().to_vec();
        for r in data.chunks_mut(d) {
            for (x, y) in r.iter_mut().zip(rv.data()) {
                *x += y;
            }
        }
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(row);
        self.push(t, Op::AddRow(a, row), needs)
    }

    /// Multiplies every row of `a` elementwise by the vector `row`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        if av.cols() != rv.len() {
            return Err(Error::Shape(format!(
                "mul_row: {:?} * {:?}",
                av.shape(),
                rv.shape()
            )));
        }
        let d = av.cols();
        let mut data = av.data().to_vec();
        for r in data.chunks_mut(d) {
            for (x, y) in r.iter_mut().zip(rv.data()) {
                *x *= y;
            }
        }
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(row);
        self.push(t, Op::MulRow(a, row), needs)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(Error::InvalidArgument(format!("clamp bounds {lo} > {hi}")));
        }
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (n, d) = (av.rows(), av.cols());
        let data = av.data().chunks(d).map(|r| r.iter().sum()).collect();
        let t = Tensor::matrix(n, 1, data)?;
        let needs = self.needs(a);
        self.push(t, Op::SumRows(a), needs)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), needs)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.is_empty() {
            return Err(Error::Shape("mean of an empty tensor".into()));
        }
        let s = av.data().iter().sum::<f64>() / av.len() as f64;
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), Op::Mean(a), needs)
    }

    /// Mean squared error between two equally shaped nodes.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let diff = self.sub(pred, target)?;
        let sq = self.square(diff)?;
        self.mean(sq)
    }

    /// Runs the reverse sweep from `output`, which must be a single-element
    /// node. The tape can only be consumed once.
    pub fn backward(&mut self, output: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let out = &self.nodes[output.0].value;
        if out.len() != 1 {
            return Err(Error::NotScalar(out.shape().to_vec()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![1.0]);

        for idx in (0..=output.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        // Every requires_grad leaf gets a gradient, even when disconnected.
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if matches!(node.op, Op::Leaf) && node.needs_grad && g.is_none() {
                *g = Some(vec![0.0; node.value.len()]);
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let y = node.value.data();
        match node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let xv = self.value(x);
                let wv = self.value(w);
                let (n, d_in, d_out) = (xv.rows(), xv.cols(), wv.rows());
                if self.needs(x) {
                    accumulate(&mut grads[x.0], n * d_in, |dx| {
                        for k in 0..n {
                            let dxr = &mut dx[k * d_in..(k + 1) * d_in];
                            for i in 0..d_out {
                                let gi = g[k * d_out + i];
                                if gi != 0.0 {
                                    axpy(dxr, gi, wv.row(i));
                                }
                            }
                        }
                    });
                }
                if self.needs(w) {
                    accumulate(&mut grads[w.0], d_out * d_in, |dw| {
                        for k in 0..n {
                            let xr = xv.row(k);
                            for i in 0..d_out {
                                let gi = g[k * d_out + i];
                                if gi != 0.0 {
                                    axpy(&mut dw[i * d_in..(i + 1) * d_in], gi, xr);
                                }
                            }
                        }
                    });
                }
                if let Some(b) = b.filter(|&b| self.needs(b)) {
                    accumulate(&mut grads[b.0], d_out, |db| {
                        for row in g.chunks(d_out) {
                            for (d, gi) in db.iter_mut().zip(row) {
                                *d += gi;
                            }
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.needs(v) {
                        accumulate(&mut grads[v.0], g.len(), |d| axpy(d, 1.0, g));
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.needs(a) {
                    accumulate(&mut grads[a.0], g.len(), |d| axpy(d, 1.0, g));
                }
                if self.needs(b) {
                    accumulate(&mut grads[b.0], g.len(), |d| axpy(d, -1.0, g));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                if self.needs(a) {
                    accumulate(&mut grads[a.0], g.len(), |d| {
                        for ((d, gi), bi) in d.iter_mut().zip(g).zip(bv) {
                            *d += gi * bi;
                        }
                    });
                }
                if self.needs(b) {
                    accumulate(&mut grads[b.0], g.len(), |d| {
                        for ((d, gi), ai) in d.iter_mut().zip(g).zip(av) {
                            *d += gi * ai;
                        }
                    });
                }
            }
            Op::Minimum(a, b) => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                // Ties route the gradient to `a`.
                if self.needs(a) {
                    accumulate(&mut grads[a.0], g.len(), |d| {
                        for i in 0..g.len() {
                            if av[i] <= bv[i] {
                                d[i] += g[i];
                            }
                        }
                    });
                }
                if self.needs(b) {
                    accumulate(&mut grads[b.0], g.len(), |d| {
                        for i in 0..g.len() {
                            if av[i] > bv[i] {
                                d[i] += g[i];
                            }
                        }
                    });
                }
            }
            Op::AddRow(a, row) => {
                if self.needs(a) {
                    accumulate(&mut grads[a.0], g.len(), |d| axpy(d, 1.0, g));
                }
                if self.needs(row) {
                    let dcols = self.value(row).len();
                    accumulate(&mut grads[row.0], dcols, |d| {
                        for r in g.chunks(dcols) {
                            axpy(d, 1.0, r);
                        }
                    });
                }
            }
            Op::MulRow(a, row) => {
                let (av, rv) = (self.value(a).data(), self.value(row).data());
                let dcols = rv.len();
                if self.needs(a) {
                    accumulate(&mut grads[a.0], g.len(), |d| {
                        for (dr, gr) in d.chunks_mut(dcols).zip(g.chunks(dcols)) {
                            for ((d, gi), ri) in dr.iter_mut().zip(gr).zip(rv) {
                                *d += gi * ri;
                            }
                        }
                    });
                }
                if self.needs(row) {
                    accumulate(&mut grads[row.0], dcols, |d| {
                        for (ar, gr) in av.chunks(dcols).zip(g.chunks(dcols)) {
                            for ((d, gi), ai) in d.iter_mut().zip(gr).zip(ar) {
                                *d += gi * ai;
                            }
                        }
                    });
                }
            }
            Op::Scale(a, c) => {
                accumulate(&mut grads[a.0], g.len(), |d| axpy(d, c, g));
            }
            Op::AddScalar(a) => {
                accumulate(&mut grads[a.0], g.len(), |d| axpy(d, 1.0, g));
            }
            Op::Relu(a) => {
                accumulate(&mut grads[a.0], g.len(), |d| {
                    for ((d, gi), yi) in d.iter_mut().zip(g).zip(y) {
                        if *yi > 0.0 {
                            *d += gi;
                        }
                    }
                });
            }
            Op::Tanh(a) => {
                accumulate(&mut grads[a.0], g.len(), |d| {
                    for ((d, gi), yi) in d.iter_mut().zip(g).zip(y) {
                        *d += gi * (1.0 - yi * yi);
                    }
                });
            }
            Op::Exp(a) => {
                accumulate(&mut grads[a.0], g.len(), |d| {
                    for ((d, gi), yi) in d.iter_mut().zip(g).zip(y) {
                        *d += gi * yi;
                    }
                });
            }
            Op::Square(a) => {
                let av = self.value(a).data();
                accumulate(&mut grads[a.0], g.len(), |d| {
                    for ((d, gi), ai) in d.iter_mut().zip(g).zip(av) {
                        *d += 2.0 * gi * ai;
                    }
                });
            }
            Op::Clamp(a, lo, hi) => {
                let av = self.value(a).data();
                accumulate(&mut grads[a.0], g.len(), |d| {
                    for ((d, gi), ai) in d.iter_mut().zip(g).zip(av) {
                        if *ai >= lo && *ai <= hi {
                            *d += gi;
                        }
                    }
                });
            }
            Op::SumRows(a) => {
                let av = self.value(a);
                let dcols = av.cols();
                accumulate(&mut grads[a.0], av.len(), |d| {
                    for (r, gi) in d.chunks_mut(dcols).zip(g) {
                        for x in r {
                            *x += gi;
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let n = self.value(a).len();
                accumulate(&mut grads[a.0], n, |d| {
                    for x in d {
                        *x += g[0];
                    }
                });
            }
            Op::Mean(a) => {
                let n = self.value(a).len();
                let s = g[0] / n as f64;
                accumulate(&mut grads[a.0], n, |d| {
                    for x in d {
                        *x += s;
                    }
                });
            }
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Linear { .. } => "linear",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::AddRow(..) => "add_row",
        Op::MulRow(..) => "mul_row",
        Op::Scale(..) => "scale",
        Op::AddScalar(..) => "add_scalar",
        Op::Relu(_) => "relu",
        Op::Tanh(_) => "tanh",
        Op::Exp(_) => "exp",
        Op::Square(_) => "square",
        Op::Clamp(..) => "clamp",
        Op::Minimum(..) => "minimum",
        Op::SumRows(_) => "sum_rows",
        Op::Sum(_) => "sum",
        Op::Mean(_) => "mean",
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}
