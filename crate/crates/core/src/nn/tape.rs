//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! Every operation appends a node holding its forward value. Node indices
//! are a topological order, so the backward pass is a single reverse sweep
//! that visits each node once.

use super::kernels;
use super::tensor::{Real, Tensor};
use super::{NnError, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Linear { x: Var, w: Var, b: Var },
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, scale: T },
    AddConst(Var),
    Abs(Var),
    NegXLogX(Var),
    Softmax { x: Var, axis: usize },
    SumAxis { x: Var, axis: usize },
    SumAll(Var),
    MeanAll(Var),
    RowSqNorm(Var),
    Gather { x: Var, idx: Vec<usize> },
    BatchMatVec { m: Var, z: Var },
    OuterRows(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a forward computation for one backward pass.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar with respect to every node that requires one.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, or zeros shaped like `like` when `v` did not
    /// influence the output.
    pub fn take_or_zeros(&mut self, v: Var, like: &Tensor<T>) -> Tensor<T> {
        self.grads[v.0].take().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

fn shape_err<T>(msg: String) -> Result<T> {
    Err(NnError::Shape(msg))
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A differentiable input (a parameter).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    fn push_raw(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(NnError::NonFinite(name));
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push_raw(value, op, requires_grad))
    }

    fn same_shape(&self, a: Var, b: Var, name: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!("{name}: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn matrix(&self, v: Var, name: &str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => shape_err(format!("{name}: expected a matrix, got {s:?}")),
        }
    }

    /// `x Wᵀ + b` with `x: [rows, in]`, `W: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (rows, inp) = self.matrix(x, "linear input")?;
        let (out, w_in) = self.matrix(w, "linear weight")?;
        if w_in != inp || self.shape(b) != [out] {
            return shape_err(format!(
                "linear: x {:?}, W {:?}, b {:?}",
                self.shape(x),
                self.shape(w),
                self.shape(b)
            ));
        }
        let y = kernels::linear(self.value(x).data(), rows, self.value(w).data(), self.value(b).data(), inp, out);
        self.push("linear", Tensor::new(y, vec![rows, out])?, Op::Linear { x, w, b }, &[x, w, b])
    }

    fn unary(&mut self, name: &'static str, x: Var, f: fn(&[T]) -> Vec<T>, op: Op<T>) -> Result<Var> {
        let y = f(self.value(x).data());
        let shape = self.shape(x).to_vec();
        self.push(name, Tensor::new(y, shape)?, op, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, kernels::relu, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, kernels::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, kernels::sigmoid, Op::Sigmoid(x))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary("abs", x, |d| d.iter().map(|v| v.abs()).collect(), Op::Abs(x))
    }

    /// Elementwise `-x ln x` with `0 ln 0 = 0`.
    pub fn neg_xlogx(&mut self, x: Var) -> Result<Var> {
        self.unary(
            "neg_xlogx",
            x,
            |d| d.iter().map(|&v| if v > T::zero() { -(v * v.ln()) } else { T::zero() }).collect(),
            Op::NegXLogX(x),
        )
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let y: Vec<T> = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        self.push(name, Tensor::new(y, shape)?, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Result<Var> {
        let y = self.value(x).map(|v| scale * v + shift);
        self.push("affine", y, Op::Affine { x, scale }, &[x])
    }

    /// `x + c` for a constant tensor of the same shape.
    pub fn add_const(&mut self, x: Var, c: &Tensor<T>) -> Result<Var> {
        if self.shape(x) != c.shape() {
            return shape_err(format!("add_const: {:?} vs {:?}", self.shape(x), c.shape()));
        }
        let y: Vec<T> = self.value(x).data().iter().zip(c.data()).map(|(&a, &b)| a + b).collect();
        let shape = self.shape(x).to_vec();
        self.push("add_const", Tensor::new(y, shape)?, Op::AddConst(x), &[x])
    }

    /// Softmax of a matrix along `axis` (0: each column sums to one; 1: each row).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (rows, cols) = self.matrix(x, "softmax")?;
        if axis > 1 {
            return shape_err(format!("softmax: axis {axis} on a matrix"));
        }
        let y = kernels::softmax(self.value(x).data(), rows, cols, axis);
        self.push("softmax", Tensor::new(y, vec![rows, cols])?, Op::Softmax { x, axis }, &[x])
    }

    /// Sum of a matrix along `axis`, dropping that axis.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (rows, cols) = self.matrix(x, "sum_axis")?;
        let d = self.value(x).data();
        let y = match axis {
            0 => (0..cols).map(|c| (0..rows).fold(T::zero(), |acc, r| acc + d[r * cols + c])).collect(),
            1 => (0..rows).map(|r| d[r * cols..(r + 1) * cols].iter().fold(T::zero(), |acc, &v| acc + v)).collect(),
            _ => return shape_err(format!("sum_axis: axis {axis} on a matrix")),
        };
        let n = if axis == 0 { cols } else { rows };
        self.push("sum_axis", Tensor::new(y, vec![n])?, Op::SumAxis { x, axis }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().fold(T::zero(), |acc, &v| acc + v);
        self.push("sum", Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return shape_err("mean of an empty tensor".into());
        }
        let s = self.value(x).data().iter().fold(T::zero(), |acc, &v| acc + v);
        self.push("mean", Tensor::scalar(s / T::of(n as f64)), Op::MeanAll(x), &[x])
    }

    /// Squared Euclidean norm of every row: `[rows, cols] -> [rows]`.
    pub fn row_sq_norm(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.matrix(x, "row_sq_norm")?;
        let y = kernels::row_sq_norm(self.value(x).data(), rows, cols);
        self.push("row_sq_norm", Tensor::new(y, vec![rows])?, Op::RowSqNorm(x), &[x])
    }

    /// Selects rows of a matrix: `y[r] = x[idx[r]]`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols) = self.matrix(x, "gather_rows")?;
        if let Some(bad) = idx.iter().find(|&&i| i >= rows) {
            return shape_err(format!("gather_rows: index {bad} out of {rows} rows"));
        }
        let d = self.value(x).data();
        let mut y = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            y.extend_from_slice(&d[i * cols..(i + 1) * cols]);
        }
        self.push("gather_rows", Tensor::new(y, vec![idx.len(), cols])?, Op::Gather { x, idx: idx.to_vec() }, &[x])
    }

    /// Per-row matrix-vector products: `m: [rows, d*d]`, `z: [rows, d]`.
    pub fn batch_matvec(&mut self, m: Var, z: Var) -> Result<Var> {
        let (rows, dd) = self.matrix(m, "batch_matvec matrices")?;
        let (zrows, d) = self.matrix(z, "batch_matvec vectors")?;
        if zrows != rows || d * d != dd {
            return shape_err(format!("batch_matvec: {:?} vs {:?}", self.shape(m), self.shape(z)));
        }
        let y = kernels::batch_matvec(self.value(m).data(), self.value(z).data(), rows, d);
        self.push("batch_matvec", Tensor::new(y, vec![rows, d])?, Op::BatchMatVec { m, z }, &[m, z])
    }

    /// Per-row outer products `p pᵀ`: `[rows, d] -> [rows, d*d]`.
    pub fn outer_rows(&mut self, p: Var) -> Result<Var> {
        let (rows, d) = self.matrix(p, "outer_rows")?;
        let x = self.value(p).data();
        let mut y = Vec::with_capacity(rows * d * d);
        for r in 0..rows {
            let pr = &x[r * d..(r + 1) * d];
            for i in 0..d {
                for j in 0..d {
                    y.push(pr[i] * pr[j]);
                }
            }
        }
        self.push("outer_rows", Tensor::new(y, vec![rows, d * d])?, Op::OuterRows(p), &[p])
    }

    /// Mean over all elements of `(a - b)²`.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let diff = self.sub(a, b)?;
        let sq = self.mul(diff, diff)?;
        self.mean(sq)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        if self.value(output).len() != 1 {
            return shape_err(format!("backward needs a scalar, got {:?}", self.shape(output)));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(self.shape(output), T::one()));
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (rows, inp) = self.matrix(*x, "").unwrap();
                let out = self.shape(*w)[0];
                if self.wants(*w) {
                    let dw = acc(grads, *w, self.shape(*w));
                    // dW += dYᵀ X
                    T::gemm_raw(out, rows, inp, T::one(), gd, 1, out, self.value(*x).data(), inp, 1, T::one(), dw, inp, 1);
                }
                if self.wants(*b) {
                    let db = acc(grads, *b, self.shape(*b));
                    for r in 0..rows {
                        for (o, v) in db.iter_mut().enumerate() {
                            *v += gd[r * out + o];
                        }
                    }
                }
                if self.wants(*x) {
                    let dx = acc(grads, *x, self.shape(*x));
                    // dX += dY W
                    T::gemm_raw(rows, out, inp, T::one(), gd, out, 1, self.value(*w).data(), inp, 1, T::one(), dx, inp, 1);
                }
            }
            Op::Relu(x) => {
                let xd = self.value(*x).data();
                let dx = acc(grads, *x, self.shape(*x));
                for k in 0..dx.len() {
                    if xd[k] > T::zero() {
                        dx[k] += gd[k];
                    }
                }
            }
            Op::Tanh(x) => {
                let dx = acc(grads, *x, self.shape(*x));
                for k in 0..dx.len() {
                    dx[k] += gd[k] * (T::one() - y[k] * y[k]);
                }
            }
            Op::Sigmoid(x) => {
                let dx = acc(grads, *x, self.shape(*x));
                for k in 0..dx.len() {
                    dx[k] += gd[k] * y[k] * (T::one() - y[k]);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        add_into(acc(grads, v, self.shape(v)), gd, T::one());
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    add_into(acc(grads, *a, self.shape(*a)), gd, T::one());
                }
                if self.wants(*b) {
                    add_into(acc(grads, *b, self.shape(*b)), gd, -T::one());
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let bd = self.value(*b).data();
                    let da = acc(grads, *a, self.shape(*a));
                    for k in 0..da.len() {
                        da[k] += gd[k] * bd[k];
                    }
                }
                if self.wants(*b) {
                    let ad = self.value(*a).data();
                    let db = acc(grads, *b, self.shape(*b));
                    for k in 0..db.len() {
                        db[k] += gd[k] * ad[k];
                    }
                }
            }
            Op::Affine { x, scale } => add_into(acc(grads, *x, self.shape(*x)), gd, *scale),
            Op::AddConst(x) => add_into(acc(grads, *x, self.shape(*x)), gd, T::one()),
            Op::Abs(x) => {
                let xd = self.value(*x).data();
                let dx = acc(grads, *x, self.shape(*x));
                for k in 0..dx.len() {
                    if xd[k] > T::zero() {
                        dx[k] += gd[k];
                    } else if xd[k] < T::zero() {
                        dx[k] -= gd[k];
                    }
                }
            }
            Op::NegXLogX(x) => {
                let xd = self.value(*x).data();
                let dx = acc(grads, *x, self.shape(*x));
                for k in 0..dx.len() {
                    if xd[k] > T::zero() {
                        dx[k] -= gd[k] * (xd[k].ln() + T::one());
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let (rows, cols) = self.matrix(*x, "").unwrap();
                let dx = acc(grads, *x, self.shape(*x));
                let (outer, inner, so, si) = if *axis == 1 { (rows, cols, cols, 1) } else { (cols, rows, 1, cols) };
                for o in 0..outer {
                    let at = |k: usize| o * so + k * si;
                    let dot = (0..inner).fold(T::zero(), |s, k| s + gd[at(k)] * y[at(k)]);
                    for k in 0..inner {
                        dx[at(k)] += y[at(k)] * (gd[at(k)] - dot);
                    }
                }
            }
            Op::SumAxis { x, axis } => {
                let (rows, cols) = self.matrix(*x, "").unwrap();
                let dx = acc(grads, *x, self.shape(*x));
                for r in 0..rows {
                    for c in 0..cols {
                        dx[r * cols + c] += if *axis == 0 { gd[c] } else { gd[r] };
                    }
                }
            }
            Op::SumAll(x) => {
                let dx = acc(grads, *x, self.shape(*x));
                dx.iter_mut().for_each(|v| *v += gd[0]);
            }
            Op::MeanAll(x) => {
                let dx = acc(grads, *x, self.shape(*x));
                let s = gd[0] / T::of(dx.len() as f64);
                dx.iter_mut().for_each(|v| *v += s);
            }
            Op::RowSqNorm(x) => {
                let (_, cols) = self.matrix(*x, "").unwrap();
                let xd = self.value(*x).data();
                let dx = acc(grads, *x, self.shape(*x));
                let two = T::of(2.0);
                for k in 0..dx.len() {
                    dx[k] += two * xd[k] * gd[k / cols];
                }
            }
            Op::Gather { x, idx } => {
                let (_, cols) = self.matrix(*x, "").unwrap();
                let dx = acc(grads, *x, self.shape(*x));
                for (r, &src) in idx.iter().enumerate() {
                    for c in 0..cols {
                        dx[src * cols + c] += gd[r * cols + c];
                    }
                }
            }
            Op::BatchMatVec { m, z } => {
                let (rows, d) = self.matrix(*z, "").unwrap();
                if self.wants(*m) {
                    let zd = self.value(*z).data();
                    let dm = acc(grads, *m, self.shape(*m));
                    for r in 0..rows {
                        for i in 0..d {
                            let gi = gd[r * d + i];
                            for j in 0..d {
                                dm[r * d * d + i * d + j] += gi * zd[r * d + j];
                            }
                        }
                    }
                }
                if self.wants(*z) {
                    let md = self.value(*m).data();
                    let dz = acc(grads, *z, self.shape(*z));
                    for r in 0..rows {
                        for i in 0..d {
                            let gi = gd[r * d + i];
                            for j in 0..d {
                                dz[r * d + j] += md[r * d * d + i * d + j] * gi;
                            }
                        }
                    }
                }
            }
            Op::OuterRows(p) => {
                let (rows, d) = self.matrix(*p, "").unwrap();
                let pd = self.value(*p).data();
                let dp = acc(grads, *p, self.shape(*p));
                for r in 0..rows {
                    let base = r * d * d;
                    for i in 0..d {
                        let mut s = T::zero();
                        for j in 0..d {
                            s += (gd[base + i * d + j] + gd[base + j * d + i]) * pd[r * d + j];
                        }
                        dp[r * d + i] += s;
                    }
                }
            }
        }
    }
}

fn acc<'a, T: Real>(grads: &'a mut [Option<Tensor<T>>], v: Var, shape: &[usize]) -> &'a mut [T] {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape)).data_mut()
}

fn add_into<T: Real>(dst: &mut [T], src: &[T], scale: T) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += scale * s;
    }
}
