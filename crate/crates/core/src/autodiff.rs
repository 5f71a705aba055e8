//! Minimal reverse-mode differentiation over dense matrices.
//!
//! Values are `DMatrix<f64>` nodes on a [`Tape`]. Point batches are rows;
//! batched 3x3 matrices are stored as `N x 9` with entry `(a, b)` in column
//! `3a + b`. Only the operations the losses need are provided, and each has a
//! hand-written adjoint.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Smooth elementwise nonlinearities usable inside [`Tape::dense`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    /// `ln(1 + e^x) - ln 2`: zero at the origin, slope 1/2, curvature 1/4.
    ShiftedSoftplus,
    Tanh,
}

impl Activation {
    pub fn id(self) -> u32 {
        match self {
            Activation::ShiftedSoftplus => 1,
            Activation::Tanh => 2,
        }
    }

    pub fn from_id(id: u32) -> Option<Self> {
        match id {
            1 => Some(Activation::ShiftedSoftplus),
            2 => Some(Activation::Tanh),
            _ => None,
        }
    }

    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::ShiftedSoftplus => {
                x.max(0.0) + (-x.abs()).exp().ln_1p() - std::f64::consts::LN_2
            }
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the output `a = apply(x)`.
    #[inline]
    fn slope_from_output(self, a: f64) -> f64 {
        match self {
            Activation::ShiftedSoftplus => 1.0 - 0.5 * (-a).exp(),
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Dense {
        x: Var,
        w: Var,
        b: Var,
        act: Option<Activation>,
    },
    Affine {
        x: Var,
        scale: f64,
    },
    HCat(Vec<Var>),
    Rows {
        x: Var,
        start: usize,
    },
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    StackShifts {
        x: Var,
    },
    FdJacobian {
        o: Var,
        n: usize,
        h: f64,
    },
    FdLaplacian {
        o: Var,
        n: usize,
        h: f64,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulCol(Var, Var),
    DivCol(Var, Var),
    SumCols(Var),
    SumAll(Var),
    Sqrt(Var),
    Abs(Var),
    Square(Var),
    Mat3Mul(Var, Var),
    Mat3T(Var),
    Mat3Vec(Var, Var),
    Cofactor3(Var),
    Outer3(Var, Var),
    Trace3(Var),
}

#[derive(Debug)]
struct Node {
    value: DMatrix<f64>,
    op: Op,
    needs_grad: bool,
}

/// Records operations for a single backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<DMatrix<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` if `v` does not
    /// influence it.
    pub fn get(&self, v: Var) -> Option<&DMatrix<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, zeros when `v` does not influence the loss.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> DMatrix<f64> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| DMatrix::zeros(shape.0, shape.1))
    }
}

#[inline]
fn m3(r: &[f64; 9], a: usize, b: usize) -> f64 {
    r[3 * a + b]
}

fn row9(m: &DMatrix<f64>, r: usize) -> [f64; 9] {
    std::array::from_fn(|c| m[(r, c)])
}

fn row3(m: &DMatrix<f64>, r: usize) -> [f64; 3] {
    std::array::from_fn(|c| m[(r, c)])
}

fn mat3_mul_row(a: &[f64; 9], b: &[f64; 9]) -> [f64; 9] {
    std::array::from_fn(|k| {
        let (i, j) = (k / 3, k % 3);
        (0..3).map(|l| m3(a, i, l) * m3(b, l, j)).sum()
    })
}

fn cofactor_row(a: &[f64; 9]) -> [f64; 9] {
    std::array::from_fn(|k| {
        let (i, j) = (k / 3, k % 3);
        let (i1, i2, j1, j2) = ((i + 1) % 3, (i + 2) % 3, (j + 1) % 3, (j + 2) % 3);
        m3(a, i1, j1) * m3(a, i2, j2) - m3(a, i1, j2) * m3(a, i2, j1)
    })
}

fn per_row(n: usize, cols: usize, mut f: impl FnMut(usize, &mut [f64])) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(n, cols);
    let mut buf = vec![0.0; cols];
    for r in 0..n {
        f(r, &mut buf);
        for (c, v) in buf.iter().enumerate() {
            out[(r, c)] = *v;
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &DMatrix<f64> {
        &self.nodes[v.0].value
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[(0, 0)]
    }

    fn push(&mut self, value: DMatrix<f64>, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: DMatrix<f64>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn parameter(&mut self, value: DMatrix<f64>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar_constant(&mut self, x: f64) -> Var {
        self.constant(DMatrix::from_element(1, 1, x))
    }

    /// `act(x W + 1 b)` with `x: N x in`, `W: in x out`, `b: 1 x out`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var, act: Option<Activation>) -> Var {
        let mut out = self.value(x) * self.value(w);
        let bias = self.value(b);
        for (j, mut col) in out.column_iter_mut().enumerate() {
            let bj = bias[(0, j)];
            match act {
                Some(a) => col.apply(|v| *v = a.apply(*v + bj)),
                None => col.add_scalar_mut(bj),
            }
        }
        self.push(out, Op::Dense { x, w, b, act }, &[x, w, b])
    }

    /// `scale * x + offset` with a constant row `offset` broadcast over rows.
    pub fn affine(&mut self, x: Var, scale: f64, offset: &[f64]) -> Var {
        let mut out = self.value(x) * scale;
        for (j, mut col) in out.column_iter_mut().enumerate() {
            col.add_scalar_mut(offset[j]);
        }
        self.push(out, Op::Affine { x, scale }, &[x])
    }

    pub fn hcat(&mut self, parts: &[Var]) -> Var {
        let n = self.value(parts[0]).nrows();
        let cols: usize = parts.iter().map(|p| self.value(*p).ncols()).sum();
        let mut out = DMatrix::zeros(n, cols);
        let mut c0 = 0;
        for p in parts {
            let v = self.value(*p);
            out.columns_mut(c0, v.ncols()).copy_from(v);
            c0 += v.ncols();
        }
        self.push(out, Op::HCat(parts.to_vec()), parts)
    }

    /// Rows `start .. start + len`.
    pub fn rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x).rows(start, len).into_owned();
        self.push(out, Op::Rows { x, start }, &[x])
    }

    /// Rows `idx[0], idx[1], ...` (repeats allowed).
    pub fn gather(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let src = self.value(x);
        let out = DMatrix::from_fn(idx.len(), src.ncols(), |r, c| src[(idx[r], c)]);
        self.push(out, Op::Gather { x, idx }, &[x])
    }

    /// Stencil inputs for central differences: `[x; x+h e0; x-h e0; x+h e1; ...]`.
    pub fn stack_shifts(&mut self, x: Var, h: f64) -> Var {
        let src = self.value(x);
        let (n, d) = src.shape();
        let mut out = DMatrix::zeros((2 * d + 1) * n, d);
        for block in 0..=2 * d {
            out.rows_mut(block * n, n).copy_from(src);
            if block > 0 {
                let axis = (block - 1) / 2;
                let sign = if block % 2 == 1 { h } else { -h };
                out.view_mut((block * n, axis), (n, 1)).add_scalar_mut(sign);
            }
        }
        self.push(out, Op::StackShifts { x }, &[x])
    }

    /// Central-difference Jacobian from stencil outputs `o` (`7N x 3`):
    /// `N x 9` with `(a, b) = (o_a(x + h e_b) - o_a(x - h e_b)) / 2h`.
    pub fn fd_jacobian(&mut self, o: Var, n: usize, h: f64) -> Var {
        let ov = self.value(o);
        let out = per_row(n, 9, |r, buf| {
            for b in 0..3 {
                let (p, m) = ((2 * b + 1) * n + r, (2 * b + 2) * n + r);
                for a in 0..3 {
                    buf[3 * a + b] = (ov[(p, a)] - ov[(m, a)]) / (2.0 * h);
                }
            }
        });
        self.push(out, Op::FdJacobian { o, n, h }, &[o])
    }

    /// Seven-point Laplacian from stencil outputs `o` (`7N x 3`): `N x 3`.
    pub fn fd_laplacian(&mut self, o: Var, n: usize, h: f64) -> Var {
        let ov = self.value(o);
        let inv = 1.0 / (h * h);
        let out = per_row(n, 3, |r, buf| {
            for a in 0..3 {
                let mut s = -6.0 * ov[(r, a)];
                for block in 1..7 {
                    s += ov[(block * n + r, a)];
                }
                buf[a] = s * inv;
            }
        });
        self.push(out, Op::FdLaplacian { o, n, h }, &[o])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) - self.value(b);
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).component_mul(self.value(b));
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a) * s;
        self.push(out, Op::Scale(a, s), &[a])
    }

    /// Multiplies row `r` of `a` by `c[r]` (`c: N x 1`).
    pub fn mul_col(&mut self, a: Var, c: Var) -> Var {
        let mut out = self.value(a).clone();
        let cv = self.value(c);
        for (r, mut row) in out.row_iter_mut().enumerate() {
            row *= cv[(r, 0)];
        }
        self.push(out, Op::MulCol(a, c), &[a, c])
    }

    /// Divides row `r` of `a` by `c[r]` (`c: N x 1`).
    pub fn div_col(&mut self, a: Var, c: Var) -> Var {
        let mut out = self.value(a).clone();
        let cv = self.value(c);
        for (r, mut row) in out.row_iter_mut().enumerate() {
            row /= cv[(r, 0)];
        }
        self.push(out, Op::DivCol(a, c), &[a, c])
    }

    /// Row sums, `N x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = DMatrix::from_fn(v.nrows(), 1, |r, _| v.row(r).sum());
        self.push(out, Op::SumCols(a), &[a])
    }

    /// Sum of all entries, `1 x 1`.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = DMatrix::from_element(1, 1, self.value(a).sum());
        self.push(out, Op::SumAll(a), &[a])
    }

    /// Mean of all entries, `1 x 1`; zero for an empty matrix.
    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum(a);
        if n == 0 {
            return s;
        }
        self.scale(s, 1.0 / n as f64)
    }

    /// Square root; the adjoint is taken as zero where the value is zero.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0).sqrt());
        self.push(out, Op::Sqrt(a), &[a])
    }

    /// Absolute value with subgradient 0 at 0.
    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).abs();
        self.push(out, Op::Abs(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        self.push(out, Op::Square(a), &[a])
    }

    /// Row-wise Euclidean norm, `N x 1`.
    pub fn row_norms(&mut self, a: Var) -> Var {
        let sq = self.square(a);
        let s = self.sum_cols(sq);
        self.sqrt(s)
    }

    /// Row-wise normalization.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let n = self.row_norms(a);
        self.div_col(a, n)
    }

    /// Batched `A B` on `N x 9` operands.
    pub fn mat3_mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let out = per_row(av.nrows(), 9, |r, buf| {
            buf.copy_from_slice(&mat3_mul_row(&row9(av, r), &row9(bv, r)));
        });
        self.push(out, Op::Mat3Mul(a, b), &[a, b])
    }

    /// Batched transpose.
    pub fn mat3_t(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out = DMatrix::from_fn(av.nrows(), 9, |r, k| av[(r, 3 * (k % 3) + k / 3)]);
        self.push(out, Op::Mat3T(a), &[a])
    }

    /// Batched `A v` with `v: N x 3`.
    pub fn mat3_vec(&mut self, a: Var, v: Var) -> Var {
        let (av, vv) = (self.value(a), self.value(v));
        let out = per_row(av.nrows(), 3, |r, buf| {
            let (m, x) = (row9(av, r), row3(vv, r));
            for i in 0..3 {
                buf[i] = (0..3).map(|k| m3(&m, i, k) * x[k]).sum();
            }
        });
        self.push(out, Op::Mat3Vec(a, v), &[a, v])
    }

    /// Batched cofactor matrix, `det(A) A^{-T}`.
    pub fn cofactor3(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out = per_row(av.nrows(), 9, |r, buf| {
            buf.copy_from_slice(&cofactor_row(&row9(av, r)))
        });
        self.push(out, Op::Cofactor3(a), &[a])
    }

    /// Batched outer product `u vᵀ` of `N x 3` operands.
    pub fn outer3(&mut self, u: Var, v: Var) -> Var {
        let (uv, vv) = (self.value(u), self.value(v));
        let out = DMatrix::from_fn(uv.nrows(), 9, |r, k| uv[(r, k / 3)] * vv[(r, k % 3)]);
        self.push(out, Op::Outer3(u, v), &[u, v])
    }

    /// Batched trace, `N x 1`.
    pub fn trace3(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out = DMatrix::from_fn(av.nrows(), 1, |r, _| av[(r, 0)] + av[(r, 4)] + av[(r, 8)]);
        self.push(out, Op::Trace3(a), &[a])
    }

    /// `N x 9` constant holding the identity in every row.
    pub fn identity3(&mut self, n: usize) -> Var {
        self.constant(DMatrix::from_fn(
            n,
            9,
            |_, k| if k % 4 == 0 { 1.0 } else { 0.0 },
        ))
    }

    /// Reverse accumulation from the `1 x 1` node `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(Error::DimensionMismatch(format!(
                "loss must be 1x1, got {shape:?}"
            )));
        }
        let mut grads: Vec<Option<DMatrix<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(DMatrix::from_element(1, 1, 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.propagate(&node.op, idx, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, op: &Op, idx: usize, g: &DMatrix<f64>, grads: &mut [Option<DMatrix<f64>>]) {
        let out = &self.nodes[idx].value;
        let mut acc = |v: Var, delta: DMatrix<f64>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += delta,
                slot => *slot = Some(delta),
            }
        };
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        match op {
            Op::Leaf => {}
            Op::Dense { x, w, b, act } => {
                let pre = match act {
                    Some(a) => g.zip_map(out, |gi, oi| gi * a.slope_from_output(oi)),
                    None => g.clone(),
                };
                if wants(*w) {
                    acc(*w, self.value(*x).transpose() * &pre);
                }
                if wants(*b) {
                    acc(
                        *b,
                        DMatrix::from_fn(1, pre.ncols(), |_, j| pre.column(j).sum()),
                    );
                }
                if wants(*x) {
                    acc(*x, &pre * self.value(*w).transpose());
                }
            }
            Op::Affine { x, scale } => acc(*x, g * *scale),
            Op::HCat(parts) => {
                let mut c0 = 0;
                for p in parts {
                    let cols = self.value(*p).ncols();
                    if wants(*p) {
                        acc(*p, g.columns(c0, cols).into_owned());
                    }
                    c0 += cols;
                }
            }
            Op::Rows { x, start } => {
                let src = self.value(*x);
                let mut d = DMatrix::zeros(src.nrows(), src.ncols());
                d.rows_mut(*start, g.nrows()).copy_from(g);
                acc(*x, d);
            }
            Op::Gather { x, idx } => {
                let src = self.value(*x);
                let mut d = DMatrix::zeros(src.nrows(), src.ncols());
                for (r, &i) in idx.iter().enumerate() {
                    for c in 0..src.ncols() {
                        d[(i, c)] += g[(r, c)];
                    }
                }
                acc(*x, d);
            }
            Op::StackShifts { x, .. } => {
                let n = self.value(*x).nrows();
                let mut d = g.rows(0, n).into_owned();
                for block in 1..g.nrows() / n {
                    d += g.rows(block * n, n);
                }
                acc(*x, d);
            }
            Op::FdJacobian { o, n, h } => {
                let n = *n;
                let mut d = DMatrix::zeros(7 * n, 3);
                for r in 0..n {
                    for b in 0..3 {
                        for a in 0..3 {
                            let v = g[(r, 3 * a + b)] / (2.0 * h);
                            d[((2 * b + 1) * n + r, a)] += v;
                            d[((2 * b + 2) * n + r, a)] -= v;
                        }
                    }
                }
                acc(*o, d);
            }
            Op::FdLaplacian { o, n, h } => {
                let n = *n;
                let inv = 1.0 / (h * h);
                let mut d = DMatrix::zeros(7 * n, 3);
                for r in 0..n {
                    for a in 0..3 {
                        let v = g[(r, a)] * inv;
                        d[(r, a)] = -6.0 * v;
                        for block in 1..7 {
                            d[(block * n + r, a)] = v;
                        }
                    }
                }
                acc(*o, d);
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    acc(*a, g.clone());
                }
                if wants(*b) {
                    acc(*b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    acc(*a, g.clone());
                }
                if wants(*b) {
                    acc(*b, -g);
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    acc(*a, g.component_mul(self.value(*b)));
                }
                if wants(*b) {
                    acc(*b, g.component_mul(self.value(*a)));
                }
            }
            Op::Scale(a, s) => acc(*a, g * *s),
            Op::MulCol(a, c) => {
                let (av, cv) = (self.value(*a), self.value(*c));
                if wants(*a) {
                    let mut d = g.clone();
                    for (r, mut row) in d.row_iter_mut().enumerate() {
                        row *= cv[(r, 0)];
                    }
                    acc(*a, d);
                }
                if wants(*c) {
                    acc(
                        *c,
                        DMatrix::from_fn(av.nrows(), 1, |r, _| g.row(r).dot(&av.row(r))),
                    );
                }
            }
            Op::DivCol(a, c) => {
                let cv = self.value(*c);
                if wants(*a) {
                    let mut d = g.clone();
                    for (r, mut row) in d.row_iter_mut().enumerate() {
                        row /= cv[(r, 0)];
                    }
                    acc(*a, d);
                }
                if wants(*c) {
                    // d(a/c)/dc = -(a/c)/c = -out/c
                    acc(
                        *c,
                        DMatrix::from_fn(out.nrows(), 1, |r, _| {
                            -g.row(r).dot(&out.row(r)) / cv[(r, 0)]
                        }),
                    );
                }
            }
            Op::SumCols(a) => {
                let cols = self.value(*a).ncols();
                acc(*a, DMatrix::from_fn(g.nrows(), cols, |r, _| g[(r, 0)]));
            }
            Op::SumAll(a) => {
                let (r, c) = self.value(*a).shape();
                acc(*a, DMatrix::from_element(r, c, g[(0, 0)]));
            }
            Op::Sqrt(a) => acc(
                *a,
                g.zip_map(out, |gi, oi| if oi > 0.0 { gi / (2.0 * oi) } else { 0.0 }),
            ),
            Op::Abs(a) => acc(
                *a,
                g.zip_map(self.value(*a), |gi, x| {
                    gi * x.signum() * (x != 0.0) as u8 as f64
                }),
            ),
            Op::Square(a) => acc(*a, g.zip_map(self.value(*a), |gi, x| 2.0 * gi * x)),
            Op::Mat3Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let n = av.nrows();
                if wants(*a) {
                    // dA = G Bᵀ
                    acc(
                        *a,
                        per_row(n, 9, |r, buf| {
                            let (gr, br) = (row9(g, r), row9(bv, r));
                            for i in 0..3 {
                                for k in 0..3 {
                                    buf[3 * i + k] =
                                        (0..3).map(|j| m3(&gr, i, j) * m3(&br, k, j)).sum();
                                }
                            }
                        }),
                    );
                }
                if wants(*b) {
                    // dB = Aᵀ G
                    acc(
                        *b,
                        per_row(n, 9, |r, buf| {
                            let (gr, ar) = (row9(g, r), row9(av, r));
                            for k in 0..3 {
                                for j in 0..3 {
                                    buf[3 * k + j] =
                                        (0..3).map(|i| m3(&ar, i, k) * m3(&gr, i, j)).sum();
                                }
                            }
                        }),
                    );
                }
            }
            Op::Mat3T(a) => acc(
                *a,
                DMatrix::from_fn(g.nrows(), 9, |r, k| g[(r, 3 * (k % 3) + k / 3)]),
            ),
            Op::Mat3Vec(a, v) => {
                let (av, vv) = (self.value(*a), self.value(*v));
                if wants(*a) {
                    acc(
                        *a,
                        DMatrix::from_fn(g.nrows(), 9, |r, k| g[(r, k / 3)] * vv[(r, k % 3)]),
                    );
                }
                if wants(*v) {
                    acc(
                        *v,
                        DMatrix::from_fn(g.nrows(), 3, |r, k| {
                            (0..3).map(|i| av[(r, 3 * i + k)] * g[(r, i)]).sum()
                        }),
                    );
                }
            }
            Op::Cofactor3(a) => {
                let av = self.value(*a);
                acc(
                    *a,
                    per_row(av.nrows(), 9, |r, buf| {
                        let (m, gr) = (row9(av, r), row9(g, r));
                        buf.fill(0.0);
                        for i in 0..3 {
                            for j in 0..3 {
                                let gv = m3(&gr, i, j);
                                let (i1, i2, j1, j2) =
                                    ((i + 1) % 3, (i + 2) % 3, (j + 1) % 3, (j + 2) % 3);
                                buf[3 * i1 + j1] += gv * m3(&m, i2, j2);
                                buf[3 * i2 + j2] += gv * m3(&m, i1, j1);
                                buf[3 * i1 + j2] -= gv * m3(&m, i2, j1);
                                buf[3 * i2 + j1] -= gv * m3(&m, i1, j2);
                            }
                        }
                    }),
                );
            }
            Op::Outer3(u, v) => {
                let (uv, vv) = (self.value(*u), self.value(*v));
                if wants(*u) {
                    acc(
                        *u,
                        DMatrix::from_fn(g.nrows(), 3, |r, i| {
                            (0..3).map(|j| g[(r, 3 * i + j)] * vv[(r, j)]).sum()
                        }),
                    );
                }
                if wants(*v) {
                    acc(
                        *v,
                        DMatrix::from_fn(g.nrows(), 3, |r, j| {
                            (0..3).map(|i| g[(r, 3 * i + j)] * uv[(r, i)]).sum()
                        }),
                    );
                }
            }
            Op::Trace3(a) => {
                acc(
                    *a,
                    DMatrix::from_fn(
                        g.nrows(),
                        9,
                        |r, k| if k % 4 == 0 { g[(r, 0)] } else { 0.0 },
                    ),
                );
            }
        }
    }
}

/// Determinant of a row-packed 3x3 matrix.
pub fn det3_row(m: &[f64; 9]) -> f64 {
    m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6])
        + m[2] * (m[3] * m[7] - m[4] * m[6])
}

/// Row `r` of an `N x 9` matrix as a row-packed 3x3.
pub fn mat3_row(m: &DMatrix<f64>, r: usize) -> [f64; 9] {
    row9(m, r)
}
