//! Reverse-mode automatic differentiation over a recorded operation tape.
//!
//! Every node holds a dense row-major matrix. Batches live in rows, features
//! in columns; images are stored as `(batch * height * width) x channels`.
//! Operations evaluate eagerly when they are recorded and
//! [`Tape::backward`] replays them in reverse.

use std::fmt::Debug;
use std::ops::AddAssign;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Floating point element type of the tape (`f32` for training, `f64` for
/// gradient checks).
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Send + Sync + AddAssign + 'static
{
    /// `c = alpha * a * b + beta * c` with arbitrary strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 conversion")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("f64 conversion")
    }
}

macro_rules! real_impl {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: callers pass slices that cover every strided index
                // for the given shapes (checked in `matmul_into`).
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    )
                }
            }
        }
    };
}

real_impl!(f32, matrixmultiply::sgemm);
real_impl!(f64, matrixmultiply::dgemm);

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_f64(rows: usize, cols: usize, data: &[f64]) -> Result<Self> {
        Matrix::from_vec(rows, cols, data.iter().map(|&v| T::of(v)).collect())
    }

    pub fn filled(rows: usize, cols: usize, v: T) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    fn same_shape(&self, o: &Matrix<T>) -> bool {
        self.rows == o.rows && self.cols == o.cols
    }
}

/// `out (+)= op(a) * op(b)`, where `op` optionally transposes.
fn matmul_into<T: Real>(a: &Matrix<T>, ta: bool, b: &Matrix<T>, tb: bool, out: &mut Matrix<T>, accumulate: bool) {
    let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (k2, n) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, k2, "inner dimensions");
    assert_eq!((out.rows, out.cols), (m, n), "output shape");
    let (rsa, csa) = if ta { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if tb { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    if k == 0 {
        if !accumulate {
            out.data.iter_mut().for_each(|v| *v = T::zero());
        }
        return;
    }
    T::gemm(
        m,
        k,
        n,
        T::one(),
        &a.data,
        rsa,
        csa,
        &b.data,
        rsb,
        csb,
        beta,
        &mut out.data,
        out.cols as isize,
        1,
    );
}

/// Pairwise (tree) summation with a fixed association order.
pub fn pairwise_sum<T: Real>(xs: &[T]) -> T {
    if xs.len() <= 8 {
        let mut s = T::zero();
        for &x in xs {
            s += x;
        }
        return s;
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Image layout of a matrix: `batch * height * width` rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImgShape {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
}

impl ImgShape {
    pub fn new(batch: usize, height: usize, width: usize) -> Self {
        ImgShape { batch, height, width }
    }

    pub fn pixels(&self) -> usize {
        self.batch * self.height * self.width
    }

    pub fn half(&self) -> ImgShape {
        ImgShape::new(self.batch, self.height / 2, self.width / 2)
    }

    pub fn double(&self) -> ImgShape {
        ImgShape::new(self.batch, self.height * 2, self.width * 2)
    }

    fn row(&self, b: usize, y: usize, x: usize) -> usize {
        (b * self.height + y) * self.width + x
    }
}

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param { offset: usize },
    Affine { x: Var, w: Var, b: Var },
    MatMul { a: Var, b: Var },
    Relu(Var),
    Softplus(Var),
    Sigmoid(Var),
    Sin(Var),
    Cos(Var),
    Exp(Var),
    Log1p(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulCol { x: Var, col: Var },
    Scale(Var, f64),
    Sum(Var),
    Concat(Var, Var),
    Slice { x: Var, start: usize },
    Conv3x3 { x: Var, w: Var, b: Var, shape: ImgShape },
    Down2 { x: Var, shape: ImgShape },
    Up2 { x: Var, shape: ImgShape },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param { .. } => "param",
            Op::Affine { .. } => "affine",
            Op::MatMul { .. } => "matmul",
            Op::Relu(_) => "relu",
            Op::Softplus(_) => "softplus",
            Op::Sigmoid(_) => "sigmoid",
            Op::Sin(_) => "sin",
            Op::Cos(_) => "cos",
            Op::Exp(_) => "exp",
            Op::Log1p(_) => "log1p",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::MulCol { .. } => "mul_col",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::Conv3x3 { .. } => "conv3x3",
            Op::Down2 { .. } => "down2",
            Op::Up2 { .. } => "up2",
        }
    }
}

struct Node<T> {
    op: Op,
    value: Matrix<T>,
    /// Cached im2col matrix for convolutions.
    aux: Option<Matrix<T>>,
}

/// Gradients produced by one backward pass.
pub struct Gradients<T> {
    /// Gradient for every parameter of the store the tape read from.
    pub params: Vec<T>,
    adjoints: Vec<Option<Matrix<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Adjoint of any node (zero matrix when nothing flowed into it).
    pub fn adjoint(&self, v: Var, rows: usize, cols: usize) -> Matrix<T> {
        self.adjoints
            .get(v.0)
            .and_then(|a| a.clone())
            .unwrap_or_else(|| Matrix::zeros(rows, cols))
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus_t<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn sigmoid_t<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Operation record.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
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

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Matrix<T>, aux: Option<Matrix<T>>) -> Result<Var> {
        if value.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite value in node {} ({})",
                self.nodes.len(),
                op.name()
            )));
        }
        self.nodes.push(Node { op, value, aux });
        Ok(Var(self.nodes.len() - 1))
    }

    fn val(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn input(&mut self, m: Matrix<T>) -> Result<Var> {
        self.push(Op::Input, m, None)
    }

    /// Reads a `rows x cols` block of `params` starting at `offset`.
    pub fn param(&mut self, params: &[T], offset: usize, rows: usize, cols: usize) -> Result<Var> {
        let data = params
            .get(offset..offset + rows * cols)
            .ok_or_else(|| Error::dim("parameter block out of range"))?
            .to_vec();
        self.push(Op::Param { offset }, Matrix { rows, cols, data }, None)
    }

    /// `x * w + b` with `b` a `1 x out` row broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.val(x), self.val(w), self.val(b));
        if xv.cols != wv.rows || bv.rows != 1 || bv.cols != wv.cols {
            return Err(Error::dim(format!(
                "affine {:?} x {:?} + {:?}",
                xv.shape(),
                wv.shape(),
                bv.shape()
            )));
        }
        let mut out = Matrix::zeros(xv.rows, wv.cols);
        for r in 0..out.rows {
            out.data[r * out.cols..(r + 1) * out.cols].copy_from_slice(&bv.data);
        }
        matmul_into(xv, false, wv, false, &mut out, true);
        self.push(Op::Affine { x, w, b }, out, None)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.val(a), self.val(b));
        if av.cols != bv.rows {
            return Err(Error::dim(format!("matmul {:?} x {:?}", av.shape(), bv.shape())));
        }
        let mut out = Matrix::zeros(av.rows, bv.cols);
        matmul_into(av, false, bv, false, &mut out, false);
        self.push(Op::MatMul { a, b }, out, None)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(T) -> T) -> Result<Var> {
        let xv = self.val(x);
        let out = Matrix {
            rows: xv.rows,
            cols: xv.cols,
            data: xv.data.iter().map(|&v| f(v)).collect(),
        };
        self.push(op, out, None)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Relu(x), |v| v.max(T::zero()))
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Softplus(x), softplus_t)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Sigmoid(x), sigmoid_t)
    }

    pub fn sin(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Sin(x), |v| v.sin())
    }

    pub fn cos(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Cos(x), |v| v.cos())
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Exp(x), |v| v.exp())
    }

    pub fn log1p(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Log1p(x), |v| v.ln_1p())
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let st = T::of(s);
        self.unary(x, Op::Scale(x, s), move |v| v * st)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(T, T) -> T) -> Result<Var> {
        let (av, bv) = (self.val(a), self.val(b));
        if !av.same_shape(bv) {
            return Err(Error::dim(format!("{} {:?} vs {:?}", op.name(), av.shape(), bv.shape())));
        }
        let out = Matrix {
            rows: av.rows,
            cols: av.cols,
            data: av.data.iter().zip(&bv.data).map(|(&x, &y)| f(x, y)).collect(),
        };
        self.push(op, out, None)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Multiplies every column of `x` by the `rows x 1` matrix `col`.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Result<Var> {
        let (xv, cv) = (self.val(x), self.val(col));
        if cv.cols != 1 || cv.rows != xv.rows {
            return Err(Error::dim(format!("mul_col {:?} by {:?}", xv.shape(), cv.shape())));
        }
        let mut out = xv.clone();
        for r in 0..out.rows {
            let s = cv.data[r];
            out.data[r * out.cols..(r + 1) * out.cols]
                .iter_mut()
                .for_each(|v| *v = *v * s);
        }
        self.push(Op::MulCol { x, col }, out, None)
    }

    /// Sum of all entries (pairwise order), as a `1 x 1` matrix.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = pairwise_sum(&self.val(x).data);
        self.push(Op::Sum(x), Matrix::filled(1, 1, s), None)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.val(x).data.len().max(1);
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Column-wise concatenation.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.val(a), self.val(b));
        if av.rows != bv.rows {
            return Err(Error::dim(format!("concat {:?} with {:?}", av.shape(), bv.shape())));
        }
        let cols = av.cols + bv.cols;
        let mut data = Vec::with_capacity(av.rows * cols);
        for r in 0..av.rows {
            data.extend_from_slice(&av.data[r * av.cols..(r + 1) * av.cols]);
            data.extend_from_slice(&bv.data[r * bv.cols..(r + 1) * bv.cols]);
        }
        self.push(Op::Concat(a, b), Matrix { rows: av.rows, cols, data }, None)
    }

    /// Columns `start..start + len`.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.val(x);
        if start + len > xv.cols {
            return Err(Error::dim("slice out of range"));
        }
        let mut data = Vec::with_capacity(xv.rows * len);
        for r in 0..xv.rows {
            data.extend_from_slice(&xv.data[r * xv.cols + start..r * xv.cols + start + len]);
        }
        self.push(Op::Slice { x, start }, Matrix { rows: xv.rows, cols: len, data }, None)
    }

    /// 3x3 convolution on equirectangular feature maps: columns wrap around,
    /// rows clamp at the poles. `w` is `(9 * c_in) x c_out`, `b` is `1 x c_out`.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var, shape: ImgShape) -> Result<Var> {
        let (xv, wv, bv) = (self.val(x), self.val(w), self.val(b));
        let cin = xv.cols;
        if xv.rows != shape.pixels() || wv.rows != 9 * cin || bv.rows != 1 || bv.cols != wv.cols {
            return Err(Error::dim(format!(
                "conv3x3 input {:?} weights {:?} for {shape:?}",
                xv.shape(),
                wv.shape()
            )));
        }
        let col = im2col(xv, shape);
        let mut out = Matrix::zeros(xv.rows, wv.cols);
        for r in 0..out.rows {
            out.data[r * out.cols..(r + 1) * out.cols].copy_from_slice(&bv.data);
        }
        matmul_into(&col, false, wv, false, &mut out, true);
        self.push(Op::Conv3x3 { x, w, b, shape }, out, Some(col))
    }

    /// 2x2 average pooling.
    pub fn down2(&mut self, x: Var, shape: ImgShape) -> Result<Var> {
        let xv = self.val(x);
        if xv.rows != shape.pixels() || shape.height % 2 != 0 || shape.width % 2 != 0 {
            return Err(Error::dim(format!("down2 of {:?} as {shape:?}", xv.shape())));
        }
        let half = shape.half();
        let c = xv.cols;
        let mut out = Matrix::zeros(half.pixels(), c);
        let q = T::of(0.25);
        for b in 0..shape.batch {
            for y in 0..half.height {
                for x in 0..half.width {
                    let o = half.row(b, y, x) * c;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let s = shape.row(b, 2 * y + dy, 2 * x + dx) * c;
                        for k in 0..c {
                            out.data[o + k] += xv.data[s + k] * q;
                        }
                    }
                }
            }
        }
        self.push(Op::Down2 { x, shape }, out, None)
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn up2(&mut self, x: Var, shape: ImgShape) -> Result<Var> {
        let xv = self.val(x);
        if xv.rows != shape.pixels() {
            return Err(Error::dim(format!("up2 of {:?} as {shape:?}", xv.shape())));
        }
        let big = shape.double();
        let c = xv.cols;
        let mut out = Matrix::zeros(big.pixels(), c);
        for b in 0..big.batch {
            for y in 0..big.height {
                for x in 0..big.width {
                    let s = shape.row(b, y / 2, x / 2) * c;
                    let o = big.row(b, y, x) * c;
                    out.data[o..o + c].copy_from_slice(&xv.data[s..s + c]);
                }
            }
        }
        self.push(Op::Up2 { x, shape }, out, None)
    }

    /// Propagates the given output adjoints back through the tape.
    ///
    /// `n_params` is the length of the parameter vector that `param` nodes
    /// read from.
    pub fn backward(&self, seeds: &[(Var, &Matrix<T>)], n_params: usize) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::invalid("backward called before any forward operation"));
        }
        let mut adj: Vec<Option<Matrix<T>>> = vec![None; self.nodes.len()];
        for (v, seed) in seeds {
            let node = self
                .nodes
                .get(v.0)
                .ok_or_else(|| Error::invalid("seed refers to a node that was never recorded"))?;
            if !node.value.same_shape(seed) {
                return Err(Error::dim(format!(
                    "seed {:?} for node {:?}",
                    seed.shape(),
                    node.value.shape()
                )));
            }
            accumulate(&mut adj[v.0], seed);
        }
        let mut params = vec![T::zero(); n_params];
        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param { offset } => {
                    let dst = params
                        .get_mut(*offset..*offset + g.data.len())
                        .ok_or_else(|| Error::dim("parameter gradient out of range"))?;
                    for (d, s) in dst.iter_mut().zip(&g.data) {
                        *d += *s;
                    }
                }
                Op::Affine { x, w, b } => {
                    let (xv, wv) = (self.val(*x), self.val(*w));
                    let mut gx = Matrix::zeros(xv.rows, xv.cols);
                    matmul_into(&g, false, wv, true, &mut gx, false);
                    let mut gw = Matrix::zeros(wv.rows, wv.cols);
                    matmul_into(xv, true, &g, false, &mut gw, false);
                    let gb = column_sums(&g);
                    accumulate_owned(&mut adj[x.0], gx);
                    accumulate_owned(&mut adj[w.0], gw);
                    accumulate_owned(&mut adj[b.0], gb);
                }
                Op::MatMul { a, b } => {
                    let (av, bv) = (self.val(*a), self.val(*b));
                    let mut ga = Matrix::zeros(av.rows, av.cols);
                    matmul_into(&g, false, bv, true, &mut ga, false);
                    let mut gb = Matrix::zeros(bv.rows, bv.cols);
                    matmul_into(av, true, &g, false, &mut gb, false);
                    accumulate_owned(&mut adj[a.0], ga);
                    accumulate_owned(&mut adj[b.0], gb);
                }
                Op::Relu(x) => {
                    let xv = self.val(*x);
                    let gx = zip_map(&g, xv, |gi, xi| if xi > T::zero() { gi } else { T::zero() });
                    accumulate_owned(&mut adj[x.0], gx);
                }
                Op::Softplus(x) => {
                    let gx = zip_map(&g, self.val(*x), |gi, xi| gi * sigmoid_t(xi));
                    accumulate_owned(&mut adj[x.0], gx);
                }
                Op::Sigmoid(x) => {
                    let gx = zip_map(&g, &node.value, |gi, yi| gi * yi * (T::one() - yi));
                    accumulate_owned(&mut adj[x.0], gx);
                }
                Op::Sin(x) => {
                    let gx = zip_map(&g, self.val(*x), |gi, xi| gi * xi.cos());
                    accumulate_owned(&mut adj[x.0], gx);
                }
                Op::Cos(x) => {
                    let gx = zip_map(&g, self.val(*x), |gi, xi| -gi * xi.sin());
                    accumulate_owned(&mut adj[x.0], gx);
                }
                Op::Exp(x) => {
                    let gx = zip_map(&g, &node.value, |gi, yi| gi * yi);
                    accumulate_owned(&mut adj[x.0], gx);
                }
                Op::Log1p(x) => {
                    let gx = zip_map(&g, self.val(*x), |gi, xi| gi / (T::one() + xi));
                    accumulate_owned(&mut adj[x.0], gx);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj[a.0], &g);
                    accumulate(&mut adj[b.0], &g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj[a.0], &g);
                    let neg = Matrix {
                        rows: g.rows,
                        cols: g.cols,
                        data: g.data.iter().map(|&v| -v).collect(),
                    };
                    accumulate_owned(&mut adj[b.0], neg);
                }
                Op::Mul(a, b) => {
                    let ga = zip_map(&g, self.val(*b), |gi, bi| gi * bi);
                    let gb = zip_map(&g, self.val(*a), |gi, ai| gi * ai);
                    accumulate_owned(&mut adj[a.0], ga);
                    accumulate_owned(&mut adj[b.0], gb);
                }
                Op::MulCol { x, col } => {
                    let (xv, cv) = (self.val(*x), self.val(*col));
                    let mut gx = g.clone();
                    let mut gc = Matrix::zeros(cv.rows, 1);
                    for r in 0..g.rows {
                        let s = cv.data[r];
                        let row = r * g.cols..(r + 1) * g.cols;
                        let mut acc = T::zero();
                        for (gi, xi) in g.data[row.clone()].iter().zip(&xv.data[row.clone()]) {
                            acc += *gi * *xi;
                        }
                        gc.data[r] = acc;
                        gx.data[row].iter_mut().for_each(|v| *v = *v * s);
                    }
                    accumulate_owned(&mut adj[x.0], gx);
                    accumulate_owned(&mut adj[col.0], gc);
                }
                Op::Scale(x, s) => {
                    let st = T::of(*s);
                    let gx = Matrix {
                        rows: g.rows,
                        cols: g.cols,
                        data: g.data.iter().map(|&v| v * st).collect(),
                    };
                    accumulate_owned(&mut adj[x.0], gx);
                }
                Op::Sum(x) => {
                    let xv = self.val(*x);
                    accumulate_owned(&mut adj[x.0], Matrix::filled(xv.rows, xv.cols, g.data[0]));
                }
                Op::Concat(a, b) => {
                    let (ac, bc) = (self.val(*a).cols, self.val(*b).cols);
                    let mut ga = Matrix::zeros(g.rows, ac);
                    let mut gb = Matrix::zeros(g.rows, bc);
                    for r in 0..g.rows {
                        let row = &g.data[r * g.cols..(r + 1) * g.cols];
                        ga.data[r * ac..(r + 1) * ac].copy_from_slice(&row[..ac]);
                        gb.data[r * bc..(r + 1) * bc].copy_from_slice(&row[ac..]);
                    }
                    accumulate_owned(&mut adj[a.0], ga);
                    accumulate_owned(&mut adj[b.0], gb);
                }
                Op::Slice { x, start } => {
                    let xv = self.val(*x);
                    let mut gx = Matrix::zeros(xv.rows, xv.cols);
                    for r in 0..g.rows {
                        let dst = r * xv.cols + start;
                        gx.data[dst..dst + g.cols].copy_from_slice(&g.data[r * g.cols..(r + 1) * g.cols]);
                    }
                    accumulate_owned(&mut adj[x.0], gx);
                }
                Op::Conv3x3 { x, w, b, shape } => {
                    let col = node.aux.as_ref().expect("conv keeps its im2col matrix");
                    let wv = self.val(*w);
                    let mut gw = Matrix::zeros(wv.rows, wv.cols);
                    matmul_into(col, true, &g, false, &mut gw, false);
                    let gb = column_sums(&g);
                    let mut gcol = Matrix::zeros(col.rows, col.cols);
                    matmul_into(&g, false, wv, true, &mut gcol, false);
                    let gx = col2im(&gcol, *shape, self.val(*x).cols);
                    accumulate_owned(&mut adj[x.0], gx);
                    accumulate_owned(&mut adj[w.0], gw);
                    accumulate_owned(&mut adj[b.0], gb);
                }
                Op::Down2 { x, shape } => {
                    let half = shape.half();
                    let c = g.cols;
                    let mut gx = Matrix::zeros(shape.pixels(), c);
                    let q = T::of(0.25);
                    for bi in 0..shape.batch {
                        for y in 0..half.height {
                            for xx in 0..half.width {
                                let o = half.row(bi, y, xx) * c;
                                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                    let s = shape.row(bi, 2 * y + dy, 2 * xx + dx) * c;
                                    for k in 0..c {
                                        gx.data[s + k] += g.data[o + k] * q;
                                    }
                                }
                            }
                        }
                    }
                    accumulate_owned(&mut adj[x.0], gx);
                }
                Op::Up2 { x, shape } => {
                    let big = shape.double();
                    let c = g.cols;
                    let mut gx = Matrix::zeros(shape.pixels(), c);
                    for bi in 0..big.batch {
                        for y in 0..big.height {
                            for xx in 0..big.width {
                                let s = shape.row(bi, y / 2, xx / 2) * c;
                                let o = big.row(bi, y, xx) * c;
                                for k in 0..c {
                                    gx.data[s + k] += g.data[o + k];
                                }
                            }
                        }
                    }
                    accumulate_owned(&mut adj[x.0], gx);
                }
            }
            adj[idx] = Some(g);
        }
        Ok(Gradients { params, adjoints: adj })
    }
}

fn accumulate<T: Real>(slot: &mut Option<Matrix<T>>, g: &Matrix<T>) {
    match slot {
        Some(a) => a.data.iter_mut().zip(&g.data).for_each(|(x, y)| *x += *y),
        None => *slot = Some(g.clone()),
    }
}

fn accumulate_owned<T: Real>(slot: &mut Option<Matrix<T>>, g: Matrix<T>) {
    match slot {
        Some(a) => a.data.iter_mut().zip(&g.data).for_each(|(x, y)| *x += *y),
        None => *slot = Some(g),
    }
}

fn zip_map<T: Real>(g: &Matrix<T>, x: &Matrix<T>, f: impl Fn(T, T) -> T) -> Matrix<T> {
    Matrix {
        rows: g.rows,
        cols: g.cols,
        data: g.data.iter().zip(&x.data).map(|(&a, &b)| f(a, b)).collect(),
    }
}

fn column_sums<T: Real>(g: &Matrix<T>) -> Matrix<T> {
    let mut out = Matrix::zeros(1, g.cols);
    for r in 0..g.rows {
        for (o, v) in out.data.iter_mut().zip(&g.data[r * g.cols..(r + 1) * g.cols]) {
            *o += *v;
        }
    }
    out
}

/// Source pixel of tap `(dy, dx)`: columns wrap, rows clamp.
fn tap(shape: ImgShape, y: usize, x: usize, dy: isize, dx: isize) -> (usize, usize) {
    let sy = (y as isize + dy).clamp(0, shape.height as isize - 1) as usize;
    let sx = (x as isize + dx).rem_euclid(shape.width as isize) as usize;
    (sy, sx)
}

fn im2col<T: Real>(x: &Matrix<T>, shape: ImgShape) -> Matrix<T> {
    let c = x.cols;
    let mut col = Matrix::zeros(x.rows, 9 * c);
    for b in 0..shape.batch {
        for y in 0..shape.height {
            for xx in 0..shape.width {
                let r = shape.row(b, y, xx);
                let mut t = 0;
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (sy, sx) = tap(shape, y, xx, dy, dx);
                        let s = shape.row(b, sy, sx) * c;
                        let o = r * 9 * c + t * c;
                        col.data[o..o + c].copy_from_slice(&x.data[s..s + c]);
                        t += 1;
                    }
                }
            }
        }
    }
    col
}

fn col2im<T: Real>(gcol: &Matrix<T>, shape: ImgShape, c: usize) -> Matrix<T> {
    let mut gx = Matrix::zeros(shape.pixels(), c);
    for b in 0..shape.batch {
        for y in 0..shape.height {
            for xx in 0..shape.width {
                let r = shape.row(b, y, xx);
                let mut t = 0;
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (sy, sx) = tap(shape, y, xx, dy, dx);
                        let s = shape.row(b, sy, sx) * c;
                        let o = r * 9 * c + t * c;
                        for k in 0..c {
                            gx.data[s + k] += gcol.data[o + k];
                        }
                        t += 1;
                    }
                }
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_affine_passes_input_through() {
        let mut t = Tape::<f64>::new();
        let x = t.input(Matrix::from_f64(2, 3, &[1.0, -2.0, 3.0, 0.5, 0.25, -4.0]).unwrap()).unwrap();
        let eye = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let w = t.input(Matrix::from_f64(3, 3, &eye).unwrap()).unwrap();
        let b = t.input(Matrix::zeros(1, 3)).unwrap();
        let y = t.affine(x, w, b).unwrap();
        assert_eq!(t.value(y), t.value(x));
    }

    #[test]
    fn activation_values() {
        let mut t = Tape::<f64>::new();
        let x = t.input(Matrix::from_f64(1, 3, &[-1.0, 2.0, 0.0]).unwrap()).unwrap();
        let r = t.relu(x).unwrap();
        assert_eq!(t.value(r).data, vec![0.0, 2.0, 0.0]);
        let s = t.softplus(x).unwrap();
        assert!((t.value(s).data[2] - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn square_sum_gradient() {
        let params = vec![0.5, -1.5, 2.0];
        let mut t = Tape::<f64>::new();
        let p = t.param(&params, 0, 1, 3).unwrap();
        let sq = t.mul(p, p).unwrap();
        let loss = t.sum(sq).unwrap();
        let one = Matrix::filled(1, 1, 1.0);
        let g = t.backward(&[(loss, &one)], 3).unwrap();
        assert_eq!(g.params, vec![1.0, -3.0, 4.0]);
        let zero = Matrix::filled(1, 1, 0.0);
        let g = t.backward(&[(loss, &zero)], 3).unwrap();
        assert!(g.params.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_before_forward_fails() {
        let t = Tape::<f64>::new();
        assert!(t.backward(&[], 0).is_err());
    }

    #[test]
    fn non_finite_node_is_reported() {
        let mut t = Tape::<f64>::new();
        let x = t.input(Matrix::from_f64(1, 1, &[1000.0]).unwrap()).unwrap();
        let err = t.exp(x).unwrap_err();
        assert!(err.to_string().contains("exp"), "{err}");
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut t = Tape::<f32>::new();
        let a = t.input(Matrix::zeros(2, 3)).unwrap();
        let b = t.input(Matrix::zeros(3, 2)).unwrap();
        assert!(t.add(a, b).is_err());
        assert!(t.matmul(a, a).is_err());
    }

    #[test]
    fn pairwise_sum_matches_plain_sum() {
        let xs: Vec<f64> = (0..1000).map(|i| i as f64 * 0.5).collect();
        assert_eq!(pairwise_sum(&xs), xs.iter().sum::<f64>());
    }
}
