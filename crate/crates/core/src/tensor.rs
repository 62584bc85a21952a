//! Dense `f64` tensors and a tape-based reverse-mode differentiator.
//!
//! Every trainable quantity in the crate flows through [`Tape`]: leaves are
//! pushed with [`Tape::leaf`], primitives record their inputs, and
//! [`Tape::backward`] replays the recording in reverse to produce one adjoint
//! per node. Complex arithmetic is not a kernel concern; callers represent a
//! complex number as two adjacent real channels and express complex products
//! as real compositions (or as a [`Primitive`] with a hand-written adjoint).
//!
//! Tensors used by primitives are rank-2 (`rows × cols`); a row vector is
//! `1 × n` and a scalar is `1 × 1`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense tensor of `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTensor")]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct RawTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl TryFrom<RawTensor> for DenseTensor {
    type Error = Error;

    fn try_from(raw: RawTensor) -> Result<Self> {
        Self::new(raw.shape, raw.data)
    }
}

impl DenseTensor {
    /// Checked constructor: extents must be positive, `data.len()` must equal
    /// their product, and every value must be finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&e| e == 0) {
            return Err(Error::Dimension(format!("extents must be positive, got {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("tensor entry {i} is {}", data[i])));
        }
        Ok(Self { shape, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Unchecked rank-2 constructor for internal use; the caller guarantees
    /// `data.len() == rows * cols`.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(rows * cols, data.len());
        Self {
            shape: vec![rows, cols],
            data,
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_raw(rows, cols, vec![0.0; rows * cols])
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self::from_raw(rows, cols, vec![value; rows * cols])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_raw(1, 1, vec![value])
    }

    pub fn row(values: Vec<f64>) -> Self {
        let n = values.len();
        Self::from_raw(1, n, values)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Self::matrix(rows.len(), cols, rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rows(&self) -> usize {
        if self.shape.len() == 1 {
            1
        } else {
            self.shape[0]
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.expect_same_shape(other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::from_raw(c, r, out)
    }

    /// Standard matrix product.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = (self.rows(), self.cols());
        let (k2, n) = (other.rows(), other.cols());
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner extents differ: {m}x{k} by {k2}x{n}"
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.data, (k, 1), &other.data, (n, 1), &mut out, 0.0);
        Ok(Self::from_raw(m, n, out))
    }

    /// `self[i, j] + bias[0, j]` for every row `i`.
    pub fn add_row(&self, bias: &Self) -> Result<Self> {
        if bias.rows() != 1 || bias.cols() != self.cols() {
            return Err(Error::Dimension(format!(
                "row broadcast of {:?} onto {:?}",
                bias.shape, self.shape
            )));
        }
        let c = self.cols();
        let mut out = self.data.clone();
        for row in out.chunks_mut(c) {
            for (v, b) in row.iter_mut().zip(&bias.data) {
                *v += b;
            }
        }
        Ok(Self::from_raw(self.rows(), c, out))
    }

    fn expect_same_shape(&self, other: &Self) -> Result<()> {
        if self.rows() != other.rows() || self.cols() != other.cols() {
            return Err(Error::Dimension(format!(
                "shapes differ: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }
}

/// `c = a·b + beta·c` over strided views; strides are `(row, col)`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_stride: (usize, usize),
    b: &[f64],
    b_stride: (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the strides address only elements inside `a` (m×k), `b` (k×n)
    // and `c` (m×n), whose lengths the callers establish.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_stride.0 as isize,
            a_stride.1 as isize,
            b.as_ptr(),
            b_stride.0 as isize,
            b_stride.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Elementwise `max(0, x)` with the subgradient at zero fixed to zero.
pub fn relu(a: &DenseTensor) -> DenseTensor {
    a.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Inverted dropout. In training mode each entry is zeroed with probability
/// `rate` and survivors are scaled by `1 / (1 - rate)`; otherwise identity.
pub fn dropout<R: Rng + ?Sized>(
    a: &DenseTensor,
    rate: f64,
    rng: &mut R,
    training: bool,
) -> Result<DenseTensor> {
    let mask = dropout_mask(a.rows(), a.cols(), rate, rng, training)?;
    match mask {
        Some(m) => a.zip_map(&m, |x, k| x * k),
        None => Ok(a.clone()),
    }
}

fn dropout_mask<R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    rate: f64,
    rng: &mut R,
    training: bool,
) -> Result<Option<DenseTensor>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Parameter(format!("dropout rate must lie in [0, 1), got {rate}")));
    }
    if !training || rate == 0.0 {
        return Ok(None);
    }
    let keep = 1.0 / (1.0 - rate);
    let data = (0..rows * cols)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    Ok(Some(DenseTensor::from_raw(rows, cols, data)))
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`softplus`] for positive arguments.
pub(crate) fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable operation defined outside the kernel. The tape stores
/// the forward value; `backward` maps the output adjoint to one adjoint per
/// input, each shaped like that input.
pub trait Primitive: Send {
    fn backward(
        &self,
        inputs: &[&DenseTensor],
        output: &DenseTensor,
        grad: &DenseTensor,
    ) -> Vec<DenseTensor>;
}

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
    Shift(Var),
    MulConst(Var, DenseTensor),
    Relu(Var),
    Exp(Var),
    Ln(Var),
    Softplus(Var),
    Square(Var),
    Sum(Var),
    GatherRows(Var, Vec<usize>),
    GatherCols(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    Custom(Box<dyn Primitive>, Vec<Var>),
}

struct Node {
    value: DenseTensor,
    op: Op,
}

/// Single-threaded recording of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Output of [`Tape::backward`]: one adjoint per recorded node.
pub struct Adjoints {
    grads: Vec<Option<DenseTensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Adjoints {
    /// Adjoint of `v`; zero when `v` did not influence the seeded output.
    pub fn get(&self, v: Var) -> DenseTensor {
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                DenseTensor::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, v: Var) -> DenseTensor {
        match self.grads.get_mut(v.0).and_then(|g| g.take()) {
            Some(g) => g,
            None => {
                let (r, c) = self.shapes[v.0];
                DenseTensor::zeros(r, c)
            }
        }
    }
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

    pub fn value(&self, v: Var) -> &DenseTensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: DenseTensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records an input (parameter or data) node.
    pub fn leaf(&mut self, value: DenseTensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y)?;
        Ok(self.push(v, Op::Div(a, b)))
    }

    /// `a[n×m] + b[1×m]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add_row(self.value(b))?;
        Ok(self.push(v, Op::AddRow(a, b)))
    }

    /// `a[n×m] ⊙ b[1×m]` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.rows() != 1 || bv.cols() != av.cols() {
            return Err(Error::Dimension(format!(
                "row broadcast of {:?} onto {:?}",
                bv.shape(),
                av.shape()
            )));
        }
        let c = av.cols();
        let mut out = av.data.clone();
        for row in out.chunks_mut(c) {
            for (x, s) in row.iter_mut().zip(&bv.data) {
                *x *= s;
            }
        }
        let v = DenseTensor::from_raw(av.rows(), c, out);
        Ok(self.push(v, Op::MulRow(a, b)))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| x * k);
        self.push(v, Op::Scale(a, k))
    }

    /// Adds a constant to every entry.
    pub fn shift(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| x + k);
        self.push(v, Op::Shift(a))
    }

    /// Elementwise product with a constant (non-differentiated) tensor.
    pub fn mul_const(&mut self, a: Var, k: DenseTensor) -> Result<Var> {
        let v = self.value(a).zip_map(&k, |x, y| x * y)?;
        Ok(self.push(v, Op::MulConst(a, k)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = relu(self.value(a));
        self.push(v, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Ln(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(softplus);
        self.push(v, Op::Softplus(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    /// Sum of all entries as a `1×1` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = DenseTensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn sum_sq(&mut self, a: Var) -> Var {
        let sq = self.square(a);
        self.sum(sq)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let c = av.cols();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= av.rows() {
                return Err(Error::Dimension(format!("row {i} of {} rows", av.rows())));
            }
            out.extend_from_slice(av.row_slice(i));
        }
        let v = DenseTensor::from_raw(idx.len(), c, out);
        Ok(self.push(v, Op::GatherRows(a, idx.to_vec())))
    }

    pub fn gather_cols(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = (av.rows(), av.cols());
        if let Some(&bad) = idx.iter().find(|&&j| j >= c) {
            return Err(Error::Dimension(format!("column {bad} of {c} columns")));
        }
        let mut out = Vec::with_capacity(r * idx.len());
        for i in 0..r {
            let row = av.row_slice(i);
            out.extend(idx.iter().map(|&j| row[j]));
        }
        let v = DenseTensor::from_raw(r, idx.len(), out);
        Ok(self.push(v, Op::GatherCols(a, idx.to_vec())))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let idx: Vec<usize> = (start..end).collect();
        self.gather_cols(a, &idx)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(Error::Dimension("concat_cols over differing row counts".into()));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        let v = DenseTensor::from_raw(rows, total, out);
        Ok(self.push(v, Op::ConcatCols(parts.to_vec())))
    }

    /// Inverted dropout; records nothing when it reduces to the identity.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        a: Var,
        rate: f64,
        rng: &mut R,
        training: bool,
    ) -> Result<Var> {
        let (r, c) = (self.value(a).rows(), self.value(a).cols());
        match dropout_mask(r, c, rate, rng, training)? {
            Some(mask) => self.mul_const(a, mask),
            None => Ok(a),
        }
    }

    /// Records an externally defined primitive whose forward `value` the
    /// caller has already computed from `inputs`.
    pub fn custom(&mut self, op: impl Primitive + 'static, inputs: &[Var], value: DenseTensor) -> Var {
        self.push(value, Op::Custom(Box::new(op), inputs.to_vec()))
    }

    /// Reverse sweep from `output` seeded with `seed`.
    pub fn backward(&self, output: Var, seed: &DenseTensor) -> Result<Adjoints> {
        let out_val = self.value(output);
        if out_val.rows() != seed.rows() || out_val.cols() != seed.cols() {
            return Err(Error::Dimension(format!(
                "seed shape {:?} does not match output shape {:?}",
                seed.shape(),
                out_val.shape()
            )));
        }
        let n = output.0 + 1;
        let mut grads: Vec<Option<DenseTensor>> = (0..n).map(|_| None).collect();
        grads[output.0] = Some(seed.clone());

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = self.nodes[..n]
            .iter()
            .map(|nd| (nd.value.rows(), nd.value.cols()))
            .collect();
        Ok(Adjoints { grads, shapes })
    }

    /// Convenience: backward from a scalar output with seed 1.
    pub fn gradients(&self, output: Var) -> Result<Adjoints> {
        self.backward(output, &DenseTensor::scalar(1.0))
    }

    fn propagate(&self, node: &Node, g: &DenseTensor, grads: &mut [Option<DenseTensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                // dA = G · Bᵀ
                let mut da = vec![0.0; m * k];
                gemm(m, n, k, &g.data, (n, 1), &bv.data, (1, n), &mut da, 0.0);
                accumulate(grads, *a, DenseTensor::from_raw(m, k, da));
                // dB = Aᵀ · G
                let mut db = vec![0.0; k * n];
                gemm(k, m, n, &av.data, (1, k), &g.data, (n, 1), &mut db, 0.0);
                accumulate(grads, *b, DenseTensor::from_raw(k, n, db));
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let ga = g.zip_map(val(*b), |x, y| x * y).unwrap();
                let gb = g.zip_map(val(*a), |x, y| x * y).unwrap();
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let ga = g.zip_map(bv, |x, y| x / y).unwrap();
                let mut gb = g.clone();
                for ((o, &x), &y) in gb.data.iter_mut().zip(&av.data).zip(&bv.data) {
                    *o = -*o * x / (y * y);
                }
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::AddRow(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, column_sums(g));
            }
            Op::MulRow(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let c = av.cols();
                let mut ga = g.clone();
                for row in ga.data.chunks_mut(c) {
                    for (x, s) in row.iter_mut().zip(&bv.data) {
                        *x *= s;
                    }
                }
                let mut gb = vec![0.0; c];
                for (grow, arow) in g.data.chunks(c).zip(av.data.chunks(c)) {
                    for j in 0..c {
                        gb[j] += grow[j] * arow[j];
                    }
                }
                accumulate(grads, *a, ga);
                accumulate(grads, *b, DenseTensor::row(gb));
            }
            Op::Scale(a, k) => accumulate(grads, *a, g.map(|x| x * k)),
            Op::Shift(a) => accumulate(grads, *a, g.clone()),
            Op::MulConst(a, k) => accumulate(grads, *a, g.zip_map(k, |x, y| x * y).unwrap()),
            Op::Relu(a) => {
                let ga = g
                    .zip_map(val(*a), |x, y| if y > 0.0 { x } else { 0.0 })
                    .unwrap();
                accumulate(grads, *a, ga);
            }
            Op::Exp(a) => accumulate(grads, *a, g.zip_map(&node.value, |x, y| x * y).unwrap()),
            Op::Ln(a) => accumulate(grads, *a, g.zip_map(val(*a), |x, y| x / y).unwrap()),
            Op::Softplus(a) => {
                let ga = g.zip_map(val(*a), |x, y| x * sigmoid(y)).unwrap();
                accumulate(grads, *a, ga);
            }
            Op::Square(a) => {
                accumulate(grads, *a, g.zip_map(val(*a), |x, y| 2.0 * x * y).unwrap())
            }
            Op::Sum(a) => {
                let av = val(*a);
                accumulate(grads, *a, DenseTensor::filled(av.rows(), av.cols(), g.item()));
            }
            Op::GatherRows(a, idx) => {
                let av = val(*a);
                let c = av.cols();
                let mut ga = DenseTensor::zeros(av.rows(), c);
                for (k, &i) in idx.iter().enumerate() {
                    let src = &g.data[k * c..(k + 1) * c];
                    for (d, s) in ga.data[i * c..(i + 1) * c].iter_mut().zip(src) {
                        *d += s;
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::GatherCols(a, idx) => {
                let av = val(*a);
                let (r, c) = (av.rows(), av.cols());
                let w = idx.len();
                let mut ga = DenseTensor::zeros(r, c);
                for i in 0..r {
                    for (k, &j) in idx.iter().enumerate() {
                        ga.data[i * c + j] += g.data[i * w + k];
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    let mut gp = Vec::with_capacity(rows * w);
                    for i in 0..rows {
                        gp.extend_from_slice(&g.data[i * total + offset..i * total + offset + w]);
                    }
                    accumulate(grads, p, DenseTensor::from_raw(rows, w, gp));
                    offset += w;
                }
            }
            Op::Custom(prim, inputs) => {
                let vals: Vec<&DenseTensor> = inputs.iter().map(|&v| val(v)).collect();
                let gs = prim.backward(&vals, &node.value, g);
                debug_assert_eq!(gs.len(), inputs.len());
                for (&v, gv) in inputs.iter().zip(gs) {
                    accumulate(grads, v, gv);
                }
            }
        }
    }
}

fn column_sums(g: &DenseTensor) -> DenseTensor {
    let c = g.cols();
    let mut out = vec![0.0; c];
    for row in g.data.chunks(c) {
        for (o, x) in out.iter_mut().zip(row) {
            *o += x;
        }
    }
    DenseTensor::row(out)
}

fn accumulate(grads: &mut [Option<DenseTensor>], v: Var, g: DenseTensor) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.data.iter_mut().zip(&g.data) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Relative floor in [`finite_diff_check`]: the absolute term added to the
/// difference magnitude is `FD_ABS_FLOOR · max(1, |f(x)|)`, the scale of
/// central-difference round-off for a unit step ratio.
pub const FD_ABS_FLOOR: f64 = 1e-5;

/// Compares an analytic gradient with central differences.
///
/// `f` returns the value and analytic gradient at a point; only the value is
/// used at perturbed points. Returns
/// `max_i |g_i − fd_i| / (|fd_i| + ε_abs)` with `ε_abs` as in [`FD_ABS_FLOOR`].
pub fn finite_diff_check<F>(mut f: F, point: &[f64], step: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let f0 = f(point).0;
    finite_diff_check_with_floor(f, point, step, FD_ABS_FLOOR * f0.abs().max(1.0))
}

/// [`finite_diff_check`] with an explicit absolute floor.
pub fn finite_diff_check_with_floor<F>(mut f: F, point: &[f64], step: f64, floor: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    if !(step > 0.0) {
        return Err(Error::Parameter(format!("finite-difference step must be > 0, got {step}")));
    }
    let (f0, analytic) = f(point);
    if !f0.is_finite() {
        return Err(Error::Numeric(format!("function value {f0} at the base point")));
    }
    if analytic.len() != point.len() {
        return Err(Error::Dimension(format!(
            "gradient has {} entries for a {}-dimensional point",
            analytic.len(),
            point.len()
        )));
    }
    let mut x = point.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + step;
        let fp = f(&x).0;
        x[i] = orig - step;
        let fm = f(&x).0;
        x[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Numeric(format!("function value non-finite near coordinate {i}")));
        }
        let fd = (fp - fm) / (2.0 * step);
        worst = worst.max((analytic[i] - fd).abs() / (fd.abs() + floor));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DenseTensor {
        DenseTensor::from_raw(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn naive_matmul(a: &DenseTensor, b: &DenseTensor) -> DenseTensor {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = DenseTensor::zeros(m, n);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for l in 0..k {
                    s += a.get(i, l) * b.get(l, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_annihilation() {
        let m = DenseTensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        assert_eq!(DenseTensor::identity(2).matmul(&m).unwrap(), m);
        let a = DenseTensor::from_rows(&[&[1.0, 0.0], &[0.0, 0.0]]).unwrap();
        let b = DenseTensor::from_rows(&[&[0.0, 0.0], &[0.0, 1.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap(), DenseTensor::zeros(2, 2));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(3, 4, &mut rng);
        let b = random(4, 2, &mut rng);
        let fast = a.matmul(&b).unwrap();
        let slow = naive_matmul(&a, &b);
        for (x, y) in fast.data().iter().zip(slow.data()) {
            assert!((x - y).abs() <= 1e-15 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = DenseTensor::zeros(2, 3);
        assert!(matches!(a.matmul(&a), Err(Error::Dimension(_))));
    }

    #[test]
    fn matmul_associative_on_well_conditioned_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let shift = |t: DenseTensor| {
            let mut t = t;
            for i in 0..8 {
                let v = t.get(i, i) + 4.0;
                t.set(i, i, v);
            }
            t
        };
        let a = shift(random(8, 8, &mut rng));
        let b = shift(random(8, 8, &mut rng));
        let c = shift(random(8, 8, &mut rng));
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        let scale = left.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (x, y) in left.data().iter().zip(right.data()) {
            assert!((x - y).abs() <= 1e-10 * scale);
        }
    }

    #[test]
    fn constructor_rejects_bad_input() {
        assert!(DenseTensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(DenseTensor::new(vec![0, 2], vec![]).is_err());
        assert!(matches!(
            DenseTensor::new(vec![1, 1], vec![f64::NAN]),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn relu_values_and_gradient() {
        let x = DenseTensor::row(vec![-1.0, 0.0, 2.0]);
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);

        let mut tape = Tape::new();
        let v = tape.leaf(DenseTensor::row(vec![-1.0, 3.0]));
        let r = tape.relu(v);
        let s = tape.sum(r);
        let g = tape.gradients(s).unwrap().get(v);
        assert_eq!(g.data(), &[0.0, 1.0]);

        let mut tape = Tape::new();
        let v = tape.leaf(DenseTensor::row(vec![-1.0, -0.5, 0.0]));
        let r = tape.relu(v);
        let s = tape.sum(r);
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 0.0]);
        assert_eq!(tape.gradients(s).unwrap().get(v).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn dropout_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = random(4, 5, &mut rng);
        assert_eq!(dropout(&x, 0.0, &mut rng, true).unwrap(), x);
        assert_eq!(dropout(&x, 0.5, &mut rng, false).unwrap(), x);
        assert!(matches!(dropout(&x, 1.0, &mut rng, true), Err(Error::Parameter(_))));
    }

    #[test]
    fn dropout_preserves_expectation() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let ones = DenseTensor::filled(1, 100_000, 1.0);
        let out = dropout(&ones, 0.5, &mut rng, true).unwrap();
        let mean = out.sum() / 100_000.0;
        assert!((mean - 1.0).abs() <= 0.02, "mean {mean}");
    }

    #[test]
    fn square_and_constant_adjoints() {
        let mut tape = Tape::new();
        let x = tape.leaf(DenseTensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        assert_eq!(tape.gradients(y).unwrap().get(x).item(), 6.0);

        let mut tape = Tape::new();
        let x = tape.leaf(DenseTensor::scalar(3.0));
        let c = tape.leaf(DenseTensor::scalar(5.0));
        let adj = tape.gradients(c).unwrap();
        assert_eq!(adj.get(x).item(), 0.0);
    }

    #[test]
    fn seed_shape_mismatch_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(DenseTensor::zeros(2, 2));
        assert!(matches!(
            tape.backward(x, &DenseTensor::scalar(1.0)),
            Err(Error::Dimension(_))
        ));
    }

    /// Two-layer MLP loss as a function of all its parameters flattened.
    fn mlp_loss(theta: &[f64]) -> (f64, Vec<f64>) {
        let x = DenseTensor::from_raw(5, 3, (0..15).map(|i| ((i * 7 % 11) as f64 - 5.0) / 4.0).collect());
        let y = DenseTensor::from_raw(5, 2, (0..10).map(|i| ((i * 3 % 7) as f64 - 3.0) / 3.0).collect());
        let sizes = [(3, 4), (1, 4), (4, 2), (1, 2)];
        let mut tape = Tape::new();
        let mut off = 0;
        let mut leaves = Vec::new();
        for (r, c) in sizes {
            leaves.push(tape.leaf(DenseTensor::from_raw(r, c, theta[off..off + r * c].to_vec())));
            off += r * c;
        }
        let xv = tape.leaf(x);
        let yv = tape.leaf(y);
        let h = tape.matmul(xv, leaves[0]).unwrap();
        let h = tape.add_row(h, leaves[1]).unwrap();
        let h = tape.softplus(h);
        let o = tape.matmul(h, leaves[2]).unwrap();
        let o = tape.add_row(o, leaves[3]).unwrap();
        let r = tape.sub(o, yv).unwrap();
        let l = tape.sum_sq(r);
        let mut adj = tape.gradients(l).unwrap();
        let grad = leaves.iter().flat_map(|&v| adj.take(v).into_data()).collect();
        (tape.value(l).item(), grad)
    }

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let theta: Vec<f64> = (0..(12 + 4 + 8 + 2)).map(|_| rng.random_range(-1.0..1.0)).collect();
        let err = finite_diff_check(mlp_loss, &theta, 1e-5).unwrap();
        assert!(err <= 1e-5, "max relative error {err}");
    }

    #[test]
    fn finite_diff_check_quadratic_linear_and_relu() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 6;
        let a: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        // symmetric part for the analytic gradient (A + Aᵀ) x
        let quad = |x: &[f64]| {
            let mut v = 0.0;
            let mut g = vec![0.0; n];
            for i in 0..n {
                for j in 0..n {
                    v += x[i] * a[i * n + j] * x[j];
                    g[i] += (a[i * n + j] + a[j * n + i]) * x[j];
                }
            }
            (v, g)
        };
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        assert!(finite_diff_check(quad, &p, 1e-5).unwrap() <= 1e-7);

        let w = [0.3, -1.2, 2.5, 0.7, -0.1, 4.0];
        let lin = |x: &[f64]| (x.iter().zip(&w).map(|(a, b)| a * b).sum(), w.to_vec());
        assert!(finite_diff_check(lin, &p, 1e-3).unwrap() <= 1e-10);

        let relu_sum = |x: &[f64]| {
            let mut tape = Tape::new();
            let v = tape.leaf(DenseTensor::row(x.to_vec()));
            let r = tape.relu(v);
            let s = tape.sum_sq(r);
            let g = tape.gradients(s).unwrap().get(v).into_data();
            (tape.value(s).item(), g)
        };
        let q = [0.5, -0.3, 1.7, -2.0, 0.15, 0.9];
        assert!(finite_diff_check(relu_sum, &q, 1e-5).unwrap() <= 1e-6);
    }

    #[test]
    fn finite_diff_check_errors() {
        let f = |_: &[f64]| (f64::NAN, vec![0.0]);
        assert!(matches!(finite_diff_check(f, &[1.0], 1e-3), Err(Error::Numeric(_))));
        let g = |_: &[f64]| (0.0, vec![0.0]);
        assert!(matches!(finite_diff_check(g, &[1.0], 0.0), Err(Error::Parameter(_))));
    }

    /// Every recorded primitive checked against central differences on a
    /// composite that routes through it.
    #[test]
    fn every_primitive_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a0: Vec<f64> = (0..6).map(|_| rng.random_range(0.5..1.5)).collect();
        let b0: Vec<f64> = (0..6).map(|_| rng.random_range(0.5..1.5)).collect();
        let mask = DenseTensor::from_raw(2, 3, vec![1.0, 0.0, 2.0, 2.0, 1.0, 0.0]);
        let f = |p: &[f64]| {
            let mut t = Tape::new();
            let a = t.leaf(DenseTensor::from_raw(2, 3, p[..6].to_vec()));
            let b = t.leaf(DenseTensor::from_raw(2, 3, p[6..].to_vec()));
            let brow = t.gather_rows(b, &[1]).unwrap();
            let bt = t.gather_cols(b, &[2, 0]).unwrap();
            let m = t.matmul(bt, a).unwrap();
            let s1 = t.add(a, b).unwrap();
            let s2 = t.sub(s1, b).unwrap();
            let s3 = t.mul(s2, b).unwrap();
            let s4 = t.div(s3, b).unwrap();
            let s5 = t.add_row(s4, brow).unwrap();
            let s6 = t.mul_row(s5, brow).unwrap();
            let s7 = t.scale(s6, 0.7);
            let s8 = t.shift(s7, 0.2);
            let s9 = t.mul_const(s8, mask.clone()).unwrap();
            let e = t.exp(s9);
            let l = t.ln(e);
            let sp = t.softplus(l);
            let cc = t.concat_cols(&[sp, m]).unwrap();
            let sl = t.slice_cols(cc, 1, 4).unwrap();
            let out = t.sum_sq(sl);
            let mut adj = t.gradients(out).unwrap();
            let mut g = adj.take(a).into_data();
            g.extend(adj.take(b).into_data());
            (t.value(out).item(), g)
        };
        let p: Vec<f64> = a0.into_iter().chain(b0).collect();
        let err = finite_diff_check(f, &p, 1e-5).unwrap();
        assert!(err <= 1e-5, "max relative error {err}");
    }
}
