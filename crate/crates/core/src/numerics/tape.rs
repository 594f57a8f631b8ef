//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value and enough
//! bookkeeping to replay the vector-Jacobian product. `backward` walks the tape
//! once in reverse. Nodes whose inputs never require a gradient are skipped.

use super::kernels::{gemm, MatRef};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Conv1d { x: Var, kernel: Var, bias: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulConst(Var, Vec<f64>),
    Sigmoid(Var),
    Relu(Var),
    Log(Var),
    Abs(Var),
    Square(Var),
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    Sum(Var),
    MeanAxis { x: Var, axis: usize },
    MaxAxis { x: Var, argmax: Vec<usize> },
    Gather { x: Var, idx: Vec<usize> },
    ConcatCols(Var, Var),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Splits a shape around `axis` into `(outer, len, inner)` so that element
/// `(o, i, n)` lives at `(o * len + i) * inner + n`.
fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Argument(format!(
            "axis {axis} out of range for shape {shape:?}"
        )));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    shape
        .iter()
        .enumerate()
        .filter_map(|(i, &d)| (i != axis).then_some(d))
        .collect()
}

/// Recording context for one differentiable computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    requires: Vec<bool>,
    grads: Vec<Option<Vec<f64>>>,
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

    fn push(&mut self, value: Tensor, op: Op, requires: bool) -> Var {
        self.nodes.push(Node { value, op });
        self.requires.push(requires);
        Var(self.nodes.len() - 1)
    }

    fn req(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Records a tensor as a leaf. It is differentiated iff `requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let requires = t.requires_grad();
        self.push(t, Op::Leaf, requires)
    }

    /// Records a constant (never differentiated).
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::Leaf, false))
    }

    /// Records an existing tensor as a constant, ignoring its gradient flag.
    pub fn constant_tensor(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    fn dims2(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        self.value(v)
            .dims2()
            .map_err(|_| Error::Shape(format!("{what}: expected matrix, got {:?}", self.shape(v))))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let data = self.data(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let req = self.req(x);
        self.push(Tensor::new(shape, data).expect("unary shape"), op, req)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let req = self.req(a) || self.req(b);
        self.push(Tensor::new(shape, data).expect("binary shape"), op, req)
    }

    /// Matrix product `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul lhs")?;
        let (k2, n) = self.dims2(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner dimensions {m}x{k} · {k2}x{n}"
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            1.0,
            MatRef::new(self.data(a), m, k),
            MatRef::new(self.data(b), k, n),
            0.0,
            &mut out,
        );
        let req = self.req(a) || self.req(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), req))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "transpose")?;
        let src = self.data(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let req = self.req(a);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(a), req))
    }

    /// Temporal cross-correlation with zero "same" padding.
    ///
    /// `x` is `T × Cin`, `kernel` is `w × Cin × Cout` (tap-major), `bias` is `Cout`.
    pub fn conv1d(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (t, cin) = self.dims2(x, "conv1d input")?;
        let (w, kcin, cout) = match self.shape(kernel) {
            &[w, a, b] => (w, a, b),
            s => return Err(Error::Shape(format!("conv1d kernel must be rank 3, got {s:?}"))),
        };
        if w % 2 == 0 {
            return Err(Error::Config(format!("conv1d width must be odd, got {w}")));
        }
        if kcin != cin {
            return Err(Error::Shape(format!(
                "conv1d input has {cin} channels, kernel expects {kcin}"
            )));
        }
        if self.shape(bias) != [cout] {
            return Err(Error::Shape(format!(
                "conv1d bias {:?} for {cout} output channels",
                self.shape(bias)
            )));
        }
        let mut out = vec![0.0; t * cout];
        let b = self.data(bias);
        for row in out.chunks_mut(cout) {
            row.copy_from_slice(b);
        }
        let xd = self.data(x);
        let kd = self.data(kernel);
        for (tap, (t0, t1, s)) in conv_taps(t, w).enumerate() {
            if t1 <= t0 {
                continue;
            }
            let rows = t1 - t0;
            let xs = (t0 as isize + s) as usize;
            gemm(
                1.0,
                MatRef::new(&xd[xs * cin..(xs + rows) * cin], rows, cin),
                MatRef::new(&kd[tap * cin * cout..(tap + 1) * cin * cout], cin, cout),
                1.0,
                &mut out[t0 * cout..t1 * cout],
            );
        }
        let req = self.req(x) || self.req(kernel) || self.req(bias);
        Ok(self.push(
            Tensor::new(vec![t, cout], out)?,
            Op::Conv1d { x, kernel, bias },
            req,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.binary(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.binary(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.binary(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// Elementwise quotient `a / b`.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "div")?;
        Ok(self.binary(a, b, Op::Div(a, b), |x, y| x / y))
    }

    fn row_broadcast(&mut self, a: Var, row: Var, mul: bool) -> Result<Var> {
        let (r, c) = self.dims2(a, "row broadcast")?;
        if self.shape(row) != [c] {
            return Err(Error::Shape(format!(
                "row broadcast of {:?} over {r}x{c}",
                self.shape(row)
            )));
        }
        let rv = self.data(row);
        let data: Vec<f64> = self
            .data(a)
            .chunks(c)
            .flat_map(|x| {
                x.iter()
                    .zip(rv)
                    .map(move |(&x, &y)| if mul { x * y } else { x + y })
            })
            .collect();
        let req = self.req(a) || self.req(row);
        let op = if mul { Op::MulRow(a, row) } else { Op::AddRow(a, row) };
        Ok(self.push(Tensor::new(vec![r, c], data)?, op, req))
    }

    /// `a[r×c] + row[c]`, broadcasting the vector over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast(a, row, false)
    }

    /// `a[r×c] ⊙ row[c]`, broadcasting the vector over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast(a, row, true)
    }

    /// `a[r×c] ⊙ col[r]`, broadcasting the vector over columns.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "mul_col")?;
        if self.shape(col) != [r] {
            return Err(Error::Shape(format!(
                "column broadcast of {:?} over {r}x{c}",
                self.shape(col)
            )));
        }
        let cv = self.data(col);
        let data: Vec<f64> = self
            .data(a)
            .chunks(c)
            .zip(cv)
            .flat_map(|(x, &s)| x.iter().map(move |&v| v * s))
            .collect();
        let req = self.req(a) || self.req(col);
        Ok(self.push(Tensor::new(vec![r, c], data)?, Op::MulCol(a, col), req))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    /// Multiplies by a fixed, non-differentiable mask (dropout, duration mask).
    pub fn mul_const(&mut self, a: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.value(a).len() {
            return Err(Error::Shape(format!(
                "constant mask of length {} for {:?}",
                mask.len(),
                self.shape(a)
            )));
        }
        let data = self.data(a).iter().zip(&mask).map(|(x, m)| x * m).collect();
        let shape = self.shape(a).to_vec();
        let req = self.req(a);
        Ok(self.push(Tensor::new(shape, data)?, Op::MulConst(a, mask), req))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = axis_split(self.shape(x), axis)?;
        let mut out = self.data(x).to_vec();
        for_each_lane(outer, len, inner, |idx| {
            let max = idx.clone().map(|i| out[i]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for i in idx.clone() {
                out[i] = (out[i] - max).exp();
                total += out[i];
            }
            for i in idx {
                out[i] /= total;
            }
        });
        let shape = self.shape(x).to_vec();
        let req = self.req(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { x, axis }, req))
    }

    /// `log(softmax(x))` along `axis`, without the intermediate underflow.
    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = axis_split(self.shape(x), axis)?;
        let mut out = self.data(x).to_vec();
        for_each_lane(outer, len, inner, |idx| {
            let max = idx.clone().map(|i| out[i]).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + idx.clone().map(|i| (out[i] - max).exp()).sum::<f64>().ln();
            for i in idx {
                out[i] -= lse;
            }
        });
        let shape = self.shape(x).to_vec();
        let req = self.req(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::LogSoftmax { x, axis }, req))
    }

    /// Sum of all elements (rank-0 result).
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        let req = self.req(a);
        self.push(Tensor::scalar(s), Op::Sum(a), req)
    }

    /// Mean of all elements (rank-0 result).
    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = axis_split(&shape, axis)?;
        if len == 0 {
            return Err(Error::Argument("mean over an empty axis".into()));
        }
        let src = self.data(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..len {
                for n in 0..inner {
                    out[o * inner + n] += src[(o * len + i) * inner + n];
                }
            }
        }
        for v in &mut out {
            *v /= len as f64;
        }
        let req = self.req(x);
        Ok(self.push(
            Tensor::new(reduced_shape(&shape, axis), out)?,
            Op::MeanAxis { x, axis },
            req,
        ))
    }

    /// Maximum along `axis`; the gradient routes to the first maximal entry.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = axis_split(&shape, axis)?;
        if len == 0 {
            return Err(Error::Argument("max over an empty axis".into()));
        }
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for n in 0..inner {
                let mut best = (o * len) * inner + n;
                for i in 1..len {
                    let j = (o * len + i) * inner + n;
                    if src[j] > src[best] {
                        best = j;
                    }
                }
                out.push(src[best]);
                argmax.push(best);
            }
        }
        let req = self.req(x);
        Ok(self.push(
            Tensor::new(reduced_shape(&shape, axis), out)?,
            Op::MaxAxis { x, argmax },
            req,
        ))
    }

    /// Gathers flat element indices into a rank-1 result.
    pub fn gather(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let src = self.data(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= src.len()) {
            return Err(Error::Argument(format!(
                "gather index {bad} out of range for {} elements",
                src.len()
            )));
        }
        let out = idx.iter().map(|&i| src[i]).collect();
        let req = self.req(x);
        Ok(self.push(Tensor::new(vec![idx.len()], out)?, Op::Gather { x, idx }, req))
    }

    /// Selects whole rows of a matrix (rows may repeat).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.dims2(x, "gather_rows")?;
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::Argument(format!("row {bad} out of range for {r} rows")));
        }
        let idx = rows.iter().flat_map(|&i| i * c..(i + 1) * c).collect();
        let flat = self.gather(x, idx)?;
        self.reshape(flat, vec![rows.len(), c])
    }

    /// Selects columns `[start, end)` of a matrix.
    pub fn select_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims2(x, "select_cols")?;
        if start > end || end > c {
            return Err(Error::Argument(format!(
                "column range {start}..{end} out of bounds for {c} columns"
            )));
        }
        let idx = (0..r)
            .flat_map(|i| (start..end).map(move |j| i * c + j))
            .collect();
        let flat = self.gather(x, idx)?;
        self.reshape(flat, vec![r, end - start])
    }

    /// `[a | b]` for matrices with equal row counts.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.dims2(a, "concat lhs")?;
        let (rb, cb) = self.dims2(b, "concat rhs")?;
        if ra != rb {
            return Err(Error::Shape(format!("concat rows {ra} vs {rb}")));
        }
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            out.extend_from_slice(&ad[i * ca..(i + 1) * ca]);
            out.extend_from_slice(&bd[i * cb..(i + 1) * cb]);
        }
        let req = self.req(a) || self.req(b);
        Ok(self.push(Tensor::new(vec![ra, ca + cb], out)?, Op::ConcatCols(a, b), req))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = Tensor::new(shape, self.data(x).to_vec())?;
        let req = self.req(x);
        Ok(self.push(t, Op::Reshape(x), req))
    }

    /// Same values, gradient flow severed.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let t = Tensor::new(self.shape(x).to_vec(), self.data(x).to_vec()).expect("copy");
        self.push(t, Op::Leaf, false)
    }

    /// `‖a‖₁`
    pub fn l1_norm(&mut self, a: Var) -> Var {
        let abs = self.abs(a);
        self.sum(abs)
    }

    /// Mean squared difference.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.square(d);
        Ok(self.mean(sq))
    }

    /// Gradient of the last `backward` root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Moves the gradient of `v` into a fresh copy of its value tensor.
    pub fn tensor_with_grad(&self, v: Var) -> Tensor {
        let mut t = self.value(v).clone();
        t.set_requires_grad(self.req(v));
        if let Some(g) = self.grad(v) {
            t.set_grad(g.to_vec()).expect("grad shape");
        }
        t
    }

    /// Back-propagates from the scalar `root`.
    ///
    /// Fails if `root` is not a single value or if any gradient is non-finite.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar root, got {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.req(root) {
            grads[root.0] = Some(vec![1.0]);
        }
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.vjp(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!(
                        "gradient of tape node {i} ({:?})",
                        std::mem::discriminant(&self.nodes[i].op)
                    )));
                }
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn vjp(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        // Accumulates into the gradient slot of `v` if it participates.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.requires[v.0] {
                return;
            }
            let n = self.nodes[v.0].value.len();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = self.value(*b).dims2().unwrap().1;
                let (ad, bd) = (self.data(*a), self.data(*b));
                acc(*a, &mut |ga| {
                    gemm(1.0, MatRef::new(g, m, n), MatRef::t(bd, k, n), 1.0, ga)
                });
                acc(*b, &mut |gb| {
                    gemm(1.0, MatRef::t(ad, m, k), MatRef::new(g, m, n), 1.0, gb)
                });
            }
            Op::Transpose(a) => {
                let (r, c) = self.value(*a).dims2().unwrap();
                acc(*a, &mut |ga| {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Conv1d { x, kernel, bias } => {
                let (t, cin) = self.value(*x).dims2().unwrap();
                let (w, cout) = {
                    let s = self.shape(*kernel);
                    (s[0], s[2])
                };
                let (xd, kd) = (self.data(*x), self.data(*kernel));
                acc(*bias, &mut |gb| {
                    for row in g.chunks(cout) {
                        for (b, v) in gb.iter_mut().zip(row) {
                            *b += v;
                        }
                    }
                });
                acc(*x, &mut |gx| {
                    for (tap, (t0, t1, s)) in conv_taps(t, w).enumerate() {
                        if t1 <= t0 {
                            continue;
                        }
                        let xs = (t0 as isize + s) as usize;
                        let rows = t1 - t0;
                        gemm(
                            1.0,
                            MatRef::new(&g[t0 * cout..t1 * cout], rows, cout),
                            MatRef::t(&kd[tap * cin * cout..(tap + 1) * cin * cout], cin, cout),
                            1.0,
                            &mut gx[xs * cin..(xs + rows) * cin],
                        );
                    }
                });
                acc(*kernel, &mut |gk| {
                    for (tap, (t0, t1, s)) in conv_taps(t, w).enumerate() {
                        if t1 <= t0 {
                            continue;
                        }
                        let xs = (t0 as isize + s) as usize;
                        let rows = t1 - t0;
                        gemm(
                            1.0,
                            MatRef::t(&xd[xs * cin..(xs + rows) * cin], rows, cin),
                            MatRef::new(&g[t0 * cout..t1 * cout], rows, cout),
                            1.0,
                            &mut gk[tap * cin * cout..(tap + 1) * cin * cout],
                        );
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| {
                    for (d, s) in gb.iter_mut().zip(g) {
                        *d -= s;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                acc(*a, &mut |ga| {
                    for ((d, s), y) in ga.iter_mut().zip(g).zip(bd) {
                        *d += s * y;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((d, s), x) in gb.iter_mut().zip(g).zip(ad) {
                        *d += s * x;
                    }
                });
            }
            Op::Div(a, b) => {
                let bd = self.data(*b);
                acc(*a, &mut |ga| {
                    for ((d, s), y) in ga.iter_mut().zip(g).zip(bd) {
                        *d += s / y;
                    }
                });
                acc(*b, &mut |gb| {
                    for (((d, s), y), q) in gb.iter_mut().zip(g).zip(bd).zip(out) {
                        *d -= s * q / y;
                    }
                });
            }
            Op::AddRow(a, row) => {
                let c = self.value(*row).len();
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*row, &mut |gr| {
                    for chunk in g.chunks(c) {
                        add_into(gr, chunk);
                    }
                });
            }
            Op::MulRow(a, row) => {
                let c = self.value(*row).len();
                let (ad, rd) = (self.data(*a), self.data(*row));
                acc(*a, &mut |ga| {
                    for (gc, sc) in ga.chunks_mut(c).zip(g.chunks(c)) {
                        for ((d, s), y) in gc.iter_mut().zip(sc).zip(rd) {
                            *d += s * y;
                        }
                    }
                });
                acc(*row, &mut |gr| {
                    for (sc, xc) in g.chunks(c).zip(ad.chunks(c)) {
                        for ((d, s), x) in gr.iter_mut().zip(sc).zip(xc) {
                            *d += s * x;
                        }
                    }
                });
            }
            Op::MulCol(a, col) => {
                let c = self.value(*a).dims2().unwrap().1;
                let (ad, cd) = (self.data(*a), self.data(*col));
                acc(*a, &mut |ga| {
                    for ((gc, sc), &y) in ga.chunks_mut(c).zip(g.chunks(c)).zip(cd) {
                        for (d, s) in gc.iter_mut().zip(sc) {
                            *d += s * y;
                        }
                    }
                });
                acc(*col, &mut |gcol| {
                    for ((d, sc), xc) in gcol.iter_mut().zip(g.chunks(c)).zip(ad.chunks(c)) {
                        *d += sc.iter().zip(xc).map(|(s, x)| s * x).sum::<f64>();
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |ga| {
                for (d, s) in ga.iter_mut().zip(g) {
                    *d += s * c;
                }
            }),
            Op::AddScalar(a) | Op::Reshape(a) => acc(*a, &mut |ga| add_into(ga, g)),
            Op::MulConst(a, mask) => acc(*a, &mut |ga| {
                for ((d, s), m) in ga.iter_mut().zip(g).zip(mask) {
                    *d += s * m;
                }
            }),
            Op::Sigmoid(a) => acc(*a, &mut |ga| {
                for ((d, s), y) in ga.iter_mut().zip(g).zip(out) {
                    *d += s * y * (1.0 - y);
                }
            }),
            Op::Relu(a) => {
                let ad = self.data(*a);
                acc(*a, &mut |ga| {
                    for ((d, s), x) in ga.iter_mut().zip(g).zip(ad) {
                        if *x > 0.0 {
                            *d += s;
                        }
                    }
                });
            }
            Op::Log(a) => {
                let ad = self.data(*a);
                acc(*a, &mut |ga| {
                    for ((d, s), x) in ga.iter_mut().zip(g).zip(ad) {
                        *d += s / x;
                    }
                });
            }
            Op::Abs(a) => {
                let ad = self.data(*a);
                acc(*a, &mut |ga| {
                    for ((d, s), x) in ga.iter_mut().zip(g).zip(ad) {
                        *d += s * sign(*x);
                    }
                });
            }
            Op::Square(a) => {
                let ad = self.data(*a);
                acc(*a, &mut |ga| {
                    for ((d, s), x) in ga.iter_mut().zip(g).zip(ad) {
                        *d += 2.0 * s * x;
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(self.shape(*x), *axis).unwrap();
                acc(*x, &mut |gx| {
                    for_each_lane(outer, len, inner, |idx| {
                        let dot: f64 = idx.clone().map(|i| g[i] * out[i]).sum();
                        for i in idx {
                            gx[i] += out[i] * (g[i] - dot);
                        }
                    });
                });
            }
            Op::LogSoftmax { x, axis } => {
                let (outer, len, inner) = axis_split(self.shape(*x), *axis).unwrap();
                acc(*x, &mut |gx| {
                    for_each_lane(outer, len, inner, |idx| {
                        let total: f64 = idx.clone().map(|i| g[i]).sum();
                        for i in idx {
                            gx[i] += g[i] - out[i].exp() * total;
                        }
                    });
                });
            }
            Op::Sum(a) => acc(*a, &mut |ga| {
                for d in ga.iter_mut() {
                    *d += g[0];
                }
            }),
            Op::MeanAxis { x, axis } => {
                let (outer, len, inner) = axis_split(self.shape(*x), *axis).unwrap();
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for i in 0..len {
                            for n in 0..inner {
                                gx[(o * len + i) * inner + n] += g[o * inner + n] / len as f64;
                            }
                        }
                    }
                });
            }
            Op::MaxAxis { x, argmax } => acc(*x, &mut |gx| {
                for (s, &j) in g.iter().zip(argmax) {
                    gx[j] += s;
                }
            }),
            Op::Gather { x, idx } => acc(*x, &mut |gx| {
                for (s, &j) in g.iter().zip(idx) {
                    gx[j] += s;
                }
            }),
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).dims2().unwrap().1;
                let cb = self.value(*b).dims2().unwrap().1;
                acc(*a, &mut |ga| {
                    for (d, s) in ga.chunks_mut(ca).zip(g.chunks(ca + cb)) {
                        add_into(d, &s[..ca]);
                    }
                });
                acc(*b, &mut |gb| {
                    for (d, s) in gb.chunks_mut(cb).zip(g.chunks(ca + cb)) {
                        add_into(d, &s[ca..]);
                    }
                });
            }
        }
    }
}

/// Valid output rows `[t0, t1)` and input shift for each tap of a width-`w` kernel.
fn conv_taps(t: usize, w: usize) -> impl Iterator<Item = (usize, usize, isize)> {
    let pad = (w / 2) as isize;
    (0..w).map(move |tap| {
        let s = tap as isize - pad;
        let t0 = (-s).max(0) as usize;
        let t1 = (t as isize - s).clamp(0, t as isize) as usize;
        (t0.min(t), t1, s)
    })
}

fn for_each_lane(
    outer: usize,
    len: usize,
    inner: usize,
    mut f: impl FnMut(std::iter::StepBy<std::ops::Range<usize>>),
) {
    for o in 0..outer {
        for n in 0..inner {
            let start = o * len * inner + n;
            f((start..start + len * inner).step_by(inner.max(1)));
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
