//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] is an append-only record of forward operations. Each call such as
//! [`Tape::matmul`] computes its result eagerly, stores it with whatever the
//! backward rule needs, and hands back a [`Var`] handle. Because nodes are only
//! ever appended, the record is topologically ordered and [`Tape::backward`] is a
//! single reverse sweep.
//!
//! Tapes are rebuilt for every sequence: the adaptive halting loop decides its
//! own length at run time, so there is no static graph to reuse.
//!
//! ```
//! use aat_core::autodiff::Tape;
//! use aat_core::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
//! let y = tape.sigmoid(x);
//! let loss = tape.sum(y);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).shape(), &[3]);
//! ```

pub mod gradcheck;

use crate::error::{Error, Result};
use crate::tensor::{gemm_acc, gemm_at_acc, gemm_bt_acc, Tensor};

/// Variance floor used by [`Tape::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds, each with its inputs and any activations saved for backward.
#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { mat: Var, row: Var },
    Scale { x: Var, s: Var },
    DivScalar { x: Var, s: Var },
    Affine { x: Var, a: f64 },
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Log { x: Var, floor: f64 },
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: f64 },
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    Row { x: Var, index: usize },
    Pick { x: Var, index: usize },
    Sum(Var),
    Reshape(Var),
    StopGradient,
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Append-only record of forward operations.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradient of a scalar loss with respect to every node of a tape.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> &Tensor {
        &self.grads[v.0]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// The only element of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records an input value. Gradients are reported for leaves like any node.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant_scalar(&mut self, value: f64) -> Var {
        self.leaf(Tensor::scalar(value))
    }

    /// Matrix product. Rank-1 operands act as a row vector on the left and a
    /// column vector on the right.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (m, k, out_rows) = match sa.as_slice() {
            [k] => (1, *k, None),
            [m, k] => (*m, *k, Some(*m)),
            _ => return Err(Error::dim("matmul", &sa, &sb)),
        };
        let (kb, n, out_cols) = match sb.as_slice() {
            [kb] => (*kb, 1, None),
            [kb, n] => (*kb, *n, Some(*n)),
            _ => return Err(Error::dim("matmul", &sa, &sb)),
        };
        if k != kb {
            return Err(Error::dim("matmul", &sa, &sb));
        }
        let shape = match (out_rows, out_cols) {
            (Some(r), Some(c)) => vec![r, c],
            (Some(r), None) => vec![r],
            (None, Some(c)) => vec![c],
            (None, None) => vec![1],
        };
        let mut out = vec![0.0; m * n];
        gemm_acc(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        Ok(self.push(
            Tensor::new(shape, out).expect("matmul shape"),
            Op::MatMul { a, b, m, k, n },
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dim(op, sa, sb));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data).expect("same shape")
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| f(v)).collect();
        Tensor::new(vx.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    /// Adds a row vector to every row of a matrix.
    pub fn add_row(&mut self, mat: Var, row: Var) -> Result<Var> {
        let sm = self.shape(mat).to_vec();
        let sr = self.shape(row).to_vec();
        if sm.len() != 2 || sr.len() != 1 || sm[1] != sr[0] {
            return Err(Error::dim("add_row", &sm, &sr));
        }
        let cols = sm[1];
        let rv = self.value(row).data().to_vec();
        let mut data = self.value(mat).data().to_vec();
        for chunk in data.chunks_mut(cols) {
            for (d, r) in chunk.iter_mut().zip(&rv) {
                *d += r;
            }
        }
        Ok(self.push(Tensor::new(sm, data).expect("shape"), Op::AddRow { mat, row }))
    }

    /// Multiplies every element of `x` by the single-element node `s`.
    pub fn scale(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::dim("scale", self.shape(x), self.shape(s)));
        }
        let sv = self.scalar(s);
        let v = self.map(x, |e| e * sv);
        Ok(self.push(v, Op::Scale { x, s }))
    }

    /// Divides every element of `x` by the single-element node `s`.
    pub fn div_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::dim("div_scalar", self.shape(x), self.shape(s)));
        }
        let sv = self.scalar(s);
        if sv == 0.0 {
            return Err(Error::domain("div_scalar", "division by zero"));
        }
        let v = self.map(x, |e| e / sv);
        Ok(self.push(v, Op::DivScalar { x, s }))
    }

    /// `a·x + b` with constant coefficients.
    pub fn affine(&mut self, x: Var, a: f64, b: f64) -> Var {
        let v = self.map(x, |e| a * e + b);
        self.push(v, Op::Affine { x, a })
    }

    /// `1 − x`, written as a separate method because the halting weights use it
    /// everywhere.
    pub fn one_minus(&mut self, x: Var) -> Var {
        let v = self.map(x, |e| 1.0 - e);
        self.push(v, Op::Affine { x, a: -1.0 })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.map(x, sigmoid);
        self.push(v, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.map(x, f64::tanh);
        self.push(v, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.map(x, |e| e.max(0.0));
        self.push(v, Op::Relu(x))
    }

    /// `ln(max(x, floor))`; the gradient is zero wherever the floor is active.
    pub fn log(&mut self, x: Var, floor: f64) -> Var {
        let v = self.map(x, |e| e.max(floor).ln());
        self.push(v, Op::Log { x, floor })
    }

    /// Softmax along the last axis, with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let cols = vx.cols();
        if vx.is_empty() || cols == 0 {
            return Err(Error::domain("softmax", "empty input"));
        }
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(cols) {
            softmax_in_place(row);
        }
        let shape = vx.shape().to_vec();
        Ok(self.push(Tensor::new(shape, data).expect("shape"), Op::Softmax(x)))
    }

    /// `gain ⊙ (x − mean) / sqrt(var + δ) + bias` over a vector of length ≥ 2.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 1 {
            return Err(Error::dim("layer_norm", &sx, self.shape(gain)));
        }
        if sx[0] < 2 {
            return Err(Error::domain(
                "layer_norm",
                format!("needs at least 2 elements, got {}", sx[0]),
            ));
        }
        if self.shape(gain) != sx.as_slice() {
            return Err(Error::dim("layer_norm", &sx, self.shape(gain)));
        }
        if self.shape(bias) != sx.as_slice() {
            return Err(Error::dim("layer_norm", &sx, self.shape(bias)));
        }
        let xv = self.value(x).data();
        let d = xv.len() as f64;
        let mean = xv.iter().sum::<f64>() / d;
        let var = xv.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        let xhat: Vec<f64> = xv.iter().map(|v| (v - mean) * rstd).collect();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let out = xhat
            .iter()
            .zip(g.iter().zip(b))
            .map(|(xh, (g, b))| g * xh + b)
            .collect();
        Ok(self.push(
            Tensor::vector(out),
            Op::LayerNorm { x, gain, bias, xhat, rstd },
        ))
    }

    /// Concatenates rank-1 nodes.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 1 {
                return Err(Error::dim("concat", s, &[0]));
            }
            data.extend_from_slice(self.value(p).data());
        }
        Ok(self.push(Tensor::vector(data), Op::Concat(parts.to_vec())))
    }

    /// Elements `start..start+len` of a rank-1 node.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 1 || start + len > s[0] {
            return Err(Error::dim("slice", &s, &[start, len]));
        }
        let data = self.value(x).data()[start..start + len].to_vec();
        Ok(self.push(Tensor::vector(data), Op::Slice { x, start }))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || start + len > s[1] {
            return Err(Error::dim("slice_cols", &s, &[start, len]));
        }
        let vx = self.value(x);
        let mut data = Vec::with_capacity(s[0] * len);
        for r in 0..s[0] {
            data.extend_from_slice(&vx.row(r)[start..start + len]);
        }
        let t = Tensor::matrix(s[0], len, data).expect("shape");
        Ok(self.push(t, Op::SliceCols { x, start }))
    }

    /// Row `index` of a matrix, as a vector.
    pub fn row(&mut self, x: Var, index: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::dim("row", &s, &[index]));
        }
        if index >= s[0] {
            return Err(Error::Lookup { index, len: s[0] });
        }
        let data = self.value(x).row(index).to_vec();
        Ok(self.push(Tensor::vector(data), Op::Row { x, index }))
    }

    /// Element `index` of a rank-1 node, as a single-element node.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        let n = self.value(x).len();
        if index >= n {
            return Err(Error::Lookup { index, len: n });
        }
        let v = self.value(x).data()[index];
        Ok(self.push(Tensor::scalar(v), Op::Pick { x, index }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = self.value(x).sum();
        self.push(Tensor::scalar(v), Op::Sum(x))
    }

    /// Sums a list of single-element nodes left to right.
    pub fn sum_scalars(&mut self, items: &[Var]) -> Result<Var> {
        let Some((&first, rest)) = items.split_first() else {
            return Err(Error::domain("sum_scalars", "empty list"));
        };
        let mut acc = first;
        for &v in rest {
            acc = self.add(acc, v)?;
        }
        Ok(acc)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).len() {
            return Err(Error::dim("reshape", self.shape(x), shape));
        }
        let v = self.value(x).clone().with_shape(shape.to_vec());
        Ok(self.push(v, Op::Reshape(x)))
    }

    /// Identity in the forward pass; blocks all gradient flow to `x`.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.push(v, Op::StopGradient)
    }

    /// Propagates the gradient of the single-element node `loss` to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                let shape = node.value.shape().to_vec();
                match g {
                    Some(data) => Tensor::new(shape, data).expect("grad shape"),
                    None => Tensor::zeros(&shape),
                }
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let bv = self.value(*b).data();
                let av = self.value(*a).data();
                acc(*a, &mut |buf| gemm_bt_acc(g, bv, buf, m, n, k));
                acc(*b, &mut |buf| gemm_at_acc(av, g, buf, m, k, n));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |buf| add_into(buf, g));
                acc(*b, &mut |buf| add_into(buf, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |buf| add_into(buf, g));
                acc(*b, &mut |buf| {
                    for (d, gv) in buf.iter_mut().zip(g) {
                        *d -= gv;
                    }
                });
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                acc(*a, &mut |buf| {
                    for ((d, gv), y) in buf.iter_mut().zip(g).zip(bv) {
                        *d += gv * y;
                    }
                });
                acc(*b, &mut |buf| {
                    for ((d, gv), x) in buf.iter_mut().zip(g).zip(av) {
                        *d += gv * x;
                    }
                });
            }
            Op::AddRow { mat, row } => {
                acc(*mat, &mut |buf| add_into(buf, g));
                let cols = self.value(*row).len();
                acc(*row, &mut |buf| {
                    for chunk in g.chunks(cols) {
                        add_into(buf, chunk);
                    }
                });
            }
            Op::Scale { x, s } => {
                let sv = self.scalar(*s);
                let xv = self.value(*x).data();
                acc(*x, &mut |buf| {
                    for (d, gv) in buf.iter_mut().zip(g) {
                        *d += gv * sv;
                    }
                });
                let ds: f64 = g.iter().zip(xv).map(|(gv, x)| gv * x).sum();
                acc(*s, &mut |buf| buf[0] += ds);
            }
            Op::DivScalar { x, s } => {
                let sv = self.scalar(*s);
                let yv = node.value.data();
                acc(*x, &mut |buf| {
                    for (d, gv) in buf.iter_mut().zip(g) {
                        *d += gv / sv;
                    }
                });
                let ds: f64 = -g.iter().zip(yv).map(|(gv, y)| gv * y).sum::<f64>() / sv;
                acc(*s, &mut |buf| buf[0] += ds);
            }
            Op::Affine { x, a } => {
                let a = *a;
                acc(*x, &mut |buf| {
                    for (d, gv) in buf.iter_mut().zip(g) {
                        *d += a * gv;
                    }
                });
            }
            Op::Sigmoid(x) => {
                let yv = node.value.data();
                acc(*x, &mut |buf| {
                    for ((d, gv), y) in buf.iter_mut().zip(g).zip(yv) {
                        *d += gv * y * (1.0 - y);
                    }
                });
            }
            Op::Tanh(x) => {
                let yv = node.value.data();
                acc(*x, &mut |buf| {
                    for ((d, gv), y) in buf.iter_mut().zip(g).zip(yv) {
                        *d += gv * (1.0 - y * y);
                    }
                });
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                acc(*x, &mut |buf| {
                    for ((d, gv), xi) in buf.iter_mut().zip(g).zip(xv) {
                        if *xi > 0.0 {
                            *d += gv;
                        }
                    }
                });
            }
            Op::Log { x, floor } => {
                let xv = self.value(*x).data();
                let floor = *floor;
                acc(*x, &mut |buf| {
                    for ((d, gv), xi) in buf.iter_mut().zip(g).zip(xv) {
                        if *xi > floor {
                            *d += gv / xi;
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let yv = node.value.data();
                let cols = node.value.cols();
                acc(*x, &mut |buf| {
                    for ((drow, grow), yrow) in buf
                        .chunks_mut(cols)
                        .zip(g.chunks(cols))
                        .zip(yv.chunks(cols))
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((d, gv), y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += y * (gv - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let gainv = self.value(*gain).data();
                let dxhat: Vec<f64> = g.iter().zip(gainv).map(|(a, b)| a * b).collect();
                let d = dxhat.len() as f64;
                let mean_dxhat = dxhat.iter().sum::<f64>() / d;
                let mean_dxhat_xhat =
                    dxhat.iter().zip(xhat).map(|(a, b)| a * b).sum::<f64>() / d;
                let rstd = *rstd;
                acc(*x, &mut |buf| {
                    for ((dst, dh), xh) in buf.iter_mut().zip(&dxhat).zip(xhat) {
                        *dst += rstd * (dh - mean_dxhat - xh * mean_dxhat_xhat);
                    }
                });
                acc(*gain, &mut |buf| {
                    for ((dst, gv), xh) in buf.iter_mut().zip(g).zip(xhat) {
                        *dst += gv * xh;
                    }
                });
                acc(*bias, &mut |buf| add_into(buf, g));
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    acc(p, &mut |buf| add_into(buf, &g[offset..offset + n]));
                    offset += n;
                }
            }
            Op::Slice { x, start } => {
                let start = *start;
                acc(*x, &mut |buf| add_into(&mut buf[start..start + g.len()], g));
            }
            Op::SliceCols { x, start } => {
                let start = *start;
                let width = node.value.cols();
                let cols = self.value(*x).cols();
                acc(*x, &mut |buf| {
                    for (r, grow) in g.chunks(width).enumerate() {
                        let off = r * cols + start;
                        add_into(&mut buf[off..off + width], grow);
                    }
                });
            }
            Op::Row { x, index } => {
                let cols = g.len();
                let off = index * cols;
                acc(*x, &mut |buf| add_into(&mut buf[off..off + cols], g));
            }
            Op::Pick { x, index } => {
                let index = *index;
                acc(*x, &mut |buf| buf[index] += g[0]);
            }
            Op::Sum(x) => {
                let gv = g[0];
                acc(*x, &mut |buf| buf.iter_mut().for_each(|d| *d += gv));
            }
            Op::Reshape(x) => {
                acc(*x, &mut |buf| add_into(buf, g));
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
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

/// Numerically stable softmax of a slice, in place.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}
