//! Define-by-run tape. Each forward pass appends nodes in execution order, so
//! the node list is topologically sorted by construction and backward is a
//! single reverse sweep.

use super::kernels::{self, gemm};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Half-open rectangle of feature cells `[r0, r1) x [c0, c1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CellRect {
    pub r0: usize,
    pub r1: usize,
    pub c0: usize,
    pub c1: usize,
}

/// Every differentiable operation the tape knows about. Attributes that are
/// not tensors travel inside the variant.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    /// `[m,k]x[k,n]`, `[m,k]x[k]`, `[k]x[k,n]` or `[k]x[k]`.
    MatMul,
    Transpose,
    Add,
    Sub,
    Mul,
    /// `scale * x + shift`, elementwise.
    Affine {
        scale: f64,
        shift: f64,
    },
    /// `x[..., n] + b[n]`.
    AddBias,
    /// `a[n] (+) b[m] -> [n, m]` with entry `a_i + b_j`.
    OuterSum,
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Relu,
    /// Softmax over every entry of the input, keeping its shape.
    Softmax,
    LogSoftmax,
    /// Log-sum-exp of a matrix along `axis`.
    LogSumExp {
        axis: usize,
    },
    Sum,
    SumAxis {
        axis: usize,
    },
    MaxAxis {
        axis: usize,
    },
    /// Concatenation along the leading axis.
    Concat,
    GatherRows {
        indices: Vec<usize>,
    },
    Reshape {
        shape: Vec<usize>,
    },
    /// `x[H,W,Cin] * w[KH,KW,Cin,Cout]` with zero padding.
    Conv2d {
        stride: usize,
        padding: usize,
    },
    /// Channelwise max of `x[H,W,C]` over each rectangle, giving `[k, C]`.
    MaxPoolRect {
        rects: Vec<CellRect>,
    },
    /// `map[H,W,C]`, `points[k,2]` of (row, col) -> `[k, C]`.
    BilinearSample,
    /// `theta[n,6]` -> `[n * lattice.len(), 2]` sample points: for location
    /// `i` and lattice point `p`, `center_i + A_i (p_row, p_col, 1)^T`.
    AffineGrid {
        centers: Vec<(f64, f64)>,
        lattice: Vec<(f64, f64)>,
    },
}

impl Primitive {
    pub fn id(&self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Transpose => "transpose",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Affine { .. } => "affine",
            Primitive::AddBias => "add_bias",
            Primitive::OuterSum => "outer_sum",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Tanh => "tanh",
            Primitive::Exp => "exp",
            Primitive::Log => "log",
            Primitive::Relu => "relu",
            Primitive::Softmax => "softmax",
            Primitive::LogSoftmax => "log_softmax",
            Primitive::LogSumExp { .. } => "logsumexp",
            Primitive::Sum => "sum",
            Primitive::SumAxis { .. } => "sum_axis",
            Primitive::MaxAxis { .. } => "max_axis",
            Primitive::Concat => "concat",
            Primitive::GatherRows { .. } => "gather_rows",
            Primitive::Reshape { .. } => "reshape",
            Primitive::Conv2d { .. } => "conv2d",
            Primitive::MaxPoolRect { .. } => "max_pool_rect",
            Primitive::BilinearSample => "bilinear_sample",
            Primitive::AffineGrid { .. } => "affine_grid",
        }
    }

    /// Looks up an attribute-free primitive by id.
    pub fn from_id(id: &str) -> Result<Self> {
        Ok(match id {
            "matmul" => Primitive::MatMul,
            "transpose" => Primitive::Transpose,
            "add" => Primitive::Add,
            "sub" => Primitive::Sub,
            "mul" => Primitive::Mul,
            "add_bias" => Primitive::AddBias,
            "outer_sum" => Primitive::OuterSum,
            "sigmoid" => Primitive::Sigmoid,
            "tanh" => Primitive::Tanh,
            "exp" => Primitive::Exp,
            "log" => Primitive::Log,
            "relu" => Primitive::Relu,
            "softmax" => Primitive::Softmax,
            "log_softmax" => Primitive::LogSoftmax,
            "sum" => Primitive::Sum,
            "concat" => Primitive::Concat,
            "bilinear_sample" => Primitive::BilinearSample,
            other => return Err(Error::UnknownPrimitive(other.to_string())),
        })
    }
}

#[derive(Debug)]
enum Saved {
    None,
    Indices(Vec<usize>),
    Buffer(Vec<f64>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Option<Primitive>,
    inputs: Vec<Var>,
    saved: Saved,
    needs_grad: bool,
}

/// Gradients of a scalar loss with respect to the leaves of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// `None` means the leaf was not reached, i.e. its gradient is zero.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn accumulate_into(&self, var: Var, tensor: &mut Tensor) -> Result<()> {
        match self.get(var) {
            Some(g) => tensor.accumulate_grad(g),
            None => tensor.accumulate_grad(&vec![0.0; tensor.len()]),
        }
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn mismatch(op: &'static str, shapes: &[&[usize]]) -> Error {
    Error::ShapeMismatch {
        op,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
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

    /// Records a leaf. Whether it receives a gradient follows
    /// `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        let value = Tensor::from_parts(tensor.shape().to_vec(), tensor.data().to_vec());
        self.push(value, None, Vec::new(), Saved::None, tensor.requires_grad())
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        let value = Tensor::from_parts(tensor.shape().to_vec(), tensor.into_data());
        self.push(value, None, Vec::new(), Saved::None, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(
        &mut self,
        value: Tensor,
        op: Option<Primitive>,
        inputs: Vec<Var>,
        saved: Saved,
        needs_grad: bool,
    ) -> Var {
        self.nodes.push(Node {
            value,
            op,
            inputs,
            saved,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Evaluates `op` on `inputs` and records the result.
    pub fn apply(&mut self, op: Primitive, inputs: &[Var]) -> Result<Var> {
        for v in inputs {
            if v.0 >= self.nodes.len() {
                return Err(Error::InvalidArgument(format!(
                    "{}: input {} is not on this tape",
                    op.id(),
                    v.0
                )));
            }
        }
        let arity = match &op {
            Primitive::MatMul
            | Primitive::Add
            | Primitive::Sub
            | Primitive::Mul
            | Primitive::AddBias
            | Primitive::OuterSum
            | Primitive::Conv2d { .. }
            | Primitive::BilinearSample => Some(2),
            Primitive::Concat => None,
            _ => Some(1),
        };
        if let Some(expected) = arity {
            if inputs.len() != expected {
                return Err(Error::Arity {
                    op: op.id(),
                    expected,
                    got: inputs.len(),
                });
            }
        } else if inputs.is_empty() {
            return Err(Error::Arity {
                op: op.id(),
                expected: 1,
                got: 0,
            });
        }
        let (value, saved) = self.forward(&op, inputs)?;
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push(value, Some(op), inputs.to_vec(), saved, needs_grad))
    }

    fn forward(&self, op: &Primitive, inputs: &[Var]) -> Result<(Tensor, Saved)> {
        let x = self.value(inputs[0]);
        let xs = x.shape();
        let xd = x.data();
        let unary = |f: &dyn Fn(f64) -> f64| {
            Tensor::from_parts(xs.to_vec(), xd.iter().map(|&v| f(v)).collect())
        };
        let out = match op {
            Primitive::MatMul => {
                let b = self.value(inputs[1]);
                let (m, k, n, shape) = matmul_dims(xs, b.shape())?;
                let mut c = vec![0.0; m * n];
                gemm(m, k, n, xd, (k, 1), b.data(), (n, 1), &mut c, 0.0);
                (Tensor::from_parts(shape, c), Saved::None)
            }
            Primitive::Transpose => {
                if xs.len() != 2 {
                    return Err(mismatch("transpose", &[xs]));
                }
                let (r, c) = (xs[0], xs[1]);
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        out[j * r + i] = xd[i * c + j];
                    }
                }
                (Tensor::from_parts(vec![c, r], out), Saved::None)
            }
            Primitive::Add | Primitive::Sub | Primitive::Mul => {
                let b = self.value(inputs[1]);
                if xs != b.shape() {
                    return Err(mismatch(op.id(), &[xs, b.shape()]));
                }
                let f: fn(f64, f64) -> f64 = match op {
                    Primitive::Add => |a, b| a + b,
                    Primitive::Sub => |a, b| a - b,
                    _ => |a, b| a * b,
                };
                let data = xd.iter().zip(b.data()).map(|(&a, &b)| f(a, b)).collect();
                (Tensor::from_parts(xs.to_vec(), data), Saved::None)
            }
            Primitive::Affine { scale, shift } => (unary(&|v| scale * v + shift), Saved::None),
            Primitive::AddBias => {
                let b = self.value(inputs[1]);
                let n = *xs.last().unwrap();
                if b.shape() != [n] {
                    return Err(mismatch("add_bias", &[xs, b.shape()]));
                }
                let bd = b.data();
                let data = xd.iter().enumerate().map(|(i, &v)| v + bd[i % n]).collect();
                (Tensor::from_parts(xs.to_vec(), data), Saved::None)
            }
            Primitive::OuterSum => {
                let b = self.value(inputs[1]);
                if xs.len() != 1 || b.shape().len() != 1 {
                    return Err(mismatch("outer_sum", &[xs, b.shape()]));
                }
                let (n, m) = (xs[0], b.shape()[0]);
                let mut data = Vec::with_capacity(n * m);
                for &a in xd {
                    data.extend(b.data().iter().map(|&bv| a + bv));
                }
                (Tensor::from_parts(vec![n, m], data), Saved::None)
            }
            Primitive::Sigmoid => (unary(&kernels::sigmoid), Saved::None),
            Primitive::Tanh => (unary(&f64::tanh), Saved::None),
            Primitive::Exp => (unary(&f64::exp), Saved::None),
            Primitive::Log => (unary(&f64::ln), Saved::None),
            Primitive::Relu => (unary(&|v| if v > 0.0 { v } else { 0.0 }), Saved::None),
            Primitive::Softmax => (
                Tensor::from_parts(xs.to_vec(), kernels::softmax(xd)),
                Saved::None,
            ),
            Primitive::LogSoftmax => {
                let lse = kernels::logsumexp(xd);
                (unary(&|v| v - lse), Saved::None)
            }
            Primitive::LogSumExp { axis } => {
                let (r, c) = matrix_dims(op, xs, *axis)?;
                let out = reduce_axis(xd, r, c, *axis, kernels::logsumexp);
                let shape = vec![if *axis == 0 { c } else { r }];
                (Tensor::from_parts(shape, out), Saved::None)
            }
            Primitive::Sum => (Tensor::scalar(xd.iter().sum()), Saved::None),
            Primitive::SumAxis { axis } => {
                let (r, c) = matrix_dims(op, xs, *axis)?;
                let out = reduce_axis(xd, r, c, *axis, |s| s.iter().sum());
                let shape = vec![if *axis == 0 { c } else { r }];
                (Tensor::from_parts(shape, out), Saved::None)
            }
            Primitive::MaxAxis { axis } => {
                let (r, c) = matrix_dims(op, xs, *axis)?;
                let (outer, inner) = if *axis == 0 { (c, r) } else { (r, c) };
                let mut out = Vec::with_capacity(outer);
                let mut arg = Vec::with_capacity(outer);
                for o in 0..outer {
                    let idx = |i: usize| if *axis == 0 { i * c + o } else { o * c + i };
                    let mut best = idx(0);
                    for i in 1..inner {
                        if xd[idx(i)] > xd[best] {
                            best = idx(i);
                        }
                    }
                    out.push(xd[best]);
                    arg.push(best);
                }
                (Tensor::from_parts(vec![outer], out), Saved::Indices(arg))
            }
            Primitive::Concat => {
                let tail = &xs[1..];
                let mut lead = 0;
                let mut data = Vec::new();
                for v in inputs {
                    let t = self.value(*v);
                    if t.shape().len() != xs.len() || &t.shape()[1..] != tail {
                        return Err(mismatch("concat", &[xs, t.shape()]));
                    }
                    lead += t.shape()[0];
                    data.extend_from_slice(t.data());
                }
                let mut shape = vec![lead];
                shape.extend_from_slice(tail);
                (Tensor::from_parts(shape, data), Saved::None)
            }
            Primitive::GatherRows { indices } => {
                let row: usize = xs[1..].iter().product();
                let mut data = Vec::with_capacity(indices.len() * row);
                for &i in indices {
                    if i >= xs[0] {
                        return Err(Error::InvalidArgument(format!(
                            "gather_rows: index {i} out of range for {xs:?}"
                        )));
                    }
                    data.extend_from_slice(&xd[i * row..(i + 1) * row]);
                }
                if indices.is_empty() {
                    return Err(Error::InvalidArgument("gather_rows: no indices".into()));
                }
                let mut shape = vec![indices.len()];
                shape.extend_from_slice(&xs[1..]);
                (Tensor::from_parts(shape, data), Saved::None)
            }
            Primitive::Reshape { shape } => (x.reshape(shape)?, Saved::None),
            Primitive::Conv2d { stride, padding } => {
                let w = self.value(inputs[1]);
                let geom = kernels::ConvGeom::new(xs, w.shape(), *stride, *padding)
                    .ok_or_else(|| mismatch("conv2d", &[xs, w.shape()]))?;
                let cols = kernels::im2col(xd, &geom);
                let mut out = vec![0.0; geom.out_positions() * geom.cout];
                let kdim = geom.patch_len();
                gemm(
                    geom.out_positions(),
                    kdim,
                    geom.cout,
                    &cols,
                    (kdim, 1),
                    w.data(),
                    (geom.cout, 1),
                    &mut out,
                    0.0,
                );
                (
                    Tensor::from_parts(vec![geom.ho, geom.wo, geom.cout], out),
                    Saved::Buffer(cols),
                )
            }
            Primitive::MaxPoolRect { rects } => {
                if xs.len() != 3 || rects.is_empty() {
                    return Err(mismatch("max_pool_rect", &[xs]));
                }
                let (h, w, c) = (xs[0], xs[1], xs[2]);
                let mut out = Vec::with_capacity(rects.len() * c);
                let mut arg = Vec::with_capacity(rects.len() * c);
                for rect in rects {
                    if rect.r0 >= rect.r1 || rect.c0 >= rect.c1 || rect.r1 > h || rect.c1 > w {
                        return Err(Error::InvalidArgument(format!(
                            "max_pool_rect: rectangle {rect:?} invalid for map {xs:?}"
                        )));
                    }
                    for ch in 0..c {
                        let mut best = (rect.r0 * w + rect.c0) * c + ch;
                        for r in rect.r0..rect.r1 {
                            for col in rect.c0..rect.c1 {
                                let i = (r * w + col) * c + ch;
                                if xd[i] > xd[best] {
                                    best = i;
                                }
                            }
                        }
                        out.push(xd[best]);
                        arg.push(best);
                    }
                }
                (
                    Tensor::from_parts(vec![rects.len(), c], out),
                    Saved::Indices(arg),
                )
            }
            Primitive::BilinearSample => {
                let p = self.value(inputs[1]);
                if xs.len() != 3 || p.shape().len() != 2 || p.shape()[1] != 2 {
                    return Err(mismatch("bilinear_sample", &[xs, p.shape()]));
                }
                if let Some(bad) = p.data().iter().find(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!(
                        "bilinear_sample coordinate {bad}"
                    )));
                }
                let out = kernels::bilinear_forward(xd, xs, p.data());
                (
                    Tensor::from_parts(vec![p.shape()[0], xs[2]], out),
                    Saved::None,
                )
            }
            Primitive::AffineGrid { centers, lattice } => {
                if xs.len() != 2 || xs[1] != 6 || xs[0] != centers.len() || lattice.is_empty() {
                    return Err(mismatch("affine_grid", &[xs, &[centers.len(), 6]]));
                }
                let mut out = Vec::with_capacity(centers.len() * lattice.len() * 2);
                for (i, &(ci, cj)) in centers.iter().enumerate() {
                    let a = &xd[i * 6..i * 6 + 6];
                    for &(pr, pc) in lattice {
                        out.push(ci + a[0] * pr + a[1] * pc + a[2]);
                        out.push(cj + a[3] * pr + a[4] * pc + a[5]);
                    }
                }
                (
                    Tensor::from_parts(vec![centers.len() * lattice.len(), 2], out),
                    Saved::None,
                )
            }
        };
        Ok(out)
    }

    /// Reverse sweep from a scalar `loss`. Only leaves that require a gradient
    /// keep an entry in the result.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(op) = node.op.as_ref() else {
                if !node.needs_grad {
                    grads[i] = None;
                }
                continue;
            };
            let Some(g) = grads[i].take() else { continue };
            if !node.needs_grad {
                continue;
            }
            self.backward_node(node, op, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn backward_node(
        &self,
        node: &Node,
        op: &Primitive,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        let inputs = &node.inputs;
        let y = node.value.data();
        let x = self.value(inputs[0]);
        let xd = x.data();
        let want = |v: Var| self.nodes[v.0].needs_grad;
        let mut acc = |v: Var, delta: Vec<f64>| accumulate(grads, v, delta);

        match op {
            Primitive::MatMul => {
                let b = self.value(inputs[1]);
                let (m, k, n, _) = matmul_dims(x.shape(), b.shape())?;
                if want(inputs[0]) {
                    // dA = dC B^T
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, (n, 1), b.data(), (1, n), &mut da, 0.0);
                    acc(inputs[0], da);
                }
                if want(inputs[1]) {
                    // dB = A^T dC
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, xd, (1, k), g, (n, 1), &mut db, 0.0);
                    acc(inputs[1], db);
                }
            }
            Primitive::Transpose => {
                let (r, c) = (x.shape()[0], x.shape()[1]);
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = g[j * r + i];
                    }
                }
                acc(inputs[0], dx);
            }
            Primitive::Add => {
                if want(inputs[0]) {
                    acc(inputs[0], g.to_vec());
                }
                if want(inputs[1]) {
                    acc(inputs[1], g.to_vec());
                }
            }
            Primitive::Sub => {
                if want(inputs[0]) {
                    acc(inputs[0], g.to_vec());
                }
                if want(inputs[1]) {
                    acc(inputs[1], g.iter().map(|v| -v).collect());
                }
            }
            Primitive::Mul => {
                let b = self.value(inputs[1]).data();
                if want(inputs[0]) {
                    acc(inputs[0], g.iter().zip(b).map(|(g, b)| g * b).collect());
                }
                if want(inputs[1]) {
                    acc(inputs[1], g.iter().zip(xd).map(|(g, a)| g * a).collect());
                }
            }
            Primitive::Affine { scale, .. } => {
                acc(inputs[0], g.iter().map(|v| v * scale).collect());
            }
            Primitive::AddBias => {
                if want(inputs[0]) {
                    acc(inputs[0], g.to_vec());
                }
                if want(inputs[1]) {
                    let n = self.value(inputs[1]).len();
                    let mut db = vec![0.0; n];
                    for (i, v) in g.iter().enumerate() {
                        db[i % n] += v;
                    }
                    acc(inputs[1], db);
                }
            }
            Primitive::OuterSum => {
                let (n, m) = (node.value.shape()[0], node.value.shape()[1]);
                if want(inputs[0]) {
                    acc(inputs[0], g.chunks(m).map(|row| row.iter().sum()).collect());
                }
                if want(inputs[1]) {
                    let mut db = vec![0.0; m];
                    for row in g.chunks(m).take(n) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    acc(inputs[1], db);
                }
            }
            Primitive::Sigmoid => {
                acc(
                    inputs[0],
                    g.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect(),
                );
            }
            Primitive::Tanh => {
                acc(
                    inputs[0],
                    g.iter().zip(y).map(|(g, t)| g * (1.0 - t * t)).collect(),
                );
            }
            Primitive::Exp => {
                acc(inputs[0], g.iter().zip(y).map(|(g, e)| g * e).collect());
            }
            Primitive::Log => {
                acc(inputs[0], g.iter().zip(xd).map(|(g, v)| g / v).collect());
            }
            Primitive::Relu => {
                acc(
                    inputs[0],
                    g.iter()
                        .zip(xd)
                        .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                        .collect(),
                );
            }
            Primitive::Softmax => {
                let dot: f64 = g.iter().zip(y).map(|(g, p)| g * p).sum();
                acc(
                    inputs[0],
                    g.iter().zip(y).map(|(g, p)| p * (g - dot)).collect(),
                );
            }
            Primitive::LogSoftmax => {
                let total: f64 = g.iter().sum();
                acc(
                    inputs[0],
                    g.iter()
                        .zip(y)
                        .map(|(g, ly)| g - ly.exp() * total)
                        .collect(),
                );
            }
            Primitive::LogSumExp { axis } => {
                let (r, c) = (x.shape()[0], x.shape()[1]);
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        let o = if *axis == 0 { j } else { i };
                        dx[i * c + j] = g[o] * (xd[i * c + j] - y[o]).exp();
                    }
                }
                acc(inputs[0], dx);
            }
            Primitive::Sum => {
                acc(inputs[0], vec![g[0]; xd.len()]);
            }
            Primitive::SumAxis { axis } => {
                let (r, c) = (x.shape()[0], x.shape()[1]);
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = g[if *axis == 0 { j } else { i }];
                    }
                }
                acc(inputs[0], dx);
            }
            Primitive::MaxAxis { .. } | Primitive::MaxPoolRect { .. } => {
                let Saved::Indices(arg) = &node.saved else {
                    unreachable!("max ops save their argmax")
                };
                let mut dx = vec![0.0; xd.len()];
                for (&i, v) in arg.iter().zip(g) {
                    dx[i] += v;
                }
                acc(inputs[0], dx);
            }
            Primitive::Concat => {
                let mut offset = 0;
                for &v in inputs {
                    let n = self.value(v).len();
                    if want(v) {
                        acc(v, g[offset..offset + n].to_vec());
                    }
                    offset += n;
                }
            }
            Primitive::GatherRows { indices } => {
                let row: usize = x.shape()[1..].iter().product();
                let mut dx = vec![0.0; xd.len()];
                for (k, &i) in indices.iter().enumerate() {
                    for (d, v) in dx[i * row..(i + 1) * row]
                        .iter_mut()
                        .zip(&g[k * row..(k + 1) * row])
                    {
                        *d += v;
                    }
                }
                acc(inputs[0], dx);
            }
            Primitive::Reshape { .. } => acc(inputs[0], g.to_vec()),
            Primitive::Conv2d { stride, padding } => {
                let w = self.value(inputs[1]);
                let geom = kernels::ConvGeom::new(x.shape(), w.shape(), *stride, *padding)
                    .expect("validated in forward");
                let Saved::Buffer(cols) = &node.saved else {
                    unreachable!("conv2d saves its patch matrix")
                };
                let (p, kdim, cout) = (geom.out_positions(), geom.patch_len(), geom.cout);
                if want(inputs[1]) {
                    // dW = cols^T dY
                    let mut dw = vec![0.0; kdim * cout];
                    gemm(kdim, p, cout, cols, (1, kdim), g, (cout, 1), &mut dw, 0.0);
                    acc(inputs[1], dw);
                }
                if want(inputs[0]) {
                    // dCols = dY W^T
                    let mut dcols = vec![0.0; p * kdim];
                    gemm(
                        p,
                        cout,
                        kdim,
                        g,
                        (cout, 1),
                        w.data(),
                        (1, cout),
                        &mut dcols,
                        0.0,
                    );
                    acc(inputs[0], kernels::col2im(&dcols, &geom));
                }
            }
            Primitive::BilinearSample => {
                let p = self.value(inputs[1]);
                let (dmap, dpts) = kernels::bilinear_backward(xd, x.shape(), p.data(), g);
                if want(inputs[0]) {
                    acc(inputs[0], dmap);
                }
                if want(inputs[1]) {
                    acc(inputs[1], dpts);
                }
            }
            Primitive::AffineGrid { centers, lattice } => {
                let mut dtheta = vec![0.0; centers.len() * 6];
                for i in 0..centers.len() {
                    for (l, &(pr, pc)) in lattice.iter().enumerate() {
                        let row = (i * lattice.len() + l) * 2;
                        let (gr, gc) = (g[row], g[row + 1]);
                        let d = &mut dtheta[i * 6..i * 6 + 6];
                        d[0] += gr * pr;
                        d[1] += gr * pc;
                        d[2] += gr;
                        d[3] += gc * pr;
                        d[4] += gc * pc;
                        d[5] += gc;
                    }
                }
                acc(inputs[0], dtheta);
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, d) in existing.iter_mut().zip(&delta) {
                *e += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize, Vec<usize>)> {
    let dims = match (a.len(), b.len()) {
        (2, 2) if a[1] == b[0] => (a[0], a[1], b[1], vec![a[0], b[1]]),
        (2, 1) if a[1] == b[0] => (a[0], a[1], 1, vec![a[0]]),
        (1, 2) if a[0] == b[0] => (1, a[0], b[1], vec![b[1]]),
        (1, 1) if a[0] == b[0] => (1, a[0], 1, vec![1]),
        _ => return Err(mismatch("matmul", &[a, b])),
    };
    Ok(dims)
}

fn matrix_dims(op: &Primitive, shape: &[usize], axis: usize) -> Result<(usize, usize)> {
    if shape.len() != 2 || axis > 1 {
        return Err(Error::ShapeMismatch {
            op: op.id(),
            shapes: vec![shape.to_vec(), vec![axis]],
        });
    }
    Ok((shape[0], shape[1]))
}

fn reduce_axis(
    data: &[f64],
    r: usize,
    c: usize,
    axis: usize,
    f: impl Fn(&[f64]) -> f64,
) -> Vec<f64> {
    if axis == 1 {
        data.chunks(c).map(&f).collect()
    } else {
        let mut col = vec![0.0; r];
        (0..c)
            .map(|j| {
                for i in 0..r {
                    col[i] = data[i * c + j];
                }
                f(&col)
            })
            .collect()
    }
}

/// Typed conveniences over [`Tape::apply`].
impl Tape {
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::MatMul, &[a, b])
    }
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Transpose, &[a])
    }
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Mul, &[a, b])
    }
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var> {
        self.apply(Primitive::Affine { scale, shift }, &[a])
    }
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::AddBias, &[x, b])
    }
    pub fn outer_sum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::OuterSum, &[a, b])
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Sigmoid, &[a])
    }
    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Tanh, &[a])
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Exp, &[a])
    }
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Log, &[a])
    }
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Relu, &[a])
    }
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Softmax, &[a])
    }
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::LogSoftmax, &[a])
    }
    pub fn logsumexp(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::LogSumExp { axis }, &[a])
    }
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Sum, &[a])
    }
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::SumAxis { axis }, &[a])
    }
    pub fn max_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::MaxAxis { axis }, &[a])
    }
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        self.apply(Primitive::Concat, parts)
    }
    pub fn gather_rows(&mut self, x: Var, indices: Vec<usize>) -> Result<Var> {
        self.apply(Primitive::GatherRows { indices }, &[x])
    }
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.apply(
            Primitive::Reshape {
                shape: shape.to_vec(),
            },
            &[x],
        )
    }
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        self.apply(Primitive::Conv2d { stride, padding }, &[x, w])
    }
    pub fn max_pool_rect(&mut self, x: Var, rects: Vec<CellRect>) -> Result<Var> {
        self.apply(Primitive::MaxPoolRect { rects }, &[x])
    }
    pub fn bilinear_sample(&mut self, map: Var, points: Var) -> Result<Var> {
        self.apply(Primitive::BilinearSample, &[map, points])
    }
    pub fn affine_grid(
        &mut self,
        theta: Var,
        centers: Vec<(f64, f64)>,
        lattice: Vec<(f64, f64)>,
    ) -> Result<Var> {
        self.apply(Primitive::AffineGrid { centers, lattice }, &[theta])
    }
}
