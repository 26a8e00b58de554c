use std::collections::BTreeMap;
use std::sync::Arc;

use super::kernels::{self, ConvGeometry};
use super::Tensor;
use crate::error::{Error, Result};

/// Floor applied inside every logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// The primitive catalog. Each variant carries its op-specific scalars.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Div,
    Scale(f64),
    MatMul,
    /// 3×3 convolution, zero padding 1. Inputs: NHWC batch, `(3, 3, cin, cout)` kernel.
    Conv2d { stride: usize },
    /// Adds a vector along the last axis.
    BiasAdd,
    Relu,
    Exp,
    /// `ln(max(x, floor))`.
    Log { floor: f64 },
    Sqrt,
    Abs,
    Sum,
    Mean,
    SumLastAxis,
    Softmax,
    SqNorm,
    Dot,
    Concat,
    Slice { start: usize, end: usize },
    Transpose,
    GlobalAvgPool,
    /// Bilinear sample of an NHWC batch at `(x, y)` pixel coordinates with
    /// zero fill. Differentiable in the image only.
    GridSample,
    Reshape { shape: Vec<usize> },
    /// Index of the largest entry along the last axis. Not differentiable.
    Argmax,
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Scale(_) => "scale",
            OpKind::MatMul => "matmul",
            OpKind::Conv2d { .. } => "conv2d",
            OpKind::BiasAdd => "bias_add",
            OpKind::Relu => "relu",
            OpKind::Exp => "exp",
            OpKind::Log { .. } => "log",
            OpKind::Sqrt => "sqrt",
            OpKind::Abs => "abs",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::SumLastAxis => "sum_last_axis",
            OpKind::Softmax => "softmax",
            OpKind::SqNorm => "sq_norm",
            OpKind::Dot => "dot",
            OpKind::Concat => "concat",
            OpKind::Slice { .. } => "slice",
            OpKind::Transpose => "transpose",
            OpKind::GlobalAvgPool => "global_avg_pool",
            OpKind::GridSample => "grid_sample",
            OpKind::Reshape { .. } => "reshape",
            OpKind::Argmax => "argmax",
        }
    }

    /// Which inputs carry an analytic gradient.
    pub fn differentiable_inputs(&self, n_inputs: usize) -> Vec<bool> {
        match self {
            OpKind::GridSample => vec![true, false],
            OpKind::Argmax => vec![false; n_inputs],
            _ => vec![true; n_inputs],
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            OpKind::Add
            | OpKind::Sub
            | OpKind::Mul
            | OpKind::Div
            | OpKind::MatMul
            | OpKind::Conv2d { .. }
            | OpKind::BiasAdd
            | OpKind::Dot
            | OpKind::GridSample => Some(2),
            OpKind::Concat => None,
            _ => Some(1),
        }
    }

    /// Evaluates the primitive. Returns the output and any context saved for
    /// the backward pass.
    pub(crate) fn eval(&self, inputs: &[&Tensor]) -> Result<(Tensor, Option<Arc<[f64]>>)> {
        let op = self.name();
        if let Some(n) = self.arity() {
            if inputs.len() != n {
                return Err(Error::shape(op, format!("expects {n} inputs, got {}", inputs.len())));
            }
        } else if inputs.is_empty() {
            return Err(Error::shape(op, "expects at least one input"));
        }
        let same_shape = |a: &Tensor, b: &Tensor| -> Result<()> {
            if a.shape() != b.shape() {
                return Err(Error::shape(
                    op,
                    format!("operand shapes differ: {:?} vs {:?}", a.shape(), b.shape()),
                ));
            }
            Ok(())
        };
        let zip = |a: &Tensor, b: &Tensor, f: fn(f64, f64) -> f64| -> Result<Tensor> {
            same_shape(a, b)?;
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::from_vec(a.shape().to_vec(), data)
        };
        let out = match self {
            OpKind::Add => zip(inputs[0], inputs[1], |x, y| x + y)?,
            OpKind::Sub => zip(inputs[0], inputs[1], |x, y| x - y)?,
            OpKind::Mul => zip(inputs[0], inputs[1], |x, y| x * y)?,
            OpKind::Div => zip(inputs[0], inputs[1], |x, y| x / y)?,
            OpKind::Scale(s) => {
                let s = *s;
                inputs[0].map(|x| s * x)
            }
            OpKind::MatMul => {
                let (a, b) = (inputs[0], inputs[1]);
                if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
                    return Err(Error::shape(
                        op,
                        format!("cannot multiply {:?} by {:?}", a.shape(), b.shape()),
                    ));
                }
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                let mut out = vec![0.0; m * n];
                kernels::matmul_acc(a.data(), b.data(), m, k, n, &mut out);
                Tensor::from_vec(vec![m, n], out)?
            }
            OpKind::Conv2d { stride } => {
                let g = conv_geometry(inputs[0], inputs[1], *stride)?;
                let cols = kernels::im2col(inputs[0].data(), &g);
                let mut out = vec![0.0; g.out_positions() * g.out_channels];
                kernels::matmul_acc(
                    &cols,
                    inputs[1].data(),
                    g.out_positions(),
                    g.patch_len(),
                    g.out_channels,
                    &mut out,
                );
                let t = Tensor::from_vec(
                    vec![g.batch, g.out_height(), g.out_width(), g.out_channels],
                    out,
                )?;
                return Ok((t, Some(cols.into())));
            }
            OpKind::BiasAdd => {
                let (x, b) = (inputs[0], inputs[1]);
                let d = x.last_dim();
                if b.ndim() != 1 || b.len() != d || x.ndim() == 0 {
                    return Err(Error::shape(
                        op,
                        format!("bias {:?} does not match last axis of {:?}", b.shape(), x.shape()),
                    ));
                }
                let mut data = x.to_vec();
                if d > 0 {
                    for row in data.chunks_exact_mut(d) {
                        for (v, bv) in row.iter_mut().zip(b.data()) {
                            *v += bv;
                        }
                    }
                }
                Tensor::from_vec(x.shape().to_vec(), data)?
            }
            OpKind::Relu => inputs[0].map(|x| if x > 0.0 { x } else { 0.0 }),
            OpKind::Exp => inputs[0].map(f64::exp),
            OpKind::Log { floor } => {
                let f = *floor;
                inputs[0].map(|x| x.max(f).ln())
            }
            OpKind::Sqrt => {
                if let Some(bad) = inputs[0].data().iter().find(|&&x| x < 0.0) {
                    return Err(Error::Numeric(format!("sqrt of negative value {bad}")));
                }
                inputs[0].map(f64::sqrt)
            }
            OpKind::Abs => inputs[0].map(f64::abs),
            OpKind::Sum => Tensor::scalar(inputs[0].data().iter().sum()),
            OpKind::Mean => {
                let x = inputs[0];
                if x.is_empty() {
                    return Err(Error::shape(op, "mean of an empty tensor"));
                }
                Tensor::scalar(x.data().iter().sum::<f64>() / x.len() as f64)
            }
            OpKind::SumLastAxis => {
                let x = inputs[0];
                if x.ndim() == 0 {
                    return Err(Error::shape(op, "scalar has no last axis"));
                }
                let d = x.last_dim();
                let data: Vec<f64> = if d == 0 {
                    vec![0.0; x.rows()]
                } else {
                    x.data().chunks_exact(d).map(|r| r.iter().sum()).collect()
                };
                Tensor::from_vec(x.shape()[..x.ndim() - 1].to_vec(), data)?
            }
            OpKind::Softmax => {
                let x = inputs[0];
                if x.ndim() == 0 || x.last_dim() == 0 {
                    return Err(Error::shape(op, format!("no axis to normalize in {:?}", x.shape())));
                }
                Tensor::from_vec(x.shape().to_vec(), kernels::softmax_rows(x.data(), x.last_dim()))?
            }
            OpKind::SqNorm => Tensor::scalar(inputs[0].sq_norm()),
            OpKind::Dot => {
                same_shape(inputs[0], inputs[1])?;
                Tensor::scalar(inputs[0].data().iter().zip(inputs[1].data()).map(|(a, b)| a * b).sum())
            }
            OpKind::Concat => {
                let first = inputs[0];
                if first.ndim() == 0 {
                    return Err(Error::shape(op, "cannot concatenate scalars"));
                }
                let lead = &first.shape()[..first.ndim() - 1];
                let rows = first.rows();
                let mut width = 0;
                for t in inputs {
                    if t.ndim() != first.ndim() || &t.shape()[..t.ndim() - 1] != lead {
                        return Err(Error::shape(
                            op,
                            format!("leading axes differ: {:?} vs {:?}", t.shape(), first.shape()),
                        ));
                    }
                    width += t.last_dim();
                }
                let mut data = Vec::with_capacity(rows * width);
                for r in 0..rows {
                    for t in inputs {
                        let d = t.last_dim();
                        data.extend_from_slice(&t.data()[r * d..(r + 1) * d]);
                    }
                }
                let mut shape = lead.to_vec();
                shape.push(width);
                Tensor::from_vec(shape, data)?
            }
            OpKind::Slice { start, end } => {
                let x = inputs[0];
                let d = x.last_dim();
                if x.ndim() == 0 || start > end || *end > d {
                    return Err(Error::shape(
                        op,
                        format!("range {start}..{end} invalid for {:?}", x.shape()),
                    ));
                }
                let w = end - start;
                let mut data = Vec::with_capacity(x.rows() * w);
                for r in 0..x.rows() {
                    data.extend_from_slice(&x.data()[r * d + start..r * d + end]);
                }
                let mut shape = x.shape().to_vec();
                *shape.last_mut().expect("ndim checked") = w;
                Tensor::from_vec(shape, data)?
            }
            OpKind::Transpose => {
                let x = inputs[0];
                if x.ndim() != 2 {
                    return Err(Error::shape(op, format!("expects a matrix, got {:?}", x.shape())));
                }
                let (r, c) = (x.shape()[0], x.shape()[1]);
                Tensor::from_vec(vec![c, r], kernels::transpose(x.data(), r, c))?
            }
            OpKind::GlobalAvgPool => {
                let x = inputs[0];
                if x.ndim() != 4 {
                    return Err(Error::shape(op, format!("expects NHWC, got {:?}", x.shape())));
                }
                let (n, h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
                let mut data = vec![0.0; n * c];
                let inv = 1.0 / (h * w) as f64;
                for b in 0..n {
                    let out = &mut data[b * c..(b + 1) * c];
                    for px in x.data()[b * h * w * c..(b + 1) * h * w * c].chunks_exact(c) {
                        for (o, v) in out.iter_mut().zip(px) {
                            *o += v;
                        }
                    }
                    for o in out.iter_mut() {
                        *o *= inv;
                    }
                }
                Tensor::from_vec(vec![n, c], data)?
            }
            OpKind::GridSample => {
                let (x, grid) = (inputs[0], inputs[1]);
                let (dims, out_hw) = grid_geometry(x, grid)?;
                let data = kernels::grid_sample(x.data(), grid.data(), dims, out_hw);
                Tensor::from_vec(vec![dims.0, out_hw.0, out_hw.1, dims.3], data)?
            }
            OpKind::Reshape { shape } => inputs[0].reshape(shape.clone())?,
            OpKind::Argmax => {
                let x = inputs[0];
                let d = x.last_dim();
                if x.ndim() == 0 || d == 0 {
                    return Err(Error::shape(op, format!("no axis to reduce in {:?}", x.shape())));
                }
                let data = x
                    .data()
                    .chunks_exact(d)
                    .map(|row| argmax(row) as f64)
                    .collect();
                Tensor::from_vec(x.shape()[..x.ndim() - 1].to_vec(), data)?
            }
        };
        Ok((out, None))
    }

    /// Vector-Jacobian product for every input. `None` marks inputs without
    /// an analytic gradient.
    pub(crate) fn vjp(
        &self,
        inputs: &[&Tensor],
        out: &Tensor,
        saved: Option<&[f64]>,
        g: &[f64],
    ) -> Vec<Option<Vec<f64>>> {
        let x0 = inputs[0].data();
        match self {
            OpKind::Add => vec![Some(g.to_vec()), Some(g.to_vec())],
            OpKind::Sub => vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())],
            OpKind::Mul => {
                let x1 = inputs[1].data();
                vec![
                    Some(g.iter().zip(x1).map(|(g, b)| g * b).collect()),
                    Some(g.iter().zip(x0).map(|(g, a)| g * a).collect()),
                ]
            }
            OpKind::Div => {
                let x1 = inputs[1].data();
                vec![
                    Some(g.iter().zip(x1).map(|(g, b)| g / b).collect()),
                    Some(
                        g.iter()
                            .zip(x0.iter().zip(x1))
                            .map(|(g, (a, b))| -g * a / (b * b))
                            .collect(),
                    ),
                ]
            }
            OpKind::Scale(s) => vec![Some(g.iter().map(|v| v * s).collect())],
            OpKind::MatMul => {
                let (a, b) = (inputs[0], inputs[1]);
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                let mut ga = vec![0.0; m * k];
                kernels::matmul_nt_acc(g, b.data(), m, n, k, &mut ga);
                let mut gb = vec![0.0; k * n];
                kernels::matmul_tn_acc(a.data(), g, m, k, n, &mut gb);
                vec![Some(ga), Some(gb)]
            }
            OpKind::Conv2d { stride } => {
                let geom = conv_geometry(inputs[0], inputs[1], *stride).expect("validated in eval");
                let cols = saved.expect("conv saves its patch matrix");
                let (p, plen, cout) = (geom.out_positions(), geom.patch_len(), geom.out_channels);
                let mut gw = vec![0.0; plen * cout];
                kernels::matmul_tn_acc(cols, g, p, plen, cout, &mut gw);
                let mut gcols = vec![0.0; p * plen];
                kernels::matmul_nt_acc(g, inputs[1].data(), p, cout, plen, &mut gcols);
                vec![Some(kernels::col2im(&gcols, &geom)), Some(gw)]
            }
            OpKind::BiasAdd => {
                let d = inputs[1].len();
                let mut gb = vec![0.0; d];
                if d > 0 {
                    for row in g.chunks_exact(d) {
                        for (o, v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                }
                vec![Some(g.to_vec()), Some(gb)]
            }
            OpKind::Relu => vec![Some(
                g.iter()
                    .zip(x0)
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect(),
            )],
            OpKind::Exp => vec![Some(g.iter().zip(out.data()).map(|(g, y)| g * y).collect())],
            OpKind::Log { floor } => vec![Some(
                g.iter()
                    .zip(x0)
                    .map(|(g, &x)| if x > *floor { g / x } else { 0.0 })
                    .collect(),
            )],
            OpKind::Sqrt => vec![Some(
                g.iter()
                    .zip(out.data())
                    .map(|(g, &y)| if y > 0.0 { 0.5 * g / y } else { 0.0 })
                    .collect(),
            )],
            OpKind::Abs => vec![Some(
                g.iter()
                    .zip(x0)
                    .map(|(g, &x)| {
                        if x > 0.0 {
                            *g
                        } else if x < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    })
                    .collect(),
            )],
            OpKind::Sum => vec![Some(vec![g[0]; x0.len()])],
            OpKind::Mean => vec![Some(vec![g[0] / x0.len() as f64; x0.len()])],
            OpKind::SumLastAxis => {
                let d = inputs[0].last_dim();
                let mut gx = vec![0.0; x0.len()];
                if d > 0 {
                    for (row, gv) in gx.chunks_exact_mut(d).zip(g) {
                        row.fill(*gv);
                    }
                }
                vec![Some(gx)]
            }
            OpKind::Softmax => {
                let d = out.last_dim();
                let mut gx = vec![0.0; x0.len()];
                for ((grow, yrow), orow) in g
                    .chunks_exact(d)
                    .zip(out.data().chunks_exact(d))
                    .zip(gx.chunks_exact_mut(d))
                {
                    let inner: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                    for ((o, g), y) in orow.iter_mut().zip(grow).zip(yrow) {
                        *o = y * (g - inner);
                    }
                }
                vec![Some(gx)]
            }
            OpKind::SqNorm => vec![Some(x0.iter().map(|x| 2.0 * x * g[0]).collect())],
            OpKind::Dot => {
                let x1 = inputs[1].data();
                vec![
                    Some(x1.iter().map(|b| b * g[0]).collect()),
                    Some(x0.iter().map(|a| a * g[0]).collect()),
                ]
            }
            OpKind::Concat => {
                let rows = out.rows();
                let width = out.last_dim();
                let mut offset = 0;
                inputs
                    .iter()
                    .map(|t| {
                        let d = t.last_dim();
                        let mut gt = Vec::with_capacity(t.len());
                        for r in 0..rows {
                            gt.extend_from_slice(&g[r * width + offset..r * width + offset + d]);
                        }
                        offset += d;
                        Some(gt)
                    })
                    .collect()
            }
            OpKind::Slice { start, end } => {
                let d = inputs[0].last_dim();
                let w = end - start;
                let mut gx = vec![0.0; x0.len()];
                for r in 0..inputs[0].rows() {
                    gx[r * d + start..r * d + end].copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                vec![Some(gx)]
            }
            OpKind::Transpose => {
                let (r, c) = (inputs[0].shape()[0], inputs[0].shape()[1]);
                vec![Some(kernels::transpose(g, c, r))]
            }
            OpKind::GlobalAvgPool => {
                let s = inputs[0].shape();
                let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
                let inv = 1.0 / (h * w) as f64;
                let mut gx = vec![0.0; x0.len()];
                for b in 0..n {
                    let gb = &g[b * c..(b + 1) * c];
                    for px in gx[b * h * w * c..(b + 1) * h * w * c].chunks_exact_mut(c) {
                        for (o, v) in px.iter_mut().zip(gb) {
                            *o = v * inv;
                        }
                    }
                }
                vec![Some(gx)]
            }
            OpKind::GridSample => {
                let (dims, out_hw) = grid_geometry(inputs[0], inputs[1]).expect("validated in eval");
                vec![
                    Some(kernels::grid_sample_backward(g, inputs[1].data(), dims, out_hw)),
                    None,
                ]
            }
            OpKind::Reshape { .. } => vec![Some(g.to_vec())],
            OpKind::Argmax => vec![None],
        }
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn conv_geometry(x: &Tensor, w: &Tensor, stride: usize) -> Result<ConvGeometry> {
    if x.ndim() != 4 {
        return Err(Error::shape("conv2d", format!("input must be NHWC, got {:?}", x.shape())));
    }
    let ws = w.shape();
    if ws.len() != 4 || ws[0] != 3 || ws[1] != 3 || ws[2] != x.shape()[3] {
        return Err(Error::shape(
            "conv2d",
            format!("kernel {:?} incompatible with input {:?}", ws, x.shape()),
        ));
    }
    if stride != 1 && stride != 2 {
        return Err(Error::shape("conv2d", format!("stride {stride} not in {{1, 2}}")));
    }
    if x.shape()[1] == 0 || x.shape()[2] == 0 {
        return Err(Error::shape("conv2d", format!("empty spatial dims {:?}", x.shape())));
    }
    Ok(ConvGeometry {
        batch: x.shape()[0],
        height: x.shape()[1],
        width: x.shape()[2],
        in_channels: x.shape()[3],
        out_channels: ws[3],
        stride,
    })
}

type GridDims = ((usize, usize, usize, usize), (usize, usize));

fn grid_geometry(x: &Tensor, grid: &Tensor) -> Result<GridDims> {
    let (xs, gs) = (x.shape(), grid.shape());
    if xs.len() != 4 || gs.len() != 4 || gs[3] != 2 || gs[0] != xs[0] {
        return Err(Error::shape(
            "grid_sample",
            format!("input {xs:?} and grid {gs:?} are incompatible"),
        ));
    }
    Ok(((xs[0], xs[1], xs[2], xs[3]), (gs[1], gs[2])))
}

struct Node {
    value: Tensor,
    op: Option<OpKind>,
    parents: Vec<Var>,
    requires_grad: bool,
    saved: Option<Arc<[f64]>>,
}

/// Ordered record of every value computed in one forward pass.
///
/// Nodes are appended in evaluation order, so parents always precede their
/// children. A tape is single-threaded; independent work uses independent
/// tapes.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    strict: bool,
}

/// Gradients of a scalar root with respect to every leaf that requires them.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    map: BTreeMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.map.get(&v.0)
    }

    pub fn contains(&self, v: Var) -> bool {
        self.map.contains_key(&v.0)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor)> {
        self.map.iter().map(|(&k, v)| (Var(k), v))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that rejects non-finite inputs to any primitive.
    pub fn strict() -> Self {
        Tape {
            nodes: Vec::new(),
            strict: true,
        }
    }

    pub fn is_strict(&self) -> bool {
        self.strict
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: None,
            parents: Vec::new(),
            requires_grad,
            saved: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op(&self, v: Var) -> Option<&OpKind> {
        self.nodes[v.0].op.as_ref()
    }

    pub fn parents(&self, v: Var) -> &[Var] {
        &self.nodes[v.0].parents
    }

    /// Applies a primitive to nodes already on this tape.
    pub fn apply(&mut self, op: OpKind, inputs: &[Var]) -> Result<Var> {
        for v in inputs {
            if v.0 >= self.nodes.len() {
                return Err(Error::Contract(format!("{:?} is not on this tape", v)));
            }
        }
        let values: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        if self.strict {
            for (i, t) in values.iter().enumerate() {
                if !t.is_finite() {
                    return Err(Error::Numeric(format!(
                        "{}: input {i} contains non-finite values",
                        op.name()
                    )));
                }
            }
        }
        let (value, saved) = op.eval(&values)?;
        let diff = op.differentiable_inputs(inputs.len());
        let requires_grad = inputs
            .iter()
            .zip(&diff)
            .any(|(v, &d)| d && self.nodes[v.0].requires_grad);
        let node = if requires_grad {
            Node {
                value,
                op: Some(op),
                parents: inputs.to_vec(),
                requires_grad,
                saved,
            }
        } else {
            // Nothing upstream needs a gradient: keep only the value.
            Node {
                value,
                op: None,
                parents: Vec::new(),
                requires_grad: false,
                saved: None,
            }
        };
        self.nodes.push(node);
        Ok(Var(self.nodes.len() - 1))
    }

    /// Gradient of `root` with respect to every leaf that requires one.
    /// Leaves that do not reach `root` receive zeros.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_node = self
            .nodes
            .get(root.0)
            .ok_or_else(|| Error::Contract(format!("{root:?} is not on this tape")))?;
        if root_node.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                root_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        if root_node.requires_grad {
            grads[root.0] = Some(vec![1.0]);
        }
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            let Some(op) = &node.op else { continue };
            let Some(g) = grads[i].take() else { continue };
            let inputs: Vec<&Tensor> = node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
            let parent_grads = op.vjp(&inputs, &node.value, node.saved.as_deref(), &g);
            for (p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !self.nodes[p.0].requires_grad {
                    continue;
                }
                match &mut grads[p.0] {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(&pg) {
                            *a += v;
                        }
                    }
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        let mut map = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if node.op.is_some() || !node.requires_grad {
                continue;
            }
            let data = grads
                .get_mut(i)
                .and_then(Option::take)
                .unwrap_or_else(|| vec![0.0; node.value.len()]);
            map.insert(i, Tensor::from_vec(node.value.shape().to_vec(), data)?);
        }
        Ok(Gradients { map })
    }

    /// Re-evaluates every recorded node from its parents and returns the
    /// rebuilt tape. Leaves are copied as-is.
    pub fn replay(&self) -> Result<Tape> {
        let mut out = Tape {
            nodes: Vec::with_capacity(self.nodes.len()),
            strict: self.strict,
        };
        for node in &self.nodes {
            match &node.op {
                None => {
                    out.nodes.push(Node {
                        value: node.value.clone(),
                        op: None,
                        parents: Vec::new(),
                        requires_grad: node.requires_grad,
                        saved: None,
                    });
                }
                Some(op) => {
                    let v = out.apply(op.clone(), &node.parents)?;
                    debug_assert_eq!(v.0 + 1, out.nodes.len());
                }
            }
        }
        Ok(out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Mul, &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Div, &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.apply(OpKind::Scale(s), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::MatMul, &[a, b])
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        self.apply(OpKind::Conv2d { stride }, &[x, w])
    }

    pub fn bias_add(&mut self, x: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::BiasAdd, &[x, b])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Relu, &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Exp, &[x])
    }

    /// Natural log with the default floor of `1e-12`.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Log { floor: LOG_FLOOR }, &[x])
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Sqrt, &[x])
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Abs, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Sum, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Mean, &[x])
    }

    pub fn sum_last_axis(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::SumLastAxis, &[x])
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Softmax, &[x])
    }

    pub fn sq_norm(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::SqNorm, &[x])
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Dot, &[a, b])
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        self.apply(OpKind::Concat, parts)
    }

    pub fn slice(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        self.apply(OpKind::Slice { start, end }, &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Transpose, &[x])
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::GlobalAvgPool, &[x])
    }

    pub fn grid_sample(&mut self, x: Var, grid: Var) -> Result<Var> {
        self.apply(OpKind::GridSample, &[x, grid])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        self.apply(OpKind::Reshape { shape }, &[x])
    }

    pub fn argmax(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Argmax, &[x])
    }
}
