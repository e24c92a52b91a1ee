//! Minimal dense N x C x H x W tensor engine with reverse-mode automatic
//! differentiation.
//!
//! Tensors are immutable f64 arrays. Ops applied to tensors that live on a
//! [`Tape`] record themselves; [`backward`] then fills the gradient of
//! every `requires_grad` leaf. Ops on tape-less tensors just compute,
//! which is the inference path.
//!
//! Shapes are static apart from the batch dimension, there is no
//! broadcasting except the single rule the attention path needs (a
//! 1-channel map applied across C channels), and everything is
//! sequential and bit-deterministic.

mod adam;
mod conv;
mod init;

pub use adam::AdamState;
pub use init::{seeded_init, InitScheme};

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::raster::resample;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Shape {
        Shape { n, c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    fn plane(&self) -> usize {
        self.h * self.w
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{},{})", self.n, self.c, self.h, self.w)
    }
}

enum Op {
    Leaf,
    Relu { x: usize },
    Sigmoid { x: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    ScalarMul { x: usize, k: f64 },
    AddScalar { x: usize },
    ConcatC { xs: Vec<usize> },
    SliceC { x: usize, start: usize },
    MeanAll { x: usize },
    Conv2d { input: usize, weight: usize, bias: usize, stride: usize, padding: usize },
    Resample { x: usize },
}

struct Node {
    shape: Shape,
    values: Rc<Vec<f64>>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_run: bool,
}

/// Recording context for reverse-mode differentiation. Recording order
/// is topological order; backward walks it once in reverse.
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    fn same_tape(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    fn push(&self, shape: Shape, values: Rc<Vec<f64>>, op: Op, requires_grad: bool) -> usize {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node { shape, values, op, requires_grad });
        inner.nodes.len() - 1
    }

    /// Register a leaf tensor (input or parameter) on this tape.
    pub fn leaf(&self, shape: Shape, values: Vec<f64>, requires_grad: bool) -> Result<Tensor> {
        let t = Tensor::from_vec(shape, values)?;
        let id = self.push(shape, Rc::clone(&t.values), Op::Leaf, requires_grad);
        Ok(Tensor { node: Some((self.clone(), id)), ..t })
    }

    /// Clear gradients and allow another backward pass.
    pub fn zero_grad(&self) {
        let mut inner = self.inner.borrow_mut();
        inner.grads.clear();
        inner.backward_run = false;
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Immutable f64 array, optionally recorded on a tape.
#[derive(Clone)]
pub struct Tensor {
    shape: Shape,
    values: Rc<Vec<f64>>,
    node: Option<(Tape, usize)>,
}

fn check_finite(values: &[f64], op: &'static str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

impl Tensor {
    /// Tape-less tensor from raw values.
    pub fn from_vec(shape: Shape, values: Vec<f64>) -> Result<Tensor> {
        if shape.numel() == 0 {
            return Err(Error::InvalidArgument(format!("empty tensor shape {shape}")));
        }
        if values.len() != shape.numel() {
            return Err(Error::InvalidArgument(format!(
                "value count {} does not match shape {shape}",
                values.len()
            )));
        }
        check_finite(&values, "from_vec")?;
        Ok(Tensor { shape, values: Rc::new(values), node: None })
    }

    pub fn constant(shape: Shape, value: f64) -> Result<Tensor> {
        Tensor::from_vec(shape, vec![value; shape.numel()])
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn node_id(&self) -> Option<usize> {
        self.node.as_ref().map(|(_, id)| *id)
    }

    pub fn requires_grad(&self) -> bool {
        match &self.node {
            Some((tape, id)) => tape.inner.borrow().nodes[*id].requires_grad,
            None => false,
        }
    }

    /// Gradient filled by [`backward`]; present only for `requires_grad`
    /// leaves.
    pub fn grad(&self) -> Option<Vec<f64>> {
        let (tape, id) = self.node.as_ref()?;
        tape.inner.borrow().grads.get(*id)?.clone()
    }

    /// Scalar value of a 1-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.shape.numel(), 1);
        self.values[0]
    }
}

/// The tape shared by the given tensors, if any; errors if two tensors
/// live on different tapes.
fn joint_tape(xs: &[&Tensor]) -> Result<Option<Tape>> {
    let mut found: Option<Tape> = None;
    for x in xs {
        if let Some((tape, _)) = &x.node {
            match &found {
                None => found = Some(tape.clone()),
                Some(t) if t.same_tape(tape) => {}
                Some(_) => {
                    return Err(Error::InvalidArgument(
                        "operands belong to different tapes".into(),
                    ))
                }
            }
        }
    }
    Ok(found)
}

/// Node id of `x` on `tape`, promoting tape-less tensors to constant
/// leaves.
fn id_on(tape: &Tape, x: &Tensor) -> usize {
    match &x.node {
        Some((_, id)) => *id,
        None => tape.push(x.shape, Rc::clone(&x.values), Op::Leaf, false),
    }
}

fn finish(
    tape: Option<Tape>,
    op_name: &'static str,
    shape: Shape,
    values: Vec<f64>,
    make_op: impl FnOnce(&Tape) -> Op,
) -> Result<Tensor> {
    check_finite(&values, op_name)?;
    let values = Rc::new(values);
    let node = match tape {
        Some(tape) => {
            let op = make_op(&tape);
            let requires_grad = {
                let inner = tape.inner.borrow();
                parent_ids(&op).iter().any(|&p| inner.nodes[p].requires_grad)
            };
            let id = tape.push(shape, Rc::clone(&values), op, requires_grad);
            Some((tape, id))
        }
        None => None,
    };
    Ok(Tensor { shape, values, node })
}

fn parent_ids(op: &Op) -> Vec<usize> {
    match op {
        Op::Leaf => vec![],
        Op::Relu { x }
        | Op::Sigmoid { x }
        | Op::ScalarMul { x, .. }
        | Op::AddScalar { x }
        | Op::SliceC { x, .. }
        | Op::MeanAll { x }
        | Op::Resample { x } => vec![*x],
        Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => vec![*a, *b],
        Op::ConcatC { xs } => xs.clone(),
        Op::Conv2d { input, weight, bias, .. } => vec![*input, *weight, *bias],
    }
}

fn require_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::shape(op, format!("{} vs {}", a.shape, b.shape)));
    }
    Ok(())
}

impl Tensor {
    pub fn relu(&self) -> Result<Tensor> {
        let values = self.values.iter().map(|&v| v.max(0.0)).collect();
        finish(joint_tape(&[self])?, "relu", self.shape, values, |t| Op::Relu {
            x: id_on(t, self),
        })
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        // split form saturates cleanly instead of overflowing exp
        let values = self
            .values
            .iter()
            .map(|&v| {
                if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                }
            })
            .collect();
        finish(joint_tape(&[self])?, "sigmoid", self.shape, values, |t| Op::Sigmoid {
            x: id_on(t, self),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        require_same_shape("add", self, other)?;
        let values = self.values.iter().zip(other.values.iter()).map(|(a, b)| a + b).collect();
        finish(joint_tape(&[self, other])?, "add", self.shape, values, |t| Op::Add {
            a: id_on(t, self),
            b: id_on(t, other),
        })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        require_same_shape("sub", self, other)?;
        let values = self.values.iter().zip(other.values.iter()).map(|(a, b)| a - b).collect();
        finish(joint_tape(&[self, other])?, "sub", self.shape, values, |t| Op::Sub {
            a: id_on(t, self),
            b: id_on(t, other),
        })
    }

    /// Elementwise product. Shapes must match, except that one operand may
    /// have a single channel, which is then applied across every channel
    /// of the other (the attention broadcast).
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        let (a, b) = (self.shape, other.shape);
        let compatible = a == b
            || (a.n == b.n && a.h == b.h && a.w == b.w && (a.c == 1 || b.c == 1));
        if !compatible {
            return Err(Error::shape("mul", format!("{a} vs {b}")));
        }
        let out_shape = Shape { c: a.c.max(b.c), ..a };
        let values = mul_broadcast(&self.values, a, &other.values, b, out_shape);
        finish(joint_tape(&[self, other])?, "mul", out_shape, values, |t| Op::Mul {
            a: id_on(t, self),
            b: id_on(t, other),
        })
    }

    pub fn scalar_mul(&self, k: f64) -> Result<Tensor> {
        let values = self.values.iter().map(|&v| v * k).collect();
        finish(joint_tape(&[self])?, "scalar_mul", self.shape, values, |t| Op::ScalarMul {
            x: id_on(t, self),
            k,
        })
    }

    pub fn add_scalar(&self, k: f64) -> Result<Tensor> {
        let values = self.values.iter().map(|&v| v + k).collect();
        finish(joint_tape(&[self])?, "add_scalar", self.shape, values, |t| Op::AddScalar {
            x: id_on(t, self),
        })
    }

    /// Channels `start..start + len` as a new tensor.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Tensor> {
        if len == 0 || start + len > self.shape.c {
            return Err(Error::shape(
                "slice_channels",
                format!("range {start}..{} of {}", start + len, self.shape),
            ));
        }
        let s = self.shape;
        let out_shape = Shape { c: len, ..s };
        let mut values = Vec::with_capacity(out_shape.numel());
        for n in 0..s.n {
            let base = n * s.c * s.plane();
            values.extend_from_slice(
                &self.values[base + start * s.plane()..base + (start + len) * s.plane()],
            );
        }
        finish(joint_tape(&[self])?, "slice_channels", out_shape, values, |t| Op::SliceC {
            x: id_on(t, self),
            start,
        })
    }

    /// Mean over every element, as a (1,1,1,1) tensor.
    pub fn mean_all(&self) -> Result<Tensor> {
        let mean = self.values.iter().sum::<f64>() / self.shape.numel() as f64;
        finish(
            joint_tape(&[self])?,
            "mean_all",
            Shape::new(1, 1, 1, 1),
            vec![mean],
            |t| Op::MeanAll { x: id_on(t, self) },
        )
    }

    /// Cross-correlation with zero padding. `weight` is (out_c, in_c, kh, kw)
    /// and `bias` is (1, out_c, 1, 1).
    pub fn conv2d(&self, weight: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
        let (ish, wsh, bsh) = (self.shape, weight.shape, bias.shape);
        if ish.c != wsh.c {
            return Err(Error::shape(
                "conv2d",
                format!("input {ish} has {} channels, weight {wsh} expects {}", ish.c, wsh.c),
            ));
        }
        if bsh != Shape::new(1, wsh.n, 1, 1) {
            return Err(Error::shape(
                "conv2d",
                format!("bias {bsh} must be (1,{},1,1)", wsh.n),
            ));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
        }
        if ish.h + 2 * padding < wsh.h || ish.w + 2 * padding < wsh.w {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {wsh} larger than padded input {ish}"),
            ));
        }
        let (values, out_shape) =
            conv::forward(&self.values, ish, &weight.values, wsh, &bias.values, stride, padding);
        finish(joint_tape(&[self, weight, bias])?, "conv2d", out_shape, values, |t| Op::Conv2d {
            input: id_on(t, self),
            weight: id_on(t, weight),
            bias: id_on(t, bias),
            stride,
            padding,
        })
    }

    /// Keys bicubic resample of every (n, c) plane; identical semantics to
    /// the raster-level resampler, and differentiable.
    pub fn resample_bicubic(&self, new_h: usize, new_w: usize) -> Result<Tensor> {
        if new_h == 0 || new_w == 0 {
            return Err(Error::InvalidArgument(
                "resample target dimensions must be positive".into(),
            ));
        }
        let s = self.shape;
        let out_shape = Shape { h: new_h, w: new_w, ..s };
        let mut values = Vec::with_capacity(out_shape.numel());
        for p in 0..s.n * s.c {
            let plane = &self.values[p * s.plane()..(p + 1) * s.plane()];
            values.extend(resample::resample_plane(plane, s.w, s.h, new_w, new_h));
        }
        finish(joint_tape(&[self])?, "resample", out_shape, values, |t| Op::Resample {
            x: id_on(t, self),
        })
    }
}

fn mul_broadcast(a: &[f64], ash: Shape, b: &[f64], bsh: Shape, out: Shape) -> Vec<f64> {
    if ash == bsh {
        return a.iter().zip(b.iter()).map(|(x, y)| x * y).collect();
    }
    let plane = out.plane();
    let mut values = vec![0.0; out.numel()];
    for n in 0..out.n {
        for c in 0..out.c {
            let ai = if ash.c == 1 { n * plane } else { (n * out.c + c) * plane };
            let bi = if bsh.c == 1 { n * plane } else { (n * out.c + c) * plane };
            let oi = (n * out.c + c) * plane;
            for i in 0..plane {
                values[oi + i] = a[ai + i] * b[bi + i];
            }
        }
    }
    values
}

/// Concatenate along the channel axis, in argument order.
pub fn concat_channels(xs: &[&Tensor]) -> Result<Tensor> {
    if xs.is_empty() {
        return Err(Error::InvalidArgument("concat_channels needs at least one input".into()));
    }
    let first = xs[0].shape;
    let mut total_c = 0;
    for x in xs {
        let s = x.shape;
        if s.n != first.n || s.h != first.h || s.w != first.w {
            return Err(Error::shape("concat_channels", format!("{first} vs {s}")));
        }
        total_c += s.c;
    }
    let out_shape = Shape { c: total_c, ..first };
    let plane = first.plane();
    let mut values = Vec::with_capacity(out_shape.numel());
    for n in 0..first.n {
        for x in xs {
            let c = x.shape.c;
            values.extend_from_slice(&x.values[n * c * plane..(n + 1) * c * plane]);
        }
    }
    let tape = joint_tape(xs)?;
    finish(tape, "concat_channels", out_shape, values, |t| Op::ConcatC {
        xs: xs.iter().map(|x| id_on(t, x)).collect(),
    })
}

/// Reverse pass: fills the gradient of every `requires_grad` leaf the
/// loss depends on. Calling it again without [`Tape::zero_grad`] is an
/// accumulation error.
pub fn backward(loss: &Tensor) -> Result<()> {
    if loss.shape.numel() != 1 {
        return Err(Error::InvalidArgument(format!(
            "backward requires a scalar loss, got shape {}",
            loss.shape
        )));
    }
    let (tape, loss_id) = loss
        .node
        .clone()
        .ok_or_else(|| Error::InvalidArgument("loss is not recorded on a tape".into()))?;
    let mut inner = tape.inner.borrow_mut();
    let inner = &mut *inner;
    if inner.backward_run {
        return Err(Error::InvalidArgument(
            "backward already run on this tape; call zero_grad to reset".into(),
        ));
    }
    inner.backward_run = true;
    inner.grads = (0..inner.nodes.len()).map(|_| None).collect();
    if !inner.nodes[loss_id].requires_grad {
        return Ok(());
    }
    inner.grads[loss_id] = Some(vec![1.0]);

    for i in (0..=loss_id).rev() {
        if matches!(inner.nodes[i].op, Op::Leaf) {
            continue; // leaves keep their accumulated gradient
        }
        let Some(g) = inner.grads[i].take() else { continue };
        let nodes = &inner.nodes;
        let grads = &mut inner.grads;
        let mut send = |idx: usize, contribution: Vec<f64>| {
            if !nodes[idx].requires_grad {
                return;
            }
            match &mut grads[idx] {
                Some(acc) => {
                    for (a, c) in acc.iter_mut().zip(&contribution) {
                        *a += c;
                    }
                }
                slot => *slot = Some(contribution),
            }
        };
        match &nodes[i].op {
            Op::Leaf => unreachable!(),
            Op::Relu { x } => {
                let xv = &nodes[*x].values;
                send(*x, g.iter().zip(xv.iter()).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect());
            }
            Op::Sigmoid { x } => {
                let y = &nodes[i].values;
                send(*x, g.iter().zip(y.iter()).map(|(g, &y)| g * y * (1.0 - y)).collect());
            }
            Op::Add { a, b } => {
                send(*a, g.clone());
                send(*b, g);
            }
            Op::Sub { a, b } => {
                send(*b, g.iter().map(|v| -v).collect());
                send(*a, g);
            }
            Op::Mul { a, b } => {
                let (ash, bsh) = (nodes[*a].shape, nodes[*b].shape);
                let out = nodes[i].shape;
                let (av, bv) = (Rc::clone(&nodes[*a].values), Rc::clone(&nodes[*b].values));
                send(*a, mul_grad(&g, &bv, bsh, ash, out));
                send(*b, mul_grad(&g, &av, ash, bsh, out));
            }
            Op::ScalarMul { x, k } => {
                let k = *k;
                send(*x, g.iter().map(|v| v * k).collect());
            }
            Op::AddScalar { x } => send(*x, g),
            Op::ConcatC { xs } => {
                let out = nodes[i].shape;
                let plane = out.plane();
                let mut offset = 0;
                for &x in xs {
                    let c = nodes[x].shape.c;
                    let mut gx = Vec::with_capacity(nodes[x].shape.numel());
                    for n in 0..out.n {
                        let base = (n * out.c + offset) * plane;
                        gx.extend_from_slice(&g[base..base + c * plane]);
                    }
                    send(x, gx);
                    offset += c;
                }
            }
            Op::SliceC { x, start } => {
                let (xs, os) = (nodes[*x].shape, nodes[i].shape);
                let plane = xs.plane();
                let mut gx = vec![0.0; xs.numel()];
                for n in 0..xs.n {
                    let dst = (n * xs.c + start) * plane;
                    let src = n * os.c * plane;
                    gx[dst..dst + os.c * plane].copy_from_slice(&g[src..src + os.c * plane]);
                }
                send(*x, gx);
            }
            Op::MeanAll { x } => {
                let numel = nodes[*x].shape.numel();
                send(*x, vec![g[0] / numel as f64; numel]);
            }
            Op::Conv2d { input, weight, bias, stride, padding } => {
                let (ish, wsh) = (nodes[*input].shape, nodes[*weight].shape);
                let osh = nodes[i].shape;
                let (iv, wv) = (Rc::clone(&nodes[*input].values), Rc::clone(&nodes[*weight].values));
                let (need_i, need_w, need_b) = (
                    nodes[*input].requires_grad,
                    nodes[*weight].requires_grad,
                    nodes[*bias].requires_grad,
                );
                let (gi, gw, gb) = conv::backward(
                    &g, osh, &iv, ish, &wv, wsh, *stride, *padding, need_i, need_w, need_b,
                );
                if let Some(gi) = gi {
                    send(*input, gi);
                }
                if let Some(gw) = gw {
                    send(*weight, gw);
                }
                if let Some(gb) = gb {
                    send(*bias, gb);
                }
            }
            Op::Resample { x } => {
                let (xs, os) = (nodes[*x].shape, nodes[i].shape);
                let mut gx = Vec::with_capacity(xs.numel());
                for p in 0..os.n * os.c {
                    let plane = &g[p * os.plane()..(p + 1) * os.plane()];
                    gx.extend(resample::resample_plane_adjoint(plane, xs.w, xs.h, os.w, os.h));
                }
                send(*x, gx);
            }
        }
    }
    Ok(())
}

fn mul_grad(g: &[f64], other: &[f64], other_shape: Shape, target: Shape, out: Shape) -> Vec<f64> {
    // d(a*b)/da = b, reduced over channels when a was broadcast
    let plane = out.plane();
    if target == out && other_shape == out {
        return g.iter().zip(other.iter()).map(|(g, o)| g * o).collect();
    }
    let mut gx = vec![0.0; target.numel()];
    for n in 0..out.n {
        for c in 0..out.c {
            let oi = (n * out.c + c) * plane;
            let other_i = if other_shape.c == 1 { n * plane } else { oi };
            let target_i = if target.c == 1 { n * plane } else { (n * target.c + c) * plane };
            for i in 0..plane {
                gx[target_i + i] += g[oi + i] * other[other_i + i];
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests;
