use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use super::kernels::{self, Padding};
use super::tensor::Tensor;
use crate::error::{shape_err, Error, Result};

/// A differentiable operation defined outside the built-in catalog.
///
/// `backward` receives the forward inputs, the forward output and the
/// upstream gradient, and returns one gradient per input (`None` for inputs
/// that are not differentiable).
pub trait CustomOp: fmt::Debug {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

/// Primitive applications a tape can record, with their attributes.
#[derive(Clone, Debug)]
pub enum Primitive {
    Add,
    Multiply,
    Scale(f64),
    /// Batched matrix product over matching leading dimensions.
    MatMul,
    /// Inputs `[x, kernel]` or `[x, kernel, bias]`.
    Conv2d {
        stride: usize,
        pad: usize,
    },
    /// Inputs `[x, kernel]` or `[x, kernel, bias]`.
    ConvTranspose2d {
        stride: usize,
        pad: usize,
    },
    /// Inputs `[x, weight, bias]`.
    FullyConnected,
    /// Inputs `[x, gamma, beta]`; normalizes over the last axis.
    LayerNorm {
        eps: f64,
    },
    Softmax {
        axis: usize,
    },
    Gelu,
    GlobalAvgPool,
    Reshape(Vec<usize>),
    Permute(Vec<usize>),
    Concat {
        axis: usize,
    },
    /// One part of a `split`.
    Narrow {
        axis: usize,
        start: usize,
        len: usize,
    },
    Sum,
    Sqrt,
    Softplus,
    ReflectPad(Padding),
    Custom(Rc<dyn CustomOp>),
}

/// Names of the primitive catalog.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PrimitiveKind {
    Add,
    Multiply,
    Scale,
    MatMul,
    Conv2d,
    ConvTranspose2d,
    FullyConnected,
    LayerNorm,
    Softmax,
    Gelu,
    GlobalAvgPool,
    Reshape,
    Permute,
    Concat,
    Split,
    Sum,
    Sqrt,
    Softplus,
    ReflectPad,
}

impl PrimitiveKind {
    pub const ALL: [PrimitiveKind; 19] = [
        Self::Add,
        Self::Multiply,
        Self::Scale,
        Self::MatMul,
        Self::Conv2d,
        Self::ConvTranspose2d,
        Self::FullyConnected,
        Self::LayerNorm,
        Self::Softmax,
        Self::Gelu,
        Self::GlobalAvgPool,
        Self::Reshape,
        Self::Permute,
        Self::Concat,
        Self::Split,
        Self::Sum,
        Self::Sqrt,
        Self::Softplus,
        Self::ReflectPad,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Add => "add",
            Self::Multiply => "multiply",
            Self::Scale => "scalar-scale",
            Self::MatMul => "matmul",
            Self::Conv2d => "conv2d",
            Self::ConvTranspose2d => "transposed-conv2d",
            Self::FullyConnected => "fully-connected",
            Self::LayerNorm => "layer-norm",
            Self::Softmax => "softmax",
            Self::Gelu => "gelu",
            Self::GlobalAvgPool => "global-average-pool",
            Self::Reshape => "reshape",
            Self::Permute => "axis-permute",
            Self::Concat => "concat",
            Self::Split => "split",
            Self::Sum => "sum",
            Self::Sqrt => "sqrt",
            Self::Softplus => "softplus",
            Self::ReflectPad => "reflect-pad",
        }
    }
}

impl fmt::Display for PrimitiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PrimitiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::UnknownPrimitive(s.to_string()))
    }
}

impl Primitive {
    pub fn kind(&self) -> Option<PrimitiveKind> {
        Some(match self {
            Self::Add => PrimitiveKind::Add,
            Self::Multiply => PrimitiveKind::Multiply,
            Self::Scale(_) => PrimitiveKind::Scale,
            Self::MatMul => PrimitiveKind::MatMul,
            Self::Conv2d { .. } => PrimitiveKind::Conv2d,
            Self::ConvTranspose2d { .. } => PrimitiveKind::ConvTranspose2d,
            Self::FullyConnected => PrimitiveKind::FullyConnected,
            Self::LayerNorm { .. } => PrimitiveKind::LayerNorm,
            Self::Softmax { .. } => PrimitiveKind::Softmax,
            Self::Gelu => PrimitiveKind::Gelu,
            Self::GlobalAvgPool => PrimitiveKind::GlobalAvgPool,
            Self::Reshape(_) => PrimitiveKind::Reshape,
            Self::Permute(_) => PrimitiveKind::Permute,
            Self::Concat { .. } => PrimitiveKind::Concat,
            Self::Narrow { .. } => PrimitiveKind::Split,
            Self::Sum => PrimitiveKind::Sum,
            Self::Sqrt => PrimitiveKind::Sqrt,
            Self::Softplus => PrimitiveKind::Softplus,
            Self::ReflectPad(_) => PrimitiveKind::ReflectPad,
            Self::Custom(_) => return None,
        })
    }

    fn name(&self) -> &'static str {
        match self {
            Self::Custom(op) => op.name(),
            p => p.kind().expect("catalog primitive").name(),
        }
    }

    fn arity_ok(&self, n: usize) -> bool {
        match self {
            Self::Add | Self::Multiply | Self::MatMul => n == 2,
            Self::Conv2d { .. } | Self::ConvTranspose2d { .. } => n == 2 || n == 3,
            Self::FullyConnected | Self::LayerNorm { .. } => n == 3,
            Self::Concat { .. } => n >= 1,
            Self::Custom(_) => true,
            _ => n == 1,
        }
    }

    fn forward(&self, x: &[&Tensor]) -> Result<Tensor> {
        if !self.arity_ok(x.len()) {
            return Err(shape_err(
                "apply",
                format!("{} does not take {} inputs", self.name(), x.len()),
            ));
        }
        match self {
            Self::Add => {
                kernels::same_shape("add", x[0], x[1])?;
                Ok(kernels::zip_with(x[0], x[1], |a, b| a + b))
            }
            Self::Multiply => {
                kernels::same_shape("multiply", x[0], x[1])?;
                Ok(kernels::zip_with(x[0], x[1], |a, b| a * b))
            }
            Self::Scale(s) => Ok(x[0].map(|v| v * s)),
            Self::MatMul => kernels::matmul(x[0], x[1]),
            Self::Conv2d { stride, pad } => kernels::conv2d(x[0], x[1], x.get(2).copied(), *stride, *pad),
            Self::ConvTranspose2d { stride, pad } => {
                kernels::conv_transpose2d(x[0], x[1], x.get(2).copied(), *stride, *pad)
            }
            Self::FullyConnected => kernels::fully_connected(x[0], x[1], x[2]),
            Self::LayerNorm { eps } => kernels::layer_norm(x[0], x[1], x[2], *eps),
            Self::Softmax { axis } => kernels::softmax(x[0], *axis),
            Self::Gelu => Ok(x[0].map(kernels::gelu)),
            Self::GlobalAvgPool => kernels::global_avg_pool(x[0]),
            Self::Reshape(shape) => x[0].clone().reshaped(shape),
            Self::Permute(perm) => kernels::permute(x[0], perm),
            Self::Concat { axis } => kernels::concat(x, *axis),
            Self::Narrow { axis, start, len } => kernels::narrow(x[0], *axis, *start, *len),
            Self::Sum => Ok(Tensor::scalar(x[0].sum())),
            Self::Sqrt => {
                if x[0].data().iter().any(|&v| v < 0.0) {
                    return Err(Error::InvalidArgument("sqrt of a negative value".into()));
                }
                Ok(x[0].map(f64::sqrt))
            }
            Self::Softplus => Ok(x[0].map(kernels::softplus)),
            Self::ReflectPad(p) => kernels::reflect_pad(x[0], *p),
            Self::Custom(op) => op.forward(x),
        }
    }

    fn backward(&self, x: &[&Tensor], y: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        match self {
            Self::Add => vec![Some(g.clone()), Some(g.clone())],
            Self::Multiply => vec![
                Some(kernels::zip_with(g, x[1], |a, b| a * b)),
                Some(kernels::zip_with(g, x[0], |a, b| a * b)),
            ],
            Self::Scale(s) => vec![Some(g.map(|v| v * s))],
            Self::MatMul => {
                let (ga, gb) = kernels::matmul_backward(x[0], x[1], g);
                vec![Some(ga), Some(gb)]
            }
            Self::Conv2d { stride, pad } => {
                let (gx, gk, gb) = kernels::conv2d_backward(x[0], x[1], x.get(2).copied(), *stride, *pad, g);
                vec![Some(gx), Some(gk), gb]
            }
            Self::ConvTranspose2d { stride, pad } => {
                let (gx, gk, gb) =
                    kernels::conv_transpose2d_backward(x[0], x[1], x.get(2).copied(), *stride, *pad, g);
                vec![Some(gx), Some(gk), gb]
            }
            Self::FullyConnected => {
                let (gx, gw, gb) = kernels::fully_connected_backward(x[0], x[1], x[2], g);
                vec![Some(gx), Some(gw), Some(gb)]
            }
            Self::LayerNorm { eps } => {
                let (gx, gg, gb) = kernels::layer_norm_backward(x[0], x[1], *eps, g);
                vec![Some(gx), Some(gg), Some(gb)]
            }
            Self::Softmax { axis } => vec![Some(kernels::softmax_backward(y, *axis, g))],
            Self::Gelu => vec![Some(kernels::zip_with(g, x[0], |gv, xv| {
                gv * kernels::gelu_grad(xv)
            }))],
            Self::GlobalAvgPool => vec![Some(kernels::global_avg_pool_backward(x[0], g))],
            Self::Reshape(_) => vec![Some(
                g.clone().reshaped(x[0].shape()).expect("same element count"),
            )],
            Self::Permute(perm) => vec![Some(
                kernels::permute(g, &kernels::inverse_permutation(perm))
                    .expect("inverse permutation is valid"),
            )],
            Self::Concat { axis } => {
                let mut start = 0;
                x.iter()
                    .map(|p| {
                        let len = p.shape()[*axis];
                        let part = kernels::narrow(g, *axis, start, len).expect("in range");
                        start += len;
                        Some(part)
                    })
                    .collect()
            }
            Self::Narrow { axis, start, len } => vec![Some(kernels::narrow_backward(
                x[0].shape(),
                *axis,
                *start,
                *len,
                g,
            ))],
            Self::Sum => {
                let gv = g.data()[0];
                vec![Some(Tensor::full(x[0].shape(), gv))]
            }
            Self::Sqrt => vec![Some(kernels::zip_with(g, y, |gv, yv| {
                if yv == 0.0 {
                    0.0
                } else {
                    0.5 * gv / yv
                }
            }))],
            Self::Softplus => vec![Some(kernels::zip_with(g, x[0], |gv, xv| {
                gv * kernels::sigmoid(xv)
            }))],
            Self::ReflectPad(p) => vec![Some(kernels::reflect_pad_backward(x[0], *p, g))],
            Self::Custom(op) => op.backward(x, y, g),
        }
    }
}

enum Origin {
    Leaf {
        name: Option<String>,
    },
    /// Computed from inputs that carry no gradient; never revisited.
    Constant,
    Op {
        primitive: Primitive,
        inputs: Vec<usize>,
    },
}

struct Node {
    value: Rc<Tensor>,
    requires_grad: bool,
    origin: Origin,
}

/// Records primitive applications for reverse-mode differentiation.
///
/// A tape lives for one forward/backward pass. Nodes are appended in
/// evaluation order, so the node list is already topologically sorted.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// A tensor living on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of recorded primitive applications (excludes leaves and
    /// constant-folded nodes).
    pub fn entry_count(&self) -> usize {
        self.nodes
            .borrow()
            .iter()
            .filter(|n| matches!(n.origin, Origin::Op { .. }))
            .count()
    }

    fn push(&self, value: Tensor, requires_grad: bool, origin: Origin) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            origin,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A leaf that gradients are not tracked for.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, false, Origin::Leaf { name: None })
    }

    /// An unnamed leaf that gradients flow to.
    pub fn input(&self, value: Tensor) -> Var<'_> {
        self.push(value, true, Origin::Leaf { name: None })
    }

    /// A named trainable leaf. Several leaves may share a name; their
    /// gradients are summed by [`Gradients::by_name`].
    pub fn param(&self, name: &str, value: Tensor) -> Var<'_> {
        self.push(
            value,
            true,
            Origin::Leaf {
                name: Some(name.to_string()),
            },
        )
    }

    pub fn apply(&self, primitive: Primitive, inputs: &[Var<'_>]) -> Result<Var<'_>> {
        let (value, requires_grad) = {
            let nodes = self.nodes.borrow();
            let vals: Vec<&Tensor> = inputs.iter().map(|v| &*nodes[v.id].value).collect();
            let out = primitive.forward(&vals)?;
            let rg = inputs.iter().any(|v| nodes[v.id].requires_grad);
            (out, rg)
        };
        let origin = if requires_grad {
            Origin::Op {
                primitive,
                inputs: inputs.iter().map(|v| v.id).collect(),
            }
        } else {
            Origin::Constant
        };
        Ok(self.push(value, requires_grad, origin))
    }

    /// Splits `x` along `axis` into consecutive parts of the given sizes.
    pub fn split<'t>(&'t self, x: Var<'t>, axis: usize, sizes: &[usize]) -> Result<Vec<Var<'t>>> {
        let total: usize = sizes.iter().sum();
        let shape = x.shape();
        if axis >= shape.len() || total != shape[axis] {
            return Err(shape_err(
                "split",
                format!("sizes {sizes:?} do not cover axis {axis} of {shape:?}"),
            ));
        }
        let mut start = 0;
        sizes
            .iter()
            .map(|&len| {
                let part = self.apply(Primitive::Narrow { axis, start, len }, &[x]);
                start += len;
                part
            })
            .collect()
    }

    /// Reverse-mode pass from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        if !matches!(root.origin, Origin::Op { .. }) {
            return Err(Error::DetachedLoss);
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.id + 1);
        grads.resize_with(loss.id + 1, || None);
        grads[loss.id] = Some(Tensor::full(root.value.shape(), 1.0));

        let mut leaf_grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.id + 1);
        leaf_grads.resize_with(loss.id + 1, || None);

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            match &node.origin {
                Origin::Op { primitive, inputs } => {
                    let Some(g) = grads[id].take() else {
                        continue;
                    };
                    let vals: Vec<&Tensor> = inputs.iter().map(|&i| &*nodes[i].value).collect();
                    let parts = primitive.backward(&vals, &node.value, &g);
                    for (&i, part) in inputs.iter().zip(parts) {
                        let Some(part) = part else { continue };
                        if !nodes[i].requires_grad {
                            continue;
                        }
                        match &mut grads[i] {
                            Some(acc) => acc.add_assign(&part),
                            slot @ None => *slot = Some(part),
                        }
                    }
                }
                Origin::Leaf { .. } if node.requires_grad => {
                    leaf_grads[id] = Some(
                        grads[id]
                            .take()
                            .unwrap_or_else(|| Tensor::zeros(node.value.shape())),
                    );
                }
                _ => {}
            }
        }

        let mut named = BTreeMap::new();
        for (id, node) in nodes.iter().enumerate().take(loss.id + 1) {
            if let Origin::Leaf { name: Some(name) } = &node.origin {
                let g = leaf_grads[id].clone().expect("named leaves require grad");
                match named.get_mut(name) {
                    Some(acc) => Tensor::add_assign(acc, &g),
                    None => {
                        named.insert(name.clone(), g);
                    }
                }
            }
        }
        // named params created after the loss cannot influence it
        for node in nodes.iter().skip(loss.id + 1) {
            if let Origin::Leaf { name: Some(name) } = &node.origin {
                named
                    .entry(name.clone())
                    .or_insert_with(|| Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients {
            by_id: leaf_grads,
            named,
        })
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    by_id: Vec<Option<Tensor>>,
    named: BTreeMap<String, Tensor>,
}

impl Gradients {
    /// Gradient of a leaf; zeros if the leaf does not influence the loss.
    pub fn wrt(&self, v: Var<'_>) -> Option<&Tensor> {
        self.by_id.get(v.id).and_then(Option::as_ref)
    }

    pub fn by_name(&self) -> &BTreeMap<String, Tensor> {
        &self.named
    }

    pub fn into_named(self) -> BTreeMap<String, Tensor> {
        self.named
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn unary(self, p: Primitive) -> Result<Var<'t>> {
        self.tape.apply(p, &[self])
    }

    #[allow(clippy::should_implement_trait)] // fallible, so not `ops::Add`
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.apply(Primitive::Add, &[self, other])
    }

    #[allow(clippy::should_implement_trait)]
    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let neg = other.scale(-1.0)?;
        self.add(neg)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.apply(Primitive::Multiply, &[self, other])
    }

    pub fn scale(self, s: f64) -> Result<Var<'t>> {
        self.unary(Primitive::Scale(s))
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.apply(Primitive::MatMul, &[self, other])
    }

    pub fn conv2d(
        self,
        kernel: Var<'t>,
        bias: Option<Var<'t>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'t>> {
        let mut ins = vec![self, kernel];
        ins.extend(bias);
        self.tape.apply(Primitive::Conv2d { stride, pad }, &ins)
    }

    pub fn conv_transpose2d(
        self,
        kernel: Var<'t>,
        bias: Option<Var<'t>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'t>> {
        let mut ins = vec![self, kernel];
        ins.extend(bias);
        self.tape.apply(Primitive::ConvTranspose2d { stride, pad }, &ins)
    }

    pub fn fully_connected(self, weight: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        self.tape.apply(Primitive::FullyConnected, &[self, weight, bias])
    }

    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
        self.tape
            .apply(Primitive::LayerNorm { eps }, &[self, gamma, beta])
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        self.unary(Primitive::Softmax { axis })
    }

    pub fn gelu(self) -> Result<Var<'t>> {
        self.unary(Primitive::Gelu)
    }

    pub fn global_avg_pool(self) -> Result<Var<'t>> {
        self.unary(Primitive::GlobalAvgPool)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        self.unary(Primitive::Reshape(shape.to_vec()))
    }

    pub fn permute(self, perm: &[usize]) -> Result<Var<'t>> {
        self.unary(Primitive::Permute(perm.to_vec()))
    }

    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        self.unary(Primitive::Narrow { axis, start, len })
    }

    pub fn sum(self) -> Result<Var<'t>> {
        self.unary(Primitive::Sum)
    }

    pub fn sqrt(self) -> Result<Var<'t>> {
        self.unary(Primitive::Sqrt)
    }

    pub fn softplus(self) -> Result<Var<'t>> {
        self.unary(Primitive::Softplus)
    }

    pub fn reflect_pad(self, pad: Padding) -> Result<Var<'t>> {
        self.unary(Primitive::ReflectPad(pad))
    }
}

/// Concatenates along `axis`.
pub fn concat<'t>(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
    let first = parts.first().ok_or_else(|| shape_err("concat", "no operands"))?;
    first.tape.apply(Primitive::Concat { axis }, parts)
}
