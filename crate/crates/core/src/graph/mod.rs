//! Static computation graphs with reverse-mode differentiation.
//!
//! A [`Graph`] is built once as a topologically ordered list of primitive
//! operations over named inputs. [`Graph::forward`] evaluates it against a set
//! of [`Bindings`]; [`Evaluation::backward`] then returns gradients for every
//! input declared with `requires_grad`.
//!
//! Every operation works on matrices (`[rows, cols]`), which is all the models
//! in this crate need. Shapes are checked at evaluation time, so one graph
//! serves any batch size.

mod conv;
mod kernels;

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};

pub use conv::{ConvSpec, ResizeSpec};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Input { name: String, requires_grad: bool },
    Constant(Tensor),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Affine { x: Var, w: Var, b: Var },
    LeakyRelu(Var, f64),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Softplus(Var),
    Clamp(Var, f64, f64),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    RowMin(Var),
    Concat(Vec<Var>, Axis),
    Reshape { x: Var, cols: usize },
    Slice { x: Var, axis: Axis, start: usize, end: usize },
    Gather { x: Var, axis: Axis, indices: Vec<usize> },
    Resize(Var, ResizeSpec),
    SqDist(Var, Var),
    CholFactor { raw: Var, min_diag: f64 },
    Diag(Var),
    TriSolve { l: Var, x: Var },
    Conv2d { x: Var, w: Var, b: Var, spec: ConvSpec },
    ConvTranspose2d { x: Var, w: Var, b: Var, spec: ConvSpec },
    BatchNorm { x: Var, gamma: Var, beta: Var, mean: Var, var: Var, channels: usize, eps: f64 },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Constant(_) => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add-scalar",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Affine { .. } => "affine",
            Op::LeakyRelu(..) => "leaky-relu",
            Op::Tanh(_) => "tanh",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Square(_) => "square",
            Op::Softplus(_) => "softplus",
            Op::Clamp(..) => "clamp",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log-softmax",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::RowSum(_) => "row-sum",
            Op::RowMin(_) => "row-min",
            Op::Concat(..) => "concat",
            Op::Reshape { .. } => "reshape",
            Op::Slice { .. } => "slice",
            Op::Gather { .. } => "gather",
            Op::Resize(..) => "bilinear-resize",
            Op::SqDist(..) => "sq-dist",
            Op::CholFactor { .. } => "chol-factor",
            Op::Diag(_) => "diag",
            Op::TriSolve { .. } => "tri-solve",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv-transpose2d",
            Op::BatchNorm { .. } => "batch-norm",
        }
    }

    pub(crate) fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Input { .. } | Op::Constant(_) => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) | Op::SqDist(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(x, _)
            | Op::AddScalar(x, _)
            | Op::Transpose(x)
            | Op::LeakyRelu(x, _)
            | Op::Tanh(x)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Square(x)
            | Op::Softplus(x)
            | Op::Clamp(x, ..)
            | Op::Softmax(x)
            | Op::LogSoftmax(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::RowSum(x)
            | Op::RowMin(x)
            | Op::Diag(x)
            | Op::Resize(x, _) => vec![*x],
            Op::Reshape { x, .. } | Op::Slice { x, .. } | Op::Gather { x, .. } => vec![*x],
            Op::CholFactor { raw, .. } => vec![*raw],
            Op::TriSolve { l, x } => vec![*l, *x],
            Op::Affine { x, w, b } | Op::Conv2d { x, w, b, .. } | Op::ConvTranspose2d { x, w, b, .. } => {
                vec![*x, *w, *b]
            }
            Op::BatchNorm { x, gamma, beta, mean, var, .. } => vec![*x, *gamma, *beta, *mean, *var],
            Op::Concat(xs, _) => xs.clone(),
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    label: Option<String>,
}

/// Named tensors supplied to [`Graph::forward`]. Tensors are borrowed, so
/// binding model parameters costs nothing.
#[derive(Default, Debug, Clone)]
pub struct Bindings<'a> {
    map: HashMap<String, &'a Tensor>,
}

impl<'a> Bindings<'a> {
    pub fn new() -> Self {
        Bindings::default()
    }

    pub fn bind(&mut self, name: impl Into<String>, tensor: &'a Tensor) -> &mut Self {
        self.map.insert(name.into(), tensor);
        self
    }

    pub fn get(&self, name: &str) -> Option<&'a Tensor> {
        self.map.get(name).copied()
    }
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    outputs: Vec<(String, Var)>,
    debug_checks: bool,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    /// When enabled, every intermediate is checked for NaN/Inf during
    /// [`Graph::forward`] and the offending node is reported.
    pub fn set_debug_checks(&mut self, enabled: bool) {
        self.debug_checks = enabled;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op) -> Var {
        for v in op.inputs() {
            assert!(v.0 < self.nodes.len(), "graph input {v:?} does not precede its consumer");
        }
        self.nodes.push(Node { op, label: None });
        Var(self.nodes.len() - 1)
    }

    /// Attaches a human-readable label used in error messages.
    pub fn label(&mut self, var: Var, label: impl Into<String>) -> Var {
        self.nodes[var.0].label = Some(label.into());
        var
    }

    /// Registers `var` as a named output returned by [`Evaluation::outputs`].
    pub fn output(&mut self, name: impl Into<String>, var: Var) {
        self.outputs.push((name.into(), var));
    }

    pub fn input(&mut self, name: impl Into<String>, requires_grad: bool) -> Var {
        self.push(Op::Input { name: name.into(), requires_grad })
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Constant(value))
    }

    /// Elementwise sum; `b` may also be a `[1, cols]` row or a `[1, 1]` scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        self.push(Op::Scale(x, k))
    }

    pub fn add_scalar(&mut self, x: Var, k: f64) -> Var {
        self.push(Op::AddScalar(x, k))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        self.push(Op::Transpose(x))
    }

    /// `x · w + b` with `w: [in, out]` and `b: [1, out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        self.push(Op::Affine { x, w, b })
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.push(Op::LeakyRelu(x, slope))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.push(Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.push(Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.push(Op::Log(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.push(Op::Square(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.push(Op::Softplus(x))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.push(Op::Clamp(x, lo, hi))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Var {
        self.push(Op::Softmax(x))
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        self.push(Op::LogSoftmax(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        self.push(Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        self.push(Op::Mean(x))
    }

    pub fn row_sum(&mut self, x: Var) -> Var {
        self.push(Op::RowSum(x))
    }

    pub fn row_min(&mut self, x: Var) -> Var {
        self.push(Op::RowMin(x))
    }

    pub fn concat(&mut self, xs: &[Var], axis: Axis) -> Var {
        assert!(!xs.is_empty(), "concat of nothing");
        self.push(Op::Concat(xs.to_vec(), axis))
    }

    /// Reinterprets the data as `[len / cols, cols]`.
    pub fn reshape(&mut self, x: Var, cols: usize) -> Var {
        self.push(Op::Reshape { x, cols })
    }

    pub fn slice(&mut self, x: Var, axis: Axis, start: usize, end: usize) -> Var {
        self.push(Op::Slice { x, axis, start, end })
    }

    pub fn gather(&mut self, x: Var, axis: Axis, indices: Vec<usize>) -> Var {
        self.push(Op::Gather { x, axis, indices })
    }

    pub fn resize(&mut self, x: Var, spec: ResizeSpec) -> Var {
        self.push(Op::Resize(x, spec))
    }

    /// Pairwise squared Euclidean distances between the rows of `a: [n, l]`
    /// and `b: [m, l]`, giving `[n, m]`.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::SqDist(a, b))
    }

    /// Lower-triangular factor from an unconstrained square matrix: strictly
    /// lower entries are copied, the diagonal becomes `softplus(raw) + min_diag`.
    pub fn chol_factor(&mut self, raw: Var, min_diag: f64) -> Var {
        self.push(Op::CholFactor { raw, min_diag })
    }

    /// Diagonal of a square matrix as a `[1, n]` row.
    pub fn diag(&mut self, x: Var) -> Var {
        self.push(Op::Diag(x))
    }

    /// Solves `L v = x` for every row `x` of `x: [n, dim]`.
    pub fn tri_solve(&mut self, l: Var, x: Var) -> Var {
        self.push(Op::TriSolve { l, x })
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, spec: ConvSpec) -> Var {
        self.push(Op::Conv2d { x, w, b, spec })
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, spec: ConvSpec) -> Var {
        self.push(Op::ConvTranspose2d { x, w, b, spec })
    }

    /// Per-channel normalization with externally supplied statistics
    /// (`mean`, `var`: `[1, channels]`), followed by `gamma`/`beta`.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Var,
        var: Var,
        channels: usize,
        eps: f64,
    ) -> Var {
        self.push(Op::BatchNorm { x, gamma, beta, mean, var, channels, eps })
    }

    fn describe(&self, var: Var) -> String {
        let node = &self.nodes[var.0];
        match (&node.op, &node.label) {
            (Op::Input { name, .. }, _) => format!("node #{} (input '{name}')", var.0),
            (op, Some(label)) => format!("node #{} ({} '{label}')", var.0, op.name()),
            (op, None) => format!("node #{} ({})", var.0, op.name()),
        }
    }

    /// Names of all inputs, in declaration order.
    pub fn input_names(&self) -> Vec<&str> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Input { name, .. } => Some(name.as_str()),
                _ => None,
            })
            .collect()
    }

    /// Names of inputs declared with `requires_grad`.
    pub fn parameter_names(&self) -> Vec<&str> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Input { name, requires_grad: true } => Some(name.as_str()),
                _ => None,
            })
            .collect()
    }

    pub fn forward<'a>(&'a self, bindings: &Bindings<'a>) -> Result<Evaluation<'a>> {
        let mut values: Vec<Cow<'a, Tensor>> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let value = match &node.op {
                Op::Input { name, .. } => {
                    Cow::Borrowed(bindings.get(name).ok_or_else(|| Error::UnboundInput(name.clone()))?)
                }
                Op::Constant(t) => Cow::Borrowed(t),
                op => Cow::Owned(kernels::forward(op, &values).map_err(|message| Error::Shape {
                    node: self.describe(Var(i)),
                    message,
                })?),
            };
            if self.debug_checks && !value.is_finite() {
                return Err(Error::NonFinite { node: self.describe(Var(i)) });
            }
            values.push(value);
        }
        Ok(Evaluation { graph: self, values })
    }
}

/// Values of every node after a forward pass.
#[derive(Debug)]
pub struct Evaluation<'a> {
    graph: &'a Graph,
    values: Vec<Cow<'a, Tensor>>,
}

impl<'a> Evaluation<'a> {
    pub fn value(&self, var: Var) -> &Tensor {
        &self.values[var.0]
    }

    /// All registered outputs by name.
    pub fn outputs(&self) -> BTreeMap<String, Tensor> {
        self.graph
            .outputs
            .iter()
            .map(|(name, v)| (name.clone(), self.values[v.0].clone().into_owned()))
            .collect()
    }

    /// Reverse-mode pass from the scalar `loss`. Every `requires_grad` input
    /// gets an entry; inputs that do not influence the loss get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = &self.graph.nodes;
        if self.values[loss.0].len() != 1 {
            return Err(Error::Shape {
                node: self.graph.describe(loss),
                message: format!("loss must be scalar, has shape {:?}", self.values[loss.0].shape()),
            });
        }

        let mut needs = vec![false; loss.0 + 1];
        for i in 0..=loss.0 {
            needs[i] = match &nodes[i].op {
                Op::Input { requires_grad, .. } => *requires_grad,
                Op::Constant(_) => false,
                op => op.inputs().iter().any(|v| needs[v.0]),
            };
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.values[loss.0].shape(), 1.0));
        for i in (0..=loss.0).rev() {
            if !needs[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &nodes[i].op {
                Op::Input { .. } => grads[i] = Some(g),
                op => kernels::backward(op, &self.values[i], &g, &self.values, &needs, &mut grads),
            }
        }

        let mut by_name = BTreeMap::new();
        for (i, node) in nodes.iter().enumerate() {
            if let Op::Input { name, requires_grad: true } = &node.op {
                let grad = grads
                    .get_mut(i)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros(self.values[i].shape()));
                by_name.insert(name.clone(), grad);
            }
        }
        Ok(Gradients { by_name })
    }
}

/// Gradients keyed by input name.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    by_name: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.by_name.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.by_name.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }
}

/// Largest relative discrepancy between the analytic gradient and central
/// finite differences, over every element of every `requires_grad` input:
/// `|analytic - numeric| / max(1, |analytic|)`.
pub fn gradient_check(graph: &Graph, point: &Bindings<'_>, loss: Var, epsilon: f64) -> Result<f64> {
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(Error::invalid(format!("epsilon {epsilon} outside (0, 1e-2]")));
    }
    let analytic = graph.forward(point)?.backward(loss)?;

    let mut worst: f64 = 0.0;
    for name in graph.parameter_names() {
        let base = point.get(name).ok_or_else(|| Error::UnboundInput(name.to_string()))?;
        let grad = analytic.get(name).expect("gradient for every parameter");
        let mut probe = base.clone();
        for k in 0..base.len() {
            let x0 = base.data()[k];
            probe.data_mut()[k] = x0 + epsilon;
            let up = eval_at(graph, point, name, &probe, loss)?;
            probe.data_mut()[k] = x0 - epsilon;
            let down = eval_at(graph, point, name, &probe, loss)?;
            probe.data_mut()[k] = x0;
            let numeric = (up - down) / (2.0 * epsilon);
            let a = grad.data()[k];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            if err.is_nan() {
                return Ok(f64::NAN);
            }
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn eval_at(graph: &Graph, point: &Bindings<'_>, name: &str, probe: &Tensor, loss: Var) -> Result<f64> {
    let mut b = point.clone();
    b.bind(name, probe);
    Ok(graph.forward(&b)?.value(loss).item())
}
