//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`DiffGraph`] records every operation as it is built; [`DiffGraph::backward`]
//! walks the records in exact reverse insertion order and accumulates adjoints
//! into the gradient buffer of every `requires_grad` tensor. The op set is the
//! minimum the classifier, the autoencoder, and the maximization loop need:
//! dense, conv2d, max-pool, relu, sigmoid, softmax, cross-entropy, mse, plus
//! reshape / nearest-upsample / scalar-pick plumbing.
//!
//! Everything is computed in `f64`. [`DiffGraph::check_gradients`] compares
//! every analytic gradient element against central finite differences, and
//! excludes elements whose perturbation crosses a relu kink or flips a pool
//! argmax (the derivative is not defined there, so the comparison would be
//! meaningless).

use std::fmt;

use thiserror::Error;

/// Error type for tensor and graph operations.
#[derive(Debug, Error)]
pub enum GraphError {
    /// Two shapes that had to conform do not.
    #[error("{op}: shape mismatch: {left} vs {right}")]
    ShapeMismatch {
        op: &'static str,
        left: String,
        right: String,
    },
    /// A dimension constraint (divisibility, kernel fit, ...) was violated.
    #[error("{op}: {detail}")]
    Dimension { op: &'static str, detail: String },
    /// An index argument is outside its valid range.
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    /// `backward` was called on a non-scalar node.
    #[error("backward requires a scalar loss node, got shape {shape}")]
    NonScalarLoss { shape: String },
    /// An operation produced NaN or infinity.
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    /// Tensor construction was given NaN or infinity.
    #[error("tensor values must be finite")]
    NonFiniteValues,
    /// A mutation was attempted on a node that is not a leaf.
    #[error("node {0} is not a leaf")]
    NotALeaf(usize),
    /// A target mutation was attempted on a node of the wrong kind.
    #[error("node {0} is not a cross-entropy node")]
    NotCrossEntropy(usize),
}

fn shape_str(shape: &[usize]) -> String {
    let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    format!("[{}]", dims.join("x"))
}

/// Identifier of a node inside one [`DiffGraph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// Dense row-major tensor with an optional gradient buffer.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Build a tensor, validating that the value count matches the shape and
    /// that every value is finite.
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self, GraphError> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(GraphError::ShapeMismatch {
                op: "tensor",
                left: shape_str(&shape),
                right: format!("{} values", values.len()),
            });
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(GraphError::NonFiniteValues);
        }
        Ok(Self {
            shape,
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            values: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Result<Self, GraphError> {
        Self::new(vec![1], vec![v])
    }

    /// Mark the tensor as a gradient target for [`DiffGraph::backward`].
    pub fn with_requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Accumulated gradient, if `backward` has run over this tensor.
    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }
}

/// Conv padding mode. `Same` pads so that stride-1 output size equals input
/// size (TensorFlow convention: `ceil(in/stride)` rows out, extra pad on the
/// bottom/right when the total is odd).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Valid,
    Same,
}

/// Activation-compute precision for a graph. `F32` rounds every op output
/// through `f32`, emulating single-precision training; gradient checking is
/// only meaningful in `F64`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub enum Precision {
    #[default]
    #[serde(rename = "f64")]
    F64,
    #[serde(rename = "f32")]
    F32,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Dense {
        input: usize,
        weights: usize,
        bias: usize,
    },
    Conv2d {
        input: usize,
        kernels: usize,
        bias: usize,
        stride: usize,
        pad_top: usize,
        pad_left: usize,
    },
    MaxPool2d {
        input: usize,
        size: usize,
    },
    Relu {
        input: usize,
    },
    Sigmoid {
        input: usize,
    },
    Softmax {
        input: usize,
    },
    CrossEntropy {
        probs: usize,
        target: usize,
    },
    Mse {
        a: usize,
        b: usize,
    },
    Reshape {
        input: usize,
    },
    UpsampleNearest2 {
        input: usize,
    },
    Pick {
        input: usize,
        index: usize,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Dense { .. } => "dense",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2d { .. } => "max_pool2d",
            Op::Relu { .. } => "relu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Softmax { .. } => "softmax",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Mse { .. } => "mse",
            Op::Reshape { .. } => "reshape",
            Op::UpsampleNearest2 { .. } => "upsample_nearest2",
            Op::Pick { .. } => "pick",
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match *self {
            Op::Leaf => vec![],
            Op::Dense {
                input,
                weights,
                bias,
            } => vec![input, weights, bias],
            Op::Conv2d {
                input,
                kernels,
                bias,
                ..
            } => vec![input, kernels, bias],
            Op::MaxPool2d { input, .. }
            | Op::Relu { input }
            | Op::Sigmoid { input }
            | Op::Softmax { input }
            | Op::Reshape { input }
            | Op::UpsampleNearest2 { input }
            | Op::Pick { input, .. } => vec![input],
            Op::CrossEntropy { probs, .. } => vec![probs],
            Op::Mse { a, b } => vec![a, b],
        }
    }
}

struct Node {
    op: Op,
    tensor: Tensor,
    name: Option<String>,
}

const CROSS_ENTROPY_EPS: f64 = 1e-12;

/// Recorded computation over [`Tensor`] nodes.
///
/// Nodes are appended in execution order; that insertion order is the
/// topological order used by forward recomputation and (reversed) by the
/// backward pass.
pub struct DiffGraph {
    nodes: Vec<Node>,
    precision: Precision,
}

impl Default for DiffGraph {
    fn default() -> Self {
        Self::new()
    }
}

impl DiffGraph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            precision: Precision::F64,
        }
    }

    pub fn with_precision(precision: Precision) -> Self {
        Self {
            nodes: Vec::new(),
            precision,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert an input tensor.
    pub fn leaf(&mut self, tensor: Tensor) -> NodeId {
        self.push_node(Op::Leaf, tensor, None)
    }

    /// Insert a named input tensor (names show up in gradient-check reports).
    pub fn named_leaf(&mut self, name: &str, tensor: Tensor) -> NodeId {
        self.push_node(Op::Leaf, tensor, Some(name.to_string()))
    }

    pub fn tensor(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].tensor
    }

    pub fn values(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].tensor.values
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].tensor.shape
    }

    /// Gradient accumulated on a node, if any.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].tensor.grad.as_deref()
    }

    /// Op kind of a node, e.g. `"dense"` or `"relu"`. Useful for structural
    /// assertions about a built network.
    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.name()
    }

    /// Replace the values of a leaf. Shape must match; the caller is expected
    /// to run [`DiffGraph::recompute_forward`] afterwards.
    pub fn set_leaf_values(&mut self, id: NodeId, values: &[f64]) -> Result<(), GraphError> {
        let node = &mut self.nodes[id.0];
        if !matches!(node.op, Op::Leaf) {
            return Err(GraphError::NotALeaf(id.0));
        }
        if node.tensor.values.len() != values.len() {
            return Err(GraphError::ShapeMismatch {
                op: "set_leaf_values",
                left: shape_str(&node.tensor.shape),
                right: format!("{} values", values.len()),
            });
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(GraphError::NonFiniteValues);
        }
        node.tensor.values.copy_from_slice(values);
        Ok(())
    }

    /// Re-point a cross-entropy node at a different target class.
    pub fn set_cross_entropy_target(
        &mut self,
        id: NodeId,
        new_target: usize,
    ) -> Result<(), GraphError> {
        let probs_len = match &self.nodes[id.0].op {
            Op::CrossEntropy { probs, .. } => self.nodes[*probs].tensor.values.len(),
            _ => return Err(GraphError::NotCrossEntropy(id.0)),
        };
        if new_target >= probs_len {
            return Err(GraphError::IndexOutOfRange {
                index: new_target,
                len: probs_len,
            });
        }
        if let Op::CrossEntropy { target, .. } = &mut self.nodes[id.0].op {
            *target = new_target;
        }
        Ok(())
    }

    /// Clear accumulated gradients on every node.
    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.tensor.grad = None;
        }
    }

    fn push_node(&mut self, op: Op, mut tensor: Tensor, name: Option<String>) -> NodeId {
        if matches!(self.precision, Precision::F32) && !matches!(op, Op::Leaf) {
            round_f32(&mut tensor.values);
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, tensor, name });
        id
    }

    fn push_op(
        &mut self,
        op: Op,
        shape: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<NodeId, GraphError> {
        if !values.iter().all(|v| v.is_finite()) {
            return Err(GraphError::NonFinite { op: op.name() });
        }
        let tensor = Tensor {
            shape,
            values,
            requires_grad: false,
            grad: None,
        };
        Ok(self.push_node(op, tensor, None))
    }

    // ── forward ops ─────────────────────────────────────────────────────

    /// Fully connected layer: `out[i] = Σ_j weights[i*n+j]·input[j] + bias[i]`.
    pub fn dense(
        &mut self,
        input: NodeId,
        weights: NodeId,
        bias: NodeId,
    ) -> Result<NodeId, GraphError> {
        let x = &self.nodes[input.0].tensor;
        let w = &self.nodes[weights.0].tensor;
        let b = &self.nodes[bias.0].tensor;
        if w.shape.len() != 2 {
            return Err(GraphError::Dimension {
                op: "dense",
                detail: format!("weights must be 2-d, got {}", shape_str(&w.shape)),
            });
        }
        let (m, n) = (w.shape[0], w.shape[1]);
        if x.values.len() != n {
            return Err(GraphError::ShapeMismatch {
                op: "dense",
                left: shape_str(&w.shape),
                right: shape_str(&x.shape),
            });
        }
        if b.values.len() != m {
            return Err(GraphError::ShapeMismatch {
                op: "dense",
                left: shape_str(&w.shape),
                right: shape_str(&b.shape),
            });
        }
        let out = dense_forward(&x.values, &w.values, &b.values, m, n);
        self.push_op(
            Op::Dense {
                input: input.0,
                weights: weights.0,
                bias: bias.0,
            },
            vec![m],
            out,
        )
    }

    /// 2-d cross-correlation (no kernel flip) of a `C×H×W` input with
    /// `F×C×kH×kW` kernels.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernels: NodeId,
        bias: NodeId,
        stride: usize,
        padding: Padding,
    ) -> Result<NodeId, GraphError> {
        if stride == 0 {
            return Err(GraphError::Dimension {
                op: "conv2d",
                detail: "stride must be positive".into(),
            });
        }
        let x = &self.nodes[input.0].tensor;
        let k = &self.nodes[kernels.0].tensor;
        let b = &self.nodes[bias.0].tensor;
        if x.shape.len() != 3 || k.shape.len() != 4 {
            return Err(GraphError::Dimension {
                op: "conv2d",
                detail: format!(
                    "expected C×H×W input and F×C×kH×kW kernels, got {} and {}",
                    shape_str(&x.shape),
                    shape_str(&k.shape)
                ),
            });
        }
        let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
        let (f, kc, kh, kw) = (k.shape[0], k.shape[1], k.shape[2], k.shape[3]);
        if kc != c {
            return Err(GraphError::ShapeMismatch {
                op: "conv2d",
                left: shape_str(&x.shape),
                right: shape_str(&k.shape),
            });
        }
        if b.values.len() != f {
            return Err(GraphError::ShapeMismatch {
                op: "conv2d",
                left: shape_str(&k.shape),
                right: shape_str(&b.shape),
            });
        }
        let geom = ConvGeometry::resolve(h, w, kh, kw, stride, padding).map_err(|detail| {
            GraphError::Dimension {
                op: "conv2d",
                detail,
            }
        })?;
        let out = conv2d_forward(&x.values, (c, h, w), &k.values, (f, kh, kw), &b.values, &geom);
        self.push_op(
            Op::Conv2d {
                input: input.0,
                kernels: kernels.0,
                bias: bias.0,
                stride,
                pad_top: geom.pad_top,
                pad_left: geom.pad_left,
            },
            vec![f, geom.out_h, geom.out_w],
            out,
        )
    }

    /// Non-overlapping max pooling over `size×size` windows. Gradient flows
    /// to the first (row-major) maximal cell of each window.
    pub fn max_pool2d(&mut self, input: NodeId, size: usize) -> Result<NodeId, GraphError> {
        if size == 0 {
            return Err(GraphError::Dimension {
                op: "max_pool2d",
                detail: "pool size must be positive".into(),
            });
        }
        let x = &self.nodes[input.0].tensor;
        if x.shape.len() != 3 {
            return Err(GraphError::Dimension {
                op: "max_pool2d",
                detail: format!("expected C×H×W input, got {}", shape_str(&x.shape)),
            });
        }
        let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
        if h % size != 0 || w % size != 0 {
            return Err(GraphError::Dimension {
                op: "max_pool2d",
                detail: format!("{}x{} not divisible by pool size {}", h, w, size),
            });
        }
        let out = max_pool2d_forward(&x.values, (c, h, w), size);
        self.push_op(
            Op::MaxPool2d {
                input: input.0,
                size,
            },
            vec![c, h / size, w / size],
            out,
        )
    }

    /// Elementwise `max(0, x)`. The backward mask is 0 at exactly 0.
    pub fn relu(&mut self, input: NodeId) -> Result<NodeId, GraphError> {
        let x = &self.nodes[input.0].tensor;
        let out: Vec<f64> = x.values.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let shape = x.shape.clone();
        self.push_op(Op::Relu { input: input.0 }, shape, out)
    }

    /// Elementwise logistic sigmoid.
    pub fn sigmoid(&mut self, input: NodeId) -> Result<NodeId, GraphError> {
        let x = &self.nodes[input.0].tensor;
        let out: Vec<f64> = x.values.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect();
        let shape = x.shape.clone();
        self.push_op(Op::Sigmoid { input: input.0 }, shape, out)
    }

    /// Max-subtracted softmax over a 1-d logit vector.
    pub fn softmax(&mut self, input: NodeId) -> Result<NodeId, GraphError> {
        let x = &self.nodes[input.0].tensor;
        if x.values.is_empty() {
            return Err(GraphError::Dimension {
                op: "softmax",
                detail: "needs at least one logit".into(),
            });
        }
        let out = softmax_forward(&x.values);
        let shape = x.shape.clone();
        self.push_op(Op::Softmax { input: input.0 }, shape, out)
    }

    /// Negative log-likelihood of `target` under an already-normalized
    /// probability vector: `−ln(probs[target] + 1e−12)`.
    pub fn cross_entropy(&mut self, probs: NodeId, target: usize) -> Result<NodeId, GraphError> {
        let p = &self.nodes[probs.0].tensor;
        if target >= p.values.len() {
            return Err(GraphError::IndexOutOfRange {
                index: target,
                len: p.values.len(),
            });
        }
        let loss = -(p.values[target] + CROSS_ENTROPY_EPS).ln();
        self.push_op(
            Op::CrossEntropy {
                probs: probs.0,
                target,
            },
            vec![1],
            vec![loss],
        )
    }

    /// Mean squared elementwise difference.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let ta = &self.nodes[a.0].tensor;
        let tb = &self.nodes[b.0].tensor;
        if ta.shape != tb.shape {
            return Err(GraphError::ShapeMismatch {
                op: "mse",
                left: shape_str(&ta.shape),
                right: shape_str(&tb.shape),
            });
        }
        let n = ta.values.len() as f64;
        let sum: f64 = ta
            .values
            .iter()
            .zip(&tb.values)
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        self.push_op(Op::Mse { a: a.0, b: b.0 }, vec![1], vec![sum / n])
    }

    /// View the values under a new shape with the same element count.
    pub fn reshape(&mut self, input: NodeId, shape: Vec<usize>) -> Result<NodeId, GraphError> {
        let x = &self.nodes[input.0].tensor;
        let numel: usize = shape.iter().product();
        if numel != x.values.len() {
            return Err(GraphError::ShapeMismatch {
                op: "reshape",
                left: shape_str(&x.shape),
                right: shape_str(&shape),
            });
        }
        let values = x.values.clone();
        self.push_op(Op::Reshape { input: input.0 }, shape, values)
    }

    /// Nearest-neighbour 2× upsampling of a `C×H×W` tensor.
    pub fn upsample_nearest2(&mut self, input: NodeId) -> Result<NodeId, GraphError> {
        let x = &self.nodes[input.0].tensor;
        if x.shape.len() != 3 {
            return Err(GraphError::Dimension {
                op: "upsample_nearest2",
                detail: format!("expected C×H×W input, got {}", shape_str(&x.shape)),
            });
        }
        let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
        let out = upsample2_forward(&x.values, (c, h, w));
        self.push_op(
            Op::UpsampleNearest2 { input: input.0 },
            vec![c, 2 * h, 2 * w],
            out,
        )
    }

    /// Extract one element as a scalar node (used to select a target logit).
    pub fn pick(&mut self, input: NodeId, index: usize) -> Result<NodeId, GraphError> {
        let x = &self.nodes[input.0].tensor;
        if index >= x.values.len() {
            return Err(GraphError::IndexOutOfRange {
                index,
                len: x.values.len(),
            });
        }
        let v = x.values[index];
        self.push_op(
            Op::Pick {
                input: input.0,
                index,
            },
            vec![1],
            vec![v],
        )
    }

    // ── recomputation ───────────────────────────────────────────────────

    /// Re-execute every non-leaf node in insertion order, refreshing values
    /// after leaf mutations.
    pub fn recompute_forward(&mut self) -> Result<(), GraphError> {
        for i in 0..self.nodes.len() {
            let op = self.nodes[i].op.clone();
            let new_values = match &op {
                Op::Leaf => continue,
                Op::Dense {
                    input,
                    weights,
                    bias,
                } => {
                    let w = &self.nodes[*weights].tensor;
                    let (m, n) = (w.shape[0], w.shape[1]);
                    dense_forward(
                        &self.nodes[*input].tensor.values,
                        &w.values,
                        &self.nodes[*bias].tensor.values,
                        m,
                        n,
                    )
                }
                Op::Conv2d {
                    input,
                    kernels,
                    bias,
                    stride,
                    pad_top,
                    pad_left,
                } => {
                    let x = &self.nodes[*input].tensor;
                    let k = &self.nodes[*kernels].tensor;
                    let out_shape = &self.nodes[i].tensor.shape;
                    let geom = ConvGeometry {
                        stride: *stride,
                        pad_top: *pad_top,
                        pad_left: *pad_left,
                        out_h: out_shape[1],
                        out_w: out_shape[2],
                    };
                    conv2d_forward(
                        &x.values,
                        (x.shape[0], x.shape[1], x.shape[2]),
                        &k.values,
                        (k.shape[0], k.shape[2], k.shape[3]),
                        &self.nodes[*bias].tensor.values,
                        &geom,
                    )
                }
                Op::MaxPool2d { input, size } => {
                    let x = &self.nodes[*input].tensor;
                    max_pool2d_forward(&x.values, (x.shape[0], x.shape[1], x.shape[2]), *size)
                }
                Op::Relu { input } => self.nodes[*input]
                    .tensor
                    .values
                    .iter()
                    .map(|&v| if v > 0.0 { v } else { 0.0 })
                    .collect(),
                Op::Sigmoid { input } => self.nodes[*input]
                    .tensor
                    .values
                    .iter()
                    .map(|&v| 1.0 / (1.0 + (-v).exp()))
                    .collect(),
                Op::Softmax { input } => softmax_forward(&self.nodes[*input].tensor.values),
                Op::CrossEntropy { probs, target } => {
                    vec![-(self.nodes[*probs].tensor.values[*target] + CROSS_ENTROPY_EPS).ln()]
                }
                Op::Mse { a, b } => {
                    let va = &self.nodes[*a].tensor.values;
                    let vb = &self.nodes[*b].tensor.values;
                    let sum: f64 = va.iter().zip(vb).map(|(x, y)| (x - y) * (x - y)).sum();
                    vec![sum / va.len() as f64]
                }
                Op::Reshape { input } => self.nodes[*input].tensor.values.clone(),
                Op::UpsampleNearest2 { input } => {
                    let x = &self.nodes[*input].tensor;
                    upsample2_forward(&x.values, (x.shape[0], x.shape[1], x.shape[2]))
                }
                Op::Pick { input, index } => vec![self.nodes[*input].tensor.values[*index]],
            };
            let mut new_values = new_values;
            if matches!(self.precision, Precision::F32) {
                round_f32(&mut new_values);
            }
            if !new_values.iter().all(|v| v.is_finite()) {
                return Err(GraphError::NonFinite { op: op.name() });
            }
            self.nodes[i].tensor.values = new_values;
        }
        Ok(())
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Run reverse-mode accumulation from a scalar loss node and *add* the
    /// resulting adjoints into the `grad` buffer of every `requires_grad`
    /// tensor. Tensors with no path to the loss receive an all-zero gradient.
    /// Calling this twice without [`DiffGraph::zero_grads`] doubles the
    /// gradients.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), GraphError> {
        let adjoints = self.backward_adjoints(loss)?;
        for (i, node) in self.nodes.iter_mut().enumerate() {
            if !node.tensor.requires_grad {
                continue;
            }
            let len = node.tensor.values.len();
            let grad = node.tensor.grad.get_or_insert_with(|| vec![0.0; len]);
            if let Some(adj) = &adjoints.per_node[i] {
                for (g, a) in grad.iter_mut().zip(adj) {
                    *g += a;
                }
            }
            if !grad.iter().all(|v| v.is_finite()) {
                return Err(GraphError::NonFinite { op: "backward" });
            }
        }
        Ok(())
    }

    /// Compute adjoints for one backward pass without touching stored
    /// gradients. Only leaf adjoints are retained.
    pub fn backward_adjoints(&self, loss: NodeId) -> Result<Adjoints, GraphError> {
        let loss_tensor = &self.nodes[loss.0].tensor;
        if loss_tensor.values.len() != 1 {
            return Err(GraphError::NonScalarLoss {
                shape: shape_str(&loss_tensor.shape),
            });
        }

        // A node needs an adjoint if any requires_grad leaf sits below it.
        let mut needs = vec![false; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            needs[i] = match &node.op {
                Op::Leaf => node.tensor.requires_grad,
                op => op.inputs().iter().any(|&j| needs[j]),
            };
        }

        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !needs[i] {
                adj[i] = None;
                continue;
            }
            let is_leaf = matches!(self.nodes[i].op, Op::Leaf);
            let g = if is_leaf {
                continue; // keep leaf adjoints for the caller
            } else {
                match adj[i].take() {
                    Some(g) => g,
                    None => continue, // not on a path from the loss
                }
            };
            self.propagate(i, &g, &needs, &mut adj);
        }

        Ok(Adjoints { per_node: adj })
    }

    fn propagate(&self, i: usize, g: &[f64], needs: &[bool], adj: &mut Vec<Option<Vec<f64>>>) {
        let numel = |idx: usize| self.nodes[idx].tensor.values.len();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Dense {
                input,
                weights,
                bias,
            } => {
                let w = &self.nodes[*weights].tensor;
                let (m, n) = (w.shape[0], w.shape[1]);
                let x = &self.nodes[*input].tensor.values;
                if needs[*input] {
                    let dx = ensure(adj, *input, n);
                    for i_row in 0..m {
                        let gi = g[i_row];
                        if gi != 0.0 {
                            let row = &w.values[i_row * n..(i_row + 1) * n];
                            for (d, wv) in dx.iter_mut().zip(row) {
                                *d += gi * wv;
                            }
                        }
                    }
                }
                if needs[*weights] {
                    let dw = ensure(adj, *weights, m * n);
                    for i_row in 0..m {
                        let gi = g[i_row];
                        if gi != 0.0 {
                            let row = &mut dw[i_row * n..(i_row + 1) * n];
                            for (d, xv) in row.iter_mut().zip(x) {
                                *d += gi * xv;
                            }
                        }
                    }
                }
                if needs[*bias] {
                    let db = ensure(adj, *bias, m);
                    for (d, gi) in db.iter_mut().zip(g) {
                        *d += gi;
                    }
                }
            }
            Op::Conv2d {
                input,
                kernels,
                bias,
                stride,
                pad_top,
                pad_left,
            } => {
                let x = &self.nodes[*input].tensor;
                let k = &self.nodes[*kernels].tensor;
                let out_shape = &self.nodes[i].tensor.shape;
                let geom = ConvGeometry {
                    stride: *stride,
                    pad_top: *pad_top,
                    pad_left: *pad_left,
                    out_h: out_shape[1],
                    out_w: out_shape[2],
                };
                let dims_x = (x.shape[0], x.shape[1], x.shape[2]);
                let dims_k = (k.shape[0], k.shape[2], k.shape[3]);
                // Split borrows: compute into fresh buffers, then merge.
                let want_dx = needs[*input];
                let want_dk = needs[*kernels];
                let want_db = needs[*bias];
                let (dx, dk, db) = conv2d_backward(
                    g,
                    &x.values,
                    dims_x,
                    &k.values,
                    dims_k,
                    &geom,
                    want_dx,
                    want_dk,
                    want_db,
                );
                if let Some(dx) = dx {
                    add_into(ensure(adj, *input, numel(*input)), &dx);
                }
                if let Some(dk) = dk {
                    add_into(ensure(adj, *kernels, numel(*kernels)), &dk);
                }
                if let Some(db) = db {
                    add_into(ensure(adj, *bias, numel(*bias)), &db);
                }
            }
            Op::MaxPool2d { input, size } => {
                let x = &self.nodes[*input].tensor;
                let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
                let arg = max_pool2d_argmax(&x.values, (c, h, w), *size);
                if needs[*input] {
                    let dx = ensure(adj, *input, numel(*input));
                    for (o, &src) in arg.iter().enumerate() {
                        dx[src] += g[o];
                    }
                }
            }
            Op::Relu { input } => {
                if needs[*input] {
                    let mask: Vec<f64> = self.nodes[*input]
                        .tensor
                        .values
                        .iter()
                        .map(|&v| if v > 0.0 { 1.0 } else { 0.0 })
                        .collect();
                    let dx = ensure(adj, *input, mask.len());
                    for ((d, gi), m) in dx.iter_mut().zip(g).zip(&mask) {
                        *d += gi * m;
                    }
                }
            }
            Op::Sigmoid { input } => {
                if needs[*input] {
                    let y = &self.nodes[i].tensor.values;
                    let dx = ensure(adj, *input, y.len());
                    for ((d, gi), yi) in dx.iter_mut().zip(g).zip(y) {
                        *d += gi * yi * (1.0 - yi);
                    }
                }
            }
            Op::Softmax { input } => {
                if needs[*input] {
                    let y = &self.nodes[i].tensor.values;
                    let dot: f64 = g.iter().zip(y).map(|(gi, yi)| gi * yi).sum();
                    let dx = ensure(adj, *input, y.len());
                    for ((d, gi), yi) in dx.iter_mut().zip(g).zip(y) {
                        *d += yi * (gi - dot);
                    }
                }
            }
            Op::CrossEntropy { probs, target } => {
                if needs[*probs] {
                    let p = self.nodes[*probs].tensor.values[*target];
                    let dp = ensure(adj, *probs, numel(*probs));
                    dp[*target] += g[0] * (-1.0 / (p + CROSS_ENTROPY_EPS));
                }
            }
            Op::Mse { a, b } => {
                let va = &self.nodes[*a].tensor.values;
                let vb = &self.nodes[*b].tensor.values;
                let n = va.len() as f64;
                let scale = 2.0 * g[0] / n;
                if needs[*a] {
                    let da = ensure(adj, *a, va.len());
                    for ((d, x), y) in da.iter_mut().zip(va).zip(vb) {
                        *d += scale * (x - y);
                    }
                }
                if needs[*b] {
                    let db = ensure(adj, *b, vb.len());
                    for ((d, x), y) in db.iter_mut().zip(va).zip(vb) {
                        *d -= scale * (x - y);
                    }
                }
            }
            Op::Reshape { input } => {
                if needs[*input] {
                    add_into(ensure(adj, *input, numel(*input)), g);
                }
            }
            Op::UpsampleNearest2 { input } => {
                if needs[*input] {
                    let x = &self.nodes[*input].tensor;
                    let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
                    let dx = ensure(adj, *input, numel(*input));
                    for ch in 0..c {
                        for oy in 0..2 * h {
                            let iy = oy / 2;
                            let grow = &g[ch * 4 * h * w + oy * 2 * w..][..2 * w];
                            let drow = &mut dx[ch * h * w + iy * w..][..w];
                            for (ox, gv) in grow.iter().enumerate() {
                                drow[ox / 2] += gv;
                            }
                        }
                    }
                }
            }
            Op::Pick { input, index } => {
                if needs[*input] {
                    let dx = ensure(adj, *input, numel(*input));
                    dx[*index] += g[0];
                }
            }
        }
    }

    // ── gradient verification ───────────────────────────────────────────

    /// Compare analytic gradients against central finite differences for
    /// every element of every `requires_grad` leaf.
    ///
    /// Elements whose ±step perturbation flips a relu activation mask or a
    /// pool argmax are excluded from the comparison (the objective is not
    /// differentiable across those boundaries). Failures are reported, not
    /// raised.
    pub fn check_gradients(
        &mut self,
        loss: NodeId,
        step: f64,
    ) -> Result<GradCheckReport, GraphError> {
        let adjoints = self.backward_adjoints(loss)?;
        let leaf_ids: Vec<usize> = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Leaf) && n.tensor.requires_grad)
            .map(|(i, _)| i)
            .collect();

        let mut rows = Vec::new();
        for &li in &leaf_ids {
            let len = self.nodes[li].tensor.values.len();
            let analytic: Vec<f64> = match &adjoints.per_node[li] {
                Some(a) => a.clone(),
                None => vec![0.0; len],
            };
            let mut row = GradCheckRow {
                node: NodeId(li),
                name: self.nodes[li]
                    .name
                    .clone()
                    .unwrap_or_else(|| format!("#{li}")),
                elements: len,
                excluded: 0,
                max_abs_err: 0.0,
                max_rel_err: 0.0,
            };
            for e in 0..len {
                let v0 = self.nodes[li].tensor.values[e];

                self.nodes[li].tensor.values[e] = v0 + step;
                self.recompute_forward()?;
                let loss_hi = self.nodes[loss.0].tensor.values[0];
                let sig_hi = self.kink_signature();

                self.nodes[li].tensor.values[e] = v0 - step;
                self.recompute_forward()?;
                let loss_lo = self.nodes[loss.0].tensor.values[0];
                let sig_lo = self.kink_signature();

                self.nodes[li].tensor.values[e] = v0;

                if sig_hi != sig_lo {
                    row.excluded += 1;
                    continue;
                }
                let fd = (loss_hi - loss_lo) / (2.0 * step);
                let abs_err = (analytic[e] - fd).abs();
                let denom = analytic[e].abs().max(fd.abs());
                let rel_err = if denom > 1e-10 { abs_err / denom } else { 0.0 };
                row.max_abs_err = row.max_abs_err.max(abs_err);
                row.max_rel_err = row.max_rel_err.max(rel_err);
            }
            rows.push(row);
        }
        self.recompute_forward()?;

        let max_abs_err = rows.iter().map(|r| r.max_abs_err).fold(0.0, f64::max);
        let max_rel_err = rows.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
        Ok(GradCheckReport {
            rows,
            max_abs_err,
            max_rel_err,
        })
    }

    /// Piecewise-linearity signature of the current forward state: relu
    /// activation masks and pool argmax choices. Two perturbed evaluations
    /// are only comparable by finite differences if these match.
    fn kink_signature(&self) -> Vec<Vec<u32>> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { input } => sig.push(
                    self.nodes[*input]
                        .tensor
                        .values
                        .iter()
                        .map(|&v| (v > 0.0) as u32)
                        .collect(),
                ),
                Op::MaxPool2d { input, size } => {
                    let x = &self.nodes[*input].tensor;
                    sig.push(
                        max_pool2d_argmax(&x.values, (x.shape[0], x.shape[1], x.shape[2]), *size)
                            .iter()
                            .map(|&v| v as u32)
                            .collect(),
                    );
                }
                _ => {}
            }
        }
        sig
    }
}

/// Per-node adjoints from one backward pass. Only leaf entries are retained.
pub struct Adjoints {
    per_node: Vec<Option<Vec<f64>>>,
}

impl Adjoints {
    /// Adjoint of a node, if it was reached from the loss.
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.per_node[id.0].as_deref()
    }
}

/// Outcome of [`DiffGraph::check_gradients`].
#[derive(Debug)]
pub struct GradCheckReport {
    pub rows: Vec<GradCheckRow>,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
}

#[derive(Debug)]
pub struct GradCheckRow {
    pub node: NodeId,
    pub name: String,
    pub elements: usize,
    pub excluded: usize,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<24} {:>8} {:>8} {:>12} {:>12}",
            "tensor", "elems", "excl", "max_abs", "max_rel"
        )?;
        for row in &self.rows {
            writeln!(
                f,
                "{:<24} {:>8} {:>8} {:>12.3e} {:>12.3e}",
                row.name, row.elements, row.excluded, row.max_abs_err, row.max_rel_err
            )?;
        }
        write!(
            f,
            "overall max_abs_err {:.3e}, max_rel_err {:.3e}",
            self.max_abs_err, self.max_rel_err
        )
    }
}

// ── kernels ─────────────────────────────────────────────────────────────

fn round_f32(values: &mut [f64]) {
    for v in values {
        *v = *v as f32 as f64;
    }
}

fn ensure<'a>(adj: &'a mut [Option<Vec<f64>>], id: usize, len: usize) -> &'a mut Vec<f64> {
    adj[id].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn dense_forward(x: &[f64], w: &[f64], b: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(m);
    for i in 0..m {
        let row = &w[i * n..(i + 1) * n];
        let dot: f64 = row.iter().zip(x).map(|(wv, xv)| wv * xv).sum();
        out.push(dot + b[i]);
    }
    out
}

fn softmax_forward(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

#[derive(Debug, Clone)]
struct ConvGeometry {
    stride: usize,
    pad_top: usize,
    pad_left: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeometry {
    fn resolve(
        h: usize,
        w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<Self, String> {
        let (pad_h, pad_w) = match padding {
            Padding::Valid => (0, 0),
            Padding::Same => {
                let out_h = h.div_ceil(stride);
                let out_w = w.div_ceil(stride);
                let pad_h = ((out_h - 1) * stride + kh).saturating_sub(h);
                let pad_w = ((out_w - 1) * stride + kw).saturating_sub(w);
                (pad_h, pad_w)
            }
        };
        if kh > h + pad_h || kw > w + pad_w {
            return Err(format!(
                "kernel {kh}x{kw} larger than padded input {}x{}",
                h + pad_h,
                w + pad_w
            ));
        }
        let out_h = (h + pad_h - kh) / stride + 1;
        let out_w = (w + pad_w - kw) / stride + 1;
        Ok(Self {
            stride,
            pad_top: pad_h / 2,
            pad_left: pad_w / 2,
            out_h,
            out_w,
        })
    }
}

/// Range of output columns whose input column `ox*stride + kx - pad_left`
/// stays inside `[0, w)`.
fn ox_range(kx: usize, pad_left: usize, stride: usize, w: usize, out_w: usize) -> (usize, usize) {
    let dx = kx as isize - pad_left as isize;
    let lo = if dx >= 0 {
        0
    } else {
        ((-dx) as usize).div_ceil(stride)
    };
    let hi = if (w as isize) > dx {
        (((w as isize - 1 - dx) as usize) / stride + 1).min(out_w)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn conv2d_forward(
    x: &[f64],
    (c, h, w): (usize, usize, usize),
    k: &[f64],
    (f, kh, kw): (usize, usize, usize),
    bias: &[f64],
    geom: &ConvGeometry,
) -> Vec<f64> {
    let (oh, ow, s) = (geom.out_h, geom.out_w, geom.stride);
    let mut out = vec![0.0; f * oh * ow];
    for fi in 0..f {
        let out_f = &mut out[fi * oh * ow..(fi + 1) * oh * ow];
        out_f.fill(bias[fi]);
        for ci in 0..c {
            let x_c = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wgt = k[((fi * c + ci) * kh + ky) * kw + kx];
                    if wgt == 0.0 {
                        continue;
                    }
                    let (ox_lo, ox_hi) = ox_range(kx, geom.pad_left, s, w, ow);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let dx = kx as isize - geom.pad_left as isize;
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - geom.pad_top as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let x_row = &x_c[iy as usize * w..(iy as usize + 1) * w];
                        let o_row = &mut out_f[oy * ow..(oy + 1) * ow];
                        if s == 1 {
                            let ix0 = (ox_lo as isize + dx) as usize;
                            let n = ox_hi - ox_lo;
                            let xs = &x_row[ix0..ix0 + n];
                            let os = &mut o_row[ox_lo..ox_lo + n];
                            for (o, xv) in os.iter_mut().zip(xs) {
                                *o += wgt * xv;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                let ix = (ox * s) as isize + dx;
                                o_row[ox] += wgt * x_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    g: &[f64],
    x: &[f64],
    (c, h, w): (usize, usize, usize),
    k: &[f64],
    (f, kh, kw): (usize, usize, usize),
    geom: &ConvGeometry,
    want_dx: bool,
    want_dk: bool,
    want_db: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let (oh, ow, s) = (geom.out_h, geom.out_w, geom.stride);
    let mut dx = if want_dx { Some(vec![0.0; c * h * w]) } else { None };
    let mut dk = if want_dk {
        Some(vec![0.0; f * c * kh * kw])
    } else {
        None
    };
    let mut db = if want_db { Some(vec![0.0; f]) } else { None };

    for fi in 0..f {
        let g_f = &g[fi * oh * ow..(fi + 1) * oh * ow];
        if let Some(db) = db.as_mut() {
            db[fi] = g_f.iter().sum();
        }
        if dx.is_none() && dk.is_none() {
            continue;
        }
        for ci in 0..c {
            let x_c = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..kh {
                for kx in 0..kw {
                    let widx = ((fi * c + ci) * kh + ky) * kw + kx;
                    let wgt = k[widx];
                    let (ox_lo, ox_hi) = ox_range(kx, geom.pad_left, s, w, ow);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let dxs = kx as isize - geom.pad_left as isize;
                    let mut wsum = 0.0;
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - geom.pad_top as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let g_row = &g_f[oy * ow..(oy + 1) * ow];
                        let row0 = iy as usize * w;
                        if s == 1 {
                            let ix0 = (ox_lo as isize + dxs) as usize;
                            let n = ox_hi - ox_lo;
                            let gs = &g_row[ox_lo..ox_lo + n];
                            if dk.is_some() {
                                let xs = &x_c[row0 + ix0..row0 + ix0 + n];
                                wsum += gs.iter().zip(xs).map(|(a, b)| a * b).sum::<f64>();
                            }
                            if let Some(dx) = dx.as_mut() {
                                let ds = &mut dx[ci * h * w + row0 + ix0..][..n];
                                for (d, gv) in ds.iter_mut().zip(gs) {
                                    *d += wgt * gv;
                                }
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                let ix = ((ox * s) as isize + dxs) as usize;
                                let gv = g_row[ox];
                                if dk.is_some() {
                                    wsum += gv * x_c[row0 + ix];
                                }
                                if let Some(dx) = dx.as_mut() {
                                    dx[ci * h * w + row0 + ix] += wgt * gv;
                                }
                            }
                        }
                    }
                    if let Some(dk) = dk.as_mut() {
                        dk[widx] += wsum;
                    }
                }
            }
        }
    }
    (dx, dk, db)
}

fn max_pool2d_forward(x: &[f64], (c, h, w): (usize, usize, usize), size: usize) -> Vec<f64> {
    let (oh, ow) = (h / size, w / size);
    let mut out = vec![0.0; c * oh * ow];
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                for dy in 0..size {
                    let row = ci * h * w + (oy * size + dy) * w + ox * size;
                    for dx in 0..size {
                        let v = x[row + dx];
                        if v > best {
                            best = v;
                        }
                    }
                }
                out[ci * oh * ow + oy * ow + ox] = best;
            }
        }
    }
    out
}

/// Flat input index of the first (row-major) maximal cell of each window.
fn max_pool2d_argmax(x: &[f64], (c, h, w): (usize, usize, usize), size: usize) -> Vec<usize> {
    let (oh, ow) = (h / size, w / size);
    let mut arg = vec![0usize; c * oh * ow];
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0usize;
                for dy in 0..size {
                    let row = ci * h * w + (oy * size + dy) * w + ox * size;
                    for dx in 0..size {
                        let v = x[row + dx];
                        if v > best {
                            best = v;
                            best_idx = row + dx;
                        }
                    }
                }
                arg[ci * oh * ow + oy * ow + ox] = best_idx;
            }
        }
    }
    arg
}

fn upsample2_forward(x: &[f64], (c, h, w): (usize, usize, usize)) -> Vec<f64> {
    let mut out = vec![0.0; c * 4 * h * w];
    for ci in 0..c {
        for oy in 0..2 * h {
            let src = &x[ci * h * w + (oy / 2) * w..][..w];
            let dst = &mut out[ci * 4 * h * w + oy * 2 * w..][..2 * w];
            for (ox, d) in dst.iter_mut().enumerate() {
                *d = src[ox / 2];
            }
        }
    }
    out
}
