//! Define-by-run tape. Ops are methods on [`Tape`]; each call computes the
//! forward value immediately and, when any input is tracked, records a node
//! holding whatever the exact adjoint needs. The tape is rebuilt on every
//! forward pass.

use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;

use super::conv::ConvSpec;
use super::sample::SampleMode;
use super::{numel_of, Result, Scalar, Tensor, TensorError};

/// Index of a node on its tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

/// Recorded operation. Inputs are kept as (detached) tensors so the
/// backward pass can read parent values without re-borrowing the tape.
pub(crate) enum Op<F: Scalar> {
    Leaf,
    Add(Tensor<F>, Tensor<F>),
    Sub(Tensor<F>, Tensor<F>),
    Mul(Tensor<F>, Tensor<F>),
    Div(Tensor<F>, Tensor<F>),
    Neg(Tensor<F>),
    Scale(Tensor<F>, F),
    LeakyRelu(Tensor<F>, F),
    XLogX(Tensor<F>),
    AddBias(Tensor<F>, Tensor<F>),
    MulScalar(Tensor<F>, Tensor<F>),
    Index(Tensor<F>, usize),
    Narrow {
        input: Tensor<F>,
        axis: usize,
        start: usize,
        len: usize,
    },
    Concat {
        inputs: Vec<Tensor<F>>,
        axis: usize,
    },
    Sum(Tensor<F>),
    Mean(Tensor<F>),
    Softmax {
        input: Tensor<F>,
        axis: usize,
        output: Arc<Vec<F>>,
    },
    Conv {
        input: Tensor<F>,
        weight: Tensor<F>,
        spec: ConvSpec,
        out_spatial: Vec<usize>,
    },
    GridSample {
        input: Tensor<F>,
        coords: Tensor<F>,
        mode: SampleMode,
    },
    InstanceNorm {
        input: Tensor<F>,
        normalized: Arc<Vec<F>>,
        inv_std: Arc<Vec<F>>,
    },
    SpatialDiff(Tensor<F>, usize),
}

impl<F: Scalar> Op<F> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(..) => "neg",
            Op::Scale(..) => "scale",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::XLogX(..) => "xlogx",
            Op::AddBias(..) => "add_bias",
            Op::MulScalar(..) => "mul_scalar",
            Op::Index(..) => "index",
            Op::Narrow { .. } => "narrow",
            Op::Concat { .. } => "concat",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Softmax { .. } => "softmax",
            Op::Conv { .. } => "conv_nd",
            Op::GridSample { .. } => "grid_sample",
            Op::InstanceNorm { .. } => "instance_norm",
            Op::SpatialDiff(..) => "spatial_diff",
        }
    }

    fn parents(&self) -> Vec<Option<NodeId>> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                vec![a.node(), b.node()]
            }
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::LeakyRelu(a, _)
            | Op::XLogX(a)
            | Op::Index(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SpatialDiff(a, _) => vec![a.node()],
            Op::AddBias(a, b) | Op::MulScalar(a, b) => vec![a.node(), b.node()],
            Op::Narrow { input, .. } => vec![input.node()],
            Op::Concat { inputs, .. } => inputs.iter().map(|t| t.node()).collect(),
            Op::Softmax { input, .. } => vec![input.node()],
            Op::Conv { input, weight, .. } => vec![input.node(), weight.node()],
            Op::GridSample { input, coords, .. } => vec![input.node(), coords.node()],
            Op::InstanceNorm { input, .. } => vec![input.node()],
        }
    }
}

struct Node<F: Scalar> {
    op: Op<F>,
    shape: Vec<usize>,
}

/// Reverse-mode tape over dense tensors.
#[derive(Default)]
pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a tensor as a tracked leaf (a differentiable input).
    pub fn leaf(&mut self, t: &Tensor<F>) -> Tensor<F> {
        let id = self.push(Op::Leaf, t.shape().to_vec());
        Tensor {
            shape: t.shape().to_vec(),
            values: t.values_arc(),
            node: Some(id),
        }
    }

    pub(crate) fn push(&mut self, op: Op<F>, shape: Vec<usize>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, shape });
        self.grads.push(None);
        id
    }

    /// Wrap an op result: records a node only when some input is tracked.
    pub(crate) fn result(
        &mut self,
        op: Op<F>,
        shape: Vec<usize>,
        values: Vec<F>,
    ) -> Tensor<F> {
        debug_assert_eq!(numel_of(&shape), values.len());
        let tracked = op.parents().iter().any(|p| p.is_some());
        if tracked {
            let id = self.push(op, shape.clone());
            Tensor::with_node(shape, values, id)
        } else {
            Tensor {
                shape,
                values: Arc::new(values),
                node: None,
            }
        }
    }

    fn accumulate(&mut self, node: Option<NodeId>, delta: &[F]) {
        let Some(NodeId(id)) = node else { return };
        let slot = &mut self.grads[id];
        match slot {
            Some(buf) => {
                debug_assert_eq!(buf.len(), delta.len());
                for (g, d) in buf.iter_mut().zip(delta) {
                    *g = *g + *d;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    fn accumulate_owned(&mut self, node: Option<NodeId>, delta: Vec<F>) {
        let Some(NodeId(id)) = node else { return };
        let slot = &mut self.grads[id];
        match slot {
            Some(buf) => {
                debug_assert_eq!(buf.len(), delta.len());
                for (g, d) in buf.iter_mut().zip(delta) {
                    *g = *g + d;
                }
            }
            None => *slot = Some(delta),
        }
    }

    /// Accumulate adjoints of every reachable leaf from a scalar root.
    ///
    /// Gradients of leaves persist on the tape until [`Tape::clear_grads`],
    /// so repeated backward calls accumulate their contributions.
    pub fn backward(&mut self, root: &Tensor<F>) -> Result<()> {
        let Some(NodeId(root_id)) = root.node() else {
            return Err(TensorError::Invalid {
                op: "backward",
                msg: "root tensor is not tracked on this tape".into(),
            });
        };
        if root.numel() != 1 {
            return Err(TensorError::NotScalar {
                op: "backward",
                numel: root.numel(),
            });
        }
        self.accumulate(root.node(), &[F::one()]);

        for id in (0..=root_id).rev() {
            if matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            let Some(grad) = self.grads[id].take() else {
                continue;
            };
            self.propagate(id, grad);
        }
        Ok(())
    }

    /// Gradient of a tracked tensor, if one has been accumulated.
    pub fn grad(&self, t: &Tensor<F>) -> Option<Tensor<F>> {
        let NodeId(id) = t.node()?;
        let buf = self.grads[id].as_ref()?;
        Some(Tensor {
            shape: self.nodes[id].shape.clone(),
            values: Arc::new(buf.clone()),
            node: None,
        })
    }

    pub fn clear_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    /// Write the node list (id, op, shape, parents) as text, for inspection.
    pub fn dump(&self, path: &Path) -> std::io::Result<()> {
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "# tape dump: {} nodes", self.nodes.len())?;
        writeln!(f, "# id\top\tshape\tparents")?;
        for (i, node) in self.nodes.iter().enumerate() {
            let parents: Vec<String> = node
                .op
                .parents()
                .iter()
                .map(|p| match p {
                    Some(NodeId(id)) => id.to_string(),
                    None => "const".to_string(),
                })
                .collect();
            writeln!(
                f,
                "{}\t{}\t{:?}\t[{}]",
                i,
                node.op.name(),
                node.shape,
                parents.join(",")
            )?;
        }
        Ok(())
    }

    fn propagate(&mut self, id: usize, grad: Vec<F>) {
        // Temporarily take the op out so we can call &mut self helpers.
        let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
        match &op {
            Op::Leaf => unreachable!("leaf nodes are skipped"),
            Op::Add(a, b) => {
                self.accumulate(a.node(), &grad);
                self.accumulate_owned(b.node(), grad);
            }
            Op::Sub(a, b) => {
                self.accumulate(a.node(), &grad);
                if b.node().is_some() {
                    let neg: Vec<F> = grad.iter().map(|&g| -g).collect();
                    self.accumulate_owned(b.node(), neg);
                }
            }
            Op::Mul(a, b) => {
                if a.node().is_some() {
                    let da: Vec<F> = grad
                        .iter()
                        .zip(b.values())
                        .map(|(&g, &bv)| g * bv)
                        .collect();
                    self.accumulate_owned(a.node(), da);
                }
                if b.node().is_some() {
                    let db: Vec<F> = grad
                        .iter()
                        .zip(a.values())
                        .map(|(&g, &av)| g * av)
                        .collect();
                    self.accumulate_owned(b.node(), db);
                }
            }
            Op::Div(a, b) => {
                if a.node().is_some() {
                    let da: Vec<F> = grad
                        .iter()
                        .zip(b.values())
                        .map(|(&g, &bv)| g / bv)
                        .collect();
                    self.accumulate_owned(a.node(), da);
                }
                if b.node().is_some() {
                    let db: Vec<F> = grad
                        .iter()
                        .zip(a.values().iter().zip(b.values()))
                        .map(|(&g, (&av, &bv))| -g * av / (bv * bv))
                        .collect();
                    self.accumulate_owned(b.node(), db);
                }
            }
            Op::Neg(a) => {
                let da: Vec<F> = grad.iter().map(|&g| -g).collect();
                self.accumulate_owned(a.node(), da);
            }
            Op::Scale(a, c) => {
                let da: Vec<F> = grad.iter().map(|&g| g * *c).collect();
                self.accumulate_owned(a.node(), da);
            }
            Op::LeakyRelu(a, slope) => {
                let da: Vec<F> = grad
                    .iter()
                    .zip(a.values())
                    .map(|(&g, &x)| if x >= F::zero() { g } else { g * *slope })
                    .collect();
                self.accumulate_owned(a.node(), da);
            }
            Op::XLogX(a) => {
                // d(x ln x)/dx = ln x + 1; pinned to 0 at x == 0 so the
                // one-hot entropy case stays finite.
                let da: Vec<F> = grad
                    .iter()
                    .zip(a.values())
                    .map(|(&g, &x)| {
                        if x == F::zero() {
                            F::zero()
                        } else {
                            g * (x.ln() + F::one())
                        }
                    })
                    .collect();
                self.accumulate_owned(a.node(), da);
            }
            Op::AddBias(x, bias) => {
                self.accumulate(x.node(), &grad);
                if bias.node().is_some() {
                    let channels = x.shape()[1];
                    let spatial: usize = x.shape()[2..].iter().product();
                    let batch = x.shape()[0];
                    let mut db = vec![F::zero(); channels];
                    for b in 0..batch {
                        for (c, dbc) in db.iter_mut().enumerate() {
                            let base = (b * channels + c) * spatial;
                            let mut acc = F::zero();
                            for &g in &grad[base..base + spatial] {
                                acc = acc + g;
                            }
                            *dbc = *dbc + acc;
                        }
                    }
                    self.accumulate_owned(bias.node(), db);
                }
            }
            Op::MulScalar(x, s) => {
                let sv = s.values()[0];
                if x.node().is_some() {
                    let dx: Vec<F> = grad.iter().map(|&g| g * sv).collect();
                    self.accumulate_owned(x.node(), dx);
                }
                if s.node().is_some() {
                    let mut acc = F::zero();
                    for (&g, &xv) in grad.iter().zip(x.values()) {
                        acc = acc + g * xv;
                    }
                    self.accumulate_owned(s.node(), vec![acc]);
                }
            }
            Op::Index(x, i) => {
                if x.node().is_some() {
                    let mut dx = vec![F::zero(); x.numel()];
                    dx[*i] = grad[0];
                    self.accumulate_owned(x.node(), dx);
                }
            }
            Op::Narrow {
                input,
                axis,
                start,
                len,
            } => {
                if input.node().is_some() {
                    let dx = super::basic::narrow_backward(
                        input.shape(),
                        *axis,
                        *start,
                        *len,
                        &grad,
                    );
                    self.accumulate_owned(input.node(), dx);
                }
            }
            Op::Concat { inputs, axis } => {
                let parts = super::basic::concat_backward(inputs, *axis, &grad);
                for (t, dx) in inputs.iter().zip(parts) {
                    self.accumulate_owned(t.node(), dx);
                }
            }
            Op::Sum(a) => {
                let da = vec![grad[0]; a.numel()];
                self.accumulate_owned(a.node(), da);
            }
            Op::Mean(a) => {
                let scale = grad[0] / F::cast(a.numel() as f64);
                let da = vec![scale; a.numel()];
                self.accumulate_owned(a.node(), da);
            }
            Op::Softmax {
                input,
                axis,
                output,
            } => {
                if input.node().is_some() {
                    let dx =
                        super::basic::softmax_backward(input.shape(), *axis, output, &grad);
                    self.accumulate_owned(input.node(), dx);
                }
            }
            Op::Conv {
                input,
                weight,
                spec,
                out_spatial,
            } => {
                if input.node().is_some() {
                    let dx = super::conv::conv_backward_input(input, weight, spec, out_spatial, &grad);
                    self.accumulate_owned(input.node(), dx);
                }
                if weight.node().is_some() {
                    let dw = super::conv::conv_backward_weight(input, weight, spec, out_spatial, &grad);
                    self.accumulate_owned(weight.node(), dw);
                }
            }
            Op::GridSample {
                input,
                coords,
                mode,
            } => {
                let (dx, dc) = super::sample::grid_sample_backward(
                    input,
                    coords,
                    *mode,
                    &grad,
                    input.node().is_some(),
                    coords.node().is_some(),
                );
                if let Some(dx) = dx {
                    self.accumulate_owned(input.node(), dx);
                }
                if let Some(dc) = dc {
                    self.accumulate_owned(coords.node(), dc);
                }
            }
            Op::InstanceNorm {
                input,
                normalized,
                inv_std,
            } => {
                if input.node().is_some() {
                    let dx = super::norm::instance_norm_backward(
                        input.shape(),
                        normalized,
                        inv_std,
                        &grad,
                    );
                    self.accumulate_owned(input.node(), dx);
                }
            }
            Op::SpatialDiff(a, axis) => {
                if a.node().is_some() {
                    let dx = super::norm::spatial_diff_backward(a.shape(), *axis, &grad);
                    self.accumulate_owned(a.node(), dx);
                }
            }
        }
        self.nodes[id].op = op;
    }
}
