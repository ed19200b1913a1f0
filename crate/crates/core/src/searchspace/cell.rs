//! Candidate cell operations and the partial-channel mixed op: the input
//! is split into k channel groups, one randomly chosen group flows through
//! the alpha-weighted mixture of all eight candidates, the rest bypass
//! untouched, and the groups are reassembled in their original order.
//!
//! Candidate weights are allocated at the full channel count and sliced to
//! the active group, so a decoded (full-channel) cell is always a strict
//! parameter subset of its search-time counterpart.

use crate::ndtensor::{ConvSpec, Result, Scalar, Tape, Tensor, TensorError};
use crate::params::{Binding, ParamId, ParamStore};
use crate::regmath::INSTANCE_NORM_EPS;
use crate::rng::RngStream;

use super::OpKind;

pub const LEAKY_SLOPE: f64 = 0.2;

/// Weight handles for one candidate op of one cell.
#[derive(Debug, Clone)]
pub enum CellOpWeights {
    Dense {
        op: OpKind,
        w: ParamId,
    },
    Separable {
        op: OpKind,
        dw: ParamId,
        pw: ParamId,
    },
}

impl CellOpWeights {
    pub fn op(&self) -> OpKind {
        match self {
            CellOpWeights::Dense { op, .. } | CellOpWeights::Separable { op, .. } => *op,
        }
    }
}

/// Allocate one candidate op over `channels` channels. Dense/atrous
/// kernels are [C, C, K..]; separable ops split into a depthwise
/// [C, 1, K..] and pointwise [C, C, 1..] pair. Cell convs carry no bias
/// (the instance norm would cancel it).
pub fn make_one_cell_op<F: Scalar>(
    store: &mut ParamStore<F>,
    prefix: &str,
    op: OpKind,
    channels: usize,
    dims: usize,
    rng: &mut RngStream,
) -> Result<CellOpWeights> {
    let k = op.kernel_extent();
    let name = format!("{prefix}.op.{}", op.name());
    if op.is_separable() {
        let mut dw_shape = vec![channels, 1];
        dw_shape.extend(std::iter::repeat_n(k, dims));
        let dw = store.add_kaiming(format!("{name}.dw"), &dw_shape, k.pow(dims as u32), rng)?;
        let mut pw_shape = vec![channels, channels];
        pw_shape.extend(std::iter::repeat_n(1, dims));
        let pw = store.add_kaiming(format!("{name}.pw"), &pw_shape, channels, rng)?;
        Ok(CellOpWeights::Separable { op, dw, pw })
    } else {
        let mut shape = vec![channels, channels];
        shape.extend(std::iter::repeat_n(k, dims));
        let w = store.add_kaiming(
            format!("{name}.w"),
            &shape,
            channels * k.pow(dims as u32),
            rng,
        )?;
        Ok(CellOpWeights::Dense { op, w })
    }
}

/// Allocate all eight candidate ops for one cell.
pub fn make_cell_ops<F: Scalar>(
    store: &mut ParamStore<F>,
    prefix: &str,
    channels: usize,
    dims: usize,
    rng: &mut RngStream,
) -> Result<Vec<CellOpWeights>> {
    OpKind::ALL
        .into_iter()
        .map(|op| make_one_cell_op(store, prefix, op, channels, dims, rng))
        .collect()
}

/// One candidate op applied to a channel-group slice: conv (weights sliced
/// to the group) -> instance norm -> leaky rectifier.
pub fn cell_op_forward<F: Scalar>(
    tape: &mut Tape<F>,
    binding: &mut Binding<F>,
    store: &ParamStore<F>,
    x_group: &Tensor<F>,
    weights: &CellOpWeights,
    offset: usize,
    group_size: usize,
) -> Result<Tensor<F>> {
    let dims = x_group.rank() - 2;
    let op = weights.op();
    let spec = ConvSpec::cube(op.kernel_extent(), dims).with_dilation(op.dilation());
    let full = store.get(match weights {
        CellOpWeights::Dense { w, .. } => *w,
        CellOpWeights::Separable { dw, .. } => *dw,
    });
    let total_channels = full.shape[0];
    let conv_out = match weights {
        CellOpWeights::Dense { w, .. } => {
            let w_full = binding.bind(tape, store, *w);
            let w_rows = tape.narrow(&w_full, 0, offset, group_size)?;
            let w_slice = if total_channels == group_size {
                w_rows
            } else {
                tape.narrow(&w_rows, 1, offset, group_size)?
            };
            tape.conv_nd(x_group, &w_slice, &spec)?
        }
        CellOpWeights::Separable { dw, pw, .. } => {
            let dw_full = binding.bind(tape, store, *dw);
            let dw_slice = tape.narrow(&dw_full, 0, offset, group_size)?;
            let pw_full = binding.bind(tape, store, *pw);
            let pw_rows = tape.narrow(&pw_full, 0, offset, group_size)?;
            let pw_slice = if total_channels == group_size {
                pw_rows
            } else {
                tape.narrow(&pw_rows, 1, offset, group_size)?
            };
            tape.separable_conv_nd(x_group, &dw_slice, &pw_slice, &spec)?
        }
    };
    let normed = tape.instance_norm(&conv_out, INSTANCE_NORM_EPS)?;
    tape.leaky_relu(&normed, LEAKY_SLOPE)
}

/// Partial-channel mixed op: channel group `group` (of `k`) flows through
/// the alpha-softmax-weighted sum of all candidates; the other groups
/// bypass bit-identically; outputs are concatenated in original channel
/// order.
#[allow(clippy::too_many_arguments)]
pub fn mixed_op_partial<F: Scalar>(
    tape: &mut Tape<F>,
    binding: &mut Binding<F>,
    store: &ParamStore<F>,
    x: &Tensor<F>,
    alpha_probs: &Tensor<F>,
    ops: &[CellOpWeights],
    k: usize,
    group: usize,
) -> Result<Tensor<F>> {
    let channels = x.channels();
    if k == 0 || channels % k != 0 {
        return Err(TensorError::Invalid {
            op: "mixed_op_partial",
            msg: format!("k = {k} must divide the channel count {channels}"),
        });
    }
    if group >= k {
        return Err(TensorError::Invalid {
            op: "mixed_op_partial",
            msg: format!("group {group} out of range for k = {k}"),
        });
    }
    if alpha_probs.numel() != ops.len() {
        return Err(TensorError::ShapeMismatch {
            op: "mixed_op_partial",
            axis: 0,
            expected: ops.len(),
            got: alpha_probs.numel(),
        });
    }
    let group_size = channels / k;
    let offset = group * group_size;
    let x_group = if k == 1 {
        x.clone()
    } else {
        tape.narrow(x, 1, offset, group_size)?
    };

    let mut mixed: Option<Tensor<F>> = None;
    for (i, w) in ops.iter().enumerate() {
        let y = cell_op_forward(tape, binding, store, &x_group, w, offset, group_size)?;
        let wi = tape.index(alpha_probs, i)?;
        let term = tape.mul_scalar(&y, &wi)?;
        mixed = Some(match mixed {
            Some(acc) => tape.add(&acc, &term)?,
            None => term,
        });
    }
    let mixed = mixed.expect("candidate set is non-empty");
    if k == 1 {
        return Ok(mixed);
    }
    let mut parts = Vec::with_capacity(3);
    if offset > 0 {
        parts.push(tape.narrow(x, 1, 0, offset)?);
    }
    parts.push(mixed);
    if offset + group_size < channels {
        parts.push(tape.narrow(x, 1, offset + group_size, channels - offset - group_size)?);
    }
    tape.concat(&parts, 1)
}
