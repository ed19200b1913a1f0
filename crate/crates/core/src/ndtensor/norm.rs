//! Instance normalization and spatial finite differences.

use std::sync::Arc;

use super::tape::{Op, Tape};
use super::{Result, Scalar, Tensor, TensorError};

impl<F: Scalar> Tape<F> {
    /// Normalize each (batch, channel) slice over its spatial extent to
    /// zero mean and unit variance (biased variance, epsilon-guarded).
    /// No affine parameters; the following conv's weights absorb scale.
    pub fn instance_norm(&mut self, x: &Tensor<F>, eps: f64) -> Result<Tensor<F>> {
        if x.rank() < 3 {
            return Err(TensorError::RankMismatch {
                op: "instance_norm",
                expected: 3,
                got: x.rank(),
            });
        }
        let batch = x.batch();
        let channels = x.channels();
        let vol: usize = x.spatial().iter().product();
        let n = F::cast(vol as f64);
        let eps = F::cast(eps);

        let mut values = vec![F::zero(); x.numel()];
        let mut inv_std = vec![F::zero(); batch * channels];
        for bc in 0..batch * channels {
            let base = bc * vol;
            let slice = &x.values()[base..base + vol];
            let mut mean = F::zero();
            for &v in slice {
                mean = mean + v;
            }
            mean = mean / n;
            let mut var = F::zero();
            for &v in slice {
                let d = v - mean;
                var = var + d * d;
            }
            var = var / n;
            let istd = F::one() / (var + eps).sqrt();
            inv_std[bc] = istd;
            for (o, &v) in values[base..base + vol].iter_mut().zip(slice) {
                *o = (v - mean) * istd;
            }
        }
        let normalized = Arc::new(values.clone());
        Ok(self.result(
            Op::InstanceNorm {
                input: x.clone(),
                normalized,
                inv_std: Arc::new(inv_std),
            },
            x.shape().to_vec(),
            values,
        ))
    }

    /// Forward difference x[i+1] - x[i] along spatial axis `axis`
    /// (0-based among the spatial dims); output extent shrinks by one.
    pub fn spatial_diff(&mut self, x: &Tensor<F>, axis: usize) -> Result<Tensor<F>> {
        let d = x.rank() - 2;
        if axis >= d {
            return Err(TensorError::Invalid {
                op: "spatial_diff",
                msg: format!("spatial axis {axis} out of range for rank {d}"),
            });
        }
        let tensor_axis = 2 + axis;
        let ext = x.shape()[tensor_axis];
        if ext < 2 {
            return Err(TensorError::Invalid {
                op: "spatial_diff",
                msg: format!("axis {axis} extent {ext} too small for forward differences"),
            });
        }
        let outer: usize = x.shape()[..tensor_axis].iter().product();
        let inner: usize = x.shape()[tensor_axis + 1..].iter().product();
        let mut out_shape = x.shape().to_vec();
        out_shape[tensor_axis] = ext - 1;
        let mut values = vec![F::zero(); outer * (ext - 1) * inner];
        let xv = x.values();
        for o in 0..outer {
            for i in 0..ext - 1 {
                let src = (o * ext + i) * inner;
                let dst = (o * (ext - 1) + i) * inner;
                for k in 0..inner {
                    values[dst + k] = xv[src + inner + k] - xv[src + k];
                }
            }
        }
        Ok(self.result(Op::SpatialDiff(x.clone(), tensor_axis), out_shape, values))
    }
}

pub(crate) fn instance_norm_backward<F: Scalar>(
    shape: &[usize],
    normalized: &[F],
    inv_std: &[F],
    grad: &[F],
) -> Vec<F> {
    let vol: usize = shape[2..].iter().product();
    let n = F::cast(vol as f64);
    let mut dx = vec![F::zero(); normalized.len()];
    for (bc, &istd) in inv_std.iter().enumerate() {
        let base = bc * vol;
        let g = &grad[base..base + vol];
        let y = &normalized[base..base + vol];
        let mut gsum = F::zero();
        let mut gysum = F::zero();
        for i in 0..vol {
            gsum = gsum + g[i];
            gysum = gysum + g[i] * y[i];
        }
        let gmean = gsum / n;
        let gymean = gysum / n;
        for i in 0..vol {
            dx[base + i] = istd * (g[i] - gmean - y[i] * gymean);
        }
    }
    dx
}

pub(crate) fn spatial_diff_backward<F: Scalar>(
    in_shape: &[usize],
    tensor_axis: usize,
    grad: &[F],
) -> Vec<F> {
    let ext = in_shape[tensor_axis];
    let outer: usize = in_shape[..tensor_axis].iter().product();
    let inner: usize = in_shape[tensor_axis + 1..].iter().product();
    let mut dx = vec![F::zero(); outer * ext * inner];
    for o in 0..outer {
        for i in 0..ext - 1 {
            let gsrc = (o * (ext - 1) + i) * inner;
            let xdst = (o * ext + i) * inner;
            for k in 0..inner {
                let g = grad[gsrc + k];
                dx[xdst + k] = dx[xdst + k] - g;
                dx[xdst + inner + k] = dx[xdst + inner + k] + g;
            }
        }
    }
    dx
}
