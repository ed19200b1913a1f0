//! Elementwise and structural ops: arithmetic, activations, reductions,
//! concat/narrow, softmax, bias.

use std::sync::Arc;

use super::tape::{Op, Tape};
use super::{check_same_shape, Result, Scalar, Tensor, TensorError};

impl<F: Scalar> Tape<F> {
    pub fn add(&mut self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
        check_same_shape("add", a, b)?;
        let values = a
            .values()
            .iter()
            .zip(b.values())
            .map(|(&x, &y)| x + y)
            .collect();
        Ok(self.result(Op::Add(a.clone(), b.clone()), a.shape().to_vec(), values))
    }

    pub fn sub(&mut self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
        check_same_shape("sub", a, b)?;
        let values = a
            .values()
            .iter()
            .zip(b.values())
            .map(|(&x, &y)| x - y)
            .collect();
        Ok(self.result(Op::Sub(a.clone(), b.clone()), a.shape().to_vec(), values))
    }

    pub fn mul(&mut self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
        check_same_shape("mul", a, b)?;
        let values = a
            .values()
            .iter()
            .zip(b.values())
            .map(|(&x, &y)| x * y)
            .collect();
        Ok(self.result(Op::Mul(a.clone(), b.clone()), a.shape().to_vec(), values))
    }

    pub fn div(&mut self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
        check_same_shape("div", a, b)?;
        let values = a
            .values()
            .iter()
            .zip(b.values())
            .map(|(&x, &y)| x / y)
            .collect();
        Ok(self.result(Op::Div(a.clone(), b.clone()), a.shape().to_vec(), values))
    }

    pub fn neg(&mut self, a: &Tensor<F>) -> Result<Tensor<F>> {
        let values = a.values().iter().map(|&x| -x).collect();
        Ok(self.result(Op::Neg(a.clone()), a.shape().to_vec(), values))
    }

    /// Multiply by a compile-time constant (not differentiated through).
    pub fn scale(&mut self, a: &Tensor<F>, c: f64) -> Result<Tensor<F>> {
        let c = F::cast(c);
        let values = a.values().iter().map(|&x| x * c).collect();
        Ok(self.result(Op::Scale(a.clone(), c), a.shape().to_vec(), values))
    }

    /// max(x, slope * x); derivative at exactly 0 takes the positive branch.
    pub fn leaky_relu(&mut self, a: &Tensor<F>, slope: f64) -> Result<Tensor<F>> {
        let s = F::cast(slope);
        let values = a
            .values()
            .iter()
            .map(|&x| if x >= F::zero() { x } else { x * s })
            .collect();
        Ok(self.result(Op::LeakyRelu(a.clone(), s), a.shape().to_vec(), values))
    }

    /// x * ln(x), with 0 * ln(0) := 0. Rejects negative inputs.
    pub fn xlogx(&mut self, a: &Tensor<F>) -> Result<Tensor<F>> {
        if a.values().iter().any(|&x| x < F::zero() || !x.is_finite()) {
            return Err(TensorError::Invalid {
                op: "xlogx",
                msg: "inputs must be finite and nonnegative".into(),
            });
        }
        let values = a
            .values()
            .iter()
            .map(|&x| if x == F::zero() { F::zero() } else { x * x.ln() })
            .collect();
        Ok(self.result(Op::XLogX(a.clone()), a.shape().to_vec(), values))
    }

    /// Per-channel bias add over a [B, C, spatial...] tensor; bias is [C].
    pub fn add_bias(&mut self, x: &Tensor<F>, bias: &Tensor<F>) -> Result<Tensor<F>> {
        if x.rank() < 2 {
            return Err(TensorError::RankMismatch {
                op: "add_bias",
                expected: 2,
                got: x.rank(),
            });
        }
        let channels = x.shape()[1];
        if bias.shape() != [channels] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                axis: 0,
                expected: channels,
                got: bias.numel(),
            });
        }
        let spatial: usize = x.shape()[2..].iter().product();
        let mut values = x.values().to_vec();
        for b in 0..x.shape()[0] {
            for c in 0..channels {
                let base = (b * channels + c) * spatial;
                let bv = bias.values()[c];
                for v in &mut values[base..base + spatial] {
                    *v = *v + bv;
                }
            }
        }
        Ok(self.result(
            Op::AddBias(x.clone(), bias.clone()),
            x.shape().to_vec(),
            values,
        ))
    }

    /// Multiply a tensor by a one-element tensor (differentiable in both).
    pub fn mul_scalar(&mut self, x: &Tensor<F>, s: &Tensor<F>) -> Result<Tensor<F>> {
        if s.numel() != 1 {
            return Err(TensorError::NotScalar {
                op: "mul_scalar",
                numel: s.numel(),
            });
        }
        let sv = s.values()[0];
        let values = x.values().iter().map(|&v| v * sv).collect();
        Ok(self.result(
            Op::MulScalar(x.clone(), s.clone()),
            x.shape().to_vec(),
            values,
        ))
    }

    /// Extract element i of a flattened tensor as a one-element tensor.
    pub fn index(&mut self, x: &Tensor<F>, i: usize) -> Result<Tensor<F>> {
        if i >= x.numel() {
            return Err(TensorError::Invalid {
                op: "index",
                msg: format!("index {} out of range for {} elements", i, x.numel()),
            });
        }
        let values = vec![x.values()[i]];
        Ok(self.result(Op::Index(x.clone(), i), vec![1], values))
    }

    /// Contiguous slice [start, start+len) along one axis.
    pub fn narrow(
        &mut self,
        x: &Tensor<F>,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<Tensor<F>> {
        if axis >= x.rank() {
            return Err(TensorError::Invalid {
                op: "narrow",
                msg: format!("axis {} out of range for rank {}", axis, x.rank()),
            });
        }
        if start + len > x.shape()[axis] || len == 0 {
            return Err(TensorError::Invalid {
                op: "narrow",
                msg: format!(
                    "range {}..{} invalid for extent {}",
                    start,
                    start + len,
                    x.shape()[axis]
                ),
            });
        }
        let mut out_shape = x.shape().to_vec();
        out_shape[axis] = len;
        let values = copy_axis_range(x.shape(), x.values(), axis, start, len);
        Ok(self.result(
            Op::Narrow {
                input: x.clone(),
                axis,
                start,
                len,
            },
            out_shape,
            values,
        ))
    }

    /// Concatenate along an axis; all other extents must match.
    pub fn concat(&mut self, parts: &[Tensor<F>], axis: usize) -> Result<Tensor<F>> {
        if parts.is_empty() {
            return Err(TensorError::Invalid {
                op: "concat",
                msg: "no inputs".into(),
            });
        }
        let first = &parts[0];
        if axis >= first.rank() {
            return Err(TensorError::Invalid {
                op: "concat",
                msg: format!("axis {} out of range for rank {}", axis, first.rank()),
            });
        }
        let mut total = 0usize;
        for p in parts {
            if p.rank() != first.rank() {
                return Err(TensorError::RankMismatch {
                    op: "concat",
                    expected: first.rank(),
                    got: p.rank(),
                });
            }
            for (ax, (&ea, &eb)) in first.shape().iter().zip(p.shape()).enumerate() {
                if ax != axis && ea != eb {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat",
                        axis: ax,
                        expected: ea,
                        got: eb,
                    });
                }
            }
            total += p.shape()[axis];
        }
        let mut out_shape = first.shape().to_vec();
        out_shape[axis] = total;

        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let mut values = vec![F::zero(); outer * total * inner];
        let mut offset = 0usize;
        for p in parts {
            let ext = p.shape()[axis];
            for o in 0..outer {
                let src = &p.values()[o * ext * inner..(o + 1) * ext * inner];
                let dst_base = (o * total + offset) * inner;
                values[dst_base..dst_base + ext * inner].copy_from_slice(src);
            }
            offset += ext;
        }
        Ok(self.result(
            Op::Concat {
                inputs: parts.to_vec(),
                axis,
            },
            out_shape,
            values,
        ))
    }

    pub fn sum(&mut self, a: &Tensor<F>) -> Result<Tensor<F>> {
        let mut acc = F::zero();
        for &v in a.values() {
            acc = acc + v;
        }
        Ok(self.result(Op::Sum(a.clone()), vec![1], vec![acc]))
    }

    pub fn mean(&mut self, a: &Tensor<F>) -> Result<Tensor<F>> {
        let mut acc = F::zero();
        for &v in a.values() {
            acc = acc + v;
        }
        let m = acc / F::cast(a.numel() as f64);
        Ok(self.result(Op::Mean(a.clone()), vec![1], vec![m]))
    }

    /// Numerically stable softmax along one axis.
    pub fn softmax(&mut self, a: &Tensor<F>, axis: usize) -> Result<Tensor<F>> {
        if axis >= a.rank() {
            return Err(TensorError::Invalid {
                op: "softmax",
                msg: format!("axis {} out of range for rank {}", axis, a.rank()),
            });
        }
        if !a.all_finite() {
            return Err(TensorError::NonFinite { op: "softmax" });
        }
        let values = softmax_forward(a.shape(), axis, a.values());
        let out = Arc::new(values.clone());
        Ok(self.result(
            Op::Softmax {
                input: a.clone(),
                axis,
                output: out,
            },
            a.shape().to_vec(),
            values,
        ))
    }
}

pub(crate) fn softmax_forward<F: Scalar>(shape: &[usize], axis: usize, x: &[F]) -> Vec<F> {
    let m = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = vec![F::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * m * inner + j * inner + i;
            let mut mx = x[at(0)];
            for j in 1..m {
                if x[at(j)] > mx {
                    mx = x[at(j)];
                }
            }
            let mut denom = F::zero();
            for j in 0..m {
                let e = (x[at(j)] - mx).exp();
                out[at(j)] = e;
                denom = denom + e;
            }
            for j in 0..m {
                out[at(j)] = out[at(j)] / denom;
            }
        }
    }
    out
}

pub(crate) fn softmax_backward<F: Scalar>(
    shape: &[usize],
    axis: usize,
    p: &[F],
    grad: &[F],
) -> Vec<F> {
    let m = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut dx = vec![F::zero(); p.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * m * inner + j * inner + i;
            let mut dot = F::zero();
            for j in 0..m {
                dot = dot + grad[at(j)] * p[at(j)];
            }
            for j in 0..m {
                dx[at(j)] = p[at(j)] * (grad[at(j)] - dot);
            }
        }
    }
    dx
}

pub(crate) fn copy_axis_range<F: Scalar>(
    shape: &[usize],
    values: &[F],
    axis: usize,
    start: usize,
    len: usize,
) -> Vec<F> {
    let ext = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![F::zero(); outer * len * inner];
    for o in 0..outer {
        let src_base = (o * ext + start) * inner;
        let dst_base = o * len * inner;
        out[dst_base..dst_base + len * inner]
            .copy_from_slice(&values[src_base..src_base + len * inner]);
    }
    out
}

pub(crate) fn narrow_backward<F: Scalar>(
    in_shape: &[usize],
    axis: usize,
    start: usize,
    len: usize,
    grad: &[F],
) -> Vec<F> {
    let ext = in_shape[axis];
    let outer: usize = in_shape[..axis].iter().product();
    let inner: usize = in_shape[axis + 1..].iter().product();
    let mut dx = vec![F::zero(); outer * ext * inner];
    for o in 0..outer {
        let dst_base = (o * ext + start) * inner;
        let src_base = o * len * inner;
        dx[dst_base..dst_base + len * inner]
            .copy_from_slice(&grad[src_base..src_base + len * inner]);
    }
    dx
}

pub(crate) fn concat_backward<F: Scalar>(
    inputs: &[Tensor<F>],
    axis: usize,
    grad: &[F],
) -> Vec<Vec<F>> {
    let first = &inputs[0];
    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let total: usize = inputs.iter().map(|t| t.shape()[axis]).sum();
    let mut parts = Vec::with_capacity(inputs.len());
    let mut offset = 0usize;
    for t in inputs {
        let ext = t.shape()[axis];
        let mut dx = vec![F::zero(); t.numel()];
        for o in 0..outer {
            let src_base = (o * total + offset) * inner;
            let dst_base = o * ext * inner;
            dx[dst_base..dst_base + ext * inner]
                .copy_from_slice(&grad[src_base..src_base + ext * inner]);
        }
        offset += ext;
        parts.push(dx);
    }
    parts
}

/// Flat offset of a multi-index.
/// Iterate a multi-index in row-major order; returns false when exhausted.
pub(crate) fn next_index(idx: &mut [usize], shape: &[usize]) -> bool {
    for ax in (0..shape.len()).rev() {
        idx[ax] += 1;
        if idx[ax] < shape[ax] {
            return true;
        }
        idx[ax] = 0;
    }
    false
}


#[cfg(test)]
mod tests {
    use super::super::Tape;
    use super::*;

    #[test]
    fn softmax_equal_logits_is_uniform() {
        let mut tape = Tape::<f64>::new();
        let x = Tensor::new(vec![3], vec![0.7, 0.7, 0.7]).unwrap();
        let p = tape.softmax(&x, 0).unwrap();
        for &v in p.values() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_closed_form() {
        // logits (0, 0, ln 2) -> (0.25, 0.25, 0.5)
        let mut tape = Tape::<f64>::new();
        let x = Tensor::new(vec![3], vec![0.0, 0.0, 2.0f64.ln()]).unwrap();
        let p = tape.softmax(&x, 0).unwrap();
        assert!((p.values()[0] - 0.25).abs() < 1e-12);
        assert!((p.values()[1] - 0.25).abs() < 1e-12);
        assert!((p.values()[2] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariance_and_normalization() {
        let mut tape = Tape::<f64>::new();
        let x = Tensor::new(vec![4], vec![0.3, -1.2, 2.0, 0.0]).unwrap();
        let shifted = Tensor::new(vec![4], vec![100.3, 98.8, 102.0, 100.0]).unwrap();
        let p = tape.softmax(&x, 0).unwrap();
        let q = tape.softmax(&shifted, 0).unwrap();
        let sum: f64 = p.values().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        for (a, b) in p.values().iter().zip(q.values()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut tape = Tape::<f64>::new();
        let x = Tensor::new(vec![2], vec![f64::NAN, 0.0]).unwrap();
        assert!(tape.softmax(&x, 0).is_err());
    }

    #[test]
    fn softmax_over_middle_axis() {
        let mut tape = Tape::<f64>::new();
        let x = Tensor::new(vec![2, 2, 2], (0..8).map(|i| i as f64).collect()).unwrap();
        let p = tape.softmax(&x, 1).unwrap();
        // Each (outer, inner) pair sums to 1 over axis 1.
        for o in 0..2 {
            for i in 0..2 {
                let s = p.values()[o * 4 + i] + p.values()[o * 4 + 2 + i];
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn concat_and_narrow_round_trip() {
        let mut tape = Tape::<f64>::new();
        let a = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![1, 1, 2], vec![5.0, 6.0]).unwrap();
        let c = tape.concat(&[a.clone(), b], 1).unwrap();
        assert_eq!(c.shape(), &[1, 3, 2]);
        assert_eq!(c.values(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let back = tape.narrow(&c, 1, 0, 2).unwrap();
        assert!(back.bit_eq(&a));
    }

    #[test]
    fn concat_shape_mismatch_names_axis() {
        let mut tape = Tape::<f64>::new();
        let a = Tensor::<f64>::zeros(&[1, 2, 2]);
        let b = Tensor::<f64>::zeros(&[1, 2, 3]);
        match tape.concat(&[a, b], 1) {
            Err(TensorError::ShapeMismatch { axis, .. }) => assert_eq!(axis, 2),
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn xlogx_zero_is_zero() {
        let mut tape = Tape::<f64>::new();
        let x = Tensor::new(vec![3], vec![0.0, 1.0, 0.5]).unwrap();
        let y = tape.xlogx(&x).unwrap();
        assert_eq!(y.values()[0], 0.0);
        assert_eq!(y.values()[1], 0.0);
        assert!((y.values()[2] - 0.5 * 0.5f64.ln()).abs() < 1e-15);
        let neg = Tensor::new(vec![1], vec![-0.1]).unwrap();
        assert!(tape.xlogx(&neg).is_err());
    }

    #[test]
    fn add_bias_broadcasts_per_channel() {
        let mut tape = Tape::<f64>::new();
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, 1.0, 2.0, 2.0]).unwrap();
        let b = Tensor::new(vec![2], vec![10.0, 20.0]).unwrap();
        let y = tape.add_bias(&x, &b).unwrap();
        assert_eq!(y.values(), &[11.0, 11.0, 22.0, 22.0]);
    }

    #[test]
    fn mean_of_constant() {
        let mut tape = Tape::<f64>::new();
        let x = Tensor::<f64>::full(&[3, 5], 2.5);
        let m = tape.mean(&x).unwrap();
        assert!((m.item().unwrap() - 2.5).abs() < 1e-15);
    }
}
