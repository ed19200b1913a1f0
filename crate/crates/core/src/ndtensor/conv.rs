//! N-dimensional cross-correlation with zero padding, implemented as
//! im2col + GEMM. Covers plain, atrous (dilation > 1), strided, grouped,
//! and depthwise convolutions; separable conv is the depthwise/pointwise
//! composition.

use super::basic::next_index;
use super::tape::{Op, Tape};
use super::{Result, Scalar, Tensor, TensorError};

/// Zero-padding policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    /// Output extent = ceil(in / stride); at stride 1 the spatial extents
    /// are preserved.
    Same,
    /// No padding; output extent = floor((in - eff_kernel) / stride) + 1.
    Valid,
}

/// Geometry of one convolution: kernel extents, dilation, stride, groups,
/// padding mode. Kernel extents must match the weight tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: Vec<usize>,
    pub dilation: Vec<usize>,
    pub stride: Vec<usize>,
    pub groups: usize,
    pub pad: PadMode,
}

impl ConvSpec {
    /// Dense stride-1 "same" convolution with the given kernel extents.
    pub fn same(kernel: &[usize]) -> Self {
        Self {
            kernel: kernel.to_vec(),
            dilation: vec![1; kernel.len()],
            stride: vec![1; kernel.len()],
            groups: 1,
            pad: PadMode::Same,
        }
    }

    /// Cubic kernel of extent `k` in `dims` spatial dimensions.
    pub fn cube(k: usize, dims: usize) -> Self {
        Self::same(&vec![k; dims])
    }

    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.dilation = vec![dilation; self.kernel.len()];
        self
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = vec![stride; self.kernel.len()];
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn with_pad(mut self, pad: PadMode) -> Self {
        self.pad = pad;
        self
    }

    fn effective_kernel(&self, axis: usize) -> usize {
        (self.kernel[axis] - 1) * self.dilation[axis] + 1
    }

    /// Output spatial extents for the given input extents.
    pub fn out_extents(&self, in_spatial: &[usize]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(in_spatial.len());
        for (a, &s) in in_spatial.iter().enumerate() {
            let eff = self.effective_kernel(a);
            let o = match self.pad {
                PadMode::Same => s.div_ceil(self.stride[a]),
                PadMode::Valid => {
                    if s < eff {
                        return Err(TensorError::Invalid {
                            op: "conv_nd",
                            msg: format!(
                                "axis {a}: input extent {s} smaller than effective kernel {eff} with valid padding"
                            ),
                        });
                    }
                    (s - eff) / self.stride[a] + 1
                }
            };
            out.push(o);
        }
        Ok(out)
    }

    /// Low-side zero padding per spatial axis.
    fn pad_lo(&self, in_spatial: &[usize], out_spatial: &[usize]) -> Vec<isize> {
        match self.pad {
            PadMode::Valid => vec![0; in_spatial.len()],
            PadMode::Same => in_spatial
                .iter()
                .zip(out_spatial)
                .enumerate()
                .map(|(a, (&s, &o))| {
                    let eff = self.effective_kernel(a);
                    let total = ((o - 1) * self.stride[a] + eff).saturating_sub(s);
                    (total / 2) as isize
                })
                .collect(),
        }
    }

    fn validate(&self, input: &[usize], weight: &[usize]) -> Result<()> {
        let d = self.kernel.len();
        if input.len() != d + 2 {
            return Err(TensorError::RankMismatch {
                op: "conv_nd",
                expected: d + 2,
                got: input.len(),
            });
        }
        if weight.len() != d + 2 {
            return Err(TensorError::RankMismatch {
                op: "conv_nd",
                expected: d + 2,
                got: weight.len(),
            });
        }
        if self.dilation.len() != d || self.stride.len() != d {
            return Err(TensorError::Invalid {
                op: "conv_nd",
                msg: "dilation/stride rank must match kernel rank".into(),
            });
        }
        for a in 0..d {
            if self.kernel[a] == 0 || self.dilation[a] == 0 || self.stride[a] == 0 {
                return Err(TensorError::Invalid {
                    op: "conv_nd",
                    msg: format!("axis {a}: kernel, dilation and stride must be >= 1"),
                });
            }
            if weight[2 + a] != self.kernel[a] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv_nd",
                    axis: 2 + a,
                    expected: self.kernel[a],
                    got: weight[2 + a],
                });
            }
            if input[2 + a] == 0 {
                return Err(TensorError::ZeroExtent {
                    op: "conv_nd",
                    axis: 2 + a,
                });
            }
        }
        let cin = input[1];
        let cout = weight[0];
        if self.groups == 0 || cin % self.groups != 0 || cout % self.groups != 0 {
            return Err(TensorError::Invalid {
                op: "conv_nd",
                msg: format!(
                    "groups {} must divide both input channels {} and output channels {}",
                    self.groups, cin, cout
                ),
            });
        }
        if weight[1] != cin / self.groups {
            return Err(TensorError::ShapeMismatch {
                op: "conv_nd",
                axis: 1,
                expected: cin / self.groups,
                got: weight[1],
            });
        }
        Ok(())
    }
}

impl<F: Scalar> Tape<F> {
    /// Cross-correlation of `input` [B, Cin, S...] with `weight`
    /// [Cout, Cin/groups, K...]; zero padding per `spec.pad`.
    pub fn conv_nd(
        &mut self,
        input: &Tensor<F>,
        weight: &Tensor<F>,
        spec: &ConvSpec,
    ) -> Result<Tensor<F>> {
        spec.validate(input.shape(), weight.shape())?;
        let out_spatial = spec.out_extents(input.spatial())?;
        let values = conv_forward(input, weight, spec, &out_spatial);
        let mut out_shape = vec![input.batch(), weight.shape()[0]];
        out_shape.extend_from_slice(&out_spatial);
        Ok(self.result(
            Op::Conv {
                input: input.clone(),
                weight: weight.clone(),
                spec: spec.clone(),
                out_spatial,
            },
            out_shape,
            values,
        ))
    }

    /// Depthwise conv (groups = Cin) followed by a 1x1 pointwise conv.
    /// `depthwise` is [Cin, 1, K...], `pointwise` is [Cout, Cin, 1...].
    pub fn separable_conv_nd(
        &mut self,
        input: &Tensor<F>,
        depthwise: &Tensor<F>,
        pointwise: &Tensor<F>,
        spec: &ConvSpec,
    ) -> Result<Tensor<F>> {
        let cin = input.channels();
        if depthwise.shape()[0] != cin || depthwise.shape()[1] != 1 {
            return Err(TensorError::Invalid {
                op: "separable_conv_nd",
                msg: format!(
                    "depthwise weight must be [Cin, 1, K...], got {:?} for Cin = {cin}",
                    depthwise.shape()
                ),
            });
        }
        if pointwise.shape()[2..].iter().any(|&k| k != 1) {
            return Err(TensorError::Invalid {
                op: "separable_conv_nd",
                msg: format!(
                    "pointwise kernel extents must all be 1, got {:?}",
                    pointwise.shape()
                ),
            });
        }
        let dw_spec = ConvSpec {
            groups: cin,
            ..spec.clone()
        };
        let mid = self.conv_nd(input, depthwise, &dw_spec)?;
        let d = spec.kernel.len();
        let pw_spec = ConvSpec::same(&vec![1; d]);
        self.conv_nd(&mid, pointwise, &pw_spec)
    }
}

/// One batch-and-group im2col patch matrix: rows = output positions,
/// columns = (channel within group, kernel offset).
#[allow(clippy::too_many_arguments)]
fn im2col<F: Scalar>(
    input: &[F],
    in_spatial: &[usize],
    cg: usize,
    spec: &ConvSpec,
    out_spatial: &[usize],
    pad_lo: &[isize],
    cols: &mut [F],
) {
    let d = in_spatial.len();
    let rows: usize = out_spatial.iter().product();
    let kvol: usize = spec.kernel.iter().product();
    let in_vol: usize = in_spatial.iter().product();
    debug_assert_eq!(cols.len(), rows * cg * kvol);
    debug_assert_eq!(input.len(), cg * in_vol);

    let in_strides = super::strides_of(in_spatial);
    let mut out_idx = vec![0usize; d];
    let mut row = 0usize;
    loop {
        let row_base = row * cg * kvol;
        let mut kidx = vec![0usize; d];
        let mut kflat = 0usize;
        loop {
            // Source position for this kernel offset; usize::MAX marks padding.
            let mut src = 0usize;
            let mut ok = true;
            for a in 0..d {
                let p = out_idx[a] as isize * spec.stride[a] as isize - pad_lo[a]
                    + (kidx[a] * spec.dilation[a]) as isize;
                if p < 0 || p >= in_spatial[a] as isize {
                    ok = false;
                    break;
                }
                src += p as usize * in_strides[a];
            }
            for c in 0..cg {
                cols[row_base + c * kvol + kflat] = if ok {
                    input[c * in_vol + src]
                } else {
                    F::zero()
                };
            }
            kflat += 1;
            if !next_index(&mut kidx, &spec.kernel) {
                break;
            }
        }
        row += 1;
        if !next_index(&mut out_idx, out_spatial) {
            break;
        }
    }
}

/// Scatter-add of a patch-matrix gradient back onto the input layout.
#[allow(clippy::too_many_arguments)]
fn col2im<F: Scalar>(
    dcols: &[F],
    in_spatial: &[usize],
    cg: usize,
    spec: &ConvSpec,
    out_spatial: &[usize],
    pad_lo: &[isize],
    dinput: &mut [F],
) {
    let d = in_spatial.len();
    let kvol: usize = spec.kernel.iter().product();
    let in_vol: usize = in_spatial.iter().product();
    let in_strides = super::strides_of(in_spatial);
    let mut out_idx = vec![0usize; d];
    let mut row = 0usize;
    loop {
        let row_base = row * cg * kvol;
        let mut kidx = vec![0usize; d];
        let mut kflat = 0usize;
        loop {
            let mut src = 0usize;
            let mut ok = true;
            for a in 0..d {
                let p = out_idx[a] as isize * spec.stride[a] as isize - pad_lo[a]
                    + (kidx[a] * spec.dilation[a]) as isize;
                if p < 0 || p >= in_spatial[a] as isize {
                    ok = false;
                    break;
                }
                src += p as usize * in_strides[a];
            }
            if ok {
                for c in 0..cg {
                    let t = c * in_vol + src;
                    dinput[t] = dinput[t] + dcols[row_base + c * kvol + kflat];
                }
            }
            kflat += 1;
            if !next_index(&mut kidx, &spec.kernel) {
                break;
            }
        }
        row += 1;
        if !next_index(&mut out_idx, out_spatial) {
            break;
        }
    }
}

pub(crate) fn conv_forward<F: Scalar>(
    input: &Tensor<F>,
    weight: &Tensor<F>,
    spec: &ConvSpec,
    out_spatial: &[usize],
) -> Vec<F> {
    let batch = input.batch();
    let cin = input.channels();
    let cout = weight.shape()[0];
    let groups = spec.groups;
    let cg = cin / groups;
    let cout_g = cout / groups;
    let in_spatial = input.spatial();
    let in_vol: usize = in_spatial.iter().product();
    let rows: usize = out_spatial.iter().product();
    let kvol: usize = spec.kernel.iter().product();
    let ck = cg * kvol;
    let pad_lo = spec.pad_lo(in_spatial, out_spatial);

    let mut out = vec![F::zero(); batch * cout * rows];
    let mut cols = vec![F::zero(); rows * ck];
    for b in 0..batch {
        for g in 0..groups {
            let in_base = (b * cin + g * cg) * in_vol;
            im2col(
                &input.values()[in_base..in_base + cg * in_vol],
                in_spatial,
                cg,
                spec,
                out_spatial,
                &pad_lo,
                &mut cols,
            );
            // out[pos, co] = cols[pos, ck] . weight_g[co, ck]^T
            let w_base = g * cout_g * ck;
            let o_base = (b * cout + g * cout_g) * rows;
            F::gemm_strided(
                rows,
                ck,
                cout_g,
                F::one(),
                &cols,
                ck as isize,
                1,
                &weight.values()[w_base..w_base + cout_g * ck],
                1,
                ck as isize,
                F::zero(),
                &mut out[o_base..o_base + cout_g * rows],
                1,
                rows as isize,
            );
        }
    }
    out
}

pub(crate) fn conv_backward_input<F: Scalar>(
    input: &Tensor<F>,
    weight: &Tensor<F>,
    spec: &ConvSpec,
    out_spatial: &[usize],
    grad: &[F],
) -> Vec<F> {
    let batch = input.batch();
    let cin = input.channels();
    let cout = weight.shape()[0];
    let groups = spec.groups;
    let cg = cin / groups;
    let cout_g = cout / groups;
    let in_spatial = input.spatial();
    let in_vol: usize = in_spatial.iter().product();
    let rows: usize = out_spatial.iter().product();
    let kvol: usize = spec.kernel.iter().product();
    let ck = cg * kvol;
    let pad_lo = spec.pad_lo(in_spatial, out_spatial);

    let mut dinput = vec![F::zero(); input.numel()];
    let mut dcols = vec![F::zero(); rows * ck];
    for b in 0..batch {
        for g in 0..groups {
            // dcols[pos, ck] = grad[pos, co] . weight_g[co, ck]
            let w_base = g * cout_g * ck;
            let o_base = (b * cout + g * cout_g) * rows;
            F::gemm_strided(
                rows,
                cout_g,
                ck,
                F::one(),
                &grad[o_base..o_base + cout_g * rows],
                1,
                rows as isize,
                &weight.values()[w_base..w_base + cout_g * ck],
                ck as isize,
                1,
                F::zero(),
                &mut dcols,
                ck as isize,
                1,
            );
            let in_base = (b * cin + g * cg) * in_vol;
            col2im(
                &dcols,
                in_spatial,
                cg,
                spec,
                out_spatial,
                &pad_lo,
                &mut dinput[in_base..in_base + cg * in_vol],
            );
        }
    }
    dinput
}

pub(crate) fn conv_backward_weight<F: Scalar>(
    input: &Tensor<F>,
    weight: &Tensor<F>,
    spec: &ConvSpec,
    out_spatial: &[usize],
    grad: &[F],
) -> Vec<F> {
    let batch = input.batch();
    let cin = input.channels();
    let cout = weight.shape()[0];
    let groups = spec.groups;
    let cg = cin / groups;
    let cout_g = cout / groups;
    let in_spatial = input.spatial();
    let in_vol: usize = in_spatial.iter().product();
    let rows: usize = out_spatial.iter().product();
    let kvol: usize = spec.kernel.iter().product();
    let ck = cg * kvol;
    let pad_lo = spec.pad_lo(in_spatial, out_spatial);

    let mut dweight = vec![F::zero(); weight.numel()];
    let mut cols = vec![F::zero(); rows * ck];
    for b in 0..batch {
        for g in 0..groups {
            let in_base = (b * cin + g * cg) * in_vol;
            im2col(
                &input.values()[in_base..in_base + cg * in_vol],
                in_spatial,
                cg,
                spec,
                out_spatial,
                &pad_lo,
                &mut cols,
            );
            // dW_g[co, ck] += grad[co, pos] . cols[pos, ck]
            let w_base = g * cout_g * ck;
            let o_base = (b * cout + g * cout_g) * rows;
            F::gemm_strided(
                cout_g,
                rows,
                ck,
                F::one(),
                &grad[o_base..o_base + cout_g * rows],
                rows as isize,
                1,
                &cols,
                ck as isize,
                1,
                F::one(),
                &mut dweight[w_base..w_base + cout_g * ck],
                ck as isize,
                1,
            );
        }
    }
    dweight
}

#[cfg(test)]
mod tests {
    use super::super::Tape;
    use super::*;

    /// Direct quadruple-loop cross-correlation oracle (independent of the
    /// im2col/GEMM path).
    fn conv2d_oracle(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        stride: usize,
        dilation: usize,
    ) -> Vec<f64> {
        let (b_n, cin, h, wd) = (x.batch(), x.channels(), x.spatial()[0], x.spatial()[1]);
        let (cout, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
        let oh = h.div_ceil(stride);
        let ow = wd.div_ceil(stride);
        let eff_h = (kh - 1) * dilation + 1;
        let eff_w = (kw - 1) * dilation + 1;
        let pad_h = (((oh - 1) * stride + eff_h).saturating_sub(h) / 2) as isize;
        let pad_w = (((ow - 1) * stride + eff_w).saturating_sub(wd) / 2) as isize;
        let mut out = vec![0.0; b_n * cout * oh * ow];
        for b in 0..b_n {
            for co in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let y = oy as isize * stride as isize - pad_h
                                        + (ky * dilation) as isize;
                                    let xx = ox as isize * stride as isize - pad_w
                                        + (kx * dilation) as isize;
                                    if y < 0 || y >= h as isize || xx < 0 || xx >= wd as isize {
                                        continue;
                                    }
                                    let xi = ((b * cin + ci) * h + y as usize) * wd + xx as usize;
                                    let wi = ((co * cin + ci) * kh + ky) * kw + kx;
                                    acc += x.values()[xi] * w.values()[wi];
                                }
                            }
                        }
                        out[((b * cout + co) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn seeded(shape: &[usize], seed: u64) -> Tensor<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn pointwise_identity_passes_input_through() {
        // 1x1 conv with identity channel mapping.
        let mut tape = Tape::<f64>::new();
        let x = seeded(&[1, 3, 4, 4], 7);
        let mut wv = vec![0.0; 9];
        for c in 0..3 {
            wv[c * 3 + c] = 1.0;
        }
        let w = Tensor::new(vec![3, 3, 1, 1], wv).unwrap();
        let y = tape.conv_nd(&x, &w, &ConvSpec::cube(1, 2)).unwrap();
        assert!(y.bit_eq(&x.detach()) || y.values() == x.values());
    }

    #[test]
    fn sum_one_kernel_preserves_constant_interior() {
        let mut tape = Tape::<f64>::new();
        let x = Tensor::<f64>::full(&[1, 1, 7, 7], 3.25);
        let w = Tensor::new(vec![1, 1, 3, 3], vec![1.0 / 9.0; 9]).unwrap();
        let y = tape.conv_nd(&x, &w, &ConvSpec::cube(3, 2)).unwrap();
        // Interior (away from the zero-padded border) stays at the constant.
        for oy in 1..6 {
            for ox in 1..6 {
                let v = y.values()[oy * 7 + ox];
                assert!((v - 3.25).abs() < 1e-12, "at ({oy},{ox}): {v}");
            }
        }
    }

    #[test]
    fn matches_direct_loop_oracle() {
        let mut tape = Tape::<f64>::new();
        let x = seeded(&[1, 3, 5, 5], 13);
        let w = seeded(&[2, 3, 3, 3], 14);
        let y = tape.conv_nd(&x, &w, &ConvSpec::cube(3, 2)).unwrap();
        let expect = conv2d_oracle(&x, &w, 1, 1);
        for (a, e) in y.values().iter().zip(&expect) {
            let rel = (a - e).abs() / e.abs().max(1e-9);
            assert!(rel <= 1e-6, "{a} vs {e}");
        }
    }

    #[test]
    fn dilated_and_strided_match_oracle() {
        for (stride, dilation, seed) in [(1usize, 2usize, 21u64), (2, 1, 22), (2, 2, 23)] {
            let mut tape = Tape::<f64>::new();
            let x = seeded(&[2, 2, 9, 8], seed);
            let w = seeded(&[3, 2, 3, 3], seed + 100);
            let spec = ConvSpec::cube(3, 2)
                .with_stride(stride)
                .with_dilation(dilation);
            let y = tape.conv_nd(&x, &w, &spec).unwrap();
            let expect = conv2d_oracle(&x, &w, stride, dilation);
            assert_eq!(y.values().len(), expect.len());
            for (a, e) in y.values().iter().zip(&expect) {
                assert!((a - e).abs() <= 1e-9 * (1.0 + e.abs()), "{a} vs {e}");
            }
        }
    }

    #[test]
    fn dilation_equals_zero_inflated_kernel() {
        // Atrous conv with dilation 2 == plain conv with the kernel spread
        // onto a 5x5 grid with zeros in between.
        let mut tape = Tape::<f64>::new();
        let x = seeded(&[1, 2, 8, 8], 31);
        let w = seeded(&[2, 2, 3, 3], 32);
        let atrous = tape
            .conv_nd(&x, &w, &ConvSpec::cube(3, 2).with_dilation(2))
            .unwrap();
        let mut inflated = vec![0.0; 2 * 2 * 5 * 5];
        for co in 0..2 {
            for ci in 0..2 {
                for ky in 0..3 {
                    for kx in 0..3 {
                        inflated[((co * 2 + ci) * 5 + ky * 2) * 5 + kx * 2] =
                            w.values()[((co * 2 + ci) * 3 + ky) * 3 + kx];
                    }
                }
            }
        }
        let w5 = Tensor::new(vec![2, 2, 5, 5], inflated).unwrap();
        let plain = tape.conv_nd(&x, &w5, &ConvSpec::cube(5, 2)).unwrap();
        for (a, e) in atrous.values().iter().zip(plain.values()) {
            assert!((a - e).abs() <= 1e-12);
        }
    }

    #[test]
    fn grouped_conv_is_blockwise() {
        // groups=2 equals two independent convs on channel halves.
        let mut tape = Tape::<f64>::new();
        let x = seeded(&[1, 4, 6, 6], 41);
        let w = seeded(&[4, 2, 3, 3], 42);
        let spec = ConvSpec::cube(3, 2).with_groups(2);
        let y = tape.conv_nd(&x, &w, &spec).unwrap();

        let x0 = tape.narrow(&x, 1, 0, 2).unwrap();
        let x1 = tape.narrow(&x, 1, 2, 2).unwrap();
        let w0 = tape.narrow(&w, 0, 0, 2).unwrap();
        let w1 = tape.narrow(&w, 0, 2, 2).unwrap();
        let y0 = tape.conv_nd(&x0, &w0, &ConvSpec::cube(3, 2)).unwrap();
        let y1 = tape.conv_nd(&x1, &w1, &ConvSpec::cube(3, 2)).unwrap();
        let yy = tape.concat(&[y0, y1], 1).unwrap();
        for (a, e) in y.values().iter().zip(yy.values()) {
            assert!((a - e).abs() <= 1e-12);
        }
    }

    #[test]
    fn conv3d_shape_and_constant() {
        let mut tape = Tape::<f64>::new();
        let x = Tensor::<f64>::full(&[1, 1, 5, 5, 5], 1.0);
        let w = Tensor::new(vec![1, 1, 3, 3, 3], vec![1.0 / 27.0; 27]).unwrap();
        let y = tape.conv_nd(&x, &w, &ConvSpec::cube(3, 3)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 5, 5, 5]);
        let center = y.values()[(2 * 5 + 2) * 5 + 2];
        assert!((center - 1.0).abs() < 1e-12);
    }

    #[test]
    fn separable_delta_identity() {
        // Depthwise delta kernel + pointwise channel identity => input.
        let mut tape = Tape::<f64>::new();
        let x = seeded(&[1, 2, 5, 5], 51);
        let mut dwv = vec![0.0; 2 * 9];
        dwv[4] = 1.0;
        dwv[9 + 4] = 1.0;
        let dw = Tensor::new(vec![2, 1, 3, 3], dwv).unwrap();
        let mut pwv = vec![0.0; 4];
        pwv[0] = 1.0;
        pwv[3] = 1.0;
        let pw = Tensor::new(vec![2, 2, 1, 1], pwv).unwrap();
        let y = tape
            .separable_conv_nd(&x, &dw, &pw, &ConvSpec::cube(3, 2))
            .unwrap();
        for (a, e) in y.values().iter().zip(x.values()) {
            assert!((a - e).abs() <= 1e-12);
        }
    }

    #[test]
    fn separable_equals_explicit_composition() {
        let mut tape = Tape::<f64>::new();
        let x = seeded(&[1, 3, 6, 6], 61);
        let dw = seeded(&[3, 1, 3, 3], 62);
        let pw = seeded(&[4, 3, 1, 1], 63);
        let spec = ConvSpec::cube(3, 2);
        let y = tape.separable_conv_nd(&x, &dw, &pw, &spec).unwrap();
        let mid = tape
            .conv_nd(&x, &dw, &spec.clone().with_groups(3))
            .unwrap();
        let y2 = tape.conv_nd(&mid, &pw, &ConvSpec::cube(1, 2)).unwrap();
        assert!(y.values() == y2.values());
    }

    #[test]
    fn separable_parameter_count_arithmetic() {
        // Cin = Cout = 8, 2D, K = 3: separable = 8*9 + 8*8 = 136 < dense 576.
        let dw = Tensor::<f64>::zeros(&[8, 1, 3, 3]);
        let pw = Tensor::<f64>::zeros(&[8, 8, 1, 1]);
        let dense = Tensor::<f64>::zeros(&[8, 8, 3, 3]);
        assert_eq!(dw.numel() + pw.numel(), 136);
        assert_eq!(dense.numel(), 576);
    }

    #[test]
    fn shape_errors_name_the_axis() {
        let mut tape = Tape::<f64>::new();
        let x = Tensor::<f64>::zeros(&[1, 4, 5, 5]);
        let w = Tensor::<f64>::zeros(&[2, 3, 3, 3]);
        match tape.conv_nd(&x, &w, &ConvSpec::cube(3, 2)) {
            Err(TensorError::ShapeMismatch { axis, .. }) => assert_eq!(axis, 1),
            other => panic!("expected shape mismatch, got {other:?}"),
        }
        let z = Tensor::<f64>::new(vec![1, 1, 0, 5], vec![]).unwrap();
        let w1 = Tensor::<f64>::zeros(&[1, 1, 3, 3]);
        assert!(matches!(
            tape.conv_nd(&z, &w1, &ConvSpec::cube(3, 2)),
            Err(TensorError::ZeroExtent { axis: 2, .. })
        ));
    }
}
