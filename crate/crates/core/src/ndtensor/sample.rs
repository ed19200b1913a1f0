//! Coordinate sampling: multilinear/nearest gather at absolute voxel
//! coordinates (clamped to the boundary), and linear resampling driven by
//! an align-corners grid.

use super::tape::{Op, Tape};
use super::{strides_of, Result, Scalar, Tensor, TensorError};

/// Interpolation mode for [`Tape::grid_sample`] and warping.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    /// Multilinear interpolation; differentiable in input and coords.
    Linear,
    /// Nearest neighbour; half-integer coordinates round toward the lower
    /// index. Differentiable in input only (coords get zero gradient).
    Nearest,
}

impl<F: Scalar> Tape<F> {
    /// Sample `input` [B, C, S...] at absolute voxel coordinates
    /// `coords` [B, d, T...]; out-of-domain coordinates clamp to the edge.
    pub fn grid_sample(
        &mut self,
        input: &Tensor<F>,
        coords: &Tensor<F>,
        mode: SampleMode,
    ) -> Result<Tensor<F>> {
        let d = input.rank() - 2;
        if coords.rank() != d + 2 {
            return Err(TensorError::RankMismatch {
                op: "grid_sample",
                expected: d + 2,
                got: coords.rank(),
            });
        }
        if coords.shape()[1] != d {
            return Err(TensorError::ShapeMismatch {
                op: "grid_sample",
                axis: 1,
                expected: d,
                got: coords.shape()[1],
            });
        }
        if coords.batch() != input.batch() {
            return Err(TensorError::ShapeMismatch {
                op: "grid_sample",
                axis: 0,
                expected: input.batch(),
                got: coords.batch(),
            });
        }
        let values = grid_sample_forward(input, coords, mode);
        let mut out_shape = vec![input.batch(), input.channels()];
        out_shape.extend_from_slice(&coords.shape()[2..]);
        Ok(self.result(
            Op::GridSample {
                input: input.clone(),
                coords: coords.clone(),
                mode,
            },
            out_shape,
            values,
        ))
    }

    /// Multilinear rescale to `target` spatial extents (align-corners
    /// convention: first and last samples map onto each other exactly).
    pub fn resample_linear(&mut self, input: &Tensor<F>, target: &[usize]) -> Result<Tensor<F>> {
        let d = input.rank() - 2;
        if target.len() != d {
            return Err(TensorError::RankMismatch {
                op: "resample_linear",
                expected: d,
                got: target.len(),
            });
        }
        for (a, &t) in target.iter().enumerate() {
            if t == 0 {
                return Err(TensorError::ZeroExtent {
                    op: "resample_linear",
                    axis: 2 + a,
                });
            }
        }
        let coords = resample_grid::<F>(input.batch(), input.spatial(), target);
        self.grid_sample(input, &coords, SampleMode::Linear)
    }
}

/// Identity coordinate grid: channel a holds the voxel coordinate along
/// spatial axis a. Adding a displacement to this grid gives absolute
/// sampling coordinates for [`Tape::grid_sample`].
pub fn identity_grid<F: Scalar>(batch: usize, spatial: &[usize]) -> Tensor<F> {
    let d = spatial.len();
    let vol: usize = spatial.iter().product();
    let mut values = vec![F::zero(); batch * d * vol];
    let strides = strides_of(spatial);
    for b in 0..batch {
        for a in 0..d {
            let base = (b * d + a) * vol;
            for pos in 0..vol {
                let coord = (pos / strides[a]) % spatial[a];
                values[base + pos] = F::cast(coord as f64);
            }
        }
    }
    let mut shape = vec![batch, d];
    shape.extend_from_slice(spatial);
    Tensor::new(shape, values).expect("grid shape consistent")
}

fn resample_grid<F: Scalar>(batch: usize, in_spatial: &[usize], target: &[usize]) -> Tensor<F> {
    let d = target.len();
    let vol: usize = target.iter().product();
    let strides = strides_of(target);
    let mut values = vec![F::zero(); batch * d * vol];
    for b in 0..batch {
        for a in 0..d {
            let scale = if target[a] <= 1 {
                0.0
            } else {
                (in_spatial[a] - 1) as f64 / (target[a] - 1) as f64
            };
            let base = (b * d + a) * vol;
            for pos in 0..vol {
                let i = (pos / strides[a]) % target[a];
                values[base + pos] = F::cast(i as f64 * scale);
            }
        }
    }
    let mut shape = vec![batch, d];
    shape.extend_from_slice(target);
    Tensor::new(shape, values).expect("grid shape consistent")
}

fn clamp_coord<F: Scalar>(c: F, extent: usize) -> F {
    let hi = F::cast((extent - 1) as f64);
    if c < F::zero() {
        F::zero()
    } else if c > hi {
        hi
    } else {
        c
    }
}

fn grid_sample_forward<F: Scalar>(
    input: &Tensor<F>,
    coords: &Tensor<F>,
    mode: SampleMode,
) -> Vec<F> {
    let batch = input.batch();
    let channels = input.channels();
    let d = input.rank() - 2;
    let in_spatial = input.spatial();
    let in_vol: usize = in_spatial.iter().product();
    let in_strides = strides_of(in_spatial);
    let out_vol: usize = coords.shape()[2..].iter().product();

    let mut out = vec![F::zero(); batch * channels * out_vol];
    let xv = input.values();
    let cv = coords.values();
    let corners = 1usize << d;
    let mut lo = vec![0usize; d];
    let mut hi = vec![0usize; d];
    let mut frac = vec![F::zero(); d];

    for b in 0..batch {
        let cbase = b * d * out_vol;
        for pos in 0..out_vol {
            match mode {
                SampleMode::Nearest => {
                    let mut src = 0usize;
                    for a in 0..d {
                        let c = clamp_coord(cv[cbase + a * out_vol + pos], in_spatial[a]);
                        // Ties at half-integers round toward the lower index.
                        let idx = (c - F::cast(0.5)).ceil().as_f64() as usize;
                        src += idx.min(in_spatial[a] - 1) * in_strides[a];
                    }
                    for c in 0..channels {
                        out[(b * channels + c) * out_vol + pos] =
                            xv[(b * channels + c) * in_vol + src];
                    }
                }
                SampleMode::Linear => {
                    for a in 0..d {
                        let c = clamp_coord(cv[cbase + a * out_vol + pos], in_spatial[a]);
                        let l = c.floor();
                        let li = l.as_f64() as usize;
                        lo[a] = li.min(in_spatial[a] - 1);
                        hi[a] = (lo[a] + 1).min(in_spatial[a] - 1);
                        frac[a] = c - F::cast(lo[a] as f64);
                    }
                    for ch in 0..channels {
                        let ibase = (b * channels + ch) * in_vol;
                        let mut acc = F::zero();
                        for corner in 0..corners {
                            let mut w = F::one();
                            let mut src = 0usize;
                            for a in 0..d {
                                if corner >> a & 1 == 1 {
                                    w = w * frac[a];
                                    src += hi[a] * in_strides[a];
                                } else {
                                    w = w * (F::one() - frac[a]);
                                    src += lo[a] * in_strides[a];
                                }
                            }
                            acc = acc + w * xv[ibase + src];
                        }
                        out[(b * channels + ch) * out_vol + pos] = acc;
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::type_complexity)]
pub(crate) fn grid_sample_backward<F: Scalar>(
    input: &Tensor<F>,
    coords: &Tensor<F>,
    mode: SampleMode,
    grad: &[F],
    want_dinput: bool,
    want_dcoords: bool,
) -> (Option<Vec<F>>, Option<Vec<F>>) {
    let batch = input.batch();
    let channels = input.channels();
    let d = input.rank() - 2;
    let in_spatial = input.spatial();
    let in_vol: usize = in_spatial.iter().product();
    let in_strides = strides_of(in_spatial);
    let out_vol: usize = coords.shape()[2..].iter().product();

    let mut dinput = want_dinput.then(|| vec![F::zero(); input.numel()]);
    let mut dcoords = want_dcoords.then(|| vec![F::zero(); coords.numel()]);
    let xv = input.values();
    let cv = coords.values();
    let corners = 1usize << d;
    let mut lo = vec![0usize; d];
    let mut hi = vec![0usize; d];
    let mut frac = vec![F::zero(); d];
    let mut interior = vec![false; d];

    for b in 0..batch {
        let cbase = b * d * out_vol;
        for pos in 0..out_vol {
            match mode {
                SampleMode::Nearest => {
                    if let Some(dx) = dinput.as_mut() {
                        let mut src = 0usize;
                        for a in 0..d {
                            let c = clamp_coord(cv[cbase + a * out_vol + pos], in_spatial[a]);
                            let idx = (c - F::cast(0.5)).ceil().as_f64() as usize;
                            src += idx.min(in_spatial[a] - 1) * in_strides[a];
                        }
                        for ch in 0..channels {
                            let t = (b * channels + ch) * in_vol + src;
                            dx[t] = dx[t] + grad[(b * channels + ch) * out_vol + pos];
                        }
                    }
                    // Nearest sampling is piecewise constant in the
                    // coordinates: zero gradient.
                }
                SampleMode::Linear => {
                    for a in 0..d {
                        let raw = cv[cbase + a * out_vol + pos];
                        let c = clamp_coord(raw, in_spatial[a]);
                        let li = c.floor().as_f64() as usize;
                        lo[a] = li.min(in_spatial[a] - 1);
                        hi[a] = (lo[a] + 1).min(in_spatial[a] - 1);
                        frac[a] = c - F::cast(lo[a] as f64);
                        interior[a] = raw > F::zero() && raw < F::cast((in_spatial[a] - 1) as f64);
                    }
                    for ch in 0..channels {
                        let g = grad[(b * channels + ch) * out_vol + pos];
                        if g == F::zero() {
                            continue;
                        }
                        let ibase = (b * channels + ch) * in_vol;
                        for corner in 0..corners {
                            let mut w = F::one();
                            let mut src = 0usize;
                            for a in 0..d {
                                if corner >> a & 1 == 1 {
                                    w = w * frac[a];
                                    src += hi[a] * in_strides[a];
                                } else {
                                    w = w * (F::one() - frac[a]);
                                    src += lo[a] * in_strides[a];
                                }
                            }
                            if let Some(dx) = dinput.as_mut() {
                                dx[ibase + src] = dx[ibase + src] + g * w;
                            }
                            if let Some(dc) = dcoords.as_mut() {
                                for a in 0..d {
                                    if !interior[a] {
                                        continue;
                                    }
                                    let mut wprime = F::one();
                                    for o in 0..d {
                                        if o == a {
                                            continue;
                                        }
                                        wprime = wprime
                                            * if corner >> o & 1 == 1 {
                                                frac[o]
                                            } else {
                                                F::one() - frac[o]
                                            };
                                    }
                                    let signed = if corner >> a & 1 == 1 {
                                        wprime
                                    } else {
                                        -wprime
                                    };
                                    let t = cbase + a * out_vol + pos;
                                    dc[t] = dc[t] + g * signed * xv[ibase + src];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (dinput, dcoords)
}

#[cfg(test)]
mod tests {
    use super::super::Tape;
    use super::*;

    #[test]
    fn identity_grid_coordinates() {
        let g = identity_grid::<f64>(1, &[2, 3]);
        assert_eq!(g.shape(), &[1, 2, 2, 3]);
        // channel 0 = row coordinate, channel 1 = column coordinate
        assert_eq!(&g.values()[..6], &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        assert_eq!(&g.values()[6..], &[0.0, 1.0, 2.0, 0.0, 1.0, 2.0]);
    }

    #[test]
    fn identity_coords_reproduce_input_exactly() {
        let mut tape = Tape::<f64>::new();
        let x = Tensor::new(
            vec![1, 1, 2, 3],
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
        )
        .unwrap();
        let grid = identity_grid::<f64>(1, &[2, 3]);
        let y = tape.grid_sample(&x, &grid, SampleMode::Linear).unwrap();
        assert_eq!(y.values(), x.values());
    }

    #[test]
    fn shifted_ramp_shifts_by_slope() {
        // Ramp along x; coords shifted by +1 voxel => values shift by slope 1.
        let mut tape = Tape::<f64>::new();
        let vals: Vec<f64> = (0..5).map(|i| i as f64).collect();
        let x = Tensor::new(vec![1, 1, 5], vals).unwrap();
        let grid = identity_grid::<f64>(1, &[5]);
        let shift = Tensor::<f64>::full(&[1, 1, 5], 1.0);
        let coords = tape.add(&grid, &shift).unwrap();
        let y = tape.grid_sample(&x, &coords, SampleMode::Linear).unwrap();
        // Interior sites: value = coordinate + 1; last site clamps to 4.
        assert_eq!(y.values(), &[1.0, 2.0, 3.0, 4.0, 4.0]);
    }

    #[test]
    fn nearest_half_integer_ties_round_down() {
        let mut tape = Tape::<f64>::new();
        let x = Tensor::new(vec![1, 1, 4], vec![10.0, 20.0, 30.0, 40.0]).unwrap();
        let coords = Tensor::new(vec![1, 1, 3], vec![0.5, 1.5, 2.51]).unwrap();
        let y = tape.grid_sample(&x, &coords, SampleMode::Nearest).unwrap();
        assert_eq!(y.values(), &[10.0, 20.0, 40.0]);
    }

    #[test]
    fn out_of_domain_coords_clamp_to_edge() {
        let mut tape = Tape::<f64>::new();
        let x = Tensor::new(vec![1, 1, 3], vec![5.0, 6.0, 7.0]).unwrap();
        let coords = Tensor::new(vec![1, 1, 4], vec![-3.0, 0.0, 2.0, 9.0]).unwrap();
        let y = tape.grid_sample(&x, &coords, SampleMode::Linear).unwrap();
        assert_eq!(y.values(), &[5.0, 5.0, 7.0, 7.0]);
    }

    #[test]
    fn rank_mismatch_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = Tensor::<f64>::zeros(&[1, 1, 4, 4]);
        let coords = Tensor::<f64>::zeros(&[1, 1, 4, 4]); // d=1 channel, need 2
        assert!(matches!(
            tape.grid_sample(&x, &coords, SampleMode::Linear),
            Err(TensorError::ShapeMismatch { axis: 1, .. })
        ));
    }

    #[test]
    fn resample_same_extents_is_identity() {
        let mut tape = Tape::<f64>::new();
        let x = Tensor::new(vec![1, 2, 2, 2], (0..8).map(|i| i as f64 * 0.5).collect()).unwrap();
        let y = tape.resample_linear(&x, &[2, 2]).unwrap();
        assert_eq!(y.values(), x.values());
    }

    #[test]
    fn resample_constant_stays_constant() {
        let mut tape = Tape::<f64>::new();
        let x = Tensor::<f64>::full(&[1, 1, 4, 4], 0.75);
        let y = tape.resample_linear(&x, &[7, 3]).unwrap();
        for &v in y.values() {
            assert!((v - 0.75).abs() < 1e-12);
        }
    }

    #[test]
    fn ramp_upsample_matches_closed_form() {
        // [0,1,2,3] -> 7 samples: i * 3/6 = i/2.
        let mut tape = Tape::<f64>::new();
        let x = Tensor::new(vec![1, 1, 4], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let y = tape.resample_linear(&x, &[7]).unwrap();
        for (i, &v) in y.values().iter().enumerate() {
            assert!((v - i as f64 * 0.5).abs() < 1e-12, "site {i}: {v}");
        }
    }

    #[test]
    fn downsample_by_two_takes_even_sites() {
        // Align-corners from 8 to 4: src = i * 7/3 -> interpolated.
        let mut tape = Tape::<f64>::new();
        let x = Tensor::new(vec![1, 1, 8], (0..8).map(|i| i as f64).collect()).unwrap();
        let y = tape.resample_linear(&x, &[4]).unwrap();
        for (i, &v) in y.values().iter().enumerate() {
            assert!((v - i as f64 * 7.0 / 3.0).abs() < 1e-12);
        }
    }
}
