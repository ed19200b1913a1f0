//! Diffeomorphic registration math: scaling-and-squaring integration of a
//! stationary velocity field, warping, windowed NCC similarity, diffusion
//! smoothness, the symmetric objective, and Dice / endpoint-error metrics.

use crate::ndtensor::sample::identity_grid;
use crate::ndtensor::{
    ConvSpec, PadMode, Result, SampleMode, Scalar, Tape, Tensor, TensorError,
};

pub const DEFAULT_INTEGRATION_STEPS: usize = 7;
pub const NCC_EPS: f64 = 1e-5;
pub const INSTANCE_NORM_EPS: f64 = 1e-5;

/// Stationary velocity field in voxel units per unit time: [B, d, S...].
#[derive(Clone, Debug)]
pub struct VelocityField<F: Scalar> {
    v: Tensor<F>,
}

impl<F: Scalar> VelocityField<F> {
    pub fn new(v: Tensor<F>) -> Result<Self> {
        let d = v.rank().saturating_sub(2);
        if d < 1 {
            return Err(TensorError::RankMismatch {
                op: "VelocityField",
                expected: 3,
                got: v.rank(),
            });
        }
        if v.channels() != d {
            return Err(TensorError::ShapeMismatch {
                op: "VelocityField",
                axis: 1,
                expected: d,
                got: v.channels(),
            });
        }
        if !v.all_finite() {
            return Err(TensorError::NonFinite {
                op: "VelocityField",
            });
        }
        Ok(Self { v })
    }

    pub fn tensor(&self) -> &Tensor<F> {
        &self.v
    }

    pub fn spatial(&self) -> &[usize] {
        self.v.spatial()
    }
}

/// Absolute target-to-source sampling coordinates in voxel units, plus the
/// squaring-step count that produced them.
#[derive(Clone, Debug)]
pub struct DeformationField<F: Scalar> {
    pub phi: Tensor<F>,
    pub steps: usize,
}

/// Similarity/regularity weighting for the registration objectives.
#[derive(Clone, Debug)]
pub struct LossWeights {
    /// Weight of the smoothness term (lambda).
    pub lambda_smooth: f64,
    /// Odd window extent applied along every spatial dim of the NCC.
    pub ncc_window: usize,
    /// Squaring steps used when the loss integrates a velocity field.
    pub integration_steps: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_smooth: 0.5,
            ncc_window: 9,
            integration_steps: DEFAULT_INTEGRATION_STEPS,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_smooth < 0.0 {
            return Err(TensorError::Invalid {
                op: "LossWeights",
                msg: "lambda_smooth must be >= 0".into(),
            });
        }
        if self.ncc_window == 0 || self.ncc_window % 2 == 0 {
            return Err(TensorError::Invalid {
                op: "LossWeights",
                msg: format!("ncc_window must be odd and >= 1, got {}", self.ncc_window),
            });
        }
        Ok(())
    }
}

/// Scaling-and-squaring exponential of a stationary velocity field:
/// u <- v / 2^steps, then `steps` self-compositions of the displacement;
/// the result is the identity grid plus the final displacement.
pub fn integrate_velocity<F: Scalar>(
    tape: &mut Tape<F>,
    v: &VelocityField<F>,
    steps: usize,
) -> Result<DeformationField<F>> {
    let vt = v.tensor();
    if !vt.all_finite() {
        return Err(TensorError::NonFinite {
            op: "integrate_velocity",
        });
    }
    let grid = identity_grid::<F>(vt.batch(), vt.spatial());
    let mut u = tape.scale(vt, 1.0 / (1u64 << steps) as f64)?;
    for _ in 0..steps {
        let coords = tape.add(&grid, &u)?;
        let sampled = tape.grid_sample(&u, &coords, SampleMode::Linear)?;
        u = tape.add(&u, &sampled)?;
    }
    let phi = tape.add(&grid, &u)?;
    Ok(DeformationField { phi, steps })
}

/// Compose two deformations: (outer o inner)(x) = outer(inner(x)).
pub fn compose<F: Scalar>(
    tape: &mut Tape<F>,
    outer: &DeformationField<F>,
    inner: &DeformationField<F>,
) -> Result<DeformationField<F>> {
    let phi = tape.grid_sample(&outer.phi, &inner.phi, SampleMode::Linear)?;
    Ok(DeformationField {
        phi,
        steps: outer.steps,
    })
}

/// Mean Euclidean norm of the displacement phi - id, in voxels.
pub fn mean_displacement_norm<F: Scalar>(phi: &DeformationField<F>) -> f64 {
    let t = &phi.phi;
    let d = t.channels();
    let vol: usize = t.spatial().iter().product();
    let grid = identity_grid::<f64>(t.batch(), t.spatial());
    let tv = t.to_f64_vec();
    let gv = grid.values();
    let mut acc = 0.0;
    for b in 0..t.batch() {
        for pos in 0..vol {
            let mut sq = 0.0;
            for a in 0..d {
                let i = (b * d + a) * vol + pos;
                let diff = tv[i] - gv[i];
                sq += diff * diff;
            }
            acc += sq.sqrt();
        }
    }
    acc / (t.batch() * vol) as f64
}

/// Max |phi - id| over all components, in voxels.
pub fn max_displacement<F: Scalar>(phi: &DeformationField<F>) -> f64 {
    let t = &phi.phi;
    let grid = identity_grid::<f64>(t.batch(), t.spatial());
    t.to_f64_vec()
        .iter()
        .zip(grid.values())
        .fold(0.0f64, |m, (a, g)| m.max((a - g).abs()))
}

/// Mean Euclidean distance between two deformations' displacement vectors.
pub fn endpoint_error<F: Scalar>(a: &DeformationField<F>, b: &DeformationField<F>) -> f64 {
    let (ta, tb) = (&a.phi, &b.phi);
    debug_assert_eq!(ta.shape(), tb.shape());
    let d = ta.channels();
    let vol: usize = ta.spatial().iter().product();
    let (av, bv) = (ta.to_f64_vec(), tb.to_f64_vec());
    let mut acc = 0.0;
    for b_i in 0..ta.batch() {
        for pos in 0..vol {
            let mut sq = 0.0;
            for ax in 0..d {
                let i = (b_i * d + ax) * vol + pos;
                let diff = av[i] - bv[i];
                sq += diff * diff;
            }
            acc += sq.sqrt();
        }
    }
    acc / (ta.batch() * vol) as f64
}

/// Minimum Jacobian determinant of phi over interior voxels (forward
/// differences). Positive everywhere means the map is locally invertible.
pub fn min_jacobian_det<F: Scalar>(phi: &DeformationField<F>) -> f64 {
    let t = &phi.phi;
    let d = t.channels();
    let spatial = t.spatial().to_vec();
    let vol: usize = spatial.iter().product();
    let strides = crate::ndtensor::strides_of(&spatial);
    let tv = t.to_f64_vec();
    let mut min_det = f64::INFINITY;
    for b in 0..t.batch() {
        'pos: for pos in 0..vol {
            // Interior check: need pos + 1 along every axis.
            let mut coords = vec![0usize; d];
            for a in 0..d {
                coords[a] = (pos / strides[a]) % spatial[a];
                if coords[a] + 1 >= spatial[a] {
                    continue 'pos;
                }
            }
            // J[i][j] = d phi_i / d x_j
            let mut jac = [[0.0f64; 3]; 3];
            for i in 0..d {
                let base = (b * d + i) * vol;
                for j in 0..d {
                    jac[i][j] = tv[base + pos + strides[j]] - tv[base + pos];
                }
            }
            let det = match d {
                1 => jac[0][0],
                2 => jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0],
                _ => {
                    jac[0][0] * (jac[1][1] * jac[2][2] - jac[1][2] * jac[2][1])
                        - jac[0][1] * (jac[1][0] * jac[2][2] - jac[1][2] * jac[2][0])
                        + jac[0][2] * (jac[1][0] * jac[2][1] - jac[1][1] * jac[2][0])
                }
            };
            if det < min_det {
                min_det = det;
            }
        }
    }
    min_det
}

/// Resample an image through a deformation: linear for intensities,
/// nearest for label maps.
pub fn warp<F: Scalar>(
    tape: &mut Tape<F>,
    image: &Tensor<F>,
    phi: &DeformationField<F>,
    mode: SampleMode,
) -> Result<Tensor<F>> {
    if image.spatial() != &phi.phi.shape()[2..] {
        return Err(TensorError::Invalid {
            op: "warp",
            msg: format!(
                "image spatial extents {:?} do not match deformation extents {:?}",
                image.spatial(),
                &phi.phi.shape()[2..]
            ),
        });
    }
    tape.grid_sample(image, &phi.phi, mode)
}

/// Local windowed NCC loss: 1 - mean of squared window correlations,
/// epsilon-guarded; 0 for identical (non-constant) images, toward 1 for
/// unrelated ones. Inputs are single-channel [B, 1, S...].
pub fn ncc_loss<F: Scalar>(
    tape: &mut Tape<F>,
    a: &Tensor<F>,
    b: &Tensor<F>,
    window: usize,
) -> Result<Tensor<F>> {
    crate::ndtensor::check_same_shape("ncc_loss", a, b)?;
    if a.channels() != 1 {
        return Err(TensorError::ShapeMismatch {
            op: "ncc_loss",
            axis: 1,
            expected: 1,
            got: a.channels(),
        });
    }
    if window == 0 || window % 2 == 0 {
        return Err(TensorError::Invalid {
            op: "ncc_loss",
            msg: format!("window must be odd and >= 1, got {window}"),
        });
    }
    let d = a.rank() - 2;
    for (axis, &s) in a.spatial().iter().enumerate() {
        if window > s {
            return Err(TensorError::Invalid {
                op: "ncc_loss",
                msg: format!("window {window} larger than image extent {s} on axis {axis}"),
            });
        }
    }
    // Valid windows only: zero padding would contaminate border statistics
    // and break the affine-invariance of the correlation.
    let kernel = vec![window; d];
    let kvol: usize = kernel.iter().product();
    let mut kshape = vec![1usize, 1];
    kshape.extend_from_slice(&kernel);
    let ones = Tensor::<F>::full(&kshape, F::one());
    let spec = ConvSpec::same(&kernel).with_pad(PadMode::Valid);

    let aa = tape.mul(a, a)?;
    let bb = tape.mul(b, b)?;
    let ab = tape.mul(a, b)?;
    let sa = tape.conv_nd(a, &ones, &spec)?;
    let sb = tape.conv_nd(b, &ones, &spec)?;
    let saa = tape.conv_nd(&aa, &ones, &spec)?;
    let sbb = tape.conv_nd(&bb, &ones, &spec)?;
    let sab = tape.conv_nd(&ab, &ones, &spec)?;

    let inv_n = 1.0 / kvol as f64;
    let sasb = tape.mul(&sa, &sb)?;
    let sasb_n = tape.scale(&sasb, inv_n)?;
    let cross = tape.sub(&sab, &sasb_n)?;

    let sasa = tape.mul(&sa, &sa)?;
    let sasa_n = tape.scale(&sasa, inv_n)?;
    let var_a = tape.sub(&saa, &sasa_n)?;

    let sbsb = tape.mul(&sb, &sb)?;
    let sbsb_n = tape.scale(&sbsb, inv_n)?;
    let var_b = tape.sub(&sbb, &sbsb_n)?;

    let cross2 = tape.mul(&cross, &cross)?;
    let varprod = tape.mul(&var_a, &var_b)?;
    let eps = Tensor::<F>::full(varprod.shape(), F::cast(NCC_EPS));
    let denom = tape.add(&varprod, &eps)?;
    let cc = tape.div(&cross2, &denom)?;

    let mean_cc = tape.mean(&cc)?;
    let neg = tape.scale(&mean_cc, -1.0)?;
    let one = Tensor::<F>::scalar(F::one());
    tape.add(&one, &neg)
}

/// Mean squared first-order forward finite difference of every velocity
/// component along every spatial axis (diffusion regularizer).
pub fn smoothness_loss<F: Scalar>(tape: &mut Tape<F>, v: &VelocityField<F>) -> Result<Tensor<F>> {
    let t = v.tensor();
    let d = t.rank() - 2;
    let mut total: Option<Tensor<F>> = None;
    let mut count = 0usize;
    for axis in 0..d {
        let diff = tape.spatial_diff(t, axis)?;
        count += diff.numel();
        let sq = tape.mul(&diff, &diff)?;
        let s = tape.sum(&sq)?;
        total = Some(match total {
            Some(acc) => tape.add(&acc, &s)?,
            None => s,
        });
    }
    let total = total.expect("velocity has at least one spatial axis");
    tape.scale(&total, 1.0 / count as f64)
}

/// Forward-only objective: NCC(warp(I0, exp(v)), I1) + lambda * smooth(v).
pub fn registration_loss<F: Scalar>(
    tape: &mut Tape<F>,
    i0: &Tensor<F>,
    i1: &Tensor<F>,
    v: &VelocityField<F>,
    w: &LossWeights,
) -> Result<Tensor<F>> {
    w.validate()?;
    let phi = integrate_velocity(tape, v, w.integration_steps)?;
    let warped = warp(tape, i0, &phi, SampleMode::Linear)?;
    let sim = ncc_loss(tape, &warped, i1, w.ncc_window)?;
    let smooth = smoothness_loss(tape, v)?;
    let weighted = tape.scale(&smooth, w.lambda_smooth)?;
    tape.add(&sim, &weighted)
}

/// Components of the symmetric objective.
pub struct SymmetricLossParts<F: Scalar> {
    pub forward_sim: Tensor<F>,
    pub backward_sim: Tensor<F>,
    pub smooth_weighted: Tensor<F>,
    pub total: Tensor<F>,
}

/// Symmetric objective using both the forward flow exp(v) and the inverse
/// flow exp(-v):
/// NCC(warp(I0, exp(v)), I1) + NCC(warp(I1, exp(-v)), I0) + lambda * smooth(v).
pub fn symmetric_loss_parts<F: Scalar>(
    tape: &mut Tape<F>,
    i0: &Tensor<F>,
    i1: &Tensor<F>,
    v: &VelocityField<F>,
    w: &LossWeights,
) -> Result<SymmetricLossParts<F>> {
    w.validate()?;
    let phi_fwd = integrate_velocity(tape, v, w.integration_steps)?;
    let neg_v = VelocityField::new(tape.neg(v.tensor())?)?;
    let phi_bwd = integrate_velocity(tape, &neg_v, w.integration_steps)?;

    let warped_fwd = warp(tape, i0, &phi_fwd, SampleMode::Linear)?;
    let forward_sim = ncc_loss(tape, &warped_fwd, i1, w.ncc_window)?;
    let warped_bwd = warp(tape, i1, &phi_bwd, SampleMode::Linear)?;
    let backward_sim = ncc_loss(tape, &warped_bwd, i0, w.ncc_window)?;

    let smooth = smoothness_loss(tape, v)?;
    let smooth_weighted = tape.scale(&smooth, w.lambda_smooth)?;

    let sim = tape.add(&forward_sim, &backward_sim)?;
    let total = tape.add(&sim, &smooth_weighted)?;
    Ok(SymmetricLossParts {
        forward_sim,
        backward_sim,
        smooth_weighted,
        total,
    })
}

pub fn symmetric_loss<F: Scalar>(
    tape: &mut Tape<F>,
    i0: &Tensor<F>,
    i1: &Tensor<F>,
    v: &VelocityField<F>,
    w: &LossWeights,
) -> Result<Tensor<F>> {
    Ok(symmetric_loss_parts(tape, i0, i1, v, w)?.total)
}

/// Per-label Dice scores plus their mean over the label set.
#[derive(Debug, Clone)]
pub struct DiceResult {
    pub per_label: Vec<(u16, f64)>,
    pub mean: f64,
}

/// Dice overlap 2|A n B| / (|A| + |B|) per label. A label absent from both
/// maps scores 1.0 (perfect agreement on absence); absent from exactly one
/// scores 0.0.
pub fn dice(pred: &[u16], truth: &[u16], label_set: &[u16]) -> DiceResult {
    assert_eq!(pred.len(), truth.len(), "label maps must match in size");
    let mut per_label = Vec::with_capacity(label_set.len());
    let mut sum = 0.0;
    for &label in label_set {
        let mut inter = 0usize;
        let mut a = 0usize;
        let mut b = 0usize;
        for (&p, &t) in pred.iter().zip(truth) {
            let pa = p == label;
            let tb = t == label;
            a += pa as usize;
            b += tb as usize;
            inter += (pa && tb) as usize;
        }
        let score = if a + b == 0 {
            1.0
        } else {
            2.0 * inter as f64 / (a + b) as f64
        };
        per_label.push((label, score));
        sum += score;
    }
    let mean = if label_set.is_empty() {
        1.0
    } else {
        sum / label_set.len() as f64
    };
    DiceResult { per_label, mean }
}
