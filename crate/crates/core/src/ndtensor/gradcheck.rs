//! Central finite-difference oracle for adjoint verification. Kept
//! independent of the backward pass: it only re-evaluates the forward
//! function at perturbed inputs.

use super::{Result, Tape, Tensor};

pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Compare analytic gradients of a scalar-valued function against central
/// finite differences (step `h`) on every element of every input.
pub fn check_gradients<Func>(inputs: &[Tensor<f64>], f: Func, h: f64) -> Result<GradCheckReport>
where
    Func: Fn(&mut Tape<f64>, &[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let mut tape = Tape::new();
    let leaves: Vec<Tensor<f64>> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = f(&mut tape, &leaves)?;
    tape.backward(&out)?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| match tape.grad(l) {
            Some(g) => g.values().to_vec(),
            None => vec![0.0; l.numel()],
        })
        .collect();

    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let numeric = central_difference(inputs, &f, i, j, h)?;
            let r = rel_err(analytic[i][j], numeric);
            if r > max_rel {
                max_rel = r;
            }
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        checked,
    })
}

/// Like [`check_gradients`] but restricted to chosen (input, element)
/// probes; used for end-to-end checks where full sweeps are too slow.
pub fn check_gradients_probed<Func>(
    inputs: &[Tensor<f64>],
    f: Func,
    h: f64,
    probes: &[(usize, usize)],
) -> Result<GradCheckReport>
where
    Func: Fn(&mut Tape<f64>, &[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let mut tape = Tape::new();
    let leaves: Vec<Tensor<f64>> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = f(&mut tape, &leaves)?;
    tape.backward(&out)?;

    let mut max_rel = 0.0f64;
    for &(i, j) in probes {
        let analytic = match tape.grad(&leaves[i]) {
            Some(g) => g.values()[j],
            None => 0.0,
        };
        let numeric = central_difference(inputs, &f, i, j, h)?;
        let r = rel_err(analytic, numeric);
        if r > max_rel {
            max_rel = r;
        }
    }
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        checked: probes.len(),
    })
}

fn central_difference<Func>(
    inputs: &[Tensor<f64>],
    f: &Func,
    i: usize,
    j: usize,
    h: f64,
) -> Result<f64>
where
    Func: Fn(&mut Tape<f64>, &[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let eval = |delta: f64| -> Result<f64> {
        let mut perturbed: Vec<Tensor<f64>> = inputs.to_vec();
        let mut vals = perturbed[i].values().to_vec();
        vals[j] += delta;
        perturbed[i] = Tensor::new(perturbed[i].shape().to_vec(), vals)?;
        let mut tape = Tape::new();
        let out = f(&mut tape, &perturbed)?;
        out.item()
    };
    Ok((eval(h)? - eval(-h)?) / (2.0 * h))
}

/// One entry of the registered-op finite-difference battery.
pub struct OpCheck {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub seeds: usize,
}

fn rand_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut crate::rng::RngStream) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform(lo, hi)).collect()).unwrap()
}

/// Away-from-kink tensor: |x| in [margin, hi], random sign.
fn rand_tensor_off_zero(
    shape: &[usize],
    margin: f64,
    hi: f64,
    rng: &mut crate::rng::RngStream,
) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n)
            .map(|_| {
                let sign = if rng.uniform(0.0, 1.0) < 0.5 { -1.0 } else { 1.0 };
                sign * rng.uniform(margin, hi)
            })
            .collect(),
    )
    .unwrap()
}

/// Scalarize an op output against a fixed random probe so every output
/// element influences the checked scalar with a distinct weight.
fn probe_sum(
    tape: &mut Tape<f64>,
    out: &Tensor<f64>,
    probe: &Tensor<f64>,
) -> Result<Tensor<f64>> {
    let weighted = tape.mul(out, probe)?;
    tape.sum(&weighted)
}

/// Run the central finite-difference battery over every registered
/// differentiable op, `seeds` seeds each, step `h`. Returns the max
/// relative error per op.
pub fn op_battery(seeds: u64, h: f64) -> Result<Vec<OpCheck>> {
    use super::conv::ConvSpec;
    use super::sample::{identity_grid, SampleMode};
    use crate::rng::RngStream;

    let mut results = Vec::new();
    let mut run = |name: &'static str,
                   f: &dyn Fn(u64) -> Result<GradCheckReport>|
     -> Result<()> {
        let mut max_rel = 0.0f64;
        for seed in 0..seeds {
            let report = f(seed)?;
            if report.max_rel_err > max_rel {
                max_rel = report.max_rel_err;
            }
        }
        results.push(OpCheck {
            name,
            max_rel_err: max_rel,
            seeds: seeds as usize,
        });
        Ok(())
    };

    run("add", &|seed| {
        let mut rng = RngStream::new(seed);
        let x = rand_tensor(&[2, 3], -1.0, 1.0, &mut rng);
        let y = rand_tensor(&[2, 3], -1.0, 1.0, &mut rng);
        let probe = rand_tensor(&[2, 3], -1.0, 1.0, &mut rng);
        check_gradients(&[x, y], move |t, ins| {
            let s = t.add(&ins[0], &ins[1])?;
            probe_sum(t, &s, &probe)
        }, h)
    })?;

    run("sub", &|seed| {
        let mut rng = RngStream::new(seed + 1000);
        let x = rand_tensor(&[2, 3], -1.0, 1.0, &mut rng);
        let y = rand_tensor(&[2, 3], -1.0, 1.0, &mut rng);
        let probe = rand_tensor(&[2, 3], -1.0, 1.0, &mut rng);
        check_gradients(&[x, y], move |t, ins| {
            let s = t.sub(&ins[0], &ins[1])?;
            probe_sum(t, &s, &probe)
        }, h)
    })?;

    run("mul", &|seed| {
        let mut rng = RngStream::new(seed + 2000);
        let x = rand_tensor(&[2, 3], -1.0, 1.0, &mut rng);
        let y = rand_tensor(&[2, 3], -1.0, 1.0, &mut rng);
        let probe = rand_tensor(&[2, 3], -1.0, 1.0, &mut rng);
        check_gradients(&[x, y], move |t, ins| {
            let s = t.mul(&ins[0], &ins[1])?;
            probe_sum(t, &s, &probe)
        }, h)
    })?;

    run("div", &|seed| {
        let mut rng = RngStream::new(seed + 3000);
        let x = rand_tensor(&[2, 3], -1.0, 1.0, &mut rng);
        let y = rand_tensor_off_zero(&[2, 3], 0.4, 1.5, &mut rng);
        let probe = rand_tensor(&[2, 3], -1.0, 1.0, &mut rng);
        check_gradients(&[x, y], move |t, ins| {
            let s = t.div(&ins[0], &ins[1])?;
            probe_sum(t, &s, &probe)
        }, h)
    })?;

    run("neg_scale", &|seed| {
        let mut rng = RngStream::new(seed + 4000);
        let x = rand_tensor(&[5], -1.0, 1.0, &mut rng);
        let probe = rand_tensor(&[5], -1.0, 1.0, &mut rng);
        check_gradients(&[x], move |t, ins| {
            let n = t.neg(&ins[0])?;
            let s = t.scale(&n, 1.7)?;
            probe_sum(t, &s, &probe)
        }, h)
    })?;

    run("leaky_relu", &|seed| {
        let mut rng = RngStream::new(seed + 5000);
        let x = rand_tensor_off_zero(&[3, 4], 0.05, 1.0, &mut rng);
        let probe = rand_tensor(&[3, 4], -1.0, 1.0, &mut rng);
        check_gradients(&[x], move |t, ins| {
            let s = t.leaky_relu(&ins[0], 0.2)?;
            probe_sum(t, &s, &probe)
        }, h)
    })?;

    run("xlogx", &|seed| {
        let mut rng = RngStream::new(seed + 6000);
        let x = rand_tensor(&[6], 0.05, 2.0, &mut rng);
        let probe = rand_tensor(&[6], -1.0, 1.0, &mut rng);
        check_gradients(&[x], move |t, ins| {
            let s = t.xlogx(&ins[0])?;
            probe_sum(t, &s, &probe)
        }, h)
    })?;

    run("add_bias", &|seed| {
        let mut rng = RngStream::new(seed + 7000);
        let x = rand_tensor(&[2, 3, 4], -1.0, 1.0, &mut rng);
        let b = rand_tensor(&[3], -1.0, 1.0, &mut rng);
        let probe = rand_tensor(&[2, 3, 4], -1.0, 1.0, &mut rng);
        check_gradients(&[x, b], move |t, ins| {
            let s = t.add_bias(&ins[0], &ins[1])?;
            probe_sum(t, &s, &probe)
        }, h)
    })?;

    run("mul_scalar", &|seed| {
        let mut rng = RngStream::new(seed + 8000);
        let x = rand_tensor(&[2, 3], -1.0, 1.0, &mut rng);
        let s = rand_tensor(&[1], -1.0, 1.0, &mut rng);
        let probe = rand_tensor(&[2, 3], -1.0, 1.0, &mut rng);
        check_gradients(&[x, s], move |t, ins| {
            let y = t.mul_scalar(&ins[0], &ins[1])?;
            probe_sum(t, &y, &probe)
        }, h)
    })?;

    run("index", &|seed| {
        let mut rng = RngStream::new(seed + 9000);
        let x = rand_tensor(&[5], -1.0, 1.0, &mut rng);
        check_gradients(&[x], |t, ins| {
            let a = t.index(&ins[0], 1)?;
            let b = t.index(&ins[0], 3)?;
            let prod = t.mul(&a, &b)?;
            t.sum(&prod)
        }, h)
    })?;

    run("narrow", &|seed| {
        let mut rng = RngStream::new(seed + 10_000);
        let x = rand_tensor(&[2, 4, 3], -1.0, 1.0, &mut rng);
        let probe = rand_tensor(&[2, 2, 3], -1.0, 1.0, &mut rng);
        check_gradients(&[x], move |t, ins| {
            let s = t.narrow(&ins[0], 1, 1, 2)?;
            probe_sum(t, &s, &probe)
        }, h)
    })?;

    run("concat", &|seed| {
        let mut rng = RngStream::new(seed + 11_000);
        let x = rand_tensor(&[1, 2, 3], -1.0, 1.0, &mut rng);
        let y = rand_tensor(&[1, 3, 3], -1.0, 1.0, &mut rng);
        let probe = rand_tensor(&[1, 5, 3], -1.0, 1.0, &mut rng);
        check_gradients(&[x, y], move |t, ins| {
            let s = t.concat(&[ins[0].clone(), ins[1].clone()], 1)?;
            probe_sum(t, &s, &probe)
        }, h)
    })?;

    run("mean", &|seed| {
        let mut rng = RngStream::new(seed + 12_000);
        let x = rand_tensor(&[7], -1.0, 1.0, &mut rng);
        check_gradients(&[x], |t, ins| t.mean(&ins[0]), h)
    })?;

    run("softmax", &|seed| {
        let mut rng = RngStream::new(seed + 13_000);
        let x = rand_tensor(&[2, 4], -2.0, 2.0, &mut rng);
        let probe = rand_tensor(&[2, 4], -1.0, 1.0, &mut rng);
        check_gradients(&[x], move |t, ins| {
            let s = t.softmax(&ins[0], 1)?;
            probe_sum(t, &s, &probe)
        }, h)
    })?;

    run("instance_norm", &|seed| {
        let mut rng = RngStream::new(seed + 14_000);
        let x = rand_tensor(&[2, 2, 3, 3], -1.0, 1.0, &mut rng);
        let probe = rand_tensor(&[2, 2, 3, 3], -1.0, 1.0, &mut rng);
        check_gradients(&[x], move |t, ins| {
            let s = t.instance_norm(&ins[0], 1e-5)?;
            probe_sum(t, &s, &probe)
        }, h)
    })?;

    run("spatial_diff", &|seed| {
        let mut rng = RngStream::new(seed + 15_000);
        let x = rand_tensor(&[1, 2, 4, 3], -1.0, 1.0, &mut rng);
        let probe0 = rand_tensor(&[1, 2, 3, 3], -1.0, 1.0, &mut rng);
        let probe1 = rand_tensor(&[1, 2, 4, 2], -1.0, 1.0, &mut rng);
        check_gradients(&[x], move |t, ins| {
            let d0 = t.spatial_diff(&ins[0], 0)?;
            let d1 = t.spatial_diff(&ins[0], 1)?;
            let s0 = probe_sum(t, &d0, &probe0)?;
            let s1 = probe_sum(t, &d1, &probe1)?;
            t.add(&s0, &s1)
        }, h)
    })?;

    run("conv_plain", &|seed| {
        let mut rng = RngStream::new(seed + 16_000);
        let x = rand_tensor(&[1, 2, 5, 5], -1.0, 1.0, &mut rng);
        let w = rand_tensor(&[3, 2, 3, 3], -0.5, 0.5, &mut rng);
        let probe = rand_tensor(&[1, 3, 5, 5], -1.0, 1.0, &mut rng);
        check_gradients(&[x, w], move |t, ins| {
            let s = t.conv_nd(&ins[0], &ins[1], &ConvSpec::cube(3, 2))?;
            probe_sum(t, &s, &probe)
        }, h)
    })?;

    run("conv_dilated", &|seed| {
        let mut rng = RngStream::new(seed + 17_000);
        let x = rand_tensor(&[1, 2, 6, 6], -1.0, 1.0, &mut rng);
        let w = rand_tensor(&[2, 2, 3, 3], -0.5, 0.5, &mut rng);
        let probe = rand_tensor(&[1, 2, 6, 6], -1.0, 1.0, &mut rng);
        check_gradients(&[x, w], move |t, ins| {
            let s = t.conv_nd(&ins[0], &ins[1], &ConvSpec::cube(3, 2).with_dilation(2))?;
            probe_sum(t, &s, &probe)
        }, h)
    })?;

    run("conv_strided", &|seed| {
        let mut rng = RngStream::new(seed + 18_000);
        let x = rand_tensor(&[1, 2, 6, 6], -1.0, 1.0, &mut rng);
        let w = rand_tensor(&[2, 2, 3, 3], -0.5, 0.5, &mut rng);
        let probe = rand_tensor(&[1, 2, 3, 3], -1.0, 1.0, &mut rng);
        check_gradients(&[x, w], move |t, ins| {
            let s = t.conv_nd(&ins[0], &ins[1], &ConvSpec::cube(3, 2).with_stride(2))?;
            probe_sum(t, &s, &probe)
        }, h)
    })?;

    run("conv_grouped", &|seed| {
        let mut rng = RngStream::new(seed + 19_000);
        let x = rand_tensor(&[1, 4, 5, 5], -1.0, 1.0, &mut rng);
        let w = rand_tensor(&[4, 2, 3, 3], -0.5, 0.5, &mut rng);
        let probe = rand_tensor(&[1, 4, 5, 5], -1.0, 1.0, &mut rng);
        check_gradients(&[x, w], move |t, ins| {
            let s = t.conv_nd(&ins[0], &ins[1], &ConvSpec::cube(3, 2).with_groups(2))?;
            probe_sum(t, &s, &probe)
        }, h)
    })?;

    run("conv_depthwise", &|seed| {
        let mut rng = RngStream::new(seed + 20_000);
        let x = rand_tensor(&[1, 3, 5, 5], -1.0, 1.0, &mut rng);
        let w = rand_tensor(&[3, 1, 3, 3], -0.5, 0.5, &mut rng);
        let probe = rand_tensor(&[1, 3, 5, 5], -1.0, 1.0, &mut rng);
        check_gradients(&[x, w], move |t, ins| {
            let s = t.conv_nd(&ins[0], &ins[1], &ConvSpec::cube(3, 2).with_groups(3))?;
            probe_sum(t, &s, &probe)
        }, h)
    })?;

    run("conv_1d", &|seed| {
        let mut rng = RngStream::new(seed + 21_000);
        let x = rand_tensor(&[2, 2, 7], -1.0, 1.0, &mut rng);
        let w = rand_tensor(&[2, 2, 3], -0.5, 0.5, &mut rng);
        let probe = rand_tensor(&[2, 2, 7], -1.0, 1.0, &mut rng);
        check_gradients(&[x, w], move |t, ins| {
            let s = t.conv_nd(&ins[0], &ins[1], &ConvSpec::cube(3, 1))?;
            probe_sum(t, &s, &probe)
        }, h)
    })?;

    run("conv_3d", &|seed| {
        let mut rng = RngStream::new(seed + 22_000);
        let x = rand_tensor(&[1, 2, 4, 4, 4], -1.0, 1.0, &mut rng);
        let w = rand_tensor(&[2, 2, 3, 3, 3], -0.5, 0.5, &mut rng);
        let probe = rand_tensor(&[1, 2, 4, 4, 4], -1.0, 1.0, &mut rng);
        check_gradients(&[x, w], move |t, ins| {
            let s = t.conv_nd(&ins[0], &ins[1], &ConvSpec::cube(3, 3))?;
            probe_sum(t, &s, &probe)
        }, h)
    })?;

    run("separable_conv", &|seed| {
        let mut rng = RngStream::new(seed + 23_000);
        let x = rand_tensor(&[1, 3, 5, 5], -1.0, 1.0, &mut rng);
        let dw = rand_tensor(&[3, 1, 3, 3], -0.5, 0.5, &mut rng);
        let pw = rand_tensor(&[2, 3, 1, 1], -0.5, 0.5, &mut rng);
        let probe = rand_tensor(&[1, 2, 5, 5], -1.0, 1.0, &mut rng);
        check_gradients(&[x, dw, pw], move |t, ins| {
            let s = t.separable_conv_nd(&ins[0], &ins[1], &ins[2], &ConvSpec::cube(3, 2))?;
            probe_sum(t, &s, &probe)
        }, h)
    })?;

    run("resample_up", &|seed| {
        let mut rng = RngStream::new(seed + 24_000);
        let x = rand_tensor(&[1, 2, 3, 3], -1.0, 1.0, &mut rng);
        let probe = rand_tensor(&[1, 2, 6, 6], -1.0, 1.0, &mut rng);
        check_gradients(&[x], move |t, ins| {
            let s = t.resample_linear(&ins[0], &[6, 6])?;
            probe_sum(t, &s, &probe)
        }, h)
    })?;

    run("resample_down", &|seed| {
        let mut rng = RngStream::new(seed + 25_000);
        let x = rand_tensor(&[1, 2, 6, 6], -1.0, 1.0, &mut rng);
        let probe = rand_tensor(&[1, 2, 3, 3], -1.0, 1.0, &mut rng);
        check_gradients(&[x], move |t, ins| {
            let s = t.resample_linear(&ins[0], &[3, 3])?;
            probe_sum(t, &s, &probe)
        }, h)
    })?;

    run("grid_sample_input", &|seed| {
        let mut rng = RngStream::new(seed + 26_000);
        let x = rand_tensor(&[1, 2, 5, 5], -1.0, 1.0, &mut rng);
        // Fractional coords bounded away from integers.
        let mut coords = identity_grid::<f64>(1, &[4, 4]).values().to_vec();
        for c in coords.iter_mut() {
            *c += rng.uniform(0.25, 0.75);
        }
        let coords = Tensor::new(vec![1, 2, 4, 4], coords).unwrap();
        let probe = rand_tensor(&[1, 2, 4, 4], -1.0, 1.0, &mut rng);
        check_gradients(&[x], move |t, ins| {
            let s = t.grid_sample(&ins[0], &coords, SampleMode::Linear)?;
            probe_sum(t, &s, &probe)
        }, h)
    })?;

    run("grid_sample_coords", &|seed| {
        let mut rng = RngStream::new(seed + 27_000);
        let x = rand_tensor(&[1, 2, 5, 5], -1.0, 1.0, &mut rng);
        let mut coords = identity_grid::<f64>(1, &[4, 4]).values().to_vec();
        for c in coords.iter_mut() {
            *c += rng.uniform(0.25, 0.75);
        }
        let coords = Tensor::new(vec![1, 2, 4, 4], coords).unwrap();
        let probe = rand_tensor(&[1, 2, 4, 4], -1.0, 1.0, &mut rng);
        check_gradients(&[coords], move |t, ins| {
            let s = t.grid_sample(&x, &ins[0], SampleMode::Linear)?;
            probe_sum(t, &s, &probe)
        }, h)
    })?;

    run("grid_sample_nearest_input", &|seed| {
        let mut rng = RngStream::new(seed + 28_000);
        let x = rand_tensor(&[1, 2, 5, 5], -1.0, 1.0, &mut rng);
        let mut coords = identity_grid::<f64>(1, &[4, 4]).values().to_vec();
        for c in coords.iter_mut() {
            *c += rng.uniform(0.1, 0.4);
        }
        let coords = Tensor::new(vec![1, 2, 4, 4], coords).unwrap();
        let probe = rand_tensor(&[1, 2, 4, 4], -1.0, 1.0, &mut rng);
        check_gradients(&[x], move |t, ins| {
            let s = t.grid_sample(&ins[0], &coords, SampleMode::Nearest)?;
            probe_sum(t, &s, &probe)
        }, h)
    })?;

    Ok(results)
}
