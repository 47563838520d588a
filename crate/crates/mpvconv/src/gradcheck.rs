//! Central-difference verification of every vector-Jacobian product in the
//! crate, from single ops up to the full point-voxel layer in each of its
//! eight combination modes. Everything here runs in double precision.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layer::{CombinationMode, MpvConvConfig, MpvConvLayer};
use crate::nn::ops::{
    activation, activation_vjp, batch_norm_train, batch_norm_train_vjp, conv3d, conv3d_vjp,
    pointwise_linear, pointwise_linear_vjp,
};
use crate::nn::{seeded_rng, Activation, BatchNormState, Mode};
use crate::tensor::Tensor;
use crate::voxel::{
    devoxelize_trilinear, devoxelize_trilinear_vjp, voxelize_avg, voxelize_avg_vjp, ScaledCoords,
    VoxelGrid,
};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;
pub const DEFAULT_SEEDS: [u64; 5] = [101, 102, 103, 104, 105];

/// Coordinate with the largest analytic/numeric disagreement.
#[derive(Clone, Debug)]
pub struct WorstCoordinate {
    pub input_index: usize,
    pub offset: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Outcome of one finite-difference comparison.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_coordinate: Option<WorstCoordinate>,
    /// Location description if a non-finite value was encountered.
    pub non_finite: Option<String>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.non_finite.is_none() && self.max_relative_error < self.tol
    }
}

/// Compare `analytic` gradients of a scalar-valued function against central
/// differences `(f(x+h) - f(x-h)) / 2h` at every coordinate of every input.
/// The relative error denominator is `max(|analytic|, |numeric|, 1e-6)`.
pub fn finite_diff_check(
    f: &mut dyn FnMut(&[Tensor<f64>]) -> Result<f64>,
    inputs: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    if inputs.len() != analytic.len() {
        return Err(Error::InvalidArgument(format!(
            "finite_diff_check: {} inputs but {} analytic gradients",
            inputs.len(),
            analytic.len()
        )));
    }
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_coordinate: None,
        non_finite: None,
        tol,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, grad) in analytic.iter().enumerate() {
        inputs[ti].check_same_shape(grad, "finite_diff_check analytic gradient")?;
        for off in 0..inputs[ti].len() {
            let orig = inputs[ti].data()[off];
            work[ti].data_mut()[off] = orig + h;
            let f_plus = f(&work)?;
            work[ti].data_mut()[off] = orig - h;
            let f_minus = f(&work)?;
            work[ti].data_mut()[off] = orig;

            let numeric = (f_plus - f_minus) / (2.0 * h);
            let a = grad.data()[off];
            if !numeric.is_finite() || !a.is_finite() {
                report.non_finite = Some(format!(
                    "input {ti} offset {off}: analytic {a}, numeric {numeric}"
                ));
                return Ok(report);
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            if rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst_coordinate = Some(WorstCoordinate {
                    input_index: ti,
                    offset: off,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}

/// Fixed random projection used to collapse an op output to a scalar. A
/// weighted sum exercises every output coordinate with a distinct weight.
/// Kept small so that the scalar stays O(1): central-difference cancellation
/// noise scales with |f|, and coordinates whose true gradient is zero (conv
/// biases feeding a batch norm) are compared against the 1e-6 floor.
fn projection(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = seeded_rng(seed, "gradcheck-projection");
    Tensor::from_fn(shape, |_| (rng.random::<f64>() * 2.0 - 1.0) * 0.1)
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x * y)
        .sum()
}

fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random::<f64>() * 2.0 - 1.0)
}

/// Values bounded away from zero, for activation kink avoidance.
fn random_tensor_off_kink(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let mag = 0.2 + rng.random::<f64>();
        if rng.random::<f64>() < 0.5 {
            -mag
        } else {
            mag
        }
    })
}

fn check_conv3d(k: usize, seed: u64, h: f64, tol: f64) -> Result<GradCheckReport> {
    let mut rng = seeded_rng(seed, "gradcheck-conv3d");
    let (b, ci, co, d) = (1, 2, 2, 3);
    let input = random_tensor(&[b, ci, d, d, d], &mut rng);
    let weight = random_tensor(&[co, ci, k, k, k], &mut rng);
    let bias = random_tensor(&[co], &mut rng);
    let pad = (k - 1) / 2;
    let proj = projection(&[b, co, d, d, d], seed);

    let (gi, gw, gb) = conv3d_vjp(&input, &weight, &proj, pad)?;
    finite_diff_check(
        &mut |xs: &[Tensor<f64>]| Ok(dot(&conv3d(&xs[0], &xs[1], &xs[2], pad)?, &proj)),
        &[input, weight, bias],
        &[gi, gw, gb],
        h,
        tol,
    )
}

fn check_pointwise(seed: u64, h: f64, tol: f64) -> Result<GradCheckReport> {
    let mut rng = seeded_rng(seed, "gradcheck-pointwise");
    let (b, ci, co, n) = (2, 3, 4, 5);
    let input = random_tensor(&[b, ci, n], &mut rng);
    let weight = random_tensor(&[co, ci], &mut rng);
    let bias = random_tensor(&[co], &mut rng);
    let proj = projection(&[b, co, n], seed);

    let (gi, gw, gb) = pointwise_linear_vjp(&input, &weight, &proj)?;
    finite_diff_check(
        &mut |xs: &[Tensor<f64>]| Ok(dot(&pointwise_linear(&xs[0], &xs[1], &xs[2])?, &proj)),
        &[input, weight, bias],
        &[gi, gw, gb],
        h,
        tol,
    )
}

fn check_batch_norm(seed: u64, h: f64, tol: f64) -> Result<GradCheckReport> {
    let mut rng = seeded_rng(seed, "gradcheck-bn");
    let (b, c, s) = (2, 3, 4);
    let input = random_tensor(&[b, c, s], &mut rng);
    let gamma = random_tensor_off_kink(&[c], &mut rng);
    let beta = random_tensor(&[c], &mut rng);
    let proj = projection(&[b, c, s], seed);

    let run = |x: &Tensor<f64>, gamma: &Tensor<f64>, beta: &Tensor<f64>| -> Result<(Tensor<f64>, crate::nn::ops::BatchNormCtx<f64>)> {
        let mut state = BatchNormState::<f64>::new("bn", c);
        state.gamma.value = gamma.clone();
        state.beta.value = beta.clone();
        batch_norm_train(x, &mut state)
    };

    let (_, ctx) = run(&input, &gamma, &beta)?;
    let (gx, ggamma, gbeta) = batch_norm_train_vjp(&ctx, &gamma, &proj)?;

    finite_diff_check(
        &mut |xs: &[Tensor<f64>]| {
            let (out, _) = run(&xs[0], &xs[1], &xs[2])?;
            Ok(dot(&out, &proj))
        },
        &[input, gamma, beta],
        &[gx, ggamma, gbeta],
        h,
        tol,
    )
}

fn check_activation(kind: Activation, seed: u64, h: f64, tol: f64) -> Result<GradCheckReport> {
    let mut rng = seeded_rng(seed, "gradcheck-act");
    let input = random_tensor_off_kink(&[4, 5], &mut rng);
    let proj = projection(&[4, 5], seed);
    let ga = activation_vjp(&input, kind, &proj);
    finite_diff_check(
        &mut |xs: &[Tensor<f64>]| Ok(dot(&activation(&xs[0], kind), &proj)),
        &[input],
        &[ga],
        h,
        tol,
    )
}

fn check_voxelize(seed: u64, h: f64, tol: f64) -> Result<GradCheckReport> {
    let mut rng = seeded_rng(seed, "gradcheck-voxelize");
    let (n, c, r) = (12, 3, 4);
    let coords = ScaledCoords {
        coords: (0..n)
            .map(|_| {
                [
                    rng.random::<f64>() * (r - 1) as f64,
                    rng.random::<f64>() * (r - 1) as f64,
                    rng.random::<f64>() * (r - 1) as f64,
                ]
            })
            .collect(),
        resolution: r,
    };
    let features = random_tensor(&[n, c], &mut rng);
    let proj = projection(&[c, r, r, r], seed);

    let grid = voxelize_avg(&coords, &features)?;
    let gf = voxelize_avg_vjp(&coords, &grid.counts, &proj)?;
    finite_diff_check(
        &mut |xs: &[Tensor<f64>]| Ok(dot(&voxelize_avg(&coords, &xs[0])?.data, &proj)),
        &[features],
        &[gf],
        h,
        tol,
    )
}

fn check_devoxelize(seed: u64, h: f64, tol: f64) -> Result<GradCheckReport> {
    let mut rng = seeded_rng(seed, "gradcheck-devoxelize");
    let (n, c, r) = (10, 2, 4);
    let coords = ScaledCoords {
        coords: (0..n)
            .map(|_| {
                [
                    rng.random::<f64>() * (r - 1) as f64,
                    rng.random::<f64>() * (r - 1) as f64,
                    rng.random::<f64>() * (r - 1) as f64,
                ]
            })
            .collect(),
        resolution: r,
    };
    let data = random_tensor(&[c, r, r, r], &mut rng);
    let proj = projection(&[n, c], seed);

    let gg = devoxelize_trilinear_vjp(&coords, c, &proj)?;
    finite_diff_check(
        &mut |xs: &[Tensor<f64>]| {
            let grid = VoxelGrid {
                resolution: r,
                channels: c,
                data: xs[0].clone(),
                counts: Vec::new(),
            };
            Ok(dot(&devoxelize_trilinear(&grid, &coords)?, &proj))
        },
        &[data],
        &[gg],
        h,
        tol,
    )
}

/// Full-layer check: gradient of a projected layer output with respect to
/// the input features and every parameter, in one combination mode.
pub fn check_layer(mode: CombinationMode, seed: u64, h: f64, tol: f64) -> Result<GradCheckReport> {
    let mut rng = seeded_rng(seed, "gradcheck-layer");
    let (b, c1, n) = (1, 4, 16);
    let mut cfg = MpvConvConfig::new(c1, 4, 4);
    cfg.combination_mode = mode;
    let layer = MpvConvLayer::<f64>::new("gc", cfg, seed)?;

    let coords: Vec<Vec<[f64; 3]>> = (0..b)
        .map(|_| {
            (0..n)
                .map(|_| {
                    [
                        rng.random::<f64>(),
                        rng.random::<f64>(),
                        rng.random::<f64>(),
                    ]
                })
                .collect()
        })
        .collect();
    let features = random_tensor(&[b, c1, n], &mut rng);
    let c2 = layer.out_channels();
    let proj = projection(&[b, c2, n], seed);

    // Inputs: features first, then every parameter in visitation order.
    let mut inputs = vec![features.clone()];
    {
        let mut probe = layer.clone();
        probe.visit_params(&mut |p| inputs.push(p.value.clone()));
    }

    let load = |xs: &[Tensor<f64>]| -> MpvConvLayer<f64> {
        let mut l = layer.clone();
        let mut idx = 1;
        l.visit_params(&mut |p| {
            p.value = xs[idx].clone();
            idx += 1;
        });
        l
    };

    // Analytic gradients via one forward/backward on a fresh clone.
    let mut analytic = Vec::with_capacity(inputs.len());
    {
        let mut l = load(&inputs);
        l.forward(&coords, &inputs[0], Mode::Train)?;
        let d_features = l.backward(&proj)?;
        analytic.push(d_features);
        l.visit_params(&mut |p| analytic.push(p.grad.clone()));
    }

    finite_diff_check(
        &mut |xs: &[Tensor<f64>]| {
            let mut l = load(xs);
            let out = l.forward(&coords, &xs[0], Mode::Train)?;
            Ok(dot(&out, &proj))
        },
        &inputs,
        &analytic,
        h,
        tol,
    )
}

/// One row of the gradient suite: an op or layer mode checked across seeds.
#[derive(Clone, Debug)]
pub struct SuiteRow {
    pub name: String,
    pub max_relative_error: f64,
    pub passed: bool,
}

fn run_rows(
    name: &str,
    seeds: &[u64],
    h: f64,
    tol: f64,
    f: impl Fn(u64, f64, f64) -> Result<GradCheckReport>,
) -> Result<SuiteRow> {
    let mut worst = 0.0f64;
    let mut passed = true;
    for &seed in seeds {
        let report = f(seed, h, tol)?;
        worst = worst.max(report.max_relative_error);
        passed &= report.passed();
    }
    Ok(SuiteRow {
        name: name.to_string(),
        max_relative_error: worst,
        passed,
    })
}

/// Run the whole gradient suite: every differentiable op and the full layer
/// in all eight combination modes, each at every seed.
pub fn gradient_suite(seeds: &[u64], h: f64, tol: f64) -> Result<Vec<SuiteRow>> {
    let mut rows = Vec::new();
    rows.push(run_rows("conv3d_k1", seeds, h, tol, |s, h, t| {
        check_conv3d(1, s, h, t)
    })?);
    rows.push(run_rows("conv3d_k3", seeds, h, tol, |s, h, t| {
        check_conv3d(3, s, h, t)
    })?);
    rows.push(run_rows("pointwise_linear", seeds, h, tol, check_pointwise)?);
    rows.push(run_rows("batch_norm_train", seeds, h, tol, check_batch_norm)?);
    rows.push(run_rows("relu", seeds, h, tol, |s, h, t| {
        check_activation(Activation::Relu, s, h, t)
    })?);
    rows.push(run_rows("leaky_relu", seeds, h, tol, |s, h, t| {
        check_activation(Activation::LeakyRelu(0.1), s, h, t)
    })?);
    rows.push(run_rows("voxelize_avg", seeds, h, tol, check_voxelize)?);
    rows.push(run_rows(
        "devoxelize_trilinear",
        seeds,
        h,
        tol,
        check_devoxelize,
    )?);
    for mode in CombinationMode::ALL {
        rows.push(run_rows(
            &format!("mpvconv_layer_mode_{mode}"),
            seeds,
            h,
            tol,
            |s, h, t| check_layer(mode, s, h, t),
        )?);
    }
    Ok(rows)
}
