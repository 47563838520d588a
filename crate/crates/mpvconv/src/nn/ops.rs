//! Forward kernels and vector-Jacobian products.
//!
//! All kernels are stride-1 and extent-preserving. Each op uses one fixed
//! accumulation order, so outputs are bit-identical across calls with the
//! same inputs. The VJP functions return gradients as plain tensors; the
//! caller decides where to accumulate them.

use crate::error::{Error, Result};
use crate::nn::{Activation, BatchNormState, Mode};
use crate::tensor::{Scalar, Tensor};

struct Conv3dGeom {
    batch: usize,
    ci: usize,
    co: usize,
    k: usize,
    pad: usize,
    d: usize,
    h: usize,
    w: usize,
}

impl Conv3dGeom {
    fn check(
        input: &[usize],
        weight: &[usize],
        bias: &[usize],
        padding: usize,
    ) -> Result<Self> {
        if input.len() != 5 {
            return Err(Error::ShapeMismatch {
                context: "conv3d input".into(),
                expected: "[B,Ci,D,H,W]".into(),
                got: format!("{input:?}"),
            });
        }
        if weight.len() != 5 || weight[2] != weight[3] || weight[3] != weight[4] {
            return Err(Error::ShapeMismatch {
                context: "conv3d weight".into(),
                expected: "[Co,Ci,k,k,k]".into(),
                got: format!("{weight:?}"),
            });
        }
        let k = weight[2];
        if k % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "conv3d kernel size must be odd, got {k}"
            )));
        }
        if input[1] != weight[1] {
            return Err(Error::ShapeMismatch {
                context: "conv3d input channels".into(),
                expected: format!("Ci={}", weight[1]),
                got: format!("Ci={}", input[1]),
            });
        }
        if bias.len() != 1 || bias[0] != weight[0] {
            return Err(Error::ShapeMismatch {
                context: "conv3d bias".into(),
                expected: format!("[{}]", weight[0]),
                got: format!("{bias:?}"),
            });
        }
        if padding != (k - 1) / 2 {
            return Err(Error::InvalidArgument(format!(
                "conv3d padding must be (k-1)/2 = {}, got {padding}",
                (k - 1) / 2
            )));
        }
        Ok(Self {
            batch: input[0],
            ci: input[1],
            co: weight[0],
            k,
            pad: padding,
            d: input[2],
            h: input[3],
            w: input[4],
        })
    }

    fn vol(&self) -> usize {
        self.d * self.h * self.w
    }

    fn padded_dims(&self) -> (usize, usize, usize) {
        (
            self.d + 2 * self.pad,
            self.h + 2 * self.pad,
            self.w + 2 * self.pad,
        )
    }
}

fn pad_channel<T: Scalar>(geom: &Conv3dGeom, channel: &[T], out: &mut [T]) {
    let (_, hp, wp) = geom.padded_dims();
    out.fill(T::zero());
    for z in 0..geom.d {
        for y in 0..geom.h {
            let src = &channel[(z * geom.h + y) * geom.w..][..geom.w];
            let dst_base = ((z + geom.pad) * hp + (y + geom.pad)) * wp + geom.pad;
            out[dst_base..dst_base + geom.w].copy_from_slice(src);
        }
    }
}

/// Sum `f(x)` over a slice in 8 fixed f64 stripes. The stripe order is
/// constant, so the (reassociated) sum is bit-reproducible across calls.
fn striped_sum<T: Copy>(xs: &[T], f: impl Fn(T) -> f64) -> f64 {
    let mut lanes = [0.0f64; 8];
    let mut i = 0;
    while i + 8 <= xs.len() {
        for l in 0..8 {
            lanes[l] += f(xs[i + l]);
        }
        i += 8;
    }
    let mut l = 0;
    while i < xs.len() {
        lanes[l] += f(xs[i]);
        l += 1;
        i += 1;
    }
    lanes.iter().sum()
}

/// Striped sum of elementwise products of two equal-length slices.
fn striped_sum_zip<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [0.0f64; 8];
    let mut i = 0;
    while i + 8 <= a.len() {
        for l in 0..8 {
            lanes[l] += a[i + l].as_f64() * b[i + l].as_f64();
        }
        i += 8;
    }
    let mut l = 0;
    while i < a.len() {
        lanes[l] += a[i].as_f64() * b[i].as_f64();
        l += 1;
        i += 1;
    }
    lanes.iter().sum()
}

/// Unrolled input patches: row `i*k^3 + t` holds channel `i` shifted by tap
/// `t`, flattened over the output volume.
struct ColBuffer<T> {
    data: Vec<T>,
    padded: Vec<T>,
}

impl<T: Scalar> ColBuffer<T> {
    fn new(g: &Conv3dGeom) -> Self {
        let (dp, hp, wp) = g.padded_dims();
        let k3 = g.k * g.k * g.k;
        Self {
            data: vec![T::zero(); g.ci * k3 * g.vol()],
            padded: vec![T::zero(); dp * hp * wp],
        }
    }

    fn fill_from(&mut self, g: &Conv3dGeom, sample: &[T]) {
        let (_, hp, wp) = g.padded_dims();
        let vol = g.vol();
        let k3 = g.k * g.k * g.k;
        for i in 0..g.ci {
            pad_channel(g, &sample[i * vol..][..vol], &mut self.padded);
            for dz in 0..g.k {
                for dy in 0..g.k {
                    for dx in 0..g.k {
                        let t = (dz * g.k + dy) * g.k + dx;
                        let dst = &mut self.data[(i * k3 + t) * vol..][..vol];
                        for z in 0..g.d {
                            for y in 0..g.h {
                                let src =
                                    &self.padded[((z + dz) * hp + (y + dy)) * wp + dx..][..g.w];
                                dst[(z * g.h + y) * g.w..][..g.w].copy_from_slice(src);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `out[o,:] = bias[o] + sum_r weight[o,r] * col[r,:]`, with output rows
/// processed in blocks of four so each col row streams once per block.
fn gemm_block4<T: Scalar>(
    out: &mut [T],
    weight: &[T],
    col: &[T],
    bias: &[T],
    co: usize,
    cols: usize,
    vol: usize,
) {
    let mut o = 0;
    while o < co {
        let ob = (co - o).min(4);
        let block = &mut out[o * vol..][..ob * vol];
        for (oo, row) in block.chunks_exact_mut(vol).enumerate() {
            row.fill(bias[o + oo]);
        }
        match ob {
            4 => {
                let (r0, rest) = block.split_at_mut(vol);
                let (r1, rest) = rest.split_at_mut(vol);
                let (r2, r3) = rest.split_at_mut(vol);
                for r in 0..cols {
                    let crow = &col[r * vol..][..vol];
                    let w0 = weight[o * cols + r];
                    let w1 = weight[(o + 1) * cols + r];
                    let w2 = weight[(o + 2) * cols + r];
                    let w3 = weight[(o + 3) * cols + r];
                    for x in 0..vol {
                        let c = crow[x];
                        r0[x] += w0 * c;
                        r1[x] += w1 * c;
                        r2[x] += w2 * c;
                        r3[x] += w3 * c;
                    }
                }
            }
            _ => {
                for (oo, row) in block.chunks_exact_mut(vol).enumerate() {
                    for r in 0..cols {
                        let crow = &col[r * vol..][..vol];
                        let w = weight[(o + oo) * cols + r];
                        for x in 0..vol {
                            row[x] += w * crow[x];
                        }
                    }
                }
            }
        }
        o += ob;
    }
}

/// 3-D cross-correlation with stride 1 and extent-preserving zero padding.
///
/// `output[b,o,z,y,x] = bias[o] + sum_{i,dz,dy,dx} input[b,i,z+dz-p,y+dy-p,x+dx-p] * weight[o,i,dz,dy,dx]`
pub fn conv3d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = Conv3dGeom::check(input.shape(), weight.shape(), bias.shape(), padding)?;
    let vol = g.vol();
    let k3 = g.k * g.k * g.k;

    let mut out = Tensor::zeros(&[g.batch, g.co, g.d, g.h, g.w]);
    let mut col = ColBuffer::new(&g);
    let in_data = input.data();
    let w_data = weight.data();
    let b_data = bias.data();
    let out_data = out.data_mut();

    for b in 0..g.batch {
        col.fill_from(&g, &in_data[b * g.ci * vol..][..g.ci * vol]);
        gemm_block4(
            &mut out_data[b * g.co * vol..][..g.co * vol],
            w_data,
            &col.data,
            b_data,
            g.co,
            g.ci * k3,
            vol,
        );
    }
    Ok(out)
}

/// VJP of [`conv3d`]: gradients with respect to input, weight and bias.
pub fn conv3d_vjp<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    padding: usize,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let g = Conv3dGeom::check(
        input.shape(),
        weight.shape(),
        &[weight.shape()[0]],
        padding,
    )?;
    if grad_out.shape() != [g.batch, g.co, g.d, g.h, g.w] {
        return Err(Error::ShapeMismatch {
            context: "conv3d_vjp grad_out".into(),
            expected: format!("{:?}", [g.batch, g.co, g.d, g.h, g.w]),
            got: format!("{:?}", grad_out.shape()),
        });
    }
    let vol = g.vol();
    let k3 = g.k * g.k * g.k;
    let in_data = input.data();
    let w_data = weight.data();
    let go_data = grad_out.data();

    let mut grad_bias = Tensor::zeros(&[g.co]);
    {
        let gb = grad_bias.data_mut();
        for b in 0..g.batch {
            for o in 0..g.co {
                let mut acc = T::zero();
                for &v in &go_data[(b * g.co + o) * vol..][..vol] {
                    acc += v;
                }
                gb[o] += acc;
            }
        }
    }

    // Weight gradient: per-tap dot products of grad_out rows with the
    // im2col rows. The reductions run in 8 fixed stripes so the compiler
    // can keep them in vector lanes; the stripe order is constant, so
    // results stay bit-reproducible across calls.
    let mut grad_weight = Tensor::zeros(weight.shape());
    {
        let gw = grad_weight.data_mut();
        let mut col = ColBuffer::new(&g);
        let cols = g.ci * k3;
        for b in 0..g.batch {
            col.fill_from(&g, &in_data[b * g.ci * vol..][..g.ci * vol]);
            let mut o = 0;
            while o < g.co {
                let ob = (g.co - o).min(4);
                for r in 0..cols {
                    let crow = &col.data[r * vol..][..vol];
                    for oo in 0..ob {
                        let go_row = &go_data[(b * g.co + o + oo) * vol..][..vol];
                        // Two independent 8-stripes keep the fma pipeline
                        // busy; the reduction order is fixed.
                        let mut lane_a = [T::zero(); 8];
                        let mut lane_b = [T::zero(); 8];
                        let mut x = 0;
                        while x + 16 <= vol {
                            for l in 0..8 {
                                lane_a[l] += go_row[x + l] * crow[x + l];
                                lane_b[l] += go_row[x + 8 + l] * crow[x + 8 + l];
                            }
                            x += 16;
                        }
                        while x + 8 <= vol {
                            for l in 0..8 {
                                lane_a[l] += go_row[x + l] * crow[x + l];
                            }
                            x += 8;
                        }
                        let mut l = 0;
                        while x < vol {
                            lane_a[l] += go_row[x] * crow[x];
                            l += 1;
                            x += 1;
                        }
                        let mut acc = T::zero();
                        for &v in lane_a.iter().chain(&lane_b) {
                            acc += v;
                        }
                        gw[(o + oo) * cols + r] += acc;
                    }
                }
                o += ob;
            }
        }
    }

    // Input gradient: cross-correlation of grad_out with the transposed,
    // spatially flipped kernel, which reuses the forward kernel.
    let mut flipped = Tensor::zeros(&[g.ci, g.co, g.k, g.k, g.k]);
    {
        let f = flipped.data_mut();
        for o in 0..g.co {
            for i in 0..g.ci {
                for dz in 0..g.k {
                    for dy in 0..g.k {
                        for dx in 0..g.k {
                            let src = w_data[(o * g.ci + i) * k3 + (dz * g.k + dy) * g.k + dx];
                            let e = ((g.k - 1 - dz) * g.k + (g.k - 1 - dy)) * g.k
                                + (g.k - 1 - dx);
                            f[(i * g.co + o) * k3 + e] = src;
                        }
                    }
                }
            }
        }
    }
    let zero_bias = Tensor::zeros(&[g.ci]);
    let grad_input = conv3d(grad_out, &flipped, &zero_bias, g.pad)?;

    Ok((grad_input, grad_weight, grad_bias))
}

fn pointwise_shapes(input: &[usize], weight: &[usize], bias: &[usize]) -> Result<(usize, usize, usize, usize)> {
    if input.len() != 3 || weight.len() != 2 {
        return Err(Error::ShapeMismatch {
            context: "pointwise_linear".into(),
            expected: "input [B,Ci,N], weight [Co,Ci]".into(),
            got: format!("input {input:?}, weight {weight:?}"),
        });
    }
    if input[1] != weight[1] {
        return Err(Error::ShapeMismatch {
            context: "pointwise_linear channels".into(),
            expected: format!("Ci={}", weight[1]),
            got: format!("Ci={}", input[1]),
        });
    }
    if bias.len() != 1 || bias[0] != weight[0] {
        return Err(Error::ShapeMismatch {
            context: "pointwise_linear bias".into(),
            expected: format!("[{}]", weight[0]),
            got: format!("{bias:?}"),
        });
    }
    Ok((input[0], input[1], weight[0], input[2]))
}

/// Shared per-point linear map: `output[b,o,n] = bias[o] + sum_i weight[o,i] * input[b,i,n]`.
pub fn pointwise_linear<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (batch, ci, co, n) = pointwise_shapes(input.shape(), weight.shape(), bias.shape())?;
    let mut out = Tensor::zeros(&[batch, co, n]);
    let in_data = input.data();
    let w_data = weight.data();
    let b_data = bias.data();
    let out_data = out.data_mut();
    for b in 0..batch {
        for o in 0..co {
            let dst = &mut out_data[(b * co + o) * n..][..n];
            dst.fill(b_data[o]);
            for i in 0..ci {
                let wgt = w_data[o * ci + i];
                let src = &in_data[(b * ci + i) * n..][..n];
                for x in 0..n {
                    dst[x] += wgt * src[x];
                }
            }
        }
    }
    Ok(out)
}

/// VJP of [`pointwise_linear`].
pub fn pointwise_linear_vjp<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (batch, ci, co, n) = pointwise_shapes(input.shape(), weight.shape(), &[weight.shape()[0]])?;
    if grad_out.shape() != [batch, co, n] {
        return Err(Error::ShapeMismatch {
            context: "pointwise_linear_vjp grad_out".into(),
            expected: format!("{:?}", [batch, co, n]),
            got: format!("{:?}", grad_out.shape()),
        });
    }
    let in_data = input.data();
    let w_data = weight.data();
    let go_data = grad_out.data();

    let mut grad_input = Tensor::zeros(input.shape());
    let gi = grad_input.data_mut();
    for b in 0..batch {
        for i in 0..ci {
            let dst = &mut gi[(b * ci + i) * n..][..n];
            for o in 0..co {
                let wgt = w_data[o * ci + i];
                let src = &go_data[(b * co + o) * n..][..n];
                for x in 0..n {
                    dst[x] += wgt * src[x];
                }
            }
        }
    }

    let mut grad_weight = Tensor::zeros(weight.shape());
    let gw = grad_weight.data_mut();
    let mut grad_bias = Tensor::zeros(&[co]);
    let gb = grad_bias.data_mut();
    for b in 0..batch {
        for o in 0..co {
            let go_row = &go_data[(b * co + o) * n..][..n];
            let mut acc_b = T::zero();
            for &v in go_row {
                acc_b += v;
            }
            gb[o] += acc_b;
            for i in 0..ci {
                let in_row = &in_data[(b * ci + i) * n..][..n];
                let mut acc = T::zero();
                for x in 0..n {
                    acc += go_row[x] * in_row[x];
                }
                gw[o * ci + i] += acc;
            }
        }
    }

    Ok((grad_input, grad_weight, grad_bias))
}

/// Saved context of a train-mode batch-norm forward, needed by its VJP.
#[derive(Clone, Debug)]
pub struct BatchNormCtx<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
}

fn bn_dims(input: &[usize], channels: usize) -> Result<(usize, usize, usize)> {
    if input.len() < 2 {
        return Err(Error::ShapeMismatch {
            context: "batch_norm input".into(),
            expected: "[B,C,..]".into(),
            got: format!("{input:?}"),
        });
    }
    if input[1] != channels {
        return Err(Error::ShapeMismatch {
            context: "batch_norm channels".into(),
            expected: format!("C={channels}"),
            got: format!("C={}", input[1]),
        });
    }
    let spatial: usize = input[2..].iter().product();
    Ok((input[0], input[1], spatial))
}

/// Train-mode batch norm. Normalizes each channel by its batch statistics
/// (biased variance), updates the running statistics (unbiased variance), and
/// returns the context required by [`batch_norm_train_vjp`].
pub fn batch_norm_train<T: Scalar>(
    input: &Tensor<T>,
    state: &mut BatchNormState<T>,
) -> Result<(Tensor<T>, BatchNormCtx<T>)> {
    let (batch, c, s) = bn_dims(input.shape(), state.channels())?;
    let m = batch * s;
    if m < 2 {
        return Err(Error::InvalidArgument(format!(
            "batch_norm train mode needs at least 2 elements per channel, got {m}"
        )));
    }
    let x = input.data();
    let mut out = Tensor::zeros(input.shape());
    let mut xhat = Tensor::zeros(input.shape());
    let mut inv_std = vec![T::zero(); c];
    let inv_m = 1.0 / m as f64;

    for ch in 0..c {
        let mut sum = 0.0f64;
        for b in 0..batch {
            sum += striped_sum(&x[(b * c + ch) * s..][..s], |v| v.as_f64());
        }
        let mean = sum * inv_m;
        let mut var_sum = 0.0f64;
        for b in 0..batch {
            var_sum += striped_sum(&x[(b * c + ch) * s..][..s], |v| {
                let d = v.as_f64() - mean;
                d * d
            });
        }
        let var = var_sum * inv_m;
        let istd = 1.0 / (var + state.eps).sqrt();
        inv_std[ch] = T::from_f64(istd);

        let mean_t = T::from_f64(mean);
        let istd_t = T::from_f64(istd);
        let gamma = state.gamma.value.data()[ch];
        let beta = state.beta.value.data()[ch];
        let (xh, od) = (xhat.data_mut(), out.data_mut());
        for b in 0..batch {
            let base = (b * c + ch) * s;
            for off in base..base + s {
                let h = (x[off] - mean_t) * istd_t;
                xh[off] = h;
                od[off] = gamma * h + beta;
            }
        }

        // Running statistics use the unbiased variance.
        let unbiased = var * m as f64 / (m - 1) as f64;
        let mom = state.momentum;
        let rm = state.running_mean.data_mut();
        rm[ch] = T::from_f64((1.0 - mom) * rm[ch].as_f64() + mom * mean);
        let rv = state.running_var.data_mut();
        rv[ch] = T::from_f64((1.0 - mom) * rv[ch].as_f64() + mom * unbiased);
    }

    Ok((out, BatchNormCtx { xhat, inv_std }))
}

/// Eval-mode batch norm using the running statistics.
pub fn batch_norm_eval<T: Scalar>(
    input: &Tensor<T>,
    state: &BatchNormState<T>,
) -> Result<Tensor<T>> {
    let (batch, c, s) = bn_dims(input.shape(), state.channels())?;
    let x = input.data();
    let mut out = Tensor::zeros(input.shape());
    let od = out.data_mut();
    for ch in 0..c {
        let mean = state.running_mean.data()[ch];
        let istd = T::from_f64(
            1.0 / (state.running_var.data()[ch].as_f64() + state.eps).sqrt(),
        );
        let gamma = state.gamma.value.data()[ch];
        let beta = state.beta.value.data()[ch];
        for b in 0..batch {
            let base = (b * c + ch) * s;
            for off in base..base + s {
                od[off] = gamma * (x[off] - mean) * istd + beta;
            }
        }
    }
    Ok(out)
}

/// Dispatching wrapper over the two batch-norm modes.
pub fn batch_norm<T: Scalar>(
    input: &Tensor<T>,
    state: &mut BatchNormState<T>,
    mode: Mode,
) -> Result<Tensor<T>> {
    match mode {
        Mode::Train => batch_norm_train(input, state).map(|(out, _)| out),
        Mode::Eval => batch_norm_eval(input, state),
    }
}

/// VJP of train-mode batch norm. Returns (d_input, d_gamma, d_beta).
pub fn batch_norm_train_vjp<T: Scalar>(
    ctx: &BatchNormCtx<T>,
    gamma: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let c = gamma.len();
    let (batch, _, s) = bn_dims(grad_out.shape(), c)?;
    ctx.xhat.check_same_shape(grad_out, "batch_norm_train_vjp")?;
    let m = batch * s;
    let inv_m = 1.0 / m as f64;
    let go = grad_out.data();
    let xh = ctx.xhat.data();

    let mut d_input = Tensor::zeros(grad_out.shape());
    let mut d_gamma = Tensor::zeros(&[c]);
    let mut d_beta = Tensor::zeros(&[c]);
    for ch in 0..c {
        let mut sum_go = 0.0f64;
        let mut sum_go_xh = 0.0f64;
        for b in 0..batch {
            let base = (b * c + ch) * s;
            sum_go += striped_sum(&go[base..base + s], |v| v.as_f64());
            sum_go_xh += striped_sum_zip(&go[base..base + s], &xh[base..base + s]);
        }
        d_beta.data_mut()[ch] = T::from_f64(sum_go);
        d_gamma.data_mut()[ch] = T::from_f64(sum_go_xh);

        let mean_go = T::from_f64(sum_go * inv_m);
        let mean_go_xh = T::from_f64(sum_go_xh * inv_m);
        let scale = T::from_f64(gamma.data()[ch].as_f64() * ctx.inv_std[ch].as_f64());
        let di = d_input.data_mut();
        for b in 0..batch {
            let base = (b * c + ch) * s;
            for off in base..base + s {
                di[off] = scale * (go[off] - mean_go - xh[off] * mean_go_xh);
            }
        }
    }
    Ok((d_input, d_gamma, d_beta))
}

/// Elementwise activation.
pub fn activation<T: Scalar>(input: &Tensor<T>, kind: Activation) -> Tensor<T> {
    match kind {
        Activation::Relu => input.map(|x| if x > T::zero() { x } else { T::zero() }),
        Activation::LeakyRelu(slope) => {
            let s = T::from_f64(slope);
            input.map(|x| if x > T::zero() { x } else { x * s })
        }
    }
}

/// VJP of [`activation`], taking the pre-activation input. The subgradient at
/// exactly 0 is 0 for ReLU and the negative slope for leaky ReLU.
pub fn activation_vjp<T: Scalar>(input: &Tensor<T>, kind: Activation, grad_out: &Tensor<T>) -> Tensor<T> {
    assert_eq!(input.shape(), grad_out.shape(), "activation_vjp shapes");
    let mut out = Tensor::zeros(input.shape());
    let (x, go, o) = (input.data(), grad_out.data(), out.data_mut());
    match kind {
        Activation::Relu => {
            for idx in 0..x.len() {
                o[idx] = if x[idx] > T::zero() { go[idx] } else { T::zero() };
            }
        }
        Activation::LeakyRelu(slope) => {
            let s = T::from_f64(slope);
            for idx in 0..x.len() {
                o[idx] = if x[idx] > T::zero() { go[idx] } else { go[idx] * s };
            }
        }
    }
    out
}
