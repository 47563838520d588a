//! The two bridges between point and voxel domains: average-pool
//! voxelization and trilinear devoxelization, both differentiable with
//! respect to features. Coordinates stay in `f64` and carry no gradients.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Point coordinates scaled from the unit cube to `[0, r-1]^3`.
#[derive(Clone, Debug)]
pub struct ScaledCoords {
    pub coords: Vec<[f64; 3]>,
    pub resolution: usize,
}

/// Multiply unit-cube coordinates by `r-1`, clamping roundoff back into
/// `[0, r-1]`.
pub fn scale_coords(coords_hat: &[[f64; 3]], resolution: usize) -> Result<ScaledCoords> {
    if resolution < 2 {
        return Err(Error::InvalidArgument(format!(
            "voxel resolution must be >= 2, got {resolution}"
        )));
    }
    let eps = 1e-9;
    let hi = (resolution - 1) as f64;
    let mut coords = Vec::with_capacity(coords_hat.len());
    for (i, p) in coords_hat.iter().enumerate() {
        let mut q = [0.0f64; 3];
        for a in 0..3 {
            if !(-eps..=1.0 + eps).contains(&p[a]) {
                return Err(Error::InvalidArgument(format!(
                    "scale_coords: point {i} axis {a} = {} outside [0,1]",
                    p[a]
                )));
            }
            q[a] = (p[a] * hi).clamp(0.0, hi);
        }
        coords.push(q);
    }
    Ok(ScaledCoords {
        coords,
        resolution,
    })
}

/// Dense voxel feature volume with per-voxel point counts.
#[derive(Clone, Debug)]
pub struct VoxelGrid<T> {
    pub resolution: usize,
    pub channels: usize,
    /// `[C, r, r, r]` feature volume; zero wherever `counts` is zero.
    pub data: Tensor<T>,
    /// `r^3` occupancy counts in `u*r*r + v*r + w` order.
    pub counts: Vec<u32>,
}

fn voxel_index(p: &[f64; 3], r: usize) -> usize {
    let last = r - 1;
    let u = (p[0].floor() as usize).min(last);
    let v = (p[1].floor() as usize).min(last);
    let w = (p[2].floor() as usize).min(last);
    (u * r + v) * r + w
}

/// Bucket points by the floor of their scaled coordinates and average the
/// features of each bucket. Points sitting exactly on the upper boundary
/// fall into the last cell. Iterates points in index order.
pub fn voxelize_avg<T: Scalar>(coords: &ScaledCoords, features: &Tensor<T>) -> Result<VoxelGrid<T>> {
    let n = coords.coords.len();
    let r = coords.resolution;
    if features.rank() != 2 || features.shape()[0] != n {
        return Err(Error::ShapeMismatch {
            context: "voxelize_avg features".into(),
            expected: format!("[{n},C]"),
            got: format!("{:?}", features.shape()),
        });
    }
    let hi = (r - 1) as f64;
    let c = features.shape()[1];
    let vol = r * r * r;
    let mut data = Tensor::zeros(&[c, r, r, r]);
    let mut counts = vec![0u32; vol];
    {
        let d = data.data_mut();
        let f = features.data();
        for (i, p) in coords.coords.iter().enumerate() {
            if p.iter().any(|&x| !(0.0..=hi).contains(&x)) {
                return Err(Error::InvalidArgument(format!(
                    "voxelize_avg: point {i} at {p:?} outside [0,{hi}]"
                )));
            }
            let idx = voxel_index(p, r);
            counts[idx] += 1;
            for ch in 0..c {
                d[ch * vol + idx] += f[i * c + ch];
            }
        }
        for (idx, &count) in counts.iter().enumerate() {
            if count > 0 {
                let inv = T::from_f64(1.0 / count as f64);
                for ch in 0..c {
                    d[ch * vol + idx] *= inv;
                }
            }
        }
    }
    Ok(VoxelGrid {
        resolution: r,
        channels: c,
        data,
        counts,
    })
}

/// VJP of [`voxelize_avg`] w.r.t. features: each point receives the gradient
/// of its voxel divided by the voxel's point count.
pub fn voxelize_avg_vjp<T: Scalar>(
    coords: &ScaledCoords,
    counts: &[u32],
    grad_grid: &Tensor<T>,
) -> Result<Tensor<T>> {
    let n = coords.coords.len();
    let r = coords.resolution;
    let vol = r * r * r;
    if grad_grid.rank() != 4 || grad_grid.shape()[1..] != [r, r, r] {
        return Err(Error::ShapeMismatch {
            context: "voxelize_avg_vjp grad_grid".into(),
            expected: format!("[C,{r},{r},{r}]"),
            got: format!("{:?}", grad_grid.shape()),
        });
    }
    let c = grad_grid.shape()[0];
    let mut grad_features = Tensor::zeros(&[n, c]);
    let gf = grad_features.data_mut();
    let gg = grad_grid.data();
    for (i, p) in coords.coords.iter().enumerate() {
        let idx = voxel_index(p, r);
        let count = counts[idx];
        debug_assert!(count > 0, "occupied voxel must have a positive count");
        let inv = T::from_f64(1.0 / count as f64);
        for ch in 0..c {
            gf[i * c + ch] = gg[ch * vol + idx] * inv;
        }
    }
    Ok(grad_features)
}

/// The 8 lattice corners and trilinear weights of a query point. Corners are
/// the floor/ceil per axis clamped to `[0, r-1]`; weights are products of the
/// per-axis linear weights and always sum to 1.
pub fn trilinear_weights(p: &[f64; 3], r: usize) -> [(usize, f64); 8] {
    let last = r - 1;
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    let mut frac = [0.0f64; 3];
    for a in 0..3 {
        let fl = p[a].floor();
        let l = (fl as usize).min(last);
        lo[a] = l;
        hi[a] = (l + 1).min(last);
        frac[a] = p[a] - fl;
    }
    let mut out = [(0usize, 0.0f64); 8];
    for (slot, corner) in out.iter_mut().enumerate() {
        let (bx, by, bz) = (slot & 1, (slot >> 1) & 1, (slot >> 2) & 1);
        let u = if bx == 0 { lo[0] } else { hi[0] };
        let v = if by == 0 { lo[1] } else { hi[1] };
        let w = if bz == 0 { lo[2] } else { hi[2] };
        let wx = if bx == 0 { 1.0 - frac[0] } else { frac[0] };
        let wy = if by == 0 { 1.0 - frac[1] } else { frac[1] };
        let wz = if bz == 0 { 1.0 - frac[2] } else { frac[2] };
        *corner = ((u * r + v) * r + w, wx * wy * wz);
    }
    out
}

/// Sample the grid at each point with trilinear interpolation: `[N,C]` out.
pub fn devoxelize_trilinear<T: Scalar>(
    grid: &VoxelGrid<T>,
    coords: &ScaledCoords,
) -> Result<Tensor<T>> {
    if grid.resolution != coords.resolution {
        return Err(Error::InvalidArgument(format!(
            "devoxelize: grid resolution {} != coords resolution {}",
            grid.resolution, coords.resolution
        )));
    }
    let (r, c) = (grid.resolution, grid.channels);
    let vol = r * r * r;
    let n = coords.coords.len();
    let mut out = Tensor::zeros(&[n, c]);
    let od = out.data_mut();
    let gd = grid.data.data();
    for (i, p) in coords.coords.iter().enumerate() {
        let corners = trilinear_weights(p, r);
        for ch in 0..c {
            let plane = &gd[ch * vol..][..vol];
            let mut acc = T::zero();
            for &(idx, w) in &corners {
                acc += plane[idx] * T::from_f64(w);
            }
            od[i * c + ch] = acc;
        }
    }
    Ok(out)
}

/// VJP of [`devoxelize_trilinear`] w.r.t. the grid data: scatters each
/// point's weighted gradient back into its 8 corners.
pub fn devoxelize_trilinear_vjp<T: Scalar>(
    coords: &ScaledCoords,
    channels: usize,
    grad_points: &Tensor<T>,
) -> Result<Tensor<T>> {
    let n = coords.coords.len();
    let r = coords.resolution;
    let vol = r * r * r;
    if grad_points.shape() != [n, channels] {
        return Err(Error::ShapeMismatch {
            context: "devoxelize_trilinear_vjp grad_points".into(),
            expected: format!("[{n},{channels}]"),
            got: format!("{:?}", grad_points.shape()),
        });
    }
    let mut grad_grid = Tensor::zeros(&[channels, r, r, r]);
    let gg = grad_grid.data_mut();
    let gp = grad_points.data();
    for (i, p) in coords.coords.iter().enumerate() {
        let corners = trilinear_weights(p, r);
        for ch in 0..channels {
            let g = gp[i * channels + ch];
            for &(idx, w) in &corners {
                gg[ch * vol + idx] += g * T::from_f64(w);
            }
        }
    }
    Ok(grad_grid)
}
