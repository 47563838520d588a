//! Voxelize a random cloud, sample the grid back at the points, and check
//! the conservation and interpolation properties along the way.
//!
//! ```bash
//! cargo run --release --example voxel_roundtrip
//! ```

use rand::Rng;

use mpvconv::nn::seeded_rng;
use mpvconv::{devoxelize_trilinear, scale_coords, trilinear_weights, voxelize_avg, Tensor};

fn main() -> mpvconv::Result<()> {
    let mut rng = seeded_rng(42, "voxel-roundtrip");
    let (n, channels, resolution) = (256, 4, 8);

    let coords_hat: Vec<[f64; 3]> = (0..n)
        .map(|_| {
            [
                rng.random::<f64>(),
                rng.random::<f64>(),
                rng.random::<f64>(),
            ]
        })
        .collect();
    let features = Tensor::<f32>::from_fn(&[n, channels], |_| rng.random::<f32>() * 2.0 - 1.0);

    let scaled = scale_coords(&coords_hat, resolution)?;
    let grid = voxelize_avg(&scaled, &features)?;
    let occupied = grid.counts.iter().filter(|&&c| c > 0).count();
    println!(
        "{n} points -> {}^3 grid, {occupied} occupied voxels, counts sum {}",
        resolution,
        grid.counts.iter().sum::<u32>()
    );

    // Mass conservation: counts-weighted voxel features match the inputs.
    let vol = resolution.pow(3);
    for ch in 0..channels {
        let grid_mass: f64 = (0..vol)
            .map(|i| grid.counts[i] as f64 * grid.data.data()[ch * vol + i] as f64)
            .sum();
        let point_mass: f64 = (0..n).map(|i| features.at(&[i, ch]) as f64).sum();
        println!("channel {ch}: grid mass {grid_mass:+.4}, point mass {point_mass:+.4}");
    }

    // Trilinear weights always sum to one.
    let worst = (0..1000)
        .map(|_| {
            let p = [
                rng.random::<f64>() * (resolution - 1) as f64,
                rng.random::<f64>() * (resolution - 1) as f64,
                rng.random::<f64>() * (resolution - 1) as f64,
            ];
            let sum: f64 = trilinear_weights(&p, resolution)
                .iter()
                .map(|&(_, w)| w)
                .sum();
            (sum - 1.0).abs()
        })
        .fold(0.0, f64::max);
    println!("worst |sum(weights) - 1| over 1000 points: {worst:.2e}");

    let back = devoxelize_trilinear(&grid, &scaled)?;
    println!(
        "devoxelized features: shape {:?}, first point {:?} -> {:?}",
        back.shape(),
        &features.data()[..channels],
        &back.data()[..channels]
    );
    Ok(())
}
