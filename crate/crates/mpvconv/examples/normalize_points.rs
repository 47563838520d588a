//! Map a raw point cloud into the unit cube and show that the result is
//! invariant to translation and uniform scaling.
//!
//! ```bash
//! cargo run --release --example normalize_points
//! ```

use mpvconv::{normalize_coords, RawCloud, Tensor};

fn main() -> mpvconv::Result<()> {
    let coords = vec![
        [2.0, 2.0, 2.0],
        [4.0, 2.0, 2.0],
        [2.0, 4.0, 2.0],
        [3.0, 3.0, 5.0],
    ];
    let features = Tensor::<f32>::full(&[coords.len(), 1], 1.0);
    let cloud = RawCloud::new(coords.clone(), features.clone(), None)?;
    let norm = normalize_coords(&cloud)?;

    println!("centroid: {:?}", norm.centroid);
    println!("radius:   {:.6}", norm.radius);
    for (raw, hat) in cloud.coords.iter().zip(&norm.coords_hat) {
        println!("{raw:?} -> [{:.4}, {:.4}, {:.4}]", hat[0], hat[1], hat[2]);
    }

    // Same cloud, scaled by 3 and moved by (50, -20, 7).
    let moved: Vec<[f64; 3]> = coords
        .iter()
        .map(|p| [p[0] * 3.0 + 50.0, p[1] * 3.0 - 20.0, p[2] * 3.0 + 7.0])
        .collect();
    let norm_moved = normalize_coords(&RawCloud::new(moved, features, None)?)?;
    let max_diff: f64 = norm
        .coords_hat
        .iter()
        .zip(&norm_moved.coords_hat)
        .flat_map(|(a, b)| (0..3).map(move |i| (a[i] - b[i]).abs()))
        .fold(0.0, f64::max);
    println!("max deviation after scale+translate: {max_diff:.2e}");
    Ok(())
}
