//! Run one point-voxel convolution layer forward in every combination mode
//! and demonstrate the permutation equivariance of the outputs.
//!
//! ```bash
//! cargo run --release --example layer_forward
//! ```

use rand::Rng;

use mpvconv::layer::{CombinationMode, MpvConvConfig, MpvConvLayer};
use mpvconv::nn::seeded_rng;
use mpvconv::{Mode, Tensor};

fn main() -> mpvconv::Result<()> {
    let mut rng = seeded_rng(7, "layer-forward");
    let (batch, in_channels, n) = (2, 3, 128);
    let coords: Vec<Vec<[f64; 3]>> = (0..batch)
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
    let features =
        Tensor::<f32>::from_fn(&[batch, in_channels, n], |_| rng.random::<f32>() - 0.5);

    for mode in CombinationMode::ALL {
        let mut cfg = MpvConvConfig::new(in_channels, 16, 8);
        cfg.combination_mode = mode;
        let mut layer = MpvConvLayer::<f32>::new("demo", cfg, 0)?;
        let out = layer.forward(&coords, &features, Mode::Eval)?;
        let mean = out.data().iter().map(|&v| v as f64).sum::<f64>() / out.len() as f64;
        println!(
            "mode {mode}: output {:?}, {} params, mean activation {mean:+.4}",
            out.shape(),
            layer.param_count()
        );
    }

    // Permute the points of sample 0; outputs permute with them.
    let mut layer = MpvConvLayer::<f32>::new("demo", MpvConvConfig::new(in_channels, 16, 8), 0)?;
    let out = layer.forward(&coords, &features, Mode::Eval)?;
    let perm: Vec<usize> = (0..n).rev().collect();
    let coords_p = vec![
        perm.iter().map(|&i| coords[0][i]).collect::<Vec<_>>(),
        coords[1].clone(),
    ];
    let features_p = Tensor::from_fn(&[batch, in_channels, n], |off| {
        let (b, rest) = (off / (in_channels * n), off % (in_channels * n));
        let (c, pt) = (rest / n, rest % n);
        if b == 0 {
            features.at(&[0, c, perm[pt]])
        } else {
            features.at(&[b, c, pt])
        }
    });
    let mut layer_p =
        MpvConvLayer::<f32>::new("demo", MpvConvConfig::new(in_channels, 16, 8), 0)?;
    let out_p = layer_p.forward(&coords_p, &features_p, Mode::Eval)?;

    let mut max_diff = 0.0f64;
    for ch in 0..layer.out_channels() {
        for (new_idx, &old_idx) in perm.iter().enumerate() {
            let d = (out_p.at(&[0, ch, new_idx]) as f64 - out.at(&[0, ch, old_idx]) as f64).abs();
            max_diff = max_diff.max(d);
        }
    }
    println!("permutation equivariance deviation: {max_diff:.2e}");
    Ok(())
}
