//! Train the desk-scale segmentation network on the synthetic hemisphere
//! dataset, evaluate it, and dump one cloud's predictions for plotting.
//!
//! Uses a reduced dataset so the demo finishes in about a minute; the full
//! desk-scale protocol lives in the provided config files and the
//! acceptance tests.
//!
//! ```bash
//! cargo run --release --example train_hemispheres
//! ```

use mpvconv::data::{dump_predictions, generate_synthetic, SyntheticSpec};
use mpvconv::model::TrainConfig;
use mpvconv::{evaluate, train, Mpvcnn, MpvcnnConfig};

fn main() -> mpvconv::Result<()> {
    let spec = SyntheticSpec {
        n_samples: 24,
        points_per_cloud: 256,
        noise_sigma: 0.02,
    };
    let train_set = generate_synthetic::<f32>(&spec, 11)?;
    let val_set = generate_synthetic::<f32>(
        &SyntheticSpec {
            n_samples: 8,
            ..spec
        },
        12,
    )?;

    let mut model = Mpvcnn::<f32>::build(MpvcnnConfig::desk_scale(1, 2), 0)?;
    let tcfg = TrainConfig {
        batch_size: 8,
        learning_rate: 0.001,
        epochs: 4,
        seed: 0,
        ..TrainConfig::default()
    };
    println!("training on {} clouds of {} points...", train_set.len(), 256);
    let outcome = train(&mut model, &train_set, &val_set, &tcfg)?;
    for m in &outcome.metrics {
        println!(
            "epoch {}  loss {:.4}  val mIoU {:.4}  val mAcc {:.4}",
            m.epoch, m.train_loss, m.val_miou, m.val_macc
        );
    }

    let report = evaluate(&mut model, &val_set)?;
    println!(
        "final: mIoU {:.4}, mAcc {:.4}, accuracy {:.4} over {} shapes",
        report.miou, report.macc, report.accuracy, report.num_shapes
    );

    let cloud = &val_set.samples[0];
    let predicted = model.predict(cloud)?;
    let path = std::env::temp_dir().join("hemisphere_predictions.txt");
    dump_predictions(cloud, &predicted, &path)?;
    println!("wrote per-point dump to {}", path.display());
    Ok(())
}
