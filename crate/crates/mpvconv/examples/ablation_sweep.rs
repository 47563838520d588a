//! Sweep the layer's configuration space (combination modes, fusion stage,
//! 1x1x1 conv, resolution, conv depth) at toy scale and tabulate the
//! validation mIoU of each variant.
//!
//! ```bash
//! cargo run --release --example ablation_sweep
//! ```

use std::path::Path;

use mpvconv::commands::{format_ablation_table, run_ablation};
use mpvconv::config::RunConfig;

fn main() -> mpvconv::Result<()> {
    let text = "\
dataset.train_samples = 12
dataset.val_samples = 4
dataset.points_per_cloud = 128
model.layers = mpvconv:8:6,mlp:16
train.epochs = 3
train.batch_size = 4
";
    let rc = RunConfig::parse(text, Path::new("ablation_sweep.cfg"))?;
    let rows = run_ablation(&rc)?;
    print!("{}", format_ablation_table(&rows));
    Ok(())
}
