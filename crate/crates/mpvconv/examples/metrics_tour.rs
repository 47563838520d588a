//! Walk through the segmentation metrics on small hand-checkable label
//! vectors.
//!
//! ```bash
//! cargo run --release --example metrics_tour
//! ```

use mpvconv::metrics::{dataset_miou, mean_accuracy, overall_accuracy, shape_iou};

fn main() -> mpvconv::Result<()> {
    let truth = vec![0, 0, 1, 1];
    let pred = vec![0, 1, 1, 1];
    println!("truth: {truth:?}");
    println!("pred:  {pred:?}");
    println!(
        "shape IoU over parts {{0,1}}: {:.5} (part0 1/2, part1 2/3)",
        shape_iou(&truth, &pred, &[0, 1])?
    );
    println!("mean accuracy: {:.5}", mean_accuracy(&truth, &pred, 2)?);
    println!("overall accuracy: {:.5}", overall_accuracy(&truth, &pred)?);

    // A part missing from both prediction and truth counts as IoU 1.
    let iou = shape_iou(&[0, 0], &[0, 0], &[0, 1])?;
    println!("absent part convention: shape IoU {iou:.2} when part 1 never appears");

    let per_shape = vec![1.0, 0.75, 0.5];
    println!("dataset mIoU of {per_shape:?}: {:.5}", dataset_miou(&per_shape)?);
    Ok(())
}
