//! Part-segmentation metrics: per-shape IoU averaged over the shape's parts,
//! dataset mIoU as the mean over shapes, and class-mean recall (mAcc).

use crate::error::{Error, Result};

/// Per-part intersection/union/support counts for one shape.
#[derive(Clone, Debug, Default)]
pub struct ConfusionCounts {
    pub parts: Vec<u32>,
    pub intersection: Vec<usize>,
    pub union: Vec<usize>,
    pub support: Vec<usize>,
}

fn check_lengths(true_labels: &[u32], pred_labels: &[u32]) -> Result<()> {
    if true_labels.len() != pred_labels.len() {
        return Err(Error::ShapeMismatch {
            context: "metrics labels".into(),
            expected: format!("{}", true_labels.len()),
            got: format!("{}", pred_labels.len()),
        });
    }
    Ok(())
}

/// Count per-part intersections, unions and ground-truth supports.
pub fn confusion_counts(
    true_labels: &[u32],
    pred_labels: &[u32],
    parts: &[u32],
) -> Result<ConfusionCounts> {
    check_lengths(true_labels, pred_labels)?;
    let mut counts = ConfusionCounts {
        parts: parts.to_vec(),
        intersection: vec![0; parts.len()],
        union: vec![0; parts.len()],
        support: vec![0; parts.len()],
    };
    for (pi, &part) in parts.iter().enumerate() {
        for (&t, &p) in true_labels.iter().zip(pred_labels) {
            let in_true = t == part;
            let in_pred = p == part;
            if in_true && in_pred {
                counts.intersection[pi] += 1;
            }
            if in_true || in_pred {
                counts.union[pi] += 1;
            }
            if in_true {
                counts.support[pi] += 1;
            }
        }
    }
    Ok(counts)
}

/// Mean over `parts` of per-part IoU, with the convention that a part absent
/// from both prediction and ground truth scores 1.
pub fn shape_iou(true_labels: &[u32], pred_labels: &[u32], parts: &[u32]) -> Result<f64> {
    if parts.is_empty() {
        return Err(Error::InvalidArgument("shape_iou: empty part set".into()));
    }
    let counts = confusion_counts(true_labels, pred_labels, parts)?;
    let mut total = 0.0;
    for pi in 0..parts.len() {
        total += if counts.union[pi] == 0 {
            1.0
        } else {
            counts.intersection[pi] as f64 / counts.union[pi] as f64
        };
    }
    Ok(total / parts.len() as f64)
}

/// Arithmetic mean of per-shape IoUs.
pub fn dataset_miou(per_shape_ious: &[f64]) -> Result<f64> {
    if per_shape_ious.is_empty() {
        return Err(Error::InvalidArgument(
            "dataset_miou: empty shape list".into(),
        ));
    }
    Ok(per_shape_ious.iter().sum::<f64>() / per_shape_ious.len() as f64)
}

/// Mean per-class recall over the classes present in the ground truth.
pub fn mean_accuracy(true_labels: &[u32], pred_labels: &[u32], num_classes: usize) -> Result<f64> {
    check_lengths(true_labels, pred_labels)?;
    if let Some(&bad) = true_labels
        .iter()
        .chain(pred_labels)
        .find(|&&l| l as usize >= num_classes)
    {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {num_classes} classes"
        )));
    }
    let mut correct = vec![0usize; num_classes];
    let mut support = vec![0usize; num_classes];
    for (&t, &p) in true_labels.iter().zip(pred_labels) {
        support[t as usize] += 1;
        if t == p {
            correct[t as usize] += 1;
        }
    }
    let mut total = 0.0;
    let mut present = 0usize;
    for c in 0..num_classes {
        if support[c] > 0 {
            total += correct[c] as f64 / support[c] as f64;
            present += 1;
        }
    }
    if present == 0 {
        return Err(Error::InvalidArgument(
            "mean_accuracy: no ground-truth labels".into(),
        ));
    }
    Ok(total / present as f64)
}

/// Fraction of points labeled correctly.
pub fn overall_accuracy(true_labels: &[u32], pred_labels: &[u32]) -> Result<f64> {
    check_lengths(true_labels, pred_labels)?;
    if true_labels.is_empty() {
        return Err(Error::InvalidArgument("overall_accuracy: empty".into()));
    }
    let correct = true_labels
        .iter()
        .zip(pred_labels)
        .filter(|(t, p)| t == p)
        .count();
    Ok(correct as f64 / true_labels.len() as f64)
}
