use crate::error::{Error, Result};
use crate::geometry::IGNORE_LABEL;

#[derive(Clone, Debug, PartialEq)]
pub struct SegMetrics {
    /// `None` for classes absent from both prediction and ground truth.
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub overall_accuracy: f64,
    /// Mean recall over classes present in the ground truth.
    pub mean_accuracy: f64,
    /// `confusion[gt][pred]`.
    pub confusion: Vec<Vec<u64>>,
}

/// Segmentation metrics; points whose ground truth is the ignore label are skipped.
pub fn miou(pred: &[i64], gt: &[i64], num_classes: usize) -> Result<SegMetrics> {
    if pred.len() != gt.len() {
        return Err(Error::Metric(format!("{} predictions for {} labels", pred.len(), gt.len())));
    }
    let k = num_classes as i64;
    let mut confusion = vec![vec![0u64; num_classes]; num_classes];
    let mut total = 0u64;
    for (&p, &g) in pred.iter().zip(gt) {
        if g == IGNORE_LABEL {
            continue;
        }
        if !(0..k).contains(&g) || !(0..k).contains(&p) {
            return Err(Error::Metric(format!("label pair ({p}, {g}) outside 0..{num_classes}")));
        }
        confusion[g as usize][p as usize] += 1;
        total += 1;
    }
    if total == 0 {
        return Err(Error::Metric("every ground-truth label is ignored".into()));
    }
    let mut per_class_iou = Vec::with_capacity(num_classes);
    let mut recalls = Vec::new();
    let mut correct = 0u64;
    for c in 0..num_classes {
        let tp = confusion[c][c];
        let gt_c: u64 = confusion[c].iter().sum();
        let pred_c: u64 = confusion.iter().map(|r| r[c]).sum();
        correct += tp;
        let union = gt_c + pred_c - tp;
        per_class_iou.push((union > 0).then(|| tp as f64 / union as f64));
        if gt_c > 0 {
            recalls.push(tp as f64 / gt_c as f64);
        }
    }
    let present: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
    Ok(SegMetrics {
        miou: present.iter().sum::<f64>() / present.len() as f64,
        overall_accuracy: correct as f64 / total as f64,
        mean_accuracy: recalls.iter().sum::<f64>() / recalls.len() as f64,
        per_class_iou,
        confusion,
    })
}
