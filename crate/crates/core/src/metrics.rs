//! Segmentation metrics accumulated through one integer confusion matrix.
//!
//! Rows index ground truth, columns the prediction. The matrix is exact
//! (u64 counts), so batched and streaming accumulation agree bit-for-bit
//! and merging partial matrices is plain addition.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Vec<u64>,
    k: usize,
    pub ignored: u64,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::Config(format!("confusion matrix needs >= 2 classes, got {k}")));
        }
        Ok(ConfusionMatrix { counts: vec![0; k * k], k, ignored: 0 })
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    pub fn at(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.k + pred]
    }

    /// Tallies one label/prediction pair per pixel.
    pub fn record(&mut self, gt: &[u32], pred: &[u32], ignore: Option<u32>) -> Result<()> {
        if gt.len() != pred.len() {
            return Err(Error::shape(
                "confusion",
                format!("{} labels vs {} predictions", gt.len(), pred.len()),
            ));
        }
        for (&g, &p) in gt.iter().zip(pred) {
            if Some(g) == ignore {
                self.ignored += 1;
                continue;
            }
            if g as usize >= self.k || p as usize >= self.k {
                return Err(Error::Data(format!(
                    "class pair ({g}, {p}) out of range for {} classes",
                    self.k
                )));
            }
            self.counts[g as usize * self.k + p as usize] += 1;
        }
        Ok(())
    }

    /// Adds another matrix accumulated over a disjoint pixel set.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.k != other.k {
            return Err(Error::shape("confusion", "class count mismatch in merge"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.ignored += other.ignored;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub oa: f64,
    pub miou: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// `None` for classes absent from both truth and prediction.
    pub per_class_iou: Vec<Option<f64>>,
}

/// Reduces the matrix to the reported numbers.
///
/// Per class: TP on the diagonal, FP down the column, FN along the row.
/// Classes whose union is empty carry no information and drop out of every
/// mean. F1 combines the mean precision and mean recall, not per-class F1s.
pub fn metrics(cm: &ConfusionMatrix) -> Result<Metrics> {
    let k = cm.k;
    let total = cm.total();
    if total == 0 {
        return Err(Error::Metrics("every pixel was ignored".into()));
    }

    let mut tp_sum = 0u64;
    let mut ious = Vec::with_capacity(k);
    let mut precs = Vec::new();
    let mut recs = Vec::new();
    for c in 0..k {
        let tp = cm.at(c, c);
        let row: u64 = (0..k).map(|j| cm.at(c, j)).sum();
        let col: u64 = (0..k).map(|i| cm.at(i, c)).sum();
        let (fp, fn_) = (col - tp, row - tp);
        tp_sum += tp;
        if tp + fp + fn_ == 0 {
            ious.push(None);
            continue;
        }
        ious.push(Some(tp as f64 / (tp + fp + fn_) as f64));
        precs.push(if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 });
        recs.push(if tp + fn_ > 0 { tp as f64 / (tp + fn_) as f64 } else { 0.0 });
    }

    let live: Vec<f64> = ious.iter().flatten().copied().collect();
    let miou = live.iter().sum::<f64>() / live.len() as f64;
    let precision = precs.iter().sum::<f64>() / precs.len() as f64;
    let recall = recs.iter().sum::<f64>() / recs.len() as f64;
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(Metrics {
        oa: tp_sum as f64 / total as f64,
        miou,
        precision,
        recall,
        f1,
        per_class_iou: ious,
    })
}

/// Accuracy under the denominator that counts every pixel once per class.
/// Kept for audit; `Metrics::oa` is the standard correct-over-total form.
pub fn oa_classwise_denominator(cm: &ConfusionMatrix) -> Result<f64> {
    let m = metrics(cm)?;
    Ok(m.oa / cm.k as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitRng;

    fn filled(k: usize, gt: &[u32], pred: &[u32]) -> ConfusionMatrix {
        let mut cm = ConfusionMatrix::new(k).unwrap();
        cm.record(gt, pred, Some(255)).unwrap();
        cm
    }

    #[test]
    fn perfect_prediction_scores_one_everywhere() {
        let gt = [0u32, 1, 2, 1, 0, 2, 2];
        let m = metrics(&filled(3, &gt, &gt)).unwrap();
        assert_eq!((m.oa, m.miou, m.f1), (1.0, 1.0, 1.0));
        assert!(m.per_class_iou.iter().all(|i| *i == Some(1.0)));
    }

    #[test]
    fn two_class_case_matches_hand_counts() {
        let m = metrics(&filled(2, &[0, 0, 1, 1], &[0, 1, 1, 1])).unwrap();
        // Class 0: TP 1, FP 0, FN 1. Class 1: TP 2, FP 1, FN 0.
        assert_eq!(m.per_class_iou, vec![Some(0.5), Some(2.0 / 3.0)]);
        assert!((m.miou - 7.0 / 12.0).abs() < 1e-15);
        assert_eq!(m.oa, 0.75);
    }

    #[test]
    fn pixel_order_is_irrelevant() {
        let gt = [0u32, 0, 1, 1, 2, 1];
        let pred = [0u32, 1, 1, 2, 2, 1];
        let base = metrics(&filled(3, &gt, &pred)).unwrap();
        let rev_gt: Vec<u32> = gt.iter().rev().copied().collect();
        let rev_pred: Vec<u32> = pred.iter().rev().copied().collect();
        assert_eq!(base, metrics(&filled(3, &rev_gt, &rev_pred)).unwrap());
    }

    #[test]
    fn ignored_pixels_are_counted_separately() {
        let cm = filled(2, &[0, 255, 1, 255], &[0, 0, 1, 1]);
        assert_eq!(cm.total(), 2);
        assert_eq!(cm.ignored, 2);
        assert_eq!(cm.total() + cm.ignored, 4);
    }

    #[test]
    fn all_ignored_input_has_no_metrics() {
        let cm = filled(2, &[255, 255], &[0, 1]);
        assert!(matches!(metrics(&cm), Err(Error::Metrics(_))));
    }

    #[test]
    fn out_of_range_classes_are_data_errors() {
        let mut cm = ConfusionMatrix::new(2).unwrap();
        assert!(matches!(cm.record(&[2], &[0], None), Err(Error::Data(_))));
        assert!(matches!(cm.record(&[0], &[5], None), Err(Error::Data(_))));
    }

    #[test]
    fn absent_classes_drop_out_of_the_means() {
        // Class 2 never appears in truth or prediction.
        let m = metrics(&filled(3, &[0, 0, 1], &[0, 1, 1])).unwrap();
        assert_eq!(m.per_class_iou[2], None);
        // miou averages only the two live classes: 1/2 and 1/2.
        assert!((m.miou - 0.5).abs() < 1e-15);
    }

    /// Naive per-pixel recount, written independently of ConfusionMatrix.
    fn brute_force(k: usize, gt: &[u32], pred: &[u32]) -> (f64, f64) {
        let mut correct = 0usize;
        let mut ious = Vec::new();
        for c in 0..k as u32 {
            let mut inter = 0usize;
            let mut union = 0usize;
            for (&g, &p) in gt.iter().zip(pred) {
                if g == 255 {
                    continue;
                }
                if g == p && g == c {
                    inter += 1;
                }
                if g == c || p == c {
                    union += 1;
                }
            }
            if union > 0 {
                ious.push(inter as f64 / union as f64);
            }
        }
        for (&g, &p) in gt.iter().zip(pred) {
            if g != 255 && g == p {
                correct += 1;
            }
        }
        let valid = gt.iter().filter(|&&g| g != 255).count();
        (correct as f64 / valid as f64, ious.iter().sum::<f64>() / ious.len() as f64)
    }

    #[test]
    fn matrix_reduction_equals_naive_recount() {
        let mut rng = SplitRng::with_stream(41, 5);
        for trial in 0..100 {
            let k = 2 + trial % 5;
            let n = 16 * 16;
            let gt: Vec<u32> = (0..n)
                .map(|_| if rng.below(10) == 0 { 255 } else { rng.below(k) as u32 })
                .collect();
            let pred: Vec<u32> = (0..n).map(|_| rng.below(k) as u32).collect();
            if gt.iter().all(|&g| g == 255) {
                continue;
            }
            let m = metrics(&filled(k, &gt, &pred)).unwrap();
            let (oa, miou) = brute_force(k, &gt, &pred);
            assert!((m.oa - oa).abs() < 1e-12, "oa differs at trial {trial}");
            assert!((m.miou - miou).abs() < 1e-12, "miou differs at trial {trial}");
        }
    }

    #[test]
    fn batched_accumulation_matches_one_shot() {
        let mut rng = SplitRng::with_stream(42, 5);
        let gt: Vec<u32> = (0..300).map(|_| rng.below(4) as u32).collect();
        let pred: Vec<u32> = (0..300).map(|_| rng.below(4) as u32).collect();
        let whole = filled(4, &gt, &pred);

        let mut pieces = ConfusionMatrix::new(4).unwrap();
        for chunk in 0..3 {
            let lo = chunk * 100;
            let mut part = ConfusionMatrix::new(4).unwrap();
            part.record(&gt[lo..lo + 100], &pred[lo..lo + 100], Some(255)).unwrap();
            pieces.merge(&part).unwrap();
        }
        assert_eq!(whole, pieces);
    }

    #[test]
    fn f1_combines_the_mean_precision_and_recall() {
        let m = metrics(&filled(2, &[0, 0, 1, 1], &[0, 1, 1, 1])).unwrap();
        // Precision: class 0 = 1/1, class 1 = 2/3; recall: 1/2 and 2/2.
        let p = (1.0 + 2.0 / 3.0) / 2.0;
        let r = (0.5 + 1.0) / 2.0;
        assert!((m.precision - p).abs() < 1e-15);
        assert!((m.recall - r).abs() < 1e-15);
        assert!((m.f1 - 2.0 * p * r / (p + r)).abs() < 1e-15);
    }
}
