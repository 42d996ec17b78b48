//! Segmentation and saliency metrics: overall accuracy, mean per-class
//! accuracy, mean IoU from a confusion matrix, and mean absolute error for
//! real-valued maps.

use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("grid shapes disagree: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: u32, num_classes: usize },
    #[error("confusion matrix has no counted pixels")]
    EmptyMatrix,
}

/// Dense grid of class labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelGrid {
    height: usize,
    width: usize,
    data: Vec<u32>,
}

impl LabelGrid {
    pub fn new(height: usize, width: usize, data: Vec<u32>) -> Self {
        assert_eq!(data.len(), height * width);
        LabelGrid {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    pub fn at(&self, y: usize, x: usize) -> u32 {
        self.data[y * self.width + x]
    }
}

/// Dense grid of real values (saliency maps, predictions in `[0, 1]`).
#[derive(Debug, Clone, PartialEq)]
pub struct RealGrid {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl RealGrid {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), height * width);
        RealGrid {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// `counts[gt * num_classes + pred]` = pixels with ground truth `gt`
/// predicted as `pred`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

/// Pixel accuracy, mean per-class accuracy, and mean IoU, each in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentationScores {
    pub pixel_acc: f64,
    pub mean_acc: f64,
    pub mean_iou: f64,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        assert!(num_classes > 0);
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn from_counts(num_classes: usize, counts: Vec<u64>) -> Self {
        assert_eq!(counts.len(), num_classes * num_classes);
        ConfusionMatrix {
            num_classes,
            counts,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Tallies a prediction grid against ground truth. Pixels whose ground
    /// truth equals `ignore_label` are skipped.
    pub fn accumulate(
        &mut self,
        gt: &LabelGrid,
        pred: &LabelGrid,
        ignore_label: Option<u32>,
    ) -> Result<(), MetricsError> {
        if gt.height != pred.height || gt.width != pred.width {
            return Err(MetricsError::ShapeMismatch(
                gt.height,
                gt.width,
                pred.height,
                pred.width,
            ));
        }
        let nc = self.num_classes as u32;
        for (&g, &p) in gt.data.iter().zip(&pred.data) {
            if Some(g) == ignore_label {
                continue;
            }
            if g >= nc {
                return Err(MetricsError::LabelOutOfRange {
                    label: g,
                    num_classes: self.num_classes,
                });
            }
            if p >= nc {
                return Err(MetricsError::LabelOutOfRange {
                    label: p,
                    num_classes: self.num_classes,
                });
            }
            self.counts[(g as usize) * self.num_classes + p as usize] += 1;
        }
        Ok(())
    }

    /// Elementwise sum, so per-shard tallies can be reduced.
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.num_classes, other.num_classes);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// Overall accuracy is trace/total; per-class accuracy averages over
    /// classes present in the ground truth; IoU averages over classes
    /// present in ground truth or prediction.
    pub fn scores(&self) -> Result<SegmentationScores, MetricsError> {
        let total = self.total();
        if total == 0 {
            return Err(MetricsError::EmptyMatrix);
        }
        let nc = self.num_classes;
        let mut trace = 0u64;
        let mut acc_sum = 0.0;
        let mut acc_classes = 0usize;
        let mut iou_sum = 0.0;
        let mut iou_classes = 0usize;
        for i in 0..nc {
            let tp = self.count(i, i);
            trace += tp;
            let row: u64 = (0..nc).map(|j| self.count(i, j)).sum();
            let col: u64 = (0..nc).map(|j| self.count(j, i)).sum();
            if row > 0 {
                acc_sum += tp as f64 / row as f64;
                acc_classes += 1;
            }
            let union = row + col - tp;
            if union > 0 {
                iou_sum += tp as f64 / union as f64;
                iou_classes += 1;
            }
        }
        Ok(SegmentationScores {
            pixel_acc: trace as f64 / total as f64,
            mean_acc: acc_sum / acc_classes.max(1) as f64,
            mean_iou: iou_sum / iou_classes.max(1) as f64,
        })
    }
}

/// Mean absolute error between two real grids of the same shape.
pub fn mae(pred: &RealGrid, gt: &RealGrid) -> Result<f64, MetricsError> {
    if pred.height != gt.height || pred.width != gt.width {
        return Err(MetricsError::ShapeMismatch(
            pred.height,
            pred.width,
            gt.height,
            gt.width,
        ));
    }
    let n = pred.data.len() as f64;
    let sum: f64 = pred
        .data
        .iter()
        .zip(&gt.data)
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok(sum / n)
}

/// Plain-text report: one `name=value` line per metric, six decimals.
pub fn format_report(values: &[(&str, f64)]) -> String {
    let mut out = String::new();
    for (name, value) in values {
        writeln!(out, "{name}={value:.6}").expect("writing to a String cannot fail");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> u32) -> LabelGrid {
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                data.push(f(y, x));
            }
        }
        LabelGrid::new(h, w, data)
    }

    #[test]
    fn perfect_prediction_scores_one() {
        let g = grid(4, 4, |y, x| ((y + x) % 3) as u32);
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&g, &g, None).unwrap();
        let s = cm.scores().unwrap();
        assert_eq!(s.pixel_acc, 1.0);
        assert_eq!(s.mean_acc, 1.0);
        assert_eq!(s.mean_iou, 1.0);
    }

    #[test]
    fn two_class_fixture() {
        let cm = ConfusionMatrix::from_counts(2, vec![3, 1, 1, 3]);
        let s = cm.scores().unwrap();
        assert!((s.pixel_acc - 0.75).abs() < 1e-12);
        assert!((s.mean_acc - 0.75).abs() < 1e-12);
        assert!((s.mean_iou - 0.6).abs() < 1e-12);
    }

    #[test]
    fn absent_class_is_excluded_from_means() {
        // class 2 appears nowhere; means average over classes 0 and 1 only
        let cm = ConfusionMatrix::from_counts(3, vec![2, 0, 0, 0, 2, 0, 0, 0, 0]);
        let s = cm.scores().unwrap();
        assert_eq!(s.mean_acc, 1.0);
        assert_eq!(s.mean_iou, 1.0);
    }

    #[test]
    fn uniform_grid_tally() {
        let g = grid(2, 5, |_, _| 0);
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&g, &g, None).unwrap();
        assert_eq!(cm.count(0, 0), 10);
        assert_eq!(cm.total(), 10);
    }

    #[test]
    fn all_ignored_leaves_matrix_unchanged() {
        let g = grid(3, 3, |_, _| 7);
        let p = grid(3, 3, |_, _| 1);
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&g, &p, Some(7)).unwrap();
        assert_eq!(cm.total(), 0);
        assert!(matches!(cm.scores(), Err(MetricsError::EmptyMatrix)));
    }

    #[test]
    fn out_of_range_labels_are_rejected() {
        let g = grid(1, 2, |_, x| x as u32 * 5);
        let p = grid(1, 2, |_, _| 0);
        let mut cm = ConfusionMatrix::new(3);
        assert!(matches!(
            cm.accumulate(&g, &p, None),
            Err(MetricsError::LabelOutOfRange { label: 5, .. })
        ));
    }

    #[test]
    fn accumulate_matches_loop_oracle_and_is_additive() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let ga = grid(6, 7, |_, _| rng.random_range(0..4));
        let pa = grid(6, 7, |_, _| rng.random_range(0..4));
        let gb = grid(6, 7, |_, _| rng.random_range(0..4));
        let pb = grid(6, 7, |_, _| rng.random_range(0..4));

        let mut oracle = vec![0u64; 16];
        for (g, p) in [(&ga, &pa), (&gb, &pb)] {
            for y in 0..6 {
                for x in 0..7 {
                    oracle[(g.at(y, x) as usize) * 4 + p.at(y, x) as usize] += 1;
                }
            }
        }

        let mut joint = ConfusionMatrix::new(4);
        joint.accumulate(&ga, &pa, None).unwrap();
        joint.accumulate(&gb, &pb, None).unwrap();

        let mut shard_a = ConfusionMatrix::new(4);
        shard_a.accumulate(&ga, &pa, None).unwrap();
        let mut shard_b = ConfusionMatrix::new(4);
        shard_b.accumulate(&gb, &pb, None).unwrap();
        shard_a.merge(&shard_b);

        assert_eq!(joint, ConfusionMatrix::from_counts(4, oracle));
        assert_eq!(joint, shard_a);
    }

    #[test]
    fn per_class_iou_never_exceeds_per_class_accuracy() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = grid(8, 8, |_, _| rng.random_range(0..3));
        let p = grid(8, 8, |_, _| rng.random_range(0..3));
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&g, &p, None).unwrap();
        for i in 0..3 {
            let row: u64 = (0..3).map(|j| cm.count(i, j)).sum();
            let col: u64 = (0..3).map(|j| cm.count(j, i)).sum();
            if row == 0 {
                continue;
            }
            let acc_i = cm.count(i, i) as f64 / row as f64;
            let iou_i = cm.count(i, i) as f64 / (row + col - cm.count(i, i)) as f64;
            assert!(iou_i <= acc_i + 1e-12);
        }
        let s = cm.scores().unwrap();
        for v in [s.pixel_acc, s.mean_acc, s.mean_iou] {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn mae_fixtures() {
        let a = RealGrid::new(2, 2, vec![0.0, 0.5, 1.0, 0.25]);
        assert_eq!(mae(&a, &a).unwrap(), 0.0);
        let ones = RealGrid::new(2, 2, vec![1.0; 4]);
        let zeros = RealGrid::new(2, 2, vec![0.0; 4]);
        assert_eq!(mae(&ones, &zeros).unwrap(), 1.0);
        let b = RealGrid::new(1, 2, vec![0.0; 2]);
        assert!(matches!(mae(&a, &b), Err(MetricsError::ShapeMismatch(..))));
    }

    #[test]
    fn mae_is_symmetric_and_triangular() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mk = |rng: &mut ChaCha8Rng| {
            RealGrid::new(4, 4, (0..16).map(|_| rng.random_range(0.0..1.0)).collect())
        };
        let (a, b, c) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));
        assert_eq!(mae(&a, &b).unwrap(), mae(&b, &a).unwrap());
        assert!(mae(&a, &c).unwrap() <= mae(&a, &b).unwrap() + mae(&b, &c).unwrap() + 1e-12);
    }

    #[test]
    fn report_formatting() {
        let report = format_report(&[("miou", 0.6), ("acc", 0.75)]);
        assert_eq!(report, "miou=0.600000\nacc=0.750000\n");
    }
}
