//! Confusion-matrix accumulation and the IoU / accuracy / F1 report.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::Serialize;

use crate::error::{Error, Result};

/// `k x k` counts with `C[t][p]` = points of true class `t` predicted `p`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn at(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn add(&mut self, truth: usize, predicted: usize, count: u64) {
        self.counts[truth * self.classes + predicted] += count;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Accumulate a batch of (truth, prediction) pairs. Order-independent
    /// and associative across batches.
    pub fn accumulate(&mut self, truth: &[u8], predicted: &[u8]) -> Result<()> {
        if truth.len() != predicted.len() {
            return Err(Error::ShapeMismatch(alloc::format!(
                "{} truth labels vs {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        for (i, (&t, &p)) in truth.iter().zip(predicted).enumerate() {
            if t as usize >= self.classes {
                return Err(Error::LabelOutOfRange {
                    index: i,
                    label: t as u32,
                    class_count: self.classes,
                });
            }
            if p as usize >= self.classes {
                return Err(Error::LabelOutOfRange {
                    index: i,
                    label: p as u32,
                    class_count: self.classes,
                });
            }
            self.counts[t as usize * self.classes + p as usize] += 1;
        }
        Ok(())
    }

    /// Entrywise sum, so parallel evaluators combine deterministically.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.classes != other.classes {
            return Err(Error::ShapeMismatch(alloc::format!(
                "merging {}-class into {}-class matrix",
                other.classes,
                self.classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn true_positive(&self, c: usize) -> u64 {
        self.at(c, c)
    }

    pub fn false_positive(&self, c: usize) -> u64 {
        (0..self.classes)
            .filter(|&t| t != c)
            .map(|t| self.at(t, c))
            .sum()
    }

    pub fn false_negative(&self, c: usize) -> u64 {
        (0..self.classes)
            .filter(|&p| p != c)
            .map(|p| self.at(c, p))
            .sum()
    }

    pub fn true_negative(&self, c: usize) -> u64 {
        self.total() - self.true_positive(c) - self.false_positive(c) - self.false_negative(c)
    }
}

/// Metrics for one class; `None` marks an undefined value (class absent from
/// both truth and prediction), which is excluded from means.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub iou: Option<f64>,
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    /// Points of this class in the ground truth.
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub per_class: Vec<ClassMetrics>,
    pub overall_accuracy: f64,
    pub mean_iou: Option<f64>,
    pub mean_f1: Option<f64>,
    pub total_points: u64,
}

/// Derive the report from a confusion matrix:
/// `IoU = TP/(TP+FP+FN)`, per-class binary `Acc = (TP+TN)/total`,
/// `F1 = 2TP/(2TP+FP+FN)` (equal to `2*IoU/(1+IoU)`), overall accuracy
/// `trace/total`. Classes absent from both truth and prediction are
/// undefined and excluded from the means.
pub fn compute_report(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::EmptyInput("confusion matrix"));
    }
    let mut per_class = Vec::with_capacity(cm.classes());
    let mut iou_sum = 0.0;
    let mut f1_sum = 0.0;
    let mut defined = 0usize;
    for c in 0..cm.classes() {
        let tp = cm.true_positive(c) as f64;
        let fp = cm.false_positive(c) as f64;
        let fn_ = cm.false_negative(c) as f64;
        let tn = cm.true_negative(c) as f64;
        if tp + fp + fn_ == 0.0 {
            per_class.push(ClassMetrics {
                iou: None,
                accuracy: None,
                precision: None,
                recall: None,
                f1: None,
                support: 0,
            });
            continue;
        }
        let iou = tp / (tp + fp + fn_);
        let f1 = 2.0 * tp / (2.0 * tp + fp + fn_);
        let accuracy = (tp + tn) / total as f64;
        let precision = if tp + fp > 0.0 { Some(tp / (tp + fp)) } else { None };
        let recall = if tp + fn_ > 0.0 { Some(tp / (tp + fn_)) } else { None };
        iou_sum += iou;
        f1_sum += f1;
        defined += 1;
        per_class.push(ClassMetrics {
            iou: Some(iou),
            accuracy: Some(accuracy),
            precision,
            recall,
            f1: Some(f1),
            support: (tp + fn_) as u64,
        });
    }
    let trace: u64 = (0..cm.classes()).map(|c| cm.true_positive(c)).sum();
    Ok(MetricsReport {
        per_class,
        overall_accuracy: trace as f64 / total as f64,
        mean_iou: (defined > 0).then(|| iou_sum / defined as f64),
        mean_f1: (defined > 0).then(|| f1_sum / defined as f64),
        total_points: total,
    })
}

impl MetricsReport {
    /// Aligned text table with one Acc/IoU/F1 column triple per class.
    pub fn render_table(&self, class_names: &[String]) -> String {
        let fmt = |v: Option<f64>| match v {
            Some(x) => alloc::format!("{x:.2}"),
            None => "-".into(),
        };
        let mut out = String::new();
        let name_width = class_names
            .iter()
            .map(|n| n.len())
            .chain(core::iter::once(5))
            .max()
            .unwrap();
        out.push_str(&alloc::format!(
            "{:<name_width$}  {:>6} {:>6} {:>6}\n",
            "Class",
            "Acc",
            "IoU",
            "F1"
        ));
        for (c, m) in self.per_class.iter().enumerate() {
            let name = class_names
                .get(c)
                .cloned()
                .unwrap_or_else(|| alloc::format!("class {c}"));
            out.push_str(&alloc::format!(
                "{name:<name_width$}  {:>6} {:>6} {:>6}\n",
                fmt(m.accuracy),
                fmt(m.iou),
                fmt(m.f1)
            ));
        }
        out.push_str(&alloc::format!(
            "overall accuracy {:.4}   mean IoU {}   mean F1 {}\n",
            self.overall_accuracy,
            fmt(self.mean_iou),
            fmt(self.mean_f1),
        ));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn perfect_predictions_are_diagonal_and_all_ones() {
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&[0, 1, 2, 1, 0], &[0, 1, 2, 1, 0]).unwrap();
        for t in 0..3 {
            for p in 0..3 {
                if t != p {
                    assert_eq!(cm.at(t, p), 0);
                }
            }
        }
        let report = compute_report(&cm).unwrap();
        assert_eq!(report.overall_accuracy, 1.0);
        for m in &report.per_class {
            assert_eq!(m.iou, Some(1.0));
            assert_eq!(m.f1, Some(1.0));
            assert_eq!(m.accuracy, Some(1.0));
        }
        assert_eq!(report.mean_iou, Some(1.0));
    }

    #[test]
    fn accumulation_is_commutative_and_batchable() {
        let mut rng = Rng::new(8);
        let a_truth: Vec<u8> = (0..200).map(|_| rng.below(4) as u8).collect();
        let a_pred: Vec<u8> = (0..200).map(|_| rng.below(4) as u8).collect();
        let b_truth: Vec<u8> = (0..300).map(|_| rng.below(4) as u8).collect();
        let b_pred: Vec<u8> = (0..300).map(|_| rng.below(4) as u8).collect();

        let mut ab = ConfusionMatrix::new(4);
        ab.accumulate(&a_truth, &a_pred).unwrap();
        ab.accumulate(&b_truth, &b_pred).unwrap();

        let mut ba = ConfusionMatrix::new(4);
        ba.accumulate(&b_truth, &b_pred).unwrap();
        ba.accumulate(&a_truth, &a_pred).unwrap();
        assert_eq!(ab, ba);

        // Single pass over the concatenation equals batch accumulation,
        // and merge agrees too.
        let cat_truth: Vec<u8> = a_truth.iter().chain(&b_truth).copied().collect();
        let cat_pred: Vec<u8> = a_pred.iter().chain(&b_pred).copied().collect();
        let mut single = ConfusionMatrix::new(4);
        single.accumulate(&cat_truth, &cat_pred).unwrap();
        assert_eq!(ab, single);

        let mut merged = ConfusionMatrix::new(4);
        merged.accumulate(&a_truth, &a_pred).unwrap();
        let mut other = ConfusionMatrix::new(4);
        other.accumulate(&b_truth, &b_pred).unwrap();
        merged.merge(&other).unwrap();
        assert_eq!(merged, single);
    }

    #[test]
    fn accumulate_errors() {
        let mut cm = ConfusionMatrix::new(2);
        assert!(matches!(
            cm.accumulate(&[0, 1], &[0]),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(matches!(
            cm.accumulate(&[2], &[0]),
            Err(Error::LabelOutOfRange { .. })
        ));
        assert!(matches!(
            cm.accumulate(&[0], &[5]),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn two_class_worked_example() {
        // TP=4, FP=1, FN=1, TN=4 for class 1.
        let mut cm = ConfusionMatrix::new(2);
        cm.add(1, 1, 4);
        cm.add(0, 1, 1);
        cm.add(1, 0, 1);
        cm.add(0, 0, 4);
        let report = compute_report(&cm).unwrap();
        let m = &report.per_class[1];
        assert!((m.iou.unwrap() - 4.0 / 6.0).abs() < 1e-12);
        assert!((m.accuracy.unwrap() - 0.8).abs() < 1e-12);
        assert!((m.f1.unwrap() - 0.8).abs() < 1e-12);
    }

    #[test]
    fn f1_matches_published_pair_for_iou_090() {
        // An IoU of 0.90 corresponds to F1 = 2*0.9/1.9 ~= 0.947, i.e. the
        // published rounded pair (0.90, 0.95).
        let mut cm = ConfusionMatrix::new(2);
        cm.add(1, 1, 90);
        cm.add(0, 1, 5);
        cm.add(1, 0, 5);
        cm.add(0, 0, 900);
        let report = compute_report(&cm).unwrap();
        let m = &report.per_class[1];
        assert!((m.iou.unwrap() - 0.90).abs() < 1e-12);
        assert!((m.f1.unwrap() - 2.0 * 0.90 / 1.90).abs() < 1e-12);
        assert_eq!(alloc::format!("{:.2}", m.f1.unwrap()), "0.95");
    }

    #[test]
    fn f1_equals_iou_identity_on_random_matrices() {
        let mut rng = Rng::new(4);
        for _ in 0..100 {
            let k = 2 + rng.below(6) as usize;
            let mut cm = ConfusionMatrix::new(k);
            for t in 0..k {
                for p in 0..k {
                    cm.add(t, p, rng.below(50));
                }
            }
            if cm.total() == 0 {
                continue;
            }
            let report = compute_report(&cm).unwrap();
            for m in &report.per_class {
                if let (Some(iou), Some(f1)) = (m.iou, m.f1) {
                    assert!((f1 - 2.0 * iou / (1.0 + iou)).abs() < 1e-12);
                    assert!((0.0..=1.0).contains(&iou));
                    assert!((0.0..=1.0).contains(&f1));
                }
                if let Some(acc) = m.accuracy {
                    assert!((0.0..=1.0).contains(&acc));
                }
            }
        }
    }

    #[test]
    fn absent_class_is_undefined_and_excluded_from_means() {
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&[0, 0, 1, 1], &[0, 1, 1, 1]).unwrap();
        let report = compute_report(&cm).unwrap();
        assert_eq!(report.per_class[2].iou, None);
        assert_eq!(report.per_class[2].f1, None);
        assert_eq!(report.per_class[2].accuracy, None);
        let defined_iou: f64 = report.per_class[..2]
            .iter()
            .map(|m| m.iou.unwrap())
            .sum::<f64>()
            / 2.0;
        assert!((report.mean_iou.unwrap() - defined_iou).abs() < 1e-12);

        let table = report.render_table(&[
            "Background".into(),
            "Building".into(),
            "Water".into(),
        ]);
        assert!(table.contains('-'));
    }

    #[test]
    fn permuting_classes_permutes_metrics() {
        let mut rng = Rng::new(10);
        let truth: Vec<u8> = (0..500).map(|_| rng.below(4) as u8).collect();
        let pred: Vec<u8> = (0..500).map(|_| rng.below(4) as u8).collect();
        let mut cm = ConfusionMatrix::new(4);
        cm.accumulate(&truth, &pred).unwrap();
        let report = compute_report(&cm).unwrap();

        // Permutation sigma maps old class c to sigma[c].
        let sigma = [2u8, 0, 3, 1];
        let p_truth: Vec<u8> = truth.iter().map(|&c| sigma[c as usize]).collect();
        let p_pred: Vec<u8> = pred.iter().map(|&c| sigma[c as usize]).collect();
        let mut p_cm = ConfusionMatrix::new(4);
        p_cm.accumulate(&p_truth, &p_pred).unwrap();
        let p_report = compute_report(&p_cm).unwrap();

        for c in 0..4 {
            assert_eq!(
                report.per_class[c],
                p_report.per_class[sigma[c] as usize],
                "class {c}"
            );
        }
        assert_eq!(report.overall_accuracy, p_report.overall_accuracy);
        assert_eq!(report.mean_iou, p_report.mean_iou);
    }

    #[test]
    fn empty_matrix_is_an_error() {
        let cm = ConfusionMatrix::new(3);
        assert!(matches!(
            compute_report(&cm),
            Err(Error::EmptyInput(_))
        ));
    }
}
