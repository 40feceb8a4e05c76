//! Confusion matrix and the OA / mIoU / mAcc summaries derived from it.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// `K×K` counts; rows are the reference class, columns the prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub overall_accuracy: f64,
    pub mean_iou: f64,
    pub mean_accuracy: f64,
    /// `None` for classes absent from both reference and prediction.
    pub iou: Vec<Option<f64>>,
    /// `None` for classes absent from the reference.
    pub accuracy: Vec<Option<f64>>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn from_counts(k: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != k * k {
            return Err(Error::Dimension(format!(
                "{} counts for a {k}x{k} matrix",
                counts.len()
            )));
        }
        Ok(Self { k, counts })
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, reference: usize, predicted: usize) -> u64 {
        self.counts[reference * self.k + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Counts one pixel or sample. References equal to `ignore` are skipped.
    pub fn record(&mut self, reference: usize, predicted: usize, ignore: usize) -> Result<()> {
        if reference == ignore {
            return Ok(());
        }
        if reference >= self.k || predicted >= self.k {
            return Err(Error::Data(format!(
                "class pair ({reference}, {predicted}) outside a {} class matrix",
                self.k
            )));
        }
        self.counts[reference * self.k + predicted] += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.k, other.k);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn metrics(&self) -> Result<Metrics> {
        let total = self.total();
        if total == 0 {
            return Err(Error::UndefinedMetric("confusion matrix is empty".into()));
        }
        let k = self.k;
        let trace: u64 = (0..k).map(|i| self.get(i, i)).sum();
        let mut iou = Vec::with_capacity(k);
        let mut acc = Vec::with_capacity(k);
        for c in 0..k {
            let tp = self.get(c, c);
            let row: u64 = (0..k).map(|j| self.get(c, j)).sum();
            let col: u64 = (0..k).map(|i| self.get(i, c)).sum();
            let union = row + col - tp;
            iou.push((union > 0).then(|| tp as f64 / union as f64));
            acc.push((row > 0).then(|| tp as f64 / row as f64));
        }
        Ok(Metrics {
            overall_accuracy: trace as f64 / total as f64,
            mean_iou: mean_present(&iou),
            mean_accuracy: mean_present(&acc),
            iou,
            accuracy: acc,
        })
    }

    /// One row per reference class, counts separated by single spaces.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in 0..self.k {
            let row: Vec<String> = (0..self.k).map(|c| self.get(r, c).to_string()).collect();
            let _ = writeln!(s, "{}", row.join(" "));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let rows: Vec<Vec<u64>> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.split_whitespace()
                    .map(|v| {
                        v.parse()
                            .map_err(|_| Error::Data(format!("bad count '{v}'")))
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::Data("confusion matrix text is not square".into()));
        }
        Self::from_counts(k, rows.concat())
    }
}

fn mean_present(v: &[Option<f64>]) -> f64 {
    let present: Vec<f64> = v.iter().flatten().copied().collect();
    if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_diagonal() {
        let cm = ConfusionMatrix::from_counts(3, vec![4, 0, 0, 0, 2, 0, 0, 0, 9]).unwrap();
        let m = cm.metrics().unwrap();
        assert_eq!(
            (m.overall_accuracy, m.mean_iou, m.mean_accuracy),
            (1.0, 1.0, 1.0)
        );
    }

    #[test]
    fn hand_computed_two_class_case() {
        let cm = ConfusionMatrix::from_counts(2, vec![1, 1, 0, 2]).unwrap();
        let m = cm.metrics().unwrap();
        assert_eq!(m.overall_accuracy, 0.75);
        assert_eq!(m.iou, vec![Some(0.5), Some(2.0 / 3.0)]);
        assert!((m.mean_iou - 0.583_333_333_333).abs() < 1e-9);
        assert_eq!(m.accuracy, vec![Some(0.5), Some(1.0)]);
        assert_eq!(m.mean_accuracy, 0.75);
    }

    #[test]
    fn absent_class_is_excluded() {
        let cm = ConfusionMatrix::from_counts(3, vec![1, 1, 0, 0, 2, 0, 0, 0, 0]).unwrap();
        let m = cm.metrics().unwrap();
        assert_eq!(m.iou[2], None);
        assert_eq!(m.accuracy[2], None);
        assert!((m.mean_iou - (0.5 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert_eq!(m.mean_accuracy, 0.75);
    }

    #[test]
    fn predicted_only_class_counts_in_miou_not_macc() {
        // class 1 never occurs in the reference but is predicted once
        let cm = ConfusionMatrix::from_counts(2, vec![3, 1, 0, 0]).unwrap();
        let m = cm.metrics().unwrap();
        assert_eq!(m.iou, vec![Some(0.75), Some(0.0)]);
        assert_eq!(m.accuracy, vec![Some(0.75), None]);
    }

    #[test]
    fn empty_matrix_is_undefined() {
        assert!(matches!(
            ConfusionMatrix::new(3).metrics(),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn ignored_references_are_not_counted() {
        let mut cm = ConfusionMatrix::new(2);
        cm.record(2, 0, 2).unwrap();
        cm.record(0, 1, 2).unwrap();
        assert_eq!(cm.total(), 1);
        assert!(cm.record(0, 2, 2).is_err());
    }

    #[test]
    fn text_round_trip() {
        let cm = ConfusionMatrix::from_counts(2, vec![1, 1, 0, 2]).unwrap();
        assert_eq!(cm.to_text(), "1 1\n0 2\n");
        assert_eq!(ConfusionMatrix::from_text(&cm.to_text()).unwrap(), cm);
    }

    proptest! {
        #[test]
        fn metrics_invariant_under_class_relabelling(
            counts in proptest::collection::vec(0u64..20, 16),
            perm in Just((0..4usize).collect::<Vec<_>>()).prop_shuffle(),
        ) {
            prop_assume!(counts.iter().sum::<u64>() > 0);
            let cm = ConfusionMatrix::from_counts(4, counts.clone()).unwrap();
            let mut permuted = vec![0; 16];
            for r in 0..4 {
                for c in 0..4 {
                    permuted[perm[r] * 4 + perm[c]] = counts[r * 4 + c];
                }
            }
            let a = cm.metrics().unwrap();
            let b = ConfusionMatrix::from_counts(4, permuted).unwrap().metrics().unwrap();
            prop_assert!((a.overall_accuracy - b.overall_accuracy).abs() < 1e-12);
            prop_assert!((a.mean_iou - b.mean_iou).abs() < 1e-12);
            prop_assert!((a.mean_accuracy - b.mean_accuracy).abs() < 1e-12);
        }
    }
}
