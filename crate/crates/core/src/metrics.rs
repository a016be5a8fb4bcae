//! Confusion-matrix accumulation and IoU summaries.

use crate::background::IGNORE;
use crate::error::{Error, Result};

/// `counts[gt * k + pred]` over global class ids `0..k`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds every pixel whose ground truth is not [`IGNORE`].
    pub fn update(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::Dimension {
                op: "ConfusionMatrix::update",
                axis: "pixels",
                expected: gt.len(),
                actual: pred.len(),
            });
        }
        for (&p, &t) in pred.iter().zip(gt) {
            if t == IGNORE {
                continue;
            }
            let (p, t) = (p as usize, t as usize);
            if p >= self.k || t >= self.k {
                return Err(Error::Protocol(format!(
                    "class id {} outside confusion matrix of size {}",
                    p.max(t),
                    self.k
                )));
            }
            self.counts[t * self.k + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.k, other.k, "merging matrices of different size");
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// `tp / (tp + fp + fn)`, `None` when the class never occurs in either
    /// ground truth or prediction.
    pub fn iou(&self, class: usize) -> Option<f64> {
        let tp = self.count(class, class);
        let fn_: u64 = (0..self.k).map(|p| self.count(class, p)).sum::<u64>() - tp;
        let fp: u64 = (0..self.k).map(|g| self.count(g, class)).sum::<u64>() - tp;
        let denom = tp + fp + fn_;
        (denom > 0).then(|| tp as f64 / denom as f64)
    }

    /// Mean of the defined IoUs over `group`; `None` if none is defined.
    pub fn miou(&self, group: &[usize]) -> Option<f64> {
        let vals: Vec<f64> = group.iter().filter_map(|&c| self.iou(c)).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// Text form of an optional metric (`NA` when undefined).
pub fn fmt_metric(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.6}"),
        None => "NA".to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_matching_pixels() {
        let mut cm = ConfusionMatrix::new(3);
        cm.update(&[2; 10], &[2; 10]).unwrap();
        assert_eq!(cm.count(2, 2), 10);
        assert_eq!(cm.iou(2), Some(1.0));
    }

    #[test]
    fn ignore_pixels_skip() {
        let mut cm = ConfusionMatrix::new(3);
        cm.update(&[1, 2], &[255, 255]).unwrap();
        assert_eq!(cm, ConfusionMatrix::new(3));
    }

    #[test]
    fn disjoint_binary() {
        let mut cm = ConfusionMatrix::new(2);
        cm.update(&[1, 1, 0, 0], &[0, 0, 1, 1]).unwrap();
        assert_eq!(cm.iou(1), Some(0.0));
        assert_eq!(cm.iou(0), Some(0.0));
    }

    #[test]
    fn hand_matrix() {
        // [[3,1],[2,4]]: rows gt, cols pred
        let mut cm = ConfusionMatrix::new(2);
        let mut pred = vec![];
        let mut gt = vec![];
        for (g, p, n) in [(0u8, 0u8, 3), (0, 1, 1), (1, 0, 2), (1, 1, 4)] {
            for _ in 0..n {
                gt.push(g);
                pred.push(p);
            }
        }
        cm.update(&pred, &gt).unwrap();
        assert!((cm.iou(1).unwrap() - 4.0 / 7.0).abs() < 1e-12);
        assert!((cm.iou(0).unwrap() - 3.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn undefined_classes_are_excluded() {
        let mut cm = ConfusionMatrix::new(4);
        cm.update(&[0, 1], &[0, 1]).unwrap();
        assert_eq!(cm.iou(3), None);
        assert_eq!(cm.miou(&[3]), None);
        assert_eq!(cm.miou(&[1]), Some(1.0));
        assert_eq!(cm.miou(&[0, 1, 3]), Some(1.0));
        assert_eq!(fmt_metric(None), "NA");
    }

    #[test]
    fn out_of_range_ids_error() {
        let mut cm = ConfusionMatrix::new(2);
        assert!(cm.update(&[5], &[0]).is_err());
        assert!(cm.update(&[0, 1], &[0]).is_err());
    }
}
