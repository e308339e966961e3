//! Segmentation scores over labeled points.

use crate::error::{Error, Result};

/// Confusion counts and derived scores; percentages in `[0, 100]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// `confusion[truth][pred]`.
    pub confusion: Vec<Vec<u64>>,
    /// Labeled points that received no prediction (`-1`), per truth class.
    pub unassigned: Vec<u64>,
    /// `None` for classes absent from both prediction and truth.
    pub iou: Vec<Option<f64>>,
    pub miou: f64,
    pub oa: f64,
    pub macc: f64,
}

#[derive(Clone, Debug)]
pub struct Confusion {
    counts: Vec<Vec<u64>>,
    unassigned: Vec<u64>,
}

impl Confusion {
    pub fn new(num_classes: usize) -> Self {
        Self {
            counts: vec![vec![0; num_classes]; num_classes],
            unassigned: vec![0; num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    /// Accumulate one scene. Points with truth `-1` are skipped.
    pub fn add(&mut self, pred: &[i32], truth: &[i32]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::Shape(format!("{} predictions for {} points", pred.len(), truth.len())));
        }
        let n = self.num_classes() as i32;
        for (&p, &t) in pred.iter().zip(truth) {
            if t == -1 {
                continue;
            }
            if !(0..n).contains(&t) {
                return Err(Error::InvalidInput(format!("ground-truth label {t} out of range")));
            }
            if p == -1 {
                self.unassigned[t as usize] += 1;
            } else if (0..n).contains(&p) {
                self.counts[t as usize][p as usize] += 1;
            } else {
                return Err(Error::InvalidInput(format!("predicted label {p} out of range")));
            }
        }
        Ok(())
    }

    pub fn report(&self) -> EvalReport {
        let n = self.num_classes();
        let mut iou = Vec::with_capacity(n);
        let mut total = 0u64;
        let mut correct = 0u64;
        let mut accs = Vec::new();
        for c in 0..n {
            let tp = self.counts[c][c];
            let truth: u64 = self.counts[c].iter().sum::<u64>() + self.unassigned[c];
            let predicted: u64 = (0..n).map(|t| self.counts[t][c]).sum();
            let union = truth + predicted - tp;
            iou.push((union > 0).then(|| tp as f64 / union as f64));
            if truth > 0 {
                accs.push(tp as f64 / truth as f64);
            }
            total += truth;
            correct += tp;
        }
        let present: Vec<f64> = iou.iter().flatten().copied().collect();
        let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { 100.0 * v.iter().sum::<f64>() / v.len() as f64 };
        EvalReport {
            confusion: self.counts.clone(),
            unassigned: self.unassigned.clone(),
            miou: mean(&present),
            oa: if total == 0 { 0.0 } else { 100.0 * correct as f64 / total as f64 },
            macc: mean(&accs),
            iou,
        }
    }
}

pub fn evaluate(pred: &[i32], truth: &[i32], num_classes: usize) -> Result<EvalReport> {
    let mut c = Confusion::new(num_classes);
    c.add(pred, truth)?;
    Ok(c.report())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction() {
        let t = [0, 1, 2, 2, -1, 1];
        let r = evaluate(&t, &t, 4).unwrap();
        assert_eq!((r.miou, r.oa, r.macc), (100.0, 100.0, 100.0));
        assert_eq!(r.iou[3], None);
    }

    #[test]
    fn two_class_hand_computed() {
        let mut truth = vec![0; 100];
        truth.extend(vec![1; 100]);
        let mut pred = vec![0; 50];
        pred.extend(vec![1; 150]);
        let r = evaluate(&pred, &truth, 2).unwrap();
        assert_eq!(r.confusion, vec![vec![50, 50], vec![0, 100]]);
        assert!((r.iou[0].unwrap() - 0.5).abs() < 1e-15);
        assert!((r.iou[1].unwrap() - 100.0 / 150.0).abs() < 1e-15);
        assert!((r.miou - 58.333_333_333_333_336).abs() < 1e-9);
        assert!((r.oa - 75.0).abs() < 1e-12);
        assert!((r.macc - 75.0).abs() < 1e-12);
    }

    #[test]
    fn all_wrong_is_zero() {
        let r = evaluate(&[1, 1, 0], &[0, 0, 1], 2).unwrap();
        assert_eq!(r.miou, 0.0);
        assert_eq!(r.oa, 0.0);
    }

    #[test]
    fn unassigned_counts_as_miss() {
        let r = evaluate(&[-1, 0], &[0, 0], 2).unwrap();
        assert!((r.oa - 50.0).abs() < 1e-12);
        assert!((r.iou[0].unwrap() - 0.5).abs() < 1e-12);
        assert!(evaluate(&[5], &[0], 2).is_err());
        assert!(evaluate(&[0], &[0, 1], 2).is_err());
    }
}
