use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `C×C` counts, rows are ground truth and columns are predictions.
pub fn confusion_matrix(truth: &[usize], pred: &[usize], classes: usize) -> Result<Vec<Vec<u64>>> {
    if truth.len() != pred.len() {
        return Err(Error::Input(format!(
            "{} ground-truth labels but {} predictions",
            truth.len(),
            pred.len()
        )));
    }
    let mut m = vec![vec![0u64; classes]; classes];
    for (&t, &p) in truth.iter().zip(pred) {
        if t >= classes || p >= classes {
            return Err(Error::Input(format!("label pair ({t}, {p}) out of range for {classes} classes")));
        }
        m[t][p] += 1;
    }
    Ok(m)
}

fn totals(m: &[Vec<u64>]) -> (Vec<u64>, Vec<u64>, u64) {
    let c = m.len();
    let support: Vec<u64> = m.iter().map(|r| r.iter().sum()).collect();
    let predicted: Vec<u64> = (0..c).map(|j| m.iter().map(|r| r[j]).sum()).collect();
    let n = support.iter().sum();
    (support, predicted, n)
}

pub fn precision_recall(m: &[Vec<u64>]) -> (Vec<f64>, Vec<f64>) {
    let (support, predicted, _) = totals(m);
    let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = (0..m.len()).map(|c| ratio(m[c][c], predicted[c])).collect();
    let recall = (0..m.len()).map(|c| ratio(m[c][c], support[c])).collect();
    (precision, recall)
}

/// `2PR / (P + R)` per class, 0 when `P + R = 0`.
pub fn per_class_f1(m: &[Vec<u64>]) -> Vec<f64> {
    let (p, r) = precision_recall(m);
    p.iter()
        .zip(&r)
        .map(|(&p, &r)| if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) })
        .collect()
}

/// Support-weighted mean of the per-class F1 scores.
pub fn weighted_f1(m: &[Vec<u64>]) -> f64 {
    let (support, _, n) = totals(m);
    if n == 0 {
        return 0.0;
    }
    per_class_f1(m).iter().zip(&support).map(|(f, &s)| f * s as f64 / n as f64).sum()
}

pub fn accuracy(m: &[Vec<u64>]) -> f64 {
    let (_, _, n) = totals(m);
    if n == 0 {
        return 0.0;
    }
    (0..m.len()).map(|c| m[c][c]).sum::<u64>() as f64 / n as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub class_names: Vec<String>,
    pub confusion: Vec<Vec<u64>>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub per_class_f1: Vec<f64>,
    pub weighted_f1: f64,
    pub accuracy: f64,
    pub support: Vec<u64>,
}

impl MetricsReport {
    pub fn from_predictions(truth: &[usize], pred: &[usize], class_names: &[String]) -> Result<Self> {
        let confusion = confusion_matrix(truth, pred, class_names.len())?;
        Ok(Self::from_confusion(confusion, class_names))
    }

    pub fn from_confusion(confusion: Vec<Vec<u64>>, class_names: &[String]) -> Self {
        let (precision, recall) = precision_recall(&confusion);
        Self {
            class_names: class_names.to_vec(),
            precision,
            recall,
            per_class_f1: per_class_f1(&confusion),
            weighted_f1: weighted_f1(&confusion),
            accuracy: accuracy(&confusion),
            support: totals(&confusion).0,
            confusion,
        }
    }

    /// F1 of the named class, if present.
    pub fn f1_of(&self, class: &str) -> Option<f64> {
        self.class_names.iter().position(|c| c == class).map(|i| self.per_class_f1[i])
    }
}

/// Row-wise argmax with ties to the lowest index.
pub fn argmax_rows(values: &[f64], cols: usize) -> Vec<usize> {
    values
        .chunks(cols)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{MELD_CLASSES, MELD_COUNTS};

    #[test]
    fn perfect_predictions() {
        let y = [0, 1, 2, 2, 1];
        let m = confusion_matrix(&y, &y, 3).unwrap();
        assert_eq!(weighted_f1(&m), 1.0);
        assert_eq!(accuracy(&m), 1.0);
    }

    #[test]
    fn predict_all_neutral_on_meld_supports() {
        let mut truth = Vec::new();
        for (c, &k) in MELD_COUNTS.iter().enumerate() {
            truth.extend(std::iter::repeat(c).take(k as usize));
        }
        let pred = vec![4; truth.len()];
        let names: Vec<String> = MELD_CLASSES.iter().map(|s| s.to_string()).collect();
        let r = MetricsReport::from_predictions(&truth, &pred, &names).unwrap();
        let p = 4710.0 / 9989.0;
        let f1 = 2.0 * p / (p + 1.0);
        assert!((r.per_class_f1[4] - f1).abs() < 1e-15);
        assert!((r.per_class_f1[4] - 0.64086).abs() < 1e-5);
        // only the neutral row carries weight: WF1 = p * F1
        assert!((r.weighted_f1 - p * f1).abs() < 1e-15);
        assert!((r.weighted_f1 - 0.30218).abs() < 1e-5);
        assert!(r.per_class_f1.iter().enumerate().all(|(c, &f)| c == 4 || f == 0.0));
    }

    #[test]
    fn empty_class_has_zero_weight() {
        let m = confusion_matrix(&[0, 0, 1], &[0, 1, 1], 3).unwrap();
        let f1 = per_class_f1(&m);
        assert_eq!(f1[2], 0.0);
        let w = weighted_f1(&m);
        assert!((w - (2.0 / 3.0 * f1[0] + 1.0 / 3.0 * f1[1])).abs() < 1e-15);
    }

    #[test]
    fn length_mismatch_is_an_input_error() {
        assert!(matches!(confusion_matrix(&[0, 1], &[0], 2), Err(Error::Input(_))));
    }
}
