use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::metrics::MetricsReport;

/// Mean with sample standard deviation and standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
    pub sem: f64,
}

pub fn summarize(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(Error::Input("cannot summarise an empty sample".into()));
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let sd = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(Summary {
        n,
        mean,
        sd,
        sem: sd / (n as f64).sqrt(),
    })
}

pub fn to_json(report: &MetricsReport) -> Result<String> {
    Ok(serde_json::to_string_pretty(report)?)
}

/// One row per class: `class,support,precision,recall,f1`, then a
/// `weighted` row.
pub fn to_csv(report: &MetricsReport) -> String {
    let mut out = String::from("class,support,precision,recall,f1\n");
    for (c, name) in report.class_names.iter().enumerate() {
        let _ = writeln!(
            out,
            "{name},{},{:.6},{:.6},{:.6}",
            report.support[c], report.precision[c], report.recall[c], report.per_class_f1[c]
        );
    }
    let total: u64 = report.support.iter().sum();
    let _ = writeln!(out, "weighted,{total},,,{:.6}", report.weighted_f1);
    out
}

/// Human-readable per-class table followed by the confusion matrix.
pub fn to_table(report: &MetricsReport) -> String {
    let width = report.class_names.iter().map(|n| n.len()).max().unwrap_or(5).max(8);
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$} {:>8} {:>9} {:>9} {:>9}", "class", "support", "precision", "recall", "f1");
    for (c, name) in report.class_names.iter().enumerate() {
        let _ = writeln!(
            out,
            "{name:<width$} {:>8} {:>9.4} {:>9.4} {:>9.4}",
            report.support[c], report.precision[c], report.recall[c], report.per_class_f1[c]
        );
    }
    let _ = writeln!(out, "accuracy {:.4}  weighted F1 {:.4}", report.accuracy, report.weighted_f1);
    let _ = writeln!(out, "\nconfusion (rows = truth)");
    let _ = write!(out, "{:<width$}", "");
    for name in &report.class_names {
        let _ = write!(out, " {:>8}", truncate(name, 8));
    }
    out.push('\n');
    for (c, row) in report.confusion.iter().enumerate() {
        let _ = write!(out, "{:<width$}", report.class_names[c]);
        for v in row {
            let _ = write!(out, " {v:>8}");
        }
        out.push('\n');
    }
    out
}

fn truncate(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_of_known_sample() {
        let s = summarize(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(s.mean, 2.5);
        assert!((s.sd - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!((s.sem - s.sd / 2.0).abs() < 1e-15);
        assert!(summarize(&[]).is_err());
    }

    #[test]
    fn outputs_are_deterministic() {
        let names = vec!["a".to_string(), "b".to_string()];
        let r = MetricsReport::from_predictions(&[0, 1, 1], &[0, 1, 0], &names).unwrap();
        assert_eq!(to_json(&r).unwrap(), to_json(&r.clone()).unwrap());
        let csv = to_csv(&r);
        assert_eq!(csv.lines().count(), 4);
        assert!(to_table(&r).contains("weighted F1"));
    }
}
