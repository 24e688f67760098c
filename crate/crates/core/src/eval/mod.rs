//! Classification metrics, significance testing and report writers.

mod metrics;
mod report;
mod ttest;

pub use metrics::{accuracy, argmax_rows, confusion_matrix, per_class_f1, precision_recall, weighted_f1, MetricsReport};
pub use report::{summarize, to_csv, to_json, to_table, Summary};
pub use ttest::{ln_gamma, paired_t_test, regularized_incomplete_beta, student_t_cdf, TTestResult};
