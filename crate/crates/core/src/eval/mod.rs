pub mod metrics;
pub mod protocol;

pub use metrics::{auroc, balanced_accuracy, balanced_accuracy_at, mean_std, percentile, percentile_threshold, roc_points};
pub use protocol::{evaluate_rows, evaluate_scores, run_multi_class, run_one_class, run_protocol, EvalReport, MeanStd, TaskMetrics};
