//! Metrics, cross-validation splits and the experiment protocols.

pub mod harness;
pub mod metrics;
pub mod report;
pub mod split;

pub use harness::{
    run_class_robustness, run_comparative, run_data_efficiency, run_experiment, DatasetSource, EvalReport,
    ExperimentConfig, ExperimentKind, ExperimentOutput, FlowSettings, RunOptions,
};
pub use metrics::{
    average_precision, confusion_metrics, pr_curve, roc_auc, roc_curve, score_histogram, select_threshold_f1,
    Confusion, Histogram, PrPoint, RocPoint, ScoredSet, ThresholdChoice,
};
pub use report::{summarize, summary_csv, write_outputs, ExperimentReport, SummaryRow};
pub use split::{holdout_split, kfold_split, FoldSplit};
