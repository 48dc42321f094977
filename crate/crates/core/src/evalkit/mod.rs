//! Downstream evaluation: classification and segmentation probes on a frozen
//! encoder, severity-ordering diagnostics, metric reports, and the α sweep.

mod metrics;
mod probes;
mod report;
mod sweep;

pub use metrics::{
    average_ranks, f1_recall_macro, iou_dice, maee, ordering_diagnostic, spearman, ConfusionTally,
};
pub use probes::{
    evaluate_classification, evaluate_ordering, evaluate_segmentation, ClassifyOutcome, OrderingOutcome,
    SegmentOutcome, Standardizer,
};
pub(crate) use report::lf_writer;
pub use report::{dataset_digest, write_metrics_csv, MetricsReport, METRICS_CSV_COLUMNS};
pub use sweep::{alpha_sweep, parse_alpha_spec, run_classification, write_sweep_csv, SweepRow, SWEEP_CSV_COLUMNS};
