//! Metrics and the SNR sweep.

pub mod metrics;
pub mod sweep;

pub use metrics::{bleu1, bleu1_text, precision_recall, scorer_by_name, PrCounts, PrecisionRecall, SimilarityScorer, TfCosine};
pub use sweep::{run_snr_sweep, write_metrics_csv, MetricsRow, ModelSelection, ReceiverKind, SweepConfig, SweepModels, METRICS_HEADER};
