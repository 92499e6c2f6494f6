//! Forecast quality metrics, the auxiliary lesion segmenter, growth subsets
//! and method ranking.

pub mod harness;
pub mod metrics;
pub mod report;
pub mod segmenter;

pub use harness::{assemble_report, eval_pairs, score_method, EvalPair, Extrapolation, Forecaster, ModelForecaster};
pub use metrics::{dice, hausdorff, mae, mse, psnr, ssim, HdEmptyPolicy, MetricConfig};
pub use report::{
    average_ranks, build_report, pair_list_hash, rank_methods, subset_split, EvalReport, Metric, MethodRun,
    PairMetrics, ReportRow, Subset, SubsetSplit,
};
pub use segmenter::{train_segmenter, Segmenter, SegmenterConfig};
