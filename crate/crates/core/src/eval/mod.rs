//! Zero-shot prediction on new datasets, large-data handling, metrics and
//! prior-diversity diagnostics.

mod diversity;
mod metrics;
mod predict;

pub use diversity::{
    analyze_prior, ordinary_datasets, pearson_strength, prior_diversity_report, DiversityReport, Histogram2d,
    KlMode, PriorAnalysis, Summary, GRID_BINS, GRID_LIMIT, SMOOTHING,
};
pub use metrics::{
    binary_auc, mse, rank_and_wins, roc_auc_ovo, split_summary, MetricReport, SplitSummary,
};
pub use predict::{
    combine_classification, combine_regression, permutation_ensemble, predict, predict_batched,
    predict_episode, predict_normalized, prediction_nll, score_episodes, subsample_features,
    BatchPlan, Ensemble, PredictOptions,
};
