//! Downstream evaluation: metrics, linear probe, semi-supervised
//! fine-tuning, baselines, report aggregation and embedding export.

mod downstream;
mod metrics;
mod report;

pub use downstream::{
    export_embeddings, finetune_semisupervised, linear_evaluate, run_random_init_baseline, run_supervised_baseline,
    softmax_cross_entropy, ClassifierModel, EvalReport, Protocol,
};
pub use metrics::{compute_metrics, Metrics};
pub use report::{aggregate, load_reports, mean_std, pct, refresh_results_table, write_csv, ResultRow, RESULTS_TABLE};
