//! Metrics, probes and the evaluation report.

pub mod classifier;
pub mod metrics;
pub mod probes;
pub mod report;

pub use classifier::{AttributeClassifier, ClassifierTraining, ModelEmbedder};
pub use metrics::{inception_score, mean_std, r_precision, r_precision_hits, Classifier, Embedder};
pub use probes::{
    controllability_probe, disentanglement_pair, disentanglement_probe, masked_mean_rgb, nearest_color,
    ControllabilityResult, DisentanglementResult,
};
pub use report::{
    ablation_configs, ablation_table, caption_pool, evaluate, generate_test_set, run_ablation, AblationRow, ConfigEcho,
    EvalConfig, EvalReport, MeanStd, ABLATION_ROWS,
};
