//! Evaluation metrics and attention analyses.

mod attention;
mod export;
mod metrics;

pub use attention::{attention_rollout, rollout_from_heads, temporal_attention, Rollout};
pub use export::{
    format_sig9, quantile, write_modality_attention_csv, write_per_class_csv, write_temporal_quantiles_csv,
    ModalityAttentionRow, PerClassRow, QUANTILES,
};
pub use metrics::{
    class_mean_top1, class_mean_topk_recall, marginal_predictions, marginalize, per_class_hits, topk_accuracy,
    Prediction,
};
