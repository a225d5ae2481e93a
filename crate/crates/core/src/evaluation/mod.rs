//! Gallery/probe retrieval metrics, the cross-view protocol, and the
//! statistics used to compare trained variants.

mod experiment;
mod protocol;
mod retrieval;
mod stats;

pub use experiment::{
    ablation_run, ablation_variants, partition_variants, run_seeds, run_variants, stage_label,
    train_and_score, ExperimentTable, PairwiseTest, Splits, Variant, VariantResult,
};
pub use protocol::{
    casia_eval, cross_view_eval, Cell, CrossViewProtocol, EvalReport, ProbeReport, SessionGroup,
    CASIA_VIEWS,
};
pub use retrieval::{
    embed_sequences, grew_eval, rank_k_accuracy, EmbeddingRow, EmbeddingSet, GREW_RANKS,
};
pub use stats::{pearson_r, student_t_sf, student_t_two_sided, welch_t_test, WelchResult};
