//! Span enumeration, the batched model, training and decoding.

pub(crate) mod config;
mod model;
mod reference;
mod spans;
mod train;

pub use config::{apply_kv_lines, ModelConfig};
pub use model::{
    CrossForward, EncodedSentence, Forward, LossParts, Model, ReferenceWeights, ScoringPath, SentenceOutput,
};
pub use reference::{mean_cross_entropy, reference_forward, ReferenceOutput};
pub use spans::{enumerate_spans, select_top_m, span_key, top_m_indices, SentenceLogits};
pub use train::{
    batch_gradients, evaluate_model, predict_corpus, train, AdamW, DevScores, EpochMetrics, TrainOptions, TrainReport,
    BEST_CHECKPOINT, LAST_CHECKPOINT, METRICS_FILE,
};
