//! Corpus records, synthetic data and span-level evaluation.

mod corpus;
mod eval;
mod synthetic;

pub use corpus::{corpus_to_string, load_corpus, parse_corpus, save_corpus, Entity, Example, LabelSet, NONE_LABEL};
pub use eval::{evaluate, span_recall_at_m, Counts, EvalConfig, EvalReport, PredictedEntity, Prediction};
pub use synthetic::{generate_synthetic, has_nested, SyntheticConfig};
