//! Batch audit harness for bail-decision prediction with vision-language
//! models.
//!
//! The pipeline pairs mugshot references with preprocessed case facts,
//! prompts a model under one of five configurations (standalone, precedent
//! retrieval, and three fine-tuned variants), and scores the answers per
//! race × gender group with accuracy, negative likelihood ratio, negative
//! predictive value and the high-confidence false-negative share. It also
//! exports fine-tuning datasets in which image attention is masked.

pub mod backend;
pub mod corpus;
pub mod digest;
pub mod error;
pub mod eval;
pub mod jsonl;
pub mod offense_tagger;
pub mod pairing;
pub mod prompting;
pub mod provenance;
pub mod retrieval;
pub mod sft_export;
pub mod text;

pub use backend::{
    run_batch, Backend, BackendConfig, BatchJob, BatchOptions, BatchOutcome, MockRule,
    ModelBackend,
};
pub use corpus::{count_tokens, preprocess_case, split_corpus, CaseFact, PreprocessConfig, RawCase, Split};
pub use error::{Error, Result};
pub use eval::{
    accuracy, build_report, confusion_by_group, evaluate, high_conf_fn_share, lr_minus, npv,
    ConfigurationMetrics, ConfusionMatrix, GroupMetrics, PairRef, PredictionRecord, Report,
    UnparseablePolicy,
};
pub use offense_tagger::{expand_lexicon, tag_case, OffenseLexicon, TagOptions, TypedFact};
pub use pairing::{generate_pairs, load_roster, sample_training_pair, Group, ImageRecord, Pair, PairSet};
pub use prompting::{
    build_prompt, parse_confidence, parse_decision, Confidence, Configuration, Decision,
    DecisionRules, PromptBundle, PromptOptions, Templates,
};
pub use provenance::RunManifest;
pub use retrieval::{build_index, Embedder, HashingEmbedder, PrecedentIndex, RetrievalResult};
pub use sft_export::{export_sft, Scheme, SftManifest, SftRecord};
