//! Concatenation-based context-aware sequence-to-sequence translation.
//!
//! A window of `K` consecutive source sentences is translated as a single
//! sequence; only the last (current) sentence's translation is kept. The
//! crate provides the sentence-position encodings that help the model
//! tell the concatenated sentences apart (segment-shifted positions,
//! one-hot/sinusoidal/learned segment embeddings, persistent injection and
//! position-segment concatenation), a context-discounted training loss, a
//! small Transformer trained with reverse-mode differentiation, beam search
//! decoding, contrastive evaluation and a few analyses of the sinusoidal
//! position matrix.

pub mod analysis;
pub mod checkpoint;
pub mod corpus;
pub mod encodings;
pub mod error;
pub mod evalsuite;
pub mod inference;
pub mod model;
pub mod objective;
pub mod tape;
pub mod trainer;

pub use corpus::{Document, ParallelDocument, TokenId, Vocab, Window};
pub use encodings::{EncodingConfig, PositionPlan, Scheme, SegmentKind, SegmentTable, Sides};
pub use error::{Error, Result};
pub use evalsuite::{ContrastiveExample, EvalReport};
pub use model::{Model, ModelConfig, ParamStore};
pub use objective::LossConfig;
pub use trainer::TrainConfig;
