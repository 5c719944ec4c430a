//! Corpus-curation toolkit for LLM post-training data: cleaning and
//! deduplicating parallel corpora, uncertainty-based sample selection,
//! instruction/chat formatting, replay-balanced mixture assembly with
//! accounting reports, and role-based loss masks.

pub mod cleaning;
pub mod dedup;
pub mod formatting;
pub mod mask;
pub mod mixture;
pub mod model;
pub mod uncertainty;

pub use model::{
    Conversation, DatasetManifest, Message, ParallelPair, Policy, ReasoningMode, Role,
    TokenCounter, WhitespaceCounter,
};
