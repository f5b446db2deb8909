//! Ranks personal attribute values (profession, hobby, ...) for users of a
//! conversation system without any labeled utterances. Supervision is
//! derived automatically: encyclopedia pages labeled by title or category
//! matching, and attribute-indicative words mined from text through a
//! masked-language-model head. A pre-trained encoder is fine-tuned on both
//! sources with a confidence-weighted generalized cross entropy, then each
//! user's utterances are classified and the candidate values ranked.

pub mod backend;
pub mod config;
pub mod corpus;
pub mod eval;
pub mod mining;
pub mod model;
pub mod pipeline;
pub mod supervision;
pub mod text;
pub mod train;
