//! Text-to-text recommendation toolkit.
//!
//! Recommendation tasks — rating prediction, next-item prediction,
//! explanation generation, review summarization, and direct recommendation —
//! are all expressed as text-in/text-out pairs produced by prompt templates.
//! One encoder–decoder model is trained on the mixed pair stream with a
//! single generation objective and then evaluated per task, including on
//! prompt wordings held out of training.
//!
//! Module map:
//! - [`prompts`]: template registry, rendering, pretrain/zero-shot splits
//! - [`tokenizer`]: byte-pair subword vocabulary with whole-word ids
//! - [`corpus`]: raw data, protocol splits, sampling, pair construction
//! - [`model`]: encoder–decoder transformer with exact gradients
//! - [`train`]: optimizer, schedule, training loop, gradient audit
//! - [`search`]: greedy, beam, and trie-constrained decoding
//! - [`metrics`]: rating, ranking, and text-overlap metrics
//! - [`eval`]: task evaluation protocols, transfer, ablations, manifests

/// Library version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub mod corpus;
pub mod eval;
pub mod metrics;
pub mod model;
pub mod prompts;
pub mod search;
pub mod tokenizer;
pub mod train;
