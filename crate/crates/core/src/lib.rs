//! Compositional referring-expression toolkit.
//!
//! The crate turns scene graphs into unambiguous referring expressions built
//! from six logic forms, mines controlled distractor images for every
//! expression, balances and splits the resulting dataset, and evaluates
//! region scorers under the multi-image grounding protocol. The modular
//! hard-negative sampler and its hinge losses live in [`mining`].
//!
//! Module map:
//!
//! - [`scene_graph`]: corpus loading, canonicalization and target filtering.
//! - [`reasoning`]: logic forms, reasoning-tree parsers and the semantic matcher.
//! - [`expression`]: template filling, synonym substitution and bias probes.
//! - [`distractor`]: distractor-type predicates and task-instance assembly.
//! - [`balance`]: relation balancing, spatial-only filtering, splits and statistics.
//! - [`eval`]: region selection, scorers and accuracy reports.
//! - [`mining`]: cosine sampling table, negative sampling and losses.
//! - [`pipeline`]: end-to-end orchestration used by the command-line tool.

pub mod balance;
pub mod config;
pub mod distractor;
pub mod eval;
pub mod expression;
pub mod ids;
pub mod jsonl;
pub mod mining;
pub mod pipeline;
pub mod reasoning;
pub mod scene_graph;
pub mod synth;

pub use ids::{ImageId, ObjectId};
