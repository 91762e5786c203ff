//! Knowledge graph embedding models wrapped in conformal set predictors.
//!
//! A trained model scores every candidate answer of a link prediction query
//! `<h, r, ?>` / `<?, r, t>`. The conformal predictors turn those scores into
//! answer sets that contain the true answer with probability at least `1 - ε`
//! under exchangeability; the baselines (naive softmax accumulation, Platt
//! scaling, top-K) come without that guarantee.

pub mod baselines;
pub mod checkpoint;
pub mod conformal;
pub mod error;
pub mod eval;
pub mod kg;
pub mod models;
pub mod numeric;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
pub use kg::{
    build_filter_index, make_query_examples, Direction, EntityId, FilterIndex, KnowledgeGraph, Query,
    QueryExample, RelationId, Split, Triple,
};
pub use models::{init_model, ModelKind, ModelParams};
