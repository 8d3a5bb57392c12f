//! Contextual rule extraction and rule-tree based service recommendation.
//!
//! The pipeline: raw context is semanticized into attributes
//! ([`context`]); UI event streams are matched against labeled services
//! ([`recognition`]); on each recognized usage the user's one-sentence
//! reason is mapped to the attributes it refers to ([`identify`]); the
//! resulting rule lands in a context rule tree ([`rules`]), which drives the
//! ranked recommendation list ([`recommend`]). [`engine`] ties these
//! together behind an append-only journal, and [`replay`] drives the engine
//! from trace files to compute coverage and accumulation metrics.

pub mod catalog;
pub mod context;
pub mod engine;
pub mod metrics;
pub mod identify;
pub mod recognition;
pub mod recommend;
pub mod replay;
pub mod rules;
