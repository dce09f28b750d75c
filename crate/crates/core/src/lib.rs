//! Conversational prompting harness for personalized review generation.
//!
//! A user's review history becomes a multi-turn chat in which the assistant
//! "replays" the user's past reviews ([`forge`]), optionally preceded by
//! rejected negative examples ([`negatives`]). Conversations are sent through
//! [`gateway`] and the outputs are scored with [`metrics`], [`downstream`] and
//! [`stats`]; [`runner`] ties everything into reproducible experiment runs.

pub mod corpus;
pub mod downstream;
pub mod forge;
pub mod gateway;
pub mod labels;
pub mod metrics;
pub mod negatives;
pub mod runner;
pub mod sidecar;
pub mod stats;
