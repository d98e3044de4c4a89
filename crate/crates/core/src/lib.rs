//! Streaming pipeline for sector-split pixel detector data.
//!
//! Four sector producers push two-part messages to an aggregator, which routes
//! every sector of frame `f` to NodeGroup `f mod n`. NodeGroups reassemble
//! frames, run electron counting and write a sparse event file. Membership is
//! replicated through a sequenced key-value store, and an HTTP orchestrator
//! manages streaming sessions. See the crate `examples/` for runnable tours of
//! each piece.

pub mod aggregator;
pub mod bench;
pub mod cluster;
pub mod consumer;
pub mod counting;
pub mod orchestrator;
pub mod producer;
pub mod protocol;
pub mod sparse;
pub mod statestore;
pub mod transport;
