//! Listwise learning-to-rank for label-generating rankers.
//!
//! A small autoregressive pointer ranker emits one distribution over label
//! tokens per output position. It is trained with next-token cross-entropy,
//! a lambda loss on soft-argmax positions, and a KL consistency term between
//! the original and a shuffled candidate slate.

pub mod checkpoint;
pub mod config;
pub mod consistency;
pub mod data;
pub mod model;
pub mod parallel;
pub mod ranking;
pub mod stats;
pub mod tape;
pub mod template;
pub mod train;
