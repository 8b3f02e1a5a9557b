//! Session-based next-item recommendation on session graphs.
//!
//! A click session is converted into a weighted directed graph over its
//! distinct items, encoded with multi-head weighted graph attention
//! (edge weights enter the attention logits), pooled into a session
//! embedding by a GRU-driven set2set readout, and scored against the
//! full item vocabulary through tied input embeddings. Training runs on
//! a small self-contained reverse-mode autodiff tape with Adam, step
//! learning-rate decay and L2 regularization.
//!
//! The crate also ships the surrounding experiment machinery: click-log
//! ingestion with filtering/augmentation/temporal splits, a synthetic
//! Markov-chain corpus generator, ranking metrics, classical baselines
//! (POP, S-POP, Item-KNN), readout ablations, checkpointing, and a CLI
//! (`preprocess`, `synth`, `train`, `evaluate`, `ablate`, `gradcheck`).

pub mod autodiff;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod layers;
pub mod model;
pub mod readout;
pub mod session_graph;
pub mod train;
pub mod wgat;

pub use error::{FgnnError, Result};
