//! Multi-view performance prediction for LLM agent workflows.
//!
//! A workflow (a DAG of agents plus workflow-level code and prompt vectors)
//! is encoded by per-view graph networks, cross-view attention and MLP
//! encoders into a single latent vector. The encoder can be pretrained
//! without labels, then fine-tuned with a small head that predicts whether
//! the workflow succeeds on a task. Trained predictors rank candidate
//! workflows without executing them.

pub mod encoder;
pub mod error;
pub mod eval;
pub mod ingest;
pub mod numerics;
pub mod predictor;
pub mod pretrain;
pub mod search;
pub mod synth;
pub mod workflow;

pub use error::{Error, Result};
