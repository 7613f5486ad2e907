//! Storing the knowledge of several frozen classifiers in one ring-partitioned
//! visual prompt, using only synthetic data.

pub mod baselines;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod geometry;
pub mod losses;
pub mod models;
pub mod pretrain;
pub mod run;
pub mod seed;
pub mod storing;
pub mod synthesis;

pub use error::{KiopError, Result};
pub use geometry::{BoundPrompt, PromptInit, RingPartition, VisualPrompt};
pub use fusion::LabelMapping;
pub use models::FrozenModel;
