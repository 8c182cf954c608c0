//! Aspect-based sentiment analysis with supervised contrastive pre-training
//! on retrieved review sentences, built on a small reverse-mode autodiff
//! engine. No external ML dependencies.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod data;
pub mod error;
pub mod finetune;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod pretrain;
pub mod sampler;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod trainer;
pub mod vocab;

pub use error::{Result, ScaptError};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
