pub mod cli;
pub mod config;
pub mod dataio;
pub mod embedder;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod postprocess;
pub mod pretrain;
pub mod sampler;
pub mod seed;
pub mod segmenter;
pub mod synth;

pub use error::{Error, Result};
