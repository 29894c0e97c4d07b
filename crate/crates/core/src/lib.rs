//! Semi-supervised video object segmentation with a space-time memory and
//! dynamic per-object queries, at toy scale on the CPU.

pub mod config;
pub mod error;
pub mod evalsynth;
pub mod formats;
pub mod gradsuite;
pub mod membank;
pub mod pipeline;
pub mod querymod;
pub mod segnet;
pub mod weights;

pub use config::RunConfig;
pub use error::{QmvosError, Result};
pub use weights::NetWeights;
