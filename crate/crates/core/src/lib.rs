//! Streaming model merging over safetensors checkpoints.
//!
//! The crate reads a pretrained checkpoint and any number of finetuned
//! checkpoints one parameter at a time, merges each parameter with one of the
//! methods in [`algorithms`], and writes the result back out as (optionally
//! sharded) safetensors.

pub mod algorithms;
pub mod checkpoint;
pub mod error;
pub mod metrics;
mod par;
pub mod pipeline;
pub mod rng;
pub mod safetensors;
pub mod search;
pub mod stats;
pub mod tensor;

pub use algorithms::{GroupStats, MergeMethod, MergeRecipe, TaskVectorGroup};
pub use checkpoint::{
    open_checkpoint, validate_set, CheckpointManifest, CheckpointSet, ParamGroup, ParamKey,
};
pub use error::{Error, ErrorCategory, Result};
pub use tensor::{BinaryMask, DType, Tensor};
