//! Depth-recurrent diagonal state-space models for time-series
//! classification.
//!
//! The crate provides four SSM block families (LRU, S5, LinOSS, LrcSSM)
//! built on a small reverse-mode tape and a Blelloch associative scan,
//! composed into stacks whose `L` layer positions share `m` unique blocks
//! periodically. Around that sit the input reshaping preprocessor, UEA
//! `.ts` ingestion, a deterministic training harness and an executable
//! audit of the containment and gradient-aggregation identities.

pub mod blocks;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod params;
pub mod reshape;
pub mod scan;
pub mod stack;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{DType, Tensor};
