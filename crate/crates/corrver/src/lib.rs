//! Correlation verification for image retrieval.
//!
//! An initial ranking produced by global descriptor similarity is refined by
//! a learned verifier: for each candidate pair the crate builds a cross-scale
//! 4D correlation volume between local feature maps, encodes it with
//! center-pivot 4D convolutions into a pair similarity score, and fuses that
//! score with the global one to re-order the shortlist.
//!
//! Everything runs on plain `f32` buffers on the CPU with hand-written
//! backward passes, which keeps the whole pipeline deterministic: the same
//! seeds and inputs yield byte-identical weights, scores, and rankings.

pub mod correlation;
pub mod encoder;
pub mod error;
pub mod objectives;
pub mod ops;
pub mod retrieval;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{QuantizedTensor, Tensor};
