//! Visual and textual question answering with three levels of fusion.
//!
//! Questions about an image are answered from object features, templated
//! object-property sentences and a paragraph caption. The two branches are
//! joined by cross-attention (early fusion), their answer logits are pooled
//! with max/mean voters (late fusion), and answers named by the detected
//! objects receive extra credit at inference (answer recommendation).
//!
//! Every equation runs on the small reverse-mode engine in [`tape`], so the
//! whole model can be gradient-checked against finite differences.

pub mod data;
pub mod decision;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod model;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod text;
pub mod train;
pub mod viz;

pub use error::{CheckpointError, Error, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
