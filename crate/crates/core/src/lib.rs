//! Parameter-efficient fine-tuning for a desk-scale text-image grounding
//! transformer: LoRA, bottleneck adapters and BitFit, with placement
//! policies over the text encoder, image encoder and decoder, weight
//! merging, delta checkpoints and the grounding metric suite.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod peft;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
