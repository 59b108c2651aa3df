//! Dual-stream transformer with implicit fine-grained cross-modal alignment
//! (IFAformer) for multimodal relation extraction, together with a
//! controllable synthetic task, training/evaluation, and the experiment
//! protocols used to probe how much the model relies on vision.

pub mod encoder;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod synthetic;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{Activation, Tape, Var};
pub use tensor::Tensor;
