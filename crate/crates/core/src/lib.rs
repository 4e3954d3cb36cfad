//! Data layer for weakly supervised multi-view video learning: tensors and
//! their on-disk format, sequences with frame labels and action bags, person
//! detections turned into PD/SL vectors, and a synthetic scene generator.

pub mod data;
pub mod detect;
pub mod error;
pub mod mvt;
pub mod synth;
pub mod tensor;

pub use error::{CoreError, Result};
pub use tensor::{Real, Tensor};
