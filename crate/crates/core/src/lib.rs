//! Identity/attribute disentangled image synthesis.
//!
//! An identity encoder and an attribute encoder split an image into an
//! identity vector and a KL-regularized attribute vector; a generator
//! recombines them. Training alternates reconstruction and transformation
//! steps, with the generator matching discriminator and classifier features
//! instead of playing the usual log-loss game.

pub mod adversarial;
pub mod checkpoint;
pub mod datasets;
pub mod error;
pub mod eval;
pub mod image_io;
pub mod losses;
pub mod networks;
pub mod nn;
pub mod synthesis;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
