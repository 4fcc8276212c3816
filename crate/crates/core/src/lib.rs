pub mod activations;
pub mod diffusion;
pub mod dit;
pub mod error;
pub mod guidance;
pub mod intervention;
pub mod numerics;
pub mod workbench;

pub use error::{Error, Result};
pub use numerics::{Graph, Tensor, Var};
