pub mod attack;
pub mod autograd;
mod binio;
pub mod error;
pub mod harness;
pub mod quantlinear;
pub mod tensor;
pub mod vit;

pub use error::{Error, Result};
pub use tensor::Tensor;
