//! A small pre-norm vision transformer for desk-scale experiments.
//!
//! Every block runs four projections through the mixed-precision kernel:
//! the fused QKV projection, the attention output, and the two MLP layers.
//! Patch embedding and the classifier head stay in full precision. The
//! inputs of the quantized layers can be captured during a forward pass,
//! which is what the attack loss consumes.

mod config;
mod data;
mod io;
mod model;
mod train;

pub use config::ViTConfig;
pub use data::{stack_images, Dataset, ToyDatasetSpec};
pub use io::{decode_weights, encode_weights, load_weights, save_weights, WEIGHT_MAGIC, WEIGHT_VERSION};
pub use model::{
    argmax, init_bound, predictions, INIT_GAIN, BoundParams, Capture, CaptureBuffer, ForwardOutput, GraphForward,
    VisionTransformer,
};
pub use train::{accuracy, train_toy, TrainConfig, TrainReport};
