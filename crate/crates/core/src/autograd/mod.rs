//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as it is evaluated; [`Graph::backward`]
//! then walks the tape in reverse, accumulating adjoints. The engine is
//! generic over the element type so the same model code runs in `f32` for
//! inference and attacks and in `f64` for gradient verification.
//!
//! Quantized linear layers use the straight-through rule: the forward value
//! comes from the mixed-precision kernel, the backward pass is that of the
//! full-precision product with the same weights.
//!
//! ```
//! use outlier_sponge::autograd::Graph;
//! use outlier_sponge::Tensor;
//!
//! let mut g = Graph::<f64>::new();
//! let x = g.param(Tensor::scalar(3.0));
//! let y = g.square(x);
//! let grads = g.backward(y).unwrap();
//! assert_eq!(g.value(y).item().unwrap(), 9.0);
//! assert_eq!(grads.get(x).unwrap().item().unwrap(), 6.0);
//! ```

mod gradcheck;
mod graph;

pub use gradcheck::{finite_diff_check, finite_diff_check_excluding, kink_coordinates, FdReport};
pub use graph::{Gradients, Graph, LinearExec, Var};
