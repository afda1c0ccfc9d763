//! Dense differentiable compute for the detector and the quantization losses.

pub mod adam;
pub mod conv;
pub mod graph;
pub mod layer;

pub use adam::{adam_step, AdamState};
pub use conv::{conv2d_backward, conv2d_forward, ConvGeom};
pub use graph::{Gradients, Graph, Var};
pub use layer::{
    batchnorm_forward, fold_batchnorm, relu_inplace, sigmoid, Activation, LayerRole, LayerSpec, Network, Precision,
};
