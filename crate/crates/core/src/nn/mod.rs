//! Minimal CPU tensor engine: the layers of the signature CNN with forward
//! and backward passes, the assembled network, and its checkpoint format.

pub mod activation;
pub mod batchnorm;
pub mod checkpoint;
pub mod conv;
pub mod linear;
pub mod network;
pub mod pool;

use serde::{Deserialize, Serialize};

pub use activation::{relu, relu_backward, sigmoid, sigmoid_scalar, softmax};
pub use batchnorm::{BatchNorm, BN_EPS};
pub use conv::Conv2d;
pub use linear::Linear;
pub use network::{
    Architecture, Gradients, Layer, Network, NetworkOutput, ParamKind, SignetWidths, Trace,
};
pub use pool::MaxPool2d;

/// Batch-norm behaviour: mini-batch statistics or stored population statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Inference,
}

/// One row of the layer table. Batch norm and ReLU carry no hyperparameters;
/// their width is inferred from the preceding layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSpec {
    Conv {
        filters: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    MaxPool {
        size: usize,
        stride: usize,
    },
    FullyConnected {
        units: usize,
    },
    BatchNorm,
    Relu,
}
