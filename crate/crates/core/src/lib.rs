//! Spiking neural networks with learnable real-valued spikes, and their exact
//! conversion into binary-spike networks with unshared convolution kernels.
//!
//! Training uses neurons whose binary spikes are scaled by a learnable
//! coefficient (per layer, per channel or per element). [`reparam`] folds those
//! coefficients into the following layer's weights, which yields an
//! inference network that only exchanges `{0, 1}` spikes and produces the same
//! outputs.

pub mod analysis;
pub mod data_io;
pub mod error;
pub mod network;
pub mod neuron;
pub mod reparam;
pub mod tensor;

pub use error::{Error, Result};
pub use network::{Architecture, ForwardOptions, LayerSpec, Network};
pub use neuron::{CoefficientTensor, Firing, Granularity, NeuronConfig};
pub use tensor::{ConvKernel, LocalKernel, Tensor};
