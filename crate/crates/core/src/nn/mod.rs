//! Minimal convolutional engine: tensors, conv / max-pool / channel-norm /
//! leaky-ReLU layers with hand-written backward passes, momentum SGD, and a
//! checksummed parameter file.

mod io;
mod layers;
mod network;
mod sgd;
mod tensor;

pub use io::{
    check_same_architecture, decode_params, encode_params, load_params, load_params_into,
    save_params, PARAM_MAGIC, PARAM_VERSION,
};
pub use layers::{LayerSpec, LEAKY_SLOPE, NORM_EPS};
pub use network::{Layer, Mode, Network};
pub use sgd::Sgd;
pub use tensor::Tensor;
