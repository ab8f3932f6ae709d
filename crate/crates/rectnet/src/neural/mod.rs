//! Self-contained neural-network engine: convolutional, pooling, dense,
//! LSTM, and softmax layers with exact analytic gradients, an SGD
//! optimizer with momentum, finite-difference gradient checking, and a
//! binary checkpoint format.
//!
//! Everything is generic over the scalar type so training runs in f32
//! while gradient checks run in f64.

pub mod checkpoint;
pub mod gradcheck;
pub mod init;
pub mod layers;
pub mod loss;
pub mod lstm;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tensor;

pub use params::Tensors;
pub use scalar::Scalar;
pub use tensor::Image;
