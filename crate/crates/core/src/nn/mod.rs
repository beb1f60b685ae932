//! Minimal neural-network toolkit: dense tensors, a reverse-mode tape,
//! common layers and the Adam optimizer.

pub mod artifact;
pub mod gradcheck;
pub mod kernels;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use artifact::ModelArtifact;
pub use layers::{Embedding, FeedForward, LayerNorm, Linear, MultiHeadAttention};
pub use optim::Adam;
pub use params::{Gradients, NamedTensor, ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
