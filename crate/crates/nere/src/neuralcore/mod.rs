//! Minimal differentiable-computation core: exactly the layers the
//! recommendation model needs, with hand-rolled reverse-mode gradients.

pub mod attention;
pub mod gru;
pub mod layers;
pub mod optim;
pub mod tensor;

pub use attention::{AttentionWithContext, AttnCache};
pub use gru::{BidirCache, Bidirectional, GruCache, GruCell};
pub use layers::{
    add_l2, apply_mask, dropout_mask, mse_loss, Activation, BatchNorm, BnCache, Dense,
    EmbeddingLayer,
};
pub use optim::Adam;
pub use tensor::Tensor;
