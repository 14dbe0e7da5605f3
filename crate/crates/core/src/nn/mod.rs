//! Transformer blocks, the convolutional speech frontend, and parameters.

mod config;
mod frontend;
mod layers;
mod params;
mod trace;

pub use config::{AdaptorKind, ModelConfig};
pub use frontend::ConvFrontend;
pub use layers::{
    add_positions, positional_encoding, DecoderLayer, DecoderStack, EncoderLayer, EncoderStack,
    FeedForward, LayerNorm, Linear, MultiHeadAttention, StackOutput, TokenEmbedding,
};
pub use params::{ParamId, ParamStore};
pub use trace::{AttentionTrace, LayerAttention};

#[cfg(test)]
mod tests;
