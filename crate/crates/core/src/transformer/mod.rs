//! Decoder-only transformer: token embedding, pre-norm blocks (attention and
//! a GeLU feed-forward, each with a residual connection), a final layer norm
//! and an output head, with the position encoding chosen per model.

mod attention;
mod config;
mod model;

pub use attention::{attention_layer, AttentionParams, AttentionTrace, ForwardOptions, HeadTrace};
pub use config::ModelConfig;
pub use model::{model_forward_loss, Forward, Model};
