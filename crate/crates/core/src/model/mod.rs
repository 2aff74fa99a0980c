//! Decoder-only transformer with rotary positions and a causal mask.

pub mod checkpoint;
mod config;
mod forward;
mod params;

pub use config::ModelConfig;
pub use forward::{
    attention_trace, forward, forward_graph, greedy_decode, teacher_force_logits, teacher_forced_graph,
    teacher_forcing_plan, Decoded, ForwardOut,
};
pub use params::{BoundLayer, BoundParams, LayerParams, ModelParams};
