//! Synthetic retrieval and two-hop reasoning tasks, and the prompt
//! assembly that places gold documents at controlled positions.

pub mod dataset;
mod layout;
mod positions;
mod reasoning;
mod retrieval;
mod vocab;

pub use dataset::Instance;
pub use layout::{GoldPositions, PromptLayout};
pub use positions::{position_configs, sample_trivial_pairs, sample_trivial_positions, HopMode};
pub use reasoning::{arrange_two_hop, make_reasoning_instance, ReasoningInstance};
pub use retrieval::{arrange, make_retrieval_instance, RetrievalInstance};
pub use vocab::{derive_seed, tokens, TaskVocab, NUM_SPECIAL};
