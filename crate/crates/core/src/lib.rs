//! A desk-scale laboratory for positional bias in a toy transformer.
//!
//! The crate trains a small rotary-position decoder on synthetic key–value
//! retrieval and two-hop reasoning prompts, induces a position preference
//! by skewing where the gold document sits during pre-training, and then
//! removes that preference with position-to-position distillation:
//!
//! * retrieval: per-token KL from the frozen teacher's response at the
//!   first document slot into prompts with the gold document elsewhere,
//!   with position-aware loss weighting and an anchoring term;
//! * reasoning: cross-entropy on chain trajectories sampled with the hop
//!   documents at the end of the context, replayed at random hop slots.
//!
//! Everything runs on the CPU in `f64` with a hand-written reverse-mode
//! engine ([`autograd`]) whose gradients are checked against
//! [`gradcheck::finite_difference_grad`].

pub mod autograd;
pub mod distill;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gradcheck;
pub mod induce;
pub mod model;
pub mod optim;
pub mod prob;
pub mod tasks;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
