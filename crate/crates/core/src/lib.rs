//! Grid-building assistance game with a hidden goal, a belief-augmented
//! MCTS trainer, human models, baseline trainers and an evaluation harness.

pub mod error;
pub mod eval;
pub mod goals;
pub mod humans;
pub mod mcts;
pub mod net;
pub mod training;
pub mod world;

pub use error::{Error, Result};
