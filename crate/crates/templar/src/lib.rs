//! Template-action Q-learning for text games.
//!
//! The crate bundles a deterministic text-game engine, a reading-comprehension
//! style observation-action value network built on a small reverse-mode
//! autodiff tape, object-centric retrieval over past observations, and a DQN
//! training loop with prioritized trajectories.

pub mod actions;
pub mod agent;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod rcmodel;
pub mod retrieval;
pub mod text;
pub mod world;
