//! Adversarial counterfactual learning for recommender systems.
//!
//! A candidate recommender `f` and an adversarial exposure model `g` play a
//! minimax game over a propensity-weighted loss; this crate provides the models,
//! the two-timescale trainer, ERM and two-stage propensity baselines, a
//! semi-synthetic exposure simulator with ground-truth propensities, and ranking
//! evaluation under standard, oracle, popularity and robust weighting.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod models;
pub mod numerics;
pub mod propensity;
pub mod simulation;
pub mod training;

pub use error::{Error, Result};
