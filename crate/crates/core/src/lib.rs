//! Value-guided Monte-Carlo tree search decoding.
//!
//! A policy model proposes next tokens, a value model scores partial
//! sequences, and the search combines the two with PUCT selection, KL-aware
//! backups and visit-count decoding. The crate also ships a small tabular
//! PPO trainer that produces matching policy/value pairs on synthetic token
//! MDPs, reference decoding baselines, metrics, and a newline-delimited JSON
//! protocol for remote evaluators.

pub mod baselines;
pub mod config;
pub mod engine;
pub mod env;
pub mod evaluator;
pub mod math;
pub mod metrics;
pub mod policy;
pub mod ppo;
pub mod protocol;
pub mod tree;

/// Index into a vocabulary.
pub type Token = u32;

pub use engine::{decode_sequence, DecodeConfig, DecodeOutcome, EngineError, Search};
pub use env::{enumerate_returns, goal_rate, EnvError, OracleResult, RewardSpec, ToyEnv};
pub use evaluator::{
    make_ground_truth_evaluator, CachedEvaluator, EvalError, Evaluator, EvaluatorCaps,
    EvaluatorOutput, ScoredAction, TabularEvaluator,
};
pub use policy::{HashedLogits, Policy};
pub use ppo::{train, PpoConfig, PpoError, PpoState};
pub use tree::{NodeId, SearchTree, TreeError};
