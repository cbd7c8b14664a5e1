//! Attacks on the vocabulary permutation from observed encrypted traffic.
//!
//! The attacker sees ciphertext (prompt, response) pairs, knows the
//! plaintext model and the vocabulary, and searches for the map from
//! ciphertext ids back to plaintext ids. Candidates are scored by
//! [`total_loss`]; [`brute_force`], [`random_sampling`] and [`hill_climb`]
//! search the permutation space.

mod corpus;
pub mod judge;
mod loss;
mod optim;

pub use corpus::{Pair, TranscriptCorpus};
pub use judge::{judge_from_env, ConstJudge, HttpJudge, Judge, StubJudge};
pub use loss::{
    bigram_loss, consistency_penalty, judge_loss, total_loss, unigram_from_sequences,
    unigram_loss, AttackConfig, BigramTable, LossBreakdown, LossWeights, ModelOracle, Oracle,
};
pub use optim::{
    brute_force, hill_climb, hill_climb_from, random_sampling, recovery_rate, restart_seed,
    AttackState, Method, TracePoint, BRUTE_FORCE_MAX_VOCAB,
};
