//! Equivariant encryption for blind transformer inference.
//!
//! A model is transformed once, offline, by a key made of permutations. The
//! transformed model runs unchanged inference code on permuted token ids and
//! produces permuted logits; only the key holder can map them back. The crate
//! also carries the tooling around that idea: attacks that try to recover the
//! vocabulary permutation from observed traffic, a fidelity and latency
//! harness, and a deterministic simulator of a sharded pipeline passing
//! encrypted activations between workers.

pub mod attack;
pub mod bench;
pub mod container;
pub mod ee;
pub mod error;
pub mod exec;
pub mod model;
pub mod shard;
pub mod tensor;

pub use container::{load_model, save_model};
pub use ee::{keygen, load_key, save_key, verify_equivariance, EEKey, EquivarianceReport};
pub use error::{EeError, Result};
pub use exec::Exec;
pub use model::{init_model, init_model_with_std, Domain, ModelBundle, ModelConfig, NormKind, TokenSeq};
pub use tensor::{ActKind, PermTable, Tensor2};
