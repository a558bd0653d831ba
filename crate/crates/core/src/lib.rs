//! A desk-scale post-training lab.
//!
//! Small softmax policies over synthetic verifiable tasks, trained with
//! supervised fine-tuning, probed for pass@k diversity, fused across
//! subdomain specialists, and refined with group-relative policy optimization
//! whose advantages are reweighted by how far each question's accuracy sits
//! from maximal uncertainty.
//!
//! - [`policy`]: architectures, sampling, log-probabilities, the SFT loss.
//! - [`tasks`]: the synthetic task universe and the exact-match verifier.
//! - [`grpo`]: rollout groups, standardized advantages, the clipped surrogate.
//! - [`mgpo`]: entropy-deviation weights and the weighted surrogate.
//! - [`spectrum`]: pass@k, checkpoint probing, specialist selection, fusion.
//! - [`decontam`]: text normalization and n-gram overlap filtering.
//! - [`harness`]: configs, run directories and the staged pipeline commands.

pub mod checkpoint;
pub mod decontam;
pub mod error;
pub mod grpo;
pub mod harness;
pub mod mgpo;
pub mod policy;
pub mod seed;
pub mod spectrum;
pub mod tasks;

pub use error::{Error, Result};
