//! Absorbing-state discrete diffusion for text generation.
//!
//! The forward process replaces tokens by `[MASK]` independently per
//! position. Each position has its own retention curve (the "spindle"
//! schedule) shaped by the unigram surprisal of the token it holds, so
//! informative tokens are masked early in the forward process and revealed
//! late during generation.
//!
//! Modules, bottom up:
//!
//! * [`corpus`]: vocabulary, tokenization and surprisal statistics.
//! * [`diffusion`]: schedules, forward marginals and closed-form posteriors.
//! * [`denoiser`]: a compact bidirectional transformer with hand-written
//!   reverse-mode gradients and a binary checkpoint format.
//! * [`training`]: variational bound objective, masked-LM pretraining, AdamW.
//! * [`sampling`]: step-skipping reverse process with top-k filtering.
//! * [`evaluation`]: bound-based perplexity proxy, BLEU-4 and self-BLEU.
//! * [`oracle`]: brute-force reference implementations used for verification.

pub mod corpus;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod evaluation;
pub mod exec;
pub mod oracle;
pub mod rng;
pub mod sampling;
pub mod training;

pub use error::{Error, Result};
pub use exec::Exec;
