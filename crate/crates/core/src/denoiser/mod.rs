//! Compact bidirectional transformer predicting `p(x0 | x_t)`.
//!
//! Input rows are `[CLS]`, an optional step token (prefix mode), then the
//! sequence. Blocks are pre-norm: `x += Attn(LN(x)); x += FFN(LN(x))`.
//! Several sequences of different lengths are packed into one row matrix
//! so the dense layers run as single large products; attention stays
//! within each sequence. Gradients are hand-derived; see
//! [`Denoiser::backward`].

mod checkpoint;
mod model;
pub mod ops;
mod params;

pub use checkpoint::{Checkpoint, CheckpointMeta, FORMAT_VERSION, MAGIC};
pub use model::{Denoiser, ForwardCache, Logits, SeqInput};
pub use ops::Scalar;
pub use params::{DenoiserConfig, DenoiserParams, LayerParams, Tensor, TimeMlp, TimeMode, INIT_STD};
