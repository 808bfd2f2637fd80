//! Two-tower image-text alignment lab.
//!
//! A desk-scale training stack for multi-level image-text alignment: a
//! global instance-level contrastive objective with progressively softened
//! targets, a bipartite-matching token-level objective, and masked language
//! modeling enhanced by image-to-text cross-attention fusion. Everything
//! runs on a built-in dense f64 tensor engine with reverse-mode autodiff,
//! exercised end-to-end on a synthetic paired-modality corpus with known
//! patch-to-token ground truth.
//!
//! The `parallel` feature (on by default) routes data-parallel inner loops
//! (corpus generation, batched assignment solving, retrieval ranking,
//! gradient probing, large matmuls) through rayon. Disabling it yields a
//! bitwise-identical sequential build; `benches/parallel_vs_sequential.rs`
//! compares the two paths.

pub mod checkpoint;
pub mod corpus;
pub mod counters;
pub mod encoders;
pub mod error;
pub mod instance;
pub mod matching;
pub mod mlm;
pub mod optim;
pub mod par;
pub mod rng;
pub mod tensor;
pub mod token_align;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, TensorId};
