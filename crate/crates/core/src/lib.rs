//! Pairwise-modality latent identifiability laboratory.
//!
//! Synthetic worlds in which several modalities are generated from
//! partially shared latent factors and only pairs of modalities are ever
//! observed together. The crate samples such worlds, certifies the rank and
//! sparsity conditions under which the shared factors are recoverable,
//! trains a two-stage alignment/recomposition model on the pairs, and scores
//! how much of the ground truth the learned codes recover.

pub mod audit;
pub mod autodiff;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod linalg;
pub mod optim;
pub mod rng;
pub mod scm;
pub mod stage1;
pub mod stage2;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{ParamSet, Tensor};
