//! Layer-to-layer knowledge distillation from a full-context speech encoder
//! into a chunk-wise streaming encoder, at desk scale.
//!
//! The crate contains its own small reverse-mode differentiation engine
//! ([`autodiff`]), the three attention mask kinds ([`mask`]), teacher and
//! student encoders ([`encoder`]), the auxiliary training-only branch
//! ([`aux_branch`]), the distillation losses ([`distill`]), a transducer
//! head with exact likelihood ([`transducer`]) and the toy training
//! harness ([`trainer`]).

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod aux_branch;
pub mod distill;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod mask;
pub mod nn;
pub mod params;
pub mod rng;
pub mod suite;
pub mod tensor;
pub mod trainer;
pub mod transducer;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use mask::{AttentionMask, MaskKind};
pub use tensor::Tensor;
