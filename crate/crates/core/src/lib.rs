//! Core of the cross-modal person re-identification pipeline.
//!
//! Everything in this crate is pure computation over `alloc` collections:
//! the procedural multimodal corpus, the token mapper, the unified
//! transformer encoder, synthetic modality augmentation, cue fusion, the
//! contrastive training loop and the retrieval metrics. File formats and the
//! command-line driver live in the `umm` crate.
//!
//! Numerics run in `f64` with `libm` transcendental functions so results are
//! reproducible across platforms.

#![cfg_attr(not(any(feature = "std", test)), no_std)]

extern crate alloc;

pub mod autograd;
pub mod datamodel;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod math;
pub mod modality;
pub mod model;
pub mod params;
pub mod retrieval;
pub mod rng;
pub mod synthesis;
pub mod tensor;
pub mod token_mapper;
pub mod training;

pub use error::{Error, Result};
pub use modality::{ModalityKind, ModalitySet};
pub use model::{ModelConfig, UmmModel};
pub use tensor::Tensor;
