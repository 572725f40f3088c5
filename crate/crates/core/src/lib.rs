//! Cascaded multi-encoder 3D UNet for multi-modal brain tumor segmentation.
//!
//! The pipeline runs from four-modality MR volumes ([`volume`]) through
//! normalisation ([`preprocess`]), augmentation ([`augment`]) and a three-stage
//! cascade of grouped-encoder UNets ([`cascade`]) trained with a Dice loss
//! ([`loss`], [`train`]). [`metrics`] and [`evaluate`] score label maps on the
//! whole tumor, tumor core and enhancing tumor regions, and [`phantom`] makes
//! synthetic cases for testing without patient data.
//!
//! The gradient engine in [`autograd`] is self-contained and runs on one thread,
//! so training is reproducible from the configured seed.

pub mod augment;
pub mod autograd;
pub mod blocks;
pub mod cascade;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod evaluate;
pub mod infer;
pub mod loss;
pub mod metrics;
pub mod nifti;
pub mod nn;
pub mod phantom;
pub mod preprocess;
pub mod train;
pub mod volume;

pub use error::{Error, Result};

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/introduction.md")]
mod book_introduction {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/volumes.md")]
mod book_volumes {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/preprocessing.md")]
mod book_preprocessing {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/augmentation.md")]
mod book_augmentation {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/blocks.md")]
mod book_blocks {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/cascade.md")]
mod book_cascade {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/loss.md")]
mod book_loss {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/training.md")]
mod book_training {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/evaluation.md")]
mod book_evaluation {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/cli.md")]
mod book_cli {}
